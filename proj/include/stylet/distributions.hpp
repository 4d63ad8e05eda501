#pragma once

// Closed-form densities and divergences, the Bernoulli mask prior, and
// brute-force enumeration oracles for the ELBO decomposition and the
// density-ratio identity.

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "stylet/errors.hpp"
#include "stylet/nn.hpp"
#include "stylet/tensor.hpp"

namespace stylet::dist {

constexpr double kHalfLog2Pi = 0.9189385332046727;  // log(2*pi)/2

struct GaussianDiag {
  std::vector<double> mean;
  std::vector<double> stdev;

  void validate() const {
    if (mean.size() != stdev.size()) throw ShapeError("GaussianDiag dims differ");
    for (double s : stdev)
      if (!(s > 0)) throw DomainError("GaussianDiag requires strictly positive stdev");
  }
  int dim() const { return static_cast<int>(mean.size()); }

  double log_density(const std::vector<double>& x) const {
    if (x.size() != mean.size()) throw ShapeError("log_density point dim mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
      double z = (x[i] - mean[i]) / stdev[i];
      acc += -kHalfLog2Pi - std::log(stdev[i]) - 0.5 * z * z;
    }
    return acc;
  }
};

// KL(N(mu, diag sigma^2) || N(0, I)) = sum_i (mu_i^2 + sigma_i^2 - 1 - 2 log sigma_i) / 2
inline double gaussian_kl_to_standard(const GaussianDiag& q) {
  q.validate();
  double acc = 0.0;
  for (size_t i = 0; i < q.mean.size(); ++i) {
    double m = q.mean[i], s = q.stdev[i];
    acc += 0.5 * (m * m + s * s - 1.0 - 2.0 * std::log(s));
  }
  return acc;
}

// Exact log q(x) - log p(x) with p the standard normal.
inline double optimal_log_ratio_gaussian(const GaussianDiag& q, const std::vector<double>& x) {
  q.validate();
  GaussianDiag p;
  p.mean.assign(x.size(), 0.0);
  p.stdev.assign(x.size(), 1.0);
  return q.log_density(x) - p.log_density(x);
}

// ---------------------------------------------------------------------------
// Product-Bernoulli mask prior with a length term.

struct MaskPrior {
  std::map<int, double> rate;      // r_L per supported length, in (0,1)
  std::map<int, double> length_p;  // p(L) over the same support

  void validate() const {
    if (rate.size() != length_p.size()) throw ValueError("mask prior supports differ");
    double total = 0.0;
    for (const auto& [len, p] : length_p) {
      if (rate.find(len) == rate.end()) throw ValueError("mask prior missing rate for length");
      double r = rate.at(len);
      if (!(r > 0.0 && r < 1.0)) throw DomainError("mask rate must lie in (0,1)");
      if (p < 0) throw DomainError("negative length probability");
      total += p;
    }
    if (std::fabs(total - 1.0) > 1e-12) throw DomainError("length probabilities must sum to 1");
  }

  // The loss exposes the rate through alpha = -L log((1-r_L)/r_L), so
  // r_L = sigmoid(alpha / L). Length distribution defaults to uniform over
  // the observed lengths.
  static MaskPrior from_alpha(double alpha, const std::vector<int>& lengths) {
    if (lengths.empty()) throw ValueError("mask prior needs at least one observed length");
    MaskPrior prior;
    std::map<int, int> uniq;
    for (int len : lengths) {
      if (len <= 0) throw ValueError("nonpositive sentence length");
      uniq[len] = 1;
    }
    double p = 1.0 / static_cast<double>(uniq.size());
    for (const auto& [len, one] : uniq) {
      double r = 1.0 / (1.0 + std::exp(-alpha / static_cast<double>(len)));
      prior.rate[len] = r;
      prior.length_p[len] = p;
    }
    // Exact renormalization against accumulated rounding.
    double total = 0.0;
    for (auto& [len, prob] : prior.length_p) total += prob;
    for (auto& [len, prob] : prior.length_p) prob /= total;
    return prior;
  }
};

inline void check_binary_mask(const std::vector<int>& mask) {
  if (mask.empty()) throw ValueError("empty mask");
  for (int m : mask)
    if (m != 0 && m != 1) throw ValueError("mask entries must be 0 or 1");
}

// log p(L) + sum_t [m_t log r_L + (1-m_t) log(1-r_L)]
inline double mask_log_prior(const std::vector<int>& mask, const MaskPrior& prior) {
  check_binary_mask(mask);
  int len = static_cast<int>(mask.size());
  auto rit = prior.rate.find(len);
  auto pit = prior.length_p.find(len);
  if (rit == prior.rate.end() || pit == prior.length_p.end())
    throw DomainError("mask length outside prior support");
  double r = rit->second;
  double acc = std::log(pit->second);
  for (int m : mask) acc += m ? std::log(r) : std::log(1.0 - r);
  return acc;
}

// KL of the delta posterior to the prior: -log p(mask).
inline double delta_mask_kl(const std::vector<int>& mask, const MaskPrior& prior) {
  return -mask_log_prior(mask, prior);
}

// Same quantity in expanded form: log((1-r)/r) * sum(mask) - log p(L) - L log(1-r).
inline double delta_mask_kl_expanded(const std::vector<int>& mask, const MaskPrior& prior) {
  check_binary_mask(mask);
  int len = static_cast<int>(mask.size());
  auto rit = prior.rate.find(len);
  auto pit = prior.length_p.find(len);
  if (rit == prior.rate.end() || pit == prior.length_p.end())
    throw DomainError("mask length outside prior support");
  double r = rit->second;
  int ones = 0;
  for (int m : mask) ones += m;
  return std::log((1.0 - r) / r) * ones - std::log(pit->second) - len * std::log(1.0 - r);
}

// ---------------------------------------------------------------------------
// Divergences over finite distributions.

inline void check_distribution(const std::vector<double>& p) {
  double total = 0.0;
  for (double v : p) {
    if (v < 0) throw DomainError("negative probability");
    total += v;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw DomainError("distribution does not sum to 1");
}

inline double kl_finite(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw DomainError("KL support mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) throw DomainError("KL undefined: q has a zero where p is positive");
    acc += p[i] * std::log(p[i] / q[i]);
  }
  return acc;
}

// Generalized Jensen-Shannon divergence: sum_y w_y KL(p_y || sum_y' w_y' p_y').
inline double general_js(const std::vector<std::vector<double>>& dists,
                         const std::vector<double>& weights) {
  if (dists.empty() || dists.size() != weights.size())
    throw ValueError("general_js needs one weight per distribution");
  double wsum = 0.0;
  for (double w : weights) {
    if (!(w > 0)) throw DomainError("JS weights must be positive");
    wsum += w;
  }
  if (std::fabs(wsum - 1.0) > 1e-9) throw DomainError("JS weights must sum to 1");
  size_t support = dists[0].size();
  std::vector<double> mix(support, 0.0);
  for (size_t y = 0; y < dists.size(); ++y) {
    if (dists[y].size() != support) throw DomainError("JS support mismatch");
    for (size_t i = 0; i < support; ++i) mix[i] += weights[y] * dists[y][i];
  }
  double acc = 0.0;
  for (size_t y = 0; y < dists.size(); ++y) acc += weights[y] * kl_finite(dists[y], mix);
  return acc;
}

// ---------------------------------------------------------------------------
// Discrete toy model: exact verification substrate for the ELBO identity.

struct DiscreteToyModel {
  int nx = 0, ny = 0, nc = 0;
  std::vector<double> p_c;          // [nc]
  std::vector<double> p_x_given_cy; // [nc * ny * nx], row (c,y) over x
  std::vector<double> q_c_given_x;  // [nx * nc], row x over c
  std::vector<double> p_xy;         // [nx * ny], joint

  double px_cy(int c, int y, int x) const { return p_x_given_cy[(c * ny + y) * nx + x]; }
  double qc_x(int x, int c) const { return q_c_given_x[x * nc + c]; }
  double pxy(int x, int y) const { return p_xy[x * ny + y]; }

  void validate() const {
    if (nx <= 0 || ny <= 0 || nc <= 0) throw ValueError("toy model sizes must be positive");
    if (static_cast<int64_t>(nx) * ny * nc > 1000000)
      throw ValueError("toy model too large to enumerate");
    auto check_row = [](const double* row, int n, const char* what) {
      double total = 0.0;
      for (int i = 0; i < n; ++i) {
        if (row[i] < 0) throw ValueError(std::string("negative entry in ") + what);
        total += row[i];
      }
      if (std::fabs(total - 1.0) > 1e-12)
        throw ValueError(std::string("unnormalized table: ") + what);
    };
    check_row(p_c.data(), nc, "p(c)");
    for (int c = 0; c < nc; ++c)
      for (int y = 0; y < ny; ++y) check_row(&p_x_given_cy[(c * ny + y) * nx], nx, "p(x|c,y)");
    for (int x = 0; x < nx; ++x) check_row(&q_c_given_x[x * nc], nc, "q(c|x)");
    check_row(p_xy.data(), nx * ny, "p_D(x,y)");
  }

  static DiscreteToyModel random(int nx, int ny, int nc, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.05, 1.0);
    auto fill_row = [&](double* row, int n) {
      double total = 0.0;
      for (int i = 0; i < n; ++i) {
        row[i] = u(rng);
        total += row[i];
      }
      for (int i = 0; i < n; ++i) row[i] /= total;
    };
    DiscreteToyModel m;
    m.nx = nx;
    m.ny = ny;
    m.nc = nc;
    m.p_c.resize(nc);
    m.p_x_given_cy.resize(static_cast<size_t>(nc) * ny * nx);
    m.q_c_given_x.resize(static_cast<size_t>(nx) * nc);
    m.p_xy.resize(static_cast<size_t>(nx) * ny);
    fill_row(m.p_c.data(), nc);
    for (int c = 0; c < nc; ++c)
      for (int y = 0; y < ny; ++y) fill_row(&m.p_x_given_cy[(c * ny + y) * nx], nx);
    for (int x = 0; x < nx; ++x) fill_row(&m.q_c_given_x[x * nc], nc);
    fill_row(m.p_xy.data(), nx * ny);
    return m;
  }

  nlohmann::json to_json() const {
    return {{"nx", nx},       {"ny", ny},
            {"nc", nc},       {"p_c", p_c},
            {"p_x_given_cy", p_x_given_cy}, {"q_c_given_x", q_c_given_x},
            {"p_xy", p_xy}};
  }
  static DiscreteToyModel from_json(const nlohmann::json& j) {
    DiscreteToyModel m;
    m.nx = j.at("nx");
    m.ny = j.at("ny");
    m.nc = j.at("nc");
    m.p_c = j.at("p_c").get<std::vector<double>>();
    m.p_x_given_cy = j.at("p_x_given_cy").get<std::vector<double>>();
    m.q_c_given_x = j.at("q_c_given_x").get<std::vector<double>>();
    m.p_xy = j.at("p_xy").get<std::vector<double>>();
    return m;
  }
};

struct ElboDecomposition {
  double recon = 0.0;        // average reconstruction loss
  double mi = 0.0;           // average index-code mutual information along style
  double marginal_kl = 0.0;  // KL of the marginal aggregated posterior to the prior
  double js = 0.0;           // generalized JS across per-style aggregated posteriors
  double lhs_elbo_kl = 0.0;  // E_{p_D(x,y)} KL(q(c|x) || p(c)), undecomposed
};

// Exact summation of every term; throws if the decomposition identity
// mi + marginal_kl + js = lhs fails beyond 1e-9.
inline ElboDecomposition enumerate_elbo_decomposition(const DiscreteToyModel& m) {
  m.validate();
  ElboDecomposition out;

  std::vector<double> p_y(m.ny, 0.0);
  for (int x = 0; x < m.nx; ++x)
    for (int y = 0; y < m.ny; ++y) p_y[y] += m.pxy(x, y);

  // Aggregated posteriors per style and marginal.
  std::vector<std::vector<double>> q_c_y(m.ny, std::vector<double>(m.nc, 0.0));
  std::vector<double> q_c(m.nc, 0.0);
  for (int y = 0; y < m.ny; ++y) {
    if (p_y[y] == 0.0) continue;
    for (int x = 0; x < m.nx; ++x) {
      double px_y = m.pxy(x, y) / p_y[y];
      for (int c = 0; c < m.nc; ++c) q_c_y[y][c] += px_y * m.qc_x(x, c);
    }
    for (int c = 0; c < m.nc; ++c) q_c[c] += p_y[y] * q_c_y[y][c];
  }

  for (int x = 0; x < m.nx; ++x)
    for (int y = 0; y < m.ny; ++y) {
      double w = m.pxy(x, y);
      if (w == 0.0) continue;
      for (int c = 0; c < m.nc; ++c) {
        double q = m.qc_x(x, c);
        if (q == 0.0) continue;
        out.recon += w * q * -std::log(m.px_cy(c, y, x));
        out.mi += w * q * std::log(q / q_c_y[y][c]);
        out.lhs_elbo_kl += w * q * std::log(q / m.p_c[c]);
      }
    }

  out.marginal_kl = kl_finite(q_c, m.p_c);
  std::vector<double> positive_w;
  std::vector<std::vector<double>> positive_d;
  for (int y = 0; y < m.ny; ++y)
    if (p_y[y] > 0) {
      positive_w.push_back(p_y[y]);
      positive_d.push_back(q_c_y[y]);
    }
  out.js = general_js(positive_d, positive_w);

  double gap = std::fabs(out.mi + out.marginal_kl + out.js - out.lhs_elbo_kl);
  if (gap > 1e-9)
    throw ValueError("ELBO decomposition identity violated: gap " + std::to_string(gap));
  return out;
}

// ---------------------------------------------------------------------------
// Density-ratio discriminator on 1-dim samples: trains an MLP to separate
// draws from q against the standard normal and returns its logit on a grid.
// At the optimum the logit equals log q - log p.

struct RatioDiscriminator1D {
  nn::Param w1, b1, w2, b2;
  int hidden = 32;

  ad::Tensor logits(ad::Tape& t, nn::Binding& bind, ad::Tensor x) {
    ad::Tensor h = t.relu(t.add(t.matmul(x, bind.use(w1)), bind.use(b1)));
    return t.add(t.matmul(h, bind.use(w2)), bind.use(b2));
  }

  std::vector<double> eval(const std::vector<double>& xs) {
    ad::Tape t;
    nn::Binding bind(t);
    ad::Tensor x = t.leaf({static_cast<int>(xs.size()), 1}, xs);
    ad::Tensor f = logits(t, bind, x);
    return f.value();
  }
};

inline RatioDiscriminator1D train_ratio_discriminator_1d(const GaussianDiag& q, uint64_t seed,
                                                         int steps = 2500, int batch = 512,
                                                         double lr = 1e-2) {
  q.validate();
  if (q.dim() != 1) throw ValueError("1-dim discriminator expects a 1-dim q");
  std::mt19937_64 rng = nn::make_rng(seed, 7001);
  RatioDiscriminator1D d;
  d.w1 = nn::uniform_param("ratio.w1", {1, d.hidden}, rng, -0.3, 0.3);
  d.b1 = nn::zeros_param("ratio.b1", {d.hidden});
  d.w2 = nn::uniform_param("ratio.w2", {d.hidden, 1}, rng, -0.3, 0.3);
  d.b2 = nn::zeros_param("ratio.b2", {1});

  nn::AdamState adam;
  adam.lr = lr;
  std::normal_distribution<double> std_normal(0.0, 1.0);
  std::vector<nn::Param*> params = {&d.w1, &d.b1, &d.w2, &d.b2};

  for (int step = 0; step < steps; ++step) {
    std::vector<double> real(batch), fake(batch);
    for (int i = 0; i < batch; ++i) {
      real[i] = q.mean[0] + q.stdev[0] * std_normal(rng);
      fake[i] = std_normal(rng);
    }
    ad::Tape t;
    nn::Binding bind(t);
    ad::Tensor fr = d.logits(t, bind, t.leaf({batch, 1}, real));
    ad::Tensor ff = d.logits(t, bind, t.leaf({batch, 1}, fake));
    // Maximize E_q[log sig(f)] + E_p[log(1 - sig(f))].
    ad::Tensor loss = t.scale(
        t.add(t.mean(t.log(t.sigmoid(fr))),
              t.mean(t.log(t.sub(t.scalar(1.0), t.sigmoid(ff))))),
        -1.0);
    t.backward(loss);
    bind.collect();
    nn::adam_step(params, adam);
  }
  return d;
}

}  // namespace stylet::dist
