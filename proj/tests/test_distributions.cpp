#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "stylet/distributions.hpp"

using namespace stylet;
using Catch::Approx;

namespace {

// Independent JS route used as an oracle: H(mixture) - sum_y w_y H(p_y).
double js_via_entropies(const std::vector<std::vector<double>>& dists,
                        const std::vector<double>& weights) {
  auto entropy = [](const std::vector<double>& p) {
    double h = 0.0;
    for (double v : p)
      if (v > 0) h -= v * std::log(v);
    return h;
  };
  std::vector<double> mix(dists[0].size(), 0.0);
  for (size_t y = 0; y < dists.size(); ++y)
    for (size_t i = 0; i < mix.size(); ++i) mix[i] += weights[y] * dists[y][i];
  double h = entropy(mix);
  for (size_t y = 0; y < dists.size(); ++y) h -= weights[y] * entropy(dists[y]);
  return h;
}

std::vector<double> random_simplex(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<double> p(n);
  double total = 0;
  for (double& v : p) {
    v = u(rng);
    total += v;
  }
  for (double& v : p) v /= total;
  return p;
}

}  // namespace

TEST_CASE("gaussian KL to standard normal") {
  SECTION("identical distributions") {
    dist::GaussianDiag q{{0, 0, 0}, {1, 1, 1}};
    REQUIRE(dist::gaussian_kl_to_standard(q) == Approx(0.0).margin(1e-15));
  }
  SECTION("unit-variance mean shift") {
    dist::GaussianDiag q{{1.0}, {1.0}};
    REQUIRE(dist::gaussian_kl_to_standard(q) == Approx(0.5));
  }
  SECTION("matches a Monte-Carlo estimate within 3 standard errors") {
    std::mt19937_64 rng = nn::make_rng(21, 1);
    dist::GaussianDiag q{{0.4, -1.2, 0.0, 2.1}, {0.6, 1.5, 0.9, 1.1}};
    double closed = dist::gaussian_kl_to_standard(q);

    dist::GaussianDiag p{{0, 0, 0, 0}, {1, 1, 1, 1}};
    std::normal_distribution<double> std_normal(0, 1);
    const int n = 100000;
    double sum = 0, sumsq = 0;
    for (int i = 0; i < n; ++i) {
      std::vector<double> z(4);
      for (int d = 0; d < 4; ++d) z[d] = q.mean[d] + q.stdev[d] * std_normal(rng);
      double v = q.log_density(z) - p.log_density(z);
      sum += v;
      sumsq += v * v;
    }
    double mean = sum / n;
    double se = std::sqrt((sumsq / n - mean * mean) / n);
    REQUIRE(std::fabs(closed - mean) <= 3 * se);
  }
  SECTION("nonpositive sigma rejected") {
    dist::GaussianDiag q{{0.0}, {0.0}};
    REQUIRE_THROWS_AS(dist::gaussian_kl_to_standard(q), DomainError);
  }
}

TEST_CASE("mask prior log density") {
  SECTION("symmetric rate over two lengths") {
    dist::MaskPrior prior;
    prior.rate = {{1, 0.5}, {2, 0.5}};
    prior.length_p = {{1, 0.5}, {2, 0.5}};
    prior.validate();
    REQUIRE(dist::mask_log_prior({1, 0}, prior) == Approx(-3.0 * std::log(2.0)));
  }
  SECTION("all-ones product form") {
    dist::MaskPrior prior;
    prior.rate = {{3, 0.9}};
    prior.length_p = {{3, 1.0}};
    REQUIRE(dist::mask_log_prior({1, 1, 1}, prior) == Approx(3.0 * std::log(0.9)));
  }
  SECTION("exponentiated values over the hypercube sum to p(L)") {
    dist::MaskPrior prior = dist::MaskPrior::from_alpha(0.19, {3, 5, 8});
    for (int len : {3, 5, 8}) {
      double total = 0.0;
      for (int bits = 0; bits < (1 << len); ++bits) {
        std::vector<int> mask(len);
        for (int t = 0; t < len; ++t) mask[t] = (bits >> t) & 1;
        total += std::exp(dist::mask_log_prior(mask, prior));
      }
      REQUIRE(total == Approx(prior.length_p.at(len)).margin(1e-12));
    }
  }
  SECTION("length outside support") {
    dist::MaskPrior prior = dist::MaskPrior::from_alpha(0.15, {4});
    REQUIRE_THROWS_AS(dist::mask_log_prior({1, 0}, prior), DomainError);
  }
}

TEST_CASE("delta mask KL") {
  SECTION("rate one half gives L log 2") {
    dist::MaskPrior prior;
    prior.rate = {{4, 0.5}};
    prior.length_p = {{4, 1.0}};
    REQUIRE(dist::delta_mask_kl({1, 0, 1, 1}, prior) == Approx(4.0 * std::log(2.0)));
  }
  SECTION("both algebraic forms agree on random masks") {
    std::mt19937_64 rng = nn::make_rng(22, 2);
    dist::MaskPrior prior = dist::MaskPrior::from_alpha(0.225, {2, 3, 5, 7, 9, 12});
    std::vector<int> lengths = {2, 3, 5, 7, 9, 12};
    for (int trial = 0; trial < 100; ++trial) {
      int len = lengths[trial % lengths.size()];
      std::vector<int> mask(len);
      for (int& m : mask) m = static_cast<int>(rng() & 1);
      double direct = dist::delta_mask_kl(mask, prior);
      double expanded = dist::delta_mask_kl_expanded(mask, prior);
      REQUIRE(std::fabs(direct - expanded) <= 1e-12);
    }
  }
  SECTION("style-mask substitution yields the compactness coefficient") {
    // As a function of the style mask, the KL varies as log(r/(1-r)) * sum(s).
    dist::MaskPrior prior = dist::MaskPrior::from_alpha(0.9, {6});
    double r = prior.rate.at(6);
    auto content_from_style = [](const std::vector<int>& s) {
      std::vector<int> c(s.size());
      for (size_t i = 0; i < s.size(); ++i) c[i] = 1 - s[i];
      return c;
    };
    std::vector<int> s1 = {1, 0, 0, 1, 0, 1};  // three style tokens
    std::vector<int> s2 = {0, 0, 0, 1, 0, 0};  // one style token
    double k1 = dist::delta_mask_kl(content_from_style(s1), prior);
    double k2 = dist::delta_mask_kl(content_from_style(s2), prior);
    double coeff = std::log(r / (1.0 - r));
    REQUIRE(k1 - k2 == Approx(coeff * (3 - 1)).margin(1e-12));
  }
}

TEST_CASE("generalized Jensen-Shannon divergence") {
  SECTION("identical distributions align to zero") {
    std::vector<double> p = {0.2, 0.5, 0.3};
    REQUIRE(dist::general_js({p, p, p}, {0.3, 0.3, 0.4}) == Approx(0.0).margin(1e-15));
  }
  SECTION("disjoint point masses reach log 2") {
    REQUIRE(dist::general_js({{1, 0}, {0, 1}}, {0.5, 0.5}) == Approx(std::log(2.0)));
  }
  SECTION("three-way case matches the entropy-form oracle") {
    std::mt19937_64 rng = nn::make_rng(23, 3);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<std::vector<double>> dists = {random_simplex(6, rng), random_simplex(6, rng),
                                                random_simplex(6, rng)};
      std::vector<double> w = random_simplex(3, rng);
      double a = dist::general_js(dists, w);
      double b = js_via_entropies(dists, w);
      REQUIRE(std::fabs(a - b) <= 1e-12);
      REQUIRE(a >= 0.0);
      REQUIRE(a <= std::log(3.0) + 1e-12);
    }
  }
  SECTION("support mismatch rejected") {
    REQUIRE_THROWS_AS(dist::general_js({{1, 0}, {0.5, 0.25, 0.25}}, {0.5, 0.5}), DomainError);
  }
}

TEST_CASE("ELBO decomposition enumeration oracle") {
  SECTION("posterior equal to prior zeroes every KL-side term") {
    std::mt19937_64 rng = nn::make_rng(24, 4);
    dist::DiscreteToyModel m = dist::DiscreteToyModel::random(4, 2, 3, rng);
    for (int x = 0; x < m.nx; ++x)
      for (int c = 0; c < m.nc; ++c) m.q_c_given_x[x * m.nc + c] = m.p_c[c];
    dist::ElboDecomposition d = dist::enumerate_elbo_decomposition(m);
    REQUIRE(d.mi == Approx(0.0).margin(1e-12));
    REQUIRE(d.marginal_kl == Approx(0.0).margin(1e-12));
    REQUIRE(d.js == Approx(0.0).margin(1e-12));
  }
  SECTION("single style has zero JS") {
    std::mt19937_64 rng = nn::make_rng(24, 5);
    dist::DiscreteToyModel m = dist::DiscreteToyModel::random(5, 1, 4, rng);
    dist::ElboDecomposition d = dist::enumerate_elbo_decomposition(m);
    REQUIRE(d.js == Approx(0.0).margin(1e-12));
  }
  SECTION("identity holds over random models") {
    std::mt19937_64 rng = nn::make_rng(24, 6);
    for (int trial = 0; trial < 120; ++trial) {
      int nx = 2 + static_cast<int>(rng() % 5);
      int ny = 1 + static_cast<int>(rng() % 3);
      int nc = 2 + static_cast<int>(rng() % 4);
      dist::DiscreteToyModel m = dist::DiscreteToyModel::random(nx, ny, nc, rng);
      dist::ElboDecomposition d = dist::enumerate_elbo_decomposition(m);
      REQUIRE(std::fabs(d.mi + d.marginal_kl + d.js - d.lhs_elbo_kl) <= 1e-9);
      REQUIRE(d.mi >= -1e-12);
      REQUIRE(d.marginal_kl >= -1e-12);
      REQUIRE(d.js >= -1e-12);
      REQUIRE(d.js <= std::log(static_cast<double>(ny)) + 1e-12);
    }
  }
  SECTION("unnormalized tables rejected") {
    std::mt19937_64 rng = nn::make_rng(24, 7);
    dist::DiscreteToyModel m = dist::DiscreteToyModel::random(3, 2, 2, rng);
    m.p_c[0] += 0.1;
    REQUIRE_THROWS_AS(dist::enumerate_elbo_decomposition(m), ValueError);
  }
  SECTION("JSON round trip") {
    std::mt19937_64 rng = nn::make_rng(24, 8);
    dist::DiscreteToyModel m = dist::DiscreteToyModel::random(4, 2, 3, rng);
    dist::DiscreteToyModel m2 = dist::DiscreteToyModel::from_json(m.to_json());
    REQUIRE(m2.q_c_given_x == m.q_c_given_x);
    dist::ElboDecomposition a = dist::enumerate_elbo_decomposition(m);
    dist::ElboDecomposition b = dist::enumerate_elbo_decomposition(m2);
    REQUIRE(a.lhs_elbo_kl == b.lhs_elbo_kl);
  }
}

TEST_CASE("optimal gaussian log ratio") {
  SECTION("identical densities give zero everywhere") {
    dist::GaussianDiag q{{0.0}, {1.0}};
    for (double x : {-2.0, 0.0, 1.5})
      REQUIRE(dist::optimal_log_ratio_gaussian(q, {x}) == Approx(0.0).margin(1e-14));
  }
  SECTION("unit-variance shift gives mu*x - mu^2/2") {
    dist::GaussianDiag q{{1.0}, {1.0}};
    for (double x : {-3.0, -0.5, 0.0, 2.0})
      REQUIRE(dist::optimal_log_ratio_gaussian(q, {x}) == Approx(x - 0.5));
  }
}

TEST_CASE("trained discriminator approaches the analytic log ratio", "[slow]") {
  dist::GaussianDiag q{{1.0}, {1.0}};
  dist::RatioDiscriminator1D d = dist::train_ratio_discriminator_1d(q, 31);
  std::vector<double> grid;
  for (int i = 0; i <= 60; ++i) grid.push_back(-3.0 + i * 0.1);
  std::vector<double> f = d.eval(grid);
  double mae = 0.0;
  for (size_t i = 0; i < grid.size(); ++i)
    mae += std::fabs(f[i] - dist::optimal_log_ratio_gaussian(q, {grid[i]}));
  mae /= grid.size();
  REQUIRE(mae <= 0.1);
}
