#pragma once

// Parameters, recurrent cells, Adam, and the checkpoint file format.
// Parameters live outside any tape; each training step binds them onto a
// fresh tape and collects gradients back after backward().

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stylet/errors.hpp"
#include "stylet/tensor.hpp"

namespace stylet::nn {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Deterministic stream derivation: every source of randomness in a run is
// keyed by (seed, stream, substream) so epoch-level resume is exact.
inline std::mt19937_64 make_rng(uint64_t seed, uint64_t stream, uint64_t substream = 0) {
  return std::mt19937_64(splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ substream));
}

struct Param {
  std::string name;
  ad::Shape shape;
  std::vector<double> value;
  std::vector<double> grad;

  Param() = default;
  Param(std::string n, ad::Shape s)
      : name(std::move(n)), shape(std::move(s)) {
    value.assign(ad::shape_size(shape), 0.0);
    grad.assign(value.size(), 0.0);
  }
  int size() const { return static_cast<int>(value.size()); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

inline Param uniform_param(std::string name, ad::Shape shape, std::mt19937_64& rng,
                           double lo = -0.08, double hi = 0.08) {
  Param p(std::move(name), std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : p.value) v = dist(rng);
  return p;
}

inline Param zeros_param(std::string name, ad::Shape shape) {
  return Param(std::move(name), std::move(shape));
}

// Binds parameters onto one tape; collect() pushes node gradients back into
// Param::grad. A parameter used twice maps to the same leaf.
class Binding {
 public:
  explicit Binding(ad::Tape& tape) : tape_(&tape) {}

  ad::Tensor use(Param& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    ad::Tensor t = tape_->leaf(p.shape, p.value, true);
    bound_.emplace(&p, t);
    return t;
  }

  // Read-only binding: no gradient flows to the parameter.
  ad::Tensor frozen(const Param& p) {
    return tape_->leaf(p.shape, p.value, false);
  }

  void collect() {
    for (auto& [param, tensor] : bound_) {
      const std::vector<double>& g = tensor.grad();
      if (g.empty()) continue;
      for (size_t i = 0; i < g.size(); ++i) param->grad[i] += g[i];
    }
  }

 private:
  ad::Tape* tape_;
  std::unordered_map<Param*, ad::Tensor> bound_;
};

inline ad::Tensor linear(ad::Tape& t, ad::Tensor x, ad::Tensor w, ad::Tensor b) {
  return t.add(t.matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// LSTM

struct LstmParams {
  Param w;  // [in_dim + hidden, 4*hidden], gate order i,f,g,o
  Param b;  // [4*hidden]
  int in_dim = 0;
  int hidden = 0;
};

// Forget-gate bias starts at +1; weights uniform(-0.08, 0.08).
inline LstmParams make_lstm(const std::string& prefix, int in_dim, int hidden,
                            std::mt19937_64& rng) {
  LstmParams p;
  p.in_dim = in_dim;
  p.hidden = hidden;
  p.w = uniform_param(prefix + ".w", {in_dim + hidden, 4 * hidden}, rng);
  p.b = zeros_param(prefix + ".b", {4 * hidden});
  for (int j = hidden; j < 2 * hidden; ++j) p.b.value[j] = 1.0;
  return p;
}

struct LstmState {
  ad::Tensor h;
  ad::Tensor c;
};

inline LstmState lstm_zero_state(ad::Tape& t, int hidden) {
  std::vector<double> z(hidden, 0.0);
  return {t.leaf({1, hidden}, z), t.leaf({1, hidden}, z)};
}

// Standard gate equations on [1, in_dim] input and [1, hidden] state.
inline LstmState lstm_step(ad::Tape& t, ad::Tensor x, LstmState prev, ad::Tensor w,
                           ad::Tensor b, int hidden) {
  if (x.shape().size() != 2 || prev.h.shape() != ad::Shape{1, hidden})
    throw ShapeError("lstm_step: bad input/state shapes");
  ad::Tensor z = t.concat(x, prev.h, 1);
  ad::Tensor pre = t.add(t.matmul(z, w), b);
  ad::Tensor gi = t.sigmoid(t.slice(pre, 1, 0, hidden));
  ad::Tensor gf = t.sigmoid(t.slice(pre, 1, hidden, hidden));
  ad::Tensor gg = t.tanh(t.slice(pre, 1, 2 * hidden, hidden));
  ad::Tensor go = t.sigmoid(t.slice(pre, 1, 3 * hidden, hidden));
  ad::Tensor c = t.add(t.mul(gf, prev.c), t.mul(gi, gg));
  ad::Tensor h = t.mul(go, t.tanh(c));
  return {h, c};
}

struct BiLstmParams {
  LstmParams fwd;
  LstmParams bwd;
};

inline BiLstmParams make_bilstm(const std::string& prefix, int in_dim, int hidden,
                                std::mt19937_64& rng) {
  return {make_lstm(prefix + ".fwd", in_dim, hidden, rng),
          make_lstm(prefix + ".bwd", in_dim, hidden, rng)};
}

struct BiLstmOut {
  std::vector<ad::Tensor> states;  // per position, [1, 2*hidden] (fwd;bwd)
  ad::Tensor final_concat;         // [1, 2*hidden]: last fwd state ++ last bwd state
};

// Runs both directions over an embedded sequence emb [T, d].
inline BiLstmOut bilstm_run(ad::Tape& t, Binding& bind, ad::Tensor emb,
                            BiLstmParams& p) {
  int steps = emb.shape()[0];
  int hidden = p.fwd.hidden;
  ad::Tensor wf = bind.use(p.fwd.w), bf = bind.use(p.fwd.b);
  ad::Tensor wb = bind.use(p.bwd.w), bb = bind.use(p.bwd.b);

  std::vector<ad::Tensor> hf(steps), hb(steps);
  LstmState s = lstm_zero_state(t, hidden);
  for (int i = 0; i < steps; ++i) {
    s = lstm_step(t, t.slice(emb, 0, i, 1), s, wf, bf, hidden);
    hf[i] = s.h;
  }
  ad::Tensor last_f = s.h;
  s = lstm_zero_state(t, hidden);
  for (int i = steps - 1; i >= 0; --i) {
    s = lstm_step(t, t.slice(emb, 0, i, 1), s, wb, bb, hidden);
    hb[i] = s.h;
  }
  ad::Tensor last_b = s.h;

  BiLstmOut out;
  out.states.resize(steps);
  for (int i = 0; i < steps; ++i) out.states[i] = t.concat(hf[i], hb[i], 1);
  out.final_concat = t.concat(last_f, last_b, 1);
  return out;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  // Moment buffers keyed by parameter name so state survives checkpointing.
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

// Bias-corrected Adam update. Consumes and clears Param::grad. A NaN or Inf
// gradient aborts before any parameter is touched.
inline void adam_step(const std::vector<Param*>& params, AdamState& state) {
  for (Param* p : params)
    for (double g : p->grad)
      if (!std::isfinite(g)) throw DomainError("non-finite gradient for parameter " + p->name);

  state.step += 1;
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (Param* p : params) {
    std::vector<double>& m = state.m[p->name];
    std::vector<double>& v = state.v[p->name];
    if (m.empty()) m.assign(p->value.size(), 0.0);
    if (v.empty()) v.assign(p->value.size(), 0.0);
    if (m.size() != p->value.size())
      throw ShapeError("adam moment shape mismatch for " + p->name);
    for (size_t i = 0; i < p->value.size(); ++i) {
      double g = p->grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      p->value[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    p->zero_grad();
  }
}

inline double grad_norm(const std::vector<Param*>& params) {
  double acc = 0.0;
  for (const Param* p : params)
    for (double g : p->grad) acc += g * g;
  return std::sqrt(acc);
}

inline void zero_grads(const std::vector<Param*>& params) {
  for (Param* p : params) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Checkpoint file: versioned magic, then a named parameter list. Each entry
// is name, shape header, and a little-endian 64-bit float payload.

constexpr char kCheckpointMagic[] = "STYLETCKPT1\n";

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("checkpoint truncated");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double read_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw IoError("checkpoint truncated");
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace detail

struct NamedTensor {
  std::string name;
  ad::Shape shape;
  std::vector<double> data;
};

inline void save_named_tensors(const std::string& path, const std::vector<NamedTensor>& items) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  detail::write_u32(os, static_cast<uint32_t>(items.size()));
  for (const NamedTensor& it : items) {
    detail::write_u32(os, static_cast<uint32_t>(it.name.size()));
    os.write(it.name.data(), static_cast<std::streamsize>(it.name.size()));
    detail::write_u32(os, static_cast<uint32_t>(it.shape.size()));
    for (int d : it.shape) detail::write_u32(os, static_cast<uint32_t>(d));
    for (double v : it.data) detail::write_f64(os, v);
  }
  if (!os) throw IoError("checkpoint write failed: " + path);
}

inline std::vector<NamedTensor> load_named_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[sizeof(kCheckpointMagic) - 1];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError("bad checkpoint magic in " + path);
  uint32_t count = detail::read_u32(is);
  std::vector<NamedTensor> items(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = detail::read_u32(is);
    items[i].name.resize(name_len);
    is.read(items[i].name.data(), name_len);
    uint32_t rank = detail::read_u32(is);
    items[i].shape.resize(rank);
    int64_t sz = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      items[i].shape[d] = static_cast<int>(detail::read_u32(is));
      sz *= items[i].shape[d];
    }
    items[i].data.resize(sz);
    for (int64_t k = 0; k < sz; ++k) items[i].data[k] = detail::read_f64(is);
  }
  return items;
}

inline void save_checkpoint(const std::string& path, const std::vector<Param*>& params) {
  std::vector<NamedTensor> items;
  items.reserve(params.size());
  for (const Param* p : params) items.push_back({p->name, p->shape, p->value});
  save_named_tensors(path, items);
}

inline void load_checkpoint(const std::string& path, const std::vector<Param*>& params) {
  std::vector<NamedTensor> items = load_named_tensors(path);
  std::map<std::string, NamedTensor*> by_name;
  for (NamedTensor& it : items) by_name[it.name] = &it;
  for (Param* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw IoError("checkpoint missing parameter " + p->name);
    if (it->second->shape != p->shape)
      throw IoError("checkpoint shape mismatch for " + p->name);
    p->value = it->second->data;
  }
}

}  // namespace stylet::nn
