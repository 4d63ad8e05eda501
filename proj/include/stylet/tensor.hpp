#pragma once

// Reverse-mode automatic differentiation over dense 64-bit tensors.
// A Tape is an append-only record of operations; backward() walks it in
// reverse creation order, which is a valid topological order by construction.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "stylet/errors.hpp"

namespace stylet::ad {

using Shape = std::vector<int>;

inline int shape_size(const Shape& s) {
  int n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("nonpositive dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

enum class Op {
  leaf,
  matmul,
  add,
  mul,
  concat,
  sigmoid,
  tanh_fn,
  relu,
  softmax,
  log_softmax,
  embed_lookup,
  pick,
  slice,
  sum,
  mean,
  log_fn,
  exp_fn,
  ste_binarize,
  reshape,
};

// Per-op extras: ids for embed_lookup/pick, axis/start/len for slice/concat.
struct OpAux {
  std::vector<int> ids;
  int axis = 0;
  int start = 0;
  int len = 0;
};

struct Node {
  Op op = Op::leaf;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily on first backward
  bool requires_grad = false;
  std::vector<int> inputs;
  OpAux aux;
};

class Tape;

// Lightweight handle to a node on a tape.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Shape& shape() const;
  const std::vector<double>& value() const;
  const std::vector<double>& grad() const;
  bool requires_grad() const;
  int size() const { return shape_size(shape()); }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

  // Scalar accessor; throws unless the tensor holds exactly one value.
  double item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return value()[0];
  }

  // True when every entry is finite.
  bool is_finite() const {
    for (double v : value())
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int size() const { return static_cast<int>(nodes_.size()); }
  Node& node(int id) { return nodes_[id]; }
  const Node& node(int id) const { return nodes_[id]; }

  Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (static_cast<int>(data.size()) != shape_size(shape))
      throw ShapeError("leaf data length does not match shape " + shape_str(shape));
    Node n;
    n.op = Op::leaf;
    n.shape = std::move(shape);
    n.value = std::move(data);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  Tensor scalar(double v, bool requires_grad = false) {
    return leaf({1}, {v}, requires_grad);
  }

  // Generic entry point: validates shapes, runs the forward rule and appends
  // the result with enough saved context for backward.
  Tensor apply(Op op, const std::vector<Tensor>& inputs, OpAux aux = {});

  // Named wrappers.
  Tensor matmul(Tensor a, Tensor b) { return apply(Op::matmul, {a, b}); }
  Tensor add(Tensor a, Tensor b) { return apply(Op::add, {a, b}); }
  Tensor mul(Tensor a, Tensor b) { return apply(Op::mul, {a, b}); }
  Tensor concat(Tensor a, Tensor b, int axis) {
    OpAux aux;
    aux.axis = axis;
    return apply(Op::concat, {a, b}, aux);
  }
  Tensor sigmoid(Tensor x) { return apply(Op::sigmoid, {x}); }
  Tensor tanh(Tensor x) { return apply(Op::tanh_fn, {x}); }
  Tensor relu(Tensor x) { return apply(Op::relu, {x}); }
  Tensor softmax(Tensor x) { return apply(Op::softmax, {x}); }
  Tensor log_softmax(Tensor x) { return apply(Op::log_softmax, {x}); }
  Tensor embed_lookup(Tensor table, const std::vector<int>& ids) {
    OpAux aux;
    aux.ids = ids;
    return apply(Op::embed_lookup, {table}, aux);
  }
  Tensor pick(Tensor x, const std::vector<int>& ids) {
    OpAux aux;
    aux.ids = ids;
    return apply(Op::pick, {x}, aux);
  }
  Tensor slice(Tensor x, int axis, int start, int len) {
    OpAux aux;
    aux.axis = axis;
    aux.start = start;
    aux.len = len;
    return apply(Op::slice, {x}, aux);
  }
  Tensor sum(Tensor x) { return apply(Op::sum, {x}); }
  Tensor mean(Tensor x) { return apply(Op::mean, {x}); }
  Tensor log(Tensor x) { return apply(Op::log_fn, {x}); }
  Tensor exp(Tensor x) { return apply(Op::exp_fn, {x}); }
  Tensor ste_binarize(Tensor x) { return apply(Op::ste_binarize, {x}); }
  Tensor reshape(Tensor x, Shape new_shape) {
    OpAux aux;
    aux.ids = std::move(new_shape);
    return apply(Op::reshape, {x}, aux);
  }

  Tensor sub(Tensor a, Tensor b) {
    if (a.size() == 1 && b.size() > 1) return add(scale(b, -1.0), a);
    return add(a, scale(b, -1.0));
  }
  Tensor scale(Tensor x, double k) { return mul(x, scalar(k)); }
  Tensor add_n(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ValueError("add_n of empty list");
    Tensor acc = xs[0];
    for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return acc;
  }

  // Accumulates d(loss)/d(node) for every node reachable from `loss`.
  // Gradients add up across calls until zero_grad().
  void backward(Tensor loss);

  void zero_grad() {
    for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
  }

 private:
  Tensor push(Node n) {
    nodes_.push_back(std::move(n));
    return Tensor(this, static_cast<int>(nodes_.size()) - 1);
  }
  void backward_node(int id, std::vector<std::vector<double>>& scratch);

  std::vector<Node> nodes_;
};

inline const Shape& Tensor::shape() const { return tape_->node(id_).shape; }
inline const std::vector<double>& Tensor::value() const { return tape_->node(id_).value; }
inline const std::vector<double>& Tensor::grad() const {
  const Node& n = tape_->node(id_);
  static const std::vector<double> kEmpty;
  return n.grad.empty() ? kEmpty : n.grad;
}
inline bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }

namespace detail {

// Broadcast classes supported by add/mul: equal shapes, scalar second
// argument, or a row vector added to every row of a matrix.
enum class Bcast { same, scalar_rhs, row_rhs };

inline Bcast bcast_kind(const Shape& a, const Shape& b, const char* opname) {
  if (a == b) return Bcast::same;
  if (shape_size(b) == 1) return Bcast::scalar_rhs;
  if (a.size() == 2) {
    int cols = a[1];
    if ((b.size() == 1 && b[0] == cols) || (b.size() == 2 && b[0] == 1 && b[1] == cols))
      return Bcast::row_rhs;
  }
  throw ShapeError(std::string(opname) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

// Rows/cols view: rank-1 tensors behave as a single row.
inline int view_rows(const Shape& s) { return s.size() == 2 ? s[0] : 1; }
inline int view_cols(const Shape& s) {
  if (s.size() == 1) return s[0];
  if (s.size() == 2) return s[1];
  throw ShapeError("expected rank 1 or 2 tensor, got " + shape_str(s));
}

}  // namespace detail

inline Tensor Tape::apply(Op op, const std::vector<Tensor>& inputs, OpAux aux) {
  for (const Tensor& t : inputs)
    if (t.tape() != this) throw ValueError("input tensor belongs to a different graph");

  auto arity = [&](size_t n) {
    if (inputs.size() != n)
      throw ValueError("op expects " + std::to_string(n) + " inputs, got " +
                       std::to_string(inputs.size()));
  };

  Node out;
  out.op = op;
  out.inputs.reserve(inputs.size());
  for (const Tensor& t : inputs) {
    out.inputs.push_back(t.id());
    out.requires_grad = out.requires_grad || t.requires_grad();
  }
  out.aux = std::move(aux);

  switch (op) {
    case Op::leaf:
      throw ValueError("leaf nodes are created via Tape::leaf");
    case Op::matmul: {
      arity(2);
      const Node& a = node(inputs[0].id());
      const Node& b = node(inputs[1].id());
      if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape) + " and " +
                         shape_str(b.shape));
      int m = a.shape[0], k = a.shape[1], n = b.shape[1];
      out.shape = {m, n};
      out.value.assign(static_cast<size_t>(m) * n, 0.0);
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          double av = a.value[i * k + p];
          if (av == 0.0) continue;
          const double* brow = &b.value[p * n];
          double* orow = &out.value[i * n];
          for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
      break;
    }
    case Op::add:
    case Op::mul: {
      arity(2);
      const Node& a = node(inputs[0].id());
      const Node& b = node(inputs[1].id());
      detail::Bcast bc = detail::bcast_kind(a.shape, b.shape, op == Op::add ? "add" : "mul");
      out.shape = a.shape;
      out.value = a.value;
      int n = static_cast<int>(a.value.size());
      if (bc == detail::Bcast::same) {
        for (int i = 0; i < n; ++i)
          out.value[i] = op == Op::add ? a.value[i] + b.value[i] : a.value[i] * b.value[i];
      } else if (bc == detail::Bcast::scalar_rhs) {
        double s = b.value[0];
        for (int i = 0; i < n; ++i)
          out.value[i] = op == Op::add ? a.value[i] + s : a.value[i] * s;
      } else {
        int cols = a.shape[1];
        for (int i = 0; i < n; ++i) {
          double s = b.value[i % cols];
          out.value[i] = op == Op::add ? a.value[i] + s : a.value[i] * s;
        }
      }
      break;
    }
    case Op::concat: {
      arity(2);
      const Node& a = node(inputs[0].id());
      const Node& b = node(inputs[1].id());
      if (a.shape.size() != 2 || b.shape.size() != 2)
        throw ShapeError("concat expects rank-2 tensors");
      int axis = out.aux.axis;
      if (axis != 0 && axis != 1) throw ShapeError("concat axis must be 0 or 1");
      int other = 1 - axis;
      if (a.shape[other] != b.shape[other])
        throw ShapeError("concat: shapes " + shape_str(a.shape) + " and " + shape_str(b.shape) +
                         " differ off-axis");
      out.shape = a.shape;
      out.shape[axis] += b.shape[axis];
      out.value.resize(static_cast<size_t>(out.shape[0]) * out.shape[1]);
      if (axis == 0) {
        std::copy(a.value.begin(), a.value.end(), out.value.begin());
        std::copy(b.value.begin(), b.value.end(), out.value.begin() + a.value.size());
      } else {
        int ra = a.shape[1], rb = b.shape[1];
        for (int i = 0; i < out.shape[0]; ++i) {
          std::copy_n(&a.value[i * ra], ra, &out.value[i * (ra + rb)]);
          std::copy_n(&b.value[i * rb], rb, &out.value[i * (ra + rb) + ra]);
        }
      }
      break;
    }
    case Op::sigmoid:
    case Op::tanh_fn:
    case Op::relu:
    case Op::log_fn:
    case Op::exp_fn:
    case Op::ste_binarize: {
      arity(1);
      const Node& a = node(inputs[0].id());
      out.shape = a.shape;
      out.value.resize(a.value.size());
      for (size_t i = 0; i < a.value.size(); ++i) {
        double x = a.value[i];
        switch (op) {
          case Op::sigmoid:
            out.value[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                  : std::exp(x) / (1.0 + std::exp(x));
            break;
          case Op::tanh_fn:
            out.value[i] = std::tanh(x);
            break;
          case Op::relu:
            out.value[i] = x > 0 ? x : 0.0;
            break;
          case Op::log_fn:
            if (x <= 0) throw DomainError("log of nonpositive value");
            out.value[i] = std::log(x);
            break;
          case Op::exp_fn:
            if (x > 709.0) throw DomainError("exp overflow");
            out.value[i] = std::exp(x);
            break;
          case Op::ste_binarize:
            out.value[i] = x > 0.5 ? 1.0 : 0.0;
            break;
          default:
            break;
        }
      }
      break;
    }
    case Op::softmax:
    case Op::log_softmax: {
      arity(1);
      const Node& a = node(inputs[0].id());
      int rows = detail::view_rows(a.shape);
      int cols = detail::view_cols(a.shape);
      out.shape = a.shape;
      out.value.resize(a.value.size());
      for (int r = 0; r < rows; ++r) {
        const double* in = &a.value[r * cols];
        double* o = &out.value[r * cols];
        double mx = *std::max_element(in, in + cols);
        double z = 0.0;
        for (int j = 0; j < cols; ++j) z += std::exp(in[j] - mx);
        double lz = std::log(z) + mx;
        for (int j = 0; j < cols; ++j)
          o[j] = op == Op::softmax ? std::exp(in[j] - lz) : in[j] - lz;
      }
      break;
    }
    case Op::embed_lookup: {
      arity(1);
      const Node& table = node(inputs[0].id());
      if (table.shape.size() != 2) throw ShapeError("embed_lookup table must be rank 2");
      int v = table.shape[0], d = table.shape[1];
      int t = static_cast<int>(out.aux.ids.size());
      if (t == 0) throw ValueError("embed_lookup with empty id list");
      for (int id : out.aux.ids)
        if (id < 0 || id >= v) throw ValueError("embed_lookup id out of range");
      out.shape = {t, d};
      out.value.resize(static_cast<size_t>(t) * d);
      for (int i = 0; i < t; ++i)
        std::copy_n(&table.value[out.aux.ids[i] * d], d, &out.value[i * d]);
      break;
    }
    case Op::pick: {
      arity(1);
      const Node& a = node(inputs[0].id());
      if (a.shape.size() != 2) throw ShapeError("pick expects a rank-2 tensor");
      int rows = a.shape[0], cols = a.shape[1];
      if (static_cast<int>(out.aux.ids.size()) != rows)
        throw ShapeError("pick: id count must equal row count");
      for (int id : out.aux.ids)
        if (id < 0 || id >= cols) throw ValueError("pick id out of range");
      out.shape = {rows};
      out.value.resize(rows);
      for (int i = 0; i < rows; ++i) out.value[i] = a.value[i * cols + out.aux.ids[i]];
      break;
    }
    case Op::slice: {
      arity(1);
      const Node& a = node(inputs[0].id());
      int axis = out.aux.axis, start = out.aux.start, len = out.aux.len;
      if (a.shape.size() == 1) {
        if (axis != 0 || start < 0 || len <= 0 || start + len > a.shape[0])
          throw ShapeError("slice out of range");
        out.shape = {len};
        out.value.assign(a.value.begin() + start, a.value.begin() + start + len);
      } else if (a.shape.size() == 2) {
        int rows = a.shape[0], cols = a.shape[1];
        if (axis == 0) {
          if (start < 0 || len <= 0 || start + len > rows) throw ShapeError("slice out of range");
          out.shape = {len, cols};
          out.value.assign(a.value.begin() + static_cast<size_t>(start) * cols,
                           a.value.begin() + static_cast<size_t>(start + len) * cols);
        } else if (axis == 1) {
          if (start < 0 || len <= 0 || start + len > cols) throw ShapeError("slice out of range");
          out.shape = {rows, len};
          out.value.resize(static_cast<size_t>(rows) * len);
          for (int i = 0; i < rows; ++i)
            std::copy_n(&a.value[i * cols + start], len, &out.value[i * len]);
        } else {
          throw ShapeError("slice axis must be 0 or 1");
        }
      } else {
        throw ShapeError("slice expects rank 1 or 2");
      }
      break;
    }
    case Op::sum:
    case Op::mean: {
      arity(1);
      const Node& a = node(inputs[0].id());
      double acc = std::accumulate(a.value.begin(), a.value.end(), 0.0);
      out.shape = {1};
      out.value = {op == Op::sum ? acc : acc / static_cast<double>(a.value.size())};
      break;
    }
    case Op::reshape: {
      arity(1);
      const Node& a = node(inputs[0].id());
      Shape ns = out.aux.ids;
      if (shape_size(ns) != static_cast<int>(a.value.size()))
        throw ShapeError("reshape size mismatch: " + shape_str(a.shape) + " to " + shape_str(ns));
      out.shape = std::move(ns);
      out.value = a.value;
      break;
    }
  }
  return push(std::move(out));
}

inline void Tape::backward_node(int id, std::vector<std::vector<double>>& scratch) {
  Node& n = nodes_[id];
  if (n.op == Op::leaf || !n.requires_grad || scratch[id].empty()) return;
  const std::vector<double>& g = scratch[id];

  auto in_grad = [&](int k) -> std::vector<double>& {
    int in_id = n.inputs[k];
    if (scratch[in_id].empty()) scratch[in_id].assign(nodes_[in_id].value.size(), 0.0);
    return scratch[in_id];
  };
  auto in_node = [&](int k) -> Node& { return nodes_[n.inputs[k]]; };

  switch (n.op) {
    case Op::matmul: {
      Node& a = in_node(0);
      Node& b = in_node(1);
      int m = a.shape[0], k = a.shape[1], c = b.shape[1];
      if (a.requires_grad) {
        std::vector<double>& da = in_grad(0);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < c; ++j) {
            double gv = g[i * c + j];
            if (gv == 0.0) continue;
            for (int p = 0; p < k; ++p) da[i * k + p] += gv * b.value[p * c + j];
          }
      }
      if (b.requires_grad) {
        std::vector<double>& db = in_grad(1);
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double av = a.value[i * k + p];
            if (av == 0.0) continue;
            for (int j = 0; j < c; ++j) db[p * c + j] += av * g[i * c + j];
          }
      }
      break;
    }
    case Op::add:
    case Op::mul: {
      Node& a = in_node(0);
      Node& b = in_node(1);
      detail::Bcast bc = detail::bcast_kind(a.shape, b.shape, "add/mul");
      int sz = static_cast<int>(a.value.size());
      if (a.requires_grad) {
        std::vector<double>& da = in_grad(0);
        if (n.op == Op::add) {
          for (int i = 0; i < sz; ++i) da[i] += g[i];
        } else if (bc == detail::Bcast::same) {
          for (int i = 0; i < sz; ++i) da[i] += g[i] * b.value[i];
        } else if (bc == detail::Bcast::scalar_rhs) {
          for (int i = 0; i < sz; ++i) da[i] += g[i] * b.value[0];
        } else {
          int cols = a.shape[1];
          for (int i = 0; i < sz; ++i) da[i] += g[i] * b.value[i % cols];
        }
      }
      if (b.requires_grad) {
        std::vector<double>& db = in_grad(1);
        if (bc == detail::Bcast::same) {
          for (int i = 0; i < sz; ++i)
            db[i] += n.op == Op::add ? g[i] : g[i] * a.value[i];
        } else if (bc == detail::Bcast::scalar_rhs) {
          double acc = 0.0;
          for (int i = 0; i < sz; ++i) acc += n.op == Op::add ? g[i] : g[i] * a.value[i];
          db[0] += acc;
        } else {
          int cols = a.shape[1];
          for (int i = 0; i < sz; ++i)
            db[i % cols] += n.op == Op::add ? g[i] : g[i] * a.value[i];
        }
      }
      break;
    }
    case Op::concat: {
      Node& a = in_node(0);
      Node& b = in_node(1);
      int axis = n.aux.axis;
      if (axis == 0) {
        if (a.requires_grad) {
          std::vector<double>& da = in_grad(0);
          for (size_t i = 0; i < a.value.size(); ++i) da[i] += g[i];
        }
        if (b.requires_grad) {
          std::vector<double>& db = in_grad(1);
          for (size_t i = 0; i < b.value.size(); ++i) db[i] += g[a.value.size() + i];
        }
      } else {
        int ra = a.shape[1], rb = b.shape[1], rows = a.shape[0];
        if (a.requires_grad) {
          std::vector<double>& da = in_grad(0);
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < ra; ++j) da[i * ra + j] += g[i * (ra + rb) + j];
        }
        if (b.requires_grad) {
          std::vector<double>& db = in_grad(1);
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < rb; ++j) db[i * rb + j] += g[i * (ra + rb) + ra + j];
        }
      }
      break;
    }
    case Op::sigmoid: {
      std::vector<double>& da = in_grad(0);
      for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * n.value[i] * (1.0 - n.value[i]);
      break;
    }
    case Op::tanh_fn: {
      std::vector<double>& da = in_grad(0);
      for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
      break;
    }
    case Op::relu: {
      Node& a = in_node(0);
      std::vector<double>& da = in_grad(0);
      for (size_t i = 0; i < g.size(); ++i)
        if (a.value[i] > 0) da[i] += g[i];
      break;
    }
    case Op::log_fn: {
      Node& a = in_node(0);
      std::vector<double>& da = in_grad(0);
      for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] / a.value[i];
      break;
    }
    case Op::exp_fn: {
      std::vector<double>& da = in_grad(0);
      for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * n.value[i];
      break;
    }
    case Op::ste_binarize: {
      // Straight-through: identity gradient past the hard threshold.
      std::vector<double>& da = in_grad(0);
      for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      break;
    }
    case Op::softmax: {
      Node& a = in_node(0);
      int rows = detail::view_rows(a.shape), cols = detail::view_cols(a.shape);
      std::vector<double>& da = in_grad(0);
      for (int r = 0; r < rows; ++r) {
        const double* y = &n.value[r * cols];
        const double* gy = &g[r * cols];
        double dot = 0.0;
        for (int j = 0; j < cols; ++j) dot += gy[j] * y[j];
        for (int j = 0; j < cols; ++j) da[r * cols + j] += y[j] * (gy[j] - dot);
      }
      break;
    }
    case Op::log_softmax: {
      Node& a = in_node(0);
      int rows = detail::view_rows(a.shape), cols = detail::view_cols(a.shape);
      std::vector<double>& da = in_grad(0);
      for (int r = 0; r < rows; ++r) {
        const double* y = &n.value[r * cols];
        const double* gy = &g[r * cols];
        double gsum = 0.0;
        for (int j = 0; j < cols; ++j) gsum += gy[j];
        for (int j = 0; j < cols; ++j) da[r * cols + j] += gy[j] - std::exp(y[j]) * gsum;
      }
      break;
    }
    case Op::embed_lookup: {
      Node& table = in_node(0);
      int d = table.shape[1];
      std::vector<double>& dt = in_grad(0);
      for (size_t i = 0; i < n.aux.ids.size(); ++i) {
        int row = n.aux.ids[i];
        for (int j = 0; j < d; ++j) dt[row * d + j] += g[i * d + j];
      }
      break;
    }
    case Op::pick: {
      Node& a = in_node(0);
      int cols = a.shape[1];
      std::vector<double>& da = in_grad(0);
      for (size_t i = 0; i < n.aux.ids.size(); ++i) da[i * cols + n.aux.ids[i]] += g[i];
      break;
    }
    case Op::slice: {
      Node& a = in_node(0);
      std::vector<double>& da = in_grad(0);
      int axis = n.aux.axis, start = n.aux.start, len = n.aux.len;
      if (a.shape.size() == 1 || axis == 0) {
        int cols = a.shape.size() == 2 ? a.shape[1] : 1;
        for (size_t i = 0; i < g.size(); ++i) da[static_cast<size_t>(start) * cols + i] += g[i];
      } else {
        int cols = a.shape[1];
        int rows = a.shape[0];
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < len; ++j) da[i * cols + start + j] += g[i * len + j];
      }
      break;
    }
    case Op::sum: {
      std::vector<double>& da = in_grad(0);
      for (double& v : da) v += g[0];
      break;
    }
    case Op::mean: {
      std::vector<double>& da = in_grad(0);
      double s = g[0] / static_cast<double>(da.size());
      for (double& v : da) v += s;
      break;
    }
    case Op::reshape: {
      std::vector<double>& da = in_grad(0);
      for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      break;
    }
    case Op::leaf:
      break;
  }
}

inline void Tape::backward(Tensor loss) {
  if (loss.tape() != this) throw ValueError("backward on a tensor from another graph");
  if (loss.size() != 1)
    throw ValueError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  // One pass propagates in scratch buffers and commits at the end, so
  // repeated backward calls accumulate independent contributions.
  std::vector<std::vector<double>> scratch(nodes_.size());
  scratch[loss.id()].assign(1, 1.0);
  for (int id = loss.id(); id >= 0; --id) backward_node(id, scratch);
  for (size_t id = 0; id < scratch.size(); ++id) {
    if (scratch[id].empty() || !nodes_[id].requires_grad) continue;
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    for (size_t i = 0; i < scratch[id].size(); ++i) n.grad[i] += scratch[id][i];
  }
}

// Max relative error between analytic gradients and central differences of
// a scalar-valued function of one tensor. `f` must rebuild its computation
// on the tape it is handed.
inline double grad_check(const std::function<Tensor(Tape&, Tensor)>& f, const Shape& shape,
                         const std::vector<double>& x0, double eps = 1e-5) {
  if (eps <= 0 || eps > 1e-2) throw ValueError("grad_check eps must lie in (0, 1e-2]");
  auto eval = [&](const std::vector<double>& x) {
    Tape tape;
    Tensor loss = f(tape, tape.leaf(shape, x, true));
    double v = loss.item();
    if (std::isnan(v)) throw DomainError("grad_check: function returned NaN");
    return v;
  };

  Tape tape;
  Tensor leaf = tape.leaf(shape, x0, true);
  Tensor loss = f(tape, leaf);
  if (std::isnan(loss.item())) throw DomainError("grad_check: function returned NaN");
  tape.backward(loss);
  std::vector<double> analytic = leaf.grad();

  double worst = 0.0;
  std::vector<double> x = x0;
  for (size_t i = 0; i < x.size(); ++i) {
    double keep = x[i];
    x[i] = keep + eps;
    double up = eval(x);
    x[i] = keep - eps;
    double dn = eval(x);
    x[i] = keep;
    double numeric = (up - dn) / (2.0 * eps);
    double err = std::fabs(analytic[i] - numeric) /
                 (std::fabs(analytic[i]) + std::fabs(numeric) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace stylet::ad
