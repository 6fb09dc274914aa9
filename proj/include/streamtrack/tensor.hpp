#pragma once

// Dense row-major float64 tensor with define-by-run reverse-mode autodiff.
//
// Every op returns a new Tensor. When gradients are enabled and at least one
// input requires a gradient, the result remembers its inputs together with a
// closure that pushes the output gradient back to them. backward() orders the
// reachable graph topologically (a Tape) and runs those closures in reverse.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace streamtrack {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b)) {}
  ShapeError(const std::string& op, const std::string& what) : std::invalid_argument(op + ": " + what) {}
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads self.grad and accumulates into inputs' grads.
  std::function<void(Node& self)> backward;

  bool is_leaf() const { return !backward; }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Disables graph recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("Tensor", "data length " + std::to_string(data.size()) + " does not match shape " +
                                     shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }
  static Tensor from_rows(const std::vector<std::vector<double>>& rows, bool requires_grad = false) {
    if (rows.empty()) throw ShapeError("from_rows", "no rows");
    std::vector<double> d;
    d.reserve(rows.size() * rows[0].size());
    for (const auto& r : rows) {
      if (r.size() != rows[0].size()) throw ShapeError("from_rows", "ragged rows");
      d.insert(d.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), rows[0].size()}, std::move(d), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// Direct write access, for optimizers and perturbation checks. Bypasses the graph.
  std::span<double> mutable_data() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }

  double item() const {
    if (numel() != 1) throw ShapeError("item", "tensor " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
  }
  double at(std::size_t i) const { return node_->data.at(i); }
  double at(std::size_t r, std::size_t c) const { return node_->data.at(r * node_->shape.back() + c); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  /// Gradient buffer; empty until a backward pass reaches this tensor.
  const std::vector<double>& grad() const { return node_->grad; }
  std::vector<double>& mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  const char* op() const { return node_->op; }

  /// Same values, cut from the graph.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }
  /// Independent deep copy that keeps the requires_grad flag.
  Tensor clone() const { return Tensor(shape(), node_->data, node_->requires_grad); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

template <class Backward>
Tensor make_op(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
               Backward&& backward) {
  Tensor out(std::move(shape), std::move(data), false);
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  Node* n = out.node();
  n->requires_grad = true;
  n->op = op;
  n->inputs.reserve(inputs.size());
  for (auto& in : inputs) n->inputs.push_back(in.node_ptr());
  n->backward = std::forward<Backward>(backward);
  return out;
}

// Input k's grad buffer if it takes gradients, else nullptr.
inline double* grad_of(Node& self, std::size_t k) {
  Node& in = *self.inputs[k];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return in.grad.data();
}

// b broadcasts against a when b's shape is a (possibly empty-prefixed) suffix of a's.
inline bool suffix_broadcastable(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

inline void check_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

inline std::size_t norm_axis(const char* op, const Shape& s, int axis) {
  const int r = static_cast<int>(s.size());
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw ShapeError(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return static_cast<std::size_t>(ax);
}

// Splits a shape around an axis into (outer, extent, inner).
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& s, std::size_t ax) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[ax], inner};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops. `b` may broadcast as a shape suffix of `a`.

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!detail::suffix_broadcastable(a.shape(), b.shape())) throw ShapeError("add", a.shape(), b.shape());
  const std::size_t n = a.numel(), m = b.numel();
  std::vector<double> out(a.values());
  const double* bd = b.values().data();
  for (std::size_t i = 0; i < n; i += m)
    for (std::size_t j = 0; j < m; ++j) out[i + j] += bd[j];
  return detail::make_op("add", a.shape(), std::move(out), {a, b}, [n, m](detail::Node& self) {
    const double* g = self.grad.data();
    if (double* ga = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    if (double* gb = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < n; i += m)
        for (std::size_t j = 0; j < m; ++j) gb[j] += g[i + j];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (!detail::suffix_broadcastable(a.shape(), b.shape())) throw ShapeError("sub", a.shape(), b.shape());
  const std::size_t n = a.numel(), m = b.numel();
  std::vector<double> out(a.values());
  const double* bd = b.values().data();
  for (std::size_t i = 0; i < n; i += m)
    for (std::size_t j = 0; j < m; ++j) out[i + j] -= bd[j];
  return detail::make_op("sub", a.shape(), std::move(out), {a, b}, [n, m](detail::Node& self) {
    const double* g = self.grad.data();
    if (double* ga = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    if (double* gb = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < n; i += m)
        for (std::size_t j = 0; j < m; ++j) gb[j] -= g[i + j];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (!detail::suffix_broadcastable(a.shape(), b.shape())) throw ShapeError("mul", a.shape(), b.shape());
  const std::size_t n = a.numel(), m = b.numel();
  std::vector<double> out(n);
  const double* ad = a.values().data();
  const double* bd = b.values().data();
  for (std::size_t i = 0; i < n; i += m)
    for (std::size_t j = 0; j < m; ++j) out[i + j] = ad[i + j] * bd[j];
  return detail::make_op("mul", a.shape(), std::move(out), {a, b}, [n, m](detail::Node& self) {
    const double* g = self.grad.data();
    const double* ad = self.inputs[0]->data.data();
    const double* bd = self.inputs[1]->data.data();
    if (double* ga = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < n; i += m)
        for (std::size_t j = 0; j < m; ++j) ga[i + j] += g[i + j] * bd[j];
    if (double* gb = detail::grad_of(self, 1))
      for (std::size_t i = 0; i < n; i += m)
        for (std::size_t j = 0; j < m; ++j) gb[j] += g[i + j] * ad[i + j];
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values());
  for (auto& v : out) v *= s;
  return detail::make_op("scale", a.shape(), std::move(out), {a}, [s](detail::Node& self) {
    if (double* ga = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += s * self.grad[i];
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.values());
  for (auto& v : out) v += s;
  return detail::make_op("add_scalar", a.shape(), std::move(out), {a}, [](detail::Node& self) {
    if (double* ga = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Elementwise unary ops.

namespace detail {

// f gives the value, df the derivative given (x, y).
template <class F, class DF>
Tensor unary(const char* op, const Tensor& a, F f, DF df) {
  std::vector<double> out(a.numel());
  const auto& x = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return make_op(op, a.shape(), std::move(out), {a}, [df](Node& self) {
    if (double* ga = grad_of(self, 0)) {
      const auto& x = self.inputs[0]->data;
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * df(x[i], self.data[i]);
    }
  });
}

}  // namespace detail

inline Tensor exp(const Tensor& a) {
  return detail::unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sigmoid(x)) without overflow.
inline double log_sigmoid_value(double x) { return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary("sigmoid", a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor log_sigmoid(const Tensor& a) {
  return detail::unary("log_sigmoid", a, log_sigmoid_value, [](double x, double) { return 1.0 - sigmoid_value(x); });
}

/// Huber-style smooth L1 with transition at |x| = beta: 0.5x²/beta inside, |x| − 0.5beta outside.
inline Tensor smooth_l1(const Tensor& a, double beta = 1.0) {
  return detail::unary(
      "smooth_l1", a,
      [beta](double x) {
        const double ax = std::abs(x);
        return ax < beta ? 0.5 * x * x / beta : ax - 0.5 * beta;
      },
      [beta](double x, double) {
        if (std::abs(x) < beta) return x / beta;
        return x > 0.0 ? 1.0 : -1.0;
      });
}

// ---------------------------------------------------------------------------
// Shape ops.

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape);
  return detail::make_op("reshape", std::move(shape), a.values(), {a}, [](detail::Node& self) {
    if (double* ga = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose", "expects rank 2, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  const auto& x = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return detail::make_op("transpose", {c, r}, std::move(out), {a}, [r, c](detail::Node& self) {
    if (double* ga = detail::grad_of(self, 0))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j * r + i];
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  const Shape& s0 = parts[0].shape();
  const std::size_t ax = detail::norm_axis("concat", s0, axis);
  Shape out_shape = s0;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != s0.size()) throw ShapeError("concat", s0, p.shape());
    for (std::size_t i = 0; i < s0.size(); ++i)
      if (i != ax && p.dim(i) != s0[i]) throw ShapeError("concat", s0, p.shape());
    out_shape[ax] += p.dim(ax);
  }
  auto [outer, total, inner] = detail::split_axis(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.dim(ax) * inner;
    const auto& x = p.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(x.data() + o * len, len, out.data() + o * total * inner + off * inner);
    off += p.dim(ax);
  }
  std::vector<std::size_t> extents;
  for (const auto& p : parts) extents.push_back(p.dim(ax));
  return detail::make_op("concat", out_shape, std::move(out), parts,
                         [outer = outer, total = total, inner = inner, offsets, extents](detail::Node& self) {
                           for (std::size_t k = 0; k < offsets.size(); ++k) {
                             double* gk = detail::grad_of(self, k);
                             if (!gk) continue;
                             const std::size_t len = extents[k] * inner;
                             for (std::size_t o = 0; o < outer; ++o) {
                               const double* src = self.grad.data() + o * total * inner + offsets[k] * inner;
                               double* dst = gk + o * len;
                               for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                             }
                           }
                         });
}

inline Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t len) {
  const std::size_t ax = detail::norm_axis("slice", a.shape(), axis);
  if (start + len > a.dim(ax))
    throw ShapeError("slice", "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                                  ") exceeds extent of " + shape_str(a.shape()));
  auto [outer, extent, inner] = detail::split_axis(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = len;
  std::vector<double> out(outer * len * inner);
  const auto& x = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data() + (o * extent + start) * inner, len * inner, out.data() + o * len * inner);
  return detail::make_op("slice", out_shape, std::move(out), {a},
                         [outer = outer, extent = extent, inner = inner, start, len](detail::Node& self) {
                           double* ga = detail::grad_of(self, 0);
                           if (!ga) return;
                           for (std::size_t o = 0; o < outer; ++o) {
                             const double* src = self.grad.data() + o * len * inner;
                             double* dst = ga + (o * extent + start) * inner;
                             for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                           }
                         });
}

/// Selects rows (first-axis slices) by index; repeated indices accumulate gradient.
inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
  if (a.rank() < 1) throw ShapeError("gather_rows", "rank-0 input");
  const std::size_t rows = a.dim(0);
  const std::size_t row = a.numel() / std::max<std::size_t>(rows, 1);
  Shape out_shape = a.shape();
  out_shape[0] = idx.size();
  std::vector<double> out(idx.size() * row);
  const auto& x = a.values();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows)
      throw ShapeError("gather_rows", "index " + std::to_string(idx[i]) + " out of range for " + shape_str(a.shape()));
    std::copy_n(x.data() + idx[i] * row, row, out.data() + i * row);
  }
  return detail::make_op("gather_rows", out_shape, std::move(out), {a}, [idx, row](detail::Node& self) {
    double* ga = detail::grad_of(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double* src = self.grad.data() + i * row;
      double* dst = ga + idx[i] * row;
      for (std::size_t j = 0; j < row; ++j) dst[j] += src[j];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra.

namespace detail {

// C[M,N] += A[M,K] * B[K,N]
inline void gemm_nn(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    double* c = C + i * N;
    const double* arow = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const double av = arow[k];
      if (av == 0.0) continue;
      const double* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,K] += G[M,N] * B[K,N]^T
inline void gemm_nt(const double* G, const double* B, double* C, std::size_t M, std::size_t N, std::size_t K) {
  // Transposing B first keeps the inner loop a contiguous axpy.
  std::vector<double> bt(N * K);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < N; ++j) bt[j * K + k] = B[k * N + j];
  gemm_nn(G, bt.data(), C, M, N, K);
}

// C[K,N] += A[M,K]^T * G[M,N]
inline void gemm_tn(const double* A, const double* G, double* C, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    const double* g = G + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double av = a[k];
      if (av == 0.0) continue;
      double* c = C + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * g[j];
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<double> out(M * N, 0.0);
  detail::gemm_nn(a.values().data(), b.values().data(), out.data(), M, K, N);
  return detail::make_op("matmul", {M, N}, std::move(out), {a, b}, [M, K, N](detail::Node& self) {
    const double* g = self.grad.data();
    if (double* ga = detail::grad_of(self, 0)) detail::gemm_nt(g, self.inputs[1]->data.data(), ga, M, N, K);
    if (double* gb = detail::grad_of(self, 1)) detail::gemm_tn(self.inputs[0]->data.data(), g, gb, M, K, N);
  });
}

/// a[M,K] · b[N,K]ᵀ without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) throw ShapeError("matmul_nt", a.shape(), b.shape());
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(0);
  std::vector<double> out(M * N, 0.0);
  detail::gemm_nt(a.values().data(), b.values().data(), out.data(), M, K, N);
  return detail::make_op("matmul_nt", {M, N}, std::move(out), {a, b}, [M, K, N](detail::Node& self) {
    const double* g = self.grad.data();
    // out = A Bᵀ: dA = G B, dB = Gᵀ A
    if (double* ga = detail::grad_of(self, 0)) detail::gemm_nn(g, self.inputs[1]->data.data(), ga, M, N, K);
    if (double* gb = detail::grad_of(self, 1)) detail::gemm_tn(g, self.inputs[0]->data.data(), gb, M, N, K);
  });
}

/// x[*,Din]·W[Din,Dout] + bias[Dout].
inline Tensor linear(const Tensor& x, const Tensor& W, const Tensor& bias) {
  if (x.rank() < 1 || W.rank() != 2 || x.shape().back() != W.dim(0)) throw ShapeError("linear", x.shape(), W.shape());
  if (bias.rank() != 1 || bias.dim(0) != W.dim(1)) throw ShapeError("linear", W.shape(), bias.shape());
  const std::size_t din = W.dim(0);
  const std::size_t rows = x.numel() / din;
  Shape out_shape = x.shape();
  out_shape.back() = W.dim(1);
  Tensor x2 = x.rank() == 2 ? x : reshape(x, {rows, din});
  Tensor y = add(matmul(x2, W), bias);
  return x.rank() == 2 ? y : reshape(y, out_shape);
}

// ---------------------------------------------------------------------------
// Reductions and normalizations.

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return detail::make_op("sum", {1}, {s}, {a}, [](detail::Node& self) {
    if (double* ga = detail::grad_of(self, 0)) {
      const double g = self.grad[0];
      const std::size_t n = self.inputs[0]->data.size();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g;
    }
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Tensor sum_axis(const Tensor& a, int axis) {
  const std::size_t ax = detail::norm_axis("sum_axis", a.shape(), axis);
  auto [outer, extent, inner] = detail::split_axis(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(outer * inner, 0.0);
  const auto& x = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * extent + e) * inner + i];
  return detail::make_op("sum_axis", out_shape, std::move(out), {a},
                         [outer = outer, extent = extent, inner = inner](detail::Node& self) {
                           double* ga = detail::grad_of(self, 0);
                           if (!ga) return;
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t e = 0; e < extent; ++e)
                               for (std::size_t i = 0; i < inner; ++i)
                                 ga[(o * extent + e) * inner + i] += self.grad[o * inner + i];
                         });
}

/// Max over one axis. The subgradient goes to the first maximal index on ties.
inline Tensor max_axis(const Tensor& a, int axis) {
  const std::size_t ax = detail::norm_axis("max_axis", a.shape(), axis);
  auto [outer, extent, inner] = detail::split_axis(a.shape(), ax);
  if (extent == 0) throw ShapeError("max_axis", "empty axis in " + shape_str(a.shape()));
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(outer * inner);
  std::vector<std::size_t> arg(outer * inner);
  const auto& x = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t best = 0;
      double bv = x[o * extent * inner + i];
      for (std::size_t e = 1; e < extent; ++e) {
        const double v = x[(o * extent + e) * inner + i];
        if (v > bv) {
          bv = v;
          best = e;
        }
      }
      out[o * inner + i] = bv;
      arg[o * inner + i] = (o * extent + best) * inner + i;
    }
  return detail::make_op("max_axis", out_shape, std::move(out), {a}, [arg = std::move(arg)](detail::Node& self) {
    if (double* ga = detail::grad_of(self, 0))
      for (std::size_t k = 0; k < arg.size(); ++k) ga[arg[k]] += self.grad[k];
  });
}

namespace detail {

// Row softmax over the last axis; masked entries (mask[i] == 0) get exactly zero weight.
inline Tensor softmax_impl(const Tensor& a, const std::vector<std::uint8_t>* mask) {
  if (a.rank() < 1) throw ShapeError("softmax", "rank-0 input");
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.numel() / cols;
  if (mask && mask->size() != a.numel())
    throw ShapeError("masked_softmax", "mask length " + std::to_string(mask->size()) + " vs " + shape_str(a.shape()));
  std::vector<double> out(a.numel(), 0.0);
  const auto& x = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    double* yr = out.data() + r * cols;
    const std::uint8_t* mr = mask ? mask->data() + r * cols : nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (!mr || mr[c]) mx = std::max(mx, xr[c]);
    if (mx == -std::numeric_limits<double>::infinity())
      throw ShapeError("masked_softmax", "row " + std::to_string(r) + " has no unmasked entries");
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (mr && !mr[c]) continue;
      yr[c] = std::exp(xr[c] - mx);
      z += yr[c];
    }
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= z;
  }
  return make_op(mask ? "masked_softmax" : "softmax", a.shape(), std::move(out), {a}, [rows, cols](Node& self) {
    double* ga = grad_of(self, 0);
    if (!ga) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += y[c] * g[c];
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += y[c] * (g[c] - dot);
    }
  });
}

}  // namespace detail

inline Tensor softmax(const Tensor& a) { return detail::softmax_impl(a, nullptr); }

inline Tensor masked_softmax(const Tensor& a, const std::vector<std::uint8_t>& mask) {
  return detail::softmax_impl(a, &mask);
}

/// log(softmax(a)) along the last axis.
inline Tensor log_softmax(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("log_softmax", "rank-0 input");
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.numel() / cols;
  std::vector<double> out(a.numel());
  const auto& x = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xr[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xr[c] - lse;
  }
  return detail::make_op("log_softmax", a.shape(), std::move(out), {a}, [rows, cols](detail::Node& self) {
    double* ga = detail::grad_of(self, 0);
    if (!ga) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * cols;
      const double* g = self.grad.data() + r * cols;
      double gs = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gs += g[c];
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += g[c] - std::exp(y[c]) * gs;
    }
  });
}

/// Layer normalization over the last axis with learnable gain and shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) throw ShapeError("layer_norm", x.shape(), gamma.shape());
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xr[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (xr[c] - mu) * is;
      out[r * d + c] = xhat[r * d + c] * gv[c] + bv[c];
    }
  }
  return detail::make_op(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const double* g = self.grad.data();
        const double* gv = self.inputs[1]->data.data();
        if (double* ggam = detail::grad_of(self, 1))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) ggam[c] += g[r * d + c] * xhat[r * d + c];
        if (double* gbet = detail::grad_of(self, 2))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) gbet[c] += g[r * d + c];
        if (double* gx = detail::grad_of(self, 0)) {
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double gh = g[r * d + c] * gv[c];
              s1 += gh;
              s2 += gh * xhat[r * d + c];
            }
            for (std::size_t c = 0; c < d; ++c) {
              const double gh = g[r * d + c] * gv[c];
              gx[r * d + c] += inv_std[r] * (gh - inv_d * s1 - xhat[r * d + c] * inv_d * s2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Backward pass.

/// Topologically ordered record of the operations reachable from a root.
class Tape {
 public:
  static Tape record(const Tensor& root) {
    Tape tape;
    std::unordered_set<const detail::Node*> seen;
    // Iterative post-order DFS: a node is emitted after all of its inputs.
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* in = node->inputs[next++].get();
        if (in->requires_grad && seen.insert(in).second) stack.emplace_back(in, 0);
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  const std::vector<detail::Node*>& nodes() const { return order_; }

 private:
  std::vector<detail::Node*> order_;
};

/// Accumulates d(root)/d(leaf) into every reachable leaf that requires a gradient.
/// Leaves accumulate across calls; intermediate buffers are reset per call.
inline void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1)
    throw ShapeError("backward", "root must be a scalar, got " + (root.defined() ? shape_str(root.shape()) : "undefined"));
  if (!root.requires_grad()) return;
  const Tape tape = Tape::record(root);
  for (detail::Node* n : tape.nodes())
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
  root.node()->ensure_grad();
  root.node()->grad[0] += 1.0;
  const auto& order = tape.nodes();
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->is_leaf()) (*it)->backward(**it);
}

}  // namespace streamtrack
