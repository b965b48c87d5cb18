#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle onto a node holding row-major data, an optional
// gradient buffer and, for results of recorded operations, the closure that
// propagates gradients to its inputs. The graph is recorded during the forward
// pass and released by backward(). All reductions run sequentially in
// row-major order so that identical inputs give bit-identical outputs.

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

namespace eurobert {

using Shape = std::vector<std::size_t>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EmptySelectionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

inline std::uint64_t next_sequence() {
  static thread_local std::uint64_t counter = 0;
  return ++counter;
}

inline bool& grad_mode() {
  static thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;

  struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until the first accumulation
    bool requires_grad = false;
    bool consumed = false;
    std::uint64_t sequence = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    void accumulate(std::size_t i, T g) {
      if (!requires_grad) return;
      if (grad.empty()) grad.assign(data.size(), T(0));
      grad[i] += g;
    }
    T* grad_buffer() {
      if (!requires_grad) return nullptr;
      if (grad.empty()) grad.assign(data.size(), T(0));
      return grad.data();
    }
  };
  using NodePtr = std::shared_ptr<Node>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor data of length " + std::to_string(data.size()) +
                           " does not fill shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    node_->sequence = detail::next_sequence();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// Direct write access; mutating a tensor that is an input of a live graph
  /// invalidates that graph's gradients.
  std::span<T> mutable_data() { return node_->data; }
  T operator[](std::size_t i) const { return node_->data[i]; }
  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    if (!flag) node_->grad.clear();
  }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    if (node_->grad.empty()) node_->grad.assign(size(), T(0));
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Leaf copy with no history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  const NodePtr& node() const { return node_; }
  bool same_as(const Tensor& other) const { return node_ == other.node_; }

  /// Accumulates d(this)/d(leaf) into every reachable leaf that requires a
  /// gradient, visiting recorded operations in reverse execution order, then
  /// releases the graph.
  void backward() {
    if (!node_) throw GraphError("backward on an undefined tensor");
    if (size() != 1) {
      throw GraphError("backward requires a scalar loss, got shape " + shape_str(shape()));
    }
    if (node_->consumed) {
      throw GraphError("graph already consumed by an earlier backward; zero gradients and rerun the forward pass");
    }
    if (!node_->requires_grad) throw GraphError("loss does not depend on any tensor requiring a gradient");

    // Owning references keep every node alive until the graph is released.
    std::vector<NodePtr> order;
    std::vector<NodePtr> stack{node_};
    std::unordered_set<Node*> seen;
    while (!stack.empty()) {
      NodePtr n = std::move(stack.back());
      stack.pop_back();
      if (!n->backward || !seen.insert(n.get()).second) continue;
      for (auto& in : n->inputs) stack.push_back(in);
      order.push_back(std::move(n));
    }
    std::sort(order.begin(), order.end(),
              [](const NodePtr& a, const NodePtr& b) { return a->sequence > b->sequence; });

    node_->grad.assign(1, T(1));
    for (auto& n : order) {
      if (!n->grad.empty()) n->backward(*n);
    }
    for (auto& n : order) {
      n->backward = nullptr;
      n->inputs.clear();
      n->consumed = true;
    }
  }

  /// Builds the result of an operation. Inputs and the backward closure are
  /// only kept when grad mode is on and some input requires a gradient.
  static Tensor make_result(Shape shape, std::vector<T> data, std::vector<NodePtr> inputs,
                            const char* op, std::function<void(Node&)> backward) {
    Tensor out(std::move(shape), std::move(data), false);
    bool track = false;
    if (detail::grad_mode()) {
      for (const auto& in : inputs) track = track || in->requires_grad;
    }
    if (track) {
      out.node_->requires_grad = true;
      out.node_->op = op;
      out.node_->inputs = std::move(inputs);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

 private:
  NodePtr node_;
};

// ---------------------------------------------------------------------------
// Element-wise arithmetic with broadcasting of the smaller operand along the
// leading axes of the larger one (its shape must be a suffix, or have one
// element).

namespace detail {

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

template <class T>
Shape broadcast_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.size() == 1 || is_suffix(b.shape(), a.shape())) return a.shape();
  if (a.size() == 1 || is_suffix(a.shape(), b.shape())) return b.shape();
  throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()) + " are not broadcastable");
}

template <class T, class Fwd, class DA, class DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, Fwd fwd, DA da, DB db) {
  const Shape out_shape = broadcast_shape(a, b, op);
  const std::size_t n = numel(out_shape);
  const std::size_t na = a.size();
  const std::size_t nb = b.size();
  std::vector<T> out(n);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i % na], bv[i % nb]);
  auto an = a.node();
  auto bn = b.node();
  return Tensor<T>::make_result(out_shape, std::move(out), {an, bn}, op, [an, bn, na, nb, da, db](auto& self) {
    const std::size_t n = self.data.size();
    T* ga = an->grad_buffer();
    T* gb = bn->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      const T x = an->data[i % na];
      const T y = bn->data[i % nb];
      const T g = self.grad[i];
      if (ga) ga[i % na] += da(x, y, self.data[i]) * g;
      if (gb) gb[i % nb] += db(x, y, self.data[i]) * g;
    }
  });
}

template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& a, const char* op, Fwd fwd, Deriv deriv) {
  std::vector<T> out(a.size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  auto an = a.node();
  return Tensor<T>::make_result(a.shape(), std::move(out), {an}, op, [an, deriv](auto& self) {
    T* ga = an->grad_buffer();
    if (!ga) return;
    for (std::size_t i = 0; i < self.data.size(); ++i) ga[i] += deriv(an->data[i], self.data[i]) * self.grad[i];
  });
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, "add", [](T x, T y) { return x + y; },
                        [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, "sub", [](T x, T y) { return x - y; },
                        [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, "mul", [](T x, T y) { return x * y; },
                        [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(a, b, "div", [](T x, T y) { return x / y; },
                        [](T, T y, T) { return T(1) / y; }, [](T x, T y, T) { return -x / (y * y); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary(a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary(a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary(a, "tanh", [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(a, "sigmoid", [](T x) { return T(1) / (T(1) + std::exp(-x)); },
                       [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> pow(const Tensor<T>& a, T exponent) {
  return detail::unary(a, "pow", [exponent](T x) { return std::pow(x, exponent); },
                       [exponent](T x, T) { return exponent * std::pow(x, exponent - T(1)); });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary(a, "neg", [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return detail::unary(a, "scale", [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

/// swish(z) = z * sigmoid(z), fused.
template <class T>
Tensor<T> silu(const Tensor<T>& a) {
  return detail::unary(
      a, "silu", [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T x, T) {
        const T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// Reductions and shape manipulation.

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T x : a.data()) total += x;
  auto an = a.node();
  return Tensor<T>::make_result(Shape{}, {total}, {an}, "sum", [an](auto& self) {
    T* ga = an->grad_buffer();
    if (!ga) return;
    for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  auto an = a.node();
  return Tensor<T>::make_result(std::move(shape), std::move(out), {an}, "reshape", [an](auto& self) {
    T* ga = an->grad_buffer();
    if (!ga) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects a matrix, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  auto an = a.node();
  return Tensor<T>::make_result(Shape{n, m}, std::move(out), {an}, "transpose", [an, m, n](auto& self) {
    T* ga = an->grad_buffer();
    if (!ga) return;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
  });
}

/// a: [..., k] (leading axes flattened), b: [k, n] -> [..., n].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    throw DimensionError("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " do not compose");
  }
  const std::size_t k = b.dim(0), n = b.dim(1);
  const std::size_t m = a.size() / k;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(m * n, T(0));
  const T* A = a.data().data();
  const T* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = A[i * k + p];
      const T* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {an, bn}, "matmul",
                                [an, bn, m, k, n](auto& self) {
                                  const T* G = self.grad.data();
                                  if (T* ga = an->grad_buffer()) {
                                    const T* B = bn->data.data();
                                    for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t p = 0; p < k; ++p) {
                                        T acc = T(0);
                                        for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
                                        ga[i * k + p] += acc;
                                      }
                                  }
                                  if (T* gb = bn->grad_buffer()) {
                                    const T* A = an->data.data();
                                    for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t p = 0; p < k; ++p) {
                                        const T aip = A[i * k + p];
                                        for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * G[i * n + j];
                                      }
                                  }
                                });
}

/// Rows of a [n x d] table selected by index; the embedding lookup.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::int32_t> rows) {
  if (table.rank() != 2) throw DimensionError("gather_rows expects a matrix, got " + shape_str(table.shape()));
  const std::size_t n = table.dim(0), d = table.dim(1);
  std::vector<T> out(rows.size() * d);
  std::vector<std::int32_t> idx(rows.begin(), rows.end());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= n) {
      throw std::out_of_range("row index " + std::to_string(idx[r]) + " outside table of " + std::to_string(n));
    }
    std::copy_n(table.data().begin() + idx[r] * d, d, out.begin() + r * d);
  }
  auto tn = table.node();
  Shape out_shape{idx.size(), d};
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), {tn}, "gather_rows",
                                [tn, idx = std::move(idx), d](auto& self) {
                                  T* gt = tn->grad_buffer();
                                  if (!gt) return;
                                  for (std::size_t r = 0; r < idx.size(); ++r)
                                    for (std::size_t j = 0; j < d; ++j) gt[idx[r] * d + j] += self.grad[r * d + j];
                                });
}

// ---------------------------------------------------------------------------
// Fused kernels.

/// y = gain * x / sqrt(mean(x^2) + eps) over the last axis.
template <class T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("rmsnorm on zero-width input");
  if (!(eps > T(0))) throw std::invalid_argument("rmsnorm eps must be positive");
  const std::size_t d = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != d) {
    throw DimensionError("rmsnorm: gain " + shape_str(gain.shape()) + " does not match input " +
                         shape_str(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  std::vector<T> out(x.size());
  std::vector<T> inv_rms(rows);
  const T* X = x.data().data();
  const T* G = gain.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = T(0);
    for (std::size_t j = 0; j < d; ++j) ss += X[r * d + j] * X[r * d + j];
    const T inv = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
    inv_rms[r] = inv;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = G[j] * X[r * d + j] * inv;
  }
  auto xn = x.node();
  auto gn = gain.node();
  return Tensor<T>::make_result(x.shape(), std::move(out), {xn, gn}, "rmsnorm",
                                [xn, gn, d, rows, inv_rms = std::move(inv_rms)](auto& self) {
                                  const T* X = xn->data.data();
                                  const T* G = gn->data.data();
                                  const T* dY = self.grad.data();
                                  T* gx = xn->grad_buffer();
                                  T* gg = gn->grad_buffer();
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T inv = inv_rms[r];
                                    const T* xr = X + r * d;
                                    const T* dy = dY + r * d;
                                    if (gg)
                                      for (std::size_t j = 0; j < d; ++j) gg[j] += dy[j] * xr[j] * inv;
                                    if (gx) {
                                      T dot = T(0);
                                      for (std::size_t j = 0; j < d; ++j) dot += G[j] * dy[j] * xr[j];
                                      const T coef = dot * inv * inv * inv / static_cast<T>(d);
                                      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += G[j] * dy[j] * inv - xr[j] * coef;
                                    }
                                  }
                                });
}

/// Inverse frequencies theta^(-2i/head_dim), computed in double precision.
inline std::vector<double> rope_inverse_frequencies(std::size_t head_dim, double theta) {
  std::vector<double> inv(head_dim / 2);
  for (std::size_t i = 0; i < inv.size(); ++i)
    inv[i] = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
  return inv;
}

/// Rotates dimension pairs (2i, 2i+1) of x [..., seq, heads, head_dim] by
/// position * theta^(-2i/head_dim).
template <class T>
Tensor<T> rope_rotate(const Tensor<T>& x, std::span<const std::int64_t> positions, double theta) {
  if (x.rank() < 3) throw DimensionError("rope_rotate expects [..., seq, heads, head_dim], got " + shape_str(x.shape()));
  const std::size_t hd = x.shape()[x.rank() - 1];
  const std::size_t heads = x.shape()[x.rank() - 2];
  const std::size_t seq = x.shape()[x.rank() - 3];
  if (hd % 2 != 0) throw DimensionError("rope_rotate needs an even head_dim, got " + std::to_string(hd));
  if (positions.size() != seq) {
    throw DimensionError("rope_rotate: " + std::to_string(positions.size()) + " positions for sequence length " +
                         std::to_string(seq));
  }
  const auto inv = rope_inverse_frequencies(hd, theta);
  const std::size_t half = hd / 2;
  std::vector<T> cosv(seq * half), sinv(seq * half);
  for (std::size_t s = 0; s < seq; ++s)
    for (std::size_t i = 0; i < half; ++i) {
      const double angle = static_cast<double>(positions[s]) * inv[i];
      cosv[s * half + i] = static_cast<T>(std::cos(angle));
      sinv[s * half + i] = static_cast<T>(std::sin(angle));
    }
  const std::size_t outer = x.size() / (seq * heads * hd);
  std::vector<T> out(x.size());
  const T* X = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t s = 0; s < seq; ++s)
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t base = ((o * seq + s) * heads + h) * hd;
        for (std::size_t i = 0; i < half; ++i) {
          const T c = cosv[s * half + i], sn = sinv[s * half + i];
          const T a = X[base + 2 * i], b = X[base + 2 * i + 1];
          out[base + 2 * i] = a * c - b * sn;
          out[base + 2 * i + 1] = a * sn + b * c;
        }
      }
  auto xn = x.node();
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {xn}, "rope_rotate",
      [xn, outer, seq, heads, hd, half, cosv = std::move(cosv), sinv = std::move(sinv)](auto& self) {
        T* gx = xn->grad_buffer();
        if (!gx) return;
        const T* dY = self.grad.data();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t s = 0; s < seq; ++s)
            for (std::size_t h = 0; h < heads; ++h) {
              const std::size_t base = ((o * seq + s) * heads + h) * hd;
              for (std::size_t i = 0; i < half; ++i) {
                const T c = cosv[s * half + i], sn = sinv[s * half + i];
                const T ga = dY[base + 2 * i], gb = dY[base + 2 * i + 1];
                gx[base + 2 * i] += ga * c + gb * sn;
                gx[base + 2 * i + 1] += -ga * sn + gb * c;
              }
            }
      });
}

/// Bidirectional scaled dot-product attention with grouped key/value heads.
///
/// q: [batch, seq, heads, head_dim]; k, v: [batch, seq, kv_heads, head_dim];
/// key_padding[b * seq + j] != 0 excludes key j of row b. Query head h reads
/// key/value head h / (heads / kv_heads).
template <class T>
Tensor<T> grouped_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            std::span<const std::uint8_t> key_padding, T scale_factor) {
  if (q.rank() != 4 || k.rank() != 4 || v.shape() != k.shape()) {
    throw DimensionError("grouped_attention: incompatible q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  const std::size_t B = q.dim(0), S = q.dim(1), H = q.dim(2), D = q.dim(3);
  const std::size_t KV = k.dim(2);
  if (k.dim(0) != B || k.dim(1) != S || k.dim(3) != D || KV == 0 || H % KV != 0) {
    throw DimensionError("grouped_attention: incompatible q " + shape_str(q.shape()) + " and k " + shape_str(k.shape()));
  }
  if (key_padding.size() != B * S) throw DimensionError("grouped_attention: padding mask does not match batch");
  const std::size_t group = H / KV;
  for (std::size_t b = 0; b < B; ++b) {
    bool any = false;
    for (std::size_t j = 0; j < S; ++j) any = any || key_padding[b * S + j] == 0;
    if (!any) throw std::invalid_argument("attention row " + std::to_string(b) + " is entirely padding");
  }
  std::vector<std::uint8_t> pad(key_padding.begin(), key_padding.end());
  std::vector<T> probs(B * H * S * S, T(0));
  std::vector<T> out(B * S * H * D, T(0));
  const T* Q = q.data().data();
  const T* K = k.data().data();
  const T* V = v.data().data();
  auto qi = [&](std::size_t b, std::size_t s, std::size_t h) { return ((b * S + s) * H + h) * D; };
  auto ki = [&](std::size_t b, std::size_t s, std::size_t h) { return ((b * S + s) * KV + h) * D; };
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t kvh = h / group;
      for (std::size_t i = 0; i < S; ++i) {
        T* p = probs.data() + ((b * H + h) * S + i) * S;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < S; ++j) {
          if (pad[b * S + j]) continue;
          T dot = T(0);
          for (std::size_t t = 0; t < D; ++t) dot += Q[qi(b, i, h) + t] * K[ki(b, j, kvh) + t];
          p[j] = dot * scale_factor;
          mx = std::max(mx, p[j]);
        }
        T z = T(0);
        for (std::size_t j = 0; j < S; ++j) {
          if (pad[b * S + j]) continue;
          p[j] = std::exp(p[j] - mx);
          z += p[j];
        }
        T* o = out.data() + qi(b, i, h);
        for (std::size_t j = 0; j < S; ++j) {
          if (pad[b * S + j]) continue;
          p[j] /= z;
          for (std::size_t t = 0; t < D; ++t) o[t] += p[j] * V[ki(b, j, kvh) + t];
        }
      }
    }
  auto qn = q.node(), kn = k.node(), vn = v.node();
  return Tensor<T>::make_result(
      q.shape(), std::move(out), {qn, kn, vn}, "grouped_attention",
      [qn, kn, vn, B, S, H, D, KV, group, scale_factor, pad = std::move(pad), probs = std::move(probs)](auto& self) {
        const T* Q = qn->data.data();
        const T* K = kn->data.data();
        const T* V = vn->data.data();
        const T* dO = self.grad.data();
        T* gq = qn->grad_buffer();
        T* gk = kn->grad_buffer();
        T* gv = vn->grad_buffer();
        auto qi = [&](std::size_t b, std::size_t s, std::size_t h) { return ((b * S + s) * H + h) * D; };
        auto ki = [&](std::size_t b, std::size_t s, std::size_t h) { return ((b * S + s) * KV + h) * D; };
        std::vector<T> dp(S);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t h = 0; h < H; ++h) {
            const std::size_t kvh = h / group;
            for (std::size_t i = 0; i < S; ++i) {
              const T* p = probs.data() + ((b * H + h) * S + i) * S;
              const T* go = dO + qi(b, i, h);
              T weighted = T(0);
              for (std::size_t j = 0; j < S; ++j) {
                dp[j] = T(0);
                if (pad[b * S + j]) continue;
                for (std::size_t t = 0; t < D; ++t) dp[j] += go[t] * V[ki(b, j, kvh) + t];
                weighted += p[j] * dp[j];
                if (gv)
                  for (std::size_t t = 0; t < D; ++t) gv[ki(b, j, kvh) + t] += p[j] * go[t];
              }
              for (std::size_t j = 0; j < S; ++j) {
                if (pad[b * S + j]) continue;
                const T ds = p[j] * (dp[j] - weighted) * scale_factor;
                if (gq)
                  for (std::size_t t = 0; t < D; ++t) gq[qi(b, i, h) + t] += ds * K[ki(b, j, kvh) + t];
                if (gk)
                  for (std::size_t t = 0; t < D; ++t) gk[ki(b, j, kvh) + t] += ds * Q[qi(b, i, h) + t];
              }
            }
          }
      });
}

/// Mean negative log-likelihood of `targets` under row-wise softmax(logits),
/// over the rows where selection is non-zero. logits: [n, V].
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                                std::span<const std::uint8_t> selection) {
  if (logits.rank() != 2) throw DimensionError("softmax_cross_entropy expects [n, V], got " + shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), V = logits.dim(1);
  if (targets.size() != n || selection.size() != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets and " +
                         std::to_string(selection.size()) + " selection flags for " + std::to_string(n) + " rows");
  }
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < n; ++i) {
    if (!selection[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V) {
      throw std::out_of_range("target " + std::to_string(targets[i]) + " outside vocabulary of " + std::to_string(V));
    }
    rows.push_back(i);
  }
  if (rows.empty()) throw EmptySelectionError("cross-entropy over an empty selection");
  const T* L = logits.data().data();
  std::vector<T> lse(rows.size());
  T total = T(0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const T* row = L + rows[r] * V;
    const T mx = *std::max_element(row, row + V);
    T z = T(0);
    for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
    lse[r] = mx + std::log(z);
    total += lse[r] - row[targets[rows[r]]];
  }
  const T count = static_cast<T>(rows.size());
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  auto ln = logits.node();
  return Tensor<T>::make_result(Shape{}, {total / count}, {ln}, "softmax_cross_entropy",
                                [ln, V, count, rows = std::move(rows), lse = std::move(lse), tgt = std::move(tgt)](auto& self) {
                                  T* gl = ln->grad_buffer();
                                  if (!gl) return;
                                  const T g = self.grad[0] / count;
                                  for (std::size_t r = 0; r < rows.size(); ++r) {
                                    const T* row = ln->data.data() + rows[r] * V;
                                    T* grow = gl + rows[r] * V;
                                    for (std::size_t j = 0; j < V; ++j) grow[j] += std::exp(row[j] - lse[r]) * g;
                                    grow[tgt[rows[r]]] -= g;
                                  }
                                });
}

/// Scales every row of x [n, d] to unit Euclidean norm.
template <class T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw DimensionError("l2_normalize_rows expects a matrix, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<T> out(x.size());
  std::vector<T> norms(n);
  for (std::size_t r = 0; r < n; ++r) {
    T ss = T(0);
    for (std::size_t j = 0; j < d; ++j) ss += x.data()[r * d + j] * x.data()[r * d + j];
    if (!(ss > T(0))) throw std::invalid_argument("row " + std::to_string(r) + " has zero norm");
    norms[r] = std::sqrt(ss);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x.data()[r * d + j] / norms[r];
  }
  auto xn = x.node();
  return Tensor<T>::make_result(x.shape(), std::move(out), {xn}, "l2_normalize_rows",
                                [xn, n, d, norms = std::move(norms)](auto& self) {
                                  T* gx = xn->grad_buffer();
                                  if (!gx) return;
                                  for (std::size_t r = 0; r < n; ++r) {
                                    const T* y = self.data.data() + r * d;
                                    const T* dy = self.grad.data() + r * d;
                                    T dot = T(0);
                                    for (std::size_t j = 0; j < d; ++j) dot += y[j] * dy[j];
                                    for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += (dy[j] - y[j] * dot) / norms[r];
                                  }
                                });
}

/// Average of the rows of x [batch, seq, d] whose weight is non-zero, per batch.
template <class T>
Tensor<T> masked_mean_rows(const Tensor<T>& x, std::span<const std::uint8_t> keep) {
  if (x.rank() != 3) throw DimensionError("masked_mean_rows expects [batch, seq, d], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), S = x.dim(1), d = x.dim(2);
  if (keep.size() != B * S) throw DimensionError("masked_mean_rows: mask does not match batch");
  std::vector<T> counts(B, T(0));
  std::vector<T> out(B * d, T(0));
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t s = 0; s < S; ++s) {
      if (!keep[b * S + s]) continue;
      counts[b] += T(1);
      for (std::size_t j = 0; j < d; ++j) out[b * d + j] += x.data()[(b * S + s) * d + j];
    }
    if (counts[b] == T(0)) throw EmptySelectionError("pooling row " + std::to_string(b) + " has no kept positions");
    for (std::size_t j = 0; j < d; ++j) out[b * d + j] /= counts[b];
  }
  std::vector<std::uint8_t> mask(keep.begin(), keep.end());
  auto xn = x.node();
  return Tensor<T>::make_result(Shape{B, d}, std::move(out), {xn}, "masked_mean_rows",
                                [xn, B, S, d, counts = std::move(counts), mask = std::move(mask)](auto& self) {
                                  T* gx = xn->grad_buffer();
                                  if (!gx) return;
                                  for (std::size_t b = 0; b < B; ++b)
                                    for (std::size_t s = 0; s < S; ++s) {
                                      if (!mask[b * S + s]) continue;
                                      for (std::size_t j = 0; j < d; ++j)
                                        gx[(b * S + s) * d + j] += self.grad[b * d + j] / counts[b];
                                    }
                                });
}

/// Element-wise conversion between precisions, producing a leaf.
template <class U, class T>
Tensor<U> cast(const Tensor<T>& x, bool requires_grad = false) {
  std::vector<U> out(x.data().begin(), x.data().end());
  return Tensor<U>(x.shape(), std::move(out), requires_grad);
}

}  // namespace eurobert
