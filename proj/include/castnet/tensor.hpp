// Copyright 2026 The castnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors of doubles with a reverse-mode autodiff tape.
//
// Every operation returns a fresh node. When any input requires a gradient
// the node keeps its inputs and a closure that pushes its own gradient into
// theirs; otherwise the node is a plain value and nothing is retained.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "castnet/error.hpp"

namespace castnet {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

// Storage aligned to Eigen's widest packet, so vectorized kernels split every
// buffer into the same scalar head and packet body and results do not depend
// on where the allocator happened to place it.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (auto d : shape)
    if (d == 0) throw ShapeError("tensor dimension of size 0 in " + to_string(shape));
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<double> values) {
    return make_leaf(std::move(shape), std::move(values), false);
  }
  static Tensor parameter(Shape shape, std::vector<double> values) {
    return make_leaf(std::move(shape), std::move(values), true);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double v) {
    auto n = numel(shape);
    return make_leaf(std::move(shape), std::vector<double>(n, v), false);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return make_leaf({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> data() const { return node_->value; }
  /// Writable view of the values; intended for optimizer updates on leaves.
  std::span<double> mutable_data() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& shared() const { return node_; }

 private:
  static Tensor make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    detail::check_shape(shape);
    if (numel(shape) != values.size())
      throw ShapeError("shape " + to_string(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value.assign(values.begin(), values.end());
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline bool& grad_mode_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled()) { detail::grad_mode_enabled() = false; }
  ~NoGradGuard() { detail::grad_mode_enabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

inline Tensor make_result(const char* op, Shape shape, Buffer value,
                          std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_mode_enabled())
    for (const auto& in : inputs) n->requires_grad = n->requires_grad || in.requires_grad();
  if (n->requires_grad) {
    for (auto& in : inputs) n->inputs.push_back(in.shared());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline bool wants_grad(const Node& n, std::size_t i) {
  return n.inputs[i]->requires_grad;
}

}  // namespace detail

/// Nodes reachable from a scalar root, stored so that every node appears
/// after all of its inputs.
class Tape {
 public:
  explicit Tape(const Tensor& root) : root_(root.node()) {
    if (!root.defined()) throw ContractError("tape root is undefined");
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    if (root_->requires_grad) stack.emplace_back(root_, 0);
    seen.insert(root_);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::size_t size() const { return order_.size(); }
  std::span<detail::Node* const> nodes() const { return order_; }

  void backward() {
    if (root_->value.size() != 1)
      throw ContractError("backward() requires a scalar root, got shape " +
                          to_string(root_->shape));
    for (auto* n : order_) n->grad.assign(n->value.size(), 0.0);
    if (order_.empty()) return;
    root_->grad[0] = 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it)
      if ((*it)->backward) (*it)->backward(**it);
  }

 private:
  detail::Node* root_;
  std::vector<detail::Node*> order_;
};

/// Accumulates d(loss)/d(leaf) into every reachable leaf's grad buffer.
/// Buffers along the tape are zeroed first, so repeated calls agree.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ContractError("backward() requires a scalar loss, got shape " + to_string(loss.shape()));
  Tape(loss).backward();
}

// ---------------------------------------------------------------------------
// Elementwise operations

enum class UnaryOp { neg, abs, tanh, sigmoid, relu, exp, square };
enum class BinaryOp { add, sub, mul, max, min };

namespace detail {

struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_stride;
  std::vector<std::size_t> b_stride;
  bool same = false;
};

inline std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Right-aligned size-1 stretching; anything else is rejected.
inline Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape ap(r, 1), bp(r, 1);
  std::copy(a.begin(), a.end(), ap.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), bp.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  p.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (ap[i] != bp[i] && ap[i] != 1 && bp[i] != 1)
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    p.out[i] = std::max(ap[i], bp[i]);
  }
  auto as = contiguous_strides(ap), bs = contiguous_strides(bp);
  p.a_stride.resize(r);
  p.b_stride.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    p.a_stride[i] = ap[i] == 1 ? 0 : as[i];
    p.b_stride[i] = bp[i] == 1 ? 0 : bs[i];
  }
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::size_t total = numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
    return;
  }
  // The innermost dimension runs as a tight loop; outer indices advance odometer-style.
  const std::size_t r = p.out.size();
  const std::size_t inner = p.out[r - 1], as = p.a_stride[r - 1], bs = p.b_stride[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t ai = 0, bi = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t k = 0; k < inner; ++k) f(o + k, ai + k * as, bi + k * bs);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ai += p.a_stride[d];
      bi += p.b_stride[d];
      if (idx[d] < p.out[d]) break;
      ai -= p.a_stride[d] * idx[d];
      bi -= p.b_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Tensor elementwise(UnaryOp op, const Tensor& a) {
  const auto& x = a.data();
  detail::Buffer y(x.size());
  switch (op) {
    case UnaryOp::neg: for (std::size_t i = 0; i < y.size(); ++i) y[i] = -x[i]; break;
    case UnaryOp::abs: for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::abs(x[i]); break;
    case UnaryOp::tanh: for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(x[i]); break;
    case UnaryOp::sigmoid: for (std::size_t i = 0; i < y.size(); ++i) y[i] = detail::sigmoid(x[i]); break;
    case UnaryOp::relu: for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] > 0 ? x[i] : 0.0; break;
    case UnaryOp::exp: for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::exp(x[i]); break;
    case UnaryOp::square: for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * x[i]; break;
  }
  static constexpr const char* names[] = {"neg", "abs", "tanh", "sigmoid", "relu", "exp", "square"};
  return detail::make_result(names[static_cast<int>(op)], a.shape(), std::move(y), {a},
                             [op](detail::Node& self) {
    auto& in = *self.inputs[0];
    const auto& g = self.grad;
    const auto& x = in.value;
    const auto& y = self.value;
    auto& gx = in.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = 0;
      switch (op) {
        case UnaryOp::neg: d = -1; break;
        case UnaryOp::abs: d = x[i] > 0 ? 1 : (x[i] < 0 ? -1 : 0); break;
        case UnaryOp::tanh: d = 1 - y[i] * y[i]; break;
        case UnaryOp::sigmoid: d = y[i] * (1 - y[i]); break;
        case UnaryOp::relu: d = x[i] > 0 ? 1 : 0; break;
        case UnaryOp::exp: d = y[i]; break;
        case UnaryOp::square: d = 2 * x[i]; break;
      }
      gx[i] += d * g[i];
    }
  });
}

namespace detail {

// Invokes f with the operation as a compile-time constant.
template <class F>
void with_binary_op(BinaryOp op, F&& f) {
  switch (op) {
    case BinaryOp::add: f(std::integral_constant<BinaryOp, BinaryOp::add>{}); break;
    case BinaryOp::sub: f(std::integral_constant<BinaryOp, BinaryOp::sub>{}); break;
    case BinaryOp::mul: f(std::integral_constant<BinaryOp, BinaryOp::mul>{}); break;
    case BinaryOp::max: f(std::integral_constant<BinaryOp, BinaryOp::max>{}); break;
    case BinaryOp::min: f(std::integral_constant<BinaryOp, BinaryOp::min>{}); break;
  }
}

}  // namespace detail

inline Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  auto plan = detail::plan_broadcast(a.shape(), b.shape());
  const double* x = a.data().data();
  const double* z = b.data().data();
  detail::Buffer y(numel(plan.out));
  detail::with_binary_op(op, [&](auto tag) {
    constexpr BinaryOp kOp = decltype(tag)::value;
    detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
      if constexpr (kOp == BinaryOp::add) y[o] = x[i] + z[j];
      else if constexpr (kOp == BinaryOp::sub) y[o] = x[i] - z[j];
      else if constexpr (kOp == BinaryOp::mul) y[o] = x[i] * z[j];
      else if constexpr (kOp == BinaryOp::max) y[o] = x[i] >= z[j] ? x[i] : z[j];
      else y[o] = x[i] <= z[j] ? x[i] : z[j];
    });
  });
  static constexpr const char* names[] = {"add", "sub", "mul", "max", "min"};
  Shape out = plan.out;
  return detail::make_result(names[static_cast<int>(op)], std::move(out), std::move(y), {a, b},
                             [op, plan = std::move(plan)](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    const bool ga = na.requires_grad, gb = nb.requires_grad;
    const double* g = self.grad.data();
    double* gxa = na.grad.data();
    double* gxb = nb.grad.data();
    const double* va = na.value.data();
    const double* vb = nb.value.data();
    detail::with_binary_op(op, [&](auto tag) {
      constexpr BinaryOp kOp = decltype(tag)::value;
      detail::for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
        if constexpr (kOp == BinaryOp::add) {
          if (ga) gxa[i] += g[o];
          if (gb) gxb[j] += g[o];
        } else if constexpr (kOp == BinaryOp::sub) {
          if (ga) gxa[i] += g[o];
          if (gb) gxb[j] -= g[o];
        } else if constexpr (kOp == BinaryOp::mul) {
          if (ga) gxa[i] += g[o] * vb[j];
          if (gb) gxb[j] += g[o] * va[i];
        } else if constexpr (kOp == BinaryOp::max) {
          if (va[i] >= vb[j]) {
            if (ga) gxa[i] += g[o];
          } else if (gb) {
            gxb[j] += g[o];
          }
        } else {
          if (va[i] <= vb[j]) {
            if (ga) gxa[i] += g[o];
          } else if (gb) {
            gxb[j] += g[o];
          }
        }
      });
    });
  });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::add, a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::sub, a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::mul, a, b); }
inline Tensor operator-(const Tensor& a) { return elementwise(UnaryOp::neg, a); }
inline Tensor maximum(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::max, a, b); }
inline Tensor minimum(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::min, a, b); }
inline Tensor abs(const Tensor& a) { return elementwise(UnaryOp::abs, a); }
inline Tensor tanh(const Tensor& a) { return elementwise(UnaryOp::tanh, a); }
inline Tensor sigmoid(const Tensor& a) { return elementwise(UnaryOp::sigmoid, a); }
inline Tensor relu(const Tensor& a) { return elementwise(UnaryOp::relu, a); }
inline Tensor exp(const Tensor& a) { return elementwise(UnaryOp::exp, a); }
inline Tensor square(const Tensor& a) { return elementwise(UnaryOp::square, a); }

inline Tensor scale(const Tensor& a, double c) {
  detail::Buffer y(a.data().begin(), a.data().end());
  for (auto& v : y) v *= c;
  return detail::make_result("scale", a.shape(), std::move(y), {a}, [c](detail::Node& self) {
    auto& gx = self.inputs[0]->grad;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c * self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

inline Tensor reshape(const Tensor& a, Shape shape) {
  detail::check_shape(shape);
  if (numel(shape) != a.size())
    throw ShapeError("cannot reshape " + to_string(a.shape()) + " to " + to_string(shape));
  detail::Buffer y(a.data().begin(), a.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(y), {a}, [](detail::Node& self) {
    auto& gx = self.inputs[0]->grad;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

/// Swaps the last two dimensions.
inline Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + to_string(a.shape()));
  const std::size_t m = a.dim(a.rank() - 2), n = a.dim(a.rank() - 1);
  const std::size_t batch = a.size() / (m * n);
  Shape out = a.shape();
  std::swap(out[out.size() - 2], out[out.size() - 1]);
  detail::Buffer y(a.size());
  const auto& x = a.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) y[b * m * n + j * m + i] = x[b * m * n + i * n + j];
  return detail::make_result("transpose", std::move(out), std::move(y), {a},
                             [batch, m, n](detail::Node& self) {
    auto& gx = self.inputs[0]->grad;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[b * m * n + i * n + j] += self.grad[b * m * n + j * m + i];
  });
}

inline Tensor sum(const Tensor& a) {
  const auto& x = a.data();
  double s = 0;
  for (double v : x) s += v;
  return detail::make_result("sum", {1}, {s}, {a}, [](detail::Node& self) {
    for (auto& g : self.inputs[0]->grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Extracts element i of the flattened tensor as a shape-[1] tensor.
inline Tensor element(const Tensor& a, std::size_t i) {
  if (i >= a.size()) throw ShapeError("element index out of range");
  return detail::make_result("element", {1}, {a[i]}, {a}, [i](detail::Node& self) {
    self.inputs[0]->grad[i] += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// a[..., m, k] x b[k, n], a[m, k] x b[B, k, n], or a[B, m, k] x b[B, k, n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  using detail::ConstMapMat;
  using detail::MapMat;
  if (a.rank() < 2 || b.rank() < 2 || b.rank() > 3 || (b.rank() == 3 && a.rank() > 3))
    throw ShapeError("unsupported matmul ranks " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t k = a.dim(a.rank() - 1);
  if (k != b.dim(b.rank() - 2))
    throw ShapeError("matmul inner dimension mismatch " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  const std::size_t n = b.dim(b.rank() - 1);
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };

  if (b.rank() == 2) {
    // Leading dimensions of a flatten into rows.
    const std::size_t rows = a.size() / k;
    Shape out = a.shape();
    out.back() = n;
    detail::Buffer y(rows * n);
    MapMat(y.data(), ei(rows), ei(n)).noalias() =
        ConstMapMat(a.data().data(), ei(rows), ei(k)) * ConstMapMat(b.data().data(), ei(k), ei(n));
    return detail::make_result("matmul", std::move(out), std::move(y), {a, b},
                               [rows, k, n, ei](detail::Node& self) {
      auto& na = *self.inputs[0];
      auto& nb = *self.inputs[1];
      ConstMapMat g(self.grad.data(), ei(rows), ei(n));
      if (na.requires_grad)
        MapMat(na.grad.data(), ei(rows), ei(k)).noalias() +=
            g * ConstMapMat(nb.value.data(), ei(k), ei(n)).transpose();
      if (nb.requires_grad)
        MapMat(nb.grad.data(), ei(k), ei(n)).noalias() +=
            ConstMapMat(na.value.data(), ei(rows), ei(k)).transpose() * g;
    });
  }

  const std::size_t batch = b.dim(0);
  const bool a_batched = a.rank() == 3;
  if (a_batched && a.dim(0) != batch)
    throw ShapeError("matmul batch mismatch " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const std::size_t m = a.dim(a.rank() - 2);
  detail::Buffer y(batch * m * n);
  for (std::size_t t = 0; t < batch; ++t) {
    const double* ap = a.data().data() + (a_batched ? t * m * k : 0);
    MapMat(y.data() + t * m * n, ei(m), ei(n)).noalias() =
        ConstMapMat(ap, ei(m), ei(k)) * ConstMapMat(b.data().data() + t * k * n, ei(k), ei(n));
  }
  return detail::make_result("bmm", {batch, m, n}, std::move(y), {a, b},
                             [batch, a_batched, m, k, n, ei](detail::Node& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    for (std::size_t t = 0; t < batch; ++t) {
      ConstMapMat g(self.grad.data() + t * m * n, ei(m), ei(n));
      const std::size_t aoff = a_batched ? t * m * k : 0;
      if (na.requires_grad)
        MapMat(na.grad.data() + aoff, ei(m), ei(k)).noalias() +=
            g * ConstMapMat(nb.value.data() + t * k * n, ei(k), ei(n)).transpose();
      if (nb.requires_grad)
        MapMat(nb.grad.data() + t * k * n, ei(k), ei(n)).noalias() +=
            ConstMapMat(na.value.data() + aoff, ei(m), ei(k)).transpose() * g;
    }
  });
}

/// Softmax over the last dimension. Entries equal to -inf map to exactly 0.
inline Tensor softmax_rows(const Tensor& a) {
  const std::size_t n = a.dim(a.rank() - 1);
  const std::size_t rows = a.size() / n;
  const auto& x = a.data();
  detail::Buffer y(a.size());
  constexpr double ninf = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * n;
    double* yr = y.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    if (mx == ninf) throw ContractError("softmax row " + std::to_string(r) + " is entirely masked");
    double s = 0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = xr[j] == ninf ? 0.0 : std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= s;
  }
  return detail::make_result("softmax", a.shape(), std::move(y), {a}, [rows, n](detail::Node& self) {
    auto& gx = self.inputs[0]->grad;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = self.value.data() + r * n;
      const double* gr = self.grad.data() + r * n;
      double dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += yr[j] * (gr[j] - dot);
    }
  });
}

/// Causal dilated convolution over time.
///
/// x is [time, c_in] or [batch, time, c_in]; kernel is [taps, c_in, c_out].
/// Tap j multiplies input[t + left_pad - (taps-1)*dilation ... ] so that with
/// the default left_pad = (taps-1)*dilation tap j reads input[t - j*dilation]
/// and the output keeps the input length. Positions before time 0 read zeros.
inline Tensor dilated_conv1d(const Tensor& x, const Tensor& kernel, std::size_t dilation,
                             std::ptrdiff_t left_pad = -1) {
  using detail::ConstMapMat;
  using detail::MapMat;
  if (dilation == 0) throw ContractError("dilation must be positive");
  if (kernel.rank() != 3) throw ShapeError("kernel must be [taps, c_in, c_out], got " + to_string(kernel.shape()));
  if (x.rank() != 2 && x.rank() != 3) throw ShapeError("conv input must be rank 2 or 3");
  const std::size_t taps = kernel.dim(0), cin = kernel.dim(1), cout = kernel.dim(2);
  const std::size_t batch = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t len = x.dim(x.rank() - 2);
  if (x.dim(x.rank() - 1) != cin)
    throw ShapeError("conv channel mismatch " + to_string(x.shape()) + " vs kernel " + to_string(kernel.shape()));
  const std::size_t span = (taps - 1) * dilation;
  const std::size_t pad = left_pad < 0 ? span : static_cast<std::size_t>(left_pad);
  if (span + 1 > len + pad)
    throw ShapeError("kernel span " + std::to_string(span + 1) + " exceeds padded input length " +
                     std::to_string(len + pad));
  const std::size_t out_len = len + pad - span;
  // Output t, tap j reads input index t + span - pad - j*dilation (signed).
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  struct Range { std::size_t out0, in0, count; };
  std::vector<Range> ranges;
  for (std::size_t j = 0; j < taps; ++j) {
    const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(span) - static_cast<std::ptrdiff_t>(pad) -
                                 static_cast<std::ptrdiff_t>(j * dilation);
    const std::ptrdiff_t t0 = std::max<std::ptrdiff_t>(0, -shift);
    const std::ptrdiff_t t1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(out_len),
                                                       static_cast<std::ptrdiff_t>(len) - shift);
    if (t1 > t0)
      ranges.push_back({static_cast<std::size_t>(t0), static_cast<std::size_t>(t0 + shift),
                        static_cast<std::size_t>(t1 - t0)});
    else
      ranges.push_back({0, 0, 0});
  }
  detail::Buffer y(batch * out_len * cout, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < taps; ++j) {
      const auto& r = ranges[j];
      if (!r.count) continue;
      MapMat(y.data() + (b * out_len + r.out0) * cout, ei(r.count), ei(cout)).noalias() +=
          ConstMapMat(x.data().data() + (b * len + r.in0) * cin, ei(r.count), ei(cin)) *
          ConstMapMat(kernel.data().data() + j * cin * cout, ei(cin), ei(cout));
    }
  Shape out = x.shape();
  out[out.size() - 2] = out_len;
  out.back() = cout;
  return detail::make_result("dilated_conv1d", std::move(out), std::move(y), {x, kernel},
                             [=](detail::Node& self) {
    auto& nx = *self.inputs[0];
    auto& nk = *self.inputs[1];
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < taps; ++j) {
        const auto& r = ranges[j];
        if (!r.count) continue;
        ConstMapMat g(self.grad.data() + (b * out_len + r.out0) * cout, ei(r.count), ei(cout));
        if (nx.requires_grad)
          MapMat(nx.grad.data() + (b * len + r.in0) * cin, ei(r.count), ei(cin)).noalias() +=
              g * ConstMapMat(nk.value.data() + j * cin * cout, ei(cin), ei(cout)).transpose();
        if (nk.requires_grad)
          MapMat(nk.grad.data() + j * cin * cout, ei(cin), ei(cout)).noalias() +=
              ConstMapMat(nx.value.data() + (b * len + r.in0) * cin, ei(r.count), ei(cin)).transpose() * g;
      }
  });
}

/// Inverted dropout; identity when not training or p == 0.
template <class Rng>
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw ContractError("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> mask(x.size());
  const double s = 1.0 / (1.0 - p);
  for (auto& m : mask) m = keep(rng) ? s : 0.0;
  return x * Tensor::constant(x.shape(), std::move(mask));
}

}  // namespace castnet
