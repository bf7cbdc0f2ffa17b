#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "varegress/errors.hpp"
#include "varegress/linalg.hpp"

/// Reverse-mode automatic differentiation over dense float64 tensors.
///
/// A Tape records operations define-by-run: every op method evaluates its
/// result eagerly and appends a node carrying the backward rule. Leaves
/// (parameters, constants) live outside any tape and may be shared by many
/// tapes over their lifetime; gradients accumulate into leaves until cleared.
namespace varegress::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

enum class OpKind {
  leaf,
  add,
  subtract,
  multiply,
  matmul,
  exp,
  log,
  square,
  sum,
  sum_axis,
  mean,
  tanh,
  relu,
  softplus,
  sigmoid,
  sqrt,
  negate,
  scale,
  broadcast,
  concat,
  slice,
  transpose,
  reshape,
  spd_solve,
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::subtract: return "subtract";
    case OpKind::multiply: return "multiply";
    case OpKind::matmul: return "matmul";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::square: return "square";
    case OpKind::sum: return "sum";
    case OpKind::sum_axis: return "sum_axis";
    case OpKind::mean: return "mean";
    case OpKind::tanh: return "tanh";
    case OpKind::relu: return "relu";
    case OpKind::softplus: return "softplus";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::sqrt: return "sqrt";
    case OpKind::negate: return "negate";
    case OpKind::scale: return "scale";
    case OpKind::broadcast: return "broadcast";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::transpose: return "transpose";
    case OpKind::reshape: return "reshape";
    case OpKind::spd_solve: return "spd_solve";
  }
  return "?";
}

class Tape;

namespace detail {

struct Node {
  OpKind kind = OpKind::leaf;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient reaches the node
  bool requires_grad = false;
  const Tape* tape = nullptr;  // null for leaves
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

// [outer, dim, inner] decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, dim = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.dim = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

/// Handle to a tensor node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (numel(shape) != values.size()) {
      throw ShapeError("Tensor: shape " + shape_string(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    }
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("Tensor: zero-sized dimension in " + shape_string(shape));
    }
    for (double v : values) {
      if (!std::isfinite(v)) throw NumericError("Tensor: non-finite initial value");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t size() const { return node().value.size(); }

  std::size_t rows() const {
    if (rank() != 2) throw ShapeError("Tensor::rows: expected a matrix, got " + shape_string(shape()));
    return shape()[0];
  }

  std::size_t cols() const {
    if (rank() != 2) throw ShapeError("Tensor::cols: expected a matrix, got " + shape_string(shape()));
    return shape()[1];
  }

  std::span<const double> values() const { return node().value; }

  // Only leaves are mutable; recorded values are frozen by the tape.
  std::span<double> mutable_values() {
    if (node().kind != OpKind::leaf) throw Error("Tensor::mutable_values: tensor is an op output");
    return node_->value;
  }

  std::vector<double> to_vector() const { return node().value; }

  double item() const {
    if (size() != 1) throw ShapeError("Tensor::item: tensor has " + std::to_string(size()) + " elements");
    return node().value[0];
  }

  double at(std::size_t r, std::size_t c) const { return node().value[r * cols() + c]; }

  bool requires_grad() const { return node().requires_grad; }
  bool has_grad() const { return !node().grad.empty(); }
  std::span<const double> grad() const { return node().grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }

  void zero_grad() {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  void clear_grad() { node_->grad.clear(); }

  OpKind kind() const { return node().kind; }
  bool is_leaf() const { return node().kind == OpKind::leaf; }
  const Tape* tape() const { return node().tape; }

  // A leaf holding a copy of the current values, detached from any tape.
  Tensor detach() const { return Tensor(shape(), node().value, false); }

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

 private:
  friend class Tape;

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  const detail::Node& node() const {
    if (!node_) throw Error("Tensor: use of undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

/// Operation recorder. Not copyable or movable: recorded nodes point back at
/// their tape to detect cross-tape use.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const noexcept { return nodes_.size(); }

  std::vector<OpKind> kinds() const {
    std::vector<OpKind> out;
    out.reserve(nodes_.size());
    for (const auto& n : nodes_) out.push_back(n->kind);
    return out;
  }

  // Generic entry point for the op kinds that take no extra arguments.
  Tensor record(OpKind kind, std::span<const Tensor> in) {
    auto arity = [&](std::size_t n) {
      if (in.size() != n) {
        throw ShapeError(std::string("record: ") + op_name(kind) + " expects " + std::to_string(n) + " inputs");
      }
    };
    switch (kind) {
      case OpKind::add: arity(2); return add(in[0], in[1]);
      case OpKind::subtract: arity(2); return subtract(in[0], in[1]);
      case OpKind::multiply: arity(2); return multiply(in[0], in[1]);
      case OpKind::matmul: arity(2); return matmul(in[0], in[1]);
      case OpKind::spd_solve: arity(2); return spd_solve(in[0], in[1]);
      case OpKind::exp: arity(1); return exp(in[0]);
      case OpKind::log: arity(1); return log(in[0]);
      case OpKind::square: arity(1); return square(in[0]);
      case OpKind::sum: arity(1); return sum(in[0]);
      case OpKind::mean: arity(1); return mean(in[0]);
      case OpKind::tanh: arity(1); return tanh(in[0]);
      case OpKind::relu: arity(1); return relu(in[0]);
      case OpKind::softplus: arity(1); return softplus(in[0]);
      case OpKind::sigmoid: arity(1); return sigmoid(in[0]);
      case OpKind::sqrt: arity(1); return sqrt(in[0]);
      case OpKind::negate: arity(1); return negate(in[0]);
      case OpKind::transpose: arity(1); return transpose(in[0]);
      case OpKind::concat: return concat(std::vector<Tensor>(in.begin(), in.end()), 0);
      default:
        throw Error(std::string("record: op kind '") + op_name(kind) + "' needs arguments; call it directly");
    }
  }

  // --- elementwise binary (identical shapes or a size-1 operand) ---

  Tensor add(const Tensor& a, const Tensor& b) {
    return binary(OpKind::add, a, b, [](double x, double y) { return x + y; },
                  [](double, double, double g) { return g; }, [](double, double, double g) { return g; });
  }

  Tensor subtract(const Tensor& a, const Tensor& b) {
    return binary(OpKind::subtract, a, b, [](double x, double y) { return x - y; },
                  [](double, double, double g) { return g; }, [](double, double, double g) { return -g; });
  }

  Tensor multiply(const Tensor& a, const Tensor& b) {
    return binary(OpKind::multiply, a, b, [](double x, double y) { return x * y; },
                  [](double, double y, double g) { return g * y; }, [](double x, double, double g) { return g * x; });
  }

  // --- elementwise unary ---

  Tensor exp(const Tensor& a) {
    return unary(OpKind::exp, a, [](double x) { return std::exp(x); },
                 [](double, double y, double g) { return g * y; });
  }

  Tensor log(const Tensor& a) {
    return unary(OpKind::log, a, [](double x) { return std::log(x); },
                 [](double x, double, double g) { return g / x; });
  }

  Tensor square(const Tensor& a) {
    return unary(OpKind::square, a, [](double x) { return x * x; },
                 [](double x, double, double g) { return 2.0 * x * g; });
  }

  Tensor tanh(const Tensor& a) {
    return unary(OpKind::tanh, a, [](double x) { return std::tanh(x); },
                 [](double, double y, double g) { return g * (1.0 - y * y); });
  }

  Tensor relu(const Tensor& a) {
    return unary(OpKind::relu, a, [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double, double g) { return x > 0.0 ? g : 0.0; });
  }

  Tensor softplus(const Tensor& a) {
    return unary(OpKind::softplus, a, [](double x) { return softplus_value(x); },
                 [](double x, double, double g) { return g * sigmoid_value(x); });
  }

  Tensor sigmoid(const Tensor& a) {
    return unary(OpKind::sigmoid, a, [](double x) { return sigmoid_value(x); },
                 [](double, double y, double g) { return g * y * (1.0 - y); });
  }

  // The derivative at exactly 0 is taken as 0 (subgradient of a clamped root).
  Tensor sqrt(const Tensor& a) {
    return unary(OpKind::sqrt, a, [](double x) { return std::sqrt(x); },
                 [](double, double y, double g) { return y > 0.0 ? g / (2.0 * y) : 0.0; });
  }

  Tensor negate(const Tensor& a) {
    return unary(OpKind::negate, a, [](double x) { return -x; }, [](double, double, double g) { return -g; });
  }

  Tensor scale(const Tensor& a, double c) {
    return unary(OpKind::scale, a, [c](double x) { return c * x; },
                 [c](double, double, double g) { return c * g; });
  }

  // --- reductions ---

  Tensor sum(const Tensor& a) {
    const auto& x = a.values();
    const double s = std::accumulate(x.begin(), x.end(), 0.0);
    return push(OpKind::sum, {}, {s}, {a}, [](detail::Node& self) {
      auto& in = *self.inputs[0];
      if (!in.requires_grad) return;
      auto& g = in.ensure_grad();
      for (auto& v : g) v += self.grad[0];
    });
  }

  Tensor mean(const Tensor& a) {
    const auto& x = a.values();
    const double n = static_cast<double>(x.size());
    const double m = std::accumulate(x.begin(), x.end(), 0.0) / n;
    return push(OpKind::mean, {}, {m}, {a}, [n](detail::Node& self) {
      auto& in = *self.inputs[0];
      if (!in.requires_grad) return;
      auto& g = in.ensure_grad();
      for (auto& v : g) v += self.grad[0] / n;
    });
  }

  // Sum along one axis, keeping it as a size-1 dimension.
  Tensor sum(const Tensor& a, std::size_t axis) {
    if (axis >= a.rank()) throw ShapeError("sum: axis out of range for " + shape_string(a.shape()));
    const auto sp = detail::split_axis(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape[axis] = 1;
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    const auto& x = a.values();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t d = 0; d < sp.dim; ++d)
        for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.dim + d) * sp.inner + i];
    return push(OpKind::sum_axis, std::move(out_shape), std::move(out), {a}, [sp](detail::Node& self) {
      auto& in = *self.inputs[0];
      if (!in.requires_grad) return;
      auto& g = in.ensure_grad();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t d = 0; d < sp.dim; ++d)
          for (std::size_t i = 0; i < sp.inner; ++i) g[(o * sp.dim + d) * sp.inner + i] += self.grad[o * sp.inner + i];
    });
  }

  // --- shape manipulation ---

  // Numpy-style broadcast: the source is a single element, or has the target
  // rank with every dimension equal to the target's or 1.
  Tensor broadcast_to(const Tensor& a, Shape target) {
    const Shape& src = a.shape();
    const bool scalar_src = a.size() == 1;
    if (!scalar_src) {
      if (src.size() != target.size()) {
        throw ShapeError("broadcast: cannot broadcast " + shape_string(src) + " to " + shape_string(target));
      }
      for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i] != target[i] && src[i] != 1) {
          throw ShapeError("broadcast: cannot broadcast " + shape_string(src) + " to " + shape_string(target));
        }
      }
    }
    const std::size_t n = numel(target);
    std::vector<std::size_t> index(n, 0);
    if (!scalar_src) {
      // Source strides with zero stride along broadcast dimensions.
      const std::size_t r = target.size();
      std::vector<std::size_t> src_stride(r, 0);
      std::size_t stride = 1;
      for (std::size_t i = r; i-- > 0;) {
        src_stride[i] = src[i] == 1 ? 0 : stride;
        stride *= src[i];
      }
      std::vector<std::size_t> counter(r, 0);
      for (std::size_t k = 0; k < n; ++k) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < r; ++i) off += counter[i] * src_stride[i];
        index[k] = off;
        for (std::size_t i = r; i-- > 0;) {
          if (++counter[i] < target[i]) break;
          counter[i] = 0;
        }
      }
    }
    const auto& x = a.values();
    std::vector<double> out(n);
    for (std::size_t k = 0; k < n; ++k) out[k] = x[index[k]];
    return push(OpKind::broadcast, std::move(target), std::move(out), {a},
                [index = std::move(index)](detail::Node& self) {
                  auto& in = *self.inputs[0];
                  if (!in.requires_grad) return;
                  auto& g = in.ensure_grad();
                  for (std::size_t k = 0; k < index.size(); ++k) g[index[k]] += self.grad[k];
                });
  }

  Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_string(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
      const Shape& s = p.shape();
      bool ok = s.size() == first.size();
      for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
      if (!ok) throw ShapeError("concat: incompatible shapes " + shape_string(first) + " and " + shape_string(s));
      widths.push_back(s[axis]);
      out_shape[axis] += s[axis];
    }
    const auto sp = detail::split_axis(out_shape, axis);
    std::vector<double> out(numel(out_shape));
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const auto& x = parts[p].values();
      const std::size_t w = widths[p];
      for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(x.begin() + o * w * sp.inner, w * sp.inner, out.begin() + (o * sp.dim + offset) * sp.inner);
      offset += w;
    }
    return push(OpKind::concat, std::move(out_shape), std::move(out), parts, [sp, widths](detail::Node& self) {
      std::size_t offset = 0;
      for (std::size_t p = 0; p < self.inputs.size(); ++p) {
        auto& in = *self.inputs[p];
        const std::size_t w = widths[p];
        if (in.requires_grad) {
          auto& g = in.ensure_grad();
          for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t k = 0; k < w * sp.inner; ++k)
              g[o * w * sp.inner + k] += self.grad[(o * sp.dim + offset) * sp.inner + k];
        }
        offset += w;
      }
    });
  }

  // Half-open range [begin, end) along axis.
  Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
    if (axis >= a.rank()) throw ShapeError("slice: axis out of range for " + shape_string(a.shape()));
    if (begin >= end || end > a.shape()[axis]) {
      throw ShapeError("slice: invalid range [" + std::to_string(begin) + "," + std::to_string(end) + ") on " +
                       shape_string(a.shape()));
    }
    const auto sp = detail::split_axis(a.shape(), axis);
    const std::size_t w = end - begin;
    Shape out_shape = a.shape();
    out_shape[axis] = w;
    std::vector<double> out(sp.outer * w * sp.inner);
    const auto& x = a.values();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(x.begin() + (o * sp.dim + begin) * sp.inner, w * sp.inner, out.begin() + o * w * sp.inner);
    return push(OpKind::slice, std::move(out_shape), std::move(out), {a}, [sp, begin, w](detail::Node& self) {
      auto& in = *self.inputs[0];
      if (!in.requires_grad) return;
      auto& g = in.ensure_grad();
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t k = 0; k < w * sp.inner; ++k)
          g[(o * sp.dim + begin) * sp.inner + k] += self.grad[o * w * sp.inner + k];
    });
  }

  Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size()) {
      throw ShapeError("reshape: " + shape_string(a.shape()) + " to " + shape_string(shape));
    }
    return push(OpKind::reshape, std::move(shape), a.to_vector(), {a}, [](detail::Node& self) {
      auto& in = *self.inputs[0];
      if (!in.requires_grad) return;
      auto& g = in.ensure_grad();
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += self.grad[k];
    });
  }

  Tensor transpose(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    const auto& x = a.values();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
    return push(OpKind::transpose, {n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
      auto& in = *self.inputs[0];
      if (!in.requires_grad) return;
      auto& g = in.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    });
  }

  // --- linear algebra ---

  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows()) {
      throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n);
    detail::MatrixMap(out.data(), m, n).noalias() =
        detail::ConstMatrixMap(a.values().data(), m, k) * detail::ConstMatrixMap(b.values().data(), k, n);
    return push(OpKind::matmul, {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
      auto& lhs = *self.inputs[0];
      auto& rhs = *self.inputs[1];
      detail::ConstMatrixMap g(self.grad.data(), m, n);
      if (lhs.requires_grad) {
        detail::MatrixMap(lhs.ensure_grad().data(), m, k).noalias() +=
            g * detail::ConstMatrixMap(rhs.value.data(), k, n).transpose();
      }
      if (rhs.requires_grad) {
        detail::MatrixMap(rhs.ensure_grad().data(), k, n).noalias() +=
            detail::ConstMatrixMap(lhs.value.data(), m, k).transpose() * g;
      }
    });
  }

  /// X = S^{-1} B with S = (A + A^T)/2 symmetric positive definite, via a
  /// Cholesky factorization (no explicit inverse). The gradient with respect
  /// to A is the symmetrized one, consistent with the symmetrized forward.
  Tensor spd_solve(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || a.rows() != a.cols() || b.rank() != 2 || b.rows() != a.rows()) {
      throw ShapeError("spd_solve: incompatible shapes " + shape_string(a.shape()) + " \\ " +
                       shape_string(b.shape()));
    }
    const std::size_t n = a.rows(), m = b.cols();
    std::vector<double> sym(n * n);
    const auto& av = a.values();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) sym[i * n + j] = 0.5 * (av[i * n + j] + av[j * n + i]);
    auto chol = linalg::Cholesky::factor(sym, n);
    if (!chol) throw FactorizationError("spd_solve: matrix is not positive definite", 0.0);
    auto factor = std::make_shared<const linalg::Cholesky>(std::move(*chol));
    std::vector<double> x = factor->solve(b.values(), m);
    return push(OpKind::spd_solve, {n, m}, std::move(x), {a, b}, [factor, n, m](detail::Node& self) {
      auto& lhs = *self.inputs[0];
      auto& rhs = *self.inputs[1];
      std::vector<double> gb = factor->solve(self.grad, m);
      if (rhs.requires_grad) {
        auto& g = rhs.ensure_grad();
        for (std::size_t k = 0; k < g.size(); ++k) g[k] += gb[k];
      }
      if (lhs.requires_grad) {
        auto& g = lhs.ensure_grad();
        // dS = -gb X^T, then symmetrize.
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            double dij = 0.0, dji = 0.0;
            for (std::size_t c = 0; c < m; ++c) {
              dij += gb[i * m + c] * self.value[j * m + c];
              dji += gb[j * m + c] * self.value[i * m + c];
            }
            g[i * n + j] -= 0.5 * (dij + dji);
          }
        }
      }
    });
  }

  /// Seeds d(output)/d(output) = 1 and runs every recorded backward rule once,
  /// newest first. Leaf gradients accumulate.
  void backward(const Tensor& output) {
    if (output.size() != 1) {
      throw ShapeError("backward: output must be a scalar, got " + shape_string(output.shape()));
    }
    if (output.tape() != this) throw Error("backward: output was not recorded on this tape");
    if (backward_done_) throw Error("backward: tape already differentiated");
    backward_done_ = true;
    for (auto& node : nodes_) {
      if (node->requires_grad) node->grad.assign(node->value.size(), 0.0);
    }
    auto* out = output.node_.get();
    if (!out->requires_grad) return;
    out->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      auto& node = **it;
      if (node.backward) node.backward(node);
    }
  }

  static double softplus_value(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

  static double sigmoid_value(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

 private:
  using BackwardRule = std::function<void(detail::Node&)>;

  Tensor push(OpKind kind, Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
              BackwardRule rule) {
    for (double v : values) {
      if (!std::isfinite(v)) throw NumericError(std::string(op_name(kind)) + ": non-finite output");
    }
    auto node = std::make_shared<detail::Node>();
    node->kind = kind;
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->tape = this;
    for (const auto& t : inputs) {
      const auto& in = t.node_;
      if (!in) throw Error(std::string(op_name(kind)) + ": undefined input");
      if (in->tape != nullptr && in->tape != this) {
        throw Error(std::string(op_name(kind)) + ": input belongs to a different tape");
      }
      node->requires_grad = node->requires_grad || in->requires_grad;
      node->inputs.push_back(in);
    }
    if (node->requires_grad) node->backward = std::move(rule);
    nodes_.push_back(node);
    return Tensor(std::move(node));
  }

  Tensor push(OpKind kind, Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
              BackwardRule rule) {
    return push(kind, std::move(shape), std::move(values), std::vector<Tensor>(inputs), std::move(rule));
  }

  template <class F, class DF>
  Tensor unary(OpKind kind, const Tensor& a, F f, DF df) {
    const auto& x = a.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return push(kind, a.shape(), std::move(out), {a}, [df](detail::Node& self) {
      auto& in = *self.inputs[0];
      if (!in.requires_grad) return;
      auto& g = in.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += df(in.value[i], self.value[i], self.grad[i]);
    });
  }

  template <class F, class DA, class DB>
  Tensor binary(OpKind kind, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
    const bool same = a.shape() == b.shape();
    const bool a_scalar = a.size() == 1, b_scalar = b.size() == 1;
    if (!same && !a_scalar && !b_scalar) {
      throw ShapeError(std::string(op_name(kind)) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                       shape_string(b.shape()));
    }
    // Between two single-element operands the higher rank wins.
    const bool take_b = !same && (a_scalar && (!b_scalar || b.rank() > a.rank()));
    const Shape out_shape = take_b ? b.shape() : a.shape();
    const std::size_t n = numel(out_shape);
    const bool ab = a.size() == 1 && n != 1, bb = b.size() == 1 && n != 1;
    const auto& x = a.values();
    const auto& y = b.values();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(x[ab ? 0 : i], y[bb ? 0 : i]);
    return push(kind, out_shape, std::move(out), {a, b}, [da, db, ab, bb](detail::Node& self) {
      auto& lhs = *self.inputs[0];
      auto& rhs = *self.inputs[1];
      const std::size_t n = self.value.size();
      if (lhs.requires_grad) {
        auto& g = lhs.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          g[ab ? 0 : i] += da(lhs.value[ab ? 0 : i], rhs.value[bb ? 0 : i], self.grad[i]);
      }
      if (rhs.requires_grad) {
        auto& g = rhs.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          g[bb ? 0 : i] += db(lhs.value[ab ? 0 : i], rhs.value[bb ? 0 : i], self.grad[i]);
      }
    });
  }

  std::vector<std::shared_ptr<detail::Node>> nodes_;
  bool backward_done_ = false;
};

}  // namespace varegress::ad
