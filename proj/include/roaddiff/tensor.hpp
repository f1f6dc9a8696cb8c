#pragma once

// Dense row-major 2-D tensors with tape-based reverse-mode differentiation.
//
// Every op that touches a tensor with requires_grad() appends its result node
// to the thread's active Tape. backward() walks the tape in reverse creation
// order, which is a valid topological order of the recorded graph.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "roaddiff/errors.hpp"

namespace roaddiff {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  friend bool operator==(const Shape&, const Shape&) = default;
  std::string str() const {
    return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
  }
};

// Plain value matrix used for data, masks and constants.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != r * c) throw ShapeError("Matrix: value count does not match shape");
  }
  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  Shape shape() const { return {rows, cols}; }
  std::size_t size() const { return data.size(); }
  friend bool operator==(const Matrix&, const Matrix&) = default;
};

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::function<void(const Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

class Tape;

namespace detail {
inline thread_local Tape* active_tape = nullptr;
inline thread_local int no_grad_depth = 0;
Tape& default_tape();
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) { return from_values(shape, std::vector<double>(shape.size(), 0.0), false); }
  static Tensor constant(const Matrix& m) { return from_values(m.shape(), m.data, false); }
  static Tensor constant(Shape shape, std::vector<double> values) {
    return from_values(shape, std::move(values), false);
  }
  static Tensor scalar(double v) { return from_values({1, 1}, {v}, false); }
  // A leaf whose gradient is accumulated by backward().
  static Tensor parameter(Shape shape, std::vector<double> values) {
    return from_values(shape, std::move(values), true);
  }
  static Tensor parameter(const Matrix& m) { return parameter(m.shape(), m.data); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t rows() const { return node().shape.rows; }
  std::size_t cols() const { return node().shape.cols; }
  std::size_t size() const { return node().value.size(); }
  bool requires_grad() const { return node().requires_grad; }

  std::span<const double> values() const { return node().value; }
  std::span<double> mutable_values() { return node().value; }
  double operator()(std::size_t i, std::size_t j) const { return node().value[i * cols() + j]; }
  double item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape().str());
    return node().value[0];
  }

  // Empty span until a backward pass reached this tensor.
  std::span<const double> grad() const { return node().grad; }
  void zero_grad() {
    auto& g = node().grad;
    std::fill(g.begin(), g.end(), 0.0);
  }

  Matrix to_matrix() const { return Matrix(rows(), cols(), node().value); }

  detail::Node& node() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return *node_;
  }
  const detail::NodePtr& ptr() const { return node_; }

  static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad) {
    if (values.size() != shape.size()) throw ShapeError("tensor value count does not match " + shape.str());
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = shape;
    t.node_->value = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

 private:
  detail::NodePtr node_;
};

// Records differentiable ops in creation order. Constructing a Tape makes it
// the active tape of the calling thread until it is destroyed.
class Tape {
 public:
  Tape() : previous_(detail::active_tape) { detail::active_tape = this; }
  ~Tape() {
    if (detail::active_tape == this) detail::active_tape = previous_;
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape& active() { return detail::active_tape ? *detail::active_tape : detail::default_tape(); }

  void record(detail::NodePtr node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void backward(const Tensor& loss) {
    if (loss.size() != 1) throw ContractError("backward() requires a scalar loss, got " + loss.shape().str());
    if (!loss.requires_grad()) throw ContractError("backward(): loss does not depend on any parameter");
    auto& seed = loss.node().grad_buffer();
    seed[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      const detail::Node& n = **it;
      if (!n.grad.empty() && n.backward) n.backward(n);
    }
    clear();
  }

 private:
  struct DefaultTag {};
  explicit Tape(DefaultTag) : previous_(nullptr) {}
  friend Tape& detail::default_tape();

  Tape* previous_;
  std::vector<detail::NodePtr> nodes_;
};

namespace detail {
inline Tape& default_tape() {
  thread_local Tape tape{Tape::DefaultTag{}};
  return tape;
}
}  // namespace detail

// Disables recording for its lifetime; results never require grad.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline void backward(const Tensor& loss) { Tape::active().backward(loss); }

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  if (no_grad_depth > 0) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

// Builds the result node. `make_backward` is only invoked when the result is
// recorded, so forward-only evaluation pays no closure cost.
template <class MakeBackward>
Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> inputs,
                   MakeBackward&& make_backward) {
  const bool track = any_requires_grad(inputs);
  Tensor out = Tensor::from_values(shape, std::move(value), track);
  if (track) {
    out.node().backward = make_backward();
    Tape::active().record(out.ptr());
  }
  return out;
}

inline void accumulate(const NodePtr& target, std::span<const double> delta) {
  if (!target->requires_grad) return;
  auto& g = target->grad_buffer();
  for (std::size_t i = 0; i < delta.size(); ++i) g[i] += delta[i];
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> v(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] + bv[i];
  return detail::make_result(a.shape(), std::move(v), {&a, &b}, [pa = a.ptr(), pb = b.ptr()] {
    return [pa, pb](const detail::Node& self) {
      detail::accumulate(pa, self.grad);
      detail::accumulate(pb, self.grad);
    };
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> v(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] - bv[i];
  return detail::make_result(a.shape(), std::move(v), {&a, &b}, [pa = a.ptr(), pb = b.ptr()] {
    return [pa, pb](const detail::Node& self) {
      detail::accumulate(pa, self.grad);
      if (pb->requires_grad) {
        auto& g = pb->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
      }
    };
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> v(a.size());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] * bv[i];
  return detail::make_result(a.shape(), std::move(v), {&a, &b}, [pa = a.ptr(), pb = b.ptr()] {
    return [pa, pb](const detail::Node& self) {
      if (pa->requires_grad) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
      }
      if (pb->requires_grad) {
        auto& g = pb->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
      }
    };
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> v(a.values().begin(), a.values().end());
  for (auto& x : v) x *= c;
  return detail::make_result(a.shape(), std::move(v), {&a}, [pa = a.ptr(), c] {
    return [pa, c](const detail::Node& self) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
    };
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> v(a.values().begin(), a.values().end());
  for (auto& x : v) x += c;
  return detail::make_result(a.shape(), std::move(v), {&a}, [pa = a.ptr()] {
    return [pa](const detail::Node& self) { detail::accumulate(pa, self.grad); };
  });
}

// a * s where s is a 1x1 tensor.
inline Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("mul_scalar: expected 1x1 multiplier, got " + s.shape().str());
  const double sv = s.values()[0];
  std::vector<double> v(a.values().begin(), a.values().end());
  for (auto& x : v) x *= sv;
  return detail::make_result(a.shape(), std::move(v), {&a, &s}, [pa = a.ptr(), ps = s.ptr()] {
    return [pa, ps](const detail::Node& self) {
      const double sv = ps->value[0];
      if (pa->requires_grad) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += sv * self.grad[i];
      }
      if (ps->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pa->value[i];
        ps->grad_buffer()[0] += acc;
      }
    };
  });
}

// a[m x n] + b[1 x n] broadcast over rows.
inline Tensor add_row(const Tensor& a, const Tensor& b) {
  if (b.rows() != 1 || b.cols() != a.cols())
    throw ShapeError("add_row: bias " + b.shape().str() + " does not broadcast over " + a.shape().str());
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> v(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] += bv[j];
  return detail::make_result(a.shape(), std::move(v), {&a, &b}, [pa = a.ptr(), pb = b.ptr(), m, n] {
    return [pa, pb, m, n](const detail::Node& self) {
      detail::accumulate(pa, self.grad);
      if (pb->requires_grad) {
        auto& g = pb->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
      }
    };
  });
}

namespace detail {

template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  std::vector<double> v(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(av[i]);
  return make_result(a.shape(), std::move(v), {&a}, [pa = a.ptr(), df] {
    return [pa, df](const Node& self) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(pa->value[i], self.value[i]);
    };
  });
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor leaky_relu(const Tensor& a, double slope) {
  return detail::unary(
      a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      a,
      [](double x) {
        // Split by sign so exp never overflows.
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ " + a.shape().str() + " x " + b.shape().str());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> v(m * n, 0.0);
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    double* out = v.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += aip * brow[j];
    }
  }
  return detail::make_result({m, n}, std::move(v), {&a, &b}, [pa = a.ptr(), pb = b.ptr(), m, k, n] {
    return [pa, pb, m, k, n](const detail::Node& self) {
      const double* g = self.grad.data();
      if (pa->requires_grad) {
        auto& ga = pa->grad_buffer();
        const double* bv = pb->value.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
            ga[i * k + p] += acc;
          }
      }
      if (pb->requires_grad) {
        auto& gb = pb->grad_buffer();
        const double* av = pa->value.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
          }
      }
    };
  });
}

// a[m x k] * b[n x k]^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: inner dimensions differ " + a.shape().str() + " x " + b.shape().str() + "^T");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> v(m * n, 0.0);
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += av[i * k + p] * bv[j * k + p];
      v[i * n + j] = acc;
    }
  return detail::make_result({m, n}, std::move(v), {&a, &b}, [pa = a.ptr(), pb = b.ptr(), m, k, n] {
    return [pa, pb, m, k, n](const detail::Node& self) {
      const double* g = self.grad.data();
      if (pa->requires_grad) {
        auto& ga = pa->grad_buffer();
        const double* bv = pb->value.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double gij = g[i * n + j];
            if (gij == 0.0) continue;
            for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += gij * bv[j * k + p];
          }
      }
      if (pb->requires_grad) {
        auto& gb = pb->grad_buffer();
        const double* av = pa->value.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double gij = g[i * n + j];
            if (gij == 0.0) continue;
            for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += gij * av[i * k + p];
          }
      }
    };
  });
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> v(m * n);
  auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) v[j * m + i] = av[i * n + j];
  return detail::make_result({n, m}, std::move(v), {&a}, [pa = a.ptr(), m, n] {
    return [pa, m, n](const detail::Node& self) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    };
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape.size() != a.size()) throw ShapeError("reshape: " + a.shape().str() + " -> " + shape.str());
  std::vector<double> v(a.values().begin(), a.values().end());
  return detail::make_result(shape, std::move(v), {&a}, [pa = a.ptr()] {
    return [pa](const detail::Node& self) { detail::accumulate(pa, self.grad); };
  });
}

// ---------------------------------------------------------------------------
// Structural ops

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw ShapeError("concat_cols: row counts differ");
    n += p.cols();
  }
  std::vector<double> v(m * n);
  std::size_t offset = 0;
  std::vector<detail::NodePtr> ptrs;
  bool track = false;
  for (const auto& p : parts) {
    auto pv = p.values();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) v[i * n + offset + j] = pv[i * p.cols() + j];
    offset += p.cols();
    ptrs.push_back(p.ptr());
    track = track || p.requires_grad();
  }
  track = track && detail::no_grad_depth == 0;
  Tensor out = Tensor::from_values({m, n}, std::move(v), track);
  if (track) {
    out.node().backward = [ptrs, m, n](const detail::Node& self) {
      std::size_t off = 0;
      for (const auto& p : ptrs) {
        const std::size_t c = p->shape.cols;
        if (p->requires_grad) {
          auto& g = p->grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i * n + off + j];
        }
        off += c;
      }
    };
    Tape::active().record(out.ptr());
  }
  return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) throw ShapeError("concat_rows: column counts differ");
    m += p.rows();
  }
  std::vector<double> v;
  v.reserve(m * n);
  std::vector<detail::NodePtr> ptrs;
  bool track = false;
  for (const auto& p : parts) {
    v.insert(v.end(), p.values().begin(), p.values().end());
    ptrs.push_back(p.ptr());
    track = track || p.requires_grad();
  }
  track = track && detail::no_grad_depth == 0;
  Tensor out = Tensor::from_values({m, n}, std::move(v), track);
  if (track) {
    out.node().backward = [ptrs](const detail::Node& self) {
      std::size_t off = 0;
      for (const auto& p : ptrs) {
        const std::size_t len = p->value.size();
        if (p->requires_grad) {
          auto& g = p->grad_buffer();
          for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
        }
        off += len;
      }
    };
    Tape::active().record(out.ptr());
  }
  return out;
}

inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.rows()) throw ShapeError("slice_rows: range exceeds " + a.shape().str());
  const std::size_t n = a.cols();
  auto av = a.values();
  std::vector<double> v(av.begin() + static_cast<std::ptrdiff_t>(begin * n),
                        av.begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  return detail::make_result({count, n}, std::move(v), {&a}, [pa = a.ptr(), begin, n] {
    return [pa, begin, n](const detail::Node& self) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
    };
  });
}

// out[r] = a[index[r]]
inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& index) {
  const std::size_t n = a.cols();
  auto av = a.values();
  std::vector<double> v(index.size() * n);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= a.rows()) throw IndexError("gather_rows: index out of range");
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(index[r] * n), n,
                v.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  return detail::make_result({index.size(), n}, std::move(v), {&a}, [pa = a.ptr(), index, n] {
    return [pa, index, n](const detail::Node& self) {
      auto& g = pa->grad_buffer();
      for (std::size_t r = 0; r < index.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) g[index[r] * n + j] += self.grad[r * n + j];
    };
  });
}

// out[i][j] = u[i] + v[j] for column vectors u[n x 1], v[m x 1].
inline Tensor outer_add(const Tensor& u, const Tensor& v) {
  if (u.cols() != 1 || v.cols() != 1) throw ShapeError("outer_add: expects column vectors");
  const std::size_t n = u.rows(), m = v.rows();
  std::vector<double> out(n * m);
  auto uv = u.values(), vv = v.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = uv[i] + vv[j];
  return detail::make_result({n, m}, std::move(out), {&u, &v}, [pu = u.ptr(), pv = v.ptr(), n, m] {
    return [pu, pv, n, m](const detail::Node& self) {
      if (pu->requires_grad) {
        auto& g = pu->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) g[i] += self.grad[i * m + j];
      }
      if (pv->requires_grad) {
        auto& g = pv->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j];
      }
    };
  });
}

// Row-wise softmax restricted to entries where mask != 0; other entries are 0.
inline Tensor masked_softmax_rows(const Tensor& scores, const Matrix& mask) {
  if (scores.shape() != mask.shape())
    throw ShapeError("masked_softmax_rows: mask " + mask.shape().str() + " vs scores " + scores.shape().str());
  const std::size_t n = scores.rows(), m = scores.cols();
  auto sv = scores.values();
  std::vector<double> y(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < m; ++j)
      if (mask(i, j) != 0.0) mx = std::max(mx, sv[i * m + j]);
    if (mx == -INFINITY) throw ContractError("masked_softmax_rows: row " + std::to_string(i) + " has an empty neighborhood");
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      if (mask(i, j) != 0.0) z += (y[i * m + j] = std::exp(sv[i * m + j] - mx));
    for (std::size_t j = 0; j < m; ++j) y[i * m + j] /= z;
  }
  return detail::make_result({n, m}, std::move(y), {&scores}, [ps = scores.ptr(), n, m] {
    return [ps, n, m](const detail::Node& self) {
      auto& g = ps->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < m; ++j) dot += self.value[i * m + j] * self.grad[i * m + j];
        for (std::size_t j = 0; j < m; ++j) {
          const double yij = self.value[i * m + j];
          if (yij != 0.0) g[i * m + j] += yij * (self.grad[i * m + j] - dot);
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  auto av = a.values();
  const double s = std::accumulate(av.begin(), av.end(), 0.0);
  return detail::make_result({1, 1}, {s}, {&a}, [pa = a.ptr()] {
    return [pa](const detail::Node& self) {
      auto& g = pa->grad_buffer();
      for (auto& x : g) x += self.grad[0];
    };
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// axis 0 collapses rows -> [1 x cols]; axis 1 collapses cols -> [rows x 1].
inline Tensor reduce_sum(const Tensor& a, int axis) {
  const std::size_t m = a.rows(), n = a.cols();
  auto av = a.values();
  if (axis == 0) {
    std::vector<double> v(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) v[j] += av[i * n + j];
    return detail::make_result({1, n}, std::move(v), {&a}, [pa = a.ptr(), m, n] {
      return [pa, m, n](const detail::Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j];
      };
    });
  }
  if (axis == 1) {
    std::vector<double> v(m, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) v[i] += av[i * n + j];
    return detail::make_result({m, 1}, std::move(v), {&a}, [pa = a.ptr(), m, n] {
      return [pa, m, n](const detail::Node& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i];
      };
    });
  }
  throw ShapeError("reduce_sum: axis must be 0 or 1");
}

inline Tensor reduce_mean(const Tensor& a, int axis) {
  const double count = static_cast<double>(axis == 0 ? a.rows() : a.cols());
  return scale(reduce_sum(a, axis), 1.0 / count);
}

inline Tensor mse(const Tensor& a, const Tensor& b) { return mean(square(sub(a, b))); }

}  // namespace roaddiff
