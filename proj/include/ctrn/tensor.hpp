#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
// The operation set is exactly what the CTRN forward pass needs; there is
// no broadcasting beyond scalars and a row-vector helper for normalization
// layers. Gradients accumulate into leaf tensors and are zeroed explicitly
// by the caller.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ctrn/common.hpp"

namespace ctrn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace detail {

// Adjoint sinks for the inputs of an op; null when the input needs no grad.
template <class T>
using AdjointSinks = std::vector<std::vector<T>*>;

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // leaf accumulator, sized on first backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Adds d(loss)/d(input_k) contributions given d(loss)/d(this).
  std::function<void(const std::vector<T>&, const AdjointSinks<T>&)> backprop;

  bool is_leaf() const { return !backprop; }
};

template <class T>
inline void check_finite(const Node<T>& node, const char* op) {
#ifndef NDEBUG
  for (T v : node.value) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericError(std::string(op) + ": non-finite value in result");
    }
  }
#else
  (void)node;
  (void)op;
#endif
}

}  // namespace detail

template <class T>
class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::Node<T>>()) {}

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.node_->value.assign(numel(shape), T(0));
    t.node_->shape = std::move(shape);
    return t;
  }

  static Tensor full(Shape shape, T fill) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.node_->value.begin(), t.node_->value.end(), fill);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values,
                     bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw ShapeError("Tensor::from: " + shape_str(shape) + " needs " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  static Tensor randn(Shape shape, RngEngine& rng, T stddev = T(1),
                      bool requires_grad = false) {
    std::vector<T> vals(numel(shape));
    for (auto& v : vals) v = static_cast<T>(rng.normal()) * stddev;
    return from(std::move(shape), std::move(vals), requires_grad);
  }

  static Tensor rand_uniform(Shape shape, RngEngine& rng, T lo, T hi,
                             bool requires_grad = false) {
    std::vector<T> vals(numel(shape));
    for (auto& v : vals) v = static_cast<T>(rng.uniform(lo, hi));
    return from(std::move(shape), std::move(vals), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }

  const std::vector<T>& values() const { return node_->value; }

  // Mutable access is for initialization and finite-difference probes of
  // leaves; mutating a tensor that already feeds a recorded graph would
  // invalidate the recording.
  std::vector<T>& values_mut() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (node_->grad.empty()) {
      throw ValueError("Tensor::grad: no gradient recorded; run backward()");
    }
    return node_->grad;
  }
  std::vector<T>& grad_mut() {
    if (node_->grad.empty()) {
      throw ValueError("Tensor::grad_mut: no gradient recorded");
    }
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) {
      std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }
  }

  T item() const {
    if (size() != 1) {
      throw ShapeError("Tensor::item: tensor has " + std::to_string(size()) +
                       " elements, expected 1");
    }
    return node_->value[0];
  }

  T at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) {
      throw ShapeError("Tensor::at: index rank mismatch");
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= node_->shape[axis]) throw ShapeError("Tensor::at: out of range");
      flat = flat * node_->shape[axis] + i;
      ++axis;
    }
    return node_->value[flat];
  }

  detail::Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node<T>>& node_ptr() const { return node_; }

  // Internal: wrap a freshly built node.
  static Tensor adopt(std::shared_ptr<detail::Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

using TensorD = Tensor<double>;
using TensorF = Tensor<float>;

namespace detail {

template <class T>
std::shared_ptr<Node<T>> make_op_node(Shape shape,
                                      std::vector<Tensor<T>> inputs) {
  auto node = std::make_shared<Node<T>>();
  node->value.assign(numel(shape), T(0));
  node->shape = std::move(shape);
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  node->requires_grad = needs_grad;
  if (needs_grad) {
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
  }
  return node;
}

// Attach the backprop only when somebody upstream wants gradients; otherwise
// the result is a plain constant and the graph is not retained.
template <class T, class Fn>
void set_backprop(const std::shared_ptr<Node<T>>& node, Fn&& fn) {
  if (node->requires_grad) node->backprop = std::forward<Fn>(fn);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix product, strictly 2-D.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  auto node = detail::make_op_node<T>({m, n}, {a, b});
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* out = node->value.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      if (aip == T(0)) continue;
      const T* brow = bv + p * n;
      T* orow = out + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  detail::check_finite(*node, "matmul");
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  detail::set_backprop(node, [m, k, n, an, bn](
                                 const std::vector<T>& adj,
                                 const detail::AdjointSinks<T>& sinks) {
    if (sinks[0]) {  // dA = dOut * B^T
      std::vector<T>& da = *sinks[0];
      const T* bv = bn->value.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          const T g = adj[i * n + j];
          if (g == T(0)) continue;
          const T* brow = bv + j;  // column j of B
          for (std::size_t p = 0; p < k; ++p) {
            da[i * k + p] += g * brow[p * n];
          }
        }
      }
    }
    if (sinks[1]) {  // dB = A^T * dOut
      std::vector<T>& db = *sinks[1];
      const T* av = an->value.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = av[i * k + p];
          if (aip == T(0)) continue;
          const T* arow = adj.data() + i * n;
          T* drow = db.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) drow[j] += aip * arow[j];
        }
      }
    }
  });
  return Tensor<T>::adopt(node);
}

// ---------------------------------------------------------------------------
// 1-D cross-correlation with zero padding, output length == input length.
// input: B x D x T, weight: Dout x D x K (K odd), bias: Dout.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> conv1d_same(const Tensor<T>& input, const Tensor<T>& weight,
                      const Tensor<T>& bias, std::size_t padding) {
  if (input.rank() != 3 || weight.rank() != 3 || bias.rank() != 1) {
    throw ShapeError("conv1d_same: expected input BxDxT, weight DoutxDxK, "
                     "bias Dout; got " +
                     shape_str(input.shape()) + ", " +
                     shape_str(weight.shape()) + ", " +
                     shape_str(bias.shape()));
  }
  const std::size_t batch = input.extent(0), din = input.extent(1),
                    tlen = input.extent(2);
  const std::size_t dout = weight.extent(0), ksize = weight.extent(2);
  if (weight.extent(1) != din) {
    throw ShapeError("conv1d_same: weight channel mismatch " +
                     shape_str(weight.shape()) + " vs input " +
                     shape_str(input.shape()));
  }
  if (bias.extent(0) != dout) {
    throw ShapeError("conv1d_same: bias extent mismatch");
  }
  if (ksize % 2 == 0) {
    throw ValueError("conv1d_same: kernel size must be odd, got " +
                     std::to_string(ksize));
  }
  if (padding != (ksize - 1) / 2) {
    throw ValueError("conv1d_same: padding " + std::to_string(padding) +
                     " inconsistent with kernel size " + std::to_string(ksize));
  }
  auto node = detail::make_op_node<T>({batch, dout, tlen}, {input, weight, bias});
  const T* x = input.values().data();
  const T* w = weight.values().data();
  const T* bv = bias.values().data();
  T* out = node->value.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t oc = 0; oc < dout; ++oc) {
      T* orow = out + (b * dout + oc) * tlen;
      for (std::size_t t = 0; t < tlen; ++t) orow[t] = bv[oc];
      for (std::size_t ic = 0; ic < din; ++ic) {
        const T* xrow = x + (b * din + ic) * tlen;
        const T* wrow = w + (oc * din + ic) * ksize;
        for (std::size_t k = 0; k < ksize; ++k) {
          const T wk = wrow[k];
          if (wk == T(0)) continue;
          const std::ptrdiff_t shift =
              static_cast<std::ptrdiff_t>(k) -
              static_cast<std::ptrdiff_t>(padding);
          const std::size_t t0 =
              shift < 0 ? static_cast<std::size_t>(-shift) : 0;
          const std::size_t t1 =
              shift > 0 ? tlen - static_cast<std::size_t>(shift) : tlen;
          for (std::size_t t = t0; t < t1; ++t) {
            orow[t] += wk * xrow[static_cast<std::size_t>(
                                static_cast<std::ptrdiff_t>(t) + shift)];
          }
        }
      }
    }
  }
  detail::check_finite(*node, "conv1d_same");
  auto xn = input.node_ptr();
  auto wn = weight.node_ptr();
  detail::set_backprop(node, [batch, din, dout, tlen, ksize, padding, xn, wn](
                                 const std::vector<T>& adj,
                                 const detail::AdjointSinks<T>& sinks) {
    const T* x = xn->value.data();
    const T* w = wn->value.data();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t oc = 0; oc < dout; ++oc) {
        const T* arow = adj.data() + (b * dout + oc) * tlen;
        if (sinks[2]) {
          T s = T(0);
          for (std::size_t t = 0; t < tlen; ++t) s += arow[t];
          (*sinks[2])[oc] += s;
        }
        for (std::size_t ic = 0; ic < din; ++ic) {
          const T* xrow = x + (b * din + ic) * tlen;
          const T* wrow = w + (oc * din + ic) * ksize;
          for (std::size_t k = 0; k < ksize; ++k) {
            const std::ptrdiff_t shift =
                static_cast<std::ptrdiff_t>(k) -
                static_cast<std::ptrdiff_t>(padding);
            const std::size_t t0 =
                shift < 0 ? static_cast<std::size_t>(-shift) : 0;
            const std::size_t t1 =
                shift > 0 ? tlen - static_cast<std::size_t>(shift) : tlen;
            if (sinks[0]) {
              T* dxrow = sinks[0]->data() + (b * din + ic) * tlen;
              const T wk = wrow[k];
              for (std::size_t t = t0; t < t1; ++t) {
                dxrow[static_cast<std::size_t>(
                    static_cast<std::ptrdiff_t>(t) + shift)] += wk * arow[t];
              }
            }
            if (sinks[1]) {
              T s = T(0);
              for (std::size_t t = t0; t < t1; ++t) {
                s += arow[t] * xrow[static_cast<std::size_t>(
                                   static_cast<std::ptrdiff_t>(t) + shift)];
              }
              (*sinks[1])[(oc * din + ic) * ksize + k] += s;
            }
          }
        }
      }
    }
  });
  return Tensor<T>::adopt(node);
}

// ---------------------------------------------------------------------------
// Elementwise operations. add/mul support scalar broadcast (either side a
// one-element tensor); everything else requires exact shape match.
// ---------------------------------------------------------------------------

namespace detail {

template <class T, class FwdFn, class BwdFn>
Tensor<T> unary_elementwise(const Tensor<T>& x, const char* name, FwdFn fwd,
                            BwdFn bwd) {
  auto node = make_op_node<T>(x.shape(), {x});
  const auto& xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) node->value[i] = fwd(xv[i]);
  check_finite(*node, name);
  auto xn = x.node_ptr();
  auto self = node.get();
  set_backprop(node, [xn, self, bwd](const std::vector<T>& adj,
                                     const AdjointSinks<T>& sinks) {
    if (!sinks[0]) return;
    const auto& xv = xn->value;
    const auto& yv = self->value;
    auto& dx = *sinks[0];
    for (std::size_t i = 0; i < adj.size(); ++i) {
      dx[i] += adj[i] * bwd(xv[i], yv[i]);
    }
  });
  return Tensor<T>::adopt(node);
}

}  // namespace detail

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary_elementwise(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_elementwise(
      x, "sigmoid",
      [](T v) {
        // Split on sign for stability at large |v|.
        if (v >= T(0)) {
          const T e = std::exp(-v);
          return T(1) / (T(1) + e);
        }
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> rsqrt(const Tensor<T>& x) {
  return detail::unary_elementwise(
      x, "rsqrt", [](T v) { return T(1) / std::sqrt(v); },
      [](T v, T y) { return T(-0.5) * y / v; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary_elementwise(
      x, "scale", [factor](T v) { return v * factor; },
      [factor](T, T) { return factor; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary_elementwise(
      x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

namespace detail {

enum class BinKind { Add, Sub, Mul };

template <class T>
Tensor<T> binary_elementwise(const Tensor<T>& a, const Tensor<T>& b,
                             BinKind kind, const char* name) {
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
    throw ShapeError(std::string(name) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Shape& out_shape = a_scalar ? b.shape() : a.shape();
  auto node = make_op_node<T>(out_shape, {a, b});
  const auto& av = a.values();
  const auto& bv = b.values();
  const std::size_t n = node->value.size();
  for (std::size_t i = 0; i < n; ++i) {
    const T x = av[a_scalar ? 0 : i];
    const T y = bv[b_scalar ? 0 : i];
    node->value[i] = kind == BinKind::Add ? x + y
                     : kind == BinKind::Sub ? x - y
                                            : x * y;
  }
  check_finite(*node, name);
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  set_backprop(node, [an, bn, a_scalar, b_scalar, kind](
                         const std::vector<T>& adj,
                         const AdjointSinks<T>& sinks) {
    const auto& av = an->value;
    const auto& bv = bn->value;
    const std::size_t n = adj.size();
    if (sinks[0]) {
      auto& da = *sinks[0];
      for (std::size_t i = 0; i < n; ++i) {
        const T g = kind == BinKind::Mul ? adj[i] * bv[b_scalar ? 0 : i]
                                         : adj[i];
        da[a_scalar ? 0 : i] += g;
      }
    }
    if (sinks[1]) {
      auto& db = *sinks[1];
      for (std::size_t i = 0; i < n; ++i) {
        T g;
        switch (kind) {
          case BinKind::Add: g = adj[i]; break;
          case BinKind::Sub: g = -adj[i]; break;
          default: g = adj[i] * av[a_scalar ? 0 : i]; break;
        }
        db[b_scalar ? 0 : i] += g;
      }
    }
  });
  return Tensor<T>::adopt(node);
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise(a, b, detail::BinKind::Add, "add");
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise(a, b, detail::BinKind::Sub, "sub");
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_elementwise(a, b, detail::BinKind::Mul, "multiply");
}

// Row-vector broadcast over a 2-D matrix: out[n][c] = x[n][c] (op) v[c].
// This is the normalization-layer helper; general broadcasting stays out.

namespace detail {

template <class T>
Tensor<T> rowvec_op(const Tensor<T>& x, const Tensor<T>& v, BinKind kind,
                    const char* name) {
  if (x.rank() != 2 || v.rank() != 1 || v.extent(0) != x.extent(1)) {
    throw ShapeError(std::string(name) + ": expected NxC and C, got " +
                     shape_str(x.shape()) + " and " + shape_str(v.shape()));
  }
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  auto node = make_op_node<T>(x.shape(), {x, v});
  const auto& xv = x.values();
  const auto& vv = v.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const T a = xv[r * cols + c];
      const T b = vv[c];
      node->value[r * cols + c] = kind == BinKind::Add ? a + b : a * b;
    }
  }
  check_finite(*node, name);
  auto xn = x.node_ptr();
  auto vn = v.node_ptr();
  set_backprop(node, [rows, cols, xn, vn, kind](const std::vector<T>& adj,
                                                const AdjointSinks<T>& sinks) {
    if (sinks[0]) {
      auto& dx = *sinks[0];
      const auto& vv = vn->value;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          dx[r * cols + c] += kind == BinKind::Add
                                  ? adj[r * cols + c]
                                  : adj[r * cols + c] * vv[c];
        }
      }
    }
    if (sinks[1]) {
      auto& dv = *sinks[1];
      const auto& xv = xn->value;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          dv[c] += kind == BinKind::Add ? adj[r * cols + c]
                                        : adj[r * cols + c] * xv[r * cols + c];
        }
      }
    }
  });
  return Tensor<T>::adopt(node);
}

}  // namespace detail

template <class T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  return detail::rowvec_op(x, v, detail::BinKind::Add, "add_rowvec");
}

template <class T>
Tensor<T> mul_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  return detail::rowvec_op(x, v, detail::BinKind::Mul, "mul_rowvec");
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  auto node = detail::make_op_node<T>({1}, {x});
  T s = T(0);
  for (T v : x.values()) s += v;
  node->value[0] = s;
  detail::check_finite(*node, "sum_all");
  const std::size_t n = x.size();
  detail::set_backprop(node, [n](const std::vector<T>& adj,
                                 const detail::AdjointSinks<T>& sinks) {
    if (!sinks[0]) return;
    for (std::size_t i = 0; i < n; ++i) (*sinks[0])[i] += adj[0];
  });
  return Tensor<T>::adopt(node);
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.size()));
}

// Drops the reduced axis: x of shape [..., axis, ...] -> mean along axis.
template <class T>
Tensor<T> mean_over_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("mean_over_axis: axis " + std::to_string(axis) +
                     " out of range for " + shape_str(x.shape()));
  }
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(x.shape()[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  const std::size_t reduce = x.extent(axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t outer = x.size() / (reduce * inner);
  auto node = detail::make_op_node<T>(out_shape, {x});
  const auto& xv = x.values();
  const T inv = T(1) / static_cast<T>(reduce);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      T s = T(0);
      for (std::size_t r = 0; r < reduce; ++r) {
        s += xv[(o * reduce + r) * inner + i];
      }
      node->value[o * inner + i] = s * inv;
    }
  }
  detail::check_finite(*node, "mean_over_axis");
  detail::set_backprop(node, [outer, reduce, inner, inv](
                                 const std::vector<T>& adj,
                                 const detail::AdjointSinks<T>& sinks) {
    if (!sinks[0]) return;
    auto& dx = *sinks[0];
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const T g = adj[o * inner + i] * inv;
        for (std::size_t r = 0; r < reduce; ++r) {
          dx[(o * reduce + r) * inner + i] += g;
        }
      }
    }
  });
  return Tensor<T>::adopt(node);
}

// Mean over the rows of an NxC matrix, optionally restricted to rows whose
// mask entry is nonzero. The mask is a constant, not part of the graph.
template <class T>
Tensor<T> mean_over_rows(const Tensor<T>& x,
                         const std::vector<std::uint8_t>* row_mask = nullptr) {
  if (x.rank() != 2) {
    throw ShapeError("mean_over_rows: expected NxC, got " +
                     shape_str(x.shape()));
  }
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  if (row_mask && row_mask->size() != rows) {
    throw ShapeError("mean_over_rows: mask length mismatch");
  }
  std::size_t count = rows;
  if (row_mask) {
    count = 0;
    for (std::uint8_t m : *row_mask) count += m ? 1 : 0;
    if (count == 0) throw ValueError("mean_over_rows: empty mask");
  }
  auto node = detail::make_op_node<T>({cols}, {x});
  const auto& xv = x.values();
  const T inv = T(1) / static_cast<T>(count);
  for (std::size_t r = 0; r < rows; ++r) {
    if (row_mask && !(*row_mask)[r]) continue;
    for (std::size_t c = 0; c < cols; ++c) {
      node->value[c] += xv[r * cols + c] * inv;
    }
  }
  detail::check_finite(*node, "mean_over_rows");
  std::vector<std::uint8_t> mask_copy =
      row_mask ? *row_mask : std::vector<std::uint8_t>();
  detail::set_backprop(node, [rows, cols, inv, mask_copy](
                                 const std::vector<T>& adj,
                                 const detail::AdjointSinks<T>& sinks) {
    if (!sinks[0]) return;
    auto& dx = *sinks[0];
    for (std::size_t r = 0; r < rows; ++r) {
      if (!mask_copy.empty() && !mask_copy[r]) continue;
      for (std::size_t c = 0; c < cols; ++c) {
        dx[r * cols + c] += adj[c] * inv;
      }
    }
  });
  return Tensor<T>::adopt(node);
}

// ---------------------------------------------------------------------------
// Softmax along an axis, max-subtracted for stability.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) +
                     " out of range for " + shape_str(x.shape()));
  }
  const std::size_t extent = x.extent(axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t outer = x.size() / (extent * inner);
  auto node = detail::make_op_node<T>(x.shape(), {x});
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const auto at = [&](std::size_t r) { return (o * extent + r) * inner + i; };
      T mx = xv[at(0)];
      for (std::size_t r = 1; r < extent; ++r) mx = std::max(mx, xv[at(r)]);
      T denom = T(0);
      for (std::size_t r = 0; r < extent; ++r) {
        const T e = std::exp(xv[at(r)] - mx);
        node->value[at(r)] = e;
        denom += e;
      }
      for (std::size_t r = 0; r < extent; ++r) node->value[at(r)] /= denom;
    }
  }
  detail::check_finite(*node, "softmax");
  auto self = node.get();
  detail::set_backprop(node, [outer, extent, inner, self](
                                 const std::vector<T>& adj,
                                 const detail::AdjointSinks<T>& sinks) {
    if (!sinks[0]) return;
    auto& dx = *sinks[0];
    const auto& yv = self->value;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const auto at = [&](std::size_t r) {
          return (o * extent + r) * inner + i;
        };
        T dot = T(0);
        for (std::size_t r = 0; r < extent; ++r) dot += adj[at(r)] * yv[at(r)];
        for (std::size_t r = 0; r < extent; ++r) {
          dx[at(r)] += yv[at(r)] * (adj[at(r)] - dot);
        }
      }
    }
  });
  return Tensor<T>::adopt(node);
}

// ---------------------------------------------------------------------------
// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
// Eval mode is the identity.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training,
                  RngEngine& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw ValueError("dropout: probability must be in [0, 1), got " +
                     std::to_string(p));
  }
  if (!training || p == 0.0) {
    // Identity, but still a node so the graph stays uniform.
    return scale(x, T(1));
  }
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = rng.bernoulli(p) ? T(0) : keep_scale;
  auto node = detail::make_op_node<T>(x.shape(), {x});
  const auto& xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    node->value[i] = xv[i] * mask[i];
  }
  detail::check_finite(*node, "dropout");
  detail::set_backprop(node, [mask = std::move(mask)](
                                 const std::vector<T>& adj,
                                 const detail::AdjointSinks<T>& sinks) {
    if (!sinks[0]) return;
    auto& dx = *sinks[0];
    for (std::size_t i = 0; i < adj.size(); ++i) dx[i] += adj[i] * mask[i];
  });
  return Tensor<T>::adopt(node);
}

// ---------------------------------------------------------------------------
// Multi-label binary cross-entropy, mean over unmasked elements.
// Predictions are clamped to [eps, 1-eps] before the log; target and mask
// are constants.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> bce(const Tensor<T>& pred, const Tensor<T>& target,
              const Tensor<T>* mask = nullptr) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("bce: prediction " + shape_str(pred.shape()) +
                     " vs target " + shape_str(target.shape()));
  }
  if (mask && mask->shape() != pred.shape()) {
    throw ShapeError("bce: mask shape mismatch");
  }
  const T eps = static_cast<T>(1e-7);
  const std::size_t n = pred.size();
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask || mask->values()[i] != T(0)) ++count;
  }
  if (count == 0) throw ValueError("bce: mask excludes every element");
  auto node = detail::make_op_node<T>({1}, {pred});
  const auto& pv = pred.values();
  const auto& tv = target.values();
  double acc = 0.0;  // accumulate in double even for float tensors
  for (std::size_t i = 0; i < n; ++i) {
    if (mask && mask->values()[i] == T(0)) continue;
    const T p = std::min(std::max(pv[i], eps), T(1) - eps);
    acc -= tv[i] * std::log(static_cast<double>(p)) +
           (T(1) - tv[i]) * std::log(1.0 - static_cast<double>(p));
  }
  node->value[0] = static_cast<T>(acc / static_cast<double>(count));
  detail::check_finite(*node, "bce");
  auto pn = pred.node_ptr();
  auto tn = target.node_ptr();
  std::vector<T> mask_copy = mask ? mask->values() : std::vector<T>();
  detail::set_backprop(node, [pn, tn, count, eps, mask_copy](
                                 const std::vector<T>& adj,
                                 const detail::AdjointSinks<T>& sinks) {
    if (!sinks[0]) return;
    auto& dp = *sinks[0];
    const auto& pv = pn->value;
    const auto& tv = tn->value;
    const T inv = adj[0] / static_cast<T>(count);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      if (!mask_copy.empty() && mask_copy[i] == T(0)) continue;
      const T p = std::min(std::max(pv[i], eps), T(1) - eps);
      if (pv[i] < eps || pv[i] > T(1) - eps) continue;  // clamped: flat region
      dp[i] += inv * (p - tv[i]) / (p * (T(1) - p));
    }
  });
  return Tensor<T>::adopt(node);
}

// ---------------------------------------------------------------------------
// Layout ops: reshape (copying), permute (copying), stack, slice.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (numel(new_shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(new_shape));
  }
  auto node = detail::make_op_node<T>(std::move(new_shape), {x});
  node->value = x.values();
  detail::set_backprop(node, [](const std::vector<T>& adj,
                                const detail::AdjointSinks<T>& sinks) {
    if (!sinks[0]) return;
    auto& dx = *sinks[0];
    for (std::size_t i = 0; i < adj.size(); ++i) dx[i] += adj[i];
  });
  return Tensor<T>::adopt(node);
}

namespace detail {

inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) {
    strides[i - 1] = strides[i] * shape[i];
  }
  return strides;
}

}  // namespace detail

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  if (axes.size() != x.rank()) {
    throw ShapeError("permute: axes rank mismatch");
  }
  std::vector<bool> seen(x.rank(), false);
  Shape out_shape(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= x.rank() || seen[axes[i]]) {
      throw ShapeError("permute: invalid axis list");
    }
    seen[axes[i]] = true;
    out_shape[i] = x.shape()[axes[i]];
  }
  auto node = detail::make_op_node<T>(out_shape, {x});
  const auto in_strides = detail::row_major_strides(x.shape());
  const auto out_strides = detail::row_major_strides(out_shape);
  const std::size_t n = x.size();
  const std::size_t rank = x.rank();
  const auto& xv = x.values();
  // Map each output flat index back to the input flat index.
  std::vector<std::size_t> src_index(n);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t rem = o, src = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      const std::size_t coord = rem / out_strides[d];
      rem %= out_strides[d];
      src += coord * in_strides[axes[d]];
    }
    src_index[o] = src;
    node->value[o] = xv[src];
  }
  detail::set_backprop(node, [src_index = std::move(src_index)](
                                 const std::vector<T>& adj,
                                 const detail::AdjointSinks<T>& sinks) {
    if (!sinks[0]) return;
    auto& dx = *sinks[0];
    for (std::size_t o = 0; o < adj.size(); ++o) dx[src_index[o]] += adj[o];
  });
  return Tensor<T>::adopt(node);
}

// Stacks equally shaped tensors along a new leading axis.
template <class T>
Tensor<T> stack0(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("stack0: no tensors");
  const Shape& base = parts[0].shape();
  for (const auto& p : parts) {
    if (p.shape() != base) throw ShapeError("stack0: inconsistent shapes");
  }
  Shape out_shape;
  out_shape.push_back(parts.size());
  out_shape.insert(out_shape.end(), base.begin(), base.end());
  auto node = detail::make_op_node<T>(out_shape, parts);
  const std::size_t chunk = parts[0].size();
  for (std::size_t k = 0; k < parts.size(); ++k) {
    std::copy(parts[k].values().begin(), parts[k].values().end(),
              node->value.begin() + k * chunk);
  }
  detail::set_backprop(node, [chunk](const std::vector<T>& adj,
                                     const detail::AdjointSinks<T>& sinks) {
    for (std::size_t k = 0; k < sinks.size(); ++k) {
      if (!sinks[k]) continue;
      auto& dp = *sinks[k];
      for (std::size_t i = 0; i < chunk; ++i) dp[i] += adj[k * chunk + i];
    }
  });
  return Tensor<T>::adopt(node);
}

// Selects index i along the leading axis; output drops that axis.
template <class T>
Tensor<T> slice0(const Tensor<T>& x, std::size_t index) {
  if (x.rank() < 2) throw ShapeError("slice0: rank must be >= 2");
  if (index >= x.extent(0)) {
    throw ShapeError("slice0: index " + std::to_string(index) +
                     " out of range for " + shape_str(x.shape()));
  }
  Shape out_shape(x.shape().begin() + 1, x.shape().end());
  auto node = detail::make_op_node<T>(out_shape, {x});
  const std::size_t chunk = numel(out_shape);
  std::copy(x.values().begin() + index * chunk,
            x.values().begin() + (index + 1) * chunk, node->value.begin());
  detail::set_backprop(node, [index, chunk](const std::vector<T>& adj,
                                            const detail::AdjointSinks<T>& sinks) {
    if (!sinks[0]) return;
    auto& dx = *sinks[0];
    for (std::size_t i = 0; i < chunk; ++i) dx[index * chunk + i] += adj[i];
  });
  return Tensor<T>::adopt(node);
}

// ---------------------------------------------------------------------------
// Reverse accumulation. Visits each reachable gradient-requiring node once,
// in reverse topological order, and accumulates adjoints of leaves into
// their grad slots. Running backward twice without zeroing doubles every
// leaf gradient.
// ---------------------------------------------------------------------------

template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " +
                     shape_str(loss.shape()));
  }
  using Node = detail::Node<T>;
  Node* root = loss.node();
  if (!root->requires_grad) {
    throw ValueError("backward: loss does not require gradients");
  }

  // Iterative post-order DFS over gradient-requiring nodes.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    bool descended = false;
    while (next < node->inputs.size()) {
      Node* child = node->inputs[next].get();
      ++next;
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
        descended = true;
        break;
      }
    }
    if (!descended && (stack.back().second >= stack.back().first->inputs.size())) {
      order.push_back(stack.back().first);
      stack.pop_back();
    }
  }

  std::unordered_map<Node*, std::vector<T>> adjoint;
  adjoint[root] = {T(1)};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto found = adjoint.find(node);
    if (found == adjoint.end()) continue;
    std::vector<T>& adj = found->second;
    if (node->is_leaf()) {
      if (node->grad.empty()) node->grad.assign(node->value.size(), T(0));
      for (std::size_t i = 0; i < adj.size(); ++i) node->grad[i] += adj[i];
      continue;
    }
    detail::AdjointSinks<T> sinks(node->inputs.size(), nullptr);
    for (std::size_t k = 0; k < node->inputs.size(); ++k) {
      Node* in = node->inputs[k].get();
      if (!in->requires_grad) continue;
      auto& slot = adjoint[in];
      if (slot.empty()) slot.assign(in->value.size(), T(0));
      sinks[k] = &slot;
    }
    node->backprop(adj, sinks);
    adjoint.erase(node);  // adjoints of interior nodes are transient
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.
// ---------------------------------------------------------------------------

// Relative error between an analytic and a numeric derivative.
inline double gradcheck_rel_error(double analytic, double numeric) {
  const double denom =
      std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

// Central-difference comparison against caller-supplied analytic gradients.
// `f` must be a deterministic scalar-valued function of `inputs`.
template <class T, class F>
double grad_check_against(F&& f, std::vector<Tensor<T>>& inputs,
                          const std::vector<std::vector<T>>& analytic,
                          double eps = 1e-4) {
  double max_err = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& vals = inputs[i].values_mut();
    for (std::size_t e = 0; e < vals.size(); ++e) {
      const T saved = vals[e];
      vals[e] = saved + static_cast<T>(eps);
      const double up = static_cast<double>(f(inputs).item());
      vals[e] = saved - static_cast<T>(eps);
      const double down = static_cast<double>(f(inputs).item());
      vals[e] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = static_cast<double>(analytic[i][e]);
      max_err = std::max(max_err, gradcheck_rel_error(a, numeric));
    }
  }
  return max_err;
}

// Runs backward once for the analytic gradients, then sweeps every element
// of every input with central differences. Returns the max relative error.
template <class T, class F>
double grad_check(F&& f, std::vector<Tensor<T>>& inputs, double eps = 1e-4) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  Tensor<T> loss = f(inputs);
  backward(loss);
  std::vector<std::vector<T>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) {
    analytic.push_back(in.has_grad() ? in.grad()
                                     : std::vector<T>(in.size(), T(0)));
    in.zero_grad();
  }
  return grad_check_against(f, inputs, analytic, eps);
}

}  // namespace ctrn
