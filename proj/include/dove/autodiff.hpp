#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "dove/common.hpp"
#include "dove/tensor.hpp"

namespace dove::ad {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

template <typename T>
class Tape;

// Lightweight handle into a tape. Copyable; a default-constructed Var is
// invalid and usable as "absent".
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int32_t idx = -1;
  bool valid() const { return tape != nullptr && idx >= 0; }
  const Tensor<T>& val() const { return tape->value(*this); }
  const Shape& shape() const { return val().shape(); }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so creation
// order is already a topological order and backward() is a single reverse
// sweep. Values live until clear(), which training steps call once gradients
// have been consumed.
template <typename T>
class Tape {
 public:
  using V = Var<T>;

  V leaf(Tensor<T> value) { return push(std::move(value), true); }
  V constant(Tensor<T> value) { return push(std::move(value), false); }

  V make(Tensor<T> value, bool requires_grad) {
    return push(std::move(value), requires_grad);
  }

  void set_backward(V v, std::function<void(Tape&)> bw) {
    nodes_[v.idx].backward = std::move(bw);
  }

  const Tensor<T>& value(V v) const { return nodes_[v.idx].value; }
  bool needs_grad(V v) const { return nodes_[v.idx].requires_grad; }

  // Gradient of the last backward() root w.r.t. v; zeros if v never
  // participated.
  const Tensor<T>& grad(V v) {
    Node& n = nodes_[v.idx];
    if (n.grad.numel() == 0) n.grad = Tensor<T>::zeros(n.value.shape());
    return n.grad;
  }

  // Gradient already propagated to v; only callable from backward closures,
  // where backward() guarantees it is populated.
  const Tensor<T>& grad_of(V v) const {
    const Node& n = nodes_[v.idx];
    if (n.grad.numel() == 0) throw Error("grad_of: gradient not populated");
    return n.grad;
  }

  void accumulate(V v, const Tensor<T>& g) {
    Node& n = nodes_[v.idx];
    if (!n.requires_grad) return;
    if (n.grad.numel() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  // Zero-initialized buffer for callers that scatter gradients in place.
  Tensor<T>* grad_buffer(V v) {
    Node& n = nodes_[v.idx];
    if (!n.requires_grad) return nullptr;
    if (n.grad.numel() == 0) n.grad = Tensor<T>::zeros(n.value.shape());
    return &n.grad;
  }

  void backward(V root) {
    if (!root.valid() || root.tape != this) throw ArgumentError("backward: foreign var");
    if (value(root).numel() != 1) throw ArgumentError("backward: root must be scalar");
    Node& r = nodes_[root.idx];
    if (r.grad.numel() == 0) r.grad = Tensor<T>::zeros(r.value.shape());
    r.grad[0] = T(1);
    for (int32_t i = root.idx; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.requires_grad && n.backward && n.grad.numel() != 0) n.backward(*this);
    }
  }

  void clear() { nodes_.clear(); }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void(Tape&)> backward;
    bool requires_grad = false;
  };

  V push(Tensor<T> value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, nullptr, requires_grad});
    return V{this, static_cast<int32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
Tape<T>& tape_of(Var<T> a) {
  if (!a.valid()) throw ArgumentError("op on invalid var");
  return *a.tape;
}

template <typename T>
void check_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ArgumentError("op on vars from different tapes");
}

template <typename T>
void check_same_shape(Var<T> a, Var<T> b, const char* op) {
  if (!a.val().same_shape(b.val()))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace detail

// ---- elementwise binary ----

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "add");
  Tape<T>& tp = detail::tape_of(a);
  bool rg = tp.needs_grad(a) || tp.needs_grad(b);
  Var<T> out = tp.make(a.val() + b.val(), rg);
  if (rg)
    tp.set_backward(out, [out, a, b](Tape<T>& t) {
      const Tensor<T>& gy = t.grad_of(out);
      t.accumulate(a, gy);
      t.accumulate(b, gy);
    });
  return out;
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "sub");
  Tape<T>& tp = detail::tape_of(a);
  bool rg = tp.needs_grad(a) || tp.needs_grad(b);
  Var<T> out = tp.make(a.val() - b.val(), rg);
  if (rg)
    tp.set_backward(out, [out, a, b](Tape<T>& t) {
      const Tensor<T>& gy = t.grad_of(out);
      t.accumulate(a, gy);
      if (Tensor<T>* gb = t.grad_buffer(b)) {
        const T* g = gy.data();
        T* d = gb->data();
        for (int64_t i = 0; i < gy.numel(); ++i) d[i] -= g[i];
      }
    });
  return out;
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "mul");
  Tape<T>& tp = detail::tape_of(a);
  bool rg = tp.needs_grad(a) || tp.needs_grad(b);
  Tensor<T> y(a.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = a.val()[i] * b.val()[i];
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, a, b](Tape<T>& t) {
      const Tensor<T>& gy = t.grad_of(out);
      if (Tensor<T>* ga = t.grad_buffer(a)) {
        const T* bv = t.value(b).data();
        for (int64_t i = 0; i < gy.numel(); ++i) ga->data()[i] += gy[i] * bv[i];
      }
      if (Tensor<T>* gb = t.grad_buffer(b)) {
        const T* av = t.value(a).data();
        for (int64_t i = 0; i < gy.numel(); ++i) gb->data()[i] += gy[i] * av[i];
      }
    });
  return out;
}

template <typename T>
Var<T> divide(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "divide");
  Tape<T>& tp = detail::tape_of(a);
  bool rg = tp.needs_grad(a) || tp.needs_grad(b);
  Tensor<T> y(a.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = a.val()[i] / b.val()[i];
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, a, b](Tape<T>& t) {
      const Tensor<T>& gy = t.grad_of(out);
      const Tensor<T>& yv = t.value(out);
      const T* bv = t.value(b).data();
      if (Tensor<T>* ga = t.grad_buffer(a))
        for (int64_t i = 0; i < gy.numel(); ++i) ga->data()[i] += gy[i] / bv[i];
      if (Tensor<T>* gb = t.grad_buffer(b))
        for (int64_t i = 0; i < gy.numel(); ++i) gb->data()[i] -= gy[i] * yv[i] / bv[i];
    });
  return out;
}

// ---- scalar ----

template <typename T>
Var<T> scalar_mul(Var<T> a, T s) {
  Tape<T>& tp = detail::tape_of(a);
  bool rg = tp.needs_grad(a);
  Tensor<T> y = a.val();
  y *= s;
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, a, s](Tape<T>& t) {
      const Tensor<T>& gy = t.grad_of(out);
      if (Tensor<T>* ga = t.grad_buffer(a))
        for (int64_t i = 0; i < gy.numel(); ++i) ga->data()[i] += gy[i] * s;
    });
  return out;
}

template <typename T>
Var<T> scalar_add(Var<T> a, T s) {
  Tape<T>& tp = detail::tape_of(a);
  bool rg = tp.needs_grad(a);
  Tensor<T> y = a.val();
  for (int64_t i = 0; i < y.numel(); ++i) y[i] += s;
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, a](Tape<T>& t) { t.accumulate(a, t.grad_of(out)); });
  return out;
}

template <typename T>
Var<T> neg(Var<T> a) {
  return scalar_mul(a, T(-1));
}

// ---- unary elementwise ----

namespace detail {

// Generic unary op: fwd(x) -> y, dfn(x, y) -> dy/dx.
template <typename T, typename Fwd, typename Dfn>
Var<T> unary(Var<T> a, Fwd fwd, Dfn dfn) {
  Tape<T>& tp = tape_of(a);
  bool rg = tp.needs_grad(a);
  Tensor<T> y(a.shape());
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = fwd(a.val()[i]);
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, a, dfn](Tape<T>& t) {
      const Tensor<T>& gy = t.grad_of(out);
      if (Tensor<T>* ga = t.grad_buffer(a)) {
        const T* xv = t.value(a).data();
        const T* yv = t.value(out).data();
        for (int64_t i = 0; i < gy.numel(); ++i) ga->data()[i] += gy[i] * dfn(xv[i], yv[i]);
      }
    });
  return out;
}

}  // namespace detail

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return detail::unary(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> silu(Var<T> a) {
  return detail::unary(
      a,
      [](T x) {
        T s = T(1) / (T(1) + std::exp(-x));
        return x * s;
      },
      [](T x, T) {
        T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  constexpr T kInvSqrt2 = T(0.7071067811865475244);
  constexpr T kInvSqrt2Pi = T(0.3989422804014326779);
  return detail::unary(
      a,
      [=](T x) { return x * T(0.5) * (T(1) + std::erf(x * kInvSqrt2)); },
      [=](T x, T) {
        T cdf = T(0.5) * (T(1) + std::erf(x * kInvSqrt2));
        T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * x * x);
        return cdf + x * pdf;
      });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return detail::unary(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> abs_val(Var<T> a) {
  return detail::unary(
      a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> square(Var<T> a) {
  return detail::unary(
      a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// ---- reshapes and gather/scatter ----

template <typename T>
Var<T> reshape(Var<T> a, const Shape& shape) {
  Tape<T>& tp = detail::tape_of(a);
  if (shape_numel(shape) != a.val().numel())
    throw ShapeError("reshape: numel mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
  bool rg = tp.needs_grad(a);
  Tensor<T> y = a.val();
  y = y.reshaped(shape);
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, a](Tape<T>& t) {
      if (Tensor<T>* ga = t.grad_buffer(a)) {
        const Tensor<T>& gy = t.grad_of(out);
        for (int64_t i = 0; i < gy.numel(); ++i) ga->data()[i] += gy[i];
      }
    });
  return out;
}

// y[i] = x[index[i]]; index entries must be valid positions in x's flat
// storage. Used for patchify/unpatchify and axis permutations.
template <typename T>
Var<T> gather_elems(Var<T> a, std::shared_ptr<const std::vector<int64_t>> index, Shape out_shape) {
  Tape<T>& tp = detail::tape_of(a);
  if (static_cast<int64_t>(index->size()) != shape_numel(out_shape))
    throw ShapeError("gather_elems: index size does not match output shape");
  const Tensor<T>& x = a.val();
  Tensor<T> y(out_shape);
  for (int64_t i = 0; i < y.numel(); ++i) {
    int64_t src = (*index)[i];
    if (src < 0 || src >= x.numel()) throw IndexError("gather_elems: index out of range");
    y[i] = x[src];
  }
  bool rg = tp.needs_grad(a);
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, a, index](Tape<T>& t) {
      if (Tensor<T>* ga = t.grad_buffer(a)) {
        const Tensor<T>& gy = t.grad_of(out);
        for (int64_t i = 0; i < gy.numel(); ++i) ga->data()[(*index)[i]] += gy[i];
      }
    });
  return out;
}

// Rows [r0, r0+n) of a 2-D tensor.
template <typename T>
Var<T> slice_rows(Var<T> a, int64_t r0, int64_t n) {
  Tape<T>& tp = detail::tape_of(a);
  const Tensor<T>& x = a.val();
  if (x.rank() != 2) throw ShapeError("slice_rows: expected rank-2, got " + shape_str(x.shape()));
  int64_t rows = x.shape()[0], cols = x.shape()[1];
  if (r0 < 0 || n < 0 || r0 + n > rows) throw IndexError("slice_rows: range out of bounds");
  Tensor<T> y({n, cols});
  std::copy(x.data() + r0 * cols, x.data() + (r0 + n) * cols, y.data());
  bool rg = tp.needs_grad(a);
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, a, r0, cols](Tape<T>& t) {
      if (Tensor<T>* ga = t.grad_buffer(a)) {
        const Tensor<T>& gy = t.grad_of(out);
        T* dst = ga->data() + r0 * cols;
        for (int64_t i = 0; i < gy.numel(); ++i) dst[i] += gy[i];
      }
    });
  return out;
}

// Columns [c0, c0+n) of a 2-D tensor.
template <typename T>
Var<T> slice_cols(Var<T> a, int64_t c0, int64_t n) {
  Tape<T>& tp = detail::tape_of(a);
  const Tensor<T>& x = a.val();
  if (x.rank() != 2) throw ShapeError("slice_cols: expected rank-2, got " + shape_str(x.shape()));
  int64_t rows = x.shape()[0], cols = x.shape()[1];
  if (c0 < 0 || n < 0 || c0 + n > cols) throw IndexError("slice_cols: range out of bounds");
  Tensor<T> y({rows, n});
  for (int64_t r = 0; r < rows; ++r)
    std::copy(x.data() + r * cols + c0, x.data() + r * cols + c0 + n, y.data() + r * n);
  bool rg = tp.needs_grad(a);
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, a, c0, rows, cols, n](Tape<T>& t) {
      if (Tensor<T>* ga = t.grad_buffer(a)) {
        const Tensor<T>& gy = t.grad_of(out);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < n; ++j) ga->data()[r * cols + c0 + j] += gy[r * n + j];
      }
    });
  return out;
}

// Concatenate rank-2 tensors along rows (all must share the column count).
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ArgumentError("concat_rows: empty input");
  Tape<T>& tp = detail::tape_of(parts[0]);
  int64_t cols = parts[0].val().shape()[1];
  int64_t rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::check_same_tape(parts[0], p);
    if (p.val().rank() != 2 || p.val().shape()[1] != cols)
      throw ShapeError("concat_rows: column mismatch");
    rows += p.val().shape()[0];
    rg = rg || tp.needs_grad(p);
  }
  Tensor<T> y({rows, cols});
  int64_t off = 0;
  for (const auto& p : parts) {
    const Tensor<T>& x = p.val();
    std::copy(x.data(), x.data() + x.numel(), y.data() + off);
    off += x.numel();
  }
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, parts](Tape<T>& t) {
      const Tensor<T>& gy = t.grad_of(out);
      int64_t off = 0;
      for (const auto& p : parts) {
        int64_t n = t.value(p).numel();
        if (Tensor<T>* gp = t.grad_buffer(p))
          for (int64_t i = 0; i < n; ++i) gp->data()[i] += gy[off + i];
        off += n;
      }
    });
  return out;
}

// Concatenate rank-2 tensors along columns (all must share the row count).
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ArgumentError("concat_cols: empty input");
  Tape<T>& tp = detail::tape_of(parts[0]);
  int64_t rows = parts[0].val().shape()[0];
  int64_t cols = 0;
  bool rg = false;
  std::vector<int64_t> widths;
  for (const auto& p : parts) {
    detail::check_same_tape(parts[0], p);
    if (p.val().rank() != 2 || p.val().shape()[0] != rows)
      throw ShapeError("concat_cols: row mismatch");
    widths.push_back(p.val().shape()[1]);
    cols += widths.back();
    rg = rg || tp.needs_grad(p);
  }
  Tensor<T> y({rows, cols});
  int64_t off = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    const Tensor<T>& x = parts[k].val();
    for (int64_t r = 0; r < rows; ++r)
      std::copy(x.data() + r * widths[k], x.data() + (r + 1) * widths[k],
                y.data() + r * cols + off);
    off += widths[k];
  }
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, parts, widths, rows, cols](Tape<T>& t) {
      const Tensor<T>& gy = t.grad_of(out);
      int64_t off = 0;
      for (size_t k = 0; k < parts.size(); ++k) {
        if (Tensor<T>* gp = t.grad_buffer(parts[k]))
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < widths[k]; ++j)
              gp->data()[r * widths[k] + j] += gy[r * cols + off + j];
        off += widths[k];
      }
    });
  return out;
}

// Flat concatenation of arbitrary-rank tensors into a given output shape.
template <typename T>
Var<T> concat_flat(const std::vector<Var<T>>& parts, Shape out_shape) {
  if (parts.empty()) throw ArgumentError("concat_flat: empty input");
  Tape<T>& tp = detail::tape_of(parts[0]);
  int64_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::check_same_tape(parts[0], p);
    total += p.val().numel();
    rg = rg || tp.needs_grad(p);
  }
  if (total != shape_numel(out_shape)) throw ShapeError("concat_flat: numel mismatch");
  Tensor<T> y(out_shape);
  int64_t off = 0;
  for (const auto& p : parts) {
    const Tensor<T>& x = p.val();
    std::copy(x.data(), x.data() + x.numel(), y.data() + off);
    off += x.numel();
  }
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, parts](Tape<T>& t) {
      const Tensor<T>& gy = t.grad_of(out);
      int64_t off = 0;
      for (const auto& p : parts) {
        int64_t n = t.value(p).numel();
        if (Tensor<T>* gp = t.grad_buffer(p))
          for (int64_t i = 0; i < n; ++i) gp->data()[i] += gy[off + i];
        off += n;
      }
    });
  return out;
}

// Single row r of a 2-D table as a [1, cols] tensor (embedding lookup).
template <typename T>
Var<T> gather_row(Var<T> table, int64_t r) {
  Tape<T>& tp = detail::tape_of(table);
  const Tensor<T>& x = table.val();
  if (x.rank() != 2) throw ShapeError("gather_row: expected rank-2 table");
  int64_t rows = x.shape()[0], cols = x.shape()[1];
  if (r < 0 || r >= rows) throw IndexError("gather_row: row out of range");
  Tensor<T> y({int64_t(1), cols});
  std::copy(x.data() + r * cols, x.data() + (r + 1) * cols, y.data());
  bool rg = tp.needs_grad(table);
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, table, r, cols](Tape<T>& t) {
      if (Tensor<T>* g = t.grad_buffer(table)) {
        const Tensor<T>& gy = t.grad_of(out);
        for (int64_t j = 0; j < cols; ++j) g->data()[r * cols + j] += gy[j];
      }
    });
  return out;
}

// ---- linear algebra ----

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  Tape<T>& tp = detail::tape_of(a);
  const Tensor<T>& x = a.val();
  const Tensor<T>& w = b.val();
  if (x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[0])
    throw ShapeError("matmul: incompatible " + shape_str(x.shape()) + " x " +
                     shape_str(w.shape()));
  int64_t m = x.shape()[0], k = x.shape()[1], n = w.shape()[1];
  Tensor<T> y({m, n});
  EMap<T>(y.data(), m, n).noalias() =
      ECMap<T>(x.data(), m, k) * ECMap<T>(w.data(), k, n);
  bool rg = tp.needs_grad(a) || tp.needs_grad(b);
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, a, b, m, k, n](Tape<T>& t) {
      const Tensor<T>& gy = t.grad_of(out);
      ECMap<T> gym(gy.data(), m, n);
      if (Tensor<T>* ga = t.grad_buffer(a))
        EMap<T>(ga->data(), m, k).noalias() += gym * ECMap<T>(t.value(b).data(), k, n).transpose();
      if (Tensor<T>* gb = t.grad_buffer(b))
        EMap<T>(gb->data(), k, n).noalias() +=
            ECMap<T>(t.value(a).data(), m, k).transpose() * gym;
    });
  return out;
}

template <typename T>
Var<T> transpose2d(Var<T> a) {
  Tape<T>& tp = detail::tape_of(a);
  const Tensor<T>& x = a.val();
  if (x.rank() != 2) throw ShapeError("transpose2d: expected rank-2");
  int64_t m = x.shape()[0], n = x.shape()[1];
  Tensor<T> y({n, m});
  EMap<T>(y.data(), n, m) = ECMap<T>(x.data(), m, n).transpose();
  bool rg = tp.needs_grad(a);
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, a, m, n](Tape<T>& t) {
      if (Tensor<T>* ga = t.grad_buffer(a))
        EMap<T>(ga->data(), m, n) += ECMap<T>(t.grad_of(out).data(), n, m).transpose();
    });
  return out;
}

// x [N, D] + row [1, D] broadcast over rows.
template <typename T>
Var<T> add_row_vector(Var<T> x, Var<T> row) {
  detail::check_same_tape(x, row);
  Tape<T>& tp = detail::tape_of(x);
  const Tensor<T>& xv = x.val();
  const Tensor<T>& rv = row.val();
  if (xv.rank() != 2 || rv.rank() != 2 || rv.shape()[0] != 1 || rv.shape()[1] != xv.shape()[1])
    throw ShapeError("add_row_vector: incompatible " + shape_str(xv.shape()) + " + " +
                     shape_str(rv.shape()));
  int64_t n = xv.shape()[0], d = xv.shape()[1];
  Tensor<T> y({n, d});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) y[i * d + j] = xv[i * d + j] + rv[j];
  bool rg = tp.needs_grad(x) || tp.needs_grad(row);
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, x, row, n, d](Tape<T>& t) {
      const Tensor<T>& gy = t.grad_of(out);
      t.accumulate(x, gy);
      if (Tensor<T>* gr = t.grad_buffer(row))
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < d; ++j) gr->data()[j] += gy[i * d + j];
    });
  return out;
}

// Fused y = x @ w + b with x [N, D], w [D, E], b [1, E].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  detail::check_same_tape(x, w);
  detail::check_same_tape(x, b);
  Tape<T>& tp = detail::tape_of(x);
  const Tensor<T>& xv = x.val();
  const Tensor<T>& wv = w.val();
  const Tensor<T>& bv = b.val();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[0])
    throw ShapeError("linear: incompatible " + shape_str(xv.shape()) + " x " +
                     shape_str(wv.shape()));
  if (bv.rank() != 2 || bv.shape()[0] != 1 || bv.shape()[1] != wv.shape()[1])
    throw ShapeError("linear: bad bias shape " + shape_str(bv.shape()));
  int64_t n = xv.shape()[0], d = xv.shape()[1], e = wv.shape()[1];
  Tensor<T> y({n, e});
  EMap<T> ym(y.data(), n, e);
  ym.noalias() = ECMap<T>(xv.data(), n, d) * ECMap<T>(wv.data(), d, e);
  ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bv.data(), e);
  bool rg = tp.needs_grad(x) || tp.needs_grad(w) || tp.needs_grad(b);
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, x, w, b, n, d, e](Tape<T>& t) {
      const Tensor<T>& gy = t.grad_of(out);
      ECMap<T> gym(gy.data(), n, e);
      if (Tensor<T>* gx = t.grad_buffer(x))
        EMap<T>(gx->data(), n, d).noalias() +=
            gym * ECMap<T>(t.value(w).data(), d, e).transpose();
      if (Tensor<T>* gw = t.grad_buffer(w))
        EMap<T>(gw->data(), d, e).noalias() +=
            ECMap<T>(t.value(x).data(), n, d).transpose() * gym;
      if (Tensor<T>* gb = t.grad_buffer(b))
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb->data(), e) += gym.colwise().sum();
    });
  return out;
}

// ---- normalization and attention pieces ----

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  Tape<T>& tp = detail::tape_of(a);
  const Tensor<T>& x = a.val();
  if (x.rank() != 2) throw ShapeError("softmax_rows: expected rank-2");
  int64_t n = x.shape()[0], d = x.shape()[1];
  Tensor<T> y({n, d});
  for (int64_t i = 0; i < n; ++i) {
    const T* xr = x.data() + i * d;
    T* yr = y.data() + i * d;
    T mx = xr[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    T sum = T(0);
    for (int64_t j = 0; j < d; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    for (int64_t j = 0; j < d; ++j) yr[j] /= sum;
  }
  bool rg = tp.needs_grad(a);
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, a, n, d](Tape<T>& t) {
      if (Tensor<T>* ga = t.grad_buffer(a)) {
        const Tensor<T>& gy = t.grad_of(out);
        const Tensor<T>& yv = t.value(out);
        for (int64_t i = 0; i < n; ++i) {
          const T* gr = gy.data() + i * d;
          const T* yr = yv.data() + i * d;
          T dot = T(0);
          for (int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
          T* gar = ga->data() + i * d;
          for (int64_t j = 0; j < d; ++j) gar[j] += yr[j] * (gr[j] - dot);
        }
      }
    });
  return out;
}

// Row-wise layer norm with affine parameters gamma, beta of shape [1, D].
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  detail::check_same_tape(x, gamma);
  detail::check_same_tape(x, beta);
  Tape<T>& tp = detail::tape_of(x);
  const Tensor<T>& xv = x.val();
  if (xv.rank() != 2) throw ShapeError("layer_norm: expected rank-2");
  int64_t n = xv.shape()[0], d = xv.shape()[1];
  const Tensor<T>& gv = gamma.val();
  const Tensor<T>& bv = beta.val();
  if (gv.rank() != 2 || gv.shape()[0] != 1 || gv.shape()[1] != d || !bv.same_shape(gv))
    throw ShapeError("layer_norm: bad affine shapes");

  auto xhat = std::make_shared<Tensor<T>>(Shape{n, d});
  auto inv_std = std::make_shared<std::vector<T>>(n);
  Tensor<T> y({n, d});
  for (int64_t i = 0; i < n; ++i) {
    const T* xr = xv.data() + i * d;
    T mean = T(0);
    for (int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= T(d);
    T var = T(0);
    for (int64_t j = 0; j < d; ++j) {
      T c = xr[j] - mean;
      var += c * c;
    }
    var /= T(d);
    T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    T* hr = xhat->data() + i * d;
    T* yr = y.data() + i * d;
    for (int64_t j = 0; j < d; ++j) {
      hr[j] = (xr[j] - mean) * is;
      yr[j] = gv[j] * hr[j] + bv[j];
    }
  }
  bool rg = tp.needs_grad(x) || tp.needs_grad(gamma) || tp.needs_grad(beta);
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, x, gamma, beta, xhat, inv_std, n, d](Tape<T>& t) {
      const Tensor<T>& gy = t.grad_of(out);
      const Tensor<T>& gv = t.value(gamma);
      if (Tensor<T>* gb = t.grad_buffer(beta))
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < d; ++j) gb->data()[j] += gy[i * d + j];
      if (Tensor<T>* gg = t.grad_buffer(gamma))
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < d; ++j)
            gg->data()[j] += gy[i * d + j] * xhat->data()[i * d + j];
      if (Tensor<T>* gx = t.grad_buffer(x)) {
        for (int64_t i = 0; i < n; ++i) {
          const T* gr = gy.data() + i * d;
          const T* hr = xhat->data() + i * d;
          T sum_dh = T(0), sum_dh_h = T(0);
          for (int64_t j = 0; j < d; ++j) {
            T dh = gr[j] * gv[j];
            sum_dh += dh;
            sum_dh_h += dh * hr[j];
          }
          T is = (*inv_std)[i];
          T* gxr = gx->data() + i * d;
          for (int64_t j = 0; j < d; ++j) {
            T dh = gr[j] * gv[j];
            gxr[j] += is * (dh - sum_dh / T(d) - hr[j] * sum_dh_h / T(d));
          }
        }
      }
    });
  return out;
}

// ---- convolution ----

namespace detail {

// Patch matrix for conv: cols is [Ci*kh*kw, Ho*Wo], zero padding.
template <typename T>
void im2col(const Tensor<T>& x, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
            int64_t ho, int64_t wo, T* cols) {
  const int64_t ci = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const int64_t area = ho * wo;
  int64_t k = 0;
  for (int64_t c = 0; c < ci; ++c) {
    const T* xc = x.data() + c * h * w;
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx, ++k) {
        T* row = cols + k * area;
        for (int64_t oy = 0; oy < ho; ++oy) {
          int64_t iy = oy * stride - pad + ky;
          T* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = xc + iy * w;
          for (int64_t ox = 0; ox < wo; ++ox) {
            int64_t ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, int64_t ci, int64_t h, int64_t w, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t ho, int64_t wo, T* gx) {
  const int64_t area = ho * wo;
  int64_t k = 0;
  for (int64_t c = 0; c < ci; ++c) {
    T* gc = gx + c * h * w;
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx, ++k) {
        const T* row = cols + k * area;
        for (int64_t oy = 0; oy < ho; ++oy) {
          int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + oy * wo;
          T* dst = gc + iy * w;
          for (int64_t ox = 0; ox < wo; ++ox) {
            int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D convolution: x [Ci, H, W], weight [Co, Ci, kh, kw], bias [Co].
// Output [Co, Ho, Wo] with Ho = (H + 2p - kh) / s + 1. The patch matrix is
// recomputed in backward rather than cached, trading FLOPs for graph memory.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, int64_t stride = 1, int64_t pad = 0) {
  detail::check_same_tape(x, weight);
  detail::check_same_tape(x, bias);
  Tape<T>& tp = detail::tape_of(x);
  const Tensor<T>& xv = x.val();
  const Tensor<T>& wv = weight.val();
  const Tensor<T>& bv = bias.val();
  if (xv.rank() != 3) throw ShapeError("conv2d: input must be [C,H,W]");
  if (wv.rank() != 4) throw ShapeError("conv2d: weight must be [Co,Ci,kh,kw]");
  if (wv.shape()[1] != xv.shape()[0])
    throw ShapeError("conv2d: channel mismatch " + shape_str(xv.shape()) + " vs " +
                     shape_str(wv.shape()));
  if (bv.rank() != 1 || bv.shape()[0] != wv.shape()[0])
    throw ShapeError("conv2d: bad bias shape");
  if (stride < 1) throw ArgumentError("conv2d: stride must be >= 1");
  const int64_t ci = xv.shape()[0], h = xv.shape()[1], w = xv.shape()[2];
  const int64_t co = wv.shape()[0], kh = wv.shape()[2], kw = wv.shape()[3];
  const int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const int64_t wo = (w + 2 * pad - kw) / stride + 1;
  if (ho < 1 || wo < 1) throw ShapeError("conv2d: kernel larger than padded input");
  const int64_t kdim = ci * kh * kw, area = ho * wo;

  Tensor<T> cols({kdim, area});
  detail::im2col(xv, kh, kw, stride, pad, ho, wo, cols.data());
  Tensor<T> y({co, ho, wo});
  EMap<T> ym(y.data(), co, area);
  ym.noalias() = ECMap<T>(wv.data(), co, kdim) * ECMap<T>(cols.data(), kdim, area);
  for (int64_t c = 0; c < co; ++c) ym.row(c).array() += bv[c];

  bool rg = tp.needs_grad(x) || tp.needs_grad(weight) || tp.needs_grad(bias);
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, x, weight, bias, stride, pad, ci, h, w, co, kh, kw, ho, wo, kdim,
                          area](Tape<T>& t) {
      const Tensor<T>& gy = t.grad_of(out);
      ECMap<T> gym(gy.data(), co, area);
      if (Tensor<T>* gb = t.grad_buffer(bias))
        for (int64_t c = 0; c < co; ++c) gb->data()[c] += gym.row(c).sum();
      const bool need_gw = t.needs_grad(weight);
      const bool need_gx = t.needs_grad(x);
      if (need_gw) {
        Tensor<T> cols({kdim, area});
        detail::im2col(t.value(x), kh, kw, stride, pad, ho, wo, cols.data());
        Tensor<T>* gw = t.grad_buffer(weight);
        EMap<T>(gw->data(), co, kdim).noalias() +=
            gym * ECMap<T>(cols.data(), kdim, area).transpose();
      }
      if (need_gx) {
        Tensor<T> gcols({kdim, area});
        EMap<T>(gcols.data(), kdim, area).noalias() =
            ECMap<T>(t.value(weight).data(), co, kdim).transpose() * gym;
        Tensor<T>* gx = t.grad_buffer(x);
        detail::col2im_add(gcols.data(), ci, h, w, kh, kw, stride, pad, ho, wo, gx->data());
      }
    });
  return out;
}

// Nearest-neighbor 2x upsample of [C, H, W].
template <typename T>
Var<T> upsample_nearest2(Var<T> a) {
  Tape<T>& tp = detail::tape_of(a);
  const Tensor<T>& x = a.val();
  if (x.rank() != 3) throw ShapeError("upsample_nearest2: input must be [C,H,W]");
  const int64_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  Tensor<T> y({c, 2 * h, 2 * w});
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < h; ++i) {
      const T* src = x.data() + (ch * h + i) * w;
      T* d0 = y.data() + (ch * 2 * h + 2 * i) * 2 * w;
      T* d1 = d0 + 2 * w;
      for (int64_t j = 0; j < w; ++j) {
        d0[2 * j] = d0[2 * j + 1] = src[j];
        d1[2 * j] = d1[2 * j + 1] = src[j];
      }
    }
  bool rg = tp.needs_grad(a);
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, a, c, h, w](Tape<T>& t) {
      if (Tensor<T>* ga = t.grad_buffer(a)) {
        const Tensor<T>& gy = t.grad_of(out);
        for (int64_t ch = 0; ch < c; ++ch)
          for (int64_t i = 0; i < h; ++i) {
            T* dst = ga->data() + (ch * h + i) * w;
            const T* g0 = gy.data() + (ch * 2 * h + 2 * i) * 2 * w;
            const T* g1 = g0 + 2 * w;
            for (int64_t j = 0; j < w; ++j)
              dst[j] += g0[2 * j] + g0[2 * j + 1] + g1[2 * j] + g1[2 * j + 1];
          }
      }
    });
  return out;
}

// Multi-head attention over independent consecutive row groups. q, k, v are
// [N, D] with N divisible by group; attention runs within each group of rows
// and each head's column slice, so one op covers per-frame spatial attention
// (group = tokens per frame) and per-position temporal attention (group =
// frame count, after a row permutation). Softmax probabilities are cached for
// backward.
template <typename T>
Var<T> grouped_attention(Var<T> q, Var<T> k, Var<T> v, int64_t group, int64_t heads) {
  detail::check_same_tape(q, k);
  detail::check_same_tape(q, v);
  detail::check_same_shape(q, k, "grouped_attention");
  detail::check_same_shape(q, v, "grouped_attention");
  Tape<T>& tp = detail::tape_of(q);
  const Tensor<T>& qv = q.val();
  if (qv.rank() != 2) throw ShapeError("grouped_attention: expected rank-2");
  const int64_t n = qv.shape()[0], d = qv.shape()[1];
  if (group < 1 || n % group != 0)
    throw ShapeError("grouped_attention: rows not divisible by group");
  if (heads < 1 || d % heads != 0)
    throw ShapeError("grouped_attention: width not divisible by heads");
  const int64_t nb = n / group, dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  using OS = Eigen::OuterStride<>;
  using CSMap = Eigen::Map<const EMat<T>, 0, OS>;
  using SMap = Eigen::Map<EMat<T>, 0, OS>;

  auto probs = std::make_shared<Tensor<T>>(Shape{nb, heads, group, group});
  Tensor<T> out({n, d});
  for (int64_t b = 0; b < nb; ++b) {
    for (int64_t h = 0; h < heads; ++h) {
      const int64_t off = b * group * d + h * dh;
      CSMap qm(qv.data() + off, group, dh, OS(d));
      CSMap km(k.val().data() + off, group, dh, OS(d));
      CSMap vm(v.val().data() + off, group, dh, OS(d));
      EMat<T> s = (qm * km.transpose()) * scale;
      for (int64_t i = 0; i < group; ++i) {
        T mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
      }
      std::copy(s.data(), s.data() + group * group,
                probs->data() + (b * heads + h) * group * group);
      SMap(out.data() + off, group, dh, OS(d)).noalias() = s * vm;
    }
  }

  bool rg = tp.needs_grad(q) || tp.needs_grad(k) || tp.needs_grad(v);
  Var<T> outv = tp.make(std::move(out), rg);
  if (rg)
    tp.set_backward(outv, [outv, q, k, v, probs, nb, heads, group, d, dh, scale](Tape<T>& t) {
      const Tensor<T>& gy = t.grad_of(outv);
      Tensor<T>* gq = t.grad_buffer(q);
      Tensor<T>* gk = t.grad_buffer(k);
      Tensor<T>* gv = t.grad_buffer(v);
      for (int64_t b = 0; b < nb; ++b) {
        for (int64_t h = 0; h < heads; ++h) {
          const int64_t off = b * group * d + h * dh;
          ECMap<T> pm(probs->data() + (b * heads + h) * group * group, group, group);
          CSMap gom(gy.data() + off, group, dh, OS(d));
          CSMap qm(t.value(q).data() + off, group, dh, OS(d));
          CSMap km(t.value(k).data() + off, group, dh, OS(d));
          CSMap vm(t.value(v).data() + off, group, dh, OS(d));
          if (gv) SMap(gv->data() + off, group, dh, OS(d)).noalias() += pm.transpose() * gom;
          if (gq || gk) {
            EMat<T> dp = gom * vm.transpose();
            EMat<T> ds(group, group);
            for (int64_t i = 0; i < group; ++i) {
              T dot = dp.row(i).cwiseProduct(pm.row(i)).sum();
              ds.row(i) = (pm.row(i).array() * (dp.row(i).array() - dot)).matrix();
            }
            if (gq)
              SMap(gq->data() + off, group, dh, OS(d)).noalias() += ds * km * scale;
            if (gk)
              SMap(gk->data() + off, group, dh, OS(d)).noalias() +=
                  ds.transpose() * qm * scale;
          }
        }
      }
    });
  return outv;
}

// ---- reductions ----

template <typename T>
Var<T> sum_all(Var<T> a) {
  Tape<T>& tp = detail::tape_of(a);
  T s = T(0);
  for (int64_t i = 0; i < a.val().numel(); ++i) s += a.val()[i];
  bool rg = tp.needs_grad(a);
  Var<T> out = tp.make(Tensor<T>({1}, std::vector<T>{s}), rg);
  if (rg)
    tp.set_backward(out, [out, a](Tape<T>& t) {
      if (Tensor<T>* ga = t.grad_buffer(a)) {
        T g = t.grad_of(out)[0];
        for (int64_t i = 0; i < ga->numel(); ++i) ga->data()[i] += g;
      }
    });
  return out;
}

template <typename T>
Var<T> mean_all(Var<T> a) {
  Tape<T>& tp = detail::tape_of(a);
  const int64_t n = a.val().numel();
  if (n == 0) throw ArgumentError("mean_all: empty tensor");
  T s = T(0);
  for (int64_t i = 0; i < n; ++i) s += a.val()[i];
  s /= T(n);
  bool rg = tp.needs_grad(a);
  Var<T> out = tp.make(Tensor<T>({1}, std::vector<T>{s}), rg);
  if (rg)
    tp.set_backward(out, [out, a, n](Tape<T>& t) {
      if (Tensor<T>* ga = t.grad_buffer(a)) {
        T g = t.grad_of(out)[0] / T(n);
        for (int64_t i = 0; i < ga->numel(); ++i) ga->data()[i] += g;
      }
    });
  return out;
}

// Per-channel spatial mean: [C, H, W] -> [C].
template <typename T>
Var<T> mean_hw(Var<T> a) {
  Tape<T>& tp = detail::tape_of(a);
  const Tensor<T>& x = a.val();
  if (x.rank() != 3) throw ShapeError("mean_hw: input must be [C,H,W]");
  const int64_t c = x.shape()[0], area = x.shape()[1] * x.shape()[2];
  Tensor<T> y({c});
  for (int64_t ch = 0; ch < c; ++ch) {
    T s = T(0);
    const T* src = x.data() + ch * area;
    for (int64_t i = 0; i < area; ++i) s += src[i];
    y[ch] = s / T(area);
  }
  bool rg = tp.needs_grad(a);
  Var<T> out = tp.make(std::move(y), rg);
  if (rg)
    tp.set_backward(out, [out, a, c, area](Tape<T>& t) {
      if (Tensor<T>* ga = t.grad_buffer(a)) {
        const Tensor<T>& gy = t.grad_of(out);
        for (int64_t ch = 0; ch < c; ++ch) {
          T g = gy[ch] / T(area);
          T* dst = ga->data() + ch * area;
          for (int64_t i = 0; i < area; ++i) dst[i] += g;
        }
      }
    });
  return out;
}

// Mean squared error between same-shape tensors, as a scalar node.
template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  detail::check_same_shape(a, b, "mse");
  Tape<T>& tp = detail::tape_of(a);
  const int64_t n = a.val().numel();
  T s = T(0);
  for (int64_t i = 0; i < n; ++i) {
    T d = a.val()[i] - b.val()[i];
    s += d * d;
  }
  s /= T(n);
  bool rg = tp.needs_grad(a) || tp.needs_grad(b);
  Var<T> out = tp.make(Tensor<T>({1}, std::vector<T>{s}), rg);
  if (rg)
    tp.set_backward(out, [out, a, b, n](Tape<T>& t) {
      T g = t.grad_of(out)[0] * T(2) / T(n);
      const Tensor<T>& av = t.value(a);
      const Tensor<T>& bv = t.value(b);
      if (Tensor<T>* ga = t.grad_buffer(a))
        for (int64_t i = 0; i < n; ++i) ga->data()[i] += g * (av[i] - bv[i]);
      if (Tensor<T>* gb = t.grad_buffer(b))
        for (int64_t i = 0; i < n; ++i) gb->data()[i] -= g * (av[i] - bv[i]);
    });
  return out;
}

}  // namespace dove::ad
