#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "nmtkit/tensor.hpp"

namespace nmt {

template <class Real>
class Tape;

/// Handle to a value recorded on a Tape.
template <class Real>
class Var {
 public:
  Var() = default;
  Var(Tape<Real>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Real>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<Real>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape<Real>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only record of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it and a single reverse sweep visits each node once. With recording
/// disabled, values are still stored but no backward rules are kept, which
/// is what decoding uses.
template <class Real>
class Tape {
 public:
  using Backprop = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<Real> constant(Tensor<Real> value) { return push(std::move(value), false, nullptr); }

  /// Leaf whose gradient is collected by backward().
  Var<Real> parameter(Tensor<Real> value) { return push(std::move(value), record_, nullptr); }

  const Tensor<Real>& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, zero-allocated on first touch.
  Tensor<Real>& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<Real>(n.value.shape());
    return n.grad;
  }

  /// Gradient after backward(); zeros when the node never received any.
  Tensor<Real> gradient(const Var<Real>& v) const {
    const auto& n = nodes_[v.id()];
    return n.grad.empty() ? Tensor<Real>(n.value.shape()) : n.grad;
  }

  /// Internal: appends an op result with its backward rule.
  Var<Real> record(Tensor<Real> value, bool needs_grad, Backprop rule) {
    const bool keep = record_ && needs_grad;
    return push(std::move(value), keep, keep ? std::move(rule) : nullptr);
  }

  /// Reverse sweep from a scalar loss.
  void backward(const Var<Real>& loss) {
    if (loss.value().size() != 1)
      throw ArgumentError("backward: loss must be a scalar, got shape " +
                          shape_string(loss.shape()));
    grad(loss.id())[0] += Real(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.rule && !n.grad.empty()) n.rule(*this, i);
    }
  }

 private:
  struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;
    Backprop rule;
    bool needs_grad = false;
  };

  Var<Real> push(Tensor<Real> value, bool needs_grad, Backprop rule) {
    nodes_.push_back(Node{std::move(value), Tensor<Real>(), std::move(rule), needs_grad});
    return Var<Real>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool record_;
};

namespace detail {

template <class Real>
bool any_grad(const Var<Real>& a) {
  return a.tape().needs_grad(a.id());
}
template <class Real, class... Rest>
bool any_grad(const Var<Real>& a, const Rest&... rest) {
  return a.tape().needs_grad(a.id()) || any_grad(rest...);
}

template <class Real>
void require_same_shape(const char* op, const Var<Real>& a, const Var<Real>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

template <class Real>
void require_same_tape(const Var<Real>& a, const Var<Real>& b) {
  if (&a.tape() != &b.tape()) throw ArgumentError("operands recorded on different tapes");
}

template <class Real>
void axpy(Tensor<Real>& dst, const Tensor<Real>& src, Real scale = Real(1)) {
  Real* d = dst.ptr();
  const Real* s = src.ptr();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += scale * s[i];
}

template <class Real>
Real sigmoid(Real x) {
  return x >= 0 ? Real(1) / (Real(1) + std::exp(-x)) : std::exp(x) / (Real(1) + std::exp(x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class Real>
Var<Real> matmul(const Var<Real>& a, const Var<Real>& b) {
  detail::require_same_tape(a, b);
  Tensor<Real> out = matmul(a.value(), b.value());
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  return a.tape().record(std::move(out), detail::any_grad(a, b),
                         [ai = a.id(), bi = b.id(), m, k, n](Tape<Real>& t, std::size_t self) {
                           const Tensor<Real>& g = t.grad(self);
                           if (t.needs_grad(ai))
                             kernel::gemm_nt_acc(g.ptr(), t.value(bi).ptr(), t.grad(ai).ptr(), m, n, k);
                           if (t.needs_grad(bi))
                             kernel::gemm_tn_acc(t.value(ai).ptr(), g.ptr(), t.grad(bi).ptr(), m, k, n);
                         });
}

/// a[m x k] * b[n x k]^T, used when one stored table serves as a transposed
/// projection.
template <class Real>
Var<Real> matmul_nt(const Var<Real>& a, const Var<Real>& b) {
  detail::require_same_tape(a, b);
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[1] != b.shape()[1])
    throw DimensionError("matmul_nt: cannot multiply " + shape_string(a.shape()) + " by transpose of " +
                         shape_string(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  Tensor<Real> out(Shape{m, n});
  kernel::gemm_nt_acc(a.value().ptr(), b.value().ptr(), out.ptr(), m, k, n);
  return a.tape().record(std::move(out), detail::any_grad(a, b),
                         [ai = a.id(), bi = b.id(), m, k, n](Tape<Real>& t, std::size_t self) {
                           const Tensor<Real>& g = t.grad(self);
                           // out = a b^T: da = g b, db = g^T a
                           if (t.needs_grad(ai))
                             kernel::gemm_acc(g.ptr(), t.value(bi).ptr(), t.grad(ai).ptr(), m, n, k);
                           if (t.needs_grad(bi))
                             kernel::gemm_tn_acc(g.ptr(), t.value(ai).ptr(), t.grad(bi).ptr(), m, n, k);
                         });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("add", a, b);
  Tensor<Real> out = a.value();
  detail::axpy(out, b.value());
  return a.tape().record(std::move(out), detail::any_grad(a, b),
                         [ai = a.id(), bi = b.id()](Tape<Real>& t, std::size_t self) {
                           const Tensor<Real>& g = t.grad(self);
                           if (t.needs_grad(ai)) detail::axpy(t.grad(ai), g);
                           if (t.needs_grad(bi)) detail::axpy(t.grad(bi), g);
                         });
}

template <class Real>
Var<Real> sub(const Var<Real>& a, const Var<Real>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("sub", a, b);
  Tensor<Real> out = a.value();
  detail::axpy(out, b.value(), Real(-1));
  return a.tape().record(std::move(out), detail::any_grad(a, b),
                         [ai = a.id(), bi = b.id()](Tape<Real>& t, std::size_t self) {
                           const Tensor<Real>& g = t.grad(self);
                           if (t.needs_grad(ai)) detail::axpy(t.grad(ai), g);
                           if (t.needs_grad(bi)) detail::axpy(t.grad(bi), g, Real(-1));
                         });
}

template <class Real>
Var<Real> mul(const Var<Real>& a, const Var<Real>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("mul", a, b);
  Tensor<Real> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape().record(std::move(out), detail::any_grad(a, b),
                         [ai = a.id(), bi = b.id()](Tape<Real>& t, std::size_t self) {
                           const Tensor<Real>& g = t.grad(self);
                           const std::size_t n = g.size();
                           if (t.needs_grad(ai)) {
                             auto& ga = t.grad(ai);
                             const auto& bv = t.value(bi);
                             for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
                           }
                           if (t.needs_grad(bi)) {
                             auto& gb = t.grad(bi);
                             const auto& av = t.value(ai);
                             for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
                           }
                         });
}

/// a * c for a constant c.
template <class Real>
Var<Real> scale(const Var<Real>& a, Real c) {
  Tensor<Real> out = a.value();
  for (auto& v : out.data()) v *= c;
  return a.tape().record(std::move(out), detail::any_grad(a),
                         [ai = a.id(), c](Tape<Real>& t, std::size_t self) {
                           detail::axpy(t.grad(ai), t.grad(self), c);
                         });
}

template <class Real>
Var<Real> tanh(const Var<Real>& a) {
  Tensor<Real> out = a.value();
  for (auto& v : out.data()) v = std::tanh(v);
  return a.tape().record(std::move(out), detail::any_grad(a),
                         [ai = a.id()](Tape<Real>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           const auto& y = t.value(self);
                           auto& ga = t.grad(ai);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (Real(1) - y[i] * y[i]);
                         });
}

template <class Real>
Var<Real> sigmoid(const Var<Real>& a) {
  Tensor<Real> out = a.value();
  for (auto& v : out.data()) v = detail::sigmoid(v);
  return a.tape().record(std::move(out), detail::any_grad(a),
                         [ai = a.id()](Tape<Real>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           const auto& y = t.value(self);
                           auto& ga = t.grad(ai);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (Real(1) - y[i]);
                         });
}

/// Adds the vector v to every row of x.
template <class Real>
Var<Real> add_row(const Var<Real>& x, const Var<Real>& v) {
  detail::require_same_tape(x, v);
  const std::size_t rows = x.rows(), cols = x.cols();
  if (v.value().size() != cols)
    throw DimensionError("add_row: row vector " + shape_string(v.shape()) + " does not fit " +
                         shape_string(x.shape()));
  Tensor<Real> out = x.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += v.value()[c];
  return x.tape().record(std::move(out), detail::any_grad(x, v),
                         [xi = x.id(), vi = v.id(), rows, cols](Tape<Real>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           if (t.needs_grad(xi)) detail::axpy(t.grad(xi), g);
                           if (t.needs_grad(vi)) {
                             auto& gv = t.grad(vi);
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t c = 0; c < cols; ++c) gv[c] += g[r * cols + c];
                           }
                         });
}

/// Adds the scalar s to every entry of x.
template <class Real>
Var<Real> add_scalar(const Var<Real>& x, const Var<Real>& s) {
  detail::require_same_tape(x, s);
  if (s.value().size() != 1) throw DimensionError("add_scalar: " + shape_string(s.shape()) + " is not a scalar");
  Tensor<Real> out = x.value();
  for (auto& v : out.data()) v += s.value()[0];
  return x.tape().record(std::move(out), detail::any_grad(x, s),
                         [xi = x.id(), si = s.id()](Tape<Real>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           if (t.needs_grad(xi)) detail::axpy(t.grad(xi), g);
                           if (t.needs_grad(si)) {
                             Real acc = 0;
                             for (std::size_t i = 0; i < g.size(); ++i) acc += g[i];
                             t.grad(si)[0] += acc;
                           }
                         });
}

template <class Real>
Var<Real> sum(const Var<Real>& a) {
  Real acc = 0;
  for (auto v : a.value().data()) acc += v;
  return a.tape().record(Tensor<Real>::scalar(acc), detail::any_grad(a),
                         [ai = a.id()](Tape<Real>& t, std::size_t self) {
                           const Real g = t.grad(self)[0];
                           for (auto& v : t.grad(ai).data()) v += g;
                         });
}

/// Concatenates along the last dimension (vectors, or matrices with equal
/// row counts).
template <class Real>
Var<Real> concat(const Var<Real>& a, const Var<Real>& b) {
  detail::require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != bv.rank() || av.rank() == 0 || av.rows() != bv.rows())
    throw DimensionError("concat: incompatible shapes " + shape_string(av.shape()) + " and " +
                         shape_string(bv.shape()));
  const std::size_t rows = av.rows(), ca = av.cols(), cb = bv.cols();
  Shape s = av.shape();
  s.back() = ca + cb;
  Tensor<Real> out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.ptr() + r * ca, ca, out.ptr() + r * (ca + cb));
    std::copy_n(bv.ptr() + r * cb, cb, out.ptr() + r * (ca + cb) + ca);
  }
  return a.tape().record(std::move(out), detail::any_grad(a, b),
                         [ai = a.id(), bi = b.id(), rows, ca, cb](Tape<Real>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           if (t.needs_grad(ai)) {
                             auto& ga = t.grad(ai);
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t c = 0; c < ca; ++c) ga[r * ca + c] += g[r * (ca + cb) + c];
                           }
                           if (t.needs_grad(bi)) {
                             auto& gb = t.grad(bi);
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t c = 0; c < cb; ++c) gb[r * cb + c] += g[r * (ca + cb) + ca + c];
                           }
                         });
}

/// Columns [begin, end) of the last dimension.
template <class Real>
Var<Real> slice(const Var<Real>& a, std::size_t begin, std::size_t end) {
  const auto& av = a.value();
  if (av.rank() == 0 || begin >= end || end > av.cols())
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_string(av.shape()));
  const std::size_t rows = av.rows(), cols = av.cols(), w = end - begin;
  Shape s = av.shape();
  s.back() = w;
  Tensor<Real> out(s);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(av.ptr() + r * cols + begin, w, out.ptr() + r * w);
  return a.tape().record(std::move(out), detail::any_grad(a),
                         [ai = a.id(), rows, cols, begin, w](Tape<Real>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           auto& ga = t.grad(ai);
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t c = 0; c < w; ++c) ga[r * cols + begin + c] += g[r * w + c];
                         });
}

// ---------------------------------------------------------------------------
// Normalisation

namespace detail {

// Row-wise max-shifted softmax in place.
template <class Real>
void softmax_rows_inplace(Tensor<Real>& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    Real* row = x.ptr() + r * cols;
    const Real mx = *std::max_element(row, row + cols);
    Real z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) row[c] /= z;
  }
}

template <class Real>
void log_softmax_rows_inplace(Tensor<Real>& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    Real* row = x.ptr() + r * cols;
    const Real mx = *std::max_element(row, row + cols);
    Real z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(row[c] - mx);
    const Real lz = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) row[c] -= lz;
  }
}

}  // namespace detail

/// Softmax over the last dimension of each row.
template <class Real>
Var<Real> softmax(const Var<Real>& x) {
  if (x.value().size() == 0 || x.value().rank() == 0)
    throw ArgumentError("softmax: empty input");
  Tensor<Real> out = x.value();
  detail::softmax_rows_inplace(out);
  return x.tape().record(std::move(out), detail::any_grad(x),
                         [xi = x.id()](Tape<Real>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           const auto& y = t.value(self);
                           auto& gx = t.grad(xi);
                           const std::size_t rows = y.rows(), cols = y.cols();
                           for (std::size_t r = 0; r < rows; ++r) {
                             Real dot = 0;
                             for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
                             for (std::size_t c = 0; c < cols; ++c)
                               gx[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
                           }
                         });
}

/// gain * (x - mean) / sqrt(var + eps) + bias, per row.
template <class Real>
Var<Real> layer_norm(const Var<Real>& x, const Var<Real>& gain, const Var<Real>& bias, Real eps = Real(1e-5)) {
  detail::require_same_tape(x, gain);
  detail::require_same_tape(x, bias);
  const std::size_t rows = x.rows(), n = x.cols();
  if (x.value().rank() == 0 || n < 2) throw ArgumentError("layer_norm: need at least 2 features");
  if (gain.value().size() != n || bias.value().size() != n)
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" +
                         shape_string(bias.shape()) + " do not fit " + shape_string(x.shape()));
  Tensor<Real> out(x.shape());
  std::vector<Real> xhat(rows * n), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.value().ptr() + r * n;
    Real mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += xr[c];
    mean /= Real(n);
    Real var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= Real(n);
    inv_std[r] = Real(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (xr[c] - mean) * inv_std[r];
      out[r * n + c] = gain.value()[c] * xhat[r * n + c] + bias.value()[c];
    }
  }
  return x.tape().record(
      std::move(out), detail::any_grad(x, gain, bias),
      [xi = x.id(), gi = gain.id(), bi = bias.id(), rows, n, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.needs_grad(gi)) {
          auto& gg = t.grad(gi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) gg[c] += g[r * n + c] * xhat[r * n + c];
        }
        if (t.needs_grad(bi)) {
          auto& gb = t.grad(bi);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
        }
        if (t.needs_grad(xi)) {
          auto& gx = t.grad(xi);
          const auto& gain_v = t.value(gi);
          for (std::size_t r = 0; r < rows; ++r) {
            Real mean_d = 0, mean_dx = 0;
            for (std::size_t c = 0; c < n; ++c) {
              const Real d = g[r * n + c] * gain_v[c];
              mean_d += d;
              mean_dx += d * xhat[r * n + c];
            }
            mean_d /= Real(n);
            mean_dx /= Real(n);
            for (std::size_t c = 0; c < n; ++c) {
              const Real d = g[r * n + c] * gain_v[c];
              gx[r * n + c] += inv_std[r] * (d - mean_d - xhat[r * n + c] * mean_dx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Sequence-model plumbing

/// Rows of table selected by ids.
template <class Real>
Var<Real> embedding(const Var<Real>& table, const std::vector<int>& ids) {
  const std::size_t vocab = table.rows(), dim = table.cols();
  if (table.value().rank() != 2) throw DimensionError("embedding: table must be a matrix");
  if (ids.empty()) throw ArgumentError("embedding: no ids");
  Tensor<Real> out(Shape{ids.size(), dim});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab)
      throw ArgumentError("embedding: id " + std::to_string(ids[r]) + " outside vocabulary of size " +
                          std::to_string(vocab));
    std::copy_n(table.value().ptr() + ids[r] * dim, dim, out.ptr() + r * dim);
  }
  return table.tape().record(std::move(out), detail::any_grad(table),
                             [ti = table.id(), ids, dim](Tape<Real>& t, std::size_t self) {
                               const auto& g = t.grad(self);
                               auto& gt = t.grad(ti);
                               for (std::size_t r = 0; r < ids.size(); ++r)
                                 for (std::size_t c = 0; c < dim; ++c) gt[ids[r] * dim + c] += g[r * dim + c];
                             });
}

/// Row r is taken from a where keep[r] is set, from b otherwise.
template <class Real>
Var<Real> where_rows(const std::vector<std::uint8_t>& keep, const Var<Real>& a, const Var<Real>& b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("where_rows", a, b);
  const std::size_t rows = a.rows(), cols = a.cols();
  if (keep.size() != rows) throw DimensionError("where_rows: mask length does not match row count");
  if (std::all_of(keep.begin(), keep.end(), [](auto k) { return k != 0; })) return a;
  if (std::none_of(keep.begin(), keep.end(), [](auto k) { return k != 0; })) return b;
  Tensor<Real> out = b.value();
  for (std::size_t r = 0; r < rows; ++r)
    if (keep[r]) std::copy_n(a.value().ptr() + r * cols, cols, out.ptr() + r * cols);
  return a.tape().record(std::move(out), detail::any_grad(a, b),
                         [ai = a.id(), bi = b.id(), keep, cols](Tape<Real>& t, std::size_t self) {
                           const auto& g = t.grad(self);
                           for (std::size_t r = 0; r < keep.size(); ++r) {
                             const std::size_t dst = keep[r] ? ai : bi;
                             if (!t.needs_grad(dst)) continue;
                             auto& gd = t.grad(dst);
                             for (std::size_t c = 0; c < cols; ++c) gd[r * cols + c] += g[r * cols + c];
                           }
                         });
}

/// Stacks k matrices of shape [B x n] into [(k*B) x n], block j first.
template <class Real>
Var<Real> stack_rows(const std::vector<Var<Real>>& parts) {
  if (parts.empty()) throw ArgumentError("stack_rows: nothing to stack");
  const std::size_t b = parts[0].rows(), n = parts[0].cols();
  bool grad = false;
  for (const auto& p : parts) {
    if (p.rows() != b || p.cols() != n || p.value().rank() != 2)
      throw DimensionError("stack_rows: part shape " + shape_string(p.shape()) + " differs");
    detail::require_same_tape(parts[0], p);
    grad = grad || detail::any_grad(p);
  }
  Tensor<Real> out(Shape{parts.size() * b, n});
  std::vector<std::size_t> ids;
  for (std::size_t j = 0; j < parts.size(); ++j) {
    std::copy_n(parts[j].value().ptr(), b * n, out.ptr() + j * b * n);
    ids.push_back(parts[j].id());
  }
  return parts[0].tape().record(std::move(out), grad,
                                [ids = std::move(ids), b, n](Tape<Real>& t, std::size_t self) {
                                  const auto& g = t.grad(self);
                                  for (std::size_t j = 0; j < ids.size(); ++j) {
                                    if (!t.needs_grad(ids[j])) continue;
                                    auto& gp = t.grad(ids[j]);
                                    for (std::size_t i = 0; i < b * n; ++i) gp[i] += g[j * b * n + i];
                                  }
                                });
}

/// keys[(m*B) x A] + q[B x A] tiled over the m position blocks.
template <class Real>
Var<Real> add_tiled(const Var<Real>& keys, const Var<Real>& q) {
  detail::require_same_tape(keys, q);
  const std::size_t total = keys.rows(), b = q.rows(), a = q.cols();
  if (keys.cols() != a || b == 0 || total % b != 0)
    throw DimensionError("add_tiled: " + shape_string(q.shape()) + " does not tile " +
                         shape_string(keys.shape()));
  Tensor<Real> out = keys.value();
  for (std::size_t r = 0; r < total; ++r)
    for (std::size_t c = 0; c < a; ++c) out[r * a + c] += q.value()[(r % b) * a + c];
  return keys.tape().record(std::move(out), detail::any_grad(keys, q),
                            [ki = keys.id(), qi = q.id(), total, b, a](Tape<Real>& t, std::size_t self) {
                              const auto& g = t.grad(self);
                              if (t.needs_grad(ki)) detail::axpy(t.grad(ki), g);
                              if (t.needs_grad(qi)) {
                                auto& gq = t.grad(qi);
                                for (std::size_t r = 0; r < total; ++r)
                                  for (std::size_t c = 0; c < a; ++c) gq[(r % b) * a + c] += g[r * a + c];
                              }
                            });
}

/// Softmax over positions j for each batch column b of scores laid out as
/// [(m*B) x 1] (row j*B+b). Masked positions get exactly zero weight.
template <class Real>
Var<Real> masked_position_softmax(const Var<Real>& scores, const std::vector<std::uint8_t>& mask,
                                  std::size_t batch) {
  const std::size_t total = scores.value().size();
  if (batch == 0 || total % batch != 0 || mask.size() != total)
    throw DimensionError("masked_position_softmax: scores/mask layout mismatch");
  const std::size_t m = total / batch;
  Tensor<Real> out(scores.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t j = 0; j < m; ++j)
      if (mask[j * batch + b]) mx = std::max(mx, scores.value()[j * batch + b]);
    if (mx == -std::numeric_limits<Real>::infinity())
      throw ArgumentError("attention: every source position is masked");
    Real z = 0;
    for (std::size_t j = 0; j < m; ++j)
      if (mask[j * batch + b]) z += (out[j * batch + b] = std::exp(scores.value()[j * batch + b] - mx));
    for (std::size_t j = 0; j < m; ++j) out[j * batch + b] /= z;
  }
  return scores.tape().record(std::move(out), detail::any_grad(scores),
                              [si = scores.id(), batch, m](Tape<Real>& t, std::size_t self) {
                                const auto& g = t.grad(self);
                                const auto& y = t.value(self);
                                auto& gs = t.grad(si);
                                for (std::size_t b = 0; b < batch; ++b) {
                                  Real dot = 0;
                                  for (std::size_t j = 0; j < m; ++j) dot += g[j * batch + b] * y[j * batch + b];
                                  for (std::size_t j = 0; j < m; ++j)
                                    gs[j * batch + b] += y[j * batch + b] * (g[j * batch + b] - dot);
                                }
                              });
}

/// context[b] = sum_j weights[j*B+b] * values[j*B+b].
template <class Real>
Var<Real> weighted_position_sum(const Var<Real>& weights, const Var<Real>& values, std::size_t batch) {
  detail::require_same_tape(weights, values);
  const std::size_t total = values.rows(), d = values.cols();
  if (weights.value().size() != total || batch == 0 || total % batch != 0)
    throw DimensionError("weighted_position_sum: weights " + shape_string(weights.shape()) +
                         " do not match values " + shape_string(values.shape()));
  const std::size_t m = total / batch;
  Tensor<Real> out(Shape{batch, d});
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t b = 0; b < batch; ++b) {
      const Real w = weights.value()[j * batch + b];
      if (w == Real(0)) continue;
      const Real* v = values.value().ptr() + (j * batch + b) * d;
      Real* o = out.ptr() + b * d;
      for (std::size_t c = 0; c < d; ++c) o[c] += w * v[c];
    }
  return weights.tape().record(
      std::move(out), detail::any_grad(weights, values),
      [wi = weights.id(), vi = values.id(), batch, m, d](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const bool gw = t.needs_grad(wi), gv = t.needs_grad(vi);
        for (std::size_t j = 0; j < m; ++j)
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t r = j * batch + b;
            const Real* grow = g.ptr() + b * d;
            if (gw) {
              const Real* v = t.value(vi).ptr() + r * d;
              Real acc = 0;
              for (std::size_t c = 0; c < d; ++c) acc += grow[c] * v[c];
              t.grad(wi)[r] += acc;
            }
            if (gv) {
              const Real w = t.value(wi)[r];
              Real* gvr = t.grad(vi).ptr() + r * d;
              for (std::size_t c = 0; c < d; ++c) gvr[c] += w * grow[c];
            }
          }
      });
}

/// Sum over rows with mask[r] set of -log softmax(logits[r])[targets[r]].
template <class Real>
Var<Real> softmax_nll(const Var<Real>& logits, const std::vector<int>& targets,
                      const std::vector<std::uint8_t>& mask) {
  const std::size_t rows = logits.rows(), v = logits.cols();
  if (targets.size() != rows || mask.size() != rows)
    throw DimensionError("softmax_nll: targets/mask do not match " + shape_string(logits.shape()));
  Tensor<Real> probs = logits.value();
  detail::softmax_rows_inplace(probs);
  Tensor<Real> logp = logits.value();
  detail::log_softmax_rows_inplace(logp);
  Real loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v)
      throw ArgumentError("softmax_nll: target " + std::to_string(targets[r]) + " outside vocabulary");
    loss -= logp[r * v + targets[r]];
  }
  return logits.tape().record(Tensor<Real>::scalar(loss), detail::any_grad(logits),
                              [li = logits.id(), probs = std::move(probs), targets, mask, rows, v](
                                  Tape<Real>& t, std::size_t self) {
                                const Real g = t.grad(self)[0];
                                auto& gl = t.grad(li);
                                for (std::size_t r = 0; r < rows; ++r) {
                                  if (!mask[r]) continue;
                                  for (std::size_t c = 0; c < v; ++c) gl[r * v + c] += g * probs[r * v + c];
                                  gl[r * v + targets[r]] -= g;
                                }
                              });
}

}  // namespace nmt
