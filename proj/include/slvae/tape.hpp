#pragma once

// Reverse-mode differentiation over whole matrices. A Tape is built fresh for
// each loss evaluation: leaves are pushed, ops append nodes that remember how
// to route their output gradient back to their inputs, and backward() walks
// the list once in reverse. Tapes are never shared between threads.

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "slvae/graph.hpp"
#include "slvae/matrix.hpp"

namespace slvae {

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Matrix& value() const;
  const Matrix& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
  double scalar() const { return value()[0]; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&)>;

  Var leaf(Matrix value, bool requires_grad = true) { return push(std::move(value), requires_grad, nullptr); }
  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }

  Var push(Matrix value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix{}, requires_grad, std::move(backward)});
    return Var(this, nodes_.size() - 1);
  }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulator of a node; valid only during backward().
  Matrix& grad_ref(std::size_t id) { return nodes_[id].grad; }

  /// Seeds d(root)/d(root) = 1 and propagates. The root must be 1x1.
  void backward(Var root) {
    const Matrix& rv = value(root.id());
    if (rv.rows() != 1 || rv.cols() != 1)
      throw std::invalid_argument("backward() needs a scalar root, got " + rv.shape_string());
    for (auto& n : nodes_)
      if (n.requires_grad) n.grad = Matrix(n.value.rows(), n.value.cols(), 0.0);
    if (!nodes_[root.id()].requires_grad) return;
    nodes_[root.id()].grad[0] = 1.0;
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.requires_grad && n.backward) n.backward(*this);
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline const Matrix& Var::grad() const { return tape_->grad(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

namespace ad {

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value()))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.value().shape_string() + " vs " +
                     b.value().shape_string());
}

}  // namespace detail

// Each op below builds its output, then registers a backward closure.

inline Var make(Tape& t, Matrix value, std::initializer_list<Var> inputs, Tape::Backward bw) {
  bool rg = false;
  for (const Var& v : inputs) rg = rg || v.requires_grad();
  return t.push(std::move(value), rg, rg ? std::move(bw) : nullptr);
}

/// a (n x k) * b (k x m)
inline Var matmul(Var a, Var b) {
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  if (A.cols() != B.rows()) throw ShapeError("matmul: " + A.shape_string() + " * " + B.shape_string());
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  Matrix out(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A(i, p);
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) out(i, j) += aip * B(p, j);
    }
  Tape& t = a.tape();
  const std::size_t ai = a.id(), bi = b.id();
  std::size_t oi = t.size();
  return make(t, std::move(out), {a, b}, [ai, bi, oi, n, k, m](Tape& tp) {
    const Matrix& G = tp.grad(oi);
    if (tp.requires_grad(ai)) {
      Matrix& GA = tp.grad_ref(ai);
      const Matrix& B = tp.value(bi);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < m; ++j) s += G(i, j) * B(p, j);
          GA(i, p) += s;
        }
    }
    if (tp.requires_grad(bi)) {
      Matrix& GB = tp.grad_ref(bi);
      const Matrix& A = tp.value(ai);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A(i, p);
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j) GB(p, j) += aip * G(i, j);
        }
    }
  });
}

/// Affine map applied to every row: x (n x in), w (out x in), b (1 x out) -> x w^T + b.
inline Var linear(Var x, Var w, Var b) {
  const Matrix& X = x.value();
  const Matrix& W = w.value();
  const Matrix& Bv = b.value();
  if (X.cols() != W.cols() || Bv.rows() != 1 || Bv.cols() != W.rows())
    throw ShapeError("linear: input " + X.shape_string() + ", weight " + W.shape_string() + ", bias " +
                     Bv.shape_string());
  const std::size_t n = X.rows(), in = X.cols(), out_dim = W.rows();
  Matrix out(n, out_dim);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = X.row_span(r).data();
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wo = W.row_span(o).data();
      double s = Bv[o];
      for (std::size_t i = 0; i < in; ++i) s += xr[i] * wo[i];
      out(r, o) = s;
    }
  }
  Tape& t = x.tape();
  const std::size_t xi = x.id(), wi = w.id(), bi = b.id(), oi = t.size();
  return make(t, std::move(out), {x, w, b}, [xi, wi, bi, oi, n, in, out_dim](Tape& tp) {
    const Matrix& G = tp.grad(oi);
    const Matrix& X = tp.value(xi);
    const Matrix& W = tp.value(wi);
    const bool gx = tp.requires_grad(xi), gw = tp.requires_grad(wi), gb = tp.requires_grad(bi);
    Matrix* GX = gx ? &tp.grad_ref(xi) : nullptr;
    Matrix* GW = gw ? &tp.grad_ref(wi) : nullptr;
    Matrix* GB = gb ? &tp.grad_ref(bi) : nullptr;
    for (std::size_t r = 0; r < n; ++r) {
      const double* xr = X.row_span(r).data();
      for (std::size_t o = 0; o < out_dim; ++o) {
        const double g = G(r, o);
        if (g == 0.0) continue;
        if (GB) (*GB)[o] += g;
        const double* wo = W.row_span(o).data();
        if (GX) {
          double* gxr = &(*GX)(r, 0);
          for (std::size_t i = 0; i < in; ++i) gxr[i] += g * wo[i];
        }
        if (GW) {
          double* gwo = &(*GW)(o, 0);
          for (std::size_t i = 0; i < in; ++i) gwo[i] += g * xr[i];
        }
      }
    }
  });
}

template <class F, class D>
Var elementwise(Var a, F f, D derivative) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  Tape& t = a.tape();
  const std::size_t ai = a.id(), oi = t.size();
  return make(t, std::move(out), {a}, [ai, oi, derivative](Tape& tp) {
    const Matrix& G = tp.grad(oi);
    const Matrix& X = tp.value(ai);
    const Matrix& Y = tp.value(oi);
    Matrix& GA = tp.grad_ref(ai);
    for (std::size_t i = 0; i < G.size(); ++i) GA[i] += G[i] * derivative(X[i], Y[i]);
  });
}

inline Var relu(Var a) {
  return elementwise(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// max(0, a), the positive part.
inline Var positive_part(Var a) { return relu(a); }

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  return elementwise(a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(Var a) {
  return elementwise(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  return elementwise(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var square(Var a) {
  return elementwise(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var scale(Var a, double c) {
  return elementwise(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(Var a, double c) {
  return elementwise(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

/// 1 - a
inline Var one_minus(Var a) {
  return elementwise(a, [](double x) { return 1.0 - x; }, [](double, double) { return -1.0; });
}

/// Clamps into [lo, hi]; the gradient is zero where the clamp is active.
inline Var clamp(Var a, double lo, double hi) {
  return elementwise(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

template <class F>
Var binary(Var a, Var b, const char* name, F f, std::function<void(double, double, double, double&, double&)> d) {
  detail::require_same_shape(a, b, name);
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  Matrix out(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) out[i] = f(A[i], B[i]);
  Tape& t = a.tape();
  const std::size_t ai = a.id(), bi = b.id(), oi = t.size();
  return make(t, std::move(out), {a, b}, [ai, bi, oi, d](Tape& tp) {
    const Matrix& G = tp.grad(oi);
    const Matrix& A = tp.value(ai);
    const Matrix& B = tp.value(bi);
    const bool ga = tp.requires_grad(ai), gb = tp.requires_grad(bi);
    Matrix* GA = ga ? &tp.grad_ref(ai) : nullptr;
    Matrix* GB = gb ? &tp.grad_ref(bi) : nullptr;
    for (std::size_t i = 0; i < G.size(); ++i) {
      double da = 0.0, db = 0.0;
      d(A[i], B[i], G[i], da, db);
      if (GA) (*GA)[i] += da;
      if (GB) (*GB)[i] += db;
    }
  });
}

inline Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

inline Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

inline Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

/// Sum of all entries, 1x1.
inline Var sum(Var a) {
  const Matrix& A = a.value();
  double s = 0.0;
  for (double v : A.data()) s += v;
  Tape& t = a.tape();
  const std::size_t ai = a.id(), oi = t.size();
  return make(t, Matrix::scalar(s), {a}, [ai, oi](Tape& tp) {
    const double g = tp.grad(oi)[0];
    for (double& v : tp.grad_ref(ai).data()) v += g;
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Sum of squares, 1x1.
inline Var squared_norm(Var a) {
  const Matrix& A = a.value();
  double s = 0.0;
  for (double v : A.data()) s += v * v;
  Tape& t = a.tape();
  const std::size_t ai = a.id(), oi = t.size();
  return make(t, Matrix::scalar(s), {a}, [ai, oi](Tape& tp) {
    const double g = tp.grad(oi)[0];
    const Matrix& A = tp.value(ai);
    Matrix& GA = tp.grad_ref(ai);
    for (std::size_t i = 0; i < A.size(); ++i) GA[i] += 2.0 * g * A[i];
  });
}

/// Row sums: (n x m) -> (n x 1).
inline Var row_sum(Var a) {
  const Matrix& A = a.value();
  Matrix out(A.rows(), 1);
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (double v : A.row_span(r)) out[r] += v;
  Tape& t = a.tape();
  const std::size_t ai = a.id(), oi = t.size();
  return make(t, std::move(out), {a}, [ai, oi](Tape& tp) {
    const Matrix& G = tp.grad(oi);
    Matrix& GA = tp.grad_ref(ai);
    for (std::size_t r = 0; r < GA.rows(); ++r)
      for (double& v : GA.row_span(r)) v += G[r];
  });
}

/// max(v) + log sum exp(v - max(v)) over all entries, 1x1.
inline Var log_sum_exp(Var a) {
  const Matrix& A = a.value();
  if (A.size() == 0) throw std::invalid_argument("log_sum_exp of an empty input");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : A.data()) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : A.data()) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  Tape& t = a.tape();
  const std::size_t ai = a.id(), oi = t.size();
  return make(t, Matrix::scalar(lse), {a}, [ai, oi](Tape& tp) {
    const double g = tp.grad(oi)[0];
    const double out = tp.value(oi)[0];
    const Matrix& A = tp.value(ai);
    Matrix& GA = tp.grad_ref(ai);
    for (std::size_t i = 0; i < A.size(); ++i) GA[i] += g * std::exp(A[i] - out);
  });
}

/// Columns [begin, end).
inline Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  const Matrix& A = a.value();
  if (begin > end || end > A.cols()) throw ShapeError("slice_cols out of range");
  const std::size_t w = end - begin;
  Matrix out(A.rows(), w);
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < w; ++c) out(r, c) = A(r, begin + c);
  Tape& t = a.tape();
  const std::size_t ai = a.id(), oi = t.size();
  return make(t, std::move(out), {a}, [ai, oi, begin, w](Tape& tp) {
    const Matrix& G = tp.grad(oi);
    Matrix& GA = tp.grad_ref(ai);
    for (std::size_t r = 0; r < G.rows(); ++r)
      for (std::size_t c = 0; c < w; ++c) GA(r, begin + c) += G(r, c);
  });
}

/// Same storage, new shape.
inline Var reshape(Var a, std::size_t rows, std::size_t cols) {
  const Matrix& A = a.value();
  if (rows * cols != A.size()) throw ShapeError("reshape: " + A.shape_string() + " cannot hold " +
                                                std::to_string(rows) + "x" + std::to_string(cols));
  Matrix out(rows, cols, A.data());
  Tape& t = a.tape();
  const std::size_t ai = a.id(), oi = t.size();
  return make(t, std::move(out), {a}, [ai, oi](Tape& tp) {
    const Matrix& G = tp.grad(oi);
    Matrix& GA = tp.grad_ref(ai);
    for (std::size_t i = 0; i < G.size(); ++i) GA[i] += G[i];
  });
}

/// Applies a sparse operator to every row: row r of the result is S * x_r.
inline Var propagate(Var x, const SparseMatrix& s) {
  const Matrix& X = x.value();
  if (X.cols() != s.cols) throw ShapeError("propagate: rows of width " + std::to_string(X.cols()) +
                                           " against operator of width " + std::to_string(s.cols));
  Matrix out(X.rows(), s.rows);
  for (std::size_t b = 0; b < X.rows(); ++b) s.multiply(X.row_span(b), out.row_span(b));
  Tape& t = x.tape();
  const std::size_t xi = x.id(), oi = t.size();
  const SparseMatrix* sp = &s;
  return make(t, std::move(out), {x}, [xi, oi, sp](Tape& tp) {
    const Matrix& G = tp.grad(oi);
    Matrix& GX = tp.grad_ref(xi);
    for (std::size_t b = 0; b < G.rows(); ++b)
      for (std::size_t r = 0; r < sp->rows; ++r) {
        const double g = G(b, r);
        if (g == 0.0) continue;
        for (std::size_t k = sp->row_ptr[r]; k < sp->row_ptr[r + 1]; ++k) GX(b, sp->col_idx[k]) += g * sp->values[k];
      }
  });
}

/// Given m matrices of shape (B x n), builds the (B*n x m) matrix whose row
/// b*n+i holds entry (b, i) of every input, one input per column.
inline Var interleave(const std::vector<Var>& columns) {
  if (columns.empty()) throw ShapeError("interleave of nothing");
  const std::size_t B = columns[0].rows(), n = columns[0].cols(), m = columns.size();
  for (const Var& c : columns)
    if (c.rows() != B || c.cols() != n) throw ShapeError("interleave: inconsistent input shapes");
  Matrix out(B * n, m);
  for (std::size_t c = 0; c < m; ++c) {
    const Matrix& C = columns[c].value();
    for (std::size_t i = 0; i < B * n; ++i) out(i, c) = C[i];
  }
  bool rg = false;
  std::vector<std::size_t> ids;
  for (const Var& c : columns) {
    rg = rg || c.requires_grad();
    ids.push_back(c.id());
  }
  Tape& t = columns[0].tape();
  const std::size_t oi = t.size();
  Tape::Backward bw;
  if (rg)
    bw = [ids, oi, m](Tape& tp) {
      const Matrix& G = tp.grad(oi);
      for (std::size_t c = 0; c < m; ++c) {
        if (!tp.requires_grad(ids[c])) continue;
        Matrix& GC = tp.grad_ref(ids[c]);
        for (std::size_t i = 0; i < GC.size(); ++i) GC[i] += G(i, c);
      }
    };
  return t.push(std::move(out), rg, std::move(bw));
}

/// Row r of the result is row index[r] of `a`.
inline Var gather_rows(Var a, std::vector<std::size_t> index) {
  const Matrix& A = a.value();
  Matrix out(index.size(), A.cols());
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= A.rows()) throw ShapeError("gather_rows: index out of range");
    auto src = A.row_span(index[r]);
    std::copy(src.begin(), src.end(), out.row_span(r).begin());
  }
  Tape& t = a.tape();
  const std::size_t ai = a.id(), oi = t.size();
  return make(t, std::move(out), {a}, [ai, oi, index = std::move(index)](Tape& tp) {
    const Matrix& G = tp.grad(oi);
    Matrix& GA = tp.grad_ref(ai);
    for (std::size_t r = 0; r < index.size(); ++r)
      for (std::size_t c = 0; c < G.cols(); ++c) GA(index[r], c) += G(r, c);
  });
}

/// Repeats a (1 x n) row B times -> (B x n).
inline Var repeat_rows(Var a, std::size_t times) {
  const Matrix& A = a.value();
  if (A.rows() != 1) throw ShapeError("repeat_rows expects a single row");
  Matrix out(times, A.cols());
  for (std::size_t r = 0; r < times; ++r) std::copy(A.data().begin(), A.data().end(), out.row_span(r).begin());
  Tape& t = a.tape();
  const std::size_t ai = a.id(), oi = t.size();
  return make(t, std::move(out), {a}, [ai, oi](Tape& tp) {
    const Matrix& G = tp.grad(oi);
    Matrix& GA = tp.grad_ref(ai);
    for (std::size_t r = 0; r < G.rows(); ++r)
      for (std::size_t c = 0; c < G.cols(); ++c) GA[c] += G(r, c);
  });
}

/// Bernoulli negative log-likelihood -sum[t log p + (1-t) log(1-p)], with p
/// clamped into [eps, 1-eps] first. Both target and p may carry gradients.
inline Var binary_cross_entropy(Var target, Var p, double eps = 1e-7) {
  Var pc = clamp(p, eps, 1.0 - eps);
  Var pos = mul(target, log(pc));
  Var neg = mul(one_minus(target), log(one_minus(pc)));
  return scale(sum(add(pos, neg)), -1.0);
}

/// One synchronous step of mean-field SI on every row:
///   out_i = 1 - (1 - y_i) * prod_{j in N(i)} (1 - beta * y_j).
/// For beta = 1 and binary rows this is exactly one step of deterministic SI.
inline Var mean_field_si_step(Var y, const Graph& g, double beta) {
  const Matrix& Y = y.value();
  const std::size_t n = g.num_nodes();
  if (Y.cols() != n) throw ShapeError("mean_field_si_step: width mismatch");
  Matrix out(Y.rows(), n);
  for (std::size_t b = 0; b < Y.rows(); ++b)
    for (std::size_t i = 0; i < n; ++i) {
      double prod = 1.0 - Y(b, i);
      for (NodeId j : g.neighbors(i)) prod *= 1.0 - beta * Y(b, j);
      out(b, i) = 1.0 - prod;
    }
  Tape& t = y.tape();
  const std::size_t yi = y.id(), oi = t.size();
  const Graph* gp = &g;
  return make(t, std::move(out), {y}, [yi, oi, gp, beta, n](Tape& tp) {
    const Matrix& G = tp.grad(oi);
    const Matrix& Y = tp.value(yi);
    Matrix& GY = tp.grad_ref(yi);
    std::vector<double> factors, prefix, suffix;
    for (std::size_t b = 0; b < Y.rows(); ++b)
      for (std::size_t i = 0; i < n; ++i) {
        const double g = G(b, i);
        if (g == 0.0) continue;
        auto nb = gp->neighbors(i);
        // factor 0 is (1 - y_i), the rest are (1 - beta y_j)
        factors.assign(1, 1.0 - Y(b, i));
        for (NodeId j : nb) factors.push_back(1.0 - beta * Y(b, j));
        const std::size_t m = factors.size();
        prefix.assign(m + 1, 1.0);
        suffix.assign(m + 1, 1.0);
        for (std::size_t k = 0; k < m; ++k) prefix[k + 1] = prefix[k] * factors[k];
        for (std::size_t k = m; k-- > 0;) suffix[k] = suffix[k + 1] * factors[k];
        // out = 1 - prod, so d out / d factor_k = -prod_{l != k} factor_l
        GY(b, i) += g * prefix[0] * suffix[1];  // d factor_0 / d y_i = -1
        for (std::size_t k = 1; k < m; ++k) GY(b, nb[k - 1]) += g * beta * prefix[k] * suffix[k + 1];
      }
  });
}

}  // namespace ad

}  // namespace slvae
