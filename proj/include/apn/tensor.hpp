#pragma once

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "apn/rng.hpp"

namespace apn {

// ---------------------------------------------------------------------------
// Tensor: dense array handle participating in a reverse-mode tape.
// Copying a Tensor copies the handle, not the storage.
// ---------------------------------------------------------------------------
template <class S>
struct Tensor {
  std::vector<int> shape;
  std::shared_ptr<std::vector<S>> data;
  std::shared_ptr<std::vector<S>> grad;  // allocated iff requires_grad
  bool requires_grad = false;

  Tensor() = default;

  std::size_t numel() const {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return shape.empty() ? (data ? data->size() : 0) : n;
  }
  bool defined() const { return static_cast<bool>(data); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[i < 0 ? shape.size() + i : i]; }

  // Constness is shallow: a Tensor is a handle onto shared storage.
  S* ptr() const { return data->data(); }
  S* gptr() const { return grad->data(); }
  S& at(std::size_t i) const { return (*data)[i]; }
  S item() const {
    if (numel() != 1) throw std::runtime_error("item: tensor is not scalar");
    return (*data)[0];
  }

  void ensure_grad() {
    if (!grad) grad = std::make_shared<std::vector<S>>(numel(), S(0));
  }
  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), S(0));
  }

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    Tensor t;
    t.shape = std::move(shape);
    t.data = std::make_shared<std::vector<S>>(t.numel(), S(0));
    t.requires_grad = requires_grad;
    if (requires_grad) t.ensure_grad();
    return t;
  }
  static Tensor full(std::vector<int> shape, S value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data->begin(), t.data->end(), value);
    return t;
  }
  static Tensor scalar(S value, bool requires_grad = false) {
    return full({1}, value, requires_grad);
  }
  static Tensor from_values(std::vector<int> shape, std::vector<S> values,
                            bool requires_grad = false) {
    Tensor t;
    t.shape = std::move(shape);
    if (values.size() != t.numel())
      throw std::runtime_error("from_values: value count does not match shape");
    t.data = std::make_shared<std::vector<S>>(std::move(values));
    t.requires_grad = requires_grad;
    if (requires_grad) t.ensure_grad();
    return t;
  }
  static Tensor randn(std::vector<int> shape, Rng& rng, S stddev = S(1),
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : *t.data) v = static_cast<S>(rng.normal()) * stddev;
    return t;
  }

  // Deep copy of values (grad buffer fresh-zero when requires_grad).
  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<S>>(*data);
    t.requires_grad = requires_grad;
    if (requires_grad) t.ensure_grad();
    return t;
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

[[noreturn]] inline void shape_error(const char* op, const std::vector<int>& a,
                                     const std::vector<int>& b) {
  throw std::runtime_error(std::string(op) + ": shape mismatch " + shape_str(a) +
                           " vs " + shape_str(b));
}

// ---------------------------------------------------------------------------
// Tape: ordered record of operations for one forward/backward cycle.
// Ops append in execution order, so the record is topologically sorted and
// the backward pass is a single reverse walk.
// ---------------------------------------------------------------------------
class Tape {
 public:
  std::vector<std::function<void()>> nodes;
  void clear() { nodes.clear(); }
  std::size_t size() const { return nodes.size(); }
};

inline Tape*& tape_slot() {
  thread_local Tape* t = nullptr;
  return t;
}
inline bool taping() { return tape_slot() != nullptr; }
inline void record(std::function<void()> fn) {
  if (Tape* t = tape_slot()) t->nodes.push_back(std::move(fn));
}

// RAII guard enabling recording onto a tape.
struct Recording {
  Tape* prev;
  explicit Recording(Tape& t) : prev(tape_slot()) { tape_slot() = &t; }
  ~Recording() { tape_slot() = prev; }
  Recording(const Recording&) = delete;
  Recording& operator=(const Recording&) = delete;
};

struct NoGrad {
  Tape* prev;
  NoGrad() : prev(tape_slot()) { tape_slot() = nullptr; }
  ~NoGrad() { tape_slot() = prev; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};

template <class S>
void backward(const Tensor<S>& loss, Tape& tape) {
  if (loss.numel() != 1)
    throw std::runtime_error("backward: loss must be a scalar");
  if (!loss.grad)
    throw std::runtime_error("backward: loss does not require grad");
  (*loss.grad)[0] += S(1);
  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) (*it)();
}

// ---------------------------------------------------------------------------
// BLAS glue.
// ---------------------------------------------------------------------------
inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta,
                 float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}
inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}

namespace detail {
template <class S>
bool want_grad(const Tensor<S>& t) {
  return taping() && t.requires_grad;
}
template <class S>
Tensor<S> make_out(std::vector<int> shape, bool rg) {
  Tensor<S> out = Tensor<S>::zeros(std::move(shape), false);
  out.requires_grad = rg;
  if (rg) out.ensure_grad();
  return out;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic.
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape != b.shape) shape_error("add", a.shape, b.shape);
  const std::size_t n = a.numel();
  bool rg = detail::want_grad(a) || detail::want_grad(b);
  Tensor<S> out = detail::make_out<S>(a.shape, rg);
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
  if (rg)
    record([a, b, out]() mutable {
      if (a.requires_grad)
        for (std::size_t i = 0; i < a.numel(); ++i) a.gptr()[i] += out.gptr()[i];
      if (b.requires_grad)
        for (std::size_t i = 0; i < b.numel(); ++i) b.gptr()[i] += out.gptr()[i];
    });
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape != b.shape) shape_error("sub", a.shape, b.shape);
  const std::size_t n = a.numel();
  bool rg = detail::want_grad(a) || detail::want_grad(b);
  Tensor<S> out = detail::make_out<S>(a.shape, rg);
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
  if (rg)
    record([a, b, out]() mutable {
      if (a.requires_grad)
        for (std::size_t i = 0; i < a.numel(); ++i) a.gptr()[i] += out.gptr()[i];
      if (b.requires_grad)
        for (std::size_t i = 0; i < b.numel(); ++i) b.gptr()[i] -= out.gptr()[i];
    });
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape != b.shape) shape_error("mul", a.shape, b.shape);
  const std::size_t n = a.numel();
  bool rg = detail::want_grad(a) || detail::want_grad(b);
  Tensor<S> out = detail::make_out<S>(a.shape, rg);
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
  if (rg)
    record([a, b, out]() mutable {
      if (a.requires_grad)
        for (std::size_t i = 0; i < a.numel(); ++i)
          a.gptr()[i] += out.gptr()[i] * b.at(i);
      if (b.requires_grad)
        for (std::size_t i = 0; i < b.numel(); ++i)
          b.gptr()[i] += out.gptr()[i] * a.at(i);
    });
  return out;
}

// a + b where b's shape matches a trailing slice of a's shape
// (e.g. (B,T,d)+(T,d) or (N,d)+(d)). Broadcast over leading groups.
template <class S>
Tensor<S> add_bc(const Tensor<S>& a, const Tensor<S>& b) {
  const std::size_t nb = b.numel();
  const std::size_t na = a.numel();
  if (nb == 0 || na % nb != 0) shape_error("add_bc", a.shape, b.shape);
  bool rg = detail::want_grad(a) || detail::want_grad(b);
  Tensor<S> out = detail::make_out<S>(a.shape, rg);
  const std::size_t groups = na / nb;
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t i = 0; i < nb; ++i)
      out.at(g * nb + i) = a.at(g * nb + i) + b.at(i);
  if (rg)
    record([a, b, out, groups, nb]() mutable {
      if (a.requires_grad)
        for (std::size_t i = 0; i < a.numel(); ++i) a.gptr()[i] += out.gptr()[i];
      if (b.requires_grad)
        for (std::size_t g = 0; g < groups; ++g)
          for (std::size_t i = 0; i < nb; ++i)
            b.gptr()[i] += out.gptr()[g * nb + i];
    });
  return out;
}

// a * b with the same trailing-broadcast rule as add_bc.
template <class S>
Tensor<S> mul_bc(const Tensor<S>& a, const Tensor<S>& b) {
  const std::size_t nb = b.numel();
  const std::size_t na = a.numel();
  if (nb == 0 || na % nb != 0) shape_error("mul_bc", a.shape, b.shape);
  bool rg = detail::want_grad(a) || detail::want_grad(b);
  Tensor<S> out = detail::make_out<S>(a.shape, rg);
  const std::size_t groups = na / nb;
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t i = 0; i < nb; ++i)
      out.at(g * nb + i) = a.at(g * nb + i) * b.at(i);
  if (rg)
    record([a, b, out, groups, nb]() mutable {
      if (a.requires_grad)
        for (std::size_t g = 0; g < groups; ++g)
          for (std::size_t i = 0; i < nb; ++i)
            a.gptr()[g * nb + i] += out.gptr()[g * nb + i] * b.at(i);
      if (b.requires_grad)
        for (std::size_t g = 0; g < groups; ++g)
          for (std::size_t i = 0; i < nb; ++i)
            b.gptr()[i] += out.gptr()[g * nb + i] * a.at(g * nb + i);
    });
  return out;
}

// Multiply each row of a (N, M) by the per-row scalar c (N, 1).
template <class S>
Tensor<S> mul_col(const Tensor<S>& a, const Tensor<S>& c) {
  if (a.ndim() != 2 || c.ndim() != 2 || c.dim(1) != 1 || a.dim(0) != c.dim(0))
    shape_error("mul_col", a.shape, c.shape);
  const int rows = a.dim(0), cols = a.dim(1);
  bool rg = detail::want_grad(a) || detail::want_grad(c);
  Tensor<S> out = detail::make_out<S>(a.shape, rg);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      out.at(i * cols + j) = a.at(i * cols + j) * c.at(i);
  if (rg)
    record([a, c, out, rows, cols]() mutable {
      for (int i = 0; i < rows; ++i) {
        S gc = S(0);
        for (int j = 0; j < cols; ++j) {
          const S g = out.gptr()[i * cols + j];
          if (a.requires_grad) a.gptr()[i * cols + j] += g * c.at(i);
          gc += g * a.at(i * cols + j);
        }
        if (c.requires_grad) c.gptr()[i] += gc;
      }
    });
  return out;
}

// Divide each row of a (N, M) by the per-row scalar c (N, 1).
template <class S>
Tensor<S> div_col(const Tensor<S>& a, const Tensor<S>& c) {
  if (a.ndim() != 2 || c.ndim() != 2 || c.dim(1) != 1 || a.dim(0) != c.dim(0))
    shape_error("div_col", a.shape, c.shape);
  const int rows = a.dim(0), cols = a.dim(1);
  bool rg = detail::want_grad(a) || detail::want_grad(c);
  Tensor<S> out = detail::make_out<S>(a.shape, rg);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      out.at(i * cols + j) = a.at(i * cols + j) / c.at(i);
  if (rg)
    record([a, c, out, rows, cols]() mutable {
      for (int i = 0; i < rows; ++i) {
        const S ci = c.at(i);
        S gc = S(0);
        for (int j = 0; j < cols; ++j) {
          const S g = out.gptr()[i * cols + j];
          if (a.requires_grad) a.gptr()[i * cols + j] += g / ci;
          gc -= g * a.at(i * cols + j) / (ci * ci);
        }
        if (c.requires_grad) c.gptr()[i] += gc;
      }
    });
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  bool rg = detail::want_grad(a);
  Tensor<S> out = detail::make_out<S>(a.shape, rg);
  for (std::size_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) * factor;
  if (rg)
    record([a, out, factor]() mutable {
      for (std::size_t i = 0; i < a.numel(); ++i)
        a.gptr()[i] += out.gptr()[i] * factor;
    });
  return out;
}

// x * s where s is a scalar tensor (possibly trainable).
template <class S>
Tensor<S> mul_scalar(const Tensor<S>& x, const Tensor<S>& s) {
  if (s.numel() != 1) shape_error("mul_scalar", x.shape, s.shape);
  bool rg = detail::want_grad(x) || detail::want_grad(s);
  Tensor<S> out = detail::make_out<S>(x.shape, rg);
  const S sv = s.at(0);
  for (std::size_t i = 0; i < x.numel(); ++i) out.at(i) = x.at(i) * sv;
  if (rg)
    record([x, s, out, sv]() mutable {
      if (x.requires_grad)
        for (std::size_t i = 0; i < x.numel(); ++i)
          x.gptr()[i] += out.gptr()[i] * sv;
      if (s.requires_grad) {
        S acc = S(0);
        for (std::size_t i = 0; i < x.numel(); ++i)
          acc += out.gptr()[i] * x.at(i);
        s.gptr()[0] += acc;
      }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation.
// ---------------------------------------------------------------------------

// View with a new shape over the same storage (grad buffer shared, so no
// tape node is needed).
template <class S>
Tensor<S> reshape(const Tensor<S>& x, std::vector<int> shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  if (n != x.numel()) shape_error("reshape", x.shape, shape);
  Tensor<S> out = x;
  out.shape = std::move(shape);
  return out;
}

// Slice [offset, offset+len) of the last dimension.
template <class S>
Tensor<S> slice_cols(const Tensor<S>& x, int offset, int len) {
  const int d = x.dim(-1);
  if (offset < 0 || len <= 0 || offset + len > d)
    throw std::runtime_error("slice_cols: invalid slice bounds");
  std::vector<int> out_shape = x.shape;
  out_shape.back() = len;
  bool rg = detail::want_grad(x);
  Tensor<S> out = detail::make_out<S>(out_shape, rg);
  const std::size_t outer = x.numel() / static_cast<std::size_t>(d);
  for (std::size_t o = 0; o < outer; ++o)
    for (int j = 0; j < len; ++j)
      out.at(o * len + j) = x.at(o * d + offset + j);
  if (rg)
    record([x, out, offset, len, d, outer]() mutable {
      for (std::size_t o = 0; o < outer; ++o)
        for (int j = 0; j < len; ++j)
          x.gptr()[o * d + offset + j] += out.gptr()[o * len + j];
    });
  return out;
}

// Concatenate along the last dimension.
template <class S>
Tensor<S> concat_cols(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != b.ndim()) shape_error("concat_cols", a.shape, b.shape);
  for (int i = 0; i + 1 < a.ndim(); ++i)
    if (a.shape[i] != b.shape[i]) shape_error("concat_cols", a.shape, b.shape);
  const int da = a.dim(-1), db = b.dim(-1);
  std::vector<int> out_shape = a.shape;
  out_shape.back() = da + db;
  bool rg = detail::want_grad(a) || detail::want_grad(b);
  Tensor<S> out = detail::make_out<S>(out_shape, rg);
  const std::size_t outer = a.numel() / static_cast<std::size_t>(da);
  for (std::size_t o = 0; o < outer; ++o) {
    for (int j = 0; j < da; ++j) out.at(o * (da + db) + j) = a.at(o * da + j);
    for (int j = 0; j < db; ++j)
      out.at(o * (da + db) + da + j) = b.at(o * db + j);
  }
  if (rg)
    record([a, b, out, da, db, outer]() mutable {
      for (std::size_t o = 0; o < outer; ++o) {
        if (a.requires_grad)
          for (int j = 0; j < da; ++j)
            a.gptr()[o * da + j] += out.gptr()[o * (da + db) + j];
        if (b.requires_grad)
          for (int j = 0; j < db; ++j)
            b.gptr()[o * db + j] += out.gptr()[o * (da + db) + da + j];
      }
    });
  return out;
}

// (A, B, C, D) -> (A, C, B, D). Its own inverse up to swapping B and C.
template <class S>
Tensor<S> permute_0213(const Tensor<S>& x) {
  if (x.ndim() != 4) throw std::runtime_error("permute_0213: expected 4-d tensor");
  const int A = x.dim(0), B = x.dim(1), C = x.dim(2), D = x.dim(3);
  bool rg = detail::want_grad(x);
  Tensor<S> out = detail::make_out<S>({A, C, B, D}, rg);
  for (int a = 0; a < A; ++a)
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const S* src = x.ptr() + (((a * B + b) * C + c) * D);
        S* dst = out.ptr() + (((a * C + c) * B + b) * D);
        std::copy(src, src + D, dst);
      }
  if (rg)
    record([x, out, A, B, C, D]() mutable {
      for (int a = 0; a < A; ++a)
        for (int b = 0; b < B; ++b)
          for (int c = 0; c < C; ++c) {
            const S* src = out.gptr() + (((a * C + c) * B + b) * D);
            S* dst = x.gptr() + (((a * B + b) * C + c) * D);
            for (int d = 0; d < D; ++d) dst[d] += src[d];
          }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products.
// ---------------------------------------------------------------------------

// a (..., m, k) @ w (k, n) -> (..., m, n); leading dims of a are flattened.
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& w) {
  if (w.ndim() != 2 || a.dim(-1) != w.dim(0)) shape_error("matmul", a.shape, w.shape);
  const int k = w.dim(0), n = w.dim(1);
  const int m = static_cast<int>(a.numel()) / k;
  std::vector<int> out_shape = a.shape;
  out_shape.back() = n;
  bool rg = detail::want_grad(a) || detail::want_grad(w);
  Tensor<S> out = detail::make_out<S>(out_shape, rg);
  gemm(false, false, m, n, k, S(1), a.ptr(), k, w.ptr(), n, S(0), out.ptr(), n);
  if (rg)
    record([a, w, out, m, n, k]() mutable {
      if (a.requires_grad)
        gemm(false, true, m, k, n, S(1), out.gptr(), n, w.ptr(), n, S(1),
             a.gptr(), k);
      if (w.requires_grad)
        gemm(true, false, k, n, m, S(1), a.ptr(), k, out.gptr(), n, S(1),
             w.gptr(), n);
    });
  return out;
}

// a (..., m, k) @ w^T where w is (n, k) -> (..., m, n).
template <class S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& w) {
  if (w.ndim() != 2 || a.dim(-1) != w.dim(1))
    shape_error("matmul_nt", a.shape, w.shape);
  const int k = w.dim(1), n = w.dim(0);
  const int m = static_cast<int>(a.numel()) / k;
  std::vector<int> out_shape = a.shape;
  out_shape.back() = n;
  bool rg = detail::want_grad(a) || detail::want_grad(w);
  Tensor<S> out = detail::make_out<S>(out_shape, rg);
  gemm(false, true, m, n, k, S(1), a.ptr(), k, w.ptr(), k, S(0), out.ptr(), n);
  if (rg)
    record([a, w, out, m, n, k]() mutable {
      if (a.requires_grad)
        gemm(false, false, m, k, n, S(1), out.gptr(), n, w.ptr(), k, S(1),
             a.gptr(), k);
      if (w.requires_grad)
        gemm(true, false, n, k, m, S(1), out.gptr(), n, a.ptr(), k, S(1),
             w.gptr(), k);
    });
  return out;
}

namespace detail {
template <class S>
void check_bmm(const char* op, const Tensor<S>& a, const Tensor<S>& b,
               int a_inner, int b_inner) {
  if (a.ndim() < 3 || a.ndim() != b.ndim()) shape_error(op, a.shape, b.shape);
  for (int i = 0; i + 2 < a.ndim(); ++i)
    if (a.shape[i] != b.shape[i]) shape_error(op, a.shape, b.shape);
  if (a_inner != b_inner) shape_error(op, a.shape, b.shape);
}
}  // namespace detail

// Batched a (..., m, k) @ b (..., k, n) -> (..., m, n).
template <class S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_bmm("bmm", a, b, a.dim(-1), b.dim(-2));
  const int m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  const int groups = static_cast<int>(a.numel()) / (m * k);
  std::vector<int> out_shape(a.shape.begin(), a.shape.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  bool rg = detail::want_grad(a) || detail::want_grad(b);
  Tensor<S> out = detail::make_out<S>(out_shape, rg);
  for (int g = 0; g < groups; ++g)
    gemm(false, false, m, n, k, S(1), a.ptr() + std::size_t(g) * m * k, k,
         b.ptr() + std::size_t(g) * k * n, n, S(0),
         out.ptr() + std::size_t(g) * m * n, n);
  if (rg)
    record([a, b, out, m, n, k, groups]() mutable {
      for (int g = 0; g < groups; ++g) {
        const S* go = out.gptr() + std::size_t(g) * m * n;
        if (a.requires_grad)
          gemm(false, true, m, k, n, S(1), go, n,
               b.ptr() + std::size_t(g) * k * n, n, S(1),
               a.gptr() + std::size_t(g) * m * k, k);
        if (b.requires_grad)
          gemm(true, false, k, n, m, S(1), a.ptr() + std::size_t(g) * m * k, k,
               go, n, S(1), b.gptr() + std::size_t(g) * k * n, n);
      }
    });
  return out;
}

// Batched a (..., m, k) @ b^T where b is (..., n, k) -> (..., m, n).
template <class S>
Tensor<S> bmm_nt(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_bmm("bmm_nt", a, b, a.dim(-1), b.dim(-1));
  const int m = a.dim(-2), k = a.dim(-1), n = b.dim(-2);
  const int groups = static_cast<int>(a.numel()) / (m * k);
  std::vector<int> out_shape(a.shape.begin(), a.shape.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  bool rg = detail::want_grad(a) || detail::want_grad(b);
  Tensor<S> out = detail::make_out<S>(out_shape, rg);
  for (int g = 0; g < groups; ++g)
    gemm(false, true, m, n, k, S(1), a.ptr() + std::size_t(g) * m * k, k,
         b.ptr() + std::size_t(g) * n * k, k, S(0),
         out.ptr() + std::size_t(g) * m * n, n);
  if (rg)
    record([a, b, out, m, n, k, groups]() mutable {
      for (int g = 0; g < groups; ++g) {
        const S* go = out.gptr() + std::size_t(g) * m * n;
        if (a.requires_grad)
          gemm(false, false, m, k, n, S(1), go, n,
               b.ptr() + std::size_t(g) * n * k, k, S(1),
               a.gptr() + std::size_t(g) * m * k, k);
        if (b.requires_grad)
          gemm(true, false, n, k, m, S(1), go, n,
               a.ptr() + std::size_t(g) * m * k, k, S(1),
               b.gptr() + std::size_t(g) * n * k, k);
      }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities.
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  bool rg = detail::want_grad(x);
  Tensor<S> out = detail::make_out<S>(x.shape, rg);
  for (std::size_t i = 0; i < x.numel(); ++i)
    out.at(i) = S(1) / (S(1) + std::exp(-x.at(i)));
  if (rg)
    record([x, out]() mutable {
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const S y = out.at(i);
        x.gptr()[i] += out.gptr()[i] * y * (S(1) - y);
      }
    });
  return out;
}

template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865476;
  constexpr double inv_sqrt2pi = 0.3989422804014327;
  bool rg = detail::want_grad(x);
  Tensor<S> out = detail::make_out<S>(x.shape, rg);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = static_cast<double>(x.at(i));
    out.at(i) = static_cast<S>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  if (rg)
    record([x, out]() mutable {
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const double v = static_cast<double>(x.at(i));
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        x.gptr()[i] += out.gptr()[i] * static_cast<S>(cdf + v * pdf);
      }
    });
  return out;
}

// log(x + eps), elementwise.
template <class S>
Tensor<S> log_shift(const Tensor<S>& x, S eps) {
  bool rg = detail::want_grad(x);
  Tensor<S> out = detail::make_out<S>(x.shape, rg);
  for (std::size_t i = 0; i < x.numel(); ++i)
    out.at(i) = std::log(x.at(i) + eps);
  if (rg)
    record([x, out, eps]() mutable {
      for (std::size_t i = 0; i < x.numel(); ++i)
        x.gptr()[i] += out.gptr()[i] / (x.at(i) + eps);
    });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization.
// ---------------------------------------------------------------------------

// Standard layer norm over the last dimension with affine gain/bias.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain,
                     const Tensor<S>& bias, S eps) {
  if (eps <= S(0)) throw std::runtime_error("layer_norm: eps must be > 0");
  const int d = x.dim(-1);
  if (gain.numel() != static_cast<std::size_t>(d) ||
      bias.numel() != static_cast<std::size_t>(d))
    shape_error("layer_norm", x.shape, gain.shape);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  bool rg = detail::want_grad(x) || detail::want_grad(gain) || detail::want_grad(bias);
  Tensor<S> out = detail::make_out<S>(x.shape, rg);
  // xhat and inv-std are saved for the backward pass.
  auto xhat = std::make_shared<std::vector<S>>(x.numel());
  auto istd = std::make_shared<std::vector<S>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const S* row = x.ptr() + r * d;
    S mu = S(0);
    for (int j = 0; j < d; ++j) mu += row[j];
    mu /= S(d);
    S var = S(0);
    for (int j = 0; j < d; ++j) {
      const S c = row[j] - mu;
      var += c * c;
    }
    var /= S(d);
    const S is = S(1) / std::sqrt(var + eps);
    (*istd)[r] = is;
    for (int j = 0; j < d; ++j) {
      const S h = (row[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out.at(r * d + j) = gain.at(j) * h + bias.at(j);
    }
  }
  if (rg)
    record([x, gain, bias, out, xhat, istd, rows, d]() mutable {
      for (std::size_t r = 0; r < rows; ++r) {
        const S* go = out.gptr() + r * d;
        const S* xh = xhat->data() + r * d;
        S sum_dh = S(0), sum_dh_xh = S(0);
        for (int j = 0; j < d; ++j) {
          const S dh = go[j] * gain.at(j);
          sum_dh += dh;
          sum_dh_xh += dh * xh[j];
        }
        if (x.requires_grad) {
          const S is = (*istd)[r];
          for (int j = 0; j < d; ++j) {
            const S dh = go[j] * gain.at(j);
            x.gptr()[r * d + j] +=
                is * (dh - sum_dh / S(d) - xh[j] * sum_dh_xh / S(d));
          }
        }
        if (gain.requires_grad)
          for (int j = 0; j < d; ++j) gain.gptr()[j] += go[j] * xh[j];
        if (bias.requires_grad)
          for (int j = 0; j < d; ++j) bias.gptr()[j] += go[j];
      }
    });
  return out;
}

// Rows scaled to unit L2 norm, with an eps floor on the norm.
template <class S>
Tensor<S> row_l2_normalize(const Tensor<S>& x, S eps) {
  const int d = x.dim(-1);
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  bool rg = detail::want_grad(x);
  Tensor<S> out = detail::make_out<S>(x.shape, rg);
  auto norms = std::make_shared<std::vector<S>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    S n2 = S(0);
    for (int j = 0; j < d; ++j) n2 += x.at(r * d + j) * x.at(r * d + j);
    const S n = std::max(std::sqrt(n2), eps);
    (*norms)[r] = n;
    for (int j = 0; j < d; ++j) out.at(r * d + j) = x.at(r * d + j) / n;
  }
  if (rg)
    record([x, out, norms, rows, d, eps]() mutable {
      for (std::size_t r = 0; r < rows; ++r) {
        const S n = (*norms)[r];
        const S* go = out.gptr() + r * d;
        const S* y = out.ptr() + r * d;
        if (n <= eps) {
          for (int j = 0; j < d; ++j) x.gptr()[r * d + j] += go[j] / eps;
          continue;
        }
        S dot = S(0);
        for (int j = 0; j < d; ++j) dot += go[j] * y[j];
        for (int j = 0; j < d; ++j)
          x.gptr()[r * d + j] += (go[j] - y[j] * dot) / n;
      }
    });
  return out;
}

// ---------------------------------------------------------------------------
// Attention softmax, dropout.
// ---------------------------------------------------------------------------

// Softmax over the last dim of (..., T, T) with a strict causal mask:
// row i attends to columns <= i; masked entries are exactly zero.
template <class S>
Tensor<S> causal_softmax(const Tensor<S>& att) {
  if (att.ndim() < 2 || att.dim(-1) != att.dim(-2))
    throw std::runtime_error("causal_softmax: expected (..., T, T)");
  const int t = att.dim(-1);
  const std::size_t groups = att.numel() / static_cast<std::size_t>(t * t);
  bool rg = detail::want_grad(att);
  Tensor<S> out = detail::make_out<S>(att.shape, rg);
  for (std::size_t g = 0; g < groups; ++g)
    for (int i = 0; i < t; ++i) {
      const S* row = att.ptr() + (g * t + i) * t;
      S* orow = out.ptr() + (g * t + i) * t;
      S m = row[0];
      for (int j = 1; j <= i; ++j) m = std::max(m, row[j]);
      S z = S(0);
      for (int j = 0; j <= i; ++j) {
        orow[j] = std::exp(row[j] - m);
        z += orow[j];
      }
      for (int j = 0; j <= i; ++j) orow[j] /= z;
    }
  if (rg)
    record([att, out, t, groups]() mutable {
      for (std::size_t g = 0; g < groups; ++g)
        for (int i = 0; i < t; ++i) {
          const S* y = out.ptr() + (g * t + i) * t;
          const S* go = out.gptr() + (g * t + i) * t;
          S dot = S(0);
          for (int j = 0; j <= i; ++j) dot += go[j] * y[j];
          for (int j = 0; j <= i; ++j)
            att.gptr()[(g * t + i) * t + j] += y[j] * (go[j] - dot);
        }
    });
  return out;
}

// Inverted dropout. Identity when not training or p == 0.
template <class S>
Tensor<S> dropout(const Tensor<S>& x, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw std::runtime_error("dropout: p must be < 1");
  bool rg = detail::want_grad(x);
  Tensor<S> out = detail::make_out<S>(x.shape, rg);
  auto mask = std::make_shared<std::vector<S>>(x.numel());
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const S m = rng.uniform() < p ? S(0) : keep_scale;
    (*mask)[i] = m;
    out.at(i) = x.at(i) * m;
  }
  if (rg)
    record([x, out, mask]() mutable {
      for (std::size_t i = 0; i < x.numel(); ++i)
        x.gptr()[i] += out.gptr()[i] * (*mask)[i];
    });
  return out;
}

// ---------------------------------------------------------------------------
// Gather / scatter.
// ---------------------------------------------------------------------------

// Row gather: table (V, d), ids (N) -> (N, d). Also the embedding lookup.
template <class S>
Tensor<S> gather_rows(const Tensor<S>& table, const std::vector<int>& ids) {
  const int d = table.dim(-1);
  const int v = static_cast<int>(table.numel()) / d;
  for (int id : ids)
    if (id < 0 || id >= v)
      throw std::runtime_error("gather_rows: index " + std::to_string(id) +
                               " out of range [0," + std::to_string(v) + ")");
  bool rg = detail::want_grad(table);
  Tensor<S> out = detail::make_out<S>({static_cast<int>(ids.size()), d}, rg);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(table.ptr() + std::size_t(ids[i]) * d,
              table.ptr() + std::size_t(ids[i]) * d + d, out.ptr() + i * d);
  if (rg)
    record([table, out, ids, d]() mutable {
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < d; ++j)
          table.gptr()[std::size_t(ids[i]) * d + j] += out.gptr()[i * d + j];
    });
  return out;
}

// Element gather from a 2-d tensor by flat indices -> (M, 1).
template <class S>
Tensor<S> gather_elems(const Tensor<S>& x, const std::vector<std::size_t>& idx) {
  for (std::size_t i : idx)
    if (i >= x.numel()) throw std::runtime_error("gather_elems: index out of range");
  bool rg = detail::want_grad(x);
  Tensor<S> out = detail::make_out<S>({static_cast<int>(idx.size()), 1}, rg);
  for (std::size_t i = 0; i < idx.size(); ++i) out.at(i) = x.at(idx[i]);
  if (rg)
    record([x, out, idx]() mutable {
      for (std::size_t i = 0; i < idx.size(); ++i)
        x.gptr()[idx[i]] += out.gptr()[i];
    });
  return out;
}

// Sum of row-indexed contributions into an (n_rows, d) output.
// Each contribution scatters its rows at the given destination indices.
template <class S>
struct ScatterPiece {
  Tensor<S> values;             // (M_i, d)
  std::vector<int> dest_rows;   // M_i destination row indices
};

template <class S>
Tensor<S> scatter_add_rows(int n_rows, int d,
                           const std::vector<ScatterPiece<S>>& pieces) {
  bool rg = false;
  for (const auto& p : pieces) {
    if (p.values.dim(-1) != d ||
        p.values.numel() != p.dest_rows.size() * static_cast<std::size_t>(d))
      throw std::runtime_error("scatter_add_rows: piece shape mismatch");
    for (int r : p.dest_rows)
      if (r < 0 || r >= n_rows)
        throw std::runtime_error("scatter_add_rows: destination row out of range");
    rg = rg || detail::want_grad(p.values);
  }
  Tensor<S> out = detail::make_out<S>({n_rows, d}, rg);
  for (const auto& p : pieces)
    for (std::size_t i = 0; i < p.dest_rows.size(); ++i)
      for (int j = 0; j < d; ++j)
        out.at(std::size_t(p.dest_rows[i]) * d + j) += p.values.at(i * d + j);
  if (rg)
    record([out, pieces, d]() mutable {
      for (auto& p : pieces)
        if (p.values.requires_grad)
          for (std::size_t i = 0; i < p.dest_rows.size(); ++i)
            for (int j = 0; j < d; ++j)
              p.values.gptr()[i * d + j] +=
                  out.gptr()[std::size_t(p.dest_rows[i]) * d + j];
    });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------
template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  bool rg = detail::want_grad(x);
  Tensor<S> out = detail::make_out<S>({1}, rg);
  S acc = S(0);
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x.at(i);
  out.at(0) = acc;
  if (rg)
    record([x, out]() mutable {
      const S g = out.gptr()[0];
      for (std::size_t i = 0; i < x.numel(); ++i) x.gptr()[i] += g;
    });
  return out;
}

template <class S>
Tensor<S> mean(const Tensor<S>& x) {
  return scale(sum(x), S(1) / static_cast<S>(x.numel()));
}

// Row sums of (N, M) -> (N, 1).
template <class S>
Tensor<S> row_sum(const Tensor<S>& x) {
  if (x.ndim() != 2) throw std::runtime_error("row_sum: expected 2-d tensor");
  const int rows = x.dim(0), cols = x.dim(1);
  bool rg = detail::want_grad(x);
  Tensor<S> out = detail::make_out<S>({rows, 1}, rg);
  for (int i = 0; i < rows; ++i) {
    S acc = S(0);
    for (int j = 0; j < cols; ++j) acc += x.at(std::size_t(i) * cols + j);
    out.at(i) = acc;
  }
  if (rg)
    record([x, out, rows, cols]() mutable {
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
          x.gptr()[std::size_t(i) * cols + j] += out.gptr()[i];
    });
  return out;
}

// ---------------------------------------------------------------------------
// Top-k restricted softmax and cross entropy.
// ---------------------------------------------------------------------------

// Indices of the k largest entries per row, ties broken by lowest index.
inline std::vector<int> topk_indices_row(const double* row, int n, int k) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                    [row](int a, int b) {
                      if (row[a] != row[b]) return row[a] > row[b];
                      return a < b;
                    });
  idx.resize(k);
  return idx;
}

template <class S>
struct TopKResult {
  std::vector<int> indices;  // (N * k), row-major
  Tensor<S> weights;         // (N, k), softmax over the selected scores
};

// Per-row top-k selection followed by softmax over the selected scores only.
// No gradient flows through the discrete selection.
template <class S>
TopKResult<S> softmax_topk(const Tensor<S>& scores, int k) {
  if (scores.ndim() != 2) throw std::runtime_error("softmax_topk: expected 2-d scores");
  const int n = scores.dim(0), kk = scores.dim(1);
  if (k < 1 || k > kk)
    throw std::runtime_error("softmax_topk: k=" + std::to_string(k) +
                             " out of range [1," + std::to_string(kk) + "]");
  TopKResult<S> res;
  res.indices.resize(std::size_t(n) * k);
  bool rg = detail::want_grad(scores);
  res.weights = detail::make_out<S>({n, k}, rg);
  std::vector<double> row(kk);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < kk; ++j) row[j] = static_cast<double>(scores.at(std::size_t(i) * kk + j));
    std::vector<int> sel = topk_indices_row(row.data(), kk, k);
    double m = row[sel[0]];
    double z = 0.0;
    std::vector<double> e(k);
    for (int j = 0; j < k; ++j) {
      e[j] = std::exp(row[sel[j]] - m);
      z += e[j];
    }
    for (int j = 0; j < k; ++j) {
      res.indices[std::size_t(i) * k + j] = sel[j];
      res.weights.at(std::size_t(i) * k + j) = static_cast<S>(e[j] / z);
    }
  }
  if (rg) {
    auto indices = res.indices;
    auto weights = res.weights;
    record([scores, weights, indices, n, k, kk]() mutable {
      for (int i = 0; i < n; ++i) {
        const S* w = weights.ptr() + std::size_t(i) * k;
        const S* gw = weights.gptr() + std::size_t(i) * k;
        S dot = S(0);
        for (int j = 0; j < k; ++j) dot += gw[j] * w[j];
        for (int j = 0; j < k; ++j)
          scores.gptr()[std::size_t(i) * kk + indices[std::size_t(i) * k + j]] +=
              w[j] * (gw[j] - dot);
      }
    });
  }
  return res;
}

// Mean next-token cross entropy, stabilized by max subtraction.
// per_token, when non-null, receives the per-position losses (no grad path).
template <class S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets,
                        std::vector<S>* per_token = nullptr) {
  if (logits.ndim() != 2) throw std::runtime_error("cross_entropy: expected (tokens, vocab)");
  const int n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != n)
    throw std::runtime_error("cross_entropy: target count mismatch");
  for (int t : targets)
    if (t < 0 || t >= v)
      throw std::runtime_error("cross_entropy: target " + std::to_string(t) +
                               " out of vocab [0," + std::to_string(v) + ")");
  bool rg = detail::want_grad(logits);
  Tensor<S> out = detail::make_out<S>({1}, rg);
  if (per_token) per_token->resize(n);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const S* row = logits.ptr() + std::size_t(i) * v;
    S m = row[0];
    for (int j = 1; j < v; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (int j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j] - m));
    const double li = std::log(z) + static_cast<double>(m) - static_cast<double>(row[targets[i]]);
    if (per_token) (*per_token)[i] = static_cast<S>(li);
    total += li;
  }
  out.at(0) = static_cast<S>(total / n);
  if (rg)
    record([logits, out, targets, n, v]() mutable {
      const S g = out.gptr()[0] / static_cast<S>(n);
      for (int i = 0; i < n; ++i) {
        const S* row = logits.ptr() + std::size_t(i) * v;
        S* grow = logits.gptr() + std::size_t(i) * v;
        S m = row[0];
        for (int j = 1; j < v; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (int j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j] - m));
        for (int j = 0; j < v; ++j) {
          const S p = static_cast<S>(std::exp(static_cast<double>(row[j] - m)) / z);
          grow[j] += g * (p - (j == targets[i] ? S(1) : S(0)));
        }
      }
    });
  return out;
}

}  // namespace apn
