// SPDX-License-Identifier: Apache-2.0
//
// Differentiable elementwise, reduction, shape and matrix primitives.
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "textfuse/tensor.hpp"

namespace textfuse {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

// Index maps realising right-aligned broadcasting where each operand dim is
// either equal to the output dim or 1.
struct BroadcastPlan {
  Shape out;
  enum class Kind { same, a_scalar, b_scalar, a_block, b_block, general } kind = Kind::same;
  // Block kinds: the smaller operand is indexed by (i / inner) % mid.
  std::size_t mid = 1, inner = 1;
  std::vector<std::uint32_t> ia, ib;
  std::size_t small_index(std::size_t i) const { return (i / inner) % mid; }
};

// Detects a small operand whose non-unit dims form one contiguous run equal
// to the output's, so its index is a pure function of position.
inline bool block_broadcast(const Shape& full, const Shape& small_padded, std::size_t& mid, std::size_t& inner) {
  const std::size_t r = full.size();
  std::size_t l = r, h = 0;
  for (std::size_t i = 0; i < r; ++i)
    if (small_padded[i] != 1) {
      if (small_padded[i] != full[i]) return false;
      l = std::min(l, i);
      h = i + 1;
    }
  if (l >= h) return false;
  for (std::size_t i = l; i < h; ++i)
    if (small_padded[i] != full[i]) return false;
  mid = 1;
  inner = 1;
  for (std::size_t i = l; i < h; ++i) mid *= full[i];
  for (std::size_t i = h; i < r; ++i) inner *= full[i];
  return true;
}

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  const std::size_t na = shape_numel(a), nb = shape_numel(b);
  if (a == b) {
    plan.out = a;
    return plan;
  }
  if (nb == 1 && b.size() <= a.size()) {
    plan.out = a;
    plan.kind = BroadcastPlan::Kind::b_scalar;
    return plan;
  }
  if (na == 1 && a.size() <= b.size()) {
    plan.out = b;
    plan.kind = BroadcastPlan::Kind::a_scalar;
    return plan;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape da(r, 1), db(r, 1);
  std::copy(a.begin(), a.end(), da.begin() + (r - a.size()));
  std::copy(b.begin(), b.end(), db.begin() + (r - b.size()));
  plan.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (da[i] != db[i] && da[i] != 1 && db[i] != 1)
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    plan.out[i] = std::max(da[i], db[i]);
  }
  if (da == plan.out && block_broadcast(plan.out, db, plan.mid, plan.inner)) {
    plan.kind = BroadcastPlan::Kind::b_block;
    return plan;
  }
  if (db == plan.out && block_broadcast(plan.out, da, plan.mid, plan.inner)) {
    plan.kind = BroadcastPlan::Kind::a_block;
    return plan;
  }
  std::vector<std::size_t> sa(r), sb(r);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t i = r; i-- > 0;) {
    sa[i] = da[i] == 1 ? 0 : acc_a;
    sb[i] = db[i] == 1 ? 0 : acc_b;
    acc_a *= da[i];
    acc_b *= db[i];
  }
  const std::size_t n = shape_numel(plan.out);
  plan.kind = BroadcastPlan::Kind::general;
  plan.ia.resize(n);
  plan.ib.resize(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t k = 0; k < n; ++k) {
    plan.ia[k] = static_cast<std::uint32_t>(oa);
    plan.ib[k] = static_cast<std::uint32_t>(ob);
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < plan.out[d]) {
        oa += sa[d];
        ob += sb[d];
        break;
      }
      oa -= sa[d] * (idx[d] - 1);
      ob -= sb[d] * (idx[d] - 1);
      idx[d] = 0;
    }
  }
  return plan;
}

template <class T, class F, class DA, class DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, F f, DA da, DB db) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape()));
  const std::size_t n = shape_numel(plan->out);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  std::vector<T> out(n);
  using K = BroadcastPlan::Kind;
  switch (plan->kind) {
    case K::same:
      for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[i], pb[i]);
      break;
    case K::b_scalar:
      for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[i], pb[0]);
      break;
    case K::a_scalar:
      for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[0], pb[i]);
      break;
    case K::b_block:
      for (std::size_t i = 0; i < n;)
        for (std::size_t m = 0; m < plan->mid; ++m)
          for (std::size_t k = 0; k < plan->inner; ++k, ++i) out[i] = f(pa[i], pb[m]);
      break;
    case K::a_block:
      for (std::size_t i = 0; i < n;)
        for (std::size_t m = 0; m < plan->mid; ++m)
          for (std::size_t k = 0; k < plan->inner; ++k, ++i) out[i] = f(pa[m], pb[i]);
      break;
    case K::general:
      for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[plan->ia[i]], pb[plan->ib[i]]);
      break;
  }
  return make_result<T>(plan->out, std::move(out), name, {&a, &b}, [plan, da, db](Node<T>& self) {
    Node<T>& A = *self.parents[0];
    Node<T>& B = *self.parents[1];
    const T* g = self.grad.data();
    const T* y = self.data.data();
    const T* x0 = A.data.data();
    const T* x1 = B.data.data();
    const std::size_t n = self.data.size();
    auto ia = [&](std::size_t i) -> std::size_t {
      switch (plan->kind) {
        case K::same:
        case K::b_scalar:
        case K::b_block: return i;
        case K::a_scalar: return 0;
        case K::a_block: return plan->small_index(i);
        default: return plan->ia[i];
      }
    };
    auto ib = [&](std::size_t i) -> std::size_t {
      switch (plan->kind) {
        case K::same:
        case K::a_scalar:
        case K::a_block: return i;
        case K::b_scalar: return 0;
        case K::b_block: return plan->small_index(i);
        default: return plan->ib[i];
      }
    };
    if (plan->kind == K::b_block || plan->kind == K::a_block) {
      // Block kinds: walk (outer, mid, inner) directly instead of dividing.
      const bool bsmall = plan->kind == K::b_block;
      T* ga = A.requires_grad ? A.grad_buffer() : nullptr;
      T* gb = B.requires_grad ? B.grad_buffer() : nullptr;
      for (std::size_t i = 0; i < n;)
        for (std::size_t m = 0; m < plan->mid; ++m) {
          T acc = T(0);
          for (std::size_t k = 0; k < plan->inner; ++k, ++i) {
            const std::size_t j = bsmall ? i : m, q = bsmall ? m : i;
            if (ga) {
              const T d = g[i] * da(x0[j], x1[q], y[i]);
              if (bsmall) ga[j] += d; else acc += d;
            }
            if (gb) {
              const T d = g[i] * db(x0[j], x1[q], y[i]);
              if (bsmall) acc += d; else gb[q] += d;
            }
          }
          if (bsmall) {
            if (gb) gb[m] += acc;
          } else if (ga) {
            ga[m] += acc;
          }
        }
      return;
    }
    if (A.requires_grad) {
      T* ga = A.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = ia(i), k = ib(i);
        ga[j] += g[i] * da(x0[j], x1[k], y[i]);
      }
    }
    if (B.requires_grad) {
      T* gb = B.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = ia(i), k = ib(i);
        gb[k] += g[i] * db(x0[j], x1[k], y[i]);
      }
    }
  });
}

template <class T, class F, class DF>
Tensor<T> unary_op(const Tensor<T>& x, const char* name, F f, DF df) {
  const std::size_t n = x.numel();
  const T* px = x.data().data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(px[i]);
  return make_result<T>(x.shape(), std::move(out), name, {&x}, [df](Node<T>& self) {
    Node<T>& X = *self.parents[0];
    T* __restrict gx = X.grad_buffer();
    const T* __restrict g = self.grad.data();
    const T* __restrict xv = X.data.data();
    const T* __restrict yv = self.data.data();
    const std::size_t n = self.data.size();
    for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * df(xv[i], yv[i]);
  });
}

inline std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace detail

// ---- elementwise ---------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, "add", [](T x, T y) { return x + y; },
                           [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, "sub", [](T x, T y) { return x - y; },
                           [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, "mul", [](T x, T y) { return x * y; },
                           [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, "div", [](T x, T y) { return x / y; },
                           [](T, T y, T) { return T(1) / y; },
                           [](T x, T y, T) { return -x / (y * y); });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary_op(x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}
template <class T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
  return detail::unary_op(x, "mul_scalar", [c](T v) { return v * c; }, [c](T, T) { return c; });
}
// c - x
template <class T>
Tensor<T> rsub_scalar(T c, const Tensor<T>& x) {
  return detail::unary_op(x, "rsub_scalar", [c](T v) { return c - v; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <class T>
Tensor<T> operator+(const Tensor<T>& a, T c) { return add_scalar(a, c); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, T c) { return mul_scalar(a, c); }
template <class T>
Tensor<T> operator*(T c, const Tensor<T>& a) { return mul_scalar(a, c); }
template <class T>
Tensor<T> operator-(T c, const Tensor<T>& a) { return rsub_scalar(c, a); }

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary_op(x, "relu", [](T v) { return v > T(0) ? v : T(0); },
                          [](T v, T) { return static_cast<T>(v > T(0)); });
}
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op(
      x, "sigmoid",
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}
template <class T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary_op(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}
template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary_op(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}
template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return detail::unary_op(x, "sqrt", [](T v) { return std::sqrt(v); },
                          [](T, T y) { return T(0.5) / y; });
}
template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary_op(x, "abs", [](T v) { return std::abs(v); },
                          [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}
template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary_op(x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}
// Huber with unit threshold.
template <class T>
Tensor<T> smooth_l1(const Tensor<T>& x) {
  return detail::unary_op(
      x, "smooth_l1",
      [](T v) {
        const T a = std::abs(v);
        return a < T(1) ? T(0.5) * v * v : a - T(0.5);
      },
      [](T v, T) {
        if (v >= T(1)) return T(1);
        if (v <= T(-1)) return T(-1);
        return v;
      });
}

// Elementwise binary cross-entropy on logits against constant targets in [0,1].
template <class T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const std::vector<T>& targets) {
  if (targets.size() != logits.numel())
    throw DimensionError("bce_with_logits: target count mismatch");
  const std::size_t n = logits.numel();
  std::vector<T> out(n);
  const T* x = logits.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x[i];
    out[i] = std::max(v, T(0)) - v * targets[i] + std::log1p(std::exp(-std::abs(v)));
  }
  return make_result<T>(logits.shape(), std::move(out), "bce_with_logits", {&logits},
                        [targets](Node<T>& self) {
                          Node<T>& X = *self.parents[0];
                          T* gx = X.grad_buffer();
                          for (std::size_t i = 0; i < self.data.size(); ++i) {
                            const T v = X.data[i];
                            const T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                                                  : std::exp(v) / (T(1) + std::exp(v));
                            gx[i] += self.grad[i] * (s - targets[i]);
                          }
                        });
}

// ---- reductions ----------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v;
  return make_result<T>({1}, {s}, "sum", {&x}, [](Node<T>& self) {
    Node<T>& X = *self.parents[0];
    T* gx = X.grad_buffer();
    const T g = self.grad[0];
    for (std::size_t i = 0; i < X.data.size(); ++i) gx[i] += g;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v;
  const T inv = T(1) / static_cast<T>(x.numel());
  return make_result<T>({1}, {s * inv}, "mean", {&x}, [inv](Node<T>& self) {
    Node<T>& X = *self.parents[0];
    T* gx = X.grad_buffer();
    const T g = self.grad[0] * inv;
    for (std::size_t i = 0; i < X.data.size(); ++i) gx[i] += g;
  });
}

// Maximum over the last axis; gradient routes to the first maximal entry.
template <class T>
Tensor<T> max_last(const Tensor<T>& x) {
  const std::size_t d = detail::last_dim(x.shape());
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(rows);
  auto arg = std::make_shared<std::vector<std::size_t>>(rows);
  const T* p = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (p[r * d + j] > p[r * d + best]) best = j;
    (*arg)[r] = r * d + best;
    out[r] = p[r * d + best];
  }
  Shape s(x.shape().begin(), x.shape().end() - 1);
  if (s.empty()) s = {1};
  return make_result<T>(s, std::move(out), "max_last", {&x}, [arg](Node<T>& self) {
    T* gx = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < self.data.size(); ++r) gx[(*arg)[r]] += self.grad[r];
  });
}

// ---- normalisation -------------------------------------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t d = detail::last_dim(x.shape());
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  const T* p = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = p + r * d;
    T* o = out.data() + r * d;
    T m = row[0];
    for (std::size_t j = 1; j < d; ++j) m = std::max(m, row[j]);
    T s = T(0);
    for (std::size_t j = 0; j < d; ++j) s += (o[j] = std::exp(row[j] - m));
    const T inv = T(1) / s;
    for (std::size_t j = 0; j < d; ++j) o[j] *= inv;
  }
  return make_result<T>(x.shape(), std::move(out), "softmax", {&x}, [d, rows](Node<T>& self) {
    T* gx = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.data.data() + r * d;
      const T* g = self.grad.data() + r * d;
      T dot = T(0);
      for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += y[j] * (g[j] - dot);
    }
  });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  const std::size_t d = detail::last_dim(x.shape());
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  const T* p = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = p + r * d;
    T m = row[0];
    for (std::size_t j = 1; j < d; ++j) m = std::max(m, row[j]);
    T s = T(0);
    for (std::size_t j = 0; j < d; ++j) s += std::exp(row[j] - m);
    const T lse = m + std::log(s);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = row[j] - lse;
  }
  return make_result<T>(x.shape(), std::move(out), "log_softmax", {&x}, [d, rows](Node<T>& self) {
    T* gx = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.data.data() + r * d;
      const T* g = self.grad.data() + r * d;
      T gs = T(0);
      for (std::size_t j = 0; j < d; ++j) gs += g[j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[j] - std::exp(y[j]) * gs;
    }
  });
}

// Zero-mean, unit-variance normalisation over the last axis (no affine).
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps = T(1e-5)) {
  const std::size_t d = detail::last_dim(x.shape());
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  const T* p = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = p + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (row[j] - mu) * is;
  }
  return make_result<T>(x.shape(), std::move(out), "layer_norm", {&x},
                        [d, rows, inv_std](Node<T>& self) {
                          T* gx = self.parents[0]->grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* y = self.data.data() + r * d;
                            const T* g = self.grad.data() + r * d;
                            T mg = T(0), mgy = T(0);
                            for (std::size_t j = 0; j < d; ++j) {
                              mg += g[j];
                              mgy += g[j] * y[j];
                            }
                            mg /= static_cast<T>(d);
                            mgy /= static_cast<T>(d);
                            const T is = (*inv_std)[r];
                            for (std::size_t j = 0; j < d; ++j)
                              gx[r * d + j] += is * (g[j] - mg - y[j] * mgy);
                          }
                        });
}

// ---- shape ---------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return make_result<T>(std::move(shape), x.values(), "reshape", {&x}, [](Node<T>& self) {
    T* gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.data.size(); ++i) gx[i] += self.grad[i];
  });
}

// Swaps the last two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("transpose needs rank >= 2");
  const std::size_t m = x.shape()[x.rank() - 2], n = x.shape()[x.rank() - 1];
  const std::size_t batch = x.numel() / (m * n);
  Shape s = x.shape();
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  std::vector<T> out(x.numel());
  const T* p = x.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = p[b * m * n + i * n + j];
  return make_result<T>(std::move(s), std::move(out), "transpose", {&x}, [batch, m, n](Node<T>& self) {
    T* gx = self.parents[0]->grad_buffer();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[b * m * n + i * n + j] += self.grad[b * m * n + j * m + i];
  });
}

namespace detail {
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw DimensionError("concat axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.shape()[i] != ref[i])
        throw DimensionError("concat shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(ref));
    out_shape[axis] += p.shape()[axis];
  }
  std::size_t outer, inner;
  detail::split_axis(ref, axis, outer, inner);
  const std::size_t total = out_shape[axis];
  std::vector<T> out(shape_numel(out_shape));
  auto widths = std::make_shared<std::vector<std::size_t>>();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis];
    widths->push_back(w);
    const T* src = p.data().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src + o * w * inner, w * inner, out.data() + (o * total + offset) * inner);
    offset += w;
  }
  return make_result<T>(std::move(out_shape), std::move(out), "concat", parts,
                        [widths, outer, inner, total](Node<T>& self) {
                          std::size_t offset = 0;
                          for (std::size_t k = 0; k < self.parents.size(); ++k) {
                            Node<T>& P = *self.parents[k];
                            const std::size_t w = (*widths)[k];
                            if (P.requires_grad) {
                              T* gp = P.grad_buffer();
                              for (std::size_t o = 0; o < outer; ++o) {
                                const T* g = self.grad.data() + (o * total + offset) * inner;
                                T* dst = gp + o * w * inner;
                                for (std::size_t i = 0; i < w * inner; ++i) dst[i] += g[i];
                              }
                            }
                            offset += w;
                          }
                        });
}

// x[..., start:start+len, ...] along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= x.rank() || len == 0 || start + len > x.shape()[axis])
    throw DimensionError("slice out of range on " + shape_str(x.shape()));
  std::size_t outer, inner;
  detail::split_axis(x.shape(), axis, outer, inner);
  const std::size_t full = x.shape()[axis];
  Shape s = x.shape();
  s[axis] = len;
  std::vector<T> out(shape_numel(s));
  const T* p = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(p + (o * full + start) * inner, len * inner, out.data() + o * len * inner);
  return make_result<T>(std::move(s), std::move(out), "slice", {&x},
                        [outer, inner, full, start, len](Node<T>& self) {
                          T* gx = self.parents[0]->grad_buffer();
                          for (std::size_t o = 0; o < outer; ++o) {
                            const T* g = self.grad.data() + o * len * inner;
                            T* dst = gx + (o * full + start) * inner;
                            for (std::size_t i = 0; i < len * inner; ++i) dst[i] += g[i];
                          }
                        });
}

// ---- matrix product ------------------------------------------------------

// [M,K]x[K,N], [B,M,K]x[B,K,N] or [B,M,K]x[K,N].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sa.size() > 3 || sb.size() < 2 || sb.size() > 3 || sb.size() > sa.size())
    throw DimensionError("matmul unsupported ranks " + shape_str(sa) + " x " + shape_str(sb));
  const std::size_t batch = sa.size() == 3 ? sa[0] : 1;
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t kb = sb[sb.size() - 2], n = sb.back();
  if (k != kb) throw DimensionError("matmul inner mismatch " + shape_str(sa) + " x " + shape_str(sb));
  const bool b_batched = sb.size() == 3;
  if (b_batched && sb[0] != batch) throw DimensionError("matmul batch mismatch");
  Shape s = sa.size() == 3 ? Shape{batch, m, n} : Shape{m, n};
  std::vector<T> out(batch * m * n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  if (!b_batched && batch > 1) {
    MatMap<T>(out.data(), batch * m, n).noalias() =
        ConstMatMap<T>(pa, batch * m, k) * ConstMatMap<T>(pb, k, n);
  } else {
    for (std::size_t i = 0; i < batch; ++i)
      MatMap<T>(out.data() + i * m * n, m, n).noalias() =
          ConstMatMap<T>(pa + i * m * k, m, k) *
          ConstMatMap<T>(pb + (b_batched ? i * k * n : 0), k, n);
  }
  return make_result<T>(std::move(s), std::move(out), "matmul", {&a, &b},
                        [batch, m, k, n, b_batched](Node<T>& self) {
                          Node<T>& A = *self.parents[0];
                          Node<T>& B = *self.parents[1];
                          const T* g = self.grad.data();
                          if (!b_batched) {
                            const std::size_t rows = batch * m;
                            if (A.requires_grad)
                              MatMap<T>(A.grad_buffer(), rows, k).noalias() +=
                                  ConstMatMap<T>(g, rows, n) * ConstMatMap<T>(B.data.data(), k, n).transpose();
                            if (B.requires_grad)
                              MatMap<T>(B.grad_buffer(), k, n).noalias() +=
                                  ConstMatMap<T>(A.data.data(), rows, k).transpose() * ConstMatMap<T>(g, rows, n);
                            return;
                          }
                          for (std::size_t i = 0; i < batch; ++i) {
                            const T* gi = g + i * m * n;
                            if (A.requires_grad)
                              MatMap<T>(A.grad_buffer() + i * m * k, m, k).noalias() +=
                                  ConstMatMap<T>(gi, m, n) *
                                  ConstMatMap<T>(B.data.data() + i * k * n, k, n).transpose();
                            if (B.requires_grad)
                              MatMap<T>(B.grad_buffer() + i * k * n, k, n).noalias() +=
                                  ConstMatMap<T>(A.data.data() + i * m * k, m, k).transpose() *
                                  ConstMatMap<T>(gi, m, n);
                          }
                        });
}

// Rows of `table` selected by `indices`; gradient scatters back into the table.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::size_t>& indices) {
  if (table.rank() != 2) throw DimensionError("gather_rows needs a rank-2 table");
  if (indices.empty()) throw ContractError("gather_rows with no indices");
  const std::size_t rows = table.dim(0), cols = table.dim(1);
  std::vector<T> out(indices.size() * cols);
  const T* p = table.data().data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) throw ContractError("gather_rows index out of range");
    std::copy_n(p + indices[i] * cols, cols, out.data() + i * cols);
  }
  return make_result<T>({indices.size(), cols}, std::move(out), "gather_rows", {&table},
                        [indices, cols](Node<T>& self) {
                          T* gt = self.parents[0]->grad_buffer();
                          for (std::size_t i = 0; i < indices.size(); ++i)
                            for (std::size_t c = 0; c < cols; ++c)
                              gt[indices[i] * cols + c] += self.grad[i * cols + c];
                        });
}

}  // namespace textfuse
