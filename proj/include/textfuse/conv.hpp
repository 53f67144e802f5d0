// SPDX-License-Identifier: Apache-2.0
//
// Spatial primitives on NCHW tensors: cross-correlation, average pooling and
// nearest-neighbour upsampling.
#pragma once

#include <algorithm>
#include <memory>
#include <utility>
#include <vector>

#include "textfuse/ops.hpp"

namespace textfuse {

namespace detail {

struct ConvGeom {
  std::size_t cin, h, w, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t pixels() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// Output columns [lo, hi) of a kernel tap read inside the input row.
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeom& g, std::size_t kj) {
  const long off = static_cast<long>(kj) - static_cast<long>(g.pad);
  const long s = static_cast<long>(g.stride);
  long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long hi = (static_cast<long>(g.w) - 1 - off) / s + 1;
  hi = std::clamp(hi, 0L, static_cast<long>(g.wo));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

template <class T>
void im2col(const T* img, const ConvGeom& g, T* col) {
  const std::size_t np = g.pixels();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * np;
        const T* plane = img + c * g.h * g.w;
        const auto [lo, hi] = valid_columns(g, kj);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill_n(dst, g.wo, T(0));
            continue;
          }
          const T* src = plane + static_cast<long>(static_cast<std::size_t>(iy) * g.w) + static_cast<long>(kj) - static_cast<long>(g.pad);
          std::fill(dst, dst + lo, T(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + hi, dst + g.wo, T(0));
        }
      }
}

template <class T>
void col2im(const T* col, const ConvGeom& g, T* img) {
  const std::size_t np = g.pixels();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * np;
        T* plane = img + c * g.h * g.w;
        const auto [lo, hi] = valid_columns(g, kj);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          // Offset by kj - pad; only indices >= lo are touched, which stay in range.
          T* dst = plane + static_cast<long>(static_cast<std::size_t>(iy) * g.w) + static_cast<long>(kj) - static_cast<long>(g.pad);
          const T* src = row + oy * g.wo;
          if (g.stride == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
}

}  // namespace detail

// Cross-correlation with zero padding. `bias` may be undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
  if (input.rank() != 4 || weight.rank() != 4)
    throw DimensionError("conv2d expects NCHW input and OIHW weight");
  const std::size_t n = input.dim(0);
  const std::size_t cout = weight.dim(0);
  detail::ConvGeom g{input.dim(1), input.dim(2), input.dim(3), weight.dim(2), weight.dim(3),
                     stride, padding, 0, 0};
  if (weight.dim(1) != g.cin)
    throw DimensionError("conv2d channel mismatch: input " + shape_str(input.shape()) +
                         ", weight " + shape_str(weight.shape()));
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw ContractError("conv2d kernel sizes must be odd");
  if (stride == 0) throw ContractError("conv2d stride must be >= 1");
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw)
    throw DimensionError("conv2d kernel larger than padded input");
  const bool has_bias = bias.defined();
  if (has_bias && (bias.numel() != cout)) throw DimensionError("conv2d bias size mismatch");
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t np = g.pixels(), patch = g.patch();
  std::vector<T> out(n * cout * np);
  // Patch matrices are kept for the weight gradient when a graph is recorded.
  const bool keep = grad_enabled() && weight.requires_grad() && !g.pointwise();
  auto cols = std::make_shared<std::vector<T>>(g.pointwise() ? 0 : patch * np * (keep ? n : 1));
  const T* pw = weight.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const T* img = input.data().data() + i * g.cin * g.h * g.w;
    const T* src = img;
    if (!g.pointwise()) {
      T* col = cols->data() + (keep ? i * patch * np : 0);
      detail::im2col(img, g, col);
      src = col;
    }
    MatMap<T> o(out.data() + i * cout * np, cout, np);
    o.noalias() = ConstMatMap<T>(pw, cout, patch) * ConstMatMap<T>(src, patch, np);
    if (has_bias)
      for (std::size_t c = 0; c < cout; ++c) o.row(c).array() += bias.data()[c];
  }

  if (!keep) cols.reset();
  auto fn = [g, n, cout, has_bias, cols](Node<T>& self) {
    Node<T>& X = *self.parents[0];
    Node<T>& W = *self.parents[1];
    Node<T>* B = has_bias ? self.parents[2].get() : nullptr;
    const std::size_t np = g.pixels(), patch = g.patch();
    std::vector<T> dcol(X.requires_grad && !g.pointwise() ? patch * np : 0);
    for (std::size_t i = 0; i < n; ++i) {
      ConstMatMap<T> dy(self.grad.data() + i * cout * np, cout, np);
      const T* img = X.data.data() + i * g.cin * g.h * g.w;
      if (W.requires_grad) {
        const T* src = g.pointwise() ? img : cols->data() + i * patch * np;
        MatMap<T>(W.grad_buffer(), cout, patch).noalias() +=
            dy * ConstMatMap<T>(src, patch, np).transpose();
      }
      if (B && B->requires_grad) {
        T* gb = B->grad_buffer();
        // Plain loop: a vectorised reduction would peel by address, which
        // makes the rounding depend on where the buffer was allocated.
        for (std::size_t c = 0; c < cout; ++c) {
          const T* row = self.grad.data() + (i * cout + c) * np;
          T acc = 0;
          for (std::size_t j = 0; j < np; ++j) acc += row[j];
          gb[c] += acc;
        }
      }
      if (X.requires_grad) {
        T* gx = X.grad_buffer() + i * g.cin * g.h * g.w;
        if (g.pointwise()) {
          MatMap<T>(gx, patch, np).noalias() +=
              ConstMatMap<T>(W.data.data(), cout, patch).transpose() * dy;
        } else {
          MatMap<T>(dcol.data(), patch, np).noalias() =
              ConstMatMap<T>(W.data.data(), cout, patch).transpose() * dy;
          detail::col2im(dcol.data(), g, gx);
        }
      }
    }
  };
  Shape s{n, cout, g.ho, g.wo};
  if (has_bias) return make_result<T>(std::move(s), std::move(out), "conv2d", {&input, &weight, &bias}, fn);
  return make_result<T>(std::move(s), std::move(out), "conv2d", {&input, &weight}, fn);
}

// Non-overlapping k x k mean pooling; H and W must be multiples of k.
template <class T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t k) {
  if (x.rank() != 4) throw DimensionError("avg_pool2d expects NCHW");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k == 0 || h % k || w % k) throw DimensionError("avg_pool2d: size not divisible by window");
  const std::size_t ho = h / k, wo = w / k;
  const T inv = T(1) / static_cast<T>(k * k);
  std::vector<T> out(nc * ho * wo, T(0));
  const T* p = x.data().data();
  for (std::size_t c = 0; c < nc; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) out[(c * ho + y / k) * wo + xx / k] += p[(c * h + y) * w + xx];
  for (T& v : out) v *= inv;
  return make_result<T>({x.dim(0), x.dim(1), ho, wo}, std::move(out), "avg_pool2d", {&x},
                        [nc, h, w, k, ho, wo, inv](Node<T>& self) {
                          T* gx = self.parents[0]->grad_buffer();
                          for (std::size_t c = 0; c < nc; ++c)
                            for (std::size_t y = 0; y < h; ++y)
                              for (std::size_t xx = 0; xx < w; ++xx)
                                gx[(c * h + y) * w + xx] += inv * self.grad[(c * ho + y / k) * wo + xx / k];
                        });
}

template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t k) {
  if (x.rank() != 4) throw DimensionError("upsample_nearest expects NCHW");
  if (k == 1) return x;
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h * k, wo = w * k;
  std::vector<T> out(nc * ho * wo);
  const T* p = x.data().data();
  for (std::size_t c = 0; c < nc; ++c)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx) out[(c * ho + y) * wo + xx] = p[(c * h + y / k) * w + xx / k];
  return make_result<T>({x.dim(0), x.dim(1), ho, wo}, std::move(out), "upsample_nearest", {&x},
                        [nc, h, w, k, ho, wo](Node<T>& self) {
                          T* gx = self.parents[0]->grad_buffer();
                          for (std::size_t c = 0; c < nc; ++c)
                            for (std::size_t y = 0; y < ho; ++y)
                              for (std::size_t xx = 0; xx < wo; ++xx)
                                gx[(c * h + y / k) * w + xx / k] += self.grad[(c * ho + y) * wo + xx];
                        });
}

}  // namespace textfuse
