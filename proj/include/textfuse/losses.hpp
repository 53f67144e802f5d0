// SPDX-License-Identifier: Apache-2.0
//
// Fusion objectives: SSIM / pixel / gradient primitives, the structure loss
// against the previous-epoch fusion result, saliency-weighted content
// consistency, the SSIM-weighted feasibility combination and the codebook
// quantisation loss.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <utility>
#include <vector>

#include "textfuse/conv.hpp"
#include "textfuse/image.hpp"
#include "textfuse/ops.hpp"

namespace textfuse {

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = (0.01 * 255) * (0.01 * 255);
inline constexpr double kSsimC2 = (0.03 * 255) * (0.03 * 255);

template <class T>
const Tensor<T>& ssim_window() {
  static const Tensor<T> w = [] {
    std::vector<double> g(kSsimWindow);
    const double c = (kSsimWindow - 1) / 2.0;
    double total = 0;
    for (std::size_t i = 0; i < kSsimWindow; ++i) {
      g[i] = std::exp(-(i - c) * (i - c) / (2 * kSsimSigma * kSsimSigma));
      total += g[i];
    }
    for (double& v : g) v /= total;
    std::vector<T> k(kSsimWindow * kSsimWindow);
    for (std::size_t i = 0; i < kSsimWindow; ++i)
      for (std::size_t j = 0; j < kSsimWindow; ++j) k[i * kSsimWindow + j] = static_cast<T>(g[i] * g[j]);
    return Tensor<T>({1, 1, kSsimWindow, kSsimWindow}, std::move(k));
  }();
  return w;
}

// Mean SSIM over all fully contained 11x11 windows, on the 0-255 scale.
template <class T>
Tensor<T> ssim(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("ssim: shape mismatch");
  if (a.rank() != 4 || a.dim(1) != 1) throw DimensionError("ssim expects [N,1,H,W]");
  if (a.dim(2) < kSsimWindow || a.dim(3) < kSsimWindow) throw ContractError("ssim: window larger than image");
  const Tensor<T>& w = ssim_window<T>();
  const Tensor<T> none;
  const Tensor<T> A = a * T(255), B = b * T(255);
  const Tensor<T> mu_a = conv2d(A, w, none), mu_b = conv2d(B, w, none);
  const Tensor<T> mu_aa = mu_a * mu_a, mu_bb = mu_b * mu_b, mu_ab = mu_a * mu_b;
  const Tensor<T> s_aa = conv2d(A * A, w, none) - mu_aa;
  const Tensor<T> s_bb = conv2d(B * B, w, none) - mu_bb;
  const Tensor<T> s_ab = conv2d(A * B, w, none) - mu_ab;
  const T c1 = static_cast<T>(kSsimC1), c2 = static_cast<T>(kSsimC2);
  const Tensor<T> num = (mu_ab * T(2) + c1) * (s_ab * T(2) + c2);
  const Tensor<T> den = (mu_aa + mu_bb + c1) * (s_aa + s_bb + c2);
  return mean(num / den);
}

template <class T>
T ssim_value(const Tensor<T>& a, const Tensor<T>& b) {
  NoGradGuard guard;
  return ssim(a, b).item();
}

template <class T>
const Tensor<T>& sobel_kernels() {
  static const Tensor<T> k({2, 1, 3, 3}, {T(-1), T(0), T(1), T(-2), T(0), T(2), T(-1), T(0), T(1),
                                          T(-1), T(-2), T(-1), T(0), T(0), T(0), T(1), T(2), T(1)});
  return k;
}

// Valid-region Sobel responses [N, 2, H-2, W-2].
template <class T>
Tensor<T> sobel(const Tensor<T>& x) {
  return conv2d(x, sobel_kernels<T>(), Tensor<T>{});
}

template <class T>
struct LossTerms {
  Tensor<T> ssim_term;  // 1 - SSIM
  Tensor<T> pixel;      // mean |a - b|
  Tensor<T> grad;       // mean over pixels of |dx| + |dy| differences
  Tensor<T> total;
};

template <class T>
LossTerms<T> similarity_terms(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("loss: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  LossTerms<T> t;
  t.ssim_term = T(1) - ssim(a, b);
  t.pixel = mean(abs(a - b));
  t.grad = mean(abs(sobel(a) - sobel(b))) * T(2);
  t.total = t.ssim_term + t.pixel + t.grad;
  return t;
}

// L_str(z, z') = L_ssim + L_pixel + L_grad.
template <class T>
LossTerms<T> structure_loss(const Tensor<T>& z, const Tensor<T>& z_prev) {
  return similarity_terms(z, z_prev);
}

// ---- saliency ------------------------------------------------------------

struct SaliencyMap {
  std::vector<double> values;      // S(k) per pixel, in [0, 255]
  std::array<double, 256> histogram{};  // probabilities
};

inline int intensity_level(double v) { return static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

// S(k) = sum_i H(i) |x(k) - i| over the normalised 256-bin histogram.
template <class Range>
SaliencyMap saliency(const Range& pixels) {
  SaliencyMap m;
  std::vector<int> levels;
  for (double v : pixels) levels.push_back(intensity_level(v));
  if (levels.empty()) return m;
  std::array<double, 256> counts{};
  for (int l : levels) counts[static_cast<std::size_t>(l)] += 1.0;
  const double inv = 1.0 / static_cast<double>(levels.size());
  for (std::size_t i = 0; i < 256; ++i) m.histogram[i] = counts[i] * inv;
  std::array<double, 256> by_level{};
  for (int l = 0; l < 256; ++l) {
    double s = 0;
    for (int i = 0; i < 256; ++i) s += m.histogram[static_cast<std::size_t>(i)] * std::abs(l - i);
    by_level[static_cast<std::size_t>(l)] = s;
  }
  m.values.reserve(levels.size());
  for (int l : levels) m.values.push_back(by_level[static_cast<std::size_t>(l)]);
  return m;
}

inline constexpr double kWeightEps = 1e-6;

struct ContentWeights {
  std::vector<double> w_ir, w_vis;
};

// Default: w1 = Sx / (Sx + Sy + eps). `literal`: w1 = Sx / (|Sx - Sy| + eps).
// Always w2 = 1 - w1.
inline ContentWeights content_weights(const SaliencyMap& sx, const SaliencyMap& sy, bool literal = false) {
  if (sx.values.size() != sy.values.size()) throw DimensionError("content_weights: size mismatch");
  ContentWeights w;
  w.w_ir.resize(sx.values.size());
  w.w_vis.resize(sx.values.size());
  for (std::size_t k = 0; k < sx.values.size(); ++k) {
    const double a = sx.values[k], b = sy.values[k];
    const double w1 = literal ? a / (std::abs(a - b) + kWeightEps) : a / (a + b + kWeightEps);
    w.w_ir[k] = w1;
    w.w_vis[k] = 1.0 - w1;
  }
  return w;
}

struct LossConfig {
  bool literal_weights = false;
  bool use_cc = true;
  bool use_str = true;
  double beta = 0.25;
};

// Constant targets w1*IR and w2*VIS, with weights computed per image.
template <class T>
std::pair<Tensor<T>, Tensor<T>> weighted_targets(const Tensor<T>& x, const Tensor<T>& y, bool literal) {
  if (x.shape() != y.shape()) throw DimensionError("content targets: shape mismatch");
  const std::size_t n = x.dim(0), plane = x.numel() / n;
  std::vector<T> t1(x.numel()), t2(x.numel());
  for (std::size_t i = 0; i < n; ++i) {
    const auto xs = x.data().subspan(i * plane, plane);
    const auto ys = y.data().subspan(i * plane, plane);
    const ContentWeights w = content_weights(saliency(xs), saliency(ys), literal);
    for (std::size_t k = 0; k < plane; ++k) {
      t1[i * plane + k] = static_cast<T>(w.w_ir[k] * xs[k]);
      t2[i * plane + k] = static_cast<T>(w.w_vis[k] * ys[k]);
    }
  }
  return {Tensor<T>(x.shape(), std::move(t1)), Tensor<T>(x.shape(), std::move(t2))};
}

// L_cc = sum over (IR, VIS) of [L_ssim + L_pixel + L_grad](z, w_i I_i).
template <class T>
Tensor<T> content_consistency_loss(const Tensor<T>& z, const Tensor<T>& x, const Tensor<T>& y, bool literal = false) {
  if (z.shape() != x.shape()) throw DimensionError("content_consistency_loss: shape mismatch");
  const auto [t1, t2] = weighted_targets(x, y, literal);
  return similarity_terms(z, t1).total + similarity_terms(z, t2).total;
}

template <class T>
struct FeasibilityResult {
  Tensor<T> value;  // undefined when both parts are disabled
  T alpha1 = 0, alpha2 = 0;
  T l_str = 0, l_cc = 0;
};

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// L_f = a1 L_str(z, z') + a2 L_cc(x, y, z); a1 = mean SSIM(z', {x, y}),
// a2 = mean SSIM(z, {x, y}), both clamped to [0, 1] and held constant.
// `frozen_alpha` replaces both weights.
template <class T>
FeasibilityResult<T> feasibility_loss(const Tensor<T>& z, const Tensor<T>& z_prev, const Tensor<T>& x,
                                      const Tensor<T>& y, const LossConfig& cfg = {},
                                      const std::pair<T, T>* frozen_alpha = nullptr) {
  FeasibilityResult<T> r;
  if (frozen_alpha) {
    r.alpha1 = frozen_alpha->first;
    r.alpha2 = frozen_alpha->second;
  } else {
    NoGradGuard guard;
    const Tensor<T> zd = z.detach();
    r.alpha1 = static_cast<T>(clamp01(0.5 * (double(ssim(z_prev, x).item()) + double(ssim(z_prev, y).item()))));
    r.alpha2 = static_cast<T>(clamp01(0.5 * (double(ssim(zd, x).item()) + double(ssim(zd, y).item()))));
  }
  if (cfg.use_str) {
    const Tensor<T> s = structure_loss(z, z_prev).total;
    r.l_str = s.item();
    r.value = s * r.alpha1;
  }
  if (cfg.use_cc) {
    const Tensor<T> c = content_consistency_loss(z, x, y, cfg.literal_weights);
    r.l_cc = c.item();
    r.value = r.value.defined() ? r.value + c * r.alpha2 : c * r.alpha2;
  }
  return r;
}

template <class T>
struct QuantLoss {
  Tensor<T> objective;  // codebook term + beta * commitment term
  T value = 0;          // (1/N) sum_i ||z_i - q(z_i)||^2, N = number of vectors
};

// Two-sided split of the quantisation loss: ||sg(z) - c||^2 moves entries,
// beta ||z - sg(c)||^2 commits features.
template <class T>
QuantLoss<T> quantization_loss(const Tensor<T>& features, const Tensor<T>& entries,
                               const std::vector<std::size_t>& indices, T beta = T(0.25)) {
  const std::size_t C = entries.dim(1);
  if (features.shape().back() != C || features.numel() / C != indices.size())
    throw DimensionError("quantization_loss: features and indices disagree");
  const std::size_t m = indices.size();
  const T inv = T(1) / static_cast<T>(m);
  const Tensor<T> z = reshape(features, {m, C});
  const Tensor<T> chosen = gather_rows(entries, indices);
  QuantLoss<T> r;
  const Tensor<T> codebook_term = sum(square(z.detach() - chosen)) * inv;
  r.value = codebook_term.item();
  r.objective = beta == T(0) ? codebook_term : codebook_term + sum(square(z - chosen.detach())) * (inv * beta);
  return r;
}

// Plain evaluation of (1/N) sum ||z_i - q_i||^2 over the vectors of the last axis.
template <class T>
T quantization_error(const Tensor<T>& features, const Tensor<T>& quantized) {
  if (features.shape() != quantized.shape()) throw DimensionError("quantization_error: shape mismatch");
  const std::size_t C = features.shape().back();
  T s = T(0);
  for (std::size_t i = 0; i < features.numel(); ++i) {
    const T d = features[i] - quantized[i];
    s += d * d;
  }
  return s / static_cast<T>(features.numel() / C);
}

}  // namespace textfuse
