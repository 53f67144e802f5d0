// SPDX-License-Identifier: Apache-2.0
//
// Fusion-quality metrics on the 0-255 scale and detection average precision.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "textfuse/detector.hpp"
#include "textfuse/image.hpp"
#include "textfuse/losses.hpp"

namespace textfuse {

namespace detail {
inline double at255(const Image& img, std::size_t y, std::size_t x) { return 255.0 * img.values[y * img.width + x]; }
}  // namespace detail

// SF = sqrt(RF^2 + CF^2) with RF over horizontal and CF over vertical neighbours.
inline double spatial_frequency(const Image& img) {
  const std::size_t M = img.height, N = img.width;
  double rf = 0, cf = 0;
  for (std::size_t y = 0; y < M; ++y)
    for (std::size_t x = 1; x < N; ++x) {
      const double d = detail::at255(img, y, x) - detail::at255(img, y, x - 1);
      rf += d * d;
    }
  for (std::size_t y = 1; y < M; ++y)
    for (std::size_t x = 0; x < N; ++x) {
      const double d = detail::at255(img, y, x) - detail::at255(img, y - 1, x);
      cf += d * d;
    }
  rf = N > 1 ? rf / double(M * (N - 1)) : 0.0;
  cf = M > 1 ? cf / double((M - 1) * N) : 0.0;
  return std::sqrt(rf + cf);
}

// Shannon entropy in bits of the 256-bin histogram.
inline double entropy(const Image& img) {
  std::array<double, 256> counts{};
  for (double v : img.values) counts[static_cast<std::size_t>(intensity_level(v))] += 1.0;
  const double n = static_cast<double>(img.values.size());
  double h = 0;
  for (double c : counts)
    if (c > 0) h -= (c / n) * std::log2(c / n);
  return h;
}

// Population standard deviation.
inline double std_dev(const Image& img) {
  const double n = static_cast<double>(img.values.size());
  double mean = 0;
  for (double v : img.values) mean += 255.0 * v;
  mean /= n;
  double var = 0;
  for (double v : img.values) var += (255.0 * v - mean) * (255.0 * v - mean);
  return std::sqrt(var / n);
}

// AG = mean over the (M-1) x (N-1) forward-difference grid of sqrt((dx^2 + dy^2) / 2).
inline double avg_gradient(const Image& img) {
  const std::size_t M = img.height, N = img.width;
  if (M < 2 || N < 2) return 0.0;
  double s = 0;
  for (std::size_t y = 0; y + 1 < M; ++y)
    for (std::size_t x = 0; x + 1 < N; ++x) {
      const double dx = detail::at255(img, y, x + 1) - detail::at255(img, y, x);
      const double dy = detail::at255(img, y + 1, x) - detail::at255(img, y, x);
      s += std::sqrt((dx * dx + dy * dy) / 2);
    }
  return s / double((M - 1) * (N - 1));
}

struct FusionMetrics {
  double sf = 0, en = 0, sd = 0, ag = 0;
};

inline FusionMetrics fusion_metrics(const Image& img) {
  return {spatial_frequency(img), entropy(img), std_dev(img), avg_gradient(img)};
}

// ---- detection -----------------------------------------------------------

struct ScoredBox {
  std::size_t image = 0;
  double confidence = 0;
  Box box;
};

// All-point interpolated AP with greedy matching: predictions in confidence
// order each claim the unmatched ground truth of their image with the highest
// IoU, if that IoU reaches `iou_thr`. Undefined (nullopt) when there is
// neither ground truth nor prediction; 0 when only predictions exist.
inline std::optional<double> average_precision(std::vector<ScoredBox> preds,
                                               const std::vector<std::vector<Box>>& gts, double iou_thr = 0.5) {
  std::size_t total = 0;
  for (const auto& g : gts) total += g.size();
  if (total == 0) return preds.empty() ? std::nullopt : std::optional<double>(0.0);
  std::stable_sort(preds.begin(), preds.end(), [](const ScoredBox& a, const ScoredBox& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.image != b.image) return a.image < b.image;
    return a.box.key() < b.box.key();
  });
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
  std::vector<double> recall, precision;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    const ScoredBox& p = preds[k];
    long best = -1;
    double best_iou = iou_thr;
    if (p.image < gts.size())
      for (std::size_t j = 0; j < gts[p.image].size(); ++j) {
        if (used[p.image][j]) continue;
        const double v = iou(p.box, gts[p.image][j]);
        if (v >= best_iou && (best < 0 || v > best_iou)) {
          best = static_cast<long>(j);
          best_iou = v;
        }
      }
    if (best >= 0) {
      used[p.image][static_cast<std::size_t>(best)] = true;
      ++tp;
    }
    recall.push_back(double(tp) / double(total));
    precision.push_back(double(tp) / double(k + 1));
  }
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0, prev_r = 0;
  for (std::size_t k = 0; k < recall.size(); ++k) {
    ap += (recall[k] - prev_r) * precision[k];
    prev_r = recall[k];
  }
  return ap;
}

struct DetectionReport {
  std::vector<std::optional<double>> ap;  // per class; nullopt without ground truth
  double map = 0;
};

// Per-class AP over a set of images; mAP averages the classes that have
// ground truth.
inline DetectionReport detection_report(const std::vector<std::vector<Detection>>& dets,
                                        const std::vector<std::vector<GroundTruthBox>>& gts, std::size_t num_classes,
                                        double iou_thr = 0.5) {
  if (dets.size() != gts.size()) throw DimensionError("detection_report: one detection list per image required");
  DetectionReport r;
  double sum = 0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<ScoredBox> preds;
    std::vector<std::vector<Box>> boxes(gts.size());
    bool any_gt = false;
    for (std::size_t i = 0; i < gts.size(); ++i) {
      for (const auto& g : gts[i])
        if (static_cast<std::size_t>(g.class_id) == c) {
          boxes[i].push_back(to_box(g));
          any_gt = true;
        }
      for (const auto& d : dets[i])
        if (static_cast<std::size_t>(d.class_id) == c) preds.push_back({i, d.confidence, d.box});
    }
    r.ap.push_back(any_gt ? average_precision(preds, boxes, iou_thr) : std::nullopt);
    if (any_gt) {
      sum += *r.ap.back();
      ++counted;
    }
  }
  r.map = counted ? sum / double(counted) : 0.0;
  return r;
}

}  // namespace textfuse
