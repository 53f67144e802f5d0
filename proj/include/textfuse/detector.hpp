// SPDX-License-Identifier: Apache-2.0
//
// Anchor-free single-scale grid detector. Three stride-2 3x3 convolutions
// reduce an H x W image to an (H/8) x (W/8) grid; a 1x1 head predicts per
// cell [objectness, tx, ty, tw, th, class logits...].
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <tuple>
#include <vector>

#include "textfuse/conv.hpp"
#include "textfuse/dataset.hpp"
#include "textfuse/fusion_net.hpp"
#include "textfuse/ops.hpp"

namespace textfuse {

inline constexpr std::size_t kDetectorStride = 8;
inline constexpr std::size_t kBoxChannels = 5;  // objectness + 4 offsets

struct DetectorConfig {
  std::size_t num_classes = 3;
  std::size_t width1 = 16, width2 = 32, width3 = 64;
  double objectness_prior = 0.02;
  bool operator==(const DetectorConfig&) const = default;
};

template <class T>
struct DetectorParams {
  std::array<ConvLayer<T>, 3> backbone;
  ConvLayer<T> head;

  template <class F>
  void visit(F&& f) {
    for (std::size_t i = 0; i < backbone.size(); ++i) {
      f("det.conv" + std::to_string(i + 1) + ".weight", backbone[i].weight);
      f("det.conv" + std::to_string(i + 1) + ".bias", backbone[i].bias);
    }
    f("det.head.weight", head.weight);
    f("det.head.bias", head.bias);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<DetectorParams*>(this)->visit([&](const std::string& n, Tensor<T>& t) { f(n, static_cast<const Tensor<T>&>(t)); });
  }
};

template <class T>
DetectorParams<T> init_detector_params(const DetectorConfig& cfg, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xde7));
  DetectorParams<T> p;
  p.backbone[0] = detail::he_conv<T>(rng, cfg.width1, 1, 3);
  p.backbone[1] = detail::he_conv<T>(rng, cfg.width2, cfg.width1, 3);
  p.backbone[2] = detail::he_conv<T>(rng, cfg.width3, cfg.width2, 3);
  p.head = detail::he_conv<T>(rng, kBoxChannels + cfg.num_classes, cfg.width3, 1, 1.0);
  auto b = p.head.bias.mutable_data();
  b[0] = static_cast<T>(std::log(cfg.objectness_prior / (1.0 - cfg.objectness_prior)));
  return p;
}

template <class T>
DetectorParams<T> fork_params(const DetectorParams<T>& src) {
  DetectorParams<T> dst;
  std::vector<Tensor<T>> leaves;
  src.visit([&](const std::string&, const Tensor<T>& t) { leaves.push_back(t.clone_leaf()); });
  std::size_t i = 0;
  dst.visit([&](const std::string&, Tensor<T>& t) { t = leaves[i++]; });
  return dst;
}

template <class U, class T>
DetectorParams<U> convert_params(const DetectorParams<T>& src) {
  DetectorParams<U> dst;
  std::vector<Tensor<U>> out;
  src.visit([&](const std::string&, const Tensor<T>& t) {
    out.emplace_back(t.shape(), std::vector<U>(t.data().begin(), t.data().end()), true);
  });
  std::size_t i = 0;
  dst.visit([&](const std::string&, Tensor<U>& t) { t = out[i++]; });
  return dst;
}

template <class T>
Tensor<T> detect_forward(const Tensor<T>& z, const DetectorParams<T>& p) {
  if (z.rank() != 4 || z.dim(1) != 1) throw DimensionError("detect_forward expects [N,1,H,W]");
  if (z.dim(2) % kDetectorStride || z.dim(3) % kDetectorStride)
    throw ContractError("detect_forward: image size must be divisible by 8");
  Tensor<T> h = z;
  for (const auto& layer : p.backbone) h = relu(conv2d(h, layer.weight, layer.bias, 2, 1));
  return conv2d(h, p.head.weight, p.head.bias, 1, 0);
}

// ---- boxes ---------------------------------------------------------------

struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;
  auto key() const { return std::tie(cx, cy, w, h); }
};

inline Box box_from_corners(double x1, double y1, double x2, double y2) {
  return {(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
}

inline double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.cx + a.w / 2, b.cx + b.w / 2) - std::max(a.cx - a.w / 2, b.cx - b.w / 2));
  const double iy = std::max(0.0, std::min(a.cy + a.h / 2, b.cy + b.h / 2) - std::max(a.cy - a.h / 2, b.cy - b.h / 2));
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline Box to_box(const GroundTruthBox& g) { return {g.cx, g.cy, g.w, g.h}; }

struct Detection {
  int class_id = 0;
  double confidence = 0;
  Box box;
};

// Confidence descending; ties to the lower class id, then the smaller box.
inline bool detection_order(const Detection& a, const Detection& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.class_id != b.class_id) return a.class_id < b.class_id;
  return a.box.key() < b.box.key();
}

// Greedy per-class suppression of boxes overlapping a kept one at IoU >= threshold.
inline std::vector<Detection> non_max_suppression(std::vector<Detection> dets, double iou_threshold) {
  std::sort(dets.begin(), dets.end(), detection_order);
  std::vector<Detection> kept;
  for (const Detection& d : dets) {
    bool suppressed = false;
    for (const Detection& k : kept)
      if (k.class_id == d.class_id && iou(k.box, d.box) >= iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

namespace detail {
inline double sigmoid_d(double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }
}  // namespace detail

// Decodes image `n` of a raw grid into confidence-ordered detections.
template <class T>
std::vector<Detection> decode_detections(const Tensor<T>& raw, std::size_t n, double conf_threshold, double iou_nms) {
  if (conf_threshold < 0 || conf_threshold > 1 || iou_nms < 0 || iou_nms > 1)
    throw ArgumentError("decode_detections: thresholds must lie in [0, 1]");
  const std::size_t ch = raw.dim(1), S = raw.dim(2), Sx = raw.dim(3);
  const std::size_t classes = ch - kBoxChannels;
  const T* p = raw.data().data() + n * ch * S * Sx;
  auto at = [&](std::size_t c, std::size_t y, std::size_t x) { return static_cast<double>(p[(c * S + y) * Sx + x]); };
  std::vector<Detection> dets;
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < Sx; ++x) {
      const double obj = detail::sigmoid_d(at(0, y, x));
      double m = at(kBoxChannels, y, x);
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c)
        if (at(kBoxChannels + c, y, x) > m) {
          m = at(kBoxChannels + c, y, x);
          best = c;
        }
      double z = 0;
      for (std::size_t c = 0; c < classes; ++c) z += std::exp(at(kBoxChannels + c, y, x) - m);
      const double conf = obj * (1.0 / z);
      if (conf < conf_threshold) continue;
      Detection d;
      d.class_id = static_cast<int>(best);
      d.confidence = conf;
      d.box.cx = (x + detail::sigmoid_d(at(1, y, x))) / double(Sx);
      d.box.cy = (y + detail::sigmoid_d(at(2, y, x))) / double(S);
      d.box.w = std::min(1.0, std::exp(std::min(at(3, y, x), 10.0)) / double(Sx));
      d.box.h = std::min(1.0, std::exp(std::min(at(4, y, x), 10.0)) / double(S));
      dets.push_back(d);
    }
  return non_max_suppression(std::move(dets), iou_nms);
}

// ---- training loss -------------------------------------------------------

struct CellTarget {
  std::size_t cell;  // y * S + x
  int class_id;
  double tx, ty, tw, th;
};

struct GridTargets {
  std::vector<CellTarget> positives;
  std::size_t excluded = 0;  // boxes whose centre lies outside the image
};

// Centre-cell assignment; when several boxes share a cell the one whose
// centre is closest to the cell centre wins.
inline GridTargets assign_targets(const std::vector<GroundTruthBox>& boxes, std::size_t S) {
  GridTargets t;
  std::vector<double> best(S * S, 1e300);
  std::vector<long> owner(S * S, -1);
  std::vector<CellTarget> cand(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const GroundTruthBox& b = boxes[i];
    if (b.cx < 0 || b.cx > 1 || b.cy < 0 || b.cy > 1 || b.w <= 0 || b.h <= 0) {
      ++t.excluded;
      continue;
    }
    const std::size_t gx = std::min<std::size_t>(S - 1, static_cast<std::size_t>(b.cx * S));
    const std::size_t gy = std::min<std::size_t>(S - 1, static_cast<std::size_t>(b.cy * S));
    const std::size_t cell = gy * S + gx;
    const double dx = b.cx * S - (gx + 0.5), dy = b.cy * S - (gy + 0.5);
    const double dist = dx * dx + dy * dy;
    cand[i] = {cell, b.class_id, b.cx * S - gx, b.cy * S - gy, std::log(b.w * S), std::log(b.h * S)};
    if (dist < best[cell]) {
      best[cell] = dist;
      owner[cell] = static_cast<long>(i);
    }
  }
  for (std::size_t c = 0; c < S * S; ++c)
    if (owner[c] >= 0) t.positives.push_back(cand[static_cast<std::size_t>(owner[c])]);
  return t;
}

template <class T>
struct DetectionLoss {
  Tensor<T> total;
  T objectness = 0, classification = 0, box = 0;
  std::size_t excluded = 0;
};

// Per image: BCE(objectness) averaged over cells + CE(class) and smooth-L1
// (sigmoid(tx), sigmoid(ty), tw, th) averaged over positive cells; the batch
// value is the mean over images.
template <class T>
DetectionLoss<T> detection_loss(const Tensor<T>& raw, const std::vector<std::vector<GroundTruthBox>>& boxes) {
  const std::size_t n = raw.dim(0), ch = raw.dim(1), S = raw.dim(2);
  if (raw.dim(3) != S) throw DimensionError("detection_loss expects a square grid");
  if (boxes.size() != n) throw DimensionError("detection_loss: one box list per image required");
  if (ch <= kBoxChannels) throw DimensionError("detection_loss: no class channels");
  const std::size_t classes = ch - kBoxChannels;
  DetectionLoss<T> out;
  std::vector<Tensor<T>> per_image;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor<T> img = n == 1 ? raw : slice(raw, 0, i, 1);
    const GridTargets tg = assign_targets(boxes[i], S);
    out.excluded += tg.excluded;
    std::vector<T> obj_target(S * S, T(0));
    for (const auto& p : tg.positives) obj_target[p.cell] = T(1);
    const Tensor<T> obj = reshape(slice(img, 1, 0, 1), {S * S});
    Tensor<T> loss = mean(bce_with_logits(obj, obj_target));
    out.objectness += loss.item();
    if (!tg.positives.empty()) {
      const std::size_t P = tg.positives.size();
      const Tensor<T> cells = reshape(transpose(reshape(img, {1, ch, S * S})), {S * S, ch});
      std::vector<std::size_t> idx;
      std::vector<T> onehot(P * classes, T(0)), box_t(P * 4);
      for (std::size_t k = 0; k < P; ++k) {
        const auto& p = tg.positives[k];
        if (p.class_id < 0 || static_cast<std::size_t>(p.class_id) >= classes)
          throw ContractError("detection_loss: class id out of range");
        idx.push_back(p.cell);
        onehot[k * classes + static_cast<std::size_t>(p.class_id)] = T(1);
        box_t[k * 4 + 0] = static_cast<T>(p.tx);
        box_t[k * 4 + 1] = static_cast<T>(p.ty);
        box_t[k * 4 + 2] = static_cast<T>(p.tw);
        box_t[k * 4 + 3] = static_cast<T>(p.th);
      }
      const Tensor<T> picked = gather_rows(cells, idx);
      const T inv = T(1) / static_cast<T>(P);
      const Tensor<T> ce = sum(log_softmax(slice(picked, 1, kBoxChannels, classes)) * Tensor<T>({P, classes}, onehot)) * (-inv);
      const Tensor<T> pred = concat(std::vector<Tensor<T>>{sigmoid(slice(picked, 1, 1, 2)), slice(picked, 1, 3, 2)}, 1);
      const Tensor<T> bl = sum(smooth_l1(pred - Tensor<T>({P, 4}, box_t))) * inv;
      out.classification += ce.item();
      out.box += bl.item();
      loss = loss + ce + bl;
    }
    per_image.push_back(loss);
  }
  Tensor<T> total = per_image[0];
  for (std::size_t i = 1; i < n; ++i) total = total + per_image[i];
  const T inv_n = T(1) / static_cast<T>(n);
  out.total = n == 1 ? total : total * inv_n;
  out.objectness *= inv_n;
  out.classification *= inv_n;
  out.box *= inv_n;
  return out;
}

}  // namespace textfuse
