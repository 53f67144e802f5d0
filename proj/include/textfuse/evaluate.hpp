// SPDX-License-Identifier: Apache-2.0
//
// Inference with a loaded checkpoint and the dataset-level evaluation report.
#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "textfuse/checkpoint.hpp"
#include "textfuse/dataset.hpp"
#include "textfuse/metrics.hpp"
#include "textfuse/parallel.hpp"
#include "textfuse/text_encoder.hpp"

namespace textfuse {

struct InferenceResult {
  Image fused;                        // sigmoid output, full precision
  std::vector<Detection> detections;  // confidence descending
};

struct InferenceOptions {
  double conf_threshold = 0.01;
  double iou_nms = 0.5;
};

inline Image tensor_image(const Tensor<float>& z) {
  Image img;
  img.height = z.dim(2);
  img.width = z.dim(3);
  img.values.assign(z.data().begin(), z.data().end());
  return img;
}

inline InferenceResult infer(const Checkpoint& c, const Image& ir, const Image& vis, const std::string& prompt,
                             const InferenceOptions& opt = {}) {
  if (ir.height != vis.height || ir.width != vis.width) throw DimensionError("IR and VIS sizes differ");
  NoGradGuard guard;
  const Tensor<float> z = fuse(image_tensor<float>(ir), image_tensor<float>(vis), encode(tokenize(prompt), c.fusion.text),
                               c.fusion_config, c.fusion)
                              .z;
  InferenceResult r;
  r.fused = tensor_image(z);
  if (ir.height % kDetectorStride == 0 && ir.width % kDetectorStride == 0)
    r.detections = decode_detections(detect_forward(z, c.detector), 0, opt.conf_threshold, opt.iou_nms);
  return r;
}

struct EvalReport {
  FusionMetrics mean;                  // over images, on the 8-bit fused output
  std::vector<FusionMetrics> per_image;
  DetectionReport detection;
  std::vector<Image> fused;            // 8-bit fused images in dataset order
};

inline EvalReport evaluate(const Checkpoint& c, const std::vector<SampleRecord>& data,
                           const InferenceOptions& opt = {}) {
  if (data.empty()) throw ArgumentError("evaluation set is empty");
  std::vector<InferenceResult> results(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    results[i] = infer(c, data[i].ir, data[i].vis, data[i].prompt, opt);
  });
  EvalReport rep;
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<GroundTruthBox>> gts;
  for (std::size_t i = 0; i < data.size(); ++i) {
    rep.fused.push_back(quantize_8bit(results[i].fused));
    rep.per_image.push_back(fusion_metrics(rep.fused.back()));
    rep.mean.sf += rep.per_image.back().sf;
    rep.mean.en += rep.per_image.back().en;
    rep.mean.sd += rep.per_image.back().sd;
    rep.mean.ag += rep.per_image.back().ag;
    dets.push_back(std::move(results[i].detections));
    gts.push_back(data[i].boxes);
  }
  const double k = 1.0 / double(data.size());
  rep.mean.sf *= k;
  rep.mean.en *= k;
  rep.mean.sd *= k;
  rep.mean.ag *= k;
  rep.detection = detection_report(dets, gts, c.detector_config.num_classes);
  return rep;
}

inline std::string class_column(std::size_t c) {
  return c < class_names().size() ? class_names()[c] : "class" + std::to_string(c);
}

// One header line and one row; a class without ground truth reports "nan".
inline std::string format_report_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "SF,EN,SD,AG,mAP";
  for (std::size_t c = 0; c < r.detection.ap.size(); ++c) os << ",AP_" << class_column(c);
  os << '\n';
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  os << num(r.mean.sf) << ',' << num(r.mean.en) << ',' << num(r.mean.sd) << ',' << num(r.mean.ag) << ','
     << num(r.detection.map);
  for (const auto& ap : r.detection.ap) os << ',' << (ap ? num(*ap) : std::string("nan"));
  os << '\n';
  return os.str();
}

}  // namespace textfuse
