// SPDX-License-Identifier: Apache-2.0
//
// Small models and datasets that train in milliseconds.
#pragma once

#include <vector>

#include "textfuse/dataset.hpp"
#include "textfuse/trainer.hpp"

namespace textfuse::test {

inline TrainerConfig tiny_config(std::uint64_t seed = 1) {
  TrainerConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.lr0 = 1e-3;
  cfg.lower_steps_per_upper = 2;
  cfg.seed = seed;
  cfg.fusion.channels = 8;
  cfg.fusion.heads = 2;
  cfg.fusion.codebook_size = 16;
  cfg.detector.num_classes = 3;
  cfg.detector.width1 = 4;
  cfg.detector.width2 = 8;
  cfg.detector.width3 = 8;
  return cfg;
}

inline std::vector<SampleRecord> tiny_data(std::uint64_t seed, int n, int size = 32, int classes = 3) {
  std::vector<SampleRecord> out;
  for (int i = 0; i < n; ++i) out.push_back(render_sample(seed, i, size, classes).record);
  return out;
}

template <class Params>
std::vector<std::vector<float>> snapshot(const Params& p) {
  std::vector<std::vector<float>> out;
  p.visit([&](const std::string&, const Tensor<float>& t) { out.push_back(t.values()); });
  return out;
}

}  // namespace textfuse::test
