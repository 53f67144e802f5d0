// SPDX-License-Identifier: Apache-2.0
//
// Alternating two-level training of the fusion network (lower level:
// feasibility + quantisation loss) and the detector (upper level: detection
// loss on fused images), plus a direct joint-training mode.
//
// Batch gradients are means of per-sample gradients computed on private
// parameter copies and summed in sample order, so results do not depend on
// the worker count.
#pragma once

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "textfuse/adam.hpp"
#include "textfuse/dataset.hpp"
#include "textfuse/detector.hpp"
#include "textfuse/fusion_net.hpp"
#include "textfuse/losses.hpp"
#include "textfuse/parallel.hpp"
#include "textfuse/text_encoder.hpp"

namespace textfuse {

enum class TrainMode { bilevel, direct };

inline const char* mode_name(TrainMode m) { return m == TrainMode::bilevel ? "bilevel" : "direct"; }

inline TrainMode parse_mode(const std::string& s) {
  if (s == "bilevel") return TrainMode::bilevel;
  if (s == "direct") return TrainMode::direct;
  throw ArgumentError("mode must be 'bilevel' or 'direct', got '" + s + "'");
}

struct LossToggles {
  bool use_cc = true;
  bool use_str = true;
  bool use_quant = true;
  bool use_det = true;
  bool any_lower() const { return use_cc || use_str || use_quant; }
};

struct TrainerConfig {
  std::size_t epochs = 300;
  std::size_t batch_size = 64;
  double lr0 = 1e-4;
  double gamma = 0.99;
  std::size_t lower_steps_per_upper = 5;
  TrainMode mode = TrainMode::bilevel;
  std::uint64_t seed = 0;
  LossToggles toggles;
  bool literal_weights = false;
  double beta = 0.25;
  FusionConfig fusion;
  DetectorConfig detector;

  void validate() const {
    if (epochs < 1) throw ArgumentError("epochs must be >= 1");
    if (batch_size < 1) throw ArgumentError("batch size must be >= 1");
    if (!(lr0 > 0) || !std::isfinite(lr0)) throw ArgumentError("learning rate must be positive");
    if (!(gamma > 0 && gamma <= 1)) throw ArgumentError("lr decay must lie in (0, 1]");
    if (lower_steps_per_upper < 1) throw ArgumentError("lower steps per upper step must be >= 1");
    fusion.validate();
  }
  // Learning rate used during epoch e (0-based) = rate after e completed epochs.
  double lr_at(std::size_t e) const { return lr0 * std::pow(gamma, static_cast<double>(e)); }
};

// Mean per-sample values of one optimisation step or one epoch.
struct LossReport {
  double l_str = 0, l_cc = 0, l_f = 0, g = 0, l_d = 0, alpha1 = 0, alpha2 = 0;
  std::size_t count = 0;

  void add(const LossReport& r) {
    l_str += r.l_str;
    l_cc += r.l_cc;
    l_f += r.l_f;
    g += r.g;
    alpha1 += r.alpha1;
    alpha2 += r.alpha2;
    count += r.count;
  }
  LossReport mean() const {
    LossReport m = *this;
    if (count) {
      const double k = 1.0 / double(count);
      m.l_str *= k;
      m.l_cc *= k;
      m.l_f *= k;
      m.g *= k;
      m.alpha1 *= k;
      m.alpha2 *= k;
    }
    return m;
  }
};

struct EpochLog {
  std::size_t epoch = 0, step = 0;
  LossReport loss;
  double lr = 0;
};

inline std::string log_csv_header() { return "epoch,step,l_str,l_cc,l_f,g,l_d,alpha1,alpha2,lr"; }

inline std::string format_log_csv(const std::vector<EpochLog>& rows) {
  std::ostringstream os;
  os << log_csv_header() << '\n';
  char buf[512];
  for (const EpochLog& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.step, r.loss.l_str,
                  r.loss.l_cc, r.loss.l_f, r.loss.g, r.loss.l_d, r.loss.alpha1, r.loss.alpha2, r.lr);
    os << buf;
  }
  return os.str();
}

template <class T>
Tensor<T> image_tensor(const Image& img) {
  return Tensor<T>({1, 1, img.height, img.width}, std::vector<T>(img.values.begin(), img.values.end()));
}

template <class T>
Tensor<T> image_tensor(std::size_t h, std::size_t w, const std::vector<T>& values) {
  return Tensor<T>({1, 1, h, w}, values);
}

// Previous-epoch fused output per training sample. Starts at max(ir, vis);
// writes are staged and only become visible at commit().
class ZPrimeCache {
 public:
  void init(const std::vector<SampleRecord>& data) {
    current_.clear();
    for (const SampleRecord& r : data) {
      std::vector<float> v(r.ir.values.size());
      for (std::size_t k = 0; k < v.size(); ++k) v[k] = std::max(r.ir.values[k], r.vis.values[k]);
      current_.push_back(std::move(v));
    }
    pending_ = current_;
  }
  const std::vector<float>& get(std::size_t i) const { return current_.at(i); }
  void stage(std::size_t i, std::vector<float> z) { pending_.at(i) = std::move(z); }
  void commit() { current_ = pending_; }
  std::size_t size() const { return current_.size(); }

  // FNV-1a over the little-endian bytes of every committed value.
  std::uint64_t digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& v : current_)
      for (float f : v) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        for (int b = 0; b < 4; ++b) {
          h ^= (bits >> (8 * b)) & 0xffu;
          h *= 0x100000001b3ULL;
        }
      }
    return h;
  }

 private:
  std::vector<std::vector<float>> current_, pending_;
};

namespace detail {

template <class Params>
std::size_t flat_size(const Params& p) {
  std::size_t n = 0;
  p.visit([&](const std::string&, const auto& t) { n += t.numel(); });
  return n;
}

// Concatenated gradients in visit order (zeros where a leaf got none).
template <class Params>
void gather_grads(const Params& p, float* out) {
  p.visit([&](const std::string&, const auto& t) {
    if (t.has_grad())
      std::copy(t.grad().begin(), t.grad().end(), out);
    else
      std::fill_n(out, t.numel(), 0.0f);
    out += t.numel();
  });
}

// Mean over samples, reduced in sample order, written into p's gradients.
template <class Params>
void scatter_mean(Params& p, const std::vector<std::vector<float>>& per_sample) {
  const std::size_t n = flat_size(p);
  std::vector<float> total(n, 0.0f);
  for (const auto& g : per_sample)
    for (std::size_t j = 0; j < n; ++j) total[j] += g[j];
  const float inv = 1.0f / static_cast<float>(per_sample.size());
  std::size_t off = 0;
  p.visit([&](const std::string&, auto& t) {
    auto g = t.mutable_grad();
    for (std::size_t j = 0; j < g.size(); ++j) g[j] = total[off + j] * inv;
    off += g.size();
  });
}

// Fusion parameters including the codebook, in checkpoint order.
struct FusionWithCodebook {
  FusionParams<float>* p;
  template <class F>
  void visit(F&& f) const {
    p->visit(f);
    f(std::string("codebook.entries"), p->codebook.entries);
  }
};

}  // namespace detail

template <class T>
struct FusedSample {
  Tensor<T> z;
  FuseOutput<T> out;
};

class Trainer {
 public:
  Trainer(TrainerConfig cfg, std::vector<SampleRecord> data) : cfg_(std::move(cfg)), data_(std::move(data)) {
    cfg_.validate();
    if (data_.empty()) throw ArgumentError("training set is empty");
    int max_class = -1;
    for (const SampleRecord& r : data_) {
      if (r.ir.height != data_[0].ir.height || r.ir.width != data_[0].ir.width)
        throw DimensionError("training images must share one size");
      for (const auto& b : r.boxes) max_class = std::max(max_class, b.class_id);
    }
    if (max_class >= 0 && static_cast<std::size_t>(max_class) >= cfg_.detector.num_classes)
      cfg_.detector.num_classes = static_cast<std::size_t>(max_class) + 1;
    cfg_.batch_size = std::min(cfg_.batch_size, data_.size());
    fusion_ = init_fusion_params<float>(cfg_.fusion, cfg_.seed);
    detector_ = init_detector_params<float>(cfg_.detector, cfg_.seed);
    detail::FusionWithCodebook{&fusion_}.visit([&](const std::string& n, Tensor<float>& t) { fusion_opt_.add(n, t); });
    detector_.visit([&](const std::string& n, Tensor<float>& t) { detector_opt_.add(n, t); });
    cache_.init(data_);
    for (const SampleRecord& r : data_) prompts_.push_back(tokenize(r.prompt));
  }

  const TrainerConfig& config() const { return cfg_; }
  FusionParams<float>& fusion() { return fusion_; }
  const FusionParams<float>& fusion() const { return fusion_; }
  DetectorParams<float>& detector() { return detector_; }
  const DetectorParams<float>& detector() const { return detector_; }
  const ZPrimeCache& cache() const { return cache_; }
  const std::vector<EpochLog>& log() const { return log_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t step() const { return step_; }
  double lr() const { return cfg_.lr_at(epoch_); }
  const std::vector<SampleRecord>& data() const { return data_; }

  // One Adam step on fusion parameters and codebook for L^f + g.
  LossReport lower_step(const std::vector<std::size_t>& batch, double lr) {
    LossReport report;
    if (!cfg_.toggles.any_lower()) return report;
    const detail::FusionWithCodebook view{&fusion_};
    const std::size_t n = detail::flat_size(view);
    std::vector<std::vector<float>> grads(batch.size(), std::vector<float>(n));
    std::vector<LossReport> reports(batch.size());
    std::vector<std::vector<std::size_t>> used(batch.size());
    parallel_for(batch.size(), [&](std::size_t k) {
      FusionParams<float> p = fork_params(fusion_);
      const std::size_t i = batch[k];
      const FuseOutput<float> out = fuse_sample(i, p);
      Tensor<float> loss = lower_objective(i, out, p, reports[k]);
      if (loss.defined() && loss.requires_grad()) backward(loss);
      detail::gather_grads(detail::FusionWithCodebook{&p}, grads[k].data());
      used[k] = out.indices;
    });
    for (const auto& r : reports) report.add(r);
    for (const auto& idx : used)
      for (std::size_t j : idx) ++fusion_.codebook.usage[j];
    fusion_opt_.zero_grad();
    detail::scatter_mean(view, grads);
    fusion_opt_.step(lr);
    ++step_;
    return report.mean();
  }

  // One Adam step on the detector for L^d on the current fused images. The
  // fused outputs are staged into the z' cache.
  double upper_step(const std::vector<std::size_t>& batch, double lr) {
    const std::size_t n = detail::flat_size(detector_);
    std::vector<std::vector<float>> grads(batch.size(), std::vector<float>(n));
    std::vector<double> losses(batch.size());
    parallel_for(batch.size(), [&](std::size_t k) {
      const std::size_t i = batch[k];
      Tensor<float> z;
      {
        NoGradGuard guard;
        z = fuse_sample(i, fusion_).z;
      }
      cache_.stage(i, z.values());
      if (!cfg_.toggles.use_det) return;
      DetectorParams<float> d = fork_params(detector_);
      const DetectionLoss<float> dl = detection_loss(detect_forward(z, d), {data_[i].boxes});
      losses[k] = dl.total.item();
      backward(dl.total);
      detail::gather_grads(d, grads[k].data());
    });
    if (!cfg_.toggles.use_det) return 0.0;
    detector_opt_.zero_grad();
    detail::scatter_mean(detector_, grads);
    detector_opt_.step(lr);
    ++step_;
    return std::accumulate(losses.begin(), losses.end(), 0.0) / double(batch.size());
  }

  // One joint Adam step on every parameter for L^f + g + L^d.
  LossReport direct_step(const std::vector<std::size_t>& batch, double lr) {
    LossReport report;
    const detail::FusionWithCodebook view{&fusion_};
    const std::size_t nf = detail::flat_size(view), nd = detail::flat_size(detector_);
    std::vector<std::vector<float>> gf(batch.size(), std::vector<float>(nf)), gd(batch.size(), std::vector<float>(nd));
    std::vector<LossReport> reports(batch.size());
    std::vector<std::vector<std::size_t>> used(batch.size());
    parallel_for(batch.size(), [&](std::size_t k) {
      FusionParams<float> p = fork_params(fusion_);
      DetectorParams<float> d = fork_params(detector_);
      const std::size_t i = batch[k];
      const FuseOutput<float> out = fuse_sample(i, p);
      cache_.stage(i, out.z.values());
      Tensor<float> loss = lower_objective(i, out, p, reports[k]);
      if (cfg_.toggles.use_det) {
        const DetectionLoss<float> dl = detection_loss(detect_forward(out.z, d), {data_[i].boxes});
        reports[k].l_d = dl.total.item();
        loss = loss.defined() ? loss + dl.total : dl.total;
      }
      if (loss.defined() && loss.requires_grad()) backward(loss);
      detail::gather_grads(detail::FusionWithCodebook{&p}, gf[k].data());
      detail::gather_grads(d, gd[k].data());
      used[k] = out.indices;
    });
    for (const auto& r : reports) {
      report.add(r);
      report.l_d += r.l_d;
    }
    if (!cfg_.toggles.any_lower() && !cfg_.toggles.use_det) return report.mean();
    for (const auto& idx : used)
      for (std::size_t j : idx) ++fusion_.codebook.usage[j];
    fusion_opt_.zero_grad();
    detector_opt_.zero_grad();
    detail::scatter_mean(view, gf);
    detail::scatter_mean(detector_, gd);
    fusion_opt_.step(lr);
    detector_opt_.step(lr);
    ++step_;
    LossReport m = report.mean();
    m.l_d = report.l_d / double(batch.size());
    return m;
  }

  // One pass over the training set in a seeded order; the z' cache is
  // refreshed at the end.
  EpochLog run_epoch() {
    const double lr = cfg_.lr_at(epoch_);
    std::vector<std::size_t> order(data_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(cfg_.seed, 0xe90c + epoch_));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    LossReport lower;
    double l_d = 0;
    std::size_t upper_count = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      const std::vector<std::size_t> batch(order.begin() + long(start),
                                           order.begin() + long(std::min(order.size(), start + cfg_.batch_size)));
      try {
        if (cfg_.mode == TrainMode::bilevel) {
          for (std::size_t s = 0; s < cfg_.lower_steps_per_upper; ++s) {
            LossReport r = lower_step(batch, lr);
            r.count = 1;
            lower.add(r);
          }
          l_d += upper_step(batch, lr);
        } else {
          LossReport r = direct_step(batch, lr);
          r.count = 1;
          lower.add(r);
          l_d += r.l_d;
        }
        ++upper_count;
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch_) + ", step " + std::to_string(step_) + ": " + e.what());
      }
    }
    cache_.commit();
    EpochLog row;
    row.epoch = epoch_;
    row.loss = lower.mean();
    row.loss.l_d = upper_count ? l_d / double(upper_count) : 0.0;
    const double vals[] = {row.loss.l_str, row.loss.l_cc, row.loss.l_f, row.loss.g, row.loss.l_d};
    for (double v : vals)
      if (!std::isfinite(v)) throw NumericError("non-finite loss at epoch " + std::to_string(epoch_));
    row.lr = lr;
    ++epoch_;
    row.step = step_;
    log_.push_back(row);
    return row;
  }

  // Runs the remaining epochs; `on_epoch` sees each finished row.
  template <class F>
  void train(F&& on_epoch) {
    while (epoch_ < cfg_.epochs) on_epoch(run_epoch());
  }
  void train() {
    train([](const EpochLog&) {});
  }

  FuseOutput<float> fuse_sample(std::size_t i, const FusionParams<float>& p) const {
    const SampleRecord& r = data_[i];
    return fuse(image_tensor<float>(r.ir), image_tensor<float>(r.vis), encode(prompts_[i], p.text), cfg_.fusion, p);
  }

  // Per-sample L^f + g; undefined when every lower-level term is disabled.
  Tensor<float> lower_objective(std::size_t i, const FuseOutput<float>& out, const FusionParams<float>& p,
                                LossReport& rep) const {
    const SampleRecord& r = data_[i];
    const TrainerConfig& c = cfg_;
    Tensor<float> loss;
    const Tensor<float> x = image_tensor<float>(r.ir), y = image_tensor<float>(r.vis);
    if (c.toggles.use_cc || c.toggles.use_str) {
      LossConfig lc;
      lc.use_cc = c.toggles.use_cc;
      lc.use_str = c.toggles.use_str;
      lc.literal_weights = c.literal_weights;
      const Tensor<float> zp = image_tensor<float>(r.ir.height, r.ir.width, cache_.get(i));
      const FeasibilityResult<float> f = feasibility_loss(out.z, zp, x, y, lc);
      rep.l_str = f.l_str;
      rep.l_cc = f.l_cc;
      rep.alpha1 = f.alpha1;
      rep.alpha2 = f.alpha2;
      rep.l_f = f.value.item();
      loss = f.value;
    }
    if (c.toggles.use_quant && c.fusion.use_codebook) {
      const QuantLoss<float> q = quantization_loss(out.features, p.codebook.entries, out.indices, float(c.beta));
      rep.g = q.value;
      loss = loss.defined() ? loss + q.objective : q.objective;
    }
    rep.count = 1;
    return loss;
  }

  void restore_progress(std::size_t epoch, std::size_t step) {
    epoch_ = epoch;
    step_ = step;
  }

 private:
  TrainerConfig cfg_;
  std::vector<SampleRecord> data_;
  std::vector<std::vector<std::size_t>> prompts_;
  FusionParams<float> fusion_;
  DetectorParams<float> detector_;
  Adam<float> fusion_opt_, detector_opt_;
  ZPrimeCache cache_;
  std::vector<EpochLog> log_;
  std::size_t epoch_ = 0, step_ = 0;
};

}  // namespace textfuse
