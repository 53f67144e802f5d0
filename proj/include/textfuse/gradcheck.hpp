// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of reverse-mode gradients, plus a
// suite covering every primitive, loss and network stage.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "textfuse/conv.hpp"
#include "textfuse/detector.hpp"
#include "textfuse/fusion_net.hpp"
#include "textfuse/losses.hpp"
#include "textfuse/ops.hpp"
#include "textfuse/random.hpp"

namespace textfuse {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor relative to max(1, |f|) at the default step: below it
  // central differences are dominated by rounding (about 2e-11 |f|).
  double floor = 1e-6;
  // Coordinates probed per input; 0 probes all of them.
  std::size_t max_coords = 0;
  std::uint64_t seed = 1;
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
  std::size_t coords = 0;
  std::size_t refined = 0;  // probes re-measured with a smaller step near a kink
  bool passed = true;
};

using ScalarFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// Compares analytic gradients of fn at `inputs` against central differences.
// Central differences are taken of `reference` when given, else of fn.
inline GradCheckResult check_gradients(const std::string& name, const ScalarFn& fn,
                                       std::vector<Tensor<double>> inputs, const GradCheckOptions& opt = {},
                                       const ScalarFn* reference = nullptr) {
  GradCheckResult res;
  res.name = name;
  for (auto& t : inputs) t.zero_grad();
  const Tensor<double> loss = fn(inputs);
  if (loss.numel() != 1) throw ContractError("check_gradients: function must return a scalar");
  backward(loss);
  Rng rng(opt.seed);
  NoGradGuard guard;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> coords(t.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opt.max_coords && coords.size() > opt.max_coords) {
      for (std::size_t i = 0; i < opt.max_coords; ++i)
        std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
      coords.resize(opt.max_coords);
    }
    auto data = t.mutable_data();
    for (std::size_t i : coords) {
      const double orig = data[i];
      const ScalarFn& f = reference ? *reference : fn;
      auto eval = [&](double x) {
        data[i] = x;
        return f(inputs).item();
      };
      const double ad = analytic.empty() ? 0.0 : analytic[i];
      const double mid = eval(orig);
      double h = opt.step, rel = 0;
      for (int refine = 0;; ++refine) {
        const double up = eval(orig + h), down = eval(orig - h);
        const double fd = (up - down) / (2 * h);
        // Rounding noise grows as the step shrinks.
        const double floor = opt.floor * std::max(1.0, std::abs(mid)) * (opt.step / h);
        rel = std::abs(ad - fd) / std::max(std::abs(fd), floor);
        // One-sided slopes that disagree mean the stencil straddles a kink
        // (ReLU, |x|); shrink the step until it no longer does.
        const double kink = std::abs((up - mid) - (mid - down)) / h;
        if (rel < opt.tolerance || refine == 2 || kink < opt.tolerance * std::max(std::abs(fd), floor)) break;
        h /= 10;
        ++res.refined;
      }
      data[i] = orig;
      res.max_rel_error = std::max(res.max_rel_error, rel);
      ++res.coords;
    }
  }
  res.passed = res.max_rel_error < opt.tolerance;
  return res;
}

namespace detail {

inline Tensor<double> rand_tensor(Rng& rng, Shape s, double lo = -1, double hi = 1) {
  std::vector<double> v(shape_numel(s));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(s), std::move(v), true);
}

// Values with |x| in [lo, hi] and random sign, away from kinks at zero.
inline Tensor<double> rand_away(Rng& rng, Shape s, double lo, double hi) {
  std::vector<double> v(shape_numel(s));
  for (double& x : v) x = rng.uniform(lo, hi) * (rng.uniform() < 0.5 ? -1 : 1);
  return Tensor<double>(std::move(s), std::move(v), true);
}

// Random linear read-out so that every output entry matters.
inline Tensor<double> readout(const Tensor<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(y.numel());
  for (double& v : w) v = rng.uniform(0.5, 1.5) * (rng.uniform() < 0.5 ? -1 : 1);
  return sum(y * Tensor<double>(y.shape(), std::move(w)));
}

}  // namespace detail

// Narrow network used by the stage checks; 8 x 8 inputs give a 2 x 2 token grid.
inline FusionConfig gradcheck_fusion_config() {
  FusionConfig cfg;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.codebook_size = 16;
  return cfg;
}

// Zero-initialised biases put ReLU inputs exactly on the kink wherever the
// input is zero; random offsets move every probe point off it.
template <class Params>
void randomize_biases(Params& p, std::uint64_t seed) {
  Rng rng(seed);
  p.visit([&](const std::string& name, Tensor<double>& t) {
    if (name.ends_with(".bias") || name.ends_with(".shift"))
      for (double& v : t.mutable_data()) v = rng.uniform(-0.2, 0.2);
  });
}

struct GradCheckCase {
  std::string name;
  // Builds instance `k` and checks it.
  std::function<GradCheckResult(std::uint64_t seed, const GradCheckOptions&)> run;
};

// Every differentiable primitive, loss and network stage, each as a
// generator of random instances.
inline std::vector<GradCheckCase> gradcheck_cases() {
  using detail::rand_away;
  using detail::rand_tensor;
  using detail::readout;
  using TD = Tensor<double>;
  using In = std::vector<TD>;
  std::vector<GradCheckCase> cases;
  auto unary = [&](const std::string& name, std::function<TD(const TD&)> f, double lo, double hi, bool away) {
    cases.push_back({name, [=](std::uint64_t seed, const GradCheckOptions& o) {
                       Rng rng(seed);
                       TD x = away ? rand_away(rng, {3, 4}, lo, hi) : rand_tensor(rng, {3, 4}, lo, hi);
                       return check_gradients(name, [=](const In& in) { return readout(f(in[0]), seed + 7); }, {x}, o);
                     }});
  };
  auto binary = [&](const std::string& name, std::function<TD(const TD&, const TD&)> f, Shape sa, Shape sb,
                    bool b_away) {
    cases.push_back({name, [=](std::uint64_t seed, const GradCheckOptions& o) {
                       Rng rng(seed);
                       TD a = rand_tensor(rng, sa);
                       TD b = b_away ? rand_away(rng, sb, 0.5, 1.5) : rand_tensor(rng, sb);
                       return check_gradients(
                           name, [=](const In& in) { return readout(f(in[0], in[1]), seed + 7); }, {a, b}, o);
                     }});
  };

  binary("add", [](const TD& a, const TD& b) { return a + b; }, {2, 3, 4}, {2, 3, 4}, false);
  binary("add_broadcast", [](const TD& a, const TD& b) { return a + b; }, {2, 3, 4}, {3, 1}, false);
  binary("sub", [](const TD& a, const TD& b) { return a - b; }, {2, 3, 4}, {4}, false);
  binary("mul", [](const TD& a, const TD& b) { return a * b; }, {2, 3, 4}, {2, 3, 4}, false);
  binary("mul_broadcast", [](const TD& a, const TD& b) { return a * b; }, {2, 3, 4, 4}, {3, 1, 1}, false);
  binary("div", [](const TD& a, const TD& b) { return a / b; }, {3, 4}, {3, 4}, true);
  binary("mul_scalar_tensor", [](const TD& a, const TD& b) { return a * b; }, {3, 4}, {1}, false);
  unary("add_scalar", [](const TD& x) { return x + 0.75; }, -1, 1, false);
  unary("mul_scalar", [](const TD& x) { return x * -1.3; }, -1, 1, false);
  unary("rsub_scalar", [](const TD& x) { return 2.0 - x; }, -1, 1, false);
  unary("relu", [](const TD& x) { return relu(x); }, 0.05, 1, true);
  unary("sigmoid", [](const TD& x) { return sigmoid(x); }, -3, 3, false);
  unary("exp", [](const TD& x) { return exp(x); }, -2, 2, false);
  unary("log", [](const TD& x) { return log(x); }, 0.2, 3, false);
  unary("sqrt", [](const TD& x) { return sqrt(x); }, 0.2, 3, false);
  unary("abs", [](const TD& x) { return abs(x); }, 0.05, 1, true);
  unary("square", [](const TD& x) { return square(x); }, -2, 2, false);
  unary("smooth_l1", [](const TD& x) { return smooth_l1(x); }, -2.5, 2.5, false);
  unary("sum", [](const TD& x) { return sum(x) * 1.0; }, -1, 1, false);
  unary("mean", [](const TD& x) { return mean(x); }, -1, 1, false);
  unary("softmax", [](const TD& x) { return softmax(x); }, -2, 2, false);
  unary("log_softmax", [](const TD& x) { return log_softmax(x); }, -2, 2, false);
  unary("layer_norm", [](const TD& x) { return layer_norm(x); }, -2, 2, false);
  unary("max_last", [](const TD& x) { return max_last(x); }, -2, 2, false);
  unary("reshape", [](const TD& x) { return reshape(x, {2, 6}); }, -1, 1, false);
  unary("transpose", [](const TD& x) { return transpose(x); }, -1, 1, false);
  unary("slice", [](const TD& x) { return slice(x, 1, 1, 2); }, -1, 1, false);
  unary("bce_with_logits", [](const TD& x) {
    std::vector<double> t(x.numel());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = (i % 3) / 2.0;
    return bce_with_logits(x, t);
  }, -3, 3, false);

  cases.push_back({"concat", [](std::uint64_t seed, const GradCheckOptions& o) {
                     Rng rng(seed);
                     return check_gradients("concat",
                                            [seed](const In& in) { return readout(concat(std::vector<TD>{in[0], in[1]}, 1), seed); },
                                            {rand_tensor(rng, {2, 3, 2}), rand_tensor(rng, {2, 1, 2})}, o);
                   }});
  binary("matmul", [](const TD& a, const TD& b) { return matmul(a, b); }, {3, 4}, {4, 2}, false);
  binary("matmul_batched", [](const TD& a, const TD& b) { return matmul(a, b); }, {2, 3, 4}, {2, 4, 5}, false);
  binary("matmul_shared_rhs", [](const TD& a, const TD& b) { return matmul(a, b); }, {2, 3, 4}, {4, 2}, false);
  cases.push_back({"gather_rows", [](std::uint64_t seed, const GradCheckOptions& o) {
                     Rng rng(seed);
                     return check_gradients("gather_rows",
                                            [seed](const In& in) { return readout(gather_rows(in[0], {2, 0, 2, 3}), seed); },
                                            {rand_tensor(rng, {4, 3})}, o);
                   }});
  auto conv_case = [&](const std::string& name, std::size_t k, std::size_t stride, std::size_t pad) {
    cases.push_back({name, [=](std::uint64_t seed, const GradCheckOptions& o) {
                       Rng rng(seed);
                       return check_gradients(
                           name, [=](const In& in) { return readout(conv2d(in[0], in[1], in[2], stride, pad), seed); },
                           {rand_tensor(rng, {2, 2, 5, 5}), rand_tensor(rng, {3, 2, k, k}), rand_tensor(rng, {3})}, o);
                     }});
  };
  conv_case("conv2d_3x3", 3, 1, 1);
  conv_case("conv2d_3x3_stride2", 3, 2, 1);
  conv_case("conv2d_1x1", 1, 1, 0);
  conv_case("conv2d_valid", 3, 1, 0);
  cases.push_back({"avg_pool2d", [](std::uint64_t seed, const GradCheckOptions& o) {
                     Rng rng(seed);
                     return check_gradients("avg_pool2d", [seed](const In& in) { return readout(avg_pool2d(in[0], 2), seed); },
                                            {rand_tensor(rng, {1, 2, 4, 4})}, o);
                   }});
  cases.push_back({"upsample_nearest", [](std::uint64_t seed, const GradCheckOptions& o) {
                     Rng rng(seed);
                     return check_gradients("upsample_nearest",
                                            [seed](const In& in) { return readout(upsample_nearest(in[0], 2), seed); },
                                            {rand_tensor(rng, {1, 2, 3, 3})}, o);
                   }});
  cases.push_back({"quantize_straight_through", [](std::uint64_t seed, const GradCheckOptions& o) {
                     Rng rng(seed);
                     const TD entries = rand_tensor(rng, {5, 4}).detach();
                     const TD z0 = rand_tensor(rng, {1, 3, 4});
                     const QuantizeResult<double> base = quantize(z0.detach(), entries);
                     std::vector<double> offset(z0.numel());
                     for (std::size_t i = 0; i < offset.size(); ++i) offset[i] = base.quantized[i] - z0[i];
                     return check_gradients(
                         "quantize_straight_through",
                         [=](const In& in) { return readout(quantize(in[0], entries, &offset).quantized, seed); }, {z0}, o);
                   }});

  // Losses.
  auto img = [](Rng& rng, std::size_t h, bool grad) {
    TD t = rand_tensor(rng, {1, 1, h, h}, 0.05, 0.95);
    return grad ? t : t.detach();
  };
  cases.push_back({"ssim", [img](std::uint64_t seed, const GradCheckOptions& o) {
                     Rng rng(seed);
                     return check_gradients("ssim", [](const In& in) { return ssim(in[0], in[1]); },
                                            {img(rng, 12, true), img(rng, 12, true)}, o);
                   }});
  cases.push_back({"structure_loss", [img](std::uint64_t seed, const GradCheckOptions& o) {
                     Rng rng(seed);
                     const TD zp = img(rng, 12, false);
                     return check_gradients("structure_loss", [zp](const In& in) { return structure_loss(in[0], zp).total; },
                                            {img(rng, 12, true)}, o);
                   }});
  cases.push_back({"content_consistency_loss", [img](std::uint64_t seed, const GradCheckOptions& o) {
                     Rng rng(seed);
                     const TD x = img(rng, 12, false), y = img(rng, 12, false);
                     return check_gradients("content_consistency_loss",
                                            [x, y](const In& in) { return content_consistency_loss(in[0], x, y); },
                                            {img(rng, 12, true)}, o);
                   }});
  cases.push_back({"feasibility_loss", [img](std::uint64_t seed, const GradCheckOptions& o) {
                     Rng rng(seed);
                     const TD x = img(rng, 12, false), y = img(rng, 12, false), zp = img(rng, 12, false);
                     const TD z0 = img(rng, 12, true);
                     // The weights are constants of the step; freeze them at the base point.
                     const FeasibilityResult<double> base = feasibility_loss(z0.detach(), zp, x, y);
                     const std::pair<double, double> alpha{base.alpha1, base.alpha2};
                     return check_gradients(
                         "feasibility_loss",
                         [=](const In& in) { return feasibility_loss(in[0], zp, x, y, LossConfig{}, &alpha).value; }, {z0},
                         o);
                   }});
  // Stop-gradients hide one side from finite differences, so each side is
  // compared with the plain squared-distance formula in its own argument.
  auto quant_case = [&](const std::string& name, bool codebook_side) {
    cases.push_back({name, [=](std::uint64_t seed, const GradCheckOptions& o) {
                       Rng rng(seed);
                       TD feats = rand_tensor(rng, {1, 6, 4});
                       TD entries = rand_tensor(rng, {5, 4});
                       const auto idx = quantize(feats.detach(), entries.detach()).indices;
                       const double beta = 0.25;
                       const TD fixed = codebook_side ? feats.detach() : entries.detach();
                       auto args = [=](const In& in) {
                         return codebook_side ? std::pair{fixed, in[0]} : std::pair{in[0], fixed};
                       };
                       const ScalarFn objective = [=](const In& in) {
                         const auto [f, e] = args(in);
                         return quantization_loss(f, e, idx, beta).objective;
                       };
                       const ScalarFn reference = [=](const In& in) {
                         const auto [f, e] = args(in);
                         const TD d = reshape(f, {idx.size(), 4}) - gather_rows(e, idx);
                         return sum(square(d)) * ((codebook_side ? 1.0 : beta) / double(idx.size()));
                       };
                       return check_gradients(name, objective, {codebook_side ? entries : feats}, o, &reference);
                     }});
  };
  quant_case("quantization_loss_codebook", true);
  quant_case("quantization_loss_commitment", false);
  cases.push_back({"detection_loss", [](std::uint64_t seed, const GradCheckOptions& o) {
                     Rng rng(seed);
                     std::vector<GroundTruthBox> boxes{{1, 0.3, 0.6, 0.2, 0.25}, {0, 0.8, 0.2, 0.1, 0.15}};
                     return check_gradients("detection_loss",
                                            [boxes](const In& in) { return detection_loss(in[0], {boxes}).total; },
                                            {rand_tensor(rng, {1, 8, 4, 4}, -2, 2)}, o);
                   }});

  cases.push_back({"diamond_graph", [](std::uint64_t seed, const GradCheckOptions& o) {
                     Rng rng(seed);
                     return check_gradients("diamond_graph",
                                            [seed](const In& in) {
                                              const TD y = in[0] * in[1];
                                              return readout(y * y + exp(y) - y * in[0], seed);
                                            },
                                            {rand_tensor(rng, {3, 4}), rand_tensor(rng, {3, 4})}, o);
                   }});

  // Network stages on a narrow configuration, each input probed on a random
  // subset of coordinates.
  auto net_case = [&](const std::string& name, std::function<TD(const FusionParams<double>&, const In&)> f,
                      std::function<In(const FusionParams<double>&, Rng&)> leaves) {
    cases.push_back({name, [=](std::uint64_t seed, const GradCheckOptions& o) {
                       const FusionConfig cfg = gradcheck_fusion_config();
                       FusionParams<double> p = init_fusion_params<double>(cfg, seed);
                       randomize_biases(p, seed);
                       Rng rng(mix_seed(seed, 0x9c));
                       GradCheckOptions oo = o;
                       oo.max_coords = o.max_coords ? o.max_coords : 8;
                       return check_gradients(name, [=](const In& in) { return readout(f(p, in), seed); },
                                              leaves(p, rng), oo);
                     }});
  };
  net_case(
      "extract_features", [](const FusionParams<double>& p, const In& in) { return extract_features(in[0], p.ir); },
      [](const FusionParams<double>& p, Rng& rng) {
        return In{rand_tensor(rng, {1, 1, 8, 8}, 0, 1), p.ir.stem.weight, p.ir.blocks[2].weight, p.ir.blocks[5].bias,
                  p.ir.reducers[1].weight, p.ir.scale[3], p.ir.shift[5]};
      });
  net_case(
      "self_attend",
      [](const FusionParams<double>& p, const In& in) { return self_attend(in[0], p.self_att, gradcheck_fusion_config().heads); },
      [](const FusionParams<double>& p, Rng& rng) {
        return In{rand_tensor(rng, {1, 4, 8}), p.self_att.wq, p.self_att.wk, p.self_att.wv, p.self_att.wo};
      });
  net_case(
      "cross_attend",
      [](const FusionParams<double>& p, const In& in) {
        return cross_attend(in[0], spatialize(encode(tokenize("a person near a car"), p.text).features, p.text.spatial),
                            p.cross_att, gradcheck_fusion_config().heads);
      },
      [](const FusionParams<double>& p, Rng& rng) {
        return In{rand_tensor(rng, {1, 4, 8}), p.cross_att.wq, p.cross_att.wk, p.cross_att.wv, p.cross_att.wo,
                  p.text.proj, p.text.spatial};
      });
  net_case(
      "decode", [](const FusionParams<double>& p, const In& in) { return decode(in[0], 2, 2, 4, p.decoder); },
      [](const FusionParams<double>& p, Rng& rng) {
        return In{rand_tensor(rng, {1, 4, 8}), p.decoder.hidden.weight, p.decoder.hidden.bias, p.decoder.output.weight,
                  p.decoder.output.bias};
      });
  cases.push_back({"fuse", [](std::uint64_t seed, const GradCheckOptions& o) {
                     const FusionConfig cfg = gradcheck_fusion_config();
                     FusionParams<double> p = init_fusion_params<double>(cfg, seed);
                     randomize_biases(p, seed);
                     Rng rng(mix_seed(seed, 0x9c));
                     In leaves{rand_tensor(rng, {1, 1, 8, 8}, 0, 1), rand_tensor(rng, {1, 1, 8, 8}, 0, 1)};
                     p.visit([&](const std::string&, const TD& t) { leaves.push_back(t); });
                     std::vector<double> offset;
                     {
                       // Straight-through: both sides see quantisation as a fixed shift.
                       NoGradGuard guard;
                       const auto prompt = encode(tokenize("highlight the person"), p.text);
                       const FuseOutput<double> base = fuse(leaves[0], leaves[1], prompt, cfg, p);
                       for (std::size_t i = 0; i < base.features.numel(); ++i)
                         offset.push_back(base.quantized[i] - base.features[i]);
                     }
                     GradCheckOptions oo = o;
                     oo.max_coords = o.max_coords ? o.max_coords : 8;
                     return check_gradients("fuse",
                                            [=](const In& in) {
                                              const auto prompt = encode(tokenize("highlight the person"), p.text);
                                              return readout(fuse(in[0], in[1], prompt, cfg, p, FuseOptions{}, &offset).z, seed);
                                            },
                                            leaves, oo);
                   }});
  cases.push_back({"detect_forward", [](std::uint64_t seed, const GradCheckOptions& o) {
                     DetectorConfig cfg;
                     cfg.width1 = 4;
                     cfg.width2 = 4;
                     cfg.width3 = 8;
                     DetectorParams<double> p = init_detector_params<double>(cfg, seed);
                     randomize_biases(p, seed);
                     Rng rng(seed);
                     In leaves{rand_tensor(rng, {1, 1, 16, 16}, 0, 1)};
                     p.visit([&](const std::string&, const TD& t) { leaves.push_back(t); });
                     GradCheckOptions oo = o;
                     oo.max_coords = o.max_coords ? o.max_coords : 16;
                     return check_gradients("detect_forward",
                                            [p, seed](const In& in) { return readout(detect_forward(in[0], p), seed); },
                                            leaves, oo);
                   }});
  return cases;
}

// Runs every case on `instances` seeds derived from `seed`.
inline std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed, std::size_t instances = 10,
                                                        GradCheckOptions opt = {}) {
  std::vector<GradCheckResult> out;
  for (const GradCheckCase& c : gradcheck_cases()) {
    GradCheckResult agg;
    agg.name = c.name;
    for (std::size_t k = 0; k < instances; ++k) {
      opt.seed = mix_seed(seed, k);
      const GradCheckResult r = c.run(mix_seed(mix_seed(seed, fnv1a64(c.name)), k), opt);
      agg.max_rel_error = std::max(agg.max_rel_error, r.max_rel_error);
      agg.coords += r.coords;
      agg.refined += r.refined;
      agg.passed = agg.passed && r.passed;
    }
    out.push_back(agg);
  }
  return out;
}

}  // namespace textfuse
