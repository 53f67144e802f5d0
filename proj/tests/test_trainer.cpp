// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "fixtures.hpp"
#include "textfuse/adam.hpp"
#include "textfuse/checkpoint.hpp"
#include "textfuse/trainer.hpp"

using namespace textfuse;
using textfuse::test::snapshot;
using textfuse::test::tiny_config;
using textfuse::test::tiny_data;

namespace {

std::vector<float> codebook_of(const Trainer& t) { return t.fusion().codebook.entries.values(); }

double mean_objectness(const Trainer& t) {
  NoGradGuard guard;
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < t.data().size(); ++i) {
    const Tensor<float> raw = detect_forward(t.fuse_sample(i, t.fusion()).z, t.detector());
    const std::size_t cells = raw.dim(2) * raw.dim(3);
    for (std::size_t k = 0; k < cells; ++k) s += raw[k];
    n += cells;
  }
  return s / double(n);
}

class ThreadsEnv {
 public:
  explicit ThreadsEnv(const char* v) {
    const char* old = std::getenv("TEXTFUSE_THREADS");
    had_ = old != nullptr;
    if (had_) old_ = old;
    ::setenv("TEXTFUSE_THREADS", v, 1);
  }
  ~ThreadsEnv() {
    if (had_)
      ::setenv("TEXTFUSE_THREADS", old_.c_str(), 1);
    else
      ::unsetenv("TEXTFUSE_THREADS");
  }

 private:
  bool had_ = false;
  std::string old_;
};

}  // namespace

// ---- Adam ------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParameters) {
  Tensor<double> p({3}, {1.0, -2.0, 0.5}, true);
  Adam<double> opt;
  opt.add("p", p);
  p.zero_grad();
  opt.step(0.1);
  EXPECT_EQ(p.values(), (std::vector<double>{1.0, -2.0, 0.5}));
  EXPECT_EQ(opt.timestep(), 1u);
}

TEST(Adam, FirstStepClosedForm) {
  const std::vector<double> init{1.0, -2.0, 0.5, 3.0}, g{0.3, -4.0, 1e-9, 0.0};
  Tensor<double> p({4}, init, true);
  Adam<double> opt;
  opt.add("p", p);
  std::copy(g.begin(), g.end(), p.mutable_grad().begin());
  const double lr = 0.01;
  opt.step(lr);
  for (std::size_t i = 0; i < 4; ++i) {
    // t = 1: m_hat = g, v_hat = g^2.
    const double want = init[i] - lr * g[i] / (std::abs(g[i]) + 1e-8);
    EXPECT_NEAR(p[i], want, 1e-15) << i;
  }
}

TEST(Adam, MatchesRecurrenceOverSeveralSteps) {
  Tensor<double> p({1}, {0.0}, true);
  Adam<double> opt;
  opt.add("p", p);
  double m = 0, v = 0, x = 0;
  const double gs[] = {1.0, -0.5, 2.0, 0.25};
  for (int t = 1; t <= 4; ++t) {
    p.mutable_grad()[0] = gs[t - 1];
    opt.step(0.1);
    m = 0.9 * m + 0.1 * gs[t - 1];
    v = 0.999 * v + 0.001 * gs[t - 1] * gs[t - 1];
    x -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(p[0], x, 1e-14);
  }
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  Tensor<float> a({2}, {1, 2}, true), b({2}, {3, 4}, true);
  Adam<float> opt;
  opt.add("alpha", a);
  opt.add("decoder.output.weight", b);
  a.zero_grad();
  b.zero_grad();
  b.mutable_grad()[1] = std::nanf("");
  try {
    opt.step(0.1);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.output.weight"), std::string::npos);
  }
  EXPECT_EQ(a.values(), (std::vector<float>{1, 2}));
  EXPECT_EQ(opt.timestep(), 0u);
}

TEST(Adam, RejectsNonLeaf) {
  Tensor<float> a({2}, {1, 2}, true);
  Adam<float> opt;
  EXPECT_THROW(opt.add("x", a * 2.0f), ContractError);
}

// ---- configuration ---------------------------------------------------------

TEST(TrainerConfig, Validation) {
  TrainerConfig c = tiny_config();
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = tiny_config();
  c.lr0 = 0;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = tiny_config();
  c.gamma = 1.5;
  EXPECT_THROW(c.validate(), ArgumentError);
  c.gamma = 1.0;
  EXPECT_NO_THROW(c.validate());
  EXPECT_THROW(Trainer(tiny_config(), {}), ArgumentError);
  EXPECT_EQ(parse_mode("direct"), TrainMode::direct);
  EXPECT_THROW(parse_mode("joint"), ArgumentError);
  const TrainerConfig d;
  EXPECT_EQ(d.epochs, 300u);
  EXPECT_EQ(d.batch_size, 64u);
  EXPECT_EQ(d.lr0, 1e-4);
  EXPECT_EQ(d.gamma, 0.99);
  EXPECT_EQ(d.lower_steps_per_upper, 5u);
}

TEST(TrainerConfig, LearningRateSchedule) {
  TrainerConfig c = tiny_config();
  c.epochs = 3;
  Trainer t(c, tiny_data(1, 3));
  t.train();
  for (std::size_t e = 0; e < 3; ++e) EXPECT_EQ(t.log()[e].lr, c.lr0 * std::pow(c.gamma, double(e)));
  EXPECT_EQ(t.lr(), c.lr0 * std::pow(c.gamma, 3.0));
}

TEST(TrainerConfig, BatchClampsToDataset) {
  TrainerConfig c = tiny_config();
  c.batch_size = 64;
  EXPECT_EQ(Trainer(c, tiny_data(1, 3)).config().batch_size, 3u);
}

TEST(TrainerConfig, ClassCountGrowsToLabels) {
  TrainerConfig c = tiny_config();
  c.detector.num_classes = 1;
  EXPECT_EQ(Trainer(c, tiny_data(2, 6, 32, 5)).config().detector.num_classes, 5u);
}

// ---- steps -----------------------------------------------------------------

TEST(Steps, LowerNeverTouchesDetector) {
  Trainer t(tiny_config(), tiny_data(3, 4));
  const auto det = snapshot(t.detector());
  const auto fus = snapshot(t.fusion());
  const auto cb = codebook_of(t);
  for (int k = 0; k < 3; ++k) {
    const LossReport r = t.lower_step({0, 1, 2}, 1e-3);
    for (double v : {r.l_f, r.g, r.l_str, r.l_cc}) EXPECT_TRUE(std::isfinite(v));
  }
  EXPECT_EQ(snapshot(t.detector()), det);
  EXPECT_NE(snapshot(t.fusion()), fus);
  EXPECT_NE(codebook_of(t), cb);
}

TEST(Steps, UpperNeverTouchesFusion) {
  Trainer t(tiny_config(), tiny_data(4, 4));
  const auto fus = snapshot(t.fusion());
  const auto cb = codebook_of(t);
  const auto det = snapshot(t.detector());
  for (int k = 0; k < 3; ++k) EXPECT_TRUE(std::isfinite(t.upper_step({1, 3}, 1e-3)));
  EXPECT_EQ(snapshot(t.fusion()), fus);
  EXPECT_EQ(codebook_of(t), cb);
  EXPECT_NE(snapshot(t.detector()), det);
}

TEST(Steps, ZeroLearningRateChangesNothing) {
  Trainer t(tiny_config(), tiny_data(5, 3));
  const auto det = snapshot(t.detector());
  const auto fus = snapshot(t.fusion());
  t.upper_step({0, 1, 2}, 0.0);
  t.lower_step({0, 1, 2}, 0.0);
  EXPECT_EQ(snapshot(t.detector()), det);
  EXPECT_EQ(snapshot(t.fusion()), fus);
}

TEST(Steps, ExactCodebookWithFeasibilityOffIsStationary) {
  TrainerConfig c = tiny_config();
  c.fusion.codebook_size = 64;  // one entry per attention token of a 32x32 image
  c.toggles.use_cc = false;
  c.toggles.use_str = false;
  Trainer t(c, tiny_data(6, 1));
  {
    NoGradGuard guard;
    const auto out = t.fuse_sample(0, t.fusion());
    auto e = t.fusion().codebook.entries.mutable_data();
    std::copy(out.features.data().begin(), out.features.data().end(), e.begin());
  }
  const auto fus = snapshot(t.fusion());
  const auto cb = codebook_of(t);
  const LossReport r = t.lower_step({0}, 1e-2);
  EXPECT_EQ(r.g, 0.0);
  EXPECT_EQ(snapshot(t.fusion()), fus);
  EXPECT_EQ(codebook_of(t), cb);
}

TEST(Steps, FiniteLossesAcrossSeeds) {
  for (std::uint64_t seed : {11, 12, 13}) {
    Trainer t(tiny_config(seed), tiny_data(seed, 4));
    for (int k = 0; k < 4; ++k) {
      const LossReport r = t.lower_step({0, 1, 2, 3}, 1e-3);
      ASSERT_TRUE(std::isfinite(r.l_f) && std::isfinite(r.g)) << "seed " << seed;
      ASSERT_TRUE(std::isfinite(t.upper_step({0, 1, 2, 3}, 1e-3)));
    }
  }
}

TEST(Steps, UpperStepLowersObjectnessWithoutObjects) {
  auto data = tiny_data(7, 3);
  for (auto& r : data) r.boxes.clear();
  TrainerConfig c = tiny_config();
  c.detector.objectness_prior = 0.5;
  Trainer t(c, data);
  std::vector<double> track{mean_objectness(t)};
  for (int k = 0; k < 50; ++k) {
    t.upper_step({0, 1, 2}, 1e-3);
    track.push_back(mean_objectness(t));
  }
  std::vector<double> diffs;
  for (std::size_t k = 1; k < track.size(); ++k) diffs.push_back(track[k] - track[k - 1]);
  std::nth_element(diffs.begin(), diffs.begin() + long(diffs.size() / 2), diffs.end());
  EXPECT_LT(diffs[diffs.size() / 2], 0.0);
  EXPECT_LT(track.back(), track.front());
}

// ---- epochs ----------------------------------------------------------------

TEST(Epochs, AllLossesOffIsANoOp) {
  for (TrainMode mode : {TrainMode::bilevel, TrainMode::direct}) {
    TrainerConfig c = tiny_config();
    c.mode = mode;
    c.toggles = {false, false, false, false};
    Trainer t(c, tiny_data(8, 5));
    const auto det = snapshot(t.detector());
    const auto fus = snapshot(t.fusion());
    const auto cb = codebook_of(t);
    t.train();
    EXPECT_EQ(snapshot(t.detector()), det);
    EXPECT_EQ(snapshot(t.fusion()), fus);
    EXPECT_EQ(codebook_of(t), cb);
  }
}

TEST(Epochs, StepCountsPerMode) {
  TrainerConfig c = tiny_config();
  c.epochs = 1;
  c.batch_size = 2;
  Trainer b(c, tiny_data(9, 5));
  b.train();
  EXPECT_EQ(b.step(), 3u * (c.lower_steps_per_upper + 1));
  c.mode = TrainMode::direct;
  Trainer d(c, tiny_data(9, 5));
  d.train();
  EXPECT_EQ(d.step(), 3u);
}

TEST(Epochs, CacheStartsAtMaxAndLagsOneEpoch) {
  TrainerConfig c = tiny_config();
  c.batch_size = 3;  // one batch per epoch, so the upper step sees the final fusion state
  const auto data = tiny_data(10, 3);
  Trainer t(c, data);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < data[i].ir.size(); ++k)
      ASSERT_EQ(t.cache().get(i)[k], std::max(data[i].ir.values[k], data[i].vis.values[k]));
  for (int e = 0; e < 2; ++e) {
    const auto before = t.cache().digest();
    t.run_epoch();
    EXPECT_NE(t.cache().digest(), before);
    NoGradGuard guard;
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(t.cache().get(i), t.fuse_sample(i, t.fusion()).z.values());
  }
}

TEST(Epochs, TwoEpochRunIsReproducible) {
  for (TrainMode mode : {TrainMode::bilevel, TrainMode::direct}) {
    TrainerConfig c = tiny_config(21);
    c.mode = mode;
    Trainer a(c, tiny_data(21, 5)), b(c, tiny_data(21, 5));
    a.train();
    b.train();
    EXPECT_EQ(serialize_checkpoint(make_checkpoint(a)), serialize_checkpoint(make_checkpoint(b)));
    EXPECT_EQ(format_log_csv(a.log()), format_log_csv(b.log()));
  }
}

TEST(Epochs, ThreadCountDoesNotChangeResults) {
  std::string one, many;
  {
    ThreadsEnv env("1");
    Trainer t(tiny_config(22), tiny_data(22, 5));
    t.train();
    one = serialize_checkpoint(make_checkpoint(t));
  }
  {
    ThreadsEnv env("3");
    Trainer t(tiny_config(22), tiny_data(22, 5));
    t.train();
    many = serialize_checkpoint(make_checkpoint(t));
  }
  EXPECT_EQ(one, many);
}

TEST(Epochs, LogCsvSchema) {
  Trainer t(tiny_config(), tiny_data(23, 3));
  t.train();
  const std::string csv = format_log_csv(t.log());
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,step,l_str,l_cc,l_f,g,l_d,alpha1,alpha2,lr");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  const std::string row = csv.substr(csv.find('\n') + 1);
  EXPECT_EQ(std::count(row.begin(), row.begin() + long(row.find('\n')), ','), 9);
  EXPECT_EQ(row.substr(0, 2), "0,");
}

TEST(Epochs, OnEpochCallbackSeesEveryRow) {
  Trainer t(tiny_config(), tiny_data(24, 3));
  std::vector<std::size_t> seen;
  t.train([&](const EpochLog& r) { seen.push_back(r.epoch); });
  EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1}));
  t.train();  // already finished
  EXPECT_EQ(t.log().size(), 2u);
}
