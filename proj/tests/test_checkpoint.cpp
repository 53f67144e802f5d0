// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "fixtures.hpp"
#include "support.hpp"
#include "textfuse/checkpoint.hpp"
#include "textfuse/evaluate.hpp"

using namespace textfuse;
using textfuse::test::TempDir;
using textfuse::test::tiny_config;
using textfuse::test::tiny_data;

namespace {

const std::string& trained_blob() {
  static const std::string blob = [] {
    Trainer t(tiny_config(31), tiny_data(31, 4));
    t.train();
    return serialize_checkpoint(make_checkpoint(t));
  }();
  return blob;
}

}  // namespace

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const std::string& a = trained_blob();
  ASSERT_EQ(a.substr(0, 4), "TXF1");
  EXPECT_EQ(serialize_checkpoint(deserialize_checkpoint(a)), a);
}

TEST(Checkpoint, FileRoundTrip) {
  TempDir dir;
  const Checkpoint c = deserialize_checkpoint(trained_blob());
  save_checkpoint(dir / "m.txf", c);
  EXPECT_EQ(serialize_checkpoint(load_checkpoint(dir / "m.txf")), trained_blob());
  EXPECT_THROW(load_checkpoint(dir / "missing.txf"), IoError);
}

TEST(Checkpoint, RestoresConfigAndState) {
  Trainer t(tiny_config(32), tiny_data(32, 3));
  t.train();
  const Checkpoint c = deserialize_checkpoint(serialize_checkpoint(make_checkpoint(t)));
  EXPECT_EQ(c.fusion_config.channels, t.config().fusion.channels);
  EXPECT_EQ(c.fusion_config.codebook_size, t.config().fusion.codebook_size);
  EXPECT_EQ(c.detector_config.num_classes, t.config().detector.num_classes);
  EXPECT_EQ(c.state.epoch, 2u);
  EXPECT_EQ(c.state.step, t.step());
  EXPECT_EQ(c.state.lr, t.lr());
  EXPECT_EQ(c.state.zprime_digest, t.cache().digest());
  EXPECT_EQ(c.fusion.codebook.entries.values(), t.fusion().codebook.entries.values());
  EXPECT_EQ(c.fusion.codebook.usage, t.fusion().codebook.usage);
}

TEST(Checkpoint, RejectsBadMagic) {
  std::string b = trained_blob();
  std::memcpy(b.data(), "XXXX", 4);
  EXPECT_THROW(deserialize_checkpoint(b), FormatError);
}

TEST(Checkpoint, RejectsUnknownVersion) {
  std::string b = trained_blob();
  const unsigned char v[4] = {0xe7, 0x03, 0, 0};  // 999
  std::memcpy(b.data() + 4, v, 4);
  EXPECT_THROW(deserialize_checkpoint(b), VersionError);
  try {
    deserialize_checkpoint(b);
  } catch (const VersionError& e) {
    EXPECT_NE(std::string(e.what()).find("999"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, RejectsTruncationAndTrailingBytes) {
  const std::string& b = trained_blob();
  for (std::size_t cut : {std::size_t{3}, std::size_t{9}, b.size() / 2, b.size() - 1})
    EXPECT_THROW(deserialize_checkpoint(b.substr(0, cut)), std::runtime_error) << cut;
  EXPECT_THROW(deserialize_checkpoint(b.substr(0, b.size() / 2)), IoError);
  EXPECT_THROW(deserialize_checkpoint(b + "x"), FormatError);
}

TEST(Inference, MatchesTrainerFusion) {
  Trainer t(tiny_config(33), tiny_data(33, 3));
  t.train();
  const Checkpoint c = deserialize_checkpoint(serialize_checkpoint(make_checkpoint(t)));
  NoGradGuard guard;
  for (std::size_t i = 0; i < 3; ++i) {
    const InferenceResult r = infer(c, t.data()[i].ir, t.data()[i].vis, t.data()[i].prompt);
    EXPECT_EQ(r.fused.values, t.fuse_sample(i, t.fusion()).z.values());
    for (std::size_t k = 1; k < r.detections.size(); ++k)
      EXPECT_GE(r.detections[k - 1].confidence, r.detections[k].confidence);
  }
  const auto& d = t.data()[0];
  Image small = d.vis;
  small.height = 16;
  small.values.resize(16 * small.width);
  EXPECT_THROW(infer(c, d.ir, small, d.prompt), DimensionError);
}

TEST(Evaluate, IsDeterministicAndWellFormed) {
  const Checkpoint c = deserialize_checkpoint(trained_blob());
  const auto data = tiny_data(34, 4);
  const EvalReport a = evaluate(c, data), b = evaluate(c, data);
  EXPECT_EQ(format_report_csv(a), format_report_csv(b));
  ASSERT_EQ(a.fused.size(), 4u);
  for (const Image& img : a.fused)
    ASSERT_EQ(quantize_8bit(img).values, img.values);
  double sf = 0;
  for (const auto& m : a.per_image) sf += m.sf;
  EXPECT_NEAR(a.mean.sf, sf / 4, 1e-12);
  const std::string csv = format_report_csv(a);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "SF,EN,SD,AG,mAP,AP_person,AP_car,AP_bus");
  EXPECT_THROW(evaluate(c, {}), ArgumentError);
}

TEST(Evaluate, ClassWithoutGroundTruthIsNan) {
  const Checkpoint c = deserialize_checkpoint(trained_blob());
  auto data = tiny_data(35, 2);
  for (auto& r : data) std::erase_if(r.boxes, [](const GroundTruthBox& b) { return b.class_id == 2; });
  const std::string csv = format_report_csv(evaluate(c, data));
  const std::string row = csv.substr(csv.find('\n') + 1);
  EXPECT_EQ(row.substr(row.rfind(',') + 1), "nan\n");
}
