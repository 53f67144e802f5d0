// SPDX-License-Identifier: Apache-2.0
//
// Versioned binary snapshot of a trained model.
//
// Layout, all integers and floats little-endian:
//   "TXF1" u32:version
//   fusion config, detector config
//   u32:count { u32:len name  u32:rank u32:dims...  f32:values... }   parameters
//   u32:K u32:C f32:entries[K*C] u64:usage[K]                          codebook
//   u64:epoch u64:step f64:lr u64:zprime_digest                         trainer state
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "textfuse/detector.hpp"
#include "textfuse/errors.hpp"
#include "textfuse/fusion_net.hpp"
#include "textfuse/image.hpp"
#include "textfuse/trainer.hpp"

namespace textfuse {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainerState {
  std::uint64_t epoch = 0, step = 0;
  double lr = 0;
  std::uint64_t zprime_digest = 0;
  bool operator==(const TrainerState&) const = default;
};

struct Checkpoint {
  FusionConfig fusion_config;
  DetectorConfig detector_config;
  FusionParams<float> fusion;
  DetectorParams<float> detector;
  TrainerState state;
};

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::string& data() const { return out_; }

 private:
  template <class U>
  void le(U v) {
    std::array<char, sizeof(U)> b;
    for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    bytes(b.data(), b.size());
  }
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& in) : in_(in) {}
  void bytes(void* p, std::size_t n) {
    if (n > in_.size() - pos_) throw IoError("checkpoint truncated at byte " + std::to_string(pos_));
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > remaining()) throw IoError("checkpoint truncated in a string field");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  template <class U>
  U le() {
    std::array<unsigned char, sizeof(U)> b;
    bytes(b.data(), b.size());
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
    return v;
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

inline void write_tensor(ByteWriter& w, const std::string& name, const Tensor<float>& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (float v : t.data()) w.f32(v);
}

inline void read_tensor(ByteReader& r, const std::string& expected, Tensor<float>& t) {
  const std::string name = r.str();
  if (name != expected) throw FormatError("checkpoint parameter '" + name + "' where '" + expected + "' expected");
  const std::uint32_t rank = r.u32();
  if (rank == 0 || rank > 8) throw FormatError("checkpoint parameter '" + name + "' has bad rank");
  Shape s(rank);
  for (auto& d : s) d = r.u32();
  if (s != t.shape())
    throw FormatError("checkpoint parameter '" + name + "' has shape " + shape_str(s) + ", model expects " +
                      shape_str(t.shape()));
  if (shape_numel(s) * 4 > r.remaining()) throw IoError("checkpoint truncated in parameter '" + name + "'");
  std::vector<float> v(shape_numel(s));
  for (float& x : v) x = r.f32();
  t = Tensor<float>(std::move(s), std::move(v), true);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.bytes("TXF1", 4);
  w.u32(kCheckpointVersion);
  const FusionConfig& f = c.fusion_config;
  w.u32(static_cast<std::uint32_t>(f.channels));
  w.u32(static_cast<std::uint32_t>(f.attention_stride));
  w.u32(static_cast<std::uint32_t>(f.heads));
  w.u32(static_cast<std::uint32_t>(f.codebook_size));
  w.u8(f.use_self_attention);
  w.u8(f.use_cross_attention);
  w.u8(f.use_codebook);
  const DetectorConfig& d = c.detector_config;
  w.u32(static_cast<std::uint32_t>(d.num_classes));
  w.u32(static_cast<std::uint32_t>(d.width1));
  w.u32(static_cast<std::uint32_t>(d.width2));
  w.u32(static_cast<std::uint32_t>(d.width3));
  w.f64(d.objectness_prior);

  std::uint32_t count = 0;
  c.fusion.visit([&](const std::string&, const Tensor<float>&) { ++count; });
  c.detector.visit([&](const std::string&, const Tensor<float>&) { ++count; });
  w.u32(count);
  c.fusion.visit([&](const std::string& n, const Tensor<float>& t) { detail::write_tensor(w, n, t); });
  c.detector.visit([&](const std::string& n, const Tensor<float>& t) { detail::write_tensor(w, n, t); });

  const Tensor<float>& e = c.fusion.codebook.entries;
  w.u32(static_cast<std::uint32_t>(e.dim(0)));
  w.u32(static_cast<std::uint32_t>(e.dim(1)));
  for (float v : e.data()) w.f32(v);
  for (std::size_t k = 0; k < e.dim(0); ++k)
    w.u64(k < c.fusion.codebook.usage.size() ? c.fusion.codebook.usage[k] : 0);

  w.u64(c.state.epoch);
  w.u64(c.state.step);
  w.f64(c.state.lr);
  w.u64(c.state.zprime_digest);
  return w.data();
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  detail::ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "TXF1", 4) != 0) throw FormatError("not a checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  Checkpoint c;
  FusionConfig& f = c.fusion_config;
  f.channels = r.u32();
  f.attention_stride = r.u32();
  f.heads = r.u32();
  f.codebook_size = r.u32();
  f.use_self_attention = r.u8() != 0;
  f.use_cross_attention = r.u8() != 0;
  f.use_codebook = r.u8() != 0;
  try {
    f.validate();
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("checkpoint fusion config invalid: ") + e.what());
  }
  DetectorConfig& d = c.detector_config;
  d.num_classes = r.u32();
  d.width1 = r.u32();
  d.width2 = r.u32();
  d.width3 = r.u32();
  d.objectness_prior = r.f64();
  if (d.num_classes == 0 || d.width1 == 0 || d.width2 == 0 || d.width3 == 0)
    throw FormatError("checkpoint detector config invalid");

  // Shapes come from a freshly initialised model; values are overwritten.
  c.fusion = init_fusion_params<float>(f, 0);
  c.detector = init_detector_params<float>(d, 0);
  std::uint32_t expected = 0;
  c.fusion.visit([&](const std::string&, const Tensor<float>&) { ++expected; });
  c.detector.visit([&](const std::string&, const Tensor<float>&) { ++expected; });
  const std::uint32_t count = r.u32();
  if (count != expected)
    throw FormatError("checkpoint holds " + std::to_string(count) + " parameters, model has " +
                      std::to_string(expected));
  c.fusion.visit([&](const std::string& n, Tensor<float>& t) { detail::read_tensor(r, n, t); });
  c.detector.visit([&](const std::string& n, Tensor<float>& t) { detail::read_tensor(r, n, t); });

  const std::uint32_t K = r.u32(), C = r.u32();
  if (K != f.codebook_size || C != f.channels) throw FormatError("checkpoint codebook shape mismatch");
  std::vector<float> entries(std::size_t(K) * C);
  for (float& v : entries) v = r.f32();
  c.fusion.codebook.entries = Tensor<float>({K, C}, std::move(entries), true);
  c.fusion.codebook.usage.assign(K, 0);
  for (auto& u : c.fusion.codebook.usage) u = r.u64();

  c.state.epoch = r.u64();
  c.state.step = r.u64();
  c.state.lr = r.f64();
  c.state.zprime_digest = r.u64();
  if (r.remaining() != 0) throw FormatError("checkpoint has trailing bytes");
  return c;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file_atomic(path, serialize_checkpoint(c));
}

inline Checkpoint make_checkpoint(const Trainer& t) {
  Checkpoint c;
  c.fusion_config = t.config().fusion;
  c.detector_config = t.config().detector;
  c.fusion = t.fusion();
  c.detector = t.detector();
  c.state = {t.epoch(), t.step(), t.lr(), t.cache().digest()};
  return c;
}

}  // namespace textfuse
