// SPDX-License-Identifier: Apache-2.0
//
// Paired IR/VIS dataset layout, label format and the synthetic scene
// generator.
//
//   root/manifest.json        {"samples": ["<id>", ...]}
//   root/ir/<id>.pgm          P5, maxval 255
//   root/vis/<id>.pgm
//   root/prompts/<id>.txt     UTF-8 prompt
//   root/labels/<id>.txt      "class cx cy w h" per line, normalised
#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "textfuse/errors.hpp"
#include "textfuse/image.hpp"
#include "textfuse/random.hpp"

namespace textfuse {

struct GroundTruthBox {
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;
  bool operator==(const GroundTruthBox&) const = default;
};

struct SampleRecord {
  std::string id;
  Image ir;
  Image vis;
  std::string prompt;
  std::vector<GroundTruthBox> boxes;
};

inline std::vector<GroundTruthBox> parse_labels(const std::string& text, const std::string& name = "labels") {
  std::vector<GroundTruthBox> boxes;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream fields(line);
    std::vector<std::string> tok;
    for (std::string t; fields >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    auto fail = [&](const std::string& why) {
      throw ParseError(name + ":" + std::to_string(line_no) + ": " + why, line_no);
    };
    if (tok.size() != 5) fail("expected 5 fields, got " + std::to_string(tok.size()));
    GroundTruthBox b;
    double vals[5];
    for (int i = 0; i < 5; ++i) {
      std::size_t used = 0;
      try {
        vals[i] = std::stod(tok[i], &used);
      } catch (...) {
        fail("not a number: '" + tok[i] + "'");
      }
      if (used != tok[i].size() || !std::isfinite(vals[i])) fail("not a number: '" + tok[i] + "'");
    }
    if (vals[0] < 0 || vals[0] != std::floor(vals[0])) fail("class id must be a non-negative integer");
    b.class_id = static_cast<int>(vals[0]);
    b.cx = vals[1];
    b.cy = vals[2];
    b.w = vals[3];
    b.h = vals[4];
    for (int i = 1; i < 5; ++i)
      if (vals[i] < 0.0 || vals[i] > 1.0) fail("coordinate out of [0,1]");
    if (b.w <= 0.0 || b.h <= 0.0) fail("box width and height must be positive");
    boxes.push_back(b);
  }
  return boxes;
}

inline std::string format_labels(const std::vector<GroundTruthBox>& boxes) {
  std::string out;
  char buf[128];
  for (const auto& b : boxes) {
    std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f\n", b.class_id, b.cx, b.cy, b.w, b.h);
    out += buf;
  }
  return out;
}

inline std::vector<SampleRecord> load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = root / "manifest.json";
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  if (!manifest.contains("samples") || !manifest["samples"].is_array())
    throw FormatError(manifest_path.string() + ": missing \"samples\" array");
  std::vector<SampleRecord> out;
  for (const auto& entry : manifest["samples"]) {
    if (!entry.is_string()) throw FormatError(manifest_path.string() + ": sample ids must be strings");
    SampleRecord r;
    r.id = entry.get<std::string>();
    r.ir = read_pgm(root / "ir" / (r.id + ".pgm"));
    r.vis = read_pgm(root / "vis" / (r.id + ".pgm"));
    if (r.ir.height != r.vis.height || r.ir.width != r.vis.width)
      throw FormatError(r.id + ": IR and VIS sizes differ");
    r.prompt = read_file(root / "prompts" / (r.id + ".txt"));
    const fs::path label_path = root / "labels" / (r.id + ".txt");
    r.boxes = parse_labels(read_file(label_path), label_path.string());
    out.push_back(std::move(r));
  }
  return out;
}

// ---- synthetic scenes ----------------------------------------------------

inline const std::array<const char*, 5>& class_names() {
  static const std::array<const char*, 5> names{"person", "car", "bus", "motorcycle", "lamp"};
  return names;
}

enum class ShapeKind { disk, square, triangle };

inline ShapeKind shape_of_class(int c) { return static_cast<ShapeKind>(c % 3); }

// Thermal brightness per class.
inline double ir_level_of_class(int c) {
  static const double levels[5] = {0.95, 0.78, 0.86, 0.68, 0.60};
  return levels[c % 5];
}

struct RenderedSample {
  SampleRecord record;
  // Per-pixel object label (0 = background, k = k-th box) of the clean
  // thermal silhouettes.
  std::vector<int> object_mask;
};

namespace detail {

inline bool inside_shape(ShapeKind kind, double px, double py, double x0, double y0, double side) {
  const double u = (px - x0) / side, v = (py - y0) / side;  // unit-square coordinates
  if (u < 0 || u > 1 || v < 0 || v > 1) return false;
  switch (kind) {
    case ShapeKind::disk: return (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.25;
    case ShapeKind::square: return true;
    case ShapeKind::triangle: return std::abs(u - 0.5) <= 0.5 * v;  // apex at the top
  }
  return false;
}

inline std::string count_word(int n) {
  static const char* words[] = {"zero", "one", "two", "three"};
  return n <= 3 ? words[n] : std::to_string(n);
}

inline std::string plural(const std::string& noun) { return noun == "bus" ? "buses" : noun + "s"; }

inline std::string make_prompt(const std::map<int, int>& counts) {
  std::vector<std::string> parts;
  for (const auto& [c, n] : counts) {
    const std::string name = class_names()[static_cast<std::size_t>(c)];
    parts.push_back(count_word(n) + " " + (n == 1 ? name : plural(name)));
  }
  std::string out = "an infrared and visible street scene with ";
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += (i + 1 == parts.size()) ? " and " : ", ";
    out += parts[i];
  }
  return out;
}

}  // namespace detail

inline void check_generator_args(int n, int size, int classes) {
  if (n <= 0) throw ArgumentError("sample count must be positive");
  if (size != 32 && size != 64 && size != 128) throw ArgumentError("size must be 32, 64 or 128");
  if (classes < 1 || classes > 5) throw ArgumentError("classes must be in [1, 5]");
}

inline std::string sample_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", index);
  return buf;
}

// Deterministic in (seed, index, size, classes).
inline RenderedSample render_sample(std::uint64_t seed, int index, int size, int classes) {
  check_generator_args(1, size, classes);
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(index)));
  const std::size_t S = static_cast<std::size_t>(size);
  const double cell = size / 8.0;

  struct Obj {
    int cls;
    ShapeKind kind;
    double x0, y0, side;
  };
  std::vector<Obj> objs;
  const int wanted = 1 + static_cast<int>(rng.below(3));
  for (int k = 0; k < wanted; ++k) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const int cls = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
      const double side = std::round(rng.uniform(0.18, 0.30) * size);
      const double x0 = std::round(rng.uniform(1.0, size - side - 1.0));
      const double y0 = std::round(rng.uniform(1.0, size - side - 1.0));
      bool ok = true;
      for (const Obj& o : objs) {
        const double gap = 2.0;
        const bool apart = x0 > o.x0 + o.side + gap || o.x0 > x0 + side + gap || y0 > o.y0 + o.side + gap ||
                           o.y0 > y0 + side + gap;
        const bool same_cell = std::floor((x0 + side / 2) / cell) == std::floor((o.x0 + o.side / 2) / cell) &&
                               std::floor((y0 + side / 2) / cell) == std::floor((o.y0 + o.side / 2) / cell);
        if (!apart || same_cell) ok = false;
      }
      if (ok) {
        objs.push_back({cls, shape_of_class(cls), x0, y0, side});
        break;
      }
    }
  }

  RenderedSample out;
  out.object_mask.assign(S * S, 0);
  for (std::size_t k = 0; k < objs.size(); ++k)
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x)
        if (detail::inside_shape(objs[k].kind, x + 0.5, y + 0.5, objs[k].x0, objs[k].y0, objs[k].side))
          out.object_mask[y * S + x] = static_cast<int>(k + 1);

  // Thermal: bright silhouettes over dark, slowly varying noise.
  const double gx = rng.uniform(-0.04, 0.04), gy = rng.uniform(-0.04, 0.04);
  Image ir(S, S);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      const int m = out.object_mask[y * S + x];
      const double base = 0.14 + gx * (x / double(S) - 0.5) + gy * (y / double(S) - 0.5);
      const double v = m ? ir_level_of_class(objs[m - 1].cls) + 0.03 * rng.normal() : base + 0.04 * rng.normal();
      ir.at(y, x) = static_cast<float>(v);
    }

  // Visible: textured background, low-contrast objects with a dark rim,
  // plus unlabeled bars that exist only in this channel.
  const double fx = rng.uniform(0.2, 0.6), fy = rng.uniform(0.2, 0.6), phase = rng.uniform(0.0, 6.28);
  Image vis(S, S);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      const double bg = 0.48 + 0.14 * std::sin(fx * x + fy * y + phase) + 0.06 * rng.normal();
      const int m = out.object_mask[y * S + x];
      double v = bg;
      if (m) {
        bool rim = false;
        for (int dy = -1; dy <= 1 && !rim; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const long yy = long(y) + dy, xx = long(x) + dx;
            if (yy < 0 || xx < 0 || yy >= long(S) || xx >= long(S) || out.object_mask[yy * S + xx] != m) {
              rim = true;
              break;
            }
          }
        v = rim ? 0.6 * bg : 0.55 * bg + 0.3;
      }
      vis.at(y, x) = static_cast<float>(v);
    }
  const int bars = 1 + static_cast<int>(rng.below(2));
  for (int b = 0; b < bars; ++b) {
    const bool horizontal = rng.uniform() < 0.5;
    const std::size_t len = static_cast<std::size_t>(0.35 * size), thick = std::max<std::size_t>(2, S / 24);
    const std::size_t px = static_cast<std::size_t>(rng.below(S - (horizontal ? len : thick)));
    const std::size_t py = static_cast<std::size_t>(rng.below(S - (horizontal ? thick : len)));
    const float level = rng.uniform() < 0.5 ? 0.92f : 0.08f;
    for (std::size_t y = py; y < py + (horizontal ? thick : len); ++y)
      for (std::size_t x = px; x < px + (horizontal ? len : thick); ++x) vis.at(y, x) = level;
  }

  SampleRecord& r = out.record;
  r.id = sample_id(index);
  r.ir = quantize_8bit(ir);
  r.vis = quantize_8bit(vis);
  std::map<int, int> counts;
  for (std::size_t k = 0; k < objs.size(); ++k) {
    std::size_t xmin = S, ymin = S, xmax = 0, ymax = 0;
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x)
        if (out.object_mask[y * S + x] == int(k + 1)) {
          xmin = std::min(xmin, x);
          xmax = std::max(xmax, x);
          ymin = std::min(ymin, y);
          ymax = std::max(ymax, y);
        }
    GroundTruthBox b;
    b.class_id = objs[k].cls;
    b.cx = (xmin + xmax + 1) / (2.0 * size);
    b.cy = (ymin + ymax + 1) / (2.0 * size);
    b.w = (xmax + 1 - xmin) / double(size);
    b.h = (ymax + 1 - ymin) / double(size);
    r.boxes.push_back(b);
    ++counts[b.class_id];
  }
  r.prompt = detail::make_prompt(counts);
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline void write_sample(const std::filesystem::path& root, const SampleRecord& r) {
  write_pgm(root / "ir" / (r.id + ".pgm"), r.ir);
  write_pgm(root / "vis" / (r.id + ".pgm"), r.vis);
  write_text(root / "prompts" / (r.id + ".txt"), r.prompt);
  write_text(root / "labels" / (r.id + ".txt"), format_labels(r.boxes));
}

inline void generate_synthetic(std::uint64_t seed, int n, int size, int classes, const std::filesystem::path& root) {
  check_generator_args(n, size, classes);
  namespace fs = std::filesystem;
  for (const char* sub : {"ir", "vis", "prompts", "labels"}) fs::create_directories(root / sub);
  nlohmann::json ids = nlohmann::json::array();
  for (int i = 0; i < n; ++i) {
    const RenderedSample s = render_sample(seed, i, size, classes);
    write_sample(root, s.record);
    ids.push_back(s.record.id);
  }
  nlohmann::json manifest;
  manifest["samples"] = ids;
  write_text(root / "manifest.json", manifest.dump(2) + "\n");
}

// First `n - holdout` records train, the rest are held out.
inline std::pair<std::vector<SampleRecord>, std::vector<SampleRecord>> split_holdout(
    const std::vector<SampleRecord>& all, std::size_t holdout) {
  if (holdout >= all.size()) throw ArgumentError("holdout must leave at least one training sample");
  const auto cut = all.begin() + static_cast<long>(all.size() - holdout);
  return {std::vector<SampleRecord>(all.begin(), cut), std::vector<SampleRecord>(cut, all.end())};
}

}  // namespace textfuse
