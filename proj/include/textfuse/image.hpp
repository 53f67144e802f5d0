// SPDX-License-Identifier: Apache-2.0
//
// Grayscale images and the binary PGM (P5, maxval 255) container.
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "textfuse/errors.hpp"

namespace textfuse {

// Row-major intensities in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), values(h * w, fill) {}

  float& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  float at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  std::size_t size() const { return values.size(); }
  bool operator==(const Image&) const = default;
};

inline std::uint8_t to_byte(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

inline std::vector<std::uint8_t> to_bytes(const Image& img) {
  std::vector<std::uint8_t> out(img.size());
  std::transform(img.values.begin(), img.values.end(), out.begin(), [](float v) { return to_byte(v); });
  return out;
}

inline Image from_bytes(std::size_t h, std::size_t w, const std::vector<std::uint8_t>& bytes) {
  Image img(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.values[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

// Snaps every value onto the 8-bit grid used by the file format.
inline Image quantize_8bit(const Image& img) { return from_bytes(img.height, img.width, to_bytes(img)); }

inline std::string encode_pgm(std::size_t h, std::size_t w, const std::vector<std::uint8_t>& bytes) {
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  return out;
}

inline void write_pgm(const std::filesystem::path& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  const std::string blob = encode_pgm(img.height, img.width, to_bytes(img));
  f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline Image decode_pgm(const std::string& blob, const std::string& name) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < blob.size()) {
      if (blob[pos] == '#') {
        while (pos < blob.size() && blob[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(blob[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&]() -> long {
    skip_space();
    const std::size_t start = pos;
    while (pos < blob.size() && std::isdigit(static_cast<unsigned char>(blob[pos]))) ++pos;
    if (start == pos) throw FormatError(name + ": malformed PGM header");
    return std::stol(blob.substr(start, pos - start));
  };
  if (blob.size() < 2 || blob[0] != 'P' || blob[1] != '5') throw FormatError(name + ": PGM magic is not P5");
  pos = 2;
  const long w = read_int();
  const long h = read_int();
  const long maxval = read_int();
  if (maxval != 255) throw FormatError(name + ": PGM maxval must be 255, got " + std::to_string(maxval));
  if (w <= 0 || h <= 0) throw FormatError(name + ": PGM dimensions must be positive");
  if (pos >= blob.size() || !std::isspace(static_cast<unsigned char>(blob[pos])))
    throw FormatError(name + ": malformed PGM header");
  ++pos;
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (blob.size() - pos < n) throw FormatError(name + ": truncated PGM pixel data");
  std::vector<std::uint8_t> bytes(blob.begin() + static_cast<long>(pos), blob.begin() + static_cast<long>(pos + n));
  return from_bytes(static_cast<std::size_t>(h), static_cast<std::size_t>(w), bytes);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("missing file: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Writes via a temporary sibling and a rename, so readers never observe a
// partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Image read_pgm(const std::filesystem::path& path) { return decode_pgm(read_file(path), path.string()); }

}  // namespace textfuse
