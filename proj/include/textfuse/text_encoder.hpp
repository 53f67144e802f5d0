// SPDX-License-Identifier: Apache-2.0
//
// Hash-embedding text tower: prompt -> token ids -> frozen embedding rows ->
// learned projection. Produces the token-level key/value sequence consumed
// by cross-attention.
#pragma once

#include <cctype>
#include <cstdint>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include "textfuse/ops.hpp"
#include "textfuse/random.hpp"

namespace textfuse {

inline constexpr std::size_t kVocabSize = 4096;
inline constexpr std::size_t kMaxTokens = 16;
inline constexpr std::size_t kTextDim = 64;
inline constexpr std::uint64_t kEmbeddingSeed = 0x7e47c11bULL;
inline constexpr std::size_t kStartToken = 0;

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Lowercases ASCII, splits on whitespace and punctuation, hashes each word
// into the vocabulary and prepends the start token. At most kMaxTokens ids.
inline std::vector<std::size_t> tokenize(std::string_view prompt) {
  std::vector<std::size_t> ids{kStartToken};
  std::string word;
  auto flush = [&] {
    if (!word.empty() && ids.size() < kMaxTokens) ids.push_back(fnv1a64(word) % kVocabSize);
    word.clear();
  };
  for (unsigned char c : prompt) {
    if (std::isspace(c) || std::ispunct(c)) {
      flush();
    } else {
      word.push_back(static_cast<char>(c < 128 ? std::tolower(c) : c));
    }
  }
  flush();
  return ids;
}

template <class T>
struct PromptEmbedding {
  std::vector<std::size_t> tokens;
  Tensor<T> features;  // [L, kTextDim]
};

template <class T>
struct TextParams {
  Tensor<T> proj;     // [kTextDim, kTextDim]
  Tensor<T> spatial;  // [kTextDim, C]
};

// Frozen table of kVocabSize x kTextDim standard normals, built once.
template <class T>
const Tensor<T>& embedding_table() {
  static const Tensor<T> table = [] {
    Rng rng(kEmbeddingSeed);
    std::vector<T> v(kVocabSize * kTextDim);
    for (T& x : v) x = static_cast<T>(rng.normal());
    return Tensor<T>({kVocabSize, kTextDim}, std::move(v), false);
  }();
  return table;
}

// Raw table rows for the tokens, before any projection.
template <class T>
Tensor<T> lookup_tokens(const std::vector<std::size_t>& tokens) {
  if (tokens.empty()) throw ContractError("encode: empty token list");
  for (std::size_t t : tokens)
    if (t >= kVocabSize) throw ContractError("encode: token id out of range");
  return gather_rows(embedding_table<T>(), tokens);
}

template <class T>
PromptEmbedding<T> encode(const std::vector<std::size_t>& tokens, const TextParams<T>& params) {
  return {tokens, matmul(lookup_tokens<T>(tokens), params.proj)};
}

// Per-token projection into the image channel width: [L, Dt] -> [L, C].
template <class T>
Tensor<T> spatialize(const Tensor<T>& text_features, const Tensor<T>& weight) {
  if (text_features.rank() != 2 || weight.rank() != 2 || text_features.dim(1) != weight.dim(0))
    throw DimensionError("spatialize: " + shape_str(text_features.shape()) + " x " + shape_str(weight.shape()));
  return matmul(text_features, weight);
}

}  // namespace textfuse
