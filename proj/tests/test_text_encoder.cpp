// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "textfuse/text_encoder.hpp"

using namespace textfuse;
using TD = Tensor<double>;

namespace {

// FNV-1a written out from its published constants, kept apart from the library.
std::uint64_t reference_fnv(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (char c : s) {
    h = h ^ static_cast<std::uint8_t>(c);
    h = h * 1099511628211ULL;
  }
  return h;
}

TD random_matrix(Rng& rng, std::size_t r, std::size_t c, bool grad = true) {
  std::vector<double> v(r * c);
  for (double& x : v) x = rng.normal();
  return TD({r, c}, std::move(v), grad);
}

TextParams<double> identity_params() {
  TD eye = TD::zeros({kTextDim, kTextDim});
  for (std::size_t i = 0; i < kTextDim; ++i) eye.mutable_data()[i * (kTextDim + 1)] = 1.0;
  return {eye, TD::zeros({kTextDim, 8})};
}

}  // namespace

TEST(Tokenize, EmptyPromptIsStartToken) {
  EXPECT_EQ(tokenize(""), (std::vector<std::size_t>{0}));
  EXPECT_EQ(tokenize("  ,.!  "), (std::vector<std::size_t>{0}));
}

TEST(Tokenize, CaseFoldsAndSplitsOnPunctuation) {
  const auto t = tokenize("Car car,CAR.");
  ASSERT_EQ(t.size(), 4u);
  EXPECT_EQ(t[1], t[2]);
  EXPECT_EQ(t[2], t[3]);
  EXPECT_EQ(tokenize("a-b"), tokenize("a b"));
}

TEST(Tokenize, HashMatchesReferenceFnv) {
  EXPECT_EQ(reference_fnv(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(reference_fnv("a"), 0xaf63dc4c8601ec8cULL);
  for (const std::string w : {"person", "car", "bus", "motorcycle", "lamp", "street"}) {
    EXPECT_EQ(fnv1a64(w), reference_fnv(w));
    EXPECT_EQ(tokenize(w), (std::vector<std::size_t>{0, reference_fnv(w) % 4096}));
  }
}

TEST(Tokenize, TruncatesToSixteen) {
  std::string s;
  for (int i = 0; i < 40; ++i) s += "w" + std::to_string(i) + " ";
  const auto t = tokenize(s);
  ASSERT_EQ(t.size(), kMaxTokens);
  EXPECT_EQ(t[0], 0u);
  EXPECT_EQ(t[15], reference_fnv("w14") % 4096);
  for (std::size_t id : t) EXPECT_LT(id, kVocabSize);
}

TEST(Encode, DeterministicAcrossRepeatedCalls) {
  Rng rng(1);
  const TextParams<double> p{random_matrix(rng, kTextDim, kTextDim), random_matrix(rng, kTextDim, 8)};
  const auto tokens = tokenize("two persons and one car");
  const auto ref = encode(tokens, p).features.values();
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(encode(tokens, p).features.values(), ref);
}

TEST(Encode, OneTokenChangeChangesOneRow) {
  const auto a = lookup_tokens<double>({0, 5, 9});
  const auto b = lookup_tokens<double>({0, 7, 9});
  for (std::size_t r = 0; r < 3; ++r) {
    bool same = true;
    for (std::size_t c = 0; c < kTextDim; ++c) same = same && a[r * kTextDim + c] == b[r * kTextDim + c];
    EXPECT_EQ(same, r != 1) << "row " << r;
  }
  const auto e = encode<double>({0, 5, 9}, identity_params()).features;
  EXPECT_EQ(e.values(), a.values());
}

TEST(Encode, ZeroProjectionGivesZeros) {
  const TextParams<double> p{TD::zeros({kTextDim, kTextDim}), TD::zeros({kTextDim, 8})};
  for (double v : encode(tokenize("a bus"), p).features.values()) EXPECT_EQ(v, 0.0);
}

TEST(Encode, TokenOutOfRangeIsContractError) {
  EXPECT_THROW(encode<double>({0, kVocabSize}, identity_params()), ContractError);
  EXPECT_THROW(encode<double>({}, identity_params()), ContractError);
}

TEST(Encode, TableIsStandardNormalAndFrozen) {
  const auto& t = embedding_table<double>();
  EXPECT_FALSE(t.requires_grad());
  double mean = 0, sq = 0;
  for (double v : t.values()) {
    mean += v;
    sq += v * v;
  }
  mean /= double(t.numel());
  EXPECT_NEAR(mean, 0.0, 0.01);
  EXPECT_NEAR(sq / double(t.numel()) - mean * mean, 1.0, 0.02);
}

TEST(Spatialize, MatchesTripleLoop) {
  Rng rng(2);
  const TD f = random_matrix(rng, 5, kTextDim, false);
  const TD w = random_matrix(rng, kTextDim, 12, false);
  const TD k = spatialize(f, w);
  for (std::size_t l = 0; l < 5; ++l)
    for (std::size_t c = 0; c < 12; ++c) {
      long double s = 0;
      for (std::size_t d = 0; d < kTextDim; ++d) s += f[l * kTextDim + d] * w[d * 12 + c];
      EXPECT_NEAR(k[l * 12 + c], double(s), 1e-12);
    }
}

TEST(Spatialize, IdentityAndZeroWeights) {
  Rng rng(3);
  const TD f = random_matrix(rng, 1, 4, false);
  TD eye = TD::zeros({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.mutable_data()[i * 5] = 1.0;
  EXPECT_EQ(spatialize(f, eye).values(), f.values());
  for (double v : spatialize(f, TD::zeros({4, 6})).values()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(spatialize(f, TD::zeros({5, 6})), DimensionError);
}

TEST(Spatialize, GradientReachesProjectionNotTable) {
  Rng rng(4);
  TextParams<double> p{random_matrix(rng, kTextDim, kTextDim), random_matrix(rng, kTextDim, 8)};
  const TD keys = spatialize(encode(tokenize("a lamp"), p).features, p.spatial);
  backward(sum(keys * keys));
  double gp = 0, gs = 0;
  for (double g : p.proj.grad()) gp += std::abs(g);
  for (double g : p.spatial.grad()) gs += std::abs(g);
  EXPECT_GT(gp, 0.0);
  EXPECT_GT(gs, 0.0);
  const auto& table = embedding_table<double>();
  for (double g : table.grad()) ASSERT_EQ(g, 0.0);
}
