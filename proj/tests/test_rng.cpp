/*
 * Copyright 2026 The detnoise Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "detnoise/rng.hpp"

namespace detnoise {
namespace {

std::vector<std::uint64_t> load_golden() {
  std::ifstream in(std::string(DETNOISE_FIXTURE_DIR) + "/splitmix64_seed0.txt");
  std::vector<std::uint64_t> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(parse_hex(line).value());
  }
  return out;
}

TEST(SplitMix, GoldenVectorSeedZero) {
  const auto golden = load_golden();
  ASSERT_EQ(golden.size(), 16u);
  RngState s(0);
  for (auto expected : golden) EXPECT_EQ(s.next_u64(), expected);
}

TEST(SplitMix, FirstOutputsSeedZero) {
  RngState s = derive_seed(0, Stream::kInit, 0);
  EXPECT_EQ(s.state(), 0u);
  EXPECT_EQ(s.next_u64(), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(s.next_u64(), 0x6E789E6AA1B965F4ULL);
  EXPECT_EQ(s.next_u64(), 0x06C45D188009454FULL);
  EXPECT_EQ(s.next_u64(), 0xF88BB8A8724C81ECULL);
}

TEST(SplitMix, MixIsZeroPreserving) { EXPECT_EQ(splitmix::mix(0), 0u); }

TEST(DeriveSeed, MatchesReference) {
  struct Case {
    Stream stream;
    std::uint64_t state, first;
  };
  const std::array<Case, 5> cases{{
      {Stream::kInit, 0x2aULL, 0xbdd732262feb6e95ULL},
      {Stream::kShuffle, 0x33c3a78b9b45ef9bULL, 0x54fd529dd4f363a5ULL},
      {Stream::kAugment, 0xfc5798d2f41962bbULL, 0xeea68f00d3e946eaULL},
      {Stream::kDropout, 0x90802c5f44425d5eULL, 0xdf17f123c933627eULL},
      {Stream::kImplEntropy, 0x8d7f7b6036634eb1ULL, 0x393483bd78fa1a99ULL},
  }};
  for (const auto& c : cases) {
    RngState s = derive_seed(42, c.stream, 0);
    EXPECT_EQ(s.state(), c.state) << stream_name(c.stream);
    EXPECT_EQ(s.next_u64(), c.first) << stream_name(c.stream);
  }
  EXPECT_EQ(derive_seed(7, Stream::kShuffle, 3).state(), 0x3e8dbd70d6d48ab4ULL);
}

TEST(DeriveSeed, PureAndStreamSensitive) {
  const SeedSpec spec{42, Stream::kInit, 0};
  EXPECT_EQ(derive_seed(spec), derive_seed(spec));
  EXPECT_NE(derive_seed(42, Stream::kInit, 0), derive_seed(42, Stream::kShuffle, 0));
}

TEST(DeriveSeed, NoCollisionsOverManyPairs) {
  std::set<std::uint64_t> seen;
  std::size_t count = 0;
  for (int s = 0; s < 5; ++s) {
    for (std::uint64_t r = 0; r < 20000; ++r) {
      seen.insert(derive_seed(42, static_cast<Stream>(s), r).state());
      ++count;
    }
  }
  EXPECT_EQ(seen.size(), count);
}

TEST(DeriveSeed, StreamsAreIndependentOfOtherRunIndices) {
  // Changing the run index of one stream leaves the others untouched.
  const auto shuffle = derive_seed(9, Stream::kShuffle, 4);
  (void)derive_seed(9, Stream::kInit, 5);
  EXPECT_EQ(derive_seed(9, Stream::kShuffle, 4), shuffle);
  EXPECT_NE(derive_seed(9, Stream::kInit, 4), derive_seed(9, Stream::kInit, 5));
}

TEST(Split, MatchesReferenceAndLeavesParent) {
  const RngState parent(0);
  EXPECT_EQ(split(parent, 0).state(), 0x48218226ff3cd4bfULL);
  EXPECT_EQ(split(parent, 1).state(), 0xdce423fc82c0d5b8ULL);
  EXPECT_EQ(parent.state(), 0u);
}

TEST(NextU64, AdvancesState) {
  RngState s(5);
  const auto a = s.next_u64();
  const auto b = s.next_u64();
  EXPECT_NE(a, b);
  RngState replay(5);
  EXPECT_EQ(replay.next_u64(), a);
}

TEST(NextUnit, EdgeValues) {
  EXPECT_EQ(RngState::unit_from_bits(0), 0.0);
  EXPECT_EQ(RngState::unit_from_bits(~std::uint64_t{0}), 1.0 - 0x1.0p-53);
  EXPECT_LT(RngState::unit_from_bits(0x7FFFFFFFFFFFFFFFULL),
            RngState::unit_from_bits(0x8000000000000000ULL));
  RngState s(0);
  EXPECT_DOUBLE_EQ(s.next_unit(), 0.8833108082136426);
}

TEST(NextUnit, MeanOfManyDraws) {
  RngState s(2024);
  double sum = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = s.next_unit();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  const double mean = sum / n;
  EXPECT_GE(mean, 0.49);
  EXPECT_LE(mean, 0.51);
}

TEST(UniformBelow, StaysInRange) {
  RngState s(3);
  for (std::uint64_t bound : {1ULL, 2ULL, 3ULL, 7ULL, 1000ULL, (1ULL << 63) + 1}) {
    for (int i = 0; i < 200; ++i) EXPECT_LT(s.uniform_below(bound), bound);
  }
  EXPECT_EQ(s.uniform_below(0), 0u);
}

TEST(Permutation, SmallCases) {
  RngState s(1);
  EXPECT_TRUE(permutation(s, 0).empty());
  EXPECT_EQ(permutation(s, 1), std::vector<std::size_t>{0});
}

TEST(Permutation, MatchesReference) {
  RngState a(0);
  EXPECT_EQ(permutation(a, 5), (std::vector<std::size_t>{2, 3, 1, 4, 0}));
  RngState b(42);
  EXPECT_EQ(permutation(b, 10),
            (std::vector<std::size_t>{0, 9, 5, 8, 6, 4, 7, 2, 1, 3}));
}

TEST(Permutation, Reproducible) {
  RngState a(77), b(77);
  EXPECT_EQ(permutation(a, 5), permutation(b, 5));
  EXPECT_EQ(a, b);
}

TEST(Permutation, UniformOverSixOrders) {
  RngState s(11);
  std::map<std::vector<std::size_t>, int> counts;
  const int draws = 6000;
  for (int i = 0; i < draws; ++i) ++counts[permutation(s, 3)];
  ASSERT_EQ(counts.size(), 6u);
  for (const auto& [perm, c] : counts) {
    EXPECT_NEAR(static_cast<double>(c) / draws, 1.0 / 6.0, 0.02);
  }
}

TEST(Permutation, AlwaysABijection) {
  RngState s(99);
  for (int trial = 0; trial < 40; ++trial) {
    const auto n = static_cast<std::size_t>(s.uniform_below(10001));
    auto p = permutation(s, n);
    std::vector<bool> hit(n, false);
    for (auto v : p) {
      ASSERT_LT(v, n);
      ASSERT_FALSE(hit[v]);
      hit[v] = true;
    }
  }
}

TEST(Gaussian, AnalyticCases) {
  EXPECT_NEAR(RngState::box_muller(std::exp(-2.0), 0.0), 2.0, 1e-12);
  EXPECT_LT(std::fabs(RngState::box_muller(1.0 - 0x1.0p-53, 0.0)), 1e-7);
  // u1 == 0 is clamped rather than producing infinity.
  EXPECT_TRUE(std::isfinite(RngState::box_muller(0.0, 0.0)));
  EXPECT_EQ(RngState::box_muller(0.0, 0.0), RngState::box_muller(0x1.0p-53, 0.0));
}

TEST(Gaussian, ConsumesTwoDraws) {
  RngState a(8), b(8);
  (void)a.gaussian();
  (void)b.next_u64();
  (void)b.next_u64();
  EXPECT_EQ(a, b);
}

TEST(Gaussian, MomentsOfManyDraws) {
  RngState s(31337);
  const int n = 100000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double g = s.gaussian();
    sum += g;
    sq += g * g;
  }
  const double mean = sum / n;
  const double var = (sq - n * mean * mean) / (n - 1);
  EXPECT_GE(mean, -0.02);
  EXPECT_LE(mean, 0.02);
  EXPECT_GE(var, 0.97);
  EXPECT_LE(var, 1.03);
}

TEST(Hex, RoundTrip) {
  EXPECT_EQ(to_hex(0xE220A8397B1DCDAFULL), "0xe220a8397b1dcdaf");
  EXPECT_EQ(parse_hex("0xe220a8397b1dcdaf"), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(parse_hex("FF"), 255u);
  EXPECT_FALSE(parse_hex("").has_value());
  EXPECT_FALSE(parse_hex("0xg1").has_value());
  EXPECT_FALSE(parse_hex("12345678901234567").has_value());
}

}  // namespace
}  // namespace detnoise
