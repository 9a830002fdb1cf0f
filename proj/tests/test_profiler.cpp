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

#include <set>
#include <string>
#include <vector>

#include "detnoise/io.hpp"
#include "detnoise/profiler.hpp"

namespace detnoise {
namespace {

constexpr ConvShape kSmall{8, 8, 4, 4};
constexpr TimingOptions kFast{5, 1};

TEST(TimeKernel, SameDescriptorSameChecksum) {
  const OpDescriptor d{kSmall, 3, 17, false};
  const auto a = time_kernel(d, Sequential{}, kFast);
  const auto b = time_kernel(d, Sequential{}, kFast);
  EXPECT_EQ(a.checksum, b.checksum);
  EXPECT_EQ(a.kernel_id, "conv2d/8x8x4x4/k3/sequential");
  EXPECT_EQ(a.reps, 5u);
}

TEST(TimeKernel, OrderStatisticsAreOrdered) {
  const OpDescriptor d{kSmall, 5, 1, false};
  for (int i = 0; i < 3; ++i) {
    const auto t = time_kernel(d, Sequential{}, {7, 0});
    EXPECT_GE(t.median_ns, t.min_ns);
    EXPECT_GE(t.p90_ns, t.median_ns);
    EXPECT_GE(t.total_ns, 7 * t.min_ns);
    EXPECT_GT(t.min_ns, 0);
  }
}

TEST(TimeKernel, TooFewRepsRejected) {
  EXPECT_THROW(time_kernel(OpDescriptor{}, Sequential{}, {4, 0}), DataError);
}

TEST(TimeKernel, IntegerInputsGiveEqualChecksumsAcrossPolicies) {
  const OpDescriptor d{kSmall, 5, 3, true};
  const auto seq = time_kernel(d, Sequential{}, kFast);
  const auto per = time_kernel(d, Permuted{RngState(99)}, kFast);
  const auto tree = time_kernel(d, PairwiseTree{4}, kFast);
  const auto comp = time_kernel(d, Compensated{}, kFast);
  EXPECT_EQ(seq.checksum, per.checksum);
  EXPECT_EQ(seq.checksum, tree.checksum);
  EXPECT_EQ(seq.checksum, comp.checksum);
}

TEST(TimeKernel, SevenBySevenIsSlowerThanOneByOne) {
  const ConvShape shape{16, 16, 8, 8};
  const auto k1 = time_kernel({shape, 1, 0, false}, Sequential{}, {9, 2});
  const auto k7 = time_kernel({shape, 7, 0, false}, Sequential{}, {9, 2});
  EXPECT_GT(k7.median_ns, k1.median_ns);
}

TEST(RelativeOverhead, SelfIsOneHundredPercent) {
  EXPECT_EQ(relative_overhead_pct(12345, 12345), 100.0);
  EXPECT_EQ(relative_overhead_pct(300, 100), 300.0);
  EXPECT_THROW(relative_overhead_pct(1, 0), DataError);
}

TEST(OverheadSweep, FullGridAndOutputs) {
  const auto rep = overhead_sweep({1, 3, 5, 7}, kSmall, kFast, 4);
  ASSERT_EQ(rep.timings.size(), 8u);
  ASSERT_EQ(rep.rows.size(), 4u);
  std::set<std::pair<std::size_t, std::string>> cells;
  for (const auto& t : rep.timings) cells.insert({t.kernel_size, t.policy});
  EXPECT_EQ(cells.size(), 8u);
  for (const auto& r : rep.rows) EXPECT_GT(r.relative_overhead_pct, 0.0);

  const auto csv = overhead_csv(rep);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "kernel_size,policy,median_ns,rel_overhead_pct");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 9);
  // Permuted rows are their own reference.
  std::size_t hundred = 0;
  for (std::size_t pos = 0; (pos = csv.find(",100.000\n", pos)) != std::string::npos; ++pos)
    ++hundred;
  EXPECT_GE(hundred, 4u);

  const auto j = overhead_json(rep);
  EXPECT_EQ(j["kernels"].size(), 8u);
  EXPECT_EQ(j["overhead"].size(), 4u);
  EXPECT_NE(j["note"].get<std::string>().find("not reproduced"), std::string::npos);
  EXPECT_THROW(overhead_sweep({2}, kSmall, kFast), DataError);
}

TEST(OverheadSweep, DeterministicApartFromTimings) {
  const auto a = overhead_json(overhead_sweep({1, 3}, kSmall, kFast, 8));
  const auto b = overhead_json(overhead_sweep({1, 3}, kSmall, kFast, 8));
  EXPECT_EQ(strip_volatile(a["kernels"]), strip_volatile(b["kernels"]));
  EXPECT_EQ(strip_volatile(a["overhead"]), strip_volatile(b["overhead"]));
  EXPECT_EQ(a["shape"], b["shape"]);
}

KernelTiming timing(std::string id, std::int64_t total) {
  KernelTiming t;
  t.kernel_id = std::move(id);
  t.total_ns = total;
  return t;
}

TEST(TopK, SortsByTimeThenId) {
  const std::vector<KernelTiming> ts{timing("b", 10), timing("a", 10), timing("c", 30),
                                     timing("c", 10)};
  const auto rows = top_k(ts, 10);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].kernel_id, "c");
  EXPECT_EQ(rows[0].total_ns, 40);
  EXPECT_EQ(rows[1].kernel_id, "a");
  EXPECT_EQ(rows[2].kernel_id, "b");
  double sum = 0.0;
  for (const auto& r : rows) sum += r.share;
  EXPECT_NEAR(sum, 1.0, 1e-9);
  EXPECT_EQ(top_k(ts, 1).size(), 1u);
  EXPECT_THROW(top_k(ts, 0), DataError);
}

TEST(TopK, SingleKernelHasFullShare) {
  const auto rows = top_k({timing("only", 5)}, 3);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].share, 1.0);
}

TEST(TopK, SweepTableCoversAllMeasuredTime) {
  const auto rep = overhead_sweep({1, 3}, kSmall, kFast);
  std::int64_t measured = 0, listed = 0;
  for (const auto& t : rep.timings) measured += t.total_ns;
  for (const auto& r : rep.top) listed += r.total_ns;
  EXPECT_EQ(listed, measured);
}

}  // namespace
}  // namespace detnoise
