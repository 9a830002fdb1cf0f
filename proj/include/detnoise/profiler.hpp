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

// Wall-time cost of a fixed accumulation order (Sequential, the
// deterministic setting) against a free one (Permuted, the stand-in for
// unconstrained parallel reductions) on the harness's own conv2d kernel.
//
// Timing is strictly single-threaded. Only nanosecond fields vary between
// invocations with the same seed.

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "detnoise/digest.hpp"
#include "detnoise/errors.hpp"
#include "detnoise/numerics.hpp"
#include "detnoise/rng.hpp"
#include "detnoise/tensor.hpp"
#include "json.hpp"

namespace detnoise {

inline constexpr const char* kOverheadContext =
    "CPU wall time of this harness's conv2d under a fixed (sequential) versus "
    "a randomized (permuted) accumulation order. Published GPU measurements "
    "of cuDNN deterministic-algorithm overhead (up to 746%, 241% and 196% on "
    "P100, V100 and T4) are context only; they are not reproduced or "
    "comparable here.";

struct ConvShape {
  std::size_t h = 16, w = 16, c = 8, f = 8;
};

/// A timed kernel instance. Inputs are drawn from `seed`; with
/// `integer_inputs` they are small integers so every policy is exact.
struct OpDescriptor {
  ConvShape shape;
  std::size_t kernel_size = 3;
  std::uint64_t seed = 0;
  bool integer_inputs = false;

  std::string id(const AccumulationPolicy& policy) const {
    return "conv2d/" + std::to_string(shape.h) + "x" + std::to_string(shape.w) +
           "x" + std::to_string(shape.c) + "x" + std::to_string(shape.f) + "/k" +
           std::to_string(kernel_size) + "/" + policy_name(policy);
  }
};

struct KernelTiming {
  std::string kernel_id;
  std::size_t kernel_size = 0;
  std::string policy;
  std::size_t reps = 0;
  std::int64_t min_ns = 0;
  std::int64_t median_ns = 0;
  std::int64_t p90_ns = 0;
  std::int64_t total_ns = 0;
  std::string checksum;  // SHA-256 of the last output, keeps the work live
};

struct TimingOptions {
  std::size_t reps = 7;
  std::size_t warmup = 3;
};

namespace detail {

inline std::pair<Tensor, Tensor> profiler_inputs(const OpDescriptor& d) {
  const auto& s = d.shape;
  const std::size_t k = d.kernel_size;
  RngState rng = split(RngState(d.seed), k);
  Tensor input({s.h, s.w, s.c});
  Tensor kernel({k, k, s.c, s.f});
  auto fill = [&](Tensor& t) {
    for (auto& v : t.data()) {
      v = d.integer_inputs
              ? static_cast<float>(static_cast<int>(rng.uniform_below(7)) - 3)
              : static_cast<float>(rng.gaussian());
    }
  };
  fill(input);
  fill(kernel);
  return {std::move(input), std::move(kernel)};
}

}  // namespace detail

inline KernelTiming time_kernel(const OpDescriptor& desc, const AccumulationPolicy& policy,
                                const TimingOptions& opts = {}) {
  using Clock = std::chrono::steady_clock;
  if (!Clock::is_steady) throw Error("no monotonic clock available");
  if (opts.reps < 5) throw DataError("time_kernel needs at least 5 repetitions");
  const auto [input, kernel] = detail::profiler_inputs(desc);

  Tensor out;
  for (std::size_t i = 0; i < opts.warmup; ++i) out = conv2d(input, kernel, policy);
  std::vector<std::int64_t> ns;
  ns.reserve(opts.reps);
  for (std::size_t i = 0; i < opts.reps; ++i) {
    const auto t0 = Clock::now();
    out = conv2d(input, kernel, policy);
    const auto t1 = Clock::now();
    ns.push_back(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count());
  }

  KernelTiming t;
  t.kernel_id = desc.id(policy);
  t.kernel_size = desc.kernel_size;
  t.policy = policy_name(policy);
  t.reps = opts.reps;
  for (auto v : ns) t.total_ns += v;
  std::sort(ns.begin(), ns.end());
  t.min_ns = ns.front();
  t.median_ns = ns[(ns.size() - 1) / 2];
  const std::size_t p90_rank = (9 * ns.size() + 9) / 10;  // ceil(0.9 n)
  t.p90_ns = ns[p90_rank - 1];
  const auto bytes = std::span<const std::uint8_t>(
      reinterpret_cast<const std::uint8_t*>(out.data().data()), out.size() * sizeof(float));
  t.checksum = sha256_hex(bytes);
  return t;
}

/// 100 * det / nondet.
inline double relative_overhead_pct(std::int64_t det_ns, std::int64_t nondet_ns) {
  if (nondet_ns <= 0) throw DataError("non-positive reference time");
  return 100.0 * static_cast<double>(det_ns) / static_cast<double>(nondet_ns);
}

struct OverheadRow {
  std::size_t kernel_size = 0;
  std::int64_t det_median_ns = 0;
  std::int64_t nondet_median_ns = 0;
  double relative_overhead_pct = 0.0;
};

struct TopKRow {
  std::string kernel_id;
  std::int64_t total_ns = 0;
  double share = 0.0;  // of all measured time
};

/// Rows by descending cumulative time, ties by kernel_id.
inline std::vector<TopKRow> top_k(const std::vector<KernelTiming>& timings, std::size_t k) {
  if (k == 0) throw DataError("top_k needs k >= 1");
  std::map<std::string, std::int64_t> totals;
  std::int64_t all = 0;
  for (const auto& t : timings) {
    totals[t.kernel_id] += t.total_ns;
    all += t.total_ns;
  }
  std::vector<TopKRow> rows;
  for (const auto& [id, total] : totals) {
    rows.push_back({id, total, all > 0 ? static_cast<double>(total) / static_cast<double>(all) : 0.0});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const TopKRow& a, const TopKRow& b) {
    if (a.total_ns != b.total_ns) return a.total_ns > b.total_ns;
    return a.kernel_id < b.kernel_id;
  });
  if (rows.size() > k) rows.resize(k);
  return rows;
}

struct OverheadReport {
  ConvShape shape;
  std::vector<KernelTiming> timings;  // sizes x {sequential, permuted}
  std::vector<OverheadRow> rows;
  std::vector<TopKRow> top;
};

/// Times conv2d for each kernel size under Sequential and Permuted order.
inline OverheadReport overhead_sweep(const std::vector<std::size_t>& kernel_sizes,
                                     const ConvShape& shape, const TimingOptions& opts = {},
                                     std::uint64_t seed = 0) {
  OverheadReport rep;
  rep.shape = shape;
  for (auto k : kernel_sizes) {
    if (k % 2 == 0) throw DataError("kernel sizes must be odd");
    OpDescriptor d{shape, k, seed, false};
    const AccumulationPolicy det = Sequential{};
    const AccumulationPolicy nondet = Permuted{derive_seed(seed, Stream::kImplEntropy, k)};
    auto td = time_kernel(d, det, opts);
    auto tn = time_kernel(d, nondet, opts);
    rep.rows.push_back({k, td.median_ns, tn.median_ns,
                        relative_overhead_pct(td.median_ns, tn.median_ns)});
    rep.timings.push_back(std::move(td));
    rep.timings.push_back(std::move(tn));
  }
  rep.top = top_k(rep.timings, std::max<std::size_t>(1, rep.timings.size()));
  return rep;
}

/// kernel_size,policy,median_ns,rel_overhead_pct. Each row is relative to the
/// permuted timing of the same kernel size.
inline std::string overhead_csv(const OverheadReport& rep) {
  std::string out = "kernel_size,policy,median_ns,rel_overhead_pct\n";
  for (const auto& t : rep.timings) {
    std::int64_t ref = 0;
    for (const auto& r : rep.rows)
      if (r.kernel_size == t.kernel_size) ref = r.nondet_median_ns;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3f", relative_overhead_pct(t.median_ns, ref));
    out += std::to_string(t.kernel_size) + "," + t.policy + "," +
           std::to_string(t.median_ns) + "," + buf + "\n";
  }
  return out;
}

inline nlohmann::json overhead_json(const OverheadReport& rep) {
  nlohmann::json timings = nlohmann::json::array();
  for (const auto& t : rep.timings) {
    timings.push_back({{"kernel_id", t.kernel_id},
                       {"kernel_size", t.kernel_size},
                       {"policy", t.policy},
                       {"reps", t.reps},
                       {"checksum", t.checksum},
                       {"timings", {{"min_ns", t.min_ns},
                                    {"median_ns", t.median_ns},
                                    {"p90_ns", t.p90_ns},
                                    {"total_ns", t.total_ns}}}});
  }
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : rep.rows) {
    rows.push_back({{"kernel_size", r.kernel_size},
                    {"timings", {{"det_median_ns", r.det_median_ns},
                                 {"nondet_median_ns", r.nondet_median_ns},
                                 {"relative_overhead_pct", r.relative_overhead_pct}}}});
  }
  nlohmann::json top = nlohmann::json::array();
  for (const auto& r : rep.top) {
    top.push_back({{"kernel_id", r.kernel_id},
                   {"timings", {{"total_ns", r.total_ns}, {"share", r.share}}}});
  }
  return {{"note", kOverheadContext},
          {"shape", {rep.shape.h, rep.shape.w, rep.shape.c, rep.shape.f}},
          {"kernels", timings},
          {"overhead", rows},
          {"top_k", top}};
}

}  // namespace detnoise
