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

// Splittable SplitMix64 streams. Every stochastic source of a training run
// (initialization, shuffling, augmentation, dropout, accumulation order) owns
// one of these, derived from a master seed. Constants and golden vectors are
// listed in docs/rng.md.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace detnoise {

namespace splitmix {
inline constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;
inline constexpr std::uint64_t kMul1 = 0xBF58476D1CE4E5B9ULL;
inline constexpr std::uint64_t kMul2 = 0x94D049BB133111EBULL;

/// SplitMix64 output finalizer. A bijection on 64-bit words with mix(0) == 0.
constexpr std::uint64_t mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * kMul1;
  z = (z ^ (z >> 27)) * kMul2;
  return z ^ (z >> 31);
}
}  // namespace splitmix

enum class Stream : std::uint8_t {
  kInit = 0,
  kShuffle = 1,
  kAugment = 2,
  kDropout = 3,
  kImplEntropy = 4,
};

inline std::string_view stream_name(Stream s) {
  switch (s) {
    case Stream::kInit: return "init";
    case Stream::kShuffle: return "shuffle";
    case Stream::kAugment: return "augment";
    case Stream::kDropout: return "dropout";
    case Stream::kImplEntropy: return "impl_entropy";
  }
  return "unknown";
}

struct SeedSpec {
  std::uint64_t master_seed = 0;
  Stream stream = Stream::kInit;
  std::uint64_t run_index = 0;  // must fit in 48 bits
};

/// A single SplitMix64 state word. Copying a state forks the stream: both
/// copies produce the same sequence.
class RngState {
 public:
  constexpr RngState() = default;
  constexpr explicit RngState(std::uint64_t state) : state_(state) {}

  constexpr std::uint64_t state() const { return state_; }

  constexpr std::uint64_t next_u64() {
    state_ += splitmix::kGamma;
    return splitmix::mix(state_);
  }

  /// Top 53 bits of next_u64() scaled by 2^-53, in [0, 1).
  double next_unit() { return unit_from_bits(next_u64()); }

  /// Uniform integer in [0, bound) by rejection: draws below 2^64 mod bound
  /// are discarded so every residue is equally likely.
  std::uint64_t uniform_below(std::uint64_t bound) {
    if (bound <= 1) return 0;
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % bound;
    }
  }

  /// Standard normal via Box-Muller. Consumes exactly two unit draws.
  double gaussian() {
    const double u1 = next_unit();
    const double u2 = next_unit();
    return box_muller(u1, u2);
  }

  static constexpr double unit_from_bits(std::uint64_t bits) {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
  }

  static double box_muller(double u1, double u2) {
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  friend constexpr bool operator==(const RngState&, const RngState&) = default;

 private:
  std::uint64_t state_ = 0;
};

/// (stream, run_index) -> mixed word. Injective for run_index < 2^48 and
/// zero for (kInit, 0).
constexpr std::uint64_t stream_hash(Stream stream, std::uint64_t run_index) {
  return splitmix::mix((static_cast<std::uint64_t>(stream) << 48) |
                       (run_index & 0xFFFFFFFFFFFFULL));
}

constexpr RngState derive_seed(const SeedSpec& spec) {
  return RngState(spec.master_seed ^ stream_hash(spec.stream, spec.run_index));
}

constexpr RngState derive_seed(std::uint64_t master, Stream stream,
                               std::uint64_t run_index) {
  return derive_seed(SeedSpec{master, stream, run_index});
}

/// Child stream keyed by `key`. Children of one parent with distinct keys are
/// independent; the parent is not advanced.
constexpr RngState split(RngState parent, std::uint64_t key) {
  return RngState(
      splitmix::mix(parent.state() ^ splitmix::mix(key + splitmix::kGamma)));
}

/// Fisher-Yates shuffle of [0, n). Walks i = n-1 down to 1 drawing
/// j = uniform_below(i + 1).
inline std::vector<std::size_t> permutation(RngState& state, std::size_t n) {
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(state.uniform_below(i));
    std::swap(out[i - 1], out[j]);
  }
  return out;
}

inline std::string to_hex(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s = "0x";
  for (int shift = 60; shift >= 0; shift -= 4) s += kDigits[(v >> shift) & 0xF];
  return s;
}

inline std::optional<std::uint64_t> parse_hex(std::string_view s) {
  if (s.starts_with("0x") || s.starts_with("0X")) s.remove_prefix(2);
  if (s.empty() || s.size() > 16) return std::nullopt;
  std::uint64_t v = 0;
  for (char c : s) {
    v <<= 4;
    if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else if (c >= 'A' && c <= 'F') v |= static_cast<std::uint64_t>(c - 'A' + 10);
    else return std::nullopt;
  }
  return v;
}

}  // namespace detnoise
