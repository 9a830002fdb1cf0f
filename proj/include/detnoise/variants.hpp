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

// The four noise-isolation variants and the fully pinned RunConfig they
// resolve to.
//
//   variant          algorithmic seeds        accumulation policy
//   algo+impl        per run                  Permuted, per-run entropy
//   algo             per run                  Sequential
//   impl             pinned (run index 0)     Permuted, per-run entropy
//   control          pinned (run index 0)     Sequential

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "detnoise/digest.hpp"
#include "detnoise/errors.hpp"
#include "detnoise/model.hpp"
#include "detnoise/numerics.hpp"
#include "detnoise/rng.hpp"
#include "json.hpp"

namespace detnoise {

enum class NoiseVariant { kAlgoPlusImpl, kAlgoOnly, kImplOnly, kControl };

inline constexpr std::array<NoiseVariant, 4> kAllVariants = {
    NoiseVariant::kAlgoPlusImpl, NoiseVariant::kAlgoOnly,
    NoiseVariant::kImplOnly, NoiseVariant::kControl};

inline std::string_view variant_name(NoiseVariant v) {
  switch (v) {
    case NoiseVariant::kAlgoPlusImpl: return "algo_impl";
    case NoiseVariant::kAlgoOnly: return "algo";
    case NoiseVariant::kImplOnly: return "impl";
    case NoiseVariant::kControl: return "control";
  }
  return "unknown";
}

inline std::optional<NoiseVariant> parse_variant(std::string_view name) {
  for (auto v : kAllVariants) {
    if (variant_name(v) == name) return v;
  }
  return std::nullopt;
}

inline bool varies_algo_seeds(NoiseVariant v) {
  return v == NoiseVariant::kAlgoPlusImpl || v == NoiseVariant::kAlgoOnly;
}

inline bool varies_impl(NoiseVariant v) {
  return v == NoiseVariant::kAlgoPlusImpl || v == NoiseVariant::kImplOnly;
}

struct AlgoSeeds {
  RngState init, shuffle, augment, dropout;
  friend bool operator==(const AlgoSeeds&, const AlgoSeeds&) = default;
};

struct RunConfig {
  NoiseVariant variant = NoiseVariant::kControl;
  ModelSpec spec;
  TrainConfig train;
  AlgoSeeds algo_seeds;
  AccumulationPolicy impl_policy = Sequential{};
  std::uint64_t run_index = 0;
  std::uint64_t master_seed = 0;
  std::string config_hash;  // sha256 of canonical_json() without this field
};

inline nlohmann::json policy_to_json(const AccumulationPolicy& p) {
  nlohmann::json j = {{"kind", policy_name(p)}};
  if (const auto* t = std::get_if<PairwiseTree>(&p)) j["block"] = t->block;
  if (const auto* r = std::get_if<Permuted>(&p)) {
    j["entropy"] = to_hex(r->entropy.state());
  }
  return j;
}

inline AccumulationPolicy policy_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "sequential") return Sequential{};
  if (kind == "compensated") return Compensated{};
  if (kind == "pairwise") return PairwiseTree{j.value("block", std::size_t{8})};
  if (kind == "permuted") {
    const auto v = parse_hex(j.at("entropy").get<std::string>());
    if (!v) throw DataError("bad permuted entropy value");
    return Permuted{RngState(*v)};
  }
  throw DataError("unknown accumulation policy '" + kind + "'");
}

/// Canonical JSON body of a RunConfig (sorted keys, 64-bit values as hex
/// strings). `config_hash` is not part of it.
inline nlohmann::json canonical_json(const RunConfig& c) {
  return {
      {"variant", std::string(variant_name(c.variant))},
      {"spec", c.spec},
      {"train", c.train},
      {"algo_seeds",
       {{"init", to_hex(c.algo_seeds.init.state())},
        {"shuffle", to_hex(c.algo_seeds.shuffle.state())},
        {"augment", to_hex(c.algo_seeds.augment.state())},
        {"dropout", to_hex(c.algo_seeds.dropout.state())}}},
      {"impl_policy", policy_to_json(c.impl_policy)},
      {"run_index", c.run_index},
      {"master_seed", to_hex(c.master_seed)},
  };
}

inline std::string compute_config_hash(const RunConfig& c) {
  return sha256_hex(canonical_json(c).dump());
}

/// Pins every noise source of one run.
inline RunConfig resolve(NoiseVariant variant, std::uint64_t run_index,
                         std::uint64_t master_seed, const ModelSpec& spec,
                         const TrainConfig& train) {
  RunConfig c;
  c.variant = variant;
  c.spec = spec;
  c.train = train;
  c.run_index = run_index;
  c.master_seed = master_seed;
  const std::uint64_t algo_run = varies_algo_seeds(variant) ? run_index : 0;
  c.algo_seeds = {derive_seed(master_seed, Stream::kInit, algo_run),
                  derive_seed(master_seed, Stream::kShuffle, algo_run),
                  derive_seed(master_seed, Stream::kAugment, algo_run),
                  derive_seed(master_seed, Stream::kDropout, algo_run)};
  if (varies_impl(variant)) {
    c.impl_policy =
        Permuted{derive_seed(master_seed, Stream::kImplEntropy, run_index)};
  } else {
    c.impl_policy = Sequential{};
  }
  c.config_hash = compute_config_hash(c);
  return c;
}

inline nlohmann::json to_json_with_hash(const RunConfig& c) {
  auto j = canonical_json(c);
  j["config_hash"] = c.config_hash;
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  const auto v = parse_variant(j.at("variant").get<std::string>());
  if (!v) throw DataError("unknown variant in run config");
  c.variant = *v;
  c.spec = j.at("spec").get<ModelSpec>();
  c.train = j.at("train").get<TrainConfig>();
  auto seed = [&](const char* key) {
    const auto parsed =
        parse_hex(j.at("algo_seeds").at(key).get<std::string>());
    if (!parsed) throw DataError(std::string("bad algo seed ") + key);
    return RngState(*parsed);
  };
  c.algo_seeds = {seed("init"), seed("shuffle"), seed("augment"),
                  seed("dropout")};
  c.impl_policy = policy_from_json(j.at("impl_policy"));
  c.run_index = j.at("run_index").get<std::uint64_t>();
  const auto master = parse_hex(j.at("master_seed").get<std::string>());
  if (!master) throw DataError("bad master seed");
  c.master_seed = *master;
  c.config_hash = compute_config_hash(c);
  if (j.contains("config_hash") &&
      j.at("config_hash").get<std::string>() != c.config_hash) {
    throw DataError("run config hash does not match its contents");
  }
  return c;
}

}  // namespace detnoise
