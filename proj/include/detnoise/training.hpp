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

#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "detnoise/errors.hpp"
#include "detnoise/model.hpp"
#include "detnoise/numerics.hpp"
#include "detnoise/rng.hpp"
#include "detnoise/variants.hpp"

namespace detnoise {

struct RunTimings {
  std::int64_t train_ns = 0;
  std::int64_t eval_ns = 0;
};

/// Everything one training run produced. Immutable once returned.
struct RunArtifact {
  RunConfig config;
  Weights weights;
  std::vector<int> predictions;  // test set
  std::vector<int> labels;       // test set
  Tensor logits;                 // test set, N x K
  std::map<std::string, std::vector<int>> subgroups;  // test set
  std::vector<double> loss_curve;  // mean training loss per epoch
  RunTimings timings;
};

// Salt reserved for the final test-set evaluation pass.
inline constexpr std::uint64_t kEvalSalt = ~std::uint64_t{0};

/// Rows `ids` of `data`, plus optional Gaussian jitter keyed by
/// (epoch, example id) so the noise an example receives does not depend on
/// the batch it lands in.
inline Tensor gather_rows(const Dataset& data, std::span<const std::size_t> ids,
                          double jitter_sigma, RngState augment_epoch_seed) {
  const std::size_t d = data.feature_size();
  Tensor out({ids.size(), d});
  const auto src = data.features.data();
  auto dst = out.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d,
                dst.begin() + static_cast<std::ptrdiff_t>(r * d));
    if (jitter_sigma > 0.0) {
      RngState s = split(augment_epoch_seed, ids[r]);
      for (std::size_t c = 0; c < d; ++c) {
        dst[r * d + c] += static_cast<float>(jitter_sigma * s.gaussian());
      }
    }
  }
  return out;
}

/// Example presentation order for one epoch.
inline std::vector<std::size_t> epoch_order(const TrainConfig& cfg,
                                            RngState shuffle_seed,
                                            std::size_t epoch, std::size_t n) {
  if (!cfg.shuffle) return detail::iota_ids(n);
  RngState s = split(shuffle_seed, epoch);
  return permutation(s, n);
}

/// Trains one run end to end. The artifact is a pure function of
/// (config, train data, test data) apart from `timings`.
inline RunArtifact train(const RunConfig& run, const Dataset& train_data,
                         const Dataset& test_data) {
  using Clock = std::chrono::steady_clock;
  train_data.validate();
  test_data.validate();
  if (train_data.size() == 0) throw DataError("training set is empty");
  if (test_data.size() == 0) throw DataError("test set is empty");
  run.spec.validate();
  run.train.validate(train_data.size());
  if (train_data.feature_size() != run.spec.input_size() ||
      test_data.feature_size() != run.spec.input_size()) {
    throw DataError("dataset feature width does not match model input shape");
  }
  if (train_data.num_classes != run.spec.output_classes ||
      test_data.num_classes != run.spec.output_classes) {
    throw DataError("dataset class count does not match model output_classes");
  }

  RunArtifact art;
  art.config = run;
  const auto& cfg = run.train;
  const auto t0 = Clock::now();

  TrainState state(init_weights(run.spec, run.algo_seeds.init));
  const std::size_t n = train_data.size();
  std::vector<int> batch_labels;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(cfg, run.algo_seeds.shuffle, epoch, n);
    const RngState augment_seed = split(run.algo_seeds.augment, epoch);
    const float lr = static_cast<float>(cfg.learning_rate(epoch));
    double loss_sum = 0.0, loss_comp = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::vector<std::size_t> ids(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      if (cfg.canonical_batch_order) std::sort(ids.begin(), ids.end());
      const Tensor batch =
          gather_rows(train_data, ids, cfg.augment_sigma, augment_seed);
      batch_labels.resize(ids.size());
      for (std::size_t i = 0; i < ids.size(); ++i)
        batch_labels[i] = train_data.labels[ids[i]];

      StepInputs inputs;
      inputs.learning_rate = lr;
      inputs.dropout_seed = split(run.algo_seeds.dropout,
                                  static_cast<std::uint64_t>(state.step));
      inputs.example_ids = ids;
      const auto step_policy =
          salted(run.impl_policy, static_cast<std::uint64_t>(state.step));
      const float loss = train_step(state, run.spec, cfg, batch, batch_labels,
                                    step_policy, inputs);
      // Neumaier accumulation of the per-batch losses
      const double x = loss;
      const double t = loss_sum + x;
      loss_comp += std::fabs(loss_sum) >= std::fabs(x) ? (loss_sum - t) + x
                                                       : (x - t) + loss_sum;
      loss_sum = t;
      ++batches;
    }
    art.loss_curve.push_back((loss_sum + loss_comp) /
                             static_cast<double>(batches));
  }
  const auto t1 = Clock::now();

  art.logits = forward(state.weights, test_data.features, run.spec,
                       salted(run.impl_policy, kEvalSalt), Mode::kEval,
                       std::nullopt, &cfg);
  art.predictions = argmax_rows(art.logits);
  const auto t2 = Clock::now();

  art.weights = std::move(state.weights);
  art.labels = test_data.labels;
  art.subgroups = test_data.subgroups;
  art.timings.train_ns =
      std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
  art.timings.eval_ns =
      std::chrono::duration_cast<std::chrono::nanoseconds>(t2 - t1).count();
  return art;
}

}  // namespace detnoise
