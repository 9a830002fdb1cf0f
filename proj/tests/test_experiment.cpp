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

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <vector>

#include "detnoise/experiment.hpp"
#include "support/scratch.hpp"

namespace detnoise {
namespace {

using testing::ScratchDir;
using testing::small_plan;

TrainTestData small_data() { return load_datasets(small_plan()); }

// Independent oracle: nearest class mean, computed in binary64.
double nearest_centroid_accuracy(const TrainTestData& d) {
  const std::size_t k = d.train.num_classes, dim = d.train.feature_size();
  std::vector<std::vector<double>> mean(k, std::vector<double>(dim, 0.0));
  std::vector<double> count(k, 0.0);
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    const auto y = static_cast<std::size_t>(d.train.labels[i]);
    count[y] += 1.0;
    for (std::size_t c = 0; c < dim; ++c) mean[y][c] += d.train.features.at(i, c);
  }
  for (std::size_t y = 0; y < k; ++y)
    for (auto& m : mean[y]) m /= count[y];
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.test.size(); ++i) {
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t y = 0; y < k; ++y) {
      double dist = 0.0;
      for (std::size_t c = 0; c < dim; ++c) {
        const double e = d.test.features.at(i, c) - mean[y][c];
        dist += e * e;
      }
      if (dist < best_d) best_d = dist, best = y;
    }
    correct += static_cast<int>(best) == d.test.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(d.test.size());
}

TEST(LargestRemainder, ExactSplits) {
  EXPECT_EQ(largest_remainder(10000, {0.9, 0.1}), (std::vector<std::size_t>{9000, 1000}));
  EXPECT_EQ(largest_remainder(10, {1, 1, 1}), (std::vector<std::size_t>{4, 3, 3}));
  // Floors 3, 1, 1; the two 0.75 remainders win over 0.5.
  EXPECT_EQ(largest_remainder(7, {0.5, 0.25, 0.25}), (std::vector<std::size_t>{3, 2, 2}));
  const auto c = largest_remainder(1001, {0.3, 0.3, 0.4});
  EXPECT_EQ(c[0] + c[1] + c[2], 1001u);
}

TEST(Synthetic, GroupSizesAndPositiveRatesByConstruction) {
  SyntheticBlobsParams p;
  p.n_train = 10000;
  p.n_test = 100;
  p.subgroups = {{"age", {0.9, 0.1}, {0.5, 0.02}}};
  const auto d = generate_synthetic(p, 1);
  const auto& g = d.train.subgroups.at("age");
  std::map<int, std::size_t> size, pos;
  for (std::size_t i = 0; i < g.size(); ++i) {
    ++size[g[i]];
    pos[g[i]] += d.train.labels[i] == 1;
  }
  EXPECT_EQ(size[0], 9000u);
  EXPECT_EQ(size[1], 1000u);
  EXPECT_EQ(pos[0], 4500u);
  EXPECT_EQ(pos[1], 20u);
}

TEST(Synthetic, SecondAttributeKeepsLabelsConsistent) {
  SyntheticBlobsParams p;
  p.n_train = 1000;
  p.n_test = 100;
  p.subgroups = {{"a", {0.5, 0.5}, {0.4, 0.2}}, {"b", {0.8, 0.2}, {0.3, 0.3}}};
  const auto d = generate_synthetic(p, 2);
  const auto& b = d.train.subgroups.at("b");
  std::size_t pos_b1 = 0, size_b1 = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    size_b1 += b[i] == 1;
    pos_b1 += b[i] == 1 && d.train.labels[i] == 1;
  }
  EXPECT_EQ(size_b1, 200u);
  EXPECT_EQ(pos_b1, 60u);
}

TEST(Synthetic, InvalidParamsAreRejected) {
  SyntheticBlobsParams p;
  p.subgroups = {{"age", {0.9, 0.2}, {0.5, 0.5}}};
  EXPECT_THROW(generate_synthetic(p, 1), DataError);
  p.subgroups = {{"age", {0.9, 0.1}, {0.5, 1.5}}};
  EXPECT_THROW(generate_synthetic(p, 1), DataError);
  // 0.5 of 1000 positives under "a" but only 0.1 under "b": infeasible.
  p.n_train = 1000;
  p.subgroups = {{"a", {1.0}, {0.5}}, {"b", {1.0}, {0.1}}};
  EXPECT_THROW(generate_synthetic(p, 1), DataError);
}

TEST(Synthetic, SameSeedSameBytes) {
  SyntheticBlobsParams p;
  p.n_train = 300;
  p.n_test = 50;
  p.subgroups = {{"g", {0.7, 0.3}, {0.5, 0.1}}};
  const auto a = generate_synthetic(p, 9), b = generate_synthetic(p, 9),
             c = generate_synthetic(p, 10);
  EXPECT_EQ(dataset_csv(a.train), dataset_csv(b.train));
  EXPECT_EQ(dataset_csv(a.test), dataset_csv(b.test));
  EXPECT_NE(dataset_csv(a.train), dataset_csv(c.train));
}

TEST(Synthetic, WideSeparationIsLearned) {
  auto plan = small_plan();
  auto& src = std::get<SyntheticSource>(plan.dataset);
  src.params.separation = 10.0;
  src.params.n_train = 600;
  src.params.n_test = 400;
  plan.train.epochs = 10;
  const auto data = load_datasets(plan);
  ASSERT_GT(nearest_centroid_accuracy(data), 0.99);
  const auto run = train(resolve(NoiseVariant::kAlgoPlusImpl, 0, plan.master_seed,
                                 plan.spec, plan.train),
                         data.train, data.test);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < run.labels.size(); ++i)
    correct += run.predictions[i] == run.labels[i];
  EXPECT_GT(static_cast<double>(correct) / static_cast<double>(run.labels.size()), 0.99);
}

TEST(Plan, ValidationAndJsonRoundTrip) {
  auto plan = imbalanced_plan();
  plan.output_dir = "out";
  const auto j = plan_json(plan);
  const auto back = plan_from_json(j, ".");
  EXPECT_EQ(plan_json(back), j);
  auto bad = plan;
  bad.runs_per_variant = 1;
  EXPECT_THROW(bad.validate(), DataError);
  bad = plan;
  bad.name = "a/b";
  EXPECT_THROW(bad.validate(), DataError);
}

TEST(Plan, PresetsAreValid) {
  for (const auto& p : {default_plan(), cancellation_plan(), imbalanced_plan()})
    EXPECT_NO_THROW(p.validate());
  EXPECT_EQ(default_plan().runs_per_variant, 10u);
}

TEST(RunGroup, ControlGroupHasZeroDivergence) {
  auto plan = small_plan();
  plan.runs_per_variant = 3;
  const auto g = run_group(plan, NoiseVariant::kControl, small_data());
  ASSERT_EQ(g.report.pairwise_churn.values.size(), 3u);
  for (double v : g.report.pairwise_churn.values) EXPECT_EQ(v, 0.0);
  for (double v : g.report.pairwise_l2.values) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(g.report.accuracy.stddev, 0.0);
}

TEST(RunGroup, FourRunsGiveSixPairs) {
  auto plan = small_plan();
  plan.runs_per_variant = 4;
  const auto g = run_group(plan, NoiseVariant::kImplOnly, small_data());
  EXPECT_EQ(g.report.pairwise_churn.values.size(), 6u);
  EXPECT_EQ(g.report.pairwise_l2.values.size(), 6u);
}

TEST(RunGroup, ThreadCountDoesNotChangeResults) {
  auto plan = small_plan();
  plan.runs_per_variant = 3;
  const auto data = small_data();
  const auto a = run_group(plan, NoiseVariant::kAlgoPlusImpl, data, {.parallel = 1});
  const auto b = run_group(plan, NoiseVariant::kAlgoPlusImpl, data, {.parallel = 3});
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(a.artifacts[k].weights, b.artifacts[k].weights);
    EXPECT_EQ(a.artifacts[k].predictions, b.artifacts[k].predictions);
  }
}

TEST(RunGroup, PersistedGroupReproducesChecksums) {
  ScratchDir dir("exp-repro");
  auto plan = small_plan();
  plan.runs_per_variant = 3;
  const auto data = small_data();
  plan.output_dir = (dir.path() / "a").string();
  run_group(plan, NoiseVariant::kAlgoPlusImpl, data);
  plan.output_dir = (dir.path() / "b").string();
  run_group(plan, NoiseVariant::kAlgoPlusImpl, data);
  for (std::size_t k = 0; k < 3; ++k) {
    const auto rel = fs::path("small") / "algo_impl" / ("run_" + std::to_string(k));
    for (auto f : {kWeightsFile, kPredictionsFile, kRunConfigFile, kManifestFile}) {
      EXPECT_EQ(sha256_file((dir.path() / "a" / rel / f).string()),
                sha256_file((dir.path() / "b" / rel / f).string()))
          << rel << "/" << f;
    }
    const auto la = strip_volatile(read_json(dir.path() / "a" / rel / kTrainingLogFile));
    const auto lb = strip_volatile(read_json(dir.path() / "b" / rel / kTrainingLogFile));
    EXPECT_EQ(la, lb);
  }
}

TEST(RunGroup, OutputIsCreateOnlyUnlessForced) {
  ScratchDir dir("exp-force");
  auto plan = small_plan();
  plan.output_dir = dir.path().string();
  const auto data = small_data();
  run_group(plan, NoiseVariant::kControl, data);
  EXPECT_THROW(run_group(plan, NoiseVariant::kControl, data), DataError);
  EXPECT_NO_THROW(run_group(plan, NoiseVariant::kControl, data, {.force = true}));
}

TEST(RunGroup, DivergenceAbortsAndNamesTheRun) {
  auto plan = small_plan();
  plan.train.base_lr = 1e30;
  plan.train.momentum = 0.0;
  try {
    run_group(plan, NoiseVariant::kAlgoOnly, small_data());
    FAIL() << "expected divergence";
  } catch (const DivergedError& e) {
    EXPECT_NE(std::string(e.what()).find("variant algo run 0"), std::string::npos) << e.what();
  }
}

TEST(Experiment, ReportRegenerationIsIdempotent) {
  ScratchDir dir("exp-report");
  auto plan = imbalanced_plan();
  auto& src = std::get<SyntheticSource>(plan.dataset);
  src.params.n_train = 300;
  src.params.n_test = 200;
  plan.spec.input_shape = {src.params.dim};
  plan.train.epochs = 2;
  plan.runs_per_variant = 2;
  plan.variants = {NoiseVariant::kControl, NoiseVariant::kImplOnly};
  plan.output_dir = dir.path().string();
  const auto result = run_experiment(plan);
  const auto root = plan_root(plan);
  const auto before = sha256_file((root / "report.json").string());
  EXPECT_TRUE(fs::exists(root / "plan.json"));
  EXPECT_TRUE(fs::exists(root / "control_pairwise.csv"));
  EXPECT_TRUE(fs::exists(root / "impl_subgroup_age.csv"));

  const auto reports = regenerate_reports(root);
  ASSERT_EQ(reports.size(), 2u);
  EXPECT_EQ(report_json(reports.at("impl")), report_json(result.reports.at("impl")));
  write_experiment_report(root, plan.name, reports);
  EXPECT_EQ(sha256_file((root / "report.json").string()), before);
  write_experiment_report(root, plan.name, regenerate_reports(root));
  EXPECT_EQ(sha256_file((root / "report.json").string()), before);

  const auto control = reports.at("control");
  for (double v : control.pairwise_churn.values) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(regenerate_reports(dir.path() / "missing"), DataError);
}

TEST(OrderingSweep, FullBatchCanonicalIsExactlyZero) {
  auto plan = small_plan();
  plan.train.epochs = 2;
  const auto data = small_data();
  const std::size_t n = data.train.size();
  const auto rows = ordering_sweep(plan, {16, n}, data);
  ASSERT_EQ(rows.size(), 8u);
  for (const auto& r : rows) {
    if (r.batch_size == n && r.accumulation == BatchAccumulation::kCanonical) {
      EXPECT_EQ(r.churn, 0.0) << r.policy;
      EXPECT_EQ(r.l2, 0.0) << r.policy;
    }
    if (r.batch_size == 16) EXPECT_GT(r.l2, 0.0) << "different mini-batches";
  }
  const auto csv = ordering_csv(rows);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 9);
}

TEST(OrderingSweep, RejectsBadBatchSizes) {
  const auto plan = small_plan();
  const auto data = small_data();
  const std::size_t n = data.train.size();
  EXPECT_THROW(ordering_sweep(plan, {16}, data), DataError);
  EXPECT_THROW(ordering_sweep(plan, {n + 1, n}, data), DataError);
  EXPECT_THROW(ordering_sweep(plan, {0, n}, data), DataError);
}

TEST(OrderingSweep, BatchOfOneDiffersFromFullBatch) {
  auto plan = small_plan();
  plan.train.epochs = 1;
  const auto data = small_data();
  auto one = resolve(NoiseVariant::kAlgoOnly, 0, plan.master_seed, plan.spec, plan.train);
  auto full = one;
  one.train.batch_size = 1;
  full.train.batch_size = data.train.size();
  EXPECT_NE(train(one, data.train, data.test).loss_curve,
            train(full, data.train, data.test).loss_curve);
}

TEST(BnAblation, ArmsDifferOnlyInTheBnField) {
  auto plan = small_plan();
  const auto data = small_data();
  const auto ab = bn_ablation(plan, data);
  EXPECT_EQ(ab.with_bn.n_runs, plan.runs_per_variant);
  EXPECT_EQ(ab.without_bn.n_runs, plan.runs_per_variant);
  EXPECT_NE(ab.with_bn_hash, ab.without_bn_hash);

  auto with = resolve(NoiseVariant::kAlgoPlusImpl, 0, plan.master_seed, plan.spec, plan.train);
  auto without = with;
  with.spec.batch_norm = true;
  without.spec.batch_norm = false;
  auto a = canonical_json(with), b = canonical_json(without);
  EXPECT_NE(a, b);
  a["spec"].erase("batch_norm");
  b["spec"].erase("batch_norm");
  EXPECT_EQ(a, b);
}

TEST(SubgroupStudy, TableHasOneRowPerGroupPlusOverall) {
  auto plan = imbalanced_plan();
  auto& src = std::get<SyntheticSource>(plan.dataset);
  src.params.n_train = 300;
  src.params.n_test = 200;
  plan.train.epochs = 2;
  plan.runs_per_variant = 3;
  const auto data = load_datasets(plan);
  const auto study = subgroup_study(plan, data);
  const auto table = subgroup_table(study, "age", SubgroupMetric::kAccuracy);
  // Header + "all" + two groups.
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 4);
  EXPECT_NE(table.find("all"), std::string::npos);
  EXPECT_THROW(subgroup_table(study, "height", SubgroupMetric::kFpr), DataError);
  EXPECT_THROW(subgroup_study(small_plan(), small_data()), DataError);
}

TEST(SubgroupStudy, SymmetricGroupsGiveRatiosNearOne) {
  auto plan = small_plan();
  auto& src = std::get<SyntheticSource>(plan.dataset);
  src.params.n_train = 400;
  src.params.n_test = 2000;
  src.params.subgroups = {{"half", {0.5, 0.5}, {0.5, 0.5}}};
  plan.runs_per_variant = 6;
  plan.variants = {NoiseVariant::kAlgoPlusImpl};
  const auto study = subgroup_study(plan, load_datasets(plan));
  const auto& rows = study.reports.at("algo_impl").subgroup.at("half");
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& r : rows) {
    ASSERT_TRUE(r.acc_ratio.has_value());
    EXPECT_GT(*r.acc_ratio, 0.3) << r.group;
    EXPECT_LT(*r.acc_ratio, 3.0) << r.group;
  }
}

}  // namespace
}  // namespace detnoise
