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

// Experiment plans and the run-group protocols built on them: one group of
// runs per noise variant, the data-order sweep, the batch-norm ablation and
// the imbalanced sub-group study.
//
// Output layout:
//   <output_dir>/<plan>/plan.json
//   <output_dir>/<plan>/test_groups.csv          (when the test set has groups)
//   <output_dir>/<plan>/<variant>/run_<k>/{manifest.json, weights.bin,
//                                          predictions.csv, runconfig.json,
//                                          training_log.json}
//   <output_dir>/<plan>/report.json, <variant>_{pairwise,summary}.csv,
//   <variant>_subgroup_<attr>.csv

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include "detnoise/errors.hpp"
#include "detnoise/io.hpp"
#include "detnoise/metrics.hpp"
#include "detnoise/model.hpp"
#include "detnoise/rng.hpp"
#include "detnoise/training.hpp"
#include "detnoise/variants.hpp"
#include "json.hpp"

namespace detnoise {

// ---------------------------------------------------------------------------
// Synthetic data

struct SubgroupSpec {
  std::string attribute;
  std::vector<double> proportions;
  std::vector<double> positive_rates;
};

/// Gaussian class clusters. Class c is centered at offset + e_c * s / sqrt(2)
/// with s = separation * cluster_std, so any two centers are s apart. A large
/// common `offset` makes binary32 sums cancellation-prone.
struct SyntheticBlobsParams {
  std::size_t n_train = 2000;
  std::size_t n_test = 1000;
  std::size_t classes = 2;
  std::size_t dim = 8;
  double separation = 3.0;
  double cluster_std = 1.0;
  double offset = 0.0;
  std::vector<SubgroupSpec> subgroups;

  void validate() const {
    if (n_train == 0 || n_test == 0) throw DataError("n_train and n_test must be > 0");
    if (classes < 2) throw DataError("classes must be >= 2");
    if (dim < classes) throw DataError("dim must be >= classes");
    if (!(separation >= 0.0) || !(cluster_std > 0.0) || !std::isfinite(offset)) {
      throw DataError("separation must be >= 0, cluster_std > 0, offset finite");
    }
    if (!subgroups.empty() && classes != 2) {
      throw DataError("subgroup positive-label rates require classes = 2");
    }
    for (const auto& s : subgroups) {
      if (s.attribute.empty()) throw DataError("subgroup attribute name is empty");
      if (s.proportions.empty() || s.proportions.size() != s.positive_rates.size()) {
        throw DataError("subgroup '" + s.attribute +
                        "' needs one positive rate per proportion");
      }
      double total = 0.0;
      for (double p : s.proportions) {
        if (!(p >= 0.0)) throw DataError("subgroup proportions must be >= 0");
        total += p;
      }
      if (std::fabs(total - 1.0) > 1e-9) {
        throw DataError("subgroup '" + s.attribute + "' proportions sum to " +
                        std::to_string(total) + ", not 1");
      }
      for (double r : s.positive_rates) {
        if (!(r >= 0.0 && r <= 1.0)) {
          throw DataError("subgroup positive rates must lie in [0, 1]");
        }
      }
    }
  }
};

/// Largest-remainder apportionment of n items; ties go to the lower index.
inline std::vector<std::size_t> largest_remainder(std::size_t n,
                                                  const std::vector<double>& weights) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> counts(weights.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = static_cast<double>(n) * weights[i] / total;
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    assigned += counts[i];
    remainders.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned)
    ++counts[remainders[i % remainders.size()].second];
  return counts;
}

namespace detail {

inline std::size_t positives_for(double rate, std::size_t size) {
  return static_cast<std::size_t>(std::llround(rate * static_cast<double>(size)));
}

inline Dataset generate_split(const SyntheticBlobsParams& p, RngState rng,
                              std::size_t n, Split which) {
  std::vector<int> labels;
  std::map<std::string, std::vector<int>> groups;
  if (p.subgroups.empty()) {
    const auto counts =
        largest_remainder(n, std::vector<double>(p.classes, 1.0));
    for (std::size_t c = 0; c < p.classes; ++c)
      labels.insert(labels.end(), counts[c], static_cast<int>(c));
  } else {
    // The first attribute fixes the labels; later attributes must agree on
    // the total number of positives.
    const auto& primary = p.subgroups.front();
    const auto sizes = largest_remainder(n, primary.proportions);
    auto& g0 = groups[primary.attribute];
    for (std::size_t g = 0; g < sizes.size(); ++g) {
      const std::size_t pos = positives_for(primary.positive_rates[g], sizes[g]);
      for (std::size_t i = 0; i < sizes[g]; ++i) {
        labels.push_back(i < pos ? 1 : 0);
        g0.push_back(static_cast<int>(g));
      }
    }
    const auto total_pos = static_cast<std::size_t>(
        std::count(labels.begin(), labels.end(), 1));
    for (std::size_t a = 1; a < p.subgroups.size(); ++a) {
      const auto& spec = p.subgroups[a];
      const auto sz = largest_remainder(n, spec.proportions);
      std::vector<std::size_t> pos(sz.size());
      std::size_t sum_pos = 0;
      for (std::size_t g = 0; g < sz.size(); ++g) {
        pos[g] = positives_for(spec.positive_rates[g], sz[g]);
        sum_pos += pos[g];
      }
      if (sum_pos != total_pos) {
        throw DataError("infeasible subgroup spec: attribute '" + spec.attribute +
                        "' implies " + std::to_string(sum_pos) +
                        " positives but '" + primary.attribute + "' implies " +
                        std::to_string(total_pos));
      }
      std::vector<std::size_t> positives, negatives;
      for (std::size_t i = 0; i < n; ++i)
        (labels[i] == 1 ? positives : negatives).push_back(i);
      RngState attr_rng = split(rng, 100 + a);
      const auto pperm = permutation(attr_rng, positives.size());
      const auto nperm = permutation(attr_rng, negatives.size());
      auto& ga = groups[spec.attribute];
      ga.assign(n, 0);
      std::size_t pi = 0, ni = 0;
      for (std::size_t g = 0; g < sz.size(); ++g) {
        for (std::size_t i = 0; i < pos[g]; ++i) ga[positives[pperm[pi++]]] = static_cast<int>(g);
        for (std::size_t i = 0; i < sz[g] - pos[g]; ++i)
          ga[negatives[nperm[ni++]]] = static_cast<int>(g);
      }
    }
  }

  RngState order_rng = split(rng, 1);
  const auto order = permutation(order_rng, n);
  RngState feature_rng = split(rng, 2);
  const double s = p.separation * p.cluster_std / std::sqrt(2.0);
  Dataset d;
  d.split = which;
  d.num_classes = p.classes;
  std::vector<float> feats(n * p.dim);
  d.labels.resize(n);
  for (auto& [name, g] : groups) d.subgroups[name].resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = order[i];
    const int y = labels[src];
    d.labels[i] = y;
    for (auto& [name, g] : groups) d.subgroups[name][i] = g[src];
    for (std::size_t c = 0; c < p.dim; ++c) {
      const double center = c == static_cast<std::size_t>(y) ? s : 0.0;
      feats[i * p.dim + c] = static_cast<float>(
          p.offset + center + p.cluster_std * feature_rng.gaussian());
    }
  }
  d.features = Tensor({n, p.dim}, std::move(feats));
  d.validate();
  return d;
}

}  // namespace detail

struct TrainTestData {
  Dataset train;
  Dataset test;
};

/// Train and test splits drawn from independent child streams of `seed`.
inline TrainTestData generate_synthetic(const SyntheticBlobsParams& params,
                                        std::uint64_t seed) {
  params.validate();
  const RngState root(seed);
  return {detail::generate_split(params, split(root, 1), params.n_train, Split::kTrain),
          detail::generate_split(params, split(root, 2), params.n_test, Split::kTest)};
}

inline void to_json(nlohmann::json& j, const SubgroupSpec& s) {
  j = {{"attribute", s.attribute},
       {"proportions", s.proportions},
       {"positive_rates", s.positive_rates}};
}

inline void from_json(const nlohmann::json& j, SubgroupSpec& s) {
  s.attribute = j.at("attribute").get<std::string>();
  s.proportions = j.at("proportions").get<std::vector<double>>();
  s.positive_rates = j.at("positive_rates").get<std::vector<double>>();
}

inline void to_json(nlohmann::json& j, const SyntheticBlobsParams& p) {
  j = {{"n_train", p.n_train},       {"n_test", p.n_test},
       {"classes", p.classes},       {"dim", p.dim},
       {"separation", p.separation}, {"cluster_std", p.cluster_std},
       {"offset", p.offset},         {"subgroups", p.subgroups}};
}

inline void from_json(const nlohmann::json& j, SyntheticBlobsParams& p) {
  const SyntheticBlobsParams d;
  p.n_train = j.value("n_train", d.n_train);
  p.n_test = j.value("n_test", d.n_test);
  p.classes = j.value("classes", d.classes);
  p.dim = j.value("dim", d.dim);
  p.separation = j.value("separation", d.separation);
  p.cluster_std = j.value("cluster_std", d.cluster_std);
  p.offset = j.value("offset", d.offset);
  p.subgroups = j.value("subgroups", std::vector<SubgroupSpec>{});
}

// ---------------------------------------------------------------------------
// Plans

struct SyntheticSource {
  SyntheticBlobsParams params;
  std::uint64_t seed = 0;
};

struct CsvSource {
  std::string train_path, test_path;
  std::size_t num_classes = 0;
};

struct IdxSource {
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t num_classes = 0;
};

using DatasetSource = std::variant<SyntheticSource, CsvSource, IdxSource>;

struct ExperimentPlan {
  std::string name = "default";
  DatasetSource dataset = SyntheticSource{};
  ModelSpec spec;
  TrainConfig train;
  std::vector<NoiseVariant> variants{kAllVariants.begin(), kAllVariants.end()};
  std::size_t runs_per_variant = 10;
  std::uint64_t master_seed = 0;
  std::string output_dir;

  void validate() const {
    if (name.empty() || name == "." || name == "..") {
      throw DataError("plan name must be a non-empty file name");
    }
    for (char c : name) {
      const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                      (c >= '0' && c <= '9') || c == '-' || c == '_' || c == '.';
      if (!ok) throw DataError("plan name '" + name + "' is not filesystem-safe");
    }
    if (runs_per_variant < 2) throw DataError("runs_per_variant must be >= 2");
    if (variants.empty()) throw DataError("plan lists no variants");
    spec.validate();
  }
};

/// The desk-scale reference plan: 2-class blobs, N = 2000, an MLP with two
/// hidden layers, 30 epochs.
inline ExperimentPlan default_plan() {
  ExperimentPlan plan;
  plan.name = "default";
  SyntheticSource src;
  src.params.n_train = 2000;
  src.params.n_test = 1000;
  src.params.classes = 2;
  src.params.dim = 8;
  src.params.separation = 2.0;
  src.params.offset = 6.0;  // uncentered features, as raw data usually is
  src.seed = 2021;
  plan.dataset = src;
  plan.spec.input_shape = {8};
  plan.spec.hidden_layers = {16, 16};
  plan.spec.output_classes = 2;
  plan.train.epochs = 30;
  plan.train.batch_size = 64;
  plan.train.base_lr = 0.05;
  // Momentum on these uncentered inputs kills every ReLU unit in about half
  // of the runs without batch norm.
  plan.train.momentum = 0.0;
  plan.master_seed = 7;
  return plan;
}

/// Features share a common offset, so first-layer sums carry large
/// cancelling terms and binary32 rounding depends on accumulation order.
/// Offsets much above 8 leave every ReLU unit dead at initialization.
/// Momentum turns rounding differences into flipped predictions; it also
/// kills every unit in some runs once initialization seeds vary.
inline ExperimentPlan cancellation_plan() {
  ExperimentPlan plan = default_plan();
  plan.name = "cancellation";
  auto& src = std::get<SyntheticSource>(plan.dataset);
  src.params.offset = 8.0;
  src.params.separation = 1.5;
  plan.train.base_lr = 0.02;
  plan.train.momentum = 0.9;
  plan.train.epochs = 20;
  return plan;
}

/// One attribute whose "old" group is small and almost never positive.
inline ExperimentPlan imbalanced_plan() {
  ExperimentPlan plan = default_plan();
  plan.name = "imbalanced";
  auto& src = std::get<SyntheticSource>(plan.dataset);
  src.params.separation = 2.0;
  src.params.offset = 0.0;
  plan.train.momentum = 0.9;
  src.params.subgroups = {{"age", {0.8, 0.2}, {0.3, 0.02}}};
  plan.variants = {NoiseVariant::kAlgoPlusImpl, NoiseVariant::kAlgoOnly,
                   NoiseVariant::kImplOnly};
  return plan;
}

inline nlohmann::json plan_json(const ExperimentPlan& plan) {
  nlohmann::json ds;
  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, SyntheticSource>) {
          ds = {{"kind", "synthetic"}, {"params", s.params}, {"seed", s.seed}};
        } else if constexpr (std::is_same_v<T, CsvSource>) {
          ds = {{"kind", "csv"}, {"train", s.train_path}, {"test", s.test_path},
                {"num_classes", s.num_classes}};
        } else {
          ds = {{"kind", "idx"},
                {"train_images", s.train_images}, {"train_labels", s.train_labels},
                {"test_images", s.test_images},   {"test_labels", s.test_labels},
                {"num_classes", s.num_classes}};
        }
      },
      plan.dataset);
  std::vector<std::string> variants;
  for (auto v : plan.variants) variants.emplace_back(variant_name(v));
  return {{"name", plan.name},
          {"dataset", ds},
          {"spec", plan.spec},
          {"train", plan.train},
          {"variants", variants},
          {"runs_per_variant", plan.runs_per_variant},
          {"master_seed", plan.master_seed},
          {"output_dir", plan.output_dir}};
}

/// Relative dataset paths are resolved against `base_dir`.
inline ExperimentPlan plan_from_json(const nlohmann::json& j,
                                     const fs::path& base_dir = {}) {
  try {
    ExperimentPlan plan;
    plan.name = j.value("name", plan.name);
    const auto& ds = j.at("dataset");
    const auto kind = ds.at("kind").get<std::string>();
    auto path = [&](const char* key) {
      fs::path p = ds.at(key).get<std::string>();
      if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
      return p.string();
    };
    if (kind == "synthetic") {
      SyntheticSource s;
      s.params = ds.value("params", SyntheticBlobsParams{});
      s.seed = ds.value("seed", std::uint64_t{0});
      plan.dataset = s;
    } else if (kind == "csv") {
      plan.dataset = CsvSource{path("train"), path("test"),
                               ds.value("num_classes", std::size_t{0})};
    } else if (kind == "idx") {
      plan.dataset = IdxSource{path("train_images"), path("train_labels"),
                               path("test_images"), path("test_labels"),
                               ds.value("num_classes", std::size_t{0})};
    } else {
      throw DataError("unknown dataset kind '" + kind + "'");
    }
    plan.spec = j.at("spec").get<ModelSpec>();
    plan.train = j.value("train", TrainConfig{});
    if (j.contains("variants")) {
      plan.variants.clear();
      for (const auto& v : j.at("variants")) {
        const auto parsed = parse_variant(v.get<std::string>());
        if (!parsed) throw DataError("unknown variant '" + v.get<std::string>() + "'");
        plan.variants.push_back(*parsed);
      }
    }
    plan.runs_per_variant = j.value("runs_per_variant", plan.runs_per_variant);
    plan.master_seed = j.value("master_seed", plan.master_seed);
    plan.output_dir = j.value("output_dir", plan.output_dir);
    plan.validate();
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed plan: ") + e.what());
  }
}

inline ExperimentPlan load_plan(const fs::path& path) {
  return plan_from_json(read_json(path), path.parent_path());
}

inline TrainTestData load_datasets(const ExperimentPlan& plan) {
  return std::visit(
      [&](const auto& s) -> TrainTestData {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, SyntheticSource>) {
          return generate_synthetic(s.params, s.seed);
        } else if constexpr (std::is_same_v<T, CsvSource>) {
          auto train = read_dataset_csv(s.train_path, s.num_classes, Split::kTrain);
          auto test = read_dataset_csv(s.test_path, s.num_classes, Split::kTest);
          const auto k = std::max(train.num_classes, test.num_classes);
          train.num_classes = test.num_classes = k;
          return {std::move(train), std::move(test)};
        } else {
          auto train = read_dataset_idx(s.train_images, s.train_labels,
                                        s.num_classes, Split::kTrain);
          auto test = read_dataset_idx(s.test_images, s.test_labels,
                                       s.num_classes, Split::kTest);
          const auto k = std::max(train.num_classes, test.num_classes);
          train.num_classes = test.num_classes = k;
          return {std::move(train), std::move(test)};
        }
      },
      plan.dataset);
}

// ---------------------------------------------------------------------------
// Run groups

struct GroupOptions {
  std::size_t parallel = 1;
  bool force = false;     // allow overwriting existing run directories
  bool persist = true;    // write artifacts when plan.output_dir is set
};

struct GroupResult {
  NoiseVariant variant = NoiseVariant::kControl;
  std::vector<RunArtifact> artifacts;
  StabilityReport report;
};

inline fs::path plan_root(const ExperimentPlan& plan) {
  return fs::path(plan.output_dir) / plan.name;
}

inline fs::path run_dir(const ExperimentPlan& plan, NoiseVariant v, std::size_t k) {
  return plan_root(plan) / std::string(variant_name(v)) / ("run_" + std::to_string(k));
}

/// Creates `dir` for writing. An existing directory is an error unless
/// `force` is set, in which case it is replaced.
inline void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!force) {
      throw DataError("refusing to overwrite " + dir.string() + " (use --force)");
    }
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

inline std::string test_groups_csv(const Dataset& test) {
  std::string out = "index";
  for (const auto& [name, g] : test.subgroups) out += "," + std::string(kAttrPrefix) + name;
  out += "\n";
  for (std::size_t i = 0; i < test.size(); ++i) {
    out += std::to_string(i);
    for (const auto& [name, g] : test.subgroups) out += "," + std::to_string(g[i]);
    out += "\n";
  }
  return out;
}

inline std::map<std::string, std::vector<int>> read_test_groups(const fs::path& path) {
  std::map<std::string, std::vector<int>> groups;
  if (!fs::exists(path)) return groups;
  const auto lines = csv_lines(read_text(path));
  if (lines.empty()) return groups;
  const auto header = split_csv_line(lines[0]);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split_csv_line(lines[i]);
    if (cells.size() != header.size()) throw DataError("ragged row in " + path.string());
    for (std::size_t c = 1; c < header.size(); ++c)
      groups[header[c].substr(kAttrPrefix.size())].push_back(
          parse_int(cells[c], path.string()));
  }
  return groups;
}

inline void write_plan_files(const ExperimentPlan& plan, const Dataset& test) {
  const auto root = plan_root(plan);
  fs::create_directories(root);
  write_text(root / "plan.json", dump_json(plan_json(plan)));
  if (!test.subgroups.empty()) write_text(root / "test_groups.csv", test_groups_csv(test));
}

/// Trains `plan.runs_per_variant` runs of one variant and builds their
/// report. Runs may execute on `options.parallel` threads; results do not
/// depend on the thread count. Any diverged run aborts the whole group.
inline GroupResult run_group(const ExperimentPlan& plan, NoiseVariant variant,
                             const TrainTestData& data,
                             const GroupOptions& options = {}) {
  plan.validate();
  const bool persist = options.persist && !plan.output_dir.empty();
  if (persist) {
    for (std::size_t k = 0; k < plan.runs_per_variant; ++k)
      prepare_output_dir(run_dir(plan, variant, k), options.force);
    write_plan_files(plan, data.test);
  }

  GroupResult result;
  result.variant = variant;
  result.artifacts.resize(plan.runs_per_variant);
  std::vector<std::exception_ptr> errors(plan.runs_per_variant);

  auto run_one = [&](std::size_t k) {
    try {
      const auto cfg = resolve(variant, k, plan.master_seed, plan.spec, plan.train);
      result.artifacts[k] = train(cfg, data.train, data.test);
      if (persist) write_run(run_dir(plan, variant, k), result.artifacts[k]);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(options.parallel, plan.runs_per_variant));
  if (workers == 1) {
    for (std::size_t k = 0; k < plan.runs_per_variant; ++k) {
      run_one(k);
      if (errors[k]) break;
    }
  } else {
    std::mutex mu;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) {
      pool.emplace_back([&] {
        for (;;) {
          std::size_t k;
          {
            std::lock_guard<std::mutex> lock(mu);
            if (next >= plan.runs_per_variant) return;
            k = next++;
          }
          run_one(k);
        }
      });
    }
    for (auto& th : pool) th.join();
  }

  for (std::size_t k = 0; k < errors.size(); ++k) {
    if (!errors[k]) continue;
    const std::string where = "variant " + std::string(variant_name(variant)) +
                              " run " + std::to_string(k);
    try {
      std::rethrow_exception(errors[k]);
    } catch (const DivergedError& e) {
      throw DivergedError(e.step(), where);
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  result.report = build_report(result.artifacts);
  return result;
}

inline nlohmann::json experiment_report_json(
    const std::string& plan_name,
    const std::map<std::string, StabilityReport>& reports) {
  nlohmann::json variants = nlohmann::json::object();
  for (const auto& [name, rep] : reports) variants[name] = report_json(rep);
  return {{"plan", plan_name}, {"variants", variants}};
}

/// report.json plus per-variant CSV tables under `root`.
inline void write_experiment_report(const fs::path& root, const std::string& plan_name,
                                    const std::map<std::string, StabilityReport>& reports) {
  fs::create_directories(root);
  write_text(root / "report.json", dump_json(experiment_report_json(plan_name, reports)));
  for (const auto& [name, rep] : reports) {
    write_text(root / (name + "_pairwise.csv"), pairwise_csv(rep));
    write_text(root / (name + "_summary.csv"), summary_csv(rep));
    for (const auto& [attr, rows] : rep.subgroup)
      write_text(root / (name + "_subgroup_" + attr + ".csv"), subgroup_csv(rows));
  }
}

struct ExperimentResult {
  std::map<std::string, GroupResult> groups;
  std::map<std::string, StabilityReport> reports;
};

inline ExperimentResult run_experiment(const ExperimentPlan& plan,
                                       const GroupOptions& options = {}) {
  plan.validate();
  const auto data = load_datasets(plan);
  ExperimentResult out;
  for (auto v : plan.variants) {
    auto g = run_group(plan, v, data, options);
    const std::string name(variant_name(v));
    out.reports[name] = g.report;
    out.groups.emplace(name, std::move(g));
  }
  if (options.persist && !plan.output_dir.empty()) {
    write_experiment_report(plan_root(plan), plan.name, out.reports);
  }
  return out;
}

/// Rebuilds every variant report from the artifacts under `root`
/// (a <output_dir>/<plan> directory). Pure post-processing.
inline std::map<std::string, StabilityReport> regenerate_reports(const fs::path& root) {
  if (!fs::is_directory(root)) throw DataError("no experiment directory " + root.string());
  const auto groups = read_test_groups(root / "test_groups.csv");
  std::map<std::string, StabilityReport> reports;
  for (auto v : kAllVariants) {
    const fs::path vdir = root / std::string(variant_name(v));
    if (!fs::is_directory(vdir)) continue;
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(vdir)) {
      if (e.is_directory() && e.path().filename().string().starts_with("run_"))
        dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
    std::vector<RunArtifact> runs;
    for (const auto& d : dirs) {
      auto a = read_run(d);
      a.subgroups = groups;
      runs.push_back(std::move(a));
    }
    if (runs.size() >= 2) reports[std::string(variant_name(v))] = build_report(runs);
  }
  if (reports.empty()) throw DataError("no run groups found under " + root.string());
  return reports;
}

// ---------------------------------------------------------------------------
// Ordering sweep

enum class BatchAccumulation { kCanonical, kPresentation };

struct OrderingRow {
  std::size_t batch_size = 0;
  std::string policy;        // "sequential" | "permuted"
  BatchAccumulation accumulation = BatchAccumulation::kPresentation;
  double churn = 0.0;
  double l2 = 0.0;
};

inline std::string_view accumulation_name(BatchAccumulation a) {
  return a == BatchAccumulation::kCanonical ? "canonical" : "presentation";
}

/// Trains run pairs that differ only in the data presentation order (shuffle
/// seed) for every batch size, under Sequential and Permuted accumulation
/// and with canonical or presentation-order batch reductions. All other
/// seeds and the accumulation entropy are shared within a pair.
inline std::vector<OrderingRow> ordering_sweep(const ExperimentPlan& plan,
                                               const std::vector<std::size_t>& batch_sizes,
                                               const TrainTestData& data) {
  plan.validate();
  const std::size_t n = data.train.size();
  if (std::find(batch_sizes.begin(), batch_sizes.end(), n) == batch_sizes.end()) {
    throw DataError("ordering sweep must include the full batch size " + std::to_string(n));
  }
  for (auto bs : batch_sizes) {
    if (bs == 0 || bs > n) {
      throw DataError("batch size " + std::to_string(bs) + " exceeds the " +
                      std::to_string(n) + " training examples");
    }
  }
  std::vector<OrderingRow> rows;
  for (auto bs : batch_sizes) {
    for (const bool permuted : {false, true}) {
      for (auto acc : {BatchAccumulation::kCanonical, BatchAccumulation::kPresentation}) {
        TrainConfig tc = plan.train;
        tc.batch_size = bs;
        tc.shuffle = true;
        tc.canonical_batch_order = acc == BatchAccumulation::kCanonical;
        std::vector<RunArtifact> pair;
        for (std::uint64_t order_index : {0, 1}) {
          RunConfig cfg = resolve(NoiseVariant::kControl, 0, plan.master_seed, plan.spec, tc);
          cfg.algo_seeds.shuffle = derive_seed(plan.master_seed, Stream::kShuffle, order_index);
          if (permuted) {
            cfg.impl_policy = Permuted{derive_seed(plan.master_seed, Stream::kImplEntropy, 0)};
          }
          cfg.run_index = order_index;
          cfg.config_hash = compute_config_hash(cfg);
          pair.push_back(train(cfg, data.train, data.test));
        }
        OrderingRow row;
        row.batch_size = bs;
        row.policy = permuted ? "permuted" : "sequential";
        row.accumulation = acc;
        row.churn = churn(pair[0].predictions, pair[1].predictions);
        row.l2 = normalized_l2(pair[0].weights, pair[1].weights);
        rows.push_back(row);
      }
    }
  }
  return rows;
}

inline std::string ordering_csv(const std::vector<OrderingRow>& rows) {
  std::string out = "batch_size,policy,accumulation,churn,l2\n";
  for (const auto& r : rows) {
    out += std::to_string(r.batch_size) + "," + r.policy + "," +
           std::string(accumulation_name(r.accumulation)) + "," + csv_real(r.churn) +
           "," + csv_real(r.l2) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch-norm ablation

struct BnAblation {
  StabilityReport with_bn;
  StabilityReport without_bn;
  std::string with_bn_hash, without_bn_hash;  // config hash of run 0 per arm
};

/// Runs the plan's spec with and without batch normalization under
/// ALGO+IMPL noise.
inline BnAblation bn_ablation(const ExperimentPlan& plan, const TrainTestData& data,
                              const GroupOptions& options = {}) {
  ExperimentPlan with = plan, without = plan;
  with.spec.batch_norm = true;
  without.spec.batch_norm = false;
  with.name = plan.name + "-bn";
  without.name = plan.name + "-nobn";
  auto a = run_group(with, NoiseVariant::kAlgoPlusImpl, data, options);
  auto b = run_group(without, NoiseVariant::kAlgoPlusImpl, data, options);
  return {a.report, b.report, a.artifacts.front().config.config_hash,
          b.artifacts.front().config.config_hash};
}

// ---------------------------------------------------------------------------
// Sub-group study

struct SubgroupStudy {
  std::map<std::string, StabilityReport> reports;  // by variant name
  std::vector<std::string> variant_order;
};

inline SubgroupStudy subgroup_study(const ExperimentPlan& plan, const TrainTestData& data,
                                    const GroupOptions& options = {}) {
  if (data.test.subgroups.empty()) {
    throw DataError("subgroup study needs a test set with subgroup attributes");
  }
  if (data.test.num_classes != 2) throw DataError("subgroup study needs a binary task");
  SubgroupStudy study;
  for (auto v : plan.variants) {
    const std::string name(variant_name(v));
    study.reports[name] = run_group(plan, v, data, options).report;
    study.variant_order.push_back(name);
  }
  return study;
}

enum class SubgroupMetric { kAccuracy, kFpr, kFnr };

/// Text table of group stddevs with overall-relative ratios, one row per
/// group plus the "all" row, one column per variant: "0.151 (3.31X)".
inline std::string subgroup_table(const SubgroupStudy& study, const std::string& attribute,
                                  SubgroupMetric metric) {
  const auto& first = study.reports.at(study.variant_order.front());
  const auto it = first.subgroup.find(attribute);
  if (it == first.subgroup.end()) {
    throw DataError("no subgroup attribute '" + attribute + "' in study");
  }
  auto cell = [&](const SubgroupRow& r) {
    const MaybeReal sd = metric == SubgroupMetric::kAccuracy ? r.acc_stddev
                         : metric == SubgroupMetric::kFpr    ? r.fpr_stddev
                                                             : r.fnr_stddev;
    const MaybeReal ratio = metric == SubgroupMetric::kAccuracy ? r.acc_ratio
                            : metric == SubgroupMetric::kFpr    ? r.fpr_ratio
                                                                : r.fnr_ratio;
    char buf[64];
    if (!sd) return std::string("undefined");
    if (!ratio) {
      std::snprintf(buf, sizeof buf, "%.3f (undefined)", *sd);
    } else {
      std::snprintf(buf, sizeof buf, "%.3f (%.2fX)", *sd, *ratio);
    }
    return std::string(buf);
  };
  std::string out = "group";
  for (const auto& v : study.variant_order) out += "\t" + v;
  out += "\n";
  for (std::size_t row = 0; row < it->second.size(); ++row) {
    out += it->second[row].group;
    for (const auto& v : study.variant_order)
      out += "\t" + cell(study.reports.at(v).subgroup.at(attribute)[row]);
    out += "\n";
  }
  return out;
}

}  // namespace detnoise
