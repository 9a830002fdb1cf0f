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

// detnoise command-line entry point.
//
// Exit codes: 0 success, 1 usage error, 2 data or validation error,
// 3 numerical divergence. Human-readable text goes to stderr; machine
// output (JSON, CSV) goes to stdout or files.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "detnoise.hpp"

namespace dn = detnoise;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDiverged = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::string> variant_names() {
  std::vector<std::string> names;
  for (auto v : dn::kAllVariants) names.emplace_back(dn::variant_name(v));
  return names;
}

std::vector<std::string> preset_names() { return {"default", "cancellation", "imbalanced"}; }

dn::ExperimentPlan preset(const std::string& name) {
  if (name == "cancellation") return dn::cancellation_plan();
  if (name == "imbalanced") return dn::imbalanced_plan();
  return dn::default_plan();
}

// Output root: --out, then the plan's output_dir, then $DETNOISE_OUT, then
// "out".
std::string output_root(const std::string& flag, const std::string& from_plan) {
  if (!flag.empty()) return flag;
  if (!from_plan.empty()) return from_plan;
  if (const char* env = std::getenv("DETNOISE_OUT"); env && *env) return env;
  return "out";
}

struct PlanFlags {
  std::string plan_file;
  std::string preset;
  std::string out;
  std::optional<std::size_t> runs;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> master_seed;
};

void add_plan_flags(CLI::App* cmd, PlanFlags& f) {
  auto* plan = cmd->add_option("--plan", f.plan_file, "Experiment plan JSON file")
                   ->check(CLI::ExistingFile);
  auto* pre = cmd->add_option("--preset", f.preset, "Built-in plan instead of a file")
                  ->check(CLI::IsMember(preset_names()));
  plan->excludes(pre);
  cmd->add_option("--out", f.out, "Output root (default: plan, $DETNOISE_OUT, ./out)");
  cmd->add_option("--runs", f.runs, "Override runs_per_variant");
  cmd->add_option("--epochs", f.epochs, "Override the number of epochs");
  cmd->add_option("--master-seed", f.master_seed, "Override the master seed");
}

dn::ExperimentPlan resolve_plan(const PlanFlags& f) {
  if (f.plan_file.empty() && f.preset.empty()) throw UsageError("one of --plan or --preset is required");
  auto plan = f.plan_file.empty() ? preset(f.preset) : dn::load_plan(f.plan_file);
  if (f.runs) plan.runs_per_variant = *f.runs;
  if (f.epochs) plan.train.epochs = *f.epochs;
  if (f.master_seed) plan.master_seed = *f.master_seed;
  plan.output_dir = output_root(f.out, plan.output_dir);
  plan.validate();
  return plan;
}

void emit_json(const nlohmann::json& j, const std::string& path) {
  std::cout << dn::dump_json(j);
  if (!path.empty()) dn::write_text(path, dn::dump_json(j));
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataFlags {
  std::string params_file;
  std::string out;
  std::uint64_t seed = 0;
  dn::SyntheticBlobsParams params;
  std::vector<std::string> subgroups;
  bool force = false;
};

// "attr:p0,p1:r0,r1"
dn::SubgroupSpec parse_subgroup(const std::string& text) {
  const auto c1 = text.find(':'), c2 = text.rfind(':');
  if (c1 == std::string::npos || c1 == c2) {
    throw UsageError("--subgroup expects attr:p0,p1,...:r0,r1,..., got '" + text + "'");
  }
  auto numbers = [&](const std::string& list) {
    std::vector<double> v;
    for (const auto& cell : dn::split_csv_line(list)) v.push_back(dn::parse_double(cell, "--subgroup"));
    return v;
  };
  dn::SubgroupSpec s;
  s.attribute = text.substr(0, c1);
  s.proportions = numbers(text.substr(c1 + 1, c2 - c1 - 1));
  s.positive_rates = numbers(text.substr(c2 + 1));
  return s;
}

int cmd_gen_data(const GenDataFlags& f) {
  auto params = f.params;
  if (!f.params_file.empty()) {
    try {
      params = dn::read_json(f.params_file).get<dn::SyntheticBlobsParams>();
    } catch (const nlohmann::json::exception& e) {
      throw dn::DataError("malformed params file: " + std::string(e.what()));
    }
  }
  for (const auto& s : f.subgroups) params.subgroups.push_back(parse_subgroup(s));
  const auto data = dn::generate_synthetic(params, f.seed);
  const fs::path out = f.out;
  for (const char* name : {"train.csv", "test.csv", "params.json"}) {
    if (fs::exists(out / name) && !f.force) {
      throw dn::DataError("refusing to overwrite " + (out / name).string() + " (use --force)");
    }
  }
  fs::create_directories(out);
  dn::write_text(out / "train.csv", dn::dataset_csv(data.train));
  dn::write_text(out / "test.csv", dn::dataset_csv(data.test));
  dn::write_text(out / "params.json",
                 dn::dump_json({{"params", params}, {"seed", f.seed}}));
  nlohmann::json files = nlohmann::json::object();
  for (const char* name : {"train.csv", "test.csv", "params.json"})
    files[name] = dn::sha256_file((out / name).string());
  std::cerr << "wrote " << data.train.size() << " train and " << data.test.size()
            << " test examples to " << out.string() << "\n";
  emit_json({{"dir", out.string()}, {"sha256", files}}, "");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const PlanFlags& pf, const std::string& variant_name, std::size_t run_index,
              bool force) {
  const auto plan = resolve_plan(pf);
  const auto variant = *dn::parse_variant(variant_name);
  const auto data = dn::load_datasets(plan);
  const auto dir = dn::run_dir(plan, variant, run_index);
  dn::prepare_output_dir(dir, force);
  dn::write_plan_files(plan, data.test);
  const auto cfg = dn::resolve(variant, run_index, plan.master_seed, plan.spec, plan.train);
  dn::RunArtifact art;
  try {
    art = dn::train(cfg, data.train, data.test);
  } catch (const dn::DivergedError& e) {
    throw dn::DivergedError(e.step(), "variant " + variant_name + " run " +
                                          std::to_string(run_index));
  }
  dn::write_run(dir, art);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < art.labels.size(); ++i) correct += art.predictions[i] == art.labels[i];
  const double acc = static_cast<double>(correct) / static_cast<double>(art.labels.size());
  std::cerr << "trained " << variant_name << " run " << run_index << " -> " << dir.string()
            << " (test accuracy " << acc << ")\n";
  emit_json({{"dir", dir.string()},
             {"config_hash", art.config.config_hash},
             {"weights_sha256", dn::sha256_file((dir / dn::kWeightsFile).string())},
             {"test_accuracy", acc}},
            "");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// compare

int cmd_compare(const std::vector<std::string>& runs, const std::string& json_out) {
  if (runs.size() != 2) throw UsageError("compare needs exactly two --run directories");
  const auto a = dn::read_run(runs[0]);
  const auto b = dn::read_run(runs[1]);
  if (a.labels != b.labels) throw dn::DataError("runs were evaluated on different test sets");
  const auto pa = dn::prediction_set(a), pb = dn::prediction_set(b);
  const double churn = dn::churn(pa, pb);
  const double l2 = dn::normalized_l2(a.weights, b.weights);
  const auto ca = dn::per_class_accuracy(pa), cb = dn::per_class_accuracy(pb);
  nlohmann::json deltas = nlohmann::json::array();
  for (std::size_t c = 0; c < ca.size(); ++c) {
    deltas.push_back(ca[c] && cb[c] ? nlohmann::json(*cb[c] - *ca[c]) : nlohmann::json());
  }
  const double acc_a = dn::accuracy(pa), acc_b = dn::accuracy(pb);
  char line[128];
  std::snprintf(line, sizeof line, "churn %.6f\nL2 %.6f\n", churn, l2);
  std::cerr << line;
  emit_json({{"run_a", runs[0]},
             {"run_b", runs[1]},
             {"churn", churn},
             {"l2", l2},
             {"accuracy_a", acc_a},
             {"accuracy_b", acc_b},
             {"per_class_accuracy_delta", deltas}},
            json_out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// experiment

struct ExperimentFlags {
  PlanFlags plan;
  std::size_t parallel = 1;
  bool force = false;
  std::string study = "variants";
  std::vector<std::size_t> batch_sizes;
};

int cmd_experiment(const ExperimentFlags& f) {
  const auto plan = resolve_plan(f.plan);
  const dn::GroupOptions opts{f.parallel, f.force, true};
  const auto root = dn::plan_root(plan);
  if (f.study == "variants") {
    const auto result = dn::run_experiment(plan, opts);
    for (const auto& [name, rep] : result.reports) {
      std::cerr << name << ": mean churn " << rep.pairwise_churn.mean << ", mean L2 "
                << rep.pairwise_l2.mean << ", accuracy stddev "
                << rep.accuracy.stddev.value_or(0.0) << "\n";
    }
    std::cerr << "report: " << (root / "report.json").string() << "\n";
    emit_json(dn::experiment_report_json(plan.name, result.reports), "");
    return kExitOk;
  }
  const auto data = dn::load_datasets(plan);
  if (f.study == "ordering") {
    auto sizes = f.batch_sizes;
    // Harness default: powers of four up to the full batch.
    if (sizes.empty()) {
      for (std::size_t b = 16; b < data.train.size(); b *= 4) sizes.push_back(b);
      sizes.push_back(data.train.size());
    }
    const auto rows = dn::ordering_sweep(plan, sizes, data);
    const auto csv = dn::ordering_csv(rows);
    fs::create_directories(root);
    dn::write_text(root / "ordering.csv", csv);
    std::cerr << "ordering sweep: " << (root / "ordering.csv").string() << "\n";
    std::cout << csv;
    return kExitOk;
  }
  if (f.study == "bn") {
    const auto ab = dn::bn_ablation(plan, data, opts);
    const std::map<std::string, dn::StabilityReport> reports{{"with_bn", ab.with_bn},
                                                             {"without_bn", ab.without_bn}};
    const auto dir = root / "bn_ablation";
    dn::write_experiment_report(dir, plan.name, reports);
    std::cerr << "accuracy stddev with BN " << ab.with_bn.accuracy.stddev.value_or(0.0)
              << ", without BN " << ab.without_bn.accuracy.stddev.value_or(0.0) << "\n";
    emit_json(dn::experiment_report_json(plan.name, reports), "");
    return kExitOk;
  }
  // subgroup
  const auto study = dn::subgroup_study(plan, data, opts);
  dn::write_experiment_report(root, plan.name, study.reports);
  for (const auto& [attr, g] : data.test.subgroups) {
    for (auto [metric, label] : {std::pair{dn::SubgroupMetric::kAccuracy, "accuracy"},
                                 std::pair{dn::SubgroupMetric::kFpr, "fpr"},
                                 std::pair{dn::SubgroupMetric::kFnr, "fnr"}}) {
      const auto table = dn::subgroup_table(study, attr, metric);
      dn::write_text(root / ("subgroup_" + attr + "_" + label + ".tsv"), table);
      std::cerr << attr << " " << label << " stddev (ratio to overall)\n" << table;
    }
  }
  emit_json(dn::experiment_report_json(plan.name, study.reports), "");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// report

int cmd_report(const std::string& dir) {
  const fs::path root = dir;
  const auto reports = dn::regenerate_reports(root);
  std::string name = root.filename().string();
  if (fs::exists(root / "plan.json")) {
    name = dn::read_json(root / "plan.json").value("name", name);
  }
  dn::write_experiment_report(root, name, reports);
  std::cerr << "regenerated " << (root / "report.json").string() << "\n";
  emit_json(dn::experiment_report_json(name, reports), "");
  return kExitOk;
}

// ---------------------------------------------------------------------------
// profile

struct ProfileFlags {
  std::size_t reps = 7;
  std::size_t warmup = 3;
  std::string shape = "16x16x8x8";
  std::vector<std::size_t> sizes{1, 3, 5, 7};
  std::uint64_t seed = 0;
  std::string csv_out, json_out;
};

dn::ConvShape parse_shape(const std::string& text) {
  std::vector<std::size_t> dims;
  std::size_t start = 0;
  for (;;) {
    const auto x = text.find('x', start);
    const auto cell = text.substr(start, x == std::string::npos ? std::string::npos : x - start);
    const int v = dn::parse_int(cell, "--shape");
    if (v <= 0) throw UsageError("--shape dimensions must be positive");
    dims.push_back(static_cast<std::size_t>(v));
    if (x == std::string::npos) break;
    start = x + 1;
  }
  if (dims.size() != 4) throw UsageError("--shape expects HxWxCxF, got '" + text + "'");
  return {dims[0], dims[1], dims[2], dims[3]};
}

int cmd_profile(const ProfileFlags& f) {
  dn::ConvShape shape;
  try {
    shape = parse_shape(f.shape);
  } catch (const dn::DataError& e) {
    throw UsageError(e.what());
  }
  const auto rep = dn::overhead_sweep(f.sizes, shape, {f.reps, f.warmup}, f.seed);
  const auto csv = dn::overhead_csv(rep);
  std::cerr << dn::kOverheadContext << "\n";
  std::cout << csv;
  if (!f.csv_out.empty()) dn::write_text(f.csv_out, csv);
  if (!f.json_out.empty()) dn::write_text(f.json_out, dn::dump_json(dn::overhead_json(rep)));
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Measures run-to-run variance of neural network training"};
  app.require_subcommand(1);

  GenDataFlags gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic blob dataset");
  gen_cmd->add_option("--params", gen.params_file, "SyntheticBlobsParams JSON file")
      ->check(CLI::ExistingFile);
  gen_cmd->add_option("--seed", gen.seed, "Dataset seed");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--n-train", gen.params.n_train, "Training examples");
  gen_cmd->add_option("--n-test", gen.params.n_test, "Test examples");
  gen_cmd->add_option("--classes", gen.params.classes, "Number of classes");
  gen_cmd->add_option("--dim", gen.params.dim, "Feature dimension");
  gen_cmd->add_option("--separation", gen.params.separation, "Cluster separation in stddevs");
  gen_cmd->add_option("--cluster-std", gen.params.cluster_std, "Cluster stddev");
  gen_cmd->add_option("--offset", gen.params.offset, "Common offset added to every feature");
  gen_cmd->add_option("--subgroup", gen.subgroups,
                      "Subgroup attribute as attr:p0,p1,...:r0,r1,... (repeatable)");
  gen_cmd->add_flag("--force", gen.force, "Overwrite existing files");

  PlanFlags train_plan;
  std::string train_variant;
  std::size_t run_index = 0;
  bool train_force = false;
  auto* train_cmd = app.add_subcommand("train", "Train one run of one variant");
  add_plan_flags(train_cmd, train_plan);
  train_cmd->add_option("--variant", train_variant, "Noise variant")
      ->required()
      ->check(CLI::IsMember(variant_names()));
  train_cmd->add_option("--run-index", run_index, "Run index k");
  train_cmd->add_flag("--force", train_force, "Replace an existing run directory");

  std::vector<std::string> compare_runs;
  std::string compare_json;
  auto* compare_cmd = app.add_subcommand("compare", "Churn and L2 between two runs");
  compare_cmd->add_option("--run", compare_runs, "Run directory (give twice)")->required();
  compare_cmd->add_option("--json", compare_json, "Also write the JSON to this file");

  ExperimentFlags exp;
  auto* exp_cmd = app.add_subcommand("experiment", "Run every variant group of a plan");
  add_plan_flags(exp_cmd, exp.plan);
  exp_cmd->add_option("--parallel", exp.parallel, "Concurrent runs per group")
      ->check(CLI::PositiveNumber);
  exp_cmd->add_flag("--force", exp.force, "Replace existing run directories");
  exp_cmd->add_option("--study", exp.study, "variants, ordering, bn or subgroup")
      ->check(CLI::IsMember({"variants", "ordering", "bn", "subgroup"}));
  exp_cmd->add_option("--batch-sizes", exp.batch_sizes, "Ordering sweep batch sizes")
      ->delimiter(',');

  std::string report_dir;
  auto* report_cmd = app.add_subcommand("report", "Rebuild reports from persisted runs");
  report_cmd->add_option("--dir", report_dir, "Experiment directory <out>/<plan>")->required();

  ProfileFlags prof;
  auto* prof_cmd = app.add_subcommand("profile", "Time conv2d under fixed and permuted order");
  prof_cmd->add_option("--reps", prof.reps, "Timed repetitions (>= 5)");
  prof_cmd->add_option("--warmup", prof.warmup, "Untimed warmup repetitions");
  prof_cmd->add_option("--shape", prof.shape, "Input HxWxCxF");
  prof_cmd->add_option("--sizes", prof.sizes, "Kernel sizes")->delimiter(',');
  prof_cmd->add_option("--seed", prof.seed, "Input seed");
  prof_cmd->add_option("--csv", prof.csv_out, "Also write the CSV to this file");
  prof_cmd->add_option("--json", prof.json_out, "Write the JSON report to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(train_plan, train_variant, run_index, train_force);
    if (*compare_cmd) return cmd_compare(compare_runs, compare_json);
    if (*exp_cmd) return cmd_experiment(exp);
    if (*report_cmd) return cmd_report(report_dir);
    if (*prof_cmd) return cmd_profile(prof);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const dn::DivergedError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
