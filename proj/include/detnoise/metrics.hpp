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

// Model-stability measures over a group of runs: pairwise churn and
// normalized L2 distance, accuracy and its run-to-run standard deviation,
// per-class accuracy, and sub-group accuracy / FPR / FNR with ratios against
// the overall metric.
//
// All arithmetic is binary64 with compensated sums. A metric whose
// denominator is empty is std::nullopt ("undefined") and is carried through
// every table rather than dropped.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "detnoise/errors.hpp"
#include "detnoise/model.hpp"
#include "detnoise/training.hpp"
#include "json.hpp"

namespace detnoise {

using MaybeReal = std::optional<double>;

/// Neumaier-compensated binary64 accumulator.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::fabs(sum_) >= std::fabs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

inline double compensated_sum(std::span<const double> values) {
  CompensatedSum s;
  for (double v : values) s.add(v);
  return s.value();
}

struct PredictionSet {
  std::vector<int> preds;
  std::vector<int> labels;
  std::size_t num_classes = 2;
  std::optional<Tensor> logits;
  std::map<std::string, std::vector<int>> subgroups;

  void validate() const {
    if (preds.size() != labels.size()) {
      throw DataError("prediction and label arrays differ in length");
    }
    for (const auto* arr : {&preds, &labels}) {
      for (int v : *arr) {
        if (v < 0 || static_cast<std::size_t>(v) >= num_classes) {
          throw DataError("class index " + std::to_string(v) + " outside [0, " +
                          std::to_string(num_classes) + ")");
        }
      }
    }
  }
};

inline PredictionSet prediction_set(const RunArtifact& a) {
  PredictionSet p;
  p.preds = a.predictions;
  p.labels = a.labels;
  p.num_classes = a.config.spec.output_classes;
  if (a.logits.rank() == 2) p.logits = a.logits;
  p.subgroups = a.subgroups;
  return p;
}

/// Fraction of positions where the two prediction vectors disagree.
inline double churn(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) {
    throw DataError("churn: prediction sets cover different test sets (" +
                    std::to_string(a.size()) + " vs " +
                    std::to_string(b.size()) + " examples)");
  }
  if (a.empty()) return 0.0;
  std::size_t differ = 0;
  for (std::size_t i = 0; i < a.size(); ++i) differ += a[i] != b[i];
  return static_cast<double>(differ) / static_cast<double>(a.size());
}

inline double churn(const PredictionSet& a, const PredictionSet& b) {
  return churn(a.preds, b.preds);
}

/// || w1/||w1|| - w2/||w2|| ||_2, in [0, 2].
inline double normalized_l2(std::span<const float> w1,
                            std::span<const float> w2) {
  if (w1.size() != w2.size()) throw DataError("normalized_l2: length mismatch");
  CompensatedSum n1, n2;
  for (float v : w1) n1.add(static_cast<double>(v) * v);
  for (float v : w2) n2.add(static_cast<double>(v) * v);
  const double norm1 = std::sqrt(n1.value());
  const double norm2 = std::sqrt(n2.value());
  if (!(norm1 > 0.0) || !(norm2 > 0.0)) {
    throw DataError("normalized_l2: zero-norm weight vector");
  }
  CompensatedSum d;
  for (std::size_t i = 0; i < w1.size(); ++i) {
    const double diff = w1[i] / norm1 - w2[i] / norm2;
    d.add(diff * diff);
  }
  return std::clamp(std::sqrt(std::max(0.0, d.value())), 0.0, 2.0);
}

inline double normalized_l2(const Weights& w1, const Weights& w2) {
  if (w1.layout() != w2.layout()) {
    throw DataError("normalized_l2: weight layouts differ");
  }
  return normalized_l2(w1.flat(), w2.flat());
}

inline double accuracy(const PredictionSet& p) {
  p.validate();
  if (p.labels.empty()) throw DataError("accuracy of an empty prediction set");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < p.labels.size(); ++i)
    correct += p.preds[i] == p.labels[i];
  return static_cast<double>(correct) / static_cast<double>(p.labels.size());
}

/// Accuracy restricted to each true class; nullopt for classes absent from
/// the labels.
inline std::vector<MaybeReal> per_class_accuracy(const PredictionSet& p) {
  p.validate();
  if (p.labels.empty()) throw DataError("per-class accuracy of an empty set");
  std::vector<std::size_t> total(p.num_classes, 0), correct(p.num_classes, 0);
  for (std::size_t i = 0; i < p.labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(p.labels[i]);
    ++total[y];
    correct[y] += p.preds[i] == p.labels[i];
  }
  std::vector<MaybeReal> out(p.num_classes);
  for (std::size_t k = 0; k < p.num_classes; ++k) {
    if (total[k]) {
      out[k] = static_cast<double>(correct[k]) / static_cast<double>(total[k]);
    }
  }
  return out;
}

struct RateMetrics {
  std::size_t count = 0;
  std::size_t positives = 0;
  MaybeReal accuracy;
  MaybeReal fpr;  // FP / (FP + TN)
  MaybeReal fnr;  // FN / (FN + TP)
};

struct GroupMetrics {
  int group = 0;
  RateMetrics metrics;
};

namespace detail {

template <typename Include>
RateMetrics rates_where(const PredictionSet& p, Include include) {
  if (p.num_classes != 2) {
    throw DataError("FPR/FNR require a binary task (K = 2), got K = " +
                    std::to_string(p.num_classes));
  }
  p.validate();
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < p.labels.size(); ++i) {
    if (!include(i)) continue;
    const bool y = p.labels[i] == 1, yhat = p.preds[i] == 1;
    if (y && yhat) ++tp;
    else if (y) ++fn;
    else if (yhat) ++fp;
    else ++tn;
  }
  RateMetrics r;
  r.count = tp + tn + fp + fn;
  r.positives = tp + fn;
  if (r.count) r.accuracy = static_cast<double>(tp + tn) / static_cast<double>(r.count);
  if (fp + tn) r.fpr = static_cast<double>(fp) / static_cast<double>(fp + tn);
  if (fn + tp) r.fnr = static_cast<double>(fn) / static_cast<double>(fn + tp);
  return r;
}

}  // namespace detail

/// Binary-task accuracy, FPR and FNR over the whole set.
inline RateMetrics binary_rates(const PredictionSet& p) {
  return detail::rates_where(p, [](std::size_t) { return true; });
}

/// Per-group accuracy, FPR and FNR for one attribute, groups ascending.
inline std::vector<GroupMetrics> subgroup_metrics(const PredictionSet& p,
                                                  const std::string& attribute) {
  const auto it = p.subgroups.find(attribute);
  if (it == p.subgroups.end()) {
    throw DataError("prediction set has no subgroup attribute '" + attribute + "'");
  }
  const auto& groups = it->second;
  if (groups.size() != p.labels.size()) {
    throw DataError("subgroup attribute '" + attribute + "' has wrong length");
  }
  const std::set<int> ids(groups.begin(), groups.end());
  std::vector<GroupMetrics> out;
  for (int g : ids) {
    out.push_back(
        {g, detail::rates_where(p, [&](std::size_t i) { return groups[i] == g; })});
  }
  return out;
}

/// Sample standard deviation (n - 1 denominator), two-pass.
inline double stddev(std::span<const double> values) {
  if (values.size() < 2) {
    throw DataError("stddev needs at least 2 values, got " +
                    std::to_string(values.size()));
  }
  const double n = static_cast<double>(values.size());
  const double mean = compensated_sum(values) / n;
  CompensatedSum ss;
  for (double v : values) ss.add((v - mean) * (v - mean));
  return std::sqrt(ss.value() / (n - 1.0));
}

inline MaybeReal maybe_stddev(std::span<const double> values) {
  if (values.size() < 2) return std::nullopt;
  return stddev(values);
}

/// group / overall, undefined when overall is not positive.
inline MaybeReal relative_ratio(double group_stddev, double overall_stddev) {
  if (!(overall_stddev > 0.0)) return std::nullopt;
  return group_stddev / overall_stddev;
}

inline MaybeReal relative_ratio(const MaybeReal& group, const MaybeReal& overall) {
  if (!group || !overall) return std::nullopt;
  return relative_ratio(*group, *overall);
}

// ---------------------------------------------------------------------------
// Reports

struct Distribution {
  std::vector<double> values;
  double mean = 0.0;
  MaybeReal stddev;
};

inline Distribution distribution(std::vector<double> values) {
  Distribution d;
  d.values = std::move(values);
  if (!d.values.empty()) {
    d.mean = compensated_sum(d.values) / static_cast<double>(d.values.size());
  }
  d.stddev = maybe_stddev(d.values);
  return d;
}

struct SubgroupRow {
  std::string group;  // "all" for the overall row
  std::size_t count = 0;
  std::size_t positives = 0;
  MaybeReal acc_stddev, acc_ratio;
  MaybeReal fpr_stddev, fpr_ratio;
  MaybeReal fnr_stddev, fnr_ratio;
};

struct StabilityReport {
  std::size_t n_runs = 0;
  std::string variant;
  std::vector<std::uint64_t> run_indices;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> pairs;
  Distribution pairwise_churn;
  Distribution pairwise_l2;
  Distribution accuracy;
  std::vector<MaybeReal> per_class_stddev;
  std::map<std::string, std::vector<SubgroupRow>> subgroup;
};

namespace detail {

// stddev over runs of a metric that may be undefined in some run
inline MaybeReal stddev_of(const std::vector<MaybeReal>& per_run) {
  std::vector<double> v;
  for (const auto& x : per_run) {
    if (!x) return std::nullopt;
    v.push_back(*x);
  }
  return maybe_stddev(v);
}

}  // namespace detail

/// Stability report over a group of runs of one test set. Input order does
/// not matter: runs are ordered by (run_index, config_hash) first.
inline StabilityReport build_report(std::vector<const RunArtifact*> runs) {
  if (runs.size() < 2) {
    throw DataError("a stability report needs at least 2 runs, got " +
                    std::to_string(runs.size()));
  }
  std::stable_sort(runs.begin(), runs.end(), [](const auto* a, const auto* b) {
    return std::tie(a->config.run_index, a->config.config_hash) <
           std::tie(b->config.run_index, b->config.config_hash);
  });
  const auto& ref = *runs.front();
  for (const auto* r : runs) {
    if (r->labels != ref.labels) throw DataError("runs were evaluated on different test sets");
    if (r->weights.layout() != ref.weights.layout()) {
      throw DataError("runs have different weight layouts");
    }
    if (r->config.spec.output_classes != ref.config.spec.output_classes) {
      throw DataError("runs have different class counts");
    }
  }

  StabilityReport rep;
  rep.n_runs = runs.size();
  rep.variant = std::string(variant_name(ref.config.variant));
  for (const auto* r : runs) {
    if (r->config.variant != ref.config.variant) rep.variant = "mixed";
    rep.run_indices.push_back(r->config.run_index);
  }

  std::vector<PredictionSet> sets;
  for (const auto* r : runs) sets.push_back(prediction_set(*r));

  std::vector<double> churns, l2s;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    for (std::size_t j = i + 1; j < runs.size(); ++j) {
      rep.pairs.emplace_back(runs[i]->config.run_index, runs[j]->config.run_index);
      churns.push_back(churn(sets[i], sets[j]));
      l2s.push_back(normalized_l2(runs[i]->weights, runs[j]->weights));
    }
  }
  rep.pairwise_churn = distribution(std::move(churns));
  rep.pairwise_l2 = distribution(std::move(l2s));

  std::vector<double> accs;
  const std::size_t k = ref.config.spec.output_classes;
  std::vector<std::vector<MaybeReal>> per_class(k);
  for (const auto& s : sets) {
    accs.push_back(accuracy(s));
    const auto pc = per_class_accuracy(s);
    for (std::size_t c = 0; c < k; ++c) per_class[c].push_back(pc[c]);
  }
  rep.accuracy = distribution(std::move(accs));
  for (std::size_t c = 0; c < k; ++c)
    rep.per_class_stddev.push_back(detail::stddev_of(per_class[c]));

  if (k == 2) {
    std::vector<MaybeReal> all_fpr, all_fnr;
    for (const auto& s : sets) {
      const auto r = binary_rates(s);
      all_fpr.push_back(r.fpr);
      all_fnr.push_back(r.fnr);
    }
    const MaybeReal acc_sd = rep.accuracy.stddev;
    const MaybeReal fpr_sd = detail::stddev_of(all_fpr);
    const MaybeReal fnr_sd = detail::stddev_of(all_fnr);
    for (const auto& [attr, groups] : ref.subgroups) {
      auto& rows = rep.subgroup[attr];
      SubgroupRow overall;
      overall.group = "all";
      const auto whole = binary_rates(sets.front());
      overall.count = whole.count;
      overall.positives = whole.positives;
      overall.acc_stddev = acc_sd;
      overall.acc_ratio = relative_ratio(acc_sd, acc_sd);
      overall.fpr_stddev = fpr_sd;
      overall.fpr_ratio = relative_ratio(fpr_sd, fpr_sd);
      overall.fnr_stddev = fnr_sd;
      overall.fnr_ratio = relative_ratio(fnr_sd, fnr_sd);
      rows.push_back(overall);

      std::map<int, std::vector<RateMetrics>> by_group;
      for (const auto& s : sets) {
        for (const auto& gm : subgroup_metrics(s, attr))
          by_group[gm.group].push_back(gm.metrics);
      }
      for (const auto& [g, per_run] : by_group) {
        SubgroupRow row;
        row.group = std::to_string(g);
        row.count = per_run.front().count;
        row.positives = per_run.front().positives;
        std::vector<MaybeReal> a, f, n;
        for (const auto& m : per_run) {
          a.push_back(m.accuracy);
          f.push_back(m.fpr);
          n.push_back(m.fnr);
        }
        row.acc_stddev = detail::stddev_of(a);
        row.acc_ratio = relative_ratio(row.acc_stddev, acc_sd);
        row.fpr_stddev = detail::stddev_of(f);
        row.fpr_ratio = relative_ratio(row.fpr_stddev, fpr_sd);
        row.fnr_stddev = detail::stddev_of(n);
        row.fnr_ratio = relative_ratio(row.fnr_stddev, fnr_sd);
        rows.push_back(row);
      }
    }
  }
  return rep;
}

inline StabilityReport build_report(const std::vector<RunArtifact>& runs) {
  std::vector<const RunArtifact*> ptrs;
  for (const auto& r : runs) ptrs.push_back(&r);
  return build_report(std::move(ptrs));
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json maybe_json(const MaybeReal& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json distribution_json(const Distribution& d) {
  return {{"values", d.values}, {"mean", d.mean}, {"stddev", maybe_json(d.stddev)}};
}

inline nlohmann::json report_json(const StabilityReport& r) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& [a, b] : r.pairs) pairs.push_back({a, b});
  nlohmann::json per_class = nlohmann::json::array();
  for (const auto& v : r.per_class_stddev) per_class.push_back(maybe_json(v));
  nlohmann::json subgroup = nlohmann::json::object();
  for (const auto& [attr, rows] : r.subgroup) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& row : rows) {
      arr.push_back({{"group", row.group},
                     {"count", row.count},
                     {"positives", row.positives},
                     {"acc_stddev", maybe_json(row.acc_stddev)},
                     {"acc_ratio", maybe_json(row.acc_ratio)},
                     {"fpr_stddev", maybe_json(row.fpr_stddev)},
                     {"fpr_ratio", maybe_json(row.fpr_ratio)},
                     {"fnr_stddev", maybe_json(row.fnr_stddev)},
                     {"fnr_ratio", maybe_json(row.fnr_ratio)}});
    }
    subgroup[attr] = arr;
  }
  return {{"n_runs", r.n_runs},
          {"variant", r.variant},
          {"run_indices", r.run_indices},
          {"pairs", pairs},
          {"pairwise_churn", distribution_json(r.pairwise_churn)},
          {"pairwise_l2", distribution_json(r.pairwise_l2)},
          {"accuracy", distribution_json(r.accuracy)},
          {"per_class_accuracy_stddev", per_class},
          {"subgroup", subgroup}};
}

inline std::string csv_real(const MaybeReal& v) {
  if (!v) return "undefined";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9e", *v);
  return buf;
}

inline std::string pairwise_csv(const StabilityReport& r) {
  std::string out = "run_a,run_b,churn,l2\n";
  for (std::size_t i = 0; i < r.pairs.size(); ++i) {
    out += std::to_string(r.pairs[i].first) + "," +
           std::to_string(r.pairs[i].second) + "," +
           csv_real(r.pairwise_churn.values[i]) + "," +
           csv_real(r.pairwise_l2.values[i]) + "\n";
  }
  return out;
}

inline std::string summary_csv(const StabilityReport& r) {
  std::string out = "metric,mean,stddev\n";
  auto row = [&](const std::string& name, const MaybeReal& mean,
                 const MaybeReal& sd) {
    out += name + "," + csv_real(mean) + "," + csv_real(sd) + "\n";
  };
  row("accuracy", r.accuracy.mean, r.accuracy.stddev);
  row("churn", r.pairwise_churn.mean, r.pairwise_churn.stddev);
  row("l2", r.pairwise_l2.mean, r.pairwise_l2.stddev);
  for (std::size_t c = 0; c < r.per_class_stddev.size(); ++c) {
    row("class_" + std::to_string(c) + "_accuracy", std::nullopt,
        r.per_class_stddev[c]);
  }
  return out;
}

inline std::string subgroup_csv(const std::vector<SubgroupRow>& rows) {
  std::string out =
      "group,count,positives,acc_stddev,acc_ratio,fpr_stddev,fpr_ratio,"
      "fnr_stddev,fnr_ratio\n";
  for (const auto& row : rows) {
    out += row.group + "," + std::to_string(row.count) + "," +
           std::to_string(row.positives) + "," + csv_real(row.acc_stddev) +
           "," + csv_real(row.acc_ratio) + "," + csv_real(row.fpr_stddev) +
           "," + csv_real(row.fpr_ratio) + "," + csv_real(row.fnr_stddev) +
           "," + csv_real(row.fnr_ratio) + "\n";
  }
  return out;
}

}  // namespace detnoise
