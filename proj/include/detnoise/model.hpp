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

// A small fully specified classifier: optional conv front-end, dense hidden
// layers with optional batch normalization and dropout, and a softmax
// cross-entropy head trained by SGD with momentum.
//
// All reductions, including gradient sums over the batch dimension, go
// through numerics.hpp under the caller's AccumulationPolicy. All randomness
// comes from explicit RngState arguments.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "detnoise/errors.hpp"
#include "detnoise/numerics.hpp"
#include "detnoise/rng.hpp"
#include "detnoise/tensor.hpp"
#include "json.hpp"

namespace detnoise {

enum class Mode { kTrain, kEval };

enum class Split { kTrain, kTest };

/// Labelled examples. `features` is N x D; image inputs are stored flattened
/// row-major as H x W x C per example.
struct Dataset {
  Tensor features;
  std::vector<int> labels;
  std::size_t num_classes = 2;
  // attribute name -> group index per example
  std::map<std::string, std::vector<int>> subgroups;
  Split split = Split::kTrain;

  std::size_t size() const { return labels.size(); }
  std::size_t feature_size() const {
    return features.rank() == 2 ? features.dim(1) : 0;
  }

  void validate() const {
    if (features.rank() != 2) throw DataError("dataset features must be N x D");
    if (features.dim(0) != labels.size()) {
      throw DataError("dataset has " + std::to_string(features.dim(0)) +
                      " feature rows but " + std::to_string(labels.size()) +
                      " labels");
    }
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
        throw DataError("label " + std::to_string(y) + " outside [0, " +
                        std::to_string(num_classes) + ")");
      }
    }
    for (const auto& [name, groups] : subgroups) {
      if (groups.size() != labels.size()) {
        throw DataError("subgroup attribute '" + name +
                        "' does not cover every example");
      }
      for (int g : groups) {
        if (g < 0) throw DataError("negative group index in '" + name + "'");
      }
    }
  }
};

struct ConvFront {
  std::size_t kernel_size = 3;
  std::size_t filters = 4;
  friend bool operator==(const ConvFront&, const ConvFront&) = default;
};

struct ModelSpec {
  Shape input_shape;  // {D}, or {H, W, C} when conv_front is set
  std::optional<ConvFront> conv_front;
  std::vector<std::size_t> hidden_layers;
  bool batch_norm = false;
  double dropout_rate = 0.0;
  std::size_t output_classes = 2;

  std::size_t input_size() const { return shape_size(input_shape); }

  void validate() const {
    if (input_shape.empty()) throw DataError("model input_shape is empty");
    for (auto e : input_shape) {
      if (e == 0) throw DataError("model input extents must be positive");
    }
    if (conv_front) {
      if (input_shape.size() != 3) {
        throw DataError("conv front requires input_shape [H, W, C]");
      }
      const auto k = conv_front->kernel_size;
      if (k != 1 && k != 3 && k != 5 && k != 7) {
        throw DataError("conv kernel size must be one of 1, 3, 5, 7");
      }
      if (conv_front->filters == 0) throw DataError("conv filters must be > 0");
    }
    for (auto width : hidden_layers) {
      if (width == 0) throw DataError("hidden layer widths must be positive");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw DataError("dropout_rate must lie in [0, 1)");
    }
    if (output_classes < 2) throw DataError("output_classes must be >= 2");
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double base_lr = 0.05;
  double lr_decay_factor = 0.1;
  std::size_t lr_decay_every_epochs = 0;  // 0 disables decay
  double momentum = 0.9;
  bool shuffle = true;
  double augment_sigma = 0.0;  // Gaussian feature jitter, 0 disables
  // Sort each mini-batch by example index before computing it, so gradient
  // sums over the batch do not depend on presentation order.
  bool canonical_batch_order = false;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.9;

  double learning_rate(std::size_t epoch) const {
    if (lr_decay_every_epochs == 0) return base_lr;
    return base_lr *
           std::pow(lr_decay_factor,
                    static_cast<double>(epoch / lr_decay_every_epochs));
  }

  void validate(std::size_t n) const {
    if (batch_size < 1 || batch_size > n) {
      throw DataError("batch_size must lie in [1, " + std::to_string(n) + "]");
    }
    if (!(base_lr >= 0.0) || !std::isfinite(base_lr)) {
      throw DataError("base_lr must be finite and non-negative");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw DataError("momentum must lie in [0, 1)");
    }
    if (!(augment_sigma >= 0.0)) throw DataError("augment_sigma must be >= 0");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct LayerInfo {
  std::string name;
  Shape shape;
  std::size_t offset = 0;  // in elements
  bool trainable = true;

  std::size_t size() const { return shape_size(shape); }
  friend bool operator==(const LayerInfo&, const LayerInfo&) = default;
};

/// Flat parameter vector plus its layer table. Batch-norm running statistics
/// live here too (as non-trainable layers) so a persisted model is complete.
class Weights {
 public:
  Weights() = default;

  Weights(std::vector<LayerInfo> layout, std::vector<float> flat)
      : layout_(std::move(layout)), flat_(std::move(flat)) {
    std::size_t expected = 0;
    for (const auto& l : layout_) {
      if (l.offset != expected) {
        throw DataError("weights layout is not contiguous at layer " + l.name);
      }
      expected += l.size();
    }
    if (expected != flat_.size()) {
      throw DataError("weights layout covers " + std::to_string(expected) +
                      " values but flat has " + std::to_string(flat_.size()));
    }
  }

  const std::vector<LayerInfo>& layout() const { return layout_; }
  std::span<const float> flat() const { return flat_; }
  std::span<float> flat() { return flat_; }
  std::size_t size() const { return flat_.size(); }

  const LayerInfo& layer(const std::string& name) const {
    for (const auto& l : layout_) {
      if (l.name == name) return l;
    }
    throw DataError("no layer named " + name);
  }

  std::span<const float> view(const std::string& name) const {
    const auto& l = layer(name);
    return std::span<const float>(flat_).subspan(l.offset, l.size());
  }
  std::span<float> view(const std::string& name) {
    const auto& l = layer(name);
    return std::span<float>(flat_).subspan(l.offset, l.size());
  }

  friend bool operator==(const Weights&, const Weights&) = default;

 private:
  std::vector<LayerInfo> layout_;
  std::vector<float> flat_;
};

namespace detail {

// One linear block: (conv-as-matmul | dense) + bias -> [BN] -> [ReLU] ->
// [dropout]. Offsets index the flat weight vector.
struct Block {
  std::string name;
  bool conv = false;
  std::size_t kernel = 1;      // conv only
  std::size_t h = 0, w = 0, c = 0;  // conv input geometry
  std::size_t in = 0, out = 0;
  bool batch_norm = false;
  bool relu = true;
  bool dropout = false;
  std::size_t weight_off = 0, bias_off = 0;
  std::size_t gamma_off = 0, beta_off = 0, mean_off = 0, var_off = 0;
};

struct Architecture {
  std::vector<Block> blocks;
  std::vector<LayerInfo> layout;
  std::size_t total = 0;
};

inline Architecture build_architecture(const ModelSpec& spec) {
  spec.validate();
  Architecture arch;
  auto add = [&](const std::string& name, Shape shape, bool trainable) {
    const std::size_t off = arch.total;
    arch.layout.push_back(LayerInfo{name, std::move(shape), off, trainable});
    arch.total += arch.layout.back().size();
    return off;
  };
  auto add_bn = [&](Block& b) {
    b.gamma_off = add(b.name + ".bn.gamma", {b.out}, true);
    b.beta_off = add(b.name + ".bn.beta", {b.out}, true);
    b.mean_off = add(b.name + ".bn.running_mean", {b.out}, false);
    b.var_off = add(b.name + ".bn.running_var", {b.out}, false);
  };

  std::size_t features = spec.input_size();
  if (spec.conv_front) {
    Block b;
    b.name = "conv";
    b.conv = true;
    b.kernel = spec.conv_front->kernel_size;
    b.h = spec.input_shape[0];
    b.w = spec.input_shape[1];
    b.c = spec.input_shape[2];
    b.in = b.kernel * b.kernel * b.c;
    b.out = spec.conv_front->filters;
    b.batch_norm = spec.batch_norm;
    b.weight_off = add("conv.kernel", {b.kernel, b.kernel, b.c, b.out}, true);
    b.bias_off = add("conv.bias", {b.out}, true);
    if (b.batch_norm) add_bn(b);
    arch.blocks.push_back(b);
    features = b.h * b.w * b.out;
  }
  for (std::size_t i = 0; i < spec.hidden_layers.size(); ++i) {
    Block b;
    b.name = "dense" + std::to_string(i);
    b.in = features;
    b.out = spec.hidden_layers[i];
    b.batch_norm = spec.batch_norm;
    b.dropout = spec.dropout_rate > 0.0;
    b.weight_off = add(b.name + ".weight", {b.in, b.out}, true);
    b.bias_off = add(b.name + ".bias", {b.out}, true);
    if (b.batch_norm) add_bn(b);
    arch.blocks.push_back(b);
    features = b.out;
  }
  Block head;
  head.name = "logits";
  head.in = features;
  head.out = spec.output_classes;
  head.relu = false;
  head.weight_off = add("logits.weight", {head.in, head.out}, true);
  head.bias_off = add("logits.bias", {head.out}, true);
  arch.blocks.push_back(head);
  return arch;
}

inline std::size_t fan_in(const LayerInfo& l) {
  return l.shape.size() == 4 ? l.shape[0] * l.shape[1] * l.shape[2]
                             : l.shape[0];
}

inline std::size_t fan_out(const LayerInfo& l) {
  return l.shape.size() == 4 ? l.shape[0] * l.shape[1] * l.shape[3]
                             : l.shape[1];
}

// Per-call policies for one pass. Each kernel invocation gets the next key.
class PolicyCursor {
 public:
  explicit PolicyCursor(AccumulationPolicy base) : base_(std::move(base)) {}
  AccumulationPolicy next() { return salted(base_, counter_++); }

 private:
  AccumulationPolicy base_;
  std::uint64_t counter_ = 0;
};

struct BlockTrace {
  Tensor input;              // rows x in (patches for the conv block)
  Tensor z;                  // pre-normalization
  Tensor xhat;               // normalized (BN only)
  std::vector<float> inv_std;
  std::vector<float> batch_mean, batch_var;
  Tensor y;                  // pre-activation
  std::vector<float> keep;   // dropout multipliers, empty when unused
  std::size_t rows = 0;
};

struct Trace {
  std::vector<BlockTrace> blocks;
  Tensor logits;
};

inline Tensor weight_matrix(std::span<const float> flat, const Block& b) {
  return Tensor({b.in, b.out}, std::vector<float>(
                                    flat.begin() + static_cast<std::ptrdiff_t>(b.weight_off),
                                    flat.begin() + static_cast<std::ptrdiff_t>(b.weight_off + b.in * b.out)));
}

/// Inverted-dropout multipliers for one dense block. Each example draws its
/// mask from a child stream keyed by its dataset index, so masks do not
/// depend on where the example sits in the batch.
inline std::vector<float> dropout_keep(RngState seed, std::size_t block_index,
                                       std::span<const std::size_t> example_ids,
                                       std::size_t units, double rate) {
  std::vector<float> keep(example_ids.size() * units);
  const RngState block_seed = split(seed, block_index);
  const float scale = static_cast<float>(1.0 / (1.0 - rate));
  for (std::size_t r = 0; r < example_ids.size(); ++r) {
    RngState s = split(block_seed, example_ids[r]);
    for (std::size_t u = 0; u < units; ++u) {
      keep[r * units + u] = s.next_unit() >= rate ? scale : 0.0f;
    }
  }
  return keep;
}

inline Trace run_forward(std::span<const float> flat, const Architecture& arch,
                         const ModelSpec& spec, const TrainConfig* cfg,
                         const Tensor& batch, PolicyCursor& cursor, Mode mode,
                         const std::optional<RngState>& dropout_seed,
                         std::span<const std::size_t> example_ids) {
  require_rank(batch, 2, "forward batch");
  const std::size_t n = batch.dim(0);
  if (batch.dim(1) != spec.input_size()) {
    throw ShapeError("forward: batch has " + std::to_string(batch.dim(1)) +
                     " features, model expects " +
                     std::to_string(spec.input_size()));
  }
  const float eps = static_cast<float>(cfg ? cfg->bn_epsilon : 1e-5);

  Trace trace;
  trace.blocks.resize(arch.blocks.size());
  Tensor act = batch;
  for (std::size_t bi = 0; bi < arch.blocks.size(); ++bi) {
    const Block& b = arch.blocks[bi];
    BlockTrace& t = trace.blocks[bi];
    if (b.conv) {
      t.input = im2col(act.data(), n, b.h, b.w, b.c, b.kernel);
    } else {
      t.input = act;
    }
    t.rows = t.input.dim(0);
    const std::size_t rows = t.rows;

    t.z = matmul(t.input, weight_matrix(flat, b), cursor.next());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < b.out; ++j)
        t.z.at(r, j) += flat[b.bias_off + j];

    if (b.batch_norm) {
      std::vector<float> mean(b.out), var(b.out);
      if (mode == Mode::kTrain) {
        const float inv_rows = 1.0f / static_cast<float>(rows);
        mean = reduce_rows(t.z, cursor.next());
        for (auto& m : mean) m *= inv_rows;
        Tensor sq({rows, b.out});
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < b.out; ++j) {
            const float d = t.z.at(r, j) - mean[j];
            sq.at(r, j) = d * d;
          }
        var = reduce_rows(sq, cursor.next());
        for (auto& v : var) v *= inv_rows;
        t.batch_mean = mean;
        t.batch_var = var;
      } else {
        for (std::size_t j = 0; j < b.out; ++j) {
          mean[j] = flat[b.mean_off + j];
          var[j] = flat[b.var_off + j];
        }
      }
      t.inv_std.resize(b.out);
      for (std::size_t j = 0; j < b.out; ++j)
        t.inv_std[j] = 1.0f / std::sqrt(var[j] + eps);
      t.xhat = Tensor({rows, b.out});
      t.y = Tensor({rows, b.out});
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < b.out; ++j) {
          const float xh = (t.z.at(r, j) - mean[j]) * t.inv_std[j];
          t.xhat.at(r, j) = xh;
          t.y.at(r, j) = flat[b.gamma_off + j] * xh + flat[b.beta_off + j];
        }
    } else {
      t.y = t.z;
    }

    Tensor out = t.y;
    if (b.relu) {
      for (auto& v : out.data()) v = v > 0.0f ? v : 0.0f;
    }
    if (b.dropout && mode == Mode::kTrain && dropout_seed) {
      t.keep = dropout_keep(*dropout_seed, bi, example_ids, b.out,
                            spec.dropout_rate);
      auto ov = out.data();
      for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= t.keep[i];
    }
    act = b.conv ? out.reshaped({n, b.h * b.w * b.out}) : std::move(out);
  }
  trace.logits = std::move(act);
  return trace;
}

inline std::vector<std::size_t> iota_ids(std::size_t n) {
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  return ids;
}

}  // namespace detail

/// Canonical parameter table for `spec`.
inline std::vector<LayerInfo> weight_layout(const ModelSpec& spec) {
  return detail::build_architecture(spec).layout;
}

/// Glorot-uniform kernels drawn in layer order from `seed`; biases and BN
/// shifts 0, BN scales 1, running mean 0 and running variance 1.
inline Weights init_weights(const ModelSpec& spec, RngState seed) {
  const auto arch = detail::build_architecture(spec);
  std::vector<float> flat(arch.total, 0.0f);
  for (const auto& l : arch.layout) {
    auto dst = std::span<float>(flat).subspan(l.offset, l.size());
    const bool is_kernel = l.name.ends_with(".weight") ||
                           l.name.ends_with(".kernel");
    if (is_kernel) {
      const double bound = std::sqrt(
          6.0 / static_cast<double>(detail::fan_in(l) + detail::fan_out(l)));
      const float fbound = static_cast<float>(bound);
      for (auto& v : dst) {
        float x = static_cast<float>((2.0 * seed.next_unit() - 1.0) * bound);
        // keep samples strictly inside (-L, L) after rounding to binary32
        if (x >= fbound) x = std::nextafter(fbound, 0.0f);
        if (x <= -fbound) x = std::nextafter(-fbound, 0.0f);
        v = x;
      }
    } else if (l.name.ends_with(".bn.gamma") ||
               l.name.ends_with(".bn.running_var")) {
      std::fill(dst.begin(), dst.end(), 1.0f);
    }
  }
  return Weights(arch.layout, std::move(flat));
}

/// Logits for `batch` (N x D). Train mode normalizes with batch statistics and
/// applies dropout when `dropout_seed` is set; Eval mode uses running
/// statistics and no dropout.
inline Tensor forward(const Weights& w, const Tensor& batch,
                      const ModelSpec& spec, const AccumulationPolicy& policy,
                      Mode mode,
                      std::optional<RngState> dropout_seed = std::nullopt,
                      const TrainConfig* cfg = nullptr) {
  const auto arch = detail::build_architecture(spec);
  if (w.size() != arch.total) throw ShapeError("weights do not match spec");
  detail::PolicyCursor cursor(policy);
  const auto ids = detail::iota_ids(batch.rank() == 2 ? batch.dim(0) : 0);
  return detail::run_forward(w.flat(), arch, spec, cfg, batch, cursor, mode,
                             dropout_seed, ids)
      .logits;
}

/// argmax per row; ties go to the lowest class index.
inline std::vector<int> argmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "argmax");
  std::vector<int> out(logits.dim(0));
  for (std::size_t r = 0; r < logits.dim(0); ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < logits.dim(1); ++k) {
      if (logits.at(r, k) > logits.at(r, best)) best = k;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

inline std::vector<int> predict(const Weights& w, const ModelSpec& spec,
                                const Dataset& data,
                                const AccumulationPolicy& policy) {
  return argmax_rows(forward(w, data.features, spec, policy, Mode::kEval));
}

struct LossAndGradient {
  float loss = 0.0f;
  std::vector<float> gradient;  // same layout as Weights::flat()
  // per BN block (by block index): batch mean/var, for running statistics
  std::vector<std::pair<std::vector<float>, std::vector<float>>> bn_stats;
};

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to every trainable parameter (zero for running statistics).
inline LossAndGradient loss_and_gradient(
    const Weights& w, const ModelSpec& spec, const TrainConfig& cfg,
    const Tensor& batch, std::span<const int> labels,
    const AccumulationPolicy& policy,
    std::optional<RngState> dropout_seed = std::nullopt,
    std::span<const std::size_t> example_ids = {}) {
  const auto arch = detail::build_architecture(spec);
  if (w.size() != arch.total) throw ShapeError("weights do not match spec");
  require_rank(batch, 2, "train batch");
  const std::size_t n = batch.dim(0);
  if (labels.size() != n) throw ShapeError("labels do not match batch rows");
  std::vector<std::size_t> default_ids;
  if (example_ids.empty()) {
    default_ids = detail::iota_ids(n);
    example_ids = default_ids;
  } else if (example_ids.size() != n) {
    throw ShapeError("example ids do not match batch rows");
  }

  detail::PolicyCursor cursor(policy);
  const auto flat = w.flat();
  auto trace = detail::run_forward(flat, arch, spec, &cfg, batch, cursor,
                                   Mode::kTrain, dropout_seed, example_ids);

  const std::size_t classes = spec.output_classes;
  const Tensor& logits = trace.logits;
  const AccumulationPolicy softmax_policy = cursor.next();
  Tensor dlogits({n, classes});
  std::vector<float> losses(n);
  std::vector<float> expv(classes);
  const float inv_n = 1.0f / static_cast<float>(n);
  for (std::size_t r = 0; r < n; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw DataError("label outside model output range");
    }
    float mx = logits.at(r, 0);
    for (std::size_t k = 1; k < classes; ++k) mx = std::max(mx, logits.at(r, k));
    for (std::size_t k = 0; k < classes; ++k)
      expv[k] = std::exp(logits.at(r, k) - mx);
    const float s = reduce_sum(expv, salted(softmax_policy, r));
    const float log_s = std::log(s);
    losses[r] = -(logits.at(r, static_cast<std::size_t>(y)) - mx - log_s);
    for (std::size_t k = 0; k < classes; ++k) {
      const float p = expv[k] / s;
      dlogits.at(r, k) =
          (p - (static_cast<std::size_t>(y) == k ? 1.0f : 0.0f)) * inv_n;
    }
  }
  LossAndGradient result;
  result.loss = reduce_sum(losses, cursor.next()) * inv_n;
  result.gradient.assign(flat.size(), 0.0f);
  result.bn_stats.resize(arch.blocks.size());
  auto& grad = result.gradient;

  Tensor dact = std::move(dlogits);
  for (std::size_t bi = arch.blocks.size(); bi-- > 0;) {
    const auto& b = arch.blocks[bi];
    auto& t = trace.blocks[bi];
    const std::size_t rows = t.rows;
    // conv blocks see the flattened N x (H*W*F) gradient; regroup per pixel
    Tensor dy = b.conv ? dact.reshaped({rows, b.out}) : std::move(dact);
    if (!t.keep.empty()) {
      auto dv = dy.data();
      for (std::size_t i = 0; i < dv.size(); ++i) dv[i] *= t.keep[i];
    }
    if (b.relu) {
      auto dv = dy.data();
      const auto yv = t.y.data();
      for (std::size_t i = 0; i < dv.size(); ++i)
        if (!(yv[i] > 0.0f)) dv[i] = 0.0f;
    }
    Tensor dz;
    if (b.batch_norm) {
      result.bn_stats[bi] = {t.batch_mean, t.batch_var};
      Tensor dy_xhat({rows, b.out});
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < b.out; ++j)
          dy_xhat.at(r, j) = dy.at(r, j) * t.xhat.at(r, j);
      const auto dgamma = reduce_rows(dy_xhat, cursor.next());
      const auto dbeta = reduce_rows(dy, cursor.next());
      dz = Tensor({rows, b.out});
      const float rows_f = static_cast<float>(rows);
      for (std::size_t j = 0; j < b.out; ++j) {
        const float gamma = flat[b.gamma_off + j];
        grad[b.gamma_off + j] = dgamma[j];
        grad[b.beta_off + j] = dbeta[j];
        const float sum_dxhat = gamma * dbeta[j];
        const float sum_dxhat_xhat = gamma * dgamma[j];
        const float scale = t.inv_std[j] / rows_f;
        for (std::size_t r = 0; r < rows; ++r) {
          const float dxhat = dy.at(r, j) * gamma;
          dz.at(r, j) = scale * (rows_f * dxhat - sum_dxhat -
                                 t.xhat.at(r, j) * sum_dxhat_xhat);
        }
      }
    } else {
      dz = std::move(dy);
    }
    const auto dbias = reduce_rows(dz, cursor.next());
    for (std::size_t j = 0; j < b.out; ++j) grad[b.bias_off + j] = dbias[j];
    const Tensor dw = matmul(transpose(t.input), dz, cursor.next());
    std::copy(dw.data().begin(), dw.data().end(),
              grad.begin() + static_cast<std::ptrdiff_t>(b.weight_off));
    if (bi > 0) {
      dact = matmul(dz, transpose(detail::weight_matrix(flat, b)),
                    cursor.next());
    }
  }
  return result;
}

/// Mutable optimizer state of one run.
struct TrainState {
  Weights weights;
  std::vector<float> velocity;
  std::int64_t step = 0;

  explicit TrainState(Weights w)
      : weights(std::move(w)), velocity(weights.size(), 0.0f) {}
};

struct StepInputs {
  float learning_rate = 0.0f;
  std::optional<RngState> dropout_seed;
  std::span<const std::size_t> example_ids;
};

/// One SGD-with-momentum step (v <- mu*v - lr*g, w <- w + v) and a
/// running-statistics update for every BN block. Returns the batch loss.
/// Throws DivergedError when the loss is not finite.
inline float train_step(TrainState& state, const ModelSpec& spec,
                        const TrainConfig& cfg, const Tensor& batch,
                        std::span<const int> labels,
                        const AccumulationPolicy& policy,
                        const StepInputs& inputs) {
  auto lg = loss_and_gradient(state.weights, spec, cfg, batch, labels, policy,
                              inputs.dropout_seed, inputs.example_ids);
  if (!std::isfinite(lg.loss)) throw DivergedError(state.step, "non-finite loss");

  const auto& layout = state.weights.layout();
  auto flat = state.weights.flat();
  const float mu = static_cast<float>(cfg.momentum);
  const float lr = inputs.learning_rate;
  for (const auto& l : layout) {
    if (!l.trainable) continue;
    for (std::size_t i = l.offset; i < l.offset + l.size(); ++i) {
      state.velocity[i] = mu * state.velocity[i] - lr * lg.gradient[i];
      flat[i] = flat[i] + state.velocity[i];
    }
  }
  const auto arch = detail::build_architecture(spec);
  const float m = static_cast<float>(cfg.bn_momentum);
  for (std::size_t bi = 0; bi < arch.blocks.size(); ++bi) {
    const auto& b = arch.blocks[bi];
    if (!b.batch_norm) continue;
    const auto& [mean, var] = lg.bn_stats[bi];
    for (std::size_t j = 0; j < b.out; ++j) {
      flat[b.mean_off + j] = m * flat[b.mean_off + j] + (1.0f - m) * mean[j];
      flat[b.var_off + j] = m * flat[b.var_off + j] + (1.0f - m) * var[j];
    }
  }
  ++state.step;
  return lg.loss;
}

// JSON forms. Keys are emitted in sorted order by nlohmann::json's std::map
// backing, which makes dump() canonical.

inline void to_json(nlohmann::json& j, const ConvFront& c) {
  j = {{"kernel_size", c.kernel_size}, {"filters", c.filters}};
}

inline void from_json(const nlohmann::json& j, ConvFront& c) {
  c.kernel_size = j.at("kernel_size").get<std::size_t>();
  c.filters = j.at("filters").get<std::size_t>();
}

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = {{"input_shape", s.input_shape},
       {"hidden_layers", s.hidden_layers},
       {"batch_norm", s.batch_norm},
       {"dropout_rate", s.dropout_rate},
       {"activation", "relu"},
       {"output_classes", s.output_classes},
       {"conv_front", nullptr}};
  if (s.conv_front) j["conv_front"] = *s.conv_front;
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  s.input_shape = j.at("input_shape").get<Shape>();
  s.hidden_layers = j.value("hidden_layers", std::vector<std::size_t>{});
  s.batch_norm = j.value("batch_norm", false);
  s.dropout_rate = j.value("dropout_rate", 0.0);
  s.output_classes = j.value("output_classes", std::size_t{2});
  if (j.value("activation", std::string("relu")) != "relu") {
    throw DataError("only relu activation is supported");
  }
  if (j.contains("conv_front") && !j.at("conv_front").is_null()) {
    s.conv_front = j.at("conv_front").get<ConvFront>();
  } else {
    s.conv_front.reset();
  }
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"base_lr", c.base_lr},
       {"lr_decay_factor", c.lr_decay_factor},
       {"lr_decay_every_epochs", c.lr_decay_every_epochs},
       {"momentum", c.momentum},
       {"shuffle", c.shuffle},
       {"augment_sigma", c.augment_sigma},
       {"canonical_batch_order", c.canonical_batch_order},
       {"bn_epsilon", c.bn_epsilon},
       {"bn_momentum", c.bn_momentum},
       {"loss", "softmax_cross_entropy"}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.base_lr = j.value("base_lr", d.base_lr);
  c.lr_decay_factor = j.value("lr_decay_factor", d.lr_decay_factor);
  c.lr_decay_every_epochs =
      j.value("lr_decay_every_epochs", d.lr_decay_every_epochs);
  c.momentum = j.value("momentum", d.momentum);
  c.shuffle = j.value("shuffle", d.shuffle);
  c.augment_sigma = j.value("augment_sigma", d.augment_sigma);
  c.canonical_batch_order =
      j.value("canonical_batch_order", d.canonical_batch_order);
  c.bn_epsilon = j.value("bn_epsilon", d.bn_epsilon);
  c.bn_momentum = j.value("bn_momentum", d.bn_momentum);
  if (j.value("loss", std::string("softmax_cross_entropy")) !=
      "softmax_cross_entropy") {
    throw DataError("only softmax_cross_entropy loss is supported");
  }
}

}  // namespace detnoise
