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

// On-disk formats.
//
//   manifest.json      layer table (name, shape, byte offset, byte length),
//                      dtype "f32le", SHA-256 of weights.bin
//   weights.bin        raw little-endian binary32 payload
//   predictions.csv    index,label,pred,logit_0..logit_{K-1} (%.9e)
//   runconfig.json     canonical RunConfig plus config_hash
//   training_log.json  loss curve and wall-clock timings (volatile)
//
// Datasets are read from CSV (header row; a "label" column, "attr_<name>"
// subgroup columns, every other column a feature) or from IDX image/label
// pairs.

#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "detnoise/digest.hpp"
#include "detnoise/errors.hpp"
#include "detnoise/model.hpp"
#include "detnoise/training.hpp"
#include "detnoise/variants.hpp"
#include "json.hpp"

namespace detnoise {

namespace fs = std::filesystem;

inline constexpr std::string_view kManifestFile = "manifest.json";
inline constexpr std::string_view kWeightsFile = "weights.bin";
inline constexpr std::string_view kPredictionsFile = "predictions.csv";
inline constexpr std::string_view kRunConfigFile = "runconfig.json";
inline constexpr std::string_view kTrainingLogFile = "training_log.json";

inline void write_text(const fs::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("short write to " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

/// JSON text as written to disk: 2-space indent, sorted keys, trailing
/// newline.
inline std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Weights

inline std::vector<std::uint8_t> encode_f32le(std::span<const float> values) {
  std::vector<std::uint8_t> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(values[i]);
    bytes[4 * i + 0] = static_cast<std::uint8_t>(u);
    bytes[4 * i + 1] = static_cast<std::uint8_t>(u >> 8);
    bytes[4 * i + 2] = static_cast<std::uint8_t>(u >> 16);
    bytes[4 * i + 3] = static_cast<std::uint8_t>(u >> 24);
  }
  return bytes;
}

inline std::vector<float> decode_f32le(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % 4 != 0) throw DataError("f32le payload length not a multiple of 4");
  std::vector<float> values(bytes.size() / 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t u = static_cast<std::uint32_t>(bytes[4 * i]) |
                            static_cast<std::uint32_t>(bytes[4 * i + 1]) << 8 |
                            static_cast<std::uint32_t>(bytes[4 * i + 2]) << 16 |
                            static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24;
    values[i] = std::bit_cast<float>(u);
  }
  return values;
}

inline nlohmann::json weights_manifest(const Weights& w,
                                       const std::string& payload_sha256) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : w.layout()) {
    layers.push_back({{"name", l.name},
                      {"shape", l.shape},
                      {"offset", l.offset * 4},
                      {"length", l.size() * 4},
                      {"trainable", l.trainable}});
  }
  return {{"format", "detnoise-weights"},
          {"version", 1},
          {"dtype", "f32le"},
          {"payload_bytes", w.size() * 4},
          {"payload_sha256", payload_sha256},
          {"layers", layers}};
}

inline void write_weights(const fs::path& dir, const Weights& w) {
  const auto payload = encode_f32le(w.flat());
  const auto digest = sha256_hex(payload);
  {
    std::ofstream out(dir / kWeightsFile, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + (dir / kWeightsFile).string());
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
  }
  write_text(dir / kManifestFile, dump_json(weights_manifest(w, digest)));
}

/// Reads manifest.json + weights.bin and verifies dtype, layout and checksum.
inline Weights read_weights(const fs::path& dir) {
  const auto manifest = read_json(dir / kManifestFile);
  try {
    if (manifest.at("dtype").get<std::string>() != "f32le") {
      throw DataError("unsupported weights dtype");
    }
    const auto payload = read_file_bytes((dir / kWeightsFile).string());
    if (payload.size() != manifest.at("payload_bytes").get<std::size_t>()) {
      throw DataError("weights.bin size does not match manifest");
    }
    if (sha256_hex(payload) != manifest.at("payload_sha256").get<std::string>()) {
      throw DataError("weights.bin checksum mismatch in " + dir.string());
    }
    std::vector<LayerInfo> layout;
    for (const auto& l : manifest.at("layers")) {
      LayerInfo info;
      info.name = l.at("name").get<std::string>();
      info.shape = l.at("shape").get<Shape>();
      const auto offset = l.at("offset").get<std::size_t>();
      const auto length = l.at("length").get<std::size_t>();
      if (offset % 4 != 0 || length != info.size() * 4) {
        throw DataError("manifest layer " + info.name + " has bad extent");
      }
      info.offset = offset / 4;
      info.trainable = l.value("trainable", true);
      layout.push_back(std::move(info));
    }
    return Weights(std::move(layout), decode_f32le(payload));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed weights manifest: " + std::string(e.what()));
  }
}

// ---------------------------------------------------------------------------
// Predictions

inline std::string format_e9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9e", v);
  return buf;
}

inline std::string predictions_csv(std::span<const int> labels,
                                   std::span<const int> preds,
                                   const Tensor& logits) {
  const std::size_t k = logits.dim(1);
  std::string out = "index,label,pred";
  for (std::size_t c = 0; c < k; ++c) out += ",logit_" + std::to_string(c);
  out += "\n";
  for (std::size_t i = 0; i < preds.size(); ++i) {
    out += std::to_string(i) + "," + std::to_string(labels[i]) + "," +
           std::to_string(preds[i]);
    for (std::size_t c = 0; c < k; ++c) out += "," + format_e9(logits.at(i, c));
    out += "\n";
  }
  return out;
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    cells.emplace_back(line.substr(start, pos == std::string_view::npos
                                              ? std::string_view::npos
                                              : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  for (auto& c : cells) {
    while (!c.empty() && (c.back() == '\r' || c.back() == ' ')) c.pop_back();
    while (!c.empty() && c.front() == ' ') c.erase(c.begin());
  }
  return cells;
}

inline std::vector<std::string> csv_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

inline double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("not a number '" + s + "' in " + where);
  }
}

inline int parse_int(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const long v = std::stol(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return static_cast<int>(v);
  } catch (const std::exception&) {
    throw DataError("not an integer '" + s + "' in " + where);
  }
}

struct PredictionTable {
  std::vector<int> labels;
  std::vector<int> preds;
  Tensor logits;
};

inline PredictionTable read_predictions(const fs::path& path) {
  const auto lines = csv_lines(read_text(path));
  if (lines.empty()) throw DataError("empty predictions file " + path.string());
  const auto header = split_csv_line(lines[0]);
  if (header.size() < 4 || header[0] != "index" || header[1] != "label" ||
      header[2] != "pred") {
    throw DataError("bad predictions header in " + path.string());
  }
  const std::size_t k = header.size() - 3;
  const std::size_t n = lines.size() - 1;
  if (n == 0) throw DataError("no predictions in " + path.string());
  PredictionTable t;
  std::vector<float> logits;
  logits.reserve(n * k);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split_csv_line(lines[i]);
    if (cells.size() != header.size()) {
      throw DataError("ragged row in " + path.string());
    }
    t.labels.push_back(parse_int(cells[1], path.string()));
    t.preds.push_back(parse_int(cells[2], path.string()));
    for (std::size_t c = 0; c < k; ++c)
      logits.push_back(static_cast<float>(parse_double(cells[3 + c], path.string())));
  }
  t.logits = Tensor({n, k}, std::move(logits));
  return t;
}

// ---------------------------------------------------------------------------
// Run directories

inline nlohmann::json training_log_json(const RunArtifact& a) {
  return {{"loss_curve", a.loss_curve},
          {"timings", {{"train_ns", a.timings.train_ns},
                       {"eval_ns", a.timings.eval_ns}}}};
}

/// Drops fields that legitimately differ between identical runs.
inline nlohmann::json strip_volatile(nlohmann::json j) {
  if (j.is_object()) {
    j.erase("timings");
    for (auto& [key, value] : j.items()) value = strip_volatile(value);
  } else if (j.is_array()) {
    for (auto& value : j) value = strip_volatile(value);
  }
  return j;
}

inline void write_run(const fs::path& dir, const RunArtifact& a) {
  fs::create_directories(dir);
  write_weights(dir, a.weights);
  write_text(dir / kPredictionsFile,
             predictions_csv(a.labels, a.predictions, a.logits));
  write_text(dir / kRunConfigFile, dump_json(to_json_with_hash(a.config)));
  write_text(dir / kTrainingLogFile, dump_json(training_log_json(a)));
}

inline RunArtifact read_run(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("no run directory " + dir.string());
  RunArtifact a;
  try {
    a.config = run_config_from_json(read_json(dir / kRunConfigFile));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed run config in " + dir.string() + ": " + e.what());
  }
  a.weights = read_weights(dir);
  auto table = read_predictions(dir / kPredictionsFile);
  a.labels = std::move(table.labels);
  a.predictions = std::move(table.preds);
  a.logits = std::move(table.logits);
  if (fs::exists(dir / kTrainingLogFile)) {
    const auto log = read_json(dir / kTrainingLogFile);
    a.loss_curve = log.value("loss_curve", std::vector<double>{});
    if (log.contains("timings")) {
      a.timings.train_ns = log["timings"].value("train_ns", std::int64_t{0});
      a.timings.eval_ns = log["timings"].value("eval_ns", std::int64_t{0});
    }
  }
  return a;
}

// ---------------------------------------------------------------------------
// Datasets

inline constexpr std::string_view kAttrPrefix = "attr_";

inline std::string dataset_csv(const Dataset& d) {
  const std::size_t dim = d.feature_size();
  std::string out;
  for (std::size_t c = 0; c < dim; ++c) out += "f" + std::to_string(c) + ",";
  out += "label";
  for (const auto& [name, groups] : d.subgroups) {
    out += ",";
    out += kAttrPrefix;
    out += name;
  }
  out += "\n";
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t c = 0; c < dim; ++c)
      out += format_e9(d.features.at(i, c)) + ",";
    out += std::to_string(d.labels[i]);
    for (const auto& [name, groups] : d.subgroups)
      out += "," + std::to_string(groups[i]);
    out += "\n";
  }
  return out;
}

/// `num_classes` of 0 infers max(label) + 1 (at least 2).
inline Dataset read_dataset_csv(const fs::path& path, std::size_t num_classes = 0,
                                Split split = Split::kTrain) {
  const auto lines = csv_lines(read_text(path));
  if (lines.size() < 2) throw DataError("dataset " + path.string() + " has no rows");
  const auto header = split_csv_line(lines[0]);
  std::ptrdiff_t label_col = -1;
  std::vector<std::size_t> feature_cols;
  std::vector<std::pair<std::size_t, std::string>> attr_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == "label") label_col = static_cast<std::ptrdiff_t>(c);
    else if (header[c].starts_with(kAttrPrefix))
      attr_cols.emplace_back(c, header[c].substr(kAttrPrefix.size()));
    else feature_cols.push_back(c);
  }
  if (label_col < 0) throw DataError("dataset " + path.string() + " has no label column");
  if (feature_cols.empty()) throw DataError("dataset " + path.string() + " has no feature columns");
  Dataset d;
  d.split = split;
  const std::size_t n = lines.size() - 1;
  std::vector<float> feats;
  feats.reserve(n * feature_cols.size());
  for (const auto& [col, name] : attr_cols) d.subgroups[name].reserve(n);
  int max_label = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split_csv_line(lines[i]);
    if (cells.size() != header.size()) {
      throw DataError("row " + std::to_string(i) + " of " + path.string() +
                      " has " + std::to_string(cells.size()) + " cells, expected " +
                      std::to_string(header.size()));
    }
    for (auto c : feature_cols)
      feats.push_back(static_cast<float>(parse_double(cells[c], path.string())));
    const int y = parse_int(cells[static_cast<std::size_t>(label_col)], path.string());
    d.labels.push_back(y);
    max_label = std::max(max_label, y);
    for (const auto& [col, name] : attr_cols)
      d.subgroups[name].push_back(parse_int(cells[col], path.string()));
  }
  d.features = Tensor({n, feature_cols.size()}, std::move(feats));
  d.num_classes = num_classes ? num_classes
                              : std::max<std::size_t>(2, static_cast<std::size_t>(max_label) + 1);
  d.validate();
  return d;
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) << 24 |
         static_cast<std::uint32_t>(b[at + 1]) << 16 |
         static_cast<std::uint32_t>(b[at + 2]) << 8 |
         static_cast<std::uint32_t>(b[at + 3]);
}

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// IDX unsigned-byte images (N x H x W) and labels. Pixels are scaled to
/// [0, 1].
inline Dataset read_dataset_idx(const fs::path& images, const fs::path& labels,
                                std::size_t num_classes = 0,
                                Split split = Split::kTrain) {
  const auto ib = read_file_bytes(images.string());
  const auto lb = read_file_bytes(labels.string());
  if (ib.size() < 16 || read_be32(ib, 0) != kIdxImagesMagic) {
    throw DataError("bad IDX image magic in " + images.string());
  }
  if (lb.size() < 8 || read_be32(lb, 0) != kIdxLabelsMagic) {
    throw DataError("bad IDX label magic in " + labels.string());
  }
  const std::size_t n = read_be32(ib, 4), h = read_be32(ib, 8), w = read_be32(ib, 12);
  if (read_be32(lb, 4) != n) throw DataError("IDX image and label counts differ");
  if (n == 0 || h == 0 || w == 0) throw DataError("IDX file is empty");
  if (ib.size() != 16 + n * h * w || lb.size() != 8 + n) {
    throw DataError("IDX payload length does not match its header");
  }
  Dataset d;
  d.split = split;
  std::vector<float> feats(n * h * w);
  for (std::size_t i = 0; i < feats.size(); ++i)
    feats[i] = static_cast<float>(ib[16 + i]) / 255.0f;
  d.features = Tensor({n, h * w}, std::move(feats));
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d.labels.push_back(lb[8 + i]);
    max_label = std::max(max_label, d.labels.back());
  }
  d.num_classes = num_classes ? num_classes
                              : std::max<std::size_t>(2, static_cast<std::size_t>(max_label) + 1);
  d.validate();
  return d;
}

inline void write_idx(const fs::path& images, const fs::path& labels,
                      std::span<const std::uint8_t> pixels, std::size_t n,
                      std::size_t h, std::size_t w,
                      std::span<const std::uint8_t> label_bytes) {
  auto be32 = [](std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
  };
  std::vector<std::uint8_t> ib, lb;
  be32(ib, kIdxImagesMagic);
  be32(ib, static_cast<std::uint32_t>(n));
  be32(ib, static_cast<std::uint32_t>(h));
  be32(ib, static_cast<std::uint32_t>(w));
  ib.insert(ib.end(), pixels.begin(), pixels.end());
  be32(lb, kIdxLabelsMagic);
  be32(lb, static_cast<std::uint32_t>(n));
  lb.insert(lb.end(), label_bytes.begin(), label_bytes.end());
  write_text(images, std::string_view(reinterpret_cast<const char*>(ib.data()), ib.size()));
  write_text(labels, std::string_view(reinterpret_cast<const char*>(lb.data()), lb.size()));
}

}  // namespace detnoise
