/* Copyright 2026 The dlperf Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Per-kind layer time regressors phi_l and the additive compute estimate
// T_sum = sum over layers of t_l.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dlperf/csv.hpp"
#include "dlperf/error.hpp"
#include "dlperf/forest.hpp"
#include "dlperf/graph.hpp"
#include "dlperf/layer_features.hpp"
#include "dlperf/run_config.hpp"
#include "json.hpp"

namespace dlperf {

/// One measured layer: h and its forward+backward time for one iteration.
struct LayerSample {
  FeatureVector features;
  double measured_time = 0.0;
};

struct LayerCostModel {
  LayerKind kind;
  std::vector<std::string> feature_names;
  Forest forest;

  std::size_t n_trees() const { return forest.trees().size(); }
};

using LayerModels = std::map<std::string, LayerCostModel>;  // keyed by kind key

inline LayerCostModel fit_forest(const std::vector<LayerSample>& samples,
                                 const ForestParams& params,
                                 std::vector<std::string> feature_names = {}) {
  require(samples.size() >= 2, ErrorCode::kInvalidArgument,
          "at least two layer samples are required");
  const LayerKind kind = samples.front().features.kind;
  const std::size_t d = samples.front().features.values.size();
  TrainingData data;
  data.d = d;
  data.x.reserve(samples.size() * d);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    require(s.features.kind == kind, ErrorCode::kInvalidArgument,
            "mixed layer kinds in sample set (" + kind.key() + " vs " +
                s.features.kind.key() + ")");
    require(s.features.values.size() == d, ErrorCode::kDimensionMismatch,
            "sample " + std::to_string(i) + " has a different feature length");
    require(std::isfinite(s.measured_time) && s.measured_time > 0.0, ErrorCode::kNonFinite,
            "sample " + std::to_string(i) + " has a non-finite or non-positive time");
    data.x.insert(data.x.end(), s.features.values.begin(), s.features.values.end());
    data.y.push_back(s.measured_time);
  }
  require(feature_names.empty() || feature_names.size() == d, ErrorCode::kDimensionMismatch,
          "feature name count does not match feature length");
  return LayerCostModel{kind, std::move(feature_names), Forest::fit(data, params)};
}

inline double predict_layer_time(const LayerCostModel& model, const FeatureVector& h) {
  require(h.kind == model.kind, ErrorCode::kSchema,
          "feature vector of kind " + h.kind.key() + " given to the " +
              model.kind.key() + " model");
  require(h.values.size() == model.forest.n_features(), ErrorCode::kSchema,
          "feature vector length " + std::to_string(h.values.size()) +
              " does not match model schema (" +
              std::to_string(model.forest.n_features()) + ")");
  return model.forest.predict(h.values);
}

struct LayerTimes {
  double total = 0.0;                   // T_sum
  std::map<std::string, double> per_node;  // node id -> t_l
};

inline LayerTimes sum_layer_times(const ModelGraph& g, const LayerModels& models,
                                  const RunConfig& cfg) {
  LayerTimes out;
  // Sum in topological order so the reduction order is canonical.
  for (std::size_t pos : topological_positions(g)) {
    const auto& node = g.nodes[pos];
    auto it = models.find(node.kind.key());
    require(it != models.end(), ErrorCode::kNotFound,
            "no layer model for kind " + node.kind.key() + " (node '" + node.id + "')");
    const double t = predict_layer_time(it->second, assemble_feature_vector(node, cfg));
    out.per_node[node.id] = t;
    out.total += t;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Artifacts.

inline constexpr std::string_view kLayerModelFormat = "dlperf.layer_model";
inline constexpr int kLayerModelVersion = 1;

inline std::string serialize_layer_model(const LayerCostModel& m) {
  nlohmann::json j = {{"format", kLayerModelFormat},
                      {"version", kLayerModelVersion},
                      {"kind", m.kind.key()},
                      {"feature_names", m.feature_names},
                      {"forest", m.forest.to_json()}};
  return j.dump();
}

inline LayerCostModel parse_layer_model(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kSchema, std::string("malformed layer model: ") + e.what());
  }
  require(j.value("format", "") == kLayerModelFormat, ErrorCode::kSchema,
          "not a layer model artifact");
  require(j.value("version", 0) == kLayerModelVersion, ErrorCode::kSchema,
          "unsupported layer model version");
  LayerCostModel m;
  m.kind = LayerKind::from_key(j.at("kind").get<std::string>());
  m.feature_names = j.value("feature_names", std::vector<std::string>{});
  m.forest = Forest::from_json(j.at("forest"));
  return m;
}

/// File name for a kind's artifact inside a model directory.
inline std::string layer_model_filename(const LayerKind& kind) {
  std::string name = kind.key();
  for (char& c : name) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                    c == '-' || c == '_';
    if (!ok) c = '_';
  }
  return name + ".json";
}

inline void save_layer_models(const LayerModels& models, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [key, m] : models) {
    write_file((dir / layer_model_filename(m.kind)).string(), serialize_layer_model(m));
  }
}

/// Loads every `*.json` artifact in `dir`. Two files for the same kind are
/// an error, as is a directory without any model.
inline LayerModels load_layer_models(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), ErrorCode::kNotFound,
          "layer model directory '" + dir.string() + "' not found");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  LayerModels models;
  for (const auto& f : files) {
    LayerCostModel m;
    try {
      m = parse_layer_model(read_file(f.string()));
    } catch (const Error& e) {
      fail(e.code(), f.filename().string() + ": " + e.what());
    }
    const std::string key = m.kind.key();
    require(models.emplace(key, std::move(m)).second, ErrorCode::kSchema,
            "two layer models for kind " + key + " in '" + dir.string() + "'");
  }
  require(!models.empty(), ErrorCode::kNotFound,
          "no layer models in '" + dir.string() + "'");
  return models;
}

/// Layer-sample file: `kind`, the feature columns of h, `measured_time_s`.
inline std::string format_layer_samples(const std::vector<LayerSample>& samples,
                                        const std::vector<std::string>& feature_names) {
  CsvTable t;
  t.header.push_back("kind");
  t.header.insert(t.header.end(), feature_names.begin(), feature_names.end());
  t.header.push_back("measured_time_s");
  for (const auto& s : samples) {
    require(s.features.values.size() == feature_names.size(), ErrorCode::kSchema,
            "sample does not match the header");
    std::vector<std::string> row = {s.features.kind.key()};
    for (double v : s.features.values) row.push_back(format_double(v));
    row.push_back(format_double(s.measured_time));
    t.rows.push_back(std::move(row));
  }
  return format_csv(t);
}

struct LayerSampleSet {
  LayerKind kind;
  std::vector<std::string> feature_names;
  std::vector<LayerSample> samples;
};

inline LayerSampleSet parse_layer_samples(std::string_view text) {
  const CsvTable t = parse_csv(text);
  const auto kind_col = t.require_column("kind");
  const auto time_col = t.require_column("measured_time_s");
  require(!t.rows.empty(), ErrorCode::kSchema, "layer-sample file has no rows");
  LayerSampleSet set;
  set.kind = LayerKind::from_key(t.rows.front()[kind_col]);
  std::vector<std::size_t> feature_cols;
  for (std::size_t c = 0; c < t.header.size(); ++c) {
    if (c == kind_col || c == time_col) continue;
    feature_cols.push_back(c);
    set.feature_names.push_back(t.header[c]);
  }
  const std::size_t min_len = kHpFeatures + 3 + schema_for(set.kind.tag).structural.size() + kCmFeatures;
  require(feature_cols.size() >= min_len, ErrorCode::kSchema,
          "layer-sample header has " + std::to_string(feature_cols.size()) +
              " feature columns; kind " + set.kind.key() + " needs at least " +
              std::to_string(min_len));
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string where = "row " + std::to_string(r + 1);
    require(LayerKind::from_key(row[kind_col]) == set.kind, ErrorCode::kSchema,
            where + ": mixed kinds in one layer-sample file");
    LayerSample s;
    s.features.kind = set.kind;
    for (auto c : feature_cols) s.features.values.push_back(parse_double(row[c], where));
    s.measured_time = parse_double(row[time_col], where);
    require(std::isfinite(s.measured_time) && s.measured_time > 0.0, ErrorCode::kSchema,
            where + ": measured_time_s must be positive");
    set.samples.push_back(std::move(s));
  }
  return set;
}

}  // namespace dlperf
