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

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "dlperf/comm.hpp"
#include "dlperf/error.hpp"
#include "json.hpp"

namespace dlperf {

enum class Optimizer { Sgd, Adam, AdamW };

inline constexpr std::size_t kNumOptimizers = 3;
inline constexpr std::array<std::string_view, kNumOptimizers> kOptimizerNames = {
    "sgd", "adam", "adamw"};

inline std::string_view to_string(Optimizer o) {
  return kOptimizerNames[static_cast<std::size_t>(o)];
}

inline Optimizer parse_optimizer(std::string_view name) {
  for (std::size_t i = 0; i < kNumOptimizers; ++i) {
    if (kOptimizerNames[i] == name) return static_cast<Optimizer>(i);
  }
  fail(ErrorCode::kSchema, "unknown optimizer '" + std::string(name) + "'");
}

struct Hyperparams {
  std::int64_t batch_size = 1;
  std::int64_t seq_len = 1;
  Optimizer optimizer = Optimizer::Adam;

  friend bool operator==(const Hyperparams&, const Hyperparams&) = default;
};

/// h^dev. The three named members are always present; `extra` entries are
/// appended in key order.
struct DeviceFeatures {
  double peak_flops = 1.0;
  double mem_bandwidth = 1.0;
  double mem_bytes = 1.0;
  std::map<std::string, double> extra;

  std::size_t size() const { return 3 + extra.size(); }

  friend bool operator==(const DeviceFeatures&, const DeviceFeatures&) = default;
};

struct RunConfig {
  Hyperparams hp;
  DeviceFeatures dev;
  std::int64_t iterations_per_epoch = 1;
  CommConfig comm;
  std::int64_t bytes_per_element = 4;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

inline void validate(const RunConfig& cfg) {
  require(cfg.hp.batch_size >= 1, ErrorCode::kInvalidArgument, "batch_size must be >= 1");
  require(cfg.hp.seq_len >= 1, ErrorCode::kInvalidArgument, "seq_len must be >= 1");
  require(cfg.iterations_per_epoch >= 1, ErrorCode::kInvalidArgument,
          "iterations_per_epoch must be >= 1");
  require(cfg.bytes_per_element >= 1, ErrorCode::kInvalidArgument,
          "bytes_per_element must be >= 1");
  auto positive = [](double v) { return std::isfinite(v) && v > 0.0; };
  require(positive(cfg.dev.peak_flops) && positive(cfg.dev.mem_bandwidth) &&
              positive(cfg.dev.mem_bytes),
          ErrorCode::kInvalidArgument, "device quantities must be > 0");
  for (const auto& [k, v] : cfg.dev.extra) {
    require(positive(v), ErrorCode::kInvalidArgument,
            "device feature '" + k + "' must be > 0");
  }
  validate(cfg.comm);
}

/// I = ceil(dataset_size / b).
inline std::int64_t iterations_for(std::int64_t dataset_size, std::int64_t batch) {
  require(dataset_size >= 1 && batch >= 1, ErrorCode::kInvalidArgument,
          "dataset_size and batch_size must be >= 1");
  return (dataset_size + batch - 1) / batch;
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
  nlohmann::json dev = {{"peak_flops", cfg.dev.peak_flops},
                        {"mem_bandwidth", cfg.dev.mem_bandwidth},
                        {"mem_bytes", cfg.dev.mem_bytes}};
  for (const auto& [k, v] : cfg.dev.extra) dev[k] = v;
  return {{"hp",
           {{"batch_size", cfg.hp.batch_size},
            {"seq_len", cfg.hp.seq_len},
            {"optimizer", std::string(to_string(cfg.hp.optimizer))},
            {"bytes_per_element", cfg.bytes_per_element}}},
          {"dev", dev},
          {"iterations_per_epoch", cfg.iterations_per_epoch},
          {"comm",
           {{"n_workers", cfg.comm.n_workers},
            {"payload_bits", cfg.comm.payload_bits},
            {"bandwidth_bps", cfg.comm.bandwidth_bps},
            {"latency_s", cfg.comm.latency_s}}}};
}

/// Parses a run-config document. `iterations_per_epoch` may be replaced by
/// `dataset_size`, in which case I = ceil(dataset_size / batch_size).
/// `comm.payload_bits` is optional; absent means "derive from the graph".
inline RunConfig config_from_json(const nlohmann::json& doc) {
  using detail::get_field;
  detail::reject_unknown_keys(
      doc, {"hp", "dev", "iterations_per_epoch", "dataset_size", "comm"},
      "run config");
  RunConfig cfg;
  const auto& hp = doc.at("hp");
  detail::reject_unknown_keys(
      hp, {"batch_size", "seq_len", "optimizer", "bytes_per_element"}, "hp");
  cfg.hp.batch_size = get_field<std::int64_t>(hp, "batch_size", "hp");
  cfg.hp.seq_len = hp.value("seq_len", std::int64_t{1});
  cfg.hp.optimizer = parse_optimizer(hp.value("optimizer", std::string("adam")));
  cfg.bytes_per_element = hp.value("bytes_per_element", std::int64_t{4});

  require(doc.contains("dev"), ErrorCode::kSchema, "run config: missing 'dev'");
  const auto& dev = doc["dev"];
  require(dev.is_object(), ErrorCode::kSchema, "dev must be an object");
  cfg.dev.peak_flops = get_field<double>(dev, "peak_flops", "dev");
  cfg.dev.mem_bandwidth = get_field<double>(dev, "mem_bandwidth", "dev");
  cfg.dev.mem_bytes = get_field<double>(dev, "mem_bytes", "dev");
  for (const auto& item : dev.items()) {
    if (item.key() == "peak_flops" || item.key() == "mem_bandwidth" ||
        item.key() == "mem_bytes") {
      continue;
    }
    require(item.value().is_number(), ErrorCode::kSchema,
            "dev: '" + item.key() + "' must be numeric");
    cfg.dev.extra[item.key()] = item.value().get<double>();
  }

  if (doc.contains("iterations_per_epoch")) {
    cfg.iterations_per_epoch = get_field<std::int64_t>(doc, "iterations_per_epoch", "run config");
  } else {
    require(doc.contains("dataset_size"), ErrorCode::kSchema,
            "run config: need iterations_per_epoch or dataset_size");
    cfg.iterations_per_epoch = iterations_for(
        get_field<std::int64_t>(doc, "dataset_size", "run config"), cfg.hp.batch_size);
  }

  require(doc.contains("comm"), ErrorCode::kSchema, "run config: missing 'comm'");
  const auto& comm = doc["comm"];
  detail::reject_unknown_keys(
      comm, {"n_workers", "payload_bits", "bandwidth_bps", "latency_s"}, "comm");
  cfg.comm.n_workers = comm.value("n_workers", std::int64_t{1});
  cfg.comm.payload_bits = comm.value("payload_bits", 0.0);
  cfg.comm.bandwidth_bps = get_field<double>(comm, "bandwidth_bps", "comm");
  cfg.comm.latency_s = comm.value("latency_s", 0.0);
  validate(cfg);
  return cfg;
}

inline RunConfig parse_run_config(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kSchema, std::string("malformed run config: ") + e.what());
  }
  try {
    return config_from_json(doc);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchema, std::string("run config: ") + e.what());
  }
}

}  // namespace dlperf
