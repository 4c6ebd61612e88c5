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

// Ring all-reduce cost model for data-parallel gradient synchronization.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "dlperf/error.hpp"
#include "dlperf/graph.hpp"
#include "json.hpp"

namespace dlperf {

struct CommConfig {
  std::int64_t n_workers = 1;
  double payload_bits = 0.0;
  double bandwidth_bps = 1.0;
  double latency_s = 0.0;

  friend bool operator==(const CommConfig&, const CommConfig&) = default;
};

inline void validate(const CommConfig& c) {
  require(c.n_workers >= 1, ErrorCode::kInvalidArgument, "n_workers must be >= 1");
  require(std::isfinite(c.payload_bits) && c.payload_bits >= 0.0,
          ErrorCode::kInvalidArgument, "payload_bits must be >= 0");
  require(std::isfinite(c.bandwidth_bps) && c.bandwidth_bps > 0.0,
          ErrorCode::kInvalidArgument, "bandwidth_bps must be > 0");
  require(std::isfinite(c.latency_s) && c.latency_s >= 0.0,
          ErrorCode::kInvalidArgument, "latency_s must be >= 0");
}

/// T_comm = 2(N-1)/N * S/B + 2(N-1) * latency. Exactly zero for one worker.
inline double allreduce_time(const CommConfig& c) {
  validate(c);
  if (c.n_workers == 1) return 0.0;
  const double n = static_cast<double>(c.n_workers);
  const double steps = 2.0 * (n - 1.0);
  return steps / n * (c.payload_bits / c.bandwidth_bps) + steps * c.latency_s;
}

inline constexpr std::uint64_t kDefaultBitsPerParam = 32;

/// Gradient volume exchanged per iteration: every parameter's gradient.
inline std::uint64_t gradient_payload_bits(
    const ModelGraph& g, std::uint64_t bits_per_param = kDefaultBitsPerParam) {
  std::uint64_t params = 0;
  for (const auto& node : g.nodes) params = checked_add(params, layer_params(node));
  return checked_mul(params, bits_per_param);
}

struct LatencyCalibration {
  double latency_s = 0.0;
  std::optional<double> bandwidth_bps;
  std::size_t n_samples = 0;
};

/// Median of measured all-reduce round-trip latencies.
inline double median_latency(std::vector<double> samples) {
  require(!samples.empty(), ErrorCode::kInvalidArgument,
          "latency_samples_s is empty");
  for (double s : samples) {
    require(std::isfinite(s) && s > 0.0, ErrorCode::kInvalidArgument,
            "latency samples must be positive and finite");
  }
  std::sort(samples.begin(), samples.end());
  const std::size_t n = samples.size();
  return n % 2 == 1 ? samples[n / 2]
                    : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
}

/// Reads {"latency_samples_s": [...], "bandwidth_bps": optional}.
inline LatencyCalibration load_latency_calibration(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kSchema, std::string("malformed calibration JSON: ") + e.what());
  }
  detail::reject_unknown_keys(doc, {"latency_samples_s", "bandwidth_bps"},
                              "calibration");
  require(doc.contains("latency_samples_s") && doc["latency_samples_s"].is_array(),
          ErrorCode::kSchema, "calibration: latency_samples_s must be a list");
  std::vector<double> samples;
  for (const auto& v : doc["latency_samples_s"]) {
    require(v.is_number(), ErrorCode::kSchema,
            "calibration: latency samples must be numbers");
    samples.push_back(v.get<double>());
  }
  LatencyCalibration cal;
  cal.latency_s = median_latency(samples);
  cal.n_samples = samples.size();
  if (doc.contains("bandwidth_bps")) {
    const double bw = doc["bandwidth_bps"].get<double>();
    require(std::isfinite(bw) && bw > 0.0, ErrorCode::kInvalidArgument,
            "calibration: bandwidth_bps must be > 0");
    cal.bandwidth_bps = bw;
  }
  return cal;
}

}  // namespace dlperf
