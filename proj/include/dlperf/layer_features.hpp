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

// Per-layer cost counts (h^cm) and the concatenated regressor input
// h = h^hp || h^dev || h^struct || h^cm.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dlperf/graph.hpp"
#include "dlperf/run_config.hpp"

namespace dlperf {

/// Output elements per sample; activation bytes scale this by b and the
/// element width.
inline std::uint64_t output_elements(const LayerNode& node) {
  switch (node.kind.tag) {
    case LayerTag::Linear:
      return checked_product(node.dim_or("tokens", 1), node.dim("d_out"));
    case LayerTag::Attention:
    case LayerTag::LayerNorm:
    case LayerTag::Embedding:
      return checked_product(node.dim("tokens"), node.dim("d_model"));
    case LayerTag::Conv2d:
      return checked_product(node.dim("h_out"), node.dim("w_out"), node.dim("c_out"));
    case LayerTag::Activation:
      return static_cast<std::uint64_t>(node.dim("elements"));
    case LayerTag::Pooling:
      return static_cast<std::uint64_t>(
          node.dim_or("out_elements", node.dim("elements")));
    case LayerTag::Other:
      return static_cast<std::uint64_t>(node.dim_or("out_elements", 0));
  }
  return 0;
}

inline CmFeatures compute_layer_cm(const LayerNode& node, const RunConfig& cfg) {
  require(cfg.hp.batch_size >= 1, ErrorCode::kInvalidArgument, "batch_size must be >= 1");
  const auto b = static_cast<std::uint64_t>(cfg.hp.batch_size);
  CmFeatures cm;
  switch (node.kind.tag) {
    case LayerTag::Linear: {
      // Rows seen by the layer: batch times tokens per sample.
      const std::uint64_t rows = checked_mul(b, node.dim_or("tokens", 1));
      const auto din = node.dim("d_in"), dout = node.dim("d_out");
      cm.flops = checked_add(checked_product(2, rows, din, dout),
                             checked_mul(rows, dout));
      break;
    }
    case LayerTag::Attention: {
      const auto s = node.dim("tokens"), d = node.dim("d_model");
      cm.flops = checked_add(checked_product(8, b, s, d, d),
                             checked_product(4, b, s, s, d));
      break;
    }
    case LayerTag::LayerNorm:
      cm.flops = checked_product(5, b, node.dim("tokens"), node.dim("d_model"));
      break;
    case LayerTag::Embedding:
      cm.flops = 0;
      break;
    case LayerTag::Conv2d: {
      const auto k = node.dim("kernel");
      cm.flops = checked_product(2, b, node.dim("h_out"), node.dim("w_out"),
                                 node.dim("c_out"), node.dim("c_in"), k, k);
      break;
    }
    case LayerTag::Activation:
    case LayerTag::Pooling:
      cm.flops = checked_mul(b, node.dim("elements"));
      break;
    case LayerTag::Other:
      cm.flops = checked_mul(b, node.dim_or("flops", 0));
      break;
  }
  cm.params = layer_params(node);
  cm.activation_bytes = checked_product(b, output_elements(node), cfg.bytes_per_element);
  return cm;
}

inline constexpr std::size_t kHpFeatures = 4;
inline constexpr std::size_t kCmFeatures = 3;

/// Length of h for a kind under a given device description.
inline std::size_t feature_length(const LayerKind& kind, const RunConfig& cfg) {
  return kHpFeatures + cfg.dev.size() + schema_for(kind.tag).structural.size() +
         kCmFeatures;
}

struct FeatureVector {
  LayerKind kind;
  std::vector<double> values;

  friend bool operator==(const FeatureVector&, const FeatureVector&) = default;
};

/// Column names of h for a kind, in layout order.
inline std::vector<std::string> feature_names(const LayerKind& kind,
                                              const RunConfig& cfg) {
  std::vector<std::string> names = {"batch_size", "seq_len", "optimizer",
                                    "n_workers", "peak_flops", "mem_bandwidth",
                                    "mem_bytes"};
  for (const auto& [k, v] : cfg.dev.extra) names.push_back(k);
  for (const auto& s : schema_for(kind.tag).structural) names.push_back(s);
  names.insert(names.end(), {"flops", "params", "activation_bytes"});
  return names;
}

inline FeatureVector assemble_feature_vector(const LayerNode& node,
                                             const RunConfig& cfg) {
  validate_node(node);
  FeatureVector h;
  h.kind = node.kind;
  auto& v = h.values;
  v.reserve(feature_length(node.kind, cfg));
  v.push_back(static_cast<double>(cfg.hp.batch_size));
  v.push_back(static_cast<double>(cfg.hp.seq_len));
  v.push_back(static_cast<double>(static_cast<int>(cfg.hp.optimizer)));
  v.push_back(static_cast<double>(cfg.comm.n_workers));
  v.push_back(cfg.dev.peak_flops);
  v.push_back(cfg.dev.mem_bandwidth);
  v.push_back(cfg.dev.mem_bytes);
  for (const auto& [k, value] : cfg.dev.extra) v.push_back(value);
  for (const auto& key : schema_for(node.kind.tag).structural) {
    v.push_back(static_cast<double>(node.dim(key)));
  }
  const CmFeatures cm = compute_layer_cm(node, cfg);
  v.push_back(static_cast<double>(cm.flops));
  v.push_back(static_cast<double>(cm.params));
  v.push_back(static_cast<double>(cm.activation_bytes));
  require(v.size() == feature_length(node.kind, cfg), ErrorCode::kSchema,
          "feature vector does not match schema for " + node.kind.key());
  return h;
}

}  // namespace dlperf
