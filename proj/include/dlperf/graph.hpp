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

// Layer-level DAG describing one training iteration of a network.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dlperf/error.hpp"
#include "json.hpp"

namespace dlperf {

enum class LayerTag {
  Linear,
  Attention,
  LayerNorm,
  Embedding,
  Conv2d,
  Activation,
  Pooling,
  Other,
};

inline constexpr std::size_t kNumLayerTags = 8;

inline constexpr std::array<std::string_view, kNumLayerTags> kLayerTagNames = {
    "Linear", "Attention", "LayerNorm", "Embedding",
    "Conv2d", "Activation", "Pooling", "Other"};

inline std::string_view to_string(LayerTag tag) {
  return kLayerTagNames[static_cast<std::size_t>(tag)];
}

inline std::optional<LayerTag> parse_layer_tag(std::string_view name) {
  for (std::size_t i = 0; i < kNumLayerTags; ++i) {
    if (kLayerTagNames[i] == name) return static_cast<LayerTag>(i);
  }
  return std::nullopt;
}

/// Kind of a layer. `Other` kinds carry a non-empty free-form name.
struct LayerKind {
  LayerTag tag = LayerTag::Other;
  std::string other_name;

  static LayerKind of(LayerTag tag) { return LayerKind{tag, {}}; }
  static LayerKind other(std::string name) {
    require(!name.empty(), ErrorCode::kSchema, "Other kind requires a name");
    return LayerKind{LayerTag::Other, std::move(name)};
  }

  /// Stable key used to index per-kind models: "Linear", "Other:Dropout".
  std::string key() const {
    if (tag == LayerTag::Other) return "Other:" + other_name;
    return std::string(to_string(tag));
  }

  static LayerKind from_key(std::string_view key) {
    if (key.starts_with("Other:")) return other(std::string(key.substr(6)));
    auto tag = parse_layer_tag(key);
    require(tag.has_value() && *tag != LayerTag::Other, ErrorCode::kSchema,
            "unknown layer kind '" + std::string(key) + "'");
    return of(*tag);
  }

  bool is_elementwise() const {
    return tag == LayerTag::Activation || tag == LayerTag::LayerNorm ||
           tag == LayerTag::Pooling;
  }

  friend bool operator==(const LayerKind&, const LayerKind&) = default;
  friend auto operator<=>(const LayerKind&, const LayerKind&) = default;
};

/// Named dimensions a kind understands. `structural` keys are required and
/// form h^struct in that order; `optional` keys only influence cost counts.
struct KindSchema {
  std::vector<std::string> structural;
  std::vector<std::string> optional;
};

inline const KindSchema& schema_for(LayerTag tag) {
  static const std::array<KindSchema, kNumLayerTags> schemas = {{
      {{"d_in", "d_out"}, {"tokens"}},
      {{"d_model", "heads", "tokens"}, {}},
      {{"d_model", "tokens"}, {}},
      {{"vocab", "d_model", "tokens"}, {}},
      {{"c_in", "c_out", "kernel", "h_out", "w_out"}, {}},
      {{"elements"}, {}},
      {{"elements"}, {"out_elements"}},
      {{}, {"flops", "params", "out_elements"}},
  }};
  return schemas[static_cast<std::size_t>(tag)];
}

using Dims = std::map<std::string, std::int64_t>;

struct CmFeatures {
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
  std::uint64_t activation_bytes = 0;

  friend bool operator==(const CmFeatures&, const CmFeatures&) = default;
};

struct LayerNode {
  std::string id;
  LayerKind kind;
  Dims dims;

  std::int64_t dim(const std::string& key) const {
    auto it = dims.find(key);
    require(it != dims.end(), ErrorCode::kMissingDimension,
            "node '" + id + "' (" + kind.key() + ") lacks dimension '" + key +
                "'");
    return it->second;
  }

  std::int64_t dim_or(const std::string& key, std::int64_t fallback) const {
    auto it = dims.find(key);
    return it == dims.end() ? fallback : it->second;
  }

  friend bool operator==(const LayerNode&, const LayerNode&) = default;
};

enum class Direction { Forward, Backward };

struct EdgeDep {
  std::string src;
  std::string dst;
  std::uint64_t tensor_bytes = 0;
  Direction direction = Direction::Forward;

  friend bool operator==(const EdgeDep&, const EdgeDep&) = default;
};

struct ModelGraph {
  std::string name;
  std::vector<LayerNode> nodes;
  std::vector<EdgeDep> edges;

  /// id -> position in `nodes`.
  std::unordered_map<std::string, std::size_t> index() const {
    std::unordered_map<std::string, std::size_t> idx;
    idx.reserve(nodes.size());
    for (std::size_t i = 0; i < nodes.size(); ++i) idx.emplace(nodes[i].id, i);
    return idx;
  }

  friend bool operator==(const ModelGraph&, const ModelGraph&) = default;
};

// ---------------------------------------------------------------------------
// Checked unsigned arithmetic for cost counts.

inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  std::uint64_t out;
  if (__builtin_mul_overflow(a, b, &out)) {
    fail(ErrorCode::kOverflow, "count exceeds 64-bit range");
  }
  return out;
}

inline std::uint64_t checked_add(std::uint64_t a, std::uint64_t b) {
  std::uint64_t out;
  if (__builtin_add_overflow(a, b, &out)) {
    fail(ErrorCode::kOverflow, "count exceeds 64-bit range");
  }
  return out;
}

template <typename... Ts>
std::uint64_t checked_product(std::uint64_t first, Ts... rest) {
  std::uint64_t out = first;
  ((out = checked_mul(out, static_cast<std::uint64_t>(rest))), ...);
  return out;
}

// ---------------------------------------------------------------------------
// Validation.

inline void validate_node(const LayerNode& node) {
  require(!node.id.empty(), ErrorCode::kSchema, "node id must be non-empty");
  if (node.kind.tag == LayerTag::Other) {
    require(!node.kind.other_name.empty(), ErrorCode::kSchema,
            "node '" + node.id + "': Other kind requires a name");
  }
  const KindSchema& schema = schema_for(node.kind.tag);
  for (const auto& key : schema.structural) {
    require(node.dims.count(key) == 1, ErrorCode::kMissingDimension,
            "node '" + node.id + "' (" + node.kind.key() +
                ") lacks required dimension '" + key + "'");
  }
  for (const auto& [key, value] : node.dims) {
    const bool known =
        std::find(schema.structural.begin(), schema.structural.end(), key) !=
            schema.structural.end() ||
        std::find(schema.optional.begin(), schema.optional.end(), key) !=
            schema.optional.end();
    require(known, ErrorCode::kSchema,
            "node '" + node.id + "': dimension '" + key +
                "' is not defined for kind " + node.kind.key());
    require(value > 0, ErrorCode::kSchema,
            "node '" + node.id + "': dimension '" + key + "' must be positive");
  }
}

/// Deterministic Kahn ordering; ready nodes are released in ascending id
/// order. Returns node positions.
inline std::vector<std::size_t> topological_positions(const ModelGraph& g) {
  const auto idx = g.index();
  const std::size_t n = g.nodes.size();
  std::vector<std::vector<std::size_t>> out(n);
  std::vector<std::size_t> indegree(n, 0);
  for (const auto& e : g.edges) {
    auto s = idx.find(e.src);
    auto d = idx.find(e.dst);
    require(s != idx.end() && d != idx.end(), ErrorCode::kSchema,
            "edge " + e.src + "->" + e.dst + " references an unknown node");
    out[s->second].push_back(d->second);
    ++indegree[d->second];
  }
  auto by_id = [&](std::size_t a, std::size_t b) {
    return g.nodes[a].id > g.nodes[b].id;
  };
  std::priority_queue<std::size_t, std::vector<std::size_t>, decltype(by_id)>
      ready(by_id);
  for (std::size_t i = 0; i < n; ++i) {
    if (indegree[i] == 0) ready.push(i);
  }
  std::vector<std::size_t> order;
  order.reserve(n);
  while (!ready.empty()) {
    const std::size_t u = ready.top();
    ready.pop();
    order.push_back(u);
    for (std::size_t v : out[u]) {
      if (--indegree[v] == 0) ready.push(v);
    }
  }
  require(order.size() == n, ErrorCode::kCycle,
          "graph '" + g.name + "' is not acyclic");
  return order;
}

inline std::vector<std::string> topological_order(const ModelGraph& g) {
  std::vector<std::string> ids;
  for (std::size_t p : topological_positions(g)) ids.push_back(g.nodes[p].id);
  return ids;
}

inline void validate(const ModelGraph& g) {
  std::set<std::string> ids;
  for (const auto& node : g.nodes) {
    validate_node(node);
    require(ids.insert(node.id).second, ErrorCode::kSchema,
            "duplicate node id '" + node.id + "'");
  }
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& e : g.edges) {
    require(e.src != e.dst, ErrorCode::kSchema,
            "self-loop on node '" + e.src + "'");
    require(ids.count(e.src) && ids.count(e.dst), ErrorCode::kSchema,
            "edge " + e.src + "->" + e.dst + " references an unknown node");
    require(seen.emplace(e.src, e.dst).second, ErrorCode::kSchema,
            "duplicate edge " + e.src + "->" + e.dst);
  }
  topological_positions(g);
}

/// Parameter count of a layer; independent of the run configuration.
inline std::uint64_t layer_params(const LayerNode& node) {
  switch (node.kind.tag) {
    case LayerTag::Linear: {
      const auto din = node.dim("d_in"), dout = node.dim("d_out");
      return checked_add(checked_product(din, dout),
                         static_cast<std::uint64_t>(dout));
    }
    case LayerTag::Attention: {
      const auto d = node.dim("d_model");
      return checked_add(checked_product(4, d, d), checked_product(4, d));
    }
    case LayerTag::LayerNorm:
      return checked_product(2, node.dim("d_model"));
    case LayerTag::Embedding:
      return checked_product(node.dim("vocab"), node.dim("d_model"));
    case LayerTag::Conv2d: {
      const auto cin = node.dim("c_in"), cout = node.dim("c_out"),
                 k = node.dim("kernel");
      return checked_add(checked_product(cin, cout, k, k),
                         static_cast<std::uint64_t>(cout));
    }
    case LayerTag::Activation:
    case LayerTag::Pooling:
      return 0;
    case LayerTag::Other:
      return static_cast<std::uint64_t>(node.dim_or("params", 0));
  }
  return 0;
}

// ---------------------------------------------------------------------------
// JSON file format.

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj,
                                std::initializer_list<std::string_view> allowed,
                                const std::string& where) {
  require(obj.is_object(), ErrorCode::kSchema, where + " must be an object");
  for (const auto& item : obj.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || item.key() == a;
    require(ok, ErrorCode::kSchema,
            where + ": unknown key '" + item.key() + "'");
  }
}

template <typename T>
T get_field(const nlohmann::json& obj, const char* key,
            const std::string& where) {
  require(obj.contains(key), ErrorCode::kSchema,
          where + ": missing key '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchema, where + ": bad value for '" + key + "'");
  }
}

}  // namespace detail

inline std::string_view to_string(Direction d) {
  return d == Direction::Forward ? "forward" : "backward";
}

inline nlohmann::json graph_to_json(const ModelGraph& g) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : g.nodes) {
    nlohmann::json jn = {{"id", n.id},
                         {"kind", std::string(to_string(n.kind.tag))},
                         {"dims", n.dims}};
    if (n.kind.tag == LayerTag::Other) jn["other_name"] = n.kind.other_name;
    nodes.push_back(std::move(jn));
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : g.edges) {
    edges.push_back({{"src", e.src},
                     {"dst", e.dst},
                     {"tensor_bytes", e.tensor_bytes},
                     {"direction", std::string(to_string(e.direction))}});
  }
  return {{"name", g.name}, {"nodes", nodes}, {"edges", edges}};
}

inline ModelGraph graph_from_json(const nlohmann::json& doc) {
  using detail::get_field;
  detail::reject_unknown_keys(doc, {"name", "nodes", "edges"}, "graph");
  ModelGraph g;
  g.name = get_field<std::string>(doc, "name", "graph");
  require(doc.contains("nodes") && doc["nodes"].is_array(), ErrorCode::kSchema,
          "graph: 'nodes' must be an array");
  for (const auto& jn : doc["nodes"]) {
    detail::reject_unknown_keys(jn, {"id", "kind", "dims", "other_name"},
                                "node");
    LayerNode node;
    node.id = get_field<std::string>(jn, "id", "node");
    const auto where = "node '" + node.id + "'";
    const auto kind = get_field<std::string>(jn, "kind", where);
    const auto tag = parse_layer_tag(kind);
    require(tag.has_value(), ErrorCode::kSchema,
            where + ": unknown layer kind '" + kind +
                "' (use kind \"Other\" with other_name)");
    if (*tag == LayerTag::Other) {
      require(jn.contains("other_name"), ErrorCode::kSchema,
              where + ": Other kind requires other_name");
      node.kind = LayerKind::other(get_field<std::string>(jn, "other_name", where));
    } else {
      require(!jn.contains("other_name"), ErrorCode::kSchema,
              where + ": other_name is only valid for Other kinds");
      node.kind = LayerKind::of(*tag);
    }
    if (jn.contains("dims")) {
      require(jn["dims"].is_object(), ErrorCode::kSchema,
              where + ": dims must be an object");
      for (const auto& item : jn["dims"].items()) {
        require(item.value().is_number_integer(), ErrorCode::kSchema,
                where + ": dimension '" + item.key() + "' must be an integer");
        node.dims[item.key()] = item.value().get<std::int64_t>();
      }
    }
    g.nodes.push_back(std::move(node));
  }
  if (doc.contains("edges")) {
    require(doc["edges"].is_array(), ErrorCode::kSchema,
            "graph: 'edges' must be an array");
    for (const auto& je : doc["edges"]) {
      detail::reject_unknown_keys(je, {"src", "dst", "tensor_bytes", "direction"},
                                  "edge");
      EdgeDep e;
      e.src = get_field<std::string>(je, "src", "edge");
      e.dst = get_field<std::string>(je, "dst", "edge");
      if (je.contains("tensor_bytes")) {
        require(je["tensor_bytes"].is_number_unsigned() ||
                    (je["tensor_bytes"].is_number_integer() &&
                     je["tensor_bytes"].get<std::int64_t>() >= 0),
                ErrorCode::kSchema, "edge: tensor_bytes must be a non-negative integer");
        e.tensor_bytes = je["tensor_bytes"].get<std::uint64_t>();
      }
      const auto dir = je.value("direction", std::string("forward"));
      require(dir == "forward" || dir == "backward", ErrorCode::kSchema,
              "edge: direction must be forward or backward");
      e.direction = dir == "forward" ? Direction::Forward : Direction::Backward;
      g.edges.push_back(std::move(e));
    }
  }
  validate(g);
  return g;
}

inline ModelGraph parse_model_graph(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kSchema, std::string("malformed JSON: ") + e.what());
  }
  return graph_from_json(doc);
}

inline std::string serialize_model_graph(const ModelGraph& g) {
  return graph_to_json(g).dump(2);
}

}  // namespace dlperf
