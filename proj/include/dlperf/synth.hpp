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

// Synthetic benchmark: transformer-like architecture generators, a hidden
// roofline-with-fusion runtime oracle standing in for hardware, the
// configuration grid, dataset collection under a sampling strategy, and
// ingestion of externally measured datasets.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dlperf/comm.hpp"
#include "dlperf/csv.hpp"
#include "dlperf/design.hpp"
#include "dlperf/error.hpp"
#include "dlperf/graph.hpp"
#include "dlperf/layer_features.hpp"
#include "dlperf/rng.hpp"
#include "dlperf/run_config.hpp"
#include "json.hpp"

namespace dlperf {

// ---------------------------------------------------------------------------
// Architecture generators.

inline constexpr std::array<std::string_view, 5> kFamilies = {
    "t5-like", "gpt2-like", "bert-like", "vit-like", "deit-like"};

inline bool is_family(std::string_view f) {
  return std::find(kFamilies.begin(), kFamilies.end(), f) != kFamilies.end();
}

struct ArchKnobs {
  std::int64_t depth = 2;
  std::int64_t width = 256;
  std::int64_t seq_len = 128;
  std::int64_t heads = 0;     // 0: width / 64
  std::int64_t ffn_mult = 4;
  std::int64_t vocab = 8192;
  std::int64_t classes = 1000;
  // When set, vocabulary and class count are drawn from the seed instead.
  bool seeded_vocab = false;
};

namespace detail {

class GraphBuilder {
 public:
  explicit GraphBuilder(std::string name) { g_.name = std::move(name); }

  std::string add(std::string id, LayerKind kind, Dims dims) {
    g_.nodes.push_back({id, std::move(kind), std::move(dims)});
    return id;
  }

  /// Edge carrying the producer's per-sample output tensor (fp32).
  void connect(const std::string& src, const std::string& dst) {
    const auto& node = *std::find_if(g_.nodes.begin(), g_.nodes.end(),
                                     [&](const LayerNode& n) { return n.id == src; });
    g_.edges.push_back({src, dst, checked_mul(output_elements(node), 4), Direction::Forward});
  }

  ModelGraph finish() {
    validate(g_);
    return std::move(g_);
  }

 private:
  ModelGraph g_;
};

struct BlockShape {
  std::int64_t d, s, h, ffn;
};

inline LayerKind kind(LayerTag t) { return LayerKind::of(t); }

// Post-norm encoder block: attn, ln, fc1, act, fc2, ln (residual into each ln).
inline std::string post_norm_block(GraphBuilder& b, const std::string& p, const std::string& in,
                                   const BlockShape& s) {
  const auto attn = b.add(p + ".attn", kind(LayerTag::Attention),
                          {{"d_model", s.d}, {"heads", s.h}, {"tokens", s.s}});
  const auto ln1 = b.add(p + ".ln1", kind(LayerTag::LayerNorm), {{"d_model", s.d}, {"tokens", s.s}});
  const auto fc1 = b.add(p + ".fc1", kind(LayerTag::Linear),
                         {{"d_in", s.d}, {"d_out", s.ffn}, {"tokens", s.s}});
  const auto act = b.add(p + ".act", kind(LayerTag::Activation), {{"elements", s.s * s.ffn}});
  const auto fc2 = b.add(p + ".fc2", kind(LayerTag::Linear),
                         {{"d_in", s.ffn}, {"d_out", s.d}, {"tokens", s.s}});
  const auto ln2 = b.add(p + ".ln2", kind(LayerTag::LayerNorm), {{"d_model", s.d}, {"tokens", s.s}});
  b.connect(in, attn);
  b.connect(attn, ln1);
  b.connect(in, ln1);
  b.connect(ln1, fc1);
  b.connect(fc1, act);
  b.connect(act, fc2);
  b.connect(fc2, ln2);
  b.connect(ln1, ln2);
  return ln2;
}

// Pre-norm block: ln, attn, ln, fc1, act, fc2. The residual stream enters
// the second norm; returns the block output (fc2).
inline std::string pre_norm_block(GraphBuilder& b, const std::string& p, const std::string& in,
                                  const BlockShape& s,
                                  const std::optional<std::string>& cross_src = std::nullopt) {
  const auto ln1 = b.add(p + ".ln1", kind(LayerTag::LayerNorm), {{"d_model", s.d}, {"tokens", s.s}});
  const auto attn = b.add(p + ".attn", kind(LayerTag::Attention),
                          {{"d_model", s.d}, {"heads", s.h}, {"tokens", s.s}});
  b.connect(in, ln1);
  b.connect(ln1, attn);
  std::string stream = attn;
  if (cross_src) {
    const auto lnx = b.add(p + ".lnx", kind(LayerTag::LayerNorm), {{"d_model", s.d}, {"tokens", s.s}});
    const auto xattn = b.add(p + ".xattn", kind(LayerTag::Attention),
                             {{"d_model", s.d}, {"heads", s.h}, {"tokens", s.s}});
    b.connect(attn, lnx);
    b.connect(in, lnx);
    b.connect(lnx, xattn);
    b.connect(*cross_src, xattn);
    stream = xattn;
  }
  const auto ln2 = b.add(p + ".ln2", kind(LayerTag::LayerNorm), {{"d_model", s.d}, {"tokens", s.s}});
  const auto fc1 = b.add(p + ".fc1", kind(LayerTag::Linear),
                         {{"d_in", s.d}, {"d_out", s.ffn}, {"tokens", s.s}});
  const auto act = b.add(p + ".act", kind(LayerTag::Activation), {{"elements", s.s * s.ffn}});
  const auto fc2 = b.add(p + ".fc2", kind(LayerTag::Linear),
                         {{"d_in", s.ffn}, {"d_out", s.d}, {"tokens", s.s}});
  b.connect(stream, ln2);
  b.connect(in, ln2);
  b.connect(ln2, fc1);
  b.connect(fc1, act);
  b.connect(act, fc2);
  return fc2;
}

template <std::size_t N>
std::int64_t pick(Rng& rng, const std::array<std::int64_t, N>& options) {
  return options[uniform_index(rng, N)];
}

}  // namespace detail

/// Builds a family-shaped layer DAG. With `seeded_vocab` the seed picks the
/// vocabulary and class count; equal seeds always give equal graphs.
inline ModelGraph generate_architecture(std::string_view family, const ArchKnobs& knobs,
                                        std::uint64_t seed) {
  require(is_family(family), ErrorCode::kInvalidArgument,
          "unknown family '" + std::string(family) + "'");
  require(knobs.depth >= 1 && knobs.width >= 1 && knobs.seq_len >= 1 && knobs.ffn_mult >= 1 &&
              knobs.heads >= 0 && knobs.vocab >= 1 && knobs.classes >= 1,
          ErrorCode::kInvalidArgument, "architecture knobs must be positive");
  Rng rng = make_rng(seed, "arch:" + std::string(family));
  const std::int64_t vocab = knobs.seeded_vocab
                                 ? detail::pick(rng, std::array<std::int64_t, 3>{8192, 16384, 32768})
                                 : knobs.vocab;
  const std::int64_t classes = knobs.seeded_vocab
                                   ? detail::pick(rng, std::array<std::int64_t, 2>{100, 1000})
                                   : knobs.classes;
  const std::int64_t d = knobs.width;
  const std::int64_t heads = knobs.heads > 0 ? knobs.heads : std::max<std::int64_t>(1, d / 64);
  const std::int64_t s = knobs.seq_len;
  detail::BlockShape shape{d, s, heads, knobs.ffn_mult * d};
  detail::GraphBuilder b{std::string(family)};
  using detail::kind;

  if (family == "bert-like") {
    std::string x = b.add("embed", kind(LayerTag::Embedding),
                          {{"vocab", vocab}, {"d_model", d}, {"tokens", s}});
    for (std::int64_t i = 0; i < knobs.depth; ++i) {
      x = detail::post_norm_block(b, "enc" + std::to_string(i), x, shape);
    }
  } else if (family == "gpt2-like") {
    std::string x = b.add("embed", kind(LayerTag::Embedding),
                          {{"vocab", vocab}, {"d_model", d}, {"tokens", s}});
    for (std::int64_t i = 0; i < knobs.depth; ++i) {
      x = detail::pre_norm_block(b, "dec" + std::to_string(i), x, shape);
    }
    const auto lnf = b.add("ln_f", kind(LayerTag::LayerNorm), {{"d_model", d}, {"tokens", s}});
    const auto head = b.add("lm_head", kind(LayerTag::Linear),
                            {{"d_in", d}, {"d_out", vocab}, {"tokens", s}});
    b.connect(x, lnf);
    b.connect(lnf, head);
  } else if (family == "t5-like") {
    const std::int64_t enc_depth = std::max<std::int64_t>(1, knobs.depth / 2);
    const std::int64_t dec_depth = std::max<std::int64_t>(1, knobs.depth - enc_depth);
    const auto embed = b.add("embed", kind(LayerTag::Embedding),
                             {{"vocab", vocab}, {"d_model", d}, {"tokens", s}});
    std::string x = embed;
    for (std::int64_t i = 0; i < enc_depth; ++i) {
      x = detail::pre_norm_block(b, "enc" + std::to_string(i), x, shape);
    }
    const auto enc_out = b.add("enc_ln", kind(LayerTag::LayerNorm), {{"d_model", d}, {"tokens", s}});
    b.connect(x, enc_out);
    x = embed;
    for (std::int64_t i = 0; i < dec_depth; ++i) {
      x = detail::pre_norm_block(b, "dec" + std::to_string(i), x, shape, enc_out);
    }
    const auto lnf = b.add("dec_ln", kind(LayerTag::LayerNorm), {{"d_model", d}, {"tokens", s}});
    const auto head = b.add("lm_head", kind(LayerTag::Linear),
                            {{"d_in", d}, {"d_out", vocab}, {"tokens", s}});
    b.connect(x, lnf);
    b.connect(lnf, head);
  } else {  // vit-like, deit-like
    const bool deit = family == "deit-like";
    const auto side = static_cast<std::int64_t>(std::sqrt(static_cast<double>(s)));
    const std::int64_t h_out = std::max<std::int64_t>(1, side);
    const std::int64_t w_out = (s + h_out - 1) / h_out;
    const std::int64_t tokens = h_out * w_out + (deit ? 2 : 1);
    shape.s = tokens;
    std::string x = b.add("patch", kind(LayerTag::Conv2d),
                          {{"c_in", 3}, {"c_out", d}, {"kernel", 16}, {"h_out", h_out}, {"w_out", w_out}});
    for (std::int64_t i = 0; i < knobs.depth; ++i) {
      x = detail::pre_norm_block(b, "enc" + std::to_string(i), x, shape);
    }
    const auto lnf = b.add("ln_f", kind(LayerTag::LayerNorm), {{"d_model", d}, {"tokens", tokens}});
    const auto pool = b.add("pool", kind(LayerTag::Pooling),
                            {{"elements", tokens * d}, {"out_elements", d}});
    const auto head = b.add("head", kind(LayerTag::Linear), {{"d_in", d}, {"d_out", classes}});
    b.connect(x, lnf);
    b.connect(lnf, pool);
    b.connect(pool, head);
    if (deit) {
      const auto dist = b.add("head_dist", kind(LayerTag::Linear), {{"d_in", d}, {"d_out", classes}});
      b.connect(pool, dist);
    }
  }
  return b.finish();
}

/// Plain encoder chain: blocks x (Attention, LayerNorm, Linear, Linear,
/// LayerNorm) with no embedding or residual edges.
inline ModelGraph encoder_chain(std::int64_t blocks, std::int64_t width, std::int64_t seq_len) {
  require(blocks >= 1 && width >= 1 && seq_len >= 1, ErrorCode::kInvalidArgument,
          "encoder chain knobs must be positive");
  detail::GraphBuilder b{"encoder"};
  using detail::kind;
  const std::int64_t heads = std::max<std::int64_t>(1, width / 64);
  std::string prev;
  for (std::int64_t i = 0; i < blocks; ++i) {
    const std::string p = "blk" + std::to_string(i);
    const std::vector<std::pair<std::string, std::pair<LayerTag, Dims>>> layers = {
        {p + ".attn", {LayerTag::Attention, {{"d_model", width}, {"heads", heads}, {"tokens", seq_len}}}},
        {p + ".ln1", {LayerTag::LayerNorm, {{"d_model", width}, {"tokens", seq_len}}}},
        {p + ".fc1", {LayerTag::Linear, {{"d_in", width}, {"d_out", 4 * width}, {"tokens", seq_len}}}},
        {p + ".fc2", {LayerTag::Linear, {{"d_in", 4 * width}, {"d_out", width}, {"tokens", seq_len}}}},
        {p + ".ln2", {LayerTag::LayerNorm, {{"d_model", width}, {"tokens", seq_len}}}}};
    for (const auto& [id, spec] : layers) {
      b.add(id, kind(spec.first), spec.second);
      if (!prev.empty()) b.connect(prev, id);
      prev = id;
    }
  }
  return b.finish();
}

// ---------------------------------------------------------------------------
// Oracle.

inline constexpr int kOracleVersion = 1;

struct OracleParams {
  double throughput = 1.0e14;  // FLOP/s
  double bandwidth = 1.5e12;   // bytes/s
  std::map<std::string, double> efficiency = {
      {"Linear", 0.75},   {"Attention", 0.45}, {"LayerNorm", 0.6}, {"Embedding", 0.5},
      {"Conv2d", 0.65},   {"Activation", 0.8}, {"Pooling", 0.7},   {"Other", 0.5}};
  double fusion_discount = 0.0;
  double congestion = 1.0;
  // Additional congestion per doubling of the worker count.
  double worker_contention = 0.0;
  double sigma = 0.0;
  std::uint64_t seed = 0;

  friend bool operator==(const OracleParams&, const OracleParams&) = default;
};

inline void validate(const OracleParams& p) {
  require(std::isfinite(p.throughput) && p.throughput > 0.0 && std::isfinite(p.bandwidth) &&
              p.bandwidth > 0.0,
          ErrorCode::kInvalidArgument, "oracle throughput and bandwidth must be > 0");
  require(p.fusion_discount >= 0.0 && p.fusion_discount < 1.0, ErrorCode::kInvalidArgument,
          "fusion discount must lie in [0, 1)");
  require(std::isfinite(p.sigma) && p.sigma >= 0.0, ErrorCode::kInvalidArgument, "sigma must be >= 0");
  require(std::isfinite(p.congestion) && p.congestion > 0.0 && p.worker_contention >= 0.0,
          ErrorCode::kInvalidArgument, "congestion must be > 0");
  for (const auto& [k, v] : p.efficiency) {
    require(std::isfinite(v) && v > 0.0, ErrorCode::kInvalidArgument,
            "efficiency for '" + k + "' must be > 0");
  }
}

inline nlohmann::json oracle_to_json(const OracleParams& p) {
  return {{"version", kOracleVersion},     {"throughput", p.throughput},
          {"bandwidth", p.bandwidth},      {"efficiency", p.efficiency},
          {"fusion_discount", p.fusion_discount}, {"congestion", p.congestion},
          {"worker_contention", p.worker_contention}, {"sigma", p.sigma},
          {"seed", p.seed}};
}

inline OracleParams oracle_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j,
                              {"version", "throughput", "bandwidth", "efficiency",
                               "fusion_discount", "congestion", "worker_contention", "sigma",
                               "seed"},
                              "oracle params");
  require(j.value("version", 0) == kOracleVersion, ErrorCode::kSchema,
          "unsupported oracle params version");
  OracleParams p;
  try {
    p.throughput = j.value("throughput", p.throughput);
    p.bandwidth = j.value("bandwidth", p.bandwidth);
    if (j.contains("efficiency")) {
      for (const auto& [k, v] : j["efficiency"].items()) p.efficiency[k] = v.get<double>();
    }
    p.fusion_discount = j.value("fusion_discount", p.fusion_discount);
    p.congestion = j.value("congestion", p.congestion);
    p.worker_contention = j.value("worker_contention", p.worker_contention);
    p.sigma = j.value("sigma", p.sigma);
    p.seed = j.value("seed", p.seed);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchema, std::string("oracle params: ") + e.what());
  }
  validate(p);
  return p;
}

inline OracleParams parse_oracle_params(std::string_view text) {
  try {
    return oracle_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kSchema, std::string("malformed oracle params: ") + e.what());
  }
}

struct WorkloadSample {
  std::string family;
  std::size_t config_index = 0;
  ModelGraph graph;
  RunConfig cfg;
  double measured_iter_s = 0.0;
  double measured_epoch_s = 0.0;
  // Isolated per-layer training time (forward + backward), by node id.
  std::map<std::string, double> per_layer_times;
};

/// Extra passes over parameter memory per step for the optimizer update.
inline double optimizer_param_passes(Optimizer o) {
  switch (o) {
    case Optimizer::Sgd:
      return 1.0;
    case Optimizer::Adam:
    case Optimizer::AdamW:
      return 3.0;
  }
  return 1.0;
}

/// Isolated (unfused) roofline time of one layer for one training step.
/// Forward + backward costs three forward passes of arithmetic; memory
/// traffic covers activations in both directions plus parameter reads,
/// gradient writes and the optimizer update.
inline double roofline_layer_time(const LayerNode& node, const RunConfig& cfg,
                                  const OracleParams& p) {
  const CmFeatures cm = compute_layer_cm(node, cfg);
  auto it = p.efficiency.find(std::string(to_string(node.kind.tag)));
  const double eff = it == p.efficiency.end() ? 1.0 : it->second;
  const double flops = 3.0 * static_cast<double>(cm.flops);
  const double param_bytes = static_cast<double>(cm.params) * static_cast<double>(cfg.bytes_per_element);
  const double bytes = 3.0 * static_cast<double>(cm.activation_bytes) +
                       param_bytes * (2.0 + optimizer_param_passes(cfg.hp.optimizer));
  return std::max(flops / (p.throughput * eff), bytes / (p.bandwidth * eff));
}

/// Layers whose time is discounted: an elementwise consumer (Activation,
/// LayerNorm, Pooling) fed directly by another layer is fused into it.
inline std::vector<bool> fused_consumers(const ModelGraph& g) {
  const auto idx = g.index();
  std::vector<bool> fused(g.nodes.size(), false);
  for (const auto& e : g.edges) {
    const auto dst = idx.at(e.dst);
    if (g.nodes[dst].kind.is_elementwise()) fused[dst] = true;
  }
  return fused;
}

inline double oracle_congestion(const OracleParams& p, std::int64_t n_workers) {
  return p.congestion + p.worker_contention * std::log2(static_cast<double>(n_workers));
}

namespace detail {

inline std::uint64_t sample_digest(const ModelGraph& g, const RunConfig& cfg) {
  return fnv1a(serialize_model_graph(g) + config_to_json(cfg).dump());
}

}  // namespace detail

/// Ground truth for one workload. Noise is lognormal with median 1, drawn
/// from a stream keyed by the oracle seed and the (graph, config) content,
/// so equal inputs give bit-identical samples. Per-layer measurements get
/// independent noise keyed by the layer's own content.
inline WorkloadSample oracle_runtime(const ModelGraph& g, const RunConfig& cfg,
                                     const OracleParams& p) {
  validate(p);
  validate(g);
  validate(cfg);
  WorkloadSample ws;
  ws.family = g.name;
  ws.graph = g;
  ws.cfg = cfg;
  const auto fused = fused_consumers(g);
  double compute = 0.0;
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const auto& node = g.nodes[i];
    const double base = roofline_layer_time(node, cfg, p);
    compute += fused[i] ? base * (1.0 - p.fusion_discount) : base;
    double measured = base;
    if (p.sigma > 0.0) {
      nlohmann::json key = {{"kind", node.kind.key()}, {"dims", node.dims}, {"cfg", config_to_json(cfg)}};
      Rng lr = make_rng(p.seed, "layer", fnv1a(key.dump()));
      measured *= std::exp(p.sigma * standard_normal(lr));
    }
    ws.per_layer_times[node.id] = measured;
  }
  double t_iter = oracle_congestion(p, cfg.comm.n_workers) * compute + allreduce_time(cfg.comm);
  if (p.sigma > 0.0) {
    Rng rng = make_rng(p.seed, "iteration", detail::sample_digest(g, cfg));
    t_iter *= std::exp(p.sigma * standard_normal(rng));
  }
  ws.measured_iter_s = t_iter;
  ws.measured_epoch_s = static_cast<double>(cfg.iterations_per_epoch) * t_iter;
  return ws;
}

// ---------------------------------------------------------------------------
// Configuration grid.

struct GridPoint {
  std::string family;
  std::int64_t batch_size = 8;
  std::int64_t seq_len = 64;
  std::int64_t depth = 2;
  std::int64_t width = 256;
  std::int64_t n_workers = 1;
  Optimizer optimizer = Optimizer::Adam;
  std::uint64_t arch_seed = 0;

  friend bool operator==(const GridPoint&, const GridPoint&) = default;
};

struct GridSpec {
  std::vector<std::int64_t> batch_sizes = {8, 16, 32, 64};
  std::vector<std::int64_t> seq_lens = {64, 128, 256, 512};
  std::vector<std::int64_t> depths = {2, 4, 6, 8, 12};
  std::vector<std::int64_t> widths = {256, 512, 768};
  std::vector<std::int64_t> workers = {1, 2, 4, 8};
  std::vector<Optimizer> optimizers = {Optimizer::Adam};
  DeviceFeatures device{1.0e14, 1.5e12, 80.0e9, {}};
  double link_bandwidth_bps = 100.0e9;
  double link_latency_s = 20.0e-6;
  std::int64_t dataset_size = 50000;
};

/// Every combination for one family, in nested-loop order
/// (batch, seq, depth, width, workers, optimizer).
inline std::vector<GridPoint> full_grid(const GridSpec& spec, std::string_view family,
                                        std::uint64_t seed = 0) {
  require(is_family(family), ErrorCode::kInvalidArgument, "unknown family '" + std::string(family) + "'");
  std::vector<GridPoint> out;
  for (auto b : spec.batch_sizes)
    for (auto s : spec.seq_lens)
      for (auto d : spec.depths)
        for (auto w : spec.widths)
          for (auto n : spec.workers)
            for (auto o : spec.optimizers) {
              GridPoint gp{std::string(family), b, s, d, w, n, o, 0};
              gp.arch_seed = stream_seed(seed, "arch-seed:" + std::string(family), out.size());
              out.push_back(gp);
            }
  require(!out.empty(), ErrorCode::kInvalidArgument, "configuration grid is empty");
  return out;
}

/// Seeded subset of `count` grid points, returned in grid order.
inline std::vector<GridPoint> subsample_grid(const std::vector<GridPoint>& grid, std::size_t count,
                                             std::uint64_t seed) {
  require(count >= 1 && count <= grid.size(), ErrorCode::kBudgetExceeded,
          "cannot draw " + std::to_string(count) + " of " + std::to_string(grid.size()) + " configs");
  Rng rng = make_rng(seed, "grid-subsample");
  auto idx = sample_without_replacement(grid.size(), count, rng);
  std::sort(idx.begin(), idx.end());
  std::vector<GridPoint> out;
  for (auto i : idx) out.push_back(grid[i]);
  return out;
}

inline ModelGraph graph_for(const GridPoint& gp) {
  ArchKnobs k;
  k.depth = gp.depth;
  k.width = gp.width;
  k.seq_len = gp.seq_len;
  return generate_architecture(gp.family, k, gp.arch_seed);
}

inline RunConfig config_for(const GridPoint& gp, const GridSpec& spec, const ModelGraph& g) {
  RunConfig cfg;
  cfg.hp = {gp.batch_size, gp.seq_len, gp.optimizer};
  cfg.dev = spec.device;
  cfg.iterations_per_epoch = iterations_for(spec.dataset_size, gp.batch_size);
  cfg.comm.n_workers = gp.n_workers;
  cfg.comm.payload_bits = static_cast<double>(gradient_payload_bits(g));
  cfg.comm.bandwidth_bps = spec.link_bandwidth_bps;
  cfg.comm.latency_s = spec.link_latency_s;
  validate(cfg);
  return cfg;
}

/// Grid factors of one configuration, used to featurize design candidates.
struct ConfigFactors {
  std::int64_t batch_size = 0;
  std::int64_t seq_len = 0;
  std::int64_t width = 0;
  std::int64_t depth = 0;
  std::int64_t n_workers = 0;
};

inline ConfigFactors factors_of(const GridPoint& gp) {
  return {gp.batch_size, gp.seq_len, gp.width, gp.depth, gp.n_workers};
}

/// Measured workloads carry no grid point; width is the widest model
/// dimension in the graph and depth its layer count.
inline ConfigFactors factors_of(const WorkloadSample& s) {
  std::int64_t width = 0;
  for (const auto& n : s.graph.nodes) {
    width = std::max({width, n.dim_or("d_model", 0), n.dim_or("c_out", 0)});
  }
  return {s.cfg.hp.batch_size, s.cfg.hp.seq_len, width,
          static_cast<std::int64_t>(s.graph.nodes.size()), s.cfg.comm.n_workers};
}

/// Candidate rows for design: reference-coded levels of every factor plus
/// the pairwise interactions among batch size, sequence length and width
/// (the factors that jointly shape per-layer cost). Levels are the distinct
/// values present among the candidates.
inline Eigen::MatrixXd design_features(const std::vector<ConfigFactors>& points) {
  using Getter = std::int64_t (*)(const ConfigFactors&);
  const std::array<Getter, 5> getters = {
      [](const ConfigFactors& f) { return f.batch_size; },
      [](const ConfigFactors& f) { return f.seq_len; },
      [](const ConfigFactors& f) { return f.width; },
      [](const ConfigFactors& f) { return f.depth; },
      [](const ConfigFactors& f) { return f.n_workers; }};
  std::array<std::vector<std::int64_t>, 5> levels;
  for (std::size_t f = 0; f < getters.size(); ++f) {
    std::set<std::int64_t> uniq;
    for (const auto& p : points) uniq.insert(getters[f](p));
    levels[f].assign(uniq.begin(), uniq.end());
  }
  auto dummies = [&](std::size_t f, const ConfigFactors& p) {
    std::vector<double> v(levels[f].size() - 1, 0.0);
    const auto pos = static_cast<std::size_t>(
        std::lower_bound(levels[f].begin(), levels[f].end(), getters[f](p)) - levels[f].begin());
    if (pos > 0) v[pos - 1] = 1.0;
    return v;
  };
  std::vector<std::vector<double>> rows;
  for (const auto& p : points) {
    std::vector<double> row;
    std::vector<std::vector<double>> main;
    for (std::size_t f = 0; f < getters.size(); ++f) {
      main.push_back(dummies(f, p));
      row.insert(row.end(), main.back().begin(), main.back().end());
    }
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t b = a + 1; b < 3; ++b)
        for (double x : main[a])
          for (double y : main[b]) row.push_back(x * y);
    rows.push_back(std::move(row));
  }
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(rows.empty() ? 0 : rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return m;
}

enum class Sampler { kDOptimal, kRandom, kFull };

inline Sampler parse_sampler(std::string_view s) {
  if (s == "d-optimal") return Sampler::kDOptimal;
  if (s == "random") return Sampler::kRandom;
  if (s == "full") return Sampler::kFull;
  fail(ErrorCode::kInvalidArgument, "unknown sampler '" + std::string(s) + "'");
}

struct ConfigSelection {
  std::vector<std::size_t> indices;       // ascending candidate positions
  std::optional<DesignSelection> design;  // d-optimal only
  StandardizedRows rows;                  // standardized candidate rows
};

/// Chooses which candidate configurations get benchmarked.
inline ConfigSelection select_configs(const std::vector<ConfigFactors>& candidates, Sampler sampler,
                                      std::size_t k, std::uint64_t seed) {
  require(!candidates.empty(), ErrorCode::kInvalidArgument, "configuration grid is empty");
  ConfigSelection out;
  if (sampler == Sampler::kFull) {
    out.indices.resize(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i) out.indices[i] = i;
    return out;
  }
  require(k >= 1 && k <= candidates.size(), ErrorCode::kBudgetExceeded,
          "budget " + std::to_string(k) + " exceeds " + std::to_string(candidates.size()) +
              " configs");
  if (sampler == Sampler::kRandom) {
    Rng rng = make_rng(seed, "random-sampler");
    out.indices = sample_without_replacement(candidates.size(), k, rng);
    std::sort(out.indices.begin(), out.indices.end());
    return out;
  }
  out.rows = standardize_columns(design_features(candidates));
  DesignProblem problem{out.rows.rows, k, std::nullopt};
  FedorovOptions opt;
  opt.seed = seed;
  out.design = fedorov_exchange(problem, opt);
  out.indices = out.design->selected;
  return out;
}

template <typename T>
std::vector<ConfigFactors> factors_of_all(const std::vector<T>& items) {
  std::vector<ConfigFactors> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(factors_of(it));
  return out;
}

/// Benchmarks each point with the oracle, in grid order.
inline std::vector<WorkloadSample> run_oracle(const std::vector<GridPoint>& points,
                                              const GridSpec& spec, const OracleParams& p) {
  std::vector<WorkloadSample> out;
  out.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const ModelGraph g = graph_for(points[i]);
    WorkloadSample ws = oracle_runtime(g, config_for(points[i], spec, g), p);
    ws.config_index = i;
    out.push_back(std::move(ws));
  }
  return out;
}

inline std::vector<WorkloadSample> collect_dataset(const std::vector<GridPoint>& grid,
                                                   const GridSpec& spec, Sampler sampler,
                                                   std::size_t k, std::uint64_t seed,
                                                   const OracleParams& p) {
  const auto sel = select_configs(factors_of_all(grid), sampler, k, seed);
  std::vector<GridPoint> chosen;
  for (auto i : sel.indices) chosen.push_back(grid[i]);
  auto samples = run_oracle(chosen, spec, p);
  for (std::size_t i = 0; i < samples.size(); ++i) samples[i].config_index = sel.indices[i];
  return samples;
}

// ---------------------------------------------------------------------------
// Dataset files.
//
// One row per workload: family, config_index, graph (path relative to the
// dataset file), batch_size, seq_len, optimizer, bytes_per_element,
// iterations_per_epoch, peak_flops, mem_bandwidth, mem_bytes, n_workers,
// payload_bits (0 derives it from the graph), bandwidth_bps, latency_s,
// measured_iter_s, measured_epoch_s and optionally layer_times_s, a
// ';'-separated list of node_id=seconds.

inline const std::vector<std::string>& dataset_columns() {
  static const std::vector<std::string> cols = {
      "family",          "config_index",   "graph",         "batch_size",
      "seq_len",         "optimizer",      "bytes_per_element", "iterations_per_epoch",
      "peak_flops",      "mem_bandwidth",  "mem_bytes",     "n_workers",
      "payload_bits",    "bandwidth_bps",  "latency_s",     "measured_iter_s",
      "measured_epoch_s", "layer_times_s"};
  return cols;
}

/// Writes graphs under `dir/graphs/` and returns the dataset text; graph
/// paths in the text are relative to `dir`.
inline std::string write_dataset(const std::vector<WorkloadSample>& samples,
                                 const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "graphs");
  CsvTable t;
  t.header = dataset_columns();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    require(s.cfg.dev.extra.empty(), ErrorCode::kSchema,
            "dataset files carry only the three core device features");
    const std::string rel = "graphs/" + s.family + "-" + std::to_string(s.config_index) + ".json";
    write_file((dir / rel).string(), serialize_model_graph(s.graph));
    std::string layers;
    for (const auto& [id, v] : s.per_layer_times) {
      if (!layers.empty()) layers += ';';
      layers += id + "=" + format_double(v);
    }
    t.rows.push_back({s.family, std::to_string(s.config_index), rel,
                      std::to_string(s.cfg.hp.batch_size), std::to_string(s.cfg.hp.seq_len),
                      std::string(to_string(s.cfg.hp.optimizer)),
                      std::to_string(s.cfg.bytes_per_element),
                      std::to_string(s.cfg.iterations_per_epoch), format_double(s.cfg.dev.peak_flops),
                      format_double(s.cfg.dev.mem_bandwidth), format_double(s.cfg.dev.mem_bytes),
                      std::to_string(s.cfg.comm.n_workers), format_double(s.cfg.comm.payload_bits),
                      format_double(s.cfg.comm.bandwidth_bps), format_double(s.cfg.comm.latency_s),
                      format_double(s.measured_iter_s), format_double(s.measured_epoch_s), layers});
  }
  return format_csv(t);
}

struct IngestResult {
  std::vector<WorkloadSample> samples;
  std::vector<std::string> warnings;
};

/// Parses a dataset file. Graph paths resolve against `base_dir`. Rows whose
/// epoch time disagrees with I x iteration time by more than 1% produce a
/// warning rather than an error.
inline IngestResult ingest_measurements(std::string_view text, const std::filesystem::path& base_dir) {
  const CsvTable t = parse_csv(text);
  for (const auto& col : dataset_columns()) {
    if (col == "layer_times_s" || col == "config_index" || col == "payload_bits" ||
        col == "bytes_per_element")
      continue;
    t.require_column(col);
  }
  auto get = [&](const std::vector<std::string>& row, std::string_view col) -> std::string {
    const auto c = t.column(col);
    return c == CsvTable::npos ? std::string() : row[c];
  };
  IngestResult out;
  std::map<std::string, ModelGraph> graph_cache;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string where = "row " + std::to_string(r + 1);
    try {
      WorkloadSample s;
      s.family = get(row, "family");
      require(!s.family.empty(), ErrorCode::kSchema, "empty family");
      const std::string ci = get(row, "config_index");
      s.config_index = ci.empty() ? r : static_cast<std::size_t>(parse_int(ci, where));
      const std::string gpath = get(row, "graph");
      auto it = graph_cache.find(gpath);
      if (it == graph_cache.end()) {
        const auto full = base_dir / gpath;
        require(std::filesystem::exists(full), ErrorCode::kNotFound,
                "graph file '" + full.string() + "' not found");
        it = graph_cache.emplace(gpath, parse_model_graph(read_file(full.string()))).first;
      }
      s.graph = it->second;
      s.cfg.hp.batch_size = parse_int(get(row, "batch_size"), where);
      s.cfg.hp.seq_len = parse_int(get(row, "seq_len"), where);
      s.cfg.hp.optimizer = parse_optimizer(get(row, "optimizer"));
      const std::string bpe = get(row, "bytes_per_element");
      s.cfg.bytes_per_element = bpe.empty() ? 4 : parse_int(bpe, where);
      s.cfg.iterations_per_epoch = parse_int(get(row, "iterations_per_epoch"), where);
      s.cfg.dev.peak_flops = parse_double(get(row, "peak_flops"), where);
      s.cfg.dev.mem_bandwidth = parse_double(get(row, "mem_bandwidth"), where);
      s.cfg.dev.mem_bytes = parse_double(get(row, "mem_bytes"), where);
      s.cfg.comm.n_workers = parse_int(get(row, "n_workers"), where);
      const std::string pb = get(row, "payload_bits");
      s.cfg.comm.payload_bits = pb.empty() ? 0.0 : parse_double(pb, where);
      if (s.cfg.comm.payload_bits == 0.0) {
        s.cfg.comm.payload_bits = static_cast<double>(gradient_payload_bits(s.graph));
      }
      s.cfg.comm.bandwidth_bps = parse_double(get(row, "bandwidth_bps"), where);
      s.cfg.comm.latency_s = parse_double(get(row, "latency_s"), where);
      validate(s.cfg);
      s.measured_iter_s = parse_double(get(row, "measured_iter_s"), where);
      s.measured_epoch_s = parse_double(get(row, "measured_epoch_s"), where);
      require(std::isfinite(s.measured_iter_s) && s.measured_iter_s > 0.0, ErrorCode::kInvalidArgument,
              "measured_iter_s must be > 0");
      require(std::isfinite(s.measured_epoch_s) && s.measured_epoch_s > 0.0,
              ErrorCode::kInvalidArgument, "measured_epoch_s must be > 0");
      const std::string lt = get(row, "layer_times_s");
      if (!lt.empty()) {
        const auto ids = s.graph.index();
        std::size_t pos = 0;
        while (pos <= lt.size()) {
          const auto semi = lt.find(';', pos);
          const std::string item = lt.substr(pos, semi == std::string::npos ? std::string::npos : semi - pos);
          pos = semi == std::string::npos ? lt.size() + 1 : semi + 1;
          const auto eq = item.find('=');
          require(eq != std::string::npos, ErrorCode::kSchema, "layer time '" + item + "' lacks '='");
          const std::string id = item.substr(0, eq);
          require(ids.count(id) == 1, ErrorCode::kSchema, "layer time for unknown node '" + id + "'");
          const double v = parse_double(item.substr(eq + 1), where);
          require(std::isfinite(v) && v > 0.0, ErrorCode::kInvalidArgument,
                  "layer time for '" + id + "' must be > 0");
          s.per_layer_times[id] = v;
        }
      }
      const double expect = static_cast<double>(s.cfg.iterations_per_epoch) * s.measured_iter_s;
      if (std::abs(s.measured_epoch_s - expect) > 0.01 * expect) {
        out.warnings.push_back(where + ": measured_epoch_s " + format_double(s.measured_epoch_s) +
                               " differs from I x measured_iter_s " + format_double(expect) +
                               " by more than 1%");
      }
      out.samples.push_back(std::move(s));
    } catch (const Error& e) {
      const std::string msg = e.what();
      if (msg.rfind(where + ":", 0) == 0) throw;
      fail(e.code(), where + ": " + msg);
    }
  }
  return out;
}

}  // namespace dlperf
