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

// Graph refiner: a single TransformerConv layer over the layer DAG with an
// edge-aware attention score, a global-feature MLP branch, and a predictor
// head emitting the compute and communication scaling factors (alpha, beta).
// Gradients are derived by hand in reverse mode; see backward().

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dlperf/error.hpp"
#include "dlperf/graph.hpp"
#include "dlperf/layer_features.hpp"
#include "dlperf/rng.hpp"
#include "dlperf/run_config.hpp"
#include "json.hpp"

namespace dlperf {

// ---------------------------------------------------------------------------
// Inputs.

/// Node rows: one-hot kind || log1p(FLOPs) || log1p(params) || t_l.
inline constexpr std::size_t kNodeFeatureDim = kNumLayerTags + 3;
inline constexpr std::size_t kNodeTimeSlot = kNumLayerTags + 2;
/// Edge rows: log1p(tensor bytes) || direction (0 forward, 1 backward).
inline constexpr std::size_t kEdgeFeatureDim = 2;

/// Global vector Z: batch size, sequence length, optimizer one-hot, device
/// features, worker count.
inline std::size_t global_feature_dim(const RunConfig& cfg) {
  return 2 + kNumOptimizers + cfg.dev.size() + 1;
}

struct GraphFeatures {
  Eigen::MatrixXd nodes;  // n x d_node
  Eigen::MatrixXd edges;  // |E| x d_edge
  std::vector<std::pair<std::size_t, std::size_t>> edge_index;  // (src, dst)
  Eigen::VectorXd globals;

  std::size_t n_nodes() const { return static_cast<std::size_t>(nodes.rows()); }
};

inline GraphFeatures build_gnn_inputs(const ModelGraph& g, const RunConfig& cfg,
                                      const std::map<std::string, double>& layer_times) {
  GraphFeatures f;
  const auto n = static_cast<Eigen::Index>(g.nodes.size());
  f.nodes = Eigen::MatrixXd::Zero(n, kNodeFeatureDim);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& node = g.nodes[static_cast<std::size_t>(i)];
    auto it = layer_times.find(node.id);
    require(it != layer_times.end(), ErrorCode::kNotFound,
            "no predicted time for node '" + node.id + "'");
    const CmFeatures cm = compute_layer_cm(node, cfg);
    f.nodes(i, static_cast<Eigen::Index>(node.kind.tag)) = 1.0;
    f.nodes(i, kNumLayerTags) = std::log1p(static_cast<double>(cm.flops));
    f.nodes(i, kNumLayerTags + 1) = std::log1p(static_cast<double>(cm.params));
    f.nodes(i, kNodeTimeSlot) = it->second;
  }
  const auto idx = g.index();
  f.edges = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(g.edges.size()), kEdgeFeatureDim);
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    const auto& edge = g.edges[e];
    f.edge_index.emplace_back(idx.at(edge.src), idx.at(edge.dst));
    f.edges(static_cast<Eigen::Index>(e), 0) = std::log1p(static_cast<double>(edge.tensor_bytes));
    f.edges(static_cast<Eigen::Index>(e), 1) = edge.direction == Direction::Backward ? 1.0 : 0.0;
  }
  f.globals = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(global_feature_dim(cfg)));
  Eigen::Index k = 0;
  f.globals[k++] = static_cast<double>(cfg.hp.batch_size);
  f.globals[k++] = static_cast<double>(cfg.hp.seq_len);
  f.globals[k + static_cast<Eigen::Index>(cfg.hp.optimizer)] = 1.0;
  k += kNumOptimizers;
  f.globals[k++] = cfg.dev.peak_flops;
  f.globals[k++] = cfg.dev.mem_bandwidth;
  f.globals[k++] = cfg.dev.mem_bytes;
  for (const auto& [name, v] : cfg.dev.extra) f.globals[k++] = v;
  f.globals[k++] = static_cast<double>(cfg.comm.n_workers);
  require(f.nodes.allFinite() && f.edges.allFinite() && f.globals.allFinite(),
          ErrorCode::kNonFinite, "graph features must be finite");
  return f;
}

/// Attention neighborhood of node i: its in-neighbors (or all neighbors when
/// symmetric) plus a self slot with zero edge features.
struct Slot {
  std::size_t j = 0;
  std::ptrdiff_t edge = -1;  // row in GraphFeatures::edges, -1 for the self slot
};

using Neighborhoods = std::vector<std::vector<Slot>>;

namespace detail {

inline bool row_less(const Eigen::MatrixXd& m, Eigen::Index a, const Eigen::MatrixXd& m2,
                     Eigen::Index b) {
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    if (m(a, c) != m2(b, c)) return m(a, c) < m2(b, c);
  }
  return false;
}

}  // namespace detail

/// Slots are ordered by a relabeling-invariant key (neighbor features, then
/// edge features) so reductions over a neighborhood are canonical.
inline Neighborhoods build_neighborhoods(const GraphFeatures& f, bool symmetric) {
  const std::size_t n = f.n_nodes();
  Neighborhoods nb(n);
  for (std::size_t i = 0; i < n; ++i) nb[i].push_back({i, -1});
  for (std::size_t e = 0; e < f.edge_index.size(); ++e) {
    const auto [src, dst] = f.edge_index[e];
    require(src < n && dst < n, ErrorCode::kDimensionMismatch, "edge index out of range");
    nb[dst].push_back({src, static_cast<std::ptrdiff_t>(e)});
    if (symmetric) nb[src].push_back({dst, static_cast<std::ptrdiff_t>(e)});
  }
  const Eigen::VectorXd zero_edge = Eigen::VectorXd::Zero(f.edges.cols());
  auto edge_val = [&](const Slot& s, Eigen::Index c) {
    return s.edge < 0 ? 0.0 : f.edges(s.edge, c);
  };
  for (auto& slots : nb) {
    std::stable_sort(slots.begin(), slots.end(), [&](const Slot& a, const Slot& b) {
      const auto ja = static_cast<Eigen::Index>(a.j), jb = static_cast<Eigen::Index>(b.j);
      if (detail::row_less(f.nodes, ja, f.nodes, jb)) return true;
      if (detail::row_less(f.nodes, jb, f.nodes, ja)) return false;
      for (Eigen::Index c = 0; c < f.edges.cols(); ++c) {
        if (edge_val(a, c) != edge_val(b, c)) return edge_val(a, c) < edge_val(b, c);
      }
      return (a.edge < 0) < (b.edge < 0);
    });
  }
  return nb;
}

// ---------------------------------------------------------------------------
// Model.

struct GnnConfig {
  std::size_t d_node = kNodeFeatureDim;
  std::size_t d_edge = kEdgeFeatureDim;
  std::size_t d_global = 0;
  std::size_t d_model = 32;
  std::size_t d_k = 16;
  std::size_t heads = 4;
  std::size_t global_hidden = 32;  // two layers
  std::size_t head_hidden = 64;    // two layers
  bool input_projection = true;    // false: node rows feed attention directly
  bool symmetric = false;          // neighborhoods use in- and out-neighbors
  bool use_global_branch = true;   // false: predictor sees pooled nodes only
  bool use_comm_term = true;       // false: beta * T_comm is dropped

  friend bool operator==(const GnnConfig&, const GnnConfig&) = default;
};

struct Dense {
  Eigen::MatrixXd w;  // out x in
  Eigen::VectorXd b;
};

/// Every trainable tensor. Also used as the gradient accumulator.
struct GnnParams {
  Dense input;
  std::vector<Eigen::MatrixXd> w_q, w_k, w_v;  // d_k x d_model each
  Eigen::VectorXd w_edge;
  Eigen::VectorXd b_edge;  // size 1
  Dense g1, g2;
  Dense h1, h2, out;

  /// Visits tensors in a fixed order with a stable name.
  template <typename F>
  void visit(F&& f) {
    f("input.w", input.w);
    f("input.b", input.b);
    for (std::size_t l = 0; l < w_q.size(); ++l) {
      const auto s = std::to_string(l);
      f("head" + s + ".w_q", w_q[l]);
      f("head" + s + ".w_k", w_k[l]);
      f("head" + s + ".w_v", w_v[l]);
    }
    f("edge.w", w_edge);
    f("edge.b", b_edge);
    f("global1.w", g1.w);
    f("global1.b", g1.b);
    f("global2.w", g2.w);
    f("global2.b", g2.b);
    f("pred1.w", h1.w);
    f("pred1.b", h1.b);
    f("pred2.w", h2.w);
    f("pred2.b", h2.b);
    f("out.w", out.w);
    f("out.b", out.b);
  }
  template <typename F>
  void visit(F&& f) const {
    const_cast<GnnParams*>(this)->visit([&](const std::string& name, auto& t) {
      f(name, static_cast<const std::decay_t<decltype(t)>&>(t));
    });
  }

  std::size_t size() const {
    std::size_t n = 0;
    visit([&](const std::string&, const auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> out_v;
    out_v.reserve(size());
    visit([&](const std::string&, const auto& t) {
      out_v.insert(out_v.end(), t.data(), t.data() + t.size());
    });
    return out_v;
  }

  void unflatten(const std::vector<double>& v) {
    require(v.size() == size(), ErrorCode::kDimensionMismatch, "parameter vector length");
    std::size_t k = 0;
    visit([&](const std::string&, auto& t) {
      std::copy(v.begin() + static_cast<std::ptrdiff_t>(k),
                v.begin() + static_cast<std::ptrdiff_t>(k + static_cast<std::size_t>(t.size())),
                t.data());
      k += static_cast<std::size_t>(t.size());
    });
  }

  GnnParams zeros_like() const {
    GnnParams z = *this;
    z.visit([](const std::string&, auto& t) { t.setZero(); });
    return z;
  }
};

/// Column standardization fitted on training data; identity when unfitted.
struct Standardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;

  static Standardizer identity(std::size_t d) {
    return {Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d)),
            Eigen::VectorXd::Ones(static_cast<Eigen::Index>(d))};
  }
};

inline constexpr double kAlphaBetaShift = 0.54132485461291810;  // ln(e - 1)

struct GnnModel {
  GnnConfig config;
  Standardizer node_scaler;
  Standardizer global_scaler;
  Eigen::VectorXd edge_scale;  // edges are divided (not centered) so the
                               // self slot's zero features stay zero
  GnnParams params;
  std::vector<std::uint8_t> head_active;  // diagnostic mask; all 1 normally
  std::string fingerprint;                // training configuration digest
};

inline std::size_t attention_input_dim(const GnnConfig& c) {
  return c.input_projection ? c.d_model : c.d_node;
}

inline void validate(const GnnConfig& c) {
  require(c.heads >= 1 && c.d_k >= 1 && c.d_node >= 1 && c.d_edge >= 1,
          ErrorCode::kInvalidArgument, "GNN dimensions must be positive");
  require(c.input_projection || c.d_model == c.d_node, ErrorCode::kDimensionMismatch,
          "without input projection d_model must equal the node feature width");
  require(!c.use_global_branch || c.d_global >= 1, ErrorCode::kInvalidArgument,
          "global branch needs d_global >= 1");
}

enum class InitMode {
  kIdentityOutput,  // output layer zero: alpha = beta = 1 until trained
  kRandom,          // every tensor random (gradient checks)
  kZero,
};

inline GnnModel init_gnn(const GnnConfig& config, std::uint64_t seed,
                         InitMode mode = InitMode::kIdentityOutput) {
  validate(config);
  GnnModel m;
  m.config = config;
  m.node_scaler = Standardizer::identity(config.d_node);
  m.global_scaler = Standardizer::identity(std::max<std::size_t>(config.d_global, 1));
  m.edge_scale = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(config.d_edge));
  m.head_active.assign(config.heads, 1);

  Rng rng = make_rng(seed, "init");
  auto dense = [&](std::size_t out, std::size_t in) {
    Dense d;
    d.w = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    d.b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(out));
    return d;
  };
  const std::size_t da = attention_input_dim(config);
  auto& p = m.params;
  p.input = config.input_projection ? dense(config.d_model, config.d_node) : dense(0, 0);
  for (std::size_t l = 0; l < config.heads; ++l) {
    p.w_q.push_back(dense(config.d_k, da).w);
    p.w_k.push_back(dense(config.d_k, da).w);
    p.w_v.push_back(dense(config.d_k, da).w);
  }
  p.w_edge = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(config.d_edge));
  p.b_edge = Eigen::VectorXd::Zero(1);
  const std::size_t gh = config.use_global_branch ? config.global_hidden : 0;
  p.g1 = config.use_global_branch ? dense(gh, config.d_global) : dense(0, 0);
  p.g2 = config.use_global_branch ? dense(gh, gh) : dense(0, 0);
  p.h1 = dense(config.head_hidden, config.d_k + gh);
  p.h2 = dense(config.head_hidden, config.head_hidden);
  p.out = dense(2, config.head_hidden);

  if (mode == InitMode::kZero) return m;
  auto fill = [&](Eigen::MatrixXd& w, double scale) {
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = scale * standard_normal(rng);
  };
  auto he = [](Eigen::Index fan_in) { return std::sqrt(2.0 / static_cast<double>(std::max<Eigen::Index>(fan_in, 1))); };
  if (config.input_projection) fill(p.input.w, std::sqrt(1.0 / static_cast<double>(config.d_node)));
  for (std::size_t l = 0; l < config.heads; ++l) {
    fill(p.w_q[l], std::sqrt(1.0 / static_cast<double>(da)));
    fill(p.w_k[l], std::sqrt(1.0 / static_cast<double>(da)));
    fill(p.w_v[l], he(static_cast<Eigen::Index>(da)));
  }
  for (Eigen::Index i = 0; i < p.w_edge.size(); ++i) p.w_edge[i] = 0.1 * standard_normal(rng);
  if (config.use_global_branch) {
    fill(p.g1.w, he(p.g1.w.cols()));
    fill(p.g2.w, he(p.g2.w.cols()));
  }
  fill(p.h1.w, he(p.h1.w.cols()));
  fill(p.h2.w, he(p.h2.w.cols()));
  if (mode == InitMode::kRandom) {
    fill(p.out.w, he(p.out.w.cols()));
    p.visit([&](const std::string& name, auto& t) {
      if (name.ends_with(".b")) {
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = 0.1 * standard_normal(rng);
      }
    });
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward pieces exposed as operations.

/// Per-graph tensors after the model's input scaling.
struct PreparedGraph {
  Eigen::MatrixXd nodes;    // standardized node rows
  Eigen::MatrixXd edges;    // scaled edge rows
  Eigen::VectorXd globals;  // standardized globals
  Neighborhoods neighborhoods;
};

inline PreparedGraph prepare_graph(const GnnModel& model, const GraphFeatures& f) {
  const auto& c = model.config;
  require(static_cast<std::size_t>(f.nodes.cols()) == c.d_node, ErrorCode::kDimensionMismatch,
          "node feature width " + std::to_string(f.nodes.cols()) + " != " + std::to_string(c.d_node));
  require(f.edges.rows() == 0 || static_cast<std::size_t>(f.edges.cols()) == c.d_edge,
          ErrorCode::kDimensionMismatch, "edge feature width mismatch");
  require(static_cast<std::size_t>(f.edges.rows()) == f.edge_index.size(),
          ErrorCode::kDimensionMismatch, "edge rows do not match edge index");
  require(f.n_nodes() >= 1, ErrorCode::kInvalidArgument, "graph has no nodes");
  PreparedGraph pg;
  pg.nodes = (f.nodes.rowwise() - model.node_scaler.mean.transpose()).array().rowwise() /
             model.node_scaler.scale.transpose().array();
  pg.edges = f.edges.rows() == 0
                 ? Eigen::MatrixXd::Zero(0, static_cast<Eigen::Index>(c.d_edge))
                 : Eigen::MatrixXd(f.edges.array().rowwise() / model.edge_scale.transpose().array());
  if (c.use_global_branch) {
    require(static_cast<std::size_t>(f.globals.size()) == c.d_global, ErrorCode::kDimensionMismatch,
            "global feature width " + std::to_string(f.globals.size()) + " != " +
                std::to_string(c.d_global));
    pg.globals = (f.globals - model.global_scaler.mean).cwiseQuotient(model.global_scaler.scale);
  }
  pg.neighborhoods = build_neighborhoods(f, c.symmetric);
  return pg;
}

namespace detail {

inline double relu(double x) { return x > 0.0 ? x : 0.0; }

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Row-by-row products keep each row's arithmetic independent of its position,
// which makes outputs exactly invariant to node relabeling.
inline Eigen::MatrixXd rows_times(const Eigen::MatrixXd& x, const Eigen::MatrixXd& w) {
  Eigen::MatrixXd out(x.rows(), w.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::VectorXd xi = x.row(i).transpose();
    out.row(i) = (w * xi).transpose();
  }
  return out;
}

struct HeadCache {
  Eigen::MatrixXd q, k, v, agg;
  std::vector<std::vector<double>> omega;     // per node, per slot
  std::vector<std::vector<double>> edge_pre;  // W_edge e + b_edge per slot
};

struct ForwardCache {
  Eigen::MatrixXd x;        // attention input rows
  Eigen::MatrixXd updated;  // v'
  Eigen::VectorXd pooled;
  Eigen::VectorXd g1, g2;
  Eigen::VectorXd concat;
  Eigen::VectorXd h1, h2, o;
  std::vector<HeadCache> heads;
  double alpha = 1.0, beta = 1.0;
};

inline Eigen::MatrixXd attention_input(const GnnModel& m, const PreparedGraph& pg) {
  if (!m.config.input_projection) return pg.nodes;
  Eigen::MatrixXd x = rows_times(pg.nodes, m.params.input.w);
  x.rowwise() += m.params.input.b.transpose();
  return x;
}

inline double edge_term_pre(const GnnModel& m, const PreparedGraph& pg, const Slot& s) {
  double pre = m.params.b_edge[0];
  if (s.edge >= 0) pre += pg.edges.row(s.edge).dot(m.params.w_edge);
  return pre;
}

inline void head_forward(const GnnModel& m, const PreparedGraph& pg, const Eigen::MatrixXd& x,
                         std::size_t l, HeadCache& hc) {
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(m.config.d_k));
  hc.q = rows_times(x, m.params.w_q[l]);
  hc.k = rows_times(x, m.params.w_k[l]);
  hc.v = rows_times(x, m.params.w_v[l]);
  const auto n = x.rows();
  hc.agg = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(m.config.d_k));
  hc.omega.assign(static_cast<std::size_t>(n), {});
  hc.edge_pre.assign(static_cast<std::size_t>(n), {});
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& slots = pg.neighborhoods[static_cast<std::size_t>(i)];
    std::vector<double> score(slots.size()), pre(slots.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < slots.size(); ++s) {
      const auto j = static_cast<Eigen::Index>(slots[s].j);
      pre[s] = edge_term_pre(m, pg, slots[s]);
      score[s] = hc.q.row(i).dot(hc.k.row(j)) * inv_sqrt_dk + relu(pre[s]);
      mx = std::max(mx, score[s]);
    }
    double z = 0.0;
    for (auto& sc : score) {
      sc = std::exp(sc - mx);
      z += sc;
    }
    for (std::size_t s = 0; s < slots.size(); ++s) {
      score[s] /= z;
      hc.agg.row(i) += score[s] * hc.v.row(static_cast<Eigen::Index>(slots[s].j));
    }
    hc.omega[static_cast<std::size_t>(i)] = std::move(score);
    hc.edge_pre[static_cast<std::size_t>(i)] = std::move(pre);
  }
}

inline Eigen::VectorXd canonical_mean_rows(const Eigen::MatrixXd& m) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(m.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(),
            [&](Eigen::Index a, Eigen::Index b) { return row_less(m, a, m, b); });
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(m.cols());
  for (auto r : order) sum += m.row(r).transpose();
  return sum / static_cast<double>(m.rows());
}

inline Eigen::VectorXd relu_vec(const Eigen::VectorXd& v) { return v.cwiseMax(0.0); }

inline void forward(const GnnModel& m, const PreparedGraph& pg, ForwardCache& fc) {
  const auto& c = m.config;
  fc.x = attention_input(m, pg);
  fc.heads.resize(c.heads);
  fc.updated = Eigen::MatrixXd::Zero(fc.x.rows(), static_cast<Eigen::Index>(c.d_k));
  for (std::size_t l = 0; l < c.heads; ++l) {
    head_forward(m, pg, fc.x, l, fc.heads[l]);
    if (m.head_active[l]) fc.updated += fc.heads[l].agg.cwiseMax(0.0);
  }
  fc.updated /= static_cast<double>(c.heads);
  fc.pooled = canonical_mean_rows(fc.updated);
  if (c.use_global_branch) {
    fc.g1 = relu_vec(m.params.g1.w * pg.globals + m.params.g1.b);
    fc.g2 = relu_vec(m.params.g2.w * fc.g1 + m.params.g2.b);
    fc.concat.resize(fc.pooled.size() + fc.g2.size());
    fc.concat << fc.pooled, fc.g2;
  } else {
    fc.concat = fc.pooled;
  }
  fc.h1 = relu_vec(m.params.h1.w * fc.concat + m.params.h1.b);
  fc.h2 = relu_vec(m.params.h2.w * fc.h1 + m.params.h2.b);
  fc.o = m.params.out.w * fc.h2 + m.params.out.b;
  // softplus underflows to 0 below about -745; keep the factors positive.
  constexpr double kTiny = std::numeric_limits<double>::min();
  fc.alpha = std::max(softplus(fc.o[0] + kAlphaBetaShift), kTiny);
  fc.beta = std::max(softplus(fc.o[1] + kAlphaBetaShift), kTiny);
}

// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(alpha), d(beta).
inline void backward(const GnnModel& m, const PreparedGraph& pg, const ForwardCache& fc,
                     double d_alpha, double d_beta, GnnParams& grad) {
  const auto& c = m.config;
  const auto& p = m.params;
  Eigen::Vector2d d_o(d_alpha * sigmoid(fc.o[0] + kAlphaBetaShift),
                      d_beta * sigmoid(fc.o[1] + kAlphaBetaShift));
  grad.out.w.noalias() += d_o * fc.h2.transpose();
  grad.out.b += d_o;
  Eigen::VectorXd d_h2 = (p.out.w.transpose() * d_o).cwiseProduct(
      (fc.h2.array() > 0.0).cast<double>().matrix());
  grad.h2.w.noalias() += d_h2 * fc.h1.transpose();
  grad.h2.b += d_h2;
  Eigen::VectorXd d_h1 = (p.h2.w.transpose() * d_h2).cwiseProduct(
      (fc.h1.array() > 0.0).cast<double>().matrix());
  grad.h1.w.noalias() += d_h1 * fc.concat.transpose();
  grad.h1.b += d_h1;
  const Eigen::VectorXd d_concat = p.h1.w.transpose() * d_h1;
  const auto dk = static_cast<Eigen::Index>(c.d_k);
  const Eigen::VectorXd d_pooled = d_concat.head(dk);
  if (c.use_global_branch) {
    Eigen::VectorXd d_g2 = d_concat.tail(d_concat.size() - dk)
                               .cwiseProduct((fc.g2.array() > 0.0).cast<double>().matrix());
    grad.g2.w.noalias() += d_g2 * fc.g1.transpose();
    grad.g2.b += d_g2;
    Eigen::VectorXd d_g1 = (p.g2.w.transpose() * d_g2).cwiseProduct(
        (fc.g1.array() > 0.0).cast<double>().matrix());
    grad.g1.w.noalias() += d_g1 * pg.globals.transpose();
    grad.g1.b += d_g1;
  }

  const auto n = fc.x.rows();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(c.d_k));
  // d(loss)/d(v'_i) is identical for every node under mean pooling.
  const Eigen::RowVectorXd d_updated =
      d_pooled.transpose() / (static_cast<double>(n) * static_cast<double>(c.heads));
  Eigen::MatrixXd d_x = Eigen::MatrixXd::Zero(fc.x.rows(), fc.x.cols());
  for (std::size_t l = 0; l < c.heads; ++l) {
    if (!m.head_active[l]) continue;
    const auto& hc = fc.heads[l];
    Eigen::MatrixXd d_q = Eigen::MatrixXd::Zero(n, dk);
    Eigen::MatrixXd d_k = Eigen::MatrixXd::Zero(n, dk);
    Eigen::MatrixXd d_v = Eigen::MatrixXd::Zero(n, dk);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::RowVectorXd d_agg =
          d_updated.cwiseProduct((hc.agg.row(i).array() > 0.0).cast<double>().matrix());
      const auto& slots = pg.neighborhoods[static_cast<std::size_t>(i)];
      const auto& omega = hc.omega[static_cast<std::size_t>(i)];
      const auto& pre = hc.edge_pre[static_cast<std::size_t>(i)];
      std::vector<double> d_omega(slots.size());
      double weighted = 0.0;
      for (std::size_t s = 0; s < slots.size(); ++s) {
        const auto j = static_cast<Eigen::Index>(slots[s].j);
        d_omega[s] = d_agg.dot(hc.v.row(j));
        d_v.row(j) += omega[s] * d_agg;
        weighted += omega[s] * d_omega[s];
      }
      for (std::size_t s = 0; s < slots.size(); ++s) {
        const auto j = static_cast<Eigen::Index>(slots[s].j);
        const double d_score = omega[s] * (d_omega[s] - weighted);
        d_q.row(i) += d_score * inv_sqrt_dk * hc.k.row(j);
        d_k.row(j) += d_score * inv_sqrt_dk * hc.q.row(i);
        if (pre[s] > 0.0) {
          grad.b_edge[0] += d_score;
          if (slots[s].edge >= 0) grad.w_edge += d_score * pg.edges.row(slots[s].edge).transpose();
        }
      }
    }
    grad.w_q[l].noalias() += d_q.transpose() * fc.x;
    grad.w_k[l].noalias() += d_k.transpose() * fc.x;
    grad.w_v[l].noalias() += d_v.transpose() * fc.x;
    d_x.noalias() += d_q * p.w_q[l] + d_k * p.w_k[l] + d_v * p.w_v[l];
  }
  if (c.input_projection) {
    grad.input.w.noalias() += d_x.transpose() * pg.nodes;
    grad.input.b += d_x.colwise().sum().transpose();
  }
}

}  // namespace detail

/// Raw attention scores for one head, keyed by (i, j) with j in N(i).
inline std::map<std::pair<std::size_t, std::size_t>, double> attention_scores(
    const GnnModel& model, const GraphFeatures& features, std::size_t head) {
  require(head < model.config.heads, ErrorCode::kDimensionMismatch, "head index out of range");
  const PreparedGraph pg = prepare_graph(model, features);
  const Eigen::MatrixXd x = detail::attention_input(model, pg);
  const Eigen::MatrixXd q = detail::rows_times(x, model.params.w_q[head]);
  const Eigen::MatrixXd k = detail::rows_times(x, model.params.w_k[head]);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(model.config.d_k));
  std::map<std::pair<std::size_t, std::size_t>, double> out;
  for (std::size_t i = 0; i < pg.neighborhoods.size(); ++i) {
    for (const auto& s : pg.neighborhoods[i]) {
      out[{i, s.j}] = q.row(static_cast<Eigen::Index>(i)).dot(k.row(static_cast<Eigen::Index>(s.j))) *
                          inv_sqrt_dk +
                      detail::relu(detail::edge_term_pre(model, pg, s));
    }
  }
  return out;
}

/// Softmax of raw scores over each node's neighborhood (max-subtracted).
inline std::map<std::pair<std::size_t, std::size_t>, double> normalize_attention(
    const std::map<std::pair<std::size_t, std::size_t>, double>& scores) {
  std::map<std::size_t, double> row_max;
  for (const auto& [key, v] : scores) {
    auto [it, inserted] = row_max.emplace(key.first, v);
    if (!inserted) it->second = std::max(it->second, v);
  }
  std::map<std::size_t, double> row_sum;
  for (const auto& [key, v] : scores) row_sum[key.first] += std::exp(v - row_max[key.first]);
  std::map<std::pair<std::size_t, std::size_t>, double> out;
  for (const auto& [key, v] : scores) {
    out[key] = std::exp(v - row_max[key.first]) / row_sum[key.first];
  }
  return out;
}

/// Updated node embeddings v' (n x d_k).
inline Eigen::MatrixXd transformer_conv(const GnnModel& model, const GraphFeatures& features) {
  const PreparedGraph pg = prepare_graph(model, features);
  detail::ForwardCache fc;
  detail::forward(model, pg, fc);
  return fc.updated;
}

struct ScalingFactors {
  double alpha = 1.0;
  double beta = 1.0;
};

inline ScalingFactors predict_scaling(const GnnModel& model, const GraphFeatures& features) {
  const PreparedGraph pg = prepare_graph(model, features);
  detail::ForwardCache fc;
  detail::forward(model, pg, fc);
  return {fc.alpha, fc.beta};
}

// ---------------------------------------------------------------------------
// Training.

struct GnnSample {
  GraphFeatures features;
  double t_sum = 0.0;
  double t_comm = 0.0;
  double t_iter = 0.0;  // measured
};

struct GnnTrainConfig {
  std::size_t epochs = 200;
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t plateau_epochs = 20;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  std::string fingerprint(const GnnConfig& c) const {
    std::string s = "epochs=" + std::to_string(epochs) + ";lr=" + format_lr() +
                    ";batch=" + std::to_string(batch_size) +
                    ";plateau=" + std::to_string(plateau_epochs) +
                    ";seed=" + std::to_string(seed) + ";d_model=" + std::to_string(c.d_model) +
                    ";d_k=" + std::to_string(c.d_k) + ";heads=" + std::to_string(c.heads) +
                    ";global=" + std::to_string(c.use_global_branch) +
                    ";comm=" + std::to_string(c.use_comm_term) +
                    ";symmetric=" + std::to_string(c.symmetric);
    return s;
  }

 private:
  std::string format_lr() const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", learning_rate);
    return buf;
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_loss = std::numeric_limits<double>::quiet_NaN();
  double learning_rate = 0.0;
};

struct GnnTrainResult {
  GnnModel model;
  std::vector<EpochLog> log;
  double initial_loss = 0.0;
};

namespace detail {

inline double predicted_iter(const GnnConfig& c, const ForwardCache& fc, const GnnSample& s) {
  return fc.alpha * s.t_sum + (c.use_comm_term ? fc.beta * s.t_comm : 0.0);
}

}  // namespace detail

/// Mean over samples of ((T_pred - T_iter) / T_iter)^2. When `grad` is given
/// the gradient of that mean is accumulated into it.
inline double gnn_loss(const GnnModel& model, const std::vector<PreparedGraph>& prepared,
                       const std::vector<GnnSample>& samples,
                       const std::vector<std::size_t>& batch, GnnParams* grad = nullptr) {
  double total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  detail::ForwardCache fc;
  for (auto i : batch) {
    const auto& s = samples[i];
    detail::forward(model, prepared[i], fc);
    const double pred = detail::predicted_iter(model.config, fc, s);
    const double rel = (pred - s.t_iter) / s.t_iter;
    const double loss = rel * rel;
    require(std::isfinite(loss), ErrorCode::kNonFinite,
            "non-finite GNN loss at sample " + std::to_string(i));
    total += loss;
    if (grad) {
      const double d_pred = 2.0 * rel / s.t_iter * inv_n;
      const double d_beta = model.config.use_comm_term ? d_pred * s.t_comm : 0.0;
      detail::backward(model, prepared[i], fc, d_pred * s.t_sum, d_beta, *grad);
    }
  }
  return total * inv_n;
}

inline void fit_scalers(GnnModel& model, const std::vector<GnnSample>& samples) {
  require(!samples.empty(), ErrorCode::kInvalidArgument, "no samples to fit scalers");
  const auto& c = model.config;
  auto finish = [](Eigen::VectorXd& mean, Eigen::VectorXd& sq, double n) {
    mean /= n;
    Eigen::VectorXd scale = (sq / n - mean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt();
    for (Eigen::Index i = 0; i < scale.size(); ++i) {
      if (!(scale[i] > 1e-12 * (1.0 + std::abs(mean[i])))) scale[i] = 1.0;
    }
    return scale;
  };
  Eigen::VectorXd nm = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c.d_node)), nsq = nm;
  Eigen::VectorXd ensq = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c.d_edge));
  double n_nodes = 0.0, n_edges = 0.0;
  for (const auto& s : samples) {
    nm += s.features.nodes.colwise().sum().transpose();
    nsq += s.features.nodes.cwiseAbs2().colwise().sum().transpose();
    n_nodes += static_cast<double>(s.features.nodes.rows());
    if (s.features.edges.rows() > 0) {
      ensq += s.features.edges.cwiseAbs2().colwise().sum().transpose();
      n_edges += static_cast<double>(s.features.edges.rows());
    }
  }
  model.node_scaler.scale = finish(nm, nsq, n_nodes);
  model.node_scaler.mean = nm;
  model.edge_scale = Eigen::VectorXd::Ones(ensq.size());
  if (n_edges > 0) {
    for (Eigen::Index i = 0; i < ensq.size(); ++i) {
      const double rms = std::sqrt(ensq[i] / n_edges);
      if (rms > 1e-12) model.edge_scale[i] = rms;
    }
  }
  if (c.use_global_branch) {
    Eigen::VectorXd gm = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c.d_global)), gsq = gm;
    for (const auto& s : samples) {
      require(static_cast<std::size_t>(s.features.globals.size()) == c.d_global,
              ErrorCode::kDimensionMismatch, "global feature width mismatch");
      gm += s.features.globals;
      gsq += s.features.globals.cwiseAbs2();
    }
    model.global_scaler.scale = finish(gm, gsq, static_cast<double>(samples.size()));
    model.global_scaler.mean = gm;
  }
}

/// Adam on the relative squared error of T_iter = alpha T_sum + beta T_comm.
/// Learning rate halves after `plateau_epochs` epochs without improvement
/// of the monitored loss (validation when given, else training). Returns the
/// snapshot with the best monitored loss.
inline GnnTrainResult train_gnn(const std::vector<GnnSample>& train, const GnnConfig& config,
                                const GnnTrainConfig& hyper,
                                const std::vector<GnnSample>& validation = {}) {
  require(!train.empty(), ErrorCode::kInvalidArgument, "GNN training set is empty");
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& s = train[i];
    require(std::isfinite(s.t_sum) && std::isfinite(s.t_comm) && std::isfinite(s.t_iter) &&
                s.t_iter > 0.0 && s.t_sum >= 0.0 && s.t_comm >= 0.0,
            ErrorCode::kNonFinite, "invalid timing in GNN sample " + std::to_string(i));
  }
  GnnTrainResult result;
  GnnModel model = init_gnn(config, hyper.seed);
  fit_scalers(model, train);
  model.fingerprint = hyper.fingerprint(config);

  std::vector<PreparedGraph> prepared, prepared_val;
  for (const auto& s : train) prepared.push_back(prepare_graph(model, s.features));
  for (const auto& s : validation) prepared_val.push_back(prepare_graph(model, s.features));
  std::vector<std::size_t> all(train.size()), all_val(validation.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::iota(all_val.begin(), all_val.end(), std::size_t{0});

  auto monitor = [&](const GnnModel& m, double train_loss) {
    return validation.empty() ? train_loss : gnn_loss(m, prepared_val, validation, all_val);
  };

  std::vector<double> theta = model.params.flatten();
  std::vector<double> m1(theta.size(), 0.0), m2(theta.size(), 0.0);
  double lr = hyper.learning_rate;
  std::uint64_t step = 0;
  result.initial_loss = gnn_loss(model, prepared, train, all);
  double best = monitor(model, result.initial_loss);
  GnnModel best_model = model;
  std::size_t since_best = 0;
  Rng shuffle_rng = make_rng(hyper.seed, "shuffle");
  const std::size_t bs = std::max<std::size_t>(1, std::min(hyper.batch_size, train.size()));

  for (std::size_t epoch = 1; epoch <= hyper.epochs; ++epoch) {
    std::vector<std::size_t> order = all;
    shuffle_in_place(order, shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::vector<std::size_t> batch(
          order.begin() + static_cast<std::ptrdiff_t>(start),
          order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + bs)));
      GnnParams grad = model.params.zeros_like();
      gnn_loss(model, prepared, train, batch, &grad);
      const std::vector<double> g = grad.flatten();
      ++step;
      const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
      for (std::size_t k = 0; k < theta.size(); ++k) {
        m1[k] = hyper.beta1 * m1[k] + (1.0 - hyper.beta1) * g[k];
        m2[k] = hyper.beta2 * m2[k] + (1.0 - hyper.beta2) * g[k] * g[k];
        theta[k] -= lr * (m1[k] / c1) / (std::sqrt(m2[k] / c2) + hyper.adam_eps);
      }
      model.params.unflatten(theta);
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = gnn_loss(model, prepared, train, all);
    if (!validation.empty()) entry.validation_loss = gnn_loss(model, prepared_val, validation, all_val);
    entry.learning_rate = lr;
    result.log.push_back(entry);

    const double current = validation.empty() ? entry.train_loss : entry.validation_loss;
    if (current < best) {
      best = current;
      best_model = model;
      since_best = 0;
    } else if (++since_best >= hyper.plateau_epochs) {
      lr *= 0.5;
      since_best = 0;
    }
  }
  result.model = std::move(best_model);
  return result;
}

/// Largest relative gap between analytic gradients and central finite
/// differences of the loss on one sample. The relative error of a component
/// is |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

inline GradCheckResult grad_check(const GnnModel& model, const GnnSample& sample, double epsilon) {
  require(epsilon >= 1e-7 && epsilon <= 1e-3, ErrorCode::kInvalidArgument,
          "epsilon must lie in [1e-7, 1e-3]");
  const std::vector<GnnSample> samples = {sample};
  const std::vector<std::size_t> batch = {0};
  const std::vector<PreparedGraph> prepared = {prepare_graph(model, sample.features)};
  GnnParams grad = model.params.zeros_like();
  gnn_loss(model, prepared, samples, batch, &grad);
  GradCheckResult r;
  r.analytic = grad.flatten();
  std::vector<double> theta = model.params.flatten();
  GnnModel probe = model;
  r.numeric.resize(theta.size());
  for (std::size_t k = 0; k < theta.size(); ++k) {
    const double orig = theta[k];
    theta[k] = orig + epsilon;
    probe.params.unflatten(theta);
    const double up = gnn_loss(probe, prepared, samples, batch);
    theta[k] = orig - epsilon;
    probe.params.unflatten(theta);
    const double down = gnn_loss(probe, prepared, samples, batch);
    theta[k] = orig;
    r.numeric[k] = (up - down) / (2.0 * epsilon);
    const double abs_err = std::abs(r.analytic[k] - r.numeric[k]);
    const double denom = std::max({std::abs(r.analytic[k]), std::abs(r.numeric[k]), 1e-6});
    r.max_absolute_error = std::max(r.max_absolute_error, abs_err);
    r.max_relative_error = std::max(r.max_relative_error, abs_err / denom);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Artifacts.

inline constexpr std::string_view kGnnFormat = "dlperf.gnn";
inline constexpr int kGnnVersion = 1;

namespace detail {

template <typename T>
nlohmann::json tensor_json(const T& t) {
  return {{"rows", t.rows()}, {"cols", t.cols()},
          {"data", std::vector<double>(t.data(), t.data() + t.size())}};
}

template <typename T>
void tensor_from_json(const nlohmann::json& j, T& t, const std::string& name) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  require(rows == t.rows() && cols == t.cols() && static_cast<Eigen::Index>(data.size()) == t.size(),
          ErrorCode::kSchema, "tensor '" + name + "' has the wrong shape");
  std::copy(data.begin(), data.end(), t.data());
}

}  // namespace detail

inline std::string serialize_gnn(const GnnModel& m) {
  const auto& c = m.config;
  nlohmann::json tensors = nlohmann::json::object();
  m.params.visit([&](const std::string& name, const auto& t) { tensors[name] = detail::tensor_json(t); });
  auto vec = [](const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  nlohmann::json j = {
      {"format", kGnnFormat},
      {"version", kGnnVersion},
      {"config",
       {{"d_node", c.d_node}, {"d_edge", c.d_edge}, {"d_global", c.d_global},
        {"d_model", c.d_model}, {"d_k", c.d_k}, {"heads", c.heads},
        {"global_hidden", c.global_hidden}, {"head_hidden", c.head_hidden},
        {"input_projection", c.input_projection}, {"symmetric", c.symmetric},
        {"use_global_branch", c.use_global_branch}, {"use_comm_term", c.use_comm_term}}},
      {"node_scaler", {{"mean", vec(m.node_scaler.mean)}, {"scale", vec(m.node_scaler.scale)}}},
      {"global_scaler", {{"mean", vec(m.global_scaler.mean)}, {"scale", vec(m.global_scaler.scale)}}},
      {"edge_scale", vec(m.edge_scale)},
      {"fingerprint", m.fingerprint},
      {"tensors", tensors}};
  return j.dump();
}

inline GnnModel parse_gnn(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kSchema, std::string("malformed GNN artifact: ") + e.what());
  }
  require(j.value("format", "") == kGnnFormat, ErrorCode::kSchema, "not a GNN artifact");
  require(j.value("version", 0) == kGnnVersion, ErrorCode::kSchema, "unsupported GNN version");
  try {
    const auto& jc = j.at("config");
    GnnConfig c;
    c.d_node = jc.at("d_node");
    c.d_edge = jc.at("d_edge");
    c.d_global = jc.at("d_global");
    c.d_model = jc.at("d_model");
    c.d_k = jc.at("d_k");
    c.heads = jc.at("heads");
    c.global_hidden = jc.at("global_hidden");
    c.head_hidden = jc.at("head_hidden");
    c.input_projection = jc.at("input_projection");
    c.symmetric = jc.at("symmetric");
    c.use_global_branch = jc.at("use_global_branch");
    c.use_comm_term = jc.at("use_comm_term");
    GnnModel m = init_gnn(c, 0, InitMode::kZero);
    auto vec = [](const nlohmann::json& a) {
      const auto v = a.get<std::vector<double>>();
      return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    };
    m.node_scaler = {vec(j.at("node_scaler").at("mean")), vec(j.at("node_scaler").at("scale"))};
    m.global_scaler = {vec(j.at("global_scaler").at("mean")), vec(j.at("global_scaler").at("scale"))};
    m.edge_scale = vec(j.at("edge_scale"));
    m.fingerprint = j.value("fingerprint", "");
    require(static_cast<std::size_t>(m.node_scaler.mean.size()) == c.d_node &&
                static_cast<std::size_t>(m.edge_scale.size()) == c.d_edge,
            ErrorCode::kSchema, "scaler shape mismatch");
    const auto& tensors = j.at("tensors");
    m.params.visit([&](const std::string& name, auto& t) {
      require(tensors.contains(name), ErrorCode::kSchema, "missing tensor '" + name + "'");
      detail::tensor_from_json(tensors.at(name), t, name);
    });
    return m;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kSchema, std::string("GNN artifact: ") + e.what());
  }
}

inline std::string format_training_log(const std::vector<EpochLog>& log) {
  std::string out = "epoch,train_loss,validation_loss,learning_rate\n";
  for (const auto& e : log) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", e.epoch, e.train_loss,
                  e.validation_loss, e.learning_rate);
    out += buf;
  }
  return out;
}

}  // namespace dlperf
