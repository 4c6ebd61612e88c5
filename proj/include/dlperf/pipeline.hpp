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

// End-to-end runtime prediction: per-layer regression summed into T_sum,
// ring all-reduce time T_comm, graph-refined scaling factors, and
// T_epoch = I * (alpha T_sum + beta T_comm). Also training orchestration,
// evaluation metrics, ID/OOD splits and ablation variants.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dlperf/comm.hpp"
#include "dlperf/csv.hpp"
#include "dlperf/error.hpp"
#include "dlperf/forest.hpp"
#include "dlperf/gnn.hpp"
#include "dlperf/graph.hpp"
#include "dlperf/layer_cost.hpp"
#include "dlperf/layer_features.hpp"
#include "dlperf/parallel.hpp"
#include "dlperf/rng.hpp"
#include "dlperf/run_config.hpp"
#include "dlperf/synth.hpp"
#include "json.hpp"

namespace dlperf {

// ---------------------------------------------------------------------------
// Stage-tagged errors.

class StageError : public Error {
 public:
  StageError(std::string stage, const Error& cause)
      : Error(cause.code(), "stage " + stage + ": " + strip_code(cause)),
        stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  static std::string strip_code(const Error& e) {
    const std::string msg = e.what();
    const std::string prefix = std::string(to_string(e.code())) + ": ";
    return msg.rfind(prefix, 0) == 0 ? msg.substr(prefix.size()) : msg;
  }

  std::string stage_;
};

template <typename F>
auto in_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(stage, e);
  }
}

// ---------------------------------------------------------------------------
// Prediction.

struct Prediction {
  double t_sum = 0.0;
  double t_comm = 0.0;
  double alpha = 1.0;
  double beta = 1.0;
  double t_iter = 0.0;
  double t_pred = 0.0;  // per epoch
  std::map<std::string, double> layer_times;
};

/// Payload defaults to the graph's gradient volume when the config leaves
/// it at zero.
inline CommConfig effective_comm(const ModelGraph& g, const RunConfig& cfg) {
  CommConfig c = cfg.comm;
  if (c.payload_bits == 0.0) c.payload_bits = static_cast<double>(gradient_payload_bits(g));
  return c;
}

/// Runs the four stages. `gnn == nullptr` is the additive model
/// (alpha = beta = 1). A refiner trained without the communication term
/// also predicts without it, so t_comm is reported as 0.
inline Prediction predict_epoch(const ModelGraph& g, const RunConfig& cfg,
                                const LayerModels& layer_models, const GnnModel* gnn) {
  Prediction p;
  const LayerTimes lt = in_stage("1", [&] {
    validate(g);
    validate(cfg);
    return sum_layer_times(g, layer_models, cfg);
  });
  p.t_sum = lt.total;
  p.layer_times = lt.per_node;
  p.t_comm = in_stage("2", [&] {
    if (gnn && !gnn->config.use_comm_term) return 0.0;
    return allreduce_time(effective_comm(g, cfg));
  });
  if (gnn) {
    const ScalingFactors sf = in_stage("3", [&] {
      return predict_scaling(*gnn, build_gnn_inputs(g, cfg, lt.per_node));
    });
    p.alpha = sf.alpha;
    p.beta = sf.beta;
  }
  in_stage("final", [&] {
    p.t_iter = p.alpha * p.t_sum + p.beta * p.t_comm;
    p.t_pred = static_cast<double>(cfg.iterations_per_epoch) * p.t_iter;
    require(std::isfinite(p.t_pred) && p.t_pred > 0.0, ErrorCode::kNonFinite,
            "predicted epoch time is not a positive finite number");
    return 0;
  });
  return p;
}

inline nlohmann::json prediction_to_json(const Prediction& p) {
  return {{"t_sum_s", p.t_sum},   {"t_comm_s", p.t_comm}, {"alpha", p.alpha},
          {"beta", p.beta},       {"t_iter_s", p.t_iter}, {"t_epoch_s", p.t_pred},
          {"layer_times_s", p.layer_times}};
}

// ---------------------------------------------------------------------------
// Metrics.

struct EvalReport {
  double mre = 0.0;   // percent
  double rmse = 0.0;  // target units
  std::vector<double> per_sample_abs_pct_error;
  std::size_t n = 0;
};

inline EvalReport evaluate(const std::vector<double>& predictions, const std::vector<double>& actuals) {
  require(predictions.size() == actuals.size(), ErrorCode::kLengthMismatch,
          "length mismatch: " + std::to_string(predictions.size()) + " predictions vs " +
              std::to_string(actuals.size()) + " actuals");
  require(!actuals.empty(), ErrorCode::kInvalidArgument, "nothing to evaluate");
  EvalReport r;
  r.n = actuals.size();
  double abs_rel = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < r.n; ++i) {
    require(std::isfinite(actuals[i]) && actuals[i] > 0.0, ErrorCode::kInvalidArgument,
            "actual value " + std::to_string(i) + " must be > 0");
    require(std::isfinite(predictions[i]), ErrorCode::kNonFinite,
            "prediction " + std::to_string(i) + " is not finite");
    const double diff = actuals[i] - predictions[i];
    const double pct = std::abs(diff) / actuals[i] * 100.0;
    r.per_sample_abs_pct_error.push_back(pct);
    abs_rel += pct;
    sq += diff * diff;
  }
  r.mre = abs_rel / static_cast<double>(r.n);
  r.rmse = std::sqrt(sq / static_cast<double>(r.n));
  return r;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  return {{"mre_pct", r.mre}, {"rmse", r.rmse}, {"n", r.n},
          {"abs_pct_errors", r.per_sample_abs_pct_error}};
}

/// Empirical CDF of absolute percentage errors.
inline std::string format_error_cdf(const EvalReport& r) {
  std::vector<double> e = r.per_sample_abs_pct_error;
  std::sort(e.begin(), e.end());
  std::string out = "abs_pct_error,cumulative_fraction\n";
  for (std::size_t i = 0; i < e.size(); ++i) {
    out += format_double(e[i]) + "," +
           format_double(static_cast<double>(i + 1) / static_cast<double>(e.size())) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// ID / OOD splits.

enum class SplitMode { kId, kOod };

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// ID: a seeded 80/20 split of the target family's samples. OOD: train on
/// every other family, test on the target family.
inline Split split_id_ood(const std::vector<std::string>& families, const std::string& target,
                          SplitMode mode, std::uint64_t seed) {
  std::vector<std::size_t> in_target;
  std::set<std::string> distinct;
  for (std::size_t i = 0; i < families.size(); ++i) {
    distinct.insert(families[i]);
    if (families[i] == target) in_target.push_back(i);
  }
  require(!in_target.empty(), ErrorCode::kNotFound, "family '" + target + "' not in dataset");
  Split s;
  if (mode == SplitMode::kOod) {
    require(distinct.size() >= 2, ErrorCode::kInvalidArgument,
            "OOD split needs at least two families");
    for (std::size_t i = 0; i < families.size(); ++i) {
      (families[i] == target ? s.test : s.train).push_back(i);
    }
    return s;
  }
  require(in_target.size() >= 2, ErrorCode::kInvalidArgument,
          "ID split needs at least two samples of the family");
  Rng rng = make_rng(seed, "id-split:" + target);
  shuffle_in_place(in_target, rng);
  const auto n_test = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(in_target.size()))));
  s.test.assign(in_target.begin(), in_target.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.train.assign(in_target.begin() + static_cast<std::ptrdiff_t>(n_test), in_target.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

inline Split split_id_ood(const std::vector<WorkloadSample>& samples, const std::string& target,
                          SplitMode mode, std::uint64_t seed) {
  std::vector<std::string> fam;
  fam.reserve(samples.size());
  for (const auto& s : samples) fam.push_back(s.family);
  return split_id_ood(fam, target, mode, seed);
}

// ---------------------------------------------------------------------------
// Training.

enum class AblationVariant { kFull, kNoComm, kNoMlp, kRandomSampling, kNoGnn };

inline constexpr std::array<std::string_view, 5> kVariantNames = {
    "full", "no_comm", "no_mlp", "random_sampling", "no_gnn"};

inline std::string_view to_string(AblationVariant v) {
  return kVariantNames[static_cast<std::size_t>(v)];
}

inline AblationVariant parse_variant(std::string_view s) {
  for (std::size_t i = 0; i < kVariantNames.size(); ++i) {
    if (kVariantNames[i] == s) return static_cast<AblationVariant>(i);
  }
  fail(ErrorCode::kInvalidArgument, "unknown ablation variant '" + std::string(s) + "'");
}

struct PipelineOptions {
  ForestParams forest;
  GnnConfig gnn;  // d_global and the ablation switches are filled in
  GnnTrainConfig gnn_train;
  // With 2 or more folds, layer times fed to the refiner during training
  // are predicted out of fold, so it sees the regressor error it will meet
  // on new workloads. The default (0) uses in-sample predictions, which
  // measured better on small training sets.
  std::size_t cross_fit_folds = 0;
  // Share of training workloads held back to pick the refiner snapshot.
  // Small training sets overfit badly without it. 0 disables.
  double validation_fraction = 0.2;
  std::size_t threads = 1;
};

struct TrainedPipeline {
  AblationVariant variant = AblationVariant::kFull;
  LayerModels layer_models;
  std::optional<GnnModel> gnn;
  std::vector<EpochLog> gnn_log;

  const GnnModel* refiner() const { return gnn ? &*gnn : nullptr; }
};

using LayerSampleMap = std::map<std::string, std::vector<LayerSample>>;

/// Per-kind layer measurements. Identical layers within one workload are
/// benchmarked once.
inline LayerSampleMap collect_layer_samples(const std::vector<WorkloadSample>& workloads,
                                            const std::vector<std::size_t>& which) {
  LayerSampleMap out;
  for (auto w : which) {
    const auto& ws = workloads[w];
    std::set<std::pair<std::string, std::vector<double>>> seen;
    for (const auto& node : ws.graph.nodes) {
      auto it = ws.per_layer_times.find(node.id);
      if (it == ws.per_layer_times.end()) continue;
      FeatureVector h = assemble_feature_vector(node, ws.cfg);
      if (!seen.emplace(node.kind.key(), h.values).second) continue;
      out[node.kind.key()].push_back({std::move(h), it->second});
    }
  }
  return out;
}

inline LayerModels train_layer_models(const LayerSampleMap& samples, const ForestParams& params,
                                      const RunConfig& schema_cfg) {
  LayerModels models;
  for (const auto& [key, set] : samples) {
    const LayerKind kind = LayerKind::from_key(key);
    models.emplace(key, fit_forest(set, params, feature_names(kind, schema_cfg)));
  }
  return models;
}

namespace detail {

inline std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

// t_l for every node of every workload, predicted by regressors that did
// not see that workload.
inline std::vector<std::map<std::string, double>> cross_fitted_layer_times(
    const std::vector<WorkloadSample>& train, const LayerModels& full_models,
    const PipelineOptions& opt, std::uint64_t seed) {
  const std::size_t n = train.size();
  std::vector<std::map<std::string, double>> out(n);
  std::vector<std::size_t> fold(n, 0);
  const std::size_t folds = opt.cross_fit_folds;
  const bool cross = folds >= 2 && n >= folds;
  if (cross) {
    auto order = iota_n(n);
    Rng rng = make_rng(seed, "cross-fit");
    shuffle_in_place(order, rng);
    for (std::size_t i = 0; i < n; ++i) fold[order[i]] = i % folds;
  }
  const std::size_t rounds = cross ? folds : 1;
  for (std::size_t f = 0; f < rounds; ++f) {
    LayerModels models;
    if (cross) {
      std::vector<std::size_t> in_fold_out;
      for (std::size_t i = 0; i < n; ++i)
        if (fold[i] != f) in_fold_out.push_back(i);
      ForestParams fp = opt.forest;
      fp.seed = stream_seed(opt.forest.seed, "fold", f);
      const auto samples = collect_layer_samples(train, in_fold_out);
      for (const auto& [key, set] : samples) {
        if (set.size() < 2) continue;
        models.emplace(key, fit_forest(set, fp));
      }
      // Kinds too rare to appear outside this fold fall back to the full model.
      for (const auto& [key, m] : full_models) models.emplace(key, m);
    }
    const LayerModels& use = cross ? models : full_models;
    for (std::size_t i = 0; i < n; ++i) {
      if (cross && fold[i] != f) continue;
      out[i] = sum_layer_times(train[i].graph, use, train[i].cfg).per_node;
    }
  }
  return out;
}

}  // namespace detail

inline GnnSample make_gnn_sample(const WorkloadSample& ws, const std::map<std::string, double>& times,
                                 bool use_comm) {
  GnnSample s;
  s.features = build_gnn_inputs(ws.graph, ws.cfg, times);
  for (auto pos : topological_positions(ws.graph)) s.t_sum += times.at(ws.graph.nodes[pos].id);
  s.t_comm = use_comm ? allreduce_time(effective_comm(ws.graph, ws.cfg)) : 0.0;
  s.t_iter = ws.measured_iter_s;
  return s;
}

/// Fits the layer regressors on the workloads' per-layer measurements and,
/// unless the variant is no_gnn, the refiner on whole-workload times.
struct RefinerResult {
  GnnModel model;
  std::vector<EpochLog> log;
};

/// Trains the graph refiner for `variant` on top of already fitted layer
/// regressors. `variant` must not be no_gnn.
inline RefinerResult train_refiner(const std::vector<WorkloadSample>& train,
                                   const LayerModels& layer_models, AblationVariant variant,
                                   const PipelineOptions& opt) {
  require(!train.empty(), ErrorCode::kInvalidArgument, "training set is empty");
  require(variant != AblationVariant::kNoGnn, ErrorCode::kInvalidArgument,
          "the no_gnn variant has no refiner");
  const bool use_comm = variant != AblationVariant::kNoComm;
  std::vector<GnnSample> gnn_train;
  const auto times = detail::cross_fitted_layer_times(train, layer_models, opt, opt.forest.seed);
  for (std::size_t i = 0; i < train.size(); ++i) {
    gnn_train.push_back(make_gnn_sample(train[i], times[i], use_comm));
  }
  GnnConfig gc = opt.gnn;
  gc.d_global = global_feature_dim(train.front().cfg);
  gc.use_comm_term = use_comm;
  gc.use_global_branch = variant != AblationVariant::kNoMlp;

  std::vector<GnnSample> fit, held;
  const auto n_val = static_cast<std::size_t>(
      std::floor(opt.validation_fraction * static_cast<double>(gnn_train.size())));
  if (n_val >= 1 && n_val < gnn_train.size()) {
    Rng rng = make_rng(opt.gnn_train.seed, "validation");
    std::vector<bool> is_val(gnn_train.size(), false);
    for (auto i : sample_without_replacement(gnn_train.size(), n_val, rng)) is_val[i] = true;
    for (std::size_t i = 0; i < gnn_train.size(); ++i) {
      (is_val[i] ? held : fit).push_back(std::move(gnn_train[i]));
    }
  } else {
    fit = std::move(gnn_train);
  }
  GnnTrainResult r = train_gnn(fit, gc, opt.gnn_train, held);
  return {std::move(r.model), std::move(r.log)};
}

inline TrainedPipeline train_pipeline(const std::vector<WorkloadSample>& train,
                                      AblationVariant variant, const PipelineOptions& opt) {
  require(!train.empty(), ErrorCode::kInvalidArgument, "training set is empty");
  TrainedPipeline tp;
  tp.variant = variant;
  PipelineOptions o = opt;
  o.forest.threads = std::max<std::size_t>(o.forest.threads, opt.threads);
  tp.layer_models = in_stage("1", [&] {
    return train_layer_models(collect_layer_samples(train, detail::iota_n(train.size())),
                              o.forest, train.front().cfg);
  });
  if (variant == AblationVariant::kNoGnn) return tp;
  in_stage("3", [&] {
    RefinerResult r = train_refiner(train, tp.layer_models, variant, o);
    tp.gnn = std::move(r.model);
    tp.gnn_log = std::move(r.log);
    return 0;
  });
  return tp;
}

inline std::vector<Prediction> predict_all(const TrainedPipeline& tp,
                                           const std::vector<WorkloadSample>& samples,
                                           std::size_t threads = 1) {
  std::vector<Prediction> out(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    out[i] = predict_epoch(samples[i].graph, samples[i].cfg, tp.layer_models, tp.refiner());
  });
  return out;
}

inline EvalReport evaluate_epochs(const std::vector<Prediction>& preds,
                                  const std::vector<WorkloadSample>& samples) {
  std::vector<double> p, a;
  for (const auto& x : preds) p.push_back(x.t_pred);
  for (const auto& s : samples) a.push_back(s.measured_epoch_s);
  return evaluate(p, a);
}

template <typename T>
std::vector<T> gather(const std::vector<T>& items, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(items[i]);
  return out;
}

/// Selects k training workloads from `pool` (D-optimal, or uniform for
/// random_sampling; k equal to the pool keeps everything), trains the
/// variant and evaluates epoch-time predictions on `test`.
inline EvalReport run_ablation(AblationVariant variant, const std::vector<WorkloadSample>& pool,
                               const std::vector<WorkloadSample>& test, std::size_t k,
                               std::uint64_t seed, const PipelineOptions& base = {}) {
  require(!pool.empty() && !test.empty(), ErrorCode::kInvalidArgument,
          "ablation needs training and test workloads");
  const Sampler sampler = k >= pool.size() ? Sampler::kFull
                          : variant == AblationVariant::kRandomSampling ? Sampler::kRandom
                                                                        : Sampler::kDOptimal;
  const auto sel = select_configs(factors_of_all(pool), sampler, k, stream_seed(seed, "sampler"));
  PipelineOptions opt = base;
  opt.forest.seed = stream_seed(seed, "forest");
  opt.gnn_train.seed = stream_seed(seed, "gnn");
  const TrainedPipeline tp = train_pipeline(gather(pool, sel.indices), variant, opt);
  return evaluate_epochs(predict_all(tp, test, opt.threads), test);
}

}  // namespace dlperf
