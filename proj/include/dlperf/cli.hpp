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

// The `dlperf` command line. Exit status: 0 on success, 1 on usage errors
// (usage text on stderr), 2 on runtime failures with a stage-tagged message.

#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dlperf/comm.hpp"
#include "dlperf/csv.hpp"
#include "dlperf/design.hpp"
#include "dlperf/error.hpp"
#include "dlperf/gnn.hpp"
#include "dlperf/graph.hpp"
#include "dlperf/layer_cost.hpp"
#include "dlperf/pipeline.hpp"
#include "dlperf/run_config.hpp"
#include "dlperf/synth.hpp"
#include "json.hpp"

namespace dlperf::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

inline constexpr const char* kSeedEnv = "SCALEDL_SEED";

/// Thrown for problems the user fixes by changing the command line.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct Context {
  std::ostream& out;
  std::ostream& err;
  bool verbose = false;
  std::optional<std::uint64_t> seed_flag;
  std::size_t threads = 1;

  void progress(const std::string& stage, const std::string& message) const {
    if (verbose) err << "[stage " << stage << "] " << message << '\n';
  }

  // The flag wins over the environment; neither gives seed 0.
  std::uint64_t seed() const {
    if (seed_flag) return *seed_flag;
    const char* env = std::getenv(kSeedEnv);
    if (env == nullptr || *env == '\0') return 0;
    const std::string text(env);
    if (text.find_first_not_of("0123456789") != std::string::npos || text.size() > 19) {
      throw UsageError(std::string(kSeedEnv) + " must be a non-negative integer, got '" + text + "'");
    }
    return std::stoull(text);
  }
};

inline void emit(const Context& ctx, const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    ctx.out << text;
    ctx.out.flush();
    return;
  }
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  write_file(path, text);
}

inline std::string dump(const nlohmann::json& j) { return j.dump(2) + "\n"; }

inline IngestResult load_dataset(const Context& ctx, const std::string& path) {
  IngestResult r = ingest_measurements(read_file(path), std::filesystem::path(path).parent_path());
  for (const auto& w : r.warnings) ctx.err << "warning: " << path << ": " << w << '\n';
  require(!r.samples.empty(), ErrorCode::kInvalidArgument, "dataset '" + path + "' has no rows");
  ctx.progress("load", "read " + std::to_string(r.samples.size()) + " workloads from " + path);
  return r;
}

struct ForestFlags {
  std::size_t trees = 100;
  std::size_t max_depth = 12;
  std::size_t min_leaf = 2;
  std::size_t max_features = 0;
  bool no_bootstrap = false;

  void attach(CLI::App* sub) {
    sub->add_option("--trees", trees, "Trees per forest")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--max-depth", max_depth, "Maximum tree depth")->capture_default_str();
    sub->add_option("--min-leaf", min_leaf, "Minimum samples per leaf")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    sub->add_option("--max-features", max_features, "Features tried per split (0: ceil(sqrt(d)))")
        ->capture_default_str();
    sub->add_flag("--no-bootstrap", no_bootstrap, "Fit every tree on the full sample set");
  }

  ForestParams params(std::uint64_t seed, std::size_t threads) const {
    ForestParams p;
    p.n_trees = trees;
    p.max_depth = max_depth;
    p.min_samples_leaf = min_leaf;
    p.max_features = max_features;
    p.bootstrap = !no_bootstrap;
    p.seed = stream_seed(seed, "forest");
    p.threads = threads;
    return p;
  }
};

struct GnnFlags {
  std::size_t epochs = 200;
  double learning_rate = 1e-3;
  std::size_t batch_size = 16;
  std::size_t folds = 0;
  double validation_fraction = 0.2;

  void attach(CLI::App* sub) {
    sub->add_option("--epochs", epochs, "Refiner training epochs")->capture_default_str();
    sub->add_option("--learning-rate", learning_rate, "Initial Adam learning rate")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    sub->add_option("--batch-size", batch_size, "Graphs per optimizer step")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    sub->add_option("--folds", folds, "Cross-fitting folds for refiner inputs (0 or 1: in-sample)")
        ->capture_default_str();
    sub->add_option("--validation-fraction", validation_fraction,
                    "Share of workloads held out to pick the refiner snapshot")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 0.9));
  }

  void apply(PipelineOptions& opt, std::uint64_t seed) const {
    opt.gnn_train.epochs = epochs;
    opt.gnn_train.learning_rate = learning_rate;
    opt.gnn_train.batch_size = batch_size;
    opt.gnn_train.seed = stream_seed(seed, "gnn");
    opt.cross_fit_folds = folds;
    opt.validation_fraction = validation_fraction;
  }
};

// Reads one numeric column from a delimited file. A file with a single
// column is accepted whatever its header says.
inline std::vector<double> read_column(const std::string& path, const std::string& column) {
  const CsvTable t = parse_csv(read_file(path));
  std::size_t c = t.column(column);
  if (c == CsvTable::npos) {
    require(t.header.size() == 1, ErrorCode::kSchema,
            "'" + path + "' has no column '" + column + "'");
    c = 0;
  }
  std::vector<double> v;
  v.reserve(t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    v.push_back(parse_double(t.rows[r][c], path + " row " + std::to_string(r + 1)));
  }
  return v;
}

inline std::string predictions_csv(const std::vector<WorkloadSample>& samples,
                                   const std::vector<Prediction>& preds) {
  CsvTable t;
  t.header = {"family", "config_index", "t_sum_s", "t_comm_s", "alpha",
              "beta",   "t_iter_s",     "t_epoch_s"};
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& p = preds[i];
    t.rows.push_back({samples[i].family, std::to_string(samples[i].config_index),
                      format_double(p.t_sum), format_double(p.t_comm), format_double(p.alpha),
                      format_double(p.beta), format_double(p.t_iter), format_double(p.t_pred)});
  }
  return format_csv(t);
}

// ---------------------------------------------------------------------------
// Subcommands. Each registers its flags and returns the action to run.

using Action = std::function<void(Context&)>;

inline void add_seed(CLI::App* sub, Context& ctx) {
  sub->add_option("--seed", ctx.seed_flag,
                  std::string("Root seed (default: $") + kSeedEnv + ", else 0)");
}

inline void add_threads(CLI::App* sub, Context& ctx) {
  sub->add_option("--threads", ctx.threads, "Worker threads (results do not depend on it)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
}

inline Action register_gen(CLI::App* sub, Context& ctx) {
  struct Flags {
    std::string out;
    std::vector<std::string> families;
    std::size_t count = 200;
    std::string sampler = "full";
    std::size_t budget = 0;
    std::string oracle;
    std::vector<std::int64_t> workers;
  };
  auto f = std::make_shared<Flags>();
  sub->add_option("--out", f->out, "Output directory (dataset.csv, graphs/, layers/)")->required();
  sub->add_option("--family", f->families, "Architecture family; repeatable (default: all five)")
      ->check(CLI::IsMember(std::vector<std::string>(kFamilies.begin(), kFamilies.end())));
  sub->add_option("--count", f->count, "Grid configurations drawn per family")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  sub->add_option("--sampler", f->sampler, "Which drawn configurations to benchmark")
      ->capture_default_str()
      ->check(CLI::IsMember({"full", "random", "d-optimal"}));
  sub->add_option("--budget", f->budget, "Configurations kept per family by random/d-optimal");
  sub->add_option("--oracle", f->oracle, "Oracle parameter file, noise seed included (default parameters otherwise)");
  sub->add_option("--workers", f->workers, "Worker counts in the grid (default 1 2 4 8)");
  add_seed(sub, ctx);
  return [f](Context& c) {
    const Sampler sampler = parse_sampler(f->sampler);
    if (sampler != Sampler::kFull && f->budget == 0) {
      throw UsageError("--budget is required with --sampler " + f->sampler);
    }
    const std::uint64_t seed = c.seed();
    OracleParams op;
    if (f->oracle.empty()) {
      op.seed = stream_seed(seed, "oracle");
    } else {
      op = parse_oracle_params(read_file(f->oracle));
    }
    GridSpec spec;
    if (!f->workers.empty()) spec.workers = f->workers;
    std::vector<std::string> families = f->families;
    if (families.empty()) families.assign(kFamilies.begin(), kFamilies.end());

    std::vector<WorkloadSample> all;
    for (const auto& fam : families) {
      const auto grid = subsample_grid(full_grid(spec, fam, seed), f->count, seed);
      const std::size_t k = sampler == Sampler::kFull ? grid.size() : f->budget;
      c.progress("gen", fam + ": benchmarking " + std::to_string(k) + " of " +
                            std::to_string(grid.size()) + " configurations");
      auto samples = collect_dataset(grid, spec, sampler, k, stream_seed(seed, "sampler"), op);
      all.insert(all.end(), std::make_move_iterator(samples.begin()),
                 std::make_move_iterator(samples.end()));
    }
    const std::filesystem::path dir(f->out);
    write_file((dir / "dataset.csv").string(), write_dataset(all, dir));
    write_file((dir / "oracle.json").string(), dump(oracle_to_json(op)));
    const auto layers = collect_layer_samples(all, ::dlperf::detail::iota_n(all.size()));
    std::filesystem::create_directories(dir / "layers");
    for (const auto& [key, set] : layers) {
      const LayerKind kind = LayerKind::from_key(key);
      const std::string name = layer_model_filename(kind);
      write_file((dir / "layers" / (name.substr(0, name.size() - 5) + ".csv")).string(),
                 format_layer_samples(set, feature_names(kind, all.front().cfg)));
    }
    c.progress("gen", "wrote " + std::to_string(all.size()) + " workloads to " + dir.string());
  };
}

inline Action register_design(CLI::App* sub, Context& ctx) {
  struct Flags {
    std::string candidates;
    std::size_t budget = 0;
    std::string out;
    std::size_t restarts = 5;
    std::optional<double> ridge;
    bool standardize = false;
    std::size_t max_iterations = 0;
  };
  auto f = std::make_shared<Flags>();
  sub->add_option("--candidates", f->candidates, "Candidate CSV, one numeric row per configuration")
      ->required();
  sub->add_option("--budget", f->budget, "Number of rows to select (k)")->required();
  sub->add_option("--out", f->out, "Selection output (default: stdout)");
  sub->add_option("--restarts", f->restarts, "Exchange restarts")->capture_default_str();
  sub->add_option("--ridge", f->ridge, "Fixed ridge (default: automatic)");
  sub->add_flag("--standardize", f->standardize,
                "Center and scale columns first; constant columns are dropped");
  sub->add_option("--max-iterations", f->max_iterations, "Exchange cap per restart (0: 10*m*k)")
      ->capture_default_str();
  add_seed(sub, ctx);
  return [f](Context& c) {
    const CsvTable t = parse_csv(read_file(f->candidates));
    require(!t.rows.empty(), ErrorCode::kInvalidArgument, "candidate file has no rows");
    Eigen::MatrixXd x(static_cast<Eigen::Index>(t.rows.size()),
                      static_cast<Eigen::Index>(t.header.size()));
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      for (std::size_t col = 0; col < t.header.size(); ++col) {
        x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(col)) =
            parse_double(t.rows[r][col], "row " + std::to_string(r + 1));
      }
    }
    std::vector<std::string> columns = t.header;
    DesignProblem p;
    if (f->standardize) {
      const StandardizedRows s = standardize_columns(x);
      p.candidates = s.rows;
      columns.clear();
      for (auto k : s.kept_columns) columns.push_back(t.header[k]);
    } else {
      p.candidates = x;
    }
    p.budget = f->budget;
    p.ridge = f->ridge;
    FedorovOptions opt;
    opt.restarts = f->restarts;
    opt.seed = c.seed();
    opt.max_iterations = f->max_iterations;
    c.progress("design", "selecting " + std::to_string(p.budget) + " of " +
                             std::to_string(p.m()) + " candidates, d=" + std::to_string(p.d()));
    const DesignSelection sel = fedorov_exchange(p, opt);
    nlohmann::json j = {{"format", "dlperf.design"}, {"version", 1},
                        {"selected", sel.selected},  {"log_det", sel.log_det},
                        {"ridge", sel.ridge},        {"iterations", sel.iterations},
                        {"best_restart", sel.best_restart}, {"columns", columns}};
    emit(c, f->out, dump(j));
  };
}

inline Action register_train_layer(CLI::App* sub, Context& ctx) {
  struct Flags {
    std::vector<std::string> samples;
    std::string dataset;
    std::string out;
    ForestFlags forest;
  };
  auto f = std::make_shared<Flags>();
  auto* s_opt = sub->add_option("--samples", f->samples, "Layer-sample CSV, one kind per file; repeatable");
  auto* d_opt = sub->add_option("--dataset", f->dataset, "Dataset file with per-layer times");
  s_opt->excludes(d_opt);
  sub->add_option("--out", f->out, "Directory for the per-kind model artifacts")->required();
  f->forest.attach(sub);
  add_seed(sub, ctx);
  add_threads(sub, ctx);
  return [f](Context& c) {
    if (f->samples.empty() && f->dataset.empty()) {
      throw UsageError("one of --samples or --dataset is required");
    }
    const ForestParams fp = f->forest.params(c.seed(), c.threads);
    LayerModels models;
    if (!f->dataset.empty()) {
      const auto data = load_dataset(c, f->dataset).samples;
      const auto samples = collect_layer_samples(data, ::dlperf::detail::iota_n(data.size()));
      require(!samples.empty(), ErrorCode::kInvalidArgument,
              "dataset '" + f->dataset + "' has no per-layer times");
      models = train_layer_models(samples, fp, data.front().cfg);
    } else {
      for (const auto& path : f->samples) {
        LayerSampleSet set;
        try {
          set = parse_layer_samples(read_file(path));
        } catch (const Error& e) {
          fail(e.code(), path + ": " + e.what());
        }
        const std::string key = set.kind.key();
        require(!models.count(key), ErrorCode::kInvalidArgument,
                "kind " + key + " appears in more than one sample file");
        models.emplace(key, fit_forest(set.samples, fp, set.feature_names));
      }
    }
    for (const auto& [key, m] : models) {
      c.progress("1", key + ": " + std::to_string(m.n_trees()) + " trees");
    }
    save_layer_models(models, f->out);
  };
}

inline Action register_train_gnn(CLI::App* sub, Context& ctx) {
  struct Flags {
    std::string dataset;
    std::string layer_models;
    std::string out;
    std::string log;
    std::string variant = "full";
    GnnFlags gnn;
  };
  auto f = std::make_shared<Flags>();
  sub->add_option("--dataset", f->dataset, "Training dataset file")->required();
  sub->add_option("--layer-models", f->layer_models, "Directory written by train-layer")->required();
  sub->add_option("--out", f->out, "Refiner artifact path")->required();
  sub->add_option("--log", f->log, "Per-epoch training log (CSV)");
  sub->add_option("--variant", f->variant, "Refiner variant")
      ->capture_default_str()
      ->check(CLI::IsMember({"full", "no_comm", "no_mlp"}));
  f->gnn.attach(sub);
  add_seed(sub, ctx);
  add_threads(sub, ctx);
  return [f](Context& c) {
    const std::uint64_t seed = c.seed();
    const auto data = load_dataset(c, f->dataset).samples;
    const LayerModels models = load_layer_models(f->layer_models);
    PipelineOptions opt;
    // Fold regressors reuse the hyperparameters of the supplied models.
    opt.forest = models.begin()->second.forest.params();
    opt.forest.seed = stream_seed(seed, "forest");
    opt.forest.threads = c.threads;
    opt.threads = c.threads;
    f->gnn.apply(opt, seed);
    c.progress("3", "training the " + f->variant + " refiner on " + std::to_string(data.size()) +
                        " workloads");
    const RefinerResult r = in_stage("3", [&] {
      return train_refiner(data, models, parse_variant(f->variant), opt);
    });
    if (!r.log.empty()) {
      c.progress("3", "final train loss " + format_double(r.log.back().train_loss));
    }
    write_file(f->out, serialize_gnn(r.model));
    if (!f->log.empty()) emit(c, f->log, format_training_log(r.log));
  };
}

inline Action register_predict(CLI::App* sub, Context& ctx) {
  struct Flags {
    std::string graph;
    std::string config;
    std::string dataset;
    std::string layer_models;
    std::string gnn;
    std::string out;
  };
  auto f = std::make_shared<Flags>();
  auto* g_opt = sub->add_option("--graph", f->graph, "Model-graph file");
  auto* c_opt = sub->add_option("--config", f->config, "Run-config file");
  auto* d_opt = sub->add_option("--dataset", f->dataset, "Predict every workload of a dataset file");
  g_opt->needs(c_opt);
  c_opt->needs(g_opt);
  d_opt->excludes(g_opt);
  sub->add_option("--layer-models", f->layer_models, "Directory written by train-layer")->required();
  sub->add_option("--gnn", f->gnn, "Refiner artifact (omitted: alpha = beta = 1)");
  sub->add_option("--out", f->out, "Output path (default: stdout)");
  add_threads(sub, ctx);
  return [f](Context& c) {
    if (f->dataset.empty() && f->graph.empty()) {
      throw UsageError("either --graph with --config, or --dataset, is required");
    }
    const LayerModels models = load_layer_models(f->layer_models);
    std::optional<GnnModel> gnn;
    if (!f->gnn.empty()) gnn = parse_gnn(read_file(f->gnn));
    const GnnModel* refiner = gnn ? &*gnn : nullptr;
    if (!f->dataset.empty()) {
      const auto data = load_dataset(c, f->dataset).samples;
      std::vector<Prediction> preds(data.size());
      parallel_for(data.size(), c.threads, [&](std::size_t i) {
        preds[i] = predict_epoch(data[i].graph, data[i].cfg, models, refiner);
      });
      c.progress("final", "predicted " + std::to_string(preds.size()) + " workloads");
      emit(c, f->out, predictions_csv(data, preds));
      return;
    }
    const ModelGraph g = parse_model_graph(read_file(f->graph));
    const RunConfig cfg = parse_run_config(read_file(f->config));
    const Prediction p = predict_epoch(g, cfg, models, refiner);
    c.progress("final", "T_epoch = " + format_double(p.t_pred) + " s");
    emit(c, f->out, dump(prediction_to_json(p)));
  };
}

inline Action register_eval(CLI::App* sub, Context& ctx) {
  (void)ctx;
  struct Flags {
    std::string predictions;
    std::string actual;
    std::string pred_column = "t_epoch_s";
    std::string actual_column = "measured_epoch_s";
    std::string out;
    std::string cdf;
  };
  auto f = std::make_shared<Flags>();
  sub->add_option("--predictions", f->predictions, "CSV with predicted values")->required();
  sub->add_option("--actual", f->actual, "CSV with measured values")->required();
  sub->add_option("--pred-column", f->pred_column, "Prediction column")->capture_default_str();
  sub->add_option("--actual-column", f->actual_column, "Measurement column")->capture_default_str();
  sub->add_option("--out", f->out, "Report path (default: stdout)");
  sub->add_option("--cdf", f->cdf, "Also write the error CDF as CSV");
  return [f](Context& c) {
    const auto pred = read_column(f->predictions, f->pred_column);
    const auto actual = read_column(f->actual, f->actual_column);
    if (pred.size() != actual.size()) {
      fail(ErrorCode::kLengthMismatch,
           std::to_string(pred.size()) + " predictions in '" +
               f->predictions + "' vs " + std::to_string(actual.size()) + " values in '" +
               f->actual + "'");
    }
    const EvalReport r = evaluate(pred, actual);
    c.progress("eval", "MRE " + format_double(r.mre) + "% over " + std::to_string(r.n));
    emit(c, f->out, dump(report_to_json(r)));
    if (!f->cdf.empty()) emit(c, f->cdf, format_error_cdf(r));
  };
}

inline Action register_ablate(CLI::App* sub, Context& ctx) {
  struct Flags {
    std::string dataset;
    std::string test_dataset;
    std::string split = "id";
    std::string target;
    std::vector<std::string> variants;
    std::size_t budget = 0;
    std::string out;
    ForestFlags forest;
    GnnFlags gnn;
  };
  auto f = std::make_shared<Flags>();
  sub->add_option("--dataset", f->dataset, "Workload pool")->required();
  sub->add_option("--test-dataset", f->test_dataset, "Held-out workloads (otherwise split --dataset)");
  sub->add_option("--split", f->split, "Split of --dataset when no test set is given")
      ->capture_default_str()
      ->check(CLI::IsMember({"id", "ood"}));
  sub->add_option("--target", f->target, "Family used as the test side of the split");
  sub->add_option("--variant", f->variants, "Variant to run; repeatable (default: all)")
      ->check(CLI::IsMember(std::vector<std::string>(kVariantNames.begin(), kVariantNames.end())));
  sub->add_option("--budget", f->budget, "Training configurations selected (0: all)")
      ->capture_default_str();
  sub->add_option("--out", f->out, "Report path (default: stdout)");
  f->forest.attach(sub);
  f->gnn.attach(sub);
  add_seed(sub, ctx);
  add_threads(sub, ctx);
  return [f](Context& c) {
    const std::uint64_t seed = c.seed();
    auto pool = load_dataset(c, f->dataset).samples;
    std::vector<WorkloadSample> test;
    if (!f->test_dataset.empty()) {
      test = load_dataset(c, f->test_dataset).samples;
    } else {
      if (f->target.empty()) throw UsageError("--target is required without --test-dataset");
      const Split s = split_id_ood(pool, f->target, f->split == "ood" ? SplitMode::kOod : SplitMode::kId,
                                   seed);
      test = gather(pool, s.test);
      pool = gather(pool, s.train);
      c.progress("split", std::to_string(pool.size()) + " train / " + std::to_string(test.size()) +
                              " test");
    }
    std::vector<std::string> variants = f->variants;
    if (variants.empty()) variants.assign(kVariantNames.begin(), kVariantNames.end());
    PipelineOptions opt;
    opt.forest = f->forest.params(seed, c.threads);
    opt.threads = c.threads;
    f->gnn.apply(opt, seed);
    const std::size_t k = f->budget == 0 ? pool.size() : f->budget;
    nlohmann::json j = {{"format", "dlperf.ablation"}, {"train", pool.size()},
                        {"test", test.size()},         {"budget", k},
                        {"seed", seed},                {"variants", nlohmann::json::object()}};
    for (const auto& name : variants) {
      c.progress(name, "training and evaluating");
      const EvalReport r = run_ablation(parse_variant(name), pool, test, k, seed, opt);
      j["variants"][name] = {{"mre_pct", r.mre}, {"rmse", r.rmse}, {"n", r.n}};
      c.progress(name, "MRE " + format_double(r.mre) + "%");
    }
    emit(c, f->out, dump(j));
  };
}

inline Action register_calibrate(CLI::App* sub, Context& ctx) {
  (void)ctx;
  struct Flags {
    std::string calibration;
    std::string config;
    std::string out;
  };
  auto f = std::make_shared<Flags>();
  sub->add_option("--calibration", f->calibration, "Latency samples file")->required();
  sub->add_option("--config", f->config, "Run config to update with the calibrated link");
  sub->add_option("--out", f->out, "Output path (default: stdout)");
  return [f](Context& c) {
    const LatencyCalibration cal = load_latency_calibration(read_file(f->calibration));
    c.progress("comm", "median of " + std::to_string(cal.n_samples) + " samples: " +
                           format_double(cal.latency_s) + " s");
    if (f->config.empty()) {
      nlohmann::json j = {{"latency_s", cal.latency_s}, {"n_samples", cal.n_samples}};
      if (cal.bandwidth_bps) j["bandwidth_bps"] = *cal.bandwidth_bps;
      emit(c, f->out, dump(j));
      return;
    }
    RunConfig cfg = parse_run_config(read_file(f->config));
    cfg.comm.latency_s = cal.latency_s;
    if (cal.bandwidth_bps) cfg.comm.bandwidth_bps = *cal.bandwidth_bps;
    validate(cfg);
    emit(c, f->out, dump(config_to_json(cfg)));
  };
}

// Library stage errors already name their stage; anything else is tagged
// with the subcommand.
inline std::string tag_message(const std::string& stage, const std::exception& e) {
  if (dynamic_cast<const StageError*>(&e) != nullptr) return e.what();
  return "stage " + stage + ": " + e.what();
}

}  // namespace detail

/// Runs one command line. `argv[0]` is the program name.
inline int run(const std::vector<std::string>& argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  detail::Context ctx{out, err, false, std::nullopt, 1};
  CLI::App app{"Predicts per-epoch training time of data-parallel DNN workloads.", "dlperf"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  // Accepted before the subcommand and after it.
  app.add_flag("--verbose,-v", ctx.verbose, "Stage-tagged progress on stderr");

  struct Entry {
    CLI::App* sub;
    detail::Action action;
  };
  std::vector<Entry> entries;
  auto add = [&](const char* name, const char* help, auto registrar) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_flag("--verbose,-v", ctx.verbose, "Stage-tagged progress on stderr");
    entries.push_back({sub, registrar(sub, ctx)});
  };
  add("gen", "Generate a synthetic benchmark dataset with the roofline oracle", detail::register_gen);
  add("design", "Select a D-optimal subset of candidate configurations", detail::register_design);
  add("train-layer", "Fit the per-kind layer time regressors", detail::register_train_layer);
  add("train-gnn", "Train the graph refiner producing alpha and beta", detail::register_train_gnn);
  add("predict", "Predict iteration and epoch time", detail::register_predict);
  add("eval", "Compute MRE and RMSE of predictions against measurements", detail::register_eval);
  add("ablate", "Train and evaluate pipeline variants", detail::register_ablate);
  add("calibrate-comm", "Estimate all-reduce latency from measured samples",
      detail::register_calibrate);

  std::vector<std::string> args(argv.rbegin(), argv.rend());
  if (!args.empty()) args.pop_back();  // program name
  try {
    app.parse(args);
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    CLI::App* failing = &app;
    for (const auto& en : entries) {
      if (en.sub->parsed()) failing = en.sub;
    }
    if (e.get_exit_code() == 0) {  // --help, at top level or on a subcommand
      out << failing->help();
      return kExitOk;
    }
    err << "error: " << e.what() << "\n\n" << failing->help();
    return kExitUsage;
  }

  for (auto& en : entries) {
    if (!en.sub->parsed()) continue;
    const std::string name = en.sub->get_name();
    try {
      en.action(ctx);
    } catch (const UsageError& e) {
      err << "error: " << e.what() << "\n\n" << en.sub->help();
      return kExitUsage;
    } catch (const std::exception& e) {
      err << "error: " << detail::tag_message(name, e) << '\n';
      return kExitRuntime;
    }
    return kExitOk;
  }
  return kExitUsage;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace dlperf::cli
