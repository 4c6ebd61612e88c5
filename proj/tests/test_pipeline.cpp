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

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "dlperf/pipeline.hpp"
#include "test_util.hpp"

namespace dlperf {
namespace {

std::vector<WorkloadSample> oracle_set(const std::string& family, std::size_t count, std::uint64_t seed,
                                       std::vector<std::int64_t> workers = {1, 2, 4, 8}) {
  GridSpec spec;
  spec.workers = std::move(workers);
  OracleParams op;
  op.fusion_discount = 0.3;
  op.congestion = 1.15;
  op.sigma = 0.03;
  op.seed = 100 + seed;
  return run_oracle(subsample_grid(full_grid(spec, family, seed), count, seed), spec, op);
}

PipelineOptions quick_options() {
  PipelineOptions o;
  o.forest.n_trees = 20;
  o.gnn_train.epochs = 15;
  return o;
}

// Shared small training run; building it once keeps the suite fast.
struct Fixture {
  std::vector<WorkloadSample> train, test;
  TrainedPipeline full;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    auto data = oracle_set("gpt2-like", 50, 1);
    x.train.assign(data.begin(), data.begin() + 40);
    x.test.assign(data.begin() + 40, data.end());
    x.full = train_pipeline(x.train, AblationVariant::kFull, quick_options());
    return x;
  }();
  return f;
}

void expect_identities(const Prediction& p, std::int64_t iterations) {
  EXPECT_NEAR(p.t_iter, p.alpha * p.t_sum + p.beta * p.t_comm, 1e-12 * p.t_iter);
  EXPECT_NEAR(p.t_pred, static_cast<double>(iterations) * p.t_iter, 1e-12 * p.t_pred);
}

TEST(PredictEpoch, IdentityCases) {
  const auto& fx = fixture();
  WorkloadSample ws = fx.test.front();
  ws.cfg.comm.n_workers = 1;
  ws.cfg.iterations_per_epoch = 1;
  GnnConfig c;
  c.d_global = global_feature_dim(ws.cfg);
  const GnnModel identity = init_gnn(c, 3);
  const auto p1 = predict_epoch(ws.graph, ws.cfg, fx.full.layer_models, &identity);
  EXPECT_EQ(p1.alpha, 1.0);
  EXPECT_EQ(p1.beta, 1.0);
  EXPECT_EQ(p1.t_comm, 0.0);
  EXPECT_EQ(p1.t_pred, p1.t_sum);
  ws.cfg.iterations_per_epoch = 10;
  const auto p10 = predict_epoch(ws.graph, ws.cfg, fx.full.layer_models, &identity);
  EXPECT_EQ(p10.t_pred, 10.0 * p1.t_sum);
}

TEST(PredictEpoch, EqualsManualStageComposition) {
  const auto& fx = fixture();
  for (const auto& ws : fx.test) {
    const auto p = predict_epoch(ws.graph, ws.cfg, fx.full.layer_models, fx.full.refiner());
    const LayerTimes lt = sum_layer_times(ws.graph, fx.full.layer_models, ws.cfg);
    CommConfig comm = ws.cfg.comm;
    double params = 0.0;
    for (const auto& n : ws.graph.nodes) params += static_cast<double>(layer_params(n));
    comm.payload_bits = 32.0 * params;
    const double t_comm = allreduce_time(comm);
    const ScalingFactors sf = predict_scaling(*fx.full.gnn, build_gnn_inputs(ws.graph, ws.cfg, lt.per_node));
    const double want = static_cast<double>(ws.cfg.iterations_per_epoch) * (sf.alpha * lt.total + sf.beta * t_comm);
    EXPECT_NEAR(p.t_pred, want, 1e-12 * want);
    EXPECT_EQ(p.layer_times, lt.per_node);
    expect_identities(p, ws.cfg.iterations_per_epoch);
  }
}

TEST(PredictEpoch, StageTags) {
  const auto& fx = fixture();
  const auto& ws = fx.test.front();
  auto stage_of = [](const std::function<void()>& f) -> std::string {
    try {
      f();
    } catch (const StageError& e) {
      return e.stage();
    }
    return "none";
  };
  LayerModels missing = fx.full.layer_models;
  missing.erase(missing.begin());
  EXPECT_EQ(stage_of([&] { predict_epoch(ws.graph, ws.cfg, missing, nullptr); }), "1");
  RunConfig bad_link = ws.cfg;
  bad_link.comm.bandwidth_bps = -1.0;
  EXPECT_NE(stage_of([&] { predict_epoch(ws.graph, bad_link, fx.full.layer_models, nullptr); }), "none");
  GnnConfig c;
  c.d_global = 3;
  const GnnModel wrong = init_gnn(c, 0);
  EXPECT_EQ(stage_of([&] { predict_epoch(ws.graph, ws.cfg, fx.full.layer_models, &wrong); }), "3");
  try {
    predict_epoch(ws.graph, ws.cfg, missing, nullptr);
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("stage 1:"), std::string::npos) << e.what();
  }
}

TEST(Evaluate, Examples) {
  const auto same = evaluate({1.0, 2.0}, {1.0, 2.0});
  EXPECT_EQ(same.mre, 0.0);
  EXPECT_EQ(same.rmse, 0.0);
  const auto one = evaluate({110.0}, {100.0});
  EXPECT_NEAR(one.mre, 10.0, 1e-12);
  EXPECT_NEAR(one.rmse, 10.0, 1e-12);
  const auto two = evaluate({110.0, 90.0}, {100.0, 100.0});
  EXPECT_NEAR(two.mre, 10.0, 1e-12);
  EXPECT_NEAR(two.rmse, 10.0, 1e-12);
  EXPECT_EQ(two.n, 2u);
  EXPECT_EQ(two.per_sample_abs_pct_error.size(), 2u);
  try {
    evaluate({1.0}, {1.0, 2.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kLengthMismatch);
  }
  EXPECT_THROW(evaluate({1.0}, {0.0}), Error);
  EXPECT_THROW(evaluate({}, {}), Error);
}

TEST(Evaluate, MatchesLongHandRecomputation) {
  Rng rng = make_rng(21, "metrics");
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 1 + uniform_index(rng, 50);
    std::vector<double> pred(n), act(n);
    for (std::size_t i = 0; i < n; ++i) {
      act[i] = 0.01 + 100.0 * uniform01(rng);
      pred[i] = act[i] * (0.5 + uniform01(rng));
    }
    long double abs_pct = 0.0L, sq = 0.0L;
    for (std::size_t i = 0; i < n; ++i) {
      const long double d = static_cast<long double>(act[i]) - pred[i];
      abs_pct += std::fabs(d) / act[i] * 100.0L;
      sq += d * d;
    }
    const auto r = evaluate(pred, act);
    EXPECT_NEAR(r.mre, static_cast<double>(abs_pct / n), 1e-10);
    EXPECT_NEAR(r.rmse, static_cast<double>(std::sqrt(sq / n)), 1e-10);
    EXPECT_GE(r.mre, 0.0);
  }
}

TEST(Evaluate, ReportAndCdf) {
  const auto r = evaluate({110.0, 95.0, 100.0}, {100.0, 100.0, 100.0});
  const auto j = report_to_json(r);
  EXPECT_EQ(j.at("n"), 3);
  EXPECT_NEAR(j.at("mre_pct").get<double>(), 5.0, 1e-12);
  const std::string cdf = format_error_cdf(r);
  EXPECT_EQ(cdf.substr(0, cdf.find('\n')), "abs_pct_error,cumulative_fraction");
  EXPECT_NE(cdf.find("0,0.333333"), std::string::npos) << cdf;
  EXPECT_NE(cdf.rfind(",1\n"), std::string::npos) << cdf;
}

TEST(Split, IdIsEightyTwenty) {
  std::vector<std::string> fam(200, "bert-like");
  fam.insert(fam.end(), 50, "vit-like");
  const auto s = split_id_ood(fam, "bert-like", SplitMode::kId, 4);
  EXPECT_EQ(s.train.size(), 160u);
  EXPECT_EQ(s.test.size(), 40u);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.test.begin(), s.test.end());
  EXPECT_EQ(all.size(), 200u);
  EXPECT_LT(*all.rbegin(), 200u);
  const auto again = split_id_ood(fam, "bert-like", SplitMode::kId, 4);
  EXPECT_EQ(again.test, s.test);
  EXPECT_NE(split_id_ood(fam, "bert-like", SplitMode::kId, 5).test, s.test);
}

TEST(Split, OodExcludesTheTargetFamily) {
  std::vector<std::string> fam;
  for (auto f : kFamilies)
    for (int i = 0; i < 7; ++i) fam.emplace_back(f);
  for (auto target : kFamilies) {
    const auto s = split_id_ood(fam, std::string(target), SplitMode::kOod, 0);
    for (auto i : s.train) EXPECT_NE(fam[i], target);
    for (auto i : s.test) EXPECT_EQ(fam[i], target);
    EXPECT_EQ(s.test.size(), 7u);
    EXPECT_EQ(s.train.size(), 28u);
  }
  const std::vector<std::string> single(10, "gpt2-like");
  EXPECT_THROW(split_id_ood(single, "gpt2-like", SplitMode::kOod, 0), Error);
  EXPECT_THROW(split_id_ood(single, "t5-like", SplitMode::kId, 0), Error);
}

TEST(Ablation, NoGnnIsExactlyAdditive) {
  const auto& fx = fixture();
  const TrainedPipeline tp = train_pipeline(fx.train, AblationVariant::kNoGnn, quick_options());
  EXPECT_FALSE(tp.gnn.has_value());
  for (const auto& p : predict_all(tp, fx.test)) {
    EXPECT_EQ(p.alpha, 1.0);
    EXPECT_EQ(p.beta, 1.0);
  }
  for (const auto& ws : fx.test) {
    const auto p = predict_epoch(ws.graph, ws.cfg, tp.layer_models, nullptr);
    EXPECT_EQ(p.t_pred, static_cast<double>(ws.cfg.iterations_per_epoch) * (p.t_sum + p.t_comm));
  }
}

TEST(Ablation, NoCommMatchesFullWhenThereIsNoCommunication) {
  const auto data = oracle_set("bert-like", 30, 2, {1});
  const std::vector<WorkloadSample> train(data.begin(), data.begin() + 24), test(data.begin() + 24, data.end());
  const auto full = run_ablation(AblationVariant::kFull, train, test, train.size(), 9, quick_options());
  const auto no_comm = run_ablation(AblationVariant::kNoComm, train, test, train.size(), 9, quick_options());
  EXPECT_EQ(full.mre, no_comm.mre);
  EXPECT_EQ(full.rmse, no_comm.rmse);
  EXPECT_EQ(full.per_sample_abs_pct_error, no_comm.per_sample_abs_pct_error);
}

TEST(Ablation, VariantSwitches) {
  const auto& fx = fixture();
  const auto opt = quick_options();
  const auto no_comm = train_pipeline(fx.train, AblationVariant::kNoComm, opt);
  EXPECT_FALSE(no_comm.gnn->config.use_comm_term);
  for (const auto& p : predict_all(no_comm, fx.test)) EXPECT_EQ(p.t_comm, 0.0);
  const auto no_mlp = train_pipeline(fx.train, AblationVariant::kNoMlp, opt);
  EXPECT_FALSE(no_mlp.gnn->config.use_global_branch);
  EXPECT_EQ(no_mlp.gnn->params.g1.w.size(), 0);
  EXPECT_TRUE(fx.full.gnn->config.use_global_branch && fx.full.gnn->config.use_comm_term);
  for (auto v : kVariantNames) EXPECT_EQ(to_string(parse_variant(v)), v);
  EXPECT_THROW(parse_variant("no_forest"), Error);
  const auto r = run_ablation(AblationVariant::kRandomSampling, fx.train, fx.test, 20, 1, opt);
  EXPECT_EQ(r.n, fx.test.size());
}

TEST(Pipeline, TrainingIsDeterministic) {
  const auto& fx = fixture();
  const auto again = train_pipeline(fx.train, AblationVariant::kFull, quick_options());
  EXPECT_EQ(serialize_gnn(*again.gnn), serialize_gnn(*fx.full.gnn));
  for (const auto& [k, m] : again.layer_models) {
    EXPECT_EQ(serialize_layer_model(m), serialize_layer_model(fx.full.layer_models.at(k)));
  }
  auto threaded = quick_options();
  threaded.threads = 3;
  const auto t3 = train_pipeline(fx.train, AblationVariant::kFull, threaded);
  EXPECT_EQ(serialize_gnn(*t3.gnn), serialize_gnn(*fx.full.gnn));
  const auto a = predict_all(fx.full, fx.test, 1), b = predict_all(fx.full, fx.test, 4);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].t_pred, b[i].t_pred);
}

}  // namespace
}  // namespace dlperf
