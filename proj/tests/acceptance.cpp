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

// Acceptance gate. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails or overruns its time budget. Pass
// criterion numbers as arguments to run a subset.

#include <boost/multiprecision/cpp_int.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dlperf/pipeline.hpp"

namespace dlperf {
namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double limit_s;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// --- shared fixtures -----------------------------------------------------------

// The nonlinear oracle used by the learning criteria.
OracleParams nonlinear_oracle(std::uint64_t seed, double contention = 0.0) {
  OracleParams op;
  op.fusion_discount = 0.3;
  op.congestion = 1.15;
  op.worker_contention = contention;
  op.sigma = 0.03;
  op.seed = 1000 + seed;
  return op;
}

struct IdSplit {
  std::vector<WorkloadSample> train, test;
};

// 200 oracle samples of one family, split 160/40.
IdSplit id_split(const std::string& family, std::uint64_t seed, const GridSpec& spec,
                 const OracleParams& op) {
  const auto samples = run_oracle(subsample_grid(full_grid(spec, family, seed), 200, seed), spec, op);
  const auto s = split_id_ood(samples, family, SplitMode::kId, seed);
  return {gather(samples, s.train), gather(samples, s.test)};
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// --- 1: all-reduce ---------------------------------------------------------------

Outcome comm_exactness() {
  Rng rng = make_rng(1, "acceptance-comm");
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    CommConfig c;
    c.n_workers = 1 + static_cast<std::int64_t>(uniform_index(rng, 1024));
    c.payload_bits = std::exp(std::log(1e3) + uniform01(rng) * std::log(1e9));
    c.bandwidth_bps = std::exp(std::log(1e8) + uniform01(rng) * std::log(1e4));
    c.latency_s = uniform01(rng) * 1e-3;
    const long double n = c.n_workers, s = c.payload_bits, b = c.bandwidth_bps, g = c.latency_s;
    const long double want = 2.0L * (n - 1.0L) / n * s / b + 2.0L * (n - 1.0L) * g;
    const double got = allreduce_time(c);
    if (c.n_workers == 1) {
      if (got != 0.0) return {false, "N=1 gave " + fmt("%g", got)};
      continue;
    }
    worst = std::max(worst, static_cast<double>(std::fabs(static_cast<long double>(got) - want) / want));
  }
  CommConfig one{1, 1e9, 1e9, 1e-3};
  if (allreduce_time(one) != 0.0) return {false, "N=1 is not exactly 0"};
  return {worst < 1e-12, "max relative error " + fmt("%.3g", worst) + " over 10000 configs"};
}

// --- 2: Linear features ----------------------------------------------------------

Outcome linear_exactness() {
  using boost::multiprecision::cpp_int;
  Rng rng = make_rng(2, "acceptance-linear");
  int bad = 0;
  const int trials = 20000;
  for (int t = 0; t < trials; ++t) {
    const auto b = static_cast<std::int64_t>(1 + uniform_index(rng, 4096));
    const auto din = static_cast<std::int64_t>(1 + uniform_index(rng, 65536));
    const auto dout = static_cast<std::int64_t>(1 + uniform_index(rng, 65536));
    RunConfig cfg;
    cfg.hp.batch_size = b;
    const LayerNode node{"fc", LayerKind::of(LayerTag::Linear), {{"d_in", din}, {"d_out", dout}}};
    const CmFeatures cm = compute_layer_cm(node, cfg);
    const cpp_int B = b, I = din, O = dout;
    bad += cpp_int(cm.flops) != 2 * B * I * O + B * O;
    bad += cpp_int(cm.params) != I * O + O;
  }
  return {bad == 0, std::to_string(bad) + " mismatches in " + std::to_string(trials) + " random layers"};
}

// --- 3: D-optimal design ---------------------------------------------------------

// Extended-precision log det of a subset, for checking the library optimum.
long double lu_log_det(const Eigen::MatrixXd& a, const std::vector<std::size_t>& sel, double ridge) {
  using MatL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  const MatL al = a.cast<long double>();
  MatL m = MatL::Identity(a.cols(), a.cols()) * static_cast<long double>(ridge);
  for (auto i : sel) m += al.row(static_cast<Eigen::Index>(i)).transpose() * al.row(static_cast<Eigen::Index>(i));
  return std::log(m.partialPivLu().determinant());
}

long double brute_force(const Eigen::MatrixXd& a, std::size_t k, double ridge) {
  const auto m = static_cast<std::size_t>(a.rows());
  long double best = -INFINITY;
  std::vector<std::size_t> cur;
  std::function<void(std::size_t)> rec = [&](std::size_t from) {
    if (cur.size() == k) {
      const long double v = lu_log_det(a, cur, ridge);
      if (std::isfinite(static_cast<double>(v))) best = std::max(best, v);
      return;
    }
    for (std::size_t i = from; i + (k - cur.size()) <= m; ++i) {
      cur.push_back(i);
      rec(i + 1);
      cur.pop_back();
    }
  };
  rec(0);
  return best;
}

Outcome design_quality() {
  int hits = 0, exceeded = 0, non_monotone = 0, oracle_disagree = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng = make_rng(seed, "acceptance-design");
    const std::size_t d = 1 + uniform_index(rng, 4);
    const std::size_t m = std::max<std::size_t>(d, 2) + uniform_index(rng, 13 - std::max<std::size_t>(d, 2));
    const std::size_t k = 1 + uniform_index(rng, std::min<std::size_t>(6, m));
    Eigen::MatrixXd a(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = standard_normal(rng);
    const DesignProblem p{a, k, std::nullopt};
    FedorovOptions opt;
    opt.restarts = 5;
    opt.seed = seed;
    const auto sel = fedorov_exchange(p, opt);
    const auto ex = exhaustive_optimum(p);
    const long double oracle = brute_force(a, k, sel.ridge);
    if (std::fabs(static_cast<long double>(ex.log_det) - oracle) > 1e-7L * std::max(1.0L, std::fabs(oracle)))
      ++oracle_disagree;
    if (sel.log_det > ex.log_det + 1e-9) ++exceeded;
    if (sel.log_det >= ex.log_det - 1e-9) ++hits;
    for (const auto& h : sel.histories)
      for (std::size_t i = 1; i < h.size(); ++i) non_monotone += h[i] < h[i - 1];
  }
  std::ostringstream os;
  os << hits << "/100 at the exhaustive optimum, " << exceeded << " above it, " << non_monotone
     << " decreasing steps, " << oracle_disagree << " oracle disagreements";
  return {hits >= 95 && exceeded == 0 && non_monotone == 0 && oracle_disagree == 0, os.str()};
}

// --- 4, 5: refiner ---------------------------------------------------------------

GraphFeatures generated_features(const std::string& family, std::int64_t depth, std::uint64_t seed) {
  ArchKnobs k;
  k.depth = depth;
  const ModelGraph g = generate_architecture(family, k, seed);
  RunConfig cfg;
  cfg.hp = {16, 128, Optimizer::Adam};
  cfg.dev = {1.0e14, 1.5e12, 80.0e9, {}};
  cfg.iterations_per_epoch = 100;
  cfg.comm = {4, static_cast<double>(gradient_payload_bits(g)), 100e9, 20e-6};
  Rng rng = make_rng(seed, "acceptance-times");
  std::map<std::string, double> t;
  for (const auto& n : g.nodes) t[n.id] = 1e-4 * (1.0 + uniform01(rng));
  return build_gnn_inputs(g, cfg, t);
}

GnnModel small_random_model(const GraphFeatures& f, std::uint64_t seed) {
  GnnConfig c;
  c.d_model = 8;
  c.d_k = 8;
  c.heads = 2;
  c.global_hidden = 8;
  c.head_hidden = 8;
  c.d_global = static_cast<std::size_t>(f.globals.size());
  GnnModel m = init_gnn(c, seed, InitMode::kRandom);
  fit_scalers(m, {GnnSample{f, 1.0, 1.0, 1.0}});
  return m;
}

Outcome gradient_correctness() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto f = generated_features("bert-like", 1, seed);
    const auto r = grad_check(small_random_model(f, seed), GnnSample{f, 0.8, 0.3, 1.4}, 1e-5);
    worst = std::max(worst, r.max_relative_error);
  }
  return {worst < 1e-4, "max relative error " + fmt("%.3g", worst) + " over 20 models"};
}

Outcome attention_invariance() {
  double worst_row = 0.0;
  int relabel_diffs = 0, non_positive = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::string fam(kFamilies[seed % kFamilies.size()]);
    const auto f = generated_features(fam, 1 + static_cast<std::int64_t>(seed % 3), seed);
    GnnModel m = small_random_model(f, seed);
    for (std::size_t h = 0; h < m.config.heads; ++h) {
      std::map<std::size_t, double> rows;
      for (const auto& [key, w] : normalize_attention(attention_scores(m, f, h))) rows[key.first] += w;
      for (const auto& [i, s] : rows) worst_row = std::max(worst_row, std::abs(s - 1.0));
    }
    // Relabel nodes and edges.
    Rng rng = make_rng(seed, "acceptance-relabel");
    std::vector<std::size_t> perm(static_cast<std::size_t>(f.nodes.rows())), eperm(f.edge_index.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::iota(eperm.begin(), eperm.end(), std::size_t{0});
    shuffle_in_place(perm, rng);
    shuffle_in_place(eperm, rng);
    GraphFeatures g = f;
    std::vector<std::size_t> inverse(perm.size());
    for (std::size_t r = 0; r < perm.size(); ++r) {
      g.nodes.row(static_cast<Eigen::Index>(r)) = f.nodes.row(static_cast<Eigen::Index>(perm[r]));
      inverse[perm[r]] = r;
    }
    for (std::size_t e = 0; e < eperm.size(); ++e) {
      g.edges.row(static_cast<Eigen::Index>(e)) = f.edges.row(static_cast<Eigen::Index>(eperm[e]));
      g.edge_index[e] = {inverse[f.edge_index[eperm[e]].first], inverse[f.edge_index[eperm[e]].second]};
    }
    const auto a = predict_scaling(m, f), b = predict_scaling(m, g);
    relabel_diffs += a.alpha != b.alpha || a.beta != b.beta;
    for (double bias : {-800.0, -30.0, 0.0, 30.0, 800.0}) {
      m.params.out.b << bias, -bias;
      const auto s = predict_scaling(m, f);
      non_positive += !(s.alpha > 0.0 && s.beta > 0.0);
    }
  }
  std::ostringstream os;
  os << "max |row sum - 1| " << fmt("%.3g", worst_row) << ", " << relabel_diffs
     << " relabeling differences, " << non_positive << " non-positive factors";
  return {worst_row <= 1e-9 && relabel_diffs == 0 && non_positive == 0, os.str()};
}

// --- 6: additive regime ------------------------------------------------------------

Outcome additive_sanity() {
  // Neutral oracle; the full grid of each family so held-out layer shapes are
  // covered by the per-kind regressors.
  GridSpec spec;
  OracleParams op;
  std::vector<double> mres;
  std::ostringstream os;
  for (std::string_view fam : kFamilies) {
    const auto samples = run_oracle(full_grid(spec, fam, 0), spec, op);
    const auto s = split_id_ood(samples, std::string(fam), SplitMode::kId, 0);
    const auto r = run_ablation(AblationVariant::kNoGnn, gather(samples, s.train), gather(samples, s.test),
                                s.train.size(), 0);
    mres.push_back(r.mre);
    os << fam << " " << fmt("%.3f%%", r.mre) << (mres.size() < kFamilies.size() ? ", " : "");
  }
  const double worst = *std::max_element(mres.begin(), mres.end());
  return {worst < 1.0, "no_gnn MRE " + os.str()};
}

// --- 7: refiner value --------------------------------------------------------------

Outcome gnn_value() {
  std::vector<double> full, base;
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto d = id_split("gpt2-like", seed, GridSpec{}, nonlinear_oracle(seed));
    full.push_back(run_ablation(AblationVariant::kFull, d.train, d.test, d.train.size(), seed).mre);
    base.push_back(run_ablation(AblationVariant::kNoGnn, d.train, d.test, d.train.size(), seed).mre);
    wins += full.back() < base.back();
  }
  const double ratio = mean(full) / mean(base);
  std::ostringstream os;
  os << "full " << fmt("%.2f%%", mean(full)) << " vs no_gnn " << fmt("%.2f%%", mean(base)) << ", ratio "
     << fmt("%.3f", ratio) << ", full better on " << wins << "/10";
  return {wins >= 9 && ratio <= 0.7, os.str()};
}

// --- 8: sampling value ---------------------------------------------------------------

Outcome sampling_value() {
  std::vector<double> dopt, rnd, full;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    GridSpec spec;
    const OracleParams op = nonlinear_oracle(seed);
    // 200-config training grid plus 100 held-out configs.
    const auto pts = subsample_grid(full_grid(spec, "gpt2-like", seed), 300, seed);
    Rng rng = make_rng(seed, "pool");
    auto idx = sample_without_replacement(pts.size(), 200, rng);
    std::sort(idx.begin(), idx.end());
    std::vector<bool> in_pool(pts.size(), false);
    for (auto i : idx) in_pool[i] = true;
    std::vector<GridPoint> pool_pts, test_pts;
    for (std::size_t i = 0; i < pts.size(); ++i) (in_pool[i] ? pool_pts : test_pts).push_back(pts[i]);
    const auto pool = run_oracle(pool_pts, spec, op), test = run_oracle(test_pts, spec, op);
    dopt.push_back(run_ablation(AblationVariant::kFull, pool, test, 40, seed).mre);
    rnd.push_back(run_ablation(AblationVariant::kRandomSampling, pool, test, 40, seed).mre);
    full.push_back(run_ablation(AblationVariant::kFull, pool, test, 200, seed).mre);
  }
  const double ratio = mean(dopt) / mean(full);
  std::ostringstream os;
  os << "d-optimal k=40 " << fmt("%.2f%%", mean(dopt)) << ", random k=40 " << fmt("%.2f%%", mean(rnd))
     << ", full k=200 " << fmt("%.2f%%", mean(full)) << ", d-optimal/full " << fmt("%.2f", ratio)
     << " (bound 1.25)";
  return {mean(dopt) <= mean(rnd) && ratio <= 1.25, os.str()};
}

// --- 9: ablation directions -------------------------------------------------------------

Outcome ablation_directions() {
  // Worker counts 4..32 with per-doubling contention, so the worker count
  // carries a signal only the global branch sees.
  GridSpec spec;
  spec.workers = {4, 8, 16, 32};
  int comm_worse = 0, mlp_worse = 0;
  std::vector<double> f, c, g;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto d = id_split("gpt2-like", seed, spec, nonlinear_oracle(seed, 0.15));
    f.push_back(run_ablation(AblationVariant::kFull, d.train, d.test, d.train.size(), seed).mre);
    c.push_back(run_ablation(AblationVariant::kNoComm, d.train, d.test, d.train.size(), seed).mre);
    g.push_back(run_ablation(AblationVariant::kNoMlp, d.train, d.test, d.train.size(), seed).mre);
    comm_worse += c.back() > f.back();
    mlp_worse += g.back() > f.back();
  }
  std::ostringstream os;
  os << "no_comm worse on " << comm_worse << "/10, no_mlp worse on " << mlp_worse << "/10 (means full "
     << fmt("%.2f%%", mean(f)) << ", no_comm " << fmt("%.2f%%", mean(c)) << ", no_mlp " << fmt("%.2f%%", mean(g))
     << ")";
  return {comm_worse >= 8 && mlp_worse >= 8, os.str()};
}

// --- 10: out-of-distribution ------------------------------------------------------------

Outcome ood_protocol() {
  std::vector<double> full, base;
  int leaked = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    GridSpec spec;
    const OracleParams op = nonlinear_oracle(seed);
    std::vector<WorkloadSample> all;
    for (std::string_view fam : kFamilies) {
      auto s = run_oracle(subsample_grid(full_grid(spec, fam, seed), 60, seed), spec, op);
      all.insert(all.end(), s.begin(), s.end());
    }
    const std::string target(kFamilies[seed % kFamilies.size()]);
    const auto split = split_id_ood(all, target, SplitMode::kOod, seed);
    const auto train = gather(all, split.train), test = gather(all, split.test);
    for (const auto& s : train) leaked += s.family == target;
    for (const auto& s : test) leaked += s.family != target;
    full.push_back(run_ablation(AblationVariant::kFull, train, test, train.size(), seed).mre);
    base.push_back(run_ablation(AblationVariant::kNoGnn, train, test, train.size(), seed).mre);
  }
  std::ostringstream os;
  os << "full " << fmt("%.2f%%", mean(full)) << " vs no_gnn " << fmt("%.2f%%", mean(base)) << ", "
     << leaked << " misplaced samples";
  return {mean(full) < mean(base) && leaked == 0, os.str()};
}

// --- 11: determinism ----------------------------------------------------------------------

std::string fingerprint(const TrainedPipeline& tp, const std::vector<Prediction>& preds) {
  std::string s;
  for (const auto& [k, m] : tp.layer_models) s += serialize_layer_model(m);
  if (tp.gnn) s += serialize_gnn(*tp.gnn);
  for (const auto& p : preds) s += prediction_to_json(p).dump();
  return s;
}

Outcome determinism() {
  const auto d = id_split("t5-like", 4, GridSpec{}, nonlinear_oracle(4));
  std::vector<std::string> prints;
  for (std::size_t threads : {1u, 1u, 3u}) {
    PipelineOptions opt;
    opt.forest.seed = 17;
    opt.gnn_train.seed = 18;
    opt.gnn_train.epochs = 40;
    opt.threads = threads;
    opt.forest.threads = threads;
    const auto tp = train_pipeline(d.train, AblationVariant::kFull, opt);
    prints.push_back(fingerprint(tp, predict_all(tp, d.test, threads)));
  }
  std::vector<std::string> designs;
  for (int rep = 0; rep < 2; ++rep) {
    const auto grid = subsample_grid(full_grid(GridSpec{}, "deit-like", 4), 200, 4);
    const auto sel = select_configs(factors_of_all(grid), Sampler::kDOptimal, 40, 4);
    nlohmann::json j = {{"selected", sel.indices}, {"log_det", sel.design->log_det}};
    const auto data = collect_dataset(grid, GridSpec{}, Sampler::kDOptimal, 40, 4, nonlinear_oracle(4));
    designs.push_back(j.dump() + write_dataset(data, std::filesystem::temp_directory_path() /
                                                          ("dlperf_accept_det" + std::to_string(rep))));
  }
  const bool same_train = prints[0] == prints[1];
  const bool same_threads = prints[0] == prints[2];
  const bool same_design = designs[0] == designs[1];
  std::ostringstream os;
  os << "train+predict " << (same_train ? "identical" : "DIFFERENT") << " across runs, "
     << (same_threads ? "identical" : "DIFFERENT") << " across thread counts; design "
     << (same_design ? "identical" : "DIFFERENT");
  return {same_train && same_threads && same_design, os.str()};
}

// --- 12: metrics --------------------------------------------------------------------------

Outcome metric_exactness() {
  bool ok = true;
  std::ostringstream os;
  const auto one = evaluate({110.0}, {100.0});
  ok = ok && std::abs(one.mre - 10.0) < 1e-12 && std::abs(one.rmse - 10.0) < 1e-12;
  os << "[110] vs [100]: MRE " << fmt("%.6g%%", one.mre) << ", RMSE " << fmt("%.6g", one.rmse);
  // pred (90, 260, 40) vs actual (100, 200, 50):
  // MRE = (10% + 30% + 20%) / 3 = 20%, RMSE = sqrt((100 + 3600 + 100) / 3).
  const auto three = evaluate({90.0, 260.0, 40.0}, {100.0, 200.0, 50.0});
  ok = ok && std::abs(three.mre - 20.0) < 1e-12 && std::abs(three.rmse - std::sqrt(3800.0 / 3.0)) < 1e-12;
  os << "; three-sample case MRE " << fmt("%.6g%%", three.mre) << ", RMSE " << fmt("%.6g", three.rmse);
  const auto exact = evaluate({1.0, 2.0}, {1.0, 2.0});
  ok = ok && exact.mre == 0.0 && exact.rmse == 0.0;
  return {ok, os.str()};
}

}  // namespace
}  // namespace dlperf

int main(int argc, char** argv) {
  using namespace dlperf;
  const std::vector<Criterion> criteria = {
      {1, "communication exactness", 1.0, comm_exactness},
      {2, "linear-layer feature exactness", 1.0, linear_exactness},
      {3, "d-optimal quality", 30.0, design_quality},
      {4, "gradient correctness", 120.0, gradient_correctness},
      {5, "attention normalization and invariance", 10.0, attention_invariance},
      {6, "additive-regime sanity", 60.0, additive_sanity},
      {7, "refiner value", 900.0, gnn_value},
      {8, "sampling value", 1200.0, sampling_value},
      {9, "ablation directions", 1200.0, ablation_directions},
      {10, "out-of-distribution protocol", 1200.0, ood_protocol},
      {11, "determinism", 300.0, determinism},
      {12, "metric exactness", 1.0, metric_exactness},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.limit_s;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::printf("%s [%2d] %s: %s (%.2f s, limit %.0f s%s)\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs, c.limit_s, in_time ? "" : ", OVER TIME");
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
