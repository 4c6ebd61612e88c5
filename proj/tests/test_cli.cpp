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

#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>

#include "dlperf/cli.hpp"

namespace dlperf {
namespace {

namespace fs = std::filesystem;

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

Outcome run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dlperf");
  std::ostringstream out, err;
  Outcome o;
  o.code = cli::run(args, out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("dlperf_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) { return read_file(p.string()); }

// Every regular file under `dir`, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return files;
}

class SeedEnv {
 public:
  explicit SeedEnv(const char* value) {
    if (value) ::setenv(cli::kSeedEnv, value, 1);
    else ::unsetenv(cli::kSeedEnv);
  }
  ~SeedEnv() { ::unsetenv(cli::kSeedEnv); }
};

// A small generated dataset with trained artifacts, shared by the tests.
struct Workspace {
  fs::path root;
  fs::path data;
  fs::path models;
  fs::path gnn;

  static const Workspace& get() {
    static const Workspace w = [] {
      Workspace ws;
      SeedEnv clear(nullptr);
      ws.root = fresh_dir("workspace");
      ws.data = ws.root / "data";
      ws.models = ws.root / "models";
      ws.gnn = ws.root / "gnn.json";
      auto check = [](const Outcome& o) {
        if (o.code != 0) throw std::runtime_error("setup failed: " + o.err);
      };
      check(run_cli({"gen", "--out", ws.data.string(), "--family", "bert-like", "--count", "12",
                     "--workers", "1", "4", "--seed", "3"}));
      check(run_cli({"train-layer", "--dataset", (ws.data / "dataset.csv").string(), "--out",
                     ws.models.string(), "--trees", "10", "--seed", "3"}));
      check(run_cli({"train-gnn", "--dataset", (ws.data / "dataset.csv").string(), "--layer-models",
                     ws.models.string(), "--out", ws.gnn.string(), "--epochs", "5", "--seed", "3"}));
      return ws;
    }();
    return w;
  }

  fs::path dataset() const { return data / "dataset.csv"; }

  // One graph from the dataset and a config file for it.
  std::pair<fs::path, fs::path> graph_and_config() const {
    const auto r = ingest_measurements(slurp(dataset()), data);
    const auto& s = r.samples.front();
    const auto g = root / "g.json";
    const auto c = root / "c.json";
    write_file(g.string(), serialize_model_graph(s.graph));
    write_file(c.string(), config_to_json(s.cfg).dump(2));
    return {g, c};
  }
};

// --- help and usage ----------------------------------------------------------

const std::map<std::string, std::vector<std::string>>& documented_flags() {
  static const std::map<std::string, std::vector<std::string>> flags = {
      {"gen", {"--out", "--family", "--count", "--sampler", "--budget", "--oracle", "--workers", "--seed",
               "--verbose"}},
      {"design", {"--candidates", "--budget", "--out", "--restarts", "--ridge", "--standardize",
                  "--max-iterations", "--seed", "--verbose"}},
      {"train-layer", {"--samples", "--dataset", "--out", "--trees", "--max-depth", "--min-leaf",
                       "--max-features", "--no-bootstrap", "--seed", "--threads", "--verbose"}},
      {"train-gnn", {"--dataset", "--layer-models", "--out", "--log", "--variant", "--epochs",
                     "--learning-rate", "--batch-size", "--folds", "--validation-fraction", "--seed",
                     "--threads", "--verbose"}},
      {"predict", {"--graph", "--config", "--dataset", "--layer-models", "--gnn", "--out", "--threads",
                   "--verbose"}},
      {"eval", {"--predictions", "--actual", "--pred-column", "--actual-column", "--out", "--cdf",
                "--verbose"}},
      {"ablate", {"--dataset", "--test-dataset", "--split", "--target", "--variant", "--budget", "--out",
                  "--trees", "--epochs", "--folds", "--seed", "--threads", "--verbose"}},
      {"calibrate-comm", {"--calibration", "--config", "--out", "--verbose"}},
  };
  return flags;
}

TEST(Cli, HelpOnEverySubcommandDocumentsItsFlags) {
  for (const auto& [sub, flags] : documented_flags()) {
    const auto o = run_cli({sub, "--help"});
    EXPECT_EQ(o.code, 0) << sub;
    for (const auto& flag : flags) {
      EXPECT_NE(o.out.find(flag), std::string::npos) << sub << " help lacks " << flag;
    }
  }
}

TEST(Cli, TopLevelHelpListsSubcommands) {
  const auto o = run_cli({"--help"});
  EXPECT_EQ(o.code, 0);
  for (const auto& [sub, flags] : documented_flags()) {
    EXPECT_NE(o.out.find(sub), std::string::npos) << sub;
  }
}

TEST(Cli, UsageErrorsExitOne) {
  auto o = run_cli({});
  EXPECT_EQ(o.code, 1);
  o = run_cli({"frobnicate"});
  EXPECT_EQ(o.code, 1);
  o = run_cli({"predict", "--graph", "g.json"});  // --config and --layer-models missing
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.err.find("Usage"), std::string::npos) << o.err;
  EXPECT_TRUE(o.out.empty());
  o = run_cli({"eval", "--predictions", "p.csv"});
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.err.find("--actual"), std::string::npos) << o.err;
  o = run_cli({"gen", "--out", "x", "--sampler", "random"});  // budget missing
  EXPECT_EQ(o.code, 1);
  o = run_cli({"ablate", "--dataset", "d.csv", "--variant", "bogus"});
  EXPECT_EQ(o.code, 1);
  o = run_cli({"design", "--candidates", "c.csv", "--budget", "notanumber"});
  EXPECT_EQ(o.code, 1);
}

// --- eval --------------------------------------------------------------------

TEST(Cli, EvalLengthMismatchNamesBothFiles) {
  const auto dir = fresh_dir("eval_mismatch");
  const auto p = dir / "pred.csv", a = dir / "actual.csv";
  write_file(p.string(), "t_epoch_s\n1\n2\n3\n");
  write_file(a.string(), "measured_epoch_s\n1\n2\n");
  const auto o = run_cli({"eval", "--predictions", p.string(), "--actual", a.string()});
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("length mismatch"), std::string::npos) << o.err;
  EXPECT_NE(o.err.find(p.string()), std::string::npos) << o.err;
  EXPECT_NE(o.err.find(a.string()), std::string::npos) << o.err;
}

TEST(Cli, EvalReportsHandComputedMetrics) {
  const auto dir = fresh_dir("eval_ok");
  const auto p = dir / "pred.csv", a = dir / "actual.csv", cdf = dir / "cdf.csv";
  write_file(p.string(), "t_epoch_s\n110\n90\n");
  write_file(a.string(), "measured_epoch_s\n100\n100\n");
  const auto o = run_cli({"eval", "--predictions", p.string(), "--actual", a.string(), "--cdf", cdf.string()});
  ASSERT_EQ(o.code, 0) << o.err;
  const auto j = nlohmann::json::parse(o.out);
  EXPECT_NEAR(j.at("mre_pct").get<double>(), 10.0, 1e-12);
  EXPECT_NEAR(j.at("rmse").get<double>(), 10.0, 1e-12);
  EXPECT_EQ(slurp(cdf).rfind("abs_pct_error,cumulative_fraction", 0), 0u);
}

// --- workflow ----------------------------------------------------------------

TEST(Cli, PredictWritesAPredictionDocument) {
  const auto& ws = Workspace::get();
  const auto [g, c] = ws.graph_and_config();
  const auto out = ws.root / "prediction.json";
  const auto o = run_cli({"predict", "--graph", g.string(), "--config", c.string(), "--layer-models",
                          ws.models.string(), "--gnn", ws.gnn.string(), "--out", out.string()});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_TRUE(o.out.empty());
  const auto j = nlohmann::json::parse(slurp(out));
  for (const char* k : {"t_sum_s", "t_comm_s", "alpha", "beta", "t_iter_s", "t_epoch_s", "layer_times_s"}) {
    EXPECT_TRUE(j.contains(k)) << k;
  }
  const auto cfg = parse_run_config(slurp(c));
  const double t_iter = j["alpha"].get<double>() * j["t_sum_s"].get<double>() +
                        j["beta"].get<double>() * j["t_comm_s"].get<double>();
  EXPECT_NEAR(j["t_iter_s"].get<double>(), t_iter, 1e-12 * t_iter);
  EXPECT_NEAR(j["t_epoch_s"].get<double>(), static_cast<double>(cfg.iterations_per_epoch) * t_iter,
              1e-12 * j["t_epoch_s"].get<double>());
}

TEST(Cli, PredictWithoutRefinerIsAdditive) {
  const auto& ws = Workspace::get();
  const auto [g, c] = ws.graph_and_config();
  const auto o = run_cli({"predict", "--graph", g.string(), "--config", c.string(), "--layer-models",
                          ws.models.string()});
  ASSERT_EQ(o.code, 0) << o.err;
  const auto j = nlohmann::json::parse(o.out);
  EXPECT_EQ(j["alpha"].get<double>(), 1.0);
  EXPECT_EQ(j["beta"].get<double>(), 1.0);
}

TEST(Cli, DatasetPredictionFeedsEval) {
  const auto& ws = Workspace::get();
  const auto preds = ws.root / "preds.csv";
  auto o = run_cli({"predict", "--dataset", ws.dataset().string(), "--layer-models", ws.models.string(),
                    "--gnn", ws.gnn.string(), "--out", preds.string()});
  ASSERT_EQ(o.code, 0) << o.err;
  o = run_cli({"eval", "--predictions", preds.string(), "--actual", ws.dataset().string()});
  ASSERT_EQ(o.code, 0) << o.err;
  const auto j = nlohmann::json::parse(o.out);
  EXPECT_EQ(j.at("n").get<int>(), 12);
  EXPECT_GT(j.at("mre_pct").get<double>(), 0.0);
}

TEST(Cli, RuntimeFailuresExitTwoWithAStageTag) {
  const auto& ws = Workspace::get();
  const auto [g, c] = ws.graph_and_config();
  auto o = run_cli({"predict", "--graph", g.string(), "--config", c.string(), "--layer-models",
                    (ws.root / "no-such-dir").string()});
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("stage "), std::string::npos) << o.err;

  // A graph containing a kind with no regressor fails in the layer stage.
  ModelGraph odd{"odd", {{"p", LayerKind::of(LayerTag::Pooling), {{"elements", 64}}}}, {}};
  const auto og = ws.root / "odd.json";
  write_file(og.string(), serialize_model_graph(odd));
  o = run_cli({"predict", "--graph", og.string(), "--config", c.string(), "--layer-models",
               ws.models.string()});
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("stage 1:"), std::string::npos) << o.err;
}

TEST(Cli, VerboseOnlyTouchesStderr) {
  const auto& ws = Workspace::get();
  const auto [g, c] = ws.graph_and_config();
  const std::vector<std::string> base = {"predict", "--graph", g.string(), "--config", c.string(),
                                         "--layer-models", ws.models.string()};
  const auto quiet = run_cli(base);
  auto loud_args = base;
  loud_args.insert(loud_args.begin(), "--verbose");
  const auto loud = run_cli(loud_args);
  ASSERT_EQ(quiet.code, 0);
  ASSERT_EQ(loud.code, 0);
  EXPECT_EQ(quiet.out, loud.out);
  EXPECT_TRUE(quiet.err.empty());
  EXPECT_NE(loud.err.find("[stage final]"), std::string::npos) << loud.err;
}

TEST(Cli, CalibrateCommTakesTheMedian) {
  const auto dir = fresh_dir("calibrate");
  const auto cal = dir / "cal.json";
  write_file(cal.string(), R"({"latency_samples_s": [3e-5, 1e-5, 2e-5, 9e-4]})");
  auto o = run_cli({"calibrate-comm", "--calibration", cal.string()});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_NEAR(nlohmann::json::parse(o.out).at("latency_s").get<double>(), 2.5e-5, 1e-18);
  write_file(cal.string(), R"({"latency_samples_s": []})");
  o = run_cli({"calibrate-comm", "--calibration", cal.string()});
  EXPECT_EQ(o.code, 2);
}

TEST(Cli, DesignSelectsTheBudget) {
  const auto dir = fresh_dir("design");
  const auto cand = dir / "cand.csv";
  write_file(cand.string(), "x,y\n1,0\n0,1\n1,1\n0.5,0.5\n");
  const auto o = run_cli({"design", "--candidates", cand.string(), "--budget", "2", "--seed", "1"});
  ASSERT_EQ(o.code, 0) << o.err;
  const auto j = nlohmann::json::parse(o.out);
  EXPECT_EQ(j.at("selected").size(), 2u);
  // With two rows X is 2x2 and det(X^T X) = det(X)^2. No pair has
  // |det X| > 1, and (1,0),(0,1) reaches it, so the optimum is log 1.
  EXPECT_NEAR(j.at("log_det").get<double>(), 0.0, 1e-12);
}

// --- seeds and reproducibility --------------------------------------------------

TEST(Cli, SeedComesFromTheEnvironmentUnlessFlagged) {
  const auto root = fresh_dir("seed_env");
  auto gen = [&](const std::string& name, std::vector<std::string> extra) {
    std::vector<std::string> args = {"gen", "--out", (root / name).string(), "--family", "gpt2-like",
                                     "--count", "5"};
    args.insert(args.end(), extra.begin(), extra.end());
    const auto o = run_cli(args);
    EXPECT_EQ(o.code, 0) << o.err;
    return slurp(root / name / "dataset.csv");
  };
  std::string flag7, flag8, env7, env7_flag8, none;
  {
    SeedEnv e(nullptr);
    flag7 = gen("flag7", {"--seed", "7"});
    flag8 = gen("flag8", {"--seed", "8"});
    none = gen("none", {});
  }
  {
    SeedEnv e("7");
    env7 = gen("env7", {});
    env7_flag8 = gen("env7_flag8", {"--seed", "8"});
  }
  EXPECT_NE(flag7, flag8);
  EXPECT_EQ(env7, flag7);
  EXPECT_EQ(env7_flag8, flag8);
  {
    SeedEnv e(nullptr);
    EXPECT_EQ(none, gen("zero", {"--seed", "0"}));
  }
  SeedEnv bad("seven");
  const auto o = run_cli({"gen", "--out", (root / "bad").string(), "--count", "2"});
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.err.find(cli::kSeedEnv), std::string::npos);
}

TEST(Cli, SeededCommandsAreByteIdenticalAcrossRuns) {
  SeedEnv clear(nullptr);
  const auto& ws = Workspace::get();
  std::map<std::string, std::string> first;
  for (int rep = 0; rep < 2; ++rep) {
    const auto dir = fresh_dir("repro" + std::to_string(rep));
    std::map<std::string, std::string> got;
    auto must = [](const Outcome& o) { ASSERT_EQ(o.code, 0) << o.err; };
    must(run_cli({"gen", "--out", (dir / "data").string(), "--family", "vit-like", "--count", "8",
                  "--sampler", "d-optimal", "--budget", "5", "--seed", "11"}));
    for (const auto& [k, v] : tree(dir / "data")) got["gen/" + k] = v;

    const auto cand = dir / "cand.csv";
    write_file(cand.string(), "a,b,c\n1,2,0\n0,1,3\n2,2,2\n5,0,1\n1,1,1\n0,4,2\n");
    must(run_cli({"design", "--candidates", cand.string(), "--budget", "3", "--out",
                  (dir / "design.json").string(), "--seed", "11"}));
    got["design"] = slurp(dir / "design.json");

    must(run_cli({"train-layer", "--dataset", ws.dataset().string(), "--out", (dir / "models").string(),
                  "--trees", "8", "--seed", "11", "--threads", rep == 0 ? "1" : "3"}));
    for (const auto& [k, v] : tree(dir / "models")) got["layer/" + k] = v;

    must(run_cli({"train-gnn", "--dataset", ws.dataset().string(), "--layer-models", ws.models.string(),
                  "--out", (dir / "gnn.json").string(), "--log", (dir / "log.csv").string(), "--epochs",
                  "4", "--seed", "11"}));
    got["gnn"] = slurp(dir / "gnn.json");
    got["gnn-log"] = slurp(dir / "log.csv");

    must(run_cli({"ablate", "--dataset", ws.dataset().string(), "--target", "bert-like", "--variant",
                  "full", "--variant", "no_gnn", "--trees", "8", "--epochs", "4", "--seed", "11", "--out",
                  (dir / "ablate.json").string()}));
    got["ablate"] = slurp(dir / "ablate.json");

    if (rep == 0) {
      first = got;
    } else {
      ASSERT_EQ(first.size(), got.size());
      for (const auto& [k, v] : first) EXPECT_EQ(v, got.at(k)) << k << " differs between runs";
    }
  }
  EXPECT_GT(first.size(), 8u);
}

}  // namespace
}  // namespace dlperf
