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

// Random-forest regression on a log-transformed target. Trees are grown on
// bootstrap resamples with per-split feature subsampling and maximal
// variance-reduction splits.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dlperf/error.hpp"
#include "dlperf/parallel.hpp"
#include "dlperf/rng.hpp"
#include "json.hpp"

namespace dlperf {

inline constexpr double kPredictionFloor = 1e-9;

struct ForestParams {
  std::size_t n_trees = 100;
  std::size_t max_depth = 12;
  std::size_t min_samples_leaf = 2;
  std::size_t max_features = 0;  // 0 -> ceil(sqrt(d))
  bool bootstrap = true;
  std::uint64_t seed = 0;
  std::size_t threads = 1;  // fitting only; does not affect results

  friend bool operator==(const ForestParams&, const ForestParams&) = default;
};

struct TreeNode {
  std::int32_t feature = -1;  // -1 marks a leaf
  double threshold = 0.0;     // go left when x[feature] <= threshold
  std::int32_t left = -1;
  std::int32_t right = -1;
  double value = 0.0;  // mean log-target of the node's samples
  double lo = 0.0;     // min raw target under this node
  double hi = 0.0;     // max raw target under this node

  bool is_leaf() const { return feature < 0; }
  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

class RegressionTree {
 public:
  const std::vector<TreeNode>& nodes() const { return nodes_; }
  std::vector<TreeNode>& mutable_nodes() { return nodes_; }

  const TreeNode& leaf_for(std::span<const double> x) const {
    std::size_t i = 0;
    while (!nodes_[i].is_leaf()) {
      const auto& n = nodes_[i];
      i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] <= n.threshold
                                       ? n.left
                                       : n.right);
    }
    return nodes_[i];
  }

  std::size_t depth() const { return nodes_.empty() ? 0 : depth_from(0); }

  friend bool operator==(const RegressionTree&, const RegressionTree&) = default;

 private:
  std::size_t depth_from(std::size_t i) const {
    const auto& n = nodes_[i];
    if (n.is_leaf()) return 0;
    return 1 + std::max(depth_from(static_cast<std::size_t>(n.left)),
                        depth_from(static_cast<std::size_t>(n.right)));
  }

  std::vector<TreeNode> nodes_;
};

/// Row-major training data: x[i * d + j].
struct TrainingData {
  std::vector<double> x;
  std::vector<double> y;  // raw targets, > 0
  std::size_t d = 0;

  std::size_t n() const { return y.size(); }
  std::span<const double> row(std::size_t i) const { return {x.data() + i * d, d}; }
};

namespace detail {

class TreeBuilder {
 public:
  TreeBuilder(const TrainingData& data, const std::vector<double>& log_y,
              const ForestParams& params, Rng& rng)
      : data_(data), log_y_(log_y), params_(params), rng_(rng) {
    mtry_ = params.max_features
                ? std::min(params.max_features, data.d)
                : static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(data.d))));
    mtry_ = std::max<std::size_t>(1, mtry_);
  }

  RegressionTree build(std::vector<std::size_t> sample) {
    RegressionTree tree;
    grow(tree.mutable_nodes(), sample, 0);
    return tree;
  }

 private:
  struct Split {
    std::int32_t feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
  };

  std::int32_t grow(std::vector<TreeNode>& nodes, std::vector<std::size_t>& idx,
                    std::size_t depth) {
    const auto at = static_cast<std::int32_t>(nodes.size());
    nodes.emplace_back();
    double sum = 0.0, lo = data_.y[idx[0]], hi = data_.y[idx[0]];
    for (auto i : idx) {
      sum += log_y_[i];
      lo = std::min(lo, data_.y[i]);
      hi = std::max(hi, data_.y[i]);
    }
    nodes[at].value = sum / static_cast<double>(idx.size());
    nodes[at].lo = lo;
    nodes[at].hi = hi;

    if (depth >= params_.max_depth || idx.size() < 2 * params_.min_samples_leaf ||
        lo == hi) {
      return at;
    }
    const Split split = best_split(idx);
    if (split.feature < 0) return at;

    std::vector<std::size_t> left, right;
    for (auto i : idx) {
      (data_.x[i * data_.d + static_cast<std::size_t>(split.feature)] <= split.threshold ? left : right)
          .push_back(i);
    }
    idx.clear();
    idx.shrink_to_fit();
    nodes[at].feature = split.feature;
    nodes[at].threshold = split.threshold;
    const auto l = grow(nodes, left, depth + 1);
    const auto r = grow(nodes, right, depth + 1);
    nodes[at].left = l;
    nodes[at].right = r;
    return at;
  }

  // Scores ceil(sqrt(d)) randomly drawn features. When none of them admits
  // a valid split (for example all are constant in this node), further
  // features are drawn one at a time until one does or all are exhausted.
  Split best_split(const std::vector<std::size_t>& idx) {
    const auto order = sample_without_replacement(data_.d, data_.d, rng_);
    std::vector<std::size_t> first(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(mtry_));
    std::sort(first.begin(), first.end());

    const std::size_t n = idx.size();
    double total = 0.0;
    for (auto i : idx) total += log_y_[i];
    Split best;
    std::vector<std::pair<double, double>> col(n);  // (feature value, log target)
    for (auto f : first) score_feature(idx, f, total, col, best);
    for (std::size_t k = mtry_; k < order.size() && best.feature < 0; ++k) {
      score_feature(idx, order[k], total, col, best);
    }
    return best;
  }

  void score_feature(const std::vector<std::size_t>& idx, std::size_t f, double total,
                     std::vector<std::pair<double, double>>& col, Split& best) const {
    const std::size_t n = idx.size();
    const std::size_t min_leaf = std::max<std::size_t>(1, params_.min_samples_leaf);
    const double parent = total * total / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
      col[r] = {data_.x[idx[r] * data_.d + f], log_y_[idx[r]]};
    }
    std::sort(col.begin(), col.end());
    double left_sum = 0.0;
    for (std::size_t r = 0; r + 1 < n; ++r) {
      left_sum += col[r].second;
      const std::size_t nl = r + 1, nr = n - nl;
      if (col[r].first == col[r + 1].first) continue;
      if (nl < min_leaf || nr < min_leaf) continue;
      const double right_sum = total - left_sum;
      const double gain = left_sum * left_sum / static_cast<double>(nl) +
                          right_sum * right_sum / static_cast<double>(nr) - parent;
      // Equal gains keep the lowest feature index, then the lowest threshold.
      const bool better = gain > best.gain ||
                          (gain == best.gain && best.feature >= 0 &&
                           static_cast<std::int32_t>(f) < best.feature);
      if (!better) continue;
      best.gain = gain;
      best.feature = static_cast<std::int32_t>(f);
      best.threshold = 0.5 * (col[r].first + col[r + 1].first);
      // Midpoint can round up to the right value for adjacent doubles.
      if (!(best.threshold < col[r + 1].first)) best.threshold = col[r].first;
    }
  }

  const TrainingData& data_;
  const std::vector<double>& log_y_;
  const ForestParams& params_;
  Rng& rng_;
  std::size_t mtry_ = 1;
};

}  // namespace detail

class Forest {
 public:
  Forest() = default;

  static Forest fit(const TrainingData& data, const ForestParams& params) {
    require(params.n_trees >= 1, ErrorCode::kInvalidArgument, "n_trees must be >= 1");
    require(data.n() >= 1 && data.d >= 1, ErrorCode::kInvalidArgument,
            "forest needs at least one sample and one feature");
    require(data.x.size() == data.n() * data.d, ErrorCode::kDimensionMismatch,
            "feature matrix does not match sample count");
    std::vector<double> log_y(data.n());
    for (std::size_t i = 0; i < data.n(); ++i) {
      require(std::isfinite(data.y[i]) && data.y[i] > 0.0, ErrorCode::kNonFinite,
              "targets must be finite and positive (sample " + std::to_string(i) + ")");
      log_y[i] = std::log(data.y[i]);
    }
    for (double v : data.x) {
      require(std::isfinite(v), ErrorCode::kNonFinite, "features must be finite");
    }

    Forest forest;
    forest.params_ = params;
    forest.params_.threads = 1;
    forest.n_features_ = data.d;
    forest.trees_.resize(params.n_trees);
    parallel_for(params.n_trees, params.threads, [&](std::size_t t) {
      Rng rng = make_rng(params.seed, "tree", t);
      std::vector<std::size_t> sample(data.n());
      if (params.bootstrap) {
        for (auto& s : sample) s = uniform_index(rng, data.n());
      } else {
        std::iota(sample.begin(), sample.end(), std::size_t{0});
      }
      detail::TreeBuilder builder(data, log_y, params, rng);
      forest.trees_[t] = builder.build(std::move(sample));
    });
    return forest;
  }

  /// exp(mean of per-tree leaf log-means), clamped to the raw target range
  /// of the leaves reached, then floored at kPredictionFloor.
  double predict(std::span<const double> x) const {
    require(x.size() == n_features_, ErrorCode::kDimensionMismatch,
            "expected " + std::to_string(n_features_) + " features, got " +
                std::to_string(x.size()));
    double sum = 0.0;
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (const auto& tree : trees_) {
      const auto& leaf = tree.leaf_for(x);
      sum += leaf.value;
      lo = std::min(lo, leaf.lo);
      hi = std::max(hi, leaf.hi);
    }
    const double mean = std::exp(sum / static_cast<double>(trees_.size()));
    return std::max(kPredictionFloor, std::clamp(mean, lo, hi));
  }

  const std::vector<RegressionTree>& trees() const { return trees_; }
  std::size_t n_features() const { return n_features_; }
  const ForestParams& params() const { return params_; }

  nlohmann::json to_json() const {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : trees_) {
      nlohmann::json f = nlohmann::json::array(), th = nlohmann::json::array(),
                     l = nlohmann::json::array(), r = nlohmann::json::array(),
                     v = nlohmann::json::array(), lo = nlohmann::json::array(),
                     hi = nlohmann::json::array();
      for (const auto& n : t.nodes()) {
        f.push_back(n.feature);
        th.push_back(n.threshold);
        l.push_back(n.left);
        r.push_back(n.right);
        v.push_back(n.value);
        lo.push_back(n.lo);
        hi.push_back(n.hi);
      }
      trees.push_back({{"feature", f}, {"threshold", th}, {"left", l}, {"right", r},
                       {"value", v}, {"lo", lo}, {"hi", hi}});
    }
    return {{"n_features", n_features_},
            {"params",
             {{"n_trees", params_.n_trees},
              {"max_depth", params_.max_depth},
              {"min_samples_leaf", params_.min_samples_leaf},
              {"max_features", params_.max_features},
              {"bootstrap", params_.bootstrap},
              {"seed", params_.seed}}},
            {"trees", trees}};
  }

  static Forest from_json(const nlohmann::json& j) {
    Forest f;
    try {
      f.n_features_ = j.at("n_features").get<std::size_t>();
      const auto& p = j.at("params");
      f.params_.n_trees = p.at("n_trees").get<std::size_t>();
      f.params_.max_depth = p.at("max_depth").get<std::size_t>();
      f.params_.min_samples_leaf = p.at("min_samples_leaf").get<std::size_t>();
      f.params_.max_features = p.at("max_features").get<std::size_t>();
      f.params_.bootstrap = p.at("bootstrap").get<bool>();
      f.params_.seed = p.at("seed").get<std::uint64_t>();
      for (const auto& jt : j.at("trees")) {
        RegressionTree t;
        const auto& feat = jt.at("feature");
        for (std::size_t i = 0; i < feat.size(); ++i) {
          TreeNode n;
          n.feature = feat[i].get<std::int32_t>();
          n.threshold = jt.at("threshold")[i].get<double>();
          n.left = jt.at("left")[i].get<std::int32_t>();
          n.right = jt.at("right")[i].get<std::int32_t>();
          n.value = jt.at("value")[i].get<double>();
          n.lo = jt.at("lo")[i].get<double>();
          n.hi = jt.at("hi")[i].get<double>();
          t.mutable_nodes().push_back(n);
        }
        f.trees_.push_back(std::move(t));
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kSchema, std::string("forest artifact: ") + e.what());
    }
    require(!f.trees_.empty(), ErrorCode::kSchema, "forest artifact has no trees");
    for (const auto& t : f.trees_) {
      const auto n = static_cast<std::int32_t>(t.nodes().size());
      require(n > 0, ErrorCode::kSchema, "forest artifact has an empty tree");
      for (const auto& node : t.nodes()) {
        if (node.is_leaf()) continue;
        require(node.left > 0 && node.left < n && node.right > 0 && node.right < n &&
                    static_cast<std::size_t>(node.feature) < f.n_features_,
                ErrorCode::kSchema, "forest artifact has a malformed split");
      }
    }
    return f;
  }

  friend bool operator==(const Forest&, const Forest&) = default;

 private:
  ForestParams params_;
  std::size_t n_features_ = 0;
  std::vector<RegressionTree> trees_;
};

}  // namespace dlperf
