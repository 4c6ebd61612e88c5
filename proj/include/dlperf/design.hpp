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

// D-optimal subset selection: choose k of m candidate rows a_i maximizing
// det(sum_i lambda_i a_i a_i^T), solved with Fedorov exchange.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlperf/error.hpp"
#include "dlperf/rng.hpp"

namespace dlperf {

struct DesignProblem {
  Eigen::MatrixXd candidates;  // m x d, one candidate per row
  std::size_t budget = 1;
  // nullopt selects the automatic ridge: zero unless k < d or the design is
  // singular, in which case 1e-8 * trace scale is used and reported.
  std::optional<double> ridge;

  std::size_t m() const { return static_cast<std::size_t>(candidates.rows()); }
  std::size_t d() const { return static_cast<std::size_t>(candidates.cols()); }
};

struct DesignSelection {
  std::vector<std::uint8_t> lambda;    // length m, sum == k
  std::vector<std::size_t> selected;   // ascending indices where lambda == 1
  double log_det = 0.0;                // log det(M(lambda) + ridge I)
  double ridge = 0.0;
  std::size_t iterations = 0;          // exchanges in the winning restart
  std::size_t best_restart = 0;
  // log_det after every exchange, one trajectory per restart.
  std::vector<std::vector<double>> histories;
  // Largest |rank-one log_det - refactorized log_det| seen at refresh points.
  double max_refresh_drift = 0.0;
};

struct FedorovOptions {
  std::size_t restarts = 5;
  std::uint64_t seed = 0;
  double tolerance = 1e-10;
  std::size_t max_iterations = 0;  // 0 -> 10 * m * k
  std::size_t refresh_every = 10;
};

inline void validate(const DesignProblem& p) {
  require(p.m() >= 1 && p.d() >= 1, ErrorCode::kInvalidArgument,
          "design problem needs at least one candidate and one column");
  require(p.budget >= 1, ErrorCode::kInvalidArgument, "budget must be >= 1");
  require(p.budget <= p.m(), ErrorCode::kBudgetExceeded,
          "budget " + std::to_string(p.budget) + " exceeds " +
              std::to_string(p.m()) + " candidates");
  require(!p.ridge || (std::isfinite(*p.ridge) && *p.ridge >= 0.0),
          ErrorCode::kInvalidArgument, "ridge must be >= 0");
  require(p.candidates.allFinite(), ErrorCode::kNonFinite,
          "candidate features must be finite");
}

/// M = sum_i lambda_i a_i a_i^T.
inline Eigen::MatrixXd information_matrix(const DesignProblem& p,
                                          std::span<const std::uint8_t> lambda) {
  require(lambda.size() == p.m(), ErrorCode::kDimensionMismatch,
          "lambda has length " + std::to_string(lambda.size()) + ", expected " +
              std::to_string(p.m()));
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(p.d(), p.d());
  for (std::size_t i = 0; i < lambda.size(); ++i) {
    if (lambda[i]) m.selfadjointView<Eigen::Lower>().rankUpdate(p.candidates.row(i).transpose());
  }
  return m.selfadjointView<Eigen::Lower>();
}

namespace detail {

inline constexpr double kSingularPivot = 1e-12;

// LDLT of M + ridge I; returns nullopt when numerically singular.
inline std::optional<double> try_log_det(const Eigen::MatrixXd& m, double ridge) {
  Eigen::MatrixXd reg = m;
  reg.diagonal().array() += ridge;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(reg);
  if (ldlt.info() != Eigen::Success) return std::nullopt;
  const Eigen::VectorXd diag = ldlt.vectorD();
  const double scale = std::max(diag.cwiseAbs().maxCoeff(), reg.diagonal().cwiseAbs().maxCoeff());
  if (!(scale > 0.0)) return std::nullopt;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < diag.size(); ++i) {
    if (!(diag[i] > kSingularPivot * scale)) return std::nullopt;
    sum += std::log(diag[i]);
  }
  return sum;
}

}  // namespace detail

/// log det(M + ridge I) through an LDLT factorization.
inline double log_det(const Eigen::MatrixXd& m, double ridge) {
  require(m.rows() == m.cols(), ErrorCode::kDimensionMismatch, "matrix must be square");
  require(ridge >= 0.0, ErrorCode::kInvalidArgument, "ridge must be >= 0");
  const double mag = std::max(1.0, m.cwiseAbs().maxCoeff());
  require((m - m.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * mag,
          ErrorCode::kInvalidArgument, "matrix is not symmetric");
  auto ld = detail::try_log_det(m, ridge);
  require(ld.has_value(), ErrorCode::kSingular,
          "information matrix is singular (ridge " + std::to_string(ridge) + ")");
  return *ld;
}

/// a^T M^{-1} a.
inline double leverage(const Eigen::MatrixXd& m_inverse, const Eigen::VectorXd& a) {
  require(m_inverse.rows() == a.size() && m_inverse.cols() == a.size(),
          ErrorCode::kDimensionMismatch, "leverage: dimension mismatch");
  return a.dot(m_inverse * a);
}

/// 1e-8 times the mean squared row norm: the ridge used when the design is
/// rank-deficient.
inline double default_ridge(const DesignProblem& p) {
  const double scale = p.candidates.squaredNorm() / static_cast<double>(p.m());
  return 1e-8 * (scale > 0.0 ? scale : 1.0);
}

namespace detail {

inline DesignSelection make_selection(std::size_t m, std::vector<std::size_t> sel) {
  DesignSelection out;
  std::sort(sel.begin(), sel.end());
  out.lambda.assign(m, 0);
  for (auto i : sel) out.lambda[i] = 1;
  out.selected = std::move(sel);
  return out;
}

inline Eigen::MatrixXd regularized_information(const DesignProblem& p,
                                               std::span<const std::size_t> sel,
                                               double ridge) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(p.d(), p.d());
  for (auto i : sel) m.noalias() += p.candidates.row(i).transpose() * p.candidates.row(i);
  m.diagonal().array() += ridge;
  return m;
}

// Greedy build-up: repeatedly add the candidate with the largest leverage
// (largest log-det gain), starting from ridge_start * I.
inline std::vector<std::size_t> greedy_start(const DesignProblem& p, double ridge_start) {
  const std::size_t d = p.d();
  Eigen::MatrixXd inv = Eigen::MatrixXd::Identity(d, d) / ridge_start;
  std::vector<std::uint8_t> taken(p.m(), 0);
  std::vector<std::size_t> sel;
  for (std::size_t step = 0; step < p.budget; ++step) {
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t j = 0; j < p.m(); ++j) {
      if (taken[j]) continue;
      const Eigen::VectorXd a = p.candidates.row(j).transpose();
      const double lev = a.dot(inv * a);
      if (lev > best) {
        best = lev;
        arg = j;
      }
    }
    taken[arg] = 1;
    sel.push_back(arg);
    const Eigen::VectorXd a = p.candidates.row(arg).transpose();
    const Eigen::VectorXd u = inv * a;
    inv -= (u * u.transpose()) / (1.0 + a.dot(u));
  }
  return sel;
}

struct RestartResult {
  std::vector<std::size_t> selected;
  double log_det = 0.0;
  std::size_t iterations = 0;
  std::vector<double> history;
  double max_drift = 0.0;
};

inline RestartResult run_exchange(const DesignProblem& p, std::vector<std::size_t> sel,
                                  double ridge, const FedorovOptions& opt) {
  const std::size_t m = p.m();
  const std::size_t k = p.budget;
  const auto& a = p.candidates;

  auto start = try_log_det(regularized_information(p, sel, 0.0), ridge);
  if (!start) {
    sel = greedy_start(p, ridge > 0.0 ? ridge : default_ridge(p));
    start = try_log_det(regularized_information(p, sel, 0.0), ridge);
    require(start.has_value(), ErrorCode::kSingular,
            "design is singular for every reachable selection at ridge " +
                std::to_string(ridge) + " (budget below rank or degenerate candidates)");
  }

  RestartResult r;
  r.log_det = *start;
  r.history.push_back(r.log_det);
  Eigen::MatrixXd inv = regularized_information(p, sel, ridge).ldlt().solve(
      Eigen::MatrixXd::Identity(p.d(), p.d()));
  std::vector<std::uint8_t> in(m, 0);
  for (auto i : sel) in[i] = 1;

  const std::size_t cap = opt.max_iterations ? opt.max_iterations : 10 * m * k;
  while (r.iterations < cap && k < m) {
    // g_x = M^{-1} a_x for every candidate.
    const Eigen::MatrixXd g = a * inv;  // m x d (inv symmetric)
    Eigen::VectorXd lev(m);
    for (std::size_t x = 0; x < m; ++x) lev[x] = g.row(x).dot(a.row(x));

    std::vector<std::size_t> sorted_sel = sel;
    std::sort(sorted_sel.begin(), sorted_sel.end());
    struct Swap {
      double delta;
      std::size_t out, in;
    };
    std::vector<Swap> swaps;
    for (std::size_t i : sorted_sel) {
      for (std::size_t j = 0; j < m; ++j) {
        if (in[j]) continue;
        const double dij = g.row(i).dot(a.row(j));
        const double delta = lev[j] - lev[i] - (lev[i] * lev[j] - dij * dij);
        if (delta > opt.tolerance) swaps.push_back({delta, i, j});
      }
    }
    // Largest gain first; ties keep the scan order (lowest i, then lowest j).
    std::stable_sort(swaps.begin(), swaps.end(),
                     [](const Swap& x, const Swap& y) { return x.delta > y.delta; });
    if (swaps.empty()) break;

    auto apply = [&](const Swap& s) {
      in[s.out] = 0;
      in[s.in] = 1;
      std::replace(sel.begin(), sel.end(), s.out, s.in);
    };
    std::optional<Swap> taken;
    if (ridge > 0.0) {
      // With a ridge (k < d) M is badly conditioned and the rank-one gains
      // lose most of their digits to cancellation. Each candidate is
      // confirmed by refactorizing, which also keeps the trajectory
      // monotone, and the inverse is rebuilt from scratch afterwards.
      for (const Swap& s : swaps) {
        apply(s);
        const auto fresh = try_log_det(regularized_information(p, sel, 0.0), ridge);
        if (fresh && *fresh > r.log_det) {
          r.log_det = *fresh;
          taken = s;
          break;
        }
        apply({s.delta, s.in, s.out});  // undo
      }
      if (!taken) break;
      inv = regularized_information(p, sel, ridge).ldlt().solve(
          Eigen::MatrixXd::Identity(p.d(), p.d()));
      ++r.iterations;
    } else {
      taken = swaps.front();
      // Add a_j, then remove a_i (Sherman-Morrison twice).
      const Eigen::VectorXd aj = a.row(taken->in).transpose();
      const Eigen::VectorXd ai = a.row(taken->out).transpose();
      Eigen::VectorXd u = inv * aj;
      inv -= (u * u.transpose()) / (1.0 + aj.dot(u));
      u = inv * ai;
      inv += (u * u.transpose()) / (1.0 - ai.dot(u));
      r.log_det += std::log1p(taken->delta);
      apply(*taken);
      ++r.iterations;

      if (opt.refresh_every && r.iterations % opt.refresh_every == 0) {
        const Eigen::MatrixXd fresh_m = regularized_information(p, sel, 0.0);
        const auto fresh = try_log_det(fresh_m, 0.0);
        require(fresh.has_value(), ErrorCode::kSingular, "exchange reached a singular design");
        r.max_drift = std::max(r.max_drift, std::abs(*fresh - r.log_det));
        r.log_det = *fresh;
        inv = fresh_m.ldlt().solve(Eigen::MatrixXd::Identity(p.d(), p.d()));
      }
    }
    r.history.push_back(r.log_det);
  }
  // Same summation order as exhaustive_optimum, so equal subsets score equally.
  std::sort(sel.begin(), sel.end());
  const auto final_ld = try_log_det(regularized_information(p, sel, 0.0), ridge);
  require(final_ld.has_value(), ErrorCode::kSingular, "exchange reached a singular design");
  r.log_det = *final_ld;
  r.selected = std::move(sel);
  return r;
}

inline double resolve_ridge(const DesignProblem& p) {
  if (p.ridge) return *p.ridge;
  return p.budget < p.d() ? default_ridge(p) : 0.0;
}

}  // namespace detail

/// Single exchange run from an explicit starting selection.
inline DesignSelection fedorov_from(const DesignProblem& p,
                                    std::vector<std::size_t> initial,
                                    const FedorovOptions& opt = {}) {
  validate(p);
  require(initial.size() == p.budget, ErrorCode::kInvalidArgument,
          "initial selection size must equal the budget");
  const double ridge = detail::resolve_ridge(p);
  auto r = detail::run_exchange(p, std::move(initial), ridge, opt);
  auto out = detail::make_selection(p.m(), std::move(r.selected));
  out.log_det = r.log_det;
  out.ridge = ridge;
  out.iterations = r.iterations;
  out.histories.push_back(std::move(r.history));
  out.max_refresh_drift = r.max_drift;
  return out;
}

inline DesignSelection fedorov_exchange(const DesignProblem& p, const FedorovOptions& opt = {}) {
  validate(p);
  require(opt.restarts >= 1, ErrorCode::kInvalidArgument, "restarts must be >= 1");

  auto attempt = [&](double ridge) {
    DesignSelection best;
    best.log_det = -std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> histories;
    double drift = 0.0;
    for (std::size_t r = 0; r < opt.restarts; ++r) {
      Rng rng = make_rng(opt.seed, "fedorov", r);
      auto init = sample_without_replacement(p.m(), p.budget, rng);
      auto res = detail::run_exchange(p, std::move(init), ridge, opt);
      drift = std::max(drift, res.max_drift);
      histories.push_back(res.history);
      if (res.log_det > best.log_det) {
        best = detail::make_selection(p.m(), std::move(res.selected));
        best.log_det = res.log_det;
        best.iterations = res.iterations;
        best.best_restart = r;
      }
    }
    best.ridge = ridge;
    best.histories = std::move(histories);
    best.max_refresh_drift = drift;
    return best;
  };

  const double ridge = detail::resolve_ridge(p);
  if (p.ridge || ridge > 0.0) return attempt(ridge);
  try {
    return attempt(0.0);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kSingular) throw;
    return attempt(default_ridge(p));
  }
}

/// Global optimum by enumerating all C(m, k) subsets in lexicographic order;
/// ties keep the lexicographically first subset.
inline DesignSelection exhaustive_optimum(const DesignProblem& p,
                                          double max_subsets = 1e6) {
  validate(p);
  const std::size_t m = p.m(), k = p.budget;
  double count = 1.0;
  for (std::size_t i = 0; i < k; ++i) {
    count = count * static_cast<double>(m - i) / static_cast<double>(i + 1);
  }
  require(count <= max_subsets + 0.5, ErrorCode::kBudgetExceeded,
          "C(" + std::to_string(m) + "," + std::to_string(k) + ") exceeds enumeration bound");

  const double ridge = detail::resolve_ridge(p);
  std::vector<std::size_t> comb(k);
  for (std::size_t i = 0; i < k; ++i) comb[i] = i;
  std::optional<double> best;
  std::vector<std::size_t> arg;
  while (true) {
    auto ld = detail::try_log_det(detail::regularized_information(p, comb, 0.0), ridge);
    if (ld && (!best || *ld > *best)) {
      best = ld;
      arg = comb;
    }
    std::size_t i = k;
    while (i > 0 && comb[i - 1] == m - k + i - 1) --i;
    if (i == 0) break;
    ++comb[i - 1];
    for (std::size_t j = i; j < k; ++j) comb[j] = comb[j - 1] + 1;
  }
  require(best.has_value(), ErrorCode::kSingular,
          "every subset yields a singular information matrix");
  auto out = detail::make_selection(m, arg);
  out.log_det = *best;
  out.ridge = ridge;
  return out;
}

/// Zero-mean, unit-variance columns; constant columns are dropped and the
/// surviving source column indices are returned.
struct StandardizedRows {
  Eigen::MatrixXd rows;
  std::vector<std::size_t> kept_columns;
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;
};

inline StandardizedRows standardize_columns(const Eigen::MatrixXd& x) {
  require(x.rows() >= 1, ErrorCode::kInvalidArgument, "no rows to standardize");
  StandardizedRows out;
  const double n = static_cast<double>(x.rows());
  std::vector<double> means, scales;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const double mu = x.col(c).mean();
    const double var = (x.col(c).array() - mu).square().sum() / n;
    const double sd = std::sqrt(var);
    if (!(sd > 1e-12 * (std::abs(mu) + 1.0))) continue;
    out.kept_columns.push_back(static_cast<std::size_t>(c));
    means.push_back(mu);
    scales.push_back(sd);
  }
  out.rows.resize(x.rows(), static_cast<Eigen::Index>(out.kept_columns.size()));
  out.mean.resize(static_cast<Eigen::Index>(means.size()));
  out.scale.resize(static_cast<Eigen::Index>(scales.size()));
  for (std::size_t j = 0; j < out.kept_columns.size(); ++j) {
    const auto c = static_cast<Eigen::Index>(out.kept_columns[j]);
    const auto jj = static_cast<Eigen::Index>(j);
    out.mean[jj] = means[j];
    out.scale[jj] = scales[j];
    out.rows.col(jj) = (x.col(c).array() - means[j]) / scales[j];
  }
  return out;
}

}  // namespace dlperf
