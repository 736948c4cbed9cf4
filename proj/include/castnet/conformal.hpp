// Copyright 2026 The castnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Distribution-free prediction regions: split conformal prediction, the
// Bonferroni multi-horizon baseline, and CPST, which ranks spatially weighted,
// exponentially decayed residual scores across nodes and adjusts the queried
// quantile per node over a rolling calibration window.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "castnet/dataio.hpp"
#include "castnet/error.hpp"
#include "castnet/linalg.hpp"

namespace castnet {

/// Smallest score r with (fraction of scores <= r) >= level.
inline double empirical_quantile(std::span<const double> scores, double level) {
  if (scores.empty()) throw ContractError("quantile of an empty score set");
  if (!(level > 0.0 && level <= 1.0)) throw ContractError("quantile level must lie in (0, 1]");
  std::vector<double> s(scores.begin(), scores.end());
  const auto n = s.size();
  // Guard against level * n landing a rounding error above an integer.
  auto k = static_cast<std::size_t>(std::ceil(level * static_cast<double>(n) - 1e-9));
  k = std::clamp<std::size_t>(k, 1, n);
  std::nth_element(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k - 1), s.end());
  return s[k - 1];
}

/// One symmetric interval plus the quantities that produced it.
struct Region {
  double yhat = 0;
  double lower = 0;
  double upper = 0;
  double score = 0;      ///< weighted nonconformity score of the node (CPST)
  double rank = 0;       ///< r_hat
  double delta = 0;      ///< delta_hat
  double alpha_hat = 0;  ///< alpha - delta_hat after clamping
  double radius = 0;     ///< v_hat
  bool fallback = false; ///< produced by split conformal because the window was cold

  double width() const { return upper - lower; }
  bool covers(double y) const { return y >= lower && y <= upper; }
};

inline Region symmetric_region(double yhat, double radius) {
  Region r;
  r.yhat = yhat;
  r.radius = radius;
  r.lower = yhat - radius;
  r.upper = yhat + radius;
  return r;
}

inline void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ContractError("alpha must lie in (0, 1)");
}

/// [yhat - Q(1 - alpha), yhat + Q(1 - alpha)] over absolute calibration residuals.
inline Region scp_region(double yhat, std::span<const double> residuals, double alpha) {
  check_alpha(alpha);
  std::vector<double> abs_r(residuals.size());
  std::transform(residuals.begin(), residuals.end(), abs_r.begin(), [](double r) { return std::abs(r); });
  auto reg = symmetric_region(yhat, empirical_quantile(abs_r, 1.0 - alpha));
  reg.alpha_hat = alpha;
  return reg;
}

struct BonferroniResult {
  std::vector<Region> regions;  ///< one per horizon step
  double level = 0;             ///< per-step coverage level 1 - alpha / H
  /// alpha / H is below 1 / (n_calib + 1), so the per-step level cannot be
  /// met with the available calibration scores and the maximum is used.
  bool unattainable = false;
};

/// Split conformal per step at level 1 - alpha / H; calib[h] holds step h's residuals.
inline BonferroniResult bonferroni_region(std::span<const double> yhat, std::span<const std::vector<double>> calib,
                                          double alpha) {
  check_alpha(alpha);
  if (yhat.empty() || yhat.size() != calib.size()) throw ContractError("one calibration set per horizon step required");
  const double h = static_cast<double>(yhat.size());
  BonferroniResult out;
  out.level = 1.0 - alpha / h;
  for (std::size_t s = 0; s < yhat.size(); ++s) {
    if (alpha / h < 1.0 / (static_cast<double>(calib[s].size()) + 1.0)) out.unattainable = true;
    out.regions.push_back(scp_region(yhat[s], calib[s], alpha / h));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CPST

struct CpstParams {
  double eta = 0.95;
  double zeta = 0.05;
  double beta = 0.9;
  /// Grid winner on drifting_residual_stream(2000, 30, 1) with a path-graph neighborhood.
  double c_adj = -4.0;
  double alpha = 0.1;
  std::size_t n_calib = 288;

  void validate() const {
    if (std::abs(eta + zeta - 1.0) > 1e-12) throw ConfigError("eta + zeta must equal 1");
    if (eta < 0 || zeta < 0) throw ConfigError("eta and zeta must be nonnegative");
    if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in (0, 1]");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
    if (!std::isfinite(c_adj)) throw ConfigError("c_adj must be finite");
    if (n_calib == 0) throw ConfigError("n_calib must be positive");
  }
};

/// Grid the adjustment constant is selected from.
inline constexpr double kAdjustmentGrid[] = {-4, -2, -1, 1, 2, 4};

/// Neighbor lists from the nonzero off-diagonal entries of a (either direction).
inline std::vector<std::vector<std::size_t>> neighbor_lists(const Matrix& a) {
  if (a.rows() != a.cols()) throw ShapeError("adjacency must be square");
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(a.rows()));
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      if (i != j && (a(i, j) != 0 || a(j, i) != 0)) out[static_cast<std::size_t>(i)].push_back(static_cast<std::size_t>(j));
  return out;
}

/// sum_t' (eta/T_c |r_i,t'| + sum_{k in nbrs} zeta/T_c |r_k,t'|) beta^(T_c - t')
/// where abs_residuals is T_c x N, oldest row first.
inline double weighted_score(std::size_t node, const Matrix& abs_residuals,
                             const std::vector<std::vector<std::size_t>>& neighbors, double eta, double zeta,
                             double beta) {
  const auto tc = abs_residuals.rows();
  if (tc == 0) throw ContractError("weighted score needs a nonempty window");
  const auto i = static_cast<Eigen::Index>(node);
  double s = 0, decay = 1;
  for (Eigen::Index t = tc - 1; t >= 0; --t) {
    double term = eta * abs_residuals(t, i);
    for (auto k : neighbors[node]) term += zeta * abs_residuals(t, static_cast<Eigen::Index>(k));
    s += term / static_cast<double>(tc) * decay;
    decay *= beta;
  }
  return s;
}

/// |{j : scores_j <= scores_i}| / (N + 1).
inline double rank_quantile(std::size_t node, std::span<const double> scores) {
  if (node >= scores.size()) throw ContractError("node index out of range");
  const double si = scores[node];
  const auto c = std::count_if(scores.begin(), scores.end(), [si](double s) { return s <= si; });
  return static_cast<double>(c) / static_cast<double>(scores.size() + 1);
}

/// delta_hat = C (r - (1 - alpha)) below the target level, r - (1 - alpha) otherwise.
inline double adjust(double rank, double alpha, double c_adj) {
  const double gap = rank - (1.0 - alpha);
  return rank < 1.0 - alpha ? c_adj * gap : gap;
}

/// alpha - delta clamped to [1/(n+1), 1 - 1/(n+1)].
inline double adjusted_alpha(double alpha, double delta, std::size_t n_calib) {
  const double lo = 1.0 / (static_cast<double>(n_calib) + 1.0);
  return std::clamp(alpha - delta, lo, 1.0 - lo);
}

/// Rolling (y, y_hat) buffers, one per horizon step, each holding at most
/// n_calib observed time steps across all nodes.
class CalibrationWindow {
 public:
  CalibrationWindow(CpstParams params, std::vector<std::vector<std::size_t>> neighbors, std::size_t horizon)
      : params_(params), neighbors_(std::move(neighbors)), buffers_(horizon), fallback_(horizon) {
    params_.validate();
    if (horizon == 0) throw ContractError("horizon must be positive");
    for (const auto& nb : neighbors_)
      for (auto k : nb)
        if (k >= neighbors_.size()) throw ContractError("neighbor index out of range");
  }

  const CpstParams& params() const { return params_; }
  std::size_t nodes() const { return neighbors_.size(); }
  std::size_t horizon() const { return buffers_.size(); }
  std::size_t size(std::size_t step) const { return buffers_.at(step).size(); }
  bool warm(std::size_t step) const { return !buffers_.at(step).empty(); }
  const std::vector<std::vector<std::size_t>>& neighbors() const { return neighbors_; }

  /// Appends one observed time step for a horizon step, evicting the oldest beyond n_calib.
  void push(std::size_t step, const Vector& y, const Vector& yhat) {
    if (static_cast<std::size_t>(y.size()) != nodes() || static_cast<std::size_t>(yhat.size()) != nodes())
      throw ShapeError("calibration pair has the wrong node count");
    auto& buf = buffers_.at(step);
    buf.push_back({y, yhat});
    while (buf.size() > params_.n_calib) buf.pop_front();
  }

  /// Residuals used by split conformal while a step's window is still empty.
  void set_fallback(std::size_t step, std::vector<double> residuals) { fallback_.at(step) = std::move(residuals); }
  const std::vector<double>& fallback(std::size_t step) const { return fallback_.at(step); }

  /// |y - y_hat| as T_c x N, oldest first.
  Matrix abs_residuals(std::size_t step) const {
    const auto& buf = buffers_.at(step);
    Matrix r(static_cast<Eigen::Index>(buf.size()), static_cast<Eigen::Index>(nodes()));
    for (std::size_t t = 0; t < buf.size(); ++t)
      r.row(static_cast<Eigen::Index>(t)) = (buf[t].y - buf[t].yhat).cwiseAbs().transpose();
    return r;
  }

 private:
  struct Pair {
    Vector y, yhat;
  };
  CpstParams params_;
  std::vector<std::vector<std::size_t>> neighbors_;
  std::vector<std::deque<Pair>> buffers_;
  std::vector<std::vector<double>> fallback_;
};

/// Nonconformity scores of every node from an abs-residual window.
inline std::vector<double> node_scores(const Matrix& abs_residuals,
                                       const std::vector<std::vector<std::size_t>>& neighbors,
                                       const CpstParams& p) {
  std::vector<double> s(neighbors.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = weighted_score(i, abs_residuals, neighbors, p.eta, p.zeta, p.beta);
  return s;
}

/// CPST regions for all nodes from a score window (T_c x N abs residuals).
/// n_calib sets the alpha_hat clamp.
inline std::vector<Region> cpst_regions(const Vector& yhat, const Matrix& abs_residuals,
                                        const std::vector<std::vector<std::size_t>>& neighbors,
                                        const CpstParams& p) {
  if (static_cast<std::size_t>(yhat.size()) != neighbors.size()) throw ShapeError("prediction has the wrong node count");
  const auto scores = node_scores(abs_residuals, neighbors, p);
  std::vector<Region> out;
  out.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double rank = rank_quantile(i, scores);
    const double delta = adjust(rank, p.alpha, p.c_adj);
    const double a = adjusted_alpha(p.alpha, delta, p.n_calib);
    auto reg = symmetric_region(yhat[static_cast<Eigen::Index>(i)], empirical_quantile(scores, 1.0 - a));
    reg.score = scores[i];
    reg.rank = rank;
    reg.delta = delta;
    reg.alpha_hat = a;
    out.push_back(reg);
  }
  return out;
}

/// Regions for the next time step at one horizon step. A cold window falls
/// back to split conformal on the window's fallback residuals.
inline std::vector<Region> cpst_step(const Vector& yhat, const CalibrationWindow& w, std::size_t step) {
  if (w.warm(step)) return cpst_regions(yhat, w.abs_residuals(step), w.neighbors(), w.params());
  const auto& fb = w.fallback(step);
  if (fb.empty()) throw ContractError("calibration window for step " + std::to_string(step + 1) +
                                      " is cold and has no fallback residuals");
  std::vector<Region> out;
  for (Eigen::Index i = 0; i < yhat.size(); ++i) {
    auto r = scp_region(yhat[i], fb, w.params().alpha);
    r.fallback = true;
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Streams

struct StreamSummary {
  double coverage = 0;
  double mean_width = 0;
  std::size_t count = 0;
};

/// Runs CPST along a single-step residual stream (rows are time, columns
/// nodes). Row t is scored with the n_calib rows before it; rows before
/// burn_in (at least n_calib) only fill the window.
inline StreamSummary cpst_on_residuals(const Matrix& residuals, const std::vector<std::vector<std::size_t>>& neighbors,
                                       const CpstParams& p, std::size_t burn_in = 0) {
  p.validate();
  const auto T = static_cast<std::size_t>(residuals.rows());
  const std::size_t start = std::max(burn_in, p.n_calib);
  if (T <= start) throw ContractError("stream is not longer than the burn-in");
  const Matrix abs_r = residuals.cwiseAbs();
  const Vector zero = Vector::Zero(residuals.cols());
  StreamSummary s;
  double width = 0;
  std::size_t covered = 0;
  for (std::size_t t = start; t < T; ++t) {
    const Matrix window = abs_r.middleRows(static_cast<Eigen::Index>(t - p.n_calib), static_cast<Eigen::Index>(p.n_calib));
    const auto regs = cpst_regions(zero, window, neighbors, p);
    for (std::size_t i = 0; i < regs.size(); ++i) {
      covered += regs[i].covers(residuals(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(i)));
      width += regs[i].width();
    }
    s.count += regs.size();
  }
  s.coverage = static_cast<double>(covered) / static_cast<double>(s.count);
  s.mean_width = width / static_cast<double>(s.count);
  return s;
}

/// Split conformal with a fixed calibration block (rows [0, n_calib)) applied
/// to the remaining rows, pooling residuals across nodes.
inline StreamSummary scp_on_residuals(const Matrix& residuals, std::size_t n_calib, double alpha) {
  const auto T = static_cast<std::size_t>(residuals.rows());
  if (n_calib == 0 || n_calib >= T) throw ContractError("calibration block must be a proper prefix of the stream");
  const Matrix block = residuals.topRows(static_cast<Eigen::Index>(n_calib));
  const std::vector<double> calib(block.data(), block.data() + block.size());
  const double q = scp_region(0.0, calib, alpha).radius;
  StreamSummary s;
  std::size_t covered = 0;
  for (auto t = static_cast<Eigen::Index>(n_calib); t < residuals.rows(); ++t)
    for (Eigen::Index i = 0; i < residuals.cols(); ++i) covered += std::abs(residuals(t, i)) <= q;
  s.count = (T - n_calib) * static_cast<std::size_t>(residuals.cols());
  s.coverage = static_cast<double>(covered) / static_cast<double>(s.count);
  s.mean_width = 2 * q;
  return s;
}

/// Split conformal per step at level 1 - alpha / H on a rolling window of the
/// previous n_calib rows pooled across nodes; rows before n_calib only fill the window.
inline StreamSummary bonferroni_on_residuals(const Matrix& residuals, std::size_t n_calib, double alpha,
                                             std::size_t horizon, std::size_t burn_in = 0) {
  const auto T = static_cast<std::size_t>(residuals.rows());
  const std::size_t start = std::max(burn_in, n_calib);
  if (T <= start || horizon == 0) throw ContractError("stream is not longer than the burn-in");
  StreamSummary s;
  double width = 0;
  std::size_t covered = 0;
  for (std::size_t t = start; t < T; ++t) {
    const Matrix block = residuals.middleRows(static_cast<Eigen::Index>(t - n_calib), static_cast<Eigen::Index>(n_calib));
    const std::vector<double> calib(block.data(), block.data() + block.size());
    const double q = scp_region(0.0, calib, alpha / static_cast<double>(horizon)).radius;
    for (Eigen::Index i = 0; i < residuals.cols(); ++i) covered += std::abs(residuals(static_cast<Eigen::Index>(t), i)) <= q;
    width += 2 * q * static_cast<double>(residuals.cols());
    s.count += static_cast<std::size_t>(residuals.cols());
  }
  s.coverage = static_cast<double>(covered) / static_cast<double>(s.count);
  s.mean_width = width / static_cast<double>(s.count);
  return s;
}

struct AdjustmentChoice {
  double c_adj = 0;
  StreamSummary summary;
  std::vector<StreamSummary> grid;  ///< one entry per candidate, grid order
};

/// Narrowest candidate whose coverage reaches 1 - alpha; when none does, the
/// best-covering one (first in grid order on ties). Coverage and width are
/// pooled over all streams.
inline AdjustmentChoice select_adjustment(std::span<const Matrix> streams,
                                          const std::vector<std::vector<std::size_t>>& neighbors, CpstParams p,
                                          std::span<const double> grid, std::size_t burn_in = 0) {
  if (grid.empty()) throw ContractError("adjustment grid is empty");
  if (streams.empty()) throw ContractError("adjustment selection needs at least one stream");
  AdjustmentChoice best;
  bool have_valid = false, have_any = false;
  for (double c : grid) {
    p.c_adj = c;
    StreamSummary s;
    double covered = 0, width = 0;
    for (const auto& m : streams) {
      const auto one = cpst_on_residuals(m, neighbors, p, burn_in);
      covered += one.coverage * static_cast<double>(one.count);
      width += one.mean_width * static_cast<double>(one.count);
      s.count += one.count;
    }
    s.coverage = covered / static_cast<double>(s.count);
    s.mean_width = width / static_cast<double>(s.count);
    best.grid.push_back(s);
    const bool valid = s.coverage >= 1.0 - p.alpha;
    bool take = false;
    if (!have_any) take = true;
    else if (valid != have_valid) take = valid;
    else if (valid) take = s.mean_width < best.summary.mean_width;
    else take = s.coverage > best.summary.coverage ||
                (s.coverage == best.summary.coverage && s.mean_width < best.summary.mean_width);
    if (take) {
      best.c_adj = c;
      best.summary = s;
      have_valid = have_valid || valid;
      have_any = true;
    }
  }
  return best;
}

inline AdjustmentChoice select_adjustment(const Matrix& stream, const std::vector<std::vector<std::size_t>>& neighbors,
                                          const CpstParams& p, std::span<const double> grid, std::size_t burn_in = 0) {
  return select_adjustment(std::span<const Matrix>(&stream, 1), neighbors, p, grid, burn_in);
}

/// Drifting AR(1) residual stream used to pick the adjustment constant:
/// r_t = mu_t + e_t, e_t = 0.5 e_{t-1} + N(0, 1), mu rising linearly to 3.
inline Matrix drifting_residual_stream(std::size_t length, std::size_t nodes, std::uint64_t seed, double drift = 3.0,
                                       double phi = 0.5) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix r(static_cast<Eigen::Index>(length), static_cast<Eigen::Index>(nodes));
  Vector e = Vector::Zero(static_cast<Eigen::Index>(nodes));
  for (std::size_t t = 0; t < length; ++t) {
    for (Eigen::Index i = 0; i < e.size(); ++i) e[i] = phi * e[i] + n(rng);
    const double mu = length > 1 ? drift * static_cast<double>(t) / static_cast<double>(length - 1) : 0.0;
    r.row(static_cast<Eigen::Index>(t)) = (e.array() + mu).matrix().transpose();
  }
  return r;
}

/// Forecast-time CPST over consecutive windows. Window w's truth at step h
/// (1-based) is observed h steps after its forecast origin, so it enters the
/// step-h buffer just before window w + h is scored.
class CpstStream {
 public:
  explicit CpstStream(CalibrationWindow window) : window_(std::move(window)), pending_(window_.horizon()) {}

  const CalibrationWindow& window() const { return window_; }

  /// Seeds step buffers with already-observed (N x H) truth/prediction pairs, oldest first.
  void seed(std::span<const Matrix> y, std::span<const Matrix> yhat) {
    if (y.size() != yhat.size()) throw ContractError("seed truths and predictions differ in count");
    for (std::size_t w = 0; w < y.size(); ++w)
      for (std::size_t h = 0; h < window_.horizon(); ++h)
        window_.push(h, y[w].col(static_cast<Eigen::Index>(h)), yhat[w].col(static_cast<Eigen::Index>(h)));
  }

  /// Regions (N x H) for the next window, then queues its truth.
  std::vector<std::vector<Region>> step(const Matrix& yhat, const Matrix& y) {
    const std::size_t H = window_.horizon();
    for (std::size_t h = 0; h < H; ++h) {
      auto& q = pending_[h];
      // Entries queued h+1 windows ago have been observed by now.
      while (q.size() > h) {
        window_.push(h, q.front().first, q.front().second);
        q.pop_front();
      }
    }
    std::vector<std::vector<Region>> out(H);
    for (std::size_t h = 0; h < H; ++h) {
      out[h] = cpst_step(yhat.col(static_cast<Eigen::Index>(h)), window_, h);
      pending_[h].emplace_back(y.col(static_cast<Eigen::Index>(h)), yhat.col(static_cast<Eigen::Index>(h)));
    }
    return out;
  }

 private:
  CalibrationWindow window_;
  std::vector<std::deque<std::pair<Vector, Vector>>> pending_;
};

// ---------------------------------------------------------------------------
// Output

struct RegionRow {
  Timestamp timestamp = 0;
  std::size_t node = 0;
  std::size_t step = 0;  ///< 1-based
  Region region;
  double y = 0;
};

namespace detail {

// Shortest text that reads back to the same double.
inline std::string shortest(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace detail

inline void write_regions_csv(std::ostream& os, std::span<const RegionRow> rows, double alpha) {
  using detail::shortest;
  os << "# alpha=" << shortest(alpha) << '\n';
  os << "timestamp,node,step,yhat,L,U,y,covered\n";
  for (const auto& r : rows)
    os << format_timestamp(r.timestamp) << ',' << r.node << ',' << r.step << ',' << shortest(r.region.yhat) << ','
       << shortest(r.region.lower) << ',' << shortest(r.region.upper) << ',' << shortest(r.y) << ','
       << (r.region.covers(r.y) ? 1 : 0) << '\n';
}

}  // namespace castnet
