// Copyright 2026 The castnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Box-constrained limited-memory quasi-Newton minimizer.
//
// Variables at a bound whose gradient pushes them outward are frozen for the
// step; the remaining free variables take a two-loop L-BFGS direction and a
// projected backtracking line search keeps iterates inside the box.

#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>

#include "castnet/linalg.hpp"

namespace castnet {

struct LbfgsbOptions {
  int memory = 10;
  int max_iterations = 15000;
  /// Relative decrease in f below which the solver stops.
  double ftol = 1e-12;
  /// Infinity norm of the projected gradient below which the solver stops.
  double pgtol = 1e-7;
  int max_backtracks = 40;
};

struct LbfgsbResult {
  Vector x;
  double f = 0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

/// Objective returns f(x) and writes the gradient into g.
using Objective = std::function<double(const Vector& x, Vector& g)>;

namespace detail {

inline Vector project(const Vector& x, const Vector& lo, const Vector& hi) {
  return x.cwiseMax(lo).cwiseMin(hi);
}

inline double projected_gradient_norm(const Vector& x, const Vector& g, const Vector& lo,
                                      const Vector& hi) {
  return (project(x - g, lo, hi) - x).cwiseAbs().maxCoeff();
}

}  // namespace detail

inline LbfgsbResult minimize_lbfgsb(const Objective& fn, Vector x, const Vector& lo, const Vector& hi,
                                    const LbfgsbOptions& opt = {}) {
  if (x.size() != lo.size() || x.size() != hi.size())
    throw ShapeError("bounds and start point differ in length");
  x = detail::project(x, lo, hi);
  Vector g(x.size());
  LbfgsbResult res;
  double f = fn(x, g);
  res.evaluations = 1;

  std::deque<Vector> s_hist, y_hist;
  std::deque<double> rho_hist;
  const Eigen::Index n = x.size();

  for (int it = 0; it < opt.max_iterations; ++it) {
    res.iterations = it;
    if (x.size() == 0 || detail::projected_gradient_norm(x, g, lo, hi) <= opt.pgtol) {
      res.converged = true;
      break;
    }
    // Free set: not pinned at a bound by an outward-pointing gradient.
    Eigen::Array<bool, Eigen::Dynamic, 1> free(n);
    for (Eigen::Index i = 0; i < n; ++i)
      free[i] = !((x[i] <= lo[i] && g[i] > 0) || (x[i] >= hi[i] && g[i] < 0));

    Vector q = free.select(g, 0.0);
    const std::size_t mem = s_hist.size();
    std::vector<double> alpha(mem);
    for (std::size_t j = mem; j-- > 0;) {
      alpha[j] = rho_hist[j] * s_hist[j].dot(q);
      q -= alpha[j] * y_hist[j];
    }
    if (mem > 0) q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    for (std::size_t j = 0; j < mem; ++j) {
      const double beta = rho_hist[j] * y_hist[j].dot(q);
      q += (alpha[j] - beta) * s_hist[j];
    }
    Vector d = free.select(-q, 0.0);
    double slope = g.dot(d);
    if (!(slope < 0)) {
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      d = free.select(-g, 0.0);
      slope = g.dot(d);
    }
    double step = 1.0;
    if (s_hist.empty()) step = std::min(1.0, 1.0 / std::max(d.cwiseAbs().maxCoeff(), 1e-300));

    Vector x_new, g_new(n);
    double f_new = f;
    bool accepted = false;
    for (int bt = 0; bt < opt.max_backtracks; ++bt) {
      x_new = detail::project(x + step * d, lo, hi);
      f_new = fn(x_new, g_new);
      ++res.evaluations;
      if (std::isfinite(f_new) && f_new <= f + 1e-4 * g.dot(x_new - x)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (!s_hist.empty()) {
        // Retry from steepest descent with a fresh memory.
        s_hist.clear();
        y_hist.clear();
        rho_hist.clear();
        continue;
      }
      break;
    }

    const Vector s = x_new - x;
    const Vector y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * y.squaredNorm() && sy > 0) {
      s_hist.push_back(s);
      y_hist.push_back(y);
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > opt.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    const double decrease = f - f_new;
    x = x_new;
    g = g_new;
    f = f_new;
    if (decrease <= opt.ftol * std::max({std::abs(f), std::abs(f + decrease), 1.0})) {
      res.converged = true;
      res.iterations = it + 1;
      break;
    }
  }
  res.x = std::move(x);
  res.f = f;
  return res;
}

}  // namespace castnet
