// Copyright 2026 The castnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Point-forecast errors and interval coverage/efficiency.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "castnet/error.hpp"
#include "castnet/linalg.hpp"

namespace castnet {

inline constexpr double kMapeEpsilon = 1e-6;

struct PointErrors {
  double mae = 0;
  double rmse = 0;
  double mape = 0;              ///< percent; 0 and mape_defined=false when every entry is masked
  bool mape_defined = true;
  std::size_t mape_masked = 0;  ///< entries skipped by the |y| < epsilon guard
  std::size_t count = 0;
};

/// MAE, RMSE and MAPE (percent) over all entries. With mask_zero, MAPE skips
/// entries whose |y| < 1e-6; otherwise such entries make MAPE undefined.
inline PointErrors mae_rmse_mape(const Matrix& y, const Matrix& yhat, bool mask_zero = true) {
  if (y.rows() != yhat.rows() || y.cols() != yhat.cols()) throw ShapeError("truth and prediction shapes differ");
  if (y.size() == 0) throw ContractError("metrics of an empty set");
  PointErrors e;
  e.count = static_cast<std::size_t>(y.size());
  double abs_sum = 0, sq_sum = 0, pct_sum = 0;
  std::size_t pct_n = 0;
  for (Eigen::Index i = 0; i < y.rows(); ++i)
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      const double d = y(i, j) - yhat(i, j);
      abs_sum += std::abs(d);
      sq_sum += d * d;
      if (std::abs(y(i, j)) < kMapeEpsilon) {
        ++e.mape_masked;
        continue;
      }
      pct_sum += std::abs(d / y(i, j));
      ++pct_n;
    }
  const auto n = static_cast<double>(e.count);
  e.mae = abs_sum / n;
  e.rmse = std::sqrt(sq_sum / n);
  if (pct_n == 0 || (!mask_zero && e.mape_masked > 0)) {
    e.mape_defined = false;
    e.mape = 0;
  } else {
    e.mape = 100.0 * pct_sum / static_cast<double>(pct_n);
  }
  return e;
}

struct Aggregate {
  double mean = 0, std = 0, max = 0, min = 0;
};

/// Population mean/std/max/min.
inline Aggregate aggregate(std::span<const double> v) {
  if (v.empty()) throw ContractError("aggregate of an empty set");
  Aggregate a;
  a.max = *std::max_element(v.begin(), v.end());
  a.min = *std::min_element(v.begin(), v.end());
  for (double x : v) a.mean += x;
  a.mean /= static_cast<double>(v.size());
  for (double x : v) a.std += (x - a.mean) * (x - a.mean);
  a.std = std::sqrt(a.std / static_cast<double>(v.size()));
  return a;
}

struct IntervalMetrics {
  std::vector<double> coverage;    ///< per node
  std::vector<double> efficiency;  ///< per node mean width
  Aggregate coverage_summary, efficiency_summary;
};

/// lower, upper, y are nodes x samples. A truth on a boundary counts as covered.
inline IntervalMetrics coverage_efficiency(const Matrix& lower, const Matrix& upper, const Matrix& y) {
  if (lower.rows() != y.rows() || upper.rows() != y.rows() || lower.cols() != y.cols() || upper.cols() != y.cols())
    throw ShapeError("interval and truth shapes differ");
  if (y.size() == 0) throw ContractError("coverage of an empty set");
  IntervalMetrics m;
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    std::size_t hit = 0;
    double width = 0;
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
      if (lower(i, j) > upper(i, j)) throw ContractError("interval with lower bound above upper bound");
      hit += y(i, j) >= lower(i, j) && y(i, j) <= upper(i, j);
      width += upper(i, j) - lower(i, j);
    }
    m.coverage.push_back(static_cast<double>(hit) / static_cast<double>(y.cols()));
    m.efficiency.push_back(width / static_cast<double>(y.cols()));
  }
  m.coverage_summary = aggregate(m.coverage);
  m.efficiency_summary = aggregate(m.efficiency);
  return m;
}

inline const std::vector<std::size_t> kReportSteps{3, 6, 12};

struct HorizonErrors {
  std::string label;  ///< "step 3", ..., "average"
  PointErrors errors;
};

struct EvalReport {
  std::vector<HorizonErrors> horizons;
  bool has_intervals = false;
  IntervalMetrics intervals;

  void write_csv(std::ostream& os) const {
    os << "horizon,mae,rmse,mape,mape_masked\n" << std::setprecision(10);
    for (const auto& h : horizons) {
      os << h.label << ',' << h.errors.mae << ',' << h.errors.rmse << ',';
      if (h.errors.mape_defined) os << h.errors.mape;
      else os << "nan";
      os << ',' << h.errors.mape_masked << '\n';
    }
    if (has_intervals) {
      os << "\nstatistic,coverage,efficiency\n";
      const auto& c = intervals.coverage_summary;
      const auto& e = intervals.efficiency_summary;
      os << "mean," << c.mean << ',' << e.mean << '\n'
         << "std," << c.std << ',' << e.std << '\n'
         << "max," << c.max << ',' << e.max << '\n'
         << "min," << c.min << ',' << e.min << '\n';
    }
  }

  void write_table(std::ostream& os) const {
    os << std::left << std::setw(10) << "horizon" << std::right << std::setw(12) << "MAE" << std::setw(12) << "RMSE"
       << std::setw(12) << "MAPE(%)" << '\n'
       << std::fixed << std::setprecision(4);
    for (const auto& h : horizons) {
      os << std::left << std::setw(10) << h.label << std::right << std::setw(12) << h.errors.mae << std::setw(12)
         << h.errors.rmse << std::setw(12);
      if (h.errors.mape_defined) os << h.errors.mape;
      else os << "n/a";
      os << '\n';
    }
    if (has_intervals) {
      const auto& c = intervals.coverage_summary;
      const auto& e = intervals.efficiency_summary;
      os << '\n' << std::left << std::setw(10) << "" << std::right << std::setw(12) << "coverage" << std::setw(12)
         << "efficiency" << '\n';
      auto row = [&](const char* name, double a, double b) {
        os << std::left << std::setw(10) << name << std::right << std::setw(12) << a << std::setw(12) << b << '\n';
      };
      row("mean", c.mean, e.mean);
      row("std", c.std, e.std);
      row("max", c.max, e.max);
      row("min", c.min, e.min);
    }
    os.unsetf(std::ios::fixed);
  }
};

/// Errors at each reporting step (1-based, those within the horizon) and over
/// all steps. y and yhat hold one N x H matrix per window.
inline EvalReport evaluate_forecasts(std::span<const Matrix> y, std::span<const Matrix> yhat,
                                     std::span<const std::size_t> steps = kReportSteps) {
  if (y.empty() || y.size() != yhat.size()) throw ContractError("forecast and truth windows must align");
  const auto N = y[0].rows(), H = y[0].cols();
  EvalReport r;
  auto gather = [&](Eigen::Index col0, Eigen::Index ncols) {
    Matrix a(N * ncols, static_cast<Eigen::Index>(y.size())), b(a.rows(), a.cols());
    for (std::size_t w = 0; w < y.size(); ++w) {
      if (y[w].rows() != N || y[w].cols() != H || yhat[w].rows() != N || yhat[w].cols() != H)
        throw ShapeError("window shapes differ");
      const Matrix ys = y[w].middleCols(col0, ncols), ps = yhat[w].middleCols(col0, ncols);
      a.col(static_cast<Eigen::Index>(w)) = ys.reshaped();
      b.col(static_cast<Eigen::Index>(w)) = ps.reshaped();
    }
    return mae_rmse_mape(a, b);
  };
  for (auto s : steps)
    if (s >= 1 && static_cast<Eigen::Index>(s) <= H)
      r.horizons.push_back({"step " + std::to_string(s), gather(static_cast<Eigen::Index>(s) - 1, 1)});
  r.horizons.push_back({"average", gather(0, H)});
  return r;
}

}  // namespace castnet
