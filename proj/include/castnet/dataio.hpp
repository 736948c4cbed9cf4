// Copyright 2026 The castnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Series tables, synthetic SVAR generation, CSV ingestion, chronological
// splitting, normalization, windowing and calendar features.

#pragma once

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "castnet/dynotears.hpp"
#include "castnet/error.hpp"
#include "castnet/linalg.hpp"

namespace castnet {

/// Minutes since 1970-01-01 00:00 UTC.
using Timestamp = std::int64_t;

inline Timestamp make_timestamp(int y, unsigned mo, unsigned d, int hh = 0, int mm = 0) {
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{mo}, day{d}};
  if (!ymd.ok()) throw ContractError("invalid calendar date");
  return static_cast<Timestamp>(sys_days{ymd}.time_since_epoch().count()) * 1440 + hh * 60 + mm;
}

/// Parses "YYYY-MM-DD HH:MM" with optional ":SS" (seconds must be zero).
inline Timestamp parse_timestamp(const std::string& text) {
  int y = 0, hh = 0, mm = 0, ss = 0;
  unsigned mo = 0, d = 0;
  char sep = 0;
  const int got = std::sscanf(text.c_str(), "%d-%u-%u%c%d:%d:%d", &y, &mo, &d, &sep, &hh, &mm, &ss);
  if (got < 6 || (sep != ' ' && sep != 'T') || hh < 0 || hh > 23 || mm < 0 || mm > 59 || ss != 0)
    throw IngestionError("unparseable timestamp '" + text + "'");
  return make_timestamp(y, mo, d, hh, mm);
}

inline std::string format_timestamp(Timestamp t) {
  using namespace std::chrono;
  const auto days = static_cast<int>(t >= 0 ? t / 1440 : (t - 1439) / 1440);
  const int minutes = static_cast<int>(t - static_cast<Timestamp>(days) * 1440);
  const year_month_day ymd{sys_days{std::chrono::days{days}}};
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u %02d:%02d", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), minutes / 60,
                minutes % 60);
  return buf;
}

/// One-hot calendar groups: 5-minute slot in the hour (12), hour of day (24),
/// day of week with Monday = 0 (7).
struct TimeFeatures {
  static constexpr std::size_t kSlots = 12, kHours = 24, kDays = 7;
  static constexpr std::size_t kWidth = kSlots + kHours + kDays;

  std::size_t slot = 0, hour = 0, weekday = 0;

  static TimeFeatures from(Timestamp t) {
    using namespace std::chrono;
    const Timestamp day_index = t >= 0 ? t / 1440 : (t - 1439) / 1440;
    const auto minute_of_day = static_cast<std::size_t>(t - day_index * 1440);
    const std::chrono::weekday wd{sys_days{std::chrono::days{day_index}}};
    TimeFeatures f;
    f.slot = (minute_of_day % 60) / 5;
    f.hour = minute_of_day / 60;
    f.weekday = wd.iso_encoding() - 1;
    return f;
  }

  std::array<double, kWidth> one_hot() const {
    std::array<double, kWidth> v{};
    v[slot] = 1;
    v[kSlots + hour] = 1;
    v[kSlots + kHours + weekday] = 1;
    return v;
  }
};

struct SeriesTable {
  std::vector<Timestamp> timestamps;
  Matrix values;  ///< T x N
  std::vector<std::string> node_ids;
  /// true where a value is missing and could not be forward-filled.
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic> missing;

  std::size_t length() const { return timestamps.size(); }
  std::size_t nodes() const { return static_cast<std::size_t>(values.cols()); }
  Timestamp step() const { return timestamps.size() > 1 ? timestamps[1] - timestamps[0] : 5; }

  void validate() const {
    if (static_cast<std::size_t>(values.rows()) != timestamps.size())
      throw ContractError("timestamp count does not match value rows");
    if (node_ids.size() != nodes()) throw ContractError("node id count does not match value columns");
    for (std::size_t i = 1; i < timestamps.size(); ++i)
      if (timestamps[i] - timestamps[i - 1] != step() || step() <= 0)
        throw ContractError("timestamps are not a uniform increasing grid");
  }
};

struct GroundTruth {
  CausalGraphSet graphs;
  Matrix adjacency;  ///< symmetric, nonnegative, zero diagonal
};

struct SyntheticSpec {
  std::size_t nodes = 30;
  int lags = 1;
  double density = 0.1;
  double weight_min = 0.3;
  double weight_max = 0.8;
  double noise = 0.5;
  std::size_t length = 4000;
  std::uint64_t seed = 7;
  std::size_t burn_in = 200;
  double max_spectral_radius = 0.95;
  /// Expected number of extra geometric neighbours per node in the adjacency.
  double geometric_degree = 2.0;
  Timestamp start = make_timestamp(2023, 7, 1);
  Timestamp step_minutes = 5;
};

namespace detail {

// Topological order of the support of c (edge i -> j when c(i, j) != 0).
inline std::vector<Eigen::Index> topological_order(const Matrix& c) {
  const Eigen::Index n = c.rows();
  std::vector<int> indeg(static_cast<std::size_t>(n), 0);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (c(i, j) != 0) ++indeg[static_cast<std::size_t>(j)];
  std::vector<Eigen::Index> order, ready;
  for (Eigen::Index j = 0; j < n; ++j)
    if (!indeg[static_cast<std::size_t>(j)]) ready.push_back(j);
  while (!ready.empty()) {
    const Eigen::Index u = ready.front();
    ready.erase(ready.begin());
    order.push_back(u);
    for (Eigen::Index j = 0; j < n; ++j)
      if (c(u, j) != 0 && --indeg[static_cast<std::size_t>(j)] == 0) ready.push_back(j);
  }
  if (static_cast<Eigen::Index>(order.size()) != n)
    throw ContractError("contemporaneous ground-truth matrix is cyclic");
  return order;
}

}  // namespace detail

/// Spectral radius of the lag-companion matrix of x_t = sum_k x_{t-k} A_k (I - C)^{-1}.
inline double companion_spectral_radius(const CausalGraphSet& g) {
  const Eigen::Index N = g.nodes();
  const int P = g.lags();
  if (P == 0) return 0.0;
  const Matrix inv = (Matrix::Identity(N, N) - g.intra).inverse();
  Matrix comp = Matrix::Zero(N * P, N * P);
  // Column-vector form: x_t = sum_k (A_k B)^T x_{t-k}.
  for (int k = 0; k < P; ++k)
    comp.block(0, k * N, N, N) = (g.lagged[static_cast<std::size_t>(k)] * inv).transpose();
  if (P > 1) comp.block(N, 0, N * (P - 1), N * (P - 1)) = Matrix::Identity(N * (P - 1), N * (P - 1));
  return Eigen::EigenSolver<Matrix>(comp, false).eigenvalues().cwiseAbs().maxCoeff();
}

/// Simulates x_t^T = x_t^T C + sum_k x_{t-k}^T A_k + z_t^T with z ~ N(0, noise^2).
/// The first burn_in draws are discarded.
inline Matrix simulate_svar(const CausalGraphSet& g, std::size_t length, double noise,
                            std::uint64_t seed, std::size_t burn_in = 200) {
  const auto order = detail::topological_order(g.intra);
  const Eigen::Index N = g.nodes();
  const int P = g.lags();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, noise);
  const std::size_t total = length + burn_in;
  Matrix x = Matrix::Zero(static_cast<Eigen::Index>(total), N);
  for (std::size_t t = 0; t < total; ++t) {
    const auto ti = static_cast<Eigen::Index>(t);
    Eigen::RowVectorXd drive(N);
    for (Eigen::Index j = 0; j < N; ++j) drive[j] = z(rng);
    for (int k = 1; k <= P && static_cast<std::size_t>(k) <= t; ++k)
      drive += x.row(ti - k) * g.lagged[static_cast<std::size_t>(k - 1)];
    for (auto j : order) {
      double v = drive[j];
      for (Eigen::Index i = 0; i < N; ++i)
        if (g.intra(i, j) != 0) v += x(ti, i) * g.intra(i, j);
      x(ti, j) = v;
    }
  }
  return x.bottomRows(static_cast<Eigen::Index>(length));
}

struct SyntheticData {
  SeriesTable table;
  GroundTruth truth;
};

inline SyntheticData generate_svar(const SyntheticSpec& spec) {
  if (spec.nodes == 0 || spec.lags < 1 || spec.length == 0)
    throw ContractError("synthetic spec needs nodes >= 1, lags >= 1, length >= 1");
  if (spec.density < 0 || spec.density > 1 || spec.weight_min > spec.weight_max || spec.noise < 0)
    throw ContractError("synthetic spec has invalid density, weight range or noise");
  const auto N = static_cast<Eigen::Index>(spec.nodes);
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> mag(spec.weight_min, spec.weight_max);
  auto weight = [&] { return (unit(rng) < 0.5 ? -1.0 : 1.0) * mag(rng); };

  GroundTruth truth;
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(N));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  truth.graphs.intra = Matrix::Zero(N, N);
  for (Eigen::Index a = 0; a < N; ++a)
    for (Eigen::Index b = a + 1; b < N; ++b)
      if (unit(rng) < spec.density) truth.graphs.intra(perm[static_cast<std::size_t>(a)], perm[static_cast<std::size_t>(b)]) = weight();
  for (int k = 0; k < spec.lags; ++k) {
    Matrix a = Matrix::Zero(N, N);
    for (Eigen::Index i = 0; i < N; ++i)
      for (Eigen::Index j = 0; j < N; ++j)
        if (unit(rng) < spec.density) a(i, j) = weight();
    truth.graphs.lagged.push_back(std::move(a));
  }
  while (companion_spectral_radius(truth.graphs) >= spec.max_spectral_radius)
    for (auto& a : truth.graphs.lagged) a *= 0.9;

  // Physical adjacency: symmetrized contemporaneous support plus random
  // geometric edges between nearby points in the unit square.
  truth.adjacency = Matrix::Zero(N, N);
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index j = 0; j < N; ++j)
      if (truth.graphs.intra(i, j) != 0) truth.adjacency(i, j) = truth.adjacency(j, i) = 1.0;
  std::vector<std::array<double, 2>> pos(static_cast<std::size_t>(N));
  for (auto& p : pos) p = {unit(rng), unit(rng)};
  const double radius = std::sqrt(spec.geometric_degree / (std::numbers::pi * static_cast<double>(N)));
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index j = i + 1; j < N; ++j) {
      const auto& p = pos[static_cast<std::size_t>(i)];
      const auto& q = pos[static_cast<std::size_t>(j)];
      if (std::hypot(p[0] - q[0], p[1] - q[1]) < radius) truth.adjacency(i, j) = truth.adjacency(j, i) = 1.0;
    }

  SyntheticData out;
  out.truth = std::move(truth);
  out.table.values = simulate_svar(out.truth.graphs, spec.length, spec.noise, rng(), spec.burn_in);
  out.table.timestamps.resize(spec.length);
  for (std::size_t t = 0; t < spec.length; ++t)
    out.table.timestamps[t] = spec.start + static_cast<Timestamp>(t) * spec.step_minutes;
  for (std::size_t i = 0; i < spec.nodes; ++i) out.table.node_ids.push_back("node_" + std::to_string(i));
  out.table.missing = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(
      static_cast<Eigen::Index>(spec.length), N, false);
  return out;
}

// ---------------------------------------------------------------------------
// CSV and edge-list files

inline void write_series_csv(std::ostream& os, const SeriesTable& t) {
  os << "timestamp";
  for (const auto& id : t.node_ids) os << ',' << id;
  os << '\n' << std::setprecision(17);
  for (std::size_t r = 0; r < t.length(); ++r) {
    os << format_timestamp(t.timestamps[r]);
    for (std::size_t c = 0; c < t.nodes(); ++c) {
      os << ',';
      const auto ri = static_cast<Eigen::Index>(r), ci = static_cast<Eigen::Index>(c);
      const bool miss = t.missing.size() && t.missing(ri, ci);
      if (!miss) os << t.values(ri, ci);
    }
    os << '\n';
  }
}

inline void save_series_csv(const std::string& path, const SeriesTable& t) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  write_series_csv(os, t);
}

/// Longest run of consecutive missing cells that is forward-filled.
inline constexpr int kMaxForwardFill = 3;

inline SeriesTable read_series_csv(std::istream& is) {
  SeriesTable t;
  std::string line;
  if (!std::getline(is, line)) throw IngestionError("empty series file");
  {
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    if (cell != "timestamp") throw IngestionError("header must start with 'timestamp'");
    while (std::getline(ss, cell, ',')) t.node_ids.push_back(cell);
  }
  if (t.node_ids.empty()) throw IngestionError("header lists no nodes");
  const std::size_t N = t.node_ids.size();
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    t.timestamps.push_back(parse_timestamp(cell));
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) {
      if (cell.empty() || cell == "nan" || cell == "NaN") {
        row.push_back(std::numeric_limits<double>::quiet_NaN());
      } else {
        try {
          std::size_t used = 0;
          row.push_back(std::stod(cell, &used));
          if (used != cell.size()) throw std::invalid_argument(cell);
        } catch (const std::exception&) {
          throw IngestionError("line " + std::to_string(line_no) + ": bad value '" + cell + "'");
        }
      }
    }
    if (!line.empty() && line.back() == ',') row.push_back(std::numeric_limits<double>::quiet_NaN());
    if (row.size() != N)
      throw IngestionError("line " + std::to_string(line_no) + ": expected " + std::to_string(N) +
                           " values, found " + std::to_string(row.size()));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IngestionError("series file has no data rows");

  if (t.timestamps.size() > 1) {
    const Timestamp step = t.timestamps[1] - t.timestamps[0];
    std::ostringstream bad;
    std::size_t nbad = 0;
    for (std::size_t i = 1; i < t.timestamps.size(); ++i) {
      const Timestamp d = t.timestamps[i] - t.timestamps[i - 1];
      if (d != step || d <= 0) {
        bad << (nbad++ ? "; " : "") << "data row " << i + 1 << " (" << format_timestamp(t.timestamps[i])
            << ") follows a gap of " << d << " minutes";
      }
    }
    if (nbad) throw IngestionError("non-uniform timestamps (expected step " + std::to_string(step) +
                                   " minutes): " + bad.str());
  }

  const auto T = static_cast<Eigen::Index>(rows.size());
  t.values.resize(T, static_cast<Eigen::Index>(N));
  t.missing = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(T, static_cast<Eigen::Index>(N), false);
  for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(N); ++c) {
    int run = 0;
    for (Eigen::Index r = 0; r < T; ++r) {
      const double v = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
      if (std::isfinite(v)) {
        t.values(r, c) = v;
        run = 0;
      } else {
        ++run;
        if (r > 0 && run <= kMaxForwardFill && !t.missing(r - 1, c)) {
          t.values(r, c) = t.values(r - 1, c);
        } else {
          t.values(r, c) = std::numeric_limits<double>::quiet_NaN();
          t.missing(r, c) = true;
        }
      }
    }
  }
  return t;
}

inline SeriesTable load_series_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("cannot open series file " + path);
  return read_series_csv(is);
}

/// Undirected adjacency as `src dst weight`, one line per edge with src < dst.
inline void write_adjacency(std::ostream& os, const Matrix& a) {
  os << std::setprecision(17);
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = i + 1; j < a.cols(); ++j)
      if (a(i, j) != 0) os << i << ' ' << j << ' ' << a(i, j) << '\n';
}

inline void save_adjacency(const std::string& path, const Matrix& a) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  write_adjacency(os, a);
}

/// Reads a 0-indexed `src dst weight` edge list into an N x N matrix. With
/// symmetric = true each edge is mirrored.
inline Matrix read_edge_list(std::istream& is, std::size_t nodes, bool symmetric) {
  const auto N = static_cast<Eigen::Index>(nodes);
  Matrix a = Matrix::Zero(N, N);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    long long i = -1, j = -1;
    double w = 0;
    if (!(ss >> i >> j >> w)) throw IngestionError("edge list line " + std::to_string(line_no) + " malformed");
    if (i < 0 || j < 0 || i >= N || j >= N)
      throw IngestionError("edge list line " + std::to_string(line_no) + " has node out of range");
    a(i, j) = w;
    if (symmetric) a(j, i) = w;
  }
  return a;
}

inline Matrix load_adjacency(const std::string& path, std::size_t nodes) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("cannot open adjacency file " + path);
  return read_edge_list(is, nodes, true);
}

// ---------------------------------------------------------------------------
// Splits, normalization and windows

struct Range {
  std::size_t begin = 0, end = 0;
  std::size_t size() const { return end - begin; }
};

struct Splits {
  Range train, val, test;
};

/// Contiguous chronological train/validation/test slices.
inline Splits split(std::size_t length, std::array<double, 3> ratios, std::size_t min_size = 1) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0)
    throw ContractError("split ratios must be nonnegative and sum to 1");
  const auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * static_cast<double>(length)));
  const auto n_val = static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(length)));
  if (n_train + n_val > length) throw ContractError("split sizes exceed series length");
  Splits s{{0, n_train}, {n_train, n_train + n_val}, {n_train + n_val, length}};
  for (const auto* r : {&s.train, &s.val, &s.test})
    if (r->size() < min_size)
      throw ContractError("split of " + std::to_string(r->size()) + " steps is shorter than the " +
                          std::to_string(min_size) + " steps one window needs");
  return s;
}

/// Per-node z-score fitted on one range of the series.
struct Normalizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;

  static Normalizer fit(const SeriesTable& t, Range r) {
    Normalizer n;
    const auto N = static_cast<Eigen::Index>(t.nodes());
    n.mean = Eigen::RowVectorXd::Zero(N);
    n.scale = Eigen::RowVectorXd::Ones(N);
    for (Eigen::Index c = 0; c < N; ++c) {
      double s = 0, ss = 0;
      std::size_t cnt = 0;
      for (std::size_t i = r.begin; i < r.end; ++i) {
        const double v = t.values(static_cast<Eigen::Index>(i), c);
        if (!std::isfinite(v)) continue;
        s += v;
        ss += v * v;
        ++cnt;
      }
      if (!cnt) continue;
      const double mu = s / static_cast<double>(cnt);
      const double var = std::max(0.0, ss / static_cast<double>(cnt) - mu * mu);
      n.mean[c] = mu;
      n.scale[c] = var > 0 ? std::sqrt(var) : 1.0;
    }
    return n;
  }

  double normalize(double v, Eigen::Index node) const { return (v - mean[node]) / scale[node]; }
  double denormalize(double v, Eigen::Index node) const { return v * scale[node] + mean[node]; }

  Matrix normalize(const Matrix& values) const {
    return (values.rowwise() - mean).array().rowwise() / scale.array();
  }
  Matrix denormalize(const Matrix& values) const {
    return (values.array().rowwise() * scale.array()).matrix().rowwise() + mean;
  }
};

/// Input/target slab for one forecast origin.
struct TrafficWindow {
  std::size_t start = 0;        ///< row index of the first input step
  Matrix inputs;                ///< N x M
  Matrix targets;               ///< N x H
  std::vector<Timestamp> input_times;
  std::vector<Timestamp> target_times;
};

/// Starts of all stride-1 windows fully inside r whose cells are all present.
inline std::vector<std::size_t> window_starts(const SeriesTable& t, Range r, std::size_t m, std::size_t h) {
  if (m < 1 || h < 1) throw ContractError("window lengths must be >= 1");
  if (r.size() < m + h)
    throw ContractError("range of " + std::to_string(r.size()) + " steps is shorter than M + H = " +
                        std::to_string(m + h));
  std::vector<std::size_t> starts;
  const bool any_missing = t.missing.size() && t.missing.any();
  for (std::size_t s = r.begin; s + m + h <= r.end; ++s) {
    if (any_missing &&
        t.missing.middleRows(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(m + h)).any())
      continue;
    starts.push_back(s);
  }
  return starts;
}

/// values are the (possibly normalized) T x N matrix aligned with t.timestamps.
inline TrafficWindow extract_window(const SeriesTable& t, const Matrix& values, std::size_t start,
                                    std::size_t m, std::size_t h) {
  if (start + m + h > t.length()) throw ContractError("window runs past the end of the series");
  TrafficWindow w;
  w.start = start;
  const auto s = static_cast<Eigen::Index>(start);
  w.inputs = values.middleRows(s, static_cast<Eigen::Index>(m)).transpose();
  w.targets = values.middleRows(s + static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(h)).transpose();
  w.input_times.assign(t.timestamps.begin() + static_cast<std::ptrdiff_t>(start),
                       t.timestamps.begin() + static_cast<std::ptrdiff_t>(start + m));
  w.target_times.assign(t.timestamps.begin() + static_cast<std::ptrdiff_t>(start + m),
                        t.timestamps.begin() + static_cast<std::ptrdiff_t>(start + m + h));
  return w;
}

}  // namespace castnet
