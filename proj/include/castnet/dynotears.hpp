// Copyright 2026 The castnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Structure learning for structural vector autoregressions.
//
// Learns a contemporaneous weight matrix C (constrained to a DAG through the
// smooth trace-exponential penalty) and lagged matrices A_1..A_P by an
// augmented Lagrangian outer loop around a bound-constrained quasi-Newton
// inner solver. Matrix entry (i, j) is the effect of node i on node j.

#pragma once

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "castnet/error.hpp"
#include "castnet/lbfgsb.hpp"
#include "castnet/linalg.hpp"

namespace castnet {

struct SvarDataset {
  Matrix X;  ///< n x N, rows x_t
  Matrix S;  ///< n x (N*P), rows [x_{t-1}, ..., x_{t-P}]
  int lags = 1;

  Eigen::Index samples() const { return X.rows(); }
  Eigen::Index nodes() const { return X.cols(); }

  /// Builds aligned current/lagged rows from a T x N series.
  static SvarDataset from_series(const Matrix& series, int lags) {
    if (lags < 1) throw ContractError("lag order must be >= 1");
    if (series.rows() <= lags) throw ContractError("series too short for the requested lag order");
    const Eigen::Index n = series.rows() - lags, N = series.cols();
    SvarDataset d;
    d.lags = lags;
    d.X = series.bottomRows(n);
    d.S.resize(n, N * lags);
    for (int k = 1; k <= lags; ++k) d.S.middleCols((k - 1) * N, N) = series.middleRows(lags - k, n);
    return d;
  }

  void validate() const {
    if (X.rows() == 0 || X.cols() == 0) throw ContractError("empty SVAR dataset");
    if (S.rows() != X.rows() || S.cols() != X.cols() * lags)
      throw ShapeError("lagged design does not match current-slice matrix");
    if (!X.allFinite() || !S.allFinite()) throw ContractError("SVAR dataset contains non-finite values");
  }
};

struct CausalGraphSet {
  Matrix intra;               ///< C, N x N
  std::vector<Matrix> lagged; ///< A_1 .. A_P, each N x N
  double threshold = 0;

  Eigen::Index nodes() const { return intra.rows(); }
  int lags() const { return static_cast<int>(lagged.size()); }

  /// A_1..A_P stacked vertically, (N*P) x N.
  Matrix stacked_lags() const {
    const Eigen::Index N = nodes();
    Matrix a(N * lags(), N);
    for (int k = 0; k < lags(); ++k) a.middleRows(k * N, N) = lagged[static_cast<std::size_t>(k)];
    return a;
  }

  std::size_t intra_edge_count() const { return static_cast<std::size_t>((intra.array() != 0).count()); }
  std::size_t lag_edge_count() const {
    std::size_t e = 0;
    for (const auto& a : lagged) e += static_cast<std::size_t>((a.array() != 0).count());
    return e;
  }
};

struct AcyclicityValue {
  double h = 0;
  Matrix grad;
};

/// h(C) = tr(exp(C o C)) - N with gradient exp(C o C)^T o 2C.
inline AcyclicityValue acyclicity(const Matrix& c) {
  if (c.rows() != c.cols()) throw ShapeError("acyclicity needs a square matrix");
  const Matrix e = matrix_exponential(c.cwiseProduct(c));
  AcyclicityValue out;
  out.h = std::max(0.0, e.trace() - static_cast<double>(c.rows()));
  out.grad = e.transpose().cwiseProduct(2.0 * c);
  return out;
}

struct SvarLoss {
  double loss = 0;
  Matrix grad_intra;  ///< gradient of the smooth part wrt C
  Matrix grad_lag;    ///< gradient of the smooth part wrt stacked A
};

/// (1/2n)||X - XC - SA||_F^2 + lambda_c |C|_1 + lambda_a |A|_1, evaluated on
/// the residual directly. Gradients cover the least-squares part only.
inline SvarLoss svar_loss(const Matrix& c, const Matrix& a_stack, const SvarDataset& data,
                          double lambda_c, double lambda_a) {
  data.validate();
  const Eigen::Index N = data.nodes();
  if (c.rows() != N || c.cols() != N) throw ShapeError("C does not match dataset width");
  if (a_stack.rows() != data.S.cols() || a_stack.cols() != N)
    throw ShapeError("stacked lag matrix does not match lagged design");
  const double n = static_cast<double>(data.samples());
  const Matrix r = data.X - data.X * c - data.S * a_stack;
  SvarLoss out;
  out.loss = 0.5 / n * r.squaredNorm() + lambda_c * c.cwiseAbs().sum() + lambda_a * a_stack.cwiseAbs().sum();
  out.grad_intra = -(data.X.transpose() * r) / n;
  out.grad_lag = -(data.S.transpose() * r) / n;
  return out;
}

struct SolverConfig {
  double lambda_intra = 0.05;
  double lambda_lag = 0.05;
  double threshold = 0.1;
  double h_tol = 1e-8;
  double rho_max = 1e16;
  double rho_init = 1.0;
  double alpha_init = 0.0;
  double escalation = 10.0;
  double progress = 0.25;
  int max_outer = 100;
  bool standardize = false;
  LbfgsbOptions inner{};
};

struct OuterStep {
  double h = 0;
  double rho = 0;
  double alpha = 0;
  bool escalated = false;
  int inner_iterations = 0;
};

/// Augmented Lagrangian bookkeeping exposed after a fit.
struct SolverState {
  double alpha = 0;
  double rho = 1;
  double lambda_intra = 0;
  double lambda_lag = 0;
  int outer_iterations = 0;
  int inner_iterations = 0;
  double h = std::numeric_limits<double>::infinity();
  std::vector<OuterStep> history;
};

struct FitResult {
  CausalGraphSet graphs;
  CausalGraphSet raw;  ///< before thresholding
  SolverState state;
};

/// Per-variable z-score using the current-slice column statistics; lagged
/// blocks receive the same per-variable transform. Returns the scales.
inline Vector standardize(SvarDataset& d) {
  const Eigen::Index N = d.nodes();
  const double n = static_cast<double>(d.samples());
  Vector scales(N);
  for (Eigen::Index j = 0; j < N; ++j) {
    const double mu = d.X.col(j).mean();
    double sd = std::sqrt((d.X.col(j).array() - mu).square().sum() / n);
    if (!(sd > 0)) sd = 1.0;
    scales[j] = sd;
    d.X.col(j) = (d.X.col(j).array() - mu) / sd;
    for (int k = 0; k < d.lags; ++k) d.S.col(k * N + j) = (d.S.col(k * N + j).array() - mu) / sd;
  }
  return scales;
}

inline void center(SvarDataset& d) {
  const Eigen::Index N = d.nodes();
  for (Eigen::Index j = 0; j < N; ++j) {
    const double mu = d.X.col(j).mean();
    d.X.col(j).array() -= mu;
    for (int k = 0; k < d.lags; ++k) d.S.col(k * N + j).array() -= mu;
  }
}

namespace detail {

// Returns one directed cycle in the support of m, or an empty list.
inline std::vector<Eigen::Index> find_cycle(const Matrix& m) {
  const Eigen::Index n = m.rows();
  std::vector<int> color(static_cast<std::size_t>(n), 0);
  std::vector<Eigen::Index> parent(static_cast<std::size_t>(n), -1);
  for (Eigen::Index root = 0; root < n; ++root) {
    if (color[static_cast<std::size_t>(root)]) continue;
    std::vector<std::pair<Eigen::Index, Eigen::Index>> stack{{root, 0}};
    color[static_cast<std::size_t>(root)] = 1;
    while (!stack.empty()) {
      auto& [u, next] = stack.back();
      if (next == n) {
        color[static_cast<std::size_t>(u)] = 2;
        stack.pop_back();
        continue;
      }
      const Eigen::Index v = next++;
      if (m(u, v) == 0) continue;
      const auto cv = color[static_cast<std::size_t>(v)];
      if (cv == 1) {
        std::vector<Eigen::Index> cycle{v};
        for (Eigen::Index w = u; w != v; w = parent[static_cast<std::size_t>(w)]) cycle.push_back(w);
        cycle.push_back(v);
        std::reverse(cycle.begin(), cycle.end());
        return cycle;
      }
      if (cv == 0) {
        color[static_cast<std::size_t>(v)] = 1;
        parent[static_cast<std::size_t>(v)] = u;
        stack.emplace_back(v, 0);
      }
    }
  }
  return {};
}

}  // namespace detail

/// Zeroes entries with |w| < tau and checks the contemporaneous support is a DAG.
inline CausalGraphSet threshold_graphs(CausalGraphSet g, double tau) {
  if (!(tau >= 0)) throw ContractError("threshold must be nonnegative");
  auto cut = [tau](Matrix& m) { m = (m.array().abs() < tau).select(0.0, m); };
  cut(g.intra);
  for (auto& a : g.lagged) cut(a);
  g.threshold = tau;
  if (auto cycle = detail::find_cycle(g.intra); !cycle.empty()) {
    std::ostringstream os;
    os << "thresholded contemporaneous graph has a cycle: ";
    for (std::size_t i = 0; i < cycle.size(); ++i) os << (i ? " -> " : "") << cycle[i];
    throw CycleError(os.str());
  }
  return g;
}

/// Learns C and A_1..A_P from the dataset; see SolverConfig for defaults.
inline FitResult fit(SvarDataset data, const SolverConfig& cfg) {
  data.validate();
  if (cfg.lambda_intra < 0 || cfg.lambda_lag < 0) throw ContractError("L1 weights must be nonnegative");
  Vector scales;
  if (cfg.standardize)
    scales = standardize(data);
  else
    center(data);

  const Eigen::Index N = data.nodes();
  const Eigen::Index L = data.S.cols();
  const double n = static_cast<double>(data.samples());
  const Eigen::Index D = N + L;

  // Least-squares part through Gram matrices of Z = [X S].
  Matrix z(data.samples(), D);
  z << data.X, data.S;
  const Matrix gram = z.transpose() * z / n;
  const Matrix cross = z.transpose() * data.X / n;
  const double xx = data.X.squaredNorm() / n;

  const Eigen::Index nc = N * N, na = L * N;
  const Eigen::Index nvar = 2 * (nc + na);
  Vector lo = Vector::Zero(nvar);
  Vector hi = Vector::Constant(nvar, std::numeric_limits<double>::infinity());
  for (Eigen::Index i = 0; i < N; ++i) {
    hi[i * N + i] = 0.0;       // C+ diagonal
    hi[nc + i * N + i] = 0.0;  // C- diagonal
  }

  SolverState st;
  st.alpha = cfg.alpha_init;
  st.rho = cfg.rho_init;
  st.lambda_intra = cfg.lambda_intra;
  st.lambda_lag = cfg.lambda_lag;

  auto unpack = [&](const Vector& x, Matrix& c, Matrix& a) {
    c = Eigen::Map<const Matrix>(x.data(), N, N) - Eigen::Map<const Matrix>(x.data() + nc, N, N);
    a = Eigen::Map<const Matrix>(x.data() + 2 * nc, L, N) -
        Eigen::Map<const Matrix>(x.data() + 2 * nc + na, L, N);
  };

  auto objective = [&](const Vector& x, Vector& g) {
    Matrix c, a;
    unpack(x, c, a);
    Matrix w(D, N);
    w << c, a;
    const Matrix gw = gram * w;
    const double ls = 0.5 * (xx - 2.0 * (w.cwiseProduct(cross)).sum() + (w.cwiseProduct(gw)).sum());
    const Matrix grad_w = gw - cross;
    const auto acyc = acyclicity(c);
    const double mult = st.alpha + st.rho * acyc.h;
    const Matrix gc = grad_w.topRows(N) + mult * acyc.grad;
    const Matrix ga = grad_w.bottomRows(L);
    g.resize(nvar);
    Eigen::Map<Matrix>(g.data(), N, N) = gc.array() + cfg.lambda_intra;
    Eigen::Map<Matrix>(g.data() + nc, N, N) = -gc.array() + cfg.lambda_intra;
    Eigen::Map<Matrix>(g.data() + 2 * nc, L, N) = ga.array() + cfg.lambda_lag;
    Eigen::Map<Matrix>(g.data() + 2 * nc + na, L, N) = -ga.array() + cfg.lambda_lag;
    const double l1 = cfg.lambda_intra * x.head(2 * nc).sum() + cfg.lambda_lag * x.tail(2 * na).sum();
    return ls + l1 + st.alpha * acyc.h + 0.5 * st.rho * acyc.h * acyc.h;
  };

  Vector x = Vector::Zero(nvar);
  double h = std::numeric_limits<double>::infinity();
  for (int outer = 0; outer < cfg.max_outer; ++outer) {
    Vector x_new;
    double h_new = 0;
    bool escalated = false;
    int inner_its = 0;
    while (true) {
      auto res = minimize_lbfgsb(objective, x, lo, hi, cfg.inner);
      inner_its += res.iterations;
      x_new = std::move(res.x);
      Matrix c, a;
      unpack(x_new, c, a);
      h_new = acyclicity(c).h;
      if (h_new > cfg.progress * h && st.rho < cfg.rho_max) {
        st.rho *= cfg.escalation;
        escalated = true;
      } else {
        break;
      }
    }
    x = std::move(x_new);
    h = h_new;
    st.alpha += st.rho * h;
    st.h = h;
    st.inner_iterations += inner_its;
    st.outer_iterations = outer + 1;
    st.history.push_back({h, st.rho, st.alpha, escalated, inner_its});
    if (h <= cfg.h_tol || st.rho >= cfg.rho_max) break;
  }
  if (!(st.h <= cfg.h_tol)) {
    std::ostringstream os;
    os << "acyclicity residual " << st.h << " above tolerance " << cfg.h_tol << " at rho " << st.rho;
    throw ConvergenceError(os.str(), st.h);
  }

  FitResult out;
  Matrix c, a;
  unpack(x, c, a);
  if (cfg.standardize) {
    // w_ij in z-units maps to w_ij * sd_j / sd_i in data units.
    const Vector inv = scales.cwiseInverse();
    c = inv.asDiagonal() * c * scales.asDiagonal();
    for (int k = 0; k < data.lags; ++k) a.middleRows(k * N, N) = inv.asDiagonal() * a.middleRows(k * N, N) * scales.asDiagonal();
  }
  out.raw.intra = c;
  out.raw.lagged.resize(static_cast<std::size_t>(data.lags));
  for (int k = 0; k < data.lags; ++k) out.raw.lagged[static_cast<std::size_t>(k)] = a.middleRows(k * N, N);
  out.graphs = threshold_graphs(out.raw, cfg.threshold);
  out.state = std::move(st);
  return out;
}

struct EdgeScore {
  std::size_t true_positive = 0;
  std::size_t false_positive = 0;
  std::size_t false_negative = 0;
  double precision() const {
    const auto d = true_positive + false_positive;
    return d ? static_cast<double>(true_positive) / static_cast<double>(d) : 1.0;
  }
  double recall() const {
    const auto d = true_positive + false_negative;
    return d ? static_cast<double>(true_positive) / static_cast<double>(d) : 1.0;
  }
  double f1() const {
    const auto d = 2 * true_positive + false_positive + false_negative;
    return d ? 2.0 * static_cast<double>(true_positive) / static_cast<double>(d) : 1.0;
  }
};

/// Compares directed supports (nonzero entries).
inline EdgeScore score_edges(const Matrix& truth, const Matrix& estimate) {
  if (truth.rows() != estimate.rows() || truth.cols() != estimate.cols())
    throw ShapeError("edge scoring needs matrices of equal shape");
  EdgeScore s;
  for (Eigen::Index i = 0; i < truth.rows(); ++i)
    for (Eigen::Index j = 0; j < truth.cols(); ++j) {
      const bool t = truth(i, j) != 0, e = estimate(i, j) != 0;
      s.true_positive += t && e;
      s.false_positive += !t && e;
      s.false_negative += t && !e;
    }
  return s;
}

// Text format:
//   N P threshold
//   intra: N rows of N values
//   lag k (k = 1..P): N rows of N values each
//   edges E
//   src dst lag weight      (E lines, lag 0 is contemporaneous)
inline void write_graphs(std::ostream& os, const CausalGraphSet& g) {
  const Eigen::Index N = g.nodes();
  os << std::setprecision(17);
  os << N << ' ' << g.lags() << ' ' << g.threshold << '\n';
  auto put = [&](const char* tag, const Matrix& m) {
    os << tag << '\n';
    for (Eigen::Index i = 0; i < N; ++i) {
      for (Eigen::Index j = 0; j < N; ++j) os << (j ? " " : "") << m(i, j);
      os << '\n';
    }
  };
  put("intra", g.intra);
  for (int k = 0; k < g.lags(); ++k) put(("lag " + std::to_string(k + 1)).c_str(), g.lagged[static_cast<std::size_t>(k)]);
  os << "edges " << g.intra_edge_count() + g.lag_edge_count() << '\n';
  auto edges = [&](const Matrix& m, int lag) {
    for (Eigen::Index i = 0; i < N; ++i)
      for (Eigen::Index j = 0; j < N; ++j)
        if (m(i, j) != 0) os << i << ' ' << j << ' ' << lag << ' ' << m(i, j) << '\n';
  };
  edges(g.intra, 0);
  for (int k = 0; k < g.lags(); ++k) edges(g.lagged[static_cast<std::size_t>(k)], k + 1);
}

inline CausalGraphSet read_graphs(std::istream& is) {
  CausalGraphSet g;
  Eigen::Index N = 0;
  int P = 0;
  if (!(is >> N >> P >> g.threshold) || N <= 0 || P < 0) throw IngestionError("bad causal graph header");
  auto get = [&](const std::string& tag) {
    std::string word;
    is >> word;
    if (tag.rfind("lag", 0) == 0) {
      int k = 0;
      is >> k;
      word += " " + std::to_string(k);
    }
    if (word != tag) throw IngestionError("expected section '" + tag + "', found '" + word + "'");
    Matrix m(N, N);
    for (Eigen::Index i = 0; i < N; ++i)
      for (Eigen::Index j = 0; j < N; ++j)
        if (!(is >> m(i, j))) throw IngestionError("truncated matrix in section '" + tag + "'");
    return m;
  };
  g.intra = get("intra");
  for (int k = 1; k <= P; ++k) g.lagged.push_back(get("lag " + std::to_string(k)));
  return g;
}

inline void save_graphs(const std::string& path, const CausalGraphSet& g) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  write_graphs(os, g);
}

inline CausalGraphSet load_graphs(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("cannot open causal graph file " + path);
  return read_graphs(is);
}

}  // namespace castnet
