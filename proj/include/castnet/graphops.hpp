// Copyright 2026 The castnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Graph processing operators for multi-graph convolution and descriptive
// statistics of learned causal graphs.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "castnet/dynotears.hpp"
#include "castnet/error.hpp"
#include "castnet/linalg.hpp"
#include "castnet/tensor.hpp"

namespace castnet {

/// The four graph roles a multi-graph convolution can fuse.
enum class GraphRole { adjacency, lagged, intra, adaptive };

inline constexpr std::array<GraphRole, 4> kAllGraphRoles{GraphRole::adjacency, GraphRole::lagged,
                                                         GraphRole::intra, GraphRole::adaptive};

inline std::string_view to_string(GraphRole r) {
  switch (r) {
    case GraphRole::adjacency: return "adjacency";
    case GraphRole::lagged: return "lagged";
    case GraphRole::intra: return "intra";
    case GraphRole::adaptive: return "adaptive";
  }
  return "?";
}

inline GraphRole parse_graph_role(std::string_view s) {
  for (auto r : kAllGraphRoles)
    if (to_string(r) == s) return r;
  throw ConfigError("unknown graph role '" + std::string(s) + "'");
}

/// O = I - D^{-1/2} A D^{-1/2}; rows of isolated nodes are the identity row.
inline Matrix laplacian_operator(const Matrix& a) {
  if (a.rows() != a.cols()) throw ShapeError("adjacency must be square");
  if ((a.array() < 0).any()) throw ContractError("adjacency has negative weights");
  if (!a.allFinite()) throw ContractError("adjacency has non-finite weights");
  if (a.diagonal().cwiseAbs().maxCoeff() != 0) throw ContractError("adjacency diagonal must be zero");
  const Vector deg = a.rowwise().sum();
  Vector inv_sqrt(a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) inv_sqrt[i] = deg[i] > 0 ? 1.0 / std::sqrt(deg[i]) : 0.0;
  Matrix o = -(inv_sqrt.asDiagonal() * a * inv_sqrt.asDiagonal());
  o.diagonal().array() += 1.0;
  return o;
}

/// D_out^{-1} a with out-degree taken as the row sum of |a|; zero rows stay zero.
inline Matrix asymmetric_operator(const Matrix& a) {
  if (a.rows() != a.cols()) throw ShapeError("causal matrix must be square");
  Matrix o = a;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double d = a.row(i).cwiseAbs().sum();
    if (d > 0)
      o.row(i) /= d;
    else
      o.row(i).setZero();
  }
  return o;
}

/// softmax_rows(relu(emb1 emb2^T)), differentiable in both embeddings.
inline Tensor adaptive_graph(const Tensor& emb1, const Tensor& emb2) {
  if (emb1.rank() != 2 || emb2.rank() != 2 || emb1.dim(1) != emb2.dim(1) || emb1.dim(0) != emb2.dim(0))
    throw ContractError("adaptive graph embeddings must both be N x d_n");
  return softmax_rows(relu(matmul(emb1, transpose(emb2))));
}

inline Matrix adaptive_graph(const Matrix& emb1, const Matrix& emb2) {
  if (emb1.cols() == 0 || emb2.cols() == 0) throw ContractError("adaptive graph needs d_n >= 1");
  if (emb1.cols() != emb2.cols() || emb1.rows() != emb2.rows())
    throw ContractError("adaptive graph embeddings must both be N x d_n");
  const Matrix logits = (emb1 * emb2.transpose()).cwiseMax(0.0);
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

/// [I, op, op^2, ..., op^K].
inline std::vector<Matrix> powers(const Matrix& op, int k) {
  if (k < 0) throw ContractError("number of diffusion hops must be >= 0");
  if (op.rows() != op.cols()) throw ShapeError("operator must be square");
  std::vector<Matrix> out{Matrix::Identity(op.rows(), op.cols())};
  for (int i = 1; i <= k; ++i) out.push_back(out.back() * op);
  return out;
}

inline Tensor to_tensor(const Matrix& m) {
  std::vector<double> v(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
  return Tensor::constant({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, std::move(v));
}

/// Static graphs and their cached operator powers. The adaptive graph is
/// rebuilt from learnable embeddings on every forward pass and is not held here.
struct GraphBundle {
  Matrix adjacency;
  Matrix lagged;  ///< sum of the normalized lag operators
  Matrix intra;
  int hops = 2;
  /// powers per static role, indexed by GraphRole (adaptive slot unused).
  std::array<std::vector<Tensor>, 4> power_cache;

  static GraphBundle build(const Matrix& adjacency, const CausalGraphSet& causal, int hops) {
    if (hops < 0) throw ContractError("hops must be >= 0");
    const auto N = adjacency.rows();
    if (causal.nodes() != N) throw ShapeError("causal graphs and adjacency differ in node count");
    GraphBundle b;
    b.hops = hops;
    b.adjacency = laplacian_operator(adjacency);
    b.intra = asymmetric_operator(causal.intra);
    b.lagged = Matrix::Zero(N, N);
    for (const auto& a : causal.lagged) b.lagged += asymmetric_operator(a);
    b.refresh();
    return b;
  }

  void refresh() {
    auto fill = [&](GraphRole r, const Matrix& op) {
      auto& cache = power_cache[static_cast<std::size_t>(r)];
      cache.clear();
      for (const auto& p : powers(op, hops)) cache.push_back(to_tensor(p));
    };
    fill(GraphRole::adjacency, adjacency);
    fill(GraphRole::lagged, lagged);
    fill(GraphRole::intra, intra);
  }

  const Matrix& op(GraphRole r) const {
    switch (r) {
      case GraphRole::adjacency: return adjacency;
      case GraphRole::lagged: return lagged;
      case GraphRole::intra: return intra;
      case GraphRole::adaptive: break;
    }
    throw ContractError("adaptive graph operator is not stored in the bundle");
  }

  const std::vector<Tensor>& cached_powers(GraphRole r) const {
    if (r == GraphRole::adaptive) throw ContractError("adaptive graph powers are not cached");
    return power_cache[static_cast<std::size_t>(r)];
  }

  std::size_t nodes() const { return static_cast<std::size_t>(adjacency.rows()); }
};

struct GraphStats {
  std::size_t n_nodes = 0;
  std::size_t n_edges = 0;
  std::size_t diameter = 0;
  double avg_shortest_path = 0;
  double avg_degree = 0;
  /// Ordered pairs (i != j) with no directed path; excluded from the path statistics.
  std::size_t unreachable_pairs = 0;
};

/// Hop-count statistics of the support of g. For undirected graphs each
/// symmetric pair counts as one edge and self-loops are ignored; for directed
/// graphs every nonzero entry, self-loops included, is an edge.
inline GraphStats graph_stats(const Matrix& g, bool undirected) {
  if (g.rows() != g.cols() || g.rows() == 0) throw ContractError("graph needs a nonempty square matrix");
  const auto N = static_cast<std::size_t>(g.rows());
  GraphStats s;
  s.n_nodes = N;
  std::vector<std::vector<std::size_t>> out(N);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      const bool e = g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) != 0;
      if (!e) continue;
      if (undirected) {
        if (i < j) ++s.n_edges;
      } else {
        ++s.n_edges;
      }
      if (i != j) out[i].push_back(j);
    }
  if (undirected)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j)
        if (i != j && g(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) != 0 &&
            g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) == 0)
          out[i].push_back(j);
  s.avg_degree = static_cast<double>(s.n_edges) * (undirected ? 2.0 : 1.0) / static_cast<double>(N);

  double total = 0;
  std::size_t pairs = 0;
  std::vector<std::size_t> dist(N);
  constexpr auto kInf = std::numeric_limits<std::size_t>::max();
  for (std::size_t src = 0; src < N; ++src) {
    std::fill(dist.begin(), dist.end(), kInf);
    dist[src] = 0;
    std::deque<std::size_t> q{src};
    while (!q.empty()) {
      const auto u = q.front();
      q.pop_front();
      for (auto v : out[u])
        if (dist[v] == kInf) {
          dist[v] = dist[u] + 1;
          q.push_back(v);
        }
    }
    for (std::size_t dst = 0; dst < N; ++dst) {
      if (dst == src) continue;
      if (dist[dst] == kInf) {
        ++s.unreachable_pairs;
        continue;
      }
      s.diameter = std::max(s.diameter, dist[dst]);
      total += static_cast<double>(dist[dst]);
      ++pairs;
    }
  }
  s.avg_shortest_path = pairs ? total / static_cast<double>(pairs) : 0.0;
  return s;
}

inline void write_stats_csv_header(std::ostream& os) {
  os << "graph,number_of_nodes,number_of_edges,graph_diameter,average_shortest_path,average_degree,"
        "unreachable_pairs\n";
}

inline void write_stats_csv_row(std::ostream& os, const std::string& name, const GraphStats& s) {
  os << name << ',' << s.n_nodes << ',' << s.n_edges << ',' << s.diameter << ','
     << std::setprecision(10) << s.avg_shortest_path << ',' << s.avg_degree << ',' << s.unreachable_pairs
     << '\n';
}

}  // namespace castnet
