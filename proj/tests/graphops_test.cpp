// Copyright 2026 The castnet Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "castnet/dynotears.hpp"
#include "castnet/graphops.hpp"
#include "support.hpp"

namespace castnet {
namespace {

TEST(Laplacian, PathGraphPerEntry) {
  Matrix a = Matrix::Zero(3, 3);
  a(0, 1) = a(1, 0) = a(1, 2) = a(2, 1) = 1;
  const Matrix o = laplacian_operator(a);
  const double d[] = {1, 2, 1};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double want = (i == j ? 1.0 : 0.0) - a(i, j) / std::sqrt(d[i] * d[j]);
      EXPECT_EQ(o(i, j), want) << i << "," << j;
    }
}

TEST(Laplacian, IsolatedNodeAndValidation) {
  Matrix a = Matrix::Zero(3, 3);
  a(0, 1) = a(1, 0) = 2;
  const Matrix o = laplacian_operator(a);
  EXPECT_EQ(o(2, 2), 1.0);
  EXPECT_EQ(o.row(2).sum(), 1.0);
  a(0, 0) = 1;
  EXPECT_THROW(laplacian_operator(a), ContractError);
  a(0, 0) = 0;
  a(2, 0) = -1;
  EXPECT_THROW(laplacian_operator(a), ContractError);
  EXPECT_THROW(laplacian_operator(Matrix::Zero(2, 3)), ShapeError);
}

TEST(Asymmetric, RandomMatchesRowNormalization) {
  std::mt19937_64 rng(1);
  Matrix a = testing::random_matrix(5, 5, rng);
  a.row(3).setZero();
  const Matrix o = asymmetric_operator(a);
  for (int i = 0; i < 5; ++i) {
    double d = 0;
    for (int j = 0; j < 5; ++j) d += std::abs(a(i, j));
    for (int j = 0; j < 5; ++j) EXPECT_DOUBLE_EQ(o(i, j), d > 0 ? a(i, j) / d : 0.0);
  }
}

TEST(Adaptive, RowStochasticAndMatchesTensorPath) {
  std::mt19937_64 rng(2);
  const Matrix e1 = testing::random_matrix(6, 3, rng), e2 = testing::random_matrix(6, 3, rng);
  const Matrix a = adaptive_graph(e1, e2);
  for (int i = 0; i < 6; ++i) {
    EXPECT_NEAR(a.row(i).sum(), 1.0, 1e-14);
    EXPECT_GT(a.row(i).minCoeff(), 0.0);
  }
  const Tensor t = adaptive_graph(to_tensor(e1), to_tensor(e2));
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) EXPECT_NEAR(t[static_cast<std::size_t>(i * 6 + j)], a(i, j), 1e-15);
  EXPECT_THROW(adaptive_graph(e1, testing::random_matrix(6, 2, rng)), ContractError);
}

TEST(Adaptive, GradientMatchesCentralDifferences) {
  std::mt19937_64 rng(3);
  for (int probe = 0; probe < 10; ++probe) {
    Tensor e1 = testing::random_param({5, 3}, rng), e2 = testing::random_param({5, 3}, rng);
    const Tensor w = testing::projection_for(adaptive_graph(e1, e2), 100 + static_cast<std::uint64_t>(probe));
    const auto r = testing::check_gradients([&] { return testing::project(adaptive_graph(e1, e2), w); }, {e1, e2});
    EXPECT_LT(r.rel_error, 1e-4);
  }
  // Plain sum of the operator: each row sums to one, so the gradient is zero.
  Tensor e1 = testing::random_param({4, 2}, rng), e2 = testing::random_param({4, 2}, rng);
  backward(sum(adaptive_graph(e1, e2)));
  for (double g : e1.grad()) EXPECT_NEAR(g, 0.0, 1e-12);
}

TEST(Powers, RepeatedMultiplication) {
  std::mt19937_64 rng(4);
  const Matrix op = testing::random_matrix(4, 4, rng);
  const auto p = powers(op, 3);
  ASSERT_EQ(p.size(), 4u);
  EXPECT_EQ(p[0], Matrix::Identity(4, 4));
  Matrix naive = Matrix::Identity(4, 4);
  for (int k = 1; k <= 3; ++k) {
    Matrix next = Matrix::Zero(4, 4);
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        for (int l = 0; l < 4; ++l) next(i, j) += naive(i, l) * op(l, j);
    naive = next;
    EXPECT_LT((p[static_cast<std::size_t>(k)] - naive).cwiseAbs().maxCoeff(), 1e-14);
  }
  EXPECT_THROW(powers(op, -1), ContractError);
}

TEST(GraphStats, RandomDagMatchesFloydWarshall) {
  std::mt19937_64 rng(5);
  std::bernoulli_distribution b(0.3);
  const int n = 10;
  Matrix g = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (b(rng)) g(i, j) = 0.7;
  constexpr double inf = std::numeric_limits<double>::infinity();
  Matrix d = Matrix::Constant(n, n, inf);
  for (int i = 0; i < n; ++i) {
    d(i, i) = 0;
    for (int j = 0; j < n; ++j)
      if (g(i, j) != 0) d(i, j) = 1;
  }
  for (int k = 0; k < n; ++k)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) d(i, j) = std::min(d(i, j), d(i, k) + d(k, j));
  double total = 0, diam = 0;
  std::size_t pairs = 0, unreachable = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      if (d(i, j) == inf) {
        ++unreachable;
        continue;
      }
      total += d(i, j);
      diam = std::max(diam, d(i, j));
      ++pairs;
    }
  const auto s = graph_stats(g, false);
  EXPECT_EQ(s.n_nodes, 10u);
  EXPECT_EQ(s.n_edges, static_cast<std::size_t>((g.array() != 0).count()));
  EXPECT_EQ(static_cast<double>(s.diameter), diam);
  EXPECT_DOUBLE_EQ(s.avg_shortest_path, total / static_cast<double>(pairs));
  EXPECT_EQ(s.unreachable_pairs, unreachable);
  EXPECT_DOUBLE_EQ(s.avg_degree, static_cast<double>(s.n_edges) / 10.0);
}

TEST(GraphStats, UndirectedCycle) {
  const int n = 6;
  Matrix g = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i) g(i, (i + 1) % n) = g((i + 1) % n, i) = 1;
  const auto s = graph_stats(g, true);
  EXPECT_EQ(s.n_edges, 6u);
  EXPECT_EQ(s.diameter, 3u);
  EXPECT_DOUBLE_EQ(s.avg_degree, 2.0);
  EXPECT_DOUBLE_EQ(s.avg_shortest_path, (1 + 1 + 2 + 2 + 3) / 5.0);
  std::ostringstream os;
  write_stats_csv_header(os);
  write_stats_csv_row(os, "ring", s);
  EXPECT_EQ(os.str(),
            "graph,number_of_nodes,number_of_edges,graph_diameter,average_shortest_path,average_degree,"
            "unreachable_pairs\nring,6,6,3,1.8,2,0\n");
}

TEST(GraphBundle, BuildsOperatorsAndCaches) {
  Matrix adj = Matrix::Zero(3, 3);
  adj(0, 1) = adj(1, 0) = 1;
  CausalGraphSet c;
  c.intra = Matrix::Zero(3, 3);
  c.intra(0, 2) = 0.5;
  c.lagged = {Matrix::Identity(3, 3) * 0.4, Matrix::Identity(3, 3) * -0.2};
  const auto b = GraphBundle::build(adj, c, 2);
  EXPECT_EQ(b.op(GraphRole::adjacency), laplacian_operator(adj));
  EXPECT_EQ(b.op(GraphRole::intra), asymmetric_operator(c.intra));
  EXPECT_EQ(b.op(GraphRole::lagged), asymmetric_operator(c.lagged[0]) + asymmetric_operator(c.lagged[1]));
  ASSERT_EQ(b.cached_powers(GraphRole::intra).size(), 3u);
  EXPECT_THROW(b.cached_powers(GraphRole::adaptive), ContractError);
  EXPECT_EQ(parse_graph_role(to_string(GraphRole::lagged)), GraphRole::lagged);
}

}  // namespace
}  // namespace castnet
