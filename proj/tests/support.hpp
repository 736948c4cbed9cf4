// Copyright 2026 The castnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared test helpers: random fixtures and finite-difference gradient checks.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "castnet/linalg.hpp"
#include "castnet/tensor.hpp"

namespace castnet::testing {

inline std::vector<double> uniform_values(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline Tensor random_param(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  const auto n = numel(shape);
  return Tensor::parameter(std::move(shape), uniform_values(n, rng, lo, hi));
}

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = u(rng);
  return m;
}

struct GradCheck {
  double rel_error = 0;  ///< ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double norm = 0;       ///< ||numeric||
};

/// Compares backpropagated gradients of loss() against central differences
/// over every entry of every leaf.
inline GradCheck check_gradients(const std::function<Tensor()>& loss, std::vector<Tensor> leaves, double h = 1e-6) {
  backward(loss());
  std::vector<double> analytic, numeric;
  for (auto& leaf : leaves) {
    const auto g = leaf.grad();
    analytic.insert(analytic.end(), g.begin(), g.end());
    if (g.empty()) analytic.resize(analytic.size() + leaf.size(), 0.0);
  }
  for (auto& leaf : leaves) {
    auto w = leaf.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double keep = w[i];
      w[i] = keep + h;
      const double up = loss().item();
      w[i] = keep - h;
      const double down = loss().item();
      w[i] = keep;
      numeric.push_back((up - down) / (2 * h));
    }
  }
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  GradCheck out;
  out.norm = std::sqrt(nn);
  out.rel_error = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  return out;
}

/// Fixed projection weights so a tensor-valued function becomes a scalar loss
/// whose gradient reaches every output entry.
inline Tensor projection_for(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor::constant(y.shape(), uniform_values(y.size(), rng));
}

inline Tensor project(const Tensor& y, const Tensor& weights) { return sum(y * weights); }

}  // namespace castnet::testing
