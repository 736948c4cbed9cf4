// Copyright 2026 The castnet Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "castnet/dataio.hpp"
#include "castnet/dynotears.hpp"
#include "castnet/graphops.hpp"
#include "castnet/model.hpp"
#include "support.hpp"

namespace castnet {
namespace {

ModelConfig tiny_config(std::size_t nodes = 4) {
  ModelConfig c;
  c.nodes = nodes;
  c.input_steps = 12;
  c.horizon = 3;
  c.width = 4;
  c.blocks = 2;
  c.hops = 2;
  c.head_widths = {8, 3};
  c.adaptive_dim = 3;
  c.dropout = 0.0;
  c.seed = 9;
  return c;
}

GraphBundle random_bundle(std::size_t n, std::mt19937_64& rng) {
  const auto N = static_cast<Eigen::Index>(n);
  std::bernoulli_distribution e(0.4);
  Matrix adj = Matrix::Zero(N, N);
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index j = i + 1; j < N; ++j)
      if (e(rng)) adj(i, j) = adj(j, i) = 1;
  CausalGraphSet c;
  c.intra = testing::random_matrix(N, N, rng).triangularView<Eigen::StrictlyUpper>();
  c.lagged = {testing::random_matrix(N, N, rng)};
  return GraphBundle::build(adj, c, 2);
}

Tensor random_input(const ModelConfig& c, std::size_t batch, std::mt19937_64& rng) {
  return Tensor::constant({batch, c.nodes, c.input_steps, kInputFeatures},
                          testing::uniform_values(batch * c.nodes * c.input_steps * kInputFeatures, rng));
}

// Copies x and adds noise to every entry at time index >= from.
Tensor perturb_future(const Tensor& x, std::size_t from, std::mt19937_64& rng) {
  std::vector<double> v(x.data().begin(), x.data().end());
  const std::size_t m = x.dim(x.rank() - 2), d = x.dim(x.rank() - 1);
  std::normal_distribution<double> n(0.0, 3.0);
  for (std::size_t i = 0; i < v.size(); ++i)
    if ((i / d) % m >= from) v[i] += n(rng);
  return Tensor::constant(x.shape(), std::move(v));
}

// True when every entry at time index < upto is bit-identical.
bool same_prefix(const Tensor& a, const Tensor& b, std::size_t upto) {
  const std::size_t m = a.dim(a.rank() - 2), d = a.dim(a.rank() - 1);
  for (std::size_t i = 0; i < a.size(); ++i)
    if ((i / d) % m < upto && a[i] != b[i]) return false;
  return true;
}

TEST(ModelConfig, JsonRoundTripAndUnknownKeys) {
  ModelConfig c = tiny_config();
  c.fusion = Fusion::max;
  c.graphs = {GraphRole::adjacency, GraphRole::adaptive};
  nlohmann::json j = c;
  ModelConfig back;
  from_json(j, back);
  EXPECT_EQ(nlohmann::json(back), j);
  j["no_such_key"] = 1;
  EXPECT_THROW(from_json(j, back), ConfigError);
  EXPECT_THROW(parse_fusion("median"), ConfigError);
}

TEST(ModelConfig, Validation) {
  auto c = tiny_config();
  c.head_widths = {8, 4};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.graphs = {GraphRole::intra, GraphRole::intra};
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  const auto p = ModelConfig::paper_scale(30);
  EXPECT_EQ(p.width, 32u);
  EXPECT_EQ(p.blocks, 4u);
  EXPECT_NO_THROW(p.validate());
}

TEST(Params, CountAndCloneAreIndependent) {
  const auto c = tiny_config();
  const auto p = init_params(c);
  std::size_t want = kInputFeatures * 4 + 4;
  want += 2 * (3 * 16 + 2 * (2 * 16 + 4) + 2 * (2 * 16 + 4) + 4 * 3 * 16 + 4);
  want += 2 * 4 * 3;
  want += 48 * 8 + 8 + 8 * 3 + 3;
  EXPECT_EQ(p.count(), want);
  auto q = p.clone();
  q.head_biases[0].mutable_data()[0] += 1.0;
  EXPECT_NE(q.head_biases[0][0], p.head_biases[0][0]);
  const auto again = init_params(c);
  EXPECT_EQ(std::vector<double>(again.embed_weight.data().begin(), again.embed_weight.data().end()),
            std::vector<double>(p.embed_weight.data().begin(), p.embed_weight.data().end()));
}

TEST(Causality, MaskedAttention) {
  std::mt19937_64 rng(1);
  const auto c = tiny_config();
  const auto p = init_params(c);
  for (int probe = 0; probe < 20; ++probe) {
    const Tensor x = Tensor::constant({2, 3, 12, 4}, testing::uniform_values(2 * 3 * 12 * 4, rng));
    const std::size_t from = 1 + static_cast<std::size_t>(probe) % 11;
    EXPECT_TRUE(same_prefix(masked_attention(x, p.blocks[0]), masked_attention(perturb_future(x, from, rng), p.blocks[0]), from));
  }
  // Perturbing only the last step leaves the first M - 1 rows untouched.
  const Tensor x = Tensor::constant({1, 1, 12, 4}, testing::uniform_values(48, rng));
  EXPECT_TRUE(same_prefix(masked_attention(x, p.blocks[0]), masked_attention(perturb_future(x, 11, rng), p.blocks[0]), 11));
}

TEST(Causality, DilatedConvolutionStack) {
  std::mt19937_64 rng(2);
  for (int probe = 0; probe < 20; ++probe) {
    std::vector<Tensor> kernels;
    for (int i = 0; i < 3; ++i) kernels.push_back(Tensor::constant({2, 3, 3}, testing::uniform_values(18, rng)));
    auto stack = [&](Tensor h) {
      for (std::size_t i = 0; i < 3; ++i) h = tanh(dilated_conv1d(h, kernels[i], std::size_t{1} << i));
      return h;
    };
    const Tensor x = Tensor::constant({2, 12, 3}, testing::uniform_values(72, rng));
    const std::size_t from = 1 + static_cast<std::size_t>(probe) % 11;
    EXPECT_TRUE(same_prefix(stack(x), stack(perturb_future(x, from, rng)), from));
  }
}

TEST(Causality, ReceptiveFieldIsEightSteps) {
  std::mt19937_64 rng(3);
  std::vector<Tensor> kernels;
  for (int i = 0; i < 3; ++i) kernels.push_back(Tensor::constant({2, 1, 1}, testing::uniform_values(2, rng, 0.5, 1.0)));
  std::vector<double> impulse(20, 0.0);
  impulse[4] = 1.0;
  Tensor h = Tensor::constant({20, 1}, impulse);
  for (std::size_t i = 0; i < 3; ++i) h = dilated_conv1d(h, kernels[i], std::size_t{1} << i);
  for (std::size_t t = 0; t < 20; ++t) {
    if (t >= 4 && t < 12) EXPECT_GT(h[t], 0.0) << t;
    else EXPECT_EQ(h[t], 0.0) << t;
  }
}

TEST(Causality, StBlock) {
  std::mt19937_64 rng(4);
  const auto c = tiny_config();
  const auto p = init_params(c);
  const auto bundle = random_bundle(c.nodes, rng);
  std::vector<std::vector<Tensor>> powers;
  for (auto role : c.graphs) powers.push_back(graph_powers(role, bundle, p, c.hops));
  for (int probe = 0; probe < 20; ++probe) {
    const Tensor x = Tensor::constant({2, 4, 12, 4}, testing::uniform_values(2 * 4 * 12 * 4, rng));
    const std::size_t from = 1 + static_cast<std::size_t>(probe) % 11;
    for (const auto& bp : p.blocks)
      EXPECT_TRUE(same_prefix(st_block(x, bp, powers, c, {}), st_block(perturb_future(x, from, rng), bp, powers, c, {}), from));
  }
}

// Explicit loops over graphs, hops and nodes.
std::vector<double> naive_mgcn(const Tensor& x, const std::vector<std::vector<Tensor>>& powers, const BlockParams& p,
                               const std::vector<double>& mix) {
  const std::size_t B = x.dim(0), N = x.dim(1), M = x.dim(2), d = x.dim(3);
  std::vector<double> out(x.size(), 0.0);
  for (std::size_t g = 0; g < powers.size(); ++g)
    for (std::size_t k = 0; k < powers[g].size(); ++k) {
      const Tensor& G = powers[g][k];
      const Tensor& W = p.hop_weights[g][k];
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t t = 0; t < M; ++t)
            for (std::size_t o = 0; o < d; ++o) {
              double s = 0;
              for (std::size_t m = 0; m < N; ++m)
                for (std::size_t i = 0; i < d; ++i) s += G[n * N + m] * x[((b * N + m) * M + t) * d + i] * W[i * d + o];
              out[((b * N + n) * M + t) * d + o] += mix[g] * s;
            }
    }
  return out;
}

TEST(Mgcn, MatchesNaiveLoopsOnAllGraphs) {
  std::mt19937_64 rng(5);
  auto c = tiny_config(8);
  c.hops = 2;
  auto p = init_params(c);
  auto logits = p.blocks[0].fusion_logits.mutable_data();
  for (auto& l : logits) l = std::uniform_real_distribution<double>(-1, 1)(rng);
  const auto bundle = random_bundle(8, rng);
  std::vector<std::vector<Tensor>> powers;
  for (auto role : c.graphs) powers.push_back(graph_powers(role, bundle, p, c.hops));
  ASSERT_EQ(powers.size(), 4u);
  const Tensor x = Tensor::constant({2, 8, 12, 4}, testing::uniform_values(2 * 8 * 12 * 4, rng));
  std::vector<double> mix(4);
  double z = 0;
  for (std::size_t g = 0; g < 4; ++g) z += std::exp(logits[g]);
  for (std::size_t g = 0; g < 4; ++g) mix[g] = std::exp(logits[g]) / z;
  const auto want = naive_mgcn(x, powers, p.blocks[0], mix);
  const Tensor got = mgcn(x, powers, p.blocks[0], c);
  double worst = 0;
  for (std::size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
  EXPECT_LT(worst, 1e-9);

  // Unweighted fusions against the per-graph branches.
  std::vector<std::vector<double>> branch;
  for (std::size_t g = 0; g < 4; ++g) {
    std::vector<double> one(4, 0.0);
    one[g] = 1.0;
    branch.push_back(naive_mgcn(x, powers, p.blocks[0], one));
  }
  for (auto f : {Fusion::sum, Fusion::mean, Fusion::max, Fusion::min}) {
    c.fusion = f;
    const Tensor y = mgcn(x, powers, p.blocks[0], c);
    for (std::size_t i = 0; i < want.size(); i += 37) {
      double s = 0, mx = -1e300, mn = 1e300;
      for (std::size_t g = 0; g < 4; ++g) {
        s += branch[g][i];
        mx = std::max(mx, branch[g][i]);
        mn = std::min(mn, branch[g][i]);
      }
      const double expect = f == Fusion::sum ? s : f == Fusion::mean ? s / 4 : f == Fusion::max ? mx : mn;
      EXPECT_NEAR(y[i], expect, 1e-9) << to_string(f);
    }
  }
}

TEST(Mgcn, ZeroFusionLogitsAverageBranches) {
  const auto c = tiny_config();
  const auto p = init_params(c);
  for (double l : p.blocks[0].fusion_logits.data()) EXPECT_EQ(l, 0.0);
}

TEST(Forward, OutputShapeAndValidation) {
  std::mt19937_64 rng(6);
  const auto c = tiny_config();
  const auto p = init_params(c);
  const auto bundle = random_bundle(c.nodes, rng);
  const Tensor y = forward(random_input(c, 3, rng), p, bundle, c);
  EXPECT_EQ(y.shape(), (Shape{3, 4, 3}));
  EXPECT_THROW(forward(Tensor::zeros({1, 5, 12, kInputFeatures}), p, bundle, c), ShapeError);
}

TEST(Forward, LossGradientMatchesCentralDifferences) {
  std::mt19937_64 rng(7);
  const auto c = tiny_config();
  const auto bundle = random_bundle(c.nodes, rng);
  const Tensor x = random_input(c, 2, rng);
  const Tensor target = Tensor::constant({2, 4, 3}, testing::uniform_values(24, rng));
  for (std::uint64_t probe = 0; probe < 10; ++probe) {
    auto cfg = c;
    cfg.seed = 100 + probe;
    auto p = init_params(cfg);
    // Random fusion logits so the softmax weights are exercised away from uniform.
    for (auto& bp : p.blocks)
      for (auto& l : bp.fusion_logits.mutable_data()) l = std::uniform_real_distribution<double>(-1, 1)(rng);
    std::vector<Tensor> leaves;
    for (const auto& [name, t] : p.named()) leaves.push_back(t);
    auto loss = [&] { return mae_loss(forward(x, p, bundle, cfg), target); };
    const auto r = testing::check_gradients(loss, leaves);
    EXPECT_LT(r.rel_error, 1e-3) << "probe " << probe;

    // Ten individually drawn parameter entries.
    backward(loss());
    std::uniform_int_distribution<std::size_t> pick(0, leaves.size() - 1);
    for (int k = 0; k < 10; ++k) {
      Tensor& leaf = leaves[pick(rng)];
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, leaf.size() - 1)(rng);
      const double analytic = leaf.grad()[i];
      auto w = leaf.mutable_data();
      const double keep = w[i];
      w[i] = keep + 1e-6;
      const double up = loss().item();
      w[i] = keep - 1e-6;
      const double down = loss().item();
      w[i] = keep;
      const double numeric = (up - down) / 2e-6;
      EXPECT_LT(std::abs(analytic - numeric), 1e-3 * std::max({std::abs(analytic), std::abs(numeric), 1e-3}));
      backward(loss());
    }
  }
}

TEST(Adam, MatchesHandComputedStep) {
  Tensor p = Tensor::parameter({2}, {1.0, -2.0});
  Adam opt({p}, 0.1, 0.01);
  backward(sum(square(p)));  // grad = 2p
  opt.step();
  // First step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
  for (std::size_t i = 0; i < 2; ++i) {
    const double w0 = i == 0 ? 1.0 : -2.0;
    const double g = 2 * w0 + 0.01 * w0;
    EXPECT_NEAR(p[i], w0 - 0.1 * g / (std::abs(g) + 1e-8), 1e-12);
  }
}

TEST(Adam, ClipScalesJointNorm) {
  Tensor a = Tensor::parameter({1}, {3.0}), b = Tensor::parameter({1}, {4.0});
  Adam opt({a, b}, 1.0, 0.0);
  backward(scale(a, 3.0) + scale(b, 4.0));
  EXPECT_DOUBLE_EQ(opt.clip(1.0), 5.0);
}

SeriesTable constant_table(std::size_t length, std::size_t nodes, double value) {
  SeriesTable t;
  for (std::size_t i = 0; i < length; ++i) t.timestamps.push_back(make_timestamp(2024, 1, 1) + static_cast<Timestamp>(5 * i));
  t.values = Matrix::Constant(static_cast<Eigen::Index>(length), static_cast<Eigen::Index>(nodes), value);
  for (std::size_t i = 0; i < nodes; ++i) t.node_ids.push_back("n" + std::to_string(i));
  t.missing = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>::Constant(t.values.rows(), t.values.cols(), false);
  return t;
}

TEST(Training, LearnsConstantTargets) {
  std::mt19937_64 rng(8);
  const double value = 5.0;
  const auto table = constant_table(400, 4, value);
  const auto splits = split(table.length(), {0.6, 0.2, 0.2}, 15);
  auto c = tiny_config();
  c.dropout = 0.3;
  c.epochs = 20;
  c.batches_per_epoch = 8;
  c.batch = 8;
  c.patience = 100;
  const auto data = ForecastData::build(table, splits, c.input_steps, c.horizon);
  const auto res = train(data, random_bundle(4, rng), c);
  ASSERT_EQ(res.history.size(), 21u);
  EXPECT_EQ(res.history.front().epoch, 0u);
  EXPECT_LT(res.best_val_mae, 0.01 * value);
}

TEST(Training, KeepsBestValidationCheckpointAndStopsEarly) {
  std::mt19937_64 rng(9);
  SyntheticSpec spec;
  spec.nodes = 4;
  spec.length = 400;
  const auto gen = generate_svar(spec);
  const auto splits = split(gen.table.length(), {0.6, 0.2, 0.2}, 15);
  auto c = tiny_config();
  c.epochs = 30;
  c.patience = 3;
  c.batches_per_epoch = 4;
  const auto data = ForecastData::build(gen.table, splits, c.input_steps, c.horizon);
  const auto bundle = random_bundle(4, rng);
  const auto res = train(data, bundle, c);
  double best = 1e300;
  std::size_t best_epoch = 0;
  for (const auto& e : res.history)
    if (e.val_mae < best) {
      best = e.val_mae;
      best_epoch = e.epoch;
    }
  EXPECT_EQ(res.best_epoch, best_epoch);
  EXPECT_EQ(res.best_val_mae, best);
  EXPECT_EQ(evaluate_mae(data, data.val, res.params, bundle, c), best);
  EXPECT_LE(res.history.back().epoch, best_epoch + c.patience);
  // Same seed, same history.
  const auto again = train(data, bundle, c);
  ASSERT_EQ(again.history.size(), res.history.size());
  for (std::size_t i = 0; i < res.history.size(); ++i) EXPECT_EQ(again.history[i].val_mae, res.history[i].val_mae);
}

TEST(Checkpoint, BitExactRoundTrip) {
  auto c = tiny_config();
  c.graphs = {GraphRole::adjacency, GraphRole::adaptive};
  auto p = init_params(c);
  p.head_biases[0].mutable_data()[0] = -0.0;
  p.head_biases[0].mutable_data()[1] = 1.0 / 3.0;
  std::stringstream ss;
  write_checkpoint(ss, p, c);
  const auto back = read_checkpoint(ss);
  EXPECT_EQ(nlohmann::json(back.config), nlohmann::json(c));
  const auto a = p.named(), b = back.params.named();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    ASSERT_EQ(a[i].second.size(), b[i].second.size());
    for (std::size_t j = 0; j < a[i].second.size(); ++j)
      EXPECT_EQ(std::bit_cast<std::uint64_t>(a[i].second[j]), std::bit_cast<std::uint64_t>(b[i].second[j]));
  }
  std::stringstream bad("castnet-checkpoint 1\nseed 1\n");
  EXPECT_THROW(read_checkpoint(bad), IngestionError);
}

TEST(Batch, AssemblesCalendarFeatures) {
  const auto table = constant_table(40, 2, 1.0);
  const auto data = ForecastData::build(table, split(40, {0.5, 0.25, 0.25}, 10), 4, 2);
  auto c = tiny_config(2);
  c.input_steps = 4;
  c.horizon = 2;
  const std::vector<std::size_t> starts{0};
  const auto b = make_batch(data, starts, c);
  ASSERT_EQ(b.inputs.shape(), (Shape{1, 2, 4, kInputFeatures}));
  // 2024-01-01 00:05 is a Monday, slot 1, hour 0.
  const std::size_t row = (0 * 4 + 1) * kInputFeatures;
  EXPECT_EQ(b.inputs[row + 1 + 1], 1.0);
  EXPECT_EQ(b.inputs[row + 1 + 12 + 0], 1.0);
  EXPECT_EQ(b.inputs[row + 1 + 36 + 0], 1.0);
  double hot = 0;
  for (std::size_t i = 1; i < kInputFeatures; ++i) hot += b.inputs[row + i];
  EXPECT_EQ(hot, 3.0);
}

}  // namespace
}  // namespace castnet
