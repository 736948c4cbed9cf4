// Copyright 2026 The castnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Causally-aware spatio-temporal multi-graph convolution forecaster.
//
// Activations flow as [batch, nodes, time, channels]. Each ST-block runs a
// gated attention temporal convolution per node followed by a multi-graph
// convolution across nodes, both with residual connections. A per-node
// fully-connected head maps the flattened block output to the horizon.

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "castnet/dataio.hpp"
#include "castnet/error.hpp"
#include "castnet/graphops.hpp"
#include "castnet/tensor.hpp"

namespace castnet {

enum class Fusion { weighted_sum, sum, mean, max, min };

inline std::string_view to_string(Fusion f) {
  switch (f) {
    case Fusion::weighted_sum: return "weighted_sum";
    case Fusion::sum: return "sum";
    case Fusion::mean: return "mean";
    case Fusion::max: return "max";
    case Fusion::min: return "min";
  }
  return "?";
}

inline Fusion parse_fusion(std::string_view s) {
  for (auto f : {Fusion::weighted_sum, Fusion::sum, Fusion::mean, Fusion::max, Fusion::min})
    if (to_string(f) == s) return f;
  throw ConfigError("unknown fusion operation '" + std::string(s) + "'");
}

/// Width of the per-step input after appending calendar features to the
/// single traffic feature.
inline constexpr std::size_t kInputFeatures = 1 + TimeFeatures::kWidth;

struct ModelConfig {
  std::size_t nodes = 30;
  std::size_t input_steps = 12;   ///< M
  std::size_t horizon = 12;       ///< H
  std::size_t width = 16;         ///< d
  std::size_t blocks = 2;
  int hops = 2;                   ///< K
  std::vector<std::size_t> dilations{1, 2, 4};
  std::size_t kernel_size = 2;
  std::vector<std::size_t> head_widths{64, 32, 12};
  Fusion fusion = Fusion::weighted_sum;
  std::vector<GraphRole> graphs{kAllGraphRoles.begin(), kAllGraphRoles.end()};
  std::size_t adaptive_dim = 10;
  double dropout = 0.3;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double grad_clip = 5.0;
  std::size_t epochs = 100;
  std::size_t batch = 16;
  /// 0 trains on every window each epoch; otherwise a random subset of
  /// batches_per_epoch * batch windows.
  std::size_t batches_per_epoch = 0;
  /// Cap on windows used for per-epoch train/validation MAE (0 = all).
  std::size_t eval_windows = 0;
  std::size_t patience = 15;
  std::uint64_t seed = 42;

  /// Table-1 sized network for the given node count.
  static ModelConfig paper_scale(std::size_t nodes) {
    ModelConfig c;
    c.nodes = nodes;
    c.width = 32;
    c.blocks = 4;
    c.head_widths = {512, 256, 12};
    c.adaptive_dim = 10;
    c.batch = 64;
    c.epochs = 100;
    return c;
  }

  bool uses(GraphRole r) const { return std::find(graphs.begin(), graphs.end(), r) != graphs.end(); }

  void validate() const {
    if (nodes == 0 || input_steps == 0 || horizon == 0 || width == 0 || blocks == 0)
      throw ConfigError("model dimensions must be positive");
    if (hops < 0) throw ConfigError("hops must be >= 0");
    if (dilations.empty() || std::find(dilations.begin(), dilations.end(), 0u) != dilations.end())
      throw ConfigError("dilations must be a nonempty list of positive integers");
    if (kernel_size == 0) throw ConfigError("kernel size must be positive");
    if (head_widths.empty() || head_widths.back() != horizon)
      throw ConfigError("last head width must equal the horizon");
    if (graphs.empty()) throw ConfigError("graph subset must be nonempty");
    for (std::size_t i = 0; i < graphs.size(); ++i)
      for (std::size_t j = i + 1; j < graphs.size(); ++j)
        if (graphs[i] == graphs[j]) throw ConfigError("graph subset lists a graph twice");
    if (uses(GraphRole::adaptive) && adaptive_dim == 0) throw ConfigError("adaptive_dim must be positive");
    if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must lie in [0, 1)");
    if (batch == 0) throw ConfigError("batch must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  std::vector<std::string> graphs;
  for (auto g : c.graphs) graphs.emplace_back(to_string(g));
  j = nlohmann::json{{"nodes", c.nodes},
                     {"input_steps", c.input_steps},
                     {"horizon", c.horizon},
                     {"width", c.width},
                     {"blocks", c.blocks},
                     {"hops", c.hops},
                     {"dilations", c.dilations},
                     {"kernel_size", c.kernel_size},
                     {"head_widths", c.head_widths},
                     {"fusion", std::string(to_string(c.fusion))},
                     {"graphs", graphs},
                     {"adaptive_dim", c.adaptive_dim},
                     {"dropout", c.dropout},
                     {"learning_rate", c.learning_rate},
                     {"weight_decay", c.weight_decay},
                     {"grad_clip", c.grad_clip},
                     {"epochs", c.epochs},
                     {"batch", c.batch},
                     {"batches_per_epoch", c.batches_per_epoch},
                     {"eval_windows", c.eval_windows},
                     {"patience", c.patience},
                     {"seed", c.seed}};
}

/// Reads known keys over the defaults in c; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    const auto& v = it.value();
    if (k == "nodes") c.nodes = v.get<std::size_t>();
    else if (k == "input_steps") c.input_steps = v.get<std::size_t>();
    else if (k == "horizon") c.horizon = v.get<std::size_t>();
    else if (k == "width") c.width = v.get<std::size_t>();
    else if (k == "blocks") c.blocks = v.get<std::size_t>();
    else if (k == "hops") c.hops = v.get<int>();
    else if (k == "dilations") c.dilations = v.get<std::vector<std::size_t>>();
    else if (k == "kernel_size") c.kernel_size = v.get<std::size_t>();
    else if (k == "head_widths") c.head_widths = v.get<std::vector<std::size_t>>();
    else if (k == "fusion") c.fusion = parse_fusion(v.get<std::string>());
    else if (k == "graphs") {
      c.graphs.clear();
      for (const auto& g : v) c.graphs.push_back(parse_graph_role(g.get<std::string>()));
    } else if (k == "adaptive_dim") c.adaptive_dim = v.get<std::size_t>();
    else if (k == "dropout") c.dropout = v.get<double>();
    else if (k == "learning_rate") c.learning_rate = v.get<double>();
    else if (k == "weight_decay") c.weight_decay = v.get<double>();
    else if (k == "grad_clip") c.grad_clip = v.get<double>();
    else if (k == "epochs") c.epochs = v.get<std::size_t>();
    else if (k == "batch") c.batch = v.get<std::size_t>();
    else if (k == "batches_per_epoch") c.batches_per_epoch = v.get<std::size_t>();
    else if (k == "eval_windows") c.eval_windows = v.get<std::size_t>();
    else if (k == "patience") c.patience = v.get<std::size_t>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else throw ConfigError("unknown model config key '" + k + "'");
  }
}

// ---------------------------------------------------------------------------
// Parameters

struct BlockParams {
  Tensor query, key, value;                 ///< d x d
  std::vector<Tensor> conv_kernels;         ///< [taps, d, d] for all but the last dilation
  std::vector<Tensor> conv_biases;          ///< [d]
  Tensor filter_kernel, filter_bias;        ///< tanh branch at the last dilation
  Tensor gate_kernel, gate_bias;            ///< sigmoid branch at the last dilation
  std::vector<std::vector<Tensor>> hop_weights;  ///< per graph in config order, per hop k: d x d
  Tensor fusion_logits;                     ///< [graphs], weighted_sum only
};

struct ModelParams {
  Tensor embed_weight, embed_bias;
  std::vector<BlockParams> blocks;
  Tensor adaptive_source, adaptive_target;  ///< N x d_n, adaptive graph only
  std::vector<Tensor> head_weights, head_biases;

  /// Every parameter in a fixed order with a stable name.
  std::vector<std::pair<std::string, Tensor>> named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto add = [&](std::string name, const Tensor& t) {
      if (t.defined()) out.emplace_back(std::move(name), t);
    };
    add("embed.weight", embed_weight);
    add("embed.bias", embed_bias);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const auto& p = blocks[b];
      const std::string pre = "block" + std::to_string(b) + ".";
      add(pre + "query", p.query);
      add(pre + "key", p.key);
      add(pre + "value", p.value);
      for (std::size_t i = 0; i < p.conv_kernels.size(); ++i) {
        add(pre + "conv" + std::to_string(i) + ".kernel", p.conv_kernels[i]);
        add(pre + "conv" + std::to_string(i) + ".bias", p.conv_biases[i]);
      }
      add(pre + "filter.kernel", p.filter_kernel);
      add(pre + "filter.bias", p.filter_bias);
      add(pre + "gate.kernel", p.gate_kernel);
      add(pre + "gate.bias", p.gate_bias);
      for (std::size_t g = 0; g < p.hop_weights.size(); ++g)
        for (std::size_t k = 0; k < p.hop_weights[g].size(); ++k)
          add(pre + "graph" + std::to_string(g) + ".hop" + std::to_string(k), p.hop_weights[g][k]);
      add(pre + "fusion", p.fusion_logits);
    }
    add("adaptive.source", adaptive_source);
    add("adaptive.target", adaptive_target);
    for (std::size_t i = 0; i < head_weights.size(); ++i) {
      add("head" + std::to_string(i) + ".weight", head_weights[i]);
      add("head" + std::to_string(i) + ".bias", head_biases[i]);
    }
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named()) n += t.size();
    return n;
  }

  /// Deep copy of all values into fresh leaves.
  ModelParams clone() const {
    ModelParams c = *this;
    auto copy = [](Tensor& t) {
      if (t.defined()) t = Tensor::parameter(t.shape(), {t.data().begin(), t.data().end()});
    };
    copy(c.embed_weight);
    copy(c.embed_bias);
    for (auto& b : c.blocks) {
      copy(b.query);
      copy(b.key);
      copy(b.value);
      for (auto& t : b.conv_kernels) copy(t);
      for (auto& t : b.conv_biases) copy(t);
      copy(b.filter_kernel);
      copy(b.filter_bias);
      copy(b.gate_kernel);
      copy(b.gate_bias);
      for (auto& g : b.hop_weights)
        for (auto& t : g) copy(t);
      copy(b.fusion_logits);
    }
    copy(c.adaptive_source);
    copy(c.adaptive_target);
    for (auto& t : c.head_weights) copy(t);
    for (auto& t : c.head_biases) copy(t);
    return c;
  }
};

namespace detail {

inline Tensor uniform_param(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

inline Tensor normal_param(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor::parameter(std::move(shape), std::move(v));
}

}  // namespace detail

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, N(0, 1) adaptive
/// embeddings, zero fusion logits.
inline ModelParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  using detail::uniform_param;
  const std::size_t d = cfg.width, taps = cfg.kernel_size;
  ModelParams p;
  p.embed_weight = uniform_param({kInputFeatures, d}, kInputFeatures, rng);
  p.embed_bias = uniform_param({d}, kInputFeatures, rng);
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    BlockParams bp;
    bp.query = uniform_param({d, d}, d, rng);
    bp.key = uniform_param({d, d}, d, rng);
    bp.value = uniform_param({d, d}, d, rng);
    for (std::size_t i = 0; i + 1 < cfg.dilations.size(); ++i) {
      bp.conv_kernels.push_back(uniform_param({taps, d, d}, taps * d, rng));
      bp.conv_biases.push_back(uniform_param({d}, taps * d, rng));
    }
    bp.filter_kernel = uniform_param({taps, d, d}, taps * d, rng);
    bp.filter_bias = uniform_param({d}, taps * d, rng);
    bp.gate_kernel = uniform_param({taps, d, d}, taps * d, rng);
    bp.gate_bias = uniform_param({d}, taps * d, rng);
    for (std::size_t g = 0; g < cfg.graphs.size(); ++g) {
      std::vector<Tensor> hops;
      for (int k = 0; k <= cfg.hops; ++k) hops.push_back(uniform_param({d, d}, d, rng));
      bp.hop_weights.push_back(std::move(hops));
    }
    if (cfg.fusion == Fusion::weighted_sum) bp.fusion_logits = Tensor::zeros({cfg.graphs.size()}, true);
    p.blocks.push_back(std::move(bp));
  }
  if (cfg.uses(GraphRole::adaptive)) {
    p.adaptive_source = detail::normal_param({cfg.nodes, cfg.adaptive_dim}, rng);
    p.adaptive_target = detail::normal_param({cfg.nodes, cfg.adaptive_dim}, rng);
  }
  std::size_t in = cfg.input_steps * d;
  for (auto w : cfg.head_widths) {
    p.head_weights.push_back(uniform_param({in, w}, in, rng));
    p.head_biases.push_back(uniform_param({w}, in, rng));
    in = w;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Layers

/// Randomness and mode for one forward pass.
struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

inline Tensor maybe_dropout(const Tensor& x, double p, const ForwardContext& ctx) {
  if (!ctx.training || p <= 0) return x;
  if (!ctx.rng) throw ContractError("training forward pass needs an RNG");
  return dropout(x, p, *ctx.rng, true);
}

/// [M, M] additive mask: 0 on and below the diagonal, -inf for future keys.
inline Tensor causal_mask(std::size_t m) {
  std::vector<double> v(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) v[i * m + j] = -std::numeric_limits<double>::infinity();
  return Tensor::constant({m, m}, std::move(v));
}

/// Concatenates per-node values [B, N, M] with calendar one-hots and applies
/// the shared affine embedding, giving [B, N, M, d].
inline Tensor embed(const Tensor& inputs, const ModelParams& p) {
  if (inputs.rank() != 4 || inputs.dim(3) != kInputFeatures)
    throw ShapeError("embedding input must be [B, N, M, " + std::to_string(kInputFeatures) + "]");
  return matmul(inputs, p.embed_weight) + p.embed_bias;
}

/// Builds the [B, N, M, F'] embedding input from value slabs and their step timestamps.
inline Tensor assemble_inputs(std::span<const Matrix> values, std::span<const std::vector<Timestamp>> times) {
  if (values.empty() || values.size() != times.size()) throw ContractError("inputs and timestamps must align");
  const auto N = static_cast<std::size_t>(values[0].rows());
  const auto M = static_cast<std::size_t>(values[0].cols());
  std::vector<double> data(values.size() * N * M * kInputFeatures, 0.0);
  for (std::size_t b = 0; b < values.size(); ++b) {
    if (times[b].size() != M)
      throw ContractError("window has " + std::to_string(M) + " steps but " + std::to_string(times[b].size()) +
                          " timestamps");
    if (static_cast<std::size_t>(values[b].rows()) != N || static_cast<std::size_t>(values[b].cols()) != M)
      throw ShapeError("inconsistent window shapes in batch");
    for (std::size_t t = 0; t < M; ++t) {
      const auto hot = TimeFeatures::from(times[b][t]).one_hot();
      for (std::size_t n = 0; n < N; ++n) {
        double* row = data.data() + ((b * N + n) * M + t) * kInputFeatures;
        row[0] = values[b](static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(t));
        std::copy(hot.begin(), hot.end(), row + 1);
      }
    }
  }
  return Tensor::constant({values.size(), N, M, kInputFeatures}, std::move(data));
}

/// softmax((Q K^T + mask) / sqrt(d)) V over time for every sequence in x
/// ([..., M, d] with leading dimensions flattened into sequences).
inline Tensor masked_attention(const Tensor& x, const BlockParams& p) {
  const std::size_t m = x.dim(x.rank() - 2), d = x.dim(x.rank() - 1);
  const std::size_t seqs = x.size() / (m * d);
  const Tensor xs = reshape(x, {seqs, m, d});
  const Tensor q = matmul(xs, p.query);
  const Tensor k = matmul(xs, p.key);
  const Tensor v = matmul(xs, p.value);
  const Tensor scores = scale(matmul(q, transpose(k)) + causal_mask(m), 1.0 / std::sqrt(static_cast<double>(d)));
  return reshape(matmul(softmax_rows(scores), v), x.shape());
}

/// Attention, dilated convolutions and the tanh/sigmoid gate for x
/// ([B, N, M, d]); returns the gated features without the residual.
inline Tensor gated_temporal(const Tensor& x, const BlockParams& p, const ModelConfig& cfg,
                             const ForwardContext& ctx) {
  const std::size_t m = x.dim(2), d = x.dim(3);
  const std::size_t seqs = x.dim(0) * x.dim(1);
  Tensor h = maybe_dropout(masked_attention(x, p), cfg.dropout, ctx);
  h = reshape(h, {seqs, m, d});
  for (std::size_t i = 0; i + 1 < cfg.dilations.size(); ++i)
    h = dilated_conv1d(h, p.conv_kernels[i], cfg.dilations[i]) + p.conv_biases[i];
  const std::size_t last = cfg.dilations.back();
  const Tensor filter = tanh(dilated_conv1d(h, p.filter_kernel, last) + p.filter_bias);
  const Tensor gate = sigmoid(dilated_conv1d(h, p.gate_kernel, last) + p.gate_bias);
  return reshape(filter * gate, x.shape());
}

/// Gated-ATCN with its residual connection.
inline Tensor gated_atcn(const Tensor& x, const BlockParams& p, const ModelConfig& cfg, const ForwardContext& ctx) {
  return x + gated_temporal(x, p, cfg, ctx);
}

/// Operator powers [I, G, ..., G^K] for one graph role; the adaptive graph
/// is built from the current embeddings and stays on the tape.
inline std::vector<Tensor> graph_powers(GraphRole role, const GraphBundle& bundle, const ModelParams& params,
                                        int hops) {
  if (role != GraphRole::adaptive) {
    const auto& cached = bundle.cached_powers(role);
    if (static_cast<int>(cached.size()) < hops + 1) throw ContractError("bundle caches fewer hops than configured");
    return {cached.begin(), cached.begin() + hops + 1};
  }
  const Tensor a = adaptive_graph(params.adaptive_source, params.adaptive_target);
  std::vector<Tensor> out{to_tensor(Matrix::Identity(static_cast<Eigen::Index>(a.dim(0)),
                                                     static_cast<Eigen::Index>(a.dim(0))))};
  for (int k = 1; k <= hops; ++k) out.push_back(k == 1 ? a : matmul(out.back(), a));
  return out;
}

/// Fuses per-graph diffusion outputs sum_k G^k X W_k for x ([B, N, M, d]).
/// Returns the fused spatial features without the residual.
inline Tensor mgcn(const Tensor& x, const std::vector<std::vector<Tensor>>& powers_per_graph, const BlockParams& p,
                   const ModelConfig& cfg) {
  const std::size_t B = x.dim(0), N = x.dim(1), M = x.dim(2), d = x.dim(3);
  const Tensor flat_nodes = reshape(x, {B, N, M * d});
  const Tensor flat_rows = reshape(x, {B * N * M, d});
  std::vector<Tensor> branches;
  for (std::size_t g = 0; g < powers_per_graph.size(); ++g) {
    const auto& pw = powers_per_graph[g];
    Tensor y = matmul(flat_rows, p.hop_weights[g][0]);
    for (std::size_t k = 1; k < pw.size(); ++k) {
      const Tensor mixed = reshape(matmul(pw[k], flat_nodes), {B * N * M, d});
      y = y + matmul(mixed, p.hop_weights[g][k]);
    }
    branches.push_back(y);
  }
  Tensor fused;
  switch (cfg.fusion) {
    case Fusion::weighted_sum: {
      const Tensor w = softmax_rows(reshape(p.fusion_logits, {1, branches.size()}));
      fused = element(w, 0) * branches[0];
      for (std::size_t g = 1; g < branches.size(); ++g) fused = fused + element(w, g) * branches[g];
      break;
    }
    case Fusion::sum:
    case Fusion::mean:
      fused = branches[0];
      for (std::size_t g = 1; g < branches.size(); ++g) fused = fused + branches[g];
      if (cfg.fusion == Fusion::mean) fused = scale(fused, 1.0 / static_cast<double>(branches.size()));
      break;
    case Fusion::max:
      fused = branches[0];
      for (std::size_t g = 1; g < branches.size(); ++g) fused = maximum(fused, branches[g]);
      break;
    case Fusion::min:
      fused = branches[0];
      for (std::size_t g = 1; g < branches.size(); ++g) fused = minimum(fused, branches[g]);
      break;
  }
  return reshape(fused, x.shape());
}

/// One ST-block: Gated-ATCN then MGCN, each with a residual connection.
inline Tensor st_block(const Tensor& x, const BlockParams& p, const std::vector<std::vector<Tensor>>& powers,
                       const ModelConfig& cfg, const ForwardContext& ctx) {
  const Tensor temporal = gated_atcn(x, p, cfg, ctx);
  return temporal + maybe_dropout(mgcn(temporal, powers, p, cfg), cfg.dropout, ctx);
}

/// Normalized predictions [B, N, H] for embedding inputs [B, N, M, F'].
inline Tensor forward(const Tensor& inputs, const ModelParams& params, const GraphBundle& bundle,
                      const ModelConfig& cfg, const ForwardContext& ctx = {}) {
  if (inputs.rank() != 4 || inputs.dim(1) != cfg.nodes || inputs.dim(2) != cfg.input_steps)
    throw ShapeError("forward input " + to_string(inputs.shape()) + " does not match the model config");
  if (bundle.nodes() != cfg.nodes) throw ShapeError("graph bundle node count does not match the model config");
  std::vector<std::vector<Tensor>> powers;
  for (auto role : cfg.graphs) powers.push_back(graph_powers(role, bundle, params, cfg.hops));

  const std::size_t B = inputs.dim(0), N = cfg.nodes, M = cfg.input_steps, d = cfg.width;
  Tensor prev = embed(inputs, params);
  Tensor out = prev;
  for (const auto& bp : params.blocks) {
    prev = out;
    out = st_block(out, bp, powers, cfg, ctx);
  }
  // Residual across the last two blocks; a single block adds its input.
  Tensor h = reshape(out + prev, {B * N, M * d});
  for (std::size_t i = 0; i < params.head_weights.size(); ++i) {
    h = matmul(h, params.head_weights[i]) + params.head_biases[i];
    if (i + 1 < params.head_weights.size()) h = relu(h);
  }
  return reshape(h, {B, N, cfg.horizon});
}

/// Mean over batch, nodes and horizon of |Y - Y_hat|.
inline Tensor mae_loss(const Tensor& prediction, const Tensor& target) { return mean(abs(target - prediction)); }

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with L2 weight decay folded into the gradient.
class Adam {
 public:
  Adam(std::vector<Tensor> params, double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  /// Scales all gradients so their joint L2 norm is at most max_norm; returns the norm before clipping.
  double clip(double max_norm) {
    double sq = 0;
    for (const auto& p : params_)
      for (double g : p.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) scale_ = max_norm / norm;
    else scale_ = 1.0;
    return norm;
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      auto w = p.mutable_data();
      auto g = p.grad();
      if (g.size() != w.size()) continue;  // not reached by the last backward pass
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j] * scale_ + wd_ * w[j];
        m_[i][j] = b1_ * m_[i][j] + (1 - b1_) * gj;
        v_[i][j] = b2_ * v_[i][j] + (1 - b2_) * gj * gj;
        w[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
      }
    }
    scale_ = 1.0;
  }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  double scale_ = 1.0;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Data feed and training

/// Normalized series plus the window starts of each split.
struct ForecastData {
  const SeriesTable* table = nullptr;
  Normalizer normalizer;
  Matrix normalized;  ///< T x N
  std::vector<std::size_t> train, val, test;

  static ForecastData build(const SeriesTable& t, const Splits& s, std::size_t m, std::size_t h) {
    ForecastData d;
    d.table = &t;
    d.normalizer = Normalizer::fit(t, s.train);
    d.normalized = d.normalizer.normalize(t.values);
    d.train = window_starts(t, s.train, m, h);
    d.val = window_starts(t, s.val, m, h);
    d.test = window_starts(t, s.test, m, h);
    return d;
  }
};

struct Batch {
  Tensor inputs;   ///< [B, N, M, F']
  Tensor targets;  ///< [B, N, H] normalized
};

inline Batch make_batch(const ForecastData& data, std::span<const std::size_t> starts, const ModelConfig& cfg) {
  std::vector<Matrix> values;
  std::vector<std::vector<Timestamp>> times;
  std::vector<double> targets;
  targets.reserve(starts.size() * cfg.nodes * cfg.horizon);
  for (auto s : starts) {
    auto w = extract_window(*data.table, data.normalized, s, cfg.input_steps, cfg.horizon);
    values.push_back(std::move(w.inputs));
    times.push_back(std::move(w.input_times));
    for (Eigen::Index n = 0; n < w.targets.rows(); ++n)
      for (Eigen::Index h = 0; h < w.targets.cols(); ++h) targets.push_back(w.targets(n, h));
  }
  Batch b;
  b.inputs = assemble_inputs(values, times);
  b.targets = Tensor::constant({starts.size(), cfg.nodes, cfg.horizon}, std::move(targets));
  return b;
}

/// Denormalized predictions (N x H per window) in evaluation mode.
inline std::vector<Matrix> predict(const ForecastData& data, std::span<const std::size_t> starts,
                                   const ModelParams& params, const GraphBundle& bundle, const ModelConfig& cfg) {
  NoGradGuard guard;
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < starts.size(); i += cfg.batch) {
    const auto chunk = starts.subspan(i, std::min(cfg.batch, starts.size() - i));
    const auto b = make_batch(data, chunk, cfg);
    const Tensor y = forward(b.inputs, params, bundle, cfg);
    for (std::size_t j = 0; j < chunk.size(); ++j) {
      Matrix m(static_cast<Eigen::Index>(cfg.nodes), static_cast<Eigen::Index>(cfg.horizon));
      for (std::size_t n = 0; n < cfg.nodes; ++n)
        for (std::size_t h = 0; h < cfg.horizon; ++h)
          m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(h)) = data.normalizer.denormalize(
              y[(j * cfg.nodes + n) * cfg.horizon + h], static_cast<Eigen::Index>(n));
      out.push_back(std::move(m));
    }
  }
  return out;
}

/// MAE in original units over the given windows.
inline double evaluate_mae(const ForecastData& data, std::span<const std::size_t> starts, const ModelParams& params,
                           const GraphBundle& bundle, const ModelConfig& cfg) {
  const auto preds = predict(data, starts, params, bundle, cfg);
  double total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < starts.size(); ++i) {
    const auto w = extract_window(*data.table, data.table->values, starts[i], cfg.input_steps, cfg.horizon);
    total += (w.targets - preds[i]).cwiseAbs().sum();
    count += static_cast<std::size_t>(w.targets.size());
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

struct EpochRecord {
  std::size_t epoch = 0;  ///< 0 is the untrained model
  double train_mae = 0;   ///< original units, evaluation mode
  double val_mae = 0;
};

struct TrainResult {
  ModelParams params;  ///< best validation checkpoint
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_mae = std::numeric_limits<double>::infinity();
};

namespace detail {

// Evenly spaced subset of at most cap entries (cap 0 keeps everything).
inline std::vector<std::size_t> spread(const std::vector<std::size_t>& v, std::size_t cap) {
  if (cap == 0 || v.size() <= cap) return v;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < cap; ++i) out.push_back(v[i * v.size() / cap]);
  return out;
}

}  // namespace detail

/// Minimizes the MAE objective with Adam; keeps the best validation checkpoint
/// and stops after `patience` epochs without improvement.
inline TrainResult train(const ForecastData& data, const GraphBundle& bundle, const ModelConfig& cfg) {
  cfg.validate();
  if (data.train.empty() || data.val.empty()) throw ContractError("training needs train and validation windows");
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  ModelParams params = init_params(cfg);
  std::vector<Tensor> leaves;
  for (const auto& [name, t] : params.named()) leaves.push_back(t);
  Adam opt(leaves, cfg.learning_rate, cfg.weight_decay);

  const auto train_eval = detail::spread(data.train, cfg.eval_windows);
  const auto val_eval = detail::spread(data.val, cfg.eval_windows);
  TrainResult res;
  auto record = [&](std::size_t epoch) {
    EpochRecord r{epoch, evaluate_mae(data, train_eval, params, bundle, cfg),
                  evaluate_mae(data, val_eval, params, bundle, cfg)};
    if (!std::isfinite(r.val_mae) || !std::isfinite(r.train_mae))
      throw TrainingDivergence("validation MAE is not finite after epoch " + std::to_string(epoch));
    res.history.push_back(r);
    if (r.val_mae < res.best_val_mae) {
      res.best_val_mae = r.val_mae;
      res.best_epoch = epoch;
      res.params = params.clone();
    }
  };
  record(0);

  std::vector<std::size_t> order = data.train;
  ForwardContext ctx{true, &rng};
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t limit = order.size();
    if (cfg.batches_per_epoch) limit = std::min(limit, cfg.batches_per_epoch * cfg.batch);
    for (std::size_t i = 0; i < limit; i += cfg.batch) {
      const std::span<const std::size_t> chunk(order.data() + i, std::min(cfg.batch, limit - i));
      const auto b = make_batch(data, chunk, cfg);
      const Tensor loss = mae_loss(forward(b.inputs, params, bundle, cfg, ctx), b.targets);
      if (!std::isfinite(loss.item()))
        throw TrainingDivergence("non-finite training loss in epoch " + std::to_string(epoch));
      backward(loss);
      opt.clip(cfg.grad_clip);
      opt.step();
    }
    record(epoch);
    if (epoch - res.best_epoch >= cfg.patience) break;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   castnet-checkpoint 1
//   seed <seed>
//   config <single-line JSON>
//   param <name> <d0>x<d1>... <hex of each IEEE-754 double, 16 chars per value>
//   end

inline void write_checkpoint(std::ostream& os, const ModelParams& p, const ModelConfig& cfg) {
  os << "castnet-checkpoint 1\n";
  os << "seed " << cfg.seed << '\n';
  os << "config " << nlohmann::json(cfg).dump() << '\n';
  char buf[17];
  for (const auto& [name, t] : p.named()) {
    os << "param " << name << ' ';
    for (std::size_t i = 0; i < t.rank(); ++i) os << (i ? "x" : "") << t.dim(i);
    os << ' ';
    for (double v : t.data()) {
      std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(v)));
      os << buf;
    }
    os << '\n';
  }
  os << "end\n";
}

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};

inline Checkpoint read_checkpoint(std::istream& is) {
  std::string line, word;
  if (!std::getline(is, line) || line != "castnet-checkpoint 1") throw IngestionError("not a castnet checkpoint");
  Checkpoint c;
  std::uint64_t seed = 0;
  if (!(is >> word >> seed) || word != "seed") throw IngestionError("checkpoint missing seed");
  std::getline(is, line);
  if (!(is >> word) || word != "config") throw IngestionError("checkpoint missing config");
  std::getline(is, line);
  from_json(nlohmann::json::parse(line), c.config);
  c.config.seed = seed;
  c.params = init_params(c.config);
  auto named = c.params.named();
  std::size_t loaded = 0;
  while (is >> word && word == "param") {
    std::string name, dims, hex;
    is >> name >> dims >> hex;
    auto it = std::find_if(named.begin(), named.end(), [&](const auto& e) { return e.first == name; });
    if (it == named.end()) throw IngestionError("checkpoint has unknown parameter " + name);
    Tensor& t = it->second;
    if (hex.size() != 16 * t.size()) throw IngestionError("checkpoint parameter " + name + " has wrong length");
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < t.size(); ++i)
      w[i] = std::bit_cast<double>(static_cast<std::uint64_t>(std::stoull(hex.substr(16 * i, 16), nullptr, 16)));
    ++loaded;
  }
  if (word != "end" || loaded != named.size()) throw IngestionError("checkpoint is truncated");
  return c;
}

inline void save_checkpoint(const std::string& path, const ModelParams& p, const ModelConfig& cfg) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  write_checkpoint(os, p, cfg);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("cannot open checkpoint " + path);
  return read_checkpoint(is);
}

}  // namespace castnet
