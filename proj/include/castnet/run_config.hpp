// Copyright 2026 The castnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// JSON run configuration covering every pipeline stage. Unknown keys are
// rejected so that typos fail loudly instead of silently using defaults.

#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "castnet/conformal.hpp"
#include "castnet/dataio.hpp"
#include "castnet/dynotears.hpp"
#include "castnet/error.hpp"
#include "castnet/model.hpp"

namespace castnet {

using Json = nlohmann::json;

namespace detail {

// Binds JSON keys of one section to struct fields.
class JsonFields {
 public:
  explicit JsonFields(std::string section) : section_(std::move(section)) {}

  template <class T>
  JsonFields& add(std::string key, T& ref) {
    fields_.push_back({std::move(key), [&ref](const Json& v) { ref = v.get<T>(); }, [&ref] { return Json(ref); }});
    return *this;
  }

  JsonFields& add(std::string key, std::function<void(const Json&)> read, std::function<Json()> write) {
    fields_.push_back({std::move(key), std::move(read), std::move(write)});
    return *this;
  }

  void read(const Json& j) const {
    if (!j.is_object()) throw ConfigError("config section '" + section_ + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto f = std::find_if(fields_.begin(), fields_.end(), [&](const Field& x) { return x.key == it.key(); });
      if (f == fields_.end()) throw ConfigError("unknown config key '" + section_ + "." + it.key() + "'");
      try {
        f->read(it.value());
      } catch (const Json::exception& e) {
        throw ConfigError("config key '" + section_ + "." + it.key() + "': " + e.what());
      }
    }
  }

  Json write() const {
    Json j = Json::object();
    for (const auto& f : fields_) j[f.key] = f.write();
    return j;
  }

 private:
  struct Field {
    std::string key;
    std::function<void(const Json&)> read;
    std::function<Json()> write;
  };
  std::string section_;
  std::vector<Field> fields_;
};

}  // namespace detail

struct DataConfig {
  /// Empty: synthetic data from `synthetic`; otherwise a `timestamp,node_0,...` CSV.
  std::string series_csv;
  /// Edge list `src dst [weight]` used with series_csv.
  std::string adjacency;
  SyntheticSpec synthetic;
  std::array<double, 3> ratios{0.6, 0.2, 0.2};
  /// Leading training steps used for causal discovery (0: whole training split).
  std::size_t discovery_steps = 2016;
};

struct DiscoveryConfig {
  SolverConfig solver;
  int lags = 1;
};

struct ConformalConfig {
  double eta = 0.95;
  double zeta = 0.05;
  double beta = 0.9;
  /// Unset: chosen from the adjustment grid on validation residuals.
  std::optional<double> c_adj;
  /// 0: every validation window.
  std::size_t n_calib = 0;
  /// Number of nodes plotted by the report command.
  std::size_t plot_nodes = 3;
  /// Test windows plotted by the report command.
  std::size_t plot_steps = 288;
};

struct RunConfig {
  std::uint64_t seed = 7;
  double alpha = 0.1;
  bool paper_scale = false;
  DataConfig data;
  DiscoveryConfig discovery;
  ModelConfig model;
  ConformalConfig conformal;

  Json to_json() const {
    Json j;
    j["seed"] = seed;
    j["alpha"] = alpha;
    j["paper_scale"] = paper_scale;
    auto self = const_cast<RunConfig*>(this);
    j["data"] = self->data_fields().write();
    j["data"]["synthetic"] = self->synthetic_fields().write();
    j["discovery"] = self->discovery_fields().write();
    j["model"] = Json(model);
    j["conformal"] = self->conformal_fields().write();
    return j;
  }

  /// Layers a parsed JSON document over the current values.
  void merge(const Json& j) {
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& k = it.key();
      const auto& v = it.value();
      try {
        if (k == "seed") seed = v.get<std::uint64_t>();
        else if (k == "alpha") alpha = v.get<double>();
        else if (k == "paper_scale") paper_scale = v.get<bool>();
        else if (k == "data") {
          Json rest = v;
          if (rest.contains("synthetic")) {
            synthetic_fields().read(rest["synthetic"]);
            synthetic_seed_set_ = synthetic_seed_set_ || rest["synthetic"].contains("seed");
            rest.erase("synthetic");
          }
          data_fields().read(rest);
        } else if (k == "discovery") discovery_fields().read(v);
        else if (k == "model") {
          from_json(v, model);
          model_seed_set_ = model_seed_set_ || v.contains("seed");
        } else if (k == "conformal") conformal_fields().read(v);
        else throw ConfigError("unknown config key '" + k + "'");
      } catch (const Json::exception& e) {
        throw ConfigError("config key '" + k + "': " + e.what());
      }
    }
  }

  /// Propagates the master seed into sections that did not set their own and validates.
  void resolve() {
    if (!synthetic_seed_set_) data.synthetic.seed = seed;
    if (!model_seed_set_) model.seed = seed;
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
    if (discovery.lags < 1) throw ConfigError("discovery.lags must be >= 1");
    if (data.series_csv.empty() != data.adjacency.empty())
      throw ConfigError("data.series_csv and data.adjacency must be given together");
    conformal_params(1).validate();
  }

  /// Applies the paper-scale network preset, keeping the node count.
  void apply_paper_scale() {
    const auto nodes = model.nodes;
    const auto seed_keep = model.seed;
    model = ModelConfig::paper_scale(nodes);
    model.seed = seed_keep;
    paper_scale = true;
  }

  CpstParams conformal_params(std::size_t n_calib) const {
    CpstParams p;
    p.eta = conformal.eta;
    p.zeta = conformal.zeta;
    p.beta = conformal.beta;
    p.alpha = alpha;
    p.c_adj = conformal.c_adj.value_or(p.c_adj);
    p.n_calib = n_calib;
    return p;
  }

 private:
  bool synthetic_seed_set_ = false;
  bool model_seed_set_ = false;

  detail::JsonFields data_fields() {
    detail::JsonFields f("data");
    f.add("series_csv", data.series_csv)
        .add("adjacency", data.adjacency)
        .add("ratios", data.ratios)
        .add("discovery_steps", data.discovery_steps);
    return f;
  }

  detail::JsonFields synthetic_fields() {
    auto& s = data.synthetic;
    detail::JsonFields f("data.synthetic");
    f.add("nodes", s.nodes)
        .add("lags", s.lags)
        .add("density", s.density)
        .add("weight_min", s.weight_min)
        .add("weight_max", s.weight_max)
        .add("noise", s.noise)
        .add("length", s.length)
        .add("seed", s.seed)
        .add("burn_in", s.burn_in)
        .add("max_spectral_radius", s.max_spectral_radius)
        .add("geometric_degree", s.geometric_degree)
        .add("step_minutes", s.step_minutes)
        .add(
            "start", [&s](const Json& v) { s.start = parse_timestamp(v.get<std::string>()); },
            [&s] { return Json(format_timestamp(s.start)); });
    return f;
  }

  detail::JsonFields discovery_fields() {
    auto& c = discovery.solver;
    detail::JsonFields f("discovery");
    f.add("lags", discovery.lags)
        .add("lambda_intra", c.lambda_intra)
        .add("lambda_lag", c.lambda_lag)
        .add("threshold", c.threshold)
        .add("h_tol", c.h_tol)
        .add("rho_max", c.rho_max)
        .add("max_outer", c.max_outer)
        .add("standardize", c.standardize);
    return f;
  }

  detail::JsonFields conformal_fields() {
    auto& c = conformal;
    detail::JsonFields f("conformal");
    f.add("eta", c.eta)
        .add("zeta", c.zeta)
        .add("beta", c.beta)
        .add(
            "c_adj",
            [&c](const Json& v) {
              if (v.is_null() || (v.is_string() && v.get<std::string>() == "auto")) c.c_adj.reset();
              else c.c_adj = v.get<double>();
            },
            [&c] { return c.c_adj ? Json(*c.c_adj) : Json("auto"); })
        .add("n_calib", c.n_calib)
        .add("plot_nodes", c.plot_nodes)
        .add("plot_steps", c.plot_steps);
    return f;
  }
};

/// Toy-scale defaults sized for sub-five-minute runs on one core.
inline RunConfig default_run_config() {
  RunConfig c;
  c.model.nodes = c.data.synthetic.nodes;
  c.model.epochs = 30;
  c.model.patience = 15;
  c.model.batch = 16;
  c.model.batches_per_epoch = 16;
  c.model.eval_windows = 256;
  return c;
}

inline RunConfig load_run_config(const std::string& path, RunConfig base = default_run_config()) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  Json j;
  try {
    j = Json::parse(is, nullptr, true, true);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  base.merge(j);
  return base;
}

}  // namespace castnet
