// Copyright 2026 The castnet Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "castnet/run_config.hpp"

namespace castnet {
namespace {

TEST(RunConfig, RejectsUnknownKeys) {
  RunConfig c;
  EXPECT_THROW(c.merge(Json::parse(R"({"sed": 3})")), ConfigError);
  EXPECT_THROW(c.merge(Json::parse(R"({"data": {"ratio": [0.6, 0.2, 0.2]}})")), ConfigError);
  EXPECT_THROW(c.merge(Json::parse(R"({"data": {"synthetic": {"node": 3}}})")), ConfigError);
  EXPECT_THROW(c.merge(Json::parse(R"({"conformal": {"gamma": 1}})")), ConfigError);
  EXPECT_THROW(c.merge(Json::parse(R"({"discovery": {"lambda": 1}})")), ConfigError);
  EXPECT_THROW(c.merge(Json::parse(R"({"alpha": "high"})")), ConfigError);
  EXPECT_THROW(c.merge(Json::parse("[1, 2]")), ConfigError);
}

TEST(RunConfig, MergeLayersOverDefaults) {
  RunConfig c = default_run_config();
  c.merge(Json::parse(R"({"alpha": 0.2, "data": {"synthetic": {"nodes": 8, "start": "2024-05-06 07:30"}},
                          "discovery": {"lambda_intra": 0.01}, "conformal": {"beta": 0.8}})"));
  EXPECT_EQ(c.alpha, 0.2);
  EXPECT_EQ(c.data.synthetic.nodes, 8u);
  EXPECT_EQ(c.data.synthetic.start, make_timestamp(2024, 5, 6, 7, 30));
  EXPECT_EQ(c.data.synthetic.length, SyntheticSpec{}.length);  // untouched keys keep their defaults
  EXPECT_EQ(c.discovery.solver.lambda_intra, 0.01);
  EXPECT_EQ(c.conformal.beta, 0.8);
  EXPECT_EQ(c.conformal.eta, 0.95);
}

TEST(RunConfig, AdjustmentConstantAutoOrFixed) {
  RunConfig c;
  c.merge(Json::parse(R"({"conformal": {"c_adj": 2}})"));
  ASSERT_TRUE(c.conformal.c_adj.has_value());
  EXPECT_EQ(c.conformal_params(10).c_adj, 2.0);
  c.merge(Json::parse(R"({"conformal": {"c_adj": "auto"}})"));
  EXPECT_FALSE(c.conformal.c_adj.has_value());
  EXPECT_EQ(c.to_json()["conformal"]["c_adj"], "auto");
  EXPECT_EQ(c.conformal_params(10).c_adj, CpstParams{}.c_adj);
  EXPECT_EQ(c.conformal_params(10).n_calib, 10u);
}

TEST(RunConfig, SeedPropagatesUnlessOverridden) {
  RunConfig c = default_run_config();
  c.merge(Json::parse(R"({"seed": 42})"));
  c.resolve();
  EXPECT_EQ(c.data.synthetic.seed, 42u);
  EXPECT_EQ(c.model.seed, 42u);
  RunConfig d = default_run_config();
  d.merge(Json::parse(R"({"seed": 42, "data": {"synthetic": {"seed": 5}}})"));
  d.resolve();
  EXPECT_EQ(d.data.synthetic.seed, 5u);
  EXPECT_EQ(d.model.seed, 42u);
}

TEST(RunConfig, ResolveValidates) {
  RunConfig c;
  c.alpha = 1.5;
  EXPECT_THROW(c.resolve(), ConfigError);
  c = RunConfig{};
  c.conformal.eta = 0.5;
  EXPECT_THROW(c.resolve(), ConfigError);
  c = RunConfig{};
  c.data.series_csv = "x.csv";
  EXPECT_THROW(c.resolve(), ConfigError);
  c = RunConfig{};
  c.discovery.lags = 0;
  EXPECT_THROW(c.resolve(), ConfigError);
}

TEST(RunConfig, PaperScaleKeepsNodesAndSeed) {
  RunConfig c = default_run_config();
  c.model.seed = 99;
  c.apply_paper_scale();
  EXPECT_TRUE(c.paper_scale);
  EXPECT_EQ(c.model.nodes, default_run_config().model.nodes);
  EXPECT_EQ(c.model.seed, 99u);
  EXPECT_EQ(c.model.width, 32u);
  EXPECT_EQ(c.model.blocks, 4u);
  EXPECT_EQ(c.model.epochs, 100u);
}

TEST(RunConfig, JsonRoundTrip) {
  RunConfig c = default_run_config();
  c.conformal.c_adj = -2.0;
  c.data.synthetic.nodes = 11;
  c.resolve();
  RunConfig back = default_run_config();
  back.merge(c.to_json());
  back.resolve();
  EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(RunConfig, LoadsFileWithComments) {
  const auto path = std::filesystem::temp_directory_path() / "castnet_config_test.json";
  {
    std::ofstream os(path);
    os << "{\n  // five-minute synthetic run\n  \"alpha\": 0.05, /* tighter */ \"seed\": 3\n}\n";
  }
  RunConfig c = load_run_config(path.string());
  EXPECT_EQ(c.alpha, 0.05);
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.model.epochs, default_run_config().model.epochs);
  {
    std::ofstream os(path);
    os << "{ \"alpha\": }";
  }
  EXPECT_THROW(load_run_config(path.string()), ConfigError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_run_config(path.string()), ConfigError);
}

}  // namespace
}  // namespace castnet
