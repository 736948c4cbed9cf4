// Copyright 2026 The castnet Authors
// SPDX-License-Identifier: Apache-2.0
//
// castnet: generate data, discover causal graphs, train the forecaster,
// calibrate prediction regions, evaluate and report.

#include <CLI11.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "castnet/conformal.hpp"
#include "castnet/dataio.hpp"
#include "castnet/dynotears.hpp"
#include "castnet/graphops.hpp"
#include "castnet/metrics.hpp"
#include "castnet/model.hpp"
#include "castnet/run_config.hpp"

namespace fs = std::filesystem;
using namespace castnet;

namespace {

// Artifact names inside the output directory.
constexpr const char* kSeries = "series.csv";
constexpr const char* kTruth = "truth_graphs.txt";
constexpr const char* kAdjacency = "adjacency.txt";
constexpr const char* kGraphs = "graphs.txt";
constexpr const char* kGraphStats = "graph_stats.csv";
constexpr const char* kDiscovery = "discovery.csv";
constexpr const char* kCheckpoint = "model.ckpt";
constexpr const char* kHistory = "training_history.csv";
constexpr const char* kPredVal = "predictions_val.csv";
constexpr const char* kPredTest = "predictions_test.csv";
constexpr const char* kRegionsCpst = "regions_cpst.csv";
constexpr const char* kRegionsScp = "regions_scp.csv";
constexpr const char* kRegionsBonf = "regions_bonferroni.csv";
constexpr const char* kSelection = "conformal_selection.csv";
constexpr const char* kMetrics = "metrics.csv";
constexpr const char* kIntervals = "interval_metrics.csv";
constexpr const char* kMetricsTable = "metrics.txt";
constexpr const char* kReportDir = "report";
constexpr const char* kResolved = "resolved_config.json";
constexpr const char* kManifest = "manifest.txt";

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
  bool paper_scale = false;
  bool force = false;
  std::string out = "castnet_run";
};

struct Context {
  Options opt;
  RunConfig cfg;
  fs::path out;

  std::string path(const std::string& name) const { return (out / name).string(); }
};

RunConfig resolve_config(const Options& opt) {
  RunConfig cfg = default_run_config();
  Json j = Json::object();
  if (!opt.config.empty()) {
    std::ifstream is(opt.config);
    if (!is) throw ConfigError("cannot open config file " + opt.config);
    try {
      j = Json::parse(is, nullptr, true, true);
    } catch (const Json::parse_error& e) {
      throw ConfigError("config file " + opt.config + " is not valid JSON: " + e.what());
    }
  }
  // The preset goes first so explicit model keys in the file still win.
  const bool paper = opt.paper_scale || (j.is_object() && j.value("paper_scale", false));
  if (paper) cfg.apply_paper_scale();
  cfg.merge(j);
  if (opt.seed) cfg.seed = *opt.seed;
  if (opt.alpha) cfg.alpha = *opt.alpha;
  cfg.resolve();
  return cfg;
}

std::string sha256_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error("cannot read " + p.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("SHA-256 initialisation failed");
  }
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

// Rewrites the manifest with the hash of every artifact below the output directory.
void write_manifest(const Context& c) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(c.out))
    if (e.is_regular_file() && e.path().filename() != kManifest)
      files.push_back(fs::relative(e.path(), c.out).generic_string());
  std::sort(files.begin(), files.end());
  std::ofstream os(c.path(kManifest));
  for (const auto& f : files) os << sha256_file(c.out / f) << "  " << f << '\n';
  if (!os) throw Error("cannot write manifest");
}

void write_resolved(const Context& c) {
  RunConfig cfg = c.cfg;
  // The network is sized from the series actually on disk.
  if (fs::exists(c.out / kSeries)) {
    std::ifstream is(c.path(kSeries));
    std::string header;
    std::getline(is, header);
    cfg.model.nodes = static_cast<std::size_t>(std::count(header.begin(), header.end(), ','));
  }
  std::ofstream os(c.path(kResolved));
  os << cfg.to_json().dump(2) << '\n';
  if (!os) throw Error("cannot write resolved config");
}

void require(const Context& c, const std::string& name, const std::string& producer) {
  if (!fs::exists(c.out / name))
    throw MissingArtifactError(name + " not found in " + c.out.string() + "; run `castnet " + producer +
                               "` first");
}

void refuse_overwrite(const Context& c, std::initializer_list<const char*> outputs) {
  if (c.opt.force) return;
  for (const auto* o : outputs)
    if (fs::exists(c.out / o))
      throw Error(c.path(o) + " already exists; pass --force to overwrite");
}

template <class F>
void write_file(const std::string& path, F&& body) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  body(os);
  if (!os) throw Error("failed writing " + path);
}

// ---------------------------------------------------------------------------
// Shared loading

struct Loaded {
  SeriesTable table;
  Matrix adjacency;
  Splits splits;
};

Loaded load_inputs(const Context& c) {
  require(c, kSeries, "generate");
  require(c, kAdjacency, "generate");
  Loaded l;
  l.table = load_series_csv(c.path(kSeries));
  l.adjacency = load_adjacency(c.path(kAdjacency), l.table.nodes());
  const auto& m = c.cfg.model;
  l.splits = split(l.table.length(), c.cfg.data.ratios, m.input_steps + m.horizon);
  return l;
}

ModelConfig model_config_for(const Context& c, std::size_t nodes) {
  ModelConfig m = c.cfg.model;
  m.nodes = nodes;
  if (m.head_widths.back() != m.horizon) m.head_widths.back() = m.horizon;
  m.validate();
  return m;
}

struct ForecastSet {
  std::vector<std::size_t> starts;
  std::vector<Timestamp> origins;  ///< timestamp of the first target step
  std::vector<Matrix> y, yhat;     ///< N x H each
};

void write_predictions(const std::string& path, const SeriesTable& t, const ForecastSet& f) {
  write_file(path, [&](std::ostream& os) {
    os << "window,timestamp,node,step,yhat,y\n" << std::setprecision(17);
    for (std::size_t w = 0; w < f.starts.size(); ++w)
      for (Eigen::Index n = 0; n < f.y[w].rows(); ++n)
        for (Eigen::Index h = 0; h < f.y[w].cols(); ++h)
          os << f.starts[w] << ',' << format_timestamp(f.origins[w] + h * t.step()) << ',' << n << ',' << h + 1
             << ',' << f.yhat[w](n, h) << ',' << f.y[w](n, h) << '\n';
  });
}

ForecastSet read_predictions(const std::string& path, std::size_t nodes, std::size_t horizon) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("cannot open " + path);
  std::string line;
  std::getline(is, line);
  if (line != "window,timestamp,node,step,yhat,y") throw IngestionError(path + " has an unexpected header");
  ForecastSet f;
  std::map<std::size_t, std::size_t> index;
  while (std::getline(is, line)) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cols.push_back(cell);
    if (cols.size() != 6) throw IngestionError(path + " has a malformed row: " + line);
    const auto w = std::stoull(cols[0]);
    const auto n = static_cast<Eigen::Index>(std::stoul(cols[2]));
    const auto h = static_cast<Eigen::Index>(std::stoul(cols[3])) - 1;
    if (n >= static_cast<Eigen::Index>(nodes) || h < 0 || h >= static_cast<Eigen::Index>(horizon))
      throw IngestionError(path + " has an out-of-range node or step: " + line);
    auto [it, inserted] = index.emplace(w, f.starts.size());
    if (inserted) {
      f.starts.push_back(w);
      f.origins.push_back(parse_timestamp(cols[1]));
      f.y.push_back(Matrix::Zero(static_cast<Eigen::Index>(nodes), static_cast<Eigen::Index>(horizon)));
      f.yhat.push_back(f.y.back());
    }
    if (h == 0 && n == 0) f.origins[it->second] = parse_timestamp(cols[1]);
    f.yhat[it->second](n, h) = std::stod(cols[4]);
    f.y[it->second](n, h) = std::stod(cols[5]);
  }
  return f;
}

struct RegionFile {
  double alpha = 0;
  std::vector<RegionRow> rows;
};

RegionFile read_regions(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("cannot open " + path);
  RegionFile f;
  std::string line;
  std::getline(is, line);
  if (line.rfind("# alpha=", 0) != 0) throw IngestionError(path + " lacks the alpha header");
  f.alpha = std::stod(line.substr(8));
  std::getline(is, line);
  while (std::getline(is, line)) {
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cols.push_back(cell);
    if (cols.size() != 8) throw IngestionError(path + " has a malformed row: " + line);
    RegionRow r;
    r.timestamp = parse_timestamp(cols[0]);
    r.node = std::stoul(cols[1]);
    r.step = std::stoul(cols[2]);
    r.region.yhat = std::stod(cols[3]);
    r.region.lower = std::stod(cols[4]);
    r.region.upper = std::stod(cols[5]);
    r.y = std::stod(cols[6]);
    f.rows.push_back(r);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_generate(Context& c) {
  if (!c.opt.force && fs::exists(c.out) && !fs::is_empty(c.out))
    throw Error("output directory " + c.out.string() + " already exists; pass --force to overwrite");
  fs::create_directories(c.out);
  const auto& d = c.cfg.data;
  if (d.series_csv.empty()) {
    const auto data = generate_svar(d.synthetic);
    save_series_csv(c.path(kSeries), data.table);
    save_graphs(c.path(kTruth), data.truth.graphs);
    save_adjacency(c.path(kAdjacency), data.truth.adjacency);
    std::cout << "generated " << data.table.length() << " steps x " << data.table.nodes() << " nodes ("
              << data.truth.graphs.intra_edge_count() << " contemporaneous, " << data.truth.graphs.lag_edge_count()
              << " lagged edges)\n";
  } else {
    const auto table = load_series_csv(d.series_csv);
    const auto adj = load_adjacency(d.adjacency, table.nodes());
    save_series_csv(c.path(kSeries), table);
    save_adjacency(c.path(kAdjacency), adj);
    std::cout << "ingested " << table.length() << " steps x " << table.nodes() << " nodes from " << d.series_csv
              << '\n';
  }
}

void cmd_discover(Context& c) {
  refuse_overwrite(c, {kGraphs, kGraphStats, kDiscovery});
  const auto in = load_inputs(c);
  const auto& train = in.splits.train;
  std::size_t steps = train.size();
  if (c.cfg.data.discovery_steps) steps = std::min(steps, c.cfg.data.discovery_steps);
  const Matrix slice = in.table.values.middleRows(static_cast<Eigen::Index>(train.begin), static_cast<Eigen::Index>(steps));
  const auto res = fit(SvarDataset::from_series(slice, c.cfg.discovery.lags), c.cfg.discovery.solver);
  save_graphs(c.path(kGraphs), res.graphs);

  Matrix lag_support = Matrix::Zero(res.graphs.nodes(), res.graphs.nodes());
  for (const auto& a : res.graphs.lagged) lag_support += a.cwiseAbs();
  write_file(c.path(kGraphStats), [&](std::ostream& os) {
    write_stats_csv_header(os);
    write_stats_csv_row(os, "adjacency", graph_stats(in.adjacency, true));
    write_stats_csv_row(os, "intra", graph_stats(res.graphs.intra, false));
    write_stats_csv_row(os, "lagged", graph_stats(lag_support, false));
  });

  std::optional<CausalGraphSet> truth;
  if (fs::exists(c.out / kTruth)) truth = load_graphs(c.path(kTruth));
  write_file(c.path(kDiscovery), [&](std::ostream& os) {
    os << "quantity,value\n" << std::setprecision(10);
    os << "samples," << steps << '\n';
    os << "final_h," << res.state.h << '\n';
    os << "final_rho," << res.state.rho << '\n';
    os << "outer_iterations," << res.state.outer_iterations << '\n';
    os << "intra_edges," << res.graphs.intra_edge_count() << '\n';
    os << "lagged_edges," << res.graphs.lag_edge_count() << '\n';
    if (truth) {
      const auto fi = score_edges(truth->intra, res.graphs.intra);
      os << "intra_precision," << fi.precision() << "\nintra_recall," << fi.recall() << "\nintra_f1," << fi.f1()
         << '\n';
      for (std::size_t k = 0; k < res.graphs.lagged.size() && k < truth->lagged.size(); ++k) {
        const auto fl = score_edges(truth->lagged[k], res.graphs.lagged[k]);
        os << "lag" << k + 1 << "_precision," << fl.precision() << "\nlag" << k + 1 << "_recall," << fl.recall()
           << "\nlag" << k + 1 << "_f1," << fl.f1() << '\n';
      }
    }
  });
  std::cout << "discovered " << res.graphs.intra_edge_count() << " contemporaneous and "
            << res.graphs.lag_edge_count() << " lagged edges (h = " << res.state.h << ")\n";
}

void cmd_train(Context& c) {
  refuse_overwrite(c, {kCheckpoint, kHistory});
  const auto in = load_inputs(c);
  require(c, kGraphs, "discover");
  const auto graphs = load_graphs(c.path(kGraphs));
  const auto mc = model_config_for(c, in.table.nodes());
  const auto bundle = GraphBundle::build(in.adjacency, graphs, mc.hops);
  const auto data = ForecastData::build(in.table, in.splits, mc.input_steps, mc.horizon);
  const auto res = train(data, bundle, mc);
  save_checkpoint(c.path(kCheckpoint), res.params, mc);
  write_file(c.path(kHistory), [&](std::ostream& os) {
    os << "epoch,train_mae,val_mae\n" << std::setprecision(10);
    for (const auto& e : res.history) os << e.epoch << ',' << e.train_mae << ',' << e.val_mae << '\n';
  });
  std::cout << "trained " << res.history.size() - 1 << " epochs; best validation MAE " << res.best_val_mae
            << " at epoch " << res.best_epoch << " (" << res.params.count() << " parameters)\n";
}

void cmd_predict(Context& c) {
  refuse_overwrite(c, {kPredVal, kPredTest});
  const auto in = load_inputs(c);
  require(c, kGraphs, "discover");
  require(c, kCheckpoint, "train");
  const auto ckpt = load_checkpoint(c.path(kCheckpoint));
  const auto& mc = ckpt.config;
  if (mc.nodes != in.table.nodes()) throw ShapeError("checkpoint node count differs from the series");
  const auto bundle = GraphBundle::build(in.adjacency, load_graphs(c.path(kGraphs)), mc.hops);
  const auto data = ForecastData::build(in.table, in.splits, mc.input_steps, mc.horizon);
  auto run = [&](const std::vector<std::size_t>& starts, const char* name) {
    ForecastSet f;
    f.starts = starts;
    f.yhat = predict(data, starts, ckpt.params, bundle, mc);
    for (auto s : starts) {
      const auto w = extract_window(in.table, in.table.values, s, mc.input_steps, mc.horizon);
      f.y.push_back(w.targets);
      f.origins.push_back(w.target_times.front());
    }
    write_predictions(c.path(name), in.table, f);
  };
  run(data.val, kPredVal);
  run(data.test, kPredTest);
  std::cout << "predicted " << data.val.size() << " validation and " << data.test.size() << " test windows\n";
}

Matrix step_residuals(const ForecastSet& f, Eigen::Index h) {
  Matrix r(static_cast<Eigen::Index>(f.y.size()), f.y.front().rows());
  for (std::size_t w = 0; w < f.y.size(); ++w)
    r.row(static_cast<Eigen::Index>(w)) = (f.y[w].col(h) - f.yhat[w].col(h)).transpose();
  return r;
}

void cmd_conformal(Context& c) {
  refuse_overwrite(c, {kRegionsCpst, kRegionsScp, kRegionsBonf, kSelection});
  require(c, kPredVal, "predict");
  require(c, kPredTest, "predict");
  require(c, kSeries, "generate");
  const auto table = load_series_csv(c.path(kSeries));
  const auto ckpt = load_checkpoint(c.path(kCheckpoint));
  const std::size_t N = table.nodes(), H = ckpt.config.horizon;
  const auto val = read_predictions(c.path(kPredVal), N, H);
  const auto test = read_predictions(c.path(kPredTest), N, H);
  if (val.y.size() < 2 || test.y.empty()) throw ContractError("conformal calibration needs validation and test windows");
  const auto neighbors = neighbor_lists(load_adjacency(c.path(kAdjacency), N));
  const double alpha = c.cfg.alpha;

  const std::size_t n_calib = c.cfg.conformal.n_calib ? std::min(c.cfg.conformal.n_calib, val.y.size()) : val.y.size();
  CpstParams params = c.cfg.conformal_params(n_calib);

  // Adjustment constant: fixed by config or picked on rolling validation streams.
  std::vector<Matrix> streams;
  for (std::size_t h = 0; h < H; ++h) streams.push_back(step_residuals(val, static_cast<Eigen::Index>(h)));
  CpstParams sel = params;
  sel.n_calib = std::max<std::size_t>(1, std::min(n_calib, val.y.size() / 2));
  const auto choice = select_adjustment(streams, neighbors, sel, kAdjustmentGrid);
  if (!c.cfg.conformal.c_adj) params.c_adj = choice.c_adj;
  write_file(c.path(kSelection), [&](std::ostream& os) {
    os << "c_adj,coverage,mean_width,selected\n" << std::setprecision(10);
    for (std::size_t i = 0; i < std::size(kAdjustmentGrid); ++i)
      os << kAdjustmentGrid[i] << ',' << choice.grid[i].coverage << ',' << choice.grid[i].mean_width << ','
         << (kAdjustmentGrid[i] == params.c_adj ? 1 : 0) << '\n';
  });

  const Timestamp dt = table.step();
  std::vector<RegionRow> cpst_rows, scp_rows, bonf_rows;
  // CPST over the test windows, seeded with the most recent validation windows.
  CpstStream stream(CalibrationWindow(params, neighbors, H));
  const auto first = static_cast<std::ptrdiff_t>(val.y.size() - n_calib);
  stream.seed(std::span(val.y).subspan(static_cast<std::size_t>(first)),
              std::span(val.yhat).subspan(static_cast<std::size_t>(first)));
  // Static per node and step validation residuals for the split-conformal baselines.
  std::vector<std::vector<std::vector<double>>> calib(N, std::vector<std::vector<double>>(H));
  for (std::size_t w = 0; w < val.y.size(); ++w)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t h = 0; h < H; ++h)
        calib[n][h].push_back(val.y[w](static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(h)) -
                              val.yhat[w](static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(h)));
  bool unattainable = false;
  for (std::size_t w = 0; w < test.y.size(); ++w) {
    const auto regs = stream.step(test.yhat[w], test.y[w]);
    for (std::size_t n = 0; n < N; ++n) {
      const auto ni = static_cast<Eigen::Index>(n);
      std::vector<double> yhat_steps(H);
      for (std::size_t h = 0; h < H; ++h) yhat_steps[h] = test.yhat[w](ni, static_cast<Eigen::Index>(h));
      const auto bonf = bonferroni_region(yhat_steps, calib[n], alpha);
      unattainable = unattainable || bonf.unattainable;
      for (std::size_t h = 0; h < H; ++h) {
        const auto hi = static_cast<Eigen::Index>(h);
        const Timestamp ts = test.origins[w] + static_cast<Timestamp>(h) * dt;
        const double y = test.y[w](ni, hi);
        cpst_rows.push_back({ts, n, h + 1, regs[h][n], y});
        scp_rows.push_back({ts, n, h + 1, scp_region(test.yhat[w](ni, hi), calib[n][h], alpha), y});
        bonf_rows.push_back({ts, n, h + 1, bonf.regions[h], y});
      }
    }
  }
  if (unattainable)
    std::cerr << "warning: Bonferroni per-step level " << 1 - alpha / static_cast<double>(H)
              << " needs more than " << val.y.size() << " calibration scores; using the maximum\n";
  write_file(c.path(kRegionsCpst), [&](std::ostream& os) { write_regions_csv(os, cpst_rows, alpha); });
  write_file(c.path(kRegionsScp), [&](std::ostream& os) { write_regions_csv(os, scp_rows, alpha); });
  write_file(c.path(kRegionsBonf), [&](std::ostream& os) { write_regions_csv(os, bonf_rows, alpha); });
  std::cout << "calibrated " << test.y.size() << " test windows with n_calib = " << n_calib << ", C_adj = " << params.c_adj
            << '\n';
}

IntervalMetrics interval_metrics(const RegionFile& f, std::size_t nodes) {
  std::vector<std::vector<std::array<double, 3>>> per(nodes);
  for (const auto& r : f.rows) per.at(r.node).push_back({r.region.lower, r.region.upper, r.y});
  const auto cols = static_cast<Eigen::Index>(per.front().size());
  Matrix lo(static_cast<Eigen::Index>(nodes), cols), hi = lo, y = lo;
  for (std::size_t n = 0; n < nodes; ++n) {
    if (static_cast<Eigen::Index>(per[n].size()) != cols) throw IngestionError("region file is ragged across nodes");
    for (Eigen::Index j = 0; j < cols; ++j) {
      const auto ni = static_cast<Eigen::Index>(n);
      lo(ni, j) = per[n][static_cast<std::size_t>(j)][0];
      hi(ni, j) = per[n][static_cast<std::size_t>(j)][1];
      y(ni, j) = per[n][static_cast<std::size_t>(j)][2];
    }
  }
  return coverage_efficiency(lo, hi, y);
}

void cmd_evaluate(Context& c) {
  refuse_overwrite(c, {kMetrics, kIntervals, kMetricsTable});
  require(c, kPredTest, "predict");
  require(c, kRegionsCpst, "conformal");
  const auto table = load_series_csv(c.path(kSeries));
  const auto ckpt = load_checkpoint(c.path(kCheckpoint));
  const std::size_t N = table.nodes(), H = ckpt.config.horizon;
  const auto test = read_predictions(c.path(kPredTest), N, H);
  auto report = evaluate_forecasts(test.y, test.yhat);
  const std::vector<std::pair<std::string, std::string>> methods{
      {"cpst", kRegionsCpst}, {"scp", kRegionsScp}, {"bonferroni", kRegionsBonf}};
  std::vector<std::pair<std::string, IntervalMetrics>> intervals;
  for (const auto& [name, file] : methods) {
    require(c, file, "conformal");
    intervals.emplace_back(name, interval_metrics(read_regions(c.path(file)), N));
  }
  report.has_intervals = true;
  report.intervals = intervals.front().second;
  write_file(c.path(kMetrics), [&](std::ostream& os) { report.write_csv(os); });
  write_file(c.path(kIntervals), [&](std::ostream& os) {
    os << "method,coverage_mean,coverage_std,coverage_max,coverage_min,efficiency_mean,efficiency_std,"
          "efficiency_max,efficiency_min\n"
       << std::setprecision(10);
    for (const auto& [name, m] : intervals) {
      const auto& cv = m.coverage_summary;
      const auto& ef = m.efficiency_summary;
      os << name << ',' << cv.mean << ',' << cv.std << ',' << cv.max << ',' << cv.min << ',' << ef.mean << ','
         << ef.std << ',' << ef.max << ',' << ef.min << '\n';
    }
  });
  write_file(c.path(kMetricsTable), [&](std::ostream& os) {
    report.write_table(os);
    os << "\nmethod       coverage  efficiency\n" << std::fixed << std::setprecision(4);
    for (const auto& [name, m] : intervals)
      os << std::left << std::setw(12) << name << std::right << std::setw(10) << m.coverage_summary.mean
         << std::setw(12) << m.efficiency_summary.mean << '\n';
  });
  std::ifstream table_in(c.path(kMetricsTable));
  std::cout << table_in.rdbuf();
}

// Truth, prediction and shaded region for one node and step as a standalone SVG.
void write_plot(const std::string& path, const std::string& title, const std::vector<const RegionRow*>& rows) {
  constexpr double W = 900, Hh = 320, L = 60, R = 20, T = 40, B = 40;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* r : rows) {
    lo = std::min({lo, r->region.lower, r->y});
    hi = std::max({hi, r->region.upper, r->y});
  }
  if (!(hi > lo)) hi = lo + 1;
  const double n = std::max<double>(1, static_cast<double>(rows.size()) - 1);
  auto X = [&](std::size_t i) { return L + (W - L - R) * static_cast<double>(i) / n; };
  auto Y = [&](double v) { return T + (Hh - T - B) * (hi - v) / (hi - lo); };
  write_file(path, [&](std::ostream& os) {
    os << std::fixed << std::setprecision(2);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << Hh << "\" viewBox=\"0 0 "
       << W << ' ' << Hh << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << L << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
    os << "<polygon fill=\"#9ecae1\" fill-opacity=\"0.5\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < rows.size(); ++i) os << X(i) << ',' << Y(rows[i]->region.upper) << ' ';
    for (std::size_t i = rows.size(); i-- > 0;) os << X(i) << ',' << Y(rows[i]->region.lower) << ' ';
    os << "\"/>\n";
    auto line = [&](const char* color, auto value) {
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.2\" points=\"";
      for (std::size_t i = 0; i < rows.size(); ++i) os << X(i) << ',' << Y(value(*rows[i])) << ' ';
      os << "\"/>\n";
    };
    line("#222222", [](const RegionRow& r) { return r.y; });
    line("#d94801", [](const RegionRow& r) { return r.region.yhat; });
    os << "<line x1=\"" << L << "\" y1=\"" << Hh - B << "\" x2=\"" << W - R << "\" y2=\"" << Hh - B
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << Hh - B << "\" stroke=\"black\"/>\n";
    os << "<text x=\"4\" y=\"" << T + 4 << "\" font-family=\"sans-serif\" font-size=\"11\">" << hi << "</text>\n";
    os << "<text x=\"4\" y=\"" << Hh - B << "\" font-family=\"sans-serif\" font-size=\"11\">" << lo << "</text>\n";
    if (!rows.empty()) {
      os << "<text x=\"" << L << "\" y=\"" << Hh - 12 << "\" font-family=\"sans-serif\" font-size=\"11\">"
         << format_timestamp(rows.front()->timestamp) << "</text>\n";
      os << "<text x=\"" << W - R - 110 << "\" y=\"" << Hh - 12 << "\" font-family=\"sans-serif\" font-size=\"11\">"
         << format_timestamp(rows.back()->timestamp) << "</text>\n";
    }
    os << "<text x=\"" << W - R - 260 << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"11\">"
       << "<tspan fill=\"#222222\">truth</tspan>  <tspan fill=\"#d94801\">prediction</tspan>  "
       << "<tspan fill=\"#3182bd\">prediction region</tspan></text>\n";
    os << "</svg>\n";
  });
}

void cmd_report(Context& c) {
  require(c, kMetrics, "evaluate");
  require(c, kIntervals, "evaluate");
  require(c, kRegionsCpst, "conformal");
  const fs::path dir = c.out / kReportDir;
  if (!c.opt.force && fs::exists(dir) && !fs::is_empty(dir))
    throw Error(dir.string() + " already exists; pass --force to overwrite");
  fs::create_directories(dir);
  const auto regions = read_regions(c.path(kRegionsCpst));
  std::size_t nodes = 0, H = 0;
  for (const auto& r : regions.rows) {
    nodes = std::max(nodes, r.node + 1);
    H = std::max(H, r.step);
  }
  const std::size_t shown = std::min(nodes, c.cfg.conformal.plot_nodes);
  std::size_t plots = 0;
  for (std::size_t n = 0; n < shown; ++n)
    for (std::size_t step : {std::size_t{1}, H}) {
      std::vector<const RegionRow*> rows;
      for (const auto& r : regions.rows)
        if (r.node == n && r.step == step && rows.size() < c.cfg.conformal.plot_steps) rows.push_back(&r);
      std::ostringstream title;
      title << "node " << n << ", step " << step << ", alpha " << regions.alpha;
      write_plot((dir / ("node" + std::to_string(n) + "_step" + std::to_string(step) + ".svg")).string(), title.str(),
                 rows);
      ++plots;
      if (H == 1) break;
    }
  fs::copy_file(c.out / kMetrics, dir / "table_point_metrics.csv", fs::copy_options::overwrite_existing);
  fs::copy_file(c.out / kIntervals, dir / "table_interval_metrics.csv", fs::copy_options::overwrite_existing);
  if (fs::exists(c.out / kGraphStats))
    fs::copy_file(c.out / kGraphStats, dir / "table_graph_stats.csv", fs::copy_options::overwrite_existing);
  std::cout << "wrote " << plots << " plots and metric tables to " << dir.string() << '\n';
}

void cmd_pipeline(Context& c) {
  if (!c.opt.force && fs::exists(c.out) && !fs::is_empty(c.out))
    throw Error("output directory " + c.out.string() + " already exists; pass --force to overwrite");
  // Stages overwrite each other's outputs within this run.
  Context staged = c;
  staged.opt.force = true;
  const std::vector<std::pair<const char*, void (*)(Context&)>> stages{
      {"generate", cmd_generate}, {"discover", cmd_discover}, {"train", cmd_train},     {"predict", cmd_predict},
      {"conformal", cmd_conformal}, {"evaluate", cmd_evaluate}, {"report", cmd_report}};
  for (const auto& [name, fn] : stages) {
    std::cout << "== " << name << '\n';
    fn(staged);
  }
}

int run(void (*fn)(Context&), const Options& opt) {
  Context c;
  c.opt = opt;
  c.cfg = resolve_config(opt);
  c.out = fs::path(opt.out);
  fn(c);
  if (fs::exists(c.out)) {
    write_resolved(c);
    write_manifest(c);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"castnet: causal discovery, spatio-temporal forecasting and conformal prediction regions"};
  app.require_subcommand(1);
  Options opt;
  auto add_common = [&opt](CLI::App* sub) {
    sub->add_option("--config", opt.config, "JSON run configuration")->envname("CASTNET_CONFIG");
    sub->add_option("--seed", opt.seed, "master random seed")->envname("CASTNET_SEED");
    sub->add_option("--alpha", opt.alpha, "miscoverage level of the prediction regions")->envname("CASTNET_ALPHA");
    sub->add_flag("--paper-scale", opt.paper_scale, "use the full-size network preset")->envname("CASTNET_PAPER_SCALE");
    sub->add_flag("--force", opt.force, "overwrite existing outputs")->envname("CASTNET_FORCE");
    sub->add_option("--out", opt.out, "output directory")->envname("CASTNET_OUT");
  };
  const std::vector<std::tuple<const char*, const char*, void (*)(Context&)>> commands{
      {"generate", "simulate a synthetic SVAR dataset (or ingest the configured CSV)", cmd_generate},
      {"discover", "learn contemporaneous and lagged causal graphs", cmd_discover},
      {"train", "train the spatio-temporal forecaster", cmd_train},
      {"predict", "forecast validation and test windows", cmd_predict},
      {"conformal", "build CPST, split-conformal and Bonferroni prediction regions", cmd_conformal},
      {"evaluate", "compute point and interval metrics", cmd_evaluate},
      {"report", "render SVG plots and metric tables", cmd_report},
      {"pipeline", "run every stage in order", cmd_pipeline}};
  void (*chosen)(Context&) = nullptr;
  for (const auto& [name, help, fn] : commands) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub);
    sub->callback([&chosen, f = fn] { chosen = f; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    return run(chosen, opt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
