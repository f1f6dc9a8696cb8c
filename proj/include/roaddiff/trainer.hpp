#pragma once

// Training loop, inference over whole series, evaluation, checkpoints, sweeps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roaddiff/baseline.hpp"
#include "roaddiff/checkpoint.hpp"
#include "roaddiff/data.hpp"
#include "roaddiff/errors.hpp"
#include "roaddiff/losses.hpp"
#include "roaddiff/model.hpp"
#include "roaddiff/optim.hpp"

namespace roaddiff {

enum class IterationUnit { epochs, steps };

struct TrainConfig {
  ModelConfig model;
  double lr = 1e-4;
  std::size_t batch_size = 64;
  std::size_t max_iterations = 1000;
  IterationUnit unit = IterationUnit::epochs;
  std::size_t patience = 30;
  std::size_t halving_start = 20;
  std::size_t halving_every = 10;
  std::uint64_t seed = 0;
  std::size_t window = 6;
  std::size_t stride = 1;
  std::optional<std::size_t> eval_stride;  // defaults to the window length
  SplitRatios split;
  std::vector<std::size_t> horizons{1, 3, 6};
};

inline std::string to_string(IterationUnit u) { return u == IterationUnit::epochs ? "epochs" : "steps"; }
inline IterationUnit parse_iteration_unit(const std::string& s) {
  if (s == "epochs") return IterationUnit::epochs;
  if (s == "steps") return IterationUnit::steps;
  throw ConfigError("unknown iteration unit '" + s + "'");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = {{"model", to_json(c.model)},
                      {"lr", c.lr},
                      {"batch_size", c.batch_size},
                      {"max_iterations", c.max_iterations},
                      {"iteration_unit", to_string(c.unit)},
                      {"patience", c.patience},
                      {"halving_start", c.halving_start},
                      {"halving_every", c.halving_every},
                      {"seed", c.seed},
                      {"window", c.window},
                      {"stride", c.stride},
                      {"split", {c.split.train, c.split.val, c.split.test}},
                      {"horizons", c.horizons}};
  j["eval_stride"] = c.eval_stride ? nlohmann::json(*c.eval_stride) : nlohmann::json();
  return j;
}

inline void validate(const TrainConfig& c) {
  if (!(c.lr > 0.0)) throw ConfigError("lr must be positive");
  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (c.max_iterations == 0) throw ConfigError("max_iterations must be positive");
  if (c.window == 0) throw ConfigError("window must be positive");
  if (c.stride == 0) throw ConfigError("stride must be positive");
  if (c.eval_stride && *c.eval_stride == 0) throw ConfigError("eval_stride must be positive");
  if (c.halving_every == 0) throw ConfigError("halving_every must be positive");
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_iterations = j.value("max_iterations", c.max_iterations);
  if (j.contains("iteration_unit")) c.unit = parse_iteration_unit(j.at("iteration_unit").get<std::string>());
  c.patience = j.value("patience", c.patience);
  c.halving_start = j.value("halving_start", c.halving_start);
  c.halving_every = j.value("halving_every", c.halving_every);
  c.seed = j.value("seed", c.seed);
  c.window = j.value("window", c.window);
  c.stride = j.value("stride", c.stride);
  if (j.contains("eval_stride") && !j.at("eval_stride").is_null()) c.eval_stride = j.at("eval_stride").get<std::size_t>();
  if (j.contains("split")) {
    const auto v = j.at("split").get<std::vector<double>>();
    if (v.size() != 3) throw ConfigError("split must list three ratios");
    c.split = {v[0], v[1], v[2]};
  }
  if (j.contains("horizons")) c.horizons = j.at("horizons").get<std::vector<std::size_t>>();
  validate(c);
  return c;
}

// ROADDIFF_SEED, when set, replaces the configured seed.
inline void apply_seed_override(TrainConfig& c) {
  if (const char* s = std::getenv("ROADDIFF_SEED"); s != nullptr && *s != '\0') {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (end == s || *end != '\0') throw ConfigError(std::string("ROADDIFF_SEED is not an integer: ") + s);
    c.seed = v;
  }
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown train;  // mean over windows
  double val_mae = 0.0;
  std::size_t steps = 0;  // cumulative optimiser steps
};

struct RunArtifact {
  TrainConfig config;
  std::vector<EpochRecord> curve;
  std::size_t best_epoch = 0;
  double best_val_mae = std::numeric_limits<double>::infinity();
  EvalReport test;
  std::string checkpoint_path;
};

inline nlohmann::json to_json(const EpochRecord& e) {
  return {{"epoch", e.epoch}, {"lr", e.lr}, {"train", to_json(e.train)}, {"val_mae", e.val_mae}, {"steps", e.steps}};
}

inline nlohmann::json to_json(const RunArtifact& a) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& e : a.curve) curve.push_back(to_json(e));
  return {{"config", to_json(a.config)},
          {"curve", curve},
          {"best_epoch", a.best_epoch},
          {"best_val_mae", a.best_val_mae},
          {"test", to_json(a.test)},
          {"checkpoint", a.checkpoint_path}};
}

// Per-window sampling seed: a pure function of the run seed and window start.
inline std::uint64_t window_seed(std::uint64_t seed, std::size_t start) {
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(start) + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct Predictions {
  Matrix pred;   // concatenated windows [sum T x N]
  Matrix truth;
  Matrix roads;
  double residual_before = 0.0;
  double residual_after = 0.0;
};

inline Predictions predict_windows(const RoadDiffModel& model, const WindowedDataset& ds, std::uint64_t seed) {
  const std::size_t rows = ds.samples.size() * ds.window, n = model.lanes().lane_count();
  Predictions p{Matrix(rows, n), Matrix(rows, n), Matrix(rows, model.roads().road_count), 0.0, 0.0};
  for (std::size_t k = 0; k < ds.samples.size(); ++k) {
    const auto& w = ds.samples[k];
    const auto r = model.infer_window(w.road, window_seed(seed, w.start));
    p.residual_before += r.residual_before;
    p.residual_after += r.residual_after;
    for (std::size_t t = 0; t < ds.window; ++t) {
      std::copy(r.lanes.row(t).begin(), r.lanes.row(t).end(), p.pred.row(k * ds.window + t).begin());
      std::copy(w.lane.row(t).begin(), w.lane.row(t).end(), p.truth.row(k * ds.window + t).begin());
      std::copy(w.road.row(t).begin(), w.road.row(t).end(), p.roads.row(k * ds.window + t).begin());
    }
  }
  return p;
}

inline Predictions physics_windows(const LaneNetwork& net, TrafficKind kind, const WindowedDataset& ds) {
  const std::size_t rows = ds.samples.size() * ds.window;
  Predictions p{Matrix(rows, net.lane_count()), Matrix(rows, net.lane_count()), Matrix(rows, net.road_count()), 0, 0};
  for (std::size_t k = 0; k < ds.samples.size(); ++k)
    for (std::size_t t = 0; t < ds.window; ++t) {
      const auto& w = ds.samples[k];
      std::copy(w.lane.row(t).begin(), w.lane.row(t).end(), p.truth.row(k * ds.window + t).begin());
      std::copy(w.road.row(t).begin(), w.road.row(t).end(), p.roads.row(k * ds.window + t).begin());
    }
  TrafficSeries rs{p.roads, kind, default_units(kind), 5.0, Level::road};
  p.pred = physics_infer(rs, net, kind).values;
  p.residual_after = constraint_loss(p.pred, p.roads, kind, net);
  p.residual_before = p.residual_after;
  return p;
}

struct PreparedData {
  DatasetSplits splits;
  NodeStats road_stats;
  NodeStats lane_stats;
};

inline PreparedData prepare_data(const SeriesPair& data, std::size_t window, std::size_t stride,
                                 std::optional<std::size_t> eval_stride, const SplitRatios& ratios) {
  PreparedData p;
  p.splits = make_windows(data, window, stride, ratios, eval_stride.value_or(window));
  p.road_stats = compute_stats(data.roads.values, 0, p.splits.blocks.train_end);
  p.lane_stats = compute_stats(data.lanes.values, 0, p.splits.blocks.train_end);
  return p;
}

// Test-block evaluation with per-horizon rows (each horizon re-windows the test
// block with non-overlapping windows of that length).
inline EvalReport evaluate_model(const RoadDiffModel& model, const SeriesPair& data, const SplitBlocks& blocks,
                                 std::size_t window, const std::vector<std::size_t>& horizons, std::uint64_t seed) {
  const auto main = make_block_windows(data, blocks.val_end, blocks.total, window, window, Split::test);
  const auto p = predict_windows(model, main, seed);
  EvalReport rep = evaluate(p.pred, p.truth);
  rep.constraint_loss = p.residual_after;
  for (std::size_t h : horizons) {
    const auto ds = make_block_windows(data, blocks.val_end, blocks.total, h, h, Split::test);
    const auto ph = predict_windows(model, ds, seed);
    const auto r = evaluate(ph.pred, ph.truth);
    rep.horizons.push_back({h, r.mae, r.rmse, r.mape});
  }
  return rep;
}

inline EvalReport evaluate_physics(const LaneNetwork& net, TrafficKind kind, const SeriesPair& data,
                                   const SplitBlocks& blocks, std::size_t window,
                                   const std::vector<std::size_t>& horizons) {
  const auto main = make_block_windows(data, blocks.val_end, blocks.total, window, window, Split::test);
  const auto p = physics_windows(net, kind, main);
  EvalReport rep = evaluate(p.pred, p.truth);
  rep.constraint_loss = p.residual_after;
  for (std::size_t h : horizons) {
    const auto ds = make_block_windows(data, blocks.val_end, blocks.total, h, h, Split::test);
    const auto ph = physics_windows(net, kind, ds);
    const auto r = evaluate(ph.pred, ph.truth);
    rep.horizons.push_back({h, r.mae, r.rmse, r.mape});
  }
  return rep;
}

using ProgressFn = std::function<void(const EpochRecord&)>;

// Trains in place. The model ends holding the best-validation parameters.
inline RunArtifact train(RoadDiffModel& model, const TrainConfig& cfg, const PreparedData& data,
                         const SeriesPair& series, const ProgressFn& progress = {}) {
  validate(cfg);
  RunArtifact art;
  art.config = cfg;
  auto& store = model.params();
  std::mt19937_64 rng(cfg.seed ^ 0xD1B54A32D192ED03ULL);
  const auto& train_set = data.splits.train.samples;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::vector<std::vector<double>> best;
  const auto snapshot = [&] {
    best.clear();
    for (const auto& e : store.entries()) best.emplace_back(e.value.values().begin(), e.value.values().end());
  };
  snapshot();
  std::size_t steps = 0, since_best = 0;
  const std::size_t max_epochs = cfg.unit == IterationUnit::epochs ? cfg.max_iterations
                                                                   : std::numeric_limits<std::size_t>::max();
  for (std::size_t epoch = 0; epoch < max_epochs; ++epoch) {
    const double lr = scheduled_lr(cfg.lr, epoch, cfg.halving_start, cfg.halving_every);
    AdamConfig adam;
    adam.lr = lr;
    std::shuffle(order.begin(), order.end(), rng);
    LossBreakdown sum{0, 0, 0, cfg.model.lambda, 0};
    bool step_budget_hit = false;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      store.zero_grad();
      for (std::size_t k = b; k < end; ++k) {
        Tape tape;
        WindowLoss wl;
        try {
          wl = model.window_loss(train_set[order[k]], rng);
        } catch (const DivergenceError& e) {
          throw DivergenceError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(b / cfg.batch_size) + ", window start " +
                                std::to_string(train_set[order[k]].start) + ")");
        }
        tape.backward(wl.total);
        sum.l_recon += wl.parts.l_recon;
        sum.l_kl += wl.parts.l_kl;
        sum.l_con += wl.parts.l_con;
        sum.total += wl.parts.total;
      }
      adam_step(store, adam, 1.0 / static_cast<double>(end - b));
      for (const auto& e : store.entries())
        for (double v : e.value.values())
          if (!std::isfinite(v))
            throw DivergenceError("parameter " + e.name + " is not finite (epoch " + std::to_string(epoch) +
                                  ", batch " + std::to_string(b / cfg.batch_size) + ")");
      ++steps;
      if (cfg.unit == IterationUnit::steps && steps >= cfg.max_iterations) {
        step_budget_hit = true;
        break;
      }
    }
    const double n = static_cast<double>(train_set.size());
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train = {sum.l_recon / n, sum.l_kl / n, sum.l_con / n, cfg.model.lambda, sum.total / n};
    rec.steps = steps;
    const auto vp = predict_windows(model, data.splits.val, cfg.seed);
    rec.val_mae = evaluate(vp.pred, vp.truth).mae;
    if (!std::isfinite(rec.val_mae)) throw DivergenceError("validation MAE is not finite at epoch " + std::to_string(epoch));
    art.curve.push_back(rec);
    if (progress) progress(rec);
    if (rec.val_mae < art.best_val_mae) {
      art.best_val_mae = rec.val_mae;
      art.best_epoch = epoch;
      since_best = 0;
      snapshot();
    } else if (++since_best >= cfg.patience) {
      break;
    }
    if (step_budget_hit) break;
  }
  for (std::size_t i = 0; i < store.entries().size(); ++i) {
    auto dst = store.entries()[i].value.mutable_values();
    std::copy(best[i].begin(), best[i].end(), dst.begin());
  }
  art.test = evaluate_model(model, series, data.splits.blocks, cfg.window, cfg.horizons, cfg.seed);
  return art;
}

// ---------------------------------------------------------------------------
// Checkpoints: <path> binary parameters, <path>.json manifest.

inline nlohmann::json checkpoint_manifest(const RoadDiffModel& model, const TrainConfig& cfg) {
  return {{"format", "RDCK"},
          {"version", kCheckpointVersion},
          {"parameters", param_manifest(model.params())},
          {"config", to_json(cfg)},
          {"graph", road_network_to_json(model.roads())},
          {"road_stats", to_json(model.road_stats())},
          {"lane_stats", to_json(model.lane_stats())},
          {"kind", to_string(model.config().kind)}};
}

inline void save_checkpoint(const RoadDiffModel& model, const TrainConfig& cfg, const std::string& path) {
  write_file(path, serialize_params(model.params()));
  std::ofstream out(path + ".json");
  if (!out) throw CheckpointError("cannot write " + path + ".json");
  out << checkpoint_manifest(model, cfg).dump(2) << "\n";
}

struct LoadedModel {
  TrainConfig config;
  std::unique_ptr<RoadDiffModel> model;
};

inline LoadedModel load_checkpoint(const std::string& path) {
  std::ifstream in(path + ".json");
  if (!in) throw CheckpointError("missing manifest " + path + ".json");
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("bad manifest: " + std::string(e.what()));
  }
  LoadedModel lm;
  try {
    lm.config = train_config_from_json(m.at("config"));
    auto roads = road_network_from_json(m.at("graph"));
    lm.model = std::make_unique<RoadDiffModel>(std::move(roads), lm.config.model, node_stats_from_json(m.at("road_stats")),
                                               node_stats_from_json(m.at("lane_stats")), lm.config.seed);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("bad manifest: " + std::string(e.what()));
  } catch (const DataError& e) {
    throw CheckpointError("bad manifest: " + std::string(e.what()));
  }
  deserialize_params(read_file(path), lm.model->params());
  return lm;
}

// Road series -> lane series with a trained model. The series is cut into
// consecutive windows of length T; a short tail reuses the last full window.
struct SeriesInference {
  TrafficSeries lanes;
  double residual_before = 0.0;
  double residual_after = 0.0;
};

inline SeriesInference infer_series(const RoadDiffModel& model, const TrafficSeries& road, std::size_t window,
                                    std::uint64_t seed) {
  if (road.level != Level::road) throw ContractError("infer: expected a road-level series");
  require_kind(model.config().kind, road.kind, "infer");
  if (road.nodes() != model.roads().road_count)
    throw CheckpointError("road series has " + std::to_string(road.nodes()) + " roads, checkpoint expects " +
                          std::to_string(model.roads().road_count));
  if (window == 0) throw ConfigError("window must be positive");
  if (road.steps() < window) throw DataError("road series shorter than the window");
  SeriesInference out;
  out.lanes.values = Matrix(road.steps(), model.lanes().lane_count());
  out.lanes.kind = road.kind;
  out.lanes.units = road.units;
  out.lanes.interval_minutes = road.interval_minutes;
  out.lanes.level = Level::lane;
  Matrix initial(road.steps(), model.lanes().lane_count());
  std::size_t filled = 0;
  while (filled < road.steps()) {
    const std::size_t start = std::min(filled, road.steps() - window);
    Matrix rw(window, road.nodes());
    for (std::size_t t = 0; t < window; ++t)
      std::copy(road.values.row(start + t).begin(), road.values.row(start + t).end(), rw.row(t).begin());
    const auto r = model.infer_window(rw, window_seed(seed, start));
    for (std::size_t t = filled - start; t < window; ++t) {
      std::copy(r.lanes.row(t).begin(), r.lanes.row(t).end(), out.lanes.values.row(start + t).begin());
      std::copy(r.initial.row(t).begin(), r.initial.row(t).end(), initial.row(start + t).begin());
    }
    filled = start + window;
  }
  out.residual_before = constraint_loss(initial, road.values, road.kind, model.lanes());
  out.residual_after = constraint_loss(out.lanes.values, road.values, road.kind, model.lanes());
  return out;
}

// Retrain and evaluate for each number of diffusion steps.
struct SweepPoint {
  std::size_t steps = 0;
  EvalReport report;
  RunArtifact artifact;
};

inline std::vector<SweepPoint> sweep_diffusion_steps(const TrainConfig& base, const RoadNetwork& roads,
                                                     const SeriesPair& series, const std::vector<std::size_t>& grid,
                                                     const ProgressFn& progress = {}) {
  if (grid.empty()) throw ConfigError("sweep grid is empty");
  const auto data = prepare_data(series, base.window, base.stride, base.eval_stride, base.split);
  std::vector<SweepPoint> out;
  for (std::size_t n : grid) {
    TrainConfig c = base;
    c.model.diffusion.steps = n;
    RoadDiffModel model(roads, c.model, data.road_stats, data.lane_stats, c.seed);
    auto art = train(model, c, data, series, progress);
    out.push_back({n, art.test, std::move(art)});
  }
  return out;
}

}  // namespace roaddiff
