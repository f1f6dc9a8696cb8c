// roaddiff: synth | train | infer | eval | sweep | report

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "roaddiff/baseline.hpp"
#include "roaddiff/data.hpp"
#include "roaddiff/errors.hpp"
#include "roaddiff/graph.hpp"
#include "roaddiff/report.hpp"
#include "roaddiff/trainer.hpp"

namespace fs = std::filesystem;
using namespace roaddiff;

namespace {

struct GraphArgs {
  std::string graph_path;
  std::vector<long long> chain_lanes;

  void add(CLI::App* app) {
    app->add_option("--graph", graph_path, "Graph description JSON (edges, lane_counts)");
    app->add_option("--chain", chain_lanes, "Build a chain road graph with these lane counts")->delimiter(',');
  }
  RoadNetwork load() const {
    if (!graph_path.empty()) return load_road_network(graph_path);
    if (!chain_lanes.empty()) return chain_road_network(chain_lanes);
    throw ConfigError("one of --graph or --chain is required");
  }
};

// Flags overriding the JSON config; only options given on the command line apply.
struct TrainArgs {
  std::string config_path;
  double lr = 0, lambda = 0, eta = 0, kappa = 0, beta_min = 0, beta_max = 0;
  std::size_t batch = 0, iters = 0, patience = 0, steps = 0, hidden = 0, window = 0, stride = 0, eval_stride = 0;
  std::uint64_t seed = 0;
  std::string unit, gamma_mode, coefficient, kind;
  bool no_diffusion = false, no_ga = false, no_ta = false, linear = false, stochastic = false;
  CLI::App* app = nullptr;

  void add(CLI::App* a) {
    app = a;
    a->add_option("--config", config_path, "Run configuration JSON");
    a->add_option("--kind", kind, "speed or flow");
    a->add_option("--lr", lr, "Base learning rate");
    a->add_option("--batch-size", batch, "Windows per optimiser step");
    a->add_option("--max-iterations", iters, "Iteration ceiling (see --iteration-unit)");
    a->add_option("--iteration-unit", unit, "epochs or steps");
    a->add_option("--patience", patience, "Early-stop patience in epochs");
    a->add_option("--lambda", lambda, "Constraint loss weight");
    a->add_option("--eta", eta, "Constraint projection step");
    a->add_option("--diffusion-steps", steps, "Number of diffusion steps");
    a->add_option("--kappa", kappa, "Road influence scale (gamma = kappa * beta)");
    a->add_option("--beta-min", beta_min, "First beta");
    a->add_option("--beta-max", beta_max, "Last beta");
    a->add_option("--gamma-mode", gamma_mode, "literal or cancel");
    a->add_option("--reverse-coefficient", coefficient, "ddpm or literal");
    a->add_option("--hidden", hidden, "Hidden width");
    a->add_option("--seed", seed, "Seed (ROADDIFF_SEED overrides)");
    a->add_option("--window", window, "Window length T");
    a->add_option("--stride", stride, "Training window stride");
    a->add_option("--eval-stride", eval_stride, "Validation/test window stride");
    a->add_flag("--no-diffusion", no_diffusion, "Ablation: decoder output only");
    a->add_flag("--no-graph-attention", no_ga, "Ablation: static graph branch only");
    a->add_flag("--no-temporal-attention", no_ta, "Ablation: skip temporal attention");
    a->add_flag("--linear-autoencoder", linear, "Ablation: linear road-to-lane map");
    a->add_flag("--stochastic-reverse", stochastic, "Draw variance noise in the reverse chain");
  }
  bool given(const std::string& name) const { return app->get_option(name)->count() > 0; }

  TrainConfig build() const {
    TrainConfig c;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw ConfigError("cannot open config " + config_path);
      nlohmann::json j;
      try {
        in >> j;
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + config_path + ": " + e.what());
      }
      c = train_config_from_json(j);
    }
    auto& m = c.model;
    if (given("--kind")) m.kind = parse_kind(kind);
    if (given("--lr")) c.lr = lr;
    if (given("--batch-size")) c.batch_size = batch;
    if (given("--max-iterations")) c.max_iterations = iters;
    if (given("--iteration-unit")) c.unit = parse_iteration_unit(unit);
    if (given("--patience")) c.patience = patience;
    if (given("--lambda")) m.lambda = lambda;
    if (given("--eta")) m.diffusion.eta = eta;
    if (given("--diffusion-steps")) m.diffusion.steps = steps;
    if (given("--kappa")) m.diffusion.kappa = kappa;
    if (given("--beta-min")) m.diffusion.beta_min = beta_min;
    if (given("--beta-max")) m.diffusion.beta_max = beta_max;
    if (given("--gamma-mode")) m.diffusion.gamma_mode = parse_gamma_mode(gamma_mode);
    if (given("--reverse-coefficient")) m.diffusion.coefficient = parse_reverse_coefficient(coefficient);
    if (given("--hidden")) m.hidden = hidden;
    if (given("--seed")) c.seed = seed;
    if (given("--window")) c.window = window;
    if (given("--stride")) c.stride = stride;
    if (given("--eval-stride")) c.eval_stride = eval_stride;
    if (no_diffusion) m.no_diffusion = true;
    if (no_ga) m.no_graph_attention = true;
    if (no_ta) m.no_temporal_attention = true;
    if (linear) m.linear_autoencoder = true;
    if (stochastic) m.diffusion.stochastic_reverse = true;
    apply_seed_override(c);
    validate(c);
    make_schedule(m.diffusion);  // validates the schedule early
    return c;
  }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << text;
}

nlohmann::json grid_json(const HeatmapGrid& g) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < g.rows; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t c = 0; c < g.cols; ++c) row.push_back(g.at(r, c) ? nlohmann::json(*g.at(r, c)) : nlohmann::json());
    rows.push_back(row);
  }
  return rows;
}

HeatmapGrid grid_from_json(const nlohmann::json& j) {
  HeatmapGrid g;
  g.rows = j.size();
  for (const auto& row : j) g.cols = std::max(g.cols, row.size());
  g.cells.assign(g.rows * g.cols, std::nullopt);
  for (std::size_t r = 0; r < g.rows; ++r)
    for (std::size_t c = 0; c < j[r].size(); ++c)
      if (!j[r][c].is_null()) g.cells[r * g.cols + c] = j[r][c].get<double>();
  return g;
}

// Lane MAE grid on the test block for the run summary.
HeatmapGrid test_grid(const RoadDiffModel& model, const SeriesPair& data, const SplitBlocks& blocks, std::size_t window,
                      std::uint64_t seed) {
  const auto ds = make_block_windows(data, blocks.val_end, blocks.total, window, window, Split::test);
  const auto p = predict_windows(model, ds, seed);
  return lane_error_grid(p.pred, p.truth, model.lanes());
}

void log_epoch(const EpochRecord& e) {
  std::fprintf(stderr, "epoch %zu lr %.3g loss %.6f (kl %.5f recon %.5f con %.5f) val_mae %.5f\n", e.epoch, e.lr,
               e.train.total, e.train.l_kl, e.train.l_recon, e.train.l_con, e.val_mae);
}

void print_eval(const std::string& name, const EvalReport& r) {
  std::cout << results_table({{name, r}}, name);
  std::printf("overall MAE %.6f RMSE %.6f MAPE %s (used %zu, masked %zu)\n", r.mae, r.rmse,
              r.mape ? (std::to_string(*r.mape) + "%").c_str() : "undefined", r.mape_used, r.mape_masked);
  if (r.constraint_loss) std::printf("constraint_loss %.12g\n", *r.constraint_loss);
}

int run(int argc, char** argv) {
  CLI::App app{"Lane-level traffic inference from road observations"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic lane/road dataset");
  GraphArgs synth_graph;
  synth_graph.add(synth);
  SyntheticConfig scfg;
  std::string synth_kind = "speed", synth_out = "synthetic";
  synth->add_option("--kind", synth_kind, "speed or flow");
  synth->add_option("--steps", scfg.steps, "Number of timestamps");
  synth->add_option("--seed", scfg.seed, "Generator seed (ROADDIFF_SEED overrides)");
  synth->add_option("--lane-bias", scfg.lane_bias_strength, "Std of persistent lane biases");
  synth->add_option("--noise", scfg.noise_std, "Std of per-lane AR(1) noise");
  synth->add_option("--out-dir", synth_out, "Output directory");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model on a lane CSV");
  GraphArgs train_graph;
  train_graph.add(train_cmd);
  TrainArgs train_args;
  train_args.add(train_cmd);
  std::string train_data, train_out = "model.rdck", train_run;
  train_cmd->add_option("--data", train_data, "Lane CSV (timestamp,road_id,lane_id,value)")->required();
  train_cmd->add_option("--out", train_out, "Checkpoint path (manifest written to <path>.json)");
  train_cmd->add_option("--run-json", train_run, "Write the run summary JSON here");
  bool quiet = false;
  train_cmd->add_flag("--quiet", quiet, "No per-epoch log");

  // infer
  auto* infer_cmd = app.add_subcommand("infer", "Infer lane states from a road CSV");
  std::string infer_ckpt, infer_roads, infer_out = "lanes_pred.csv";
  std::size_t infer_window = 0;
  infer_cmd->add_option("--checkpoint", infer_ckpt, "Checkpoint path")->required();
  infer_cmd->add_option("--roads", infer_roads, "Road CSV (timestamp,road_id,value)")->required();
  infer_cmd->add_option("--window", infer_window, "Window length (default: training window)");
  infer_cmd->add_option("--out", infer_out, "Output lane CSV");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate the physics baseline or a checkpoint");
  GraphArgs eval_graph;
  eval_graph.add(eval_cmd);
  std::string eval_model = "physics", eval_data, eval_kind = "speed", eval_out, eval_split = "test";
  std::size_t eval_window = 6;
  std::vector<std::size_t> eval_horizons{1, 3, 6};
  eval_cmd->add_option("--model", eval_model, "'physics' or a checkpoint path");
  eval_cmd->add_option("--data", eval_data, "Lane CSV")->required();
  eval_cmd->add_option("--kind", eval_kind, "speed or flow (physics only; checkpoints carry their kind)");
  eval_cmd->add_option("--window", eval_window, "Window length");
  eval_cmd->add_option("--horizons", eval_horizons, "Per-horizon window sizes")->delimiter(',');
  eval_cmd->add_option("--split", eval_split, "test (chronological 7:1:2 test block) or all");
  eval_cmd->add_option("--out", eval_out, "Write the report JSON here");

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Retrain over a grid of diffusion step counts");
  GraphArgs sweep_graph;
  sweep_graph.add(sweep_cmd);
  TrainArgs sweep_args;
  sweep_args.add(sweep_cmd);
  std::string sweep_data, sweep_out;
  std::vector<std::size_t> grid{5, 10, 20, 30};
  sweep_cmd->add_option("--data", sweep_data, "Lane CSV")->required();
  sweep_cmd->add_option("--grid", grid, "Diffusion step counts")->delimiter(',');
  sweep_cmd->add_option("--out", sweep_out, "Write the sweep JSON here");
  bool sweep_quiet = false;
  sweep_cmd->add_flag("--quiet", sweep_quiet, "No per-epoch log");

  // report
  auto* report_cmd = app.add_subcommand("report", "Tables and SVG plots from run summaries");
  std::vector<std::string> report_runs;
  std::string report_dir = "report";
  report_cmd->add_option("runs", report_runs, "Run/eval summary JSON files")->required();
  report_cmd->add_option("--out-dir", report_dir, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (synth->parsed()) {
    const auto roads = synth_graph.load();
    const auto lanes = build_lane_network(roads);
    scfg.kind = parse_kind(synth_kind);
    if (const char* s = std::getenv("ROADDIFF_SEED"); s && *s) {
      TrainConfig tmp;
      apply_seed_override(tmp);
      scfg.seed = tmp.seed;
    }
    const auto data = generate_synthetic(lanes, scfg);
    fs::create_directories(synth_out);
    save_road_network(roads, (fs::path(synth_out) / "graph.json").string());
    write_lane_csv((fs::path(synth_out) / "lanes.csv").string(), data.lanes, lanes);
    write_road_csv((fs::path(synth_out) / "roads.csv").string(), data.roads);
    nlohmann::json manifest = {{"kind", to_string(scfg.kind)},
                               {"units", data.lanes.units},
                               {"interval_minutes", data.lanes.interval_minutes},
                               {"timestamps", data.lanes.steps()},
                               {"roads", roads.road_count},
                               {"lanes", lanes.lane_count()},
                               {"seed", scfg.seed},
                               {"lane_bias_strength", scfg.lane_bias_strength},
                               {"noise_std", scfg.noise_std},
                               {"constraint_loss", constraint_loss(data.lanes, data.roads, scfg.kind, lanes)}};
    write_text((fs::path(synth_out) / "manifest.json").string(), manifest.dump(2) + "\n");
    std::printf("wrote %zu x %zu lane series to %s\n", data.lanes.steps(), lanes.lane_count(), synth_out.c_str());
    return 0;
  }

  if (train_cmd->parsed()) {
    const auto roads = train_graph.load();
    const auto lanes = build_lane_network(roads);
    const auto cfg = train_args.build();
    const auto loaded = load_lane_csv(train_data, lanes, cfg.model.kind);
    if (loaded.gap_count) std::fprintf(stderr, "filled %zu missing cells\n", loaded.gap_count);
    const auto data = prepare_data(loaded.data, cfg.window, cfg.stride, cfg.eval_stride, cfg.split);
    RoadDiffModel model(roads, cfg.model, data.road_stats, data.lane_stats, cfg.seed);
    auto art = train(model, cfg, data, loaded.data, quiet ? ProgressFn{} : ProgressFn{log_epoch});
    save_checkpoint(model, cfg, train_out);
    art.checkpoint_path = train_out;
    print_eval("model", art.test);
    std::printf("best epoch %zu, val MAE %.6f\n", art.best_epoch, art.best_val_mae);
    if (!train_run.empty()) {
      auto j = to_json(art);
      j["name"] = cfg.model.no_diffusion ? "model (no diffusion)" : "model";
      j["lane_errors"] = grid_json(test_grid(model, loaded.data, data.splits.blocks, cfg.window, cfg.seed));
      write_text(train_run, j.dump(2) + "\n");
    }
    return 0;
  }

  if (infer_cmd->parsed()) {
    auto lm = load_checkpoint(infer_ckpt);
    apply_seed_override(lm.config);
    const std::uint64_t seed = lm.config.seed;
    const auto road = load_road_csv(infer_roads, lm.model->roads().road_count, lm.model->config().kind);
    const std::size_t w = infer_window ? infer_window : lm.config.window;
    const auto res = infer_series(*lm.model, road, w, seed);
    write_lane_csv(infer_out, res.lanes, lm.model->lanes());
    std::printf("wrote %zu x %zu lane series to %s\n", res.lanes.steps(), res.lanes.nodes(), infer_out.c_str());
    std::printf("constraint residual: before projection %.9g, after %.9g\n", res.residual_before, res.residual_after);
    return 0;
  }

  if (eval_cmd->parsed()) {
    EvalReport rep;
    std::string name;
    nlohmann::json extra;
    if (eval_model == "physics") {
      const auto roads = eval_graph.load();
      const auto lanes = build_lane_network(roads);
      const auto kind = parse_kind(eval_kind);
      const auto loaded = load_lane_csv(eval_data, lanes, kind);
      if (loaded.gap_count) std::fprintf(stderr, "filled %zu missing cells\n", loaded.gap_count);
      SplitBlocks blocks;
      if (eval_split == "all") blocks = {0, 0, loaded.data.lanes.steps()};
      else if (eval_split == "test") blocks = split_blocks(loaded.data.lanes.steps(), {});
      else throw ConfigError("--split must be test or all");
      rep = evaluate_physics(lanes, kind, loaded.data, blocks, eval_window, eval_horizons);
      name = "Physics";
      const auto ds = make_block_windows(loaded.data, blocks.val_end, blocks.total, eval_window, eval_window, Split::test);
      const auto p = physics_windows(lanes, kind, ds);
      extra = grid_json(lane_error_grid(p.pred, p.truth, lanes));
    } else {
      auto lm = load_checkpoint(eval_model);
      apply_seed_override(lm.config);
      const auto& model = *lm.model;
      const auto loaded = load_lane_csv(eval_data, model.lanes(), model.config().kind);
      SplitBlocks blocks;
      if (eval_split == "all") blocks = {0, 0, loaded.data.lanes.steps()};
      else if (eval_split == "test") blocks = split_blocks(loaded.data.lanes.steps(), lm.config.split);
      else throw ConfigError("--split must be test or all");
      rep = evaluate_model(model, loaded.data, blocks, eval_window, eval_horizons, lm.config.seed);
      name = model.config().no_diffusion ? "model (no diffusion)" : "model";
      extra = grid_json(test_grid(model, loaded.data, blocks, eval_window, lm.config.seed));
    }
    print_eval(name, rep);
    if (!eval_out.empty()) {
      nlohmann::json j = {{"name", name}, {"test", to_json(rep)}, {"lane_errors", extra}};
      write_text(eval_out, j.dump(2) + "\n");
    }
    return 0;
  }

  if (sweep_cmd->parsed()) {
    const auto roads = sweep_graph.load();
    const auto lanes = build_lane_network(roads);
    const auto cfg = sweep_args.build();
    const auto loaded = load_lane_csv(sweep_data, lanes, cfg.model.kind);
    const auto points =
        sweep_diffusion_steps(cfg, roads, loaded.data, grid, sweep_quiet ? ProgressFn{} : ProgressFn{log_epoch});
    std::vector<std::pair<std::size_t, EvalReport>> rows;
    nlohmann::json j = {{"sweep", nlohmann::json::array()}};
    for (const auto& p : points) {
      rows.emplace_back(p.steps, p.report);
      j["sweep"].push_back({{"steps", p.steps}, {"test", to_json(p.report)}, {"best_epoch", p.artifact.best_epoch}});
    }
    std::cout << sweep_table(rows, "Influence of diffusion steps");
    if (!sweep_out.empty()) write_text(sweep_out, j.dump(2) + "\n");
    return 0;
  }

  if (report_cmd->parsed()) {
    fs::create_directories(report_dir);
    std::vector<ReportRow> rows;
    std::vector<Curve> curves;
    std::vector<std::pair<std::size_t, EvalReport>> sweep_rows;
    std::size_t heatmaps = 0;
    for (const auto& path : report_runs) {
      std::ifstream in(path);
      if (!in) throw DataError("cannot open " + path);
      nlohmann::json j;
      try {
        in >> j;
      } catch (const nlohmann::json::exception& e) {
        throw SchemaError(path + ": " + e.what());
      }
      const std::string stem = fs::path(path).stem().string();
      if (j.contains("sweep")) {
        for (const auto& p : j.at("sweep"))
          sweep_rows.emplace_back(p.at("steps").get<std::size_t>(), eval_report_from_json(p.at("test")));
        continue;
      }
      if (!j.contains("test")) throw SchemaError(path + ": not a run or eval summary");
      const std::string name = j.value("name", stem) + " [" + stem + "]";
      rows.push_back({name, eval_report_from_json(j.at("test"))});
      if (j.contains("curve")) {
        Curve train_c{name + " train", {}}, val_c{name + " val MAE", {}};
        for (const auto& e : j.at("curve")) {
          train_c.values.push_back(e.at("train").at("total").get<double>());
          val_c.values.push_back(e.at("val_mae").get<double>());
        }
        curves.push_back(train_c);
        curves.push_back(val_c);
      }
      if (j.contains("lane_errors")) {
        const auto g = grid_from_json(j.at("lane_errors"));
        write_text((fs::path(report_dir) / (stem + "_lane_mae.svg")).string(), heatmap_svg(g, "Lane MAE: " + name));
        ++heatmaps;
      }
    }
    std::string text;
    if (!rows.empty()) text += results_table(rows, "Lane inference results (MAE / RMSE / MAPE)") + "\n";
    if (!sweep_rows.empty()) text += sweep_table(sweep_rows, "Influence of diffusion steps") + "\n";
    write_text((fs::path(report_dir) / "tables.txt").string(), text);
    if (!curves.empty())
      write_text((fs::path(report_dir) / "loss_curves.svg").string(), line_chart_svg(curves, "Training curves", "epoch"));
    std::cout << text;
    std::printf("wrote tables.txt, %zu heatmap(s)%s to %s\n", heatmaps, curves.empty() ? "" : ", loss_curves.svg",
                report_dir.c_str());
    return 0;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "error: malformed JSON field: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  }
}
