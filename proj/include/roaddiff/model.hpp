#pragma once

// Full model: road encoder + lane decoder + diffusion refiner.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roaddiff/autoencoder.hpp"
#include "roaddiff/data.hpp"
#include "roaddiff/diffusion.hpp"
#include "roaddiff/errors.hpp"
#include "roaddiff/graph.hpp"
#include "roaddiff/losses.hpp"
#include "roaddiff/optim.hpp"
#include "roaddiff/series.hpp"
#include "roaddiff/tensor.hpp"

namespace roaddiff {

struct ModelConfig {
  TrafficKind kind = TrafficKind::speed;
  std::size_t hidden = 32;
  std::size_t denoiser_hidden = 32;
  std::size_t step_embedding = 8;
  double leaky_slope = 0.2;
  bool self_loops = true;
  bool temporal_residual = true;
  double lambda = 1.0;
  DiffusionConfig diffusion;

  bool no_diffusion = false;
  bool no_graph_attention = false;
  bool no_temporal_attention = false;
  bool linear_autoencoder = false;

  AutoencoderOptions autoencoder_options() const {
    AutoencoderOptions o;
    o.hidden = hidden;
    o.leaky_slope = leaky_slope;
    o.graph_attention = !no_graph_attention;
    o.temporal_attention = !no_temporal_attention;
    o.temporal_residual = temporal_residual;
    o.self_loops = self_loops;
    return o;
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"hidden", c.hidden},
          {"denoiser_hidden", c.denoiser_hidden},
          {"step_embedding", c.step_embedding},
          {"leaky_slope", c.leaky_slope},
          {"self_loops", c.self_loops},
          {"temporal_residual", c.temporal_residual},
          {"lambda", c.lambda},
          {"diffusion", to_json(c.diffusion)},
          {"no_diffusion", c.no_diffusion},
          {"no_graph_attention", c.no_graph_attention},
          {"no_temporal_attention", c.no_temporal_attention},
          {"linear_autoencoder", c.linear_autoencoder}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  if (j.contains("kind")) c.kind = parse_kind(j.at("kind").get<std::string>());
  c.hidden = j.value("hidden", c.hidden);
  c.denoiser_hidden = j.value("denoiser_hidden", c.denoiser_hidden);
  c.step_embedding = j.value("step_embedding", c.step_embedding);
  c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
  c.self_loops = j.value("self_loops", c.self_loops);
  c.temporal_residual = j.value("temporal_residual", c.temporal_residual);
  c.lambda = j.value("lambda", c.lambda);
  if (j.contains("diffusion")) c.diffusion = diffusion_config_from_json(j.at("diffusion"));
  c.no_diffusion = j.value("no_diffusion", c.no_diffusion);
  c.no_graph_attention = j.value("no_graph_attention", c.no_graph_attention);
  c.no_temporal_attention = j.value("no_temporal_attention", c.no_temporal_attention);
  c.linear_autoencoder = j.value("linear_autoencoder", c.linear_autoencoder);
  if (c.hidden == 0 || c.denoiser_hidden == 0) throw ConfigError("hidden sizes must be positive");
  if (c.lambda < 0.0) throw ConfigError("lambda must be >= 0");
  return c;
}

struct WindowLoss {
  Tensor total;
  LossBreakdown parts;
};

struct InferResult {
  Matrix lanes;         // physical units [T x N]
  Matrix initial;       // decoder estimate, physical units
  double residual_before = 0.0;  // constraint loss of the decoder estimate
  double residual_after = 0.0;
};

class RoadDiffModel {
 public:
  RoadDiffModel(RoadNetwork roads, ModelConfig cfg, NodeStats road_stats, NodeStats lane_stats, std::uint64_t seed)
      : roads_(std::move(roads)),
        lanes_(build_lane_network(roads_)),
        cfg_(cfg),
        encoder_(roads_, cfg.autoencoder_options()),
        decoder_(lanes_, cfg.autoencoder_options()),
        linear_(roads_.road_count, lanes_.lane_count()),
        predictor_(cfg.denoiser_hidden, cfg.step_embedding),
        schedule_(make_schedule(cfg.diffusion)),
        road_stats_(std::move(road_stats)),
        lane_stats_(std::move(lane_stats)),
        aggregation_(aggregation_matrix(lanes_, cfg.kind)) {
    if (road_stats_.mean.size() != roads_.road_count || lane_stats_.mean.size() != lanes_.lane_count())
      throw ShapeError("model: normalisation stats do not match the graph");
    std::mt19937_64 rng(seed);
    if (cfg_.linear_autoencoder) {
      linear_.init_params(store_, rng);
    } else {
      encoder_.init_params(store_, rng);
      decoder_.init_params(store_, rng);
    }
    if (!cfg_.no_diffusion) predictor_.init_params(store_, rng);
    eta_ = cfg_.diffusion.eta.value_or(default_eta(cfg_.kind, lanes_));
    lane_mean_row_ = Matrix(1, lanes_.lane_count(), lane_stats_.mean);
  }

  const RoadNetwork& roads() const { return roads_; }
  const LaneNetwork& lanes() const { return lanes_; }
  const ModelConfig& config() const { return cfg_; }
  const DiffusionSchedule& schedule() const { return schedule_; }
  const NodeStats& road_stats() const { return road_stats_; }
  const NodeStats& lane_stats() const { return lane_stats_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  double eta() const { return eta_; }

  // Normalised road window broadcast onto lanes.
  Matrix mapped_road(const Matrix& road_z) const {
    Matrix out(road_z.rows, lanes_.lane_count());
    for (std::size_t t = 0; t < road_z.rows; ++t)
      for (std::size_t l = 0; l < out.cols; ++l) out(t, l) = road_z(t, lanes_.parent_road()[l]);
    return out;
  }

  // Decoder estimate (normalised lane units) for a normalised road window.
  Tensor initial_estimate(const Matrix& road_z) const {
    const Tensor x = Tensor::constant(road_z);
    if (cfg_.linear_autoencoder) return linear_.forward(store_, x);
    return decoder_.decode(store_, encoder_.encode(store_, x));
  }

  Tensor to_physical(const Tensor& lane_z) const {
    Matrix stdm(lane_z.rows(), lane_z.cols());
    for (std::size_t t = 0; t < stdm.rows; ++t)
      for (std::size_t l = 0; l < stdm.cols; ++l) stdm(t, l) = lane_stats_.std[l];
    return add_row(mul(lane_z, Tensor::constant(stdm)), Tensor::constant(lane_mean_row_));
  }

  // Training objective for one window (physical road and lane values).
  WindowLoss window_loss(const Window& w, std::mt19937_64& rng) const {
    const Matrix road_z = normalize(w.road, road_stats_);
    const Matrix lane_z = normalize(w.lane, lane_stats_);
    const Tensor d = initial_estimate(road_z);
    const Tensor con = constraint_loss_tensor(to_physical(d), w.road, aggregation_);
    Tensor recon = mse(d, Tensor::constant(lane_z));
    std::optional<Tensor> kl;
    if (!cfg_.no_diffusion) {
      std::uniform_int_distribution<std::size_t> pick(1, schedule_.steps());
      const std::size_t n = pick(rng);
      const Matrix eps = standard_normal(lane_z.rows, lane_z.cols, rng);
      auto terms = diffusion_terms(predictor_, store_, lane_z, mapped_road(road_z), n, eps, schedule_,
                                   cfg_.diffusion.coefficient);
      recon = add(recon, terms.noise_mse);
      kl = terms.kl;
    }
    Tensor total = add(recon, scale(con, cfg_.lambda));
    if (kl) total = add(total, *kl);
    WindowLoss out{total, total_loss(kl ? kl->item() : 0.0, recon.item(), con.item(), cfg_.lambda)};
    return out;
  }

  InferResult infer_window(const Matrix& road_phys, std::uint64_t seed) const {
    NoGradGuard guard;
    const Matrix road_z = normalize(road_phys, road_stats_);
    const Matrix d = initial_estimate(road_z).to_matrix();
    InferResult r;
    r.initial = denormalize(d, lane_stats_);
    r.residual_before = constraint_loss(r.initial, road_phys, cfg_.kind, lanes_);
    if (cfg_.no_diffusion) {
      r.lanes = r.initial;
    } else {
      PhysicalProjection proj{&lanes_, cfg_.kind, eta_, road_phys, lane_stats_.mean, lane_stats_.std};
      SampleOptions opt{cfg_.diffusion.gamma_mode, cfg_.diffusion.coefficient, cfg_.diffusion.stochastic_reverse};
      const Matrix x = sample(d, mapped_road(road_z), schedule_, predictor_.bind(store_), proj, seed, opt);
      r.lanes = denormalize(x, lane_stats_);
    }
    r.residual_after = constraint_loss(r.lanes, road_phys, cfg_.kind, lanes_);
    return r;
  }

 private:
  RoadNetwork roads_;
  LaneNetwork lanes_;
  ModelConfig cfg_;
  RoadEncoder encoder_;
  LaneDecoder decoder_;
  LinearAutoencoder linear_;
  NoisePredictor predictor_;
  DiffusionSchedule schedule_;
  NodeStats road_stats_;
  NodeStats lane_stats_;
  Matrix aggregation_;
  Matrix lane_mean_row_;
  ParamStore store_;
  double eta_ = 0.0;
};

}  // namespace roaddiff
