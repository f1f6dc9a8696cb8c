#pragma once

// Constraint, reconstruction and KL losses; evaluation metrics.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roaddiff/errors.hpp"
#include "roaddiff/graph.hpp"
#include "roaddiff/series.hpp"
#include "roaddiff/tensor.hpp"

namespace roaddiff {

// Σ_i (r_i - agg_j l_ij)^2 for one time step; for a [T x N] window it is
// summed over roads and steps.
inline double constraint_loss(const Matrix& lanes, const Matrix& roads, TrafficKind kind, const LaneNetwork& net) {
  if (lanes.rows != roads.rows) throw ShapeError("constraint_loss: lane and road step counts differ");
  const Matrix agg = aggregate_lanes(lanes, net, kind);
  if (agg.cols != roads.cols) throw ShapeError("constraint_loss: road column count mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < agg.size(); ++k) {
    const double r = roads.data[k] - agg.data[k];
    s += r * r;
  }
  return s;
}

inline double constraint_loss(const TrafficSeries& lanes, const TrafficSeries& roads, TrafficKind kind,
                              const LaneNetwork& net) {
  require_kind(kind, lanes.kind, "constraint_loss");
  require_kind(kind, roads.kind, "constraint_loss");
  return constraint_loss(lanes.values, roads.values, kind, net);
}

// [N x I] matrix whose product with a lane row gives the aggregated road row.
inline Matrix aggregation_matrix(const LaneNetwork& net, TrafficKind kind) {
  Matrix s(net.lane_count(), net.road_count());
  for (std::size_t l = 0; l < net.lane_count(); ++l) {
    const std::size_t i = net.parent_road()[l];
    s(l, i) = kind == TrafficKind::speed ? 1.0 / static_cast<double>(net.lanes_of(i)) : 1.0;
  }
  return s;
}

// Differentiable constraint loss on a [T x N] physical-unit lane tensor,
// summed over roads and averaged over steps.
inline Tensor constraint_loss_tensor(const Tensor& lanes, const Matrix& roads, const Matrix& aggregation) {
  if (lanes.rows() != roads.rows || aggregation.cols != roads.cols)
    throw ShapeError("constraint_loss_tensor: shape mismatch");
  const Tensor residual = sub(Tensor::constant(roads), matmul(lanes, Tensor::constant(aggregation)));
  return scale(sum(square(residual)), 1.0 / static_cast<double>(lanes.rows()));
}

// ∂L_con/∂l for every lane, organised like `lanes`.
inline Matrix constraint_gradient(const Matrix& lanes, const Matrix& roads, TrafficKind kind, const LaneNetwork& net) {
  const Matrix agg = aggregate_lanes(lanes, net, kind);
  if (agg.cols != roads.cols || agg.rows != roads.rows) throw ShapeError("constraint_gradient: shape mismatch");
  Matrix g(lanes.rows, lanes.cols);
  for (std::size_t t = 0; t < lanes.rows; ++t)
    for (std::size_t l = 0; l < lanes.cols; ++l) {
      const std::size_t i = net.parent_road()[l];
      const double r = roads(t, i) - agg(t, i);
      g(t, l) = kind == TrafficKind::speed ? -2.0 / static_cast<double>(net.lanes_of(i)) * r : -2.0 * r;
    }
  return g;
}

inline Tensor recon_loss(const Tensor& eps_true, const Tensor& eps_pred) {
  detail::require_same_shape(eps_true, eps_pred, "recon_loss");
  return mse(eps_pred, eps_true);
}

// KL(N(mu_q, var) || N(mu_p, var)) with a shared isotropic variance, averaged
// over elements.
inline Tensor gaussian_kl_shared(const Tensor& mu_q, const Tensor& mu_p, double variance) {
  detail::require_same_shape(mu_q, mu_p, "gaussian_kl");
  if (!(variance > 0.0)) throw ContractError("gaussian_kl: variance must be positive");
  return scale(mean(square(sub(mu_q, mu_p))), 0.5 / variance);
}

// Closed-form KL between two univariate Gaussians.
inline double gaussian_kl(double mu_q, double var_q, double mu_p, double var_p) {
  if (!(var_q > 0.0) || !(var_p > 0.0)) throw ContractError("gaussian_kl: variances must be positive");
  const double d = mu_q - mu_p;
  return 0.5 * (std::log(var_p / var_q) + (var_q + d * d) / var_p - 1.0);
}

struct LossBreakdown {
  double l_recon = 0.0;
  double l_kl = 0.0;
  double l_con = 0.0;
  double lambda = 1.0;
  double total = 0.0;
};

inline LossBreakdown total_loss(double l_kl, double l_recon, double l_con, double lambda) {
  if (!std::isfinite(l_kl) || !std::isfinite(l_recon) || !std::isfinite(l_con))
    throw DivergenceError("total_loss: non-finite loss component");
  return {l_recon, l_kl, l_con, lambda, l_kl + l_recon + lambda * l_con};
}

inline nlohmann::json to_json(const LossBreakdown& b) {
  return {{"l_recon", b.l_recon}, {"l_kl", b.l_kl}, {"l_con", b.l_con}, {"lambda", b.lambda}, {"total", b.total}};
}

// ---------------------------------------------------------------------------
// Metrics

struct HorizonRow {
  std::size_t window = 0;
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> mape;
};

struct EvalReport {
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> mape;  // percent; empty when every truth entry is masked
  std::size_t mape_used = 0;
  std::size_t mape_masked = 0;
  std::vector<HorizonRow> horizons;
  std::optional<double> constraint_loss;
};

inline constexpr double kMapeMask = 1e-3;

inline EvalReport evaluate(const Matrix& pred, const Matrix& truth, double mask_eps = kMapeMask) {
  if (pred.shape() != truth.shape()) throw ShapeError("evaluate: prediction " + pred.shape().str() + " vs truth " +
                                                      truth.shape().str());
  if (pred.size() == 0) throw ShapeError("evaluate: empty series");
  double abs_sum = 0.0, sq_sum = 0.0, pct_sum = 0.0;
  EvalReport r;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const double e = pred.data[k] - truth.data[k];
    abs_sum += std::abs(e);
    sq_sum += e * e;
    if (std::abs(truth.data[k]) < mask_eps) {
      ++r.mape_masked;
    } else {
      ++r.mape_used;
      pct_sum += std::abs(e / truth.data[k]);
    }
  }
  const double n = static_cast<double>(pred.size());
  r.mae = abs_sum / n;
  r.rmse = std::sqrt(sq_sum / n);
  if (r.mape_used > 0) r.mape = 100.0 * pct_sum / static_cast<double>(r.mape_used);
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  const auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
  nlohmann::json h = nlohmann::json::array();
  for (const auto& row : r.horizons)
    h.push_back({{"window", row.window}, {"mae", row.mae}, {"rmse", row.rmse}, {"mape", opt(row.mape)}});
  return {{"mae", r.mae},
          {"rmse", r.rmse},
          {"mape", opt(r.mape)},
          {"mape_used", r.mape_used},
          {"mape_masked", r.mape_masked},
          {"horizons", h},
          {"constraint_loss", opt(r.constraint_loss)}};
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  const auto opt = [](const nlohmann::json& v) -> std::optional<double> {
    if (v.is_null()) return std::nullopt;
    return v.get<double>();
  };
  EvalReport r;
  r.mae = j.at("mae").get<double>();
  r.rmse = j.at("rmse").get<double>();
  r.mape = opt(j.at("mape"));
  r.mape_used = j.value("mape_used", std::size_t{0});
  r.mape_masked = j.value("mape_masked", std::size_t{0});
  if (j.contains("horizons"))
    for (const auto& h : j.at("horizons"))
      r.horizons.push_back({h.at("window").get<std::size_t>(), h.at("mae").get<double>(), h.at("rmse").get<double>(),
                            opt(h.at("mape"))});
  if (j.contains("constraint_loss")) r.constraint_loss = opt(j.at("constraint_loss"));
  return r;
}

}  // namespace roaddiff
