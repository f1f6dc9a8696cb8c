#pragma once

// Road-conditioned lane diffusion: schedule, forward noising, reverse
// denoising, constraint projection and the sampling chain.

#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roaddiff/errors.hpp"
#include "roaddiff/graph.hpp"
#include "roaddiff/losses.hpp"
#include "roaddiff/optim.hpp"
#include "roaddiff/series.hpp"
#include "roaddiff/tensor.hpp"

namespace roaddiff {

// Sign convention of the road term in the reverse step.
//   literal: + gamma_n * road
//   cancel:  - gamma_n / sqrt(1 - beta_n) * road (exact inverse of the forward injection)
enum class GammaMode { literal, cancel };

// Coefficient in front of the predicted noise.
//   ddpm:    beta_n / sqrt(1 - alpha_bar_n)
//   literal: beta_n / sqrt(1 - beta_n)
// Both agree at n = 1.
enum class ReverseCoefficient { ddpm, literal };

struct DiffusionConfig {
  std::size_t steps = 10;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  double kappa = 0.1;
  GammaMode gamma_mode = GammaMode::literal;
  ReverseCoefficient coefficient = ReverseCoefficient::ddpm;
  bool stochastic_reverse = false;
  std::optional<double> eta;  // projection step; per-kind default when empty
};

inline std::string to_string(GammaMode m) { return m == GammaMode::literal ? "literal" : "cancel"; }
inline std::string to_string(ReverseCoefficient c) { return c == ReverseCoefficient::ddpm ? "ddpm" : "literal"; }

inline GammaMode parse_gamma_mode(const std::string& s) {
  if (s == "literal") return GammaMode::literal;
  if (s == "cancel") return GammaMode::cancel;
  throw ConfigError("unknown gamma mode '" + s + "'");
}
inline ReverseCoefficient parse_reverse_coefficient(const std::string& s) {
  if (s == "ddpm") return ReverseCoefficient::ddpm;
  if (s == "literal") return ReverseCoefficient::literal;
  throw ConfigError("unknown reverse coefficient '" + s + "'");
}

inline nlohmann::json to_json(const DiffusionConfig& c) {
  nlohmann::json j = {{"steps", c.steps},
                      {"beta_min", c.beta_min},
                      {"beta_max", c.beta_max},
                      {"kappa", c.kappa},
                      {"gamma_mode", to_string(c.gamma_mode)},
                      {"reverse_coefficient", to_string(c.coefficient)},
                      {"stochastic_reverse", c.stochastic_reverse}};
  j["eta"] = c.eta ? nlohmann::json(*c.eta) : nlohmann::json();
  return j;
}

inline DiffusionConfig diffusion_config_from_json(const nlohmann::json& j) {
  DiffusionConfig c;
  c.steps = j.value("steps", c.steps);
  c.beta_min = j.value("beta_min", c.beta_min);
  c.beta_max = j.value("beta_max", c.beta_max);
  c.kappa = j.value("kappa", c.kappa);
  c.gamma_mode = parse_gamma_mode(j.value("gamma_mode", std::string("literal")));
  c.coefficient = parse_reverse_coefficient(j.value("reverse_coefficient", std::string("ddpm")));
  c.stochastic_reverse = j.value("stochastic_reverse", false);
  if (j.contains("eta") && !j.at("eta").is_null()) c.eta = j.at("eta").get<double>();
  return c;
}

// Default projection step inside the no-overshoot bound of each kind.
inline double default_eta(TrafficKind kind, const LaneNetwork& net) {
  if (kind == TrafficKind::speed) return 0.5;
  std::size_t max_j = 1;
  for (auto j : net.lane_counts()) max_j = std::max(max_j, j);
  return 1.0 / (4.0 * static_cast<double>(max_j));
}

// Index n is 1-based in the accessors, matching the chain notation.
struct DiffusionSchedule {
  std::vector<double> beta;
  std::vector<double> gamma;
  std::vector<double> alpha_bar;
  std::vector<double> drift;  // accumulated road coefficient g_n of the forward chain

  std::size_t steps() const { return beta.size(); }
  double beta_at(std::size_t n) const { return beta.at(check(n) - 1); }
  double gamma_at(std::size_t n) const { return gamma.at(check(n) - 1); }
  double alpha_bar_at(std::size_t n) const { return n == 0 ? 1.0 : alpha_bar.at(check(n) - 1); }
  double drift_at(std::size_t n) const { return n == 0 ? 0.0 : drift.at(check(n) - 1); }

  // Variance of q(x_{n-1} | x_n, x_0).
  double posterior_variance(std::size_t n) const {
    return (1.0 - alpha_bar_at(n - 1)) / (1.0 - alpha_bar_at(n)) * beta_at(n);
  }

 private:
  std::size_t check(std::size_t n) const {
    if (n < 1 || n > beta.size())
      throw IndexError("diffusion step " + std::to_string(n) + " outside [1, " + std::to_string(beta.size()) + "]");
    return n;
  }
};

inline DiffusionSchedule make_schedule(std::size_t steps, double beta_min, double beta_max, double kappa) {
  if (steps < 1) throw ConfigError("diffusion needs at least one step");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
    throw ConfigError("diffusion betas must satisfy 0 < beta_min <= beta_max < 1");
  if (!std::isfinite(kappa)) throw ConfigError("gamma scale must be finite");
  DiffusionSchedule s;
  double ab = 1.0, g = 0.0;
  for (std::size_t k = 0; k < steps; ++k) {
    const double b =
        steps == 1 ? beta_min : beta_min + (beta_max - beta_min) * static_cast<double>(k) / static_cast<double>(steps - 1);
    s.beta.push_back(b);
    s.gamma.push_back(kappa * b);
    ab *= 1.0 - b;
    s.alpha_bar.push_back(ab);
    g = std::sqrt(1.0 - b) * g + kappa * b;
    s.drift.push_back(g);
  }
  return s;
}

inline DiffusionSchedule make_schedule(const DiffusionConfig& c) {
  return make_schedule(c.steps, c.beta_min, c.beta_max, c.kappa);
}

namespace detail {
inline void same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}
}  // namespace detail

// x_n = sqrt(1 - beta) x_prev + gamma road_prev + sqrt(beta) eps
inline Matrix forward_step(const Matrix& x_prev, const Matrix& road_prev, double beta, double gamma,
                           const Matrix& eps) {
  detail::same_shape(x_prev, road_prev, "forward_step");
  detail::same_shape(x_prev, eps, "forward_step");
  const double a = std::sqrt(1.0 - beta), s = std::sqrt(beta);
  Matrix out(x_prev.rows, x_prev.cols);
  for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = a * x_prev.data[k] + gamma * road_prev.data[k] + s * eps.data[k];
  return out;
}

inline Matrix forward_step(const Matrix& x_prev, const Matrix& road_prev, std::size_t n, const Matrix& eps,
                           const DiffusionSchedule& s) {
  return forward_step(x_prev, road_prev, s.beta_at(n), s.gamma_at(n), eps);
}

// Closed form of n forward steps from x0 with a fixed road state:
// sqrt(alpha_bar_n) x0 + g_n road + sqrt(1 - alpha_bar_n) eps.
inline Matrix forward_marginal(const Matrix& x0, const Matrix& road, std::size_t n, const Matrix& eps,
                               const DiffusionSchedule& s) {
  detail::same_shape(x0, road, "forward_marginal");
  detail::same_shape(x0, eps, "forward_marginal");
  const double a = std::sqrt(s.alpha_bar_at(n)), g = s.drift_at(n), sd = std::sqrt(1.0 - s.alpha_bar_at(n));
  Matrix out(x0.rows, x0.cols);
  for (std::size_t k = 0; k < out.size(); ++k) out.data[k] = a * x0.data[k] + g * road.data[k] + sd * eps.data[k];
  return out;
}

inline double noise_coefficient(const DiffusionSchedule& s, std::size_t n, ReverseCoefficient c) {
  const double b = s.beta_at(n);
  return c == ReverseCoefficient::ddpm ? b / std::sqrt(1.0 - s.alpha_bar_at(n)) : b / std::sqrt(1.0 - b);
}

inline double reverse_road_coefficient(const DiffusionSchedule& s, std::size_t n, GammaMode m) {
  return m == GammaMode::literal ? s.gamma_at(n) : -s.gamma_at(n) / std::sqrt(1.0 - s.beta_at(n));
}

// (x_n - c_n eps_pred) / sqrt(1 - beta_n) + gamma-term road + sigma_n z,
// sigma_n = sqrt(beta_n) for n > 1 and 0 at n = 1.
inline Matrix reverse_step_with(const Matrix& x_n, const Matrix& road_n, std::size_t n, const Matrix& eps_pred,
                                const DiffusionSchedule& s, const Matrix* z, GammaMode gm, ReverseCoefficient rc) {
  detail::same_shape(x_n, road_n, "reverse_step");
  detail::same_shape(x_n, eps_pred, "reverse_step");
  if (z) detail::same_shape(x_n, *z, "reverse_step");
  const double inv = 1.0 / std::sqrt(1.0 - s.beta_at(n));
  const double c = noise_coefficient(s, n, rc);
  const double g = reverse_road_coefficient(s, n, gm);
  const double sigma = n > 1 ? std::sqrt(s.beta_at(n)) : 0.0;
  Matrix out(x_n.rows, x_n.cols);
  for (std::size_t k = 0; k < out.size(); ++k) {
    double v = inv * (x_n.data[k] - c * eps_pred.data[k]) + g * road_n.data[k];
    if (z) v += sigma * z->data[k];
    out.data[k] = v;
  }
  return out;
}

// (x_n, road, n) -> predicted noise
using Denoiser = std::function<Matrix(const Matrix&, const Matrix&, std::size_t)>;

inline Matrix reverse_step(const Matrix& x_n, const Matrix& road_n, std::size_t n, const Denoiser& denoiser,
                           const DiffusionSchedule& s, const Matrix* z, GammaMode gm = GammaMode::literal,
                           ReverseCoefficient rc = ReverseCoefficient::ddpm) {
  return reverse_step_with(x_n, road_n, n, denoiser(x_n, road_n, n), s, z, gm, rc);
}

// Noise that maps x0 to the current state under the closed-form marginal.
inline Denoiser oracle_denoiser(const Matrix& x0, const DiffusionSchedule& s) {
  return [x0, &s](const Matrix& x_n, const Matrix& road, std::size_t n) {
    const double a = std::sqrt(s.alpha_bar_at(n)), g = s.drift_at(n), sd = std::sqrt(1.0 - s.alpha_bar_at(n));
    Matrix e(x_n.rows, x_n.cols);
    for (std::size_t k = 0; k < e.size(); ++k) e.data[k] = (x_n.data[k] - a * x0.data[k] - g * road.data[k]) / sd;
    return e;
  };
}

// x <- x - eta dL_con/dx, physical units.
inline Matrix constraint_project(const Matrix& lanes, const Matrix& roads, TrafficKind kind, double eta,
                                 const LaneNetwork& net) {
  const Matrix g = constraint_gradient(lanes, roads, kind, net);
  Matrix out = lanes;
  for (std::size_t k = 0; k < out.size(); ++k) out.data[k] -= eta * g.data[k];
  return out;
}

inline TrafficSeries constraint_project(const TrafficSeries& lanes, const TrafficSeries& roads, TrafficKind kind,
                                        double eta, const LaneNetwork& net) {
  require_kind(kind, lanes.kind, "constraint_project");
  require_kind(kind, roads.kind, "constraint_project");
  TrafficSeries out = lanes;
  out.values = constraint_project(lanes.values, roads.values, kind, eta, net);
  return out;
}

// Maps normalised lane states to physical units, projects, maps back.
struct PhysicalProjection {
  const LaneNetwork* net = nullptr;
  TrafficKind kind = TrafficKind::speed;
  double eta = 0.0;
  Matrix roads;                  // physical road window [T x I]
  std::vector<double> lane_mean;  // per lane
  std::vector<double> lane_std;

  Matrix operator()(const Matrix& z) const {
    Matrix phys = z;
    for (std::size_t t = 0; t < z.rows; ++t)
      for (std::size_t l = 0; l < z.cols; ++l) phys(t, l) = z(t, l) * lane_std[l] + lane_mean[l];
    phys = constraint_project(phys, roads, kind, eta, *net);
    for (std::size_t t = 0; t < z.rows; ++t)
      for (std::size_t l = 0; l < z.cols; ++l) phys(t, l) = (phys(t, l) - lane_mean[l]) / lane_std[l];
    return phys;
  }
};

struct SampleOptions {
  GammaMode gamma_mode = GammaMode::literal;
  ReverseCoefficient coefficient = ReverseCoefficient::ddpm;
  bool stochastic_reverse = false;
};

inline Matrix standard_normal(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix m(rows, cols);
  for (auto& v : m.data) v = nd(rng);
  return m;
}

// Forward-noise the initial estimate through all steps, then run the reverse
// chain, projecting after every reverse step when `project` is given.
inline Matrix sample(const Matrix& initial, const Matrix& road, const DiffusionSchedule& s, const Denoiser& denoiser,
                     const std::function<Matrix(const Matrix&)>& project, std::uint64_t seed,
                     const SampleOptions& opt = {}) {
  detail::same_shape(initial, road, "sample");
  std::mt19937_64 rng(seed);
  Matrix x = initial;
  for (std::size_t n = 1; n <= s.steps(); ++n) x = forward_step(x, road, n, standard_normal(x.rows, x.cols, rng), s);
  for (std::size_t n = s.steps(); n >= 1; --n) {
    std::optional<Matrix> z;
    if (opt.stochastic_reverse && n > 1) z = standard_normal(x.rows, x.cols, rng);
    x = reverse_step(x, road, n, denoiser, s, z ? &*z : nullptr, opt.gamma_mode, opt.coefficient);
    if (project) x = project(x);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Learned noise predictor: a pointwise MLP over
// [lane state || mapped road state || sinusoidal step embedding].

inline std::vector<double> step_embedding(std::size_t n, std::size_t dim) {
  std::vector<double> e(dim, 0.0);
  const std::size_t half = dim / 2;
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::pow(10000.0, -static_cast<double>(2 * k) / static_cast<double>(dim));
    e[k] = std::sin(static_cast<double>(n) * freq);
    e[half + k] = std::cos(static_cast<double>(n) * freq);
  }
  return e;
}

class NoisePredictor {
 public:
  explicit NoisePredictor(std::size_t hidden = 32, std::size_t embed_dim = 8) : hidden_(hidden), embed_(embed_dim) {}

  void init_params(ParamStore& store, std::mt19937_64& rng) const {
    const std::size_t in = 2 + embed_;
    store.add("den.w1", glorot(in, hidden_, rng));
    store.add("den.b1", Matrix(1, hidden_));
    store.add("den.w2", glorot(hidden_, hidden_, rng));
    store.add("den.b2", Matrix(1, hidden_));
    store.add("den.w3", glorot(hidden_, 1, rng));
    store.add("den.b3", Matrix(1, 1));
  }

  // x_n and road are [T x N]; returns predicted noise [T x N].
  Tensor forward(const ParamStore& store, const Matrix& x_n, const Matrix& road, std::size_t n) const {
    detail::same_shape(x_n, road, "noise predictor");
    const std::size_t count = x_n.size(), in = 2 + embed_;
    const auto emb = step_embedding(n, embed_);
    Matrix features(count, in);
    for (std::size_t k = 0; k < count; ++k) {
      features(k, 0) = x_n.data[k];
      features(k, 1) = road.data[k];
      for (std::size_t e = 0; e < embed_; ++e) features(k, 2 + e) = emb[e];
    }
    Tensor h = relu(add_row(matmul(Tensor::constant(features), store.get("den.w1")), store.get("den.b1")));
    h = relu(add_row(matmul(h, store.get("den.w2")), store.get("den.b2")));
    const Tensor out = add_row(matmul(h, store.get("den.w3")), store.get("den.b3"));
    return reshape(out, {x_n.rows, x_n.cols});
  }

  Matrix predict(const ParamStore& store, const Matrix& x_n, const Matrix& road, std::size_t n) const {
    NoGradGuard guard;
    return forward(store, x_n, road, n).to_matrix();
  }

  Denoiser bind(const ParamStore& store) const {
    return [this, &store](const Matrix& x, const Matrix& r, std::size_t n) { return predict(store, x, r, n); };
  }

 private:
  std::size_t hidden_;
  std::size_t embed_;
};

// Training terms for one window. x0 is the clean lane state, road the mapped
// road state, both normalised. The KL term works on drift-removed states so it
// reduces to the standard posterior at gamma = 0.
struct DiffusionTerms {
  Tensor noise_mse;
  std::optional<Tensor> kl;
};

inline DiffusionTerms diffusion_terms(const NoisePredictor& model, const ParamStore& store, const Matrix& x0,
                                      const Matrix& road, std::size_t n, const Matrix& eps,
                                      const DiffusionSchedule& s, ReverseCoefficient rc = ReverseCoefficient::ddpm) {
  const Matrix x_n = forward_marginal(x0, road, n, eps, s);
  const Tensor eps_pred = model.forward(store, x_n, road, n);
  DiffusionTerms out{recon_loss(Tensor::constant(eps), eps_pred), std::nullopt};
  if (n >= 2) {
    const double ab = s.alpha_bar_at(n), ab_prev = s.alpha_bar_at(n - 1), b = s.beta_at(n);
    const double c0 = std::sqrt(ab_prev) * b / (1.0 - ab);
    const double cn = std::sqrt(1.0 - b) * (1.0 - ab_prev) / (1.0 - ab);
    const double g = s.drift_at(n);
    Matrix y(x_n.rows, x_n.cols), mu_q(x_n.rows, x_n.cols);
    for (std::size_t k = 0; k < y.size(); ++k) {
      y.data[k] = x_n.data[k] - g * road.data[k];
      mu_q.data[k] = c0 * x0.data[k] + cn * y.data[k];
    }
    const double inv = 1.0 / std::sqrt(1.0 - b);
    const Tensor mu_p = scale(sub(Tensor::constant(y), scale(eps_pred, noise_coefficient(s, n, rc))), inv);
    out.kl = gaussian_kl_shared(Tensor::constant(mu_q), mu_p, s.posterior_variance(n));
  }
  return out;
}

}  // namespace roaddiff
