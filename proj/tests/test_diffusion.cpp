#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "roaddiff/diffusion.hpp"
#include "roaddiff/errors.hpp"
#include "test_util.hpp"

using namespace roaddiff;
using rdtest::random_matrix;

namespace {

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a.data[k] - b.data[k]));
  return m;
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data) m = std::max(m, std::abs(v));
  return m;
}

Matrix road_residual(const Matrix& lanes, const Matrix& roads, TrafficKind kind, const LaneNetwork& net) {
  Matrix r = aggregate_lanes(lanes, net, kind);
  for (std::size_t k = 0; k < r.size(); ++k) r.data[k] = roads.data[k] - r.data[k];
  return r;
}

}  // namespace

TEST(Schedule, DefaultLinspace) {
  const auto s = make_schedule(10, 1e-4, 0.02, 0.1);
  ASSERT_EQ(s.steps(), 10u);
  EXPECT_DOUBLE_EQ(s.beta_at(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta_at(10), 0.02);
  double prod = 1.0;
  for (std::size_t n = 1; n <= 10; ++n) {
    EXPECT_NEAR(s.beta_at(n), 1e-4 + (0.02 - 1e-4) * static_cast<double>(n - 1) / 9.0, 1e-17);
    EXPECT_NEAR(s.gamma_at(n), 0.1 * s.beta_at(n), 1e-18);
    prod *= 1.0 - s.beta_at(n);
    EXPECT_NEAR(s.alpha_bar_at(n), prod, 1e-15);
    EXPECT_LT(s.alpha_bar_at(n), s.alpha_bar_at(n - 1));
  }
}

TEST(Schedule, KappaZeroAndSweepGrid) {
  const auto s = make_schedule(10, 1e-4, 0.02, 0.0);
  for (double g : s.gamma) EXPECT_EQ(g, 0.0);
  for (double g : s.drift) EXPECT_EQ(g, 0.0);
  for (std::size_t steps : {5u, 10u, 20u, 30u}) EXPECT_EQ(make_schedule(steps, 1e-4, 0.02, 0.1).steps(), steps);
  EXPECT_EQ(make_schedule(1, 1e-3, 1e-3, 0.1).beta_at(1), 1e-3);
}

TEST(Schedule, Errors) {
  EXPECT_THROW(make_schedule(0, 1e-4, 0.02, 0.1), ConfigError);
  EXPECT_THROW(make_schedule(10, 0.0, 0.02, 0.1), ConfigError);
  EXPECT_THROW(make_schedule(10, 0.03, 0.02, 0.1), ConfigError);
  EXPECT_THROW(make_schedule(10, 1e-4, 1.0, 0.1), ConfigError);
  EXPECT_THROW(make_schedule(10, 1e-4, 0.02, NAN), ConfigError);
  const auto s = make_schedule(3, 1e-4, 0.02, 0.1);
  EXPECT_THROW(s.beta_at(0), IndexError);
  EXPECT_THROW(s.beta_at(4), IndexError);
}

TEST(Schedule, DriftMatchesIteratedNoiselessSteps) {
  const auto s = make_schedule(20, 1e-4, 0.05, 0.7);
  Matrix x(1, 1, 0.0);
  const Matrix r(1, 1, 1.0), zero(1, 1, 0.0);
  for (std::size_t n = 1; n <= 20; ++n) {
    x = forward_step(x, r, n, zero, s);
    EXPECT_NEAR(x(0, 0), s.drift_at(n), 1e-15);
  }
}

TEST(DiffusionConfig, JsonRoundTrip) {
  DiffusionConfig c;
  c.steps = 20;
  c.gamma_mode = GammaMode::cancel;
  c.coefficient = ReverseCoefficient::literal;
  c.eta = 0.03;
  const auto back = diffusion_config_from_json(to_json(c));
  EXPECT_EQ(back.steps, 20u);
  EXPECT_EQ(back.gamma_mode, GammaMode::cancel);
  EXPECT_EQ(back.coefficient, ReverseCoefficient::literal);
  EXPECT_EQ(back.eta, 0.03);
  EXPECT_FALSE(diffusion_config_from_json(to_json(DiffusionConfig{})).eta.has_value());
  EXPECT_THROW(diffusion_config_from_json({{"gamma_mode", "flip"}}), ConfigError);
}

TEST(ForwardStep, Examples) {
  const Matrix x(1, 2, {3.0, -1.0}), r(1, 2, {7.0, 7.0}), e(1, 2, {0.3, 0.9});
  EXPECT_EQ(forward_step(x, r, 0.0, 0.0, e), x);
  EXPECT_EQ(forward_step(Matrix(1, 2), r, 1.0, 0.0, e), e);
  const auto v = forward_step(Matrix(1, 1, {10.0}), Matrix(1, 1, {4.0}), 0.19, 0.5, Matrix(1, 1, {1.0}));
  EXPECT_NEAR(v(0, 0), 9.0 + 2.0 + std::sqrt(0.19), 1e-12);
  EXPECT_NEAR(v(0, 0), 11.43589, 1e-5);
  EXPECT_THROW(forward_step(x, Matrix(1, 3), 0.1, 0.0, e), ShapeError);
}

TEST(ReverseStep, ZeroNoisePredictionReducesToScaling) {
  const auto s = make_schedule(10, 1e-4, 0.02, 0.0);
  std::mt19937_64 rng(1);
  const Matrix x = random_matrix(2, 3, rng), r = random_matrix(2, 3, rng);
  const Denoiser zero = [](const Matrix& a, const Matrix&, std::size_t) { return Matrix(a.rows, a.cols); };
  for (std::size_t n = 1; n <= 10; ++n) {
    const auto y = reverse_step(x, r, n, zero, s, nullptr);
    for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(y.data[k], x.data[k] / std::sqrt(1.0 - s.beta_at(n)), 1e-15);
  }
}

TEST(ReverseStep, VarianceTermOnlyAfterFirstStep) {
  const auto s = make_schedule(4, 1e-2, 0.04, 0.0);
  const Matrix x(1, 1, {0.5}), r(1, 1, {0.0}), e(1, 1, {0.0}), z(1, 1, {1.0});
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto with = reverse_step_with(x, r, n, e, s, &z, GammaMode::literal, ReverseCoefficient::ddpm);
    const auto without = reverse_step_with(x, r, n, e, s, nullptr, GammaMode::literal, ReverseCoefficient::ddpm);
    EXPECT_NEAR(with(0, 0) - without(0, 0), n > 1 ? std::sqrt(s.beta_at(n)) : 0.0, 1e-15);
  }
}

TEST(ReverseStep, OracleNoiseInvertsFirstStep) {
  // At n = 1 the default coefficient is sqrt(beta_1), so the inverse is exact.
  const auto s = make_schedule(10, 1e-4, 0.02, 0.0);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix x0 = random_matrix(3, 4, rng, -50, 50), r = random_matrix(3, 4, rng), eps = standard_normal(3, 4, rng);
    const Matrix x1 = forward_step(x0, r, 1, eps, s);
    const Denoiser exact = [&](const Matrix&, const Matrix&, std::size_t) { return eps; };
    EXPECT_LE(max_abs_diff(reverse_step(x1, r, 1, exact, s, nullptr), x0), 1e-10);
  }
}

TEST(ReverseStep, LiteralCoefficientResidualAtLaterSteps) {
  // With beta / sqrt(1 - beta) the one-step inverse leaves
  // (sqrt(beta) - beta / sqrt(1 - beta)) / sqrt(1 - beta) * eps.
  const auto s = make_schedule(10, 1e-4, 0.02, 0.0);
  std::mt19937_64 rng(3);
  for (std::size_t n = 1; n <= 10; ++n) {
    const Matrix x0 = random_matrix(2, 2, rng, -5, 5), r(2, 2), eps = standard_normal(2, 2, rng);
    const Matrix xn = forward_step(x0, r, n, eps, s);
    const double b = s.beta_at(n);
    const auto back = reverse_step_with(xn, r, n, eps, s, nullptr, GammaMode::literal, ReverseCoefficient::literal);
    const double factor = (std::sqrt(b) - b / std::sqrt(1.0 - b)) / std::sqrt(1.0 - b);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(back.data[k] - x0.data[k], factor * eps.data[k], 1e-12);
  }
}

TEST(ReverseStep, CancelModeInvertsRoadInjection) {
  const auto s = make_schedule(10, 1e-4, 0.02, 0.3);
  std::mt19937_64 rng(4);
  const Matrix x0 = random_matrix(2, 3, rng), r = random_matrix(2, 3, rng, 0, 10), eps = standard_normal(2, 3, rng);
  const Matrix x1 = forward_step(x0, r, 1, eps, s);
  const auto back = reverse_step_with(x1, r, 1, eps, s, nullptr, GammaMode::cancel, ReverseCoefficient::ddpm);
  EXPECT_LE(max_abs_diff(back, x0), 1e-12);
  const auto lit = reverse_step_with(x1, r, 1, eps, s, nullptr, GammaMode::literal, ReverseCoefficient::ddpm);
  EXPECT_GT(max_abs_diff(lit, x0), 1e-6);
}

TEST(ReverseStep, ExactNoiseGivesBayesPosteriorMean) {
  // Oracle: product of q(x_{n-1} | x0) and q(x_n | x_{n-1}) at gamma = 0.
  const auto s = make_schedule(10, 1e-4, 0.02, 0.0);
  std::mt19937_64 rng(5);
  for (std::size_t n = 2; n <= 10; ++n) {
    const Matrix x0 = random_matrix(1, 3, rng, -3, 3), r(1, 3), eps = standard_normal(1, 3, rng);
    const Matrix xn = forward_marginal(x0, r, n, eps, s);
    const auto mean = reverse_step_with(xn, r, n, eps, s, nullptr, GammaMode::literal, ReverseCoefficient::ddpm);
    const double b = s.beta_at(n), abp = s.alpha_bar_at(n - 1);
    const double prec = 1.0 / (1.0 - abp) + (1.0 - b) / b;
    for (std::size_t k = 0; k < 3; ++k) {
      const double mu = (std::sqrt(abp) * x0.data[k] / (1.0 - abp) + std::sqrt(1.0 - b) * xn.data[k] / b) / prec;
      EXPECT_NEAR(mean.data[k], mu, 1e-10);
    }
    EXPECT_NEAR(s.posterior_variance(n), 1.0 / prec, 1e-15);
  }
}

TEST(ReverseChain, OracleRoundTrip) {
  const auto s = make_schedule(10, 1e-4, 1e-3, 0.0);
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x0 = random_matrix(4, 5, rng, 10, 60), r(4, 5);
    const Matrix xn = forward_marginal(x0, r, 10, standard_normal(4, 5, rng), s);
    const auto oracle = oracle_denoiser(x0, s);
    Matrix x = xn;
    for (std::size_t n = 10; n >= 1; --n) x = reverse_step(x, r, n, oracle, s, nullptr);
    EXPECT_LE(max_abs_diff(x, x0) / max_abs(x0), 1e-2);
    EXPECT_LE(max_abs_diff(x, x0), 1e-9);
  }
}

TEST(ForwardMarginal, MonteCarloMatchesClosedForm) {
  // 10^4 iterated chains per step count; mean and variance within 3 standard errors.
  for (double kappa : {0.0, 0.5}) {
    const auto s = make_schedule(10, 1e-4, 0.02, kappa);
    const double x0 = 2.5, road = 3.0;
    const int draws = 10000;
    std::mt19937_64 rng(7);
    for (std::size_t n : {1u, 5u, 10u}) {
      double sum = 0.0, sq = 0.0;
      for (int d = 0; d < draws; ++d) {
        Matrix x(1, 1, x0);
        for (std::size_t k = 1; k <= n; ++k) x = forward_step(x, Matrix(1, 1, road), k, standard_normal(1, 1, rng), s);
        sum += x(0, 0);
        sq += x(0, 0) * x(0, 0);
      }
      const double m = sum / draws, v = (sq - draws * m * m) / (draws - 1);
      const double mean_cf = std::sqrt(s.alpha_bar_at(n)) * x0 + s.drift_at(n) * road;
      const double var_cf = 1.0 - s.alpha_bar_at(n);
      EXPECT_LE(std::abs(m - mean_cf), 3.0 * std::sqrt(var_cf / draws)) << "n=" << n;
      EXPECT_LE(std::abs(v - var_cf), 3.0 * var_cf * std::sqrt(2.0 / (draws - 1))) << "n=" << n;
    }
  }
}

TEST(Projection, FlowExample) {
  const auto net = build_lane_network(build_road_network({}, {2}));
  const auto out = constraint_project(Matrix(1, 2, {40, 50}), Matrix(1, 1, {100}), TrafficKind::flow, 0.05, net);
  EXPECT_NEAR(out(0, 0), 41.0, 1e-12);
  EXPECT_NEAR(out(0, 1), 51.0, 1e-12);
  const auto g = constraint_gradient(Matrix(1, 2, {40, 50}), Matrix(1, 1, {100}), TrafficKind::flow, net);
  EXPECT_DOUBLE_EQ(g(0, 0), -20.0);
}

TEST(Projection, SatisfiedSpeedIsUnchanged) {
  const auto net = build_lane_network(build_road_network({}, {2}));
  const Matrix lanes(1, 2, {50, 70});
  EXPECT_EQ(constraint_project(lanes, Matrix(1, 1, {60}), TrafficKind::speed, 0.5, net), lanes);
  EXPECT_EQ(constraint_loss(lanes, Matrix(1, 1, {60}), TrafficKind::speed, net), 0.0);
}

TEST(Projection, FlowConvergesGeometrically) {
  // Linear fixed point: the residual shrinks by exactly (1 - 2 eta J) per step.
  const auto net = build_lane_network(build_road_network({{0, 1}}, {3, 1}));
  const Matrix roads(1, 2, {300.0, 80.0});
  Matrix x(1, 4, {10.0, 20.0, 30.0, 5.0});
  const double eta = 0.1;  // < 1 / (2 * 3)
  Matrix res = road_residual(x, roads, TrafficKind::flow, net);
  for (int it = 0; it < 60; ++it) {
    x = constraint_project(x, roads, TrafficKind::flow, eta, net);
    const Matrix next = road_residual(x, roads, TrafficKind::flow, net);
    EXPECT_NEAR(next(0, 0), (1.0 - 2.0 * eta * 3.0) * res(0, 0), 1e-9);
    EXPECT_NEAR(next(0, 1), (1.0 - 2.0 * eta * 1.0) * res(0, 1), 1e-9);
    res = next;
  }
  EXPECT_LT(std::abs(res(0, 0)), 1e-6);
  EXPECT_LT(std::abs(res(0, 1)), 1e-3);
}

TEST(Projection, NeverIncreasesLossBelowStabilityBound) {
  std::mt19937_64 rng(8);
  const auto road = build_road_network({{0, 1}, {1, 2}}, {2, 5, 3});
  const auto net = build_lane_network(road);
  std::uniform_real_distribution<double> frac(0.01, 0.99);
  for (int trial = 0; trial < 500; ++trial) {
    const Matrix lanes = random_matrix(3, 10, rng, 0, 100), roads = random_matrix(3, 3, rng, 0, 300);
    const double eta_flow = frac(rng) / (2.0 * 5.0), eta_speed = frac(rng) * 2.0 / 2.0;
    for (auto [kind, eta] : {std::pair{TrafficKind::flow, eta_flow}, std::pair{TrafficKind::speed, eta_speed}}) {
      const double before = constraint_loss(lanes, roads, kind, net);
      const double after = constraint_loss(constraint_project(lanes, roads, kind, eta, net), roads, kind, net);
      EXPECT_LE(after, before);
    }
  }
}

TEST(Projection, KindMismatchIsContractError) {
  const auto net = build_lane_network(build_road_network({}, {2}));
  TrafficSeries lanes{Matrix(1, 2, {1, 2}), TrafficKind::speed, "", 5.0, Level::lane};
  TrafficSeries roads{Matrix(1, 1, {3}), TrafficKind::flow, "", 5.0, Level::road};
  EXPECT_THROW(constraint_project(lanes, roads, TrafficKind::speed, 0.1, net), ContractError);
  EXPECT_THROW(constraint_project(lanes, lanes, TrafficKind::flow, 0.1, net), ContractError);
}

TEST(Projection, PhysicalProjectionRoundsThroughUnits) {
  const auto net = build_lane_network(build_road_network({{0, 1}}, {2, 3}));
  std::mt19937_64 rng(9);
  PhysicalProjection p{&net, TrafficKind::flow, 0.05, random_matrix(2, 2, rng, 50, 150), {}, {}};
  for (int l = 0; l < 5; ++l) {
    p.lane_mean.push_back(20.0 + l);
    p.lane_std.push_back(3.0 + 0.5 * l);
  }
  const Matrix z = random_matrix(2, 5, rng);
  Matrix phys = z;
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t l = 0; l < 5; ++l) phys(t, l) = z(t, l) * p.lane_std[l] + p.lane_mean[l];
  const Matrix proj = constraint_project(phys, p.roads, TrafficKind::flow, 0.05, net);
  const Matrix got = p(z);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t l = 0; l < 5; ++l) EXPECT_NEAR(got(t, l) * p.lane_std[l] + p.lane_mean[l], proj(t, l), 1e-12);
}

TEST(Sample, OracleWithoutProjectionReturnsInitial) {
  const auto s = make_schedule(10, 1e-4, 0.02, 0.0);
  std::mt19937_64 rng(10);
  const Matrix initial = random_matrix(3, 4, rng, 20, 40), road(3, 4);
  const auto out = sample(initial, road, s, oracle_denoiser(initial, s), nullptr, 42);
  EXPECT_LE(max_abs_diff(out, initial), 1e-9);
}

TEST(Sample, FlowProjectionStrictlyReducesEveryResidual) {
  const auto road_net = build_road_network({{0, 1}, {1, 2}}, {2, 4, 3});
  const auto net = build_lane_network(road_net);
  const auto s = make_schedule(10, 1e-4, 0.02, 0.0);
  std::mt19937_64 rng(11);
  const Matrix initial = random_matrix(3, 9, rng, 10, 40);
  const Matrix roads = random_matrix(3, 3, rng, 100, 160);
  const double eta = default_eta(TrafficKind::flow, net);
  const auto project = [&](const Matrix& x) { return constraint_project(x, roads, TrafficKind::flow, eta, net); };
  const Matrix mapped = road_to_lane_values(roads, net, TrafficKind::flow);
  const auto out = sample(initial, mapped, s, oracle_denoiser(initial, s), project, 3);
  const Matrix before = road_residual(initial, roads, TrafficKind::flow, net);
  const Matrix after = road_residual(out, roads, TrafficKind::flow, net);
  for (std::size_t k = 0; k < before.size(); ++k) EXPECT_LT(std::abs(after.data[k]), std::abs(before.data[k]));
  // The last oracle step returns the initial estimate, so the output is one projection of it.
  EXPECT_LE(max_abs_diff(out, project(initial)), 1e-9);
}

TEST(Sample, DeterministicGivenSeed) {
  const auto s = make_schedule(10, 1e-4, 0.02, 0.1);
  NoisePredictor model(8, 4);
  ParamStore store;
  std::mt19937_64 rng(12);
  model.init_params(store, rng);
  const Matrix initial = random_matrix(2, 3, rng), road = random_matrix(2, 3, rng);
  SampleOptions opt;
  opt.stochastic_reverse = true;
  const auto a = sample(initial, road, s, model.bind(store), nullptr, 99, opt);
  const auto b = sample(initial, road, s, model.bind(store), nullptr, 99, opt);
  const auto c = sample(initial, road, s, model.bind(store), nullptr, 100, opt);
  EXPECT_EQ(a.data, b.data);
  EXPECT_NE(a.data, c.data);
  EXPECT_THROW(sample(initial, Matrix(2, 2), s, model.bind(store), nullptr, 1), ShapeError);
}

TEST(StepEmbedding, Values) {
  const auto e0 = step_embedding(0, 4);
  EXPECT_EQ(e0, (std::vector<double>{0.0, 0.0, 1.0, 1.0}));
  const auto e3 = step_embedding(3, 4);
  EXPECT_DOUBLE_EQ(e3[0], std::sin(3.0));
  EXPECT_DOUBLE_EQ(e3[1], std::sin(3.0 * 0.01));
  EXPECT_DOUBLE_EQ(e3[3], std::cos(3.0 * 0.01));
}

TEST(NoisePredictor, OutputShapeAndGradient) {
  NoisePredictor model(5, 4);
  ParamStore store;
  std::mt19937_64 rng(13);
  model.init_params(store, rng);
  const auto s = make_schedule(10, 1e-4, 0.02, 0.1);
  const Matrix x0 = random_matrix(3, 4, rng), road = random_matrix(3, 4, rng), eps = standard_normal(3, 4, rng);
  EXPECT_EQ(model.predict(store, x0, road, 3).shape(), (Shape{3, 4}));
  for (std::size_t n : {1u, 4u, 10u}) {
    const auto res = rdtest::check_gradients(store, [&] {
      const auto t = diffusion_terms(model, store, x0, road, n, eps, s);
      return t.kl ? add(t.noise_mse, *t.kl) : t.noise_mse;
    });
    EXPECT_LE(res.max_rel, 1e-4) << "n=" << n;
  }
}

TEST(DiffusionTerms, KlMatchesIndependentPosterior) {
  NoisePredictor model(6, 4);
  ParamStore store;
  std::mt19937_64 rng(14);
  model.init_params(store, rng);
  const auto s = make_schedule(10, 1e-4, 0.02, 0.2);
  const Matrix x0 = random_matrix(2, 3, rng), road = random_matrix(2, 3, rng), eps = standard_normal(2, 3, rng);
  const std::size_t n = 6;
  const auto terms = diffusion_terms(model, store, x0, road, n, eps, s);
  ASSERT_TRUE(terms.kl.has_value());
  EXPECT_FALSE(diffusion_terms(model, store, x0, road, 1, eps, s).kl.has_value());

  // Remove the road drift, then use the Bayes posterior of the plain chain.
  const Matrix xn = forward_marginal(x0, road, n, eps, s);
  const Matrix pred = model.predict(store, xn, road, n);
  const double b = s.beta_at(n), abp = s.alpha_bar_at(n - 1), ab = s.alpha_bar_at(n);
  const double prec = 1.0 / (1.0 - abp) + (1.0 - b) / b;
  double acc = 0.0, mse_acc = 0.0;
  for (std::size_t k = 0; k < x0.size(); ++k) {
    const double y = xn.data[k] - s.drift_at(n) * road.data[k];
    const double mu_q = (std::sqrt(abp) * x0.data[k] / (1.0 - abp) + std::sqrt(1.0 - b) * y / b) / prec;
    const double mu_p = (y - b / std::sqrt(1.0 - ab) * pred.data[k]) / std::sqrt(1.0 - b);
    acc += (mu_q - mu_p) * (mu_q - mu_p);
    mse_acc += (pred.data[k] - eps.data[k]) * (pred.data[k] - eps.data[k]);
  }
  EXPECT_NEAR(terms.kl->item(), 0.5 * prec * acc / static_cast<double>(x0.size()), 1e-10);
  EXPECT_NEAR(terms.noise_mse.item(), mse_acc / static_cast<double>(x0.size()), 1e-12);
}

TEST(DefaultEta, WithinStabilityBounds) {
  const auto net = build_lane_network(build_road_network({{0, 1}}, {2, 6}));
  EXPECT_LT(default_eta(TrafficKind::flow, net), 1.0 / (2.0 * 6.0));
  EXPECT_LT(default_eta(TrafficKind::speed, net), 1.0 / 2.0 + 1e-12);
}
