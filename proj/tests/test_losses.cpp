#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "roaddiff/errors.hpp"
#include "roaddiff/losses.hpp"
#include "test_util.hpp"

using namespace roaddiff;
using rdtest::random_matrix;

namespace {
LaneNetwork single_road(std::size_t lanes) { return build_lane_network(build_road_network({}, {static_cast<long long>(lanes)})); }
}  // namespace

TEST(ConstraintLoss, Examples) {
  const auto net = single_road(2);
  EXPECT_EQ(constraint_loss(Matrix(1, 2, {50, 70}), Matrix(1, 1, {60}), TrafficKind::speed, net), 0.0);
  EXPECT_DOUBLE_EQ(constraint_loss(Matrix(1, 2, {40, 50}), Matrix(1, 1, {100}), TrafficKind::flow, net), 100.0);

  const auto two = build_lane_network(build_road_network({{0, 1}}, {2, 3}));
  EXPECT_EQ(constraint_loss(Matrix(1, 5, {1, 2, 3, 3, 3}), Matrix(1, 2, {3, 9}), TrafficKind::flow, two), 0.0);
  // Additive over roads: each road's squared residual.
  EXPECT_DOUBLE_EQ(constraint_loss(Matrix(1, 5, {1, 2, 3, 3, 3}), Matrix(1, 2, {5, 6}), TrafficKind::flow, two),
                   4.0 + 9.0);
}

TEST(ConstraintLoss, KindMismatchAndShapes) {
  const auto net = single_road(2);
  TrafficSeries lanes{Matrix(1, 2, {1, 2}), TrafficKind::flow, "", 5.0, Level::lane};
  TrafficSeries roads{Matrix(1, 1, {3}), TrafficKind::flow, "", 5.0, Level::road};
  EXPECT_EQ(constraint_loss(lanes, roads, TrafficKind::flow, net), 0.0);
  EXPECT_THROW(constraint_loss(lanes, roads, TrafficKind::speed, net), ContractError);
  EXPECT_THROW(constraint_loss(Matrix(2, 2), Matrix(1, 1), TrafficKind::flow, net), ShapeError);
  EXPECT_THROW(constraint_loss(Matrix(1, 3), Matrix(1, 1), TrafficKind::flow, net), ShapeError);
}

TEST(ConstraintLoss, ZeroExactlyWhenConstraintsHold) {
  // Exhaustive over small integer lane states of a 2-road network.
  const auto net = build_lane_network(build_road_network({{0, 1}}, {2, 1}));
  for (auto kind : {TrafficKind::speed, TrafficKind::flow}) {
    for (int road0 = 0; road0 <= 6; ++road0)
      for (int a = 0; a <= 6; ++a)
        for (int b = 0; b <= 6; ++b)
          for (int c = 0; c <= 3; ++c) {
            const Matrix lanes(1, 3, {double(a), double(b), double(c)});
            const Matrix roads(1, 2, {double(road0), 2.0});
            const double agg0 = kind == TrafficKind::flow ? a + b : (a + b) / 2.0;
            const bool holds = agg0 == road0 && c == 2;
            EXPECT_EQ(constraint_loss(lanes, roads, kind, net) == 0.0, holds);
          }
  }
}

TEST(ConstraintLoss, InvariantUnderLanePermutationWithinRoad) {
  std::mt19937_64 rng(1);
  const auto net = build_lane_network(build_road_network({{0, 1}}, {4, 3}));
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix lanes = random_matrix(3, 7, rng, 0, 50), roads = random_matrix(3, 2, rng, 0, 100);
    std::vector<std::size_t> perm{0, 1, 2, 3};
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix shuffled = lanes;
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t j = 0; j < 4; ++j) shuffled(t, j) = lanes(t, perm[j]);
    for (auto kind : {TrafficKind::speed, TrafficKind::flow})
      EXPECT_NEAR(constraint_loss(lanes, roads, kind, net), constraint_loss(shuffled, roads, kind, net), 1e-9);
  }
}

TEST(ConstraintLoss, TensorFormMatchesScalarAndGradient) {
  std::mt19937_64 rng(2);
  const auto net = build_lane_network(build_road_network({{0, 1}, {1, 2}}, {2, 3, 1}));
  for (auto kind : {TrafficKind::speed, TrafficKind::flow}) {
    const Matrix lanes = random_matrix(4, 6, rng, 0, 60), roads = random_matrix(4, 3, rng, 0, 90);
    const auto agg = aggregation_matrix(net, kind);
    const auto t = constraint_loss_tensor(Tensor::constant(lanes), roads, agg);
    EXPECT_NEAR(t.item(), constraint_loss(lanes, roads, kind, net) / 4.0, 1e-9);

    ParamStore store;
    store.add("x", lanes);
    const auto res = rdtest::check_gradients(store, [&] { return constraint_loss_tensor(store.get("x"), roads, agg); });
    EXPECT_LE(res.max_rel, 1e-6);
    // Analytic per-lane gradient of the summed loss equals 4x the tensor-form gradient.
    const auto g = constraint_gradient(lanes, roads, kind, net);
    const auto tg = store.get("x").grad();
    for (std::size_t k = 0; k < g.size(); ++k) EXPECT_NEAR(g.data[k], 4.0 * tg[k], 1e-9);
  }
}

TEST(ReconLoss, Examples) {
  const auto a = Tensor::constant(Matrix(1, 2, {1, 1}));
  EXPECT_EQ(recon_loss(a, a).item(), 0.0);
  EXPECT_DOUBLE_EQ(recon_loss(a, Tensor::constant(Matrix(1, 2))).item(), 1.0);
  EXPECT_THROW(recon_loss(a, Tensor::constant(Matrix(2, 1))), ShapeError);
}

TEST(ReconLoss, GradientIsTwiceDifferenceOverCount) {
  std::mt19937_64 rng(3);
  const Matrix truth = random_matrix(3, 4, rng);
  ParamStore store;
  Tensor& pred = store.add("p", random_matrix(3, 4, rng));
  const auto res = rdtest::check_gradients(store, [&] { return recon_loss(Tensor::constant(truth), store.get("p")); });
  EXPECT_LE(res.max_rel, 1e-7);
  const auto g = pred.grad();
  for (std::size_t k = 0; k < truth.size(); ++k)
    EXPECT_NEAR(g[k], 2.0 * (pred.values()[k] - truth.data[k]) / 12.0, 1e-14);
}

TEST(KlLoss, Examples) {
  const auto mu = Tensor::constant(Matrix(1, 3, {0.2, -1.0, 4.0}));
  EXPECT_EQ(gaussian_kl_shared(mu, mu, 0.3).item(), 0.0);
  const double delta = 0.7, var = 0.04;
  const auto kl = gaussian_kl_shared(Tensor::constant(Matrix(1, 1, {1.0})), Tensor::constant(Matrix(1, 1, {1.0 + delta})), var);
  EXPECT_NEAR(kl.item(), delta * delta / (2.0 * var), 1e-12);
  // Agrees with the general closed form at equal variances.
  EXPECT_NEAR(kl.item(), gaussian_kl(1.0, var, 1.0 + delta, var), 1e-12);
  EXPECT_THROW(gaussian_kl_shared(mu, mu, 0.0), ContractError);
  EXPECT_THROW(gaussian_kl(0, -1, 0, 1), ContractError);
}

TEST(KlLoss, NonNegativeOnRandomDraws) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> m(-5, 5), v(1e-3, 4);
  for (int k = 0; k < 1000; ++k) {
    EXPECT_GE(gaussian_kl(m(rng), v(rng), m(rng), v(rng)), 0.0);
    const double var = v(rng);
    EXPECT_GE(gaussian_kl_shared(Tensor::constant(random_matrix(2, 2, rng)), Tensor::constant(random_matrix(2, 2, rng)), var)
                  .item(),
              0.0);
  }
}

TEST(KlLoss, GradientMatchesFiniteDifference) {
  std::mt19937_64 rng(5);
  const Matrix q = random_matrix(2, 3, rng);
  ParamStore store;
  store.add("p", random_matrix(2, 3, rng));
  const auto res = rdtest::check_gradients(store, [&] { return gaussian_kl_shared(Tensor::constant(q), store.get("p"), 0.02); });
  EXPECT_LE(res.max_rel, 1e-6);
}

TEST(TotalLoss, Examples) {
  EXPECT_DOUBLE_EQ(total_loss(1, 2, 3, 0.0).total, 3.0);
  EXPECT_DOUBLE_EQ(total_loss(1, 2, 3, 1.0).total, 6.0);
  EXPECT_DOUBLE_EQ(total_loss(1, 2, 3, 0.5).total, 4.5);
  const auto b = total_loss(0.25, 1.5, 7.0, 0.3);
  EXPECT_EQ(b.total, b.l_kl + b.l_recon + b.lambda * b.l_con);
  EXPECT_THROW(total_loss(NAN, 0, 0, 1), DivergenceError);
  EXPECT_THROW(total_loss(0, INFINITY, 0, 1), DivergenceError);
}

TEST(Evaluate, Examples) {
  const Matrix a(2, 2, {1, 2, 3, 4});
  const auto same = evaluate(a, a);
  EXPECT_EQ(same.mae, 0.0);
  EXPECT_EQ(same.rmse, 0.0);
  EXPECT_EQ(same.mape, 0.0);

  const auto one = evaluate(Matrix(1, 1, {3}), Matrix(1, 1, {1}));
  EXPECT_DOUBLE_EQ(one.mae, 2.0);
  EXPECT_DOUBLE_EQ(one.rmse, 2.0);
  EXPECT_DOUBLE_EQ(*one.mape, 200.0);

  const auto two = evaluate(Matrix(1, 2, {1, 2}), Matrix(1, 2, {1, 4}));
  EXPECT_DOUBLE_EQ(two.mae, 1.0);
  EXPECT_NEAR(two.rmse, 1.41421, 1e-5);
  EXPECT_DOUBLE_EQ(two.rmse, std::sqrt(2.0));
  EXPECT_DOUBLE_EQ(*two.mape, 25.0);
}

TEST(Evaluate, MapeMaskingAndUndefined) {
  const auto r = evaluate(Matrix(1, 3, {5, 1, 2}), Matrix(1, 3, {0, 2, 1e-4}));
  EXPECT_EQ(r.mape_masked, 2u);
  EXPECT_EQ(r.mape_used, 1u);
  EXPECT_DOUBLE_EQ(*r.mape, 50.0);
  const auto all = evaluate(Matrix(1, 2, {1, 1}), Matrix(1, 2, {0, 0}));
  EXPECT_FALSE(all.mape.has_value());
  EXPECT_DOUBLE_EQ(all.mae, 1.0);
  EXPECT_THROW(evaluate(Matrix(1, 2), Matrix(2, 1)), ShapeError);
  EXPECT_THROW(evaluate(Matrix(0, 0), Matrix(0, 0)), ShapeError);
}

TEST(Evaluate, RmseAtLeastMaeAndCountsAddUp) {
  std::mt19937_64 rng(6);
  std::bernoulli_distribution zero(0.2);
  for (int k = 0; k < 500; ++k) {
    Matrix truth = random_matrix(3, 5, rng, 0, 80);
    for (auto& v : truth.data)
      if (zero(rng)) v = 0.0;
    const Matrix pred = random_matrix(3, 5, rng, 0, 80);
    const auto r = evaluate(pred, truth);
    EXPECT_GE(r.rmse, r.mae - 1e-12);
    EXPECT_EQ(r.mape_masked + r.mape_used, 15u);
    // Independent oracle for the three metrics.
    double abs = 0, sq = 0, pct = 0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < 15; ++i) {
      const double e = pred.data[i] - truth.data[i];
      abs += std::abs(e);
      sq += e * e;
      if (std::abs(truth.data[i]) >= 1e-3) {
        pct += std::abs(e) / std::abs(truth.data[i]);
        ++used;
      }
    }
    EXPECT_NEAR(r.mae, abs / 15, 1e-12);
    EXPECT_NEAR(r.rmse, std::sqrt(sq / 15), 1e-12);
    if (used) {
      EXPECT_NEAR(*r.mape, 100 * pct / used, 1e-9);
    }
  }
}

TEST(Evaluate, JsonRoundTrip) {
  auto r = evaluate(Matrix(1, 2, {1, 2}), Matrix(1, 2, {1, 4}));
  r.horizons.push_back({3, 0.5, 0.7, std::nullopt});
  r.constraint_loss = 0.0;
  const auto back = eval_report_from_json(to_json(r));
  EXPECT_EQ(back.mae, r.mae);
  EXPECT_EQ(back.rmse, r.rmse);
  EXPECT_EQ(back.mape, r.mape);
  ASSERT_EQ(back.horizons.size(), 1u);
  EXPECT_FALSE(back.horizons[0].mape.has_value());
  EXPECT_EQ(back.constraint_loss, 0.0);
}
