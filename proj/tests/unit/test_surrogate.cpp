// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "../support/oracles.hpp"
#include "moltenflow/surrogate.hpp"

using namespace moltenflow;

namespace {

Surrogate small_surrogate(std::uint64_t seed, std::size_t d = 6) {
  Rng rng(seed);
  SurrogateConfig cfg;
  cfg.hidden = 16;
  return Surrogate::init(d, cfg, rng);
}

}  // namespace

TEST(Surrogate, PredictionsRespectBoundsForHugeLatents) {
  Surrogate s = small_surrogate(1);
  Rng rng(2);
  for (double scale : {1.0, 1e2, 1e4, 1e8}) {
    for (int i = 0; i < 50; ++i) {
      toy::PropertyVector p = s.predict(Tensor::randn(Shape{6}, rng, scale));
      ASSERT_GE(p.p1, 0.0);
      ASSERT_LE(p.p1, 1.0);
      ASSERT_GE(p.p2, 1.0);
      ASSERT_LE(p.p2, 10.0);
    }
  }
  EXPECT_EQ(s.mlp.out_dim(), kNumProperties);
}

TEST(Surrogate, RejectsWrongSizeAndNonFinite) {
  Surrogate s = small_surrogate(1);
  EXPECT_THROW(s.predict(Tensor::zeros(Shape{5})), ContractViolation);
  Tensor bad = Tensor::zeros(Shape{6});
  bad[2] = std::nan("");
  EXPECT_THROW(s.predict(bad), ContractViolation);
}

TEST(Surrogate, InputGradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Surrogate s = small_surrogate(100 + trial);
    const Tensor w = Tensor::randn(Shape{2, 1}, rng);
    oracle::GraphFn f = [&](Graph& g, const std::vector<Var>& x) {
      Scope sc(g, false);
      return g.sum(g.matmul(s.forward(sc, x[0]), g.constant(w)));
    };
    EXPECT_LT(oracle::gradient_check(f, {Tensor::randn(Shape{3, 6}, rng)}), 1e-5);
  }
}

TEST(PropLoss, Examples) {
  EXPECT_DOUBLE_EQ(prop_loss({0.7, 3.0}, {0.7, 3.0}), 0.0);
  EXPECT_NEAR(prop_loss({0.7, 3.0}, {0.9, 2.0}), 0.52, 1e-12);
  Graph g;
  Var pred = g.constant(Tensor(Shape{1, 2}, std::vector<double>{0.7, 3.0}));
  EXPECT_NEAR(prop_loss(g, pred, Tensor(Shape{1, 2}, std::vector<double>{0.9, 2.0})).value().item(), 0.52, 1e-12);
}

TEST(PropLoss, SymmetricAndNonNegative) {
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    toy::PropertyVector a{rng.uniform(), 1 + 9 * rng.uniform()}, b{rng.uniform(), 1 + 9 * rng.uniform()};
    EXPECT_EQ(prop_loss(a, b), prop_loss(b, a));
    EXPECT_GE(prop_loss(a, b), 0.0);
  }
}

TEST(Fidelity, PerfectAndMeanPredictors) {
  std::vector<double> y{1.0, 2.0, 4.0, 7.0};
  EXPECT_DOUBLE_EQ(mo::regression_fidelity(y, y).r2, 1.0);
  EXPECT_DOUBLE_EQ(mo::regression_fidelity(y, y).mse, 0.0);
  std::vector<double> mean(4, 3.5);
  EXPECT_NEAR(mo::regression_fidelity(mean, y).r2, 0.0, 1e-12);
}

TEST(FitSurrogate, EmptyDatasetIsContractViolation) {
  Rng rng(5);
  SurrogateConfig cfg;
  EXPECT_THROW(fit_surrogate(Tensor::zeros(Shape{0, 4}), {}, Tensor::zeros(Shape{1, 4}), {{0.5, 2.0}}, cfg, rng),
               ContractViolation);
}

TEST(FitSurrogate, LearnsSmoothTargetAndReportIsPure) {
  // Properties given by a fixed smooth function of a 4-d latent.
  Rng rng(6);
  auto truth = [](const Tensor& z, std::size_t i) {
    toy::PropertyVector p;
    p.p1 = 1.0 / (1.0 + std::exp(-(z(i, 0) - 0.5 * z(i, 1))));
    p.p2 = 1.0 + 9.0 / (1.0 + std::exp(-(z(i, 2) * z(i, 3))));
    return p;
  };
  Tensor zt = Tensor::randn(Shape{400, 4}, rng), zh = Tensor::randn(Shape{100, 4}, rng);
  std::vector<toy::PropertyVector> yt, yh;
  for (std::size_t i = 0; i < 400; ++i) yt.push_back(truth(zt, i));
  for (std::size_t i = 0; i < 100; ++i) yh.push_back(truth(zh, i));
  SurrogateConfig cfg;
  cfg.hidden = 32;
  cfg.epochs = 40;
  SurrogateFit fit = fit_surrogate(zt, yt, zh, yh, cfg, rng);
  EXPECT_GT(fit.heldout[0].r2, 0.8);
  EXPECT_GT(fit.heldout[1].r2, 0.5);
  EXPECT_GE(fit.best_epoch, 1u);
  auto again = surrogate_fidelity(fit.model, zh, yh);
  EXPECT_EQ(again[0].mse, fit.heldout[0].mse);
  EXPECT_EQ(again[1].r2, fit.heldout[1].r2);
}

TEST(FitSurrogate, CheckpointRoundTrip) {
  Surrogate s = small_surrogate(7);
  Checkpoint ck;
  surrogate_to_checkpoint(ck, s);
  Surrogate back = surrogate_from_checkpoint(deserialize_checkpoint(serialize_checkpoint(ck)));
  Rng rng(8);
  Tensor z = Tensor::randn(Shape{6}, rng);
  EXPECT_EQ(back.predict(z), s.predict(z));
}
