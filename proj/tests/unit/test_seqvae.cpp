// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "../support/oracles.hpp"
#include "moltenflow/seqvae.hpp"

using namespace moltenflow;

namespace {

VaeConfig tiny_config() {
  VaeConfig c;
  c.K = 2;
  c.d = 3;
  c.embed = 5;
  c.hidden = 6;
  c.max_len = 12;
  return c;
}

std::vector<toy::TokenString> few_strings() {
  return {toy::parse_tokens("CC(N)O"), toy::parse_tokens("C"), {}, toy::parse_tokens("Ca1CNb")};
}

std::vector<toy::Record> records(std::uint64_t seed, std::size_t n) {
  return toy::generate_dataset(seed, n).records;
}

}  // namespace

TEST(SeqVae, EncodeIsDeterministicWithConfiguredShapes) {
  Rng rng(1);
  SeqVae vae = SeqVae::init(VaeConfig{}, rng);
  auto x = toy::parse_tokens("CC(N)Oab");
  PosteriorParams a = vae.encode(x), b = vae.encode(x);
  EXPECT_EQ(a.mu, b.mu);
  EXPECT_EQ(a.log_sigma, b.log_sigma);
  EXPECT_EQ(a.mu.shape(), Shape({4, 16}));
  EXPECT_EQ(a.log_sigma.shape(), Shape({4, 16}));
  for (double v : a.log_sigma.data()) {
    EXPECT_GE(v, kLogSigmaMin);
    EXPECT_LE(v, kLogSigmaMax);
  }
}

TEST(SeqVae, BatchedEncodingMatchesSingleEncoding) {
  Rng rng(2);
  SeqVae vae = SeqVae::init(tiny_config(), rng);
  auto xs = few_strings();
  auto batch = vae.encode(xs);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    PosteriorParams one = vae.encode(xs[i]);
    for (std::size_t j = 0; j < one.mu.size(); ++j) EXPECT_NEAR(batch[i].mu[j], one.mu[j], 1e-12);
  }
}

TEST(SeqVae, RejectsUnknownTokensAndOverlongInput) {
  Rng rng(3);
  SeqVae vae = SeqVae::init(tiny_config(), rng);
  EXPECT_THROW(vae.encode(toy::TokenString{3, 77}), ContractViolation);
  EXPECT_THROW(vae.encode(toy::TokenString(13, 3)), ContractViolation);
}

TEST(SeqVae, ConfigValidation) {
  VaeConfig c;
  c.beta_max = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = VaeConfig{};
  c.warmup_frac = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = VaeConfig{};
  c.lambda = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = VaeConfig{};
  c.pooling = "max";
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Reparameterize, ZeroNoiseGivesMean) {
  Rng rng(4);
  PosteriorParams p{Tensor::randn(Shape{4, 16}, rng), Tensor::randn(Shape{4, 16}, rng)};
  LatentState s = reparameterize(p, Tensor::zeros(Shape{4, 16}));
  EXPECT_EQ(s.z, p.mu);
  EXPECT_EQ(s.t, 1.0);
}

TEST(Reparameterize, SameSeedSameSample) {
  Rng r0(5);
  PosteriorParams p{Tensor::randn(Shape{2, 3}, r0), Tensor::randn(Shape{2, 3}, r0)};
  Rng a(9), b(9);
  EXPECT_EQ(reparameterize(p, a).z, reparameterize(p, b).z);
}

TEST(Reparameterize, MonteCarloMeanMatchesMu) {
  Rng rng(6);
  PosteriorParams p{Tensor::randn(Shape{2, 3}, rng), Tensor::randn(Shape{2, 3}, rng, 0.5)};
  const std::size_t n = 100000;
  Tensor sum = Tensor::zeros(Shape{2, 3});
  for (std::size_t i = 0; i < n; ++i) sum += reparameterize(p, rng).z;
  for (std::size_t j = 0; j < sum.size(); ++j) {
    const double sigma = std::exp(p.log_sigma[j]);
    EXPECT_NEAR(sum[j] / n, p.mu[j], 4.0 * sigma / std::sqrt(static_cast<double>(n)));
  }
}

TEST(Reparameterize, GradientReachesMuAndLogSigma) {
  Rng rng(7);
  const Tensor eps = Tensor::randn(Shape{2, 3}, rng);
  oracle::GraphFn f = [&](Graph& g, const std::vector<Var>& x) {
    Var z = g.add(x[0], g.mul(g.exp(x[1]), g.constant(eps)));
    return g.sum(g.square(z));
  };
  EXPECT_LT(oracle::gradient_check(f, {Tensor::randn(Shape{2, 3}, rng), Tensor::randn(Shape{2, 3}, rng, 0.3)}), 1e-6);
}

TEST(LatentState, PooledIsMeanOverTokens) {
  LatentState s{Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3, 6}), 0.5};
  EXPECT_EQ(s.pooled(), Tensor(Shape{2}, std::vector<double>{2, 4}));
  s.z(0, 0) = 5;
  EXPECT_EQ(s.pooled()[0], 4.0);
  Tensor rows = pool_rows(flatten_latent(s.z), 2);
  EXPECT_EQ(rows.reshaped(Shape{2}), s.pooled());
}

TEST(Kl, ClosedFormCases) {
  EXPECT_EQ(kl_standard_normal(Tensor::zeros(Shape{4, 16}), Tensor::zeros(Shape{4, 16})), 0.0);
  const std::size_t d = 10;
  EXPECT_NEAR(kl_standard_normal(Tensor(Shape{d}, 1.0), Tensor::zeros(Shape{d})), d * 0.5, 1e-12);
  Rng rng(8);
  for (int i = 0; i < 100; ++i) {
    Tensor mu = Tensor::randn(Shape{6}, rng), ls = Tensor::randn(Shape{6}, rng);
    EXPECT_GT(kl_standard_normal(mu, ls), 0.0);
    Graph g;
    EXPECT_NEAR(kl_standard_normal(g, g.constant(mu), g.constant(ls)).value().item(), kl_standard_normal(mu, ls),
                1e-12);
  }
}

TEST(Kl, WarmupSchedule) {
  VaeConfig c;
  EXPECT_EQ(kl_weight(c, 0, 1000), 0.0);
  EXPECT_NEAR(kl_weight(c, 175, 1000), 0.05, 1e-15);
  EXPECT_DOUBLE_EQ(kl_weight(c, 350, 1000), 0.1);
  EXPECT_DOUBLE_EQ(kl_weight(c, 999, 1000), 0.1);
  c.warmup_frac = 0.0;
  EXPECT_EQ(kl_weight(c, 0, 1000), c.beta_max);
}

TEST(SeqVae, ReconstructionGradientMatchesFiniteDifferences) {
  Rng rng(9);
  SeqVae vae = SeqVae::init(tiny_config(), rng);
  auto xs = few_strings();
  // Gradient with respect to the latent and to one decoder and one encoder weight.
  oracle::GraphFn dec = [&](Graph& g, const std::vector<Var>& x) {
    Scope s(g, false);
    return vae.reconstruction(s, x[0], xs);
  };
  EXPECT_LT(oracle::gradient_check(dec, {Tensor::randn(Shape{4, 6}, rng)}), 1e-6);

  auto params = vae.parameters();
  for (std::size_t k : {std::size_t{1}, std::size_t{8}, params.size() - 3}) {
    SeqVae copy = vae;
    Tensor* target = copy.parameters()[k];
    oracle::GraphFn f = [&](Graph& g, const std::vector<Var>& x) {
      *target = x[0].value();
      Scope s(g, false);
      auto e = copy.encode(s, xs);
      Var z = g.reshape(e.mu, Shape{xs.size(), copy.cfg.latent_size()});
      return g.add(copy.reconstruction(s, z, xs), kl_standard_normal(g, e.mu, e.log_sigma));
    };
    // Checked numerically against analytic gradients collected through Scope.
    const Tensor base = *target;
    Graph g;
    Scope s(g, true);
    auto e = copy.encode(s, xs);
    Var z = g.reshape(e.mu, Shape{xs.size(), copy.cfg.latent_size()});
    auto gr = g.backward(g.add(copy.reconstruction(s, z, xs), kl_standard_normal(g, e.mu, e.log_sigma)));
    Tensor analytic = s.collect(gr, {target})[0];
    auto fd = oracle::central_differences(f, {base});
    *target = base;
    EXPECT_LT(oracle::relative_error({analytic}, fd), 1e-6) << "parameter " << k;
  }
}

TEST(SeqVae, DecodeGreedyDeterministicAndBounded) {
  Rng rng(10);
  VaeConfig c = tiny_config();
  SeqVae vae = SeqVae::init(c, rng);
  for (int i = 0; i < 20; ++i) {
    LatentState z{Tensor::randn(Shape{c.K, c.d}, rng, 3.0), 1.0};
    auto a = vae.decode_greedy(z), b = vae.decode_greedy(z);
    EXPECT_EQ(a, b);
    EXPECT_LE(a.size(), c.max_len);
    for (auto t : a) EXPECT_GT(t, toy::kEos);
  }
  EXPECT_THROW(vae.decode_greedy(LatentState{Tensor::zeros(Shape{3, 3}), 1.0}), ContractViolation);
}

TEST(SeqVae, LambdaZeroEncoderGradientsUnaffectedBySurrogate) {
  Rng rng(11);
  VaeConfig c = tiny_config();
  c.max_len = 48;
  SeqVae vae = SeqVae::init(c, rng);
  SurrogateConfig sc;
  sc.hidden = 8;
  Surrogate sur = Surrogate::init(c.d, sc, rng);
  auto batch = records(3, 8);
  Rng r1(5), r2(5);
  FinetuneStep with = joint_finetune_gradients(vae, sur, batch, 0.1, 0.0, r1);
  Graph g;
  Scope s(g, true);
  VaeLossTerms plain = vae_loss(s, vae, nullptr, batch, 0.1, 0.0, true, r2);
  auto gr = g.backward(plain.total);
  GradMap pure = s.collect(gr, vae.parameters());
  ASSERT_EQ(pure.size(), with.vae_grads.size());
  for (std::size_t k = 0; k < pure.size(); ++k) EXPECT_EQ(pure[k], with.vae_grads[k]) << k;
  EXPECT_EQ(plain.total.value().item(), with.total);
}

TEST(SeqVae, PropertyLossReachesEncoder) {
  Rng rng(12);
  VaeConfig c = tiny_config();
  c.max_len = 48;
  SeqVae vae = SeqVae::init(c, rng);
  SurrogateConfig sc;
  sc.hidden = 8;
  Surrogate sur = Surrogate::init(c.d, sc, rng);
  auto batch = records(3, 8);
  Rng r1(5), r2(5);
  FinetuneStep a = joint_finetune_gradients(vae, sur, batch, 0.1, 0.0, r1);
  FinetuneStep b = joint_finetune_gradients(vae, sur, batch, 0.1, 1.0, r2);
  auto enc = vae.encoder_parameters();
  double diff = 0.0;
  for (std::size_t k = 0; k < enc.size(); ++k) diff += (a.vae_grads[k] - b.vae_grads[k]).squared_norm();
  EXPECT_GT(diff, 0.0);
  double sur_norm = 0.0;
  for (const auto& t : b.surrogate_grads) sur_norm += t.squared_norm();
  EXPECT_GT(sur_norm, 0.0);
}

TEST(SeqVae, TrainingReducesValidationLossAndBeatsChanceReconstruction) {
  toy::Dataset ds = toy::generate_dataset(21, 500);
  auto train = ds.subset(toy::Split::Train);
  auto val = ds.subset(toy::Split::Validation);
  VaeConfig c;
  c.K = 2;
  c.d = 8;
  c.embed = 16;
  c.hidden = 32;
  c.epochs = 6;
  Rng rng(13);
  SeqVae vae = SeqVae::init(c, rng);
  VaeTrainLog log = train_vae(vae, nullptr, train, val, rng);
  ASSERT_EQ(log.epochs.size(), 6u);
  EXPECT_LT(log.epochs.back().val_loss, log.epochs.front().val_loss);
  EXPECT_EQ(log.best_val, std::min_element(log.epochs.begin(), log.epochs.end(), [](auto& a, auto& b) {
                            return a.val_loss < b.val_loss;
                          })->val_loss);
  // Chance level: uniform guessing over the emit-able vocabulary.
  const double chance = 1.0 / static_cast<double>(toy::kVocabSize - toy::kEos);
  EXPECT_GT(reconstruction_accuracy(vae, train), chance);
}

TEST(SeqVae, TrainingIsDeterministic) {
  toy::Dataset ds = toy::generate_dataset(22, 120);
  auto train = ds.subset(toy::Split::Train);
  auto val = ds.subset(toy::Split::Validation);
  VaeConfig c = tiny_config();
  c.max_len = 48;
  c.epochs = 2;
  auto run = [&] {
    Rng rng(14);
    SeqVae vae = SeqVae::init(c, rng);
    train_vae(vae, nullptr, train, val, rng);
    return serialize_checkpoint(vae_checkpoint(vae, "pretrain", 14, 0));
  };
  EXPECT_EQ(run(), run());
}

TEST(SeqVae, CheckpointRoundTripAndKindCheck) {
  Rng rng(15);
  SeqVae vae = SeqVae::init(tiny_config(), rng);
  Checkpoint ck = vae_checkpoint(vae, "pretrain", 15, 3);
  SeqVae back = vae_from_checkpoint(deserialize_checkpoint(serialize_checkpoint(ck)));
  auto x = toy::parse_tokens("CNO(C)");
  EXPECT_EQ(back.encode(x).mu, vae.encode(x).mu);
  Checkpoint wrong = ck;
  wrong.meta["vocab_hash"] = 1;
  EXPECT_THROW(vae_from_checkpoint(wrong), IoError);
  wrong = ck;
  wrong.meta["model_kind"] = "flow";
  EXPECT_THROW(vae_from_checkpoint(wrong), IoError);
}
