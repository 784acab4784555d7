// SPDX-License-Identifier: Apache-2.0
//
// Sequence VAE over toy token strings.
//
// Encoder: token embedding -> single-layer GRU -> masked attention pooling
// with K learned queries -> per-slot embedding -> tanh -> (mu, log_sigma),
// each K x d. log_sigma is clamped to [-8, 4].
// Decoder: single-layer GRU whose initial state is tanh(z W_h + b_h) and
// whose input projection receives z W_in + b_in at every step, z being the
// flattened K*d latent. Trained with teacher forcing; decoding is greedy.
// Prior: standard normal over all K*d entries.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "moltenflow/model_io.hpp"
#include "moltenflow/optim.hpp"
#include "moltenflow/surrogate.hpp"
#include "moltenflow/toyset.hpp"

namespace moltenflow {

inline constexpr double kLogSigmaMin = -8.0;
inline constexpr double kLogSigmaMax = 4.0;

struct VaeConfig {
  std::size_t K = 4;
  std::size_t d = 16;
  std::size_t embed = 32;
  std::size_t hidden = 64;
  std::size_t max_len = 48;  // tokens, excluding the terminating EOS
  std::string pooling = "attention";  // or "mean"
  double beta_max = 0.1;
  double warmup_frac = 0.35;
  double lambda = 1.0;
  double lr = 2e-3;
  double finetune_lr = 1e-3;
  double weight_decay = 0.0;
  double grad_clip = 5.0;
  std::size_t batch = 32;
  std::size_t finetune_batch = 32;
  std::size_t epochs = 20;
  std::size_t finetune_epochs = 8;

  void validate() const {
    if (K == 0 || d == 0 || embed == 0 || hidden == 0) throw ConfigError("vae: sizes must be positive");
    if (max_len == 0 || max_len >= toy::kMaxLen) throw ConfigError("vae: max_len must be in [1, 63]");
    if (pooling != "attention" && pooling != "mean") throw ConfigError("vae: pooling must be attention or mean");
    if (!(beta_max >= 0.0)) throw ConfigError("vae: beta_max must be >= 0");
    if (!(warmup_frac >= 0.0 && warmup_frac <= 1.0)) throw ConfigError("vae: warmup fraction must be in [0,1]");
    if (!(lambda >= 0.0)) throw ConfigError("vae: lambda must be >= 0");
    if (!(lr > 0.0) || !(finetune_lr > 0.0)) throw ConfigError("vae: learning rates must be positive");
    if (batch == 0 || finetune_batch == 0) throw ConfigError("vae: batch sizes must be positive");
  }

  std::size_t latent_size() const { return K * d; }
};

/// β at optimizer step `step` of `total`: linear from 0 to β_max over the
/// first warmup_frac of training, then constant.
inline double kl_weight(const VaeConfig& cfg, std::size_t step, std::size_t total) {
  const double warm = cfg.warmup_frac * static_cast<double>(total);
  if (warm <= 0.0) return cfg.beta_max;
  return cfg.beta_max * std::min(1.0, static_cast<double>(step) / warm);
}

struct PosteriorParams {
  Tensor mu;         // [K, d]
  Tensor log_sigma;  // [K, d]
};

/// z is K x d; the pooled vector is always recomputed from z.
struct LatentState {
  Tensor z;
  double t = 1.0;

  Tensor pooled() const {
    const std::size_t k = z.rows(), d = z.cols();
    Tensor out(Shape{d});
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < d; ++j) out[j] += z(i, j) / static_cast<double>(k);
    return out;
  }
};

/// Rows of a [B, K*d] latent batch pooled to [B, d].
inline Tensor pool_rows(const Tensor& zflat, std::size_t K) {
  require(zflat.cols() % K == 0, "pool_rows: width not divisible by K");
  const std::size_t d = zflat.cols() / K;
  Tensor out(Shape{zflat.rows(), d});
  for (std::size_t b = 0; b < zflat.rows(); ++b)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t j = 0; j < d; ++j) out(b, j) += zflat(b, k * d + j) / static_cast<double>(K);
  return out;
}

/// Differentiable mean pooling: [B, K*d] -> [B, d].
inline Var pool_rows(Graph& g, Var zflat, std::size_t K) {
  const std::size_t b = zflat.value().rows(), d = zflat.value().cols() / K;
  return g.group_mean(g.reshape(zflat, Shape{b * K, d}), K);
}

inline Tensor flatten_latent(const Tensor& z) { return z.reshaped(Shape{1, z.size()}); }

/// Closed-form KL(N(mu, e^{2 ls}) || N(0, I)) summed over entries.
inline double kl_standard_normal(const Tensor& mu, const Tensor& log_sigma) {
  double kl = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i)
    kl += 0.5 * (mu[i] * mu[i] + std::exp(2.0 * log_sigma[i]) - 1.0 - 2.0 * log_sigma[i]);
  return kl;
}

inline Var kl_standard_normal(Graph& g, Var mu, Var log_sigma) {
  Var e = g.exp(g.scale(log_sigma, 2.0));
  Var terms = g.sub(g.add(g.square(mu), e), g.add_scalar(g.scale(log_sigma, 2.0), 1.0));
  return g.scale(g.sum(terms), 0.5);
}

inline LatentState reparameterize(const PosteriorParams& p, const Tensor& eps) {
  require(eps.shape() == p.mu.shape(), "reparameterize: noise shape mismatch");
  LatentState s{p.mu, 1.0};
  for (std::size_t i = 0; i < s.z.size(); ++i) s.z[i] += std::exp(p.log_sigma[i]) * eps[i];
  return s;
}

inline LatentState reparameterize(const PosteriorParams& p, Rng& rng) {
  return reparameterize(p, Tensor::randn(p.mu.shape(), rng));
}

inline std::uint64_t vocabulary_hash() {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : toy::kSymbols) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct GruParams {
  Tensor wx, bx, uh, bh;  // [in, 3H], [3H], [H, 3H], [3H]

  static GruParams init(std::size_t in, std::size_t h, Rng& rng) {
    return {Tensor::randn(Shape{in, 3 * h}, rng, 1.0 / std::sqrt(static_cast<double>(in))),
            Tensor::zeros(Shape{3 * h}),
            Tensor::randn(Shape{h, 3 * h}, rng, 1.0 / std::sqrt(static_cast<double>(h))),
            Tensor::zeros(Shape{3 * h})};
  }
  template <class F>
  void visit(const std::string& p, F&& f) {
    f(p + ".wx", wx);
    f(p + ".bx", bx);
    f(p + ".uh", uh);
    f(p + ".bh", bh);
  }
};

class SeqVae {
 public:
  VaeConfig cfg;
  // encoder
  Tensor enc_embed;
  GruParams enc_gru;
  Tensor att_w, att_b, slots, mu_w, mu_b, ls_w, ls_b;
  // decoder
  Tensor dec_embed;
  GruParams dec_gru;
  Tensor h0_w, h0_b, zin_w, zin_b, out_w, out_b;

  static SeqVae init(const VaeConfig& cfg, Rng& rng) {
    cfg.validate();
    SeqVae m;
    m.cfg = cfg;
    const std::size_t V = toy::kVocabSize, E = cfg.embed, H = cfg.hidden, K = cfg.K, d = cfg.d;
    const double sh = 1.0 / std::sqrt(static_cast<double>(H));
    const double sz = 1.0 / std::sqrt(static_cast<double>(K * d));
    m.enc_embed = Tensor::randn(Shape{V, E}, rng, 0.5);
    m.enc_gru = GruParams::init(E, H, rng);
    m.att_w = Tensor::randn(Shape{H, K}, rng, sh);
    m.att_b = Tensor::zeros(Shape{K});
    m.slots = Tensor::randn(Shape{K, H}, rng, 0.5);
    m.mu_w = Tensor::randn(Shape{H, d}, rng, sh);
    m.mu_b = Tensor::zeros(Shape{d});
    m.ls_w = Tensor::randn(Shape{H, d}, rng, 0.1 * sh);
    m.ls_b = Tensor(Shape{d}, -1.0);
    m.dec_embed = Tensor::randn(Shape{V, E}, rng, 0.5);
    m.dec_gru = GruParams::init(E, H, rng);
    m.h0_w = Tensor::randn(Shape{K * d, H}, rng, sz);
    m.h0_b = Tensor::zeros(Shape{H});
    m.zin_w = Tensor::randn(Shape{K * d, 3 * H}, rng, sz);
    m.zin_b = Tensor::zeros(Shape{3 * H});
    m.out_w = Tensor::randn(Shape{H, V}, rng, sh);
    m.out_b = Tensor::zeros(Shape{V});
    return m;
  }

  template <class F>
  void visit(F&& f) {
    f("enc.embed", enc_embed);
    enc_gru.visit("enc.gru", f);
    f("enc.att_w", att_w);
    f("enc.att_b", att_b);
    f("enc.slots", slots);
    f("enc.mu_w", mu_w);
    f("enc.mu_b", mu_b);
    f("enc.ls_w", ls_w);
    f("enc.ls_b", ls_b);
    f("dec.embed", dec_embed);
    dec_gru.visit("dec.gru", f);
    f("dec.h0_w", h0_w);
    f("dec.h0_b", h0_b);
    f("dec.zin_w", zin_w);
    f("dec.zin_b", zin_b);
    f("dec.out_w", out_w);
    f("dec.out_b", out_b);
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    visit([&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
  }
  std::vector<Tensor*> encoder_parameters() {
    std::vector<Tensor*> out;
    visit([&](const std::string& n, Tensor& t) {
      if (n.rfind("enc.", 0) == 0) out.push_back(&t);
    });
    return out;
  }

  void check_tokens(const toy::TokenString& x) const {
    require(x.size() <= cfg.max_len, "vae: token string longer than max_len");
    for (auto t : x) require(t < toy::kVocabSize, "vae: unknown token id " + std::to_string(t));
  }

  struct Encoded {
    Var mu;         // [B * K, d]
    Var log_sigma;  // [B * K, d]
  };

  Encoded encode(Scope& s, const std::vector<toy::TokenString>& xs) const {
    Graph& g = s.graph();
    require(!xs.empty(), "vae: empty batch");
    const std::size_t B = xs.size(), K = cfg.K;
    std::vector<std::size_t> lengths(B);
    std::size_t T = 0;
    for (std::size_t b = 0; b < B; ++b) {
      check_tokens(xs[b]);
      lengths[b] = xs[b].size() + 1;  // + EOS
      T = std::max(T, lengths[b]);
    }
    std::vector<std::size_t> ids(T * B, toy::kPad);  // time-major
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t t = 0; t < xs[b].size(); ++t) ids[t * B + b] = xs[b][t];
      ids[xs[b].size() * B + b] = toy::kEos;
    }
    Var xp = g.add_bias(g.matmul(g.gather(s(enc_embed), ids), s(enc_gru.wx)), s(enc_gru.bx));
    Var h = g.constant(Tensor::zeros(Shape{B, cfg.hidden}));
    std::vector<Var> states;
    for (std::size_t t = 0; t < T; ++t) {
      Var xt = g.gather(xp, step_rows(t, B));
      Var hp = g.add_bias(g.matmul(h, s(enc_gru.uh)), s(enc_gru.bh));
      h = g.gru_gate(xt, hp, h);
      states.push_back(h);
    }
    std::vector<std::size_t> perm(B * T);  // batch-major view of the time-major stack
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t) perm[b * T + t] = t * B + b;
    Var values = g.gather(g.stack_rows(states), perm);
    Var logits = cfg.pooling == "attention"
                     ? g.add_bias(g.matmul(values, s(att_w)), s(att_b))
                     : g.constant(Tensor::zeros(Shape{B * T, K}));
    Var pooled = g.attention_pool(values, logits, T, lengths);  // [B * K, H]
    std::vector<std::size_t> slot_ids(B * K);
    for (std::size_t i = 0; i < B * K; ++i) slot_ids[i] = i % K;
    Var hk = g.tanh(g.add(pooled, g.gather(s(slots), slot_ids)));
    Var mu = g.add_bias(g.matmul(hk, s(mu_w)), s(mu_b));
    Var ls = g.clamp(g.add_bias(g.matmul(hk, s(ls_w)), s(ls_b)), kLogSigmaMin, kLogSigmaMax);
    return {mu, ls};
  }

  /// Summed teacher-forced cross-entropy of `xs` (+ EOS) given flattened
  /// latents zflat [B, K*d].
  Var reconstruction(Scope& s, Var zflat, const std::vector<toy::TokenString>& xs) const {
    Graph& g = s.graph();
    const std::size_t B = xs.size();
    require(zflat.value().rows() == B && zflat.value().cols() == cfg.latent_size(),
            "vae: latent batch shape mismatch");
    std::size_t T = 0;
    for (const auto& x : xs) {
      check_tokens(x);
      T = std::max(T, x.size() + 1);
    }
    std::vector<std::size_t> prev(T * B, toy::kPad), target(T * B, toy::kPad);
    std::vector<double> weight(T * B, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& x = xs[b];
      for (std::size_t t = 0; t <= x.size(); ++t) {
        prev[t * B + b] = t == 0 ? toy::kBos : x[t - 1];
        target[t * B + b] = t < x.size() ? x[t] : toy::kEos;
        weight[t * B + b] = 1.0;
      }
    }
    Var h = g.tanh(g.add_bias(g.matmul(zflat, s(h0_w)), s(h0_b)));
    Var zc = g.add_bias(g.matmul(zflat, s(zin_w)), s(zin_b));
    Var xp = g.add_bias(g.matmul(g.gather(s(dec_embed), prev), s(dec_gru.wx)), s(dec_gru.bx));
    std::vector<Var> states;
    for (std::size_t t = 0; t < T; ++t) {
      Var xt = g.add(g.gather(xp, step_rows(t, B)), zc);
      Var hp = g.add_bias(g.matmul(h, s(dec_gru.uh)), s(dec_gru.bh));
      h = g.gru_gate(xt, hp, h);
      states.push_back(h);
    }
    Var logits = g.add_bias(g.matmul(g.stack_rows(states), s(out_w)), s(out_b));
    return g.cross_entropy(logits, std::move(target), std::move(weight));
  }

  // ---- inference ----------------------------------------------------------

  std::vector<PosteriorParams> encode(const std::vector<toy::TokenString>& xs) const {
    std::vector<PosteriorParams> out;
    const std::size_t chunk = 256;
    for (std::size_t start = 0; start < xs.size(); start += chunk) {
      std::vector<toy::TokenString> part(xs.begin() + static_cast<std::ptrdiff_t>(start),
                                         xs.begin() + static_cast<std::ptrdiff_t>(std::min(xs.size(), start + chunk)));
      Graph g;
      Scope s(g, false);
      Encoded e = encode(s, part);
      const Tensor& mu = e.mu.value();
      const Tensor& ls = e.log_sigma.value();
      const std::size_t kd = cfg.latent_size();
      for (std::size_t b = 0; b < part.size(); ++b) {
        PosteriorParams p{Tensor(Shape{cfg.K, cfg.d}), Tensor(Shape{cfg.K, cfg.d})};
        std::copy_n(mu.data().begin() + static_cast<std::ptrdiff_t>(b * kd), kd, p.mu.data().begin());
        std::copy_n(ls.data().begin() + static_cast<std::ptrdiff_t>(b * kd), kd, p.log_sigma.data().begin());
        out.push_back(std::move(p));
      }
    }
    return out;
  }

  PosteriorParams encode(const toy::TokenString& x) const { return encode(std::vector<toy::TokenString>{x})[0]; }

  /// Greedy decoding of zflat [B, K*d]; control tokens other than EOS are
  /// never emitted. Stops at EOS or after max_len tokens.
  std::vector<toy::TokenString> decode_greedy(const Tensor& zflat) const {
    require(zflat.rank() == 2 && zflat.cols() == cfg.latent_size(), "vae: latent batch shape mismatch");
    require(zflat.all_finite(), "vae: non-finite latent");
    const std::size_t B = zflat.rows();
    std::vector<toy::TokenString> out(B);
    std::vector<bool> done(B, false);
    Graph g;
    Scope s(g, false);
    Var z = g.constant(zflat);
    Var h = g.tanh(g.add_bias(g.matmul(z, s(h0_w)), s(h0_b)));
    Var zc = g.add_bias(g.matmul(z, s(zin_w)), s(zin_b));
    std::vector<std::size_t> prev(B, toy::kBos);
    for (std::size_t t = 0; t <= cfg.max_len; ++t) {
      Var xt = g.add(g.add_bias(g.matmul(g.gather(s(dec_embed), prev), s(dec_gru.wx)), s(dec_gru.bx)), zc);
      Var hp = g.add_bias(g.matmul(h, s(dec_gru.uh)), s(dec_gru.bh));
      h = g.gru_gate(xt, hp, h);
      const Tensor logits = mlp_logits(h.value());
      bool all_done = true;
      for (std::size_t b = 0; b < B; ++b) {
        if (done[b]) continue;
        std::size_t best = toy::kEos;
        for (std::size_t v = toy::kEos + 1; v < toy::kVocabSize; ++v)
          if (logits(b, v) > logits(b, best)) best = v;
        if (best == toy::kEos || t == cfg.max_len) {
          done[b] = true;
        } else {
          out[b].push_back(static_cast<toy::Token>(best));
          all_done = false;
        }
        prev[b] = best;
      }
      if (all_done) break;
    }
    return out;
  }

  toy::TokenString decode_greedy(const LatentState& z) const {
    require(z.z.shape() == Shape({cfg.K, cfg.d}), "vae: latent shape mismatch");
    return decode_greedy(flatten_latent(z.z))[0];
  }

 private:
  static std::vector<std::size_t> step_rows(std::size_t t, std::size_t B) {
    std::vector<std::size_t> r(B);
    std::iota(r.begin(), r.end(), t * B);
    return r;
  }
  Tensor mlp_logits(const Tensor& h) const {
    Tensor out(Shape{h.rows(), toy::kVocabSize});
    detail::mat(out).noalias() = detail::mat(h) * detail::mat(out_w);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += out_b[i % toy::kVocabSize];
    return out;
  }
};

// ---------------------------------------------------------------- training

struct VaeEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_recon = 0.0;
  double val_kl = 0.0;
  double val_prop = 0.0;
};

struct VaeTrainLog {
  std::string stage;
  std::vector<VaeEpoch> epochs;
  std::size_t best_epoch = 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::uint64_t steps = 0;
};

/// Length-bucketed minibatches: shuffle, sort windows of 8 batches by length,
/// cut into batches, shuffle the batch order.
inline std::vector<std::vector<std::size_t>> bucketed_batches(const std::vector<toy::Record>& data,
                                                              std::size_t batch, Rng& rng) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.index(i)]);
  const std::size_t window = batch * 8;
  for (std::size_t w = 0; w < idx.size(); w += window) {
    auto first = idx.begin() + static_cast<std::ptrdiff_t>(w);
    auto last = idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), w + window));
    std::stable_sort(first, last, [&](std::size_t a, std::size_t b) {
      return data[a].tokens.size() < data[b].tokens.size();
    });
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < idx.size(); s += batch)
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(s),
                     idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), s + batch)));
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.index(i)]);
  return out;
}

struct VaeLossTerms {
  Var total;
  double recon = 0.0;  // per sequence
  double kl = 0.0;     // per sequence
  double prop = 0.0;   // MSE
};

/// Per-sequence negative ELBO (+ λ · property MSE when a surrogate is given).
/// With `sample` false the posterior mean is decoded.
inline VaeLossTerms vae_loss(Scope& s, const SeqVae& vae, const Surrogate* sur, const std::vector<toy::Record>& batch,
                             double beta, double lambda, bool sample, Rng& rng) {
  Graph& g = s.graph();
  const std::size_t B = batch.size(), kd = vae.cfg.latent_size();
  std::vector<toy::TokenString> xs;
  std::vector<toy::PropertyVector> ys;
  for (const auto& r : batch) {
    xs.push_back(r.tokens);
    ys.push_back(r.props);
  }
  auto enc = vae.encode(s, xs);
  Var z = enc.mu;
  if (sample) {
    Tensor eps = Tensor::randn(enc.mu.value().shape(), rng);
    z = g.add(enc.mu, g.mul(g.exp(enc.log_sigma), g.constant(eps)));
  }
  Var zflat = g.reshape(z, Shape{B, kd});
  const double inv_b = 1.0 / static_cast<double>(B);
  Var recon = g.scale(vae.reconstruction(s, zflat, xs), inv_b);
  Var kl = g.scale(kl_standard_normal(g, enc.mu, enc.log_sigma), inv_b);
  VaeLossTerms out{g.add(recon, g.scale(kl, beta)), recon.value().item(), kl.value().item(), 0.0};
  if (sur) {
    Var prop = prop_loss(g, sur->forward(s, pool_rows(g, zflat, vae.cfg.K)), property_matrix(ys));
    out.prop = prop.value().item();
    out.total = g.add(out.total, g.scale(prop, lambda));
  }
  return out;
}

/// One optimizer step of L_VAE + λ L_prop; gradients flow through decoder,
/// surrogate and encoder in a single backward pass. Returns the loss terms.
struct FinetuneStep {
  double total = 0.0, recon = 0.0, kl = 0.0, prop = 0.0;
  GradMap vae_grads;
  GradMap surrogate_grads;
};

inline FinetuneStep joint_finetune_gradients(SeqVae& vae, Surrogate& sur, const std::vector<toy::Record>& batch,
                                             double beta, double lambda, Rng& rng) {
  Graph g;
  Scope s(g, true);
  VaeLossTerms t = vae_loss(s, vae, &sur, batch, beta, lambda, true, rng);
  FinetuneStep out{t.total.value().item(), t.recon, t.kl, t.prop, {}, {}};
  if (!std::isfinite(out.total)) throw NumericFailure("vae: non-finite loss", -1, "finetune");
  auto gr = g.backward(t.total);
  out.vae_grads = s.collect(gr, vae.parameters());
  out.surrogate_grads = s.collect(gr, sur.parameters());
  return out;
}

/// Trains `vae` (and `sur` when fine-tuning) and restores the parameters of
/// the epoch with the best validation loss. Validation decodes posterior
/// means and uses β = β_max.
inline VaeTrainLog train_vae(SeqVae& vae, Surrogate* sur, const std::vector<toy::Record>& train,
                             const std::vector<toy::Record>& val, Rng& rng) {
  require(!train.empty() && !val.empty(), "train_vae: empty train or validation set");
  const bool finetune = sur != nullptr;
  const VaeConfig& cfg = vae.cfg;
  const std::string stage = finetune ? "finetune" : "pretrain";
  const std::size_t epochs = finetune ? cfg.finetune_epochs : cfg.epochs;
  AdamW opt({.lr = finetune ? cfg.finetune_lr : cfg.lr, .weight_decay = cfg.weight_decay});
  std::vector<Tensor*> params = vae.parameters();
  if (finetune)
    for (Tensor* p : sur->parameters()) params.push_back(p);
  const std::size_t batch_size = finetune ? cfg.finetune_batch : cfg.batch;
  const std::size_t per_epoch = (train.size() + batch_size - 1) / batch_size;
  const std::size_t total = per_epoch * epochs;
  VaeTrainLog log;
  log.stage = stage;
  SeqVae best_vae = vae;
  Surrogate best_sur = finetune ? *sur : Surrogate{};
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    double train_sum = 0.0;
    for (const auto& rows : bucketed_batches(train, batch_size, rng)) {
      std::vector<toy::Record> batch;
      for (auto i : rows) batch.push_back(train[i]);
      const double beta = finetune ? cfg.beta_max : kl_weight(cfg, step, total);
      Graph g;
      Scope s(g, true);
      VaeLossTerms t = vae_loss(s, vae, sur, batch, beta, cfg.lambda, true, rng);
      const double value = t.total.value().item();
      if (!std::isfinite(value)) throw NumericFailure("vae: non-finite training loss", static_cast<long>(step), stage);
      auto gr = g.backward(t.total);
      GradMap grads = s.collect(gr, params);
      if (cfg.grad_clip > 0.0) clip_grad_norm(grads, cfg.grad_clip);
      opt.step(params, grads);
      train_sum += value * static_cast<double>(batch.size());
      ++step;
    }
    VaeEpoch e;
    e.epoch = epoch;
    e.train_loss = train_sum / static_cast<double>(train.size());
    double n = 0.0;
    for (std::size_t start = 0; start < val.size(); start += 256) {
      std::vector<toy::Record> batch(val.begin() + static_cast<std::ptrdiff_t>(start),
                                     val.begin() + static_cast<std::ptrdiff_t>(std::min(val.size(), start + 256)));
      Graph g;
      Scope s(g, false);
      VaeLossTerms t = vae_loss(s, vae, sur, batch, cfg.beta_max, cfg.lambda, false, rng);
      const double w = static_cast<double>(batch.size());
      e.val_loss += t.total.value().item() * w;
      e.val_recon += t.recon * w;
      e.val_kl += t.kl * w;
      e.val_prop += t.prop * w;
      n += w;
    }
    e.val_loss /= n;
    e.val_recon /= n;
    e.val_kl /= n;
    e.val_prop /= n;
    if (!std::isfinite(e.val_loss)) throw NumericFailure("vae: non-finite validation loss", static_cast<long>(epoch), stage);
    log.epochs.push_back(e);
    if (e.val_loss < log.best_val) {
      log.best_val = e.val_loss;
      log.best_epoch = epoch;
      best_vae = vae;
      if (finetune) best_sur = *sur;
    }
  }
  vae = best_vae;
  if (finetune) *sur = best_sur;
  log.steps = step;
  return log;
}

/// Posterior means of `records`, pooled, as rows [N, d].
inline Tensor pooled_means(const SeqVae& vae, const std::vector<toy::Record>& records) {
  std::vector<toy::TokenString> xs;
  for (const auto& r : records) xs.push_back(r.tokens);
  auto post = vae.encode(xs);
  Tensor out(Shape{post.size(), vae.cfg.d});
  for (std::size_t i = 0; i < post.size(); ++i) {
    Tensor p = LatentState{post[i].mu, 1.0}.pooled();
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * vae.cfg.d));
  }
  return out;
}

/// Token-level accuracy of greedy reconstructions from posterior means
/// (positions of the target plus its EOS).
inline double reconstruction_accuracy(const SeqVae& vae, const std::vector<toy::Record>& records) {
  std::vector<toy::TokenString> xs;
  for (const auto& r : records) xs.push_back(r.tokens);
  auto post = vae.encode(xs);
  Tensor z(Shape{post.size(), vae.cfg.latent_size()});
  for (std::size_t i = 0; i < post.size(); ++i)
    std::copy(post[i].mu.data().begin(), post[i].mu.data().end(),
              z.data().begin() + static_cast<std::ptrdiff_t>(i * vae.cfg.latent_size()));
  auto dec = vae.decode_greedy(z);
  double hit = 0.0, total = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (std::size_t t = 0; t <= xs[i].size(); ++t) {
      const std::size_t want = t < xs[i].size() ? xs[i][t] : toy::kEos;
      const std::size_t got = t < dec[i].size() ? dec[i][t] : toy::kEos;
      hit += want == got ? 1.0 : 0.0;
      total += 1.0;
    }
  }
  return hit / total;
}

// ---------------------------------------------------------------- checkpoint

inline json vae_config_json(const VaeConfig& c) {
  return {{"K", c.K}, {"d", c.d}, {"embed", c.embed}, {"hidden", c.hidden}, {"max_len", c.max_len},
          {"pooling", c.pooling}, {"beta_max", c.beta_max}, {"warmup_frac", c.warmup_frac},
          {"lambda", c.lambda}, {"lr", c.lr}, {"finetune_lr", c.finetune_lr},
          {"weight_decay", c.weight_decay}, {"grad_clip", c.grad_clip}, {"batch", c.batch}, {"finetune_batch", c.finetune_batch},
          {"epochs", c.epochs}, {"finetune_epochs", c.finetune_epochs}};
}

inline VaeConfig vae_config_from_json(const json& j) {
  VaeConfig c;
  c.K = j.value("K", c.K);
  c.d = j.value("d", c.d);
  c.embed = j.value("embed", c.embed);
  c.hidden = j.value("hidden", c.hidden);
  c.max_len = j.value("max_len", c.max_len);
  c.pooling = j.value("pooling", c.pooling);
  c.beta_max = j.value("beta_max", c.beta_max);
  c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
  c.lambda = j.value("lambda", c.lambda);
  c.lr = j.value("lr", c.lr);
  c.finetune_lr = j.value("finetune_lr", c.finetune_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.batch = j.value("batch", c.batch);
  c.finetune_batch = j.value("finetune_batch", c.finetune_batch);
  c.epochs = j.value("epochs", c.epochs);
  c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
  return c;
}

inline Checkpoint vae_checkpoint(SeqVae& vae, const std::string& stage, std::uint64_t seed, std::uint64_t steps) {
  Checkpoint ck;
  ck.meta["model_kind"] = "seqvae";
  ck.meta["vocab_hash"] = vocabulary_hash();
  ck.meta["vocab_size"] = toy::kVocabSize;
  ck.meta["stage"] = stage;
  ck.meta["seed"] = seed;
  ck.meta["step"] = steps;
  ck.meta["config"] = vae_config_json(vae.cfg);
  ck.meta["layers"] = {{"encoder", "embedding+gru+attention_pool"}, {"decoder", "gru"}};
  ck.meta["conditioning"] = "decoder initial state tanh(z W_h + b_h); z W_in + b_in added to every input projection";
  ck.meta["prior"] = "standard normal over all K*d entries";
  ck.meta["log_sigma_range"] = {kLogSigmaMin, kLogSigmaMax};
  vae.visit([&](const std::string& name, Tensor& t) { ck.add(name, t); });
  return ck;
}

inline SeqVae vae_from_checkpoint(const Checkpoint& ck) {
  if (ck.meta.value("model_kind", "") != "seqvae") throw IoError("checkpoint: not a seqvae checkpoint");
  if (ck.meta.value("vocab_hash", std::uint64_t{0}) != vocabulary_hash())
    throw IoError("checkpoint: vocabulary hash mismatch");
  SeqVae vae;
  vae.cfg = vae_config_from_json(ck.meta.at("config"));
  Rng rng(0);
  vae = SeqVae::init(vae.cfg, rng);
  vae.visit([&](const std::string& name, Tensor& t) {
    const Tensor& src = ck.get(name);
    if (src.shape() != t.shape()) throw IoError("checkpoint: shape mismatch for " + name);
    t = src;
  });
  return vae;
}

}  // namespace moltenflow
