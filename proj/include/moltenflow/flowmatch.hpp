// SPDX-License-Identifier: Apache-2.0
//
// Flow-matching prior over flattened latents. The field is an MLP on
// [z, time_embed(t)] predicting a velocity of the same width as z. Training
// regresses onto the linear-path target z1 - z0; sampling integrates the ODE
// with explicit Euler steps.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

#include "moltenflow/model_io.hpp"
#include "moltenflow/optim.hpp"

namespace moltenflow {

struct FlowConfig {
  std::size_t hidden = 256;
  std::size_t layers = 3;
  std::size_t time_dim = 128;
  double freq_min = 1.0;
  double freq_max = 1.0e4;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double grad_clip = 5.0;
  std::size_t batch = 256;
  std::size_t epochs = 60;
  bool ot_coupling = false;
  std::size_t sample_steps = 50;

  void validate() const {
    if (hidden == 0 || layers < 1) throw ConfigError("flow: hidden and layers must be positive");
    if (time_dim == 0 || time_dim % 2 != 0) throw ConfigError("flow: time_dim must be positive and even");
    if (!(freq_min > 0.0 && freq_max >= freq_min)) throw ConfigError("flow: bad frequency range");
    if (!(lr > 0.0)) throw ConfigError("flow: learning rate must be positive");
    if (batch == 0) throw ConfigError("flow: batch must be positive");
    if (sample_steps == 0) throw ConfigError("flow: sample_steps must be positive");
  }
};

struct FlowField {
  MlpParams mlp;
  std::size_t latent_dim = 0;
  std::size_t time_dim = 128;
  double freq_min = 1.0;
  double freq_max = 1.0e4;

  static FlowField init(std::size_t latent_dim, const FlowConfig& cfg, Rng& rng) {
    cfg.validate();
    require(latent_dim > 0, "flow: latent_dim must be positive");
    std::vector<std::size_t> sizes{latent_dim + cfg.time_dim};
    for (std::size_t l = 0; l + 1 < cfg.layers; ++l) sizes.push_back(cfg.hidden);
    sizes.push_back(latent_dim);
    return {MlpParams::init(sizes, Activation::Silu, {}, rng), latent_dim, cfg.time_dim, cfg.freq_min,
            cfg.freq_max};
  }

  std::vector<Tensor*> parameters() { return mlp.parameters(); }

  Tensor time_features(const std::vector<double>& ts) const {
    Tensor out(Shape{ts.size(), time_dim});
    for (std::size_t i = 0; i < ts.size(); ++i) {
      Tensor e = time_embed(ts[i], time_dim, freq_min, freq_max);
      std::copy(e.data().begin(), e.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * time_dim));
    }
    return out;
  }

  /// z: [B, D], one time per row -> velocity [B, D].
  Var velocity(Scope& s, Var z, const std::vector<double>& ts) const {
    Graph& g = s.graph();
    require(z.value().rank() == 2 && z.value().cols() == latent_dim, "flow: latent width mismatch");
    require(ts.size() == z.value().rows(), "flow: one time per row required");
    return mlp_forward(s, mlp, g.concat_cols(z, g.constant(time_features(ts))));
  }

  /// Inference velocity at a shared time t.
  Tensor velocity(const Tensor& z, double t) const {
    Graph g;
    Scope s(g, false);
    return velocity(s, g.constant(z), std::vector<double>(z.rows(), t)).value();
  }
};

struct Interpolant {
  Tensor zt;
  Tensor target;
};

inline Interpolant interpolate(const Tensor& z0, const Tensor& z1, double t) {
  require(z0.shape() == z1.shape(), "interpolate: shape mismatch");
  require(t >= 0.0 && t <= 1.0, "interpolate: t outside [0,1]");
  Interpolant out{z0, z1};
  for (std::size_t i = 0; i < z0.size(); ++i) {
    out.zt[i] = (1.0 - t) * z0[i] + t * z1[i];
    out.target[i] = z1[i] - z0[i];
  }
  return out;
}

struct FlowBatch {
  Tensor z0;  // [B, D]
  Tensor z1;  // [B, D]
  std::vector<double> t;
};

/// Mean over rows of ||v(z_t, t) - (z1 - z0)||^2.
inline Var fm_loss(Scope& s, const FlowField& f, const FlowBatch& b) {
  Graph& g = s.graph();
  require(b.z0.shape() == b.z1.shape() && b.z0.rank() == 2, "fm_loss: endpoint shape mismatch");
  require(b.t.size() == b.z0.rows() && !b.t.empty(), "fm_loss: empty batch or missing times");
  Tensor zt(b.z0.shape()), target(b.z0.shape());
  const std::size_t D = b.z0.cols();
  for (std::size_t r = 0; r < b.t.size(); ++r) {
    require(b.t[r] >= 0.0 && b.t[r] <= 1.0, "fm_loss: t outside [0,1]");
    for (std::size_t j = 0; j < D; ++j) {
      const std::size_t i = r * D + j;
      zt[i] = (1.0 - b.t[r]) * b.z0[i] + b.t[r] * b.z1[i];
      target[i] = b.z1[i] - b.z0[i];
    }
  }
  Var err = g.sub(f.velocity(s, g.constant(zt), b.t), g.constant(target));
  return g.scale(g.sum(g.square(err)), 1.0 / static_cast<double>(b.t.size()));
}

inline double fm_loss(const FlowField& f, const FlowBatch& b) {
  Graph g;
  Scope s(g, false);
  return fm_loss(s, f, b).value().item();
}

/// Greedy minibatch coupling: repeatedly pairs the closest remaining
/// (z0, z1) rows. Returns the z1 row assigned to each z0 row.
inline std::vector<std::size_t> greedy_ot_assignment(const Tensor& z0, const Tensor& z1) {
  require(z0.shape() == z1.shape(), "ot: shape mismatch");
  const std::size_t n = z0.rows(), D = z0.cols();
  std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
  pairs.reserve(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < D; ++k) {
        const double e = z0(i, k) - z1(j, k);
        d += e * e;
      }
      pairs.emplace_back(d, i, j);
    }
  std::sort(pairs.begin(), pairs.end());
  std::vector<std::size_t> match(n, n);
  std::vector<bool> used(n, false);
  for (const auto& [d, i, j] : pairs) {
    if (match[i] != n || used[j]) continue;
    match[i] = j;
    used[j] = true;
  }
  return match;
}

/// Source of z1 draws: either fixed points, or a diagonal Gaussian per row
/// (posterior samples) when log_sigma is non-empty.
struct LatentTargets {
  Tensor mu;         // [N, D]
  Tensor log_sigma;  // [N, D] or empty

  std::size_t size() const { return mu.rows(); }
  bool stochastic() const { return log_sigma.size() == mu.size() && log_sigma.rank() == 2; }

  Tensor draw(const std::vector<std::size_t>& rows, Rng& rng) const {
    const std::size_t D = mu.cols();
    Tensor out(Shape{rows.size(), D});
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < D; ++j) {
        double v = mu(rows[r], j);
        if (stochastic()) v += std::exp(log_sigma(rows[r], j)) * rng.normal();
        out(r, j) = v;
      }
    return out;
  }
};

inline FlowBatch make_flow_batch(const LatentTargets& targets, const std::vector<std::size_t>& rows, bool ot, Rng& rng) {
  FlowBatch b;
  b.z1 = targets.draw(rows, rng);
  b.z0 = Tensor::randn(b.z1.shape(), rng);
  b.t.resize(rows.size());
  for (auto& t : b.t) t = rng.uniform();
  if (ot) {
    auto match = greedy_ot_assignment(b.z0, b.z1);
    Tensor z1 = b.z1;
    for (std::size_t i = 0; i < match.size(); ++i)
      for (std::size_t j = 0; j < z1.cols(); ++j) b.z1(i, j) = z1(match[i], j);
  }
  return b;
}

struct FlowEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct FlowTrainLog {
  std::vector<FlowEpoch> epochs;
  std::size_t best_epoch = 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::uint64_t steps = 0;
};

/// Trains `field` on (z0 ~ N(0, I), z1 ~ train) pairs and keeps the epoch with
/// the lowest loss on a fixed validation batch drawn once from `val`.
inline FlowTrainLog train_flow(FlowField& field, const LatentTargets& train, const LatentTargets& val,
                               const FlowConfig& cfg, Rng& rng) {
  cfg.validate();
  require(train.size() > 0 && val.size() > 0, "train_flow: empty latent set");
  require(train.mu.cols() == field.latent_dim && val.mu.cols() == field.latent_dim, "train_flow: width mismatch");
  Rng val_rng = rng.split();
  std::vector<std::size_t> val_rows(val.size());
  std::iota(val_rows.begin(), val_rows.end(), 0);
  const FlowBatch val_batch = make_flow_batch(val, val_rows, false, val_rng);
  AdamW opt({.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  FlowTrainLog log;
  FlowField best = field;
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    double sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + cfg.batch)));
      FlowBatch b = make_flow_batch(train, rows, cfg.ot_coupling, rng);
      Graph g;
      Scope s(g, true);
      Var loss = fm_loss(s, field, b);
      const double v = loss.value().item();
      if (!std::isfinite(v)) throw NumericFailure("flow: non-finite training loss", static_cast<long>(log.steps), "flow");
      auto gr = g.backward(loss);
      GradMap grads = s.collect(gr, field.parameters());
      if (cfg.grad_clip > 0.0) clip_grad_norm(grads, cfg.grad_clip);
      opt.step(field.parameters(), grads);
      sum += v * static_cast<double>(rows.size());
      ++log.steps;
    }
    FlowEpoch e{epoch, sum / static_cast<double>(train.size()), fm_loss(field, val_batch)};
    if (!std::isfinite(e.val_loss)) throw NumericFailure("flow: non-finite validation loss", static_cast<long>(epoch), "flow");
    log.epochs.push_back(e);
    if (e.val_loss < log.best_val) {
      log.best_val = e.val_loss;
      log.best_epoch = epoch;
      best = field;
    }
  }
  field = best;
  return log;
}

// ---------------------------------------------------------------- sampling

struct FlowStepRecord {
  std::size_t step = 0;
  double t = 0.0;
  double v_norm = 0.0;
};

/// Euler integration of rows of z from t_start to 1 in `steps` uniform steps.
/// Throws NumericFailure carrying the step index on a non-finite state.
inline Tensor integrate_flow(const FlowField& f, Tensor z, double t_start, std::size_t steps,
                             std::vector<FlowStepRecord>* trace = nullptr) {
  require(steps >= 1, "integrate_flow: steps must be >= 1");
  require(t_start >= 0.0 && t_start < 1.0, "integrate_flow: t_start must be in [0,1)");
  const double dt = (1.0 - t_start) / static_cast<double>(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = t_start + static_cast<double>(k) * dt;
    Tensor v = f.velocity(z, t);
    z.axpy(dt, v);
    if (!z.all_finite()) throw NumericFailure("flow: non-finite state during integration", static_cast<long>(k), "sample");
    if (trace) trace->push_back({k, t, v.norm()});
  }
  return z;
}

/// Unconditional sample of `n` flattened latents starting from N(0, I).
inline Tensor sample_prior(const FlowField& f, std::size_t n, Rng& rng, std::size_t steps = 50, double t_start = 0.0) {
  return integrate_flow(f, Tensor::randn(Shape{n, f.latent_dim}, rng), t_start, steps);
}

// ---------------------------------------------------------------- checkpoint

inline Checkpoint flow_checkpoint(FlowField& f, const FlowConfig& cfg, std::uint64_t seed, std::uint64_t steps,
                                  const json& latent_source) {
  Checkpoint ck;
  ck.meta["model_kind"] = "flow";
  ck.meta["seed"] = seed;
  ck.meta["step"] = steps;
  ck.meta["latent_dim"] = f.latent_dim;
  ck.meta["time_embedding"] = {{"dim", f.time_dim}, {"freq_min", f.freq_min}, {"freq_max", f.freq_max},
                               {"spacing", "geometric"}, {"layout", "interleaved sin/cos"}};
  ck.meta["config"] = {{"hidden", cfg.hidden}, {"layers", cfg.layers}, {"lr", cfg.lr}, {"batch", cfg.batch},
                       {"epochs", cfg.epochs}, {"ot_coupling", cfg.ot_coupling},
                       {"sample_steps", cfg.sample_steps}};
  ck.meta["latent_source"] = latent_source;
  mlp_to_checkpoint(ck, "field", f.mlp);
  return ck;
}

inline FlowField flow_from_checkpoint(const Checkpoint& ck) {
  if (ck.meta.value("model_kind", "") != "flow") throw IoError("checkpoint: not a flow checkpoint");
  FlowField f;
  f.mlp = mlp_from_checkpoint(ck, "field");
  try {
    f.latent_dim = ck.meta.at("latent_dim").get<std::size_t>();
    const auto& te = ck.meta.at("time_embedding");
    f.time_dim = te.at("dim").get<std::size_t>();
    f.freq_min = te.at("freq_min").get<double>();
    f.freq_max = te.at("freq_max").get<double>();
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint: malformed flow header: ") + e.what());
  }
  if (f.mlp.in_dim() != f.latent_dim + f.time_dim || f.mlp.out_dim() != f.latent_dim)
    throw IoError("checkpoint: flow network shape does not match header");
  return f;
}

}  // namespace moltenflow
