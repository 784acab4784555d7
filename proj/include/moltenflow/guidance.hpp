// SPDX-License-Identifier: Apache-2.0
//
// Objectives over surrogate predictions and guided latent dynamics
//   dz/dt = v(z, t) - gamma * g(z),   g = grad_z J(pool(z))
// integrated with explicit Euler steps. J is always minimized; "maximize p1"
// is expressed with a sign. Gradient post-processing order is fixed:
// normalize to unit norm, then clip, then scale by gamma in the integrator.
#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "moltenflow/flowmatch.hpp"
#include "moltenflow/seqvae.hpp"
#include "moltenflow/surrogate.hpp"

namespace moltenflow {

struct ObjectiveSpec {
  enum class Mode { Directional, Target };
  Mode mode = Mode::Directional;
  std::array<double, 2> weights{1.0, 1.0};
  std::array<double, 2> signs{+1.0, -1.0};  // directional: +1 raise, -1 lower
  std::array<double, 2> targets{0.0, 0.0};  // target mode

  /// Raise p1, lower p2.
  static ObjectiveSpec directional(std::array<double, 2> s = {+1.0, -1.0}, std::array<double, 2> w = {1.0, 1.0}) {
    ObjectiveSpec o;
    o.signs = s;
    o.weights = w;
    o.validate();
    return o;
  }
  static ObjectiveSpec target(std::array<double, 2> c, std::array<double, 2> w = {1.0, 1.0}) {
    ObjectiveSpec o;
    o.mode = Mode::Target;
    o.targets = c;
    o.weights = w;
    o.validate();
    return o;
  }

  void validate() const {
    for (std::size_t i = 0; i < 2; ++i) {
      if (!(std::isfinite(weights[i]) && weights[i] >= 0.0)) throw ConfigError("objective: weights must be finite and >= 0");
      if (mode == Mode::Directional && signs[i] != 1.0 && signs[i] != -1.0)
        throw ConfigError("objective: directional signs must be +1 or -1");
      if (mode == Mode::Target && !std::isfinite(targets[i])) throw ConfigError("objective: targets must be finite");
    }
  }

  json to_json() const {
    json j{{"mode", mode == Mode::Directional ? "directional" : "target"}, {"weights", weights}};
    if (mode == Mode::Directional) j["signs"] = signs;
    else j["targets"] = targets;
    return j;
  }
};

/// J_dir = -sum w_i s_i f_i ; J_target = sum w_i (f_i - c_i)^2.
inline double objective_value(const ObjectiveSpec& spec, const toy::PropertyVector& f) {
  const std::array<double, 2> v{f.p1, f.p2};
  double j = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    if (spec.mode == ObjectiveSpec::Mode::Directional) j -= spec.weights[i] * spec.signs[i] * v[i];
    else j += spec.weights[i] * (v[i] - spec.targets[i]) * (v[i] - spec.targets[i]);
  }
  return j;
}

/// Sum over rows of J for predictions [B, 2].
inline Var objective_sum(Graph& g, const ObjectiveSpec& spec, Var pred) {
  const std::size_t B = pred.value().rows();
  Tensor coef(Shape{B, 2});
  if (spec.mode == ObjectiveSpec::Mode::Directional) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < 2; ++i) coef(b, i) = -spec.weights[i] * spec.signs[i];
    return g.sum(g.mul(pred, g.constant(coef)));
  }
  Tensor c(Shape{B, 2});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < 2; ++i) {
      coef(b, i) = spec.weights[i];
      c(b, i) = spec.targets[i];
    }
  return g.sum(g.mul(g.square(g.sub(pred, g.constant(c))), g.constant(coef)));
}

struct GuidanceConfig {
  double gamma = 36.07;
  double sigma = 0.80;
  std::size_t steps = 12;
  double t_start = 0.89;
  std::optional<double> clip_norm = 5.0;
  bool normalize_gradient = true;

  void validate() const {
    if (!(std::isfinite(gamma) && gamma >= 0.0)) throw ConfigError("guidance: gamma must be finite and >= 0");
    if (!(std::isfinite(sigma) && sigma >= 0.0)) throw ConfigError("guidance: sigma must be finite and >= 0");
    if (steps == 0) throw ConfigError("guidance: steps must be positive");
    if (!(t_start >= 0.0 && t_start < 1.0)) throw ConfigError("guidance: t_start must be in [0,1)");
    if (clip_norm && !(*clip_norm > 0.0)) throw ConfigError("guidance: clip_norm must be positive");
  }

  json to_json() const {
    return {{"gamma", gamma}, {"sigma", sigma}, {"steps", steps}, {"t_start", t_start},
            {"clip_norm", clip_norm ? json(*clip_norm) : json(nullptr)}, {"normalize_gradient", normalize_gradient}};
  }
};

/// Options for how raw gradients are post-processed (the pieces of
/// GuidanceConfig that act on g).
struct GradientPost {
  bool normalize = false;
  std::optional<double> clip_norm;

  static GradientPost from(const GuidanceConfig& c) { return {c.normalize_gradient, c.clip_norm}; }
};

struct ObjectiveEval {
  Tensor grad;             // [B, K*d], post-processed per row
  std::vector<double> j;   // J per row
  std::vector<double> raw_norm;
};

/// Gradient of J with respect to each row of flattened latents zflat [B, K*d]
/// through mean pooling over the K tokens and the surrogate. Rows are
/// independent; normalization and clipping act per row.
inline ObjectiveEval objective_gradients(const ObjectiveSpec& spec, const Surrogate& sur, const Tensor& zflat,
                                         std::size_t K, const GradientPost& post) {
  require(zflat.rank() == 2 && zflat.cols() == K * sur.latent_dim(), "objective_gradient: latent width mismatch");
  Graph g;
  Scope s(g, false);
  Var z = g.param(zflat);
  Var pred = sur.forward(s, pool_rows(g, z, K));
  auto gr = g.backward(objective_sum(g, spec, pred));
  ObjectiveEval out{gr.of(z), {}, {}};
  const std::size_t B = zflat.rows(), D = zflat.cols();
  if (!out.grad.all_finite()) throw NumericFailure("objective_gradient: non-finite gradient");
  for (std::size_t b = 0; b < B; ++b) {
    out.j.push_back(objective_value(spec, {pred.value()(b, 0), pred.value()(b, 1)}));
    double n2 = 0.0;
    for (std::size_t k = 0; k < D; ++k) n2 += out.grad(b, k) * out.grad(b, k);
    double norm = std::sqrt(n2);
    out.raw_norm.push_back(norm);
    double scale = 1.0;
    if (post.normalize && norm > 0.0) {
      scale = 1.0 / norm;
      norm = 1.0;
    }
    if (post.clip_norm && norm > *post.clip_norm) scale *= *post.clip_norm / norm;
    if (scale != 1.0)
      for (std::size_t k = 0; k < D; ++k) out.grad(b, k) *= scale;
  }
  return out;
}

/// Single-latent form: g as a K x d tensor.
inline Tensor objective_gradient(const ObjectiveSpec& spec, const Surrogate& sur, const LatentState& z,
                                 const GradientPost& post) {
  const std::size_t K = z.z.rows();
  return objective_gradients(spec, sur, flatten_latent(z.z), K, post).grad.reshaped(z.z.shape());
}

struct GuidedStep {
  std::size_t step = 0;
  double t = 0.0;
  double j = 0.0;       // mean over rows
  double g_norm = 0.0;  // mean post-processed norm
  double v_norm = 0.0;  // mean velocity norm
};

struct GuidedResult {
  Tensor z;  // final rows [B, K*d] at t = 1
  std::vector<GuidedStep> trajectory;
  std::vector<double> j_initial;
  std::vector<double> j_final;
};

namespace detail {
inline double mean_row_norm(const Tensor& t) {
  double s = 0.0;
  for (std::size_t b = 0; b < t.rows(); ++b) {
    double n = 0.0;
    for (std::size_t k = 0; k < t.cols(); ++k) n += t(b, k) * t(b, k);
    s += std::sqrt(n);
  }
  return s / static_cast<double>(t.rows());
}
inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}
}  // namespace detail

/// Euler integration of dz/dt = v - gamma g from cfg.t_start to 1 for rows of
/// zflat (already prepared: noise injected, time t_start). With gamma == 0 the
/// update is exactly the one of integrate_flow.
inline GuidedResult guided_integrate(const FlowField& field, const Surrogate& sur, const ObjectiveSpec& spec,
                                     const GuidanceConfig& cfg, Tensor zflat, std::size_t K) {
  cfg.validate();
  spec.validate();
  require(zflat.rank() == 2 && zflat.cols() == field.latent_dim, "guided_integrate: latent width mismatch");
  const GradientPost post = GradientPost::from(cfg);
  const double dt = (1.0 - cfg.t_start) / static_cast<double>(cfg.steps);
  GuidedResult out;
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    const double t = cfg.t_start + static_cast<double>(k) * dt;
    Tensor v = field.velocity(zflat, t);
    ObjectiveEval e = objective_gradients(spec, sur, zflat, K, post);
    if (k == 0) out.j_initial = e.j;
    if (cfg.gamma == 0.0) {
      zflat.axpy(dt, v);
    } else {
      Tensor step = v;
      step.axpy(-cfg.gamma, e.grad);
      zflat.axpy(dt, step);
    }
    if (!zflat.all_finite())
      throw NumericFailure("guided_integrate: non-finite state", static_cast<long>(k), "guidance");
    out.trajectory.push_back({k, t, detail::mean_of(e.j), detail::mean_row_norm(e.grad), detail::mean_row_norm(v)});
  }
  out.j_final = objective_gradients(spec, sur, zflat, K, post).j;
  out.z = std::move(zflat);
  return out;
}

/// Single-latent form.
inline GuidedResult guided_integrate(const FlowField& field, const Surrogate& sur, const ObjectiveSpec& spec,
                                     const GuidanceConfig& cfg, const LatentState& z_init) {
  require(std::abs(z_init.t - cfg.t_start) < 1e-12, "guided_integrate: initial state time must equal t_start");
  return guided_integrate(field, sur, spec, cfg, flatten_latent(z_init.z), z_init.z.rows());
}

inline LatentState final_state(const GuidedResult& r, std::size_t K) {
  return {r.z.reshaped(Shape{K, r.z.cols() / K}), 1.0};
}

/// Record per step as a JSON line: step, t, J, |g|, |v|.
inline std::string trajectory_jsonl(const std::vector<GuidedStep>& tr) {
  std::string out;
  for (const auto& s : tr)
    out += json{{"step", s.step}, {"t", s.t}, {"J", s.j}, {"g_norm", s.g_norm}, {"v_norm", s.v_norm}}.dump() + "\n";
  return out;
}

// ---------------------------------------------------------------- preparation

inline LatentState prepare_generation(std::size_t K, std::size_t d, Rng& rng) {
  return {Tensor::randn(Shape{K, d}, rng), 0.0};
}

/// Posterior mean of x plus sigma * N(0, I), placed at t_start.
inline LatentState prepare_optimization(const SeqVae& vae, const toy::TokenString& x, double sigma, double t_start,
                                        Rng& rng) {
  require(sigma >= 0.0, "prepare_optimization: sigma must be >= 0");
  require(t_start >= 0.0 && t_start < 1.0, "prepare_optimization: t_start must be in [0,1)");
  LatentState s{vae.encode(x).mu, t_start};
  for (auto& v : s.z.data()) v += sigma * rng.normal();
  return s;
}

/// Same as prepare_optimization from an already computed posterior mean.
inline LatentState perturb(const Tensor& mu, double sigma, double t, Rng& rng) {
  LatentState s{mu, t};
  for (auto& v : s.z.data()) v += sigma * rng.normal();
  return s;
}

// ---------------------------------------------------------------- ablation

struct GradientAscentConfig {
  double eta = 0.3;
  std::size_t steps = 10;
  double sigma = 0.2;

  void validate() const {
    if (!(eta > 0.0)) throw ConfigError("gradient ascent: eta must be positive");
    if (steps == 0) throw ConfigError("gradient ascent: steps must be positive");
    if (!(sigma >= 0.0)) throw ConfigError("gradient ascent: sigma must be >= 0");
  }
  json to_json() const {
    return {{"eta", eta}, {"steps", steps}, {"sigma", sigma}, {"tuned", false}};
  }
};

/// No-flow ablation: sigma noise once, then z <- z - eta grad J for `steps`.
inline LatentState gradient_ascent_baseline(const Surrogate& sur, const ObjectiveSpec& spec, const LatentState& z_init,
                                            const GradientAscentConfig& cfg, Rng& rng) {
  cfg.validate();
  LatentState z = perturb(z_init.z, cfg.sigma, z_init.t, rng);
  const GradientPost raw{};
  for (std::size_t k = 0; k < cfg.steps; ++k) {
    Tensor g = objective_gradient(spec, sur, z, raw);
    z.z.axpy(-cfg.eta, g);
    if (!z.z.all_finite())
      throw NumericFailure("gradient_ascent: non-finite state", static_cast<long>(k), "gradient-ascent");
  }
  z.t = 1.0;
  return z;
}

}  // namespace moltenflow
