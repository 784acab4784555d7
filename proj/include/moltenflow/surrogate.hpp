// SPDX-License-Identifier: Apache-2.0
//
// Property surrogate over mean-pooled latents. Two bounded heads:
// p1 in [0, 1] (sigmoid) and p2 in [1, 10] (scaled sigmoid).
#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "moltenflow/model_io.hpp"
#include "moltenflow/moeval.hpp"
#include "moltenflow/optim.hpp"
#include "moltenflow/toyset.hpp"

namespace moltenflow {

struct SurrogateConfig {
  std::size_t hidden = 128;
  std::size_t layers = 3;  // linear layers, so layers - 1 hidden layers
  Activation activation = Activation::Silu;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::size_t batch = 64;
  std::size_t epochs = 60;

  void validate() const {
    if (hidden == 0 || layers < 1) throw ConfigError("surrogate: hidden and layers must be positive");
    if (!(lr > 0.0)) throw ConfigError("surrogate: learning rate must be positive");
    if (batch == 0) throw ConfigError("surrogate: batch must be positive");
  }
};

inline constexpr std::size_t kNumProperties = 2;

inline std::vector<OutputBound> property_bounds() {
  return {OutputBound::unit(), OutputBound::interval(1.0, 10.0)};
}

struct Surrogate {
  MlpParams mlp;

  static Surrogate init(std::size_t latent_dim, const SurrogateConfig& cfg, Rng& rng) {
    cfg.validate();
    std::vector<std::size_t> sizes{latent_dim};
    for (std::size_t l = 0; l + 1 < cfg.layers; ++l) sizes.push_back(cfg.hidden);
    sizes.push_back(kNumProperties);
    return {MlpParams::init(sizes, cfg.activation, property_bounds(), rng)};
  }

  std::size_t latent_dim() const { return mlp.in_dim(); }
  std::vector<Tensor*> parameters() { return mlp.parameters(); }

  /// zbar: [B, d] -> [B, 2].
  Var forward(Scope& s, Var zbar) const { return mlp_forward(s, mlp, zbar); }

  toy::PropertyVector predict(const Tensor& zbar) const {
    require(zbar.size() == latent_dim(), "surrogate: pooled latent has wrong size");
    require(zbar.all_finite(), "surrogate: non-finite pooled latent");
    Tensor y = mlp_apply(mlp, zbar.reshaped(Shape{1, zbar.size()}));
    return {y[0], y[1]};
  }

  /// Rows of `zbar` are pooled latents.
  std::vector<toy::PropertyVector> predict_batch(const Tensor& zbar) const {
    Tensor y = mlp_apply(mlp, zbar);
    std::vector<toy::PropertyVector> out(y.rows());
    for (std::size_t i = 0; i < y.rows(); ++i) out[i] = {y(i, 0), y(i, 1)};
    return out;
  }
};

/// Mean squared error over properties (and batch rows).
inline Var prop_loss(Graph& g, Var pred, const Tensor& y) {
  require(pred.value().shape() == y.shape(), "prop_loss: shape mismatch");
  return g.mean(g.square(g.sub(pred, g.constant(y))));
}

inline double prop_loss(const toy::PropertyVector& pred, const toy::PropertyVector& y) {
  const double a = pred.p1 - y.p1, b = pred.p2 - y.p2;
  return (a * a + b * b) / 2.0;
}

inline Tensor property_matrix(const std::vector<toy::PropertyVector>& ys) {
  Tensor t(Shape{ys.size(), kNumProperties});
  for (std::size_t i = 0; i < ys.size(); ++i) {
    t(i, 0) = ys[i].p1;
    t(i, 1) = ys[i].p2;
  }
  return t;
}

inline std::array<mo::Fidelity, 2> surrogate_fidelity(const Surrogate& s, const Tensor& zbar,
                                                      const std::vector<toy::PropertyVector>& truth) {
  require(zbar.rows() == truth.size() && !truth.empty(), "surrogate_fidelity: size mismatch");
  auto pred = s.predict_batch(zbar);
  std::vector<double> p1, p2, t1, t2;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    p1.push_back(pred[i].p1);
    p2.push_back(pred[i].p2);
    t1.push_back(truth[i].p1);
    t2.push_back(truth[i].p2);
  }
  return {mo::regression_fidelity(p1, t1), mo::regression_fidelity(p2, t2)};
}

inline Tensor take_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  Tensor out(Shape{rows.size(), t.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(t.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * t.cols()), t.cols(),
                out.data().begin() + static_cast<std::ptrdiff_t>(i * t.cols()));
  return out;
}

struct SurrogateFit {
  Surrogate model;
  std::array<mo::Fidelity, 2> heldout{};
  std::size_t best_epoch = 0;
};

/// Trains a fresh surrogate on (zbar, y) rows; the returned parameters are
/// those of the epoch with the lowest held-out loss.
inline SurrogateFit fit_surrogate(const Tensor& z_train, const std::vector<toy::PropertyVector>& y_train,
                                  const Tensor& z_held, const std::vector<toy::PropertyVector>& y_held,
                                  const SurrogateConfig& cfg, Rng& rng) {
  require(z_train.rows() == y_train.size() && !y_train.empty(), "fit_surrogate: empty or mismatched dataset");
  require(z_held.rows() == y_held.size() && !y_held.empty(), "fit_surrogate: empty held-out set");
  SurrogateFit fit{Surrogate::init(z_train.cols(), cfg, rng)};
  Surrogate best = fit.model;
  const Tensor y_all = property_matrix(y_train);
  const Tensor y_h = property_matrix(y_held);
  AdamW opt({.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(y_train.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + cfg.batch)));
      Graph g;
      Scope s(g, true);
      Var loss = prop_loss(g, fit.model.forward(s, g.constant(take_rows(z_train, rows))), take_rows(y_all, rows));
      if (!std::isfinite(loss.value().item())) throw NumericFailure("fit_surrogate: non-finite loss", -1, "surrogate");
      auto gr = g.backward(loss);
      opt.step(fit.model.parameters(), s.collect(gr, fit.model.parameters()));
    }
    Graph g;
    Scope s(g, false);
    const double held = prop_loss(g, fit.model.forward(s, g.constant(z_held)), y_h).value().item();
    if (held < best_loss) {
      best_loss = held;
      best = fit.model;
      fit.best_epoch = epoch + 1;
    }
  }
  fit.model = best;
  fit.heldout = surrogate_fidelity(fit.model, z_held, y_held);
  return fit;
}

inline void surrogate_to_checkpoint(Checkpoint& ck, Surrogate& s) {
  ck.meta["surrogate"] = {{"pooling", "mean"}, {"heads", {"p1:sigmoid[0,1]", "p2:scaled_sigmoid[1,10]"}}};
  mlp_to_checkpoint(ck, "surrogate", s.mlp);
}

inline Surrogate surrogate_from_checkpoint(const Checkpoint& ck) {
  Surrogate s{mlp_from_checkpoint(ck, "surrogate")};
  if (s.mlp.out_dim() != kNumProperties) throw IoError("checkpoint: surrogate must have two outputs");
  return s;
}

}  // namespace moltenflow
