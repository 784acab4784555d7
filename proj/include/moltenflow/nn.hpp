// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "moltenflow/graph.hpp"

namespace moltenflow {

/// Gradients aligned with a model's parameter list.
using GradMap = std::vector<Tensor>;

/// Binds parameter tensors to graph leaves for one forward pass. Trainable
/// scopes create differentiable leaves; frozen scopes create constants.
class Scope {
 public:
  Scope(Graph& g, bool trainable) : g_(g), trainable_(trainable) {}

  Graph& graph() noexcept { return g_; }

  Var operator()(const Tensor& t) {
    auto it = bound_.find(&t);
    if (it != bound_.end()) return it->second;
    Var v = trainable_ ? g_.param(t) : g_.constant(t);
    bound_.emplace(&t, v);
    return v;
  }

  GradMap collect(const Gradients& gr, const std::vector<Tensor*>& params) const {
    GradMap out;
    out.reserve(params.size());
    for (const Tensor* p : params) {
      auto it = bound_.find(p);
      out.push_back(it == bound_.end() ? Tensor::zeros_like(*p) : gr.of(it->second));
    }
    return out;
  }

 private:
  Graph& g_;
  bool trainable_;
  std::unordered_map<const Tensor*, Var> bound_;
};

enum class Activation { Identity, Tanh, Sigmoid, Silu };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Tanh: return "tanh";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Silu: return "silu";
  }
  return "?";
}

inline Activation activation_from(const std::string& s) {
  if (s == "identity") return Activation::Identity;
  if (s == "tanh") return Activation::Tanh;
  if (s == "sigmoid") return Activation::Sigmoid;
  if (s == "silu") return Activation::Silu;
  throw ContractViolation("unknown activation '" + s + "'");
}

inline Var activate(Graph& g, Var x, Activation a) {
  switch (a) {
    case Activation::Identity: return x;
    case Activation::Tanh: return g.tanh(x);
    case Activation::Sigmoid: return g.sigmoid(x);
    case Activation::Silu: return g.silu(x);
  }
  return x;
}

/// Output bounding applied to one output column.
struct OutputBound {
  enum class Kind { Identity, Sigmoid, ScaledSigmoid };
  Kind kind = Kind::Identity;
  double lo = 0.0;
  double hi = 1.0;

  static OutputBound identity() { return {}; }
  static OutputBound unit() { return {Kind::Sigmoid, 0.0, 1.0}; }
  static OutputBound interval(double lo, double hi) {
    require(lo < hi, "OutputBound: empty interval");
    return {Kind::ScaledSigmoid, lo, hi};
  }
};

/// Feed-forward network. sizes = {in, h1, ..., out}; activations[i] follows
/// layer i (the last is usually Identity). `bounds` is empty (no bounding),
/// a single entry for every output, or one entry per output column.
struct MlpParams {
  std::vector<std::size_t> sizes;
  std::vector<Activation> activations;
  std::vector<OutputBound> bounds;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;

  static MlpParams init(std::vector<std::size_t> sizes, Activation hidden,
                        std::vector<OutputBound> bounds, Rng& rng, double out_scale = 1.0) {
    require(sizes.size() >= 2, "MlpParams: need at least input and output sizes");
    MlpParams p;
    p.sizes = std::move(sizes);
    p.bounds = std::move(bounds);
    const std::size_t layers = p.sizes.size() - 1;
    require(p.bounds.empty() || p.bounds.size() == 1 || p.bounds.size() == p.sizes.back(),
            "MlpParams: bounds must be empty, one, or one per output");
    for (std::size_t l = 0; l < layers; ++l) {
      const double stddev = (l + 1 == layers ? out_scale : 1.0) /
                            std::sqrt(static_cast<double>(p.sizes[l]));
      p.weights.push_back(Tensor::randn(Shape{p.sizes[l], p.sizes[l + 1]}, rng, stddev));
      p.biases.push_back(Tensor::zeros(Shape{p.sizes[l + 1]}));
      p.activations.push_back(l + 1 == layers ? Activation::Identity : hidden);
    }
    return p;
  }

  std::size_t in_dim() const { return sizes.front(); }
  std::size_t out_dim() const { return sizes.back(); }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.push_back(&weights[l]);
      out.push_back(&biases[l]);
    }
    return out;
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      f(prefix + ".w" + std::to_string(l), weights[l]);
      f(prefix + ".b" + std::to_string(l), biases[l]);
    }
  }
};

namespace detail {
// lo + (hi - lo) * sigmoid(x) per column.
inline Var apply_bounds(Graph& g, Var y, const std::vector<OutputBound>& bounds) {
  if (bounds.empty()) return y;
  const std::size_t n = y.value().cols();
  auto one = [&](Var col, const OutputBound& b) {
    switch (b.kind) {
      case OutputBound::Kind::Identity: return col;
      case OutputBound::Kind::Sigmoid: return g.sigmoid(col);
      case OutputBound::Kind::ScaledSigmoid:
        return g.add_scalar(g.scale(g.sigmoid(col), b.hi - b.lo), b.lo);
    }
    return col;
  };
  if (bounds.size() == 1) return one(y, bounds[0]);
  Var out = one(g.slice_cols(y, 0, 1), bounds[0]);
  for (std::size_t j = 1; j < n; ++j) out = g.concat_cols(out, one(g.slice_cols(y, j, 1), bounds[j]));
  return out;
}
}  // namespace detail

/// Differentiable forward pass; `x` is [batch, in] (or [in]).
inline Var mlp_forward(Scope& s, const MlpParams& p, Var x) {
  Graph& g = s.graph();
  require(x.value().cols() == p.in_dim(),
          "mlp: input width " + std::to_string(x.value().cols()) + " != " +
              std::to_string(p.in_dim()));
  if (x.value().rank() != 2) x = g.reshape(x, Shape{1, x.value().size()});
  Var h = x;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    h = g.add_bias(g.matmul(h, s(p.weights[l])), s(p.biases[l]));
    h = activate(g, h, p.activations[l]);
  }
  return detail::apply_bounds(g, h, p.bounds);
}

/// Inference-only forward pass.
inline Tensor mlp_apply(const MlpParams& p, const Tensor& input) {
  Graph g;
  Scope s(g, false);
  return mlp_forward(s, p, g.constant(input)).value();
}

/// Interleaved sin/cos embedding: entry 2j = sin(f_j t), 2j+1 = cos(f_j t),
/// with f_j geometrically spaced over [freq_min, freq_max].
inline Tensor time_embed(double t, std::size_t dim, double freq_min = 1.0,
                         double freq_max = 1.0e4) {
  require(t >= 0.0 && t <= 1.0, "time_embed: t outside [0,1]");
  require(dim > 0 && dim % 2 == 0, "time_embed: dim must be positive and even");
  Tensor out(Shape{dim});
  const std::size_t half = dim / 2;
  const double ratio = std::log(freq_max / freq_min);
  for (std::size_t j = 0; j < half; ++j) {
    const double frac = half > 1 ? static_cast<double>(j) / static_cast<double>(half - 1) : 0.0;
    const double f = freq_min * std::exp(ratio * frac);
    out[2 * j] = std::sin(f * t);
    out[2 * j + 1] = std::cos(f * t);
  }
  return out;
}

}  // namespace moltenflow
