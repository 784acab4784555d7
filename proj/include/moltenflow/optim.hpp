// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "moltenflow/nn.hpp"

namespace moltenflow {

inline double global_norm(const GradMap& grads) {
  double s = 0.0;
  for (const auto& g : grads) s += g.squared_norm();
  return std::sqrt(s);
}

/// Rescales `grads` in place so the global L2 norm is at most `max_norm`.
/// Returns the factor applied (1 when unchanged).
inline double clip_grad_norm(GradMap& grads, double max_norm) {
  require(max_norm > 0.0, "clip_grad_norm: max_norm must be positive");
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw NumericFailure("clip_grad_norm: non-finite gradient norm");
  if (norm <= max_norm) return 1.0;
  const double scale = max_norm / norm;
  for (auto& g : grads) g *= scale;
  return scale;
}

/// Bias-corrected Adam with decoupled weight decay.
class AdamW {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW() = default;
  explicit AdamW(Options opt) : opt_(opt) {}

  const Options& options() const noexcept { return opt_; }
  void set_lr(double lr) { opt_.lr = lr; }
  std::uint64_t steps() const noexcept { return step_; }

  void step(const std::vector<Tensor*>& params, const GradMap& grads) {
    require(params.size() == grads.size(), "AdamW: parameter/gradient count mismatch");
    if (m_.empty()) {
      for (const Tensor* p : params) {
        m_.push_back(Tensor::zeros_like(*p));
        v_.push_back(Tensor::zeros_like(*p));
      }
    }
    require(m_.size() == params.size(), "AdamW: parameter list changed between steps");
    ++step_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      const Tensor& g = grads[k];
      require(p.shape() == g.shape() && p.shape() == m_[k].shape(), "AdamW: shape mismatch");
      Tensor& m = m_[k];
      Tensor& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g[i];
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= opt_.lr * (mhat / (std::sqrt(vhat) + opt_.eps) + opt_.weight_decay * p[i]);
      }
    }
  }

 private:
  Options opt_{};
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::uint64_t step_ = 0;
};

}  // namespace moltenflow
