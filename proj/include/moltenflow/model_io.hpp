// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint helpers for MLP parameter blocks. Layer sizes, activation kinds
// and output bounds are recorded under meta["mlp"][prefix].
#pragma once

#include <string>

#include "moltenflow/checkpoint.hpp"
#include "moltenflow/nn.hpp"

namespace moltenflow {

inline const char* bound_kind_name(OutputBound::Kind k) {
  switch (k) {
    case OutputBound::Kind::Identity: return "identity";
    case OutputBound::Kind::Sigmoid: return "sigmoid";
    case OutputBound::Kind::ScaledSigmoid: return "scaled_sigmoid";
  }
  return "identity";
}

inline OutputBound::Kind bound_kind_from(const std::string& s) {
  if (s == "identity") return OutputBound::Kind::Identity;
  if (s == "sigmoid") return OutputBound::Kind::Sigmoid;
  if (s == "scaled_sigmoid") return OutputBound::Kind::ScaledSigmoid;
  throw IoError("checkpoint: unknown bound kind '" + s + "'");
}

inline json mlp_layout(const MlpParams& p) {
  json j;
  j["sizes"] = p.sizes;
  json acts = json::array();
  for (auto a : p.activations) acts.push_back(activation_name(a));
  j["activations"] = acts;
  json bounds = json::array();
  for (const auto& b : p.bounds) bounds.push_back({{"kind", bound_kind_name(b.kind)}, {"lo", b.lo}, {"hi", b.hi}});
  j["bounds"] = bounds;
  return j;
}

inline void mlp_to_checkpoint(Checkpoint& ck, const std::string& prefix, MlpParams& p) {
  ck.meta["mlp"][prefix] = mlp_layout(p);
  p.visit(prefix, [&](const std::string& name, const Tensor& t) { ck.add(name, t); });
}

inline MlpParams mlp_from_checkpoint(const Checkpoint& ck, const std::string& prefix) {
  if (!ck.meta.contains("mlp") || !ck.meta["mlp"].contains(prefix))
    throw IoError("checkpoint: no MLP block '" + prefix + "'");
  const json& j = ck.meta["mlp"][prefix];
  MlpParams p;
  try {
    p.sizes = j.at("sizes").get<std::vector<std::size_t>>();
    for (const auto& a : j.at("activations")) p.activations.push_back(activation_from(a.get<std::string>()));
    for (const auto& b : j.at("bounds"))
      p.bounds.push_back({bound_kind_from(b.at("kind").get<std::string>()), b.at("lo").get<double>(),
                          b.at("hi").get<double>()});
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint: malformed MLP layout: ") + e.what());
  }
  if (p.sizes.size() < 2 || p.activations.size() + 1 != p.sizes.size())
    throw IoError("checkpoint: inconsistent MLP layout for '" + prefix + "'");
  for (std::size_t l = 0; l + 1 < p.sizes.size(); ++l) {
    const Tensor& w = ck.get(prefix + ".w" + std::to_string(l));
    const Tensor& b = ck.get(prefix + ".b" + std::to_string(l));
    if (w.shape() != Shape{p.sizes[l], p.sizes[l + 1]} || b.shape() != Shape{p.sizes[l + 1]})
      throw IoError("checkpoint: tensor shape mismatch in '" + prefix + "'");
    p.weights.push_back(w);
    p.biases.push_back(b);
  }
  return p;
}

}  // namespace moltenflow
