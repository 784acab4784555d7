// SPDX-License-Identifier: Apache-2.0
//
// Run configuration and named profiles. A config file is a JSON document that
// overlays a profile; unknown keys and type mismatches are config errors.
#pragma once

#include <string>
#include <vector>

#include "moltenflow/flowmatch.hpp"
#include "moltenflow/guidance.hpp"
#include "moltenflow/seqvae.hpp"
#include "moltenflow/surrogate.hpp"

namespace moltenflow {

inline constexpr std::array<const char*, 3> kProfiles{"desk", "paper-tuned", "paper-scale"};

struct BudgetConfig {
  std::size_t budget = 100;
  std::size_t init_size = 10;
  std::size_t batch = 1;
  bool free_init = false;  // initial pool evaluations count against the budget unless set
  std::size_t history_window = 10;
  double diversity_lambda = 2.0;
  double pareto_weight = 2.0;
  std::array<double, 2> reference{0.0, 10.0};  // (p1, p2)
  double ci_level = 0.90;

  void validate() const {
    if (budget == 0) throw ConfigError("budget: B must be positive");
    if (init_size == 0) throw ConfigError("budget: init_size must be positive");
    if (!free_init && init_size >= budget) throw ConfigError("budget: init_size must be below B when counted");
    if (batch == 0) throw ConfigError("budget: batch must be positive");
    if (history_window == 0) throw ConfigError("budget: history_window must be positive");
    if (!(diversity_lambda >= 0.0) || !(pareto_weight > 0.0)) throw ConfigError("budget: bad selection weights");
    if (!(ci_level > 0.0 && ci_level < 1.0)) throw ConfigError("budget: ci_level must be in (0,1)");
  }
};

struct SweepConfig {
  std::vector<double> gammas{0.001, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0};
  std::vector<std::uint64_t> seeds{42, 123, 456};
  std::size_t candidates = 100;  // starting molecules from the test split
  double ref_margin = 0.1;
  double ci_level = 0.95;

  void validate() const {
    if (gammas.empty()) throw ConfigError("sweep: gamma grid must be nonempty");
    for (double g : gammas)
      if (!(std::isfinite(g) && g >= 0.0)) throw ConfigError("sweep: gammas must be finite and >= 0");
    if (seeds.empty()) throw ConfigError("sweep: seeds must be nonempty");
    if (candidates < 2) throw ConfigError("sweep: need at least two candidates");
    if (!(ref_margin >= 0.0)) throw ConfigError("sweep: ref_margin must be >= 0");
    if (!(ci_level > 0.0 && ci_level < 1.0)) throw ConfigError("sweep: ci_level must be in (0,1)");
  }
};

struct EvalConfig {
  std::size_t bootstrap = 1000;
  std::uint64_t projection_seed = 7;
  std::size_t kl_bins = 50;

  void validate() const {
    if (bootstrap == 0) throw ConfigError("eval: bootstrap must be >= 1");
    if (kl_bins == 0) throw ConfigError("eval: kl_bins must be positive");
  }
};

struct RunConfig {
  std::string profile = "desk";
  VaeConfig vae;
  SurrogateConfig surrogate;
  FlowConfig flow;
  GuidanceConfig guidance;
  // Weights divide each property by its range (p1 in [0,1], p2 in [1,10]) so
  // neither term dominates the directional objective.
  ObjectiveSpec objective = ObjectiveSpec::directional({+1.0, -1.0}, {1.0, 1.0 / 9.0});
  GradientAscentConfig gradient_ascent;
  BudgetConfig budget;
  SweepConfig sweep;
  EvalConfig eval;
  bool allow_pretrain_latents = false;
  std::size_t generate_count = 500;

  void validate() const {
    vae.validate();
    surrogate.validate();
    flow.validate();
    guidance.validate();
    objective.validate();
    gradient_ascent.validate();
    budget.validate();
    sweep.validate();
    eval.validate();
    if (generate_count == 0) throw ConfigError("generate_count must be positive");
  }
};

inline RunConfig profile_config(const std::string& name) {
  RunConfig c;
  c.profile = name;
  if (name == "desk") {
    c.flow.epochs = 60;
  } else if (name == "paper-tuned") {
    // Budgeted-experiment guidance values; same desk-sized models.
    c.guidance = GuidanceConfig{36.07, 0.80, 12, 0.89, 5.0, true};
  } else if (name == "paper-scale") {
    c.vae.K = 8;
    c.vae.d = 128;
    c.vae.embed = 128;
    c.vae.hidden = 128;
    c.vae.lr = 1e-4;
    c.vae.batch = 256;
    c.vae.epochs = 150;
    c.vae.finetune_lr = 1e-3;
    c.vae.finetune_batch = 1024;
    c.vae.finetune_epochs = 20;
    c.surrogate.hidden = 1024;
    c.flow.hidden = 256;
    c.flow.lr = 2e-4;
    c.flow.batch = 1024;
    c.flow.epochs = 100;
    c.flow.ot_coupling = true;
    c.sweep.candidates = 1000;
  } else {
    throw ConfigError("unknown profile '" + name + "' (expected desk, paper-tuned or paper-scale)");
  }
  return c;
}

// ---------------------------------------------------------------- JSON

inline json to_json(const RunConfig& c) {
  const auto& s = c.surrogate;
  const auto& f = c.flow;
  const auto& b = c.budget;
  return {
      {"profile", c.profile},
      {"vae", vae_config_json(c.vae)},
      {"surrogate",
       {{"hidden", s.hidden}, {"layers", s.layers}, {"activation", activation_name(s.activation)}, {"lr", s.lr},
        {"weight_decay", s.weight_decay}, {"batch", s.batch}, {"epochs", s.epochs}}},
      {"flow",
       {{"hidden", f.hidden}, {"layers", f.layers}, {"time_dim", f.time_dim}, {"freq_min", f.freq_min},
        {"freq_max", f.freq_max}, {"lr", f.lr}, {"weight_decay", f.weight_decay}, {"grad_clip", f.grad_clip},
        {"batch", f.batch}, {"epochs", f.epochs}, {"ot_coupling", f.ot_coupling}, {"sample_steps", f.sample_steps}}},
      {"guidance", c.guidance.to_json()},
      {"objective",
       {{"mode", c.objective.mode == ObjectiveSpec::Mode::Directional ? "directional" : "target"},
        {"weights", c.objective.weights}, {"signs", c.objective.signs}, {"targets", c.objective.targets}}},
      {"gradient_ascent",
       {{"eta", c.gradient_ascent.eta}, {"steps", c.gradient_ascent.steps}, {"sigma", c.gradient_ascent.sigma}}},
      {"budget",
       {{"budget", b.budget}, {"init_size", b.init_size}, {"batch", b.batch}, {"free_init", b.free_init},
        {"history_window", b.history_window}, {"diversity_lambda", b.diversity_lambda},
        {"pareto_weight", b.pareto_weight}, {"reference", b.reference}, {"ci_level", b.ci_level}}},
      {"sweep",
       {{"gammas", c.sweep.gammas}, {"seeds", c.sweep.seeds}, {"candidates", c.sweep.candidates},
        {"ref_margin", c.sweep.ref_margin}, {"ci_level", c.sweep.ci_level}}},
      {"eval",
       {{"bootstrap", c.eval.bootstrap}, {"projection_seed", c.eval.projection_seed}, {"kl_bins", c.eval.kl_bins}}},
      {"allow_pretrain_latents", c.allow_pretrain_latents},
      {"generate_count", c.generate_count},
  };
}

namespace detail {

inline bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    // Integers may not be replaced by fractional values.
    return !(a.is_number_integer() || a.is_number_unsigned()) || b.is_number_integer() || b.is_number_unsigned();
  }
  if (a.is_null() || b.is_null()) return true;  // optional fields
  return a.type() == b.type();
}

inline void overlay(json& base, const json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config: '" + path + "' must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("config: unknown key '" + where + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      overlay(slot, value, where);
    } else {
      if (!same_kind(slot, value)) throw ConfigError("config: wrong type for '" + where + "'");
      slot = value;
    }
  }
}

}  // namespace detail

inline RunConfig from_json(const json& j) {
  RunConfig c;
  try {
    c.profile = j.at("profile").get<std::string>();
    c.vae = vae_config_from_json(j.at("vae"));
    const auto& s = j.at("surrogate");
    c.surrogate = {s.at("hidden"), s.at("layers"), activation_from(s.at("activation").get<std::string>()),
                   s.at("lr"), s.at("weight_decay"), s.at("batch"), s.at("epochs")};
    const auto& f = j.at("flow");
    c.flow = {f.at("hidden"), f.at("layers"), f.at("time_dim"), f.at("freq_min"), f.at("freq_max"),
              f.at("lr"), f.at("weight_decay"), f.at("grad_clip"), f.at("batch"), f.at("epochs"),
              f.at("ot_coupling"), f.at("sample_steps")};
    const auto& g = j.at("guidance");
    c.guidance.gamma = g.at("gamma");
    c.guidance.sigma = g.at("sigma");
    c.guidance.steps = g.at("steps");
    c.guidance.t_start = g.at("t_start");
    c.guidance.clip_norm = g.at("clip_norm").is_null() ? std::nullopt : std::optional<double>(g.at("clip_norm"));
    c.guidance.normalize_gradient = g.at("normalize_gradient");
    const auto& o = j.at("objective");
    const std::string mode = o.at("mode");
    if (mode != "directional" && mode != "target") throw ConfigError("config: objective.mode must be directional or target");
    c.objective.mode = mode == "directional" ? ObjectiveSpec::Mode::Directional : ObjectiveSpec::Mode::Target;
    c.objective.weights = o.at("weights");
    c.objective.signs = o.at("signs");
    c.objective.targets = o.at("targets");
    const auto& ga = j.at("gradient_ascent");
    c.gradient_ascent = {ga.at("eta"), ga.at("steps"), ga.at("sigma")};
    const auto& b = j.at("budget");
    c.budget = {b.at("budget"), b.at("init_size"), b.at("batch"), b.at("free_init"), b.at("history_window"),
                b.at("diversity_lambda"), b.at("pareto_weight"), b.at("reference"), b.at("ci_level")};
    const auto& sw = j.at("sweep");
    c.sweep = {sw.at("gammas"), sw.at("seeds"), sw.at("candidates"), sw.at("ref_margin"), sw.at("ci_level")};
    const auto& e = j.at("eval");
    c.eval = {e.at("bootstrap"), e.at("projection_seed"), e.at("kl_bins")};
    c.allow_pretrain_latents = j.at("allow_pretrain_latents");
    c.generate_count = j.at("generate_count");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

/// Profile named in `user` (default "desk") with `user` overlaid on it.
inline RunConfig resolve_config(const json& user, const std::string& default_profile = "desk") {
  const std::string profile = user.is_object() && user.contains("profile") && user["profile"].is_string()
                                  ? user["profile"].get<std::string>()
                                  : default_profile;
  json base = to_json(profile_config(profile));
  if (!user.is_null()) detail::overlay(base, user, "");
  return from_json(base);
}

inline RunConfig load_config_file(const std::string& path, const std::string& default_profile = "desk") {
  json user;
  try {
    user = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config: cannot parse " + path + ": " + e.what());
  }
  return resolve_config(user, default_profile);
}

}  // namespace moltenflow
