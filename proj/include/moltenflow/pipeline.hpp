// SPDX-License-Identifier: Apache-2.0
//
// Staged training: (1) VAE pretraining, (2) joint property fine-tuning of VAE
// and surrogate, (3) flow matching on posterior samples of the fine-tuned
// encoder. Each stage writes one checkpoint into a work directory.
//
//   <workdir>/vae.ckpt        stage "pretrain"
//   <workdir>/finetune.ckpt   stage "finetune" (VAE + surrogate)
//   <workdir>/flow.ckpt       flow field
#pragma once

#include <filesystem>
#include <string>

#include "moltenflow/config.hpp"
#include "moltenflow/flowmatch.hpp"
#include "moltenflow/seqvae.hpp"
#include "moltenflow/surrogate.hpp"
#include "moltenflow/toyset.hpp"

namespace moltenflow {

enum class Stage { Vae, Finetune, Flow };

inline Stage stage_from(const std::string& s) {
  if (s == "vae") return Stage::Vae;
  if (s == "finetune") return Stage::Finetune;
  if (s == "flow") return Stage::Flow;
  throw ConfigError("unknown stage '" + s + "' (expected vae, finetune or flow)");
}

inline std::string stage_file(const std::string& workdir, Stage s) {
  switch (s) {
    case Stage::Vae: return (std::filesystem::path(workdir) / "vae.ckpt").string();
    case Stage::Finetune: return (std::filesystem::path(workdir) / "finetune.ckpt").string();
    case Stage::Flow: return (std::filesystem::path(workdir) / "flow.ckpt").string();
  }
  return {};
}

inline toy::Dataset load_dataset(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("dataset not found", path);
  return toy::read_dataset(path);
}

/// Flattened posterior parameters of `records` as [N, K*d] rows.
inline LatentTargets posterior_targets(const SeqVae& vae, const std::vector<toy::Record>& records) {
  std::vector<toy::TokenString> xs;
  for (const auto& r : records) xs.push_back(r.tokens);
  auto post = vae.encode(xs);
  const std::size_t D = vae.cfg.latent_size();
  LatentTargets t{Tensor(Shape{post.size(), D}), Tensor(Shape{post.size(), D})};
  for (std::size_t i = 0; i < post.size(); ++i) {
    std::copy(post[i].mu.data().begin(), post[i].mu.data().end(), t.mu.data().begin() + static_cast<std::ptrdiff_t>(i * D));
    std::copy(post[i].log_sigma.data().begin(), post[i].log_sigma.data().end(),
              t.log_sigma.data().begin() + static_cast<std::ptrdiff_t>(i * D));
  }
  return t;
}

inline std::vector<toy::PropertyVector> properties_of(const std::vector<toy::Record>& rs) {
  std::vector<toy::PropertyVector> out;
  for (const auto& r : rs) out.push_back(r.props);
  return out;
}

inline json epochs_json(const VaeTrainLog& log) {
  json a = json::array();
  for (const auto& e : log.epochs)
    a.push_back({{"epoch", e.epoch}, {"train", e.train_loss}, {"val", e.val_loss}, {"recon", e.val_recon},
                 {"kl", e.val_kl}, {"prop", e.val_prop}});
  return a;
}

struct StageResult {
  std::string path;
  json summary;
};

namespace detail {
// Numeric failures carry the stage they happened in.
template <class F>
auto tag_stage(const std::string& stage, F&& f) {
  try {
    return f();
  } catch (const NumericFailure& e) {
    if (e.stage() == stage) throw;
    throw NumericFailure(e.what(), e.where(), stage);
  }
}
}  // namespace detail

inline StageResult train_stage_vae(const RunConfig& cfg, const toy::Dataset& ds, const std::string& workdir,
                                   std::uint64_t seed) {
  return detail::tag_stage("vae", [&] {
    Rng rng(seed);
    SeqVae vae = SeqVae::init(cfg.vae, rng);
    VaeTrainLog log = train_vae(vae, nullptr, ds.subset(toy::Split::Train), ds.subset(toy::Split::Validation), rng);
    Checkpoint ck = vae_checkpoint(vae, "pretrain", seed, log.steps);
    ck.meta["best_epoch"] = log.best_epoch;
    ck.meta["epochs"] = epochs_json(log);
    std::filesystem::create_directories(workdir);
    const std::string path = stage_file(workdir, Stage::Vae);
    save_checkpoint(path, ck);
    return StageResult{path, {{"stage", "vae"}, {"best_epoch", log.best_epoch}, {"best_val", log.best_val}}};
  });
}

inline std::array<mo::Fidelity, 2> fidelity_on(const SeqVae& vae, const Surrogate& sur,
                                               const std::vector<toy::Record>& rs) {
  return surrogate_fidelity(sur, pooled_means(vae, rs), properties_of(rs));
}

inline StageResult train_stage_finetune(const RunConfig& cfg, const toy::Dataset& ds, const std::string& workdir,
                                        std::uint64_t seed) {
  return detail::tag_stage("finetune", [&] {
    const std::string src = stage_file(workdir, Stage::Vae);
    if (!std::filesystem::exists(src)) throw IoError("pretrained VAE checkpoint missing; run --stage vae first", src);
    SeqVae vae = vae_from_checkpoint(load_checkpoint(src));
    vae.cfg.lambda = cfg.vae.lambda;
    vae.cfg.beta_max = cfg.vae.beta_max;
    vae.cfg.finetune_lr = cfg.vae.finetune_lr;
    vae.cfg.finetune_epochs = cfg.vae.finetune_epochs;
    vae.cfg.finetune_batch = cfg.vae.finetune_batch;
    vae.cfg.grad_clip = cfg.vae.grad_clip;
    Rng rng(seed ^ 0x5bd1e995ULL);
    auto train = ds.subset(toy::Split::Train), val = ds.subset(toy::Split::Validation);
    // A surrogate fitted on the frozen pretrained latents gives the reference
    // fidelity and is the starting point of the joint update.
    SurrogateFit before = fit_surrogate(pooled_means(vae, train), properties_of(train), pooled_means(vae, val),
                                        properties_of(val), cfg.surrogate, rng);
    Surrogate sur = before.model;
    VaeTrainLog log = train_vae(vae, &sur, train, val, rng);
    auto after = fidelity_on(vae, sur, val);
    Checkpoint ck = vae_checkpoint(vae, "finetune", seed, log.steps);
    surrogate_to_checkpoint(ck, sur);
    ck.meta["best_epoch"] = log.best_epoch;
    ck.meta["epochs"] = epochs_json(log);
    json fid = {{"before_finetune", {{"p1_r2", before.heldout[0].r2}, {"p2_r2", before.heldout[1].r2}}},
                {"after_finetune", {{"p1_r2", after[0].r2}, {"p2_r2", after[1].r2}}}};
    ck.meta["surrogate_fidelity"] = fid;
    const std::string path = stage_file(workdir, Stage::Finetune);
    save_checkpoint(path, ck);
    return StageResult{path, {{"stage", "finetune"}, {"best_epoch", log.best_epoch}, {"best_val", log.best_val},
                              {"surrogate_fidelity", fid}}};
  });
}

inline StageResult train_stage_flow(const RunConfig& cfg, const toy::Dataset& ds, const std::string& workdir,
                                    std::uint64_t seed) {
  return detail::tag_stage("flow", [&] {
    std::string src = stage_file(workdir, Stage::Finetune);
    if (!std::filesystem::exists(src)) {
      if (!cfg.allow_pretrain_latents)
        throw ConfigError("flow training needs the fine-tuned encoder (" + src +
                          "); pass --allow-pretrain-latents to use the pretrained one");
      src = stage_file(workdir, Stage::Vae);
      if (!std::filesystem::exists(src)) throw IoError("no VAE checkpoint found", src);
    }
    Checkpoint vck = load_checkpoint(src);
    const std::string vstage = vck.meta.value("stage", "");
    if (vstage != "finetune" && !cfg.allow_pretrain_latents)
      throw ConfigError("flow training refuses a '" + vstage + "' encoder without --allow-pretrain-latents");
    SeqVae vae = vae_from_checkpoint(vck);
    Rng rng(seed ^ 0x9e3779b9ULL);
    LatentTargets train = posterior_targets(vae, ds.subset(toy::Split::Train));
    LatentTargets val = posterior_targets(vae, ds.subset(toy::Split::Validation));
    FlowField field = FlowField::init(vae.cfg.latent_size(), cfg.flow, rng);
    FlowTrainLog log = train_flow(field, train, val, cfg.flow, rng);
    Checkpoint ck = flow_checkpoint(field, cfg.flow, seed, log.steps,
                                    {{"encoder_stage", vstage}, {"samples", "posterior"}, {"K", vae.cfg.K},
                                     {"d", vae.cfg.d}});
    ck.meta["best_epoch"] = log.best_epoch;
    json ep = json::array();
    for (const auto& e : log.epochs) ep.push_back({{"epoch", e.epoch}, {"train", e.train_loss}, {"val", e.val_loss}});
    ck.meta["epochs"] = ep;
    const std::string path = stage_file(workdir, Stage::Flow);
    save_checkpoint(path, ck);
    return StageResult{path, {{"stage", "flow"}, {"best_epoch", log.best_epoch}, {"best_val", log.best_val}}};
  });
}

inline StageResult train_stage(Stage s, const RunConfig& cfg, const toy::Dataset& ds, const std::string& workdir,
                               std::uint64_t seed) {
  switch (s) {
    case Stage::Vae: return train_stage_vae(cfg, ds, workdir, seed);
    case Stage::Finetune: return train_stage_finetune(cfg, ds, workdir, seed);
    case Stage::Flow: return train_stage_flow(cfg, ds, workdir, seed);
  }
  throw ConfigError("unknown stage");
}

/// All three stages in order.
inline std::vector<StageResult> pipeline_train(const RunConfig& cfg, const toy::Dataset& ds,
                                               const std::string& workdir, std::uint64_t seed) {
  cfg.validate();
  std::vector<StageResult> out;
  for (Stage s : {Stage::Vae, Stage::Finetune, Stage::Flow}) out.push_back(train_stage(s, cfg, ds, workdir, seed));
  return out;
}

/// Trained models needed by generation and optimization.
struct Models {
  SeqVae vae;
  Surrogate surrogate;
  FlowField flow;
  json digests = json::object();  // file -> sha256, filled by callers that need it
};

inline Models load_models(const std::string& workdir) {
  const std::string fpath = stage_file(workdir, Stage::Finetune), wpath = stage_file(workdir, Stage::Flow);
  if (!std::filesystem::exists(fpath)) throw IoError("fine-tuned checkpoint missing", fpath);
  if (!std::filesystem::exists(wpath)) throw IoError("flow checkpoint missing", wpath);
  Checkpoint fck = load_checkpoint(fpath);
  Models m{vae_from_checkpoint(fck), surrogate_from_checkpoint(fck), flow_from_checkpoint(load_checkpoint(wpath))};
  if (m.flow.latent_dim != m.vae.cfg.latent_size()) throw IoError("flow latent width does not match the VAE", wpath);
  if (m.surrogate.latent_dim() != m.vae.cfg.d) throw IoError("surrogate width does not match the VAE", fpath);
  return m;
}

}  // namespace moltenflow
