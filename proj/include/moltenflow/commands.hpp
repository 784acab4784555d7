// SPDX-License-Identifier: Apache-2.0
//
// Experiment commands behind the CLI. Each returns the artifact bundle it
// would persist, so callers can write it or compare report bodies directly.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "moltenflow/budget.hpp"
#include "moltenflow/config.hpp"
#include "moltenflow/evaluation.hpp"
#include "moltenflow/pipeline.hpp"
#include "moltenflow/report.hpp"
#include "moltenflow/sweep.hpp"

namespace moltenflow {

struct CommandContext {
  RunConfig cfg;
  std::string data_path = "data/toy_seed42.tsv";
  std::string workdir = "work";
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<std::string> existing_checkpoints(const std::string& workdir) {
  std::vector<std::string> out;
  for (Stage s : {Stage::Vae, Stage::Finetune, Stage::Flow})
    if (std::filesystem::exists(stage_file(workdir, s))) out.push_back(stage_file(workdir, s));
  return out;
}

inline RunArtifacts bundle(const std::string& command, const CommandContext& ctx, json body) {
  RunArtifacts a;
  a.command = command;
  body["command"] = command;
  body["seed"] = ctx.seed;
  a.report = std::move(body);
  a.config = to_json(ctx.cfg);
  a.checkpoints = existing_checkpoints(ctx.workdir);
  return a;
}

inline std::string structures_text(const CandidateSet& c) {
  std::string out;
  for (std::size_t i = 0; i < c.structures.size(); ++i) {
    std::ostringstream line;
    line.precision(17);
    line << toy::to_text(c.structures[i].canonical_tokens) << '\t' << c.oracle[i].p1 << '\t' << c.oracle[i].p2 << '\n';
    out += line.str();
  }
  return out;
}

}  // namespace detail

inline RunArtifacts cmd_gen_data(const CommandContext& ctx, std::size_t count, const std::string& out_path) {
  toy::Dataset ds = toy::generate_dataset(ctx.seed, count);
  const auto parent = std::filesystem::path(out_path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  toy::write_dataset(out_path, ds.records);
  json body{{"records", ds.records.size()},
            {"train", ds.subset(toy::Split::Train).size()},
            {"validation", ds.subset(toy::Split::Validation).size()},
            {"test", ds.subset(toy::Split::Test).size()},
            {"sha256", sha256_file(out_path)},
            {"path", std::filesystem::path(out_path).filename().string()}};
  return detail::bundle("gen-data", ctx, body);
}

inline RunArtifacts cmd_train(const CommandContext& ctx, const std::vector<Stage>& stages) {
  ctx.cfg.validate();
  const toy::Dataset ds = load_dataset(ctx.data_path);
  json results = json::array();
  for (Stage s : stages) {
    StageResult r = train_stage(s, ctx.cfg, ds, ctx.workdir, ctx.seed);
    json summary = r.summary;
    summary["checkpoint"] = std::filesystem::path(r.path).filename().string();
    summary["sha256"] = sha256_file(r.path);
    results.push_back(summary);
  }
  return detail::bundle("train", ctx, {{"stages", results}});
}

inline RunArtifacts cmd_generate(const CommandContext& ctx, std::size_t count) {
  ctx.cfg.validate();
  const toy::Dataset ds = load_dataset(ctx.data_path);
  const Models m = load_models(ctx.workdir);
  const ReferenceSet ref = ReferenceSet::from_records(ds.subset(toy::Split::Train), ctx.cfg.eval.projection_seed);
  CandidateSet c = sample_candidates(m, count, ctx.cfg.flow.sample_steps, ctx.seed);
  const mo::ObjectivePoint reference = mo::auto_reference(ref.points, ctx.cfg.sweep.ref_margin);
  mo::EvalReport r = evaluate_candidates(c, ref.points, reference, ref, ctx.cfg.eval, ctx.cfg.sweep.ci_level, ctx.seed);
  r.extra = {{"sample_steps", ctx.cfg.flow.sample_steps}};
  RunArtifacts a = detail::bundle("generate", ctx, {{"eval", r.to_json()}});
  a.files["structures.tsv"] = detail::structures_text(c);
  return a;
}

inline RunArtifacts cmd_optimize(const CommandContext& ctx) {
  ctx.cfg.validate();
  const toy::Dataset ds = load_dataset(ctx.data_path);
  const Models m = load_models(ctx.workdir);
  const ReferenceSet ref = ReferenceSet::from_records(ds.subset(toy::Split::Train), ctx.cfg.eval.projection_seed);
  const auto test = ds.subset(toy::Split::Test);
  const SweepStart start = sweep_start(m, test, std::min(ctx.cfg.sweep.candidates, test.size()));
  CandidateSet c = guided_candidates(m, start, ctx.cfg.guidance, ctx.cfg.objective, ctx.seed);
  const mo::ObjectivePoint reference = mo::auto_reference(ref.points, ctx.cfg.sweep.ref_margin);
  mo::EvalReport r =
      evaluate_candidates(c, start.baseline, reference, ref, ctx.cfg.eval, ctx.cfg.sweep.ci_level, ctx.seed);
  r.extra = {{"guidance", ctx.cfg.guidance.to_json()}, {"objective", ctx.cfg.objective.to_json()}};
  RunArtifacts a = detail::bundle("optimize", ctx, {{"eval", r.to_json()}});
  a.files["structures.tsv"] = detail::structures_text(c);
  return a;
}

inline std::vector<BudgetedRun> budgeted_runs(const RunConfig& cfg, const Models& m, const toy::Dataset& ds,
                                              const ReferenceSet& ref, ProposerKind kind, std::uint64_t seed,
                                              std::size_t runs) {
  require(runs > 0, "budgeted: runs must be positive");
  const auto source = ds.subset(toy::Split::Train);
  std::vector<BudgetedRun> out;
  for (std::size_t i = 0; i < runs; ++i) out.push_back(budgeted_run(cfg, m, kind, source, ref, seed + i));
  return out;
}

inline RunArtifacts cmd_budgeted(const CommandContext& ctx, ProposerKind kind, std::size_t runs) {
  ctx.cfg.validate();
  const toy::Dataset ds = load_dataset(ctx.data_path);
  const Models m = load_models(ctx.workdir);
  const ReferenceSet ref = ReferenceSet::from_records(ds.subset(toy::Split::Train), ctx.cfg.eval.projection_seed);
  auto rs = budgeted_runs(ctx.cfg, m, ds, ref, kind, ctx.seed, runs);
  json per = json::array();
  std::ostringstream trace;
  trace.precision(17);
  trace << "seed,call,hv,hvi\n";
  for (const auto& r : rs) {
    per.push_back(r.report.to_json());
    for (const auto& t : r.trace) trace << r.seed << ',' << t.call << ',' << t.hv << ',' << t.hvi << '\n';
  }
  RunArtifacts a =
      detail::bundle("budgeted", ctx, {{"summary", summarize_runs(rs, ctx.cfg, ctx.seed).to_json()}, {"runs", per}});
  a.files["trace.csv"] = trace.str();
  return a;
}

inline RunArtifacts cmd_gamma_sweep(const CommandContext& ctx) {
  ctx.cfg.validate();
  const toy::Dataset ds = load_dataset(ctx.data_path);
  const Models m = load_models(ctx.workdir);
  const ReferenceSet ref = ReferenceSet::from_records(ds.subset(toy::Split::Train), ctx.cfg.eval.projection_seed);
  SweepResult r = gamma_sweep(ctx.cfg, m, ds, ref);
  json body{{"sweep", r.to_json()}};
  if (auto t = regime_signature(r)) body["regime"] = {{"small", t->small}, {"mid", t->mid}, {"high", t->high}};
  else body["regime"] = nullptr;
  RunArtifacts a = detail::bundle("gamma-sweep", ctx, body);
  a.files["table.tsv"] = r.table();
  return a;
}

/// Metric suite for an arbitrary structure list (one token string per line,
/// optional tab-separated trailing columns ignored) against the training split.
inline RunArtifacts cmd_eval(const CommandContext& ctx, const std::string& input) {
  ctx.cfg.validate();
  const toy::Dataset ds = load_dataset(ctx.data_path);
  const ReferenceSet ref = ReferenceSet::from_records(ds.subset(toy::Split::Train), ctx.cfg.eval.projection_seed);
  if (!std::filesystem::exists(input)) throw IoError("structure list not found", input);
  std::istringstream in(read_file(input));
  CandidateSet c;
  CountedOracle oracle(std::numeric_limits<std::size_t>::max());
  for (std::string line; std::getline(in, line);) {
    const std::string text = line.substr(0, line.find('\t'));
    if (text.empty() || text[0] == '#') continue;
    c.structures.push_back(toy::decode(toy::parse_tokens(text)));
    c.oracle.push_back(oracle.evaluate(c.structures.back()));
  }
  if (c.structures.empty()) throw IoError("structure list is empty", input);
  const mo::ObjectivePoint reference = mo::auto_reference(ref.points, ctx.cfg.sweep.ref_margin);
  mo::EvalReport r = evaluate_candidates(c, ref.points, reference, ref, ctx.cfg.eval, ctx.cfg.sweep.ci_level, ctx.seed);
  return detail::bundle("eval", ctx, {{"eval", r.to_json()}, {"input", std::filesystem::path(input).filename().string()}});
}

}  // namespace moltenflow
