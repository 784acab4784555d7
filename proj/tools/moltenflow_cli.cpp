// SPDX-License-Identifier: Apache-2.0
//
// moltenflow command-line interface. Exit codes: 0 success, 2 config error,
// 3 numeric failure, 4 I/O error, 1 anything else.
#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "moltenflow/commands.hpp"

using namespace moltenflow;

namespace {

int exit_code_of(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const ConfigError& x) {
    std::cerr << "config error: " << x.what() << '\n';
    return 2;
  } catch (const ContractViolation& x) {
    std::cerr << "invalid argument: " << x.what() << '\n';
    return 2;
  } catch (const NumericFailure& x) {
    std::cerr << "numeric failure";
    if (!x.stage().empty()) std::cerr << " in stage " << x.stage();
    if (x.where() >= 0) std::cerr << " at " << x.where();
    std::cerr << ": " << x.what() << '\n';
    return 3;
  } catch (const IoError& x) {
    std::cerr << "I/O error: " << x.what() << '\n';
    return 4;
  } catch (const std::filesystem::filesystem_error& x) {
    std::cerr << "I/O error: " << x.what() << '\n';
    return 4;
  } catch (const std::exception& x) {
    std::cerr << "error: " << x.what() << '\n';
    return 1;
  }
  return 1;
}

/// "a.b.c=value" -> {"a": {"b": {"c": value}}}; value parsed as JSON, else taken as a string.
json assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key.path=value, got '" + text + "'");
  json value;
  try {
    value = json::parse(text.substr(eq + 1));
  } catch (const json::parse_error&) {
    value = text.substr(eq + 1);
  }
  std::vector<std::string> keys;
  std::string key = text.substr(0, eq);
  for (std::size_t p; (p = key.find('.')) != std::string::npos; key = key.substr(p + 1)) keys.push_back(key.substr(0, p));
  keys.push_back(key);
  for (auto it = keys.rbegin(); it != keys.rend(); ++it) value = json{{*it, value}};
  return value;
}

void merge(json& into, const json& patch) {
  for (const auto& [k, v] : patch.items()) {
    if (v.is_object() && into.contains(k) && into[k].is_object()) merge(into[k], v);
    else into[k] = v;
  }
}

struct Options {
  std::string config_path;
  std::string profile;
  std::vector<std::string> sets;
  std::string data = "data/toy_seed42.tsv";
  std::string workdir = "work";
  std::string out = "runs";
  std::optional<std::uint64_t> seed;
  bool no_write = false;
  // named overrides
  std::optional<double> gamma, sigma, t_start, lambda;
  std::optional<std::size_t> steps, budget, candidates, flow_epochs, vae_epochs, finetune_epochs;
  bool free_init = false, allow_pretrain = false;
  std::vector<double> gammas;
  std::vector<std::uint64_t> seeds;
};

RunConfig resolve(const Options& o) {
  json user = json::object();
  if (!o.config_path.empty()) {
    try {
      user = json::parse(read_file(o.config_path));
    } catch (const json::parse_error& e) {
      throw ConfigError("cannot parse " + o.config_path + ": " + e.what());
    }
  }
  if (!o.profile.empty()) user["profile"] = o.profile;
  auto put = [&](const std::string& path, const json& v) { merge(user, assignment(path + "=" + v.dump())); };
  if (o.gamma) put("guidance.gamma", *o.gamma);
  if (o.sigma) put("guidance.sigma", *o.sigma);
  if (o.t_start) put("guidance.t_start", *o.t_start);
  if (o.steps) put("guidance.steps", *o.steps);
  if (o.lambda) put("budget.diversity_lambda", *o.lambda);
  if (o.budget) put("budget.budget", *o.budget);
  if (o.free_init) put("budget.free_init", true);
  if (o.candidates) put("sweep.candidates", *o.candidates);
  if (!o.gammas.empty()) put("sweep.gammas", o.gammas);
  if (!o.seeds.empty()) put("sweep.seeds", o.seeds);
  if (o.vae_epochs) put("vae.epochs", *o.vae_epochs);
  if (o.finetune_epochs) put("vae.finetune_epochs", *o.finetune_epochs);
  if (o.flow_epochs) put("flow.epochs", *o.flow_epochs);
  if (o.allow_pretrain) put("allow_pretrain_latents", true);
  for (const auto& s : o.sets) merge(user, assignment(s));
  return resolve_config(user);
}

CommandContext context(const Options& o) {
  if (!o.seed) throw ConfigError("--seed is required");
  CommandContext ctx;
  ctx.cfg = resolve(o);
  ctx.data_path = o.data;
  ctx.workdir = o.workdir;
  ctx.seed = *o.seed;
  return ctx;
}

void emit(const Options& o, const RunArtifacts& a) {
  if (o.no_write) {
    std::cout << canonical_dump(a.report);
    return;
  }
  std::cout << write_run(o.out, a) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moltenflow: latent flow matching with surrogate guidance on a toy molecular benchmark"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* c, bool needs_seed) {
    c->add_option("--config", o.config_path, "JSON config overlaying the profile")->check(CLI::ExistingFile);
    c->add_option("--profile", o.profile, "desk | paper-tuned | paper-scale");
    c->add_option("--set", o.sets, "override a config field, key.path=json-value (repeatable)");
    c->add_option("--data", o.data, "dataset TSV")->capture_default_str();
    c->add_option("--workdir", o.workdir, "checkpoint directory")->capture_default_str();
    c->add_option("--out", o.out, "root for run directories")->capture_default_str();
    c->add_flag("--print-only", o.no_write, "print the report body instead of writing a run directory");
    auto* s = c->add_option("--seed", o.seed, "experiment seed");
    if (needs_seed) s->required();
  };
  auto guidance = [&](CLI::App* c) {
    c->add_option("--gamma", o.gamma, "guidance strength");
    c->add_option("--sigma", o.sigma, "noise injected before integration");
    c->add_option("--t-start", o.t_start, "integration start time");
    c->add_option("--steps", o.steps, "Euler steps");
  };

  std::size_t count = 4000;
  std::string out_file = "data/toy_seed42.tsv";
  auto* gen = app.add_subcommand("gen-data", "generate the toy dataset");
  common(gen, true);
  gen->add_option("--count", count, "number of records")->capture_default_str();
  gen->add_option("--output", out_file, "dataset path")->capture_default_str();

  std::string stage = "all";
  auto* train = app.add_subcommand("train", "train one stage (vae, finetune, flow) or all");
  common(train, true);
  train->add_option("--stage", stage, "vae | finetune | flow | all")->capture_default_str();
  train->add_flag("--allow-pretrain-latents", o.allow_pretrain, "let flow training use the pretrained encoder");
  train->add_option("--vae-epochs", o.vae_epochs, "pretraining epochs");
  train->add_option("--finetune-epochs", o.finetune_epochs, "fine-tuning epochs");
  train->add_option("--flow-epochs", o.flow_epochs, "flow epochs");

  std::optional<std::size_t> gen_count;
  auto* generate = app.add_subcommand("generate", "sample the unconditional flow and evaluate");
  common(generate, true);
  generate->add_option("--count", gen_count, "samples (default: generate_count)");

  auto* optimize = app.add_subcommand("optimize", "guided optimization of test-split front candidates");
  common(optimize, true);
  guidance(optimize);
  optimize->add_option("--candidates", o.candidates, "starting candidates");

  std::string proposer = "guided";
  std::size_t runs = 20;
  auto* budgeted = app.add_subcommand("budgeted", "oracle-budgeted optimization loop");
  common(budgeted, true);
  guidance(budgeted);
  budgeted->add_option("--proposer", proposer, "guided | gradient-ascent | random")->capture_default_str();
  budgeted->add_option("--runs", runs, "independent runs with seeds seed, seed+1, ...")->capture_default_str();
  budgeted->add_option("--budget", o.budget, "oracle budget B");
  budgeted->add_option("--lambda", o.lambda, "diversity penalty");
  budgeted->add_flag("--free-init", o.free_init, "do not charge the initial pool against the budget");

  auto* sweep = app.add_subcommand("gamma-sweep", "sweep guidance strength over a grid");
  common(sweep, true);
  guidance(sweep);
  sweep->add_option("--gammas", o.gammas, "grid (default from config)");
  sweep->add_option("--seeds", o.seeds, "sweep seeds (default from config)");
  sweep->add_option("--candidates", o.candidates, "starting candidates");

  std::string input;
  auto* eval = app.add_subcommand("eval", "metric suite for a structure list");
  common(eval, true);
  eval->add_option("--input", input, "one token string per line")->required();

  std::string run_dir;
  auto* report = app.add_subcommand("report", "verify and summarize a run directory");
  report->add_option("run", run_dir, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (report->parsed()) {
      auto bad = verify_manifest(run_dir);
      for (const auto& b : bad) std::cerr << "digest mismatch: " << b << '\n';
      if (!bad.empty()) return 4;
      const json body = json::parse(read_file((std::filesystem::path(run_dir) / "report.json").string()));
      std::cout << "manifest ok: " << run_dir << '\n';
      json brief{{"command", body.value("command", "")}, {"seed", body.value("seed", 0)}};
      if (body.contains("summary")) brief["summary"] = body["summary"];
      if (body.contains("eval")) brief["hvi"] = body["eval"].value("hvi", 0.0);
      if (body.contains("regime")) brief["regime"] = body["regime"];
      std::cout << brief.dump(2) << '\n';
      return 0;
    }
    CommandContext ctx = context(o);
    if (gen->parsed()) emit(o, cmd_gen_data(ctx, count, out_file));
    if (train->parsed()) {
      std::vector<Stage> stages;
      if (stage == "all") stages = {Stage::Vae, Stage::Finetune, Stage::Flow};
      else stages = {stage_from(stage)};
      emit(o, cmd_train(ctx, stages));
    }
    if (generate->parsed()) emit(o, cmd_generate(ctx, gen_count.value_or(ctx.cfg.generate_count)));
    if (optimize->parsed()) emit(o, cmd_optimize(ctx));
    if (budgeted->parsed()) emit(o, cmd_budgeted(ctx, proposer_from(proposer), runs));
    if (sweep->parsed()) emit(o, cmd_gamma_sweep(ctx));
    if (eval->parsed()) emit(o, cmd_eval(ctx, input));
  } catch (...) {
    return exit_code_of(std::current_exception());
  }
  return 0;
}
