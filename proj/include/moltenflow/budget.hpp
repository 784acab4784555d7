// SPDX-License-Identifier: Apache-2.0
//
// Oracle-budgeted sequential optimization. The exact oracle is reachable only
// through CountedOracle, which BudgetState owns; proposers see models and a
// seed structure, never the oracle.
#pragma once

#include <deque>
#include <string>
#include <vector>

#include "moltenflow/evaluation.hpp"
#include "moltenflow/guidance.hpp"
#include "moltenflow/pipeline.hpp"

namespace moltenflow {

class BudgetExhausted : public Error {
 public:
  BudgetExhausted() : Error("oracle budget exhausted") {}
};

/// Ground-truth property oracle behind a call counter. Charged calls never
/// exceed the budget; free calls (uncharged initial pool) are tallied apart.
class CountedOracle {
 public:
  explicit CountedOracle(std::size_t budget) : budget_(budget) {}

  toy::PropertyVector evaluate(const toy::Structure& s) {
    if (calls_ >= budget_) throw BudgetExhausted();
    ++calls_;
    return toy::oracle_properties(s);
  }
  toy::PropertyVector evaluate_free(const toy::Structure& s) {
    ++free_calls_;
    return toy::oracle_properties(s);
  }

  std::size_t budget() const noexcept { return budget_; }
  std::size_t calls() const noexcept { return calls_; }
  std::size_t free_calls() const noexcept { return free_calls_; }
  std::size_t remaining() const noexcept { return budget_ - calls_; }

 private:
  std::size_t budget_;
  std::size_t calls_ = 0;
  std::size_t free_calls_ = 0;
};

struct PoolEntry {
  toy::TokenString tokens;  // as proposed or read; what the encoder sees
  toy::Structure structure;
  toy::PropertyVector props;
  std::string origin;  // "init" or proposer name
  toy::PropertyVector predicted{};
};

class BudgetState {
 public:
  BudgetState(std::size_t budget, std::size_t history_window) : oracle_(budget), window_(history_window) {
    require(history_window > 0, "budget state: history window must be positive");
  }

  /// Decodes and oracle-evaluates `tokens`, then appends the result. Throws BudgetExhausted when no call is left.
  const PoolEntry& add(const toy::TokenString& tokens, const std::string& origin, bool charged = true,
                       toy::PropertyVector predicted = {}) {
    toy::Structure s = toy::decode(tokens);
    toy::PropertyVector p = charged ? oracle_.evaluate(s) : oracle_.evaluate_free(s);
    pool_.push_back({tokens, std::move(s), p, origin, predicted});
    refresh_pareto();
    return pool_.back();
  }

  void record_optimized(const toy::Structure& s) {
    history_.push_back(s.features);
    while (history_.size() > window_) history_.pop_front();
  }

  const std::vector<PoolEntry>& pool() const noexcept { return pool_; }
  const std::vector<bool>& pareto() const noexcept { return pareto_; }
  const std::deque<toy::FeatureSet>& history() const noexcept { return history_; }
  const CountedOracle& oracle() const noexcept { return oracle_; }
  std::size_t calls_used() const noexcept { return oracle_.calls(); }
  std::size_t budget() const noexcept { return oracle_.budget(); }

  std::vector<mo::ObjectivePoint> points() const {
    std::vector<mo::ObjectivePoint> out;
    for (std::size_t i = 0; i < pool_.size(); ++i) out.push_back(mo::toy_point(pool_[i].props, i));
    return out;
  }

  /// Max Tanimoto similarity of pool member i to the history; 0 when empty.
  double sim_max(std::size_t i) const {
    double m = 0.0;
    for (const auto& h : history_) m = std::max(m, toy::tanimoto(pool_[i].structure.features, h));
    return m;
  }

 private:
  void refresh_pareto() {
    pareto_.assign(pool_.size(), false);
    for (std::size_t i : mo::pareto_front(points()).sources()) pareto_[i] = true;
  }

  CountedOracle oracle_;
  std::size_t window_;
  std::vector<PoolEntry> pool_;
  std::vector<bool> pareto_;
  std::deque<toy::FeatureSet> history_;
};

/// p_i proportional to w_pareto(i) * exp(-lambda * sim_max(i)).
inline std::vector<double> selection_probabilities(const BudgetState& st, double lambda, double pareto_weight) {
  const std::size_t n = st.pool().size();
  require(n > 0, "select_seed: empty pool");
  std::vector<double> w(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = (st.pareto()[i] ? pareto_weight : 1.0) * std::exp(-lambda * st.sim_max(i));
    total += w[i];
  }
  for (auto& x : w) x /= total;
  return w;
}

inline std::size_t sample_index(const std::vector<double>& p, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  return p.size() - 1;
}

inline std::size_t select_seed(const BudgetState& st, double lambda, double pareto_weight, Rng& rng) {
  return sample_index(selection_probabilities(st, lambda, pareto_weight), rng);
}

// ---------------------------------------------------------------- proposers

enum class ProposerKind { GuidedFlow, GradientAscent, Random };

inline ProposerKind proposer_from(const std::string& s) {
  if (s == "guided" || s == "guided-flow") return ProposerKind::GuidedFlow;
  if (s == "gradient-ascent" || s == "ga") return ProposerKind::GradientAscent;
  if (s == "random") return ProposerKind::Random;
  throw ConfigError("unknown proposer '" + s + "' (expected guided, gradient-ascent or random)");
}

inline const char* proposer_name(ProposerKind k) {
  switch (k) {
    case ProposerKind::GuidedFlow: return "guided-flow";
    case ProposerKind::GradientAscent: return "gradient-ascent";
    case ProposerKind::Random: return "random";
  }
  return "?";
}

struct Proposal {
  toy::TokenString tokens;
  toy::PropertyVector predicted;  // surrogate at the final pooled latent
};

/// One candidate from `seed`. The random proposer ignores the seed and decodes
/// a standard normal latent.
inline Proposal propose(ProposerKind kind, const Models& m, const RunConfig& cfg, const toy::TokenString& seed,
                        Rng& rng) {
  const std::size_t K = m.vae.cfg.K, d = m.vae.cfg.d;
  LatentState z;
  switch (kind) {
    case ProposerKind::GuidedFlow: {
      LatentState z0 = prepare_optimization(m.vae, seed, cfg.guidance.sigma, cfg.guidance.t_start, rng);
      z = final_state(guided_integrate(m.flow, m.surrogate, cfg.objective, cfg.guidance, z0), K);
      break;
    }
    case ProposerKind::GradientAscent: {
      LatentState z0{m.vae.encode(seed).mu, 1.0};
      z = gradient_ascent_baseline(m.surrogate, cfg.objective, z0, cfg.gradient_ascent, rng);
      break;
    }
    case ProposerKind::Random:
      z = LatentState{Tensor::randn(Shape{K, d}, rng), 1.0};
      break;
  }
  return {m.vae.decode_greedy(z), m.surrogate.predict(z.pooled())};
}

// ---------------------------------------------------------------- run

struct TracePoint {
  std::size_t call = 0;
  double hv = 0.0;
  double hvi = 0.0;
};

struct BudgetedRun {
  std::string proposer;
  std::uint64_t seed = 0;
  std::vector<TracePoint> trace;  // one point per charged oracle call
  std::size_t calls = 0;
  std::size_t free_calls = 0;
  bool complete = true;  // false when the last proposal batch was cut short
  std::size_t init_size = 0;
  std::vector<PoolEntry> pool;
  mo::EvalReport report;

  double final_hvi() const { return trace.empty() ? 0.0 : trace.back().hvi; }
};

inline std::string trace_csv(const BudgetedRun& r) {
  std::ostringstream out;
  out.precision(17);
  out << "call,hv,hvi\n";
  for (const auto& t : r.trace) out << t.call << ',' << t.hv << ',' << t.hvi << '\n';
  return out.str();
}

/// Initial pool: `init_size` distinct random records of `source`; then
/// select -> propose -> decode -> evaluate until the oracle budget is spent.
inline BudgetedRun budgeted_run(const RunConfig& cfg, const Models& m, ProposerKind kind,
                                const std::vector<toy::Record>& source, const ReferenceSet& ref,
                                std::uint64_t seed) {
  cfg.budget.validate();
  const BudgetConfig& b = cfg.budget;
  require(source.size() >= b.init_size, "budgeted_run: initial pool larger than the source set");
  Rng root(seed);
  Rng init_rng = root.split(), select_rng = root.split(), prop_rng = root.split();
  BudgetState st(b.budget, b.history_window);
  const mo::ObjectivePoint reference = mo::toy_point(b.reference[0], b.reference[1]);
  BudgetedRun run;
  run.proposer = proposer_name(kind);
  run.seed = seed;

  std::vector<std::size_t> order(source.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < b.init_size; ++i) std::swap(order[i], order[i + init_rng.index(order.size() - i)]);
  for (std::size_t i = 0; i < b.init_size; ++i) {
    st.add(source[order[i]].tokens, "init", !b.free_init);
    if (!b.free_init) run.trace.push_back({st.calls_used(), 0.0, 0.0});
  }
  run.init_size = b.init_size;
  const std::vector<mo::ObjectivePoint> baseline = st.points();
  const double hv0 = mo::hypervolume_2d(baseline, reference).value;
  for (auto& t : run.trace) t.hv = hv0;

  while (st.calls_used() < st.budget()) {
    std::vector<Proposal> batch;
    for (std::size_t j = 0; j < b.batch; ++j) {
      const std::size_t i = select_seed(st, b.diversity_lambda, b.pareto_weight, select_rng);
      const PoolEntry seed_entry = st.pool()[i];
      batch.push_back(propose(kind, m, cfg, seed_entry.tokens, prop_rng));
      st.record_optimized(seed_entry.structure);
    }
    for (const auto& p : batch) {
      if (st.calls_used() == st.budget()) {
        run.complete = false;
        break;
      }
      st.add(p.tokens, run.proposer, true, p.predicted);
      const double hv = mo::hypervolume_2d(st.points(), reference).value;
      run.trace.push_back({st.calls_used(), hv, std::max(0.0, hv - hv0)});
    }
  }
  run.calls = st.calls_used();
  run.free_calls = st.oracle().free_calls();
  run.pool = st.pool();

  CandidateSet proposed;
  for (std::size_t i = b.init_size; i < run.pool.size(); ++i) {
    proposed.structures.push_back(run.pool[i].structure);
    proposed.oracle.push_back(run.pool[i].props);
    proposed.predicted.push_back(run.pool[i].predicted);
  }
  if (!proposed.structures.empty()) {
    run.report = evaluate_candidates(proposed, baseline, reference, ref, cfg.eval, b.ci_level, seed);
  } else {
    run.report.seed = seed;
    run.report.hv = run.report.hv_baseline = hv0;
    run.report.reference = reference.values;
  }
  run.report.extra = {{"proposer", run.proposer},
                      {"oracle_calls", run.calls},
                      {"free_calls", run.free_calls},
                      {"budget", b.budget},
                      {"complete", run.complete},
                      {"final_hvi", run.final_hvi()}};
  if (kind == ProposerKind::GradientAscent) run.report.extra["gradient_ascent"] = cfg.gradient_ascent.to_json();
  return run;
}

/// Across-seed summary: mean final HVI with a bootstrap interval, mean curve.
struct BudgetedSummary {
  std::string proposer;
  std::vector<std::uint64_t> seeds;
  std::vector<double> final_hvi;
  double mean_final_hvi = 0.0;
  mo::Interval ci{};
  double ci_level = 0.9;
  std::vector<double> mean_curve;

  json to_json() const {
    return {{"proposer", proposer},
            {"seeds", seeds},
            {"final_hvi", final_hvi},
            {"mean_final_hvi", mean_final_hvi},
            {"ci", {{"lower", ci.lower}, {"upper", ci.upper}, {"level", ci_level}}},
            {"mean_curve", mean_curve}};
  }
};

inline BudgetedSummary summarize_runs(const std::vector<BudgetedRun>& runs, const RunConfig& cfg,
                                      std::uint64_t seed) {
  require(!runs.empty(), "summarize_runs: no runs");
  BudgetedSummary s;
  s.proposer = runs.front().proposer;
  s.ci_level = cfg.budget.ci_level;
  std::size_t len = runs.front().trace.size();
  for (const auto& r : runs) {
    s.seeds.push_back(r.seed);
    s.final_hvi.push_back(r.final_hvi());
    len = std::min(len, r.trace.size());
  }
  s.mean_final_hvi = mo::mean_of(s.final_hvi);
  Rng boot(seed ^ 0x5eedu);
  s.ci = mo::bootstrap_mean_ci(s.final_hvi, cfg.eval.bootstrap, s.ci_level, boot);
  s.mean_curve.assign(len, 0.0);
  for (const auto& r : runs)
    for (std::size_t i = 0; i < len; ++i) s.mean_curve[i] += r.trace[i].hvi / static_cast<double>(runs.size());
  return s;
}

}  // namespace moltenflow
