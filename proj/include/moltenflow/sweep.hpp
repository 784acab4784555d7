// SPDX-License-Identifier: Apache-2.0
//
// Guidance-strength sweep. Every grid value starts from the same test-split
// candidates and, per seed, the same injected noise; only gamma changes.
#pragma once

#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "moltenflow/budget.hpp"
#include "moltenflow/evaluation.hpp"
#include "moltenflow/guidance.hpp"
#include "moltenflow/pipeline.hpp"

namespace moltenflow {

/// Indices of the `n` records whose surrogate-predicted properties rank best
/// under non-dominated sorting; ties inside a layer keep dataset order.
inline std::vector<std::size_t> front_candidates(const Models& m, const std::vector<toy::Record>& records,
                                                 std::size_t n) {
  require(n > 0 && n <= records.size(), "front_candidates: bad candidate count");
  auto pred = m.surrogate.predict_batch(pooled_means(m.vae, records));
  std::vector<mo::ObjectivePoint> rest = as_points(pred);
  std::vector<std::size_t> out;
  while (out.size() < n) {
    auto layer = mo::pareto_front(rest).sources();
    std::sort(layer.begin(), layer.end());
    for (std::size_t i : layer) {
      if (out.size() == n) break;
      out.push_back(i);
    }
    std::vector<bool> taken(records.size(), false);
    for (std::size_t i : out) taken[i] = true;
    std::vector<mo::ObjectivePoint> next;
    for (const auto& p : rest)
      if (!taken[p.source]) next.push_back(p);
    rest = std::move(next);
  }
  return out;
}

struct SweepStart {
  std::vector<toy::Record> records;
  Tensor mu;  // [n, K*d] posterior means
  std::vector<mo::ObjectivePoint> baseline;
};

inline SweepStart sweep_start(const Models& m, const std::vector<toy::Record>& test, std::size_t n) {
  SweepStart s;
  for (std::size_t i : front_candidates(m, test, n)) s.records.push_back(test[i]);
  s.mu = posterior_targets(m.vae, s.records).mu;
  CountedOracle oracle(s.records.size());
  for (std::size_t i = 0; i < s.records.size(); ++i)
    s.baseline.push_back(mo::toy_point(oracle.evaluate(toy::decode(s.records[i].tokens)), i));
  return s;
}

/// Guided optimization of every starting latent at guidance `g`; noise comes
/// from Rng(seed) so all gamma values share it.
inline CandidateSet guided_candidates(const Models& m, const SweepStart& start, const GuidanceConfig& g,
                                      const ObjectiveSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  Tensor z = start.mu;
  for (auto& v : z.data()) v += g.sigma * rng.normal();
  GuidedResult r = guided_integrate(m.flow, m.surrogate, spec, g, std::move(z), m.vae.cfg.K);
  CandidateSet c;
  CountedOracle oracle(r.z.rows());
  for (const auto& x : m.vae.decode_greedy(r.z)) {
    c.structures.push_back(toy::decode(x));
    c.oracle.push_back(oracle.evaluate(c.structures.back()));
  }
  c.predicted = m.surrogate.predict_batch(pool_rows(r.z, m.vae.cfg.K));
  return c;
}

/// Unconditional flow samples decoded and oracle-evaluated.
inline CandidateSet sample_candidates(const Models& m, std::size_t n, std::size_t steps, std::uint64_t seed) {
  Rng rng(seed);
  Tensor z = sample_prior(m.flow, n, rng, steps);
  CandidateSet c;
  CountedOracle oracle(n);
  for (const auto& x : m.vae.decode_greedy(z)) {
    c.structures.push_back(toy::decode(x));
    c.oracle.push_back(oracle.evaluate(c.structures.back()));
  }
  c.predicted = m.surrogate.predict_batch(pool_rows(z, m.vae.cfg.K));
  return c;
}

struct SweepCell {
  double gamma = 0.0;
  std::uint64_t seed = 0;
  mo::EvalReport report;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd out{mo::mean_of(v), 0.0};
  if (v.size() > 1) {
    double s = 0.0;
    for (double x : v) s += (x - out.mean) * (x - out.mean);
    out.std = std::sqrt(s / static_cast<double>(v.size() - 1));
  }
  return out;
}

inline constexpr std::array<const char*, 10> kSweepMetrics = {
    "hvi", "hvi_percent", "skeleton_diversity", "fd", "avg_kl", "p1_mse", "p2_mse", "p1_r2", "p2_r2", "uniqueness"};

inline double sweep_metric(const mo::EvalReport& r, const std::string& name) {
  if (name == "hvi") return r.hvi;
  if (name == "hvi_percent") return r.hvi_percent;
  if (name == "skeleton_diversity") return r.set.skeleton_diversity;
  if (name == "fd") return r.fd;
  if (name == "avg_kl") return r.kl.average;
  if (name == "p1_mse") return r.surrogate[0].mse;
  if (name == "p2_mse") return r.surrogate[1].mse;
  if (name == "p1_r2") return r.surrogate[0].r2;
  if (name == "p2_r2") return r.surrogate[1].r2;
  if (name == "uniqueness") return r.set.uniqueness;
  if (name == "novelty") return r.set.novelty;
  throw ContractViolation("unknown sweep metric " + name);
}

struct SweepRow {
  double gamma = 0.0;
  std::vector<SweepCell> cells;

  MeanStd stat(const std::string& metric) const {
    std::vector<double> v;
    for (const auto& c : cells) v.push_back(sweep_metric(c.report, metric));
    return mean_std(v);
  }
  std::array<double, mo::kDescriptorCount> mean_kl() const {
    std::array<double, mo::kDescriptorCount> out{};
    for (const auto& c : cells)
      for (std::size_t k = 0; k < mo::kDescriptorCount; ++k)
        out[k] += c.report.kl.per[k] / static_cast<double>(cells.size());
    return out;
  }
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<double> reference;
  double baseline_hv = 0.0;
  std::size_t candidates = 0;

  json to_json() const {
    json rs = json::array();
    for (const auto& r : rows) {
      json row{{"gamma", r.gamma}};
      for (const char* m : kSweepMetrics) {
        const MeanStd s = r.stat(m);
        row[m] = {{"mean", s.mean}, {"std", s.std}};
      }
      json kl;
      const auto k = r.mean_kl();
      for (std::size_t i = 0; i < mo::kDescriptorCount; ++i) kl[mo::kDescriptorNames[i]] = k[i];
      row["descriptor_kl"] = kl;
      json cells = json::array();
      for (const auto& c : r.cells) cells.push_back({{"seed", c.seed}, {"report", c.report.to_json()}});
      row["cells"] = cells;
      rs.push_back(row);
    }
    return {{"rows", rs}, {"reference_point", reference}, {"baseline_hv", baseline_hv}, {"candidates", candidates}};
  }

  /// Plain-text table of means and standard deviations, one row per gamma.
  std::string table() const {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(4);
    out << "gamma";
    for (const char* m : kSweepMetrics) out << '\t' << m;
    out << '\n';
    for (const auto& r : rows) {
      out << r.gamma;
      for (const char* m : kSweepMetrics) {
        const MeanStd s = r.stat(m);
        out << '\t' << s.mean << "±" << s.std;
      }
      out << '\n';
    }
    return out.str();
  }
};

inline SweepResult gamma_sweep(const RunConfig& cfg, const Models& m, const toy::Dataset& ds,
                               const ReferenceSet& ref) {
  cfg.sweep.validate();
  const auto test = ds.subset(toy::Split::Test);
  const SweepStart start = sweep_start(m, test, std::min(cfg.sweep.candidates, test.size()));
  const mo::ObjectivePoint reference = mo::auto_reference(ref.points, cfg.sweep.ref_margin);
  SweepResult out;
  out.reference = reference.values;
  out.baseline_hv = mo::hypervolume_2d(start.baseline, reference).value;
  out.candidates = start.records.size();
  for (double gamma : cfg.sweep.gammas) {
    SweepRow row{gamma, {}};
    GuidanceConfig g = cfg.guidance;
    g.gamma = gamma;
    for (std::uint64_t seed : cfg.sweep.seeds) {
      CandidateSet c = guided_candidates(m, start, g, cfg.objective, seed);
      mo::EvalReport r = evaluate_candidates(c, start.baseline, reference, ref, cfg.eval, cfg.sweep.ci_level, seed);
      r.extra = {{"gamma", gamma}};
      row.cells.push_back({gamma, seed, std::move(r)});
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

/// Grid triple (small < mid < high) showing the over-optimization trade-off:
/// HVI(mid) > HVI(small), diversity(high) < diversity(mid), FD(high) > FD(mid).
struct RegimeTriple {
  double small = 0.0, mid = 0.0, high = 0.0;
};

inline std::optional<RegimeTriple> regime_signature(const SweepResult& r) {
  const auto& rows = r.rows;
  for (std::size_t m = 0; m < rows.size(); ++m) {
    bool lower = false, upper = false;
    for (std::size_t s = 0; s < rows.size(); ++s)
      if (rows[s].gamma < rows[m].gamma && rows[m].stat("hvi").mean > rows[s].stat("hvi").mean) lower = true;
    for (std::size_t h = 0; h < rows.size(); ++h)
      if (rows[h].gamma > rows[m].gamma &&
          rows[h].stat("skeleton_diversity").mean < rows[m].stat("skeleton_diversity").mean &&
          rows[h].stat("fd").mean > rows[m].stat("fd").mean)
        upper = true;
    if (lower && upper) {
      RegimeTriple t{};
      t.mid = rows[m].gamma;
      for (const auto& s : rows)
        if (s.gamma < t.mid && rows[m].stat("hvi").mean > s.stat("hvi").mean) {
          t.small = s.gamma;
          break;
        }
      for (const auto& h : rows)
        if (h.gamma > t.mid && h.stat("skeleton_diversity").mean < rows[m].stat("skeleton_diversity").mean &&
            h.stat("fd").mean > rows[m].stat("fd").mean) {
          t.high = h.gamma;
          break;
        }
      return t;
    }
  }
  return std::nullopt;
}

}  // namespace moltenflow
