// SPDX-License-Identifier: Apache-2.0
//
// Metric suite shared by generation, sweeps and budgeted runs: everything is
// measured against a fixed reference set (the training split).
#pragma once

#include <set>
#include <string>
#include <vector>

#include "moltenflow/config.hpp"
#include "moltenflow/moeval.hpp"
#include "moltenflow/toyset.hpp"

namespace moltenflow {

struct ReferenceSet {
  std::vector<toy::Structure> structures;
  std::set<std::string> keys;
  std::vector<mo::ObjectivePoint> points;
  mo::FeatureProjection projection;
  Eigen::MatrixXd embedding;

  static ReferenceSet from_records(const std::vector<toy::Record>& records, std::uint64_t projection_seed) {
    require(records.size() >= 2, "reference set: need at least two records");
    ReferenceSet r{{}, {}, {}, mo::FeatureProjection(projection_seed), {}};
    for (std::size_t i = 0; i < records.size(); ++i) {
      r.structures.push_back(toy::decode(records[i].tokens));
      r.keys.insert(r.structures.back().canonical_key);
      r.points.push_back(mo::toy_point(records[i].props, i));
    }
    r.embedding = r.projection.embed(r.structures);
    return r;
  }
};

/// One evaluated candidate set: decoded structures, oracle properties and the
/// surrogate predictions that produced them.
struct CandidateSet {
  std::vector<toy::Structure> structures;
  std::vector<toy::PropertyVector> oracle;
  std::vector<toy::PropertyVector> predicted;  // may be empty

  std::vector<mo::ObjectivePoint> points() const {
    std::vector<mo::ObjectivePoint> out;
    for (std::size_t i = 0; i < oracle.size(); ++i) out.push_back(mo::toy_point(oracle[i], i));
    return out;
  }
};

inline std::vector<mo::ObjectivePoint> as_points(const std::vector<toy::PropertyVector>& ps) {
  std::vector<mo::ObjectivePoint> out;
  for (std::size_t i = 0; i < ps.size(); ++i) out.push_back(mo::toy_point(ps[i], i));
  return out;
}

/// Full metric suite of `c` against `baseline` (for HV/HVI) and `ref` (for
/// diversity, FD and descriptor KL). The HVI interval resamples candidates.
inline mo::EvalReport evaluate_candidates(const CandidateSet& c, const std::vector<mo::ObjectivePoint>& baseline,
                                          const mo::ObjectivePoint& reference, const ReferenceSet& ref,
                                          const EvalConfig& ecfg, double ci_level, std::uint64_t seed) {
  require(!c.structures.empty() && c.structures.size() == c.oracle.size(), "evaluate: empty or mismatched set");
  mo::EvalReport r;
  r.seed = seed;
  r.ci_level = ci_level;
  r.projection_seed = ecfg.projection_seed;
  r.reference = reference.values;
  const auto pts = c.points();
  std::vector<mo::ObjectivePoint> all = baseline;
  all.insert(all.end(), pts.begin(), pts.end());
  const mo::Hypervolume hv_all = mo::hypervolume_2d(all, reference);
  r.hv = hv_all.value;
  r.hv_excluded = hv_all.excluded;
  r.hv_baseline = mo::hypervolume_2d(baseline, reference).value;
  r.hvi = mo::hvi(baseline, pts, reference);
  r.hvi_percent = mo::hvi_percent(r.hvi, r.hv_baseline);
  Rng boot(seed ^ 0xb005u);
  r.hvi_ci = mo::bootstrap_ci<mo::ObjectivePoint>(
      [&](const std::vector<mo::ObjectivePoint>& draw) { return mo::hvi(baseline, draw, reference); }, pts,
      ecfg.bootstrap, ci_level, boot);
  r.set = mo::set_metrics(c.structures, ref.keys);
  if (c.structures.size() >= 2) r.fd = mo::frechet_distance(ref.projection.embed(c.structures), ref.embedding);
  r.kl = mo::descriptor_kl(c.structures, ref.structures, ecfg.kl_bins);
  if (!c.predicted.empty()) {
    require(c.predicted.size() == c.oracle.size(), "evaluate: prediction count mismatch");
    std::vector<double> p1, p2, t1, t2;
    for (std::size_t i = 0; i < c.oracle.size(); ++i) {
      p1.push_back(c.predicted[i].p1);
      p2.push_back(c.predicted[i].p2);
      t1.push_back(c.oracle[i].p1);
      t2.push_back(c.oracle[i].p2);
    }
    r.surrogate = {mo::regression_fidelity(p1, t1), mo::regression_fidelity(p2, t2)};
  }
  return r;
}

}  // namespace moltenflow
