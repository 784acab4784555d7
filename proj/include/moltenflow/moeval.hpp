// SPDX-License-Identifier: Apache-2.0
//
// Multi-objective and distributional evaluation.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "moltenflow/error.hpp"
#include "moltenflow/rng.hpp"
#include "moltenflow/toyset.hpp"

namespace moltenflow::mo {

using json = nlohmann::json;

enum class Direction { Maximize, Minimize };
using Directions = std::vector<Direction>;

/// (p1 maximize, p2 minimize).
inline const Directions& toy_directions() {
  static const Directions d{Direction::Maximize, Direction::Minimize};
  return d;
}

inline constexpr std::size_t kNoSource = std::numeric_limits<std::size_t>::max();

struct ObjectivePoint {
  std::vector<double> values;
  Directions directions;
  std::size_t source = kNoSource;  // index of the originating candidate

  /// Value transformed so that larger is better.
  double gain(std::size_t k) const {
    return directions[k] == Direction::Maximize ? values[k] : -values[k];
  }
};

inline ObjectivePoint toy_point(double p1, double p2, std::size_t source = kNoSource) {
  return {{p1, p2}, toy_directions(), source};
}
inline ObjectivePoint toy_point(const toy::PropertyVector& p, std::size_t source = kNoSource) {
  return toy_point(p.p1, p.p2, source);
}

inline void check_compatible(const ObjectivePoint& a, const ObjectivePoint& b) {
  require(a.directions == b.directions && a.values.size() == a.directions.size() &&
              b.values.size() == b.directions.size(),
          "objective points have mismatched directions");
}

inline bool dominates(const ObjectivePoint& a, const ObjectivePoint& b) {
  check_compatible(a, b);
  bool strict = false;
  for (std::size_t k = 0; k < a.values.size(); ++k) {
    if (a.gain(k) < b.gain(k)) return false;
    if (a.gain(k) > b.gain(k)) strict = true;
  }
  return strict;
}

/// Non-dominated subset, sorted canonically: descending in the first
/// objective's gain, then the remaining gains, then source index. Equal points
/// collapse to the one with the smallest source index.
struct ParetoFront {
  std::vector<ObjectivePoint> points;

  std::vector<std::size_t> sources() const {
    std::vector<std::size_t> out;
    for (const auto& p : points) out.push_back(p.source);
    return out;
  }
};

namespace detail {
inline bool canonical_less(const ObjectivePoint& a, const ObjectivePoint& b) {
  for (std::size_t k = 0; k < a.values.size(); ++k) {
    if (a.gain(k) != b.gain(k)) return a.gain(k) > b.gain(k);
  }
  return a.source < b.source;
}
inline bool same_values(const ObjectivePoint& a, const ObjectivePoint& b) {
  return a.values == b.values;
}
}  // namespace detail

inline ParetoFront pareto_front(std::vector<ObjectivePoint> points) {
  ParetoFront front;
  if (points.empty()) return front;
  for (const auto& p : points) {
    check_compatible(points.front(), p);
    for (double v : p.values) require(std::isfinite(v), "pareto_front: non-finite objective value");
  }
  std::sort(points.begin(), points.end(), detail::canonical_less);
  points.erase(std::unique(points.begin(), points.end(), detail::same_values), points.end());
  if (points.front().values.size() == 2) {
    // Sorted by first gain descending (second gain descending on ties): a point
    // survives iff its second gain beats everything seen so far.
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& p : points)
      if (p.gain(1) > best) {
        front.points.push_back(p);
        best = p.gain(1);
      }
    return front;
  }
  for (const auto& p : points) {
    bool dominated = false;
    for (const auto& q : points)
      if (dominates(q, p)) {
        dominated = true;
        break;
      }
    if (!dominated) front.points.push_back(p);
  }
  return front;
}

struct Hypervolume {
  double value = 0.0;
  std::size_t excluded = 0;  // points that did not dominate the reference
};

/// Exact 2D hypervolume of the region dominated by `points` and bounded by `ref`.
inline Hypervolume hypervolume_2d(const std::vector<ObjectivePoint>& points, const ObjectivePoint& ref) {
  if (ref.values.size() != 2)
    throw UnsupportedDimension("hypervolume_2d: only two objectives are supported");
  Hypervolume hv;
  std::vector<std::pair<double, double>> kept;
  for (const auto& p : points) {
    check_compatible(p, ref);
    if (!dominates(p, ref)) {
      ++hv.excluded;
      continue;
    }
    kept.emplace_back(p.gain(0), p.gain(1));
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second > b.second;
  });
  const double rx = ref.gain(0);
  double cur = ref.gain(1);
  for (const auto& [x, y] : kept)
    if (y > cur) {
      hv.value += (x - rx) * (y - cur);
      cur = y;
    }
  return hv;
}

inline double hypervolume_2d(const ParetoFront& front, const ObjectivePoint& ref) {
  return hypervolume_2d(front.points, ref).value;
}

/// HV(baseline ∪ optimized) − HV(baseline), never negative.
inline double hvi(const std::vector<ObjectivePoint>& baseline, const std::vector<ObjectivePoint>& optimized,
                  const ObjectivePoint& ref) {
  std::vector<ObjectivePoint> both = baseline;
  both.insert(both.end(), optimized.begin(), optimized.end());
  const double gain = hypervolume_2d(both, ref).value - hypervolume_2d(baseline, ref).value;
  return std::max(0.0, gain);
}

/// 100 · HVI / HV(baseline); 0 when the baseline volume is 0.
inline double hvi_percent(double hvi_value, double baseline_hv) {
  return baseline_hv > 0.0 ? 100.0 * hvi_value / baseline_hv : 0.0;
}

/// Worst observed value per objective pushed `margin` · range further out.
inline ObjectivePoint auto_reference(const std::vector<ObjectivePoint>& points, double margin = 0.1) {
  require(!points.empty(), "auto_reference: no points");
  require(margin >= 0.0, "auto_reference: margin must be non-negative");
  ObjectivePoint ref = points.front();
  ref.source = kNoSource;
  for (std::size_t k = 0; k < ref.values.size(); ++k) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& p : points) {
      check_compatible(points.front(), p);
      lo = std::min(lo, p.values[k]);
      hi = std::max(hi, p.values[k]);
    }
    const double range = hi - lo;
    if (!(range > 0.0))
      throw DegenerateRange("auto_reference: zero range in objective " + std::to_string(k),
                            k);
    ref.values[k] = ref.directions[k] == Direction::Maximize ? lo - margin * range : hi + margin * range;
  }
  return ref;
}

// ---------------------------------------------------------------- statistics

/// Linear-interpolation quantile of sorted data, q in [0,1].
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  require(!sorted.empty(), "quantile: empty data");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
};

/// Percentile bootstrap interval of `metric` over with-replacement resamples.
template <class T>
Interval bootstrap_ci(const std::function<double(const std::vector<T>&)>& metric,
                      const std::vector<T>& samples, std::size_t resamples, double level, Rng& rng) {
  require(!samples.empty(), "bootstrap_ci: empty sample set");
  require(resamples >= 1, "bootstrap_ci: need at least one resample");
  require(level > 0.0 && level < 1.0, "bootstrap_ci: level must be in (0,1)");
  std::vector<double> stats;
  stats.reserve(resamples);
  std::vector<T> draw(samples.size());
  for (std::size_t r = 0; r < resamples; ++r) {
    for (auto& d : draw) d = samples[rng.index(samples.size())];
    stats.push_back(metric(draw));
  }
  std::sort(stats.begin(), stats.end());
  const double alpha = 1.0 - level;
  return {quantile_sorted(stats, alpha / 2.0), quantile_sorted(stats, 1.0 - alpha / 2.0)};
}

inline double mean_of(const std::vector<double>& v) {
  require(!v.empty(), "mean_of: empty data");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline Interval bootstrap_mean_ci(const std::vector<double>& samples, std::size_t resamples, double level,
                                  Rng& rng) {
  return bootstrap_ci<double>(mean_of, samples, resamples, level, rng);
}

// ---------------------------------------------------------------- set metrics

struct SetMetrics {
  std::size_t count = 0;
  double validity = 0.0;
  double uniqueness = 0.0;
  double novelty = 0.0;
  double skeleton_diversity = 0.0;
};

/// Every token string decodes on the toy grammar, so validity is the decoded
/// fraction of a total function.
inline SetMetrics set_metrics(const std::vector<toy::Structure>& generated,
                              const std::set<std::string>& train_keys) {
  SetMetrics m;
  m.count = generated.size();
  if (generated.empty()) return m;
  std::set<std::string> keys, skeletons;
  for (const auto& s : generated) {
    keys.insert(s.canonical_key);
    skeletons.insert(s.skeleton_key);
  }
  std::size_t novel = 0;
  for (const auto& k : keys) novel += train_keys.count(k) == 0 ? 1 : 0;
  const double n = static_cast<double>(generated.size());
  m.validity = 1.0;
  m.uniqueness = static_cast<double>(keys.size()) / n;
  m.novelty = static_cast<double>(novel) / static_cast<double>(keys.size());
  m.skeleton_diversity = static_cast<double>(skeletons.size()) / n;
  return m;
}

// ---------------------------------------------------------------- Fréchet distance

struct GaussianFit {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // sample covariance, n - 1 normalization
};

/// Rows of `x` are samples.
inline GaussianFit fit_gaussian(const Eigen::MatrixXd& x) {
  require(x.rows() >= 2, "fit_gaussian: need at least two samples");
  GaussianFit g;
  g.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd c = x.rowwise() - g.mean.transpose();
  g.cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
  return g;
}

namespace detail {
inline constexpr double kEigenTolerance = 1e-8;

inline Eigen::VectorXd clamped_eigenvalues(const Eigen::VectorXd& ev, const char* what) {
  Eigen::VectorXd out = ev;
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    if (!std::isfinite(out[i])) throw NumericFailure(std::string(what) + ": non-finite eigenvalue");
    if (out[i] < -kEigenTolerance)
      throw NumericFailure(std::string(what) + ": negative eigenvalue " + std::to_string(out[i]));
    out[i] = std::max(0.0, out[i]);
  }
  return out;
}
}  // namespace detail

/// Squared Fréchet distance between two Gaussians:
///   ‖μ_A − μ_B‖² + Tr(Σ_A + Σ_B − 2 (Σ_A^{1/2} Σ_B Σ_A^{1/2})^{1/2}).
inline double frechet_from_moments(const GaussianFit& a, const GaussianFit& b) {
  require(a.mean.size() == b.mean.size(), "frechet: embedding dimensions differ");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(a.cov);
  const Eigen::VectorXd la = detail::clamped_eigenvalues(ea.eigenvalues(), "frechet: covariance A");
  const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * la.cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
  const Eigen::MatrixXd m = sqrt_a * b.cov * sqrt_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  const Eigen::VectorXd lm = detail::clamped_eigenvalues(em.eigenvalues(), "frechet: product");
  const double fd2 = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * lm.cwiseSqrt().sum();
  return std::max(0.0, fd2);
}

inline double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  require(a.cols() == b.cols(), "frechet: embedding dimensions differ");
  return frechet_from_moments(fit_gaussian(a), fit_gaussian(b));
}

/// Seeded Gaussian projection of feature bitsets, entries N(0, 1/out_dim).
class FeatureProjection {
 public:
  FeatureProjection(std::uint64_t seed, std::size_t out_dim = 32, std::size_t in_dim = toy::kFeatureBits)
      : seed_(seed), w_(static_cast<Eigen::Index>(in_dim), static_cast<Eigen::Index>(out_dim)) {
    Rng rng(seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(out_dim));
    for (Eigen::Index i = 0; i < w_.rows(); ++i)
      for (Eigen::Index j = 0; j < w_.cols(); ++j) w_(i, j) = scale * rng.normal();
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::size_t out_dim() const noexcept { return static_cast<std::size_t>(w_.cols()); }

  Eigen::MatrixXd embed(const std::vector<toy::Structure>& structures) const {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(structures.size()), w_.cols());
    for (std::size_t r = 0; r < structures.size(); ++r) {
      const auto& f = structures[r].features;
      require(f.width() == static_cast<std::size_t>(w_.rows()), "projection: feature width mismatch");
      for (std::size_t b = 0; b < f.width(); ++b)
        if (f.test(b)) out.row(static_cast<Eigen::Index>(r)) += w_.row(static_cast<Eigen::Index>(b));
    }
    return out;
  }

 private:
  std::uint64_t seed_;
  Eigen::MatrixXd w_;
};

// ---------------------------------------------------------------- descriptor KL

inline constexpr std::size_t kDescriptorCount = 7;
inline constexpr std::array<const char*, kDescriptorCount> kDescriptorNames = {
    "tokens", "max_depth", "sides", "skeleton_tokens", "feature_bits", "p1", "p2"};

inline std::array<double, kDescriptorCount> descriptor_values(const toy::Structure& s) {
  const toy::PropertyVector p = toy::oracle_properties(s);
  return {static_cast<double>(s.desc.tokens), static_cast<double>(s.desc.max_depth),
          static_cast<double>(s.desc.sides), static_cast<double>(s.desc.skeleton_tokens),
          static_cast<double>(s.features.count()), p.p1, p.p2};
}

/// Discrete KL(p ‖ q) in nats. Terms with p_i = 0 contribute nothing.
inline double kl_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  require(p.size() == q.size(), "kl_divergence: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) kl += p[i] * std::log(p[i] / q[i]);
  return kl;
}

inline constexpr double kHistogramSmoothing = 1e-10;

/// Smoothed, normalized histogram over [lo, hi] with `bins` equal bins.
/// Values outside the range fall into the edge bins; a zero-width range is
/// widened to [lo - 0.5, lo + 0.5].
inline std::vector<double> histogram(const std::vector<double>& values, double lo, double hi, std::size_t bins) {
  require(bins >= 1, "histogram: need at least one bin");
  std::vector<double> h(bins, 0.0);
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double width = (hi - lo) / static_cast<double>(bins);
  for (double v : values) {
    double pos = std::floor((v - lo) / width);
    pos = std::clamp(pos, 0.0, static_cast<double>(bins - 1));
    h[static_cast<std::size_t>(pos)] += 1.0;
  }
  const double n = static_cast<double>(std::max<std::size_t>(values.size(), 1));
  double total = 0.0;
  for (auto& x : h) {
    x = x / n + kHistogramSmoothing;
    total += x;
  }
  for (auto& x : h) x /= total;
  return h;
}

/// KL(gen ‖ ref) on histograms with edges taken from the reference range.
inline double histogram_kl(const std::vector<double>& gen, const std::vector<double>& ref, std::size_t bins = 50) {
  require(!gen.empty() && !ref.empty(), "histogram_kl: empty set");
  const auto [lo, hi] = std::minmax_element(ref.begin(), ref.end());
  return kl_divergence(histogram(gen, *lo, *hi, bins), histogram(ref, *lo, *hi, bins));
}

struct DescriptorKl {
  std::array<double, kDescriptorCount> per{};
  double average = 0.0;
};

inline DescriptorKl descriptor_kl(const std::vector<toy::Structure>& generated,
                                  const std::vector<toy::Structure>& reference, std::size_t bins = 50) {
  require(!generated.empty() && !reference.empty(), "descriptor_kl: empty set");
  std::array<std::vector<double>, kDescriptorCount> g, r;
  for (const auto& s : generated) {
    auto v = descriptor_values(s);
    for (std::size_t k = 0; k < kDescriptorCount; ++k) g[k].push_back(v[k]);
  }
  for (const auto& s : reference) {
    auto v = descriptor_values(s);
    for (std::size_t k = 0; k < kDescriptorCount; ++k) r[k].push_back(v[k]);
  }
  DescriptorKl out;
  for (std::size_t k = 0; k < kDescriptorCount; ++k) {
    out.per[k] = histogram_kl(g[k], r[k], bins);
    out.average += out.per[k] / static_cast<double>(kDescriptorCount);
  }
  return out;
}

// ---------------------------------------------------------------- surrogate fidelity

struct Fidelity {
  double mse = 0.0;
  double r2 = 0.0;
};

/// MSE and coefficient of determination of predictions against truth. R² is
/// 0 when the truth has zero variance.
inline Fidelity regression_fidelity(const std::vector<double>& pred, const std::vector<double>& truth) {
  require(pred.size() == truth.size() && !truth.empty(), "regression_fidelity: size mismatch");
  const double mu = mean_of(truth);
  double sse = 0.0, sst = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    sse += (pred[i] - truth[i]) * (pred[i] - truth[i]);
    sst += (truth[i] - mu) * (truth[i] - mu);
  }
  const double n = static_cast<double>(truth.size());
  return {sse / n, sst > 0.0 ? 1.0 - sse / sst : 0.0};
}

// ---------------------------------------------------------------- report

inline constexpr int kEvalReportSchema = 1;

struct EvalReport {
  double hv = 0.0;
  double hv_baseline = 0.0;
  double hvi = 0.0;
  double hvi_percent = 0.0;
  Interval hvi_ci{};
  double ci_level = 0.95;
  SetMetrics set{};
  double fd = 0.0;
  DescriptorKl kl{};
  std::array<Fidelity, 2> surrogate{};
  std::size_t hv_excluded = 0;
  std::uint64_t seed = 0;
  std::uint64_t projection_seed = 0;
  std::vector<double> reference;
  json config = json::object();
  json extra = json::object();

  void validate() const {
    for (double f : {set.validity, set.uniqueness, set.novelty, set.skeleton_diversity})
      require(f >= 0.0 && f <= 1.0, "EvalReport: fraction outside [0,1]");
    require(hvi_ci.lower <= hvi_ci.upper, "EvalReport: CI bounds out of order");
  }

  json to_json() const {
    validate();
    json j;
    j["schema_version"] = kEvalReportSchema;
    j["seed"] = seed;
    j["hv"] = hv;
    j["hv_baseline"] = hv_baseline;
    j["hvi"] = hvi;
    j["hvi_percent"] = hvi_percent;
    j["hvi_ci"] = {{"lower", hvi_ci.lower}, {"upper", hvi_ci.upper}, {"level", ci_level}};
    j["hv_excluded_points"] = hv_excluded;
    j["reference_point"] = reference;
    j["count"] = set.count;
    j["validity"] = set.validity;
    j["uniqueness"] = set.uniqueness;
    j["novelty"] = set.novelty;
    j["skeleton_diversity"] = set.skeleton_diversity;
    j["fd"] = fd;
    j["fd_form"] = "squared";
    j["projection_seed"] = projection_seed;
    json kl_j;
    for (std::size_t k = 0; k < kDescriptorCount; ++k) kl_j[kDescriptorNames[k]] = kl.per[k];
    j["descriptor_kl"] = kl_j;
    j["avg_kl"] = kl.average;
    j["surrogate"] = {{"p1", {{"mse", surrogate[0].mse}, {"r2", surrogate[0].r2}}},
                      {"p2", {{"mse", surrogate[1].mse}, {"r2", surrogate[1].r2}}}};
    j["config"] = config;
    if (!extra.empty()) j["extra"] = extra;
    return j;
  }
};

/// Pareto front as CSV with header `p1,p2,canonical_key`.
inline std::string front_csv(const ParetoFront& front, const std::vector<std::string>& keys) {
  std::ostringstream out;
  out.precision(17);
  out << "p1,p2,canonical_key\n";
  for (const auto& p : front.points) {
    out << p.values[0] << ',' << p.values[1] << ',';
    out << (p.source < keys.size() ? keys[p.source] : std::string()) << '\n';
  }
  return out.str();
}

}  // namespace moltenflow::mo
