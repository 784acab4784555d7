// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>

#include "../support/tiny_models.hpp"
#include "moltenflow/budget.hpp"

using namespace moltenflow;

namespace {

const toy::Dataset& dataset() {
  static const toy::Dataset ds = toy::generate_dataset(3, 400);
  return ds;
}

const ReferenceSet& reference() {
  static const ReferenceSet r = ReferenceSet::from_records(dataset().subset(toy::Split::Train), 7);
  return r;
}

// Pool of n dataset records plus h history entries drawn from the same set.
BudgetState random_state(Rng& rng, std::size_t n, std::size_t h) {
  const auto& recs = dataset().records;
  BudgetState st(n, 10);
  for (std::size_t i = 0; i < n; ++i) st.add(recs[rng.index(recs.size())].tokens, "init");
  for (std::size_t i = 0; i < h; ++i) st.record_optimized(toy::decode(recs[rng.index(recs.size())].tokens));
  return st;
}

double bit_tanimoto(const toy::FeatureSet& a, const toy::FeatureSet& b) {
  std::size_t i = 0, u = 0;
  for (std::size_t k = 0; k < a.width(); ++k) {
    i += a.test(k) && b.test(k);
    u += a.test(k) || b.test(k);
  }
  return u == 0 ? 1.0 : static_cast<double>(i) / static_cast<double>(u);
}

// Independent weights: brute-force dominance and bitwise similarity.
std::vector<double> expected_probabilities(const BudgetState& st, double lambda, double w_pareto) {
  const auto& pool = st.pool();
  std::vector<double> w;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    bool dominated = false, duplicate_before = false;
    for (std::size_t j = 0; j < pool.size(); ++j) {
      const auto& a = pool[j].props;
      const auto& b = pool[i].props;
      if (a.p1 >= b.p1 && a.p2 <= b.p2 && (a.p1 > b.p1 || a.p2 < b.p2)) dominated = true;
      if (j < i && a == b) duplicate_before = true;
    }
    double sim = 0.0;
    for (const auto& h : st.history()) sim = std::max(sim, bit_tanimoto(pool[i].structure.features, h));
    w.push_back((!dominated && !duplicate_before ? w_pareto : 1.0) * std::exp(-lambda * sim));
  }
  double total = 0.0;
  for (double x : w) total += x;
  for (auto& x : w) x /= total;
  return w;
}

double chi_square(const std::vector<std::size_t>& counts, const std::vector<double>& p, std::size_t n) {
  double chi = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double e = p[i] * static_cast<double>(n);
    chi += (static_cast<double>(counts[i]) - e) * (static_cast<double>(counts[i]) - e) / e;
  }
  return chi;
}

}  // namespace

TEST(CountedOracle, CountsAndRefusesPastBudget) {
  CountedOracle o(3);
  const toy::Structure s = toy::decode(toy::parse_tokens("CCO"));
  for (int i = 0; i < 3; ++i) EXPECT_EQ(o.evaluate(s), toy::oracle_properties(s));
  EXPECT_EQ(o.calls(), 3u);
  EXPECT_EQ(o.remaining(), 0u);
  EXPECT_THROW(o.evaluate(s), BudgetExhausted);
  EXPECT_EQ(o.calls(), 3u);
  o.evaluate_free(s);
  EXPECT_EQ(o.calls(), 3u);
  EXPECT_EQ(o.free_calls(), 1u);
}

TEST(SelectSeed, EmptyHistoryNoParetoIsUniform) {
  // Identical structures: a single Pareto member (the first) and n - 1 duplicates.
  BudgetState st(5, 10);
  for (int i = 0; i < 5; ++i) st.add(toy::parse_tokens("CCO"), "init");
  auto p = selection_probabilities(st, 2.0, 1.0);
  for (double x : p) EXPECT_DOUBLE_EQ(x, 0.2);
  Rng rng(1);
  std::vector<std::size_t> c(5, 0);
  const std::size_t N = 100000;
  for (std::size_t i = 0; i < N; ++i) ++c[select_seed(st, 2.0, 1.0, rng)];
  const double sd = std::sqrt(N * 0.2 * 0.8);
  for (auto x : c) EXPECT_LT(std::abs(static_cast<double>(x) - N * 0.2), 4 * sd);
}

TEST(SelectSeed, OneParetoMemberGetsTwoOverNPlusOne) {
  BudgetState st(6, 10);
  st.add(toy::parse_tokens("CCO"), "init");
  const auto best = st.pool()[0].props;
  // Dataset members dominated by the first entry.
  for (const auto& r : dataset().records) {
    if (st.pool().size() == 6) break;
    if (r.props.p1 < best.p1 && r.props.p2 > best.p2) st.add(r.tokens, "init");
  }
  ASSERT_EQ(st.pool().size(), 6u);
  ASSERT_TRUE(st.pareto()[0]);
  for (std::size_t i = 1; i < 6; ++i) ASSERT_FALSE(st.pareto()[i]);
  auto p = selection_probabilities(st, 2.0, 2.0);
  EXPECT_NEAR(p[0], 2.0 / 7.0, 1e-15);
}

TEST(SelectSeed, ProbabilitiesMatchIndependentFormula) {
  Rng rng(5);
  for (int c = 0; c < 30; ++c) {
    BudgetState st = random_state(rng, 2 + rng.index(30), rng.index(12));
    const double lambda = 4.0 * rng.uniform(), w = 1.0 + 3.0 * rng.uniform();
    auto got = selection_probabilities(st, lambda, w);
    auto want = expected_probabilities(st, lambda, w);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(SelectSeed, ChiSquareGoodnessOfFit) {
  Rng rng(11);
  const std::size_t N = 100000;
  for (int c = 0; c < 5; ++c) {
    BudgetState st = random_state(rng, 3 + rng.index(20), rng.index(10));
    auto p = expected_probabilities(st, 2.0, 2.0);
    std::vector<std::size_t> counts(p.size(), 0);
    for (std::size_t i = 0; i < N; ++i) ++counts[select_seed(st, 2.0, 2.0, rng)];
    boost::math::chi_squared dist(static_cast<double>(p.size() - 1));
    EXPECT_LT(chi_square(counts, p, N), boost::math::quantile(boost::math::complement(dist, 0.001)));
  }
}

TEST(BudgetState, HistoryIsASlidingWindow) {
  BudgetState st(1, 3);
  const auto& recs = dataset().records;
  for (std::size_t i = 0; i < 5; ++i) st.record_optimized(toy::decode(recs[i].tokens));
  ASSERT_EQ(st.history().size(), 3u);
  EXPECT_EQ(st.history().front(), toy::decode(recs[2].tokens).features);
  EXPECT_EQ(st.history().back(), toy::decode(recs[4].tokens).features);
}

TEST(BudgetedRun, SpendsExactlyTheBudget) {
  const RunConfig base = fixture::tiny_config();
  const Models m = fixture::tiny_models(2, base);
  const auto src = dataset().subset(toy::Split::Train);
  for (ProposerKind k : {ProposerKind::GuidedFlow, ProposerKind::GradientAscent, ProposerKind::Random}) {
    RunConfig c = base;
    c.budget.budget = 30;
    BudgetedRun r = budgeted_run(c, m, k, src, reference(), 9);
    EXPECT_EQ(r.calls, 30u) << proposer_name(k);
    EXPECT_EQ(r.trace.size(), 30u);
    EXPECT_EQ(r.pool.size(), 30u);
    EXPECT_TRUE(r.complete);
    EXPECT_EQ(r.trace.back().call, 30u);
    for (std::size_t i = 1; i < r.trace.size(); ++i) EXPECT_GE(r.trace[i].hvi, r.trace[i - 1].hvi);
    EXPECT_EQ(r.report.to_json()["extra"]["oracle_calls"], 30);
  }
}

TEST(BudgetedRun, TruncatedBatchIsFlaggedIncomplete) {
  RunConfig c = fixture::tiny_config();
  const Models m = fixture::tiny_models(2, c);
  c.budget.budget = 30;
  c.budget.batch = 4;  // 20 proposals, five full batches
  BudgetedRun even = budgeted_run(c, m, ProposerKind::Random, dataset().subset(toy::Split::Train), reference(), 1);
  EXPECT_EQ(even.calls, 30u);
  EXPECT_TRUE(even.complete);
  c.budget.batch = 3;  // 20 = 6 * 3 + 2
  BudgetedRun cut = budgeted_run(c, m, ProposerKind::Random, dataset().subset(toy::Split::Train), reference(), 1);
  EXPECT_EQ(cut.calls, 30u);
  EXPECT_FALSE(cut.complete);
}

TEST(BudgetedRun, FreeInitDoesNotCharge) {
  RunConfig c = fixture::tiny_config();
  const Models m = fixture::tiny_models(2, c);
  c.budget.budget = 15;
  c.budget.free_init = true;
  BudgetedRun r = budgeted_run(c, m, ProposerKind::Random, dataset().subset(toy::Split::Train), reference(), 4);
  EXPECT_EQ(r.calls, 15u);
  EXPECT_EQ(r.free_calls, 10u);
  EXPECT_EQ(r.pool.size(), 25u);
  EXPECT_EQ(r.trace.size(), 15u);
}

TEST(BudgetedRun, DeterministicPerSeed) {
  RunConfig c = fixture::tiny_config();
  const Models m = fixture::tiny_models(2, c);
  c.budget.budget = 25;
  const auto src = dataset().subset(toy::Split::Train);
  BudgetedRun a = budgeted_run(c, m, ProposerKind::GuidedFlow, src, reference(), 77);
  BudgetedRun b = budgeted_run(c, m, ProposerKind::GuidedFlow, src, reference(), 77);
  EXPECT_EQ(trace_csv(a), trace_csv(b));
  EXPECT_EQ(a.report.to_json().dump(), b.report.to_json().dump());
  BudgetedRun other = budgeted_run(c, m, ProposerKind::GuidedFlow, src, reference(), 78);
  EXPECT_NE(trace_csv(a), trace_csv(other));
}

TEST(BudgetedRun, InitPoolIsMeasuredAgainstItself) {
  RunConfig c = fixture::tiny_config();
  const Models m = fixture::tiny_models(2, c);
  c.budget.budget = 20;
  BudgetedRun r = budgeted_run(c, m, ProposerKind::Random, dataset().subset(toy::Split::Train), reference(), 3);
  for (std::size_t i = 0; i < c.budget.init_size; ++i) EXPECT_EQ(r.trace[i].hvi, 0.0);
  std::vector<mo::ObjectivePoint> init, all;
  for (std::size_t i = 0; i < r.pool.size(); ++i) {
    all.push_back(mo::toy_point(r.pool[i].props));
    if (i < c.budget.init_size) init.push_back(all.back());
  }
  const auto ref = mo::toy_point(0.0, 10.0);
  EXPECT_NEAR(r.final_hvi(), mo::hypervolume_2d(all, ref).value - mo::hypervolume_2d(init, ref).value, 1e-12);
}

TEST(BudgetConfig, Validation) {
  BudgetConfig b;
  b.init_size = 100;
  EXPECT_THROW(b.validate(), ConfigError);
  b.free_init = true;
  EXPECT_NO_THROW(b.validate());
  b.batch = 0;
  EXPECT_THROW(b.validate(), ConfigError);
}

TEST(Proposer, NamesRoundTrip) {
  for (ProposerKind k : {ProposerKind::GuidedFlow, ProposerKind::GradientAscent, ProposerKind::Random})
    EXPECT_EQ(proposer_from(proposer_name(k)), k);
  EXPECT_THROW(proposer_from("bo"), ConfigError);
}
