// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>

#include "../support/tiny_models.hpp"
#include "moltenflow/commands.hpp"

using namespace moltenflow;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("moltenflow_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const toy::Dataset& small_dataset() {
  static const toy::Dataset ds = toy::generate_dataset(5, 300);
  return ds;
}

}  // namespace

// ---------------------------------------------------------------- pipeline

TEST(Pipeline, StagesWriteCheckpointsDeterministically) {
  const RunConfig c = fixture::tiny_config();
  const fs::path a = scratch("pipe_a"), b = scratch("pipe_b");
  pipeline_train(c, small_dataset(), a.string(), 3);
  pipeline_train(c, small_dataset(), b.string(), 3);
  for (const char* f : {"vae.ckpt", "finetune.ckpt", "flow.ckpt"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(sha256_file((a / f).string()), sha256_file((b / f).string())) << f;
  }
  const Checkpoint fck = load_checkpoint((a / "finetune.ckpt").string());
  EXPECT_EQ(fck.meta["stage"], "finetune");
  EXPECT_TRUE(fck.meta.contains("surrogate_fidelity"));
  const Checkpoint wck = load_checkpoint((a / "flow.ckpt").string());
  EXPECT_EQ(wck.meta["latent_source"]["encoder_stage"], "finetune");
  const Models m = load_models(a.string());
  EXPECT_EQ(m.flow.latent_dim, c.vae.latent_size());
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Pipeline, FlowRefusesPretrainedEncoder) {
  RunConfig c = fixture::tiny_config();
  const fs::path w = scratch("pipe_order");
  train_stage(Stage::Vae, c, small_dataset(), w.string(), 1);
  EXPECT_THROW(train_stage(Stage::Flow, c, small_dataset(), w.string(), 1), ConfigError);
  c.allow_pretrain_latents = true;
  EXPECT_NO_THROW(train_stage(Stage::Flow, c, small_dataset(), w.string(), 1));
  EXPECT_EQ(load_checkpoint((w / "flow.ckpt").string()).meta["latent_source"]["encoder_stage"], "pretrain");
  fs::remove_all(w);
}

TEST(Pipeline, MissingInputsAreIoErrors) {
  const RunConfig c = fixture::tiny_config();
  const fs::path w = scratch("pipe_missing");
  EXPECT_THROW(train_stage(Stage::Finetune, c, small_dataset(), w.string(), 1), IoError);
  EXPECT_THROW(load_dataset((w / "nope.tsv").string()), IoError);
  EXPECT_THROW(load_models(w.string()), IoError);
  fs::remove_all(w);
}

TEST(Pipeline, DivergenceCarriesStageTag) {
  RunConfig c = fixture::tiny_config();
  c.vae.lr = 1e300;  // first update overflows the parameters
  const fs::path w = scratch("pipe_nan");
  try {
    train_stage(Stage::Vae, c, small_dataset(), w.string(), 1);
    FAIL() << "expected a numeric failure";
  } catch (const NumericFailure& e) {
    EXPECT_EQ(e.stage(), "vae");
  }
  fs::remove_all(w);
}

TEST(Pipeline, StageNames) {
  EXPECT_EQ(stage_from("vae"), Stage::Vae);
  EXPECT_EQ(stage_from("finetune"), Stage::Finetune);
  EXPECT_EQ(stage_from("flow"), Stage::Flow);
  EXPECT_THROW(stage_from("all-the-things"), ConfigError);
}

// ---------------------------------------------------------------- sweep

TEST(Sweep, FrontCandidatesTakeNonDominatedLayersFirst) {
  const Models m = fixture::tiny_models(4);
  const auto recs = small_dataset().subset(toy::Split::Train);
  const auto pred = m.surrogate.predict_batch(pooled_means(m.vae, recs));
  const std::size_t n = 40;
  const auto idx = front_candidates(m, recs, n);
  ASSERT_EQ(idx.size(), n);
  std::set<std::size_t> chosen(idx.begin(), idx.end());
  ASSERT_EQ(chosen.size(), n);
  // Every member of the first layer is chosen before anything it dominates.
  auto dominates = [&](std::size_t a, std::size_t b) {
    return pred[a].p1 >= pred[b].p1 && pred[a].p2 <= pred[b].p2 && (pred[a].p1 > pred[b].p1 || pred[a].p2 < pred[b].p2);
  };
  for (std::size_t b : chosen)
    for (std::size_t a = 0; a < recs.size(); ++a)
      if (dominates(a, b)) {
        EXPECT_TRUE(chosen.count(a)) << a << " dominates chosen " << b;
      }
}

TEST(Sweep, SharedNoiseAcrossGammaAndDeterministic) {
  RunConfig c = fixture::tiny_config();
  const Models m = fixture::tiny_models(4, c);
  const auto test = small_dataset().subset(toy::Split::Test);
  const SweepStart s = sweep_start(m, test, 10);
  GuidanceConfig g = c.guidance;
  g.gamma = 0.0;
  CandidateSet a = guided_candidates(m, s, g, c.objective, 42);
  CandidateSet b = guided_candidates(m, s, g, c.objective, 42);
  ASSERT_EQ(a.structures.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(a.structures[i].canonical_key, b.structures[i].canonical_key);
  // gamma = 0 equals plain Euler integration of the same noised start.
  Rng rng(42);
  Tensor z = s.mu;
  for (auto& v : z.data()) v += g.sigma * rng.normal();
  Tensor plain = integrate_flow(m.flow, z, g.t_start, g.steps);
  auto dec = m.vae.decode_greedy(plain);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(a.structures[i].canonical_key, toy::decode(dec[i]).canonical_key);
}

TEST(Sweep, TableAndJsonShape) {
  RunConfig c = fixture::tiny_config();
  c.sweep.gammas = {0.0, 1.0, 100.0};
  c.sweep.seeds = {1, 2};
  c.sweep.candidates = 12;
  const Models m = fixture::tiny_models(4, c);
  const ReferenceSet ref = ReferenceSet::from_records(small_dataset().subset(toy::Split::Train), 7);
  SweepResult r = gamma_sweep(c, m, small_dataset(), ref);
  ASSERT_EQ(r.rows.size(), 3u);
  for (const auto& row : r.rows) EXPECT_EQ(row.cells.size(), 2u);
  const json j = r.to_json();
  EXPECT_EQ(j["rows"].size(), 3u);
  EXPECT_TRUE(j["rows"][0]["descriptor_kl"].contains("p1"));
  EXPECT_EQ(j["candidates"], 12);
  const std::string t = r.table();
  EXPECT_EQ(std::count(t.begin(), t.end(), '\n'), 4);
  EXPECT_EQ(gamma_sweep(c, m, small_dataset(), ref).to_json().dump(), j.dump());
}

TEST(Sweep, RegimeSignatureOnSyntheticRows) {
  auto row = [](double gamma, double hvi, double div, double fd) {
    SweepRow r{gamma, {}};
    SweepCell c{gamma, 1, {}};
    c.report.hvi = hvi;
    c.report.set.skeleton_diversity = div;
    c.report.fd = fd;
    r.cells.push_back(c);
    return r;
  };
  SweepResult good;
  good.rows = {row(0.1, 0.0, 0.9, 1.0), row(10, 0.5, 0.8, 2.0), row(1000, 0.2, 0.1, 9.0)};
  auto t = regime_signature(good);
  ASSERT_TRUE(t.has_value());
  EXPECT_EQ(t->small, 0.1);
  EXPECT_EQ(t->mid, 10);
  EXPECT_EQ(t->high, 1000);
  SweepResult monotone;
  monotone.rows = {row(0.1, 0.0, 0.9, 1.0), row(10, 0.5, 0.95, 0.5), row(1000, 0.9, 0.99, 0.2)};
  EXPECT_FALSE(regime_signature(monotone).has_value());
}

// ---------------------------------------------------------------- report

TEST(Report, Sha256KnownVectors) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Report, ManifestVerifiesAndDetectsTampering) {
  const fs::path root = scratch("report");
  RunArtifacts a;
  a.command = "unit";
  a.report = {{"hvi", 0.25}};
  a.config = {{"x", 1}};
  a.files["trace.csv"] = "call,hv,hvi\n1,0,0\n";
  const std::string dir = write_run(root.string(), a);
  for (const char* f : {"report.json", "config.json", "checkpoints.json", "trace.csv", "manifest.json"})
    EXPECT_TRUE(fs::exists(fs::path(dir) / f)) << f;
  EXPECT_TRUE(verify_manifest(dir).empty());
  EXPECT_EQ(read_file((fs::path(dir) / "report.json").string()), canonical_dump(a.report));
  write_file((fs::path(dir) / "trace.csv").string(), "tampered\n");
  EXPECT_EQ(verify_manifest(dir), std::vector<std::string>{"trace.csv"});
  fs::remove(fs::path(dir) / "config.json");
  EXPECT_EQ(verify_manifest(dir).size(), 2u);
  EXPECT_THROW(verify_manifest((root / "absent").string()), IoError);
  // A second bundle in the same second gets its own directory.
  const std::string again = write_run(root.string(), a);
  EXPECT_NE(again, dir);
  fs::remove_all(root);
}

TEST(Report, ReportBodyHasNoTimestamp) {
  const fs::path root = scratch("report_ts");
  RunArtifacts a;
  a.command = "unit";
  a.report = {{"v", 1}};
  const std::string d1 = write_run(root.string(), a), d2 = write_run(root.string(), a);
  EXPECT_EQ(read_file(d1 + "/report.json"), read_file(d2 + "/report.json"));
  EXPECT_TRUE(json::parse(read_file(d1 + "/manifest.json")).contains("created_utc"));
  fs::remove_all(root);
}

// ---------------------------------------------------------------- evaluation

TEST(Evaluation, CandidateReportAgainstReference) {
  const auto train = small_dataset().subset(toy::Split::Train);
  const ReferenceSet ref = ReferenceSet::from_records(train, 7);
  CandidateSet c;
  for (std::size_t i = 0; i < 30; ++i) {
    c.structures.push_back(toy::decode(train[i].tokens));
    c.oracle.push_back(train[i].props);
  }
  const auto reference = mo::toy_point(0.0, 10.0);
  mo::EvalReport r = evaluate_candidates(c, c.points(), reference, ref, EvalConfig{}, 0.9, 1);
  EXPECT_EQ(r.hvi, 0.0);  // a set adds nothing to itself
  EXPECT_EQ(r.set.novelty, 0.0);
  EXPECT_LE(r.hvi_ci.lower, r.hvi_ci.upper);
  EXPECT_EQ(r.reference, reference.values);
}
