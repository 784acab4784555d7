// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the command-line binary: exit codes and run bundles.
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>

#include "../support/tiny_models.hpp"
#include "moltenflow/commands.hpp"

using namespace moltenflow;
namespace fs = std::filesystem;

namespace {

struct Cli {
  fs::path root;
  std::string out;  // last stdout

  Cli() : root(fs::temp_directory_path() / ("moltenflow_cli_" + std::to_string(::getpid()))) {
    fs::remove_all(root);
    fs::create_directories(root);
    write_file((root / "tiny.json").string(), to_json(fixture::tiny_config()).dump(2));
  }
  ~Cli() { fs::remove_all(root); }

  int run(const std::string& args) {
    const fs::path capture = root / "stdout.txt";
    const std::string cmd = std::string("cd ") + root.string() + " && " + MOLTENFLOW_CLI + " " + args + " > " +
                            capture.string() + " 2> " + (root / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    out = fs::exists(capture) ? read_file(capture.string()) : "";
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  // Last stdout line as a path under the working directory.
  fs::path last_path() const {
    auto s = out;
    while (!s.empty() && s.back() == '\n') s.pop_back();
    return root / s.substr(s.rfind('\n') == std::string::npos ? 0 : s.rfind('\n') + 1);
  }
};

}  // namespace

TEST(Cli, ConfigurationErrorsExitTwo) {
  Cli c;
  EXPECT_EQ(c.run("gen-data --count 50"), 2);  // --seed is mandatory
  EXPECT_EQ(c.run("gen-data --seed 1 --profile nope --count 50"), 2);
  EXPECT_EQ(c.run("gen-data --seed 1 --set vae.unknown=3 --count 50"), 2);
  EXPECT_EQ(c.run("budgeted --seed 1 --proposer bo"), 2);
  EXPECT_EQ(c.run("no-such-command"), 2);
}

TEST(Cli, MissingInputsExitFour) {
  Cli c;
  EXPECT_EQ(c.run("train --seed 1 --stage vae --data absent.tsv"), 4);
  EXPECT_EQ(c.run("gen-data --seed 3 --count 200 --output d.tsv --print-only"), 0);
  EXPECT_EQ(c.run("generate --seed 1 --data d.tsv --workdir empty"), 4);
  EXPECT_EQ(c.run("report no-such-run"), 4);
}

TEST(Cli, DivergenceExitsThree) {
  Cli c;
  ASSERT_EQ(c.run("gen-data --seed 3 --count 200 --output d.tsv --print-only"), 0);
  EXPECT_EQ(c.run("train --seed 1 --stage vae --data d.tsv --config tiny.json --set vae.lr=1e300"), 3);
}

TEST(Cli, RunBundleRoundTrip) {
  Cli c;
  ASSERT_EQ(c.run("gen-data --seed 3 --count 300 --output d.tsv"), 0);
  ASSERT_EQ(c.run("train --seed 2 --data d.tsv --config tiny.json"), 0);
  for (const char* f : {"vae.ckpt", "finetune.ckpt", "flow.ckpt"}) EXPECT_TRUE(fs::exists(c.root / "work" / f)) << f;
  ASSERT_EQ(c.run("budgeted --seed 4 --runs 2 --budget 20 --data d.tsv --config tiny.json"), 0);
  const fs::path dir = c.last_path();
  ASSERT_TRUE(fs::exists(dir / "manifest.json")) << dir;
  EXPECT_TRUE(fs::exists(dir / "trace.csv"));
  const json body = json::parse(read_file((dir / "report.json").string()));
  EXPECT_EQ(body["command"], "budgeted");
  EXPECT_EQ(body["runs"].size(), 2u);
  EXPECT_EQ(body["runs"][0]["extra"]["oracle_calls"], 20);
  const json cks = json::parse(read_file((dir / "checkpoints.json").string()));
  EXPECT_EQ(cks.size(), 3u);

  EXPECT_EQ(c.run("report " + dir.string()), 0);
  write_file((dir / "trace.csv").string(), "tampered\n");
  EXPECT_EQ(c.run("report " + dir.string()), 4);

  // Same command and seed: byte-identical report body.
  ASSERT_EQ(c.run("budgeted --seed 4 --runs 2 --budget 20 --data d.tsv --config tiny.json"), 0);
  EXPECT_EQ(read_file((c.last_path() / "report.json").string()), read_file((dir / "report.json").string()));
}
