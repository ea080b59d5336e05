/* Copyright 2026 The mfsr Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "mfsr/commands.hpp"

using namespace mfsr;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mfsr_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

io::Config data_config() {
  return io::Config::parse("[data]\nseed = 5\nexamples = 8\nframes = 4\n", "data");
}

io::Config run_config(int steps, int frames = 2, int seed = 0) {
  return io::Config::parse(
      "[model]\nframes = " + std::to_string(frames) +
          "\nencoder_widths = [4, 4]\ndecoder_widths = [4, 4, 4]\n"
          "[train]\nsteps = " + std::to_string(steps) +
          "\nbatch_size = 2\ncrop_lr = 4\neval_center_crop_lr = 4\ncheckpoint_every = 20\nseed = " +
          std::to_string(seed) + "\n",
      "run");
}

std::size_t lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string l; std::getline(in, l);) ++n;
  return n;
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(scratch("suite"));
    cli::cmd_gen_data(data_config(), *root_ / "data");
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root_);
    delete root_;
  }
  static fs::path data() { return *root_ / "data"; }
  static fs::path dir(const std::string& name) { return *root_ / name; }
  static fs::path* root_;
};
fs::path* CliTest::root_ = nullptr;

}  // namespace

TEST_F(CliTest, SmokeRunLogsEveryStep) {
  const auto r = cli::cmd_train(data(), run_config(50), dir("smoke"));
  EXPECT_EQ(r.final_step, 50);
  EXPECT_EQ(r.log_entries, 50u);
  EXPECT_EQ(lines(dir("smoke") / "loss.csv"), 51u);
  EXPECT_TRUE(fs::exists(dir("smoke") / "checkpoints" / "step_00000020.bin"));
  EXPECT_TRUE(fs::exists(dir("smoke") / "latest.bin"));
  EXPECT_TRUE(fs::exists(dir("smoke") / "run_manifest.toml"));
}

TEST_F(CliTest, ResumeMatchesUninterruptedRun) {
  cli::cmd_train(data(), run_config(30), dir("resumed"));
  cli::cmd_train(data(), run_config(50), dir("resumed"), true);
  cli::cmd_train(data(), run_config(50), dir("straight"));
  EXPECT_EQ(io::read_file(dir("resumed") / "latest.bin"), io::read_file(dir("straight") / "latest.bin"));
  EXPECT_EQ(io::read_file(dir("resumed") / "loss.csv"), io::read_file(dir("straight") / "loss.csv"));
}

TEST_F(CliTest, ResumeWithoutCheckpointFails) {
  EXPECT_THROW(cli::cmd_train(data(), run_config(5), dir("empty"), true), cli::CommandError);
}

TEST_F(CliTest, ConfigErrorsAreReportedBeforeTraining) {
  io::Config bad_lr = run_config(5);
  bad_lr.set("train.learning_rate", "-1");
  try {
    cli::cmd_train(data(), bad_lr, dir("bad_lr"));
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
  EXPECT_FALSE(fs::exists(dir("bad_lr") / "loss.csv"));

  io::Config unknown = run_config(5);
  unknown.set("train.lr", "0.1");
  EXPECT_THROW(cli::cmd_train(data(), unknown, dir("unknown")), io::ConfigError);

  io::Config odd = run_config(5, 3);
  EXPECT_THROW(cli::cmd_train(data(), odd, dir("odd")), io::ConfigError);

  io::Config big = run_config(5);
  big.set("train.crop_lr", "40");
  big.set("train.eval_center_crop_lr", "40");
  EXPECT_THROW(cli::cmd_train(data(), big, dir("big")), io::ConfigError);
}

TEST_F(CliTest, OracleEvaluationIsPerfect) {
  cli::cmd_train(data(), run_config(0), dir("oracle"));
  cli::EvalCommandOptions o;
  o.oracle = true;
  o.all_examples = true;
  const auto r = cli::cmd_eval(dir("oracle") / "latest.bin", data(), run_config(0), dir("oracle") / "eval", o);
  EXPECT_DOUBLE_EQ(r.building.miou, 1.0);
  ASSERT_TRUE(r.count.r2.has_value());
  EXPECT_NEAR(*r.count.r2, 1.0, 1e-9);
  const auto j = nlohmann::json::parse(io::read_file(dir("oracle") / "eval" / "report.json"));
  EXPECT_EQ(j["examples"], 8);
  EXPECT_TRUE(j.contains("miou_definition"));
}

TEST_F(CliTest, UntrainedModelStaysNearConstantBaseline) {
  cli::cmd_train(data(), run_config(0), dir("untrained"));
  cli::EvalCommandOptions o;
  o.all_examples = true;
  const auto r =
      cli::cmd_eval(dir("untrained") / "latest.bin", data(), run_config(0), dir("untrained") / "eval", o);
  EXPECT_LE(r.building.miou, r.constant_baseline_miou + 0.1);
}

TEST_F(CliTest, EvalRejectsMismatchedCheckpoint) {
  cli::cmd_train(data(), run_config(0, 2), dir("mismatch"));
  EXPECT_THROW(cli::cmd_eval(dir("mismatch") / "latest.bin", data(), run_config(0, 4), dir("mismatch") / "e"),
               io::FormatError);
}

TEST_F(CliTest, ReportIsDeterministicAndSortedByFrames) {
  for (auto [name, frames] : {std::pair{"a_four", 4}, std::pair{"b_one", 1}, std::pair{"c_two", 2}}) {
    cli::cmd_train(data(), run_config(3, frames), dir(name));
    cli::cmd_eval(dir(name) / "latest.bin", data(), run_config(3, frames), dir(name) / "eval");
  }
  const std::vector<fs::path> runs{dir("a_four"), dir("b_one"), dir("c_two")};
  cli::cmd_report(runs, dir("rep1"));
  cli::cmd_report(runs, dir("rep2"));
  for (const char* f : {"runs.csv", "timeframes.csv", "heights.csv", "timeframes.svg", "counts_b_one.svg"}) {
    EXPECT_EQ(io::read_file(dir("rep1") / f), io::read_file(dir("rep2") / f)) << f;
  }
  std::ifstream in(dir("rep1") / "runs.csv");
  std::string line;
  std::getline(in, line);
  std::vector<std::string> order;
  while (std::getline(in, line)) order.push_back(line.substr(0, line.find(',')));
  EXPECT_EQ(order, (std::vector<std::string>{"b_one", "c_two", "a_four"}));

  // A single run is a valid report.
  EXPECT_EQ(cli::cmd_report({dir("c_two")}, dir("rep3")).size(), 1u);
}

TEST_F(CliTest, ReportRejectsMixedDatasetsAndUnevaluatedRuns) {
  const fs::path other = dir("other_data");
  io::Config dc = data_config();
  dc.set("data.seed", "6");
  cli::cmd_gen_data(dc, other);
  for (auto [name, d] : {std::pair{"mix_a", data()}, std::pair{"mix_b", other}}) {
    cli::cmd_train(d, run_config(1), dir(name));
    cli::cmd_eval(dir(name) / "latest.bin", d, run_config(1), dir(name) / "eval");
  }
  EXPECT_THROW(cli::cmd_report({dir("mix_a"), dir("mix_b")}, dir("mix_rep")), std::invalid_argument);
  cli::cmd_train(data(), run_config(1), dir("no_eval"));
  EXPECT_THROW(cli::cmd_report({dir("no_eval")}, dir("ne_rep")), cli::CommandError);
}

TEST(Report, SvgRangesContainEveryPoint) {
  report::Series s{{0, 3, 7.5, 12}, {1.2, 2.9, 9.1, 10.4}};
  report::Range xr, yr;
  const std::string svg = report::svg_plot("t", "x", "y", s, false, true, &xr, &yr);
  for (double v : s.x) EXPECT_TRUE(xr.contains(v));
  for (double v : s.y) EXPECT_TRUE(yr.contains(v));
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  const auto flat = report::nice_range({2.0, 2.0});
  EXPECT_LT(flat.lo, 2.0);
  EXPECT_GT(flat.hi, 2.0);

  report::RunSummary r;
  r.name = "x";
  r.counts = {{1, 1}, {2, 2}};
  r.count_r2 = 0.98765;
  EXPECT_NE(report::count_scatter_svg(r).find("R^2 = 0.988"), std::string::npos);
}

TEST(Ablation, SpecParsing) {
  const auto specs = cli::parse_ablations(
      "[ablation.single]\nrepeats = 3\nmodel.frames = 1\nmodel.duplicate_single_frame = true\n"
      "[ablation.full]\nmodel.frames = 8\n",
      "spec");
  ASSERT_EQ(specs.size(), 2u);
  EXPECT_EQ(specs[0].name, "full");
  EXPECT_EQ(specs[0].repeats, 1);
  EXPECT_EQ(specs[1].name, "single");
  EXPECT_EQ(specs[1].repeats, 3);
  EXPECT_EQ(specs[1].overrides.raw("model.frames"), "1");

  EXPECT_THROW(cli::parse_ablations("[ablation.a]\nrepeats = 1\n[ablation.a]\nmodel.frames = 2\n", "s"),
               io::ConfigError);
  EXPECT_THROW(cli::parse_ablations("[ablation.a]\nrepeats = 0\n", "s"), io::ConfigError);
  EXPECT_THROW(cli::parse_ablations("[other]\nx = 1\n", "s"), io::ConfigError);
  EXPECT_THROW(cli::parse_ablations("", "s"), io::ConfigError);
}

TEST_F(CliTest, AblationRunsEveryRepeatWithDistinctSeeds) {
  const auto specs = cli::parse_ablations(
      "[ablation.one]\nrepeats = 2\nmodel.frames = 1\n[ablation.two]\nmodel.frames = 2\n", "spec");
  const auto dirs = cli::cmd_ablate(data(), run_config(2), specs, dir("ablate"));
  ASSERT_EQ(dirs.size(), 3u);
  const auto m0 = io::Config::load(dirs[0] / "run_manifest.toml");
  const auto m1 = io::Config::load(dirs[1] / "run_manifest.toml");
  EXPECT_EQ(m0.raw("train.seed"), "0");
  EXPECT_EQ(m1.raw("train.seed"), "1");
  EXPECT_EQ(lines(dir("ablate") / "report" / "runs.csv"), 4u);

  // A bad override fails before any run starts.
  const auto bad = cli::parse_ablations("[ablation.ok]\nmodel.frames = 2\n[ablation.zz]\nmodel.frames = 3\n", "s");
  EXPECT_THROW(cli::cmd_ablate(data(), run_config(2), bad, dir("ablate_bad")), io::ConfigError);
  EXPECT_FALSE(fs::exists(dir("ablate_bad") / "ok_r0"));
}

TEST_F(CliTest, BinaryPrintsJsonErrorLine) {
  const fs::path err = dir("stderr.txt");
  const std::string cmd = std::string(MFSR_CLI_PATH) + " train --data " + (dir("missing")).string() +
                          " --config /nonexistent.toml --out " + dir("x").string() + " 2> " + err.string();
  const int rc = std::system(cmd.c_str());
  EXPECT_NE(rc, 0);
  const auto j = nlohmann::json::parse(io::read_file(err));
  EXPECT_TRUE(j.contains("error"));
  EXPECT_TRUE(j.contains("message"));

  const std::string ok = std::string(MFSR_CLI_PATH) + " --help > /dev/null";
  EXPECT_EQ(std::system(ok.c_str()), 0);
}
