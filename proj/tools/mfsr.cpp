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

// Command-line entry point: mfsr <verb> [options].

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mfsr/commands.hpp"

namespace {

int fail(const std::string& kind, const std::string& message, int code = 1) {
  nlohmann::json j;
  j["error"] = kind;
  j["message"] = message;
  std::cerr << j.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace mfsr;
  CLI::App app{"Multi-frame super-resolution mapping pipeline"};
  app.require_subcommand(1);

  std::string config, out, data, checkpoint, spec;
  std::vector<std::string> configs, runs;
  int threads = 1;
  bool resume = false, oracle = false, all = false;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--config", config, "Data config (TOML)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--data", data, "Dataset directory")->required();
  train->add_option("--config", configs, "Run config files; later files override")->required();
  train->add_option("--out", out, "Run directory")->required();
  train->add_flag("--resume", resume, "Continue from the run's latest checkpoint");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the held-out split");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", data, "Dataset directory")->required();
  eval->add_option("--config", configs, "Run config files")->required();
  eval->add_option("--out", out, "Report directory")->required();
  eval->add_flag("--oracle", oracle, "Score the truth labels as predictions");
  eval->add_flag("--all", all, "Score every example, not only the held-out split");
  eval->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  auto* report = app.add_subcommand("report", "Compare evaluated runs");
  report->add_option("--runs", runs, "Run directories")->required();
  report->add_option("--out", out, "Report directory")->required();

  auto* ablate = app.add_subcommand("ablate", "Train, evaluate and compare ablations");
  ablate->add_option("--data", data, "Dataset directory")->required();
  ablate->add_option("--config", configs, "Base run config files")->required();
  ablate->add_option("--spec", spec, "Ablation spec")->required()->check(CLI::ExistingFile);
  ablate->add_option("--out", out, "Output directory")->required();
  ablate->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    nlohmann::ordered_json result;
    if (*gen) {
      const auto r = cli::cmd_gen_data(io::Config::load(config), out, threads);
      result = {{"examples", r.examples}, {"data_hash", r.data_hash}, {"out", out}};
    } else if (*train) {
      const auto r = cli::cmd_train(data, cli::load_configs(configs), out, resume);
      result = {{"final_step", r.final_step}, {"log_entries", r.log_entries}, {"out", out}};
    } else if (*eval) {
      cli::EvalCommandOptions eo;
      eo.oracle = oracle;
      eo.all_examples = all;
      eo.threads = threads;
      const auto r = cli::cmd_eval(checkpoint, data, cli::load_configs(configs), out, eo);
      result = {{"examples", r.examples}, {"building_miou", r.building.miou}, {"out", out}};
    } else if (*report) {
      std::vector<std::filesystem::path> dirs(runs.begin(), runs.end());
      result = {{"runs", cli::cmd_report(dirs, out).size()}, {"out", out}};
    } else if (*ablate) {
      const auto specs = cli::parse_ablations(io::read_file(spec), spec);
      result = {{"runs", cli::cmd_ablate(data, cli::load_configs(configs), specs, out, threads).size()},
                {"out", out}};
    }
    std::cout << result.dump() << '\n';
  } catch (const io::ConfigError& e) {
    return fail("config", e.what());
  } catch (const std::invalid_argument& e) {
    return fail("config", e.what());
  } catch (const io::FormatError& e) {
    return fail("format", e.what());
  } catch (const std::exception& e) {
    return fail("runtime", e.what());
  }
  return 0;
}
