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

#pragma once

// Pipeline commands behind the CLI verbs: gen-data, train, eval, report and
// ablate. Each writes only under its output directory.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mfsr/dataset.hpp"
#include "mfsr/evaluate.hpp"
#include "mfsr/io/config.hpp"
#include "mfsr/report.hpp"
#include "mfsr/train.hpp"

namespace mfsr::cli {

namespace fs = std::filesystem;

class CommandError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Merged config files, later files overriding earlier ones.
inline io::Config load_configs(const std::vector<std::string>& paths) {
  io::Config cfg;
  for (const auto& p : paths) cfg.merge(io::Config::load(p));
  return cfg;
}

inline void reject_sections(const io::Config& cfg, const std::set<std::string>& allowed) {
  for (const auto& [k, _] : cfg.values()) {
    const std::string head = k.substr(0, k.find('.'));
    if (!allowed.count(head) || k.find('.') == std::string::npos) {
      throw io::ConfigError("unknown config key '" + k + "'");
    }
  }
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataResult {
  int examples = 0;
  std::string data_hash;
};

inline GenDataResult cmd_gen_data(const io::Config& cfg, const fs::path& out, int threads = 1) {
  reject_sections(cfg, {"data", "scene", "stack"});
  DatasetConfig dc;
  dc.read(cfg);
  const auto manifest = write_dataset(dc, generate_examples(dc, threads), out);
  io::write_file_atomic(out / "data_config.toml", dc.echo());
  return {manifest["example_count"].get<int>(), manifest["data_hash"].get<std::string>()};
}

// ---------------------------------------------------------------------------
// Run configuration shared by train and eval.

struct RunSetup {
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  double train_fraction = 0.75;

  static RunSetup from(const io::Config& cfg) {
    reject_sections(cfg, {"model", "loss", "train", "split"});
    RunSetup r;
    read_model_config(cfg, r.model);
    read_loss_config(cfg, r.loss);
    r.train.fields().read(cfg, "train");
    r.train.validate();
    io::FieldSet split;
    split.add("train_fraction", &r.train_fraction);
    split.read(cfg, "split");
    if (!(r.train_fraction > 0 && r.train_fraction < 1)) {
      throw io::ConfigError("split.train_fraction must lie in (0,1)");
    }
    return r;
  }

  std::string echo() const {
    TrainConfig t = train;
    double f = train_fraction;
    io::FieldSet split;
    split.add("train_fraction", &f);
    return echo_model_config(model) + "\n" + echo_loss_config(loss) + "\n" + t.fields().write("train") +
           "\n" + split.write("split");
  }

  // First floor(n * train_fraction) examples train; the rest are held out.
  std::pair<std::vector<int>, std::vector<int>> split_indices(int n) const {
    const int k = static_cast<int>(std::floor(n * train_fraction));
    std::vector<int> tr, te;
    for (int i = 0; i < n; ++i) (i < k ? tr : te).push_back(i);
    return {tr, te};
  }
};

inline void check_against_dataset(const RunSetup& rs, const Dataset& ds) {
  if (rs.model.band_count != ds.band_count) {
    throw io::ConfigError("model.band_count " + std::to_string(rs.model.band_count) +
                          " does not match the dataset's " + std::to_string(ds.band_count) + " bands");
  }
  if (rs.model.frames != 1 && rs.model.frames % 2 != 0) {
    throw io::ConfigError("model.frames must be 1 or even, got " + std::to_string(rs.model.frames));
  }
  if (rs.train.crop_lr > ds.grid) {
    throw io::ConfigError("train.crop_lr " + std::to_string(rs.train.crop_lr) +
                          " exceeds the dataset tile extent " + std::to_string(ds.grid));
  }
  const auto [tr, te] = rs.split_indices(static_cast<int>(ds.examples.size()));
  if (tr.empty() || te.empty()) throw io::ConfigError("split leaves no training or no held-out examples");
}

inline std::string loss_line(const LogEntry& e) {
  std::ostringstream os;
  os << e.step << ',' << io::format_double(e.loss);
  for (double v : e.per_task) os << ',' << io::format_double(v);
  return os.str();
}

inline constexpr const char* kLossHeader = "step,loss,building,road,centroid,height,grayscale";

// ---------------------------------------------------------------------------
// train

struct TrainResult {
  std::int64_t final_step = 0;
  std::size_t log_entries = 0;
};

inline TrainResult cmd_train(const fs::path& data_dir, const io::Config& cfg, const fs::path& out,
                             bool resume = false) {
  const RunSetup rs = RunSetup::from(cfg);
  const Dataset ds = load_dataset(data_dir);
  check_against_dataset(rs, ds);
  const auto [tr, te] = rs.split_indices(static_cast<int>(ds.examples.size()));
  const std::string hash = model_config_hash(rs.model);

  fs::create_directories(out / "checkpoints");
  const fs::path manifest = out / "run_manifest.toml";
  std::ostringstream run;
  run << "[run]\n"
      << "dataset_hash = \"" << ds.content_hash << "\"\n"
      << "config_hash = \"" << hash << "\"\n"
      << "train_examples = " << tr.size() << "\n"
      << "heldout_examples = " << te.size() << "\n\n"
      << rs.echo();

  std::optional<Checkpoint> start;
  std::vector<std::string> log_lines;
  if (resume) {
    if (!fs::exists(out / "latest.bin")) throw CommandError("resume: no checkpoint in " + out.string());
    // Steps and logging cadence may change on resume; the data may not.
    if (fs::exists(manifest) && io::Config::load(manifest).raw("run.dataset_hash") !=
                                    "\"" + ds.content_hash + "\"") {
      throw io::ConfigError("resume: the run was trained on a different dataset");
    }
    start = load_checkpoint(out / "latest.bin", hash);
    std::ifstream in(out / "loss.csv");
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (std::stoll(line.substr(0, line.find(','))) < start->step) log_lines.push_back(line);
    }
  }
  io::write_file_atomic(manifest, run.str());

  auto flush_log = [&] {
    std::string s = std::string(kLossHeader) + "\n";
    for (const auto& l : log_lines) s += l + "\n";
    io::write_file_atomic(out / "loss.csv", s);
  };
  TrainHooks hooks;
  hooks.on_log = [&](const LogEntry& e) { log_lines.push_back(loss_line(e)); };
  hooks.on_checkpoint = [&](const Checkpoint& ck) {
    // Log first so a resumed run never sees a checkpoint newer than its log.
    flush_log();
    char name[32];
    std::snprintf(name, sizeof name, "step_%08lld.bin", static_cast<long long>(ck.step));
    save_checkpoint(ck, out / "checkpoints" / name);
    save_checkpoint(ck, out / "latest.bin");
  };
  const Checkpoint ck = train_loop(ds, tr, rs.model, rs.loss, rs.train, std::move(start), hooks);
  flush_log();
  if (!fs::exists(out / "latest.bin")) save_checkpoint(ck, out / "latest.bin");
  return {ck.step, log_lines.size()};
}

// ---------------------------------------------------------------------------
// eval

struct EvalCommandOptions {
  bool oracle = false;
  bool all_examples = false;  // score every example instead of the held-out split
  int threads = 1;
};

inline EvalReport cmd_eval(const fs::path& checkpoint, const fs::path& data_dir, const io::Config& cfg,
                           const fs::path& out, const EvalCommandOptions& opt = {}) {
  const RunSetup rs = RunSetup::from(cfg);
  const Dataset ds = load_dataset(data_dir);
  if (rs.model.band_count != ds.band_count) {
    throw io::ConfigError("model.band_count does not match the dataset");
  }
  const Checkpoint ck = load_checkpoint(checkpoint, model_config_hash(rs.model));
  // Every parameter the model needs must be present with the right shape.
  {
    ParamStore<float> probe = ck.params;
    Graph<float> g;
    ParamBinder<float> p(g, probe);
    build_model(p, g.leaf(Tensor<float>({rs.model.frames, 4, 4, rs.model.input_channels()}), false),
                rs.model, false);
  }
  auto [tr, te] = rs.split_indices(static_cast<int>(ds.examples.size()));
  std::vector<int> idx = te;
  if (opt.all_examples) {
    idx = tr;
    idx.insert(idx.end(), te.begin(), te.end());
  }
  EvalOptions eo;
  eo.center_crop_lr = rs.train.eval_center_crop_lr;
  eo.oracle = opt.oracle;
  eo.threads = opt.threads;
  const EvalReport r = evaluate(ds, idx, ck.params, rs.model, rs.loss, ck.count_scale, eo);

  fs::create_directories(out);
  auto j = report_json(r);
  j["dataset_hash"] = ds.content_hash;
  j["checkpoint_step"] = ck.step;
  j["config_hash"] = ck.config_hash;
  j["oracle"] = opt.oracle;
  io::write_file_atomic(out / "report.json", j.dump(2) + "\n");
  io::write_file_atomic(out / "segmentation.csv", segmentation_csv(r));
  io::write_file_atomic(out / "counts.csv", counts_csv(r));
  io::write_file_atomic(out / "heights.csv", heights_csv(r));
  return r;
}

// ---------------------------------------------------------------------------
// report

inline report::RunSummary load_run(const fs::path& dir) {
  const fs::path manifest = dir / "run_manifest.toml";
  const fs::path rep = dir / "eval" / "report.json";
  if (!fs::exists(manifest) || !fs::exists(rep)) {
    throw CommandError("report: '" + dir.string() + "' is not a completed, evaluated run");
  }
  io::Config cfg = io::Config::load(manifest);
  io::Config rest;
  for (const auto& [k, v] : cfg.values())
    if (k.rfind("run.", 0) != 0) rest.set(k, v);
  const RunSetup rs = RunSetup::from(rest);
  const auto j = nlohmann::json::parse(io::read_file(rep));

  report::RunSummary s;
  s.name = dir.filename().string();
  if (s.name.empty()) s.name = dir.parent_path().filename().string();
  s.dataset_hash = j.at("dataset_hash");
  s.frames = rs.model.frames;
  s.duplicate_single_frame = rs.model.duplicate_single_frame;
  s.use_hr_incidence = rs.model.use_hr_incidence;
  s.fusion_mode = to_string(rs.model.fusion_mode);
  s.seed = rs.train.seed;
  s.building_miou = j["building"]["miou"];
  s.road_miou = j["road"]["miou"];
  if (!j["count"]["r2"].is_null()) s.count_r2 = j["count"]["r2"].get<double>();
  s.count_mae = j["count"]["mae"];
  for (const auto& b : j["height_ae"]) {
    if (b["bucket"] == "(0,100]") s.height_mae = b["mean_ae_m"];
    s.height_rows.push_back({"\"" + b["bucket"].get<std::string>() + "\"",
                             std::to_string(b["instances"].get<int>()),
                             report::fmt(b["mean_ae_m"]), report::fmt(b["p50"]), report::fmt(b["p90"]),
                             report::fmt(b["p95"]), report::fmt(b["p99"])});
  }
  s.builtup_error = j["builtup_area"]["error"];
  s.registered_mse = j["registered_mse"];
  std::ifstream counts(dir / "eval" / "counts.csv");
  std::string line;
  std::getline(counts, line);
  while (std::getline(counts, line)) {
    std::istringstream is(line);
    std::string a, b, c;
    std::getline(is, a, ',');
    std::getline(is, b, ',');
    std::getline(is, c, ',');
    s.counts.push_back({std::stod(b), std::stod(c)});
  }
  return s;
}

inline std::vector<report::RunSummary> cmd_report(const std::vector<fs::path>& runs, const fs::path& out) {
  std::vector<report::RunSummary> all;
  for (const auto& r : runs) all.push_back(load_run(r));
  report::check_compatible(all);
  fs::create_directories(out);
  io::write_file_atomic(out / "runs.csv", report::runs_csv(all));
  io::write_file_atomic(out / "timeframes.csv", report::timeframes_csv(all));
  io::write_file_atomic(out / "heights.csv", report::heights_csv(all));
  io::write_file_atomic(out / "timeframes.svg", report::timeframes_svg(all));
  for (const auto& r : all) io::write_file_atomic(out / ("counts_" + r.name + ".svg"), report::count_scatter_svg(r));
  return all;
}

// ---------------------------------------------------------------------------
// ablate

struct AblationSpec {
  std::string name;
  io::Config overrides;  // dotted config path -> raw value
  int repeats = 1;
};

// [ablation.<name>] sections: `repeats = n` plus dotted overrides such as
// `model.frames = 1`.
inline std::vector<AblationSpec> parse_ablations(const std::string& text, const std::string& origin) {
  std::set<std::string> headers;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = io::detail::trim(io::detail::strip_comment(line));
    if (!t.empty() && t.front() == '[' && !headers.insert(t).second) {
      throw io::ConfigError(origin + ": ablation section " + t + " appears twice");
    }
  }
  const io::Config cfg = io::Config::parse(text, origin);
  std::vector<AblationSpec> out;
  std::map<std::string, std::size_t> index;
  for (const auto& [k, v] : cfg.values()) {
    if (k.rfind("ablation.", 0) != 0) throw io::ConfigError("unknown ablation key '" + k + "'");
    const std::string rest = k.substr(9);
    const auto dot = rest.find('.');
    if (dot == std::string::npos) throw io::ConfigError("ablation key '" + k + "' has no setting");
    const std::string name = rest.substr(0, dot), key = rest.substr(dot + 1);
    auto [it, fresh] = index.try_emplace(name, out.size());
    if (fresh) out.push_back({name, {}, 1});
    AblationSpec& spec = out[it->second];
    if (key == "repeats") {
      spec.repeats = static_cast<int>(io::detail::parse_int(k, v));
      if (spec.repeats < 1) throw io::ConfigError("ablation '" + name + "': repeats must be >= 1");
    } else {
      spec.overrides.set(key, v);
    }
  }
  if (out.empty()) throw io::ConfigError(origin + ": no ablations defined");
  return out;
}

// Trains and evaluates every (ablation, repeat); repeat r adds r to the
// training seed. Then writes a combined report.
inline std::vector<fs::path> cmd_ablate(const fs::path& data_dir, const io::Config& base,
                                        const std::vector<AblationSpec>& specs, const fs::path& out,
                                        int threads = 1) {
  // Pre-flight every configuration before any training starts.
  std::vector<std::pair<fs::path, io::Config>> jobs;
  const Dataset ds = load_dataset(data_dir);
  for (const auto& spec : specs) {
    for (int r = 0; r < spec.repeats; ++r) {
      io::Config cfg = base;
      cfg.merge(spec.overrides);
      const RunSetup rs = RunSetup::from(cfg);
      if (!spec.overrides.has("train.seed")) cfg.set("train.seed", std::to_string(rs.train.seed + r));
      check_against_dataset(RunSetup::from(cfg), ds);
      jobs.push_back({out / (spec.name + "_r" + std::to_string(r)), cfg});
    }
  }
  std::vector<fs::path> dirs;
  for (const auto& [dir, cfg] : jobs) {
    cmd_train(data_dir, cfg, dir);
    EvalCommandOptions eo;
    eo.threads = threads;
    cmd_eval(dir / "latest.bin", data_dir, cfg, dir / "eval", eo);
    dirs.push_back(dir);
  }
  cmd_report(dirs, out / "report");
  return dirs;
}

}  // namespace mfsr::cli
