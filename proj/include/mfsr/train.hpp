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

// Adam, checkpoints and the deterministic training loop.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfsr/dataset.hpp"
#include "mfsr/eval.hpp"
#include "mfsr/io/archive.hpp"
#include "mfsr/io/config.hpp"
#include "mfsr/loss.hpp"
#include "mfsr/model.hpp"

namespace mfsr {

struct TrainConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int steps = 2000;
  int batch_size = 4;
  int crop_lr = 12;
  int eval_center_crop_lr = 12;
  double pad_probability = 0.2;
  std::uint64_t seed = 0;
  int log_every = 1;
  int checkpoint_every = 500;

  void validate() const {
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) {
      throw std::invalid_argument("train config: learning_rate must be > 0");
    }
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
      throw std::invalid_argument("train config: betas must lie in [0,1)");
    }
    if (!(adam_eps > 0)) throw std::invalid_argument("train config: adam_eps must be > 0");
    if (steps < 0) throw std::invalid_argument("train config: steps must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (crop_lr < 1 || eval_center_crop_lr < 1) {
      throw std::invalid_argument("train config: crop sizes must be >= 1");
    }
    if (eval_center_crop_lr > crop_lr) {
      throw std::invalid_argument("train config: eval crop must not exceed the train crop");
    }
    if (pad_probability < 0 || pad_probability > 1) {
      throw std::invalid_argument("train config: pad_probability outside [0,1]");
    }
    if (log_every < 1 || checkpoint_every < 1) {
      throw std::invalid_argument("train config: log_every and checkpoint_every must be >= 1");
    }
  }

  io::FieldSet fields() {
    io::FieldSet f;
    f.add("learning_rate", &learning_rate).add("beta1", &beta1).add("beta2", &beta2);
    f.add("adam_eps", &adam_eps).add("steps", &steps).add("batch_size", &batch_size);
    f.add("crop_lr", &crop_lr).add("eval_center_crop_lr", &eval_center_crop_lr);
    f.add("pad_probability", &pad_probability).add("seed", &seed);
    f.add("log_every", &log_every).add("checkpoint_every", &checkpoint_every);
    return f;
  }
};

inline io::FieldSet model_fields(ModelConfig& m, std::string& fusion) {
  fusion = to_string(m.fusion_mode);
  io::FieldSet f;
  f.add("upscale_factor", &m.upscale_factor).add("frames", &m.frames);
  f.add("band_count", &m.band_count).add("encoder_widths", &m.encoder_widths);
  f.add("fusion_mode", &fusion).add("decoder_widths", &m.decoder_widths);
  f.add("output_channels", &m.output_channels).add("use_hr_incidence", &m.use_hr_incidence);
  f.add("duplicate_single_frame", &m.duplicate_single_frame);
  return f;
}

inline void read_model_config(const io::Config& cfg, ModelConfig& m) {
  std::string fusion;
  model_fields(m, fusion).read(cfg, "model");
  m.fusion_mode = parse_fusion_mode(fusion);
  m.validate();
}

inline std::string echo_model_config(ModelConfig m) {
  std::string fusion;
  return model_fields(m, fusion).write("model");
}

inline io::FieldSet loss_fields(LossConfig& l, std::vector<double>& weights) {
  weights.assign(l.task_weights.begin(), l.task_weights.end());
  io::FieldSet f;
  f.add("gamma_f", &l.gamma_f).add("epsilon", &l.epsilon);
  f.add("max_shift_x", &l.max_shift_x).add("max_shift_y", &l.max_shift_y);
  f.add("task_weights", &weights).add("height_cap_m", &l.height_cap_m);
  return f;
}

inline void read_loss_config(const io::Config& cfg, LossConfig& l) {
  std::vector<double> w;
  loss_fields(l, w).read(cfg, "loss");
  if (w.size() != kChannels) throw io::ConfigError("loss.task_weights needs 5 entries");
  std::copy(w.begin(), w.end(), l.task_weights.begin());
  l.validate();
}

inline std::string echo_loss_config(LossConfig l) {
  std::vector<double> w;
  return loss_fields(l, w).write("loss");
}

inline std::string model_config_hash(const ModelConfig& cfg) {
  return detail::hex64(fnv1a(cfg.canonical()));
}

// ---------------------------------------------------------------------------
// Adam.

struct AdamState {
  std::map<std::string, Tensor<float>> m, v;
};

// One bias-corrected Adam step at t = step + 1. Only trainable entries move.
inline void adam_step(ParamStore<float>& params, const std::map<std::string, Tensor<float>>& grads,
                      AdamState& state, std::int64_t step, const TrainConfig& cfg) {
  for (const auto& [name, g] : grads) {
    for (float x : g.data) {
      if (!std::isfinite(x)) throw std::runtime_error("non-finite gradient in parameter '" + name + "'");
    }
  }
  const double t = static_cast<double>(step + 1);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, e] : params.entries) {
    if (!e.trainable) continue;
    auto git = grads.find(name);
    if (git == grads.end()) throw std::invalid_argument("adam_step: no gradient for '" + name + "'");
    const auto& g = git->second;
    if (!(g.shape == e.value.shape)) throw ShapeError("adam_step: gradient shape for '" + name + "'");
    auto& m = state.m.try_emplace(name, Tensor<float>(e.value.shape)).first->second;
    auto& v = state.v.try_emplace(name, Tensor<float>(e.value.shape)).first->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g.data[i];
      const double mi = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
      m.data[i] = static_cast<float>(mi);
      v.data[i] = static_cast<float>(vi);
      const double update = cfg.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + cfg.adam_eps);
      e.value.data[i] = static_cast<float>(e.value.data[i] - update);
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints.

struct Checkpoint {
  ParamStore<float> params;
  AdamState adam;
  std::int64_t step = 0;
  std::string config_hash;
  double count_scale = 0.0;  // K, calibrated on the training labels
};

inline io::Archive checkpoint_archive(const Checkpoint& ck) {
  io::Archive a;
  a.set_meta("kind", "checkpoint");
  a.set_meta("step", std::to_string(ck.step));
  a.set_meta("config_hash", ck.config_hash);
  a.set_meta("count_scale", io::format_double(ck.count_scale));
  for (const auto& [name, e] : ck.params.entries) {
    a.add((e.trainable ? "param." : "buffer.") + name, e.value);
  }
  for (const auto& [name, e] : ck.params.entries) {
    if (!e.trainable) continue;
    auto m = ck.adam.m.find(name);
    auto v = ck.adam.v.find(name);
    a.add("adam_m." + name, m != ck.adam.m.end() ? m->second : Tensor<float>(e.value.shape));
    a.add("adam_v." + name, v != ck.adam.v.end() ? v->second : Tensor<float>(e.value.shape));
  }
  return a;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::save_archive(checkpoint_archive(ck), path);
}

inline Checkpoint checkpoint_from_archive(const io::Archive& a,
                                          const std::optional<std::string>& expected_hash = {}) {
  const std::string* kind = a.find_meta("kind");
  if (!kind || *kind != "checkpoint") throw io::FormatError("not a checkpoint archive");
  Checkpoint ck;
  ck.step = std::stoll(a.meta_at("step"));
  ck.config_hash = a.meta_at("config_hash");
  ck.count_scale = std::stod(a.meta_at("count_scale"));
  if (expected_hash && *expected_hash != ck.config_hash) {
    throw io::FormatError("checkpoint config hash " + ck.config_hash + " does not match model config " +
                          *expected_hash);
  }
  for (const auto& e : a.arrays) {
    const auto dot = e.name.find('.');
    const std::string kind_prefix = e.name.substr(0, dot), name = e.name.substr(dot + 1);
    if (kind_prefix == "param" || kind_prefix == "buffer") {
      ck.params.entries[name] = {a.get<float>(e.name), kind_prefix == "param"};
    } else if (kind_prefix == "adam_m") {
      ck.adam.m[name] = a.get<float>(e.name);
    } else if (kind_prefix == "adam_v") {
      ck.adam.v[name] = a.get<float>(e.name);
    } else {
      throw io::FormatError("checkpoint: unexpected array '" + e.name + "'");
    }
  }
  for (const auto& [name, e] : ck.params.entries) {
    if (e.trainable && (!ck.adam.m.count(name) || !ck.adam.v.count(name))) {
      throw io::FormatError("checkpoint: parameter '" + name + "' has no optimizer state");
    }
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const std::optional<std::string>& expected_hash = {}) {
  return checkpoint_from_archive(io::load_archive(path), expected_hash);
}

// ---------------------------------------------------------------------------
// Cropping.

struct CropWindow {
  int x = 0;  // LR pixel offsets
  int y = 0;
  int size = 0;
};

inline std::vector<Frame> crop_frames(const std::vector<Frame>& frames, const CropWindow& w) {
  std::vector<Frame> out;
  out.reserve(frames.size());
  for (const auto& f : frames) {
    const Shape s = f.bands.shape;
    if (w.x < 0 || w.y < 0 || w.x + w.size > s.w || w.y + w.size > s.h) {
      throw ShapeError("crop_frames: window outside a " + std::to_string(s.h) + "x" +
                       std::to_string(s.w) + " frame");
    }
    Frame c;
    c.meta = f.meta;
    c.padding = f.padding;
    c.bands = Tensor<float>({1, w.size, w.size, s.c});
    for (int y = 0; y < w.size; ++y)
      for (int x = 0; x < w.size; ++x)
        for (int b = 0; b < s.c; ++b) c.bands.at(0, y, x, b) = f.bands.at(0, w.y + y, w.x + x, b);
    c.meta.opaque_cloud = f.meta.opaque_cloud.window(w.y, w.x, w.size, w.size);
    out.push_back(std::move(c));
  }
  return out;
}

// HR window matching an LR crop: upscale * window, plus the label margins on
// every side.
inline HighResLabelSet crop_labels(const HighResLabelSet& labels, const CropWindow& w, int upscale) {
  const int rows = upscale * w.size + 2 * labels.margin_y;
  const int cols = upscale * w.size + 2 * labels.margin_x;
  HighResLabelSet out = labels;
  for (int c = 0; c < kChannels; ++c)
    out.channels[c] = labels.channels[c].window(upscale * w.y, upscale * w.x, rows, cols);
  return out;
}

inline CropWindow center_crop(int grid, int size) {
  if (size > grid) throw std::invalid_argument("center crop larger than the tile");
  return {(grid - size) / 2, (grid - size) / 2, size};
}

// ---------------------------------------------------------------------------
// Training loop.

struct LogEntry {
  std::int64_t step = 0;
  double loss = 0.0;
  std::array<double, kChannels> per_task{};
};

struct TrainHooks {
  std::function<void(const LogEntry&)> on_log;
  std::function<void(const Checkpoint&)> on_checkpoint;
};

inline std::vector<int> epoch_permutation(std::uint64_t seed, std::int64_t epoch, int n) {
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  Rng rng = make_rng(seed, {0xe90c, static_cast<std::uint64_t>(epoch)});
  for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[uniform_int(rng, 0, i)]);
  return perm;
}

inline double calibrate_on(const Dataset& ds, const std::vector<int>& indices) {
  std::vector<const Plane<float>*> labels;
  std::vector<int> counts;
  for (int i : indices) {
    labels.push_back(&ds.examples[i].labels[Channel::centroid]);
    counts.push_back(ds.examples[i].true_count);
  }
  return calibrate_count_scale(labels, counts).K;
}

inline Checkpoint initial_checkpoint(const ModelConfig& mcfg, const TrainConfig& tcfg) {
  Checkpoint ck;
  ck.params = init_params(mcfg, derive_seed(tcfg.seed, {0x1417}));
  ck.config_hash = model_config_hash(mcfg);
  return ck;
}

// Trains on ds.examples[indices] from `start` (or from scratch) up to
// tcfg.steps. All randomness derives from (seed, step), so resuming from a
// checkpoint reproduces an uninterrupted run bit for bit.
inline Checkpoint train_loop(const Dataset& ds, const std::vector<int>& indices,
                             const ModelConfig& mcfg, const LossConfig& lcfg,
                             const TrainConfig& tcfg, std::optional<Checkpoint> start = {},
                             const TrainHooks& hooks = {}) {
  mcfg.validate();
  lcfg.validate();
  tcfg.validate();
  if (indices.empty()) throw std::invalid_argument("train_loop: no training examples");
  if (tcfg.crop_lr > ds.grid) {
    throw std::invalid_argument("train config: crop_lr " + std::to_string(tcfg.crop_lr) +
                                " exceeds the tile extent " + std::to_string(ds.grid));
  }
  if (ds.band_count != mcfg.band_count) {
    throw std::invalid_argument("model config: band_count does not match the dataset");
  }
  if (mcfg.frames % 2 != 0 && mcfg.frames != 1) {
    throw std::invalid_argument("model config: frames must be even (or 1)");
  }
  Checkpoint ck = start ? std::move(*start) : initial_checkpoint(mcfg, tcfg);
  if (ck.config_hash != model_config_hash(mcfg)) {
    throw io::FormatError("checkpoint config hash does not match the model config");
  }
  if (!(ck.count_scale > 0)) ck.count_scale = calibrate_on(ds, indices);

  const int n = static_cast<int>(indices.size());
  const int B = tcfg.batch_size;
  const int target = std::max(2, mcfg.frames);
  std::int64_t cached_epoch = -1;
  std::vector<int> perm;

  for (std::int64_t step = ck.step; step < tcfg.steps; ++step) {
    std::vector<LowResStack> stacks(B);
    std::vector<HighResLabelSet> labels(B);
    std::vector<bool> has_height(B);
    for (int b = 0; b < B; ++b) {
      const std::int64_t s = step * B + b;
      const std::int64_t epoch = s / n;
      if (epoch != cached_epoch) {
        perm = epoch_permutation(tcfg.seed, epoch, n);
        cached_epoch = epoch;
      }
      const Example& ex = ds.examples[indices[perm[s % n]]];
      Rng rng = make_rng(tcfg.seed, {0x57e9, static_cast<std::uint64_t>(step),
                                     static_cast<std::uint64_t>(b)});
      const int span = ds.grid - tcfg.crop_lr;
      const CropWindow w{uniform_int(rng, 0, span), uniform_int(rng, 0, span), tcfg.crop_lr};
      const std::uint64_t pad_seed = rng();
      LowResStack st = pad_truncate_stack(crop_frames(ex.frames, w), target, pad_seed,
                                          tcfg.pad_probability, w.size, ds.band_count);
      if (mcfg.frames == 1) {
        st = duplicate_reference_frame(st);
        st.frames.resize(1);
      }
      stacks[b] = std::move(st);
      labels[b] = crop_labels(ex.labels, w, mcfg.upscale_factor);
      has_height[b] = ex.has_height;
    }

    std::vector<const LowResStack*> ptrs;
    for (const auto& s : stacks) ptrs.push_back(&s);
    Graph<float> g;
    ParamBinder<float> p(g, ck.params);
    const NodeId x = g.leaf(assemble_input(ptrs, mcfg), false);
    const NodeId y = build_model(p, x, mcfg, true);

    std::vector<HighResLabelSet> registered(B);
    std::vector<const HighResLabelSet*> reg_ptrs;
    const int H = g.value(y).shape.h, W = g.value(y).shape.w;
    for (int b = 0; b < B; ++b) {
      const Prediction pr = to_prediction(g.value(y), b);
      const Alignment al = register_translation(labels[b], pr, lcfg);
      registered[b] = shift_and_crop(labels[b], al.dx, al.dy, H, W);
      reg_ptrs.push_back(&registered[b]);
    }
    LogEntry entry;
    entry.step = step;
    const NodeId loss = multitask_loss(g, y, reg_ptrs, has_height, lcfg, &entry.per_task);
    entry.loss = g.value(loss).data[0];
    if (!std::isfinite(entry.loss)) throw std::runtime_error("non-finite loss at step " + std::to_string(step));
    g.backprop(loss);
    p.sync_buffers();

    std::map<std::string, Tensor<float>> grads;
    for (const auto& [name, id] : p.bound())
      if (ck.params.entries.at(name).trainable) grads[name] = g.grad(id);
    adam_step(ck.params, grads, ck.adam, step, tcfg);
    ck.step = step + 1;

    if (hooks.on_log && (step % tcfg.log_every == 0 || ck.step == tcfg.steps)) hooks.on_log(entry);
    if (hooks.on_checkpoint && (ck.step % tcfg.checkpoint_every == 0 || ck.step == tcfg.steps)) {
      hooks.on_checkpoint(ck);
    }
  }
  return ck;
}

}  // namespace mfsr
