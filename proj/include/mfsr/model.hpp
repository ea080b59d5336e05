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

// Student network: a shared per-frame multi-resolution encoder with optional
// cross-time fusion, mean fusion over time and a x8 residual decoder.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfsr/graph.hpp"
#include "mfsr/rng.hpp"
#include "mfsr/scene.hpp"
#include "mfsr/stack.hpp"
#include "mfsr/tensor.hpp"

namespace mfsr {

enum class FusionMode { none, cross_time };

inline const char* to_string(FusionMode m) {
  return m == FusionMode::none ? "none" : "cross_time";
}

inline FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "none") return FusionMode::none;
  if (s == "cross_time") return FusionMode::cross_time;
  throw std::invalid_argument("unknown fusion_mode '" + s + "'");
}

struct ModelConfig {
  int upscale_factor = 8;
  int frames = 8;
  int band_count = 4;
  std::vector<int> encoder_widths{16, 16};  // full-resolution, half-resolution branch
  FusionMode fusion_mode = FusionMode::cross_time;
  std::vector<int> decoder_widths{24, 16, 8};
  int output_channels = kChannels;
  bool use_hr_incidence = true;        // feed the label viewing geometry as metadata
  bool duplicate_single_frame = false;  // every slot sees the reference frame

  int input_channels() const { return band_count + kMetadataChannels; }
  int feature_width() const { return encoder_widths.at(0); }

  void validate() const {
    if (frames < 1) throw std::invalid_argument("model config: frames must be >= 1");
    if (band_count < 1) throw std::invalid_argument("model config: band_count must be >= 1");
    if (encoder_widths.size() != 2) {
      throw std::invalid_argument("model config: encoder_widths needs 2 entries");
    }
    if (decoder_widths.size() != 3) {
      throw std::invalid_argument("model config: decoder_widths needs 3 entries");
    }
    for (int w : encoder_widths)
      if (w < 1) throw std::invalid_argument("model config: widths must be >= 1");
    for (int w : decoder_widths)
      if (w < 1) throw std::invalid_argument("model config: widths must be >= 1");
    if (upscale_factor != (1 << decoder_widths.size())) {
      throw std::invalid_argument("model config: upscale_factor must be 2^len(decoder_widths)");
    }
    if (output_channels != kChannels) {
      throw std::invalid_argument("model config: output_channels must be 5");
    }
  }

  // Canonical text; its hash ties checkpoints to the architecture.
  std::string canonical() const {
    std::ostringstream os;
    os << "upscale_factor=" << upscale_factor << ";frames=" << frames
       << ";band_count=" << band_count << ";encoder_widths=";
    for (int w : encoder_widths) os << w << ",";
    os << ";fusion_mode=" << to_string(fusion_mode) << ";decoder_widths=";
    for (int w : decoder_widths) os << w << ",";
    os << ";output_channels=" << output_channels
       << ";use_hr_incidence=" << use_hr_incidence
       << ";duplicate_single_frame=" << duplicate_single_frame;
    return os.str();
  }
};

template <typename T>
struct ParamStore {
  struct Entry {
    Tensor<T> value;
    bool trainable = true;
  };
  std::map<std::string, Entry> entries;

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries)
      if (e.trainable) n += e.value.size();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, e] : entries) out.entries[name] = {e.value.template cast<U>(), e.trainable};
    return out;
  }
};

// Binds named parameters to graph leaves. In create mode missing entries are
// initialised (weights U(+-1/sqrt(fan_in)) seeded by name, biases and betas
// zero, gammas one); otherwise a missing or mis-shaped entry is an error.
template <typename T>
class ParamBinder {
 public:
  ParamBinder(Graph<T>& g, ParamStore<T>& store, bool create = false, std::uint64_t seed = 0)
      : g_(g), store_(store), create_(create), seed_(seed) {}

  NodeId weight(const std::string& name, Shape s, int fan_in) {
    return bind(name, s, true, [&](Tensor<T>& t) {
      Rng rng = make_rng(seed_, {fnv1a(name)});
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (auto& v : t.data) v = static_cast<T>(uniform(rng, -bound, bound));
    });
  }
  NodeId constant(const std::string& name, Shape s, double fill, bool trainable = true) {
    return bind(name, s, trainable, [&](Tensor<T>& t) {
      for (auto& v : t.data) v = static_cast<T>(fill);
    });
  }

  // Uses an existing leaf for `name` instead of creating one from the store.
  void preset(const std::string& name, NodeId id) { bound_[name] = id; }

  // Running statistics live in graph leaves during a pass; copy them back.
  void sync_buffers() {
    for (const auto& [name, id] : bound_) {
      auto& e = store_.entries.at(name);
      if (!e.trainable) e.value = g_.value(id);
    }
  }

  const std::map<std::string, NodeId>& bound() const { return bound_; }
  Graph<T>& graph() { return g_; }

 private:
  template <typename Init>
  NodeId bind(const std::string& name, Shape s, bool trainable, Init&& init) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    auto it = store_.entries.find(name);
    if (it == store_.entries.end()) {
      if (!create_) throw std::invalid_argument("parameter '" + name + "' missing from store");
      typename ParamStore<T>::Entry e{Tensor<T>(s), trainable};
      init(e.value);
      it = store_.entries.emplace(name, std::move(e)).first;
    } else if (!(it->second.value.shape == s)) {
      throw ShapeError("parameter '" + name + "' has shape " + it->second.value.shape.str() +
                       ", model expects " + s.str());
    }
    const NodeId id = g_.leaf(it->second.value, it->second.trainable);
    bound_.emplace(name, id);
    return id;
  }

  Graph<T>& g_;
  ParamStore<T>& store_;
  bool create_;
  std::uint64_t seed_;
  std::map<std::string, NodeId> bound_;
};

namespace layers {

template <typename T>
NodeId batch_norm(ParamBinder<T>& p, NodeId x, const std::string& name, bool training) {
  auto& g = p.graph();
  const int c = g.value(x).shape.c;
  const Shape s{1, 1, 1, c};
  return g.batch_norm(x, p.constant(name + ".gamma", s, 1.0), p.constant(name + ".beta", s, 0.0),
                      p.constant(name + ".running_mean", s, 0.0, false),
                      p.constant(name + ".running_var", s, 1.0, false), training);
}

template <typename T>
NodeId conv3x3(ParamBinder<T>& p, NodeId x, const std::string& name, int co, int stride = 1,
               bool bias = false) {
  auto& g = p.graph();
  const int ci = g.value(x).shape.c;
  const NodeId w = p.weight(name + ".w", {3, 3, ci, co}, 9 * ci);
  std::optional<NodeId> b;
  if (bias) b = p.constant(name + ".b", {1, 1, 1, co}, 0.0);
  return g.conv2d(x, w, b, stride);
}

template <typename T>
NodeId pointwise(ParamBinder<T>& p, NodeId x, const std::string& name, int co, bool bias) {
  auto& g = p.graph();
  const int ci = g.value(x).shape.c;
  const NodeId w = p.weight(name + ".w", {1, 1, ci, co}, ci);
  std::optional<NodeId> b;
  if (bias) b = p.constant(name + ".b", {1, 1, 1, co}, 0.0);
  return g.pointwise_conv(x, w, b);
}

template <typename T>
NodeId conv_bn_relu(ParamBinder<T>& p, NodeId x, const std::string& name, int co, int stride,
                    bool training) {
  const NodeId c = conv3x3(p, x, name + ".conv", co, stride);
  return p.graph().relu(batch_norm(p, c, name + ".bn", training));
}

}  // namespace layers

// Per pixel: depthwise conv over the T axis with depth multiplier T, the
// resulting T*c values viewed as T slots of c channels, a shared 1x1 conv
// over channels (no bias: it would only shift the following normalisation),
// and a residual add. Input batch holds T consecutive frames
// per example.
template <typename T>
NodeId cross_time_fuse(ParamBinder<T>& p, NodeId x, int frames, const std::string& name) {
  auto& g = p.graph();
  const int c = g.value(x).shape.c;
  const NodeId dw = g.depthwise_conv1d_time(
      x, p.weight(name + ".dw.w", {frames, frames, 1, c}, frames),
      p.constant(name + ".dw.b", {frames, 1, 1, c}, 0.0), frames);
  const NodeId pw = layers::pointwise(p, dw, name + ".pw", c, false);
  return g.add(x, pw);
}

template <typename T>
NodeId maybe_fuse(ParamBinder<T>& p, NodeId x, const ModelConfig& cfg, const std::string& name) {
  return cfg.fusion_mode == FusionMode::cross_time ? cross_time_fuse(p, x, cfg.frames, name) : x;
}

// (B*T, H, W, B+9) -> (B*T, H, W, F); stride-1 root, so extents are kept.
template <typename T>
NodeId encode_frames(ParamBinder<T>& p, NodeId x, const ModelConfig& cfg, bool training) {
  auto& g = p.graph();
  const Shape s = g.value(x).shape;
  if (s.c != cfg.input_channels()) {
    throw ShapeError("encoder: dimension 'channels' is " + std::to_string(s.c) + ", expected " +
                     std::to_string(cfg.input_channels()));
  }
  const int wf = cfg.encoder_widths[0], wh = cfg.encoder_widths[1];
  NodeId h = layers::conv_bn_relu(p, x, "enc.root1", wf, 1, training);
  h = layers::conv_bn_relu(p, h, "enc.root2", wf, 1, training);
  h = maybe_fuse(p, h, cfg, "fuse.root");

  NodeId full = layers::conv_bn_relu(p, h, "enc.full", wf, 1, training);
  full = maybe_fuse(p, full, cfg, "fuse.full");
  NodeId half = layers::conv_bn_relu(p, h, "enc.half1", wh, 2, training);
  half = layers::conv_bn_relu(p, half, "enc.half2", wh, 1, training);
  half = maybe_fuse(p, half, cfg, "fuse.half");

  const NodeId up = g.bilinear_resize(half, s.h, s.w);
  const NodeId parts[] = {full, up};
  NodeId merged = layers::pointwise(p, g.concat_channels(parts), "enc.merge.conv", wf, false);
  merged = g.relu(layers::batch_norm(p, merged, "enc.merge.bn", training));
  return maybe_fuse(p, merged, cfg, "fuse.merge");
}

// (B*T, H, W, F) -> (B, 8H, 8W, 5) after the head sigmoid.
template <typename T>
NodeId fuse_and_decode(ParamBinder<T>& p, NodeId features, const ModelConfig& cfg,
                       bool training) {
  auto& g = p.graph();
  NodeId h = g.mean_over_time(features, cfg.frames);
  for (std::size_t i = 0; i < cfg.decoder_widths.size(); ++i) {
    const std::string name = "dec" + std::to_string(i);
    const int w = cfg.decoder_widths[i];
    const int ci = g.value(h).shape.c;
    NodeId r = g.relu(layers::batch_norm(p, h, name + ".bn1", training));
    r = layers::conv3x3(p, r, name + ".conv1", w);
    r = g.relu(layers::batch_norm(p, r, name + ".bn2", training));
    r = layers::conv3x3(p, r, name + ".conv2", w);
    const NodeId skip = ci == w ? h : layers::pointwise(p, h, name + ".skip", w, false);
    r = g.add(r, skip);
    const NodeId wt = p.weight(name + ".up.w", {w, 3, 3, w}, w * 9);
    h = g.transposed_conv2d(r, wt, p.constant(name + ".up.b", {1, 1, 1, w}, 0.0), 2);
  }
  h = layers::conv_bn_relu(p, h, "head.pre", cfg.decoder_widths.back(), 1, training);
  h = layers::pointwise(p, h, "head.out", cfg.output_channels, true);
  return g.sigmoid(h);
}

template <typename T>
NodeId build_model(ParamBinder<T>& p, NodeId input, const ModelConfig& cfg, bool training) {
  return fuse_and_decode(p, encode_frames(p, input, cfg, training), cfg, training);
}

inline ParamStore<float> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore<float> store;
  Graph<float> g;
  ParamBinder<float> p(g, store, true, seed);
  const NodeId x = g.leaf(Tensor<float>({cfg.frames, 4, 4, cfg.input_channels()}), false);
  build_model(p, x, cfg, false);
  return store;
}

// Number of parameters added by one cross-time fusion block.
inline std::size_t fusion_param_count(int frames, int channels) {
  const std::size_t t = frames, c = channels;
  return t * t * c + t * c + c * c;
}

struct Prediction {
  Plane<float> building, road, centroid, grayscale;
  Plane<float> height_m;

  const Plane<float>& channel(Channel c) const {
    switch (c) {
      case Channel::building: return building;
      case Channel::road: return road;
      case Channel::centroid: return centroid;
      case Channel::height: return height_m;
      case Channel::grayscale: return grayscale;
    }
    throw std::invalid_argument("unknown channel");
  }
};

template <typename T>
Prediction to_prediction(const Tensor<T>& out, int b) {
  const int H = out.shape.h, W = out.shape.w;
  Prediction p;
  Plane<float>* planes[] = {&p.building, &p.road, &p.centroid, &p.height_m, &p.grayscale};
  for (int c = 0; c < kChannels; ++c) {
    *planes[c] = Plane<float>(H, W);
    const float scale = c == static_cast<int>(Channel::height) ? kHeightCapM : 1.0f;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) (*planes[c])(y, x) = scale * static_cast<float>(out.at(b, y, x, c));
  }
  return p;
}

// Encodes stacks (each exactly T frames) into the model input batch. Without
// use_hr_incidence the label-geometry planes are always zero.
inline Tensor<float> assemble_input(const std::vector<const LowResStack*>& stacks,
                                    const ModelConfig& cfg,
                                    std::optional<Incidence> hr_override = {}) {
  if (stacks.empty()) throw std::invalid_argument("assemble_input: no stacks");
  const int T = cfg.frames;
  const Shape fs = stacks.front()->frames.at(0).bands.shape;
  if (fs.c != cfg.band_count) {
    throw ShapeError("input: dimension 'bands' is " + std::to_string(fs.c) + ", expected " +
                     std::to_string(cfg.band_count));
  }
  const int C = cfg.input_channels();
  Tensor<float> out({static_cast<int>(stacks.size()) * T, fs.h, fs.w, C});
  for (std::size_t b = 0; b < stacks.size(); ++b) {
    const LowResStack dup =
        cfg.duplicate_single_frame ? duplicate_reference_frame(*stacks[b]) : LowResStack{};
    const LowResStack& st = cfg.duplicate_single_frame ? dup : *stacks[b];
    if (static_cast<int>(st.frames.size()) != T) {
      throw ShapeError("input: stack length " + std::to_string(st.frames.size()) +
                       " does not match frames " + std::to_string(T));
    }
    for (int t = 0; t < T; ++t) {
      const auto& f = st.frames[t];
      if (!(f.bands.shape == fs)) throw ShapeError("input: frame shape " + f.bands.shape.str());
      std::optional<Incidence> hr = hr_override;
      if (!cfg.use_hr_incidence) hr = Incidence{0.0, 0.0};
      const Tensor<float> enc = encode_metadata_channels(f, hr);
      std::copy(enc.data.begin(), enc.data.end(),
                out.data.begin() + static_cast<std::ptrdiff_t>(out.index(b * T + t, 0, 0, 0)));
    }
  }
  return out;
}

// Eval-mode forward over a batch of stacks.
inline std::vector<Prediction> forward(const std::vector<const LowResStack*>& stacks,
                                       const ParamStore<float>& params, const ModelConfig& cfg,
                                       std::optional<Incidence> hr_override = {}) {
  ParamStore<float> store = params;
  Graph<float> g;
  ParamBinder<float> p(g, store);
  const NodeId x = g.leaf(assemble_input(stacks, cfg, hr_override), false);
  const NodeId y = build_model(p, x, cfg, false);
  std::vector<Prediction> out;
  for (std::size_t b = 0; b < stacks.size(); ++b) out.push_back(to_prediction(g.value(y), static_cast<int>(b)));
  return out;
}

}  // namespace mfsr
