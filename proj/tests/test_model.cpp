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

#include <algorithm>
#include <cmath>

#include "mfsr/gradcheck.hpp"
#include "mfsr/model.hpp"

namespace mfsr {
namespace {

ModelConfig small_config(int frames, FusionMode mode) {
  ModelConfig cfg;
  cfg.frames = frames;
  cfg.encoder_widths = {4, 3};
  cfg.decoder_widths = {4, 3, 2};
  cfg.fusion_mode = mode;
  return cfg;
}

Tensor<float> random_input(const ModelConfig& cfg, int batch, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> x({batch * cfg.frames, h, w, cfg.input_channels()});
  for (auto& v : x.data) v = static_cast<float>(uniform(rng, 0.0, 1.0));
  return x;
}

Tensor<float> run_model(const ModelConfig& cfg, ParamStore<float> store, const Tensor<float>& x,
                        bool training = false) {
  Graph<float> g;
  ParamBinder<float> p(g, store);
  const NodeId in = g.leaf(x, false);
  return g.value(build_model(p, in, cfg, training));
}

std::size_t count_prefix(const ParamStore<float>& s, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& [name, e] : s.entries)
    if (name.rfind(prefix, 0) == 0 && e.trainable) n += e.value.size();
  return n;
}

TEST(Model, OutputShapeIsEightTimesInput) {
  for (auto mode : {FusionMode::none, FusionMode::cross_time}) {
    const auto cfg = small_config(3, mode);
    const auto params = init_params(cfg, 1);
    for (auto [h, w] : {std::pair{4, 4}, std::pair{5, 7}, std::pair{8, 6}}) {
      const auto y = run_model(cfg, params, random_input(cfg, 2, h, w, 3));
      EXPECT_EQ(y.shape, (Shape{2, 8 * h, 8 * w, 5}));
    }
  }
}

TEST(Model, EncoderKeepsExtentsAndSharesWeights) {
  auto cfg = small_config(2, FusionMode::none);
  auto store = init_params(cfg, 2);
  Graph<float> g;
  ParamBinder<float> p(g, store);
  Tensor<float> x = random_input(cfg, 1, 6, 5, 4);
  // Frame 1 := frame 0.
  const std::size_t half = x.size() / 2;
  std::copy(x.data.begin(), x.data.begin() + half, x.data.begin() + half);
  const NodeId f = encode_frames(p, g.leaf(x, false), cfg, false);
  const auto& v = g.value(f);
  EXPECT_EQ(v.shape, (Shape{2, 6, 5, 4}));
  const std::size_t fh = v.size() / 2;
  for (std::size_t i = 0; i < fh; ++i) EXPECT_EQ(v.data[i], v.data[fh + i]);
}

TEST(Model, ZeroInputZeroFeatures) {
  auto cfg = small_config(2, FusionMode::none);
  auto store = init_params(cfg, 5);
  Graph<float> g;
  ParamBinder<float> p(g, store);
  const NodeId f = encode_frames(p, g.leaf(Tensor<float>({2, 4, 4, cfg.input_channels()}), false), cfg, false);
  for (float v : g.value(f).data) EXPECT_EQ(v, 0.0f);
}

TEST(Model, ChannelMismatchRejected) {
  auto cfg = small_config(2, FusionMode::none);
  auto store = init_params(cfg, 5);
  Graph<float> g;
  ParamBinder<float> p(g, store);
  EXPECT_THROW(encode_frames(p, g.leaf(Tensor<float>({2, 4, 4, 3}), false), cfg, false), ShapeError);
}

TEST(CrossTimeFuse, ZeroWeightsIsResidual) {
  ParamStore<double> store;
  Graph<double> g;
  ParamBinder<double> p(g, store, true, 9);
  Rng rng(1);
  Tensor<double> x({3, 2, 2, 2});
  for (auto& v : x.data) v = normal(rng);
  const NodeId in = g.leaf(x, false);
  // Build once to create parameters, then zero them.
  cross_time_fuse(p, in, 3, "f");
  for (auto& [_, e] : store.entries) std::fill(e.value.data.begin(), e.value.data.end(), 0.0);
  Graph<double> g2;
  ParamBinder<double> p2(g2, store);
  const NodeId out = cross_time_fuse(p2, g2.leaf(x, false), 3, "f");
  EXPECT_EQ(g2.value(out).data, x.data);
}

TEST(CrossTimeFuse, NoSpatialLeakage) {
  ParamStore<double> store;
  Graph<double> g;
  ParamBinder<double> p(g, store, true, 10);
  Tensor<double> x({4, 1, 3, 2});
  Rng rng(2);
  for (int t = 0; t < 4; ++t)
    for (int c = 0; c < 2; ++c) {
      const double v = normal(rng);
      x.at(t, 0, 0, c) = v;
      x.at(t, 0, 2, c) = v;
      x.at(t, 0, 1, c) = normal(rng);
    }
  const auto& y = g.value(cross_time_fuse(p, g.leaf(x, false), 4, "f"));
  for (int t = 0; t < 4; ++t)
    for (int c = 0; c < 2; ++c) EXPECT_EQ(y.at(t, 0, 0, c), y.at(t, 0, 2, c));
}

TEST(CrossTimeFuse, HandComputedTwoFramesOneChannel) {
  ParamStore<double> store;
  store.entries["f.dw.w"] = {Tensor<double>({2, 2, 1, 1}, {0.5, -1.0, 2.0, 0.25}), true};
  store.entries["f.dw.b"] = {Tensor<double>({2, 1, 1, 1}, {0.1, -0.2}), true};
  store.entries["f.pw.w"] = {Tensor<double>({1, 1, 1, 1}, {3.0}), true};
  Graph<double> g;
  ParamBinder<double> p(g, store);
  const double x0 = 1.5, x1 = -2.0;
  const auto& y = g.value(cross_time_fuse(p, g.leaf(Tensor<double>({2, 1, 1, 1}, {x0, x1}), false), 2, "f"));
  const double d0 = 0.5 * x0 - 1.0 * x1 + 0.1;   // 2.85
  const double d1 = 2.0 * x0 + 0.25 * x1 - 0.2;  // 2.3
  EXPECT_NEAR(y.data[0], x0 + 3.0 * d0, 1e-12);
  EXPECT_NEAR(y.data[1], x1 + 3.0 * d1, 1e-12);
  EXPECT_NEAR(y.data[0], 10.05, 1e-12);
  EXPECT_NEAR(y.data[1], 4.9, 1e-12);
}

TEST(CrossTimeFuse, ParameterCountFormula) {
  for (int T : {1, 2, 4, 8})
    for (int c : {1, 3, 16}) {
      ParamStore<double> store;
      Graph<double> g;
      ParamBinder<double> p(g, store, true, 1);
      cross_time_fuse(p, g.leaf(Tensor<double>({T, 2, 2, c}), false), T, "f");
      EXPECT_EQ(store.trainable_count(), fusion_param_count(T, c));
      EXPECT_EQ(fusion_param_count(T, c), static_cast<std::size_t>(T * T * c + T * c + c * c));
    }
  // Four fusion blocks in the default model.
  ModelConfig cfg;
  const auto with = init_params(cfg, 1);
  cfg.fusion_mode = FusionMode::none;
  const auto without = init_params(cfg, 1);
  EXPECT_EQ(count_prefix(with, "fuse."), 4 * fusion_param_count(8, 16));
  EXPECT_EQ(count_prefix(without, "fuse."), 0u);
}

TEST(Model, PermutationInvariantWithoutFusion) {
  const auto cfg = small_config(4, FusionMode::none);
  const auto params = init_params(cfg, 7);
  const auto x = random_input(cfg, 1, 5, 5, 8);
  Tensor<float> perm = x;
  const int order[] = {2, 0, 3, 1};
  const std::size_t fsz = x.size() / 4;
  for (int t = 0; t < 4; ++t)
    std::copy(x.data.begin() + order[t] * fsz, x.data.begin() + (order[t] + 1) * fsz,
              perm.data.begin() + t * fsz);
  EXPECT_EQ(run_model(cfg, params, x).data, run_model(cfg, params, perm).data);

  // Not required with cross-time fusion; this configuration is order-sensitive.
  const auto ct = small_config(4, FusionMode::cross_time);
  const auto ctp = init_params(ct, 7);
  EXPECT_NE(run_model(ct, ctp, x).data, run_model(ct, ctp, perm).data);
}

TEST(Model, HeadsBoundedAndZeroStackFinite) {
  const auto cfg = small_config(2, FusionMode::cross_time);
  const auto params = init_params(cfg, 3);
  const auto y = run_model(cfg, params, Tensor<float>({2, 4, 4, cfg.input_channels()}));
  for (float v : y.data) EXPECT_TRUE(std::isfinite(v));
  const auto z = run_model(cfg, params, random_input(cfg, 1, 4, 4, 1));
  const Prediction pr = to_prediction(z, 0);
  for (Channel c : {Channel::building, Channel::road, Channel::centroid, Channel::grayscale})
    for (float v : pr.channel(c).data) {
      EXPECT_GT(v, 0.0f);
      EXPECT_LT(v, 1.0f);
    }
  for (float v : pr.height_m.data) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 100.0f);
  }
}

LowResStack toy_stack(int frames, int grid, std::uint64_t seed, Incidence hr) {
  Rng rng(seed);
  LowResStack s;
  for (int t = 0; t < frames; ++t) {
    Frame f;
    f.bands = Tensor<float>({1, grid, grid, 4});
    for (auto& v : f.bands.data) v = static_cast<float>(uniform01(rng));
    f.meta.time_norm = 0.001 * (t - frames / 2);
    f.meta.hr_incidence_azimuth = hr.azimuth_deg / 360.0;
    f.meta.hr_incidence_zenith = hr.zenith_deg / 90.0;
    f.meta.opaque_cloud = Mask(grid, grid, 0);
    s.frames.push_back(f);
  }
  return s;
}

TEST(Model, ForwardOverrideMatchesZeroMetadata) {
  const auto cfg = small_config(2, FusionMode::cross_time);
  const auto params = init_params(cfg, 3);
  const auto s = toy_stack(2, 4, 1, {0.0, 0.0});
  const auto a = forward({&s}, params, cfg);
  const auto b = forward({&s}, params, cfg, Incidence{0.0, 0.0});
  EXPECT_EQ(a[0].building.data, b[0].building.data);
  EXPECT_EQ(a[0].height_m.data, b[0].height_m.data);
  const auto tilted = toy_stack(2, 4, 1, {90.0, 30.0});
  const auto c = forward({&tilted}, params, cfg, Incidence{0.0, 0.0});
  EXPECT_EQ(a[0].building.data, c[0].building.data);
}

TEST(Model, FullModelGradientCheck) {
  const auto cfg = small_config(2, FusionMode::cross_time);
  const auto store = init_params(cfg, 11).cast<double>();
  std::vector<std::string> names;
  std::vector<Tensor<double>> values;
  for (const auto& [name, e] : store.entries)
    if (e.trainable) {
      names.push_back(name);
      values.push_back(e.value);
    }
  Rng rng(12);
  Tensor<double> x({2, 8, 8, cfg.input_channels()});
  for (auto& v : x.data) v = uniform(rng, -1.0, 1.0);
  auto builder = [&](Graph<double>& g, const std::vector<NodeId>& ids) {
    ParamStore<double> local = store;
    ParamBinder<double> p(g, local);
    for (std::size_t k = 0; k < ids.size(); ++k) p.preset(names[k], ids[k]);
    const NodeId y = build_model(p, g.leaf(x, false), cfg, true);
    const auto& v = g.value(y);
    std::vector<double> w(v.size(), 0.0);
    const double n = static_cast<double>(v.size() / 5);
    for (std::size_t i = 0; i < v.size(); i += 5) w[i] = 1.0 / n;
    return g.sum(y, &w);
  };
  GradCheckOptions opts;
  opts.step = 1e-5;
  opts.max_samples = 6;
  const double err = finite_diff_check_multi(builder, values, opts);
  EXPECT_LE(err, 1e-4);
}

}  // namespace
}  // namespace mfsr
