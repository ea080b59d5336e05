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
#include <map>
#include <set>

#include "mfsr/stack.hpp"

namespace mfsr {
namespace {

struct Fixture {
  Scene scene;
  HighResLabelSet labels;
};

Fixture make_fixture(std::uint64_t seed) {
  Fixture f;
  f.scene = sample_scene(seed);
  f.labels = rasterize_labels(f.scene, 0.5, {8, 8});
  return f;
}

Frame bare_frame(std::int64_t id, int baseline, double t, bool cloudy = false) {
  Frame f;
  f.bands = Tensor<float>({1, 3, 3, 2}, static_cast<float>(baseline));
  f.meta.datatake_id = id;
  f.meta.processing_baseline = baseline;
  f.meta.time_offset_s = t;
  f.meta.opaque_cloud = Mask(3, 3, 0);
  if (cloudy) f.meta.opaque_cloud(1, 2) = 1;
  return f;
}

std::vector<int> baselines(const std::vector<Frame>& fs) {
  std::vector<int> out;
  for (const auto& f : fs) out.push_back(f.meta.processing_baseline);
  return out;
}

TEST(SimulateStack, NoiselessSingleFrameMatchesDownsampleOracle) {
  const auto fx = make_fixture(11);
  StackSimConfig cfg = StackSimConfig::noiseless();
  cfg.band_count = 1;
  cfg.band_gain = {1.0};
  cfg.band_offset = {0.0};
  const auto frames = simulate_stack(fx.labels, fx.scene, 1, 5, cfg);
  ASSERT_EQ(frames.size(), 1u);
  const auto& gray = fx.labels[Channel::grayscale];
  // Oracle: 20x20 box means over the 10 m cells (clamped at the scene edge),
  // then half-pixel-centre bilinear from the 5x5 native grid to 12x12.
  const int native = 5;
  double cell[native][native];
  for (int r = 0; r < native; ++r)
    for (int c = 0; c < native; ++c) {
      double s = 0;
      for (int i = 0; i < 20; ++i)
        for (int j = 0; j < 20; ++j) {
          const int yi = std::min(8 + r * 20 + i, gray.h - 1);
          const int xj = std::min(8 + c * 20 + j, gray.w - 1);
          s += gray(yi, xj);
        }
      cell[r][c] = s / 400.0;
    }
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 12; ++x) {
      const double u = std::clamp((y + 0.5) * 0.4 - 0.5, 0.0, 4.0);
      const double v = std::clamp((x + 0.5) * 0.4 - 0.5, 0.0, 4.0);
      const int u0 = static_cast<int>(u), v0 = static_cast<int>(v);
      const int u1 = std::min(u0 + 1, 4), v1 = std::min(v0 + 1, 4);
      const double a = u - u0, b = v - v0;
      const double expect = (1 - a) * ((1 - b) * cell[u0][v0] + b * cell[u0][v1]) +
                            a * ((1 - b) * cell[u1][v0] + b * cell[u1][v1]);
      EXPECT_NEAR(frames[0].bands.at(0, y, x, 0), expect, 1e-5);
    }
}

TEST(SimulateStack, NoiselessFramesIdenticalAcrossTime) {
  const auto fx = make_fixture(12);
  const auto frames = simulate_stack(fx.labels, fx.scene, 8, 3, StackSimConfig::noiseless());
  ASSERT_EQ(frames.size(), 8u);
  for (const auto& f : frames) EXPECT_EQ(f.bands.data, frames[0].bands.data);
}

TEST(SimulateStack, Deterministic) {
  const auto fx = make_fixture(13);
  const auto a = simulate_stack(fx.labels, fx.scene, 16, 99, {});
  const auto b = simulate_stack(fx.labels, fx.scene, 16, 99, {});
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].bands.data, b[i].bands.data);
    EXPECT_EQ(a[i].meta.values(), b[i].meta.values());
    EXPECT_EQ(a[i].meta.datatake_id, b[i].meta.datatake_id);
  }
}

TEST(SimulateStack, LabelTimeBetweenMiddleFrames) {
  const auto fx = make_fixture(14);
  StackSimConfig cfg;
  cfg.duplicate_probability = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto frames = simulate_stack(fx.labels, fx.scene, 32, seed, cfg);
    ASSERT_EQ(frames.size(), 32u);
    EXPECT_LT(frames[15].meta.time_norm, 0.0);
    EXPECT_EQ(frames[16].meta.time_norm, 0.0);
    EXPECT_LT(frames[15].meta.time_offset_s, 0.0);
    EXPECT_GT(frames[16].meta.time_offset_s, 0.0);
    for (std::size_t i = 1; i < frames.size(); ++i)
      EXPECT_GT(frames[i].meta.time_norm, frames[i - 1].meta.time_norm);
  }
}

TEST(SimulateStack, MetadataScaledAndHrConstant) {
  const auto fx = make_fixture(15);
  const auto frames = simulate_stack(fx.labels, fx.scene, 12, 1, {}, {200.0, 30.0});
  for (const auto& f : frames) {
    const auto v = f.meta.values();
    for (int k = 1; k < kMetadataChannels; ++k) {
      EXPECT_GE(v[k], 0.0);
      EXPECT_LE(v[k], 1.0);
    }
    EXPECT_DOUBLE_EQ(v[7], 200.0 / 360.0);
    EXPECT_DOUBLE_EQ(v[8], 30.0 / 90.0);
  }
}

TEST(SimulateStack, ProducesCloudsAndDuplicates) {
  const auto fx = make_fixture(16);
  StackSimConfig cfg;
  cfg.cloud_probability = 0.5;
  cfg.duplicate_probability = 0.5;
  const auto frames = simulate_stack(fx.labels, fx.scene, 32, 4, cfg);
  std::map<std::int64_t, std::set<int>> ids;
  int cloudy = 0;
  for (const auto& f : frames) {
    ids[f.meta.datatake_id].insert(f.meta.processing_baseline);
    cloudy += filter_opaque_clouds({f}).empty();
  }
  EXPECT_GT(cloudy, 0);
  bool dup = false;
  for (const auto& [id, bs] : ids) dup = dup || bs.size() > 1;
  EXPECT_TRUE(dup);
  EXPECT_LT(ids.size(), frames.size());
}

TEST(Dedup, HighestBaselineKept) {
  EXPECT_EQ(baselines(dedup_frames({bare_frame(1, 3, 0), bare_frame(1, 5, 1), bare_frame(2, 1, 2)})),
            (std::vector<int>{5, 1}));
}

TEST(Dedup, DistinctIdsIdentity) {
  std::vector<Frame> in{bare_frame(1, 3, 0), bare_frame(2, 5, 1), bare_frame(3, 1, 2)};
  EXPECT_EQ(baselines(dedup_frames(in)), baselines(in));
}

TEST(Dedup, TieKeepsEarliest) {
  auto a = bare_frame(7, 2, 0);
  auto b = bare_frame(7, 2, 1);
  const auto out = dedup_frames({a, b});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].meta.time_offset_s, 0.0);
  const auto rev = dedup_frames({b, a});
  ASSERT_EQ(rev.size(), 1u);
  EXPECT_EQ(rev[0].meta.time_offset_s, 1.0);
}

TEST(Filter, CloudRules) {
  const auto out = filter_opaque_clouds({bare_frame(1, 1, 0), bare_frame(2, 2, 1, true), bare_frame(3, 3, 2)});
  EXPECT_EQ(baselines(out), (std::vector<int>{1, 3}));
  std::vector<Frame> clear{bare_frame(1, 1, 0), bare_frame(2, 2, 1)};
  EXPECT_EQ(baselines(filter_opaque_clouds(clear)), baselines(clear));
  EXPECT_TRUE(filter_opaque_clouds({bare_frame(1, 1, 0, true), bare_frame(2, 1, 1, true)}).empty());
}

TEST(Encode, ChannelLayout) {
  const auto fx = make_fixture(17);
  const auto frames = simulate_stack(fx.labels, fx.scene, 2, 8, {});
  const auto enc = encode_metadata_channels(frames[0]);
  EXPECT_EQ(enc.shape.c, 4 + kMetadataChannels);
  const float lat = static_cast<float>(frames[0].meta.latitude);
  for (int y = 0; y < enc.shape.h; ++y)
    for (int x = 0; x < enc.shape.w; ++x) EXPECT_EQ(enc.at(0, y, x, 4 + 5), lat);

  Frame other = frames[0];
  other.meta.time_norm += 0.01;
  const auto enc2 = encode_metadata_channels(other);
  for (int y = 0; y < enc.shape.h; ++y)
    for (int x = 0; x < enc.shape.w; ++x)
      for (int c = 0; c < enc.shape.c; ++c) {
        if (c == 4) EXPECT_NE(enc.at(0, y, x, c), enc2.at(0, y, x, c));
        else EXPECT_EQ(enc.at(0, y, x, c), enc2.at(0, y, x, c));
      }
}

TEST(Encode, OverrideAndMissingValue) {
  const auto fx = make_fixture(18);
  auto frames = simulate_stack(fx.labels, fx.scene, 1, 8, {}, {0.0, 0.0});
  const auto plain = encode_metadata_channels(frames[0]);
  const auto over = encode_metadata_channels(frames[0], Incidence{0.0, 0.0});
  EXPECT_EQ(plain.data, over.data);
  frames[0].meta.solar_zenith = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(encode_metadata_channels(frames[0]), std::invalid_argument);
}

TEST(PadTruncate, FullStackUnchangedAtZeroProbability) {
  const auto fx = make_fixture(19);
  StackSimConfig cfg;
  cfg.duplicate_probability = 0.0;
  const auto frames = simulate_stack(fx.labels, fx.scene, 32, 2, cfg);
  const auto out = pad_truncate_stack(frames, 32, 7, 0.0);
  ASSERT_EQ(out.frames.size(), 32u);
  for (int i = 0; i < 32; ++i) {
    EXPECT_FALSE(out.frames[i].padding);
    EXPECT_EQ(out.frames[i].bands.data, frames[i].bands.data);
    EXPECT_EQ(out.frames[i].meta.values(), frames[i].meta.values());
  }
}

TEST(PadTruncate, EmptyInputGivesZeroStack) {
  const auto out = pad_truncate_stack({}, 32, 1, 0.0, 12, 4);
  ASSERT_EQ(out.frames.size(), 32u);
  for (std::size_t i = 0; i < out.frames.size(); ++i) {
    const auto& f = out.frames[i];
    EXPECT_TRUE(f.padding);
    for (float v : f.bands.data) EXPECT_EQ(v, 0.0f);
    const auto v = f.meta.values();
    for (int k = 1; k < kMetadataChannels; ++k) EXPECT_EQ(v[k], 0.0);
    if (i > 0) {
      EXPECT_GT(f.meta.time_norm, out.frames[i - 1].meta.time_norm);
    }
  }
}

TEST(PadTruncate, PadLengthsWithinBounds) {
  const auto fx = make_fixture(20);
  StackSimConfig cfg;
  cfg.duplicate_probability = 0.0;
  const auto frames = simulate_stack(fx.labels, fx.scene, 32, 2, cfg);
  std::set<int> seen_front, seen_back;
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const auto a = pad_truncate_stack(frames, 32, seed, 1.0);
    const auto b = pad_truncate_stack(frames, 32, seed, 1.0);
    int front = 0, back = 0;
    while (front < 16 && a.frames[front].padding) ++front;
    while (back < 16 && a.frames[31 - back].padding) ++back;
    ASSERT_GE(front, 1);
    ASSERT_LE(front, 16);
    ASSERT_GE(back, 1);
    ASSERT_LE(back, 16);
    seen_front.insert(front);
    seen_back.insert(back);
    for (int i = 0; i < 32; ++i) ASSERT_EQ(a.frames[i].padding, b.frames[i].padding);
    for (int i = 1; i < 32; ++i) ASSERT_GT(a.frames[i].meta.time_norm, a.frames[i - 1].meta.time_norm);
  }
  EXPECT_EQ(seen_front.size(), 16u);
  EXPECT_EQ(seen_back.size(), 16u);
}

TEST(PadTruncate, ShortStackFilledFromOutside) {
  const auto fx = make_fixture(21);
  StackSimConfig cfg;
  cfg.duplicate_probability = 0.0;
  const auto frames = simulate_stack(fx.labels, fx.scene, 6, 2, cfg);
  const auto out = pad_truncate_stack(frames, 8, 0, 0.0);
  ASSERT_EQ(out.frames.size(), 8u);
  const std::vector<bool> expect{true, false, false, false, false, false, false, true};
  for (int i = 0; i < 8; ++i) EXPECT_EQ(out.frames[i].padding, expect[i]) << i;
  EXPECT_THROW(pad_truncate_stack(frames, 7, 0, 0.0), std::invalid_argument);
}

TEST(PadTruncate, LongStackTruncatedAroundLabel) {
  const auto fx = make_fixture(22);
  StackSimConfig cfg;
  cfg.duplicate_probability = 0.0;
  const auto frames = simulate_stack(fx.labels, fx.scene, 32, 2, cfg);
  const auto out = pad_truncate_stack(frames, 8, 0, 0.0);
  for (int i = 0; i < 8; ++i) EXPECT_EQ(out.frames[i].bands.data, frames[12 + i].bands.data);
  EXPECT_EQ(out.frames[4].meta.time_norm, 0.0);
}

TEST(DuplicateReference, RepeatsFirstFrameAfterLabel) {
  const auto fx = make_fixture(23);
  StackSimConfig cfg;
  cfg.duplicate_probability = 0.0;
  const auto stack = pad_truncate_stack(simulate_stack(fx.labels, fx.scene, 8, 3, cfg), 8, 0, 0.0);
  const auto dup = duplicate_reference_frame(stack);
  for (const auto& f : dup.frames) EXPECT_EQ(f.bands.data, stack.frames[4].bands.data);
}

}  // namespace
}  // namespace mfsr
