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

// Low-resolution multi-frame stacks simulated from a high-resolution scene,
// plus the stack hygiene steps applied before a stack reaches the model:
// de-duplication by datatake, opaque-cloud filtering, metadata encoding and
// padding/truncation to a fixed frame count.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mfsr/rng.hpp"
#include "mfsr/scene.hpp"
#include "mfsr/tensor.hpp"

namespace mfsr {

inline constexpr int kMetadataChannels = 9;
inline constexpr double kTenYearsSeconds = 10.0 * 365.25 * 86400.0;

struct FrameMeta {
  double time_norm = 0.0;
  double incidence_azimuth = 0.0;
  double incidence_zenith = 0.0;
  double solar_azimuth = 0.0;
  double solar_zenith = 0.0;
  double latitude = 0.0;
  double longitude = 0.0;
  double hr_incidence_azimuth = 0.0;
  double hr_incidence_zenith = 0.0;
  std::int64_t datatake_id = -1;
  int processing_baseline = 0;
  Mask opaque_cloud;
  double time_offset_s = 0.0;  // acquisition time relative to the label

  // Fixed channel order of the broadcast metadata planes.
  std::array<double, kMetadataChannels> values() const {
    return {time_norm,  incidence_azimuth, incidence_zenith,
            solar_azimuth, solar_zenith,  latitude,
            longitude,  hr_incidence_azimuth, hr_incidence_zenith};
  }
};

struct Frame {
  Tensor<float> bands;  // 1 x H x W x B
  FrameMeta meta;
  bool padding = false;  // zero-frame inserted by pad_truncate_stack
};

struct LowResStack {
  std::vector<Frame> frames;
  double grid_resolution_m = 4.0;
  double native_resolution_m = 10.0;
};

struct StackSimConfig {
  int band_count = 4;
  double native_resolution_m = 10.0;
  double grid_resolution_m = 4.0;
  double sub_pixel_shift_std_m = 2.5;
  // Fixed extra offset (x, y) in metres per band; missing entries are zero.
  std::vector<std::array<double, 2>> per_band_shift_m{{0.0, 0.0}, {0.5, 0.0}, {0.0, 0.5}, {-0.5, -0.5}};
  std::vector<double> band_gain{1.0, 0.9, 0.8, 1.1};
  std::vector<double> band_offset{0.0, 0.05, 0.1, -0.05};
  double noise_std = 0.06;
  double cloud_probability = 0.1;
  double unflagged_cloud_probability = 0.0;
  double duplicate_probability = 0.1;
  double pad_probability = 0.2;
  double min_revisit_days = 3.0;
  double max_revisit_days = 10.0;

  void validate() const {
    for (double p : {cloud_probability, unflagged_cloud_probability, duplicate_probability,
                     pad_probability}) {
      if (p < 0.0 || p > 1.0) throw std::invalid_argument("stack config: probability outside [0,1]");
    }
    if (band_count < 1) throw std::invalid_argument("stack config: band_count must be >= 1");
  }

  // All stochastic effects off: frames become identical renderings.
  static StackSimConfig noiseless() {
    StackSimConfig c;
    c.sub_pixel_shift_std_m = 0.0;
    c.per_band_shift_m.clear();
    c.noise_std = 0.0;
    c.cloud_probability = 0.0;
    c.duplicate_probability = 0.0;
    c.pad_probability = 0.0;
    return c;
  }
};

namespace detail {

inline double scale_angle(double deg, double range) { return deg / range; }

// Mean of HR grayscale over the native cell whose top-left corner sits at
// scene point (x0, y0); indices outside the label grid clamp to its edge.
inline double box_mean(const Plane<float>& gray, const HighResLabelSet& labels, double x0,
                       double y0, double native_res) {
  const double res = labels.resolution_m;
  const int n = static_cast<int>(std::lround(native_res / res));
  const int j0 = static_cast<int>(std::lround(x0 / res)) + labels.margin_x;
  const int i0 = static_cast<int>(std::lround(y0 / res)) + labels.margin_y;
  double s = 0.0;
  for (int i = i0; i < i0 + n; ++i) {
    const int ci = std::clamp(i, 0, gray.h - 1);
    for (int j = j0; j < j0 + n; ++j) s += gray(ci, std::clamp(j, 0, gray.w - 1));
  }
  return s / (static_cast<double>(n) * n);
}

struct AxisTaps {
  std::vector<int> i0, i1;
  std::vector<double> w1;
};

// Native-cell sampling taps for grid pixel centres (bilinear, clamped).
inline AxisTaps resample_taps(int grid, int native, double grid_res, double native_res) {
  AxisTaps t;
  for (int o = 0; o < grid; ++o) {
    double u = (o + 0.5) * grid_res / native_res - 0.5;
    u = std::clamp(u, 0.0, static_cast<double>(native - 1));
    const int a = static_cast<int>(std::floor(u));
    t.i0.push_back(a);
    t.i1.push_back(std::min(a + 1, native - 1));
    t.w1.push_back(u - a);
  }
  return t;
}

}  // namespace detail

// Box-downsample to the native resolution with the given scene-metre offset,
// then bilinear resample to the working grid. One band, no noise.
inline Plane<float> render_native_band(const HighResLabelSet& labels, double extent_m,
                                       double shift_x_m, double shift_y_m, double native_res,
                                       double grid_res, double gain = 1.0, double offset = 0.0,
                                       const std::vector<double>* native_noise = nullptr) {
  const auto& gray = labels[Channel::grayscale];
  const int native = static_cast<int>(std::ceil(extent_m / native_res - 1e-9));
  const int grid = static_cast<int>(std::lround(extent_m / grid_res));
  std::vector<double> cells(static_cast<std::size_t>(native) * native);
  for (int r = 0; r < native; ++r)
    for (int c = 0; c < native; ++c) {
      double v = gain * detail::box_mean(gray, labels, c * native_res + shift_x_m,
                                         r * native_res + shift_y_m, native_res) +
                 offset;
      if (native_noise) v += (*native_noise)[static_cast<std::size_t>(r) * native + c];
      cells[static_cast<std::size_t>(r) * native + c] = v;
    }
  const auto taps = detail::resample_taps(grid, native, grid_res, native_res);
  Plane<float> out(grid, grid);
  for (int y = 0; y < grid; ++y)
    for (int x = 0; x < grid; ++x) {
      auto at = [&](int r, int c) { return cells[static_cast<std::size_t>(r) * native + c]; };
      const double wy = taps.w1[y], wx = taps.w1[x];
      const double v = (1 - wy) * ((1 - wx) * at(taps.i0[y], taps.i0[x]) + wx * at(taps.i0[y], taps.i1[x])) +
                       wy * ((1 - wx) * at(taps.i1[y], taps.i0[x]) + wx * at(taps.i1[y], taps.i1[x]));
      out(y, x) = static_cast<float>(v);
    }
  return out;
}

// Simulates T acquisitions of the scene, before de-duplication and cloud
// filtering. `labels` must be the nadir (orthorectified) rendering; `hr` is
// the viewing geometry of the label imagery, copied into every frame.
inline std::vector<Frame> simulate_stack(const HighResLabelSet& labels, const Scene& scene, int T,
                                         std::uint64_t seed, const StackSimConfig& cfg,
                                         Incidence hr = {}) {
  if (T < 1) throw std::invalid_argument("simulate_stack: T must be >= 1");
  cfg.validate();
  Rng rng = make_rng(seed, {0x57ac});
  const double extent = scene.extent_m;
  const int grid = static_cast<int>(std::lround(extent / cfg.grid_resolution_m));
  const int native = static_cast<int>(std::ceil(extent / cfg.native_resolution_m - 1e-9));
  const double res = labels.resolution_m;

  // Site constants.
  Rng site = make_rng(scene.seed, {0x517e});
  const double lat = uniform(site, -35.0, 35.0);
  const double lon = uniform(site, -20.0, 50.0);

  // Acquisition times: the label time falls between frames ceil(T/2) and
  // ceil(T/2)+1 (1-based).
  std::vector<double> days(T);
  double t = 0.0;
  for (int k = 0; k < T; ++k) {
    days[k] = t;
    t += uniform(rng, cfg.min_revisit_days, cfg.max_revisit_days);
  }
  const int before = (T + 1) / 2;  // frames strictly before the label
  double label_day;
  if (before < T) {
    label_day = days[before - 1] + uniform(rng, 0.05, 0.95) * (days[before] - days[before - 1]);
  } else {
    label_day = days[T - 1] + uniform(rng, 0.5, 5.0);
  }
  const double ref_offset_s = before < T ? (days[before] - label_day) * 86400.0 : 0.0;

  std::vector<Frame> frames;
  std::int64_t next_id = static_cast<std::int64_t>(derive_seed(seed, {0xda7a}) % 1000000) * 100;
  for (int k = 0; k < T; ++k) {
    const double sx = std::round(cfg.sub_pixel_shift_std_m * normal(rng) / res) * res;
    const double sy = std::round(cfg.sub_pixel_shift_std_m * normal(rng) / res) * res;
    FrameMeta meta;
    meta.time_offset_s = (days[k] - label_day) * 86400.0;
    meta.time_norm = (meta.time_offset_s - ref_offset_s) / kTenYearsSeconds;
    const bool descending = bernoulli(rng, 0.5);
    meta.incidence_azimuth = detail::scale_angle(descending ? uniform(rng, 95, 110) : uniform(rng, 280, 295), 360.0);
    meta.incidence_zenith = detail::scale_angle(uniform(rng, 1.0, 11.0), 90.0);
    meta.solar_azimuth = detail::scale_angle(uniform(rng, 110, 170), 360.0);
    meta.solar_zenith = detail::scale_angle(uniform(rng, 20, 60), 90.0);
    meta.latitude = (lat + 90.0) / 180.0;
    meta.longitude = (lon + 180.0) / 360.0;
    meta.hr_incidence_azimuth = detail::scale_angle(hr.azimuth_deg, 360.0);
    meta.hr_incidence_zenith = detail::scale_angle(hr.zenith_deg, 90.0);
    meta.datatake_id = next_id++;
    meta.processing_baseline = uniform_int(rng, 2, 4);
    meta.opaque_cloud = Mask(grid, grid, 0);

    auto render = [&](Rng& noise_rng) {
      Tensor<float> bands({1, grid, grid, cfg.band_count});
      for (int b = 0; b < cfg.band_count; ++b) {
        double bx = 0.0, by = 0.0;
        if (b < static_cast<int>(cfg.per_band_shift_m.size())) {
          bx = std::round(cfg.per_band_shift_m[b][0] / res) * res;
          by = std::round(cfg.per_band_shift_m[b][1] / res) * res;
        }
        const double gain = b < static_cast<int>(cfg.band_gain.size()) ? cfg.band_gain[b] : 1.0;
        const double off = b < static_cast<int>(cfg.band_offset.size()) ? cfg.band_offset[b] : 0.0;
        std::vector<double> noise(static_cast<std::size_t>(native) * native, 0.0);
        if (cfg.noise_std > 0)
          for (auto& v : noise) v = cfg.noise_std * normal(noise_rng);
        const Plane<float> p = render_native_band(labels, extent, sx + bx, sy + by,
                                                  cfg.native_resolution_m, cfg.grid_resolution_m,
                                                  gain, off, cfg.noise_std > 0 ? &noise : nullptr);
        for (int y = 0; y < grid; ++y)
          for (int x = 0; x < grid; ++x) bands.at(0, y, x, b) = p(y, x);
      }
      return bands;
    };

    Frame f;
    f.bands = render(rng);
    f.meta = meta;

    auto add_cloud = [&](Frame& fr, bool flagged) {
      const double cy = uniform(rng, 0, grid), cx = uniform(rng, 0, grid);
      const double radius = uniform(rng, 1.0, 4.0);
      for (int y = 0; y < grid; ++y)
        for (int x = 0; x < grid; ++x) {
          const double d = std::hypot(y + 0.5 - cy, x + 0.5 - cx);
          if (d > radius) continue;
          for (int b = 0; b < cfg.band_count; ++b) fr.bands.at(0, y, x, b) = 0.95f;
          if (flagged) fr.meta.opaque_cloud(y, x) = 1;
        }
    };
    if (bernoulli(rng, cfg.cloud_probability)) add_cloud(f, true);
    else if (bernoulli(rng, cfg.unflagged_cloud_probability)) add_cloud(f, false);

    const bool duplicate = bernoulli(rng, cfg.duplicate_probability);
    frames.push_back(f);
    if (duplicate) {
      // Same datatake reprocessed under another baseline.
      Frame d = f;
      d.bands = render(rng);
      d.meta.processing_baseline = f.meta.processing_baseline + (bernoulli(rng, 0.5) ? 1 : -1);
      frames.push_back(std::move(d));
    }
  }
  return frames;
}

// One frame per datatake: the highest processing baseline, earliest on ties.
// Relative order of the kept frames is preserved.
inline std::vector<Frame> dedup_frames(const std::vector<Frame>& frames) {
  std::map<std::int64_t, std::size_t> best;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    auto [it, inserted] = best.try_emplace(frames[i].meta.datatake_id, i);
    if (!inserted &&
        frames[i].meta.processing_baseline > frames[it->second].meta.processing_baseline) {
      it->second = i;
    }
  }
  std::vector<Frame> out;
  for (std::size_t i = 0; i < frames.size(); ++i)
    if (best.at(frames[i].meta.datatake_id) == i) out.push_back(frames[i]);
  return out;
}

// Drops every frame with at least one opaque-cloud pixel.
inline std::vector<Frame> filter_opaque_clouds(const std::vector<Frame>& frames) {
  std::vector<Frame> out;
  for (const auto& f : frames) {
    const auto& m = f.meta.opaque_cloud.data;
    if (std::none_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; })) out.push_back(f);
  }
  return out;
}

// Bands followed by the nine constant metadata planes.
inline Tensor<float> encode_metadata_channels(const Frame& frame,
                                              std::optional<Incidence> hr_override = {}) {
  auto values = frame.meta.values();
  if (hr_override) {
    values[7] = hr_override->azimuth_deg / 360.0;
    values[8] = hr_override->zenith_deg / 90.0;
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw std::invalid_argument("encode_metadata_channels: metadata value " +
                                  std::to_string(i) + " is missing");
    }
  }
  const Shape s = frame.bands.shape;
  Tensor<float> out({1, s.h, s.w, s.c + kMetadataChannels});
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      for (int b = 0; b < s.c; ++b) out.at(0, y, x, b) = frame.bands.at(0, y, x, b);
      for (int m = 0; m < kMetadataChannels; ++m)
        out.at(0, y, x, s.c + m) = static_cast<float>(values[m]);
    }
  return out;
}

// Centres the stack on the label time (target/2 frames on each side), fills
// missing slots with zero-frames from the outside inward, then with
// probability p per half replaces that half's outermost l ~ U{1..min(16,
// target/2)} frames with zero-frames. Zero-frames carry an extrapolated
// time_norm and nothing else.
inline LowResStack pad_truncate_stack(const std::vector<Frame>& frames, int target,
                                      std::uint64_t seed, double p, int grid = -1,
                                      int bands = -1) {
  if (target < 2 || target % 2 != 0) {
    throw std::invalid_argument("pad_truncate_stack: target must be even and >= 2");
  }
  const int half = target / 2;
  std::vector<const Frame*> before, after;
  for (const auto& f : frames) (f.meta.time_offset_s < 0 ? before : after).push_back(&f);
  std::sort(before.begin(), before.end(), [](const Frame* a, const Frame* b) {
    return a->meta.time_offset_s < b->meta.time_offset_s;
  });
  std::sort(after.begin(), after.end(), [](const Frame* a, const Frame* b) {
    return a->meta.time_offset_s < b->meta.time_offset_s;
  });
  if (static_cast<int>(before.size()) > half) before.erase(before.begin(), before.end() - half);
  if (static_cast<int>(after.size()) > half) after.resize(half);

  if (!frames.empty()) {
    grid = frames.front().bands.shape.h;
    bands = frames.front().bands.shape.c;
  }
  if (grid < 1 || bands < 1) {
    throw std::invalid_argument("pad_truncate_stack: frame geometry unknown for an empty stack");
  }

  std::vector<const Frame*> slots(target, nullptr);
  for (std::size_t i = 0; i < before.size(); ++i) slots[half - before.size() + i] = before[i];
  for (std::size_t i = 0; i < after.size(); ++i) slots[half + i] = after[i];

  Rng rng = make_rng(seed, {0x9ad});
  const int max_pad = std::min(16, half);
  if (bernoulli(rng, p)) {
    const int l = uniform_int(rng, 1, max_pad);
    for (int i = 0; i < l; ++i) slots[i] = nullptr;
  }
  if (bernoulli(rng, p)) {
    const int l = uniform_int(rng, 1, max_pad);
    for (int i = 0; i < l; ++i) slots[target - 1 - i] = nullptr;
  }

  // Slot times: real frames keep theirs; gaps extrapolate with the mean real
  // spacing (7 days when fewer than two real frames remain).
  std::vector<int> real;
  for (int i = 0; i < target; ++i)
    if (slots[i]) real.push_back(i);
  double spacing = 7.0 * 86400.0;
  if (real.size() >= 2) {
    spacing = (slots[real.back()]->meta.time_offset_s - slots[real.front()]->meta.time_offset_s) /
              (real.back() - real.front());
    if (!(spacing > 0)) spacing = 7.0 * 86400.0;
  }
  std::vector<double> times(target);
  for (int i = 0; i < target; ++i) {
    if (slots[i]) {
      times[i] = slots[i]->meta.time_offset_s;
    } else if (!real.empty()) {
      // Nearest real slot, preferring the earlier one.
      int nearest = real.front();
      for (int r : real)
        if (std::abs(r - i) < std::abs(nearest - i)) nearest = r;
      times[i] = slots[nearest]->meta.time_offset_s + (i - nearest) * spacing;
    } else {
      times[i] = (i - half + 0.5) * spacing;
    }
  }
  // Zero-frames between real frames must still increase strictly.
  for (int i = 1; i < target; ++i)
    if (times[i] <= times[i - 1]) times[i] = times[i - 1] + 1.0;

  LowResStack out;
  out.frames.resize(target);
  for (int i = 0; i < target; ++i) {
    Frame& f = out.frames[i];
    if (slots[i]) {
      f = *slots[i];
    } else {
      f.bands = Tensor<float>({1, grid, grid, bands});
      f.meta = FrameMeta{};
      f.meta.opaque_cloud = Mask(grid, grid, 0);
      f.meta.time_offset_s = times[i];
      f.padding = true;
    }
    f.meta.time_norm = (times[i] - times[half]) / kTenYearsSeconds;
  }
  return out;
}

// The reference frame (first real frame at or after the label time, or the
// nearest real frame) repeated across every slot.
inline LowResStack duplicate_reference_frame(const LowResStack& stack) {
  const int n = static_cast<int>(stack.frames.size());
  const int half = n / 2;
  int pick = -1;
  for (int d = 0; d < n && pick < 0; ++d) {
    for (int cand : {half + d, half - 1 - d}) {
      if (cand >= 0 && cand < n && !stack.frames[cand].padding) {
        pick = cand;
        break;
      }
    }
  }
  LowResStack out = stack;
  if (pick < 0) return out;
  for (auto& f : out.frames) f = stack.frames[pick];
  return out;
}

}  // namespace mfsr
