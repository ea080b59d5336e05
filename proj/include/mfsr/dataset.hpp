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

// Synthetic dataset generation and its on-disk form: one array archive
// (data.bin) plus a JSON manifest with per-example offsets into it.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mfsr/io/archive.hpp"
#include "mfsr/io/config.hpp"
#include "mfsr/rng.hpp"
#include "mfsr/scene.hpp"
#include "mfsr/stack.hpp"

namespace mfsr {

inline constexpr int kManifestVersion = 1;
inline constexpr int kFrameMetaColumns = kMetadataChannels + 3;

struct DatasetConfig {
  std::uint64_t seed = 0;
  int examples = 64;
  int frames = 8;  // acquisitions simulated per example, before dedup/filter
  double resolution_m = 0.5;
  int label_margin_px = 8;
  double has_height_fraction = 0.2;
  double parallax_fraction = 0.5;
  double max_parallax_zenith_deg = 10.0;
  SceneConfig scene;
  StackSimConfig stack;

  void validate() const {
    scene.validate();
    stack.validate();
    if (examples < 0) throw std::invalid_argument("data config: examples must be >= 0");
    if (frames < 1) throw std::invalid_argument("data config: frames must be >= 1");
    if (!(resolution_m > 0)) throw std::invalid_argument("data config: resolution_m must be > 0");
    if (label_margin_px < 0) throw std::invalid_argument("data config: label_margin_px must be >= 0");
    for (double p : {has_height_fraction, parallax_fraction}) {
      if (p < 0 || p > 1) throw std::invalid_argument("data config: fractions must lie in [0,1]");
    }
    if (max_parallax_zenith_deg < 0 || max_parallax_zenith_deg > 45) {
      throw std::invalid_argument("data config: max_parallax_zenith_deg must lie in [0,45]");
    }
    const double ratio = stack.grid_resolution_m / resolution_m;
    if (std::abs(ratio - std::round(ratio)) > 1e-9) {
      throw std::invalid_argument("data config: grid resolution must be a multiple of the label resolution");
    }
  }

  int grid() const { return static_cast<int>(std::lround(scene.extent_m / stack.grid_resolution_m)); }

  io::FieldSet data_fields() {
    io::FieldSet f;
    f.add("seed", &seed).add("examples", &examples).add("frames", &frames);
    f.add("resolution_m", &resolution_m).add("label_margin_px", &label_margin_px);
    f.add("has_height_fraction", &has_height_fraction).add("parallax_fraction", &parallax_fraction);
    f.add("max_parallax_zenith_deg", &max_parallax_zenith_deg);
    return f;
  }
  io::FieldSet scene_fields() {
    io::FieldSet f;
    f.add("extent_m", &scene.extent_m).add("empty_probability", &scene.empty_probability);
    f.add("min_buildings", &scene.min_buildings).add("max_buildings", &scene.max_buildings);
    f.add("min_size_m", &scene.min_size_m).add("max_size_m", &scene.max_size_m);
    f.add("min_height_m", &scene.min_height_m).add("max_height_m", &scene.max_height_m);
    f.add("rotated_fraction", &scene.rotated_fraction);
    f.add("adjacent_probability", &scene.adjacent_probability).add("min_gap_m", &scene.min_gap_m);
    f.add("centroid_margin_m", &scene.centroid_margin_m).add("max_roads", &scene.max_roads);
    f.add("road_probability", &scene.road_probability);
    f.add("min_road_width_m", &scene.min_road_width_m).add("max_road_width_m", &scene.max_road_width_m);
    return f;
  }
  io::FieldSet stack_fields() {
    io::FieldSet f;
    f.add("band_count", &stack.band_count).add("native_resolution_m", &stack.native_resolution_m);
    f.add("grid_resolution_m", &stack.grid_resolution_m);
    f.add("sub_pixel_shift_std_m", &stack.sub_pixel_shift_std_m).add("band_gain", &stack.band_gain);
    f.add("band_offset", &stack.band_offset).add("noise_std", &stack.noise_std);
    f.add("cloud_probability", &stack.cloud_probability);
    f.add("unflagged_cloud_probability", &stack.unflagged_cloud_probability);
    f.add("duplicate_probability", &stack.duplicate_probability);
    f.add("min_revisit_days", &stack.min_revisit_days).add("max_revisit_days", &stack.max_revisit_days);
    return f;
  }

  void read(const io::Config& cfg) {
    data_fields().read(cfg, "data");
    scene_fields().read(cfg, "scene");
    stack_fields().read(cfg, "stack");
    validate();
  }
  std::string echo() {
    return data_fields().write("data") + "\n" + scene_fields().write("scene") + "\n" +
           stack_fields().write("stack");
  }
};

struct Example {
  std::uint64_t scene_seed = 0;
  int true_count = 0;
  bool has_height = false;
  std::optional<Incidence> parallax;  // viewing geometry of `labels`, if not nadir
  std::vector<Frame> frames;          // after dedup and cloud filtering
  HighResLabelSet labels;             // training target
  HighResLabelSet truth;              // nadir rendering (== labels without parallax)
};

struct Dataset {
  int grid = 0;
  int band_count = 0;
  double grid_resolution_m = 4.0;
  double native_resolution_m = 10.0;
  std::string content_hash;  // of data.bin
  std::vector<Example> examples;
};

inline Example generate_example(const DatasetConfig& cfg, int index) {
  const auto idx = static_cast<std::uint64_t>(index);
  Example ex;
  ex.scene_seed = derive_seed(cfg.seed, {0x5ce7e, idx});
  const Scene scene = sample_scene(ex.scene_seed, cfg.scene);
  ex.true_count = true_count(scene);

  Rng rng = make_rng(cfg.seed, {0xe8a, idx});
  ex.has_height = bernoulli(rng, cfg.has_height_fraction);
  const bool tilt = bernoulli(rng, cfg.parallax_fraction);
  const double az = uniform(rng, 0.0, 360.0);
  const double zen = uniform(rng, 0.0, cfg.max_parallax_zenith_deg);

  const int m = cfg.label_margin_px;
  ex.truth = rasterize_labels(scene, cfg.resolution_m, {m, m});
  Incidence hr{};
  if (tilt) {
    hr = Incidence{az, zen};
    ex.parallax = hr;
    ex.labels = apply_parallax(ex.truth, scene, hr);
  } else {
    ex.labels = ex.truth;
  }
  auto frames = simulate_stack(ex.truth, scene, cfg.frames, derive_seed(cfg.seed, {0x57a, idx}),
                               cfg.stack, hr);
  ex.frames = filter_opaque_clouds(dedup_frames(frames));
  return ex;
}

namespace detail {

inline Tensor<float> labels_tensor(const HighResLabelSet& l) {
  Tensor<float> t({1, l.rows(), l.cols(), kChannels});
  for (int c = 0; c < kChannels; ++c)
    for (int y = 0; y < l.rows(); ++y)
      for (int x = 0; x < l.cols(); ++x) t.at(0, y, x, c) = l.channels[c](y, x);
  return t;
}

inline HighResLabelSet labels_from_tensor(const Tensor<float>& t, double res, int margin,
                                          Incidence inc) {
  HighResLabelSet l;
  l.resolution_m = res;
  l.margin_x = l.margin_y = margin;
  l.incidence = inc;
  for (int c = 0; c < kChannels; ++c) {
    l.channels[c] = Plane<float>(t.shape.h, t.shape.w);
    for (int y = 0; y < t.shape.h; ++y)
      for (int x = 0; x < t.shape.w; ++x) l.channels[c](y, x) = t.at(0, y, x, c);
  }
  return l;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

// Runs `fn(i)` for i in [0, n) on up to `threads` workers. Results must be
// written to per-index slots so output order does not depend on scheduling.
template <typename Fn>
void parallel_for(int n, int threads, Fn&& fn) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (int i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
        next = n;
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::vector<Example> generate_examples(const DatasetConfig& cfg, int threads = 1) {
  cfg.validate();
  std::vector<Example> out(cfg.examples);
  parallel_for(cfg.examples, threads, [&](int i) { out[i] = generate_example(cfg, i); });
  return out;
}

// The dataset as load_dataset would return it, without touching disk.
inline Dataset in_memory_dataset(const DatasetConfig& cfg, std::vector<Example> examples) {
  Dataset ds;
  ds.grid = cfg.grid();
  ds.band_count = cfg.stack.band_count;
  ds.grid_resolution_m = cfg.stack.grid_resolution_m;
  ds.native_resolution_m = cfg.stack.native_resolution_m;
  ds.examples = std::move(examples);
  return ds;
}

inline io::Archive dataset_archive(const DatasetConfig& cfg, const std::vector<Example>& examples) {
  io::Archive a;
  const int grid = cfg.grid();
  const int B = cfg.stack.band_count;
  a.set_meta("kind", "dataset");
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const Example& ex = examples[i];
    const std::string p = "ex" + std::to_string(i) + ".";
    const int n = static_cast<int>(ex.frames.size());
    Tensor<float> bands({n, grid, grid, B});
    Tensor<std::uint8_t> clouds({n, grid, grid, 1});
    Tensor<double> meta({1, 1, n, kFrameMetaColumns});
    for (int t = 0; t < n; ++t) {
      const Frame& f = ex.frames[t];
      std::copy(f.bands.data.begin(), f.bands.data.end(),
                bands.data.begin() + static_cast<std::ptrdiff_t>(t) * grid * grid * B);
      std::copy(f.meta.opaque_cloud.data.begin(), f.meta.opaque_cloud.data.end(),
                clouds.data.begin() + static_cast<std::ptrdiff_t>(t) * grid * grid);
      const auto v = f.meta.values();
      for (int k = 0; k < kMetadataChannels; ++k) meta.at(0, 0, t, k) = v[k];
      meta.at(0, 0, t, kMetadataChannels) = static_cast<double>(f.meta.datatake_id);
      meta.at(0, 0, t, kMetadataChannels + 1) = f.meta.processing_baseline;
      meta.at(0, 0, t, kMetadataChannels + 2) = f.meta.time_offset_s;
    }
    a.add(p + "frames", bands);
    a.add(p + "clouds", clouds);
    a.add(p + "meta", meta);
    a.add(p + "labels", detail::labels_tensor(ex.labels));
    if (ex.parallax) a.add(p + "truth", detail::labels_tensor(ex.truth));
  }
  return a;
}

inline nlohmann::ordered_json dataset_manifest(const DatasetConfig& cfg,
                                               const std::vector<Example>& examples,
                                               const io::Archive& archive,
                                               const std::string& data_bytes) {
  using json = nlohmann::ordered_json;
  const auto offs = io::blob_offsets(archive);
  std::size_t blob_bytes = 0;
  for (const auto& e : archive.arrays) blob_bytes += e.bytes.size();
  const std::size_t header = data_bytes.size() - blob_bytes;

  json m;
  m["version"] = kManifestVersion;
  m["example_count"] = examples.size();
  m["data_file"] = "data.bin";
  m["data_hash"] = detail::hex64(fnv1a(data_bytes));
  m["grid"] = cfg.grid();
  m["band_count"] = cfg.stack.band_count;
  m["grid_resolution_m"] = cfg.stack.grid_resolution_m;
  m["native_resolution_m"] = cfg.stack.native_resolution_m;
  m["resolution_m"] = cfg.resolution_m;
  m["label_margin_px"] = cfg.label_margin_px;
  m["master_seed"] = cfg.seed;
  json list = json::array();
  std::size_t k = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const Example& ex = examples[i];
    json e;
    e["scene_seed"] = ex.scene_seed;
    e["true_count"] = ex.true_count;
    e["has_height"] = ex.has_height;
    e["frame_count"] = ex.frames.size();
    if (ex.parallax) {
      e["parallax"] = {{"azimuth_deg", ex.parallax->azimuth_deg},
                       {"zenith_deg", ex.parallax->zenith_deg}};
    } else {
      e["parallax"] = nullptr;
    }
    json arrays = json::object();
    const std::size_t count = ex.parallax ? 5 : 4;
    for (std::size_t j = 0; j < count; ++j, ++k) {
      const auto& entry = archive.arrays[k];
      const std::string key = entry.name.substr(entry.name.find('.') + 1);
      arrays[key] = {{"dtype", entry.dtype},
                     {"shape", {entry.shape.n, entry.shape.h, entry.shape.w, entry.shape.c}},
                     {"offset", header + offs[k]},
                     {"nbytes", entry.bytes.size()}};
    }
    e["arrays"] = arrays;
    list.push_back(e);
  }
  m["examples"] = list;
  return m;
}

// Writes data.bin and manifest.json; on failure neither is left behind.
inline nlohmann::ordered_json write_dataset(const DatasetConfig& cfg,
                                            const std::vector<Example>& examples,
                                            const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto data_path = dir / "data.bin";
  const auto manifest_path = dir / "manifest.json";
  try {
    const io::Archive a = dataset_archive(cfg, examples);
    const std::string bytes = io::serialize(a);
    const auto manifest = dataset_manifest(cfg, examples, a, bytes);
    io::write_file_atomic(data_path, bytes);
    io::write_file_atomic(manifest_path, manifest.dump(2) + "\n");
    return manifest;
  } catch (...) {
    std::error_code ec;
    std::filesystem::remove(data_path, ec);
    std::filesystem::remove(manifest_path, ec);
    throw;
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  using json = nlohmann::ordered_json;
  json m;
  try {
    m = json::parse(io::read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw io::FormatError("manifest: " + std::string(e.what()));
  }
  if (m.value("version", -1) != kManifestVersion) {
    throw io::FormatError("manifest: unsupported version");
  }
  const std::string bytes = io::read_file(dir / m.at("data_file").get<std::string>());
  Dataset ds;
  ds.content_hash = detail::hex64(fnv1a(bytes));
  if (ds.content_hash != m.at("data_hash").get<std::string>()) {
    throw io::FormatError("dataset: data.bin does not match its manifest hash");
  }
  const io::Archive a = io::parse_archive(bytes);
  ds.grid = m.at("grid");
  ds.band_count = m.at("band_count");
  ds.grid_resolution_m = m.at("grid_resolution_m");
  ds.native_resolution_m = m.at("native_resolution_m");
  const double res = m.at("resolution_m");
  const int margin = m.at("label_margin_px");
  const auto& list = m.at("examples");
  for (std::size_t i = 0; i < list.size(); ++i) {
    const auto& e = list[i];
    const std::string p = "ex" + std::to_string(i) + ".";
    Example ex;
    ex.scene_seed = e.at("scene_seed");
    ex.true_count = e.at("true_count");
    ex.has_height = e.at("has_height");
    if (!e.at("parallax").is_null()) {
      ex.parallax = Incidence{e["parallax"].at("azimuth_deg"), e["parallax"].at("zenith_deg")};
    }
    const auto bands = a.get<float>(p + "frames");
    const auto clouds = a.get<std::uint8_t>(p + "clouds");
    const auto meta = a.get<double>(p + "meta");
    const int n = bands.shape.n, g = bands.shape.h, B = bands.shape.c;
    for (int t = 0; t < n; ++t) {
      Frame f;
      f.bands = Tensor<float>({1, g, g, B});
      std::copy_n(bands.data.begin() + static_cast<std::ptrdiff_t>(t) * g * g * B, g * g * B,
                  f.bands.data.begin());
      f.meta.opaque_cloud = Mask(g, g, 0);
      std::copy_n(clouds.data.begin() + static_cast<std::ptrdiff_t>(t) * g * g, g * g,
                  f.meta.opaque_cloud.data.begin());
      FrameMeta& fm = f.meta;
      double* fields[] = {&fm.time_norm,     &fm.incidence_azimuth, &fm.incidence_zenith,
                          &fm.solar_azimuth, &fm.solar_zenith,      &fm.latitude,
                          &fm.longitude,     &fm.hr_incidence_azimuth, &fm.hr_incidence_zenith};
      for (int k = 0; k < kMetadataChannels; ++k) *fields[k] = meta.at(0, 0, t, k);
      fm.datatake_id = static_cast<std::int64_t>(meta.at(0, 0, t, kMetadataChannels));
      fm.processing_baseline = static_cast<int>(meta.at(0, 0, t, kMetadataChannels + 1));
      fm.time_offset_s = meta.at(0, 0, t, kMetadataChannels + 2);
      ex.frames.push_back(std::move(f));
    }
    const Incidence inc = ex.parallax.value_or(Incidence{});
    ex.labels = detail::labels_from_tensor(a.get<float>(p + "labels"), res, margin, inc);
    ex.truth = ex.parallax
                   ? detail::labels_from_tensor(a.get<float>(p + "truth"), res, margin, Incidence{})
                   : ex.labels;
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

}  // namespace mfsr
