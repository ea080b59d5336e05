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

// Procedural scenes and their exact high-resolution label rasters. The
// rasterizer plays the role of the label-producing teacher: every channel is
// computed from the scene geometry rather than predicted.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "mfsr/rng.hpp"
#include "mfsr/tensor.hpp"

namespace mfsr {

inline constexpr double kHeightCapM = 100.0;

struct Point {
  double x = 0.0;
  double y = 0.0;
};

// Rectangle footprint in scene metres (x right, y down), rotated by `angle`
// radians about its centre.
struct Building {
  Point centre;
  double length_m = 0.0;
  double width_m = 0.0;
  double angle = 0.0;
  double height_m = 0.0;
  double roof_tone = 0.8;

  std::array<Point, 4> corners() const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double hl = 0.5 * length_m, hw = 0.5 * width_m;
    std::array<Point, 4> out;
    const double u[] = {-hl, hl, hl, -hl};
    const double v[] = {-hw, -hw, hw, hw};
    for (int i = 0; i < 4; ++i)
      out[i] = {centre.x + c * u[i] - s * v[i], centre.y + s * u[i] + c * v[i]};
    return out;
  }

  bool contains(Point p) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double dx = p.x - centre.x, dy = p.y - centre.y;
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    return std::abs(u) <= 0.5 * length_m && std::abs(v) <= 0.5 * width_m;
  }
};

struct Road {
  std::vector<Point> polyline;
  double width_m = 6.0;

  double distance(Point p) const {
    double best = 1e300;
    for (std::size_t i = 0; i + 1 < polyline.size(); ++i) {
      const Point a = polyline[i], b = polyline[i + 1];
      const double vx = b.x - a.x, vy = b.y - a.y;
      const double len2 = vx * vx + vy * vy;
      double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double ex = a.x + t * vx - p.x, ey = a.y + t * vy - p.y;
      best = std::min(best, std::sqrt(ex * ex + ey * ey));
    }
    return best;
  }
};

struct Scene {
  std::vector<Building> buildings;
  std::vector<Road> roads;
  double extent_m = 48.0;
  std::uint64_t seed = 0;
};

struct SceneConfig {
  double extent_m = 48.0;
  double empty_probability = 0.10;  // scenes forced to have no buildings
  int min_buildings = 1;
  int max_buildings = 10;
  double min_size_m = 3.0;
  double max_size_m = 30.0;
  double min_height_m = 3.0;
  double max_height_m = 60.0;
  double rotated_fraction = 0.3;
  double adjacent_probability = 0.3;  // next building placed beside the last
  double min_gap_m = 0.5;
  // Building centroids keep this distance from the tile edge so their
  // centroid splats stay inside the tile.
  double centroid_margin_m = 4.0;
  int max_roads = 2;
  double road_probability = 0.6;
  double min_road_width_m = 4.0;
  double max_road_width_m = 8.0;

  void validate() const {
    auto range = [](double lo, double hi, const char* what) {
      if (!(lo <= hi)) {
        throw std::invalid_argument(std::string("scene config: degenerate range for ") +
                                    what);
      }
    };
    range(min_buildings, max_buildings, "building count");
    range(min_size_m, max_size_m, "building size");
    range(min_height_m, max_height_m, "building height");
    range(min_road_width_m, max_road_width_m, "road width");
    if (extent_m < 48.0) {
      throw std::invalid_argument("scene config: extent must be at least 48 m");
    }
    if (min_size_m <= 0 || min_height_m <= 0 || max_height_m > kHeightCapM) {
      throw std::invalid_argument("scene config: sizes and heights must be in (0, 100]");
    }
    if (empty_probability < 0 || empty_probability > 1) {
      throw std::invalid_argument("scene config: empty_probability outside [0,1]");
    }
  }
};

inline int true_count(const Scene& scene) {
  return static_cast<int>(scene.buildings.size());
}

namespace detail {

inline bool inside_extent(const Building& b, double extent, double centroid_margin) {
  if (b.centre.x < centroid_margin || b.centre.y < centroid_margin ||
      b.centre.x > extent - centroid_margin || b.centre.y > extent - centroid_margin) {
    return false;
  }
  for (Point p : b.corners())
    if (p.x < 0 || p.y < 0 || p.x > extent || p.y > extent) return false;
  return true;
}

// Separating-axis test on the two rectangles inflated by `gap`.
inline bool overlaps(const Building& a, const Building& b, double gap) {
  auto axes = [](const Building& r) {
    return std::array<Point, 2>{Point{std::cos(r.angle), std::sin(r.angle)},
                                Point{-std::sin(r.angle), std::cos(r.angle)}};
  };
  auto project = [](const Building& r, Point axis, double& lo, double& hi) {
    lo = 1e300;
    hi = -1e300;
    for (Point p : r.corners()) {
      const double d = p.x * axis.x + p.y * axis.y;
      lo = std::min(lo, d);
      hi = std::max(hi, d);
    }
  };
  for (const auto& set : {axes(a), axes(b)}) {
    for (Point axis : set) {
      double alo, ahi, blo, bhi;
      project(a, axis, alo, ahi);
      project(b, axis, blo, bhi);
      if (ahi + gap <= blo || bhi + gap <= alo) return false;
    }
  }
  return true;
}

inline double log_uniform(Rng& rng, double lo, double hi) {
  return std::exp(uniform(rng, std::log(lo), std::log(hi)));
}

}  // namespace detail

inline Scene sample_scene(std::uint64_t seed, const SceneConfig& cfg = {}) {
  cfg.validate();
  Rng rng = make_rng(seed, {0x5ce11e});
  Scene scene;
  scene.seed = seed;
  scene.extent_m = cfg.extent_m;
  const double extent = cfg.extent_m;

  // Roads first; buildings avoid them.
  if (cfg.max_roads > 0 && bernoulli(rng, cfg.road_probability)) {
    const int count = uniform_int(rng, 1, cfg.max_roads);
    for (int r = 0; r < count; ++r) {
      Road road;
      road.width_m = uniform(rng, cfg.min_road_width_m, cfg.max_road_width_m);
      const bool horizontal = bernoulli(rng, 0.5);
      const double a = uniform(rng, 0.15, 0.85) * extent;
      const double b = uniform(rng, 0.15, 0.85) * extent;
      const double mid = uniform(rng, 0.3, 0.7) * extent;
      if (horizontal) {
        road.polyline = {{-5.0, a}, {mid, 0.5 * (a + b)}, {extent + 5.0, b}};
      } else {
        road.polyline = {{a, -5.0}, {0.5 * (a + b), mid}, {b, extent + 5.0}};
      }
      scene.roads.push_back(std::move(road));
    }
  }

  if (bernoulli(rng, cfg.empty_probability) || cfg.max_buildings <= 0) return scene;

  const int target = uniform_int(rng, cfg.min_buildings, cfg.max_buildings);
  int attempts = 0;
  while (static_cast<int>(scene.buildings.size()) < target && attempts < 400 * target) {
    ++attempts;
    Building b;
    b.length_m = detail::log_uniform(rng, cfg.min_size_m, cfg.max_size_m);
    b.width_m = detail::log_uniform(rng, cfg.min_size_m,
                                    std::min(cfg.max_size_m, 1.5 * b.length_m));
    b.angle = bernoulli(rng, cfg.rotated_fraction) ? uniform(rng, 0.0, std::numbers::pi) : 0.0;
    b.height_m = std::min(detail::log_uniform(rng, cfg.min_height_m, cfg.max_height_m),
                          kHeightCapM);
    b.roof_tone = uniform(rng, 0.7, 0.92);
    const bool adjacent = !scene.buildings.empty() && bernoulli(rng, cfg.adjacent_probability);
    if (adjacent) {
      // Beside the previous building with a sub-2 m gap, sharing its angle.
      const Building& prev = scene.buildings.back();
      b.angle = prev.angle;
      const double gap = uniform(rng, cfg.min_gap_m, 2.0);
      const bool along = bernoulli(rng, 0.5);
      const double sign = bernoulli(rng, 0.5) ? 1.0 : -1.0;
      const double off = along ? 0.5 * (prev.length_m + b.length_m) + gap
                               : 0.5 * (prev.width_m + b.width_m) + gap;
      const double ux = along ? std::cos(b.angle) : -std::sin(b.angle);
      const double uy = along ? std::sin(b.angle) : std::cos(b.angle);
      b.centre = {prev.centre.x + sign * off * ux, prev.centre.y + sign * off * uy};
    } else {
      b.centre = {uniform(rng, 0.0, extent), uniform(rng, 0.0, extent)};
    }
    if (!detail::inside_extent(b, extent, cfg.centroid_margin_m)) continue;
    bool clash = false;
    for (const auto& other : scene.buildings) {
      if (detail::overlaps(b, other, cfg.min_gap_m)) {
        clash = true;
        break;
      }
    }
    if (clash) continue;
    for (const auto& road : scene.roads) {
      const double reach = 0.5 * road.width_m + 0.5;
      for (Point p : b.corners()) clash = clash || road.distance(p) < reach;
      clash = clash || road.distance(b.centre) < reach + 0.5 * std::min(b.length_m, b.width_m);
    }
    if (clash) continue;
    scene.buildings.push_back(b);
  }
  return scene;
}

// ---------------------------------------------------------------------------
// High-resolution labels.

enum class Channel : int { building = 0, road = 1, centroid = 2, height = 3, grayscale = 4 };
inline constexpr int kChannels = 5;
inline constexpr const char* kChannelNames[kChannels] = {"building", "road", "centroid",
                                                         "height", "grayscale"};

struct SplatSpec {
  double sigma_px = 2.0;
  double amplitude = 1.0;
  double truncation_radius_px = 8.0;  // 4 sigma

  double integral() const {
    return amplitude * 2.0 * std::numbers::pi * sigma_px * sigma_px;
  }
};

struct RenderConfig {
  SplatSpec splat;
  double background_tone = 0.30;
  double road_tone = 0.55;
  double speckle_std = 0.05;
};

struct Incidence {
  double azimuth_deg = 0.0;
  double zenith_deg = 0.0;
};

struct HighResLabelSet {
  double resolution_m = 0.5;
  int margin_x = 0;
  int margin_y = 0;
  Incidence incidence;  // viewing geometry the roofs were rendered with
  RenderConfig render;
  std::array<Plane<float>, kChannels> channels;

  Plane<float>& operator[](Channel c) { return channels[static_cast<int>(c)]; }
  const Plane<float>& operator[](Channel c) const { return channels[static_cast<int>(c)]; }
  int rows() const { return channels[0].h; }
  int cols() const { return channels[0].w; }
};

namespace detail {

// Deterministic per-pixel Gaussian texture.
inline double hash_normal(std::uint64_t seed, std::uint64_t a, std::int64_t i,
                          std::int64_t j) {
  const std::uint64_t h = derive_seed(seed, {a, static_cast<std::uint64_t>(i),
                                             static_cast<std::uint64_t>(j)});
  const double u1 = (static_cast<double>(h >> 11) + 0.5) * 0x1.0p-53;
  const double u2 = static_cast<double>(splitmix64(h) >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

struct PixelGrid {
  double res;
  int margin_x, margin_y, rows, cols;
  Point centre(int i, int j) const {
    return {(j - margin_x + 0.5) * res, (i - margin_y + 0.5) * res};
  }
  // Continuous pixel coordinate (column, row) of a scene point.
  Point to_pixel(Point p) const {
    return {p.x / res + margin_x - 0.5, p.y / res + margin_y - 0.5};
  }
};

inline std::vector<std::array<int, 2>> footprint_pixels(const Building& b,
                                                        const PixelGrid& g) {
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (Point p : b.corners()) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  const int j0 = static_cast<int>(std::floor(xmin / g.res)) + g.margin_x - 1;
  const int j1 = static_cast<int>(std::ceil(xmax / g.res)) + g.margin_x + 1;
  const int i0 = static_cast<int>(std::floor(ymin / g.res)) + g.margin_y - 1;
  const int i1 = static_cast<int>(std::ceil(ymax / g.res)) + g.margin_y + 1;
  std::vector<std::array<int, 2>> out;
  for (int i = i0; i <= i1; ++i)
    for (int j = j0; j <= j1; ++j)
      if (b.contains(g.centre(i, j))) out.push_back({i, j});
  return out;
}

// Integer roof displacement (dx, dy) in pixels for a building seen off-nadir.
// Azimuth is clockwise from north (image up).
inline std::array<int, 2> parallax_shift(double height_m, Incidence inc, double res) {
  if (inc.zenith_deg == 0.0) return {0, 0};
  double az = std::fmod(inc.azimuth_deg, 360.0);
  if (az < 0) az += 360.0;
  double sign = 1.0;
  if (az >= 180.0) {  // exact negation for opposite azimuths
    az -= 180.0;
    sign = -1.0;
  }
  const double d = height_m * std::tan(inc.zenith_deg * std::numbers::pi / 180.0) / res;
  const double a = az * std::numbers::pi / 180.0;
  const long dx = std::lround(sign * d * std::sin(a));
  const long dy = std::lround(-sign * d * std::cos(a));
  return {static_cast<int>(dx), static_cast<int>(dy)};
}

inline HighResLabelSet render(const Scene& scene, double res, int margin_x, int margin_y,
                              const RenderConfig& rc, Incidence inc) {
  if (!(res > 0)) throw std::invalid_argument("rasterize_labels: resolution must be > 0");
  const int core = static_cast<int>(std::lround(scene.extent_m / res));
  PixelGrid g{res, margin_x, margin_y, core + 2 * margin_y, core + 2 * margin_x};
  HighResLabelSet out;
  out.resolution_m = res;
  out.margin_x = margin_x;
  out.margin_y = margin_y;
  out.incidence = inc;
  out.render = rc;
  for (auto& ch : out.channels) ch = Plane<float>(g.rows, g.cols);
  auto& building = out[Channel::building];
  auto& road = out[Channel::road];
  auto& centroid = out[Channel::centroid];
  auto& height = out[Channel::height];
  auto& gray = out[Channel::grayscale];

  // Ground: background and roads with positional texture.
  for (int i = 0; i < g.rows; ++i) {
    for (int j = 0; j < g.cols; ++j) {
      const Point p = g.centre(i, j);
      bool on_road = false;
      for (const auto& r : scene.roads) on_road = on_road || r.distance(p) <= 0.5 * r.width_m;
      road(i, j) = on_road ? 1.0f : 0.0f;
      double tone = on_road ? rc.road_tone : rc.background_tone;
      if (rc.speckle_std > 0)
        tone += rc.speckle_std * hash_normal(scene.seed, 1, i - margin_y, j - margin_x);
      gray(i, j) = static_cast<float>(std::clamp(tone, 0.0, 1.0));
    }
  }

  // Roofs in ascending height so taller roofs end up on top.
  std::vector<std::size_t> order(scene.buildings.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scene.buildings[a].height_m < scene.buildings[b].height_m;
  });
  const SplatSpec& sp = rc.splat;
  for (std::size_t k : order) {
    const Building& b = scene.buildings[k];
    const auto [sx, sy] = parallax_shift(b.height_m, inc, res);
    for (auto [i, j] : footprint_pixels(b, g)) {
      const int ti = i + sy, tj = j + sx;
      if (ti < 0 || tj < 0 || ti >= g.rows || tj >= g.cols) continue;
      building(ti, tj) = 1.0f;
      height(ti, tj) = static_cast<float>(std::min(b.height_m, kHeightCapM));
      double tone = b.roof_tone;
      if (rc.speckle_std > 0)
        tone += rc.speckle_std * hash_normal(scene.seed, 2 + k, i - margin_y, j - margin_x);
      gray(ti, tj) = static_cast<float>(std::clamp(tone, 0.0, 1.0));
    }
    // Splats are summed; identical for every building regardless of size.
    const Point c = g.to_pixel(b.centre);
    const double cx = c.x + sx, cy = c.y + sy;
    const int r = static_cast<int>(std::ceil(sp.truncation_radius_px));
    const double r2max = sp.truncation_radius_px * sp.truncation_radius_px;
    for (int i = static_cast<int>(std::floor(cy)) - r; i <= static_cast<int>(std::ceil(cy)) + r; ++i) {
      if (i < 0 || i >= g.rows) continue;
      for (int j = static_cast<int>(std::floor(cx)) - r; j <= static_cast<int>(std::ceil(cx)) + r; ++j) {
        if (j < 0 || j >= g.cols) continue;
        const double d2 = (i - cy) * (i - cy) + (j - cx) * (j - cx);
        if (d2 > r2max) continue;
        centroid(i, j) += static_cast<float>(
            sp.amplitude * std::exp(-d2 / (2.0 * sp.sigma_px * sp.sigma_px)));
      }
    }
  }
  return out;
}

}  // namespace detail

// Exact (pixel-centre rule) rasterization of every label channel on a grid
// that extends `margin` pixels beyond the scene on each side.
inline HighResLabelSet rasterize_labels(const Scene& scene, double resolution_m,
                                        std::array<int, 2> margin_px,
                                        const RenderConfig& rc = {}) {
  return detail::render(scene, resolution_m, margin_px[0], margin_px[1], rc, Incidence{});
}

// Re-renders roofs as seen from `incidence`: each roof, with its centroid
// splat, height and texture, moves by height * tan(zenith) / resolution pixels
// along the azimuth. Ground and roads stay put.
inline HighResLabelSet apply_parallax(const HighResLabelSet& labels, const Scene& scene,
                                      Incidence incidence) {
  if (incidence.zenith_deg < 0.0 || incidence.zenith_deg > 45.0) {
    throw std::invalid_argument("apply_parallax: zenith must lie in [0, 45] degrees");
  }
  return detail::render(scene, labels.resolution_m, labels.margin_x, labels.margin_y,
                        labels.render, incidence);
}

}  // namespace mfsr
