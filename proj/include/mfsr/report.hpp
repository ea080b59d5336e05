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

// Cross-run comparison tables and static SVG plots.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfsr/io/archive.hpp"

namespace mfsr::report {

struct RunSummary {
  std::string name;
  std::string dataset_hash;
  int frames = 0;
  bool duplicate_single_frame = false;
  bool use_hr_incidence = true;
  std::string fusion_mode;
  std::uint64_t seed = 0;
  double building_miou = 0.0;
  double road_miou = 0.0;
  std::optional<double> count_r2;
  double count_mae = 0.0;
  double height_mae = 0.0;
  double builtup_error = 0.0;
  double registered_mse = 0.0;
  std::vector<std::pair<double, double>> counts;  // (truth, estimate)
  std::vector<std::vector<std::string>> height_rows;  // bucket, n, mean, p50, p90, p95, p99
};

inline void check_compatible(const std::vector<RunSummary>& runs) {
  if (runs.empty()) throw std::invalid_argument("report: no completed runs");
  for (const auto& r : runs) {
    if (r.dataset_hash != runs.front().dataset_hash) {
      throw std::invalid_argument("report: runs '" + runs.front().name + "' and '" + r.name +
                                  "' were evaluated on different datasets");
    }
  }
}

inline std::vector<RunSummary> sorted_runs(std::vector<RunSummary> runs) {
  std::stable_sort(runs.begin(), runs.end(), [](const RunSummary& a, const RunSummary& b) {
    if (a.frames != b.frames) return a.frames < b.frames;
    if (a.duplicate_single_frame != b.duplicate_single_frame) return a.duplicate_single_frame;
    return a.name < b.name;
  });
  return runs;
}

inline std::string fmt(double v) { return io::format_double(v); }

inline std::string runs_csv(const std::vector<RunSummary>& runs) {
  std::ostringstream os;
  os << "run,frames,duplicate_single_frame,use_hr_incidence,fusion_mode,seed,building_miou,road_miou,"
        "count_r2,count_mae,height_mae_m,builtup_area_error,registered_mse\n";
  for (const auto& r : sorted_runs(runs)) {
    os << r.name << ',' << r.frames << ',' << r.duplicate_single_frame << ',' << r.use_hr_incidence << ','
       << r.fusion_mode << ',' << r.seed << ',' << fmt(r.building_miou) << ',' << fmt(r.road_miou) << ','
       << (r.count_r2 ? fmt(*r.count_r2) : "") << ',' << fmt(r.count_mae) << ',' << fmt(r.height_mae)
       << ',' << fmt(r.builtup_error) << ',' << fmt(r.registered_mse) << '\n';
  }
  return os.str();
}

// Mean building mIoU per (frames, duplicate) configuration.
inline std::string timeframes_csv(const std::vector<RunSummary>& runs) {
  std::map<std::pair<int, bool>, std::vector<double>> groups;
  for (const auto& r : runs) groups[{r.frames, !r.duplicate_single_frame}].push_back(r.building_miou);
  std::ostringstream os;
  os << "frames,distinct_frames,runs,mean_building_miou\n";
  for (const auto& [key, v] : groups) {
    double s = 0.0;
    for (double x : v) s += x;
    os << key.first << ',' << key.second << ',' << v.size() << ',' << fmt(s / v.size()) << '\n';
  }
  return os.str();
}

inline std::string heights_csv(const std::vector<RunSummary>& runs) {
  std::ostringstream os;
  os << "run,bucket,instances,mean_ae_m,p50,p90,p95,p99\n";
  for (const auto& r : sorted_runs(runs))
    for (const auto& row : r.height_rows) {
      os << r.name;
      for (const auto& c : row) os << ',' << c;
      os << '\n';
    }
  return os.str();
}

struct Range {
  double lo = 0.0, hi = 1.0;
  bool contains(double v) const { return v >= lo && v <= hi; }
};

// Rounded-out range containing every value (never empty).
inline Range nice_range(const std::vector<double>& values) {
  if (values.empty()) return {0.0, 1.0};
  double lo = *std::min_element(values.begin(), values.end());
  double hi = *std::max_element(values.begin(), values.end());
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double span = hi - lo;
  const double step = std::pow(10.0, std::floor(std::log10(span))) / 2.0;
  return {std::floor(lo / step) * step, std::ceil(hi / step) * step};
}

struct Series {
  std::vector<double> x, y;
};

// Scatter (or connected line) plot with a y = x reference when `diagonal`.
inline std::string svg_plot(const std::string& title, const std::string& xlabel,
                            const std::string& ylabel, const Series& s, bool connect, bool diagonal,
                            Range* xr_out = nullptr, Range* yr_out = nullptr) {
  std::vector<double> xs = s.x, ys = s.y;
  if (diagonal) {
    xs.insert(xs.end(), s.y.begin(), s.y.end());
    ys.insert(ys.end(), s.x.begin(), s.x.end());
  }
  const Range xr = nice_range(xs), yr = diagonal ? nice_range(xs) : nice_range(ys);
  if (xr_out) *xr_out = xr;
  if (yr_out) *yr_out = yr;
  const double W = 480, H = 360, L = 60, R = 20, T = 40, B = 50;
  auto px = [&](double v) { return L + (v - xr.lo) / (xr.hi - xr.lo) * (W - L - R); };
  auto py = [&](double v) { return H - B - (v - yr.lo) / (yr.hi - yr.lo) * (H - T - B); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double vx = xr.lo + i * (xr.hi - xr.lo) / 4, vy = yr.lo + i * (yr.hi - yr.lo) / 4;
    os << "<text x=\"" << px(vx) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << fmt(vx)
       << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(vy) + 4 << "\" text-anchor=\"end\">" << fmt(vy)
       << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xlabel
     << "</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << (T + H - B) / 2 << ")\">" << ylabel << "</text>\n";
  if (diagonal) {
    const double a = std::max(xr.lo, yr.lo), b = std::min(xr.hi, yr.hi);
    os << "<line x1=\"" << px(a) << "\" y1=\"" << py(a) << "\" x2=\"" << px(b) << "\" y2=\"" << py(b)
       << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  }
  if (connect && s.x.size() > 1) {
    os << "<polyline fill=\"none\" stroke=\"steelblue\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) os << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    os << "\"/>\n";
  }
  for (std::size_t i = 0; i < s.x.size(); ++i)
    os << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"3\" fill=\"steelblue\"/>\n";
  os << "</svg>\n";
  return os.str();
}

inline std::string count_scatter_svg(const RunSummary& r) {
  Series s;
  for (const auto& [t, e] : r.counts) {
    s.x.push_back(t);
    s.y.push_back(e);
  }
  const std::string title = r.name + ": R^2 = " + (r.count_r2 ? fmt(std::round(*r.count_r2 * 1000) / 1000) : "n/a");
  return svg_plot(title, "true count", "estimated count", s, false, true);
}

inline std::string timeframes_svg(const std::vector<RunSummary>& runs) {
  std::map<int, std::vector<double>> by_t;
  for (const auto& r : runs)
    if (!r.duplicate_single_frame) by_t[r.frames].push_back(r.building_miou);
  Series s;
  for (const auto& [t, v] : by_t) {
    double m = 0;
    for (double x : v) m += x;
    s.x.push_back(t);
    s.y.push_back(m / v.size());
  }
  return svg_plot("building mIoU vs frames", "frames", "building mIoU", s, true, false);
}

}  // namespace mfsr::report
