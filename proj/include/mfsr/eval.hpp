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

// Evaluation metrics: binary mIoU with a threshold/dilation sweep, count
// calibration and estimation, count regression metrics, bucketed height
// errors and built-up area error.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfsr/tensor.hpp"

namespace mfsr {

inline Mask binarize(const Plane<float>& p, double threshold) {
  Mask m(p.h, p.w, 0);
  for (std::size_t i = 0; i < p.data.size(); ++i) m.data[i] = p.data[i] >= threshold ? 1 : 0;
  return m;
}

inline double iou_binary(const Mask& pred, const Mask& label) {
  if (pred.h != label.h || pred.w != label.w) throw ShapeError("iou_binary: mask shapes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool a = pred.data[i] != 0, b = label.data[i] != 0;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Mean of foreground and background IoU.
inline double miou_binary(const Mask& pred, const Mask& label) {
  Mask ip = pred, il = label;
  for (auto& v : ip.data) v = !v;
  for (auto& v : il.data) v = !v;
  return 0.5 * (iou_binary(pred, label) + iou_binary(ip, il));
}

// Square structuring element of side 2r+1; pixels outside count as empty.
template <typename T>
Plane<T> max_filter(const Plane<T>& in, int r) {
  if (r <= 0) return in;
  Plane<T> rows(in.h, in.w), out(in.h, in.w);
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < in.w; ++x) {
      T m = in(y, x);
      for (int d = std::max(0, x - r); d <= std::min(in.w - 1, x + r); ++d) m = std::max(m, in(y, d));
      rows(y, x) = m;
    }
  for (int y = 0; y < in.h; ++y)
    for (int x = 0; x < in.w; ++x) {
      T m = rows(y, x);
      for (int d = std::max(0, y - r); d <= std::min(in.h - 1, y + r); ++d) m = std::max(m, rows(d, x));
      out(y, x) = m;
    }
  return out;
}

inline Mask dilate(const Mask& m, int r) { return max_filter(m, r); }

struct SweepSpec {
  std::vector<double> thresholds;
  std::vector<int> dilation_radii{0, 1, 2, 3};

  SweepSpec() {
    for (int i = 0; i <= 100; ++i) thresholds.push_back(i / 100.0);
  }
  SweepSpec(std::vector<double> t, std::vector<int> d)
      : thresholds(std::move(t)), dilation_radii(std::move(d)) {}

  void validate() const {
    if (thresholds.empty() || dilation_radii.empty()) throw std::invalid_argument("sweep: empty spec");
    if (!std::is_sorted(thresholds.begin(), thresholds.end())) {
      throw std::invalid_argument("sweep: thresholds must be sorted");
    }
    for (int r : dilation_radii)
      if (r < 0) throw std::invalid_argument("sweep: dilation radius must be >= 0");
  }
};

struct SweepResult {
  double miou = 0.0;
  double threshold = 0.0;
  int dilation = 0;
};

// Per-image mIoU averaged over the dataset, maximised jointly over
// (threshold, dilation). Binarisation is `confidence >= threshold`, and
// dilating a binarised mask equals thresholding the max-filtered
// confidences, so each (image, radius) pair needs one pass.
inline SweepResult miou_sweep(const std::vector<const Plane<float>*>& conf,
                              const std::vector<const Mask*>& labels, const SweepSpec& spec = {}) {
  spec.validate();
  if (conf.size() != labels.size() || conf.empty()) {
    throw std::invalid_argument("miou_sweep: need equally many (>0) predictions and labels");
  }
  const std::size_t nt = spec.thresholds.size();
  SweepResult best{-1.0, 0.0, 0};
  for (int r : spec.dilation_radii) {
    std::vector<double> total(nt, 0.0);
    for (std::size_t i = 0; i < conf.size(); ++i) {
      const Mask& L = *labels[i];
      if (conf[i]->h != L.h || conf[i]->w != L.w) throw ShapeError("miou_sweep: shape mismatch");
      const Plane<float> d = max_filter(*conf[i], r);
      // pred_hist[k]: pixels whose value clears exactly thresholds[0..k-1].
      std::vector<std::int64_t> pred_hist(nt + 1, 0), inter_hist(nt + 1, 0);
      std::int64_t label_n = 0;
      for (std::size_t j = 0; j < d.data.size(); ++j) {
        const double v = d.data[j];
        const std::size_t k = static_cast<std::size_t>(
            std::upper_bound(spec.thresholds.begin(), spec.thresholds.end(), v) - spec.thresholds.begin());
        ++pred_hist[k];
        if (L.data[j]) {
          ++inter_hist[k];
          ++label_n;
        }
      }
      const std::int64_t N = static_cast<std::int64_t>(d.data.size());
      std::int64_t P = 0, I = 0;
      // Threshold t_k is cleared by pixels in bins k+1..nt.
      std::vector<double> per(nt);
      for (std::size_t k = nt; k-- > 0;) {
        P += pred_hist[k + 1];
        I += inter_hist[k + 1];
        const std::int64_t U = P + label_n - I;
        const double fg = U == 0 ? 1.0 : static_cast<double>(I) / U;
        const std::int64_t bg_u = N - I;        // complement of the intersection
        const std::int64_t bg_i = N - U;        // complement of the union
        const double bg = bg_u == 0 ? 1.0 : static_cast<double>(bg_i) / bg_u;
        per[k] = 0.5 * (fg + bg);
      }
      for (std::size_t k = 0; k < nt; ++k) total[k] += per[k];
    }
    for (std::size_t k = 0; k < nt; ++k) {
      const double m = total[k] / static_cast<double>(conf.size());
      if (m > best.miou) best = {m, spec.thresholds[k], r};
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Counting.

struct CountCalibration {
  double K = 0.0;
};

// K = mean over nonzero-count samples of (centroid label sum / true count).
inline CountCalibration calibrate_count_scale(const std::vector<const Plane<float>*>& centroid_labels,
                                              const std::vector<int>& true_counts) {
  if (centroid_labels.size() != true_counts.size()) {
    throw std::invalid_argument("calibrate_count_scale: one count per label");
  }
  double s = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < true_counts.size(); ++i) {
    if (true_counts[i] <= 0) continue;
    s += centroid_labels[i]->sum() / true_counts[i];
    ++n;
  }
  if (n == 0) throw std::invalid_argument("calibrate_count_scale: no samples with a nonzero count");
  return {s / n};
}

inline double estimate_count(const Plane<float>& pred_centroid, const CountCalibration& cal) {
  if (!(cal.K > 0)) throw std::invalid_argument("estimate_count: K must be > 0");
  return pred_centroid.sum() / cal.K;
}

struct CountMetrics {
  std::optional<double> r2;  // empty when the truths have zero variance
  double mae = 0.0;
};

inline CountMetrics count_metrics(const std::vector<double>& est, const std::vector<double>& truth) {
  if (est.size() != truth.size() || est.size() < 2) {
    throw std::invalid_argument("count_metrics: need two equal-length sequences of length >= 2");
  }
  const double n = static_cast<double>(truth.size());
  double mean = 0.0;
  for (double t : truth) mean += t;
  mean /= n;
  double ss_res = 0.0, ss_tot = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ss_res += (truth[i] - est[i]) * (truth[i] - est[i]);
    ss_tot += (truth[i] - mean) * (truth[i] - mean);
    ae += std::abs(truth[i] - est[i]);
  }
  CountMetrics m;
  m.mae = ae / n;
  if (ss_tot > 0) m.r2 = 1.0 - ss_res / ss_tot;
  return m;
}

// ---------------------------------------------------------------------------
// Heights.

// 8-connected components of a mask; 0 is background, instances are 1..n in
// raster order of their first pixel.
inline Plane<int> connected_components(const Mask& m, int* count = nullptr) {
  Plane<int> lab(m.h, m.w, 0);
  int next = 0;
  std::vector<std::pair<int, int>> stack;
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      if (!m(y, x) || lab(y, x)) continue;
      lab(y, x) = ++next;
      stack.push_back({y, x});
      while (!stack.empty()) {
        const auto [cy, cx] = stack.back();
        stack.pop_back();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = cy + dy, nx = cx + dx;
            if (ny < 0 || nx < 0 || ny >= m.h || nx >= m.w) continue;
            if (m(ny, nx) && !lab(ny, nx)) {
              lab(ny, nx) = next;
              stack.push_back({ny, nx});
            }
          }
      }
    }
  if (count) *count = next;
  return lab;
}

// Nearest rank: the ceil(p/100 * n)-th smallest value.
inline double percentile_nearest_rank(std::vector<double> v, double p) {
  if (v.empty()) throw std::invalid_argument("percentile of an empty set");
  std::sort(v.begin(), v.end());
  const auto n = static_cast<double>(v.size());
  std::size_t rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, v.size());
  return v[rank - 1];
}

struct HeightBucket {
  std::string name;
  double lo = 0.0, hi = 0.0;
  bool lo_closed = false, hi_closed = false;
  std::size_t count = 0;
  double mean = 0.0;
  std::array<double, 4> pct{};  // 50, 90, 95, 99

  bool contains(double h) const {
    return (lo_closed ? h >= lo : h > lo) && (hi_closed ? h <= hi : h < hi);
  }
};

inline constexpr std::array<double, 4> kHeightPercentiles{50, 90, 95, 99};

struct HeightInstance {
  double true_m = 0.0;
  double pred_m = 0.0;
};

// One (true, predicted) mean height per 8-connected building instance.
inline std::vector<HeightInstance> height_instances(const Plane<float>& pred_height,
                                                    const Plane<float>& label_height,
                                                    const Mask& building) {
  int n = 0;
  const Plane<int> lab = connected_components(building, &n);
  std::vector<double> ts(n + 1, 0.0), ps(n + 1, 0.0);
  std::vector<std::size_t> px(n + 1, 0);
  for (std::size_t i = 0; i < lab.data.size(); ++i) {
    const int k = lab.data[i];
    if (!k) continue;
    ts[k] += label_height.data[i];
    ps[k] += pred_height.data[i];
    ++px[k];
  }
  std::vector<HeightInstance> out;
  for (int k = 1; k <= n; ++k) out.push_back({ts[k] / px[k], ps[k] / px[k]});
  return out;
}

inline std::vector<HeightBucket> height_error_table(const std::vector<HeightInstance>& inst) {
  std::vector<HeightBucket> buckets{{"(0,5)", 0, 5, false, false},
                                    {"[5,20)", 5, 20, true, false},
                                    {"[20,100]", 20, 100, true, true},
                                    {"(0,100]", 0, 100, false, true}};
  if (inst.empty()) return {};
  for (auto& b : buckets) {
    std::vector<double> ae;
    for (const auto& i : inst)
      if (b.contains(i.true_m)) ae.push_back(std::abs(i.pred_m - i.true_m));
    b.count = ae.size();
    if (ae.empty()) continue;
    double s = 0.0;
    for (double e : ae) s += e;
    b.mean = s / ae.size();
    for (std::size_t k = 0; k < kHeightPercentiles.size(); ++k)
      b.pct[k] = percentile_nearest_rank(ae, kHeightPercentiles[k]);
  }
  return buckets;
}

inline std::vector<HeightBucket> height_error_stats(const std::vector<const Plane<float>*>& pred,
                                                    const std::vector<const Plane<float>*>& label,
                                                    const std::vector<const Mask*>& masks) {
  if (pred.size() != label.size() || pred.size() != masks.size()) {
    throw std::invalid_argument("height_error_stats: sequences differ in length");
  }
  std::vector<HeightInstance> all;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto inst = height_instances(*pred[i], *label[i], *masks[i]);
    all.insert(all.end(), inst.begin(), inst.end());
  }
  return height_error_table(all);
}

// ---------------------------------------------------------------------------
// Built-up area.

struct AreaResult {
  double error = 0.0;
  double threshold = 0.0;
};

inline AreaResult builtup_area_error(const std::vector<const Plane<float>*>& conf,
                                     const std::vector<const Mask*>& labels,
                                     const std::vector<double>& thresholds) {
  if (conf.empty() || thresholds.empty() || conf.size() != labels.size()) {
    throw std::invalid_argument("builtup_area_error: empty or mismatched inputs");
  }
  std::int64_t label_area = 0;
  for (const Mask* m : labels)
    for (auto v : m->data) label_area += v != 0;
  if (label_area == 0) throw std::invalid_argument("builtup_area_error: label area is zero");
  AreaResult best{std::numeric_limits<double>::infinity(), 0.0};
  for (double t : thresholds) {
    std::int64_t area = 0;
    for (const auto* c : conf)
      for (float v : c->data) area += v >= t;
    const double err = std::abs(static_cast<double>(area - label_area)) / static_cast<double>(label_area);
    if (err < best.error) best = {err, t};
  }
  return best;
}

}  // namespace mfsr
