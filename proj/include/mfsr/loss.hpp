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

// Focal binary-KLD loss, exhaustive translation registration of labels
// against predictions, and the multi-task objective.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mfsr/graph.hpp"
#include "mfsr/model.hpp"
#include "mfsr/scene.hpp"

namespace mfsr {

struct LossConfig {
  double gamma_f = 0.25;
  double epsilon = 1e-7;
  int max_shift_x = 8;
  int max_shift_y = 8;
  std::array<double, kChannels> task_weights{1.0, 1.0, 1.0, 1.0, 1.0};
  double height_cap_m = kHeightCapM;
  std::vector<Channel> registration_channels{Channel::grayscale, Channel::building};

  void validate() const {
    if (!(gamma_f > 0)) throw std::invalid_argument("loss config: gamma_f must be > 0");
    if (!(epsilon > 0 && epsilon < 0.5)) {
      throw std::invalid_argument("loss config: epsilon must lie in (0, 0.5)");
    }
    if (max_shift_x < 0 || max_shift_y < 0) {
      throw std::invalid_argument("loss config: max_shift must be >= 0");
    }
    if (registration_channels.empty()) {
      throw std::invalid_argument("loss config: registration needs at least one channel");
    }
  }
};

struct Alignment {
  int dx = 0;
  int dy = 0;
  double mse = 0.0;
};

namespace detail {

inline double bin_kld(double y, double p) {
  const double k = y * std::log(y / p) + (1.0 - y) * std::log((1.0 - y) / (1.0 - p));
  return std::max(k, 0.0);
}

}  // namespace detail

// Per-pixel (BinKLD(y, y_hat) + eps)^gamma with both inputs clipped to
// [eps, 1 - eps].
inline double focal_kld_value(double y, double y_hat, const LossConfig& cfg) {
  const double e = cfg.epsilon;
  y = std::clamp(y, e, 1.0 - e);
  y_hat = std::clamp(y_hat, e, 1.0 - e);
  return std::pow(detail::bin_kld(y, y_hat) + e, cfg.gamma_f);
}

// d/d y_hat of focal_kld_value. The clip passes the gradient straight through
// (evaluated at the clipped point) so saturated outputs still learn.
inline double focal_kld_grad(double y, double y_hat, const LossConfig& cfg) {
  const double e = cfg.epsilon;
  y = std::clamp(y, e, 1.0 - e);
  y_hat = std::clamp(y_hat, e, 1.0 - e);
  const double k = detail::bin_kld(y, y_hat);
  const double dk = -y / y_hat + (1.0 - y) / (1.0 - y_hat);
  return cfg.gamma_f * std::pow(k + e, cfg.gamma_f - 1.0) * dk;
}

// Value and derivative together: one pow and one pair of logs per pixel.
inline std::pair<double, double> focal_kld_value_grad(double y, double y_hat, const LossConfig& cfg) {
  const double e = cfg.epsilon;
  y = std::clamp(y, e, 1.0 - e);
  y_hat = std::clamp(y_hat, e, 1.0 - e);
  const double base = detail::bin_kld(y, y_hat) + e;
  const double f = std::pow(base, cfg.gamma_f);
  const double dk = -y / y_hat + (1.0 - y) / (1.0 - y_hat);
  return {f, cfg.gamma_f * f / base * dk};
}

inline Plane<double> focal_kld(const Plane<float>& y, const Plane<float>& y_hat,
                               const LossConfig& cfg) {
  if (y.h != y_hat.h || y.w != y_hat.w) {
    throw ShapeError("focal_kld: label " + std::to_string(y.h) + "x" + std::to_string(y.w) +
                     " vs prediction " + std::to_string(y_hat.h) + "x" +
                     std::to_string(y_hat.w));
  }
  Plane<double> out(y.h, y.w);
  for (std::size_t i = 0; i < y.data.size(); ++i)
    out.data[i] = focal_kld_value(y.data[i], y_hat.data[i], cfg);
  return out;
}

// Exhaustive integer search: label crop at (margin_y + dy, margin_x + dx)
// against the prediction, MSE averaged over all given channel pairs. Ties go
// to the smallest |shift|^2, then lexicographic (dy, dx).
inline Alignment register_planes(const std::vector<const Plane<float>*>& label,
                                 const std::vector<const Plane<float>*>& pred,
                                 const std::vector<double>& scale, int margin_x, int margin_y,
                                 int max_dx, int max_dy) {
  if (label.size() != pred.size() || label.empty()) {
    throw std::invalid_argument("register: channel lists differ");
  }
  const int H = pred[0]->h, W = pred[0]->w;
  if (label[0]->h != H + 2 * margin_y || label[0]->w != W + 2 * margin_x) {
    throw ShapeError("register: label extents must equal prediction extents plus twice the margin");
  }
  if (max_dx > margin_x || max_dy > margin_y) {
    throw std::invalid_argument("register: max_shift exceeds the label margin");
  }
  std::vector<std::array<int, 2>> order;
  for (int dy = -max_dy; dy <= max_dy; ++dy)
    for (int dx = -max_dx; dx <= max_dx; ++dx) order.push_back({dy, dx});
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    return a[0] * a[0] + a[1] * a[1] < b[0] * b[0] + b[1] * b[1];
  });
  const double n = static_cast<double>(H) * W * label.size();
  Alignment best{0, 0, std::numeric_limits<double>::infinity()};
  for (const auto& [dy, dx] : order) {
    double s = 0.0;
    for (std::size_t c = 0; c < label.size(); ++c) {
      const Plane<float>& L = *label[c];
      const Plane<float>& P = *pred[c];
      const double k = scale[c];
      const float kf = static_cast<float>(k);
      for (int i = 0; i < H; ++i) {
        const float* lr = &L.data[static_cast<std::size_t>(i + margin_y + dy) * L.w + margin_x + dx];
        const float* pr = &P.data[static_cast<std::size_t>(i) * W];
        // Eight float lanes per row so the loop vectorises; rows sum in double.
        float lane[8] = {};
        int j = 0;
        for (; j + 8 <= W; j += 8)
          for (int u = 0; u < 8; ++u) {
            const float d = lr[j + u] - kf * pr[j + u];
            lane[u] += d * d;
          }
        double row = 0.0;
        for (; j < W; ++j) {
          const double d = lr[j] - k * pr[j];
          row += d * d;
        }
        for (float v : lane) row += v;
        s += row;
      }
    }
    const double mse = s / n;
    if (mse < best.mse) best = {dx, dy, mse};
  }
  return best;
}

inline Alignment register_translation(const HighResLabelSet& label, const Prediction& pred,
                                      const LossConfig& cfg) {
  std::vector<const Plane<float>*> l, p;
  std::vector<double> scale;
  std::vector<Plane<float>> scaled_labels;
  scaled_labels.reserve(cfg.registration_channels.size());
  for (Channel c : cfg.registration_channels) {
    if (c == Channel::height) {
      // Compare heights on the [0,1] scale used by the loss.
      Plane<float> h = label[c];
      for (auto& v : h.data) v = static_cast<float>(v / cfg.height_cap_m);
      scaled_labels.push_back(std::move(h));
      l.push_back(&scaled_labels.back());
      scale.push_back(1.0 / cfg.height_cap_m);
    } else {
      l.push_back(&label[c]);
      scale.push_back(1.0);
    }
    p.push_back(&pred.channel(c));
  }
  return register_planes(l, p, scale, label.margin_x, label.margin_y, cfg.max_shift_x,
                         cfg.max_shift_y);
}

// Pure index offset: the H x W window at (margin_y + dy, margin_x + dx).
inline HighResLabelSet shift_and_crop(const HighResLabelSet& label, int dx, int dy, int H, int W) {
  if (std::abs(dx) > label.margin_x || std::abs(dy) > label.margin_y) {
    throw std::invalid_argument("shift_and_crop: shift (" + std::to_string(dx) + ", " +
                                std::to_string(dy) + ") exceeds the label margin");
  }
  if (label.rows() != H + 2 * label.margin_y || label.cols() != W + 2 * label.margin_x) {
    throw ShapeError("shift_and_crop: label extents do not match prediction plus margins");
  }
  HighResLabelSet out = label;
  out.margin_x = 0;
  out.margin_y = 0;
  for (int c = 0; c < kChannels; ++c)
    out.channels[c] = label.channels[c].window(label.margin_y + dy, label.margin_x + dx, H, W);
  return out;
}

// Mean over the batch of sum_c w_c * mean_pixels(focal_kld) on already
// registered labels (one crop per example, same extents as `pred`). Heights
// are divided by the cap; their term is dropped where has_height is false.
template <typename T>
NodeId multitask_loss(Graph<T>& g, NodeId pred, const std::vector<const HighResLabelSet*>& labels,
                      const std::vector<bool>& has_height, const LossConfig& cfg,
                      std::array<double, kChannels>* per_task = nullptr) {
  cfg.validate();
  const auto& v = g.value(pred);
  const int B = v.shape.n, H = v.shape.h, W = v.shape.w;
  if (v.shape.c != kChannels) throw ShapeError("multitask_loss: prediction must have 5 channels");
  if (static_cast<int>(labels.size()) != B || static_cast<int>(has_height.size()) != B) {
    throw std::invalid_argument("multitask_loss: one label and height flag per example");
  }
  std::vector<T> grad(v.size(), T(0));
  std::array<double, kChannels> task{};
  double total = 0.0;
  const double px = static_cast<double>(H) * W;
  for (int b = 0; b < B; ++b) {
    const HighResLabelSet& lab = *labels[b];
    if (lab.rows() != H || lab.cols() != W) {
      throw ShapeError("multitask_loss: registered label is " + std::to_string(lab.rows()) + "x" +
                       std::to_string(lab.cols()) + ", prediction " + std::to_string(H) + "x" +
                       std::to_string(W));
    }
    for (int c = 0; c < kChannels; ++c) {
      const bool is_height = c == static_cast<int>(Channel::height);
      if (is_height && !has_height[b]) continue;
      const double w = cfg.task_weights[c];
      if (w == 0.0) continue;
      const double div = is_height ? cfg.height_cap_m : 1.0;
      const auto& L = lab.channels[c];
      double s = 0.0;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const std::size_t k = v.index(b, y, x, c);
          const double yl = L(y, x) / div;
          const double yp = static_cast<double>(v.data[k]);
          const auto [f, df] = focal_kld_value_grad(yl, yp, cfg);
          s += f;
          grad[k] = static_cast<T>(w * df / (px * B));
        }
      task[c] += w * s / px / B;
      total += w * s / px;
    }
  }
  if (per_task) *per_task = task;
  return g.external_scalar(pred, static_cast<T>(total / B), std::move(grad));
}

}  // namespace mfsr
