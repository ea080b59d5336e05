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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfsr/graph.hpp"
#include "mfsr/rng.hpp"

namespace mfsr {

class GradCheckError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckOptions {
  double step = 1e-5;
  std::size_t max_samples = 64;  // coordinates probed; all when fewer exist
  std::uint64_t seed = 0;
};

// Compares the analytic gradient of a scalar graph with respect to `params`
// against central differences. `build(graph, param_node)` must construct the
// graph and return its scalar root. Returns
//   max |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)
// over the probed coordinates.
template <typename Builder>
double finite_diff_check(Builder&& build, const Tensor<double>& params,
                         const GradCheckOptions& opts = {}) {
  if (!(opts.step >= 1e-7 && opts.step <= 1e-4)) {
    throw std::invalid_argument("finite_diff_check: step must lie in [1e-7, 1e-4]");
  }
  auto evaluate = [&](const Tensor<double>& p) {
    Graph<double> g;
    const NodeId pid = g.leaf(p, true);
    const NodeId root = build(g, pid);
    return g.value(root).data.at(0);
  };

  Graph<double> g;
  const NodeId pid = g.leaf(params, true);
  const NodeId root = build(g, pid);
  g.backprop(root);
  const std::vector<double> analytic = g.grad(pid).data;

  std::vector<std::size_t> coords(params.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  if (coords.size() > opts.max_samples) {
    Rng rng(derive_seed(opts.seed, {params.size()}));
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opts.max_samples);
    std::sort(coords.begin(), coords.end());
  }

  double worst = 0.0;
  Tensor<double> probe = params;
  for (std::size_t i : coords) {
    const double orig = probe.data[i];
    probe.data[i] = orig + opts.step;
    const double up = evaluate(probe);
    probe.data[i] = orig - opts.step;
    const double down = evaluate(probe);
    probe.data[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw GradCheckError("finite_diff_check: non-finite loss while probing coordinate " +
                           std::to_string(i));
    }
    const double numeric = (up - down) / (2.0 * opts.step);
    const double denom =
        std::max({std::abs(analytic[i]), std::abs(numeric), 1e-12});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

// Same check over several parameter tensors at once; `build(graph, ids)`
// receives one leaf per tensor.
template <typename Builder>
double finite_diff_check_multi(Builder&& build, std::vector<Tensor<double>> params,
                               const GradCheckOptions& opts = {}) {
  if (!(opts.step >= 1e-7 && opts.step <= 1e-4)) {
    throw std::invalid_argument("finite_diff_check: step must lie in [1e-7, 1e-4]");
  }
  auto run = [&](bool with_grad, std::vector<std::vector<double>>* grads) {
    Graph<double> g;
    std::vector<NodeId> ids;
    for (const auto& p : params) ids.push_back(g.leaf(p, true));
    const NodeId root = build(g, ids);
    if (with_grad) {
      g.backprop(root);
      for (NodeId id : ids) grads->push_back(g.grad(id).data);
    }
    return g.value(root).data.at(0);
  };
  std::vector<std::vector<double>> analytic;
  run(true, &analytic);

  // Up to max_samples coordinates from every tensor.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t t = 0; t < params.size(); ++t) {
    std::vector<std::size_t> idx(params[t].size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > opts.max_samples) {
      Rng rng(derive_seed(opts.seed, {t, idx.size()}));
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opts.max_samples);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) coords.emplace_back(t, i);
  }

  double worst = 0.0;
  for (auto [t, i] : coords) {
    const double orig = params[t].data[i];
    params[t].data[i] = orig + opts.step;
    const double up = run(false, nullptr);
    params[t].data[i] = orig - opts.step;
    const double down = run(false, nullptr);
    params[t].data[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw GradCheckError("finite_diff_check: non-finite loss while probing tensor " +
                           std::to_string(t) + " coordinate " + std::to_string(i));
    }
    const double numeric = (up - down) / (2.0 * opts.step);
    const double a = analytic[t][i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace mfsr
