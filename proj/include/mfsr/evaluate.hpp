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

// Model evaluation over dataset examples and report serialisation.

#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mfsr/dataset.hpp"
#include "mfsr/eval.hpp"
#include "mfsr/io/archive.hpp"
#include "mfsr/loss.hpp"
#include "mfsr/train.hpp"

namespace mfsr {

struct EvalOptions {
  int center_crop_lr = 12;
  int batch_size = 4;
  int threads = 1;
  bool oracle = false;  // score the truth labels as if they were predictions
  SweepSpec sweep;
  std::vector<double> area_thresholds = SweepSpec{}.thresholds;
};

struct CountRow {
  int example = 0;
  double truth = 0.0;
  double estimate = 0.0;
};

struct EvalReport {
  std::size_t examples = 0;
  SweepResult building;
  SweepResult road;
  double constant_baseline_miou = 0.0;  // best constant building prediction
  double count_scale = 0.0;
  CountMetrics count;
  std::vector<CountRow> counts;
  std::vector<HeightBucket> heights;
  AreaResult builtup;
  double registered_mse = 0.0;  // registration-channel MSE against the nadir truth
};

inline Prediction prediction_from_labels(const HighResLabelSet& l) {
  Prediction p;
  p.building = l[Channel::building];
  p.road = l[Channel::road];
  p.centroid = l[Channel::centroid];
  p.grayscale = l[Channel::grayscale];
  p.height_m = l[Channel::height];
  return p;
}

// Forward at hr-incidence (0, 0), register each prediction against the nadir
// truth with the training search window, then score.
inline EvalReport evaluate(const Dataset& ds, const std::vector<int>& indices,
                           const ParamStore<float>& params, const ModelConfig& mcfg,
                           const LossConfig& lcfg, double count_scale, const EvalOptions& opt) {
  if (indices.empty()) throw std::invalid_argument("evaluate: no examples");
  const CropWindow w = center_crop(ds.grid, opt.center_crop_lr);
  const int up = mcfg.upscale_factor;
  const int target = std::max(2, mcfg.frames);
  const bool full_tile = w.size == ds.grid;

  const std::size_t n = indices.size();
  std::vector<HighResLabelSet> truths(n);
  std::vector<Prediction> preds(n);
  for (std::size_t i = 0; i < n; ++i) truths[i] = crop_labels(ds.examples[indices[i]].truth, w, up);
  if (!opt.oracle) {
    const int batches = static_cast<int>((n + opt.batch_size - 1) / opt.batch_size);
    parallel_for(batches, opt.threads, [&](int bi) {
      const std::size_t start = static_cast<std::size_t>(bi) * opt.batch_size;
      const std::size_t end = std::min(n, start + opt.batch_size);
      std::vector<LowResStack> stacks;
      for (std::size_t i = start; i < end; ++i) {
        const Example& ex = ds.examples[indices[i]];
        LowResStack st = pad_truncate_stack(crop_frames(ex.frames, w), target, 0, 0.0, w.size,
                                            ds.band_count);
        if (mcfg.frames == 1) {
          st = duplicate_reference_frame(st);
          st.frames.resize(1);
        }
        stacks.push_back(std::move(st));
      }
      std::vector<const LowResStack*> ptrs;
      for (const auto& s : stacks) ptrs.push_back(&s);
      auto out = forward(ptrs, params, mcfg, Incidence{0.0, 0.0});
      for (std::size_t i = start; i < end; ++i) preds[i] = std::move(out[i - start]);
    });
  }

  const int H = up * w.size, W = up * w.size;
  std::vector<HighResLabelSet> aligned(indices.size());
  EvalReport r;
  r.examples = indices.size();
  r.count_scale = count_scale;
  std::vector<double> mses(n, 0.0);
  parallel_for(static_cast<int>(n), opt.threads, [&](int i) {
    if (opt.oracle) {
      aligned[i] = shift_and_crop(truths[i], 0, 0, H, W);
      preds[i] = prediction_from_labels(aligned[i]);
      return;
    }
    const Alignment al = register_translation(truths[i], preds[i], lcfg);
    aligned[i] = shift_and_crop(truths[i], al.dx, al.dy, H, W);
    mses[i] = al.mse;
  });
  double mse = 0.0;
  for (double m : mses) mse += m;
  r.registered_mse = mse / static_cast<double>(indices.size());

  std::vector<Mask> bmask, rmask;
  for (const auto& a : aligned) {
    bmask.push_back(binarize(a[Channel::building], 0.5));
    rmask.push_back(binarize(a[Channel::road], 0.5));
  }
  std::vector<const Plane<float>*> bconf, rconf, ph, lh;
  std::vector<const Mask*> bm, rm;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    bconf.push_back(&preds[i].building);
    rconf.push_back(&preds[i].road);
    ph.push_back(&preds[i].height_m);
    lh.push_back(&aligned[i][Channel::height]);
    bm.push_back(&bmask[i]);
    rm.push_back(&rmask[i]);
  }
  r.building = miou_sweep(bconf, bm, opt.sweep);
  r.road = miou_sweep(rconf, rm, opt.sweep);
  {
    const Plane<float> zeros(H, W, 0.0f);
    std::vector<const Plane<float>*> z(indices.size(), &zeros);
    r.constant_baseline_miou = miou_sweep(z, bm, SweepSpec({0.0, 0.5}, {0})).miou;
  }

  const CountCalibration cal{count_scale};
  std::vector<double> est, truth;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Example& ex = ds.examples[indices[i]];
    // Off the full tile, the truth count is read from the exact labels.
    const double t = full_tile ? ex.true_count : estimate_count(aligned[i][Channel::centroid], cal);
    const double e = estimate_count(preds[i].centroid, cal);
    r.counts.push_back({indices[i], t, e});
    est.push_back(e);
    truth.push_back(t);
  }
  if (indices.size() >= 2) r.count = count_metrics(est, truth);
  r.heights = height_error_stats(ph, lh, bm);
  bool any_building = false;
  for (const auto& m : bmask)
    for (auto v : m.data) any_building = any_building || v;
  if (any_building) r.builtup = builtup_area_error(bconf, bm, opt.area_thresholds);
  return r;
}

inline nlohmann::ordered_json report_json(const EvalReport& r) {
  using json = nlohmann::ordered_json;
  auto num = [](double v) { return std::stod(io::format_double(v)); };
  json j;
  j["miou_definition"] =
      "mean of foreground and background IoU per image, averaged over images; "
      "binarisation is confidence >= threshold; dilation uses a square (2r+1) element";
  j["examples"] = r.examples;
  j["building"] = {{"miou", num(r.building.miou)},
                   {"threshold", num(r.building.threshold)},
                   {"dilation", r.building.dilation}};
  j["road"] = {{"miou", num(r.road.miou)},
               {"threshold", num(r.road.threshold)},
               {"dilation", r.road.dilation}};
  j["constant_baseline_miou"] = num(r.constant_baseline_miou);
  j["count"] = {{"scale_K", num(r.count_scale)},
                {"r2", r.count.r2 ? json(num(*r.count.r2)) : json(nullptr)},
                {"mae", num(r.count.mae)}};
  json hb = json::array();
  for (const auto& b : r.heights) {
    hb.push_back({{"bucket", b.name},
                  {"instances", b.count},
                  {"mean_ae_m", num(b.mean)},
                  {"p50", num(b.pct[0])},
                  {"p90", num(b.pct[1])},
                  {"p95", num(b.pct[2])},
                  {"p99", num(b.pct[3])}});
  }
  j["height_ae"] = hb;
  j["builtup_area"] = {{"error", num(r.builtup.error)}, {"threshold", num(r.builtup.threshold)}};
  j["registered_mse"] = num(r.registered_mse);
  return j;
}

inline std::string counts_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "example,true_count,estimated_count\n";
  for (const auto& c : r.counts)
    os << c.example << ',' << io::format_double(c.truth) << ',' << io::format_double(c.estimate) << '\n';
  return os.str();
}

inline std::string heights_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "bucket,instances,mean_ae_m,p50,p90,p95,p99\n";
  for (const auto& b : r.heights) {
    os << '"' << b.name << "\"," << b.count << ',' << io::format_double(b.mean);
    for (double p : b.pct) os << ',' << io::format_double(p);
    os << '\n';
  }
  return os.str();
}

inline std::string segmentation_csv(const EvalReport& r) {
  std::ostringstream os;
  os << "task,miou,threshold,dilation\n";
  os << "building," << io::format_double(r.building.miou) << ',' << io::format_double(r.building.threshold)
     << ',' << r.building.dilation << '\n';
  os << "road," << io::format_double(r.road.miou) << ',' << io::format_double(r.road.threshold) << ','
     << r.road.dilation << '\n';
  return os.str();
}

}  // namespace mfsr
