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

#include <cmath>
#include <functional>
#include <vector>

#include "mfsr/gradcheck.hpp"
#include "mfsr/graph.hpp"
#include "mfsr/rng.hpp"
#include "primitive_cases.hpp"

namespace mfsr {
namespace {

using testing_support::make_case;
using testing_support::PrimitiveCase;
using testing_support::random_tensor;

// Direct convolution sum with the same "same"-padding convention; used as an
// independent oracle for the im2col path.
Tensor<double> direct_conv(const Tensor<double>& x, const Tensor<double>& w,
                           int stride) {
  const int k = w.shape.n;
  const int oh = (x.shape.h + stride - 1) / stride;
  const int ow = (x.shape.w + stride - 1) / stride;
  const int pad_y = std::max((oh - 1) * stride + k - x.shape.h, 0) / 2;
  const int pad_x = std::max((ow - 1) * stride + k - x.shape.w, 0) / 2;
  Tensor<double> out({x.shape.n, oh, ow, w.shape.c});
  for (int n = 0; n < x.shape.n; ++n)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox)
        for (int co = 0; co < w.shape.c; ++co) {
          double s = 0.0;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx)
              for (int ci = 0; ci < x.shape.c; ++ci) {
                const int iy = oy * stride + ky - pad_y;
                const int ix = ox * stride + kx - pad_x;
                if (iy < 0 || ix < 0 || iy >= x.shape.h || ix >= x.shape.w) continue;
                s += x.at(n, iy, ix, ci) * w.at(ky, kx, ci, co);
              }
          out.at(n, oy, ox, co) = s;
        }
  return out;
}

// Scatter form of the transposed convolution: input pixel i lands at
// i*stride + k - (kernel - stride)/2.
Tensor<double> direct_transposed_conv(const Tensor<double>& x,
                                      const Tensor<double>& w, int stride) {
  const int k = w.shape.h;
  const int pad = std::max(k - stride, 0) / 2;
  Tensor<double> out({x.shape.n, x.shape.h * stride, x.shape.w * stride, w.shape.c});
  for (int n = 0; n < x.shape.n; ++n)
    for (int iy = 0; iy < x.shape.h; ++iy)
      for (int ix = 0; ix < x.shape.w; ++ix)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const int oy = iy * stride + ky - pad;
            const int ox = ix * stride + kx - pad;
            if (oy < 0 || ox < 0 || oy >= out.shape.h || ox >= out.shape.w) continue;
            for (int ci = 0; ci < x.shape.c; ++ci)
              for (int co = 0; co < w.shape.c; ++co)
                out.at(n, oy, ox, co) += x.at(n, iy, ix, ci) * w.at(ci, ky, kx, co);
          }
  return out;
}

TEST(ApplyPrimitive, IdentityPointKernelReproducesInput) {
  Graph<double> g;
  Rng rng(1);
  auto x = random_tensor({1, 4, 4, 1}, rng);
  const NodeId xi = g.leaf(x);
  const NodeId w = g.leaf(Tensor<double>({1, 1, 1, 1}, 1.0));
  const NodeId b = g.leaf(Tensor<double>({1, 1, 1, 1}, 0.0));
  const NodeId y = g.conv2d(xi, w, b);
  EXPECT_EQ(g.value(y), x);
}

TEST(ApplyPrimitive, ReluClampsNegatives) {
  Graph<double> g;
  const NodeId x = g.leaf(Tensor<double>({1, 1, 1, 3}, {-1.0, 0.0, 2.0}));
  EXPECT_EQ(g.value(g.relu(x)).data, (std::vector<double>{0.0, 0.0, 2.0}));
}

TEST(ApplyPrimitive, AllOnesThreeByThreeCentreIsNine) {
  Graph<double> g;
  const NodeId x = g.leaf(Tensor<double>({1, 3, 3, 1}, 1.0));
  const NodeId w = g.leaf(Tensor<double>({3, 3, 1, 1}, 1.0));
  const NodeId y = g.conv2d(x, w, std::nullopt);
  EXPECT_DOUBLE_EQ(g.value(y).at(0, 1, 1, 0), 9.0);
  EXPECT_DOUBLE_EQ(g.value(y).at(0, 0, 0, 0), 4.0);
}

TEST(ApplyPrimitive, ConvMatchesDirectSum) {
  Rng rng(7);
  for (int stride : {1, 2}) {
    for (int k : {1, 3, 5}) {
      auto x = random_tensor({2, 7, 6, 3}, rng);
      auto w = random_tensor({k, k, 3, 4}, rng);
      Graph<double> g;
      const NodeId y = g.conv2d(g.leaf(x), g.leaf(w), std::nullopt, stride);
      const auto ref = direct_conv(x, w, stride);
      ASSERT_EQ(g.value(y).shape, ref.shape);
      for (std::size_t i = 0; i < ref.size(); ++i)
        EXPECT_NEAR(g.value(y).data[i], ref.data[i], 1e-12);
    }
  }
}

TEST(ApplyPrimitive, TransposedConvMatchesScatterSum) {
  Rng rng(8);
  for (int k : {2, 3, 4}) {
    auto x = random_tensor({2, 3, 4, 3}, rng);
    auto w = random_tensor({3, k, k, 2}, rng);
    Graph<double> g;
    const NodeId y = g.transposed_conv2d(g.leaf(x), g.leaf(w), std::nullopt, 2);
    const auto ref = direct_transposed_conv(x, w, 2);
    ASSERT_EQ(g.value(y).shape, ref.shape);
    for (std::size_t i = 0; i < ref.size(); ++i)
      EXPECT_NEAR(g.value(y).data[i], ref.data[i], 1e-12);
  }
}

TEST(ApplyPrimitive, SpatialExtentContracts) {
  Graph<double> g;
  Rng rng(3);
  const NodeId x = g.leaf(random_tensor({1, 5, 7, 2}, rng));
  const NodeId w3 = g.leaf(random_tensor({3, 3, 2, 2}, rng));
  const NodeId wt = g.leaf(random_tensor({2, 3, 3, 2}, rng));
  EXPECT_EQ(g.value(g.conv2d(x, w3, std::nullopt, 1)).shape, (Shape{1, 5, 7, 2}));
  EXPECT_EQ(g.value(g.transposed_conv2d(x, wt, std::nullopt, 2)).shape,
            (Shape{1, 10, 14, 2}));
}

TEST(ApplyPrimitive, ShapeMismatchNamesDimension) {
  Graph<double> g;
  const NodeId x = g.leaf(Tensor<double>({1, 4, 4, 2}));
  const NodeId w = g.leaf(Tensor<double>({3, 3, 5, 1}));
  try {
    g.conv2d(x, w, std::nullopt);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("in_channels"), std::string::npos);
  }
  const NodeId y = g.leaf(Tensor<double>({1, 4, 3, 2}));
  try {
    g.add(x, y);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("width"), std::string::npos);
  }
}

TEST(ApplyPrimitive, UnknownAttributeRejected) {
  Graph<double> g;
  const NodeId x = g.leaf(Tensor<double>({1, 2, 2, 1}));
  const NodeId in[] = {x};
  EXPECT_THROW(g.apply(PrimitiveTag::relu, in, {{"stride", std::int64_t{2}}}),
               AttrError);
  const NodeId w = g.leaf(Tensor<double>({1, 1, 1, 1}));
  const NodeId in2[] = {x, w};
  EXPECT_THROW(g.apply(PrimitiveTag::conv2d, in2, {{"dilation", std::int64_t{2}}}),
               AttrError);
}

TEST(Backprop, SumGivesOnes) {
  Graph<double> g;
  const NodeId x = g.leaf(Tensor<double>({1, 2, 2, 1}, {1, 2, 3, 4}));
  g.backprop(g.sum(x));
  EXPECT_EQ(g.grad(x).data, std::vector<double>(4, 1.0));
}

TEST(Backprop, SigmoidSquareChainRule) {
  Graph<double> g;
  const NodeId x = g.leaf(Tensor<double>({1, 1, 1, 1}, 0.0));
  g.backprop(g.sum(g.square(g.sigmoid(x))));
  // 2 * s * s * (1 - s) at s = 0.5.
  EXPECT_NEAR(g.grad(x).data[0], 0.25, 1e-15);
}

TEST(Backprop, FanOutAccumulates) {
  Graph<double> g;
  const NodeId x = g.leaf(Tensor<double>({1, 2, 2, 1}, 0.3));
  g.backprop(g.sum(g.add(x, x)));
  EXPECT_EQ(g.grad(x).data, std::vector<double>(4, 2.0));
}

TEST(Backprop, NonScalarRootRejected) {
  Graph<double> g;
  const NodeId x = g.leaf(Tensor<double>({1, 2, 2, 1}, 0.3));
  EXPECT_THROW(g.backprop(g.relu(x)), GraphError);
}

TEST(Backprop, GradsStartAtZero) {
  Graph<double> g;
  Rng rng(2);
  const NodeId x = g.leaf(random_tensor({1, 3, 3, 2}, rng));
  const NodeId w = g.leaf(random_tensor({3, 3, 2, 2}, rng));
  const NodeId y = g.relu(g.conv2d(x, w, std::nullopt));
  for (NodeId id : {x, w, y}) {
    EXPECT_EQ(g.grad(id).shape, g.value(id).shape);
    for (double v : g.grad(id).data) EXPECT_EQ(v, 0.0);
  }
}

TEST(Backprop, RepeatedPassIsDeterministic) {
  Graph<float> g;
  Rng rng(5);
  Tensor<float> xv({2, 6, 6, 3});
  for (auto& v : xv.data) v = static_cast<float>(uniform(rng, -1, 1));
  Tensor<float> wv({3, 3, 3, 4});
  for (auto& v : wv.data) v = static_cast<float>(uniform(rng, -1, 1));
  const NodeId x = g.leaf(xv);
  const NodeId w = g.leaf(wv);
  const NodeId root = g.sum(g.square(g.relu(g.conv2d(x, w, std::nullopt, 2))));
  g.backprop(root);
  const auto first = g.grad(w);
  const auto first_x = g.grad(x);
  g.zero_grad();
  g.backprop(root);
  EXPECT_EQ(g.grad(w), first);
  EXPECT_EQ(g.grad(x), first_x);
}

TEST(FiniteDiff, LinearIsExact) {
  const Tensor<double> w({1, 1, 1, 1}, 0.7);
  const double err = finite_diff_check(
      [](Graph<double>& g, NodeId p) {
        std::vector<double> three{3.0};
        return g.sum(p, &three);
      },
      w);
  EXPECT_LE(err, 1e-10);
}

TEST(FiniteDiff, ConvReluSum) {
  Rng rng(11);
  const auto x = random_tensor({1, 5, 5, 2}, rng);
  const auto w = random_tensor({3, 3, 2, 3}, rng);
  const double err = finite_diff_check(
      [&](Graph<double>& g, NodeId p) {
        return g.sum(g.relu(g.conv2d(g.leaf(x, false), p, std::nullopt)));
      },
      w, {.step = 1e-5, .max_samples = 1000});
  EXPECT_LE(err, 1e-6);
}

TEST(FiniteDiff, StepOutOfRangeRejected) {
  const Tensor<double> w({1, 1, 1, 1}, 0.7);
  auto build = [](Graph<double>& g, NodeId p) { return g.sum(p); };
  EXPECT_THROW(finite_diff_check(build, w, {.step = 1e-3}), std::invalid_argument);
}

TEST(FiniteDiff, NonFiniteProbeReportsCoordinate) {
  Tensor<double> w({1, 1, 1, 2}, 1.0);
  auto build = [](Graph<double>& g, NodeId p) {
    const auto& v = g.value(p);
    const double val = v.data[1] > 1.0 ? std::nan("") : v.data[0] + v.data[1];
    return g.external_scalar(p, val, {1.0, 1.0});
  };
  try {
    finite_diff_check(build, w);
    FAIL() << "expected GradCheckError";
  } catch (const GradCheckError& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 1"), std::string::npos);
  }
}

class PrimitiveGradient : public ::testing::TestWithParam<PrimitiveTag> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  Rng rng(derive_seed(99, {static_cast<std::uint64_t>(GetParam())}));
  for (int trial = 0; trial < 8; ++trial) {
    const PrimitiveCase pc = make_case(GetParam(), rng);
    for (std::size_t which : pc.differentiable) {
      // Random output weighting makes the root sensitive to every element.
      std::vector<double> weights;
      auto build = [&](Graph<double>& g, NodeId p) {
        std::vector<NodeId> ids;
        for (std::size_t i = 0; i < pc.inputs.size(); ++i)
          ids.push_back(i == which ? p : g.leaf(pc.inputs[i], false));
        const NodeId out = pc.apply(g, ids);
        if (weights.empty()) {
          Rng wr(derive_seed(trial, {which}));
          weights.resize(g.value(out).size());
          // Magnitudes in [0.5, 1] keep every element's gradient well above
          // the central-difference rounding floor.
          for (auto& v : weights) v = (bernoulli(wr, 0.5) ? 1 : -1) * uniform(wr, 0.5, 1.0);
        }
        return g.sum(out, &weights);
      };
      const double err = finite_diff_check(build, pc.inputs[which],
                                           {.step = 1e-5, .max_samples = 200});
      EXPECT_LE(err, 1e-6) << to_string(GetParam()) << " input " << which
                           << " trial " << trial;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient,
                         ::testing::ValuesIn(kAllPrimitives),
                         [](const auto& info) {
                           return std::string(to_string(info.param));
                         });

TEST(MeanOverTime, PermutationInvariantValueAndGradient) {
  Rng rng(21);
  const int frames = 5;
  auto x = random_tensor({frames, 3, 3, 2}, rng);
  std::vector<int> perm{3, 0, 4, 1, 2};
  Tensor<double> xp(x.shape);
  for (int t = 0; t < frames; ++t)
    std::copy_n(&x.at(perm[t], 0, 0, 0), 18, &xp.at(t, 0, 0, 0));

  auto run = [&](const Tensor<double>& in, Tensor<double>& grad) {
    Graph<double> g;
    const NodeId xi = g.leaf(in);
    const NodeId m = g.mean_over_time(xi, frames);
    const auto out = g.value(m);
    g.backprop(g.sum(g.square(m)));
    grad = g.grad(xi);
    return out;
  };
  Tensor<double> g1, g2;
  const auto a = run(x, g1);
  const auto b = run(xp, g2);
  EXPECT_EQ(a, b);
  for (int t = 0; t < frames; ++t)
    for (int i = 0; i < 18; ++i)
      EXPECT_EQ(g2.data[t * 18 + i], g1.data[perm[t] * 18 + i]);
}

TEST(BatchNorm, TrainingUpdatesRunningStatsWithMomentum) {
  Graph<double> g;
  const NodeId x = g.leaf(Tensor<double>({1, 1, 2, 1}, {1.0, 3.0}));
  const NodeId gamma = g.leaf(Tensor<double>({1, 1, 1, 1}, 1.0));
  const NodeId beta = g.leaf(Tensor<double>({1, 1, 1, 1}, 0.0));
  const NodeId rm = g.leaf(Tensor<double>({1, 1, 1, 1}, 0.0), false);
  const NodeId rv = g.leaf(Tensor<double>({1, 1, 1, 1}, 1.0), false);
  const NodeId y = g.batch_norm(x, gamma, beta, rm, rv, true);
  EXPECT_NEAR(g.value(rm).data[0], 0.1 * 2.0, 1e-15);
  EXPECT_NEAR(g.value(rv).data[0], 0.9 + 0.1 * 2.0, 1e-15);  // unbiased var 2
  EXPECT_NEAR(g.value(y).data[0], -1.0 / std::sqrt(1.0 + 1e-5), 1e-12);
}

}  // namespace
}  // namespace mfsr
