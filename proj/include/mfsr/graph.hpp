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

// Reverse-mode differentiation over dense NHWC tensors.
//
// A Graph owns its nodes; node ids are indices and parents always precede
// children, so creation order is a topological order. Every node stores its
// forward value and a gradient buffer of the same shape that starts at zero.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "mfsr/kernels.hpp"
#include "mfsr/tensor.hpp"

namespace mfsr {

enum class PrimitiveTag {
  conv2d,
  transposed_conv2d,
  depthwise_conv1d_time,
  pointwise_conv,
  batch_norm,
  relu,
  sigmoid,
  add,
  mean_over_time,
  bilinear_resize,
  crop,
  concat_channels,
};

inline constexpr PrimitiveTag kAllPrimitives[] = {
    PrimitiveTag::conv2d,          PrimitiveTag::transposed_conv2d,
    PrimitiveTag::depthwise_conv1d_time, PrimitiveTag::pointwise_conv,
    PrimitiveTag::batch_norm,      PrimitiveTag::relu,
    PrimitiveTag::sigmoid,         PrimitiveTag::add,
    PrimitiveTag::mean_over_time,  PrimitiveTag::bilinear_resize,
    PrimitiveTag::crop,            PrimitiveTag::concat_channels,
};

inline std::string_view to_string(PrimitiveTag tag) {
  switch (tag) {
    case PrimitiveTag::conv2d: return "conv2d";
    case PrimitiveTag::transposed_conv2d: return "transposed_conv2d";
    case PrimitiveTag::depthwise_conv1d_time: return "depthwise_conv1d_time";
    case PrimitiveTag::pointwise_conv: return "pointwise_conv";
    case PrimitiveTag::batch_norm: return "batch_norm";
    case PrimitiveTag::relu: return "relu";
    case PrimitiveTag::sigmoid: return "sigmoid";
    case PrimitiveTag::add: return "add";
    case PrimitiveTag::mean_over_time: return "mean_over_time";
    case PrimitiveTag::bilinear_resize: return "bilinear_resize";
    case PrimitiveTag::crop: return "crop";
    case PrimitiveTag::concat_channels: return "concat_channels";
  }
  return "?";
}

enum class Precision { f32, f64 };

class AttrError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using AttrValue = std::variant<std::int64_t, double>;
using Attrs = std::map<std::string, AttrValue>;
using NodeId = std::size_t;

// Node kinds outside the model primitive set: graph leaves and the scalar
// reductions used to form training objectives and test roots.
enum class Op {
  leaf,
  primitive,
  weighted_sum,
  square,
  external_scalar,
};

template <typename T>
struct Node {
  Op op = Op::leaf;
  PrimitiveTag tag = PrimitiveTag::add;
  std::vector<NodeId> parents;
  Attrs attrs;
  Tensor<T> value;
  Tensor<T> grad;
  bool needs_grad = false;
  std::vector<T> saved;  // per-op cache (batch-norm statistics, weights)
};

template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  NodeId leaf(Tensor<T> value, bool requires_grad = true) {
    Node<T> n;
    n.op = Op::leaf;
    n.grad = Tensor<T>(value.shape);
    n.value = std::move(value);
    n.needs_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }
  Tensor<T>& mutable_value(NodeId id) { return nodes_.at(id).value; }
  const Tensor<T>& grad(NodeId id) const { return nodes_.at(id).grad; }
  const Node<T>& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  // Generic entry point; validates attribute names and operand shapes.
  NodeId apply(PrimitiveTag tag, std::span<const NodeId> inputs,
               const Attrs& attrs = {});

  // Typed conveniences over apply().
  NodeId conv2d(NodeId x, NodeId w, std::optional<NodeId> b, int stride = 1) {
    return apply_with_bias(PrimitiveTag::conv2d, x, w, b,
                           {{"stride", std::int64_t{stride}}});
  }
  NodeId transposed_conv2d(NodeId x, NodeId w, std::optional<NodeId> b,
                           int stride = 2) {
    return apply_with_bias(PrimitiveTag::transposed_conv2d, x, w, b,
                           {{"stride", std::int64_t{stride}}});
  }
  NodeId depthwise_conv1d_time(NodeId x, NodeId w, std::optional<NodeId> b,
                               int frames) {
    return apply_with_bias(PrimitiveTag::depthwise_conv1d_time, x, w, b,
                           {{"frames", std::int64_t{frames}}});
  }
  NodeId pointwise_conv(NodeId x, NodeId w, std::optional<NodeId> b) {
    return apply_with_bias(PrimitiveTag::pointwise_conv, x, w, b, {});
  }
  NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, NodeId running_mean,
                    NodeId running_var, bool training, double momentum = 0.9,
                    double eps = 1e-5) {
    const NodeId in[] = {x, gamma, beta, running_mean, running_var};
    return apply(PrimitiveTag::batch_norm, in,
                 {{"training", std::int64_t{training ? 1 : 0}},
                  {"momentum", momentum},
                  {"eps", eps}});
  }
  NodeId relu(NodeId x) { return unary(PrimitiveTag::relu, x); }
  NodeId sigmoid(NodeId x) { return unary(PrimitiveTag::sigmoid, x); }
  NodeId add(NodeId a, NodeId b) {
    const NodeId in[] = {a, b};
    return apply(PrimitiveTag::add, in);
  }
  NodeId mean_over_time(NodeId x, int frames) {
    const NodeId in[] = {x};
    return apply(PrimitiveTag::mean_over_time, in,
                 {{"frames", std::int64_t{frames}}});
  }
  NodeId bilinear_resize(NodeId x, int height, int width) {
    const NodeId in[] = {x};
    return apply(PrimitiveTag::bilinear_resize, in,
                 {{"height", std::int64_t{height}},
                  {"width", std::int64_t{width}}});
  }
  NodeId crop(NodeId x, int top, int left, int height, int width) {
    const NodeId in[] = {x};
    return apply(PrimitiveTag::crop, in,
                 {{"top", std::int64_t{top}},
                  {"left", std::int64_t{left}},
                  {"height", std::int64_t{height}},
                  {"width", std::int64_t{width}}});
  }
  NodeId concat_channels(std::span<const NodeId> xs) {
    return apply(PrimitiveTag::concat_channels, xs);
  }

  // Scalar sum(x) or sum(x * weights) with constant weights.
  NodeId sum(NodeId x, const std::vector<T>* weights = nullptr);
  NodeId square(NodeId x);
  // A scalar computed outside the graph from x's value, with its gradient
  // with respect to x supplied by the caller.
  NodeId external_scalar(NodeId x, T value, std::vector<T> dvalue_dx);

  // Accumulates d(root)/d(node) into every node reachable from root.
  void backprop(NodeId root);
  void zero_grad() {
    for (auto& n : nodes_) n.grad.fill(T(0));
  }

 private:
  NodeId unary(PrimitiveTag tag, NodeId x) {
    const NodeId in[] = {x};
    return apply(tag, in);
  }
  NodeId apply_with_bias(PrimitiveTag tag, NodeId x, NodeId w,
                         std::optional<NodeId> b, Attrs attrs) {
    std::vector<NodeId> in{x, w};
    if (b) in.push_back(*b);
    return apply(tag, in, attrs);
  }

  NodeId push(PrimitiveTag tag, std::vector<NodeId> parents, Attrs attrs,
              Tensor<T> value, std::vector<T> saved = {}) {
    Node<T> n;
    n.op = Op::primitive;
    n.tag = tag;
    n.needs_grad = std::any_of(parents.begin(), parents.end(), [&](NodeId p) {
      return nodes_[p].needs_grad;
    });
    n.parents = std::move(parents);
    n.attrs = std::move(attrs);
    n.grad = Tensor<T>(value.shape);
    n.value = std::move(value);
    n.saved = std::move(saved);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  void check_node(NodeId id) const {
    if (id >= nodes_.size()) {
      throw GraphError("unknown node id " + std::to_string(id));
    }
  }

  void backward(NodeId id);

  std::vector<Node<T>> nodes_;
};

namespace detail {

inline const std::vector<std::string>& allowed_attrs(PrimitiveTag tag) {
  static const std::vector<std::string> none{};
  static const std::vector<std::string> stride{"stride"};
  static const std::vector<std::string> frames{"frames"};
  static const std::vector<std::string> bn{"training", "momentum", "eps"};
  static const std::vector<std::string> resize{"height", "width"};
  static const std::vector<std::string> crop{"top", "left", "height", "width"};
  switch (tag) {
    case PrimitiveTag::conv2d:
    case PrimitiveTag::transposed_conv2d: return stride;
    case PrimitiveTag::depthwise_conv1d_time:
    case PrimitiveTag::mean_over_time: return frames;
    case PrimitiveTag::batch_norm: return bn;
    case PrimitiveTag::bilinear_resize: return resize;
    case PrimitiveTag::crop: return crop;
    default: return none;
  }
}

inline std::int64_t int_attr(const Attrs& attrs, const std::string& name,
                             std::optional<std::int64_t> fallback,
                             PrimitiveTag tag) {
  auto it = attrs.find(name);
  if (it == attrs.end()) {
    if (fallback) return *fallback;
    throw AttrError(std::string(to_string(tag)) + ": missing attribute '" +
                    name + "'");
  }
  if (auto* v = std::get_if<std::int64_t>(&it->second)) return *v;
  throw AttrError(std::string(to_string(tag)) + ": attribute '" + name +
                  "' must be an integer");
}

inline double real_attr(const Attrs& attrs, const std::string& name,
                        double fallback) {
  auto it = attrs.find(name);
  if (it == attrs.end()) return fallback;
  if (auto* v = std::get_if<double>(&it->second)) return *v;
  return static_cast<double>(std::get<std::int64_t>(it->second));
}

[[noreturn]] inline void shape_fail(PrimitiveTag tag, const std::string& what) {
  throw ShapeError(std::string(to_string(tag)) + ": " + what);
}

inline void expect_dim(PrimitiveTag tag, const char* dim, int got, int want) {
  if (got != want) {
    shape_fail(tag, std::string("dimension '") + dim + "' is " +
                        std::to_string(got) + ", expected " +
                        std::to_string(want));
  }
}

}  // namespace detail

template <typename T>
NodeId Graph<T>::apply(PrimitiveTag tag, std::span<const NodeId> inputs,
                       const Attrs& attrs) {
  using namespace detail;
  namespace k = kernels;
  for (NodeId id : inputs) check_node(id);
  const auto& allowed = allowed_attrs(tag);
  for (const auto& [name, _] : attrs) {
    if (std::find(allowed.begin(), allowed.end(), name) == allowed.end()) {
      throw AttrError(std::string(to_string(tag)) + ": unknown attribute '" +
                      name + "'");
    }
  }
  auto arity = [&](std::size_t lo, std::size_t hi) {
    if (inputs.size() < lo || inputs.size() > hi) {
      shape_fail(tag, "expected " + std::to_string(lo) + ".." +
                          std::to_string(hi) + " inputs, got " +
                          std::to_string(inputs.size()));
    }
  };
  std::vector<NodeId> parents(inputs.begin(), inputs.end());

  switch (tag) {
    case PrimitiveTag::conv2d: {
      arity(2, 3);
      const auto& x = value(inputs[0]);
      const auto& w = value(inputs[1]);
      const int stride = static_cast<int>(int_attr(attrs, "stride", 1, tag));
      if (stride < 1) shape_fail(tag, "stride must be >= 1");
      // Weight layout (k, k, ci, co) stored with n=k, h=k, w=ci, c=co.
      const int kk = w.shape.n;
      expect_dim(tag, "kernel_w", w.shape.h, kk);
      expect_dim(tag, "in_channels", x.shape.c, w.shape.w);
      if (inputs.size() == 3) {
        expect_dim(tag, "bias", static_cast<int>(value(inputs[2]).size()),
                   w.shape.c);
      }
      const auto gy = k::same_geometry(x.shape.h, kk, stride);
      const auto gx = k::same_geometry(x.shape.w, kk, stride);
      const int co = w.shape.c;
      Tensor<T> out({x.shape.n, gy.out, gx.out, co});
      std::vector<T> cols;
      k::im2col(x, kk, stride, gy, gx, cols);
      const auto rows = static_cast<Eigen::Index>(out.size() / co);
      const auto inner = static_cast<Eigen::Index>(kk) * kk * x.shape.c;
      k::MatMap<T> o(out.data.data(), rows, co);
      k::batched_gemm(cols.data(), w.data.data(), out.data.data(), x.shape.n, rows, inner, co);
      if (inputs.size() == 3) {
        const auto& b = value(inputs[2]);
        for (Eigen::Index r = 0; r < rows; ++r)
          for (int c = 0; c < co; ++c) o(r, c) += b.data[c];
      }
      Attrs a = attrs;
      a["stride"] = std::int64_t{stride};
      return push(tag, std::move(parents), std::move(a), std::move(out));
    }

    case PrimitiveTag::transposed_conv2d: {
      arity(2, 3);
      const auto& x = value(inputs[0]);
      const auto& w = value(inputs[1]);
      const int stride = static_cast<int>(int_attr(attrs, "stride", 2, tag));
      if (stride < 1) shape_fail(tag, "stride must be >= 1");
      // Weight layout (ci, k, k, co).
      expect_dim(tag, "in_channels", x.shape.c, w.shape.n);
      expect_dim(tag, "kernel_w", w.shape.w, w.shape.h);
      const int kk = w.shape.h;
      const int co = w.shape.c;
      if (inputs.size() == 3) {
        expect_dim(tag, "bias", static_cast<int>(value(inputs[2]).size()), co);
      }
      Tensor<T> out({x.shape.n, x.shape.h * stride, x.shape.w * stride, co});
      const auto rows = static_cast<Eigen::Index>(x.size() / x.shape.c);
      const auto patch = static_cast<Eigen::Index>(kk) * kk * co;
      std::vector<T> patches(static_cast<std::size_t>(rows * patch));
      k::batched_gemm(x.data.data(), w.data.data(), patches.data(), x.shape.n, rows,
                      x.shape.c, patch);
      k::patch_scatter_add(patches, x.shape.h, x.shape.w, kk, stride, out);
      if (inputs.size() == 3) {
        const auto& b = value(inputs[2]);
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.data[i % co];
      }
      Attrs a = attrs;
      a["stride"] = std::int64_t{stride};
      return push(tag, std::move(parents), std::move(a), std::move(out));
    }

    case PrimitiveTag::depthwise_conv1d_time: {
      arity(2, 3);
      const auto& x = value(inputs[0]);
      const auto& w = value(inputs[1]);
      const int frames = static_cast<int>(int_attr(attrs, "frames", {}, tag));
      if (frames < 1 || x.shape.n % frames != 0) {
        shape_fail(tag, "dimension 'batch' (" + std::to_string(x.shape.n) +
                            ") is not a multiple of frames " +
                            std::to_string(frames));
      }
      // Weight layout (slot, source frame, 1, c); bias (slot, 1, 1, c).
      expect_dim(tag, "weight_slots", w.shape.n, frames);
      expect_dim(tag, "weight_frames", w.shape.h, frames);
      expect_dim(tag, "weight_width", w.shape.w, 1);
      expect_dim(tag, "channels", w.shape.c, x.shape.c);
      if (inputs.size() == 3) {
        const auto& b = value(inputs[2]);
        expect_dim(tag, "bias_slots", b.shape.n, frames);
        expect_dim(tag, "bias_channels", b.shape.c, x.shape.c);
      }
      Tensor<T> out(x.shape);
      const int c = x.shape.c;
      const std::size_t plane = static_cast<std::size_t>(x.shape.h) * x.shape.w;
      const int batches = x.shape.n / frames;
      for (int b = 0; b < batches; ++b) {
        for (int m = 0; m < frames; ++m) {
          T* dst = &out.at(b * frames + m, 0, 0, 0);
          for (int t = 0; t < frames; ++t) {
            const T* src = &x.at(b * frames + t, 0, 0, 0);
            const T* wk = &w.at(m, t, 0, 0);
            for (std::size_t p = 0; p < plane; ++p)
              for (int ch = 0; ch < c; ++ch)
                dst[p * c + ch] += wk[ch] * src[p * c + ch];
          }
          if (inputs.size() == 3) {
            const T* bk = &value(inputs[2]).at(m, 0, 0, 0);
            for (std::size_t p = 0; p < plane; ++p)
              for (int ch = 0; ch < c; ++ch) dst[p * c + ch] += bk[ch];
          }
        }
      }
      return push(tag, std::move(parents), attrs, std::move(out));
    }

    case PrimitiveTag::pointwise_conv: {
      arity(2, 3);
      const auto& x = value(inputs[0]);
      const auto& w = value(inputs[1]);
      expect_dim(tag, "kernel_h", w.shape.n, 1);
      expect_dim(tag, "kernel_w", w.shape.h, 1);
      expect_dim(tag, "in_channels", x.shape.c, w.shape.w);
      const int co = w.shape.c;
      if (inputs.size() == 3) {
        expect_dim(tag, "bias", static_cast<int>(value(inputs[2]).size()), co);
      }
      Tensor<T> out({x.shape.n, x.shape.h, x.shape.w, co});
      const auto rows = static_cast<Eigen::Index>(x.size() / x.shape.c);
      k::MatMap<T> o(out.data.data(), rows, co);
      k::batched_gemm(x.data.data(), w.data.data(), out.data.data(), x.shape.n, rows,
                      x.shape.c, co);
      if (inputs.size() == 3) {
        const auto& b = value(inputs[2]);
        for (Eigen::Index r = 0; r < rows; ++r)
          for (int ch = 0; ch < co; ++ch) o(r, ch) += b.data[ch];
      }
      return push(tag, std::move(parents), attrs, std::move(out));
    }

    case PrimitiveTag::batch_norm: {
      arity(5, 5);
      const auto& x = value(inputs[0]);
      const int c = x.shape.c;
      static const char* names[] = {"gamma", "beta", "running_mean",
                                    "running_var"};
      for (int i = 1; i < 5; ++i) {
        expect_dim(tag, names[i - 1], static_cast<int>(value(inputs[i]).size()),
                   c);
      }
      const bool training = int_attr(attrs, "training", 1, tag) != 0;
      const double momentum = real_attr(attrs, "momentum", 0.9);
      const double eps = real_attr(attrs, "eps", 1e-5);
      const std::size_t count = x.size() / c;
      std::vector<T> saved(2 * static_cast<std::size_t>(c));  // mean, invstd
      if (training) {
        std::vector<double> mean(c, 0.0), var(c, 0.0);
        for (std::size_t i = 0; i < x.size(); ++i) mean[i % c] += x.data[i];
        for (int ch = 0; ch < c; ++ch) mean[ch] /= static_cast<double>(count);
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double d = x.data[i] - mean[i % c];
          var[i % c] += d * d;
        }
        auto& rm = nodes_[inputs[3]].value;
        auto& rv = nodes_[inputs[4]].value;
        for (int ch = 0; ch < c; ++ch) {
          const double v = var[ch] / static_cast<double>(count);
          const double unbiased =
              count > 1 ? var[ch] / static_cast<double>(count - 1) : v;
          saved[ch] = static_cast<T>(mean[ch]);
          saved[c + ch] = static_cast<T>(1.0 / std::sqrt(v + eps));
          rm.data[ch] = static_cast<T>(momentum * rm.data[ch] +
                                       (1.0 - momentum) * mean[ch]);
          rv.data[ch] = static_cast<T>(momentum * rv.data[ch] +
                                       (1.0 - momentum) * unbiased);
        }
      } else {
        const auto& rm = value(inputs[3]);
        const auto& rv = value(inputs[4]);
        for (int ch = 0; ch < c; ++ch) {
          saved[ch] = rm.data[ch];
          saved[c + ch] = static_cast<T>(
              1.0 / std::sqrt(static_cast<double>(rv.data[ch]) + eps));
        }
      }
      const auto& gamma = value(inputs[1]);
      const auto& beta = value(inputs[2]);
      Tensor<T> out(x.shape);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t ch = i % c;
        out.data[i] = gamma.data[ch] * (x.data[i] - saved[ch]) * saved[c + ch] +
                      beta.data[ch];
      }
      Attrs a = attrs;
      a["training"] = std::int64_t{training ? 1 : 0};
      return push(tag, std::move(parents), std::move(a), std::move(out),
                  std::move(saved));
    }

    case PrimitiveTag::relu:
    case PrimitiveTag::sigmoid: {
      arity(1, 1);
      Tensor<T> out = value(inputs[0]);
      if (tag == PrimitiveTag::relu) {
        for (auto& v : out.data) v = v > T(0) ? v : T(0);
      } else {
        for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
      }
      return push(tag, std::move(parents), attrs, std::move(out));
    }

    case PrimitiveTag::add: {
      arity(2, 2);
      const auto& a = value(inputs[0]);
      const auto& b = value(inputs[1]);
      expect_dim(tag, "batch", b.shape.n, a.shape.n);
      expect_dim(tag, "height", b.shape.h, a.shape.h);
      expect_dim(tag, "width", b.shape.w, a.shape.w);
      expect_dim(tag, "channels", b.shape.c, a.shape.c);
      Tensor<T> out = a;
      for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.data[i];
      return push(tag, std::move(parents), attrs, std::move(out));
    }

    case PrimitiveTag::mean_over_time: {
      arity(1, 1);
      const auto& x = value(inputs[0]);
      const int frames = static_cast<int>(int_attr(attrs, "frames", {}, tag));
      if (frames < 1 || x.shape.n % frames != 0) {
        shape_fail(tag, "dimension 'batch' (" + std::to_string(x.shape.n) +
                            ") is not a multiple of frames " +
                            std::to_string(frames));
      }
      const int batches = x.shape.n / frames;
      Tensor<T> out({batches, x.shape.h, x.shape.w, x.shape.c});
      const std::size_t per = out.size() / batches;
      std::vector<T> buf(frames);
      // Summing in sorted order makes the result exactly independent of
      // frame order.
      for (int b = 0; b < batches; ++b) {
        for (std::size_t i = 0; i < per; ++i) {
          for (int t = 0; t < frames; ++t)
            buf[t] = x.data[(static_cast<std::size_t>(b) * frames + t) * per + i];
          std::sort(buf.begin(), buf.end());
          T s = T(0);
          for (T v : buf) s += v;
          out.data[b * per + i] = s / static_cast<T>(frames);
        }
      }
      return push(tag, std::move(parents), attrs, std::move(out));
    }

    case PrimitiveTag::bilinear_resize: {
      arity(1, 1);
      const auto& x = value(inputs[0]);
      const int oh = static_cast<int>(int_attr(attrs, "height", {}, tag));
      const int ow = static_cast<int>(int_attr(attrs, "width", {}, tag));
      if (oh < 1 || ow < 1) shape_fail(tag, "dimension 'height/width' must be positive");
      const auto ty = k::linear_taps(x.shape.h, oh);
      const auto tx = k::linear_taps(x.shape.w, ow);
      Tensor<T> out({x.shape.n, oh, ow, x.shape.c});
      for (int n = 0; n < x.shape.n; ++n)
        for (int y = 0; y < oh; ++y)
          for (int xx = 0; xx < ow; ++xx) {
            const auto& a = ty[y];
            const auto& b = tx[xx];
            const T w00 = static_cast<T>((1 - a.w1) * (1 - b.w1));
            const T w01 = static_cast<T>((1 - a.w1) * b.w1);
            const T w10 = static_cast<T>(a.w1 * (1 - b.w1));
            const T w11 = static_cast<T>(a.w1 * b.w1);
            for (int ch = 0; ch < x.shape.c; ++ch) {
              out.at(n, y, xx, ch) = w00 * x.at(n, a.i0, b.i0, ch) +
                                     w01 * x.at(n, a.i0, b.i1, ch) +
                                     w10 * x.at(n, a.i1, b.i0, ch) +
                                     w11 * x.at(n, a.i1, b.i1, ch);
            }
          }
      return push(tag, std::move(parents), attrs, std::move(out));
    }

    case PrimitiveTag::crop: {
      arity(1, 1);
      const auto& x = value(inputs[0]);
      const int top = static_cast<int>(int_attr(attrs, "top", {}, tag));
      const int left = static_cast<int>(int_attr(attrs, "left", {}, tag));
      const int h = static_cast<int>(int_attr(attrs, "height", {}, tag));
      const int w = static_cast<int>(int_attr(attrs, "width", {}, tag));
      if (top < 0 || h < 1 || top + h > x.shape.h) {
        shape_fail(tag, "dimension 'height': window [" + std::to_string(top) +
                            "," + std::to_string(top + h) + ") exceeds " +
                            std::to_string(x.shape.h));
      }
      if (left < 0 || w < 1 || left + w > x.shape.w) {
        shape_fail(tag, "dimension 'width': window [" + std::to_string(left) +
                            "," + std::to_string(left + w) + ") exceeds " +
                            std::to_string(x.shape.w));
      }
      Tensor<T> out({x.shape.n, h, w, x.shape.c});
      for (int n = 0; n < x.shape.n; ++n)
        for (int y = 0; y < h; ++y)
          std::copy_n(&x.at(n, top + y, left, 0),
                      static_cast<std::size_t>(w) * x.shape.c,
                      &out.at(n, y, 0, 0));
      return push(tag, std::move(parents), attrs, std::move(out));
    }

    case PrimitiveTag::concat_channels: {
      arity(1, 64);
      const auto& first = value(inputs[0]);
      int total = 0;
      for (NodeId id : inputs) {
        const auto& v = value(id);
        expect_dim(tag, "batch", v.shape.n, first.shape.n);
        expect_dim(tag, "height", v.shape.h, first.shape.h);
        expect_dim(tag, "width", v.shape.w, first.shape.w);
        total += v.shape.c;
      }
      Tensor<T> out({first.shape.n, first.shape.h, first.shape.w, total});
      const std::size_t pixels = out.size() / total;
      int offset = 0;
      for (NodeId id : inputs) {
        const auto& v = value(id);
        for (std::size_t p = 0; p < pixels; ++p)
          std::copy_n(v.data.data() + p * v.shape.c, v.shape.c,
                      out.data.data() + p * total + offset);
        offset += v.shape.c;
      }
      return push(tag, std::move(parents), attrs, std::move(out));
    }
  }
  throw GraphError("unhandled primitive");
}

template <typename T>
NodeId Graph<T>::sum(NodeId x, const std::vector<T>* weights) {
  check_node(x);
  const auto& v = value(x);
  if (weights && weights->size() != v.size()) {
    throw ShapeError("sum: weight count " + std::to_string(weights->size()) +
                     " does not match " + v.shape.str());
  }
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i)
    s += static_cast<double>(v.data[i]) * (weights ? (*weights)[i] : T(1));
  Node<T> n;
  n.op = Op::weighted_sum;
  n.parents = {x};
  n.needs_grad = nodes_[x].needs_grad;
  n.value = Tensor<T>(Shape{}, static_cast<T>(s));
  n.grad = Tensor<T>(Shape{});
  if (weights) n.saved = *weights;
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

template <typename T>
NodeId Graph<T>::square(NodeId x) {
  check_node(x);
  Node<T> n;
  n.op = Op::square;
  n.parents = {x};
  n.needs_grad = nodes_[x].needs_grad;
  n.value = value(x);
  for (auto& v : n.value.data) v *= v;
  n.grad = Tensor<T>(n.value.shape);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

template <typename T>
NodeId Graph<T>::external_scalar(NodeId x, T val, std::vector<T> dvalue_dx) {
  check_node(x);
  if (dvalue_dx.size() != value(x).size()) {
    throw ShapeError("external_scalar: gradient size does not match " +
                     value(x).shape.str());
  }
  Node<T> n;
  n.op = Op::external_scalar;
  n.parents = {x};
  n.needs_grad = nodes_[x].needs_grad;
  n.value = Tensor<T>(Shape{}, val);
  n.grad = Tensor<T>(Shape{});
  n.saved = std::move(dvalue_dx);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

template <typename T>
void Graph<T>::backprop(NodeId root) {
  check_node(root);
  if (nodes_[root].value.size() != 1) {
    throw GraphError("backprop: root must be scalar, got shape " +
                     nodes_[root].value.shape.str());
  }
  std::vector<char> reachable(root + 1, 0);
  reachable[root] = 1;
  for (NodeId id = root + 1; id-- > 0;) {
    if (!reachable[id]) continue;
    for (NodeId p : nodes_[id].parents) reachable[p] = 1;
  }
  nodes_[root].grad.data[0] += T(1);
  for (NodeId id = root + 1; id-- > 0;) {
    if (reachable[id] && nodes_[id].needs_grad && nodes_[id].op != Op::leaf) {
      backward(id);
    }
  }
}

template <typename T>
void Graph<T>::backward(NodeId id) {
  namespace k = kernels;
  Node<T>& node = nodes_[id];
  const Tensor<T>& dy = node.grad;
  auto parent = [&](std::size_t i) -> Node<T>& {
    return nodes_[node.parents[i]];
  };

  switch (node.op) {
    case Op::leaf: return;
    case Op::weighted_sum: {
      auto& p = parent(0);
      if (!p.needs_grad) return;
      const T g = dy.data[0];
      for (std::size_t i = 0; i < p.grad.size(); ++i)
        p.grad.data[i] += g * (node.saved.empty() ? T(1) : node.saved[i]);
      return;
    }
    case Op::square: {
      auto& p = parent(0);
      if (!p.needs_grad) return;
      for (std::size_t i = 0; i < p.grad.size(); ++i)
        p.grad.data[i] += T(2) * p.value.data[i] * dy.data[i];
      return;
    }
    case Op::external_scalar: {
      auto& p = parent(0);
      if (!p.needs_grad) return;
      const T g = dy.data[0];
      for (std::size_t i = 0; i < p.grad.size(); ++i)
        p.grad.data[i] += g * node.saved[i];
      return;
    }
    case Op::primitive: break;
  }

  switch (node.tag) {
    case PrimitiveTag::conv2d: {
      auto& xn = parent(0);
      auto& wn = parent(1);
      const int stride = static_cast<int>(std::get<std::int64_t>(node.attrs.at("stride")));
      const int kk = wn.value.shape.n;
      const int ci = xn.value.shape.c;
      const int co = wn.value.shape.c;
      const auto gy = k::same_geometry(xn.value.shape.h, kk, stride);
      const auto gx = k::same_geometry(xn.value.shape.w, kk, stride);
      const auto rows = static_cast<Eigen::Index>(dy.size() / co);
      const auto inner = static_cast<Eigen::Index>(kk) * kk * ci;
      k::ConstMatMap<T> g(dy.data.data(), rows, co);
      if (wn.needs_grad) {
        std::vector<T> cols;
        k::im2col(xn.value, kk, stride, gy, gx, cols);
        k::MatMap<T>(wn.grad.data.data(), inner, co).noalias() +=
            k::ConstMatMap<T>(cols.data(), rows, inner).transpose() * g;
      }
      if (node.parents.size() == 3 && parent(2).needs_grad) {
        auto& bg = parent(2).grad.data;
        for (Eigen::Index r = 0; r < rows; ++r)
          for (int c = 0; c < co; ++c) bg[c] += g(r, c);
      }
      if (xn.needs_grad) {
        std::vector<T> dcols(static_cast<std::size_t>(rows * inner));
        k::MatMap<T>(dcols.data(), rows, inner).noalias() =
            g * k::ConstMatMap<T>(wn.value.data.data(), inner, co).transpose();
        k::col2im_add(dcols, kk, stride, gy, gx, xn.grad);
      }
      return;
    }

    case PrimitiveTag::transposed_conv2d: {
      auto& xn = parent(0);
      auto& wn = parent(1);
      const int stride = static_cast<int>(std::get<std::int64_t>(node.attrs.at("stride")));
      const int kk = wn.value.shape.h;
      const int ci = xn.value.shape.c;
      const int co = wn.value.shape.c;
      const auto rows = static_cast<Eigen::Index>(xn.value.size() / ci);
      const auto patch = static_cast<Eigen::Index>(kk) * kk * co;
      std::vector<T> patches;
      k::patch_gather(dy, xn.value.shape.h, xn.value.shape.w, kk, stride,
                      patches);
      k::ConstMatMap<T> gp(patches.data(), rows, patch);
      if (wn.needs_grad) {
        k::MatMap<T>(wn.grad.data.data(), ci, patch).noalias() +=
            k::ConstMatMap<T>(xn.value.data.data(), rows, ci).transpose() * gp;
      }
      if (xn.needs_grad) {
        k::MatMap<T>(xn.grad.data.data(), rows, ci).noalias() +=
            gp * k::ConstMatMap<T>(wn.value.data.data(), ci, patch).transpose();
      }
      if (node.parents.size() == 3 && parent(2).needs_grad) {
        auto& bg = parent(2).grad.data;
        for (std::size_t i = 0; i < dy.size(); ++i) bg[i % co] += dy.data[i];
      }
      return;
    }

    case PrimitiveTag::depthwise_conv1d_time: {
      auto& xn = parent(0);
      auto& wn = parent(1);
      const int frames = static_cast<int>(std::get<std::int64_t>(node.attrs.at("frames")));
      const auto& x = xn.value;
      const int c = x.shape.c;
      const std::size_t plane = static_cast<std::size_t>(x.shape.h) * x.shape.w;
      const int batches = x.shape.n / frames;
      const bool has_bias = node.parents.size() == 3;
      for (int b = 0; b < batches; ++b) {
        for (int m = 0; m < frames; ++m) {
          const T* g = &dy.at(b * frames + m, 0, 0, 0);
          for (int t = 0; t < frames; ++t) {
            const T* src = &x.at(b * frames + t, 0, 0, 0);
            if (wn.needs_grad) {
              T* dw = &wn.grad.at(m, t, 0, 0);
              for (std::size_t p = 0; p < plane; ++p)
                for (int ch = 0; ch < c; ++ch) dw[ch] += g[p * c + ch] * src[p * c + ch];
            }
            if (xn.needs_grad) {
              T* dx = &xn.grad.at(b * frames + t, 0, 0, 0);
              const T* wk = &wn.value.at(m, t, 0, 0);
              for (std::size_t p = 0; p < plane; ++p)
                for (int ch = 0; ch < c; ++ch) dx[p * c + ch] += wk[ch] * g[p * c + ch];
            }
          }
          if (has_bias && parent(2).needs_grad) {
            T* db = &parent(2).grad.at(m, 0, 0, 0);
            for (std::size_t p = 0; p < plane; ++p)
              for (int ch = 0; ch < c; ++ch) db[ch] += g[p * c + ch];
          }
        }
      }
      return;
    }

    case PrimitiveTag::pointwise_conv: {
      auto& xn = parent(0);
      auto& wn = parent(1);
      const int ci = xn.value.shape.c;
      const int co = wn.value.shape.c;
      const auto rows = static_cast<Eigen::Index>(dy.size() / co);
      k::ConstMatMap<T> g(dy.data.data(), rows, co);
      if (wn.needs_grad) {
        k::MatMap<T>(wn.grad.data.data(), ci, co).noalias() +=
            k::ConstMatMap<T>(xn.value.data.data(), rows, ci).transpose() * g;
      }
      if (xn.needs_grad) {
        k::MatMap<T>(xn.grad.data.data(), rows, ci).noalias() +=
            g * k::ConstMatMap<T>(wn.value.data.data(), ci, co).transpose();
      }
      if (node.parents.size() == 3 && parent(2).needs_grad) {
        auto& bg = parent(2).grad.data;
        for (std::size_t i = 0; i < dy.size(); ++i) bg[i % co] += dy.data[i];
      }
      return;
    }

    case PrimitiveTag::batch_norm: {
      auto& xn = parent(0);
      const auto& x = xn.value;
      const int c = x.shape.c;
      const std::size_t count = x.size() / c;
      const bool training = std::get<std::int64_t>(node.attrs.at("training")) != 0;
      const auto& gamma = parent(1).value;
      const T* mean = node.saved.data();
      const T* invstd = node.saved.data() + c;
      std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t ch = i % c;
        const double xhat = (x.data[i] - mean[ch]) * invstd[ch];
        sum_dy[ch] += dy.data[i];
        sum_dy_xhat[ch] += dy.data[i] * xhat;
      }
      if (parent(1).needs_grad)
        for (int ch = 0; ch < c; ++ch) parent(1).grad.data[ch] += static_cast<T>(sum_dy_xhat[ch]);
      if (parent(2).needs_grad)
        for (int ch = 0; ch < c; ++ch) parent(2).grad.data[ch] += static_cast<T>(sum_dy[ch]);
      if (xn.needs_grad) {
        for (std::size_t i = 0; i < x.size(); ++i) {
          const std::size_t ch = i % c;
          const double scale = static_cast<double>(gamma.data[ch]) * invstd[ch];
          if (training) {
            const double xhat = (x.data[i] - mean[ch]) * invstd[ch];
            const double m = static_cast<double>(count);
            xn.grad.data[i] += static_cast<T>(
                scale * (dy.data[i] - sum_dy[ch] / m - xhat * sum_dy_xhat[ch] / m));
          } else {
            xn.grad.data[i] += static_cast<T>(scale * dy.data[i]);
          }
        }
      }
      return;
    }

    case PrimitiveTag::relu: {
      auto& p = parent(0);
      for (std::size_t i = 0; i < dy.size(); ++i)
        if (p.value.data[i] > T(0)) p.grad.data[i] += dy.data[i];
      return;
    }

    case PrimitiveTag::sigmoid: {
      auto& p = parent(0);
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const T s = node.value.data[i];
        p.grad.data[i] += dy.data[i] * s * (T(1) - s);
      }
      return;
    }

    case PrimitiveTag::add: {
      for (std::size_t j = 0; j < 2; ++j) {
        auto& p = parent(j);
        if (!p.needs_grad) continue;
        for (std::size_t i = 0; i < dy.size(); ++i) p.grad.data[i] += dy.data[i];
      }
      return;
    }

    case PrimitiveTag::mean_over_time: {
      auto& p = parent(0);
      const int frames = static_cast<int>(std::get<std::int64_t>(node.attrs.at("frames")));
      const std::size_t per = dy.size() / dy.shape.n;
      const T inv = T(1) / static_cast<T>(frames);
      for (int b = 0; b < dy.shape.n; ++b)
        for (int t = 0; t < frames; ++t)
          for (std::size_t i = 0; i < per; ++i)
            p.grad.data[(static_cast<std::size_t>(b) * frames + t) * per + i] +=
                dy.data[b * per + i] * inv;
      return;
    }

    case PrimitiveTag::bilinear_resize: {
      auto& p = parent(0);
      const auto ty = k::linear_taps(p.value.shape.h, dy.shape.h);
      const auto tx = k::linear_taps(p.value.shape.w, dy.shape.w);
      for (int n = 0; n < dy.shape.n; ++n)
        for (int y = 0; y < dy.shape.h; ++y)
          for (int xx = 0; xx < dy.shape.w; ++xx) {
            const auto& a = ty[y];
            const auto& b = tx[xx];
            const T w00 = static_cast<T>((1 - a.w1) * (1 - b.w1));
            const T w01 = static_cast<T>((1 - a.w1) * b.w1);
            const T w10 = static_cast<T>(a.w1 * (1 - b.w1));
            const T w11 = static_cast<T>(a.w1 * b.w1);
            for (int ch = 0; ch < dy.shape.c; ++ch) {
              const T g = dy.at(n, y, xx, ch);
              p.grad.at(n, a.i0, b.i0, ch) += w00 * g;
              p.grad.at(n, a.i0, b.i1, ch) += w01 * g;
              p.grad.at(n, a.i1, b.i0, ch) += w10 * g;
              p.grad.at(n, a.i1, b.i1, ch) += w11 * g;
            }
          }
      return;
    }

    case PrimitiveTag::crop: {
      auto& p = parent(0);
      const int top = static_cast<int>(std::get<std::int64_t>(node.attrs.at("top")));
      const int left = static_cast<int>(std::get<std::int64_t>(node.attrs.at("left")));
      for (int n = 0; n < dy.shape.n; ++n)
        for (int y = 0; y < dy.shape.h; ++y)
          for (int xx = 0; xx < dy.shape.w; ++xx)
            for (int ch = 0; ch < dy.shape.c; ++ch)
              p.grad.at(n, top + y, left + xx, ch) += dy.at(n, y, xx, ch);
      return;
    }

    case PrimitiveTag::concat_channels: {
      const int total = dy.shape.c;
      const std::size_t pixels = dy.size() / total;
      int offset = 0;
      for (std::size_t j = 0; j < node.parents.size(); ++j) {
        auto& p = parent(j);
        const int c = p.value.shape.c;
        if (p.needs_grad) {
          for (std::size_t px = 0; px < pixels; ++px)
            for (int ch = 0; ch < c; ++ch)
              p.grad.data[px * c + ch] += dy.data[px * total + offset + ch];
        }
        offset += c;
      }
      return;
    }
  }
}

}  // namespace mfsr
