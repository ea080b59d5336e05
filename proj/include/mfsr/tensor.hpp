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
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mfsr {

// Raised when operand extents do not fit an operation. The message always
// names the offending dimension.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Four extents in NHWC order. Convolution weights reuse the same struct as
// (kernel_h, kernel_w, in_channels, out_channels).
struct Shape {
  int n = 1;
  int h = 1;
  int w = 1;
  int c = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * h * w * c;
  }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << n << "x" << h << "x" << w << "x" << c;
    return os.str();
  }
};

template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(s), data(s.size(), fill) {}
  Tensor(Shape s, std::vector<T> values) : shape(s), data(std::move(values)) {
    if (data.size() != shape.size()) {
      throw ShapeError("tensor: value count " + std::to_string(data.size()) +
                       " does not match shape " + shape.str());
    }
  }

  std::size_t size() const { return data.size(); }

  std::size_t index(int n, int y, int x, int c) const {
    return ((static_cast<std::size_t>(n) * shape.h + y) * shape.w + x) *
               shape.c +
           c;
  }
  T& at(int n, int y, int x, int c) { return data[index(n, y, x, c)]; }
  const T& at(int n, int y, int x, int c) const {
    return data[index(n, y, x, c)];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    std::transform(data.begin(), data.end(), out.data.begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool operator==(const Tensor&) const = default;
};

// Single-channel raster, row major.
template <typename T>
struct Plane {
  int h = 0;
  int w = 0;
  std::vector<T> data;

  Plane() = default;
  Plane(int rows, int cols, T fill = T(0))
      : h(rows), w(cols), data(static_cast<std::size_t>(rows) * cols, fill) {}

  T& operator()(int y, int x) {
    return data[static_cast<std::size_t>(y) * w + x];
  }
  const T& operator()(int y, int x) const {
    return data[static_cast<std::size_t>(y) * w + x];
  }
  std::size_t size() const { return data.size(); }

  // Window [top, top+rows) x [left, left+cols); must lie inside.
  Plane window(int top, int left, int rows, int cols) const {
    if (top < 0 || left < 0 || top + rows > h || left + cols > w) {
      throw ShapeError("plane window out of range: rows [" +
                       std::to_string(top) + "," + std::to_string(top + rows) +
                       ") cols [" + std::to_string(left) + "," +
                       std::to_string(left + cols) + ") of " +
                       std::to_string(h) + "x" + std::to_string(w));
    }
    Plane out(rows, cols);
    for (int y = 0; y < rows; ++y) {
      std::copy_n(&(*this)(top + y, left), cols, &out(y, 0));
    }
    return out;
  }

  double sum() const {
    double s = 0.0;
    for (T v : data) s += static_cast<double>(v);
    return s;
  }

  bool operator==(const Plane&) const = default;
};

using Mask = Plane<std::uint8_t>;

}  // namespace mfsr
