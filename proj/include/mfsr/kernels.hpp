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

// Dense NHWC kernels shared by the graph primitives. Convolutions are lowered
// to im2col + GEMM; the GEMM is delegated to Eigen.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

#include "mfsr/tensor.hpp"

namespace mfsr::kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// "Same" padding geometry for a strided convolution along one axis.
// out = a * b, one product per batch image so that every image sees the same
// row blocking; results for an image do not depend on its batch position.
template <typename T>
void batched_gemm(const T* a, const T* b, T* out, int batch, Eigen::Index rows,
                  Eigen::Index inner, Eigen::Index cols) {
  const Eigen::Index per = rows / batch;
  const ConstMatMap<T> bm(b, inner, cols);
  for (int n = 0; n < batch; ++n) {
    MatMap<T>(out + n * per * cols, per, cols).noalias() =
        ConstMatMap<T>(a + n * per * inner, per, inner) * bm;
  }
}

struct SameGeometry {
  int out = 0;
  int pad_before = 0;
};

inline SameGeometry same_geometry(int in, int kernel, int stride) {
  SameGeometry g;
  g.out = (in + stride - 1) / stride;
  const int total = std::max((g.out - 1) * stride + kernel - in, 0);
  g.pad_before = total / 2;
  return g;
}

// Rows are output pixels (n, oy, ox); columns are (ky, kx, ci).
template <typename T>
void im2col(const Tensor<T>& x, int k, int stride, const SameGeometry& gy,
            const SameGeometry& gx, std::vector<T>& cols) {
  const int ci = x.shape.c;
  const std::size_t row_len = static_cast<std::size_t>(k) * k * ci;
  cols.assign(static_cast<std::size_t>(x.shape.n) * gy.out * gx.out * row_len,
              T(0));
  std::size_t row = 0;
  for (int n = 0; n < x.shape.n; ++n) {
    for (int oy = 0; oy < gy.out; ++oy) {
      for (int ox = 0; ox < gx.out; ++ox, ++row) {
        T* dst = cols.data() + row * row_len;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride + ky - gy.pad_before;
          if (iy < 0 || iy >= x.shape.h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride + kx - gx.pad_before;
            if (ix < 0 || ix >= x.shape.w) continue;
            std::copy_n(&x.at(n, iy, ix, 0), ci,
                        dst + (static_cast<std::size_t>(ky) * k + kx) * ci);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates column gradients into dx.
template <typename T>
void col2im_add(const std::vector<T>& cols, int k, int stride,
                const SameGeometry& gy, const SameGeometry& gx,
                Tensor<T>& dx) {
  const int ci = dx.shape.c;
  const std::size_t row_len = static_cast<std::size_t>(k) * k * ci;
  std::size_t row = 0;
  for (int n = 0; n < dx.shape.n; ++n) {
    for (int oy = 0; oy < gy.out; ++oy) {
      for (int ox = 0; ox < gx.out; ++ox, ++row) {
        const T* src = cols.data() + row * row_len;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride + ky - gy.pad_before;
          if (iy < 0 || iy >= dx.shape.h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride + kx - gx.pad_before;
            if (ix < 0 || ix >= dx.shape.w) continue;
            T* d = &dx.at(n, iy, ix, 0);
            const T* s = src + (static_cast<std::size_t>(ky) * k + kx) * ci;
            for (int c = 0; c < ci; ++c) d[c] += s[c];
          }
        }
      }
    }
  }
}

// Transposed convolution places input pixel i at output i*stride + k - pad.
inline int transposed_pad(int kernel, int stride) {
  return std::max(kernel - stride, 0) / 2;
}

// Scatter of per-input-pixel patches (rows (n, iy, ix), columns (ky, kx, co))
// into the upsampled output.
template <typename T>
void patch_scatter_add(const std::vector<T>& patches, int in_h, int in_w,
                       int k, int stride, Tensor<T>& out) {
  const int co = out.shape.c;
  const int pad = transposed_pad(k, stride);
  const std::size_t row_len = static_cast<std::size_t>(k) * k * co;
  std::size_t row = 0;
  for (int n = 0; n < out.shape.n; ++n) {
    for (int iy = 0; iy < in_h; ++iy) {
      for (int ix = 0; ix < in_w; ++ix, ++row) {
        const T* src = patches.data() + row * row_len;
        for (int ky = 0; ky < k; ++ky) {
          const int oy = iy * stride + ky - pad;
          if (oy < 0 || oy >= out.shape.h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ox = ix * stride + kx - pad;
            if (ox < 0 || ox >= out.shape.w) continue;
            T* d = &out.at(n, oy, ox, 0);
            const T* s = src + (static_cast<std::size_t>(ky) * k + kx) * co;
            for (int c = 0; c < co; ++c) d[c] += s[c];
          }
        }
      }
    }
  }
}

// Adjoint of patch_scatter_add.
template <typename T>
void patch_gather(const Tensor<T>& dy, int in_h, int in_w, int k, int stride,
                  std::vector<T>& patches) {
  const int co = dy.shape.c;
  const int pad = transposed_pad(k, stride);
  const std::size_t row_len = static_cast<std::size_t>(k) * k * co;
  patches.assign(static_cast<std::size_t>(dy.shape.n) * in_h * in_w * row_len,
                 T(0));
  std::size_t row = 0;
  for (int n = 0; n < dy.shape.n; ++n) {
    for (int iy = 0; iy < in_h; ++iy) {
      for (int ix = 0; ix < in_w; ++ix, ++row) {
        T* dst = patches.data() + row * row_len;
        for (int ky = 0; ky < k; ++ky) {
          const int oy = iy * stride + ky - pad;
          if (oy < 0 || oy >= dy.shape.h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ox = ix * stride + kx - pad;
            if (ox < 0 || ox >= dy.shape.w) continue;
            std::copy_n(&dy.at(n, oy, ox, 0), co,
                        dst + (static_cast<std::size_t>(ky) * k + kx) * co);
          }
        }
      }
    }
  }
}

// Half-pixel-centre bilinear sampling taps along one axis.
struct LinearTap {
  int i0 = 0;
  int i1 = 0;
  double w1 = 0.0;  // weight of i1; i0 gets 1 - w1
};

inline std::vector<LinearTap> linear_taps(int in, int out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace mfsr::kernels
