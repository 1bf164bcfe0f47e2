// ----------------------------------------------------------------------------
// Copyright 2026 The Gformer Dose Simulation Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ----------------------------------------------------------------------------

#include "gformer/kernels.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace gformer::kernels {

namespace {

void require_rank4(const Shape& s, const char* what) {
  if (s.size() != 4) throw ValidationError(std::string(what) + ": expected rank-4 map, got " + shape_str(s));
}

}  // namespace

template <typename T>
Tensor<T> subsample(const Tensor<T>& map, int64_t stride) {
  require_rank4(map.shape(), "subsample");
  const int64_t b = map.dim(0), c = map.dim(1), h = map.dim(2), w = map.dim(3);
  if (stride < 1 || h % stride != 0 || w % stride != 0) {
    throw ValidationError("subsample: stride " + std::to_string(stride) + " does not divide " +
                          std::to_string(h) + "x" + std::to_string(w));
  }
  const int64_t hs = h / stride, ws = w / stride;
  Tensor<T> out({b * stride * stride, c, hs, ws});
  for (int64_t i = 0; i < stride; ++i) {
    for (int64_t j = 0; j < stride; ++j) {
      const int64_t s = i * stride + j;
      for (int64_t n = 0; n < b; ++n) {
        for (int64_t ch = 0; ch < c; ++ch) {
          for (int64_t y = 0; y < hs; ++y) {
            const T* src = &map.at(n, ch, y * stride + i, 0);
            T* dst = &out.at(s * b + n, ch, y, 0);
            for (int64_t x = 0; x < ws; ++x) dst[x] = src[x * stride + j];
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> inverse_subsample(const Tensor<T>& stacked, int64_t stride, int64_t height,
                            int64_t width) {
  require_rank4(stacked.shape(), "inverse_subsample");
  const int64_t bs = stacked.dim(0), c = stacked.dim(1);
  if (stride < 1 || bs % (stride * stride) != 0 || stacked.dim(2) * stride != height ||
      stacked.dim(3) * stride != width) {
    throw ValidationError("inverse_subsample: inconsistent shape " + shape_str(stacked.shape()) +
                          " for stride " + std::to_string(stride) + " and " +
                          std::to_string(height) + "x" + std::to_string(width));
  }
  const int64_t b = bs / (stride * stride), hs = stacked.dim(2), ws = stacked.dim(3);
  Tensor<T> out({b, c, height, width});
  for (int64_t i = 0; i < stride; ++i) {
    for (int64_t j = 0; j < stride; ++j) {
      const int64_t s = i * stride + j;
      for (int64_t n = 0; n < b; ++n) {
        for (int64_t ch = 0; ch < c; ++ch) {
          for (int64_t y = 0; y < hs; ++y) {
            const T* src = &stacked.at(s * b + n, ch, y, 0);
            T* dst = &out.at(n, ch, y * stride + i, 0);
            for (int64_t x = 0; x < ws; ++x) dst[x * stride + j] = src[x];
          }
        }
      }
    }
  }
  return out;
}

RotationTable make_rotation_table(int64_t height, int64_t width, double degrees) {
  RotationTable table{height, width, degrees, {}};
  table.source.assign(static_cast<size_t>(height * width), -1);
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const int64_t ch = height / 2, cw = width / 2;
  // Row index plays the role of x, column index of y.
  for (int64_t x = 0; x < height; ++x) {
    for (int64_t y = 0; y < width; ++y) {
      const double rx = static_cast<double>(x - ch);
      const double ry = static_cast<double>(y - cw);
      const double sx = cs * rx - sn * ry + static_cast<double>(ch);
      const double sy = sn * rx + cs * ry + static_cast<double>(cw);
      if (sx >= 0.0 && sx < static_cast<double>(height) && sy >= 0.0 &&
          sy < static_cast<double>(width)) {
        const auto fx = static_cast<int64_t>(std::floor(sx));
        const auto fy = static_cast<int64_t>(std::floor(sy));
        table.source[static_cast<size_t>(x * width + y)] = static_cast<int32_t>(fx * width + fy);
      }
    }
  }
  return table;
}

template <typename T>
Tensor<T> gather_planes(const Tensor<T>& map, const RotationTable& table) {
  require_rank4(map.shape(), "rotational_shift");
  if (map.dim(2) != table.height || map.dim(3) != table.width) {
    throw ValidationError("rotational_shift: table does not match map " + shape_str(map.shape()));
  }
  const int64_t planes = map.dim(0) * map.dim(1), hw = table.height * table.width;
  Tensor<T> out(map.shape());
  for (int64_t p = 0; p < planes; ++p) {
    const T* src = map.data() + p * hw;
    T* dst = out.data() + p * hw;
    for (int64_t k = 0; k < hw; ++k) {
      const int32_t s = table.source[static_cast<size_t>(k)];
      dst[k] = s >= 0 ? src[s] : T(0);
    }
  }
  return out;
}

template <typename T>
Tensor<T> scatter_planes(const Tensor<T>& grad, const RotationTable& table) {
  require_rank4(grad.shape(), "rotational_shift backward");
  const int64_t planes = grad.dim(0) * grad.dim(1), hw = table.height * table.width;
  Tensor<T> out(grad.shape());
  for (int64_t p = 0; p < planes; ++p) {
    const T* g = grad.data() + p * hw;
    T* dst = out.data() + p * hw;
    for (int64_t k = 0; k < hw; ++k) {
      const int32_t s = table.source[static_cast<size_t>(k)];
      if (s >= 0) dst[s] += g[k];
    }
  }
  return out;
}

template <typename T>
Tensor<T> rotational_shift(const Tensor<T>& map, double degrees) {
  require_rank4(map.shape(), "rotational_shift");
  if (degrees == 0.0) return map;
  return gather_planes(map, make_rotation_table(map.dim(2), map.dim(3), degrees));
}

template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& map, int64_t dy, int64_t dx) {
  require_rank4(map.shape(), "cyclic_shift");
  const int64_t h = map.dim(2), w = map.dim(3), planes = map.dim(0) * map.dim(1);
  const int64_t oy = ((dy % h) + h) % h, ox = ((dx % w) + w) % w;
  Tensor<T> out(map.shape());
  for (int64_t p = 0; p < planes; ++p) {
    const T* src = map.data() + p * h * w;
    T* dst = out.data() + p * h * w;
    for (int64_t y = 0; y < h; ++y) {
      const int64_t ty = (y + oy) % h;
      for (int64_t x = 0; x < w; ++x) dst[ty * w + (x + ox) % w] = src[y * w + x];
    }
  }
  return out;
}

#define GFORMER_INSTANTIATE(T)                                                             \
  template Tensor<T> subsample(const Tensor<T>&, int64_t);                                 \
  template Tensor<T> inverse_subsample(const Tensor<T>&, int64_t, int64_t, int64_t);       \
  template Tensor<T> rotational_shift(const Tensor<T>&, double);                           \
  template Tensor<T> gather_planes(const Tensor<T>&, const RotationTable&);                \
  template Tensor<T> scatter_planes(const Tensor<T>&, const RotationTable&);               \
  template Tensor<T> cyclic_shift(const Tensor<T>&, int64_t, int64_t);

GFORMER_INSTANTIATE(float)
GFORMER_INSTANTIATE(double)
#undef GFORMER_INSTANTIATE

}  // namespace gformer::kernels
