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

#pragma once

#include <cstdint>
#include <vector>

#include "gformer/tensor.hpp"

namespace gformer::kernels {

// Strided subsampling of a (b, c, h, w) map into d*d sub-maps stacked on the
// batch axis. Sub-map s = i*d + j holds M[:, :, i::d, j::d]; output batch
// index is s*b + n for input batch entry n. Requires d | h and d | w.
template <typename T>
Tensor<T> subsample(const Tensor<T>& map, int64_t stride);

// Exact inverse of subsample. Requires batch divisible by stride^2 and the
// stacked spatial extent to tile (height, width).
template <typename T>
Tensor<T> inverse_subsample(const Tensor<T>& stacked, int64_t stride, int64_t height,
                            int64_t width);

// Gather table for an in-plane rotation about (h//2, w//2) by `degrees`.
// source[y*w + x] is the flat source pixel index or -1 for zero fill.
struct RotationTable {
  int64_t height = 0;
  int64_t width = 0;
  double degrees = 0.0;
  std::vector<int32_t> source;
};

RotationTable make_rotation_table(int64_t height, int64_t width, double degrees);

// Rotational shift: output(x, y) = input(floor(x'), floor(y')) where (x', y')
// is (x, y) rotated about the centre, zero where the source falls outside.
template <typename T>
Tensor<T> rotational_shift(const Tensor<T>& map, double degrees);

template <typename T>
Tensor<T> gather_planes(const Tensor<T>& map, const RotationTable& table);

// Adjoint of gather_planes: scatter-add into the source positions.
template <typename T>
Tensor<T> scatter_planes(const Tensor<T>& grad, const RotationTable& table);

// Toroidal roll of the spatial axes: output(y, x) = input(y - dy, x - dx).
template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& map, int64_t dy, int64_t dx);

}  // namespace gformer::kernels
