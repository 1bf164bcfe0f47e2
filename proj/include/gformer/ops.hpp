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
#include <memory>

#include "gformer/autograd.hpp"
#include "gformer/kernels.hpp"
#include "gformer/ssim.hpp"

// Differentiable operators. Each records a closure that maps the output
// gradient onto its inputs; every backward is checked against central
// finite differences in the test suite.
namespace gformer::ops {

using ad::Var;

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);
template <typename T> Var<T> detach(const Var<T>& a);

// (b, c1, h, w) ++ (b, c2, h, w) -> (b, c1 + c2, h, w)
template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

// Gaussian error linear unit, exact erf form.
template <typename T> Var<T> gelu(const Var<T>& x);

// Square-kernel, stride-1, same-padding convolution on (b, c, h, w).
// weight is (c_out, c_in, k, k); bias (c_out) may be undefined.
template <typename T> Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// Per-sample, per-channel normalization over (h, w) with affine (c) params.
template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

// Normalization over the last axis with affine params of that length.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

// y = x W^T + b over the last axis; weight (c_out, c_in), bias (c_out).
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// (b, c, h, w) <-> (b, h*w, c)
template <typename T> Var<T> to_tokens(const Var<T>& x);
template <typename T> Var<T> from_tokens(const Var<T>& x, int64_t height, int64_t width);

template <typename T> Var<T> subsample(const Var<T>& x, int64_t stride);
template <typename T>
Var<T> inverse_subsample(const Var<T>& x, int64_t stride, int64_t height, int64_t width);
template <typename T> Var<T> rotational_shift(const Var<T>& x, double degrees);
template <typename T> Var<T> cyclic_shift(const Var<T>& x, int64_t dy, int64_t dx);

// Relative offsets between tokens of a (rows, cols) window, clipped to
// [-clip, clip] on each axis, flattened into a ((2*clip+1)^2) table index.
std::vector<int32_t> relative_position_index(int64_t rows, int64_t cols, int64_t clip);

// Multi-head scaled dot-product attention inside each window.
// qkv is (windows, rows*cols, 3c) laid out [q | k | v]; bias_table, if
// defined, is ((2*clip+1)^2, heads). Output is (windows, rows*cols, c).
template <typename T>
Var<T> window_attention_core(const Var<T>& qkv, int64_t heads, const Var<T>& bias_table,
                             int64_t rows, int64_t cols, int64_t clip);

// Softmax rows of the same attention, (windows, heads, n, n). Inspection only.
template <typename T>
Tensor<T> attention_probabilities(const Tensor<T>& qkv, int64_t heads, const Tensor<T>* bias_table,
                                  int64_t rows, int64_t cols, int64_t clip);

// Scalar reductions.
template <typename T> Var<T> mean(const Var<T>& x);
template <typename T> Var<T> sum_squares(const Var<T>& x);
template <typename T> Var<T> l1_loss(const Var<T>& x, const Var<T>& y);
template <typename T> Var<T> ssim_index(const Var<T>& x, const Var<T>& y, const SsimOptions& options);

}  // namespace gformer::ops
