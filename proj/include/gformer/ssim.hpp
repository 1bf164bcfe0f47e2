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

#include <vector>

#include "gformer/tensor.hpp"

namespace gformer {

// Structural similarity with a Gaussian window evaluated over the valid
// region (no padding). Inputs of any rank >= 2 are treated as a stack of
// planes over the last two axes; the result is the mean over every local
// window of every plane. When a plane is smaller than the window, the window
// shrinks to the largest odd size that fits.
struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

std::vector<double> gaussian_window(int size, double sigma);
int effective_window(const SsimOptions& options, int64_t height, int64_t width);

template <typename T>
double ssim(const Tensor<T>& x, const Tensor<T>& y, const SsimOptions& options);

// Gradient of upstream * mean_ssim(x, y) with respect to both inputs.
template <typename T>
struct SsimGradient {
  double value = 0.0;
  Tensor<T> dx;
  Tensor<T> dy;
};

template <typename T>
SsimGradient<T> ssim_backward(const Tensor<T>& x, const Tensor<T>& y, const SsimOptions& options,
                              double upstream);

}  // namespace gformer
