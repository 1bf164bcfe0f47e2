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
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gformer/tensor.hpp"

namespace gformer::metrics {

// q in [0, 100], linear interpolation between order statistics.
double percentile(std::span<const float> values, double q);

inline constexpr double kPsnrSentinel = 99.0;

double psnr(std::span<const float> x, std::span<const float> y, double peak);
double rmse(std::span<const float> x, std::span<const float> y);
double mse(std::span<const float> x, std::span<const float> y);

// SSIM of two (..., H, W) stacks; mean over planes. dynamic_range as given.
double ssim(const Tensor<float>& x, const Tensor<float>& y, double dynamic_range);

struct RoiSpec {
  std::vector<uint8_t> roi;         // uptake region
  std::vector<uint8_t> background;  // brain mask minus roi
  int64_t roi_count = 0;
  int64_t background_count = 0;
  bool empty_roi = true;
};

// ROI = ReLU(post*mask - pre*mask - tau) > 0; background = mask and not ROI.
RoiSpec make_roi(std::span<const float> pre, std::span<const float> post, std::span<const float> mask, double tau);

inline constexpr double kStdFloor = 1e-6;

double cnr(std::span<const float> image, const RoiSpec& roi);
double cbr(std::span<const float> image, const RoiSpec& roi);
double cep(std::span<const float> image, std::span<const float> pre, const RoiSpec& roi);

struct Throughput {
  double images_per_second = 0.0;
  double seconds = 0.0;
  int64_t images = 0;
  std::string environment;
};

std::string environment_descriptor();

// `run` processes `images_per_call` images; timed over n_timed calls after
// n_warmup untimed ones.
Throughput throughput(const std::function<void()>& run, int64_t images_per_call, int n_warmup, int n_timed);

struct MetricRow {
  std::string case_id;
  int64_t iteration = 0;
  double nominal_dose = 0.0;
  std::optional<double> psnr, ssim, rmse, cnr, cbr, cep;
};

// One case's series. All images are (slices, H, W) stacks of equal shape.
struct SeriesInput {
  std::string case_id;
  std::vector<Tensor<float>> predictions;  // ordered P_1 .. P_k
  std::vector<double> nominal_doses;
  Tensor<float> pre;
  Tensor<float> post;
  Tensor<float> mask;
  double tau = 0.1;
  // Reference image for a nominal dose; empty optional means unknown.
  std::function<std::optional<Tensor<float>>(double)> reference;
};

std::vector<MetricRow> evaluate_series(const SeriesInput& input);

// Footer rows with case_id "mean" and "std" (population) per iteration.
std::vector<MetricRow> aggregate(const std::vector<MetricRow>& rows);

void write_report_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& path);

// One SVG line chart per metric: aggregate mean vs nominal dose. Points carry
// data-x / data-y attributes with the plotted values. Returns written paths.
std::vector<std::filesystem::path> write_metric_plots(const std::vector<MetricRow>& rows,
                                                      const std::filesystem::path& out_dir);

}  // namespace gformer::metrics
