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
#include <string>
#include <vector>

#include "gformer/autograd.hpp"
#include "gformer/model.hpp"
#include "gformer/ssim.hpp"
#include "gformer/volume_io.hpp"

namespace gformer::train {

using ad::Var;

struct TrainingConfig {
  int64_t iterations = 9;  // k
  double gamma = 0.1;
  double tau = 0.1;
  double alpha = 0.1;  // weight of the intermediate terms
  double beta = 1.0;   // weight of the final term
  double lr = 1e-5;
  int64_t batch = 4;
  int64_t epochs = 1;
  int64_t max_steps = 0;  // 0: no cap
  uint64_t seed = 0;
  bool deterministic = true;
  // Gradient flows through only the last `truncate` iterations; 0 = all.
  int64_t truncate = 0;
  int ssim_window = 11;
  double ssim_sigma = 1.5;
  double ssim_k1 = 0.01;
  double ssim_k2 = 0.03;
  // Reserved for adversarial / perceptual terms; must stay 0 here.
  double auxiliary_weight = 0.0;
  int slice_axis = 2;
  int64_t log_every = 10;
  int64_t val_slices = 16;  // validation PSNR uses at most this many test slices
  double head_init_scale = 0.0;  // output projection init; 0 starts F as the identity
  double clip_norm = 0.0;        // global gradient-norm clip; 0 = off

  void validate() const;
  SsimOptions ssim_options(double dynamic_range) const;
};

// c_i = gamma + (1 - gamma) (k - i) / k for i = 1..k-1.
double soft_label_coefficient(int64_t i, int64_t k, double gamma);
std::vector<double> soft_label_coefficients(int64_t k, double gamma);
// Nominal dose of P_1..P_k; the last is gamma.
std::vector<double> nominal_doses(int64_t k, double gamma);

template <typename T>
Tensor<T> compute_uptake(const Tensor<T>& post_masked, const Tensor<T>& pre_masked, double tau);
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& image, const Tensor<T>& mask);
template <typename T>
Tensor<T> soft_label(int64_t i, int64_t k, double gamma, const Tensor<T>& pre, const Tensor<T>& uptake);
template <typename T>
Tensor<T> scaling_baseline(const Tensor<T>& pre, const Tensor<T>& post, const Tensor<T>& mask, double gamma,
                           double tau);

// F(previous, pre) -> next lower-enhancement image.
template <typename T>
using StepModel = std::function<Var<T>(const Var<T>& previous, const Var<T>& pre)>;

// P_1 = F(post, pre), P_i = F(P_{i-1}, pre). With truncate > 0 the input of
// step k - truncate + 1 is detached.
template <typename T>
std::vector<Var<T>> iterate_model(const Var<T>& post, const Var<T>& pre, int64_t k, const StepModel<T>& model,
                                  int64_t truncate = 0);

template <typename T>
StepModel<T> gformer_step(const nn::ModelConfig& config, const nn::ModelParams<T>& params);

struct LossBreakdown {
  std::vector<double> l1;         // intermediate, i = 1..k-1
  std::vector<double> ssim_loss;  // 1 - SSIM, i = 1..k-1
  double final_l1 = 0.0;
  double final_ssim_loss = 0.0;
  double total = 0.0;
};

template <typename T>
struct LossResult {
  Var<T> total;
  LossBreakdown breakdown;
};

template <typename T>
LossResult<T> total_loss(const std::vector<Var<T>>& series, const std::vector<Var<T>>& labels, const Var<T>& low,
                         double alpha, double beta, const SsimOptions& ssim);

// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_gradients(nn::ModelParams<float>& params, double max_norm);

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}
  void step(nn::ModelParams<float>& params);
  int64_t steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
  std::vector<Tensor<float>> m_, v_;
};

struct LogRow {
  int64_t epoch = 0;
  int64_t step = 0;
  double l1 = 0.0;         // final-term L1
  double ssim_loss = 0.0;  // final-term 1 - SSIM
  double total = 0.0;
  std::optional<double> val_psnr;
};

// Stacked (n, 1, h, w) batch of slices.
struct Batch {
  Tensor<float> pre, low, post, mask;
};

Batch make_batch(const std::vector<io::SliceSample>& samples, const std::vector<size_t>& indices);

// All slices of the given split, jointly normalized per study.
std::vector<io::SliceSample> load_slices(const io::DatasetManifest& manifest, const std::string& split,
                                         int axis, bool require_low);

struct TrainOutputs {
  std::filesystem::path checkpoint;  // empty: not written
  std::filesystem::path log_csv;     // empty: not written
  bool verbose = false;
};

struct TrainResult {
  nn::ModelParams<float> params;
  std::vector<LogRow> log;  // one row per logged step plus one per epoch end
  int64_t steps = 0;
};

TrainResult train(const io::DatasetManifest& manifest, const nn::ModelConfig& model_config,
                  const TrainingConfig& config, const TrainOutputs& outputs = {});

// k-step inference without graph recording.
std::vector<Tensor<float>> simulate(const nn::ModelConfig& config, nn::ModelParams<float>& params,
                                    const Tensor<float>& post, const Tensor<float>& pre, int64_t k);

void write_log_csv(const std::vector<LogRow>& log, const std::filesystem::path& path);

}  // namespace gformer::train
