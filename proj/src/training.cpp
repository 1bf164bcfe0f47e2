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

#include "gformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "gformer/metrics.hpp"
#include "gformer/ops.hpp"

namespace gformer::train {

void TrainingConfig::validate() const {
  if (iterations < 1) throw ValidationError("iterations k must be >= 1");
  if (!(gamma > 0.0 && gamma < 1.0)) throw ValidationError("gamma must lie in (0, 1)");
  if (!(tau >= 0.0)) throw ValidationError("tau must be >= 0");
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ValidationError("alpha and beta must be >= 0");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError("learning rate must be finite and >= 0");
  if (batch < 1) throw ValidationError("batch size must be >= 1");
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (max_steps < 0) throw ValidationError("max_steps must be >= 0");
  if (truncate < 0) throw ValidationError("truncate must be >= 0");
  if (ssim_window < 1 || ssim_window % 2 == 0) throw ValidationError("ssim window must be odd and positive");
  if (!(ssim_sigma > 0.0)) throw ValidationError("ssim sigma must be positive");
  if (auxiliary_weight != 0.0) throw ValidationError("adversarial/perceptual terms are not available");
  if (slice_axis < 0 || slice_axis > 2) throw ValidationError("slice axis must be 0, 1 or 2");
  if (log_every < 1) throw ValidationError("log_every must be >= 1");
  if (!(clip_norm >= 0.0)) throw ValidationError("clip norm must be >= 0");
  if (!(head_init_scale >= 0.0)) throw ValidationError("head init scale must be >= 0");
}

SsimOptions TrainingConfig::ssim_options(double dynamic_range) const {
  SsimOptions o;
  o.window = ssim_window;
  o.sigma = ssim_sigma;
  o.k1 = ssim_k1;
  o.k2 = ssim_k2;
  o.dynamic_range = dynamic_range;
  return o;
}

double soft_label_coefficient(int64_t i, int64_t k, double gamma) {
  if (k < 1) throw ValidationError("k must be >= 1");
  if (i < 1 || i > k - 1) {
    throw ValidationError("soft label index " + std::to_string(i) + " outside [1, " + std::to_string(k - 1) + "]");
  }
  return gamma + (1.0 - gamma) * static_cast<double>(k - i) / static_cast<double>(k);
}

std::vector<double> soft_label_coefficients(int64_t k, double gamma) {
  std::vector<double> c;
  for (int64_t i = 1; i < k; ++i) c.push_back(soft_label_coefficient(i, k, gamma));
  return c;
}

std::vector<double> nominal_doses(int64_t k, double gamma) {
  if (k < 1) throw ValidationError("k must be >= 1");
  std::vector<double> d;
  for (int64_t i = 1; i <= k; ++i) d.push_back(gamma + (1.0 - gamma) * static_cast<double>(k - i) / static_cast<double>(k));
  return d;
}

template <typename T>
Tensor<T> compute_uptake(const Tensor<T>& post_masked, const Tensor<T>& pre_masked, double tau) {
  require_same_shape(post_masked.shape(), pre_masked.shape(), "compute_uptake");
  Tensor<T> u(post_masked.shape());
  for (int64_t i = 0; i < u.numel(); ++i) {
    u[i] = std::max(T(0), static_cast<T>(post_masked[i] - pre_masked[i] - static_cast<T>(tau)));
  }
  return u;
}

template <typename T>
Tensor<T> apply_mask(const Tensor<T>& image, const Tensor<T>& mask) {
  require_same_shape(image.shape(), mask.shape(), "apply_mask");
  Tensor<T> out(image.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = image[i] * mask[i];
  return out;
}

template <typename T>
Tensor<T> soft_label(int64_t i, int64_t k, double gamma, const Tensor<T>& pre, const Tensor<T>& uptake) {
  require_same_shape(pre.shape(), uptake.shape(), "soft_label");
  const T c = static_cast<T>(soft_label_coefficient(i, k, gamma));
  Tensor<T> s(pre.shape());
  for (int64_t j = 0; j < s.numel(); ++j) s[j] = pre[j] + c * uptake[j];
  return s;
}

template <typename T>
Tensor<T> scaling_baseline(const Tensor<T>& pre, const Tensor<T>& post, const Tensor<T>& mask, double gamma,
                           double tau) {
  require_same_shape(pre.shape(), post.shape(), "scaling_baseline");
  const Tensor<T> u = compute_uptake(apply_mask(post, mask), apply_mask(pre, mask), tau);
  Tensor<T> out(pre.shape());
  for (int64_t j = 0; j < out.numel(); ++j) out[j] = pre[j] + static_cast<T>(gamma) * u[j];
  return out;
}

template <typename T>
std::vector<Var<T>> iterate_model(const Var<T>& post, const Var<T>& pre, int64_t k, const StepModel<T>& model,
                                  int64_t truncate) {
  if (k < 1) throw ValidationError("iterate_model: k must be >= 1");
  require_same_shape(post.shape(), pre.shape(), "iterate_model");
  std::vector<Var<T>> series;
  Var<T> prev = post;
  for (int64_t i = 1; i <= k; ++i) {
    if (truncate > 0 && i == k - truncate + 1 && i > 1) prev = ops::detach(prev);
    prev = model(prev, pre);
    series.push_back(prev);
  }
  return series;
}

template <typename T>
StepModel<T> gformer_step(const nn::ModelConfig& config, const nn::ModelParams<T>& params) {
  return [&config, &params](const Var<T>& previous, const Var<T>& pre) {
    return nn::base_model_forward(previous, pre, config, params);
  };
}

template <typename T>
LossResult<T> total_loss(const std::vector<Var<T>>& series, const std::vector<Var<T>>& labels, const Var<T>& low,
                         double alpha, double beta, const SsimOptions& ssim) {
  if (series.empty()) throw ValidationError("total_loss: empty series");
  if (labels.size() + 1 != series.size()) {
    throw ValidationError("total_loss: " + std::to_string(series.size()) + " predictions need " +
                          std::to_string(series.size() - 1) + " soft labels, got " + std::to_string(labels.size()));
  }
  const Var<T> one(Tensor<T>({1}, {T(1)}));
  LossResult<T> r;
  auto term = [&](const Var<T>& pred, const Var<T>& target, double& l1_out, double& ssim_out) {
    Var<T> l1 = ops::l1_loss(pred, target);
    Var<T> s = ops::sub(one, ops::ssim_index(pred, target, ssim));
    l1_out = static_cast<double>(l1.item());
    ssim_out = static_cast<double>(s.item());
    return ops::add(l1, s);
  };
  Var<T> total;
  if (alpha != 0.0) {
    for (size_t i = 0; i < labels.size(); ++i) {
      double a = 0, b = 0;
      Var<T> e = ops::scale(term(series[i], labels[i], a, b), static_cast<T>(alpha));
      r.breakdown.l1.push_back(a);
      r.breakdown.ssim_loss.push_back(b);
      total = total.defined() ? ops::add(total, e) : e;
    }
  } else {
    // Terms are still reported; they carry zero weight.
    for (size_t i = 0; i < labels.size(); ++i) {
      r.breakdown.l1.push_back(static_cast<double>(ops::l1_loss(ops::detach(series[i]), labels[i]).item()));
      r.breakdown.ssim_loss.push_back(1.0 - static_cast<double>(ops::ssim_index(ops::detach(series[i]), labels[i], ssim).item()));
    }
  }
  Var<T> fin = ops::scale(term(series.back(), low, r.breakdown.final_l1, r.breakdown.final_ssim_loss),
                          static_cast<T>(beta));
  total = total.defined() ? ops::add(total, fin) : fin;
  r.total = total;
  r.breakdown.total = static_cast<double>(total.item());
  return r;
}

double clip_gradients(nn::ModelParams<float>& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, v] : params.entries()) {
    if (!v.has_grad()) continue;
    for (float g : v.grad().vec()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto f = static_cast<float>(max_norm / norm);
    for (auto& [name, v] : params.entries()) {
      if (!v.has_grad()) continue;
      // grad() is const; the node owns the buffer.
      for (auto& g : v.node()->grad.vec()) g *= f;
    }
  }
  return norm;
}

void Adam::step(nn::ModelParams<float>& params) {
  auto& entries = params.entries();
  if (m_.empty()) {
    for (const auto& [name, v] : entries) {
      m_.emplace_back(v.shape());
      v_.emplace_back(v.shape());
    }
  }
  if (m_.size() != entries.size()) throw ValidationError("adam: parameter set changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (size_t p = 0; p < entries.size(); ++p) {
    auto& var = entries[p].second;
    if (!var.has_grad()) continue;
    const Tensor<float>& g = var.grad();
    Tensor<float>& w = var.mutable_value();
    float* m = m_[p].data();
    float* v = v_[p].data();
    for (int64_t i = 0; i < w.numel(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<float>(b1_ * m[i] + (1.0 - b1_) * gi);
      v[i] = static_cast<float>(b2_ * v[i] + (1.0 - b2_) * gi * gi);
      const double update = lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      w[i] = static_cast<float>(w[i] - update);
    }
  }
}

Batch make_batch(const std::vector<io::SliceSample>& samples, const std::vector<size_t>& indices) {
  if (indices.empty()) throw ValidationError("make_batch: empty batch");
  const auto& first = samples.at(indices.front());
  const int64_t h = first.height(), w = first.width(), n = static_cast<int64_t>(indices.size());
  Batch b{Tensor<float>({n, 1, h, w}), Tensor<float>({n, 1, h, w}), Tensor<float>({n, 1, h, w}),
          Tensor<float>({n, 1, h, w})};
  const int64_t plane = h * w;
  for (int64_t s = 0; s < n; ++s) {
    const auto& x = samples.at(indices[static_cast<size_t>(s)]);
    if (x.height() != h || x.width() != w) throw ValidationError("make_batch: slices differ in shape");
    if (!x.low) throw ValidationError("make_batch: slice of '" + x.case_id + "' has no low-dose image");
    std::copy_n(x.pre.data(), plane, b.pre.data() + s * plane);
    std::copy_n(x.low->data(), plane, b.low.data() + s * plane);
    std::copy_n(x.post.data(), plane, b.post.data() + s * plane);
    std::copy_n(x.mask.data(), plane, b.mask.data() + s * plane);
  }
  return b;
}

std::vector<io::SliceSample> load_slices(const io::DatasetManifest& manifest, const std::string& split, int axis,
                                         bool require_low) {
  std::vector<io::SliceSample> out;
  for (const auto* entry : manifest.split(split)) {
    if (require_low && !entry->low) continue;
    const auto study = io::load_study(*entry);
    io::SliceVolumes v{&study.pre, study.low ? &*study.low : nullptr, &study.post, &study.mask,
                       study.enhancement ? &*study.enhancement : nullptr};
    auto r = io::extract_slices(v, axis);
    for (auto& s : r.samples) out.push_back(std::move(s));
  }
  return out;
}

std::vector<Tensor<float>> simulate(const nn::ModelConfig& config, nn::ModelParams<float>& params,
                                    const Tensor<float>& post, const Tensor<float>& pre, int64_t k) {
  require_same_shape(post.shape(), pre.shape(), "simulate");
  if (post.rank() != 4 || post.dim(1) != 1) throw ValidationError("simulate: inputs must be (n, 1, h, w)");
  params.set_requires_grad(false);
  const int64_t n = post.dim(0), h = post.dim(2), w = post.dim(3), plane = h * w;
  constexpr int64_t kChunk = 8;
  std::vector<Tensor<float>> series(static_cast<size_t>(k), Tensor<float>(post.shape()));
  try {
    for (int64_t s0 = 0; s0 < n; s0 += kChunk) {
      const int64_t m = std::min(kChunk, n - s0);
      Tensor<float> a({m, 1, h, w}), b({m, 1, h, w});
      std::copy_n(post.data() + s0 * plane, m * plane, a.data());
      std::copy_n(pre.data() + s0 * plane, m * plane, b.data());
      auto out = iterate_model<float>(Var<float>(a), Var<float>(b), k, gformer_step<float>(config, params));
      for (int64_t i = 0; i < k; ++i) {
        std::copy_n(out[static_cast<size_t>(i)].value().data(), m * plane,
                    series[static_cast<size_t>(i)].data() + s0 * plane);
      }
    }
  } catch (...) {
    params.set_requires_grad(true);
    throw;
  }
  params.set_requires_grad(true);
  for (const auto& t : series) {
    if (!t.all_finite()) throw NumericalError("simulate: non-finite model output");
  }
  return series;
}

void write_log_csv(const std::vector<LogRow>& log, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << "epoch,step,l1,ssim_loss,total,val_psnr\n" << std::setprecision(9);
  for (const auto& r : log) {
    os << r.epoch << ',' << r.step << ',' << r.l1 << ',' << r.ssim_loss << ',' << r.total << ',';
    if (r.val_psnr) os << *r.val_psnr;
    os << '\n';
  }
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

namespace {

double validation_psnr(const nn::ModelConfig& mc, nn::ModelParams<float>& params, const Batch& val, int64_t k) {
  const auto series = simulate(mc, params, val.post, val.pre, k);
  const double peak = std::max(metrics::percentile(val.low.span(), 99.9), 1e-12);
  return metrics::psnr(series.back().span(), val.low.span(), peak);
}

}  // namespace

TrainResult train(const io::DatasetManifest& manifest, const nn::ModelConfig& model_config,
                  const TrainingConfig& config, const TrainOutputs& outputs) {
  config.validate();
  model_config.validate();
  const auto samples = load_slices(manifest, "train", config.slice_axis, true);
  if (samples.empty()) throw ValidationError("train: no training slices with pre/low/post");
  const int64_t stride = model_config.max_stride();
  for (const auto& s : samples) {
    if (s.height() % stride != 0 || s.width() % stride != 0) {
      throw ValidationError("train: slice " + std::to_string(s.height()) + "x" + std::to_string(s.width()) +
                            " of '" + s.case_id + "' not divisible by max stride " + std::to_string(stride));
    }
    if (s.height() != samples.front().height() || s.width() != samples.front().width()) {
      throw ValidationError("train: slices differ in shape");
    }
  }

  std::optional<Batch> val;
  {
    const auto vs = load_slices(manifest, "test", config.slice_axis, true);
    if (!vs.empty() && config.val_slices > 0) {
      std::vector<size_t> idx;
      const size_t take = std::min(vs.size(), static_cast<size_t>(config.val_slices));
      for (size_t i = 0; i < take; ++i) idx.push_back(i * vs.size() / take);
      if (vs.front().height() == samples.front().height() && vs.front().width() == samples.front().width()) {
        val = make_batch(vs, idx);
      }
    }
  }

  TrainResult result;
  result.params = nn::init_params<float>(model_config, config.seed, config.head_init_scale);
  Adam adam(config.lr);
  std::mt19937_64 rng(config.seed ^ 0x5eedf00dull);
  const int64_t k = config.iterations;
  const auto coeffs = soft_label_coefficients(k, config.gamma);
  const auto step_model = gformer_step<float>(model_config, result.params);

  std::vector<size_t> order(samples.size());
  int64_t step = 0;
  bool done = false;
  for (int64_t epoch = 1; epoch <= config.epochs && !done; ++epoch) {
    std::iota(order.begin(), order.end(), size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    LossBreakdown last;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch));
      const Batch b = make_batch(samples, {order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(end)});
      const auto uptake = compute_uptake(apply_mask(b.post, b.mask), apply_mask(b.pre, b.mask), config.tau);
      std::vector<Var<float>> labels;
      for (int64_t i = 1; i < k; ++i) labels.emplace_back(soft_label(i, k, config.gamma, b.pre, uptake));
      const Var<float> pre(b.pre), post(b.post), low(b.low);
      const auto series = iterate_model<float>(post, pre, k, step_model, config.truncate);
      const double range = std::max(metrics::percentile(b.low.span(), 99.9), 1e-6);
      auto loss = total_loss<float>(series, labels, low, config.alpha, config.beta, config.ssim_options(range));
      if (!std::isfinite(loss.breakdown.total)) {
        std::ostringstream os;
        os << "training diverged at epoch " << epoch << " step " << step + 1 << ": total=" << loss.breakdown.total
           << " final_l1=" << loss.breakdown.final_l1 << " final_ssim_loss=" << loss.breakdown.final_ssim_loss;
        throw NumericalError(os.str());
      }
      result.params.zero_grad();
      ad::backward(loss.total);
      if (config.clip_norm > 0.0) clip_gradients(result.params, config.clip_norm);
      adam.step(result.params);
      if (!result.params.all_finite()) {
        throw NumericalError("training diverged at step " + std::to_string(step + 1) + ": non-finite parameters");
      }
      ++step;
      last = loss.breakdown;
      const bool cap = config.max_steps > 0 && step >= config.max_steps;
      const bool epoch_end = end == order.size() || cap;
      if (step % config.log_every == 0 || step == 1 || epoch_end) {
        LogRow row{epoch, step, last.final_l1, last.final_ssim_loss, last.total, std::nullopt};
        if (epoch_end && val) row.val_psnr = validation_psnr(model_config, result.params, *val, k);
        if (outputs.verbose) {
          std::cerr << "epoch " << epoch << " step " << step << " total " << row.total << " final_l1 " << row.l1
                    << " final_ssim_loss " << row.ssim_loss;
          if (row.val_psnr) std::cerr << " val_psnr " << *row.val_psnr;
          std::cerr << '\n';
        }
        result.log.push_back(row);
      }
      if (cap) {
        done = true;
        break;
      }
    }
  }
  result.steps = step;
  if (!outputs.checkpoint.empty()) nn::write_checkpoint(outputs.checkpoint, model_config, result.params);
  if (!outputs.log_csv.empty()) write_log_csv(result.log, outputs.log_csv);
  return result;
}

#define GFORMER_INSTANTIATE(T)                                                                                \
  template Tensor<T> compute_uptake(const Tensor<T>&, const Tensor<T>&, double);                              \
  template Tensor<T> apply_mask(const Tensor<T>&, const Tensor<T>&);                                          \
  template Tensor<T> soft_label(int64_t, int64_t, double, const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> scaling_baseline(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double, double);  \
  template std::vector<Var<T>> iterate_model(const Var<T>&, const Var<T>&, int64_t, const StepModel<T>&,      \
                                             int64_t);                                                        \
  template StepModel<T> gformer_step(const nn::ModelConfig&, const nn::ModelParams<T>&);                      \
  template LossResult<T> total_loss(const std::vector<Var<T>>&, const std::vector<Var<T>>&, const Var<T>&,    \
                                    double, double, const SsimOptions&);

GFORMER_INSTANTIATE(float)
GFORMER_INSTANTIATE(double)
#undef GFORMER_INSTANTIATE

}  // namespace gformer::train
