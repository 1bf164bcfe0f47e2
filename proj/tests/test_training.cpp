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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "gformer/gradcheck.hpp"
#include "gformer/metrics.hpp"
#include "gformer/ops.hpp"
#include "gformer/phantom.hpp"
#include "gformer/training.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace tr = gformer::train;
namespace nn = gformer::nn;
namespace ops = gformer::ops;
namespace fs = std::filesystem;
using gformer::Tensor;
using gformer::ad::Var;

namespace {

nn::ModelConfig tiny_config() { return nn::ModelConfig::standard(2, 8, 2, {2, 4}, {0, 10}); }

// Small phantom dataset shared by the training tests.
const gformer::io::DatasetManifest& tiny_dataset() {
  static const gformer::io::DatasetManifest m = [] {
    gformer::phantom::PhantomConfig c;
    c.size = 16;
    c.slices = 4;
    c.seed = 3;
    c.test_fraction = 0.25;
    const fs::path dir = fs::temp_directory_path() / "gformer_test_train_data";
    fs::remove_all(dir);
    return gformer::phantom::generate_dataset(c, 4, dir);
  }();
  return m;
}

tr::TrainingConfig short_config() {
  tr::TrainingConfig c;
  c.iterations = 3;
  c.lr = 1e-3;
  c.clip_norm = 0.25;
  c.epochs = 100;
  c.max_steps = 80;
  c.batch = 2;
  c.ssim_window = 7;
  return c;
}

}  // namespace

TEST(SoftLabels, Coefficients) {
  EXPECT_NEAR(tr::soft_label_coefficient(1, 9, 0.1), 0.9, 1e-12);
  EXPECT_NEAR(tr::soft_label_coefficient(8, 9, 0.1), 0.2, 1e-12);
  const auto d = tr::nominal_doses(4, 0.1);
  ASSERT_EQ(d.size(), 4u);
  EXPECT_NEAR(d[0], 0.775, 1e-12);
  EXPECT_NEAR(d[1], 0.55, 1e-12);
  EXPECT_NEAR(d[2], 0.325, 1e-12);
  EXPECT_NEAR(d[3], 0.1, 1e-12);
  EXPECT_THROW(tr::soft_label_coefficient(9, 9, 0.1), gformer::ValidationError);
  EXPECT_THROW(tr::soft_label_coefficient(0, 9, 0.1), gformer::ValidationError);
}

TEST(SoftLabels, UptakeExample) {
  Tensor<float> pre({1, 3}, {1.0f, 1.0f, 1.0f}), post({1, 3}, {1.3f, 1.05f, 0.5f});
  const auto u = tr::compute_uptake(post, pre, 0.1);
  EXPECT_NEAR(u[0], 0.2, 1e-6);
  EXPECT_EQ(u[1], 0.0f);
  EXPECT_EQ(u[2], 0.0f);
}

TEST(SoftLabels, PhantomRecoversEnhancement) {
  gformer::phantom::PhantomConfig c;
  c.size = 32;
  c.slices = 4;
  c.exponent = 1.0;
  c.noise_sigma = 0.0;
  c.lesions_min = 2;
  const auto s = gformer::phantom::generate_phantom(c, 11);
  const auto post = gformer::phantom::render_dose(s, 1.0, 0);
  const auto low = gformer::phantom::render_dose(s, 0.1, 0);
  const gformer::Shape shape{32, 32, 4};
  const Tensor<float> pre_t(shape, s.pre.data), post_t(shape, post.data), mask_t(shape, s.mask.data);
  const auto u = tr::compute_uptake(tr::apply_mask(post_t, mask_t), tr::apply_mask(pre_t, mask_t), 0.0);
  for (int64_t i = 0; i < u.numel(); ++i) EXPECT_NEAR(u[i], s.enhancement.data[static_cast<size_t>(i)], 1e-6);
  const auto base = tr::scaling_baseline(pre_t, post_t, mask_t, 0.1, 0.0);
  for (int64_t i = 0; i < base.numel(); ++i) EXPECT_NEAR(base[i], low.data[static_cast<size_t>(i)], 1e-6);
}

TEST(Iterate, IdentityAndHalving) {
  auto pre = gformer::test::random_tensor<double>({1, 1, 4, 4}, 1, 0, 1);
  auto post = gformer::test::random_tensor<double>({1, 1, 4, 4}, 2, 1, 2);
  tr::StepModel<double> identity = [](const Var<double>& p, const Var<double>&) { return p; };
  const auto same = tr::iterate_model<double>(Var<double>(post), Var<double>(pre), 5, identity);
  ASSERT_EQ(same.size(), 5u);
  for (const auto& p : same) EXPECT_EQ(p.value(), post);

  tr::StepModel<double> half = [](const Var<double>& p, const Var<double>& q) {
    return ops::add(q, ops::scale(ops::sub(p, q), 0.5));
  };
  Var<double> post_v(post, true);
  const auto series = tr::iterate_model<double>(post_v, Var<double>(pre), 3, half);
  for (size_t i = 0; i < series.size(); ++i) {
    const double f = std::pow(0.5, static_cast<double>(i + 1));
    for (int64_t j = 0; j < post.numel(); ++j) EXPECT_NEAR(series[i].value()[j], pre[j] + f * (post[j] - pre[j]), 1e-12);
  }
  gformer::ad::backward(ops::mean(series.back()));
  EXPECT_NEAR(post_v.grad()[0], 0.125 / 16.0, 1e-12);

  Var<double> post_t(post, true);
  const auto cut = tr::iterate_model<double>(post_t, Var<double>(pre), 3, half, 1);
  gformer::ad::backward(ops::mean(cut.back()));
  EXPECT_EQ(post_t.grad_or_zeros()[0], 0.0);
}

TEST(Loss, ZeroAndRecomposition) {
  auto low = gformer::test::random_tensor<double>({2, 1, 16, 16}, 3, 0, 1);
  std::vector<Var<double>> labels, series;
  for (int i = 0; i < 2; ++i) labels.emplace_back(gformer::test::random_tensor<double>({2, 1, 16, 16}, 4 + i, 0, 1));
  series = labels;
  series.emplace_back(low);
  gformer::SsimOptions opt;
  opt.dynamic_range = 1.0;
  const auto zero = tr::total_loss<double>(series, labels, Var<double>(low), 0.1, 1.0, opt);
  EXPECT_NEAR(zero.breakdown.total, 0.0, 1e-12);

  for (auto& s : series) s = Var<double>(gformer::test::random_tensor<double>({2, 1, 16, 16}, 10 + series.size(), 0, 1));
  series[0] = Var<double>(gformer::test::random_tensor<double>({2, 1, 16, 16}, 20, 0, 1));
  series[1] = Var<double>(gformer::test::random_tensor<double>({2, 1, 16, 16}, 21, 0, 1));
  series[2] = Var<double>(gformer::test::random_tensor<double>({2, 1, 16, 16}, 22, 0, 1));
  const auto r = tr::total_loss<double>(series, labels, Var<double>(low), 0.3, 0.7, opt);
  double expect = 0.7 * (r.breakdown.final_l1 + r.breakdown.final_ssim_loss);
  for (size_t i = 0; i < 2; ++i) expect += 0.3 * (r.breakdown.l1[i] + r.breakdown.ssim_loss[i]);
  EXPECT_NEAR(r.breakdown.total, expect, 1e-12);
  EXPECT_NEAR(r.breakdown.final_l1,
              gformer::test::l1_oracle(gformer::test::to_double(series[2].value().vec()), gformer::test::to_double(low.vec())),
              1e-12);

  const auto only_final = tr::total_loss<double>(series, labels, Var<double>(low), 0.0, 1.0, opt);
  EXPECT_NEAR(only_final.breakdown.total, only_final.breakdown.final_l1 + only_final.breakdown.final_ssim_loss, 1e-12);
  EXPECT_EQ(only_final.breakdown.l1.size(), 2u);
  EXPECT_THROW(tr::total_loss<double>(series, {labels[0]}, Var<double>(low), 0.1, 1.0, opt), gformer::ValidationError);
}

TEST(Loss, L1Example) {
  Var<double> a(Tensor<double>({1, 4}, {0, 0, 0, 0})), b(Tensor<double>({1, 4}, {1, -1, 0.5, 0.5}));
  EXPECT_DOUBLE_EQ(ops::l1_loss(a, b).item(), 0.75);
}

TEST(Optimizer, ZeroLearningRateKeepsParams) {
  auto params = nn::init_params<float>(tiny_config(), 5, 0.1);
  const auto before = params.cast<float>();
  for (auto& [name, v] : params.entries()) {
    auto g = gformer::test::random_tensor<float>(v.shape(), 9);
    v.node()->grad = g;
  }
  tr::Adam adam(0.0);
  adam.step(params);
  for (size_t i = 0; i < params.entries().size(); ++i) {
    EXPECT_EQ(params.entries()[i].second.value(), before.entries()[i].second.value());
  }
  EXPECT_EQ(adam.steps(), 1);
}

TEST(Optimizer, ClipScalesGlobalNorm) {
  auto params = nn::init_params<float>(tiny_config(), 5, 0.1);
  for (auto& [name, v] : params.entries()) v.node()->grad = Tensor<float>(v.shape(), 1.0f);
  const double before = tr::clip_gradients(params, 0.5);
  EXPECT_NEAR(before, std::sqrt(static_cast<double>(params.parameter_count())), 1e-3);
  EXPECT_NEAR(tr::clip_gradients(params, 0.0), 0.5, 1e-5);
}

TEST(Gradcheck, LinearStub) {
  auto w = Var<double>(Tensor<double>({1, 1, 1, 1}, {0.7}), true);
  auto pre = gformer::test::random_tensor<double>({1, 1, 12, 12}, 1, 0.5, 1.0);
  auto post = gformer::test::random_tensor<double>({1, 1, 12, 12}, 2, 1.0, 2.0);
  auto low = gformer::test::random_tensor<double>({1, 1, 12, 12}, 3, 0.5, 1.5);
  tr::StepModel<double> model = [&](const Var<double>& p, const Var<double>& q) {
    return ops::add(q, ops::conv2d(ops::sub(p, q), w, Var<double>()));
  };
  gformer::SsimOptions opt;
  opt.dynamic_range = 2.0;
  opt.window = 7;
  std::vector<Var<double>> labels{Var<double>(pre), Var<double>(pre)};
  auto loss = [&] {
    auto s = tr::iterate_model<double>(Var<double>(post), Var<double>(pre), 3, model);
    return tr::total_loss<double>(s, labels, Var<double>(low), 0.1, 1.0, opt).total;
  };
  tr::GradcheckOptions go;
  go.step = 1e-5;
  const auto report = tr::gradcheck(loss, {{"w", w}}, go);
  EXPECT_LT(report.max_rel_error, 1e-8);
}

TEST(Gradcheck, FullModelThroughLoss) {
  const auto cfg = tiny_config();
  auto params = nn::init_params<double>(cfg, 7, 0.1);
  auto pre = gformer::test::random_tensor<double>({1, 1, 16, 16}, 1, 0.5, 1.0);
  auto post = gformer::test::random_tensor<double>({1, 1, 16, 16}, 2, 1.0, 2.0);
  auto low = gformer::test::random_tensor<double>({1, 1, 16, 16}, 3, 0.5, 1.5);
  const auto u = tr::compute_uptake(post, pre, 0.1);
  std::vector<Var<double>> labels;
  for (int64_t i = 1; i < 3; ++i) labels.emplace_back(tr::soft_label(i, 3, 0.1, pre, u));
  gformer::SsimOptions opt;
  opt.dynamic_range = 2.0;
  opt.window = 7;
  const auto step = tr::gformer_step<double>(cfg, params);
  auto loss = [&] {
    auto s = tr::iterate_model<double>(Var<double>(post), Var<double>(pre), 3, step);
    return tr::total_loss<double>(s, labels, Var<double>(low), 0.1, 1.0, opt).total;
  };
  tr::NamedVars vars;
  for (auto& [name, v] : params.entries()) vars.emplace_back(name, v);
  tr::GradcheckOptions go;
  go.max_entries_per_tensor = 6;
  go.step = 1e-5;  // 1e-4 is dominated by truncation error and L1 kinks
  const auto report = tr::gradcheck(loss, vars, go);
  EXPECT_LT(report.max_rel_error, 1e-3) << report.worst_group;
}

TEST(Train, LossDecreasesAndDeterministic) {
  const auto& m = tiny_dataset();
  const auto cfg = tiny_config();
  const auto tc = short_config();
  const auto a = tr::train(m, cfg, tc);
  EXPECT_EQ(a.steps, 80);
  ASSERT_GE(a.log.size(), 2u);
  EXPECT_TRUE(a.log.back().val_psnr.has_value());

  // Loss on one fixed training batch, before and after.
  const auto samples = tr::load_slices(m, "train", 2, true);
  std::vector<size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  const auto b = tr::make_batch(samples, idx);
  auto eval = [&](nn::ModelParams<float> p) {
    p.set_requires_grad(false);
    const auto u = tr::compute_uptake(tr::apply_mask(b.post, b.mask), tr::apply_mask(b.pre, b.mask), tc.tau);
    std::vector<Var<float>> labels;
    for (int64_t i = 1; i < tc.iterations; ++i) labels.emplace_back(tr::soft_label(i, tc.iterations, tc.gamma, b.pre, u));
    const auto s = tr::iterate_model<float>(Var<float>(b.post), Var<float>(b.pre), tc.iterations,
                                            tr::gformer_step<float>(cfg, p));
    const double range = gformer::metrics::percentile(b.low.span(), 99.9);
    return tr::total_loss<float>(s, labels, Var<float>(b.low), tc.alpha, tc.beta, tc.ssim_options(range)).breakdown.total;
  };
  const double before = eval(nn::init_params<float>(cfg, tc.seed, tc.head_init_scale));
  const double after = eval(a.params.cast<float>());
  EXPECT_LT(after, before);

  const auto again = tr::train(m, cfg, tc);
  for (size_t i = 0; i < a.params.entries().size(); ++i) {
    EXPECT_EQ(a.params.entries()[i].second.value(), again.params.entries()[i].second.value());
  }
  ASSERT_EQ(a.log.size(), again.log.size());
  for (size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].total, again.log[i].total);
}

TEST(Train, EmptyDatasetRejected) {
  gformer::io::DatasetManifest empty;
  EXPECT_THROW(tr::train(empty, tiny_config(), short_config()), gformer::ValidationError);
  auto bad = short_config();
  bad.auxiliary_weight = 0.5;
  EXPECT_THROW(tr::train(tiny_dataset(), tiny_config(), bad), gformer::ValidationError);
}

TEST(Simulate, ZeroHeadIsIdentity) {
  const auto cfg = tiny_config();
  auto params = nn::init_params<float>(cfg, 1, 0.0);
  auto pre = gformer::test::random_tensor<float>({1, 1, 16, 16}, 1, 0.5, 1.0);
  auto post = gformer::test::random_tensor<float>({1, 1, 16, 16}, 2, 1.0, 2.0);
  const auto out = tr::simulate(cfg, params, post, pre, 4);
  ASSERT_EQ(out.size(), 4u);
  for (const auto& o : out) EXPECT_EQ(o, post);
}
