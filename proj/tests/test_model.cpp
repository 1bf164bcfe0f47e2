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

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <random>

#include "gformer/gradcheck.hpp"
#include "gformer/model.hpp"
#include "test_util.hpp"

using gformer::Tensor;
using gformer::ad::Var;
namespace nn = gformer::nn;
namespace ops = gformer::ops;

namespace {

nn::ModelConfig tiny_config(int64_t blocks = 2, int64_t channels = 8, int64_t heads = 2) {
  return nn::ModelConfig::standard(blocks, channels, heads, {2, 4, 2}, {0, 10, 0});
}

void zero(Var<float>& v) { v.mutable_value().fill(0.0f); }

Var<double> head(const Var<double>& y, uint64_t seed) {
  Var<double> w(gformer::test::random_tensor<double>(y.shape(), seed));
  return ops::sum_squares(ops::add(y, w));
}

}  // namespace

TEST(ConvBlock, IdentityKernelWithBypass) {
  auto cfg = tiny_config();
  auto params = nn::init_params<float>(cfg, 1);
  auto bp = nn::block_params(params, 0);
  Tensor<float> w({8, 8, 3, 3});
  for (int64_t c = 0; c < 8; ++c) w.at(c, c, 1, 1) = 1.0f;
  bp.conv.weight = Var<float>(w, true);
  auto x = gformer::test::random_tensor<float>({2, 8, 8, 8}, 2);
  auto y = nn::conv_block(Var<float>(x), bp.conv, {.bypass_pointwise = true});
  EXPECT_EQ(y.value(), x);
}

TEST(ConvBlock, ZeroInputGivesActivatedShift) {
  auto params = nn::init_params<float>(tiny_config(), 3);
  auto bp = nn::block_params(params, 0);
  bp.conv.norm_beta = Var<float>(gformer::test::random_tensor<float>({8}, 4), true);
  auto y = nn::conv_block(Var<float>(Tensor<float>({1, 8, 4, 4})), bp.conv);
  for (int64_t c = 0; c < 8; ++c) {
    const float b = bp.conv.norm_beta.value()[c];
    const float expected = 0.5f * b * (1.0f + std::erf(b / std::sqrt(2.0f)));
    for (int64_t i = 0; i < 16; ++i) EXPECT_FLOAT_EQ(y.value()[c * 16 + i], expected);
  }
}

TEST(ConvBlock, RandomForwardIsFiniteAndShapePreserving) {
  auto params = nn::init_params<float>(tiny_config(), 5);
  auto x = gformer::test::random_tensor<float>({3, 8, 16, 16}, 6, -5, 5);
  auto y = nn::conv_block(Var<float>(x), nn::block_params(params, 1).conv);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_TRUE(y.value().all_finite());
}

TEST(WindowAttention, ZeroProjectionsAreIdentity) {
  auto params = nn::init_params<float>(tiny_config(), 7);
  auto bp = nn::block_params(params, 0);
  zero(bp.attn.proj_weight), zero(bp.attn.proj_bias), zero(bp.attn.mlp2_weight), zero(bp.attn.mlp2_bias);
  auto x = gformer::test::random_tensor<float>({4, 8, 4, 4}, 8);
  EXPECT_EQ(nn::window_attention(Var<float>(x), 2, bp.attn).value(), x);
}

TEST(WindowAttention, PermutationEquivariantWithoutBias) {
  auto cfg = tiny_config();
  for (auto& b : cfg.blocks) b.relative_bias = false;
  auto params = nn::init_params<double>(cfg, 9);
  auto attn = nn::block_params(params, 0).attn;
  ASSERT_FALSE(attn.bias_table.defined());
  auto x = gformer::test::random_tensor<double>({3, 8, 4, 4}, 10);
  std::vector<int64_t> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(11));
  auto permute = [&](const Tensor<double>& t, bool inverse) {
    Tensor<double> out(t.shape());
    for (int64_t w = 0; w < 3; ++w)
      for (int64_t c = 0; c < 8; ++c)
        for (int64_t i = 0; i < 16; ++i) {
          const int64_t src = inverse ? i : perm[static_cast<size_t>(i)];
          const int64_t dst = inverse ? perm[static_cast<size_t>(i)] : i;
          out[(w * 8 + c) * 16 + dst] = t[(w * 8 + c) * 16 + src];
        }
    return out;
  };
  const auto plain = nn::window_attention(Var<double>(x), 2, attn).value();
  const auto permuted = nn::window_attention(Var<double>(permute(x, false)), 2, attn).value();
  const auto restored = permute(permuted, true);
  for (int64_t i = 0; i < plain.numel(); ++i) EXPECT_NEAR(restored[i], plain[i], 1e-10);
}

TEST(WindowAttention, RejectsIndivisibleHeads) {
  auto params = nn::init_params<float>(tiny_config(), 12);
  auto x = Var<float>(Tensor<float>({1, 8, 2, 2}));
  EXPECT_THROW(nn::window_attention(x, 3, nn::block_params(params, 0).attn), gformer::ValidationError);
}

TEST(GformerBlock, DegenerateBlockIsIdentity) {
  nn::BlockConfig bc;
  bc.channels = 8, bc.heads = 2, bc.stride = 1, bc.angle = 0.0;
  auto cfg = tiny_config();
  cfg.blocks[0] = bc;
  auto params = nn::init_params<float>(cfg, 13);
  for (auto& [name, v] : params.entries()) {
    if (name.rfind("blocks.0.", 0) == 0 && name.find("gamma") == std::string::npos) zero(v);
  }
  auto x = gformer::test::random_tensor<float>({2, 8, 8, 8}, 14);
  EXPECT_EQ(nn::gformer_block(Var<float>(x), bc, nn::block_params(params, 0)).value(), x);
}

TEST(GformerBlock, DefaultBlockShapeAndDeterminism) {
  auto cfg = nn::ModelConfig::standard(6, 16, 4);
  auto params = nn::init_params<float>(cfg, 15);
  auto x = gformer::test::random_tensor<float>({2, 16, 64, 64}, 16);
  for (size_t i : {size_t{1}, size_t{2}}) {
    auto a = nn::gformer_block(Var<float>(x), cfg.blocks[i], nn::block_params(params, i));
    auto b = nn::gformer_block(Var<float>(x), cfg.blocks[i], nn::block_params(params, i));
    EXPECT_EQ(a.shape(), x.shape());
    EXPECT_TRUE(a.value().all_finite());
    EXPECT_EQ(a.value(), b.value());
  }
}

TEST(GformerBlock, RejectsIndivisibleMap) {
  auto cfg = nn::ModelConfig::standard(1, 8, 2, {8}, {0});
  auto params = nn::init_params<float>(cfg, 17);
  EXPECT_THROW(nn::gformer_block(Var<float>(Tensor<float>({1, 8, 12, 12})), cfg.blocks[0],
                                 nn::block_params(params, 0)),
               gformer::ValidationError);
}

TEST(BaseModel, ZeroHeadWithResidualIsIdentity) {
  auto cfg = tiny_config();
  auto params = nn::init_params<float>(cfg, 18);
  zero(params.get("head.weight")), zero(params.get("head.bias"));
  auto prev = gformer::test::random_tensor<float>({2, 1, 16, 16}, 19);
  auto pre = gformer::test::random_tensor<float>({2, 1, 16, 16}, 20);
  auto out = nn::base_model_forward(Var<float>(prev), Var<float>(pre), cfg, params);
  EXPECT_EQ(out.value(), prev);
}

TEST(BaseModel, ShapeAndValidation) {
  auto cfg = nn::ModelConfig::standard(2, 16, 4, {4, 8}, {0, 10});
  auto params = nn::init_params<float>(cfg, 21);
  auto img = gformer::test::random_tensor<float>({1, 1, 64, 64}, 22);
  auto out = nn::base_model_forward(Var<float>(img), Var<float>(img), cfg, params);
  EXPECT_EQ(out.shape(), img.shape());
  Var<float> bad(Tensor<float>({1, 1, 60, 60}));
  EXPECT_THROW(nn::base_model_forward(bad, bad, cfg, params), gformer::ValidationError);
  Var<float> other(Tensor<float>({1, 1, 64, 32}));
  EXPECT_THROW(nn::base_model_forward(Var<float>(img), other, cfg, params), gformer::ValidationError);
}

TEST(BaseModel, EveryParameterReceivesGradient) {
  auto cfg = tiny_config();
  auto params = nn::init_params<double>(cfg, 23, 1.0);
  auto prev = gformer::test::random_tensor<double>({2, 1, 16, 16}, 24);
  auto pre = gformer::test::random_tensor<double>({2, 1, 16, 16}, 25);
  auto out = ops::mean(nn::base_model_forward(Var<double>(prev), Var<double>(pre), cfg, params));
  gformer::ad::backward(out);
  for (const auto& [name, v] : params.entries()) {
    ASSERT_TRUE(v.has_grad()) << name;
    double norm = 0;
    for (double g : v.grad().vec()) norm += std::abs(g);
    EXPECT_GT(norm, 0.0) << name;
  }
}

TEST(Gradcheck, ConvBlock) {
  auto params = nn::init_params<double>(tiny_config(1, 4, 2), 26);
  auto bp = nn::block_params(params, 0);
  Var<double> x(gformer::test::random_tensor<double>({2, 4, 8, 8}, 27), true);
  auto report = gformer::train::gradcheck([&] { return head(nn::conv_block(x, bp.conv), 28); },
                                          {{"x", x}, {"weight", bp.conv.weight},
                                           {"gamma", bp.conv.norm_gamma}, {"beta", bp.conv.norm_beta}});
  EXPECT_LT(report.max_rel_error, 1e-3) << report.worst_group;
}

TEST(Gradcheck, WindowAttention) {
  auto params = nn::init_params<double>(tiny_config(1, 4, 2), 29);
  auto a = nn::block_params(params, 0).attn;
  Var<double> x(gformer::test::random_tensor<double>({4, 4, 4, 4}, 30), true);
  gformer::train::NamedVars vars{{"x", x}};
  for (const auto& [name, v] : params.entries()) {
    if (name.find(".attn.") != std::string::npos) vars.emplace_back(name, v);
  }
  auto report = gformer::train::gradcheck([&] { return head(nn::window_attention(x, 2, a), 31); }, vars);
  EXPECT_LT(report.max_rel_error, 1e-3) << report.worst_group;
}

TEST(Gradcheck, GformerBlockAllShiftModes) {
  for (auto mode : {nn::ShiftMode::Rotational, nn::ShiftMode::Cyclic, nn::ShiftMode::None}) {
    auto cfg = nn::ModelConfig::standard(1, 4, 2, {4}, {20}, mode);
    auto params = nn::init_params<double>(cfg, 32);
    Var<double> x(gformer::test::random_tensor<double>({1, 4, 16, 16}, 33), true);
    gformer::train::NamedVars vars{{"x", x}};
    for (const auto& e : params.entries()) {
      if (e.first.rfind("blocks.0.", 0) == 0) vars.push_back(e);
    }
    auto bp = nn::block_params(params, 0);
    auto report = gformer::train::gradcheck(
        [&] { return head(nn::gformer_block(x, cfg.blocks[0], bp), 34); }, vars, {.max_entries_per_tensor = 48});
    EXPECT_LT(report.max_rel_error, 1e-3) << nn::to_string(mode) << " " << report.worst_group;
  }
}

TEST(Config, StandardTruncatesAndValidates) {
  auto cfg = nn::ModelConfig::standard(2, 16, 4, {4, 8, 4}, {0, 10, 0});
  ASSERT_EQ(cfg.blocks.size(), 2u);
  EXPECT_EQ(cfg.blocks[1].stride, 8);
  EXPECT_EQ(cfg.blocks[1].angle, 10.0);
  EXPECT_EQ(cfg.max_stride(), 8);
  EXPECT_THROW(nn::ModelConfig::standard(3, 16, 4, {4, 8}, {0, 10}), gformer::ValidationError);
  EXPECT_THROW(nn::ModelConfig::standard(1, 16, 4, {4}, {60}), gformer::ValidationError);
  EXPECT_THROW(nn::ModelConfig::standard(1, 10, 4, {4}, {0}), gformer::ValidationError);
  auto cyc = nn::ModelConfig::standard(2, 16, 4, {4, 8}, {0, 10}, nn::ShiftMode::Cyclic);
  EXPECT_EQ(cyc.blocks[0].cyclic_offset, 0);
  EXPECT_EQ(cyc.blocks[1].cyclic_offset, 4);
  EXPECT_EQ(nn::ModelConfig::from_json(cyc.to_json()), cyc);
}

TEST(Checkpoint, RoundTripAndParamCountIndependentOfInput) {
  auto cfg = nn::ModelConfig::standard(2, 16, 4, {4, 8}, {0, 10});
  auto params = nn::init_params<float>(cfg, 35);
  const auto path = std::filesystem::temp_directory_path() / "gformer_ckpt_test.bin";
  nn::write_checkpoint(path, cfg, params);
  auto [cfg2, params2] = nn::read_checkpoint(path);
  EXPECT_EQ(cfg2, cfg);
  ASSERT_EQ(params2.entries().size(), params.entries().size());
  for (size_t i = 0; i < params.entries().size(); ++i) {
    EXPECT_EQ(params2.entries()[i].first, params.entries()[i].first);
    EXPECT_EQ(params2.entries()[i].second.value(), params.entries()[i].second.value());
  }
  EXPECT_EQ(params2.parameter_count(), params.parameter_count());
  std::filesystem::remove(path);
  EXPECT_THROW(nn::read_checkpoint(path), gformer::IoError);
}
