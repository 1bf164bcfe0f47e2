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
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "gformer/autograd.hpp"
#include "gformer/ops.hpp"

namespace gformer::nn {

using ad::Var;

enum class ShiftMode { Rotational, Cyclic, None };

std::string to_string(ShiftMode mode);
ShiftMode parse_shift_mode(const std::string& text);  // "rot" | "cyc" | "none"

struct BlockConfig {
  int64_t channels = 32;
  int64_t heads = 4;
  int64_t stride = 4;
  double angle = 0.0;  // degrees, rotational mode
  ShiftMode shift = ShiftMode::Rotational;
  int64_t cyclic_offset = 0;  // pixels on both axes, cyclic mode
  double mlp_ratio = 2.0;
  bool relative_bias = true;
  int64_t bias_clip = 7;  // relative offsets beyond this share a bias entry

  int64_t mlp_hidden() const;
  void validate() const;
  friend bool operator==(const BlockConfig&, const BlockConfig&) = default;
};

struct ModelConfig {
  std::vector<BlockConfig> blocks;
  int64_t input_channels = 2;
  int64_t output_channels = 1;
  int64_t base_channels = 32;
  bool residual_output = true;

  // Builds the usual stack: one block per stride/angle pair. Lists longer
  // than `n_blocks` are truncated; shorter ones are rejected. Cyclic mode
  // rolls by stride/2 on blocks whose angle is nonzero.
  static ModelConfig standard(int64_t n_blocks = 6, int64_t channels = 32, int64_t heads = 4,
                              std::vector<int64_t> strides = {4, 8, 16, 16, 8, 4},
                              std::vector<double> angles = {0, 10, 20, 20, 10, 0},
                              ShiftMode shift = ShiftMode::Rotational);

  int64_t max_stride() const;
  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Named learnable tensors, in a fixed creation order.
template <typename T>
class ModelParams {
 public:
  void add(const std::string& name, Tensor<T> value);
  const Var<T>& get(const std::string& name) const;
  Var<T>& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::pair<std::string, Var<T>>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Var<T>>>& entries() { return entries_; }
  int64_t parameter_count() const;
  void zero_grad();
  bool all_finite() const;
  // Off: forward passes record no graph (inference).
  void set_requires_grad(bool on) {
    for (auto& e : entries_) e.second.node()->requires_grad = on;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& [name, v] : entries_) out.add(name, v.value().template cast<U>());
    return out;
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> entries_;
  std::map<std::string, size_t> index_;
};

// Deterministic initialization from `seed`. Values are drawn in double and
// cast, so float and double models built from one seed agree.
template <typename T>
ModelParams<T> init_params(const ModelConfig& config, uint64_t seed, double head_scale = 0.1);

struct ConvBlockHooks {
  bool bypass_pointwise = false;  // skip normalization and nonlinearity
};

template <typename T>
struct ConvBlockParams {
  Var<T> weight, norm_gamma, norm_beta;
};

template <typename T>
struct AttentionParams {
  Var<T> norm1_gamma, norm1_beta, qkv_weight, qkv_bias, proj_weight, proj_bias;
  Var<T> bias_table;  // undefined when relative bias is off
  Var<T> norm2_gamma, norm2_beta, mlp1_weight, mlp1_bias, mlp2_weight, mlp2_bias;
};

template <typename T>
struct BlockParams {
  ConvBlockParams<T> conv;
  AttentionParams<T> attn;
};

template <typename T>
BlockParams<T> block_params(const ModelParams<T>& params, size_t block);

// 3x3 convolution, instance normalization, GELU.
template <typename T>
Var<T> conv_block(const Var<T>& x, const ConvBlockParams<T>& p, ConvBlockHooks hooks = {});

// Pre-norm transformer over windows given as a (windows, c, rows, cols) map.
template <typename T>
Var<T> window_attention(const Var<T>& windows, int64_t heads, const AttentionParams<T>& p,
                        int64_t bias_clip = 7);

// conv block -> shift -> subsample -> attention -> inverse subsample ->
// inverse shift, plus the block input.
template <typename T>
Var<T> gformer_block(const Var<T>& x, const BlockConfig& config, const BlockParams<T>& p);

// One step of the dose-reduction chain: (higher-enhancement image,
// pre-contrast) -> next lower-enhancement image. Inputs are (b, 1, h, w).
template <typename T>
Var<T> base_model_forward(const Var<T>& previous, const Var<T>& pre, const ModelConfig& config,
                          const ModelParams<T>& params);

// Checkpoint: see docs/checkpoint_format.md.
void write_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                      const ModelParams<float>& params);
std::pair<ModelConfig, ModelParams<float>> read_checkpoint(const std::filesystem::path& path);

}  // namespace gformer::nn
