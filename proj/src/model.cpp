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

#include "gformer/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "json.hpp"

namespace gformer::nn {

using nlohmann::json;

std::string to_string(ShiftMode mode) {
  switch (mode) {
    case ShiftMode::Rotational: return "rot";
    case ShiftMode::Cyclic: return "cyc";
    case ShiftMode::None: return "none";
  }
  return "none";
}

ShiftMode parse_shift_mode(const std::string& text) {
  if (text == "rot" || text == "rotational") return ShiftMode::Rotational;
  if (text == "cyc" || text == "cyclic") return ShiftMode::Cyclic;
  if (text == "none") return ShiftMode::None;
  throw ValidationError("unknown shift mode '" + text + "' (expected rot, cyc or none)");
}

int64_t BlockConfig::mlp_hidden() const {
  return std::max<int64_t>(1, static_cast<int64_t>(std::llround(mlp_ratio * static_cast<double>(channels))));
}

void BlockConfig::validate() const {
  if (channels < 1 || heads < 1 || channels % heads != 0) {
    throw ValidationError("block: channels (" + std::to_string(channels) +
                          ") must be a positive multiple of heads (" + std::to_string(heads) + ")");
  }
  if (stride < 1) throw ValidationError("block: stride must be >= 1");
  if (shift == ShiftMode::Rotational && std::abs(angle) > 45.0) {
    throw ValidationError("block: rotation angle must lie in [-45, 45] degrees");
  }
  if (!(mlp_ratio > 0.0)) throw ValidationError("block: mlp ratio must be positive");
  if (bias_clip < 0) throw ValidationError("block: bias clip must be non-negative");
}

ModelConfig ModelConfig::standard(int64_t n_blocks, int64_t channels, int64_t heads,
                                  std::vector<int64_t> strides, std::vector<double> angles,
                                  ShiftMode shift) {
  if (n_blocks < 1) throw ValidationError("model: need at least one block");
  if (static_cast<int64_t>(strides.size()) < n_blocks || static_cast<int64_t>(angles.size()) < n_blocks) {
    throw ValidationError("model: stride and angle lists need at least " + std::to_string(n_blocks) +
                          " entries");
  }
  ModelConfig config;
  config.base_channels = channels;
  for (int64_t i = 0; i < n_blocks; ++i) {
    BlockConfig b;
    b.channels = channels;
    b.heads = heads;
    b.stride = strides[static_cast<size_t>(i)];
    b.shift = shift;
    b.angle = shift == ShiftMode::Rotational ? angles[static_cast<size_t>(i)] : 0.0;
    b.cyclic_offset =
        (shift == ShiftMode::Cyclic && angles[static_cast<size_t>(i)] != 0.0) ? b.stride / 2 : 0;
    config.blocks.push_back(b);
  }
  config.validate();
  return config;
}

int64_t ModelConfig::max_stride() const {
  int64_t m = 1;
  for (const auto& b : blocks) m = std::max(m, b.stride);
  return m;
}

void ModelConfig::validate() const {
  if (blocks.empty()) throw ValidationError("model: need at least one block");
  if (input_channels != 2 || output_channels != 1) {
    throw ValidationError("model: expects 2 input channels and 1 output channel");
  }
  for (const auto& b : blocks) {
    b.validate();
    if (b.channels != base_channels) throw ValidationError("model: block width must equal base width");
  }
}

std::string ModelConfig::to_json() const {
  json j;
  j["input_channels"] = input_channels;
  j["output_channels"] = output_channels;
  j["base_channels"] = base_channels;
  j["residual_output"] = residual_output;
  j["blocks"] = json::array();
  for (const auto& b : blocks) {
    j["blocks"].push_back({{"channels", b.channels},
                           {"heads", b.heads},
                           {"stride", b.stride},
                           {"angle", b.angle},
                           {"shift", to_string(b.shift)},
                           {"cyclic_offset", b.cyclic_offset},
                           {"mlp_ratio", b.mlp_ratio},
                           {"relative_bias", b.relative_bias},
                           {"bias_clip", b.bias_clip}});
  }
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    c.input_channels = j.at("input_channels").get<int64_t>();
    c.output_channels = j.at("output_channels").get<int64_t>();
    c.base_channels = j.at("base_channels").get<int64_t>();
    c.residual_output = j.at("residual_output").get<bool>();
    for (const auto& jb : j.at("blocks")) {
      BlockConfig b;
      b.channels = jb.at("channels").get<int64_t>();
      b.heads = jb.at("heads").get<int64_t>();
      b.stride = jb.at("stride").get<int64_t>();
      b.angle = jb.at("angle").get<double>();
      b.shift = parse_shift_mode(jb.at("shift").get<std::string>());
      b.cyclic_offset = jb.at("cyclic_offset").get<int64_t>();
      b.mlp_ratio = jb.at("mlp_ratio").get<double>();
      b.relative_bias = jb.at("relative_bias").get<bool>();
      b.bias_clip = jb.at("bias_clip").get<int64_t>();
      c.blocks.push_back(b);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

template <typename T>
void ModelParams<T>::add(const std::string& name, Tensor<T> value) {
  if (index_.count(name)) throw ValidationError("duplicate parameter '" + name + "'");
  index_[name] = entries_.size();
  entries_.emplace_back(name, Var<T>(std::move(value), true));
}

template <typename T>
const Var<T>& ModelParams<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

template <typename T>
Var<T>& ModelParams<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
  return entries_[it->second].second;
}

template <typename T>
int64_t ModelParams<T>::parameter_count() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += e.second.value().numel();
  return n;
}

template <typename T>
void ModelParams<T>::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

template <typename T>
bool ModelParams<T>::all_finite() const {
  for (const auto& e : entries_) {
    if (!e.second.value().all_finite()) return false;
  }
  return true;
}

namespace {

std::string block_prefix(size_t i) { return "blocks." + std::to_string(i) + "."; }

class Initializer {
 public:
  explicit Initializer(uint64_t seed) : rng_(seed) {}

  template <typename T>
  Tensor<T> normal(Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.vec()) v = static_cast<T>(stddev * dist(rng_));
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, uint64_t seed, double head_scale) {
  config.validate();
  Initializer init(seed);
  ModelParams<T> p;
  const int64_t c = config.base_channels;
  auto fan = [](int64_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };

  p.add("embed.weight", init.normal<T>({c, config.input_channels, 3, 3}, fan(config.input_channels * 9)));
  p.add("embed.bias", Tensor<T>({c}));
  for (size_t i = 0; i < config.blocks.size(); ++i) {
    const auto& b = config.blocks[i];
    const std::string pre = block_prefix(i);
    const int64_t hidden = b.mlp_hidden();
    p.add(pre + "conv.weight", init.normal<T>({c, c, 3, 3}, fan(c * 9)));
    p.add(pre + "conv.norm_gamma", Tensor<T>({c}, T(1)));
    p.add(pre + "conv.norm_beta", Tensor<T>({c}));
    p.add(pre + "attn.norm1_gamma", Tensor<T>({c}, T(1)));
    p.add(pre + "attn.norm1_beta", Tensor<T>({c}));
    p.add(pre + "attn.qkv_weight", init.normal<T>({3 * c, c}, fan(c)));
    p.add(pre + "attn.qkv_bias", Tensor<T>({3 * c}));
    p.add(pre + "attn.proj_weight", init.normal<T>({c, c}, fan(c)));
    p.add(pre + "attn.proj_bias", Tensor<T>({c}));
    if (b.relative_bias) {
      const int64_t side = 2 * b.bias_clip + 1;
      p.add(pre + "attn.bias_table", init.normal<T>({side * side, b.heads}, 0.02));
    }
    p.add(pre + "attn.norm2_gamma", Tensor<T>({c}, T(1)));
    p.add(pre + "attn.norm2_beta", Tensor<T>({c}));
    p.add(pre + "attn.mlp1_weight", init.normal<T>({hidden, c}, fan(c)));
    p.add(pre + "attn.mlp1_bias", Tensor<T>({hidden}));
    p.add(pre + "attn.mlp2_weight", init.normal<T>({c, hidden}, fan(hidden)));
    p.add(pre + "attn.mlp2_bias", Tensor<T>({c}));
  }
  p.add("head.weight", init.normal<T>({config.output_channels, c, 3, 3}, head_scale * fan(c * 9)));
  p.add("head.bias", Tensor<T>({config.output_channels}));
  return p;
}

template <typename T>
BlockParams<T> block_params(const ModelParams<T>& params, size_t block) {
  const std::string pre = block_prefix(block);
  BlockParams<T> b;
  b.conv.weight = params.get(pre + "conv.weight");
  b.conv.norm_gamma = params.get(pre + "conv.norm_gamma");
  b.conv.norm_beta = params.get(pre + "conv.norm_beta");
  auto& a = b.attn;
  a.norm1_gamma = params.get(pre + "attn.norm1_gamma");
  a.norm1_beta = params.get(pre + "attn.norm1_beta");
  a.qkv_weight = params.get(pre + "attn.qkv_weight");
  a.qkv_bias = params.get(pre + "attn.qkv_bias");
  a.proj_weight = params.get(pre + "attn.proj_weight");
  a.proj_bias = params.get(pre + "attn.proj_bias");
  if (params.contains(pre + "attn.bias_table")) a.bias_table = params.get(pre + "attn.bias_table");
  a.norm2_gamma = params.get(pre + "attn.norm2_gamma");
  a.norm2_beta = params.get(pre + "attn.norm2_beta");
  a.mlp1_weight = params.get(pre + "attn.mlp1_weight");
  a.mlp1_bias = params.get(pre + "attn.mlp1_bias");
  a.mlp2_weight = params.get(pre + "attn.mlp2_weight");
  a.mlp2_bias = params.get(pre + "attn.mlp2_bias");
  return b;
}

template <typename T>
Var<T> conv_block(const Var<T>& x, const ConvBlockParams<T>& p, ConvBlockHooks hooks) {
  Var<T> y = ops::conv2d(x, p.weight, Var<T>());
  if (hooks.bypass_pointwise) return y;
  return ops::gelu(ops::instance_norm(y, p.norm_gamma, p.norm_beta));
}

template <typename T>
Var<T> window_attention(const Var<T>& windows, int64_t heads, const AttentionParams<T>& p,
                        int64_t bias_clip) {
  const int64_t rows = windows.dim(2), cols = windows.dim(3);
  Var<T> t = ops::to_tokens(windows);
  Var<T> qkv = ops::linear(ops::layer_norm(t, p.norm1_gamma, p.norm1_beta), p.qkv_weight, p.qkv_bias);
  Var<T> attended = ops::window_attention_core(qkv, heads, p.bias_table, rows, cols, bias_clip);
  t = ops::add(t, ops::linear(attended, p.proj_weight, p.proj_bias));
  Var<T> hidden = ops::gelu(ops::linear(ops::layer_norm(t, p.norm2_gamma, p.norm2_beta),
                                        p.mlp1_weight, p.mlp1_bias));
  t = ops::add(t, ops::linear(hidden, p.mlp2_weight, p.mlp2_bias));
  return ops::from_tokens(t, rows, cols);
}

template <typename T>
Var<T> gformer_block(const Var<T>& x, const BlockConfig& config, const BlockParams<T>& p) {
  const int64_t h = x.dim(2), w = x.dim(3);
  if (h % config.stride != 0 || w % config.stride != 0) {
    throw ValidationError("gformer block: stride " + std::to_string(config.stride) +
                          " does not divide " + std::to_string(h) + "x" + std::to_string(w));
  }
  Var<T> y = conv_block(x, p.conv);
  switch (config.shift) {
    case ShiftMode::Rotational: y = ops::rotational_shift(y, config.angle); break;
    case ShiftMode::Cyclic: y = ops::cyclic_shift(y, config.cyclic_offset, config.cyclic_offset); break;
    case ShiftMode::None: break;
  }
  y = ops::subsample(y, config.stride);
  y = window_attention(y, config.heads, p.attn, config.bias_clip);
  y = ops::inverse_subsample(y, config.stride, h, w);
  switch (config.shift) {
    case ShiftMode::Rotational: y = ops::rotational_shift(y, -config.angle); break;
    case ShiftMode::Cyclic: y = ops::cyclic_shift(y, -config.cyclic_offset, -config.cyclic_offset); break;
    case ShiftMode::None: break;
  }
  return ops::add(x, y);
}

template <typename T>
Var<T> base_model_forward(const Var<T>& previous, const Var<T>& pre, const ModelConfig& config,
                          const ModelParams<T>& params) {
  require_same_shape(previous.shape(), pre.shape(), "base model inputs");
  if (previous.value().rank() != 4 || previous.dim(1) != 1) {
    throw ValidationError("base model: inputs must be (batch, 1, h, w), got " + shape_str(previous.shape()));
  }
  const int64_t stride = config.max_stride();
  if (previous.dim(2) % stride != 0 || previous.dim(3) % stride != 0) {
    throw ValidationError("base model: image " + std::to_string(previous.dim(2)) + "x" +
                          std::to_string(previous.dim(3)) + " not divisible by max stride " +
                          std::to_string(stride));
  }
  Var<T> f = ops::conv2d(ops::concat_channels(previous, pre), params.get("embed.weight"),
                         params.get("embed.bias"));
  for (size_t i = 0; i < config.blocks.size(); ++i) {
    f = gformer_block(f, config.blocks[i], block_params(params, i));
  }
  Var<T> out = ops::conv2d(f, params.get("head.weight"), params.get("head.bias"));
  if (config.residual_output) out = ops::add(out, previous);
  return out;
}

namespace {

constexpr char kMagic[8] = {'G', 'F', 'R', 'M', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xffu);
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("checkpoint: unexpected end of file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is, uint32_t limit) {
  const uint32_t n = get_u32(is);
  if (n > limit) throw IoError("checkpoint: string length out of range");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw IoError("checkpoint: unexpected end of file");
  return s;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const ModelConfig& config,
                      const ModelParams<float>& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.write(kMagic, sizeof(kMagic));
  put_u32(os, kVersion);
  put_string(os, config.to_json());
  put_u32(os, static_cast<uint32_t>(params.entries().size()));
  for (const auto& [name, var] : params.entries()) {
    const auto& t = var.value();
    put_string(os, name);
    put_u32(os, static_cast<uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u32(os, static_cast<uint32_t>(d));
    for (float v : t.vec()) put_u32(os, std::bit_cast<uint32_t>(v));
  }
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

std::pair<ModelConfig, ModelParams<float>> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw IoError("'" + path.string() + "' is not a checkpoint");
  }
  const uint32_t version = get_u32(is);
  if (version != kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  ModelConfig config = ModelConfig::from_json(get_string(is, 1u << 24));
  ModelParams<float> params;
  const uint32_t count = get_u32(is);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = get_string(is, 4096);
    const uint32_t rank = get_u32(is);
    if (rank > 8) throw IoError("checkpoint: tensor rank out of range");
    Shape shape;
    for (uint32_t r = 0; r < rank; ++r) shape.push_back(get_u32(is));
    Tensor<float> t(shape);
    for (auto& v : t.vec()) v = std::bit_cast<float>(get_u32(is));
    if (!t.all_finite()) throw NumericalError("checkpoint: tensor '" + name + "' has non-finite values");
    params.add(name, std::move(t));
  }
  // Shapes must match a fresh initialization of the stored config.
  const auto reference = init_params<float>(config, 0);
  if (reference.entries().size() != params.entries().size()) {
    throw IoError("checkpoint: parameter set does not match its model config");
  }
  for (const auto& [name, var] : reference.entries()) {
    if (!params.contains(name) || params.get(name).shape() != var.shape()) {
      throw IoError("checkpoint: parameter '" + name + "' missing or misshapen");
    }
  }
  return {std::move(config), std::move(params)};
}

template class ModelParams<float>;
template class ModelParams<double>;

#define GFORMER_INSTANTIATE(T)                                                                    \
  template ModelParams<T> init_params(const ModelConfig&, uint64_t, double);                      \
  template BlockParams<T> block_params(const ModelParams<T>&, size_t);                            \
  template Var<T> conv_block(const Var<T>&, const ConvBlockParams<T>&, ConvBlockHooks);           \
  template Var<T> window_attention(const Var<T>&, int64_t, const AttentionParams<T>&, int64_t);   \
  template Var<T> gformer_block(const Var<T>&, const BlockConfig&, const BlockParams<T>&);        \
  template Var<T> base_model_forward(const Var<T>&, const Var<T>&, const ModelConfig&,            \
                                     const ModelParams<T>&);

GFORMER_INSTANTIATE(float)
GFORMER_INSTANTIATE(double)
#undef GFORMER_INSTANTIATE

}  // namespace gformer::nn
