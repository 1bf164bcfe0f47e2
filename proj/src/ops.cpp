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

#include "gformer/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace gformer::ops {

namespace {

constexpr std::align_val_t kBlockAlign{64};

struct AlignedDelete {
  template <typename T>
  void operator()(T* p) const { ::operator delete[](p, kBlockAlign); }
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

void require_rank(const Shape& s, size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ValidationError(std::string(what) + ": expected rank " + std::to_string(rank) +
                          ", got " + shape_str(s));
  }
}

template <typename T>
Var<T> scalar_result(T value, std::vector<Var<T>> inputs, std::function<void(ad::Node<T>&)> fn,
                     const char* op) {
  return Var<T>::from_op(Tensor<T>({1}, {value}), std::move(inputs), std::move(fn), op);
}

// Column buffer for one sample: rows (c, ky, kx), columns (y, x).
template <typename T>
void im2col(const T* in, int64_t c, int64_t h, int64_t w, int64_t k, T* cols) {
  const int64_t pad = k / 2;
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t ky = 0; ky < k; ++ky) {
      for (int64_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((ch * k + ky) * k + kx) * h * w;
        for (int64_t y = 0; y < h; ++y) {
          const int64_t sy = y + ky - pad;
          T* dst = row + y * w;
          if (sy < 0 || sy >= h) {
            std::fill(dst, dst + w, T(0));
            continue;
          }
          const T* src = in + (ch * h + sy) * w;
          for (int64_t x = 0; x < w; ++x) {
            const int64_t sx = x + kx - pad;
            dst[x] = (sx >= 0 && sx < w) ? src[sx] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, int64_t c, int64_t h, int64_t w, int64_t k, T* out) {
  const int64_t pad = k / 2;
  std::fill(out, out + c * h * w, T(0));
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t ky = 0; ky < k; ++ky) {
      for (int64_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((ch * k + ky) * k + kx) * h * w;
        for (int64_t y = 0; y < h; ++y) {
          const int64_t sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          T* dst = out + (ch * h + sy) * w;
          const T* src = row + y * w;
          for (int64_t x = 0; x < w; ++x) {
            const int64_t sx = x + kx - pad;
            if (sx >= 0 && sx < w) dst[sx] += src[x];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += pb[i];
  return Var<T>::from_op(std::move(out), {a, b}, [](ad::Node<T>& n) {
    n.send(0, n.grad);
    n.send(1, n.grad);
  }, "add");
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  const T* pb = b.value().data();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= pb[i];
  return Var<T>::from_op(std::move(out), {a, b}, [](ad::Node<T>& n) {
    n.send(0, n.grad);
    if (n.wants(1)) {
      Tensor<T> g = n.grad;
      for (auto& v : g.vec()) v = -v;
      n.send(1, g);
    }
  }, "sub");
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v *= factor;
  return Var<T>::from_op(std::move(out), {a}, [factor](ad::Node<T>& n) {
    Tensor<T> g = n.grad;
    for (auto& v : g.vec()) v *= factor;
    n.send(0, g);
  }, "scale");
}

template <typename T>
Var<T> detach(const Var<T>& a) {
  return Var<T>(a.value());
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  require_rank(a.shape(), 4, "concat_channels");
  require_rank(b.shape(), 4, "concat_channels");
  const int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  if (b.dim(0) != n || b.dim(2) != a.dim(2) || b.dim(3) != a.dim(3)) {
    throw ValidationError("concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
  }
  Tensor<T> out({n, ca + cb, a.dim(2), a.dim(3)});
  for (int64_t i = 0; i < n; ++i) {
    std::copy_n(a.value().data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
    std::copy_n(b.value().data() + i * cb * hw, cb * hw, out.data() + (i * (ca + cb) + ca) * hw);
  }
  const Shape sa = a.shape(), sb = b.shape();
  return Var<T>::from_op(std::move(out), {a, b}, [=](ad::Node<T>& node) {
    Tensor<T> ga(sa), gb(sb);
    for (int64_t i = 0; i < n; ++i) {
      std::copy_n(node.grad.data() + i * (ca + cb) * hw, ca * hw, ga.data() + i * ca * hw);
      std::copy_n(node.grad.data() + (i * (ca + cb) + ca) * hw, cb * hw, gb.data() + i * cb * hw);
    }
    node.send(0, ga);
    node.send(1, gb);
  }, "concat_channels");
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) {
    v = static_cast<T>(0.5) * v * (T(1) + std::erf(v * static_cast<T>(std::numbers::sqrt2 / 2)));
  }
  Tensor<T> input = x.value();
  return Var<T>::from_op(std::move(out), {x}, [input = std::move(input)](ad::Node<T>& n) {
    Tensor<T> g = n.grad;
    const T inv_sqrt2 = static_cast<T>(std::numbers::sqrt2 / 2);
    const T inv_sqrt2pi = static_cast<T>(std::numbers::inv_sqrtpi * std::numbers::sqrt2 / 2);
    for (int64_t i = 0; i < g.numel(); ++i) {
      const T v = input[i];
      const T cdf = static_cast<T>(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(static_cast<T>(-0.5) * v * v);
      g[i] *= cdf + v * pdf;
    }
    n.send(0, g);
  }, "gelu");
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_rank(x.shape(), 4, "conv2d");
  require_rank(weight.shape(), 4, "conv2d weight");
  const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t co = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != ci || weight.dim(3) != k || k % 2 == 0) {
    throw ValidationError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                          shape_str(x.shape()));
  }
  if (bias.defined() && (bias.value().numel() != co)) {
    throw ValidationError("conv2d: bias length does not match output channels");
  }
  const int64_t hw = h * w, kk = ci * k * k;
  Tensor<T> out({n, co, h, w});
  {
    Buffer<T> cols(static_cast<size_t>(kk * hw));
    CMapMat<T> wm(weight.value().data(), co, kk);
    for (int64_t b = 0; b < n; ++b) {
      im2col(x.value().data() + b * ci * hw, ci, h, w, k, cols.data());
      MapMat<T> om(out.data() + b * co * hw, co, hw);
      om.noalias() = wm * CMapMat<T>(cols.data(), kk, hw);
      if (bias.defined()) {
        for (int64_t c = 0; c < co; ++c) om.row(c).array() += bias.value()[c];
      }
    }
  }
  Tensor<T> input = x.value();
  Tensor<T> wt = weight.value();
  const bool has_bias = bias.defined();
  return Var<T>::from_op(std::move(out), {x, weight, bias},
      [=, input = std::move(input), wt = std::move(wt)](ad::Node<T>& node) {
        Buffer<T> cols(static_cast<size_t>(kk * hw));
        CMapMat<T> wm(wt.data(), co, kk);
        Tensor<T> gx(input.shape()), gw(wt.shape());
        MapMat<T> gwm(gw.data(), co, kk);
        Tensor<T> gb({co});
        for (int64_t b = 0; b < n; ++b) {
          CMapMat<T> gom(node.grad.data() + b * co * hw, co, hw);
          if (node.wants(1)) {
            im2col(input.data() + b * ci * hw, ci, h, w, k, cols.data());
            gwm.noalias() += gom * CMapMat<T>(cols.data(), kk, hw).transpose();
          }
          if (node.wants(0)) {
            MapMat<T> cm(cols.data(), kk, hw);
            cm.noalias() = wm.transpose() * gom;
            col2im(cols.data(), ci, h, w, k, gx.data() + b * ci * hw);
          }
          if (has_bias && node.wants(2)) {
            for (int64_t c = 0; c < co; ++c) gb[c] += gom.row(c).sum();
          }
        }
        node.send(0, gx);
        node.send(1, gw);
        if (has_bias) node.send(2, gb);
      }, "conv2d");
}

template <typename T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  require_rank(x.shape(), 4, "instance_norm");
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.value().numel() != c || beta.value().numel() != c) {
    throw ValidationError("instance_norm: affine params must have one entry per channel");
  }
  Tensor<T> xhat(x.shape()), out(x.shape());
  Buffer<T> rstd(static_cast<size_t>(n * c));
  for (int64_t p = 0; p < n * c; ++p) {
    const T* src = x.value().data() + p * hw;
    double mu = 0.0;
    for (int64_t i = 0; i < hw; ++i) mu += src[i];
    mu /= static_cast<double>(hw);
    double var = 0.0;
    for (int64_t i = 0; i < hw; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<double>(hw);
    const T r = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    rstd[static_cast<size_t>(p)] = r;
    const T g = gamma.value()[p % c], bt = beta.value()[p % c];
    for (int64_t i = 0; i < hw; ++i) {
      const T xh = (src[i] - static_cast<T>(mu)) * r;
      xhat[p * hw + i] = xh;
      out[p * hw + i] = g * xh + bt;
    }
  }
  Tensor<T> gam = gamma.value();
  return Var<T>::from_op(std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), rstd = std::move(rstd), gam = std::move(gam)](ad::Node<T>& node) {
        Tensor<T> gx(xhat.shape()), gg({c}), gb({c});
        for (int64_t p = 0; p < n * c; ++p) {
          const T* dy = node.grad.data() + p * hw;
          const T* xh = xhat.data() + p * hw;
          double sum_dy = 0.0, sum_dy_xh = 0.0;
          for (int64_t i = 0; i < hw; ++i) {
            sum_dy += dy[i];
            sum_dy_xh += dy[i] * xh[i];
          }
          gg[p % c] += static_cast<T>(sum_dy_xh);
          gb[p % c] += static_cast<T>(sum_dy);
          const T g = gam[p % c];
          const T mean_d = static_cast<T>(g * sum_dy / static_cast<double>(hw));
          const T mean_dx = static_cast<T>(g * sum_dy_xh / static_cast<double>(hw));
          const T r = rstd[static_cast<size_t>(p)];
          T* dx = gx.data() + p * hw;
          for (int64_t i = 0; i < hw; ++i) dx[i] = r * (g * dy[i] - mean_d - xh[i] * mean_dx);
        }
        node.send(0, gx);
        node.send(1, gg);
        node.send(2, gb);
      }, "instance_norm");
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const int64_t c = x.shape().back();
  const int64_t rows = x.value().numel() / c;
  if (gamma.value().numel() != c || beta.value().numel() != c) {
    throw ValidationError("layer_norm: affine params must match the last axis");
  }
  Tensor<T> xhat(x.shape()), out(x.shape());
  Buffer<T> rstd(static_cast<size_t>(rows));
  const T* gp = gamma.value().data();
  const T* bp = beta.value().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* src = x.value().data() + r * c;
    T mu = 0;
    for (int64_t i = 0; i < c; ++i) mu += src[i];
    mu /= static_cast<T>(c);
    T var = 0;
    for (int64_t i = 0; i < c; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<T>(c);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[static_cast<size_t>(r)] = rs;
    for (int64_t i = 0; i < c; ++i) {
      const T xh = (src[i] - mu) * rs;
      xhat[r * c + i] = xh;
      out[r * c + i] = gp[i] * xh + bp[i];
    }
  }
  Tensor<T> gam = gamma.value();
  return Var<T>::from_op(std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), rstd = std::move(rstd), gam = std::move(gam)](ad::Node<T>& node) {
        Tensor<T> gx(xhat.shape()), gg({c}), gb({c});
        Buffer<T> dxh(static_cast<size_t>(c));
        for (int64_t r = 0; r < rows; ++r) {
          const T* dy = node.grad.data() + r * c;
          const T* xh = xhat.data() + r * c;
          T sum_d = 0, sum_dx = 0;
          for (int64_t i = 0; i < c; ++i) {
            gg[i] += dy[i] * xh[i];
            gb[i] += dy[i];
            dxh[i] = dy[i] * gam[i];
            sum_d += dxh[i];
            sum_dx += dxh[i] * xh[i];
          }
          sum_d /= static_cast<T>(c);
          sum_dx /= static_cast<T>(c);
          const T rs = rstd[static_cast<size_t>(r)];
          T* dx = gx.data() + r * c;
          for (int64_t i = 0; i < c; ++i) dx[i] = rs * (dxh[i] - sum_d - xh[i] * sum_dx);
        }
        node.send(0, gx);
        node.send(1, gg);
        node.send(2, gb);
      }, "layer_norm");
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_rank(weight.shape(), 2, "linear weight");
  const int64_t cin = x.shape().back(), cout = weight.dim(0);
  if (weight.dim(1) != cin) {
    throw ValidationError("linear: weight " + shape_str(weight.shape()) + " incompatible with input " +
                          shape_str(x.shape()));
  }
  if (bias.defined() && bias.value().numel() != cout) {
    throw ValidationError("linear: bias length does not match output features");
  }
  const int64_t rows = x.value().numel() / cin;
  Shape out_shape = x.shape();
  out_shape.back() = cout;
  Tensor<T> out(out_shape);
  MapMat<T> om(out.data(), rows, cout);
  CMapMat<T> xm(x.value().data(), rows, cin);
  CMapMat<T> wm(weight.value().data(), cout, cin);
  om.noalias() = xm * wm.transpose();
  if (bias.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.value().data(), cout);
    om.rowwise() += bv;
  }
  Tensor<T> input = x.value();
  Tensor<T> wt = weight.value();
  const bool has_bias = bias.defined();
  return Var<T>::from_op(std::move(out), {x, weight, bias},
      [=, input = std::move(input), wt = std::move(wt)](ad::Node<T>& node) {
        CMapMat<T> gom(node.grad.data(), rows, cout);
        if (node.wants(0)) {
          Tensor<T> gx(input.shape());
          MapMat<T>(gx.data(), rows, cin).noalias() = gom * CMapMat<T>(wt.data(), cout, cin);
          node.send(0, gx);
        }
        if (node.wants(1)) {
          Tensor<T> gw(wt.shape());
          MapMat<T>(gw.data(), cout, cin).noalias() =
              gom.transpose() * CMapMat<T>(input.data(), rows, cin);
          node.send(1, gw);
        }
        if (has_bias && node.wants(2)) {
          Tensor<T> gb({cout});
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), cout) = gom.colwise().sum();
          node.send(2, gb);
        }
      }, "linear");
}

template <typename T>
Var<T> to_tokens(const Var<T>& x) {
  require_rank(x.shape(), 4, "to_tokens");
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out({n, hw, c});
  for (int64_t b = 0; b < n; ++b) {
    MapMat<T>(out.data() + b * hw * c, hw, c) = CMapMat<T>(x.value().data() + b * c * hw, c, hw).transpose();
  }
  const Shape in_shape = x.shape();
  return Var<T>::from_op(std::move(out), {x}, [=](ad::Node<T>& node) {
    Tensor<T> g(in_shape);
    for (int64_t b = 0; b < n; ++b) {
      MapMat<T>(g.data() + b * c * hw, c, hw) = CMapMat<T>(node.grad.data() + b * hw * c, hw, c).transpose();
    }
    node.send(0, g);
  }, "to_tokens");
}

template <typename T>
Var<T> from_tokens(const Var<T>& x, int64_t height, int64_t width) {
  require_rank(x.shape(), 3, "from_tokens");
  const int64_t n = x.dim(0), hw = x.dim(1), c = x.dim(2);
  if (hw != height * width) throw ValidationError("from_tokens: token count does not match extent");
  Tensor<T> out({n, c, height, width});
  for (int64_t b = 0; b < n; ++b) {
    MapMat<T>(out.data() + b * c * hw, c, hw) = CMapMat<T>(x.value().data() + b * hw * c, hw, c).transpose();
  }
  const Shape in_shape = x.shape();
  return Var<T>::from_op(std::move(out), {x}, [=](ad::Node<T>& node) {
    Tensor<T> g(in_shape);
    for (int64_t b = 0; b < n; ++b) {
      MapMat<T>(g.data() + b * hw * c, hw, c) = CMapMat<T>(node.grad.data() + b * c * hw, c, hw).transpose();
    }
    node.send(0, g);
  }, "from_tokens");
}

template <typename T>
Var<T> subsample(const Var<T>& x, int64_t stride) {
  const int64_t h = x.dim(2), w = x.dim(3);
  return Var<T>::from_op(kernels::subsample(x.value(), stride), {x}, [=](ad::Node<T>& node) {
    node.send(0, kernels::inverse_subsample(node.grad, stride, h, w));
  }, "subsample");
}

template <typename T>
Var<T> inverse_subsample(const Var<T>& x, int64_t stride, int64_t height, int64_t width) {
  return Var<T>::from_op(kernels::inverse_subsample(x.value(), stride, height, width), {x},
      [=](ad::Node<T>& node) { node.send(0, kernels::subsample(node.grad, stride)); },
      "inverse_subsample");
}

template <typename T>
Var<T> rotational_shift(const Var<T>& x, double degrees) {
  if (degrees == 0.0) return x;
  require_rank(x.shape(), 4, "rotational_shift");
  auto table = std::make_shared<const kernels::RotationTable>(
      kernels::make_rotation_table(x.dim(2), x.dim(3), degrees));
  return Var<T>::from_op(kernels::gather_planes(x.value(), *table), {x},
      [table](ad::Node<T>& node) { node.send(0, kernels::scatter_planes(node.grad, *table)); },
      "rotational_shift");
}

template <typename T>
Var<T> cyclic_shift(const Var<T>& x, int64_t dy, int64_t dx) {
  if (dy == 0 && dx == 0) return x;
  return Var<T>::from_op(kernels::cyclic_shift(x.value(), dy, dx), {x},
      [=](ad::Node<T>& node) { node.send(0, kernels::cyclic_shift(node.grad, -dy, -dx)); },
      "cyclic_shift");
}

std::vector<int32_t> relative_position_index(int64_t rows, int64_t cols, int64_t clip) {
  const int64_t n = rows * cols, side = 2 * clip + 1;
  std::vector<int32_t> index(static_cast<size_t>(n * n));
  for (int64_t a = 0; a < n; ++a) {
    for (int64_t b = 0; b < n; ++b) {
      const int64_t dr = std::clamp(a / cols - b / cols, -clip, clip);
      const int64_t dc = std::clamp(a % cols - b % cols, -clip, clip);
      index[static_cast<size_t>(a * n + b)] = static_cast<int32_t>((dr + clip) * side + (dc + clip));
    }
  }
  return index;
}

namespace {

template <typename T>
struct AttentionGeometry {
  int64_t windows, n, c, heads, dh;
  T scale;
};

template <typename T>
AttentionGeometry<T> attention_geometry(const Shape& qkv, int64_t heads, int64_t rows, int64_t cols) {
  require_rank(qkv, 3, "window_attention");
  AttentionGeometry<T> g{};
  g.windows = qkv[0];
  g.n = qkv[1];
  if (qkv[2] % 3 != 0) throw ValidationError("window_attention: qkv width must be 3*channels");
  g.c = qkv[2] / 3;
  if (heads < 1 || g.c % heads != 0) {
    throw ValidationError("window_attention: channels " + std::to_string(g.c) +
                          " not divisible by heads " + std::to_string(heads));
  }
  if (g.n != rows * cols) throw ValidationError("window_attention: token count does not match window");
  g.heads = heads;
  g.dh = g.c / heads;
  g.scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(g.dh)));
  return g;
}

template <typename T>
using RowArr = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// (heads, n, n) bias gathered from the table once per call.
template <typename T>
Buffer<T> expand_bias(const T* table, const std::vector<int32_t>& rel, int64_t heads, int64_t n) {
  Buffer<T> out(static_cast<size_t>(heads * n * n));
  for (int64_t h = 0; h < heads; ++h) {
    for (int64_t i = 0; i < n * n; ++i) {
      out[static_cast<size_t>(h * n * n + i)] = table[rel[static_cast<size_t>(i)] * heads + h];
    }
  }
  return out;
}

// Softmax(scale * q k^T + bias) for one window and head, written to probs.
template <typename T>
void attention_rows(const T* qkv_window, const AttentionGeometry<T>& g, int64_t head, const T* bias, T* probs) {
  const int64_t ld = 3 * g.c;
  CStridedMap<T> q(qkv_window + head * g.dh, g.n, g.dh, Eigen::OuterStride<>(ld));
  CStridedMap<T> k(qkv_window + g.c + head * g.dh, g.n, g.dh, Eigen::OuterStride<>(ld));
  MapMat<T> s(probs, g.n, g.n);
  s.noalias() = g.scale * (q * k.transpose());
  auto a = s.array();
  if (bias) a += Eigen::Map<const RowArr<T>>(bias, g.n, g.n);
  const auto mx = a.rowwise().maxCoeff().eval();
  a.colwise() -= mx;
  a = a.exp();
  const auto inv = a.rowwise().sum().inverse().eval();
  a.colwise() *= inv;
}

}  // namespace

template <typename T>
Tensor<T> attention_probabilities(const Tensor<T>& qkv, int64_t heads, const Tensor<T>* bias_table,
                                  int64_t rows, int64_t cols, int64_t clip) {
  const auto g = attention_geometry<T>(qkv.shape(), heads, rows, cols);
  const auto rel = relative_position_index(rows, cols, clip);
  Buffer<T> bias;
  if (bias_table) bias = expand_bias(bias_table->data(), rel, g.heads, g.n);
  Tensor<T> probs({g.windows, g.heads, g.n, g.n});
  for (int64_t wi = 0; wi < g.windows; ++wi) {
    for (int64_t h = 0; h < g.heads; ++h) {
      attention_rows(qkv.data() + wi * g.n * 3 * g.c, g, h, bias_table ? bias.data() + h * g.n * g.n : nullptr,
                     probs.data() + (wi * g.heads + h) * g.n * g.n);
    }
  }
  return probs;
}

template <typename T>
Var<T> window_attention_core(const Var<T>& qkv, int64_t heads, const Var<T>& bias_table,
                             int64_t rows, int64_t cols, int64_t clip) {
  const auto g = attention_geometry<T>(qkv.shape(), heads, rows, cols);
  const int64_t side = 2 * clip + 1;
  if (bias_table.defined() &&
      (bias_table.value().rank() != 2 || bias_table.dim(0) != side * side || bias_table.dim(1) != heads)) {
    throw ValidationError("window_attention: bias table must be ((2*clip+1)^2, heads)");
  }
  auto rel = std::make_shared<std::vector<int32_t>>(relative_position_index(rows, cols, clip));
  const int64_t nn = g.n * g.n, ld = 3 * g.c;
  Buffer<T> bias;
  if (bias_table.defined()) bias = expand_bias(bias_table.value().data(), *rel, g.heads, g.n);

  // One uninitialized block per window, each fully written by attention_rows.
  // Per-window blocks stay below the allocator's mmap threshold.
  auto probs = std::make_shared<std::vector<std::unique_ptr<T[], AlignedDelete>>>(static_cast<size_t>(g.windows));
  for (auto& block : *probs) {
    block.reset(static_cast<T*>(::operator new[](static_cast<size_t>(g.heads * nn) * sizeof(T), kBlockAlign)));
  }
  Tensor<T> out({g.windows, g.n, g.c});
  for (int64_t wi = 0; wi < g.windows; ++wi) {
    const T* base = qkv.value().data() + wi * g.n * ld;
    for (int64_t h = 0; h < g.heads; ++h) {
      T* p = (*probs)[static_cast<size_t>(wi)].get() + h * nn;
      attention_rows(base, g, h, bias.empty() ? nullptr : bias.data() + h * nn, p);
      CStridedMap<T> v(base + 2 * g.c + h * g.dh, g.n, g.dh, Eigen::OuterStride<>(ld));
      StridedMap<T> o(out.data() + wi * g.n * g.c + h * g.dh, g.n, g.dh, Eigen::OuterStride<>(g.c));
      o.noalias() = CMapMat<T>(p, g.n, g.n) * v;
    }
  }

  Tensor<T> input = qkv.value();
  const bool has_bias = bias_table.defined();
  return Var<T>::from_op(std::move(out), {qkv, bias_table},
      [=, input = std::move(input)](ad::Node<T>& node) {
        Tensor<T> gqkv(input.shape());
        // Bias gradient summed per (head, i, j) first, scattered into the table at the end.
        Buffer<T> gbias;
        if (has_bias) gbias.assign(static_cast<size_t>(g.heads * nn), T(0));
        RowMat<T> ds(g.n, g.n);
        for (int64_t wi = 0; wi < g.windows; ++wi) {
          const T* base = input.data() + wi * g.n * ld;
          T* gbase = gqkv.data() + wi * g.n * ld;
          for (int64_t h = 0; h < g.heads; ++h) {
            CMapMat<T> p((*probs)[static_cast<size_t>(wi)].get() + h * nn, g.n, g.n);
            CStridedMap<T> q(base + h * g.dh, g.n, g.dh, Eigen::OuterStride<>(ld));
            CStridedMap<T> k(base + g.c + h * g.dh, g.n, g.dh, Eigen::OuterStride<>(ld));
            CStridedMap<T> v(base + 2 * g.c + h * g.dh, g.n, g.dh, Eigen::OuterStride<>(ld));
            CStridedMap<T> go(node.grad.data() + wi * g.n * g.c + h * g.dh, g.n, g.dh,
                              Eigen::OuterStride<>(g.c));
            StridedMap<T> gq(gbase + h * g.dh, g.n, g.dh, Eigen::OuterStride<>(ld));
            StridedMap<T> gk(gbase + g.c + h * g.dh, g.n, g.dh, Eigen::OuterStride<>(ld));
            StridedMap<T> gv(gbase + 2 * g.c + h * g.dh, g.n, g.dh, Eigen::OuterStride<>(ld));

            gv.noalias() = p.transpose() * go;
            ds.noalias() = go * v.transpose();
            const auto dot = (ds.array() * p.array()).rowwise().sum().eval();
            ds.array() = p.array() * (ds.array().colwise() - dot);
            if (has_bias) {
              Eigen::Map<RowArr<T>>(gbias.data() + h * nn, g.n, g.n) += ds.array();
            }
            gq.noalias() = g.scale * (ds * k);
            gk.noalias() = g.scale * (ds.transpose() * q);
          }
        }
        if (has_bias) {
          Tensor<T> gtable({side * side, g.heads});
          for (int64_t h = 0; h < g.heads; ++h) {
            for (int64_t i = 0; i < nn; ++i) {
              gtable[(*rel)[static_cast<size_t>(i)] * g.heads + h] += gbias[static_cast<size_t>(h * nn + i)];
            }
          }
          node.send(1, gtable);
        }
        node.send(0, gqkv);
      }, "window_attention");
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  double total = 0.0;
  for (T v : x.value().vec()) total += v;
  const int64_t count = x.value().numel();
  const Shape s = x.shape();
  return scalar_result<T>(static_cast<T>(total / static_cast<double>(count)), {x},
      [=](ad::Node<T>& node) {
        node.send(0, Tensor<T>(s, static_cast<T>(node.grad[0] / static_cast<T>(count))));
      }, "mean");
}

template <typename T>
Var<T> sum_squares(const Var<T>& x) {
  double total = 0.0;
  for (T v : x.value().vec()) total += static_cast<double>(v) * v;
  Tensor<T> input = x.value();
  return scalar_result<T>(static_cast<T>(total), {x}, [input = std::move(input)](ad::Node<T>& node) {
    Tensor<T> g = input;
    for (auto& v : g.vec()) v *= T(2) * node.grad[0];
    node.send(0, g);
  }, "sum_squares");
}

template <typename T>
Var<T> l1_loss(const Var<T>& x, const Var<T>& y) {
  require_same_shape(x.shape(), y.shape(), "l1_loss");
  const int64_t count = x.value().numel();
  Tensor<T> sign(x.shape());
  double total = 0.0;
  for (int64_t i = 0; i < count; ++i) {
    const T d = x.value()[i] - y.value()[i];
    total += std::abs(static_cast<double>(d));
    sign[i] = d > 0 ? T(1) : (d < 0 ? T(-1) : T(0));
  }
  return scalar_result<T>(static_cast<T>(total / static_cast<double>(count)), {x, y},
      [sign = std::move(sign), count](ad::Node<T>& node) {
        Tensor<T> g = sign;
        const T s = node.grad[0] / static_cast<T>(count);
        for (auto& v : g.vec()) v *= s;
        if (node.wants(1)) {
          Tensor<T> neg = g;
          for (auto& v : neg.vec()) v = -v;
          node.send(1, neg);
        }
        node.send(0, g);
      }, "l1_loss");
}

template <typename T>
Var<T> ssim_index(const Var<T>& x, const Var<T>& y, const SsimOptions& options) {
  const double value = ssim(x.value(), y.value(), options);
  Tensor<T> xv = x.value(), yv = y.value();
  return scalar_result<T>(static_cast<T>(value), {x, y},
      [=, xv = std::move(xv), yv = std::move(yv)](ad::Node<T>& node) {
        auto grads = ssim_backward(xv, yv, options, static_cast<double>(node.grad[0]));
        node.send(0, grads.dx);
        node.send(1, grads.dy);
      }, "ssim");
}

#define GFORMER_INSTANTIATE(T)                                                                   \
  template Var<T> add(const Var<T>&, const Var<T>&);                                             \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                             \
  template Var<T> scale(const Var<T>&, T);                                                       \
  template Var<T> detach(const Var<T>&);                                                         \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                                 \
  template Var<T> gelu(const Var<T>&);                                                           \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&);                           \
  template Var<T> instance_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                 \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                    \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                           \
  template Var<T> to_tokens(const Var<T>&);                                                      \
  template Var<T> from_tokens(const Var<T>&, int64_t, int64_t);                                  \
  template Var<T> subsample(const Var<T>&, int64_t);                                             \
  template Var<T> inverse_subsample(const Var<T>&, int64_t, int64_t, int64_t);                   \
  template Var<T> rotational_shift(const Var<T>&, double);                                       \
  template Var<T> cyclic_shift(const Var<T>&, int64_t, int64_t);                                 \
  template Var<T> window_attention_core(const Var<T>&, int64_t, const Var<T>&, int64_t, int64_t, \
                                        int64_t);                                                \
  template Tensor<T> attention_probabilities(const Tensor<T>&, int64_t, const Tensor<T>*,        \
                                             int64_t, int64_t, int64_t);                         \
  template Var<T> mean(const Var<T>&);                                                           \
  template Var<T> sum_squares(const Var<T>&);                                                    \
  template Var<T> l1_loss(const Var<T>&, const Var<T>&);                                         \
  template Var<T> ssim_index(const Var<T>&, const Var<T>&, const SsimOptions&);

GFORMER_INSTANTIATE(float)
GFORMER_INSTANTIATE(double)
#undef GFORMER_INSTANTIATE

}  // namespace gformer::ops
