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

#include "gformer/ssim.hpp"

#include <cmath>
#include <string>

namespace gformer {

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<size_t>(size));
  const double r = (size - 1) / 2.0;
  double total = 0.0;
  for (int i = 0; i < size; ++i) {
    w[static_cast<size_t>(i)] = std::exp(-(i - r) * (i - r) / (2.0 * sigma * sigma));
    total += w[static_cast<size_t>(i)];
  }
  for (auto& v : w) v /= total;
  return w;
}

int effective_window(const SsimOptions& options, int64_t height, int64_t width) {
  int64_t size = std::min<int64_t>({options.window, height, width});
  if (size % 2 == 0) --size;
  if (size < 1) throw ValidationError("ssim: empty image");
  return static_cast<int>(size);
}

namespace {

// Separable valid-region filtering of one plane.
void filter_valid(const double* in, int64_t h, int64_t w, const std::vector<double>& g,
                  std::vector<double>& tmp, double* out) {
  const auto n = static_cast<int64_t>(g.size());
  const int64_t oh = h - n + 1, ow = w - n + 1;
  tmp.assign(static_cast<size_t>(h * ow), 0.0);
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int64_t u = 0; u < n; ++u) acc += g[static_cast<size_t>(u)] * in[y * w + x + u];
      tmp[static_cast<size_t>(y * ow + x)] = acc;
    }
  }
  for (int64_t y = 0; y < oh; ++y) {
    for (int64_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int64_t u = 0; u < n; ++u) acc += g[static_cast<size_t>(u)] * tmp[static_cast<size_t>((y + u) * ow + x)];
      out[y * ow + x] = acc;
    }
  }
}

// Adjoint of filter_valid: spreads a valid-region map back onto the plane.
void filter_valid_adjoint(const double* in, int64_t h, int64_t w, const std::vector<double>& g,
                          std::vector<double>& tmp, double* out) {
  const auto n = static_cast<int64_t>(g.size());
  const int64_t oh = h - n + 1, ow = w - n + 1;
  tmp.assign(static_cast<size_t>(h * ow), 0.0);
  for (int64_t y = 0; y < oh; ++y) {
    for (int64_t u = 0; u < n; ++u) {
      const double gu = g[static_cast<size_t>(u)];
      for (int64_t x = 0; x < ow; ++x) tmp[static_cast<size_t>((y + u) * ow + x)] += gu * in[y * ow + x];
    }
  }
  for (int64_t i = 0; i < h * w; ++i) out[i] = 0.0;
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < ow; ++x) {
      const double v = tmp[static_cast<size_t>(y * ow + x)];
      for (int64_t u = 0; u < n; ++u) out[y * w + x + u] += g[static_cast<size_t>(u)] * v;
    }
  }
}

struct PlaneGeometry {
  int64_t planes, h, w, oh, ow;
};

template <typename T>
PlaneGeometry geometry(const Tensor<T>& x, const Tensor<T>& y, const std::vector<double>& g) {
  require_same_shape(x.shape(), y.shape(), "ssim");
  if (x.rank() < 2) throw ValidationError("ssim: expected an image of rank >= 2");
  PlaneGeometry geo{};
  geo.h = x.dim(x.rank() - 2);
  geo.w = x.dim(x.rank() - 1);
  geo.planes = x.numel() / std::max<int64_t>(1, geo.h * geo.w);
  const auto n = static_cast<int64_t>(g.size());
  geo.oh = geo.h - n + 1;
  geo.ow = geo.w - n + 1;
  return geo;
}

template <typename T>
double run(const Tensor<T>& x, const Tensor<T>& y, const SsimOptions& options, double upstream,
           Tensor<T>* dx, Tensor<T>* dy) {
  if (!(options.dynamic_range > 0.0)) throw ValidationError("ssim: dynamic range must be positive");
  const auto g = gaussian_window(effective_window(options, x.dim(x.rank() - 2), x.dim(x.rank() - 1)),
                                 options.sigma);
  const auto geo = geometry(x, y, g);
  const double c1 = (options.k1 * options.dynamic_range) * (options.k1 * options.dynamic_range);
  const double c2 = (options.k2 * options.dynamic_range) * (options.k2 * options.dynamic_range);
  const int64_t hw = geo.h * geo.w, ohw = geo.oh * geo.ow;
  const double inv_count = 1.0 / static_cast<double>(geo.planes * ohw);

  std::vector<double> px(hw), py(hw), pxx(hw), pyy(hw), pxy(hw), tmp;
  std::vector<double> mx(ohw), my(ohw), exx(ohw), eyy(ohw), exy(ohw);
  std::vector<double> ax, ay, bx, by, cxy, spread;
  if (dx) {
    *dx = Tensor<T>(x.shape());
    *dy = Tensor<T>(y.shape());
    ax.resize(ohw), ay.resize(ohw), bx.resize(ohw), by.resize(ohw), cxy.resize(ohw);
    spread.resize(hw);
  }

  double total = 0.0;
  for (int64_t p = 0; p < geo.planes; ++p) {
    const T* xs = x.data() + p * hw;
    const T* ys = y.data() + p * hw;
    for (int64_t i = 0; i < hw; ++i) {
      const double a = static_cast<double>(xs[i]), b = static_cast<double>(ys[i]);
      px[i] = a, py[i] = b, pxx[i] = a * a, pyy[i] = b * b, pxy[i] = a * b;
    }
    filter_valid(px.data(), geo.h, geo.w, g, tmp, mx.data());
    filter_valid(py.data(), geo.h, geo.w, g, tmp, my.data());
    filter_valid(pxx.data(), geo.h, geo.w, g, tmp, exx.data());
    filter_valid(pyy.data(), geo.h, geo.w, g, tmp, eyy.data());
    filter_valid(pxy.data(), geo.h, geo.w, g, tmp, exy.data());

    double plane_sum = 0.0;
    for (int64_t i = 0; i < ohw; ++i) {
      const double mxy = mx[i] * my[i];
      const double a1 = 2.0 * mxy + c1;
      const double a2 = 2.0 * (exy[i] - mxy) + c2;
      const double b1 = mx[i] * mx[i] + my[i] * my[i] + c1;
      const double b2 = (exx[i] - mx[i] * mx[i]) + (eyy[i] - my[i] * my[i]) + c2;
      const double den = b1 * b2;
      const double s = (a1 * a2) / den;
      plane_sum += s;
      if (dx) {
        const double gs = upstream * inv_count;
        ax[i] = gs * ((2.0 * my[i] * (a2 - a1)) / den - s * (2.0 * mx[i] * (b2 - b1)) / den);
        ay[i] = gs * ((2.0 * mx[i] * (a2 - a1)) / den - s * (2.0 * my[i] * (b2 - b1)) / den);
        bx[i] = gs * (-s / b2);
        by[i] = bx[i];
        cxy[i] = gs * (2.0 * a1 / den);
      }
    }
    total += plane_sum;

    if (dx) {
      T* gx = dx->data() + p * hw;
      T* gy = dy->data() + p * hw;
      std::vector<double> acc_x(hw, 0.0), acc_y(hw, 0.0);
      filter_valid_adjoint(ax.data(), geo.h, geo.w, g, tmp, spread.data());
      for (int64_t i = 0; i < hw; ++i) acc_x[i] += spread[i];
      filter_valid_adjoint(ay.data(), geo.h, geo.w, g, tmp, spread.data());
      for (int64_t i = 0; i < hw; ++i) acc_y[i] += spread[i];
      filter_valid_adjoint(bx.data(), geo.h, geo.w, g, tmp, spread.data());
      for (int64_t i = 0; i < hw; ++i) acc_x[i] += 2.0 * px[i] * spread[i];
      filter_valid_adjoint(by.data(), geo.h, geo.w, g, tmp, spread.data());
      for (int64_t i = 0; i < hw; ++i) acc_y[i] += 2.0 * py[i] * spread[i];
      filter_valid_adjoint(cxy.data(), geo.h, geo.w, g, tmp, spread.data());
      for (int64_t i = 0; i < hw; ++i) {
        acc_x[i] += py[i] * spread[i];
        acc_y[i] += px[i] * spread[i];
        gx[i] = static_cast<T>(acc_x[i]);
        gy[i] = static_cast<T>(acc_y[i]);
      }
    }
  }
  return total * inv_count;
}

}  // namespace

template <typename T>
double ssim(const Tensor<T>& x, const Tensor<T>& y, const SsimOptions& options) {
  return run<T>(x, y, options, 0.0, nullptr, nullptr);
}

template <typename T>
SsimGradient<T> ssim_backward(const Tensor<T>& x, const Tensor<T>& y, const SsimOptions& options,
                              double upstream) {
  SsimGradient<T> out;
  out.value = run<T>(x, y, options, upstream, &out.dx, &out.dy);
  return out;
}

template double ssim(const Tensor<float>&, const Tensor<float>&, const SsimOptions&);
template double ssim(const Tensor<double>&, const Tensor<double>&, const SsimOptions&);
template SsimGradient<float> ssim_backward(const Tensor<float>&, const Tensor<float>&,
                                           const SsimOptions&, double);
template SsimGradient<double> ssim_backward(const Tensor<double>&, const Tensor<double>&,
                                            const SsimOptions&, double);

}  // namespace gformer
