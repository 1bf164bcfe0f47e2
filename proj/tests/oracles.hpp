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

// Straightforward scalar re-implementations used as references.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "gformer/tensor.hpp"

namespace gformer::test {

// Direct evaluation of the centred rotation with floor gather and zero fill.
template <typename T>
Tensor<T> rotate_oracle(const Tensor<T>& m, double degrees) {
  const int64_t b = m.dim(0), c = m.dim(1), h = m.dim(2), w = m.dim(3);
  Tensor<T> out(m.shape());
  const double rad = degrees * std::numbers::pi / 180.0;
  for (int64_t p = 0; p < b; ++p)
    for (int64_t q = 0; q < c; ++q)
      for (int64_t x = 0; x < h; ++x)
        for (int64_t y = 0; y < w; ++y) {
          const double xp = std::cos(rad) * static_cast<double>(x - h / 2) -
                            std::sin(rad) * static_cast<double>(y - w / 2) + static_cast<double>(h / 2);
          const double yp = std::sin(rad) * static_cast<double>(x - h / 2) +
                            std::cos(rad) * static_cast<double>(y - w / 2) + static_cast<double>(w / 2);
          if (xp >= 0 && xp < h && yp >= 0 && yp < w) {
            out.at(p, q, x, y) = m.at(p, q, static_cast<int64_t>(std::floor(xp)),
                                      static_cast<int64_t>(std::floor(yp)));
          }
        }
  return out;
}

// Direct 2D-window SSIM: for each valid window position, weighted moments
// from the full (non-separable) normalized Gaussian window.
inline double ssim_oracle(const std::vector<double>& x, const std::vector<double>& y, int64_t h, int64_t w,
                          int window, double sigma, double k1, double k2, double range) {
  int win = window;
  while (win > 1 && (win > h || win > w)) win -= 2;
  const int r = win / 2;
  std::vector<double> kern(static_cast<size_t>(win * win));
  double total = 0.0;
  for (int a = 0; a < win; ++a) {
    for (int b = 0; b < win; ++b) {
      const double v = std::exp(-((a - r) * (a - r) + (b - r) * (b - r)) / (2 * sigma * sigma));
      kern[static_cast<size_t>(a * win + b)] = v;
      total += v;
    }
  }
  for (auto& v : kern) v /= total;
  const double c1 = (k1 * range) * (k1 * range), c2 = (k2 * range) * (k2 * range);
  double acc = 0.0;
  int64_t count = 0;
  for (int64_t i = 0; i + win <= h; ++i) {
    for (int64_t j = 0; j + win <= w; ++j) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int a = 0; a < win; ++a) {
        for (int b = 0; b < win; ++b) {
          const double g = kern[static_cast<size_t>(a * win + b)];
          const double xv = x[static_cast<size_t>((i + a) * w + j + b)];
          const double yv = y[static_cast<size_t>((i + a) * w + j + b)];
          mx += g * xv;
          my += g * yv;
          sxx += g * xv * xv;
          syy += g * yv * yv;
          sxy += g * xv * yv;
        }
      }
      const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
      acc += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

inline double psnr_oracle(const std::vector<double>& x, const std::vector<double>& y, double peak) {
  double s = 0;
  for (size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  s /= static_cast<double>(x.size());
  if (s < 1e-12) return 99.0;
  return 20.0 * std::log10(peak) - 10.0 * std::log10(s);
}

inline double rmse_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  double s = 0;
  for (size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return std::sqrt(s / static_cast<double>(x.size()));
}

inline double l1_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  double s = 0;
  for (size_t i = 0; i < x.size(); ++i) s += std::abs(x[i] - y[i]);
  return s / static_cast<double>(x.size());
}

// Least-squares slope of (image - pre) against e over voxels where mask > 0.
inline double dose_fit_oracle(const std::vector<double>& image, const std::vector<double>& pre,
                              const std::vector<double>& e, const std::vector<double>& mask) {
  double num = 0, den = 0;
  for (size_t i = 0; i < image.size(); ++i) {
    if (mask[i] <= 0) continue;
    num += (image[i] - pre[i]) * e[i];
    den += e[i] * e[i];
  }
  return den > 0 ? num / den : 0.0;
}

template <typename C>
std::vector<double> to_double(const C& c) {
  return std::vector<double>(c.begin(), c.end());
}

}  // namespace gformer::test
