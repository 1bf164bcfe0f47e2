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

#include "gformer/phantom.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <mutex>
#include <thread>

#include "gformer/error.hpp"

namespace gformer::phantom {

void PhantomConfig::validate() const {
  if (size < 16 || size % 16 != 0) {
    throw ValidationError("phantom: size " + std::to_string(size) + " must be a positive multiple of 16");
  }
  if (slices < 1) throw ValidationError("phantom: slices must be >= 1");
  if (lesions_min < 0 || lesions_max < lesions_min) throw ValidationError("phantom: bad lesion count range");
  if (!(amplitude_min > 0.0) || amplitude_max < amplitude_min) {
    throw ValidationError("phantom: amplitude range must be positive");
  }
  if (!(exponent >= 1.0)) throw ValidationError("phantom: exponent must be >= 1");
  if (!(noise_sigma >= 0.0)) throw ValidationError("phantom: noise sigma must be >= 0");
  if (!(gamma_data > 0.0 && gamma_data <= 1.0)) throw ValidationError("phantom: gamma_data must be in (0, 1]");
  if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) throw ValidationError("phantom: test fraction must be in [0, 1]");
}

uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

namespace {

// In-place separable Gaussian blur, zero boundary, along each axis.
void blur(std::vector<double>& v, const std::array<int64_t, 3>& d, double sigma) {
  const int64_t r = static_cast<int64_t>(std::ceil(3 * sigma));
  std::vector<double> k(static_cast<size_t>(2 * r + 1));
  for (int64_t i = -r; i <= r; ++i) k[static_cast<size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  const std::array<int64_t, 3> strides{d[1] * d[2], d[2], 1};
  std::vector<double> out(v.size());
  for (int axis = 0; axis < 3; ++axis) {
    const int64_t n = d[static_cast<size_t>(axis)], s = strides[static_cast<size_t>(axis)];
    for (int64_t idx = 0; idx < static_cast<int64_t>(v.size()); ++idx) {
      const int64_t pos = (idx / s) % n;
      double acc = 0.0;
      for (int64_t t = -r; t <= r; ++t) {
        const int64_t q = pos + t;
        if (q < 0 || q >= n) continue;
        acc += k[static_cast<size_t>(t + r)] * v[static_cast<size_t>(idx + t * s)];
      }
      out[static_cast<size_t>(idx)] = acc;
    }
    v.swap(out);
  }
}

}  // namespace

PhantomStudy generate_phantom(const PhantomConfig& config, uint64_t case_seed) {
  config.validate();
  std::mt19937_64 rng(mix_seed(config.seed, case_seed));
  std::uniform_real_distribution<double> u(0.0, 1.0);

  io::VolumeHeader h;
  h.dims = {config.size, config.size, config.slices};
  h.spacing = {1.0, 1.0, 2.0};
  h.case_id = "case_" + std::to_string(case_seed);
  PhantomStudy study{io::Volume(h), io::Volume(h), io::Volume(h), config, case_seed};

  const double n = static_cast<double>(config.size);
  const double cx = n / 2 + (u(rng) - 0.5) * 0.06 * n, cy = n / 2 + (u(rng) - 0.5) * 0.06 * n;
  const double ax = n * (0.34 + 0.06 * u(rng)), ay = n * (0.28 + 0.06 * u(rng));
  const double az = 0.5 * static_cast<double>(config.slices) + 1.0;
  const double cz = 0.5 * static_cast<double>(config.slices - 1);
  const double tilt = (u(rng) - 0.5) * 0.4;

  // Smooth anatomy texture: blurred white noise, rescaled to zero mean / unit spread.
  std::vector<double> tex(static_cast<size_t>(h.voxel_count()));
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& t : tex) t = g(rng);
  blur(tex, h.dims, n / 16.0);
  double lo = *std::min_element(tex.begin(), tex.end()), hi = *std::max_element(tex.begin(), tex.end());
  if (hi - lo < 1e-12) hi = lo + 1.0;

  const double ct = std::cos(tilt), st = std::sin(tilt);
  auto radius = [&](int64_t i, int64_t j, int64_t k) {
    const double x = static_cast<double>(i) - cx, y = static_cast<double>(j) - cy;
    const double xr = ct * x + st * y, yr = -st * x + ct * y;
    const double z = (static_cast<double>(k) - cz) / az;
    return std::sqrt((xr / ax) * (xr / ax) + (yr / ay) * (yr / ay) + z * z);
  };

  for (int64_t i = 0; i < config.size; ++i) {
    for (int64_t j = 0; j < config.size; ++j) {
      for (int64_t k = 0; k < config.slices; ++k) {
        const double r = radius(i, j, k);
        const size_t idx = static_cast<size_t>((i * config.size + j) * config.slices + k);
        if (r <= 1.0) {
          study.mask.data[idx] = 1.0f;
          const double t = (tex[idx] - lo) / (hi - lo);
          study.pre.data[idx] = static_cast<float>(0.6 + 0.6 * t);
        } else if (r <= 1.12) {
          study.pre.data[idx] = 0.45f;  // skull ring, outside the brain mask
        }
      }
    }
  }

  // Enhancing lesions: truncated Gaussian bumps centred inside the mask.
  std::uniform_int_distribution<int64_t> count_dist(config.lesions_min, config.lesions_max);
  const int64_t lesions = count_dist(rng);
  std::vector<double> e(static_cast<size_t>(h.voxel_count()), 0.0);
  for (int64_t l = 0; l < lesions; ++l) {
    double bx = 0, by = 0, bz = 0;
    for (int attempt = 0; attempt < 100; ++attempt) {
      bx = cx + (u(rng) * 2 - 1) * ax * 0.7;
      by = cy + (u(rng) * 2 - 1) * ay * 0.7;
      bz = u(rng) * static_cast<double>(config.slices - 1);
      if (radius(static_cast<int64_t>(bx), static_cast<int64_t>(by), static_cast<int64_t>(bz)) < 0.75) break;
    }
    const double sigma = n * (0.025 + 0.035 * u(rng));
    const double sigma_z = std::max(0.75, sigma / 2.0);
    const double amp = config.amplitude_min + (config.amplitude_max - config.amplitude_min) * u(rng);
    const double elong = 0.7 + 0.6 * u(rng);
    for (int64_t i = 0; i < config.size; ++i) {
      for (int64_t j = 0; j < config.size; ++j) {
        for (int64_t k = 0; k < config.slices; ++k) {
          const double dx = (static_cast<double>(i) - bx) / (sigma * elong);
          const double dy = (static_cast<double>(j) - by) / (sigma / elong);
          const double dz = (static_cast<double>(k) - bz) / sigma_z;
          const double q = dx * dx + dy * dy + dz * dz;
          if (q > 4.0) continue;  // truncate at 2 sigma
          const double bump = std::exp(-0.5 * q) - std::exp(-2.0);
          e[static_cast<size_t>((i * config.size + j) * config.slices + k)] += amp * bump / (1.0 - std::exp(-2.0));
        }
      }
    }
  }
  for (size_t idx = 0; idx < e.size(); ++idx) {
    study.enhancement.data[idx] = study.mask.data[idx] > 0.0f ? static_cast<float>(e[idx]) : 0.0f;
  }
  return study;
}

io::Volume render_dose(const PhantomStudy& study, double dose, uint64_t noise_seed) {
  if (!(dose >= 0.0 && dose <= 1.0)) throw ValidationError("render_dose: dose must lie in [0, 1]");
  io::Volume out = study.pre;
  const float w = static_cast<float>(std::pow(dose, study.config.exponent));
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += w * study.enhancement.data[i];
  if (study.config.noise_sigma > 0.0) {
    std::mt19937_64 rng(mix_seed(mix_seed(study.config.seed, study.case_seed), noise_seed));
    std::normal_distribution<double> g(0.0, study.config.noise_sigma);
    for (size_t i = 0; i < out.data.size(); ++i) {
      const double noise = g(rng);
      if (study.pre.data[i] > 0.0f) out.data[i] = std::max(0.0f, out.data[i] + static_cast<float>(noise));
    }
  }
  return out;
}

io::DatasetManifest generate_dataset(const PhantomConfig& config, int64_t n_cases, const std::filesystem::path& out_root,
                                     int threads) {
  config.validate();
  if (n_cases < 1) throw ValidationError("phantom: need at least one case");
  if (threads < 1) throw ValidationError("phantom: threads must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(out_root, ec);
  if (ec || !std::filesystem::is_directory(out_root)) {
    throw IoError("cannot create dataset directory '" + out_root.string() + "'");
  }
  const auto n_test = static_cast<int64_t>(std::llround(static_cast<double>(n_cases) * config.test_fraction));

  io::DatasetManifest manifest;
  manifest.root = out_root;
  manifest.cases.resize(static_cast<size_t>(n_cases));
  auto make_case = [&](int64_t c) {
    std::ostringstream id;
    id << "case_" << std::setw(3) << std::setfill('0') << c;
    const auto dir = out_root / id.str();
    std::error_code dir_ec;
    std::filesystem::create_directories(dir, dir_ec);
    if (dir_ec) throw IoError("cannot create '" + dir.string() + "'");

    auto study = generate_phantom(config, static_cast<uint64_t>(c));
    for (auto* v : {&study.pre, &study.enhancement, &study.mask}) v->header.case_id = id.str();
    io::write_volume(render_dose(study, 0.0, 0), dir / "pre.f32raw");
    io::write_volume(render_dose(study, config.gamma_data, 1), dir / "low.f32raw");
    io::write_volume(render_dose(study, 1.0, 2), dir / "post.f32raw");
    io::write_volume(study.mask, dir / "mask.f32raw");
    io::write_volume(study.enhancement, dir / "enhancement.f32raw");

    io::CaseEntry& e = manifest.cases[static_cast<size_t>(c)];
    e.case_id = id.str();
    e.split = c >= n_cases - n_test ? "test" : "train";
    e.pre = dir / "pre.f32raw";
    e.low = dir / "low.f32raw";
    e.post = dir / "post.f32raw";
    e.mask = dir / "mask.f32raw";
    e.enhancement = dir / "enhancement.f32raw";
    e.exponent = config.exponent;
    e.gamma_data = config.gamma_data;
  };

  if (threads == 1) {
    for (int64_t c = 0; c < n_cases; ++c) make_case(c);
  } else {
    std::atomic<int64_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr error;
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (int64_t c = next++; c < n_cases; c = next++) {
          try {
            make_case(c);
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
  }
  io::write_manifest(manifest, out_root / "manifest.json");
  return manifest;
}

}  // namespace gformer::phantom
