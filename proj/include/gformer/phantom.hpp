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

#include "gformer/volume_io.hpp"

namespace gformer::phantom {

struct PhantomConfig {
  int64_t size = 64;    // in-plane pixels, square
  int64_t slices = 8;
  int64_t lesions_min = 1;
  int64_t lesions_max = 4;
  double amplitude_min = 0.3;
  double amplitude_max = 1.0;
  double exponent = 1.5;     // enhancement grows as dose^exponent
  double noise_sigma = 0.02;
  double gamma_data = 0.1;   // dose of the low-dose rendering
  uint64_t seed = 0;
  double test_fraction = 0.2;

  void validate() const;
};

struct PhantomStudy {
  io::Volume pre;
  io::Volume enhancement;  // E >= 0, zero outside mask
  io::Volume mask;
  PhantomConfig config;
  uint64_t case_seed = 0;
};

// splitmix64 finalizer; used to derive independent per-case / per-render seeds.
uint64_t mix_seed(uint64_t a, uint64_t b);

PhantomStudy generate_phantom(const PhantomConfig& config, uint64_t case_seed);

// pre + dose^p * E, plus Gaussian noise (sigma from the config) where the head is.
io::Volume render_dose(const PhantomStudy& study, double dose, uint64_t noise_seed);

// Writes <out_root>/<case_id>/{pre,low,post,mask,enhancement}.f32raw and
// manifest.json. The last round(n * test_fraction) cases form the test split.
// Cases are independent; `threads` > 1 generates them concurrently with
// identical output.
io::DatasetManifest generate_dataset(const PhantomConfig& config, int64_t n_cases,
                                     const std::filesystem::path& out_root, int threads = 1);

}  // namespace gformer::phantom
