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

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gformer/tensor.hpp"

namespace gformer::io {

namespace fs = std::filesystem;

struct VolumeHeader {
  std::array<int64_t, 3> dims{1, 1, 1};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  // Stored values = (original + intensity_offset) * intensity_scale.
  double intensity_offset = 0.0;
  double intensity_scale = 1.0;
  std::string case_id;

  int64_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
  void validate() const;
  friend bool operator==(const VolumeHeader&, const VolumeHeader&) = default;
};

// Row-major scalar volume: index (i, j, k) maps to (i * dims[1] + j) * dims[2] + k.
struct Volume {
  VolumeHeader header;
  std::vector<float> data;

  Volume() = default;
  explicit Volume(VolumeHeader h, float fill = 0.0f);

  float& at(int64_t i, int64_t j, int64_t k) {
    return data[static_cast<size_t>((i * header.dims[1] + j) * header.dims[2] + k)];
  }
  float at(int64_t i, int64_t j, int64_t k) const {
    return data[static_cast<size_t>((i * header.dims[1] + j) * header.dims[2] + k)];
  }
  void validate() const;
  friend bool operator==(const Volume&, const Volume&) = default;
};

// Raw little-endian float32 payload at `path`, JSON header in the sidecar
// `<stem>.meta.json` beside it.
fs::path sidecar_path(const fs::path& raw_path);
Volume read_volume(const fs::path& path);
void write_volume(const Volume& volume, const fs::path& path);

// Mean over strictly positive voxels.
double positive_mean(std::span<const float> values);

// Scale so that the positive-voxel mean becomes `target_mean`; the factor is
// folded into header.intensity_scale.
Volume mean_normalize(const Volume& volume, double target_mean = 1.0);
double normalization_factor(const Volume& reference, double target_mean = 1.0);
Volume apply_scale(const Volume& volume, double factor);

// One co-registered 2D position of a study. Images are (height, width).
struct SliceSample {
  std::string case_id;
  int64_t index = 0;
  Tensor<float> pre;
  std::optional<Tensor<float>> low;
  Tensor<float> post;
  Tensor<float> mask;
  std::optional<Tensor<float>> enhancement;  // phantom ground truth, if known

  int64_t height() const { return pre.dim(0); }
  int64_t width() const { return pre.dim(1); }
};

struct SliceVolumes {
  const Volume* pre = nullptr;
  const Volume* low = nullptr;
  const Volume* post = nullptr;
  const Volume* mask = nullptr;  // absent: mask = (pre > 0)
  const Volume* enhancement = nullptr;
};

struct SliceResult {
  std::vector<SliceSample> samples;
  int64_t dropped = 0;
};

// One sample per index along `axis`; slices whose mask is all zero are
// dropped. The remaining two axes, in order, become (height, width).
SliceResult extract_slices(const SliceVolumes& volumes, int axis);

Tensor<float> extract_plane(const Volume& volume, int axis, int64_t index);

struct CaseEntry {
  std::string case_id;
  std::string split;  // "train" | "test"
  fs::path pre;
  std::optional<fs::path> low;
  fs::path post;
  std::optional<fs::path> mask;
  std::optional<fs::path> enhancement;
  // Phantom generation parameters, when the case is synthetic.
  std::optional<double> exponent;
  std::optional<double> gamma_data;
};

struct DatasetManifest {
  fs::path root;
  std::vector<CaseEntry> cases;

  std::vector<const CaseEntry*> split(const std::string& tag) const;
  const CaseEntry& find(const std::string& case_id) const;
};

// Accepts the manifest file or the dataset directory holding manifest.json.
// Paths in the file are relative to the root; they are resolved on load.
DatasetManifest load_manifest(const fs::path& path);
void write_manifest(const DatasetManifest& manifest, const fs::path& path);

// Loaded, jointly normalized study. All volumes share one scale factor,
// derived from the pre-contrast volume.
struct Study {
  std::string case_id;
  Volume pre;
  std::optional<Volume> low;
  Volume post;
  Volume mask;
  std::optional<Volume> enhancement;
  double scale = 1.0;
};

Study load_study(const CaseEntry& entry, bool normalize = true);

}  // namespace gformer::io
