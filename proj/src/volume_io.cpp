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

#include "gformer/volume_io.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace gformer::io {

using nlohmann::json;

void VolumeHeader::validate() const {
  for (int i = 0; i < 3; ++i) {
    if (dims[static_cast<size_t>(i)] < 1) throw ValidationError("volume: dims must be >= 1");
    if (!(spacing[static_cast<size_t>(i)] > 0.0) || !std::isfinite(spacing[static_cast<size_t>(i)])) {
      throw ValidationError("volume: spacing must be positive");
    }
  }
  if (!std::isfinite(intensity_offset) || !std::isfinite(intensity_scale) || intensity_scale == 0.0) {
    throw ValidationError("volume: invalid intensity offset/scale");
  }
}

Volume::Volume(VolumeHeader h, float fill) : header(std::move(h)) {
  header.validate();
  data.assign(static_cast<size_t>(header.voxel_count()), fill);
}

void Volume::validate() const {
  header.validate();
  if (static_cast<int64_t>(data.size()) != header.voxel_count()) {
    throw ValidationError("volume: payload length does not match dims");
  }
  for (float v : data) {
    if (!std::isfinite(v)) throw NumericalError("volume '" + header.case_id + "' has non-finite values");
  }
}

fs::path sidecar_path(const fs::path& raw_path) {
  fs::path p = raw_path;
  p.replace_extension(".meta.json");
  return p;
}

Volume read_volume(const fs::path& path) {
  const fs::path meta = sidecar_path(path);
  if (!fs::exists(path)) throw IoError("missing volume file '" + path.string() + "'");
  if (!fs::exists(meta)) throw IoError("missing volume header '" + meta.string() + "'");

  VolumeHeader h;
  try {
    std::ifstream ms(meta);
    const json j = json::parse(ms);
    for (size_t i = 0; i < 3; ++i) {
      h.dims[i] = j.at("dims").at(i).get<int64_t>();
      h.spacing[i] = j.at("spacing").at(i).get<double>();
    }
    h.intensity_offset = j.value("intensity_offset", 0.0);
    h.intensity_scale = j.value("intensity_scale", 1.0);
    h.case_id = j.value("case_id", std::string());
    if (j.value("dtype", std::string("float32")) != "float32") {
      throw IoError("'" + meta.string() + "': only float32 payloads are supported");
    }
  } catch (const json::exception& e) {
    throw IoError("malformed header '" + meta.string() + "': " + e.what());
  }
  h.validate();

  const auto expected = static_cast<uintmax_t>(h.voxel_count()) * 4u;
  const auto actual = fs::file_size(path);
  if (actual < expected) {
    throw IoError("truncated payload in '" + path.string() + "': " + std::to_string(actual) +
                  " bytes, expected " + std::to_string(expected));
  }
  if (actual > expected) {
    throw IoError("payload of '" + path.string() + "' is longer than its header dims");
  }

  Volume v;
  v.header = h;
  v.data.resize(static_cast<size_t>(h.voxel_count()));
  std::ifstream is(path, std::ios::binary);
  std::vector<unsigned char> bytes(static_cast<size_t>(expected));
  if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(expected))) {
    throw IoError("truncated payload in '" + path.string() + "'");
  }
  for (size_t i = 0; i < v.data.size(); ++i) {
    const uint32_t u = static_cast<uint32_t>(bytes[4 * i]) | (static_cast<uint32_t>(bytes[4 * i + 1]) << 8) |
                       (static_cast<uint32_t>(bytes[4 * i + 2]) << 16) |
                       (static_cast<uint32_t>(bytes[4 * i + 3]) << 24);
    v.data[i] = std::bit_cast<float>(u);
  }
  v.validate();
  return v;
}

void write_volume(const Volume& volume, const fs::path& path) {
  volume.validate();
  if (path.has_parent_path() && !fs::is_directory(path.parent_path())) {
    throw IoError("cannot write '" + path.string() + "': parent directory does not exist");
  }
  std::vector<unsigned char> bytes(volume.data.size() * 4);
  for (size_t i = 0; i < volume.data.size(); ++i) {
    const auto u = std::bit_cast<uint32_t>(volume.data[i]);
    for (size_t b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<unsigned char>((u >> (8 * b)) & 0xffu);
  }
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed for '" + path.string() + "'");
  }
  const auto& h = volume.header;
  json j;
  j["dims"] = h.dims;
  j["spacing"] = h.spacing;
  j["intensity_offset"] = h.intensity_offset;
  j["intensity_scale"] = h.intensity_scale;
  j["case_id"] = h.case_id;
  j["dtype"] = "float32";
  j["byte_order"] = "little";
  std::ofstream ms(sidecar_path(path), std::ios::trunc);
  if (!ms) throw IoError("cannot open '" + sidecar_path(path).string() + "' for writing");
  ms << j.dump(2) << '\n';
  if (!ms) throw IoError("write failed for '" + sidecar_path(path).string() + "'");
}

double positive_mean(std::span<const float> values) {
  double total = 0.0;
  int64_t count = 0;
  for (float v : values) {
    if (v > 0.0f) {
      total += v;
      ++count;
    }
  }
  if (count == 0) throw ValidationError("normalization: volume has no positive voxels");
  return total / static_cast<double>(count);
}

double normalization_factor(const Volume& reference, double target_mean) {
  if (!(target_mean > 0.0)) throw ValidationError("normalization: target mean must be positive");
  return target_mean / positive_mean(reference.data);
}

Volume apply_scale(const Volume& volume, double factor) {
  Volume out = volume;
  for (auto& v : out.data) v = static_cast<float>(static_cast<double>(v) * factor);
  out.header.intensity_scale *= factor;
  return out;
}

Volume mean_normalize(const Volume& volume, double target_mean) {
  return apply_scale(volume, normalization_factor(volume, target_mean));
}

Tensor<float> extract_plane(const Volume& volume, int axis, int64_t index) {
  if (axis < 0 || axis > 2) throw ValidationError("slice axis must be 0, 1 or 2");
  const auto& d = volume.header.dims;
  if (index < 0 || index >= d[static_cast<size_t>(axis)]) throw ValidationError("slice index out of range");
  const int64_t rows = axis == 0 ? d[1] : d[0];
  const int64_t cols = axis == 2 ? d[1] : d[2];
  Tensor<float> plane({rows, cols});
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) {
      float v = 0.0f;
      switch (axis) {
        case 0: v = volume.at(index, r, c); break;
        case 1: v = volume.at(r, index, c); break;
        default: v = volume.at(r, c, index); break;
      }
      plane[r * cols + c] = v;
    }
  }
  return plane;
}

SliceResult extract_slices(const SliceVolumes& volumes, int axis) {
  if (!volumes.pre || !volumes.post) throw ValidationError("extract_slices: pre and post are required");
  const auto& dims = volumes.pre->header.dims;
  for (const Volume* v : {volumes.low, volumes.post, volumes.mask, volumes.enhancement}) {
    if (v && v->header.dims != dims) throw ValidationError("extract_slices: volume dims mismatch");
  }
  if (volumes.mask) {
    for (float m : volumes.mask->data) {
      if (m != 0.0f && m != 1.0f) throw ValidationError("extract_slices: mask must be binary");
    }
  }
  if (axis < 0 || axis > 2) throw ValidationError("slice axis must be 0, 1 or 2");

  SliceResult result;
  const int64_t n = dims[static_cast<size_t>(axis)];
  for (int64_t i = 0; i < n; ++i) {
    SliceSample s;
    s.case_id = volumes.pre->header.case_id;
    s.index = i;
    s.pre = extract_plane(*volumes.pre, axis, i);
    if (volumes.mask) {
      s.mask = extract_plane(*volumes.mask, axis, i);
    } else {
      s.mask = Tensor<float>(s.pre.shape());
      for (int64_t k = 0; k < s.pre.numel(); ++k) s.mask[k] = s.pre[k] > 0.0f ? 1.0f : 0.0f;
    }
    const bool any = std::any_of(s.mask.vec().begin(), s.mask.vec().end(), [](float m) { return m != 0.0f; });
    if (!any) {
      ++result.dropped;
      continue;
    }
    s.post = extract_plane(*volumes.post, axis, i);
    if (volumes.low) s.low = extract_plane(*volumes.low, axis, i);
    if (volumes.enhancement) s.enhancement = extract_plane(*volumes.enhancement, axis, i);
    result.samples.push_back(std::move(s));
  }
  return result;
}

std::vector<const CaseEntry*> DatasetManifest::split(const std::string& tag) const {
  std::vector<const CaseEntry*> out;
  for (const auto& c : cases) {
    if (c.split == tag) out.push_back(&c);
  }
  return out;
}

const CaseEntry& DatasetManifest::find(const std::string& case_id) const {
  for (const auto& c : cases) {
    if (c.case_id == case_id) return c;
  }
  throw ValidationError("case '" + case_id + "' not in manifest");
}

DatasetManifest load_manifest(const fs::path& path) {
  fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
  if (!fs::exists(file)) throw IoError("missing manifest '" + file.string() + "'");
  DatasetManifest m;
  m.root = file.parent_path();
  json j;
  try {
    std::ifstream is(file);
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ValidationError("malformed manifest '" + file.string() + "': " + e.what());
  }
  std::set<std::string> ids;
  auto resolve = [&](const std::string& rel, const std::string& id) {
    fs::path p = m.root / rel;
    if (!fs::exists(p)) throw IoError("case '" + id + "': missing file '" + p.string() + "'");
    return p;
  };
  try {
    for (const auto& jc : j.at("cases")) {
      CaseEntry c;
      c.case_id = jc.at("case_id").get<std::string>();
      if (c.case_id.empty()) throw ValidationError("manifest: empty case_id");
      if (!ids.insert(c.case_id).second) throw ValidationError("manifest: duplicate case_id '" + c.case_id + "'");
      c.split = jc.at("split").get<std::string>();
      if (c.split != "train" && c.split != "test") {
        throw ValidationError("manifest: case '" + c.case_id + "' has split '" + c.split + "'");
      }
      c.pre = resolve(jc.at("pre").get<std::string>(), c.case_id);
      c.post = resolve(jc.at("post").get<std::string>(), c.case_id);
      if (jc.contains("low") && !jc["low"].is_null()) c.low = resolve(jc["low"].get<std::string>(), c.case_id);
      if (jc.contains("mask") && !jc["mask"].is_null()) c.mask = resolve(jc["mask"].get<std::string>(), c.case_id);
      if (jc.contains("enhancement") && !jc["enhancement"].is_null()) {
        c.enhancement = resolve(jc["enhancement"].get<std::string>(), c.case_id);
      }
      if (jc.contains("phantom")) {
        c.exponent = jc["phantom"].at("exponent").get<double>();
        c.gamma_data = jc["phantom"].at("gamma_data").get<double>();
      }
      m.cases.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    throw ValidationError("malformed manifest entry in '" + file.string() + "': " + e.what());
  }
  return m;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  const fs::path root = path.parent_path();
  auto rel = [&](const fs::path& p) { return fs::relative(p, root).generic_string(); };
  json j;
  j["version"] = 1;
  j["cases"] = json::array();
  for (const auto& c : manifest.cases) {
    json jc;
    jc["case_id"] = c.case_id;
    jc["split"] = c.split;
    jc["pre"] = rel(c.pre);
    jc["post"] = rel(c.post);
    if (c.low) jc["low"] = rel(*c.low);
    if (c.mask) jc["mask"] = rel(*c.mask);
    if (c.enhancement) jc["enhancement"] = rel(*c.enhancement);
    if (c.exponent && c.gamma_data) jc["phantom"] = {{"exponent", *c.exponent}, {"gamma_data", *c.gamma_data}};
    j["cases"].push_back(jc);
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << j.dump(2) << '\n';
}

Study load_study(const CaseEntry& entry, bool normalize) {
  Study s;
  s.case_id = entry.case_id;
  s.pre = read_volume(entry.pre);
  s.post = read_volume(entry.post);
  if (entry.low) s.low = read_volume(*entry.low);
  if (entry.enhancement) s.enhancement = read_volume(*entry.enhancement);
  if (entry.mask) {
    s.mask = read_volume(*entry.mask);
  } else {
    s.mask = Volume(s.pre.header);
    for (size_t i = 0; i < s.pre.data.size(); ++i) s.mask.data[i] = s.pre.data[i] > 0.0f ? 1.0f : 0.0f;
  }
  for (const Volume* v : {&s.post, &s.mask}) {
    if (v->header.dims != s.pre.header.dims) throw ValidationError("case '" + entry.case_id + "': dims mismatch");
  }
  if (s.low && s.low->header.dims != s.pre.header.dims) {
    throw ValidationError("case '" + entry.case_id + "': dims mismatch");
  }
  if (normalize) {
    s.scale = normalization_factor(s.pre);
    s.pre = apply_scale(s.pre, s.scale);
    s.post = apply_scale(s.post, s.scale);
    if (s.low) s.low = apply_scale(*s.low, s.scale);
    if (s.enhancement) s.enhancement = apply_scale(*s.enhancement, s.scale);
  }
  return s;
}

}  // namespace gformer::io
