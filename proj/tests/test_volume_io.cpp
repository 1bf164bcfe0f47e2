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

#include <cmath>
#include <fstream>
#include <random>

#include "gformer/volume_io.hpp"
#include "test_util.hpp"

namespace io = gformer::io;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("gformer_test_vio_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

io::Volume random_volume(std::array<int64_t, 3> dims, uint64_t seed, float lo = -2.0f, float hi = 2.0f) {
  io::VolumeHeader h;
  h.dims = dims;
  h.spacing = {1.0, 0.9, 2.5};
  h.case_id = "c" + std::to_string(seed);
  io::Volume v(h);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(lo, hi);
  for (auto& x : v.data) x = dist(rng);
  return v;
}

void write_raw(const fs::path& p, const std::vector<float>& values) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 4));
}

void write_meta(const fs::path& raw, const std::string& json) {
  std::ofstream os(io::sidecar_path(raw));
  os << json;
}

}  // namespace

TEST(VolumeIo, ReadsRowMajorPayload) {
  auto dir = scratch("rowmajor");
  write_raw(dir / "v.f32raw", {0, 1, 2, 3});
  write_meta(dir / "v.f32raw", R"({"dims":[2,2,1],"spacing":[1,1,1]})");
  auto v = io::read_volume(dir / "v.f32raw");
  EXPECT_EQ(v.data, (std::vector<float>{0, 1, 2, 3}));
  EXPECT_EQ(v.at(1, 0, 0), 2.0f);
  EXPECT_EQ(v.at(0, 1, 0), 1.0f);
}

TEST(VolumeIo, TruncatedPayload) {
  auto dir = scratch("trunc");
  write_raw(dir / "v.f32raw", {0, 1, 2});
  write_meta(dir / "v.f32raw", R"({"dims":[2,2,1],"spacing":[1,1,1]})");
  try {
    io::read_volume(dir / "v.f32raw");
    FAIL();
  } catch (const gformer::IoError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated payload"), std::string::npos);
  }
}

TEST(VolumeIo, RejectsNonFiniteAndMissing) {
  auto dir = scratch("nonfinite");
  write_raw(dir / "v.f32raw", {0, NAN, 2, 3});
  write_meta(dir / "v.f32raw", R"({"dims":[2,2,1],"spacing":[1,1,1]})");
  EXPECT_THROW(io::read_volume(dir / "v.f32raw"), gformer::NumericalError);
  EXPECT_THROW(io::read_volume(dir / "absent.f32raw"), gformer::IoError);
  write_raw(dir / "w.f32raw", {0, 1});
  write_meta(dir / "w.f32raw", R"({"dims":[0,2,1],"spacing":[1,1,1]})");
  EXPECT_THROW(io::read_volume(dir / "w.f32raw"), gformer::ValidationError);
}

TEST(VolumeIo, RoundTripBitExact) {
  auto dir = scratch("roundtrip");
  auto v = random_volume({64, 64, 32}, 3);
  v.header.intensity_offset = 0.25;
  v.header.intensity_scale = 1.0 / 3.0;
  io::write_volume(v, dir / "v.f32raw");
  auto back = io::read_volume(dir / "v.f32raw");
  EXPECT_EQ(back.header.dims, (std::array<int64_t, 3>{64, 64, 32}));
  EXPECT_EQ(back, v);
}

TEST(VolumeIo, PayloadSize) {
  auto dir = scratch("size");
  io::VolumeHeader h;
  h.dims = {4, 4, 4};
  io::write_volume(io::Volume(h), dir / "z.f32raw");
  EXPECT_EQ(fs::file_size(dir / "z.f32raw"), 256u);
  EXPECT_TRUE(fs::exists(dir / "z.meta.json"));
}

TEST(VolumeIo, UnwritablePath) {
  io::VolumeHeader h;
  EXPECT_THROW(io::write_volume(io::Volume(h), "/nonexistent_dir_xyz/a/b.f32raw"), gformer::IoError);
}

TEST(Normalize, Examples) {
  io::VolumeHeader h;
  h.dims = {2, 2, 2};
  io::Volume c(h, 2.0f);
  auto n = io::mean_normalize(c);
  for (float x : n.data) EXPECT_FLOAT_EQ(x, 1.0f);
  EXPECT_DOUBLE_EQ(n.header.intensity_scale, 0.5);

  io::Volume half(h);
  for (size_t i = 0; i < 4; ++i) half.data[i] = 4.0f;
  auto m = io::mean_normalize(half);
  for (size_t i = 0; i < 8; ++i) EXPECT_FLOAT_EQ(m.data[i], i < 4 ? 1.0f : 0.0f);

  EXPECT_THROW(io::mean_normalize(io::Volume(h)), gformer::ValidationError);
}

TEST(Normalize, RandomAndIdempotent) {
  auto v = random_volume({16, 16, 8}, 9, 0.01f, 7.0f);
  auto n = io::mean_normalize(v);
  double total = 0;
  int count = 0;
  for (float x : n.data) {
    if (x > 0) {
      total += x;
      ++count;
    }
  }
  EXPECT_NEAR(total / count, 1.0, 1e-6);
  auto twice = io::mean_normalize(n);
  for (size_t i = 0; i < n.data.size(); ++i) EXPECT_NEAR(twice.data[i], n.data[i], 1e-6);
}

TEST(Slices, CountsAndDrops) {
  auto pre = random_volume({64, 64, 32}, 1, 0.5f, 1.0f);
  auto post = random_volume({64, 64, 32}, 2, 0.5f, 1.0f);
  io::Volume mask(pre.header, 1.0f);
  io::SliceVolumes in{&pre, nullptr, &post, &mask, nullptr};
  auto all = io::extract_slices(in, 2);
  ASSERT_EQ(all.samples.size(), 32u);
  EXPECT_EQ(all.samples[0].pre.shape(), (gformer::Shape{64, 64}));
  EXPECT_EQ(all.samples[5].pre[3 * 64 + 7], pre.at(3, 7, 5));
  EXPECT_FALSE(all.samples[0].low.has_value());

  for (int64_t k : {0, 3, 10, 11, 31}) {
    for (int64_t i = 0; i < 64; ++i) {
      for (int64_t j = 0; j < 64; ++j) mask.at(i, j, k) = 0.0f;
    }
  }
  auto some = io::extract_slices(in, 2);
  EXPECT_EQ(some.samples.size(), 27u);
  EXPECT_EQ(static_cast<int64_t>(some.samples.size()) + some.dropped, 32);

  auto other = random_volume({64, 64, 31}, 4);
  io::SliceVolumes bad{&pre, nullptr, &other, nullptr, nullptr};
  EXPECT_THROW(io::extract_slices(bad, 2), gformer::ValidationError);
}

TEST(Slices, DefaultMaskFromPre) {
  io::VolumeHeader h;
  h.dims = {3, 2, 2};
  io::Volume pre(h), post(h, 1.0f);
  pre.at(1, 0, 1) = 2.0f;
  auto r = io::extract_slices({&pre, nullptr, &post, nullptr, nullptr}, 0);
  ASSERT_EQ(r.samples.size(), 1u);
  EXPECT_EQ(r.samples[0].index, 1);
  EXPECT_EQ(r.samples[0].mask, (gformer::Tensor<float>({2, 2}, {0, 1, 0, 0})));
}

TEST(Manifest, LoadsCasesInOrder) {
  auto dir = scratch("manifest");
  io::VolumeHeader h;
  h.dims = {2, 2, 2};
  std::string cases;
  for (std::string id : {"b", "a", "c"}) {
    fs::create_directories(dir / id);
    for (std::string kind : {"pre", "post"}) io::write_volume(io::Volume(h, 1.0f), dir / id / (kind + ".f32raw"));
    if (!cases.empty()) cases += ",";
    cases += R"({"case_id":")" + id + R"(","split":")" + (id == "c" ? "test" : "train") + R"(","pre":")" + id +
             R"(/pre.f32raw","post":")" + id + R"(/post.f32raw"})";
  }
  {
    std::ofstream os(dir / "manifest.json");
    os << R"({"version":1,"cases":[)" << cases << "]}";
  }
  auto m = io::load_manifest(dir);
  ASSERT_EQ(m.cases.size(), 3u);
  EXPECT_EQ(m.cases[0].case_id, "b");
  EXPECT_EQ(m.cases[2].case_id, "c");
  EXPECT_FALSE(m.cases[0].low.has_value());
  EXPECT_EQ(m.split("train").size(), 2u);
  auto s = io::load_study(m.find("a"));
  EXPECT_FALSE(s.low.has_value());
  EXPECT_EQ(s.mask.data, std::vector<float>(8, 1.0f));

  io::write_manifest(m, dir / "copy.json");
  auto again = io::load_manifest(dir / "copy.json");
  EXPECT_EQ(again.cases.size(), 3u);
  EXPECT_EQ(again.cases[1].pre, m.cases[1].pre);

  {
    std::ofstream os(dir / "dup.json");
    os << R"({"cases":[{"case_id":"a","split":"train","pre":"a/pre.f32raw","post":"a/post.f32raw"},)"
       << R"({"case_id":"a","split":"train","pre":"a/pre.f32raw","post":"a/post.f32raw"}]})";
  }
  EXPECT_THROW(io::load_manifest(dir / "dup.json"), gformer::ValidationError);
  {
    std::ofstream os(dir / "missing.json");
    os << R"({"cases":[{"case_id":"a","split":"train","pre":"a/nope.f32raw","post":"a/post.f32raw"}]})";
  }
  EXPECT_THROW(io::load_manifest(dir / "missing.json"), gformer::IoError);
  {
    std::ofstream os(dir / "badsplit.json");
    os << R"({"cases":[{"case_id":"a","split":"val","pre":"a/pre.f32raw","post":"a/post.f32raw"}]})";
  }
  EXPECT_THROW(io::load_manifest(dir / "badsplit.json"), gformer::ValidationError);
}

TEST(Study, JointScaleFromPre) {
  auto dir = scratch("study");
  io::VolumeHeader h;
  h.dims = {2, 2, 1};
  io::write_volume(io::Volume(h, 4.0f), dir / "pre.f32raw");
  io::write_volume(io::Volume(h, 6.0f), dir / "post.f32raw");
  io::CaseEntry e{"s", "train", dir / "pre.f32raw", std::nullopt, dir / "post.f32raw", {}, {}, {}, {}};
  auto s = io::load_study(e);
  EXPECT_DOUBLE_EQ(s.scale, 0.25);
  EXPECT_FLOAT_EQ(s.pre.data[0], 1.0f);
  EXPECT_FLOAT_EQ(s.post.data[0], 1.5f);
}
