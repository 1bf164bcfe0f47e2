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

#include <filesystem>
#include <fstream>
#include <sstream>

#include "gformer/cli.hpp"
#include "gformer/model.hpp"
#include "gformer/volume_io.hpp"

namespace fs = std::filesystem;
namespace io = gformer::io;
using gformer::cli::run;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("gformer_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int lines(const fs::path& p) {
  std::ifstream is(p);
  std::string l;
  int n = 0;
  while (std::getline(is, l)) ++n;
  return n;
}

// 3 cases, 16x16x2, one held out.
fs::path dataset(const std::string& name, double noise = 0.02) {
  const fs::path d = scratch(name);
  const int code = run({"--seed", "5", "phantom", "--out", (d / "data").string(), "--cases", "3", "--size", "16",
                        "--slices", "2", "--noise", std::to_string(noise), "--test-fraction", "0.34"});
  EXPECT_EQ(code, 0);
  return d;
}

const std::vector<std::string> kTinyModel = {"--blocks", "2", "--channels", "8", "--heads", "2",
                                             "--strides", "2,4", "--angles", "0,10"};

}  // namespace

TEST(CliPhantom, DeterministicAndValidated) {
  const auto a = dataset("det_a"), b = dataset("det_b");
  for (const auto& f : fs::recursive_directory_iterator(a / "data")) {
    if (!f.is_regular_file() || f.path().extension() != ".f32raw") continue;
    const auto rel = fs::relative(f.path(), a);
    EXPECT_EQ(slurp(f.path()), slurp(b / rel)) << rel;
  }
  EXPECT_EQ(run({"phantom", "--out", (scratch("bad") / "d").string(), "--size", "60"}), 2);
  EXPECT_NE(run({"phantom"}), 0);
}

TEST(CliTrain, ZeroLearningRateKeepsInit) {
  const auto d = dataset("lr0");
  std::vector<std::string> args = {"--seed", "9", "train", "--data", (d / "data").string(), "--out",
                                   (d / "run").string(), "-k", "2", "--lr", "0", "--max-steps", "2",
                                   "--head-init-scale", "0.1"};
  args.insert(args.end(), kTinyModel.begin(), kTinyModel.end());
  ASSERT_EQ(run(args), 0);
  const auto [cfg, params] = gformer::nn::read_checkpoint(d / "run" / "checkpoint.gfm");
  const auto init = gformer::nn::init_params<float>(cfg, 9, 0.1);
  ASSERT_EQ(params.entries().size(), init.entries().size());
  for (size_t i = 0; i < init.entries().size(); ++i) {
    EXPECT_EQ(params.entries()[i].second.value(), init.entries()[i].second.value()) << init.entries()[i].first;
  }
  EXPECT_GE(lines(d / "run" / "train_log.csv"), 2);
}

TEST(CliTrain, MissingManifest) {
  const auto d = scratch("nomanifest");
  EXPECT_NE(run({"train", "--data", (d / "nothing").string(), "--out", (d / "run").string()}), 0);
}

TEST(CliSimulate, StubSeriesFiles) {
  const auto d = dataset("sim");
  ASSERT_EQ(run({"simulate", "--stub", "--data", (d / "data").string(), "--out", (d / "pred").string(), "-k", "4"}),
            0);
  const auto m = io::load_manifest(d / "data");
  const auto test = m.split("test");
  ASSERT_EQ(test.size(), 1u);
  const fs::path dir = d / "pred" / test[0]->case_id;
  for (const char* f : {"dose_0.775.f32raw", "dose_0.55.f32raw", "dose_0.325.f32raw", "dose_0.10.f32raw"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_EQ(lines(dir / "series.csv"), 5);
  const auto post = io::read_volume(test[0]->post);
  const auto out = io::read_volume(dir / "dose_0.10.f32raw");
  ASSERT_EQ(out.data.size(), post.data.size());
  for (size_t i = 0; i < post.data.size(); ++i) EXPECT_NEAR(out.data[i], post.data[i], 1e-6 * (1 + std::abs(post.data[i])));
  EXPECT_NE(run({"simulate", "--data", (d / "data").string(), "--out", (d / "pred").string()}), 0);
}

TEST(CliEvaluate, ExactPredictionsAndBlankReferences) {
  const auto d = dataset("eval", 0.0);
  const auto m = io::load_manifest(d / "data");
  const auto* c = m.split("test")[0];
  // Predictions equal to the references: the low file at gamma_data, post at dose 1.
  const fs::path dir = d / "pred" / c->case_id;
  fs::create_directories(dir);
  io::write_volume(io::read_volume(*c->low), dir / "a.f32raw");
  io::write_volume(io::read_volume(c->post), dir / "b.f32raw");
  std::ofstream(dir / "series.csv") << "iteration,nominal_dose,file,mean_in_mask\n1,1.0,b.f32raw,0\n2,0.1,a.f32raw,0\n";
  ASSERT_EQ(run({"evaluate", "--data", (d / "data").string(), "--pred", (d / "pred").string(), "--out",
                 (d / "report").string()}),
            0);
  std::ifstream is(d / "report" / "report.csv");
  std::string line;
  std::getline(is, line);
  for (int i = 0; i < 2; ++i) {
    ASSERT_TRUE(std::getline(is, line));
    std::stringstream ls(line);
    std::string id, it, dose, psnr;
    std::getline(ls, id, ',');
    std::getline(ls, it, ',');
    std::getline(ls, dose, ',');
    std::getline(ls, psnr, ',');
    EXPECT_DOUBLE_EQ(std::stod(psnr), 99.0) << line;
  }
  EXPECT_TRUE(fs::exists(d / "report" / "plots" / "cnr.svg"));

  // Without low or phantom metadata there is nothing to compare against.
  io::DatasetManifest bare = m;
  for (auto& e : bare.cases) {
    e.low.reset();
    e.enhancement.reset();
    e.exponent.reset();
    e.gamma_data.reset();
  }
  io::write_manifest(bare, d / "data" / "bare.json");
  ASSERT_EQ(run({"evaluate", "--data", (d / "data" / "bare.json").string(), "--pred", (d / "pred").string(), "--out",
                 (d / "bare").string(), "--no-plots"}),
            0);
  std::ifstream bs(d / "bare" / "report.csv");
  std::getline(bs, line);
  std::getline(bs, line);
  EXPECT_NE(line.find(",,,,"), std::string::npos) << line;
  EXPECT_FALSE(fs::exists(d / "bare" / "plots"));

  EXPECT_EQ(run({"evaluate", "--data", (d / "data").string(), "--pred", (d / "empty").string(), "--out",
                 (d / "r2").string()}),
            2);
}

TEST(CliBench, RepeatsAndLog) {
  const auto d = scratch("bench");
  const auto log = d / "bench.csv";
  ASSERT_EQ(run({"bench", "--stub", "--size", "16", "--batch", "1", "-k", "2", "--warmup", "1", "--timed", "2",
                 "--repeat", "3", "--log", log.string()}),
            0);
  EXPECT_EQ(lines(log), 4);
  ASSERT_EQ(run({"bench", "--stub", "--size", "16", "--repeat", "1", "--timed", "1", "--log", log.string()}), 0);
  EXPECT_EQ(lines(log), 5);
}

TEST(CliConfig, FileWithOverrideAndUnknownKey) {
  const auto d = scratch("config");
  std::ofstream(d / "run.ini") << "seed=4\n[phantom]\ncases=2\nsize=32\nslices=2\n";
  ASSERT_EQ(run({"--config", (d / "run.ini").string(), "phantom", "--out", (d / "data").string(), "--size", "16"}), 0);
  const auto m = io::load_manifest(d / "data");
  EXPECT_EQ(m.cases.size(), 2u);
  EXPECT_EQ(io::read_volume(m.cases[0].pre).header.dims, (std::array<int64_t, 3>{16, 16, 2}));

  std::ofstream(d / "bad.ini") << "[phantom]\nbogus=1\n";
  EXPECT_EQ(run({"--config", (d / "bad.ini").string(), "phantom", "--out", (d / "data2").string()}), 2);
}
