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

#include "gformer/cli.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "gformer/metrics.hpp"
#include "gformer/phantom.hpp"
#include "gformer/runtime.hpp"
#include "gformer/training.hpp"

namespace gformer::cli {

namespace fs = std::filesystem;

namespace {

struct Common {
  uint64_t seed = 0;
  bool deterministic = false;
  int threads = 1;
  bool verbose = false;
};

struct ModelFlags {
  int64_t blocks = 6;
  int64_t channels = 32;
  int64_t heads = 4;
  std::string shift = "rot";
  std::vector<int64_t> strides{4, 8, 16, 16, 8, 4};
  std::vector<double> angles{0, 10, 20, 20, 10, 0};
  bool direct_output = false;

  nn::ModelConfig build() const {
    auto c = nn::ModelConfig::standard(blocks, channels, heads, strides, angles, nn::parse_shift_mode(shift));
    c.residual_output = !direct_output;
    c.validate();
    return c;
  }
};

void add_model_flags(CLI::App* app, ModelFlags& m) {
  app->add_option("--blocks", m.blocks, "Number of Gformer blocks")->capture_default_str();
  app->add_option("--channels", m.channels, "Base channel width")->capture_default_str();
  app->add_option("--heads", m.heads, "Attention heads")->capture_default_str();
  app->add_option("--shift", m.shift, "Shift mode")->check(CLI::IsMember({"rot", "cyc", "none"}))->capture_default_str();
  app->add_option("--strides", m.strides, "Subsampling strides, comma separated")->delimiter(',');
  app->add_option("--angles", m.angles, "Rotation angles in degrees, comma separated")->delimiter(',');
  app->add_flag("--direct-output", m.direct_output, "Predict the image directly instead of a residual");
}

// Minimal decimals (at least 2) that print the dose exactly.
std::string dose_label(double d) {
  for (int p = 2; p < 9; ++p) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(p) << d;
    if (std::abs(std::stod(os.str()) - d) < 1e-9) return os.str();
  }
  std::ostringstream os;
  os << std::fixed << std::setprecision(9) << d;
  return os.str();
}

// (slices, 1, H, W) stack of every plane along axis 2.
Tensor<float> to_stack(const io::Volume& v) {
  const auto& d = v.header.dims;
  Tensor<float> t({d[2], 1, d[0], d[1]});
  for (int64_t k = 0; k < d[2]; ++k) {
    for (int64_t i = 0; i < d[0]; ++i) {
      for (int64_t j = 0; j < d[1]; ++j) t[(k * d[0] + i) * d[1] + j] = v.at(i, j, k);
    }
  }
  return t;
}

io::Volume from_stack(const Tensor<float>& t, const io::VolumeHeader& header, double factor) {
  io::Volume v(header);
  const auto& d = header.dims;
  for (int64_t k = 0; k < d[2]; ++k) {
    for (int64_t i = 0; i < d[0]; ++i) {
      for (int64_t j = 0; j < d[1]; ++j) {
        v.at(i, j, k) = static_cast<float>(t[(k * d[0] + i) * d[1] + j] * factor);
      }
    }
  }
  return v;
}

std::vector<const io::CaseEntry*> select_cases(const io::DatasetManifest& m, const std::string& case_id,
                                               const std::string& split) {
  if (!case_id.empty()) return {&m.find(case_id)};
  if (split == "all") {
    std::vector<const io::CaseEntry*> out;
    for (const auto& c : m.cases) out.push_back(&c);
    return out;
  }
  if (split != "train" && split != "test") throw ValidationError("--split must be train, test or all");
  return m.split(split);
}

void require_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (!fs::is_directory(p)) throw IoError("cannot create output directory '" + p.string() + "'");
}

// ---- phantom --------------------------------------------------------------

struct PhantomCmd {
  phantom::PhantomConfig config;
  int64_t cases = 10;
  std::string out;
};

int cmd_phantom(const PhantomCmd& p, const Common& common) {
  auto cfg = p.config;
  cfg.seed = common.seed;
  cfg.validate();
  const int threads = common.deterministic ? 1 : common.threads;
  phantom::generate_dataset(cfg, p.cases, p.out, threads);
  std::cout << (fs::path(p.out) / "manifest.json").string() << '\n';
  return 0;
}

// ---- train ----------------------------------------------------------------

struct TrainCmd {
  ModelFlags model;
  train::TrainingConfig training;
  std::string data;
  std::string out;
};

int cmd_train(TrainCmd& t, const Common& common) {
  auto mc = t.model.build();
  t.training.seed = common.seed;
  t.training.deterministic = common.deterministic;
  t.training.validate();
  const auto manifest = io::load_manifest(t.data);
  require_dir(t.out);
  train::TrainOutputs outputs{fs::path(t.out) / "checkpoint.gfm", fs::path(t.out) / "train_log.csv", common.verbose};
  const auto r = train::train(manifest, mc, t.training, outputs);
  std::cout << "steps " << r.steps << '\n';
  if (!r.log.empty()) std::cout << "final_total " << std::setprecision(9) << r.log.back().total << '\n';
  std::cout << outputs.checkpoint.string() << '\n';
  return 0;
}

// ---- simulate ---------------------------------------------------------------

struct SimulateCmd {
  std::string checkpoint;
  bool stub = false;
  std::string data;
  std::string case_id;
  std::string split = "test";
  std::string out;
  int64_t iterations = 9;
  double gamma = 0.1;
};

int cmd_simulate(const SimulateCmd& s, const Common&) {
  if (s.iterations < 1) throw ValidationError("--iterations must be >= 1");
  if (!(s.gamma > 0.0 && s.gamma < 1.0)) throw ValidationError("--gamma must lie in (0, 1)");
  if (s.stub == !s.checkpoint.empty()) throw ValidationError("give exactly one of --checkpoint and --stub");
  const auto manifest = io::load_manifest(s.data);
  const auto cases = select_cases(manifest, s.case_id, s.split);
  if (cases.empty()) throw ValidationError("no cases selected");
  std::optional<std::pair<nn::ModelConfig, nn::ModelParams<float>>> model;
  if (!s.stub) model = nn::read_checkpoint(s.checkpoint);
  const auto doses = train::nominal_doses(s.iterations, s.gamma);

  for (const auto* entry : cases) {
    const auto study = io::load_study(*entry);
    const auto pre = to_stack(study.pre), post = to_stack(study.post), mask = to_stack(study.mask);
    std::vector<Tensor<float>> series;
    if (model) {
      series = train::simulate(model->first, model->second, post, pre, s.iterations);
    } else {
      series.assign(static_cast<size_t>(s.iterations), post);
    }
    const fs::path dir = fs::path(s.out) / entry->case_id;
    require_dir(dir);
    std::ofstream csv(dir / "series.csv", std::ios::trunc);
    if (!csv) throw IoError("cannot write series csv in '" + dir.string() + "'");
    csv << "iteration,nominal_dose,file,mean_in_mask\n" << std::setprecision(10);
    for (size_t i = 0; i < series.size(); ++i) {
      const std::string name = "dose_" + dose_label(doses[i]) + ".f32raw";
      // Written back in the original intensity units.
      io::Volume v = from_stack(series[i], study.pre.header, 1.0 / study.scale);
      v.header.intensity_scale = study.pre.header.intensity_scale / study.scale;
      io::write_volume(v, dir / name);
      double total = 0.0, count = 0.0;
      for (int64_t j = 0; j < mask.numel(); ++j) {
        total += mask[j] * series[i][j];
        count += mask[j];
      }
      csv << i + 1 << ',' << doses[i] << ',' << name << ',' << (count > 0 ? total / count : 0.0) << '\n';
    }
    std::cout << dir.string() << '\n';
  }
  return 0;
}

// ---- evaluate -------------------------------------------------------------

struct EvaluateCmd {
  std::string data;
  std::string pred;
  std::string out;
  std::string split = "test";
  double tau = 0.1;
  bool no_plots = false;
};

struct SeriesFile {
  std::vector<double> doses;
  std::vector<std::string> files;
};

SeriesFile read_series_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("missing series file '" + path.string() + "'");
  SeriesFile s;
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string iter, dose, file;
    if (!std::getline(ls, iter, ',') || !std::getline(ls, dose, ',') || !std::getline(ls, file, ',')) {
      throw ValidationError("malformed row in '" + path.string() + "'");
    }
    s.doses.push_back(std::stod(dose));
    s.files.push_back(file);
  }
  if (s.files.empty()) throw ValidationError("empty series file '" + path.string() + "'");
  return s;
}

int cmd_evaluate(const EvaluateCmd& e, const Common&) {
  const auto manifest = io::load_manifest(e.data);
  const auto cases = select_cases(manifest, "", e.split);
  std::vector<metrics::MetricRow> rows;
  for (const auto* entry : cases) {
    const fs::path dir = fs::path(e.pred) / entry->case_id;
    if (!fs::exists(dir / "series.csv")) continue;
    const auto series = read_series_csv(dir / "series.csv");
    const auto study = io::load_study(*entry);

    metrics::SeriesInput in;
    in.case_id = entry->case_id;
    in.nominal_doses = series.doses;
    in.tau = e.tau;
    // (slices, H, W) stacks in normalized units.
    auto flat = [](Tensor<float> t) { return t.reshaped({t.dim(0), t.dim(2), t.dim(3)}); };
    in.pre = flat(to_stack(study.pre));
    in.post = flat(to_stack(study.post));
    in.mask = flat(to_stack(study.mask));
    for (const auto& f : series.files) {
      auto v = io::read_volume(dir / f);
      if (v.header.dims != study.pre.header.dims) throw ValidationError("prediction '" + f + "' has wrong dims");
      in.predictions.push_back(flat(to_stack(io::apply_scale(v, study.scale))));
    }
    std::optional<Tensor<float>> low;
    if (study.low) low = flat(to_stack(*study.low));
    std::optional<Tensor<float>> enh;
    if (study.enhancement) enh = flat(to_stack(*study.enhancement));
    const auto exponent = entry->exponent;
    const auto gamma_data = entry->gamma_data;
    const double final_dose = series.doses.back();
    const Tensor<float> pre_img = in.pre;
    in.reference = [=](double dose) -> std::optional<Tensor<float>> {
      const double low_dose = gamma_data.value_or(final_dose);
      if (low && std::abs(dose - low_dose) < 1e-9) return low;
      if (enh && exponent) {
        Tensor<float> r = pre_img;
        const auto w = static_cast<float>(std::pow(dose, *exponent));
        for (int64_t i = 0; i < r.numel(); ++i) r[i] += w * (*enh)[i];
        return r;
      }
      return std::nullopt;
    };
    auto case_rows = metrics::evaluate_series(in);
    rows.insert(rows.end(), case_rows.begin(), case_rows.end());
  }
  if (rows.empty()) throw ValidationError("no predictions found under '" + e.pred + "' for split " + e.split);
  require_dir(e.out);
  metrics::write_report_csv(rows, fs::path(e.out) / "report.csv");
  std::cout << (fs::path(e.out) / "report.csv").string() << '\n';
  if (!e.no_plots) {
    for (const auto& p : metrics::write_metric_plots(rows, fs::path(e.out) / "plots")) std::cout << p.string() << '\n';
  }
  return 0;
}

// ---- bench ----------------------------------------------------------------

struct BenchCmd {
  std::string checkpoint;
  bool stub = false;
  int64_t size = 64;
  int64_t batch = 1;
  int64_t iterations = 9;
  int warmup = 1;
  int timed = 3;
  int repeat = 1;
  std::string log;
};

int cmd_bench(const BenchCmd& b, const Common& common) {
  if (b.stub == !b.checkpoint.empty()) throw ValidationError("give exactly one of --checkpoint and --stub");
  if (b.repeat < 1 || b.timed < 1 || b.warmup < 0) throw ValidationError("--repeat and --timed must be >= 1");
  if (b.size < 1 || b.batch < 1 || b.iterations < 1) throw ValidationError("--size, --batch, --iterations must be >= 1");
  std::optional<std::pair<nn::ModelConfig, nn::ModelParams<float>>> model;
  if (!b.stub) model = nn::read_checkpoint(b.checkpoint);
  std::mt19937_64 rng(common.seed);
  std::uniform_real_distribution<float> u(0.0f, 2.0f);
  Tensor<float> pre({b.batch, 1, b.size, b.size}), post({b.batch, 1, b.size, b.size});
  for (int64_t i = 0; i < pre.numel(); ++i) {
    pre[i] = u(rng);
    post[i] = pre[i] + 0.5f * u(rng);
  }
  std::function<void()> run;
  Tensor<float> sink;
  if (model) {
    run = [&] { sink = train::simulate(model->first, model->second, post, pre, b.iterations).back(); };
  } else {
    run = [&] {
      Tensor<float> x = post;
      for (int64_t i = 0; i < b.iterations; ++i) x = Tensor<float>(x);
      sink = x;
    };
  }
  std::vector<double> values;
  std::string env;
  for (int r = 0; r < b.repeat; ++r) {
    const auto t = metrics::throughput(run, b.batch, b.warmup, b.timed);
    values.push_back(t.images_per_second);
    env = t.environment;
    std::cout << "repeat " << r + 1 << ": " << std::setprecision(6) << t.images_per_second << " images/s\n";
  }
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  std::cout << "mean: " << mean << " images/s\n" << "environment: " << env << '\n';
  if (!b.log.empty()) {
    const bool fresh = !fs::exists(b.log);
    std::ofstream os(b.log, std::ios::app);
    if (!os) throw IoError("cannot open '" + b.log + "' for appending");
    if (fresh) os << "repeat,images_per_second,size,batch,iterations,model,environment\n";
    for (size_t r = 0; r < values.size(); ++r) {
      os << r + 1 << ',' << std::setprecision(9) << values[r] << ',' << b.size << ',' << b.batch << ','
         << b.iterations << ',' << (b.stub ? "stub" : "checkpoint") << ",\"" << env << "\"\n";
    }
  }
  return 0;
}

void report_error(const char* kind, const std::string& message) {
  std::string flat = message;
  for (auto& ch : flat) {
    if (ch == '\n') ch = ' ';
  }
  std::cerr << "error: kind=" << kind << " message=" << flat << '\n';
}

}  // namespace

int run(int argc, const char* const* argv) {
  configure_allocator();
  CLI::App app{"Iterative contrast-dose simulation with Gformer"};
  app.set_config("--config", "", "INI/TOML config file; command-line flags take precedence");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  Common common;
  app.add_option("--seed", common.seed, "Random seed")->capture_default_str();
  app.add_flag("--deterministic", common.deterministic, "Fixed reduction order; single thread");
  app.add_option("--threads", common.threads, "Worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_flag("-v,--verbose", common.verbose, "Progress on stderr");

  PhantomCmd ph;
  auto* sp = app.add_subcommand("phantom", "Generate a synthetic dataset");
  sp->fallthrough();
  sp->add_option("--out", ph.out, "Output dataset directory")->required();
  sp->add_option("--cases", ph.cases, "Number of cases")->capture_default_str();
  sp->add_option("--size", ph.config.size, "Image size (multiple of 16)")->capture_default_str();
  sp->add_option("--slices", ph.config.slices, "Slices per case")->capture_default_str();
  sp->add_option("--lesions-min", ph.config.lesions_min)->capture_default_str();
  sp->add_option("--lesions-max", ph.config.lesions_max)->capture_default_str();
  sp->add_option("--amplitude-min", ph.config.amplitude_min)->capture_default_str();
  sp->add_option("--amplitude-max", ph.config.amplitude_max)->capture_default_str();
  sp->add_option("--exponent", ph.config.exponent, "Enhancement exponent p")->capture_default_str();
  sp->add_option("--noise", ph.config.noise_sigma, "Noise sigma")->capture_default_str();
  sp->add_option("--gamma-data", ph.config.gamma_data, "Low-dose level")->capture_default_str();
  sp->add_option("--test-fraction", ph.config.test_fraction)->capture_default_str();

  TrainCmd tr;
  auto* st = app.add_subcommand("train", "Train a model");
  st->fallthrough();
  st->add_option("--data", tr.data, "Dataset directory or manifest")->required();
  st->add_option("--out", tr.out, "Output directory (checkpoint.gfm, train_log.csv)")->required();
  add_model_flags(st, tr.model);
  st->add_option("-k,--iterations", tr.training.iterations)->capture_default_str();
  st->add_option("--gamma", tr.training.gamma)->capture_default_str();
  st->add_option("--tau", tr.training.tau)->capture_default_str();
  st->add_option("--alpha", tr.training.alpha)->capture_default_str();
  st->add_option("--beta", tr.training.beta)->capture_default_str();
  st->add_option("--lr", tr.training.lr)->capture_default_str();
  st->add_option("--batch", tr.training.batch)->capture_default_str();
  st->add_option("--epochs", tr.training.epochs)->capture_default_str();
  st->add_option("--max-steps", tr.training.max_steps, "Stop after this many steps (0: no cap)")->capture_default_str();
  st->add_option("--truncate", tr.training.truncate, "Backpropagate through the last N iterations (0: all)")
      ->capture_default_str();
  st->add_option("--val-slices", tr.training.val_slices)->capture_default_str();
  st->add_option("--clip-norm", tr.training.clip_norm, "Global gradient-norm clip (0: off)")->capture_default_str();
  st->add_option("--head-init-scale", tr.training.head_init_scale)->capture_default_str();
  st->add_option("--log-every", tr.training.log_every)->capture_default_str();

  SimulateCmd sm;
  auto* ss = app.add_subcommand("simulate", "Synthesize the dose series for cases");
  ss->fallthrough();
  ss->add_option("--checkpoint", sm.checkpoint, "Model checkpoint");
  ss->add_flag("--stub", sm.stub, "Identity model instead of a checkpoint");
  ss->add_option("--data", sm.data, "Dataset directory or manifest")->required();
  ss->add_option("--case", sm.case_id, "Single case id");
  ss->add_option("--split", sm.split, "train, test or all")->capture_default_str();
  ss->add_option("--out", sm.out, "Output directory")->required();
  ss->add_option("-k,--iterations", sm.iterations)->capture_default_str();
  ss->add_option("--gamma", sm.gamma)->capture_default_str();

  EvaluateCmd ev;
  auto* se = app.add_subcommand("evaluate", "Metrics for simulated series");
  se->fallthrough();
  se->add_option("--data", ev.data, "Dataset directory or manifest")->required();
  se->add_option("--pred", ev.pred, "Directory written by simulate")->required();
  se->add_option("--out", ev.out, "Report directory")->required();
  se->add_option("--split", ev.split)->capture_default_str();
  se->add_option("--tau", ev.tau)->capture_default_str();
  se->add_flag("--no-plots", ev.no_plots);

  BenchCmd bn;
  auto* sb = app.add_subcommand("bench", "Throughput of k-step simulation");
  sb->fallthrough();
  sb->add_option("--checkpoint", bn.checkpoint);
  sb->add_flag("--stub", bn.stub);
  sb->add_option("--size", bn.size)->capture_default_str();
  sb->add_option("--batch", bn.batch)->capture_default_str();
  sb->add_option("-k,--iterations", bn.iterations)->capture_default_str();
  sb->add_option("--warmup", bn.warmup)->capture_default_str();
  sb->add_option("--timed", bn.timed)->capture_default_str();
  sb->add_option("--repeat", bn.repeat)->capture_default_str();
  sb->add_option("--log", bn.log, "Append results to this CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("usage", e.what());
    return 2;
  }

  try {
    if (sp->parsed()) return cmd_phantom(ph, common);
    if (st->parsed()) return cmd_train(tr, common);
    if (ss->parsed()) return cmd_simulate(sm, common);
    if (se->parsed()) return cmd_evaluate(ev, common);
    if (sb->parsed()) return cmd_bench(bn, common);
  } catch (const ValidationError& e) {
    report_error("validation", e.what());
    return 2;
  } catch (const NumericalError& e) {
    report_error("numerical", e.what());
    return 3;
  } catch (const IoError& e) {
    report_error("io", e.what());
    return 3;
  } catch (const std::exception& e) {
    report_error("runtime", e.what());
    return 3;
  }
  return 2;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"gformer"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace gformer::cli
