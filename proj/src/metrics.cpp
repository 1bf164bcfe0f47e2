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

#include "gformer/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <thread>

#include "gformer/error.hpp"
#include "gformer/ssim.hpp"

namespace gformer::metrics {

namespace {

void require_same_size(std::span<const float> a, std::span<const float> b, const char* what) {
  if (a.size() != b.size()) throw ValidationError(std::string(what) + ": size mismatch");
  if (a.empty()) throw ValidationError(std::string(what) + ": empty input");
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

}  // namespace

double percentile(std::span<const float> values, double q) {
  if (values.empty()) throw ValidationError("percentile of empty input");
  if (!(q >= 0.0 && q <= 100.0)) throw ValidationError("percentile must be in [0, 100]");
  std::vector<float> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, v.size() - 1);
  const double f = pos - static_cast<double>(lo);
  return static_cast<double>(v[lo]) * (1.0 - f) + static_cast<double>(v[hi]) * f;
}

double mse(std::span<const float> x, std::span<const float> y) {
  require_same_size(x, y, "mse");
  double acc = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(x.size());
}

double psnr(std::span<const float> x, std::span<const float> y, double peak) {
  if (!(peak > 0.0)) throw ValidationError("psnr: peak must be positive");
  const double m = mse(x, y);
  if (m < 1e-12) return kPsnrSentinel;
  return 10.0 * std::log10(peak * peak / m);
}

double rmse(std::span<const float> x, std::span<const float> y) { return std::sqrt(mse(x, y)); }

double ssim(const Tensor<float>& x, const Tensor<float>& y, double dynamic_range) {
  SsimOptions opt;
  opt.dynamic_range = dynamic_range;
  return gformer::ssim(x, y, opt);
}

RoiSpec make_roi(std::span<const float> pre, std::span<const float> post, std::span<const float> mask, double tau) {
  require_same_size(pre, post, "make_roi");
  require_same_size(pre, mask, "make_roi");
  RoiSpec r;
  r.roi.assign(pre.size(), 0);
  r.background.assign(pre.size(), 0);
  for (size_t i = 0; i < pre.size(); ++i) {
    const double m = mask[i];
    const double u = static_cast<double>(post[i]) * m - static_cast<double>(pre[i]) * m - tau;
    if (u > 0.0) {
      r.roi[i] = 1;
      ++r.roi_count;
    } else if (m != 0.0) {
      r.background[i] = 1;
      ++r.background_count;
    }
  }
  r.empty_roi = r.roi_count == 0;
  return r;
}

namespace {

struct Stats {
  double mean = 0.0;
  double std = 0.0;
};

Stats masked_stats(std::span<const float> image, const std::vector<uint8_t>& sel, int64_t count, const char* what) {
  if (image.size() != sel.size()) throw ValidationError(std::string(what) + ": size mismatch");
  if (count == 0) throw ValidationError(std::string(what) + ": empty region");
  double total = 0.0;
  for (size_t i = 0; i < image.size(); ++i) {
    if (sel[i]) total += image[i];
  }
  Stats s;
  s.mean = total / static_cast<double>(count);
  double sq = 0.0;
  for (size_t i = 0; i < image.size(); ++i) {
    if (sel[i]) sq += (image[i] - s.mean) * (image[i] - s.mean);
  }
  s.std = std::sqrt(sq / static_cast<double>(count));
  return s;
}

}  // namespace

double cnr(std::span<const float> image, const RoiSpec& roi) {
  const auto in = masked_stats(image, roi.roi, roi.roi_count, "cnr roi");
  const auto bg = masked_stats(image, roi.background, roi.background_count, "cnr background");
  return (in.mean - bg.mean) / std::max(bg.std, kStdFloor);
}

double cbr(std::span<const float> image, const RoiSpec& roi) {
  const auto in = masked_stats(image, roi.roi, roi.roi_count, "cbr roi");
  const auto bg = masked_stats(image, roi.background, roi.background_count, "cbr background");
  if (bg.mean == 0.0) throw ValidationError("cbr: background mean is zero");
  return in.mean / bg.mean;
}

double cep(std::span<const float> image, std::span<const float> pre, const RoiSpec& roi) {
  const auto in = masked_stats(image, roi.roi, roi.roi_count, "cep roi");
  const auto base = masked_stats(pre, roi.roi, roi.roi_count, "cep roi");
  if (base.mean == 0.0) throw ValidationError("cep: pre-contrast roi mean is zero");
  return 100.0 * (in.mean - base.mean) / base.mean;
}

std::string environment_descriptor() {
  std::string cpu = "unknown-cpu";
  std::ifstream is("/proc/cpuinfo");
  for (std::string line; std::getline(is, line);) {
    if (line.rfind("model name", 0) == 0) {
      cpu = line.substr(line.find(':') + 2);
      break;
    }
  }
  std::ostringstream os;
  os << cpu << "; hw_threads=" << std::thread::hardware_concurrency();
#if defined(__clang__)
  os << "; clang " << __clang_major__ << "." << __clang_minor__;
#elif defined(__GNUC__)
  os << "; gcc " << __GNUC__ << "." << __GNUC_MINOR__;
#endif
#ifdef NDEBUG
  os << "; release";
#else
  os << "; debug";
#endif
  return os.str();
}

Throughput throughput(const std::function<void()>& run, int64_t images_per_call, int n_warmup, int n_timed) {
  if (n_timed < 1) throw ValidationError("throughput: n_timed must be >= 1");
  if (images_per_call < 1) throw ValidationError("throughput: images_per_call must be >= 1");
  for (int i = 0; i < n_warmup; ++i) run();
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < n_timed; ++i) run();
  const auto t1 = std::chrono::steady_clock::now();
  Throughput t;
  t.seconds = std::max(std::chrono::duration<double>(t1 - t0).count(), 1e-9);
  t.images = images_per_call * n_timed;
  t.images_per_second = static_cast<double>(t.images) / t.seconds;
  t.environment = environment_descriptor();
  return t;
}

std::vector<MetricRow> evaluate_series(const SeriesInput& in) {
  if (in.predictions.size() != in.nominal_doses.size()) {
    throw ValidationError("evaluate_series: predictions and doses differ in length");
  }
  require_same_shape(in.pre.shape(), in.post.shape(), "evaluate_series");
  require_same_shape(in.pre.shape(), in.mask.shape(), "evaluate_series");
  const auto roi = make_roi(in.pre.span(), in.post.span(), in.mask.span(), in.tau);
  const bool contrast = !roi.empty_roi && roi.background_count > 0;

  std::vector<MetricRow> rows;
  for (size_t i = 0; i < in.predictions.size(); ++i) {
    const auto& p = in.predictions[i];
    require_same_shape(p.shape(), in.pre.shape(), "evaluate_series");
    MetricRow r;
    r.case_id = in.case_id;
    r.iteration = static_cast<int64_t>(i) + 1;
    r.nominal_dose = in.nominal_doses[i];
    if (in.reference) {
      if (auto ref = in.reference(in.nominal_doses[i])) {
        require_same_shape(ref->shape(), p.shape(), "evaluate_series reference");
        const double peak = std::max(percentile(ref->span(), 99.9), 1e-12);
        r.psnr = psnr(p.span(), ref->span(), peak);
        r.rmse = rmse(p.span(), ref->span());
        r.ssim = ssim(p, *ref, peak);
      }
    }
    if (contrast) {
      r.cnr = cnr(p.span(), roi);
      r.cbr = cbr(p.span(), roi);
      r.cep = cep(p.span(), in.pre.span(), roi);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<MetricRow> aggregate(const std::vector<MetricRow>& rows) {
  std::map<int64_t, std::vector<const MetricRow*>> by_iter;
  for (const auto& r : rows) by_iter[r.iteration].push_back(&r);
  using Field = std::optional<double> MetricRow::*;
  const Field fields[] = {&MetricRow::psnr, &MetricRow::ssim, &MetricRow::rmse,
                          &MetricRow::cnr, &MetricRow::cbr, &MetricRow::cep};
  std::vector<MetricRow> out;
  for (const auto& [iter, group] : by_iter) {
    MetricRow mean, sd;
    mean.case_id = "mean";
    sd.case_id = "std";
    mean.iteration = sd.iteration = iter;
    mean.nominal_dose = sd.nominal_dose = group.front()->nominal_dose;
    for (Field f : fields) {
      double total = 0.0;
      int n = 0;
      for (const auto* r : group) {
        if ((r->*f).has_value()) {
          total += *(r->*f);
          ++n;
        }
      }
      if (n == 0) continue;
      const double m = total / n;
      double sq = 0.0;
      for (const auto* r : group) {
        if ((r->*f).has_value()) sq += (*(r->*f) - m) * (*(r->*f) - m);
      }
      mean.*f = m;
      sd.*f = std::sqrt(sq / n);
    }
    out.push_back(mean);
    out.push_back(sd);
  }
  return out;
}

void write_report_csv(const std::vector<MetricRow>& rows, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << "case_id,iteration,nominal_dose,psnr,ssim,rmse,cnr,cbr,cep\n";
  auto cell = [](const std::optional<double>& v) { return v ? fmt(*v, 10) : std::string(); };
  auto emit = [&](const MetricRow& r) {
    os << r.case_id << ',' << r.iteration << ',' << fmt(r.nominal_dose, 10) << ',' << cell(r.psnr) << ','
       << cell(r.ssim) << ',' << cell(r.rmse) << ',' << cell(r.cnr) << ',' << cell(r.cbr) << ',' << cell(r.cep)
       << '\n';
  };
  for (const auto& r : rows) emit(r);
  for (const auto& r : aggregate(rows)) emit(r);
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

std::vector<std::filesystem::path> write_metric_plots(const std::vector<MetricRow>& rows,
                                                      const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (!std::filesystem::is_directory(out_dir)) throw IoError("cannot create '" + out_dir.string() + "'");
  const auto agg = aggregate(rows);
  using Field = std::optional<double> MetricRow::*;
  const std::pair<const char*, Field> metrics[] = {{"psnr", &MetricRow::psnr}, {"ssim", &MetricRow::ssim},
                                                   {"rmse", &MetricRow::rmse}, {"cnr", &MetricRow::cnr},
                                                   {"cbr", &MetricRow::cbr},   {"cep", &MetricRow::cep}};
  std::vector<std::filesystem::path> written;
  for (const auto& [name, field] : metrics) {
    std::vector<std::pair<double, double>> pts;
    for (const auto& r : agg) {
      if (r.case_id == "mean" && (r.*field).has_value()) pts.emplace_back(r.nominal_dose, *(r.*field));
    }
    if (pts.empty()) continue;
    std::sort(pts.begin(), pts.end());
    double x0 = pts.front().first, x1 = pts.back().first;
    double y0 = pts.front().second, y1 = y0;
    for (const auto& p : pts) {
      y0 = std::min(y0, p.second);
      y1 = std::max(y1, p.second);
    }
    if (x1 - x0 < 1e-12) x1 = x0 + 1.0;
    if (y1 - y0 < 1e-12) {
      y0 -= 0.5;
      y1 += 0.5;
    }
    const double w = 480, h = 320, m = 50;
    auto px = [&](double x) { return m + (x - x0) / (x1 - x0) * (w - 2 * m); };
    auto py = [&](double y) { return h - m - (y - y0) / (y1 - y0) * (h - 2 * m); };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" data-metric=\""
        << name << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<line x1=\"" << m << "\" y1=\"" << h - m << "\" x2=\"" << w - m << "\" y2=\"" << h - m
        << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << m << "\" y1=\"" << m << "\" x2=\"" << m << "\" y2=\"" << h - m << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << w / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\">nominal dose</text>\n";
    svg << "<text x=\"14\" y=\"" << h / 2 << "\" transform=\"rotate(-90 14 " << h / 2 << ")\" text-anchor=\"middle\">"
        << name << "</text>\n";
    svg << "<text x=\"" << m << "\" y=\"" << h - m + 16 << "\" font-size=\"10\">" << fmt(x0, 4) << "</text>\n";
    svg << "<text x=\"" << w - m << "\" y=\"" << h - m + 16 << "\" font-size=\"10\" text-anchor=\"end\">"
        << fmt(x1, 4) << "</text>\n";
    svg << "<text x=\"" << m - 4 << "\" y=\"" << h - m << "\" font-size=\"10\" text-anchor=\"end\">" << fmt(y0, 4)
        << "</text>\n";
    svg << "<text x=\"" << m - 4 << "\" y=\"" << m + 4 << "\" font-size=\"10\" text-anchor=\"end\">" << fmt(y1, 4)
        << "</text>\n";
    svg << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
    for (const auto& p : pts) svg << fmt(px(p.first)) << ',' << fmt(py(p.second)) << ' ';
    svg << "\"/>\n";
    for (const auto& p : pts) {
      svg << "<circle cx=\"" << fmt(px(p.first)) << "\" cy=\"" << fmt(py(p.second))
          << "\" r=\"3\" fill=\"steelblue\" data-x=\"" << fmt(p.first, 10) << "\" data-y=\"" << fmt(p.second, 10)
          << "\"/>\n";
    }
    svg << "</svg>\n";
    const auto path = out_dir / (std::string(name) + ".svg");
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
    os << svg.str();
    written.push_back(path);
  }
  return written;
}

}  // namespace gformer::metrics
