/*
 * Copyright 2026 The GradLeak Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "gradleak/quality.h"

#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "gradleak/tensor.h"
#include "gradleak/tensor_io.h"

namespace gradleak {
namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = (0.01 * 255) * (0.01 * 255);
constexpr double kC2 = (0.03 * 255) * (0.03 * 255);

void CheckSameSize(const Frame& a, const Frame& b, const char* metric) {
  if (a.width != b.width || a.height != b.height) {
    throw DimensionError(std::string(metric) + " needs equal sizes, got " +
                         std::to_string(a.width) + "x" + std::to_string(a.height) + " and " +
                         std::to_string(b.width) + "x" + std::to_string(b.height));
  }
}

std::array<double, kWindow> GaussianKernel() {
  std::array<double, kWindow> k{};
  double sum = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    k[i] = std::exp(-d * d / (2 * kSigma * kSigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Valid-mode separable filtering of a w×h plane.
std::vector<double> Filter(const std::vector<double>& plane, std::size_t w, std::size_t h,
                           const std::array<double, kWindow>& k) {
  const std::size_t ow = w - kWindow + 1, oh = h - kWindow + 1;
  std::vector<double> rows(h * ow);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < kWindow; ++i) s += k[i] * plane[y * w + x + i];
      rows[y * ow + x] = s;
    }
  }
  std::vector<double> out(oh * ow);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < kWindow; ++i) s += k[i] * rows[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  }
  return out;
}

Frame To128(const Frame& f) {
  if (f.width == kScoreResolution && f.height == kScoreResolution) return f;
  return ResizeBicubic(f, kScoreResolution, kScoreResolution);
}

std::string Fixed(double v, int digits) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace

double Psnr(const Frame& a, const Frame& b) {
  CheckSameSize(a, b, "PSNR");
  if (a.pixels.empty()) throw DimensionError("PSNR of empty frames");
  double sse = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - static_cast<double>(b.pixels[i]);
    sse += d * d;
  }
  if (sse == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = sse / static_cast<double>(a.pixels.size());
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

double Ssim(const Frame& a, const Frame& b) {
  CheckSameSize(a, b, "SSIM");
  if (a.width < kWindow || a.height < kWindow) {
    throw DimensionError("SSIM needs frames of at least 11x11, got " + std::to_string(a.width) +
                         "x" + std::to_string(a.height));
  }
  static const std::array<double, kWindow> kernel = GaussianKernel();
  const std::size_t w = a.width, h = a.height, n = w * h;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = a.pixels[i * 3 + c];
      y[i] = b.pixels[i * 3 + c];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = Filter(x, w, h, kernel), my = Filter(y, w, h, kernel);
    const auto exx = Filter(xx, w, h, kernel), eyy = Filter(yy, w, h, kernel),
               exy = Filter(xy, w, h, kernel);
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = exx[i] - mx[i] * mx[i];
      const double vy = eyy[i] - my[i] * my[i];
      const double cov = exy[i] - mx[i] * my[i];
      total += ((2 * mx[i] * my[i] + kC1) * (2 * cov + kC2)) /
               ((mx[i] * mx[i] + my[i] * my[i] + kC1) * (vx + vy + kC2));
    }
    count += mx.size();
  }
  return total / static_cast<double>(count);
}

QualityReport ScoreSequences(const FrameSequence& a, const FrameSequence& b,
                             const std::string& label) {
  if (a.frames.size() != b.frames.size()) {
    throw DimensionError("cannot score '" + label + "': sequences have " +
                         std::to_string(a.frames.size()) + " and " +
                         std::to_string(b.frames.size()) + " frames");
  }
  QualityReport report;
  report.comparison_label = label;
  double psnr_sum = 0.0, ssim_sum = 0.0;
  std::size_t finite = 0;
  for (std::size_t i = 0; i < a.frames.size(); ++i) {
    const Frame fa = To128(a.frames[i]), fb = To128(b.frames[i]);
    FrameScore s{i, Psnr(fa, fb), Ssim(fa, fb)};
    if (std::isinf(s.psnr_db)) {
      ++report.infinite_psnr_frames;
    } else {
      psnr_sum += s.psnr_db;
      ++finite;
    }
    ssim_sum += s.ssim;
    report.per_frame.push_back(s);
  }
  if (finite > 0) report.mean_psnr = psnr_sum / static_cast<double>(finite);
  if (!report.per_frame.empty()) {
    report.mean_ssim = ssim_sum / static_cast<double>(report.per_frame.size());
  }
  return report;
}

std::string QualityReportCsv(const QualityReport& report) {
  std::ostringstream out;
  out << "frame,psnr_db,ssim\n";
  for (const FrameScore& s : report.per_frame) {
    out << s.frame << ',' << Fixed(s.psnr_db, 6) << ',' << Fixed(s.ssim, 8) << '\n';
  }
  return out.str();
}

nlohmann::json QualityReportToJson(const QualityReport& report) {
  nlohmann::json frames = nlohmann::json::array();
  for (const FrameScore& s : report.per_frame) {
    frames.push_back({{"frame", s.frame}, {"psnr_db", JsonDouble(s.psnr_db)}, {"ssim", s.ssim}});
  }
  return {{"comparison_label", report.comparison_label},
          {"per_frame", frames},
          {"mean_psnr", report.mean_psnr ? nlohmann::json(*report.mean_psnr) : nlohmann::json()},
          {"mean_ssim", report.mean_ssim},
          {"infinite_psnr_frames", report.infinite_psnr_frames},
          {"ssim_variant", kSsimVariant}};
}

QualityReport QualityReportFromJson(const nlohmann::json& j) {
  QualityReport r;
  r.comparison_label = j.at("comparison_label").get<std::string>();
  for (const auto& f : j.at("per_frame")) {
    r.per_frame.push_back({f.at("frame").get<std::size_t>(), DoubleFromJson(f.at("psnr_db")),
                           f.at("ssim").get<double>()});
  }
  if (!j.at("mean_psnr").is_null()) r.mean_psnr = j.at("mean_psnr").get<double>();
  r.mean_ssim = j.at("mean_ssim").get<double>();
  r.infinite_psnr_frames = j.at("infinite_psnr_frames").get<std::size_t>();
  return r;
}

std::string CellText(const QualityReport& report) {
  const double psnr = report.mean_psnr.value_or(std::numeric_limits<double>::infinity());
  return Fixed(psnr, 2) + "/" + Fixed(report.mean_ssim, 4);
}

nlohmann::json Table1Row(const QualityReport& baseline, const QualityReport& enhanced_vs_high,
                         const QualityReport& enhanced_vs_low) {
  return {{"baseline", CellText(baseline)},
          {"no_ref",
           {{"enhanced_vs_high", CellText(enhanced_vs_high)},
            {"enhanced_vs_low", CellText(enhanced_vs_low)}}},
          {"one_ref", nullptr},
          {"multi_ref", nullptr}};
}

}  // namespace gradleak
