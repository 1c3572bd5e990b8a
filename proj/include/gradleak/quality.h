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

// Frame fidelity: PSNR and SSIM over 8-bit RGB frames.

#ifndef GRADLEAK_QUALITY_H_
#define GRADLEAK_QUALITY_H_

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "gradleak/media.h"
#include "json.hpp"

namespace gradleak {

// 10·log10(255² / MSE) over every RGB sample. Identical frames give +inf.
double Psnr(const Frame& a, const Frame& b);

// Mean of the per-channel SSIM maps. 11×11 Gaussian window (σ = 1.5),
// K1 = 0.01, K2 = 0.03, L = 255, evaluated only where the window fits.
double Ssim(const Frame& a, const Frame& b);

inline constexpr std::size_t kScoreResolution = 128;
inline constexpr char kSsimVariant[] = "rgb-mean, gaussian 11x11 sigma 1.5, valid window";

struct FrameScore {
  std::size_t frame = 0;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct QualityReport {
  std::string comparison_label;
  std::vector<FrameScore> per_frame;
  // Mean over finite PSNR values; empty when none is finite.
  std::optional<double> mean_psnr;
  double mean_ssim = 0.0;
  // Frames with +inf PSNR, left out of mean_psnr.
  std::size_t infinite_psnr_frames = 0;
};

// Both sequences are resized to 128×128 (bicubic) before scoring.
QualityReport ScoreSequences(const FrameSequence& a, const FrameSequence& b,
                             const std::string& label);

// "frame,psnr_db,ssim" header plus one row per frame.
std::string QualityReportCsv(const QualityReport& report);
nlohmann::json QualityReportToJson(const QualityReport& report);
QualityReport QualityReportFromJson(const nlohmann::json& j);

// "psnr/ssim" with two and four decimals, the Table 1 cell format.
std::string CellText(const QualityReport& report);

// {"baseline": cell, "no_ref": {"enhanced_vs_high", "enhanced_vs_low"},
//  "one_ref": null, "multi_ref": null}
nlohmann::json Table1Row(const QualityReport& baseline, const QualityReport& enhanced_vs_high,
                         const QualityReport& enhanced_vs_low);

}  // namespace gradleak

#endif  // GRADLEAK_QUALITY_H_
