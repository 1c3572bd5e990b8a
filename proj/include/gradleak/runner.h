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

// Experiment orchestration: the raw-frame pipeline, the feature-matrix
// attack and the extractor study, each producing one StudyReport.
//
// Report bytes depend only on the configuration and the build. Wall time is
// kept out of report.json and written to timings.csv instead.

#ifndef GRADLEAK_RUNNER_H_
#define GRADLEAK_RUNNER_H_

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradleak/attacks.h"
#include "gradleak/capsule.h"
#include "gradleak/media.h"
#include "gradleak/models.h"
#include "json.hpp"

namespace gradleak {

// Invalid or incomplete experiment configuration. Raised before any compute.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ExperimentMode { kFrames, kFeatures, kExtractorStudy };

std::string ModeName(ExperimentMode mode);
ExperimentMode ModeFromName(const std::string& name);

struct ModelConfig {
  // "dlg_lenet" for frames, "feature_classifier" for features. The study
  // always builds the simple and moderate classifiers.
  std::string architecture;
  std::uint64_t seed = 0;
  std::size_t num_classes = 100;
};

struct ExperimentConfig {
  ExperimentMode mode = ExperimentMode::kFrames;
  std::string input_path;
  std::string output_dir;
  ModelConfig model;
  AttackConfig attack;
  // Subset of {"dlg", "idlg"}; the study also accepts "rgap".
  std::vector<std::string> attacks;
  // Features mode runs one row per optimizer. Other modes use the first.
  std::vector<OptimizerKind> optimizers;
  int upscale_factor = 4;
  int fps = 30;
  // Fans out per-cell seeds; the attack's own seed field is ignored.
  std::uint64_t seed = 0;
  int jobs = 1;
  // Features mode: max-pool window along the last axis.
  std::size_t pool_window = 32;
  // Study: width of the frozen extractor's output.
  std::size_t extractor_features = 64;
  // Study: how many images of the set are attacked. 0 means all.
  std::size_t num_images = 1;
  // Starts the first attempt at the ground truth. Diagnostic only.
  bool init_at_truth = false;
  // Study: attack settings replaced per column, e.g.
  // {"simple+raw": {"max_iterations": 300}}. Keys are column ids.
  std::map<std::string, nlohmann::json> column_overrides;

  // Throws ConfigError naming the first offending field.
  void Validate() const;
};

// Defaults of one mode: 300 iterations and 10 restarts for frames; the
// stagnation schedule with 20,000 iterations for features and the study.
ExperimentConfig DefaultConfig(ExperimentMode mode);

// Keys absent from `j` keep the defaults of the mode named by j["mode"], or
// of `fallback` when the key is missing. Unknown keys raise ConfigError.
ExperimentConfig ConfigFromJson(const nlohmann::json& j,
                                std::optional<ExperimentMode> fallback = std::nullopt);
nlohmann::json ConfigToJson(const ExperimentConfig& config);

// One attempted (attack, architecture, input) combination.
struct StudyRow {
  std::string attack;
  std::string architecture;
  // Column id in the study ("moderate+extractor"), else the input kind.
  std::string input;
  std::string optimizer;
  // Frame, image or feature file index.
  std::size_t index = 0;
  bool success = false;
  std::optional<double> final_loss;
  // Mean squared error in the attacked space (pixels in [0, 1] or features).
  std::optional<double> mse;
  // ‖x̂ − x‖ / ‖x‖, reported for every attack.
  std::optional<double> relative_error;
  // Enhanced vs High for this frame.
  std::optional<double> psnr_db;
  std::optional<double> ssim;
  int iterations = 0;
  int restarts = 0;
  int perturbations = 0;
  std::optional<std::size_t> true_label;
  std::optional<std::size_t> recovered_label;
  // Empty unless the cell raised.
  std::string error;
  // Rank report, thresholds and similar per-cell context.
  nlohmann::json diagnostics = nlohmann::json::object();
  // Relative to the output directory.
  std::string trace_file;
  // Not part of report.json.
  double wall_time = 0.0;

  bool operator==(const StudyRow& other) const;
};

struct StudyReport {
  ExperimentMode mode = ExperimentMode::kFrames;
  nlohmann::json config;
  // In task order (index, then column or optimizer); never filtered.
  std::vector<StudyRow> rows;
  // Frames: Table 1 row and quality reports. Study: Table 2 grid.
  nlohmann::json summary = nlohmann::json::object();

  // Per-run artifacts not stored in report.json: loss traces keyed by
  // trace_file, and frame sequences keyed by sub-directory.
  std::map<std::string, nlohmann::json> traces;
  std::map<std::string, FrameSequence> frames;
  // Quality CSVs keyed by file name.
  std::map<std::string, std::string> extra_files;
};

nlohmann::json StudyReportToJson(const StudyReport& report);
StudyReport StudyReportFromJson(const nlohmann::json& j);
// Header plus one line per row, in report order.
std::string StudyReportCsv(const StudyReport& report);
// Canonical report.json text: sorted keys, two-space indent, final newline.
std::string CanonicalReportText(const StudyReport& report);

StudyReport RunFramesExperiment(const ExperimentConfig& config);
StudyReport RunFeaturesExperiment(const ExperimentConfig& config);
StudyReport RunExtractorStudy(const ExperimentConfig& config);
// Dispatches on config.mode after validation.
StudyReport RunExperiment(const ExperimentConfig& config);

// Writes report.json, report.csv, timings.csv, traces/ and frame
// directories under output_dir. I/O failures raise IoError with the path.
void EmitReport(const StudyReport& report, const std::string& output_dir);

// Table 2 column ids, in table order.
const std::vector<std::string>& StudyColumns();

// Study Y/N rule. Iterative attacks: best loss below the threshold and
// target MSE below 1e-2. R-GAP: relative error below 1e-2.
inline constexpr double kStudyMseLimit = 1e-2;
inline constexpr double kStudyRelativeErrorLimit = 1e-2;

// Capsule of a chained extractor+classifier model restated against the
// classifier alone: "classifier." prefixes are stripped, model_id and
// input_shape become the classifier's. Frozen extractor parameters never
// appear in the capsule, so no gradient is lost.
GradientCapsule ClassifierCapsule(const GradientCapsule& chained, const Model& classifier,
                                  const std::string& prefix = "classifier.");

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Exceptions escaping
// fn are rethrown after all workers finish, lowest index first.
void ParallelFor(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

// Keeps multi-megabyte autodiff buffers on the heap instead of a fresh
// mmap per allocation. No-op outside glibc. Call once, before threads start.
void TuneAllocator();

}  // namespace gradleak

#endif  // GRADLEAK_RUNNER_H_
