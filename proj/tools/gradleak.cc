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

// gradleak: command-line front end for the experiments.
//
// Exit codes: 0 completed (attack outcomes do not matter), 1 configuration
// error, 2 I/O error.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "gradleak/media.h"
#include "gradleak/quality.h"
#include "gradleak/runner.h"
#include "gradleak/tensor_io.h"
#include "json.hpp"

namespace {

using namespace gradleak;

constexpr int kExitConfig = 1;
constexpr int kExitIo = 2;

struct CommonFlags {
  std::string config_path;
  std::string input;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::string optimizer;
};

void AddCommonFlags(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "JSON experiment configuration");
  cmd->add_option("--input", flags.input, "Frame directory, feature file or image set");
  cmd->add_option("--out", flags.out, "Output directory");
  cmd->add_option("--seed", flags.seed, "Master seed");
  cmd->add_option("--jobs", flags.jobs, "Worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--optimizer", flags.optimizer, "Restrict to one optimizer")
      ->check(CLI::IsMember({"lbfgs", "adam"}));
}

nlohmann::json ReadJsonFile(const std::string& path) {
  const Bytes bytes = ReadFileBytes(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

ExperimentConfig ResolveConfig(ExperimentMode mode, const CommonFlags& flags) {
  nlohmann::json j = nlohmann::json::object();
  if (!flags.config_path.empty()) j = ReadJsonFile(flags.config_path);
  ExperimentConfig config = ConfigFromJson(j, mode);
  if (!flags.input.empty()) config.input_path = flags.input;
  if (!flags.out.empty()) config.output_dir = flags.out;
  if (flags.seed) config.seed = *flags.seed;
  if (flags.jobs) config.jobs = *flags.jobs;
  if (!flags.optimizer.empty()) config.optimizers = {OptimizerFromName(flags.optimizer)};
  config.Validate();
  return config;
}

void PrintSummary(const StudyReport& report) {
  std::size_t ok = 0, failed = 0;
  for (const StudyRow& r : report.rows) {
    ok += r.success;
    failed += !r.error.empty();
  }
  std::cout << ModeName(report.mode) << ": " << report.rows.size() << " rows, " << ok
            << " successful";
  if (failed) std::cout << ", " << failed << " raised";
  std::cout << '\n';
  if (report.summary.contains("table1_row")) {
    std::cout << "table1 " << report.summary["table1_row"].dump() << '\n';
  }
  if (report.summary.contains("table2")) {
    const nlohmann::json& table = report.summary["table2"];
    std::cout << "attack";
    for (const auto& c : report.summary["columns"]) std::cout << '\t' << c.get<std::string>();
    std::cout << '\n';
    for (const auto& [attack, cells] : table.items()) {
      std::cout << attack;
      for (const auto& c : report.summary["columns"]) {
        std::cout << '\t' << cells.value(c.get<std::string>(), "-");
      }
      std::cout << '\n';
    }
    for (const auto& d : report.summary["deviations"]) {
      std::cout << "deviation " << d["attack"].get<std::string>() << " @ "
                << d["column"].get<std::string>() << ": observed "
                << d["observed"].get<std::string>() << '\n';
    }
  }
}

int RunStudy(ExperimentMode mode, const CommonFlags& flags) {
  const ExperimentConfig config = ResolveConfig(mode, flags);
  const StudyReport report = RunExperiment(config);
  EmitReport(report, config.output_dir);
  PrintSummary(report);
  return 0;
}

int RunScore(const std::string& reference, const std::string& test, const std::string& label,
             const std::string& out) {
  if (out.empty()) throw ConfigError("--out is required");
  const FrameSequence a = LoadFrameDir(reference);
  const FrameSequence b = LoadFrameDir(test);
  const QualityReport q = ScoreSequences(a, b, label);
  std::filesystem::create_directories(out);
  const std::string json = QualityReportToJson(q).dump(2) + "\n";
  const std::string csv = QualityReportCsv(q);
  WriteFileBytes(out + "/report.json",
                 {reinterpret_cast<const std::uint8_t*>(json.data()), json.size()});
  WriteFileBytes(out + "/report.csv",
                 {reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()});
  std::cout << label << ": " << CellText(q) << " over " << q.per_frame.size() << " frames\n";
  return 0;
}

int RunReport(const std::string& in, const std::string& out) {
  std::string path = in;
  if (std::filesystem::is_directory(path)) path += "/report.json";
  const StudyReport report = StudyReportFromJson(ReadJsonFile(path));
  PrintSummary(report);
  if (!out.empty()) EmitReport(report, out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  TuneAllocator();
  CLI::App app{"Gradient leakage experiments"};
  app.require_subcommand(1);

  CommonFlags frames_flags, features_flags, study_flags;
  CLI::App* frames = app.add_subcommand("attack-frames", "Raw-frame reconstruction pipeline");
  AddCommonFlags(frames, frames_flags);
  CLI::App* features = app.add_subcommand("attack-features", "Attack on a feature matrix");
  AddCommonFlags(features, features_flags);
  CLI::App* study = app.add_subcommand("extractor-study", "Attack x classifier grid");
  AddCommonFlags(study, study_flags);

  std::string reference, test, label = "Enhanced vs High", score_out;
  CLI::App* score = app.add_subcommand("score", "PSNR/SSIM between two frame directories");
  score->add_option("--reference", reference)->required();
  score->add_option("--test", test)->required();
  score->add_option("--label", label);
  score->add_option("--out", score_out);

  std::string report_in, report_out;
  CLI::App* report = app.add_subcommand("report", "Summarize or re-emit a report");
  report->add_option("--in", report_in, "report.json or its directory")->required();
  report->add_option("--out", report_out, "Re-emit report.json and report.csv here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*frames) return RunStudy(ExperimentMode::kFrames, frames_flags);
    if (*features) return RunStudy(ExperimentMode::kFeatures, features_flags);
    if (*study) return RunStudy(ExperimentMode::kExtractorStudy, study_flags);
    if (*score) return RunScore(reference, test, label, score_out);
    if (*report) return RunReport(report_in, report_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const FormatError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ParseError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitConfig;
}
