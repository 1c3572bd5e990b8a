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

#include "gradleak/runner.h"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

#include "gradleak/capsule.h"
#include "gradleak/media.h"
#include "gradleak/ops.h"
#include "gtest/gtest.h"
#include "metric_oracles.h"
#include "test_util.h"

namespace gradleak {
namespace {

namespace fs = std::filesystem;

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    path_ = fs::temp_directory_path() /
            ("gradleak_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  std::string str() const { return path_.string(); }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

void WriteFrames(const fs::path& dir, std::size_t count, std::size_t w, std::size_t h,
                 std::uint64_t seed) {
  fs::create_directories(dir);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    SaveImage(testing::RandomFrame(w, h, rng),
              (dir / ("frame_" + std::to_string(i) + ".png")).string());
  }
}

std::string ReadText(const fs::path& p) {
  const Bytes b = ReadFileBytes(p.string());
  return std::string(b.begin(), b.end());
}

ExperimentConfig FramesConfig(const ScratchDir& dir) {
  ExperimentConfig c = DefaultConfig(ExperimentMode::kFrames);
  c.input_path = (dir / "in").string();
  c.output_dir = (dir / "out").string();
  c.seed = 5;
  return c;
}

TEST(ConfigTest, ModeDefaults) {
  const ExperimentConfig frames = DefaultConfig(ExperimentMode::kFrames);
  EXPECT_EQ(frames.attack.max_iterations, 300);
  EXPECT_EQ(frames.attack.max_restarts, 10);
  EXPECT_EQ(frames.attack.loss_threshold, 1e-5);
  EXPECT_EQ(frames.upscale_factor, 4);
  EXPECT_EQ(frames.fps, 30);
  const ExperimentConfig features = DefaultConfig(ExperimentMode::kFeatures);
  EXPECT_EQ(features.attack.max_iterations, 20000);
  EXPECT_EQ(features.attack.schedule, Schedule::kStagnation);
  EXPECT_EQ(features.attack.stagnation_window, 1000);
  EXPECT_EQ(features.attack.stagnation_noise_sigma, 1e-3);
  EXPECT_EQ(features.optimizers.size(), 2u);
  EXPECT_EQ(features.pool_window, 32u);
  const ExperimentConfig study = DefaultConfig(ExperimentMode::kExtractorStudy);
  EXPECT_EQ(study.attacks, (std::vector<std::string>{"dlg", "idlg", "rgap"}));
  EXPECT_EQ(study.attack.max_iterations, 20000);
}

TEST(ConfigTest, JsonRoundTrip) {
  ExperimentConfig c = DefaultConfig(ExperimentMode::kExtractorStudy);
  c.input_path = "imgs";
  c.output_dir = "out";
  c.seed = 42;
  c.num_images = 3;
  c.column_overrides["simple+raw"] = {{"max_iterations", 7}};
  const nlohmann::json j = ConfigToJson(c);
  const ExperimentConfig back = ConfigFromJson(j);
  EXPECT_EQ(ConfigToJson(back), j);
  back.Validate();
}

TEST(ConfigTest, RejectsBadInputBeforeCompute) {
  auto parse = [](const nlohmann::json& j) {
    ExperimentConfig c = ConfigFromJson(j, ExperimentMode::kFrames);
    c.Validate();
  };
  const nlohmann::json ok = {{"input_path", "a"}, {"output_dir", "b"}};
  EXPECT_NO_THROW(parse(ok));
  EXPECT_THROW(parse({{"output_dir", "b"}}), ConfigError);
  EXPECT_THROW(parse({{"input_path", "a"}}), ConfigError);
  auto with = [&](const char* key, nlohmann::json value) {
    nlohmann::json j = ok;
    j[key] = std::move(value);
    return j;
  };
  EXPECT_THROW(parse(with("bogus", 1)), ConfigError);
  EXPECT_THROW(parse(with("mode", "features")), ConfigError);
  EXPECT_THROW(parse(with("attacks", {"rgap"})), ConfigError);
  EXPECT_THROW(parse(with("attacks", {"dlg", "idlg"})), ConfigError);
  EXPECT_THROW(parse(with("fps", 0)), ConfigError);
  EXPECT_THROW(parse(with("jobs", 0)), ConfigError);
  EXPECT_THROW(parse(with("upscale_factor", "four")), ConfigError);
  EXPECT_THROW(parse(with("optimizers", {"sgd"})), ConfigError);
  EXPECT_THROW(parse(with("attack", {{"max_iterations", -1}})), ConfigError);
  EXPECT_THROW(parse(with("attack", {{"iterations", 5}})), ConfigError);
  EXPECT_THROW(parse(with("model", {{"architecture", "resnet"}})), ConfigError);
  EXPECT_THROW(parse(with("column_overrides", {{"simple+raw", {{"max_iterations", 1}}}})),
               ConfigError);
  EXPECT_THROW(ConfigFromJson(nlohmann::json::object()), ConfigError);

  nlohmann::json study = {{"mode", "extractor-study"}, {"input_path", "a"}, {"output_dir", "b"}};
  EXPECT_NO_THROW(ConfigFromJson(study).Validate());
  study["extractor_features"] = 60;
  EXPECT_THROW(ConfigFromJson(study).Validate(), ConfigError);
  study["extractor_features"] = 64;
  study["column_overrides"] = {{"tiny+raw", {{"max_iterations", 1}}}};
  EXPECT_THROW(ConfigFromJson(study).Validate(), ConfigError);
}

TEST(ParallelForTest, VisitsEveryIndexOnceAndRethrowsLowest) {
  for (int jobs : {1, 3}) {
    std::vector<std::atomic<int>> hits(50);
    ParallelFor(hits.size(), jobs, [&](std::size_t i) { ++hits[i]; });
    for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
    try {
      ParallelFor(20, jobs, [](std::size_t i) {
        if (i == 7 || i == 13) throw std::runtime_error(std::to_string(i));
      });
      FAIL();
    } catch (const std::runtime_error& e) {
      EXPECT_STREQ(e.what(), "7");
    }
  }
}

TEST(ClassifierCapsuleTest, MatchesCapsuleOfClassifierOnFeatures) {
  std::mt19937_64 rng(3);
  const Model extractor = BuildFrozenExtractor({3, 32, 32}, 16, 11);
  const Model classifier = BuildModerateClassifier({1, 4, 4}, 10, 12);
  const Model chained = ChainModels(extractor, classifier, "chain");
  const Tensor x = testing::RandomTensor({1, 3, 32, 32}, rng, 0.0, 1.0);
  const GradientCapsule restated = ClassifierCapsule(
      ComputeSharedGradient(chained, x, std::size_t{4}, 0), classifier);
  const Tensor features = Reshape(ForwardLogits(extractor, x), {1, 1, 4, 4});
  const GradientCapsule direct = ComputeSharedGradient(classifier, features, std::size_t{4}, 0);
  EXPECT_EQ(restated.model_id, classifier.id());
  EXPECT_EQ(restated.input_shape, classifier.input_shape());
  ASSERT_EQ(restated.gradients.size(), direct.gradients.size());
  for (const auto& [name, g] : direct.gradients) {
    ASSERT_TRUE(restated.gradients.count(name)) << name;
    EXPECT_LT(testing::MaxAbsDiff(restated.gradients.at(name).data(), g.data()), 1e-12);
  }
  GradientCapsule stray = ComputeSharedGradient(chained, x, std::size_t{4}, 0);
  stray.gradients["other.weight"] = Tensor::Scalar(0.0);
  EXPECT_THROW(ClassifierCapsule(stray, classifier), StructureError);
}

TEST(FramesExperimentTest, EmptyDirectoryGivesEmptyReport) {
  ScratchDir dir("frames_empty");
  fs::create_directories(dir / "in");
  const ExperimentConfig c = FramesConfig(dir);
  const StudyReport r = RunFramesExperiment(c);
  EXPECT_TRUE(r.rows.empty());
  EmitReport(r, c.output_dir);
  EXPECT_TRUE(fs::exists(dir / "out" / "report.json"));
  EXPECT_EQ(StudyReportFromJson(nlohmann::json::parse(ReadText(dir / "out" / "report.json")))
                .rows.size(),
            0u);
}

TEST(FramesExperimentTest, TruthInitializedPipelineEmitsEverything) {
  ScratchDir dir("frames_truth");
  WriteFrames(dir / "in", 3, 50, 40, 1);
  ExperimentConfig c = FramesConfig(dir);
  c.init_at_truth = true;
  const StudyReport r = RunFramesExperiment(c);
  ASSERT_EQ(r.rows.size(), 3u);
  for (const StudyRow& row : r.rows) {
    EXPECT_TRUE(row.success);
    EXPECT_EQ(row.iterations, 0);
    EXPECT_LT(*row.mse, 1e-20);
    EXPECT_EQ(row.true_label, row.recovered_label);
    EXPECT_TRUE(row.error.empty());
    EXPECT_FALSE(row.trace_file.empty());
  }
  EXPECT_TRUE(r.summary["table1_row"]["one_ref"].is_null());
  EXPECT_TRUE(r.summary["table1_row"]["multi_ref"].is_null());
  // Enhanced is a pure resampling of Low.
  EXPECT_GE(r.summary["quality"]["enhanced_vs_low"]["mean_ssim"].get<double>(), 0.9);

  EmitReport(r, c.output_dir);
  const fs::path out = dir / "out";
  for (const char* sub : {"high", "low", "enhanced"}) {
    const FrameSequence seq = LoadFrameDir((out / "frames" / sub).string());
    ASSERT_EQ(seq.frames.size(), 3u) << sub;
    EXPECT_EQ(seq.fps, 30.0);
    const std::size_t side = std::string(sub) == "low" ? 32 : 128;
    EXPECT_EQ(seq.frames[0].width, side);
    EXPECT_EQ(seq.frames[0].height, side);
  }
  for (const StudyRow& row : r.rows) EXPECT_TRUE(fs::exists(out / row.trace_file));
  const std::string csv = ReadText(out / "report.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3);
  EXPECT_TRUE(fs::exists(out / "timings.csv"));
  EXPECT_TRUE(fs::exists(out / "quality_enhanced_vs_low.csv"));

  const StudyReport back = StudyReportFromJson(nlohmann::json::parse(ReadText(out / "report.json")));
  EXPECT_EQ(back.rows, r.rows);
  EXPECT_EQ(back.summary, r.summary);
  EXPECT_EQ(CanonicalReportText(back), ReadText(out / "report.json"));
}

TEST(FramesExperimentTest, DeterministicAcrossRunsAndJobCounts) {
  ScratchDir dir("frames_det");
  WriteFrames(dir / "in", 2, 32, 32, 2);
  ExperimentConfig c = FramesConfig(dir);
  c.attack.max_iterations = 3;
  c.attack.max_restarts = 2;
  const std::string first = CanonicalReportText(RunFramesExperiment(c));
  c.jobs = 2;
  c.output_dir = (dir / "elsewhere").string();
  EXPECT_EQ(CanonicalReportText(RunFramesExperiment(c)), first);
  c.seed = 6;
  EXPECT_NE(CanonicalReportText(RunFramesExperiment(c)), first);
}

TEST(FramesExperimentTest, FailingCellsAreKeptWithTheirError) {
  ScratchDir dir("frames_fail");
  WriteFrames(dir / "in", 2, 32, 32, 3);
  ExperimentConfig c = FramesConfig(dir);
  c.attack.optimize_label = false;
  c.attack.label = 999;
  const StudyReport r = RunFramesExperiment(c);
  ASSERT_EQ(r.rows.size(), 2u);
  for (const StudyRow& row : r.rows) {
    EXPECT_FALSE(row.success);
    EXPECT_NE(row.error.find("999"), std::string::npos);
  }
  EXPECT_EQ(r.frames.at("frames/low").frames.size(), 2u);
}

TEST(FeaturesExperimentTest, OneRowPerOptimizerAndTruthStart) {
  ScratchDir dir("features");
  std::mt19937_64 rng(4);
  FeatureMatrix m{{1, 10, 256}, std::vector<double>(2560)};
  for (double& v : m.values) v = std::abs(std::normal_distribution<double>()(rng));
  WriteFeatureMatrix(m, (dir / "f.fmat").string());
  ExperimentConfig c = DefaultConfig(ExperimentMode::kFeatures);
  c.input_path = (dir / "f.fmat").string();
  c.output_dir = (dir / "out").string();
  c.init_at_truth = true;
  const StudyReport r = RunFeaturesExperiment(c);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[0].optimizer, "adam");
  EXPECT_EQ(r.rows[1].optimizer, "lbfgs");
  for (const StudyRow& row : r.rows) {
    EXPECT_TRUE(row.success);
    EXPECT_EQ(row.iterations, 0);
    EXPECT_EQ(row.diagnostics["pooled_shape"], nlohmann::json({1, 10, 8}));
  }
  EmitReport(r, c.output_dir);
  for (const StudyRow& row : r.rows) {
    const auto trace = nlohmann::json::parse(ReadText(dir / "out" / row.trace_file));
    EXPECT_FALSE(trace["loss_trace"].empty());
  }

  c.pool_window = 7;
  EXPECT_THROW(RunFeaturesExperiment(c), DimensionError);
}

TEST(ExtractorStudyTest, GridLayoutAndDeviationBookkeeping) {
  ScratchDir dir("study");
  WriteFrames(dir / "in", 2, 32, 32, 5);
  ExperimentConfig c = DefaultConfig(ExperimentMode::kExtractorStudy);
  c.input_path = (dir / "in").string();
  c.output_dir = (dir / "out").string();
  c.attacks = {"idlg"};
  c.attack.max_iterations = 2;
  const StudyReport r = RunExtractorStudy(c);
  ASSERT_EQ(r.rows.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(r.rows[i].input, StudyColumns()[i]);
    EXPECT_EQ(r.rows[i].true_label, r.rows[i].recovered_label);
    EXPECT_EQ(r.rows[i].diagnostics["max_iterations"], 2);
  }
  EXPECT_EQ(r.rows[0].architecture, "moderate");
  EXPECT_EQ(r.rows[3].architecture, "simple");
  const nlohmann::json& table = r.summary["table2"];
  for (const std::string& col : StudyColumns()) {
    const std::string cell = table["idlg"][col];
    EXPECT_TRUE(cell == "Y" || cell == "N");
  }
  for (const auto& d : r.summary["deviations"]) {
    EXPECT_NE(d["observed"], d["reference"]);
    EXPECT_FALSE(d["trace_files"].empty());
  }

  c.column_overrides["simple+raw"] = {{"max_iterations", 0}};
  c.attacks = {"dlg"};
  const StudyReport capped = RunExtractorStudy(c);
  EXPECT_EQ(capped.rows[3].iterations, 0);
  EXPECT_EQ(capped.rows[3].diagnostics["max_iterations"], 0);
}

#ifdef GRADLEAK_CLI
int RunCli(const std::string& args) {
  const int status = std::system((std::string(GRADLEAK_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(CliTest, ExitCodes) {
  ScratchDir dir("cli");
  fs::create_directories(dir / "empty");
  const std::string out = (dir / "out").string();
  EXPECT_EQ(RunCli("attack-frames --input " + (dir / "empty").string() + " --out " + out), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "report.json"));
  EXPECT_EQ(RunCli("report --in " + out), 0);
  EXPECT_EQ(RunCli("attack-frames --input " + (dir / "missing").string() + " --out " + out), 2);
  EXPECT_EQ(RunCli("attack-frames --out " + out), 1);
  EXPECT_EQ(RunCli("attack-features --input x --out " + out + " --optimizer sgd"), 1);
  EXPECT_EQ(RunCli("no-such-command"), 1);
  WriteFileBytes((dir / "bad.json").string(), Bytes{'{', 'x'});
  EXPECT_EQ(RunCli("attack-frames --config " + (dir / "bad.json").string()), 1);
  EXPECT_EQ(RunCli("report --in " + (dir / "nothing").string()), 2);
}
#endif

}  // namespace
}  // namespace gradleak
