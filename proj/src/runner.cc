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
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <set>
#include <sstream>
#include <thread>

#include "gradleak/ops.h"
#include "gradleak/quality.h"
#include "gradleak/seeding.h"
#include "gradleak/tensor_io.h"

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace gradleak {
namespace {

namespace fs = std::filesystem;

const std::set<std::string> kConfigKeys = {
    "mode",  "input_path", "output_dir", "model",         "attack",      "attacks",
    "optimizers", "upscale_factor", "fps", "seed",       "jobs",        "pool_window",
    "extractor_features", "num_images", "init_at_truth", "column_overrides"};
const std::set<std::string> kModelKeys = {"architecture", "seed", "num_classes"};

// Dummy label logits whose softmax equals a one-hot vector to double precision.
constexpr double kTruthLogit = 60.0;

template <typename T>
T Field(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

AttackConfig OverlayAttack(const AttackConfig& base, const nlohmann::json& patch,
                           const std::string& where) {
  if (!patch.is_object()) throw ConfigError(where + " must be an object");
  nlohmann::json merged = AttackConfigToJson(base);
  for (const auto& [key, value] : patch.items()) {
    if (!merged.contains(key) && key != "lr" && key != "label") {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
    merged[key] = value;
  }
  try {
    return AttackConfigFromJson(merged);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

double ElapsedSince(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

double Mse(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

double RelativeError(const Tensor& estimate, const Tensor& truth) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    num += (estimate[i] - truth[i]) * (estimate[i] - truth[i]);
    den += truth[i] * truth[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

std::size_t Argmax(const Tensor& t) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.size(); ++i) {
    if (t[i] > t[best]) best = i;
  }
  return best;
}

std::size_t DrawLabel(const ExperimentConfig& config, std::size_t index) {
  return DeriveSeed(config.seed, {ModeName(config.mode), "label", std::to_string(index)}) %
         config.model.num_classes;
}

std::uint64_t CellSeed(const ExperimentConfig& config, const std::string& attack,
                       const std::string& arch, std::size_t index) {
  return DeriveSeed(config.seed, {ModeName(config.mode), attack, arch, std::to_string(index)});
}

std::string TraceName(const ExperimentConfig& config, const std::string& input,
                      const std::string& attack, const std::string& optimizer,
                      std::size_t index) {
  std::string stem = ModeName(config.mode) + "_" + input + "_" + attack + "_" + optimizer +
                     "_" + std::to_string(index);
  std::replace(stem.begin(), stem.end(), '+', '_');
  return "traces/" + stem + ".json";
}

struct CellOutcome {
  StudyRow row;
  nlohmann::json trace;
  Tensor reconstruction;
};

// One DLG or iDLG run. `success` is the threshold test alone; callers add
// their own acceptance rule on top.
CellOutcome RunIterativeCell(const std::string& attack, const GradientCapsule& capsule,
                             const Model& model, const Tensor& truth, std::size_t label,
                             AttackConfig attack_config, bool init_at_truth) {
  if (init_at_truth) {
    attack_config.initial_input = truth;
    std::vector<double> logits(model.num_classes(), 0.0);
    logits[label] = kTruthLogit;
    attack_config.initial_label_logits = Tensor({1, model.num_classes()}, logits);
  }
  const AttackResult result = attack == "idlg" ? IdlgAttack(capsule, model, attack_config)
                                               : DlgAttack(capsule, model, attack_config);
  CellOutcome out;
  StudyRow& row = out.row;
  row.attack = attack;
  row.optimizer = OptimizerName(attack_config.optimizer);
  row.success = result.success;
  row.final_loss = result.best_loss;
  row.mse = Mse(result.reconstructed_input, truth);
  row.relative_error = RelativeError(result.reconstructed_input, truth);
  row.iterations = result.iterations;
  row.restarts = result.restarts_used;
  row.perturbations = result.perturbations;
  row.true_label = label;
  if (const auto* index = std::get_if<std::size_t>(&result.recovered_label)) {
    row.recovered_label = *index;
  } else {
    row.recovered_label = Argmax(std::get<Tensor>(result.recovered_label));
  }
  row.diagnostics["loss_threshold"] = attack_config.loss_threshold;
  row.diagnostics["threshold_reached"] = result.success;
  if (result.iterations_to_threshold) {
    row.diagnostics["iterations_to_threshold"] = *result.iterations_to_threshold;
  }
  out.trace = AttackResultToJson(result, {.downsample_trace = true, .include_wall_time = false});
  out.reconstruction = result.reconstructed_input;
  return out;
}

Tensor AsBatch(const Tensor& sample) {
  Shape shape = sample.shape();
  shape.insert(shape.begin(), 1);
  return Reshape(sample, shape);
}

// The error message of the first exception of a failing cell.
template <typename Fn>
std::string Guarded(Fn&& fn) {
  try {
    fn();
    return "";
  } catch (const std::exception& e) {
    return e.what();
  }
}

nlohmann::json OptionalJson(const std::optional<double>& v) {
  return v ? JsonDouble(*v) : nlohmann::json();
}

std::optional<double> OptionalDouble(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return DoubleFromJson(j);
}

std::string CsvField(const std::string& text) {
  if (text.find_first_of(",\"\n") == std::string::npos) return text;
  std::string quoted = "\"";
  for (char c : text) {
    if (c == '"') quoted += '"';
    quoted += c == '\n' ? ' ' : c;
  }
  return quoted + "\"";
}

std::string CsvNumber(const std::optional<double>& v) {
  if (!v) return "";
  if (std::isinf(*v)) return *v > 0 ? "inf" : "-inf";
  if (std::isnan(*v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", *v);
  return buf;
}

void WriteText(const fs::path& path, const std::string& text) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(text.data());
  WriteFileBytes(path.string(), std::span<const std::uint8_t>(p, text.size()));
}

void CreateDirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

// Reference outcome per (attack, column): iterative attacks leak everywhere
// except moderate+extractor; R-GAP recovers nothing.
std::string ReferenceCell(const std::string& attack, const std::string& column) {
  if (attack == "rgap") return "N";
  return column == "moderate+extractor" ? "N" : "Y";
}

}  // namespace

std::string ModeName(ExperimentMode mode) {
  switch (mode) {
    case ExperimentMode::kFrames: return "frames";
    case ExperimentMode::kFeatures: return "features";
    case ExperimentMode::kExtractorStudy: return "extractor-study";
  }
  return "";
}

ExperimentMode ModeFromName(const std::string& name) {
  if (name == "frames") return ExperimentMode::kFrames;
  if (name == "features") return ExperimentMode::kFeatures;
  if (name == "extractor-study") return ExperimentMode::kExtractorStudy;
  throw ConfigError("unknown mode '" + name + "' (frames, features, extractor-study)");
}

const std::vector<std::string>& StudyColumns() {
  static const std::vector<std::string> columns = {"moderate+extractor", "moderate+raw",
                                                   "simple+extractor", "simple+raw"};
  return columns;
}

ExperimentConfig DefaultConfig(ExperimentMode mode) {
  ExperimentConfig c;
  c.mode = mode;
  switch (mode) {
    case ExperimentMode::kFrames:
      c.model.architecture = "dlg_lenet";
      c.model.num_classes = 100;
      c.attacks = {"dlg"};
      c.optimizers = {OptimizerKind::kLbfgs};
      break;
    case ExperimentMode::kFeatures:
    case ExperimentMode::kExtractorStudy:
      c.attack.max_iterations = 20000;
      c.attack.max_restarts = 1;
      c.attack.schedule = Schedule::kStagnation;
      c.attack.stagnation_window = 1000;
      c.attack.stagnation_noise_sigma = 1e-3;
      if (mode == ExperimentMode::kFeatures) {
        c.model.architecture = "feature_classifier";
        // Thirteen anomaly classes plus normal.
        c.model.num_classes = 14;
        c.attacks = {"dlg"};
        c.optimizers = {OptimizerKind::kAdam, OptimizerKind::kLbfgs};
      } else {
        c.model.architecture = "study";
        c.model.num_classes = 100;
        c.attacks = {"dlg", "idlg", "rgap"};
        c.optimizers = {OptimizerKind::kLbfgs};
      }
      break;
  }
  return c;
}

void ExperimentConfig::Validate() const {
  auto fail = [](const std::string& what) { throw ConfigError(what); };
  if (input_path.empty()) fail("input_path is required");
  if (output_dir.empty()) fail("output_dir is required");
  if (upscale_factor < 1) fail("upscale_factor must be >= 1");
  if (fps < 1) fail("fps must be >= 1");
  if (jobs < 1) fail("jobs must be >= 1");
  if (model.num_classes < 2) fail("model.num_classes must be >= 2");
  if (attacks.empty()) fail("attacks must not be empty");
  if (optimizers.empty()) fail("optimizers must not be empty");
  std::set<std::string> seen;
  for (const std::string& a : attacks) {
    const bool known = a == "dlg" || a == "idlg" || (a == "rgap" && mode == ExperimentMode::kExtractorStudy);
    if (!known) fail("attack '" + a + "' is not available in " + ModeName(mode) + " mode");
    if (!seen.insert(a).second) fail("attack '" + a + "' listed twice");
  }
  if (std::set<OptimizerKind>(optimizers.begin(), optimizers.end()).size() != optimizers.size()) {
    fail("optimizers contain duplicates");
  }
  try {
    attack.Validate();
  } catch (const std::invalid_argument& e) {
    fail(std::string("attack: ") + e.what());
  }
  switch (mode) {
    case ExperimentMode::kFrames:
      if (model.architecture != "dlg_lenet") fail("frames mode needs architecture dlg_lenet");
      if (attacks.size() != 1) fail("frames mode runs exactly one attack");
      break;
    case ExperimentMode::kFeatures:
      if (model.architecture != "feature_classifier") {
        fail("features mode needs architecture feature_classifier");
      }
      if (pool_window < 1) fail("pool_window must be >= 1");
      break;
    case ExperimentMode::kExtractorStudy: {
      const auto side = static_cast<std::size_t>(std::lround(std::sqrt(double(extractor_features))));
      if (extractor_features == 0 || side * side != extractor_features) {
        fail("extractor_features must be a positive perfect square");
      }
      break;
    }
  }
  if (!column_overrides.empty() && mode != ExperimentMode::kExtractorStudy) {
    fail("column_overrides only apply to extractor-study");
  }
  for (const auto& [column, patch] : column_overrides) {
    const auto& cols = StudyColumns();
    if (std::find(cols.begin(), cols.end(), column) == cols.end()) {
      fail("column_overrides: unknown column '" + column + "'");
    }
    OverlayAttack(attack, patch, "column_overrides." + column);
  }
}

ExperimentConfig ConfigFromJson(const nlohmann::json& j,
                                std::optional<ExperimentMode> fallback) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!kConfigKeys.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  std::optional<ExperimentMode> mode = fallback;
  if (j.contains("mode")) {
    const ExperimentMode named = ModeFromName(Field<std::string>(j, "mode", ""));
    if (fallback && *fallback != named) {
      throw ConfigError("config mode '" + ModeName(named) + "' does not match subcommand '" +
                        ModeName(*fallback) + "'");
    }
    mode = named;
  }
  if (!mode) throw ConfigError("mode is required");
  ExperimentConfig c = DefaultConfig(*mode);
  c.input_path = Field(j, "input_path", c.input_path);
  c.output_dir = Field(j, "output_dir", c.output_dir);
  if (j.contains("model")) {
    const nlohmann::json& m = j.at("model");
    if (!m.is_object()) throw ConfigError("model must be an object");
    for (const auto& [key, value] : m.items()) {
      if (!kModelKeys.count(key)) throw ConfigError("unknown model key '" + key + "'");
    }
    c.model.architecture = Field(m, "architecture", c.model.architecture);
    c.model.seed = Field(m, "seed", c.model.seed);
    c.model.num_classes = Field(m, "num_classes", c.model.num_classes);
  }
  if (j.contains("attack")) c.attack = OverlayAttack(c.attack, j.at("attack"), "attack");
  c.attacks = Field(j, "attacks", c.attacks);
  if (j.contains("optimizers")) {
    c.optimizers.clear();
    for (const std::string& name : Field<std::vector<std::string>>(j, "optimizers", {})) {
      try {
        c.optimizers.push_back(OptimizerFromName(name));
      } catch (const std::exception& e) {
        throw ConfigError(std::string("optimizers: ") + e.what());
      }
    }
  }
  c.upscale_factor = Field(j, "upscale_factor", c.upscale_factor);
  c.fps = Field(j, "fps", c.fps);
  c.seed = Field(j, "seed", c.seed);
  c.jobs = Field(j, "jobs", c.jobs);
  c.pool_window = Field(j, "pool_window", c.pool_window);
  c.extractor_features = Field(j, "extractor_features", c.extractor_features);
  c.num_images = Field(j, "num_images", c.num_images);
  c.init_at_truth = Field(j, "init_at_truth", c.init_at_truth);
  if (j.contains("column_overrides")) {
    const nlohmann::json& o = j.at("column_overrides");
    if (!o.is_object()) throw ConfigError("column_overrides must be an object");
    for (const auto& [key, value] : o.items()) c.column_overrides[key] = value;
  }
  return c;
}

nlohmann::json ConfigToJson(const ExperimentConfig& c) {
  nlohmann::json optimizers = nlohmann::json::array();
  for (OptimizerKind k : c.optimizers) optimizers.push_back(OptimizerName(k));
  nlohmann::json overrides = nlohmann::json::object();
  for (const auto& [column, patch] : c.column_overrides) overrides[column] = patch;
  return {{"mode", ModeName(c.mode)},
          {"input_path", c.input_path},
          {"output_dir", c.output_dir},
          {"model",
           {{"architecture", c.model.architecture},
            {"seed", c.model.seed},
            {"num_classes", c.model.num_classes}}},
          {"attack", AttackConfigToJson(c.attack)},
          {"attacks", c.attacks},
          {"optimizers", optimizers},
          {"upscale_factor", c.upscale_factor},
          {"fps", c.fps},
          {"seed", c.seed},
          {"jobs", c.jobs},
          {"pool_window", c.pool_window},
          {"extractor_features", c.extractor_features},
          {"num_images", c.num_images},
          {"init_at_truth", c.init_at_truth},
          {"column_overrides", overrides}};
}

bool StudyRow::operator==(const StudyRow& o) const {
  auto same = [](const std::optional<double>& a, const std::optional<double>& b) {
    if (a.has_value() != b.has_value()) return false;
    return !a || *a == *b || (std::isnan(*a) && std::isnan(*b));
  };
  return attack == o.attack && architecture == o.architecture && input == o.input &&
         optimizer == o.optimizer && index == o.index && success == o.success &&
         same(final_loss, o.final_loss) && same(mse, o.mse) &&
         same(relative_error, o.relative_error) && same(psnr_db, o.psnr_db) &&
         same(ssim, o.ssim) && iterations == o.iterations && restarts == o.restarts &&
         perturbations == o.perturbations && true_label == o.true_label &&
         recovered_label == o.recovered_label && error == o.error &&
         diagnostics == o.diagnostics && trace_file == o.trace_file;
}

nlohmann::json StudyReportToJson(const StudyReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const StudyRow& r : report.rows) {
    rows.push_back({{"attack", r.attack},
                    {"architecture", r.architecture},
                    {"input", r.input},
                    {"optimizer", r.optimizer},
                    {"index", r.index},
                    {"success", r.success},
                    {"final_loss", OptionalJson(r.final_loss)},
                    {"mse", OptionalJson(r.mse)},
                    {"relative_error", OptionalJson(r.relative_error)},
                    {"psnr_db", OptionalJson(r.psnr_db)},
                    {"ssim", OptionalJson(r.ssim)},
                    {"iterations", r.iterations},
                    {"restarts", r.restarts},
                    {"perturbations", r.perturbations},
                    {"true_label", r.true_label ? nlohmann::json(*r.true_label) : nlohmann::json()},
                    {"recovered_label",
                     r.recovered_label ? nlohmann::json(*r.recovered_label) : nlohmann::json()},
                    {"error", r.error},
                    {"diagnostics", r.diagnostics},
                    {"trace_file", r.trace_file}});
  }
  return {{"mode", ModeName(report.mode)},
          {"config", report.config},
          {"rows", rows},
          {"summary", report.summary}};
}

StudyReport StudyReportFromJson(const nlohmann::json& j) {
  StudyReport report;
  try {
    report.mode = ModeFromName(j.at("mode").get<std::string>());
    report.config = j.at("config");
    report.summary = j.at("summary");
    for (const auto& r : j.at("rows")) {
      StudyRow row;
      row.attack = r.at("attack").get<std::string>();
      row.architecture = r.at("architecture").get<std::string>();
      row.input = r.at("input").get<std::string>();
      row.optimizer = r.at("optimizer").get<std::string>();
      row.index = r.at("index").get<std::size_t>();
      row.success = r.at("success").get<bool>();
      row.final_loss = OptionalDouble(r.at("final_loss"));
      row.mse = OptionalDouble(r.at("mse"));
      row.relative_error = OptionalDouble(r.at("relative_error"));
      row.psnr_db = OptionalDouble(r.at("psnr_db"));
      row.ssim = OptionalDouble(r.at("ssim"));
      row.iterations = r.at("iterations").get<int>();
      row.restarts = r.at("restarts").get<int>();
      row.perturbations = r.at("perturbations").get<int>();
      if (!r.at("true_label").is_null()) row.true_label = r.at("true_label").get<std::size_t>();
      if (!r.at("recovered_label").is_null()) {
        row.recovered_label = r.at("recovered_label").get<std::size_t>();
      }
      row.error = r.at("error").get<std::string>();
      row.diagnostics = r.at("diagnostics");
      row.trace_file = r.at("trace_file").get<std::string>();
      report.rows.push_back(std::move(row));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
  return report;
}

std::string StudyReportCsv(const StudyReport& report) {
  std::ostringstream out;
  out << "index,input,architecture,attack,optimizer,success,final_loss,mse,relative_error,"
         "psnr_db,ssim,iterations,restarts,perturbations,true_label,recovered_label,error,"
         "trace_file\n";
  auto label = [](const std::optional<std::size_t>& v) {
    return v ? std::to_string(*v) : std::string();
  };
  for (const StudyRow& r : report.rows) {
    out << r.index << ',' << CsvField(r.input) << ',' << CsvField(r.architecture) << ','
        << r.attack << ',' << r.optimizer << ',' << (r.success ? "true" : "false") << ','
        << CsvNumber(r.final_loss) << ',' << CsvNumber(r.mse) << ','
        << CsvNumber(r.relative_error) << ',' << CsvNumber(r.psnr_db) << ','
        << CsvNumber(r.ssim) << ',' << r.iterations << ',' << r.restarts << ','
        << r.perturbations << ',' << label(r.true_label) << ',' << label(r.recovered_label)
        << ',' << CsvField(r.error) << ',' << CsvField(r.trace_file) << '\n';
  }
  return out.str();
}

std::string CanonicalReportText(const StudyReport& report) {
  // nlohmann::json objects are std::map backed, so keys come out sorted.
  return StudyReportToJson(report).dump(2) + "\n";
}

void ParallelFor(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min<std::size_t>(std::max(jobs, 1), n);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

GradientCapsule ClassifierCapsule(const GradientCapsule& chained, const Model& classifier,
                                  const std::string& prefix) {
  GradientCapsule out = chained;
  out.gradients.clear();
  for (const auto& [name, grad] : chained.gradients) {
    if (name.rfind(prefix, 0) != 0) {
      throw StructureError("capsule entry '" + name + "' lies outside '" + prefix + "'");
    }
    out.gradients.emplace(name.substr(prefix.size()), grad);
  }
  const std::vector<std::string> expected = classifier.TrainableNames();
  if (out.gradients.size() != expected.size()) {
    throw StructureError("capsule has " + std::to_string(out.gradients.size()) +
                         " classifier entries, model has " + std::to_string(expected.size()));
  }
  for (const std::string& name : expected) {
    if (!out.gradients.count(name)) throw StructureError("capsule lacks '" + name + "'");
  }
  out.model_id = classifier.id();
  out.input_shape = classifier.input_shape();
  return out;
}

StudyReport RunFramesExperiment(const ExperimentConfig& config) {
  config.Validate();
  const FrameSequence input = LoadFrameDir(config.input_path);
  StudyReport report;
  report.mode = config.mode;
  nlohmann::json echo = ConfigToJson(config);
  echo.erase("output_dir");
  echo.erase("jobs");
  report.config = echo;
  if (input.frames.empty()) return report;

  const Model model = BuildDlgLenet(config.model.num_classes, config.model.seed);
  const std::string attack = config.attacks.front();
  const std::size_t n = input.frames.size();
  std::vector<CellOutcome> cells(n);
  std::vector<Frame> low(n), high(n);
  ParallelFor(n, config.jobs, [&](std::size_t i) {
    const auto started = std::chrono::steady_clock::now();
    high[i] = TensorToFrame(Preprocess(input.frames[i], kScoreResolution));
    const Tensor truth = Preprocess(input.frames[i], 32);
    const std::size_t label = DrawLabel(config, i);
    AttackConfig ac = config.attack;
    ac.optimizer = config.optimizers.front();
    ac.seed = CellSeed(config, attack, model.id(), i);
    CellOutcome& cell = cells[i];
    const std::string error = Guarded([&] {
      const GradientCapsule capsule =
          ComputeSharedGradient(model, AsBatch(truth), label, i, "frames");
      cell = RunIterativeCell(attack, capsule, model, truth, label, ac, config.init_at_truth);
    });
    if (!error.empty()) {
      cell = CellOutcome{};
      cell.row.attack = attack;
      cell.row.optimizer = OptimizerName(ac.optimizer);
      cell.row.true_label = label;
      cell.row.error = error;
    }
    // A failed cell contributes a black frame so the sequences stay aligned.
    low[i] = error.empty() ? TensorToFrame(cell.reconstruction) : Frame(32, 32);
    cell.row.architecture = model.id();
    cell.row.input = "raw";
    cell.row.index = i;
    cell.row.wall_time = ElapsedSince(started);
  });

  FrameSequence high_seq, low_seq, enhanced_seq;
  high_seq.fps = low_seq.fps = enhanced_seq.fps = config.fps;
  high_seq.frames = high;
  low_seq.frames = low;
  for (const Frame& f : low) enhanced_seq.frames.push_back(UpscaleBicubic(f, config.upscale_factor));

  const QualityReport baseline = ScoreSequences(high_seq, low_seq, "High vs Low");
  const QualityReport vs_high = ScoreSequences(enhanced_seq, high_seq, "Enhanced vs High");
  const QualityReport vs_low = ScoreSequences(enhanced_seq, low_seq, "Enhanced vs Low");
  for (std::size_t i = 0; i < n; ++i) {
    StudyRow& row = cells[i].row;
    row.psnr_db = vs_high.per_frame[i].psnr_db;
    row.ssim = vs_high.per_frame[i].ssim;
    if (!cells[i].trace.is_null()) {
      row.trace_file = TraceName(config, row.input, row.attack, row.optimizer, i);
      report.traces[row.trace_file] = cells[i].trace;
    }
    report.rows.push_back(row);
  }
  std::size_t successes = 0;
  for (const StudyRow& r : report.rows) successes += r.success;
  report.summary = {
      {"frames", n},
      {"successes", successes},
      {"table1_row", Table1Row(baseline, vs_high, vs_low)},
      {"unsupported", {"one_ref", "multi_ref"}},
      {"quality",
       {{"baseline", QualityReportToJson(baseline)},
        {"enhanced_vs_high", QualityReportToJson(vs_high)},
        {"enhanced_vs_low", QualityReportToJson(vs_low)}}}};
  report.frames["frames/high"] = high_seq;
  report.frames["frames/low"] = low_seq;
  report.frames["frames/enhanced"] = enhanced_seq;
  report.extra_files["quality_baseline.csv"] = QualityReportCsv(baseline);
  report.extra_files["quality_enhanced_vs_high.csv"] = QualityReportCsv(vs_high);
  report.extra_files["quality_enhanced_vs_low.csv"] = QualityReportCsv(vs_low);
  return report;
}

StudyReport RunFeaturesExperiment(const ExperimentConfig& config) {
  config.Validate();
  const FeatureMatrix raw = LoadFeatureMatrix(config.input_path);
  const FeatureMatrix pooled = MaxPoolFeatures(raw, config.pool_window);
  Shape sample = pooled.shape;
  if (sample.size() == 3 && sample.front() == 1) sample.erase(sample.begin());
  if (sample.size() != 2) {
    throw FormatError("feature matrix " + ShapeToString(pooled.shape) +
                      " is not [channels, length] or [1, channels, length]");
  }
  const Tensor truth = Reshape(FeatureMatrixToTensor(pooled), sample);
  const Model model = BuildFeatureClassifier(sample, config.model.num_classes, config.model.seed);
  const std::size_t label = DrawLabel(config, 0);
  const GradientCapsule capsule =
      ComputeSharedGradient(model, AsBatch(truth), label, 0, "features");

  struct Task {
    std::string attack;
    OptimizerKind optimizer;
  };
  std::vector<Task> tasks;
  for (const std::string& a : config.attacks) {
    for (OptimizerKind k : config.optimizers) tasks.push_back({a, k});
  }
  std::vector<CellOutcome> cells(tasks.size());
  ParallelFor(tasks.size(), config.jobs, [&](std::size_t t) {
    const auto started = std::chrono::steady_clock::now();
    AttackConfig ac = config.attack;
    ac.optimizer = tasks[t].optimizer;
    ac.seed = CellSeed(config, tasks[t].attack, OptimizerName(ac.optimizer), 0);
    CellOutcome& cell = cells[t];
    const std::string error = Guarded([&] {
      cell = RunIterativeCell(tasks[t].attack, capsule, model, truth, label, ac,
                              config.init_at_truth);
    });
    if (!error.empty()) {
      cell = CellOutcome{};
      cell.row.attack = tasks[t].attack;
      cell.row.optimizer = OptimizerName(ac.optimizer);
      cell.row.true_label = label;
      cell.row.error = error;
    }
    cell.row.architecture = model.id();
    cell.row.input = "features";
    cell.row.diagnostics["pooled_shape"] = pooled.shape;
    cell.row.wall_time = ElapsedSince(started);
  });

  StudyReport report;
  report.mode = config.mode;
  nlohmann::json echo = ConfigToJson(config);
  echo.erase("output_dir");
  echo.erase("jobs");
  report.config = echo;
  for (CellOutcome& cell : cells) {
    if (!cell.trace.is_null()) {
      cell.row.trace_file = TraceName(config, cell.row.input, cell.row.attack,
                                      cell.row.optimizer, 0);
      report.traces[cell.row.trace_file] = cell.trace;
    }
    report.rows.push_back(cell.row);
  }
  report.summary = {{"raw_shape", raw.shape},
                    {"pooled_shape", pooled.shape},
                    {"true_label", label},
                    {"parameters", model.ParameterCount()}};
  return report;
}

StudyReport RunExtractorStudy(const ExperimentConfig& config) {
  config.Validate();
  const FrameSequence images = LoadFrameDir(config.input_path);
  StudyReport report;
  report.mode = config.mode;
  nlohmann::json echo = ConfigToJson(config);
  echo.erase("output_dir");
  echo.erase("jobs");
  report.config = echo;

  const std::size_t count = config.num_images == 0
                                ? images.frames.size()
                                : std::min(config.num_images, images.frames.size());
  const std::size_t classes = config.model.num_classes;
  const std::size_t side =
      static_cast<std::size_t>(std::lround(std::sqrt(double(config.extractor_features))));
  const Shape raw_shape = {3, 32, 32};
  const Model extractor = BuildFrozenExtractor(
      raw_shape, config.extractor_features, DeriveSeed(config.model.seed, {"extractor"}));

  struct Column {
    std::string id;
    Model classifier;
    std::optional<Model> chained;
  };
  std::vector<Column> columns;
  for (const std::string& id : StudyColumns()) {
    const bool moderate = id.rfind("moderate", 0) == 0;
    const bool with_extractor = id.find("extractor") != std::string::npos;
    const Shape shape = with_extractor
                            ? (moderate ? Shape{1, side, side} : Shape{config.extractor_features})
                            : raw_shape;
    Model classifier = moderate ? BuildModerateClassifier(shape, classes, config.model.seed)
                                : BuildSimpleClassifier(shape, classes, config.model.seed);
    std::optional<Model> chained;
    if (with_extractor) chained = ChainModels(extractor, classifier, id);
    columns.push_back({id, std::move(classifier), std::move(chained)});
  }

  struct Task {
    std::size_t image;
    std::size_t column;
    std::string attack;
  };
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t c = 0; c < columns.size(); ++c) {
      for (const std::string& a : config.attacks) tasks.push_back({i, c, a});
    }
  }
  std::vector<CellOutcome> cells(tasks.size());
  ParallelFor(tasks.size(), config.jobs, [&](std::size_t t) {
    const auto started = std::chrono::steady_clock::now();
    const Task& task = tasks[t];
    const Column& column = columns[task.column];
    const std::size_t label = DrawLabel(config, task.image);
    AttackConfig ac = config.attack;
    if (auto it = config.column_overrides.find(column.id); it != config.column_overrides.end()) {
      ac = OverlayAttack(ac, it->second, "column_overrides." + column.id);
    }
    ac.optimizer = config.optimizers.front();
    ac.seed = CellSeed(config, task.attack, column.id, task.image);
    CellOutcome& cell = cells[t];
    Tensor truth;
    const std::string error = Guarded([&] {
      const Tensor image = Preprocess(images.frames[task.image], 32);
      GradientCapsule capsule;
      if (column.chained) {
        truth = Reshape(ForwardLogits(extractor, AsBatch(image)), column.classifier.input_shape());
        capsule = ClassifierCapsule(
            ComputeSharedGradient(*column.chained, AsBatch(image), label, task.image, "study"),
            column.classifier);
      } else {
        truth = image;
        capsule = ComputeSharedGradient(column.classifier, AsBatch(image), label, task.image,
                                        "study");
      }
      if (task.attack == "rgap") {
        const RgapResult r = RgapReconstruct(capsule, column.classifier);
        cell.row.attack = "rgap";
        cell.row.optimizer = "none";
        cell.row.mse = Mse(r.reconstructed_input, truth);
        cell.row.relative_error = RelativeError(r.reconstructed_input, truth);
        cell.row.success = *cell.row.relative_error < kStudyRelativeErrorLimit;
        cell.row.true_label = label;
        cell.row.recovered_label = r.label;
        cell.row.diagnostics["rank_report"] = RankReportToJson(r.ranks);
        cell.row.diagnostics["exact"] = r.exact;
        cell.trace = {{"attack", "rgap"},
                      {"rank_report", RankReportToJson(r.ranks)},
                      {"exact", r.exact},
                      {"relative_error", JsonDouble(*cell.row.relative_error)},
                      {"reconstructed_input", r.reconstructed_input.ToVector()}};
      } else {
        cell = RunIterativeCell(task.attack, capsule, column.classifier, truth, label, ac,
                                config.init_at_truth);
        cell.row.success = cell.row.success && *cell.row.mse < kStudyMseLimit;
        cell.row.diagnostics["mse_limit"] = kStudyMseLimit;
        cell.row.diagnostics["max_iterations"] = ac.max_iterations;
      }
    });
    if (!error.empty()) {
      cell.trace = {{"attack", task.attack}, {"error", error}};
      cell.row.success = false;
      cell.row.attack = task.attack;
      cell.row.optimizer = task.attack == "rgap" ? "none" : OptimizerName(ac.optimizer);
      cell.row.true_label = label;
      cell.row.error = error;
    }
    cell.row.architecture = column.classifier.id();
    cell.row.input = column.id;
    cell.row.index = task.image;
    cell.row.wall_time = ElapsedSince(started);
  });

  // cell[attack][column] is Y only if every attacked image leaked.
  std::map<std::string, std::map<std::string, bool>> grid;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    CellOutcome& cell = cells[t];
    if (!cell.trace.is_null()) {
      cell.row.trace_file = TraceName(config, cell.row.input, cell.row.attack,
                                      cell.row.optimizer, cell.row.index);
      report.traces[cell.row.trace_file] = cell.trace;
    }
    auto [it, fresh] = grid[cell.row.attack].emplace(cell.row.input, cell.row.success);
    if (!fresh) it->second = it->second && cell.row.success;
    report.rows.push_back(cell.row);
  }
  nlohmann::json table = nlohmann::json::object();
  nlohmann::json reference = nlohmann::json::object();
  nlohmann::json deviations = nlohmann::json::array();
  for (const std::string& attack : config.attacks) {
    for (const std::string& column : StudyColumns()) {
      reference[attack][column] = ReferenceCell(attack, column);
      if (count == 0) continue;
      const std::string observed = grid[attack][column] ? "Y" : "N";
      table[attack][column] = observed;
      if (observed != ReferenceCell(attack, column)) {
        nlohmann::json traces = nlohmann::json::array();
        for (const StudyRow& r : report.rows) {
          if (r.attack == attack && r.input == column && !r.trace_file.empty()) {
            traces.push_back(r.trace_file);
          }
        }
        deviations.push_back({{"attack", attack},
                              {"column", column},
                              {"reference", ReferenceCell(attack, column)},
                              {"observed", observed},
                              {"trace_files", traces}});
      }
    }
  }
  report.summary = {{"columns", StudyColumns()},
                    {"images", count},
                    {"table2", table},
                    {"reference_pattern", reference},
                    {"deviations", deviations}};
  return report;
}

StudyReport RunExperiment(const ExperimentConfig& config) {
  switch (config.mode) {
    case ExperimentMode::kFrames: return RunFramesExperiment(config);
    case ExperimentMode::kFeatures: return RunFeaturesExperiment(config);
    case ExperimentMode::kExtractorStudy: return RunExtractorStudy(config);
  }
  throw ConfigError("unknown mode");
}

void EmitReport(const StudyReport& report, const std::string& output_dir) {
  const fs::path root(output_dir);
  CreateDirs(root);
  WriteText(root / "report.json", CanonicalReportText(report));
  WriteText(root / "report.csv", StudyReportCsv(report));
  std::ostringstream timings;
  timings << "index,input,attack,optimizer,wall_time_s\n";
  for (const StudyRow& r : report.rows) {
    timings << r.index << ',' << CsvField(r.input) << ',' << r.attack << ',' << r.optimizer
            << ',' << CsvNumber(r.wall_time) << '\n';
  }
  WriteText(root / "timings.csv", timings.str());
  for (const auto& [name, trace] : report.traces) {
    const fs::path path = root / name;
    CreateDirs(path.parent_path());
    WriteText(path, trace.dump() + "\n");
  }
  for (const auto& [name, content] : report.extra_files) WriteText(root / name, content);
  for (const auto& [dir, seq] : report.frames) {
    try {
      WriteFrameDir(seq, (root / dir).string());
    } catch (const IoError&) {
      throw;
    } catch (const std::exception& e) {
      throw IoError("cannot write frames to " + (root / dir).string() + ": " + e.what());
    }
  }
}

void TuneAllocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
}

}  // namespace gradleak
