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

#include "gradleak/attacks.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "attack_internal.h"
#include "gradleak/ops.h"
#include "gradleak/tensor_io.h"

namespace gradleak {

namespace internal {

void CheckCapsuleMatchesModel(const GradientCapsule& capsule, const Model& model) {
  if (capsule.model_id != model.id()) {
    throw ProtocolError("capsule was produced by model '" + capsule.model_id +
                        "', attack model is '" + model.id() + "'");
  }
  if (capsule.input_shape != model.input_shape()) {
    throw ProtocolError("capsule input shape " + ShapeToString(capsule.input_shape) +
                        " differs from model input " +
                        ShapeToString(model.input_shape()));
  }
  const std::vector<std::string> names = model.TrainableNames();
  if (names.size() != capsule.gradients.size()) {
    throw ProtocolError("capsule has " + std::to_string(capsule.gradients.size()) +
                        " gradients, model has " + std::to_string(names.size()) +
                        " trainable parameters");
  }
  for (const std::string& name : names) {
    auto it = capsule.gradients.find(name);
    if (it == capsule.gradients.end()) {
      throw ProtocolError("capsule lacks gradient '" + name + "'");
    }
    if (it->second.shape() != model.param(name).value.shape()) {
      throw ProtocolError("gradient '" + name + "' has shape " +
                          ShapeToString(it->second.shape()) + ", parameter has " +
                          ShapeToString(model.param(name).value.shape()));
    }
  }
}

std::size_t LastLinearLayer(const Model& model) {
  const auto& layers = model.layers();
  if (layers.empty() || layers.back().kind != LayerKind::kLinear) {
    throw RgapError("model '" + model.id() +
                    "' does not end in a linear layer feeding the softmax");
  }
  return layers.size() - 1;
}

}  // namespace internal

namespace {

using internal::CheckCapsuleMatchesModel;

// Loss and input gradients of the gradient-match objective for one dummy.
class GradientMatcher {
 public:
  GradientMatcher(const GradientCapsule& capsule, const Model& model)
      : model_(model), names_(model.TrainableNames()) {
    for (const std::string& n : names_) target_[n] = capsule.gradients.at(n);
  }

  // vars[0] is the [1 × input] dummy, vars[1] (when present) the [1 × C]
  // label logits. `label` is used when vars has one entry.
  Evaluation Evaluate(const std::vector<Tensor>& vars,
                      std::optional<std::size_t> label) const {
    Tape tape;
    std::vector<Tensor> wrt;
    for (const Tensor& v : vars) wrt.push_back(tape.Variable(v));
    TensorMap params;
    std::vector<Tensor> param_vars;
    for (const std::string& n : names_) {
      param_vars.push_back(tape.Variable(model_.param(n).value));
      params[n] = param_vars.back();
    }
    Label target = wrt.size() > 1 ? Label(Softmax(wrt[1])) : Label(*label);
    Tensor loss = ForwardLoss(model_, wrt[0], target, &params).loss;
    std::vector<Tensor> dummy_grads = Grad(loss, param_vars, true);
    TensorMap dummy;
    for (std::size_t i = 0; i < names_.size(); ++i) dummy[names_[i]] = dummy_grads[i];
    Tensor match = GradientMatchLoss(target_, dummy);
    return {match.item(), Grad(match, wrt)};
  }

 private:
  const Model& model_;
  std::vector<std::string> names_;
  TensorMap target_;
};

Tensor NormalTensor(const Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(NumElements(shape));
  for (double& x : v) x = normal(rng);
  return Tensor(shape, std::move(v));
}

const char* ScheduleName(Schedule s) {
  return s == Schedule::kRestart ? "restart" : "stagnation";
}

AttackResult RunInversion(const std::string& name, const GradientCapsule& capsule,
                          const Model& model, const AttackConfig& config,
                          std::optional<std::size_t> fixed_label) {
  const auto started = std::chrono::steady_clock::now();
  config.Validate();
  CheckCapsuleMatchesModel(capsule, model);
  const Shape x_shape = BatchOf(capsule.input_shape);
  const Shape y_shape = {1, model.num_classes()};
  if (config.initial_input && config.initial_input->size() != NumElements(x_shape)) {
    throw DimensionError("initial input has shape " +
                         ShapeToString(config.initial_input->shape()) +
                         ", dummy needs " + ShapeToString(x_shape));
  }
  const bool optimize_label = !fixed_label.has_value();
  GradientMatcher matcher(capsule, model);
  const Closure closure = [&](const std::vector<Tensor>& vars) {
    return matcher.Evaluate(vars, fixed_label);
  };
  const double lr = config.lr.value_or(
      config.optimizer == OptimizerKind::kAdam ? 0.1 : 1.0);

  AttackResult result;
  result.attack = name;
  double best = std::numeric_limits<double>::infinity();
  std::vector<Tensor> best_vars;
  auto record = [&](double loss, const std::vector<Tensor>& vars) {
    result.loss_trace.push_back(loss);
    if (loss < best || best_vars.empty()) {
      best = std::min(best, loss);
      best_vars = vars;
    }
    return loss < config.loss_threshold;
  };

  int attempt = 0;
  for (; attempt < config.max_restarts && !result.success; ++attempt) {
    std::mt19937_64 rng(config.seed + static_cast<std::uint64_t>(attempt));
    std::vector<Tensor> vars;
    vars.push_back(attempt == 0 && config.initial_input
                       ? Reshape(*config.initial_input, x_shape).Detach()
                       : NormalTensor(x_shape, rng));
    if (optimize_label) {
      vars.push_back(attempt == 0 && config.initial_label_logits
                         ? Reshape(*config.initial_label_logits, y_shape).Detach()
                         : NormalTensor(y_shape, rng));
    }
    OptimizerState state = config.optimizer == OptimizerKind::kAdam
                               ? OptimizerState::Adam(lr)
                               : OptimizerState::Lbfgs(lr);
    result.attempt_offsets.push_back(result.loss_trace.size());
    Evaluation current = closure(vars);
    if (record(current.loss, vars)) {
      result.success = true;
      result.iterations_to_threshold = result.iterations;
      break;
    }
    double reference_best = current.loss;
    double window_best = std::numeric_limits<double>::infinity();
    for (int it = 1; it <= config.max_iterations; ++it) {
      bool stalled = false;
      double loss;
      if (config.optimizer == OptimizerKind::kLbfgs) {
        LbfgsResult r = LbfgsStep(state, vars, closure);
        stalled = r.no_progress;
        vars = r.vars;
        loss = r.loss;
      } else {
        AdamResult r = AdamStep(state, vars, current.grads);
        stalled = r.skipped;
        vars = r.vars;
        current = closure(vars);
        loss = current.loss;
      }
      ++result.iterations;
      if (record(loss, vars)) {
        result.success = true;
        result.iterations_to_threshold = result.iterations;
        break;
      }
      window_best = std::min(window_best, std::isfinite(loss) ? loss : window_best);
      bool perturb = false;
      if (stalled) {
        if (config.schedule == Schedule::kRestart) break;
        perturb = true;
      }
      if (config.schedule == Schedule::kStagnation &&
          it % config.stagnation_window == 0) {
        if (!(window_best < (1.0 - config.stagnation_min_improvement) * reference_best)) {
          perturb = true;
        }
        reference_best = std::min(reference_best, window_best);
        window_best = std::numeric_limits<double>::infinity();
      }
      if (perturb) {
        auto [x, next] = StagnationPerturb(vars[0], state, config.stagnation_noise_sigma, rng);
        vars[0] = x;
        state = std::move(next);
        state.ResetHistory();
        ++result.perturbations;
        if (config.optimizer == OptimizerKind::kAdam) current = closure(vars);
      }
    }
  }
  result.restarts_used = std::max(attempt - 1, 0);
  result.best_loss = best;
  result.reconstructed_input = Reshape(best_vars[0], capsule.input_shape).Detach();
  if (optimize_label) {
    result.recovered_label = Reshape(Softmax(best_vars[1]), {y_shape[1]}).Detach();
  } else {
    result.recovered_label = *fixed_label;
  }
  result.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

}  // namespace

Tensor GradientMatchLoss(const TensorMap& a, const TensorMap& b) {
  if (a.size() != b.size()) {
    throw StructureError("gradient maps have " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()) + " entries");
  }
  if (a.empty()) throw StructureError("gradient maps are empty");
  std::optional<Tensor> total;
  for (const auto& [name, ta] : a) {
    auto it = b.find(name);
    if (it == b.end()) throw StructureError("key '" + name + "' missing from second map");
    if (it->second.shape() != ta.shape()) {
      throw StructureError("key '" + name + "' has shapes " + ShapeToString(ta.shape()) +
                           " and " + ShapeToString(it->second.shape()));
    }
    Tensor term = SquaredNorm(Sub(ta, it->second));
    total = total ? Add(*total, term) : term;
  }
  return *total;
}

void AttackConfig::Validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument(what); };
  if (max_iterations < 0) fail("max_iterations must be >= 0");
  if (!(loss_threshold > 0)) fail("loss_threshold must be > 0");
  if (max_restarts < 1) fail("max_restarts must be >= 1");
  if (stagnation_window < 1) fail("stagnation_window must be >= 1");
  if (!(stagnation_noise_sigma >= 0)) fail("stagnation_noise_sigma must be >= 0");
  if (lr && !(*lr > 0)) fail("lr must be > 0");
}

nlohmann::json AttackConfigToJson(const AttackConfig& c) {
  nlohmann::json j = {{"max_iterations", c.max_iterations},
                      {"loss_threshold", c.loss_threshold},
                      {"max_restarts", c.max_restarts},
                      {"optimizer", OptimizerName(c.optimizer)},
                      {"schedule", ScheduleName(c.schedule)},
                      {"stagnation_window", c.stagnation_window},
                      {"stagnation_noise_sigma", c.stagnation_noise_sigma},
                      {"stagnation_min_improvement", c.stagnation_min_improvement},
                      {"seed", c.seed},
                      {"optimize_label", c.optimize_label}};
  if (c.lr) j["lr"] = *c.lr;
  if (c.label) j["label"] = *c.label;
  return j;
}

AttackConfig AttackConfigFromJson(const nlohmann::json& j) {
  AttackConfig c;
  try {
    c.max_iterations = j.value("max_iterations", c.max_iterations);
    c.loss_threshold = j.value("loss_threshold", c.loss_threshold);
    c.max_restarts = j.value("max_restarts", c.max_restarts);
    if (j.contains("optimizer")) {
      c.optimizer = OptimizerFromName(j.at("optimizer").get<std::string>());
    }
    if (j.contains("schedule")) {
      const std::string s = j.at("schedule").get<std::string>();
      if (s == "restart") {
        c.schedule = Schedule::kRestart;
      } else if (s == "stagnation") {
        c.schedule = Schedule::kStagnation;
      } else {
        throw std::invalid_argument("unknown schedule \"" + s + "\"");
      }
    }
    c.stagnation_window = j.value("stagnation_window", c.stagnation_window);
    c.stagnation_noise_sigma = j.value("stagnation_noise_sigma", c.stagnation_noise_sigma);
    c.stagnation_min_improvement =
        j.value("stagnation_min_improvement", c.stagnation_min_improvement);
    c.seed = j.value("seed", c.seed);
    c.optimize_label = j.value("optimize_label", c.optimize_label);
    if (j.contains("lr")) c.lr = j.at("lr").get<double>();
    if (j.contains("label")) c.label = j.at("label").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("attack config: ") + e.what());
  }
  c.Validate();
  return c;
}

nlohmann::json AttackResultToJson(const AttackResult& r, const ResultJsonOptions& options) {
  nlohmann::json trace = nlohmann::json::array();
  const bool thin = options.downsample_trace && r.loss_trace.size() > 10000;
  for (std::size_t i = 0; i < r.loss_trace.size(); ++i) {
    if (!thin || i % 10 == 0) trace.push_back(JsonDouble(r.loss_trace[i]));
  }
  nlohmann::json j = {
      {"attack", r.attack},
      {"success", r.success},
      {"best_loss", JsonDouble(r.best_loss)},
      {"restarts_used", r.restarts_used},
      {"perturbations", r.perturbations},
      {"iterations", r.iterations},
      {"iterations_to_threshold",
       r.iterations_to_threshold ? nlohmann::json(*r.iterations_to_threshold)
                                 : nlohmann::json()},
      {"attempt_offsets", r.attempt_offsets},
      {"loss_trace_stride", thin ? 10 : 1},
      {"loss_trace", std::move(trace)},
      {"reconstructed_input", "FTEN:" + Base64Encode(EncodeFten(r.reconstructed_input))}};
  if (const auto* index = std::get_if<std::size_t>(&r.recovered_label)) {
    j["recovered_label"] = *index;
  } else {
    j["recovered_label"] = std::get<Tensor>(r.recovered_label).ToVector();
  }
  if (options.include_wall_time) j["wall_time"] = r.wall_time;
  return j;
}

AttackResult AttackResultFromJson(const nlohmann::json& j) {
  AttackResult r;
  try {
    r.attack = j.at("attack").get<std::string>();
    r.success = j.at("success").get<bool>();
    r.best_loss = DoubleFromJson(j.at("best_loss"));
    r.restarts_used = j.at("restarts_used").get<int>();
    r.perturbations = j.value("perturbations", 0);
    r.iterations = j.at("iterations").get<int>();
    if (!j.at("iterations_to_threshold").is_null()) {
      r.iterations_to_threshold = j.at("iterations_to_threshold").get<int>();
    }
    r.attempt_offsets = j.at("attempt_offsets").get<std::vector<std::size_t>>();
    for (const auto& v : j.at("loss_trace")) r.loss_trace.push_back(DoubleFromJson(v));
    const std::string blob = j.at("reconstructed_input").get<std::string>();
    if (blob.rfind("FTEN:", 0) != 0) throw ParseError("reconstructed_input is not FTEN", 0);
    r.reconstructed_input = DecodeFten(Base64Decode(blob.substr(5)));
    const auto& label = j.at("recovered_label");
    if (label.is_array()) {
      std::vector<double> p = label.get<std::vector<double>>();
      r.recovered_label = Tensor({p.size()}, p);
    } else {
      r.recovered_label = label.get<std::size_t>();
    }
    r.wall_time = j.value("wall_time", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("attack result: ") + e.what(), 0);
  }
  return r;
}

AttackResult DlgAttack(const GradientCapsule& capsule, const Model& model,
                       const AttackConfig& config) {
  std::optional<std::size_t> label;
  if (!config.optimize_label) {
    if (!config.label) {
      throw std::invalid_argument("DLG without label optimization needs config.label");
    }
    if (*config.label >= model.num_classes()) {
      throw IndexError("label " + std::to_string(*config.label) + " out of range");
    }
    label = config.label;
  }
  return RunInversion("dlg", capsule, model, config, label);
}

std::size_t IdlgLabelRecover(const GradientCapsule& capsule, const Model& model) {
  CheckCapsuleMatchesModel(capsule, model);
  const LayerSpec& last = model.layers()[internal::LastLinearLayer(model)];
  const Tensor& gw = capsule.gradients.at(last.name + ".weight");
  const Tensor& gb = capsule.gradients.at(last.name + ".bias");
  const std::size_t rows = gw.dim(0), cols = gw.dim(1);
  std::vector<std::size_t> by_rows, by_bias;
  for (std::size_t i = 0; i < rows; ++i) {
    bool all_non_positive = true;
    for (std::size_t j = 0; j < rows && all_non_positive; ++j) {
      if (j == i) continue;
      double dot = 0.0;
      for (std::size_t k = 0; k < cols; ++k) dot += gw[i * cols + k] * gw[j * cols + k];
      all_non_positive = dot <= 0.0;
    }
    if (all_non_positive) by_rows.push_back(i);
    if (gb[i] < 0.0) by_bias.push_back(i);
  }
  std::vector<std::size_t> both;
  std::set_intersection(by_rows.begin(), by_rows.end(), by_bias.begin(), by_bias.end(),
                        std::back_inserter(both));
  if (both.size() != 1 || by_bias.size() != 1) {
    std::string list;
    for (std::size_t c : by_rows) list += (list.empty() ? "" : ", ") + std::to_string(c);
    throw AmbiguityError("label rule is ambiguous: weight-row candidates {" + list +
                             "}, " + std::to_string(by_bias.size()) +
                             " negative bias entries",
                         by_rows);
  }
  return both.front();
}

AttackResult IdlgAttack(const GradientCapsule& capsule, const Model& model,
                        const AttackConfig& config) {
  return RunInversion("idlg", capsule, model, config, IdlgLabelRecover(capsule, model));
}

std::pair<Tensor, OptimizerState> StagnationPerturb(const Tensor& x,
                                                    const OptimizerState& state,
                                                    double sigma,
                                                    std::mt19937_64& rng) {
  if (!(sigma >= 0)) throw std::invalid_argument("noise sigma must be >= 0");
  OptimizerState halved = HalveLr(state);
  if (sigma == 0.0) return {x.Detach(), halved};
  std::normal_distribution<double> noise(0.0, sigma);
  std::vector<double> v = x.ToVector();
  for (double& e : v) e += noise(rng);
  return {Tensor(x.shape(), std::move(v)), halved};
}

}  // namespace gradleak
