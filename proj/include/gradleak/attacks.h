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

// Gradient inversion: recover a participant's input from one capsule.
//
// DLG and iDLG search for a dummy input whose gradients match the capsule.
// R-GAP solves for the input layer by layer from the last layer backwards.

#ifndef GRADLEAK_ATTACKS_H_
#define GRADLEAK_ATTACKS_H_

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gradleak/capsule.h"
#include "gradleak/models.h"
#include "gradleak/optim.h"
#include "gradleak/tensor.h"
#include "json.hpp"

namespace gradleak {

// Two gradient maps disagree in keys or shapes.
class StructureError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// The label rule found zero or several candidate rows.
class AmbiguityError : public std::runtime_error {
 public:
  AmbiguityError(const std::string& what, std::vector<std::size_t> candidates)
      : std::runtime_error(what), candidates_(std::move(candidates)) {}
  const std::vector<std::size_t>& candidates() const { return candidates_; }

 private:
  std::vector<std::size_t> candidates_;
};

// Closed-form reconstruction cannot proceed (non-invertible activation,
// vanishing output gradient, unsupported layer).
class RgapError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Σ over keys of ‖a[k] − b[k]‖². Differentiable in either argument.
Tensor GradientMatchLoss(const TensorMap& a, const TensorMap& b);

enum class Schedule {
  // Re-initialize the dummy after a failed attempt.
  kRestart,
  // One long attempt; noise and lr halving when progress stalls.
  kStagnation,
};

struct AttackConfig {
  int max_iterations = 300;
  double loss_threshold = 1e-5;
  // Total number of attempts, the first included.
  int max_restarts = 10;
  OptimizerKind optimizer = OptimizerKind::kLbfgs;
  // Defaults to 1.0 for L-BFGS and 0.1 for Adam.
  std::optional<double> lr;
  Schedule schedule = Schedule::kRestart;
  int stagnation_window = 1000;
  double stagnation_noise_sigma = 1e-3;
  // Relative improvement of the best loss a window must achieve.
  double stagnation_min_improvement = 0.01;
  std::uint64_t seed = 0;
  bool optimize_label = true;
  // Label used by DLG when optimize_label is false.
  std::optional<std::size_t> label;
  // Starting point of the first attempt instead of random draws.
  std::optional<Tensor> initial_input;
  std::optional<Tensor> initial_label_logits;

  // Throws std::invalid_argument on out-of-range fields.
  void Validate() const;
};

nlohmann::json AttackConfigToJson(const AttackConfig& config);
// Missing keys keep their defaults.
AttackConfig AttackConfigFromJson(const nlohmann::json& j);

struct AttackResult {
  std::string attack;
  // Dummy at the lowest loss seen, per-sample shape.
  Tensor reconstructed_input;
  // Class index (iDLG, fixed label) or softmax of the label logits (DLG).
  Label recovered_label;
  // Loss at the start of every attempt followed by one entry per iteration.
  std::vector<double> loss_trace;
  // Index into loss_trace at which each attempt starts.
  std::vector<std::size_t> attempt_offsets;
  int restarts_used = 0;
  int perturbations = 0;
  int iterations = 0;
  // Iterations run, over all attempts, when the threshold was first crossed.
  std::optional<int> iterations_to_threshold;
  double best_loss = 0.0;
  bool success = false;
  double wall_time = 0.0;
};

struct ResultJsonOptions {
  // Keep every 10th entry when the trace exceeds 10⁴ entries.
  bool downsample_trace = false;
  bool include_wall_time = false;
};

nlohmann::json AttackResultToJson(const AttackResult& result,
                                  const ResultJsonOptions& options = {});
AttackResult AttackResultFromJson(const nlohmann::json& j);

// Joint search over dummy input and, with optimize_label, soft label logits.
AttackResult DlgAttack(const GradientCapsule& capsule, const Model& model,
                       const AttackConfig& config);

// Index of the true class from the sign structure of the last linear layer's
// gradients: the row with non-positive dot product against every other
// weight-gradient row, cross-checked with the negative bias-gradient entry.
std::size_t IdlgLabelRecover(const GradientCapsule& capsule, const Model& model);

// DLG with the label fixed to IdlgLabelRecover.
AttackResult IdlgAttack(const GradientCapsule& capsule, const Model& model,
                        const AttackConfig& config);

// Adds N(0, σ²) noise to every element and halves the learning rate.
std::pair<Tensor, OptimizerState> StagnationPerturb(const Tensor& x,
                                                    const OptimizerState& state,
                                                    double sigma,
                                                    std::mt19937_64& rng);

struct LayerRank {
  std::string layer;
  std::size_t unknowns = 0;
  std::size_t equations = 0;
  // Numerical rank; absent when the system was solved iteratively.
  std::optional<std::size_t> rank;
  bool deficient = false;
  // "closed_form", "qr" or "cgls".
  std::string method;
  // ‖A x − b‖ / ‖b‖ at the solution.
  double residual = 0.0;
};

struct RgapResult {
  Tensor reconstructed_input;  // per-sample shape
  std::size_t label = 0;
  // First to last parametrized layer.
  std::vector<LayerRank> ranks;
  // No layer was rank-deficient.
  bool exact = true;
};

RgapResult RgapReconstruct(const GradientCapsule& capsule, const Model& model);

nlohmann::json RankReportToJson(const std::vector<LayerRank>& ranks);

}  // namespace gradleak

#endif  // GRADLEAK_ATTACKS_H_
