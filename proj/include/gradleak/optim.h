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

// First-order (Adam) and quasi-Newton (L-BFGS) minimizers over a list of
// tensors. Both treat the list as one flat vector.

#ifndef GRADLEAK_OPTIM_H_
#define GRADLEAK_OPTIM_H_

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "gradleak/tensor.h"

namespace gradleak {

enum class OptimizerKind { kLbfgs, kAdam };

std::string OptimizerName(OptimizerKind kind);
// Accepts "lbfgs" and "adam".
OptimizerKind OptimizerFromName(const std::string& name);

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kLbfgs;
  double lr = 1.0;

  // Adam. m and v are empty until the first step, then sized like the
  // flattened variables.
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;

  // L-BFGS. Every stored pair has sᵀy > curvature_eps.
  std::size_t history_size = 100;
  double c1 = 1e-4;
  double c2 = 0.9;
  // Closure evaluations per step, shared by its inner iterations.
  int max_evals = 20;
  double grad_tolerance = 1e-14;
  double curvature_eps = 1e-10;
  std::deque<std::pair<std::vector<double>, std::vector<double>>> history;
  std::uint64_t steps = 0;
  // Evaluation cached at the point the previous step ended on.
  std::vector<double> cached_x;
  double cached_loss = 0.0;
  std::vector<double> cached_grad;

  static OptimizerState Adam(double lr = 0.1);
  static OptimizerState Lbfgs(double lr = 1.0);

  // Drops curvature pairs and the cached evaluation. Used after the
  // variables are changed outside the optimizer.
  void ResetHistory();
};

// lr ← lr/2; nothing else changes.
OptimizerState HalveLr(const OptimizerState& state);

struct AdamResult {
  std::vector<Tensor> vars;
  // Non-finite gradient; vars and state are unchanged.
  bool skipped = false;
};

AdamResult AdamStep(OptimizerState& state, const std::vector<Tensor>& vars,
                    const std::vector<Tensor>& grads);

struct Evaluation {
  double loss = 0.0;
  std::vector<Tensor> grads;
};
using Closure = std::function<Evaluation(const std::vector<Tensor>&)>;

struct LbfgsResult {
  std::vector<Tensor> vars;
  // Loss and gradient at `vars`.
  double loss = 0.0;
  std::vector<Tensor> grads;
  // Closure value at the starting point.
  double initial_loss = 0.0;
  int evals = 0;
  // Accepted quasi-Newton iterations within the step.
  int iterations = 0;
  // Strong-Wolfe search failed; steepest-descent backtracking was tried.
  bool used_fallback = false;
  // Nothing with lower loss was found within max_evals; vars are unchanged.
  bool no_progress = false;
};

// One optimizer step: quasi-Newton iterations (two-loop direction, strong-Wolfe
// line search with cubic interpolation, steepest-descent backtracking as
// fallback) until max_evals closure evaluations are spent, the gradient
// vanishes or an iteration finds no acceptable point. Every accepted
// iteration satisfies the Armijo condition, so a step strictly lowers the
// loss unless no_progress is set.
LbfgsResult LbfgsStep(OptimizerState& state, const std::vector<Tensor>& vars,
                      const Closure& closure);

}  // namespace gradleak

#endif  // GRADLEAK_OPTIM_H_
