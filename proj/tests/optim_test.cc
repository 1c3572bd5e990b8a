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

#include "gradleak/optim.h"

#include <cmath>
#include <limits>
#include <random>

#include "gtest/gtest.h"

namespace gradleak {
namespace {

Tensor Vec1(double v) { return Tensor({1}, {v}); }

Evaluation Square(const std::vector<Tensor>& v) {
  const double x = v[0][0];
  return {x * x, {Vec1(2 * x)}};
}

Evaluation Rosenbrock(const std::vector<Tensor>& v) {
  const double x = v[0][0], y = v[0][1];
  const double f = (1 - x) * (1 - x) + 100 * (y - x * x) * (y - x * x);
  return {f, {Tensor({2}, {-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)})}};
}

TEST(AdamTest, ZeroGradientLeavesVarsUnchanged) {
  OptimizerState s = OptimizerState::Adam();
  AdamResult r = AdamStep(s, {Tensor({2}, {1.5, -2})}, {Tensor::Zeros({2})});
  EXPECT_FALSE(r.skipped);
  EXPECT_EQ(r.vars[0][0], 1.5);
  EXPECT_EQ(r.vars[0][1], -2.0);
}

TEST(AdamTest, FirstStepMovesByLearningRate) {
  OptimizerState s = OptimizerState::Adam(0.1);
  AdamResult r = AdamStep(s, {Vec1(0.0)}, {Vec1(1.0)});
  // m̂ = 1, v̂ = 1, step = 0.1 / (1 + 1e-8).
  EXPECT_NEAR(r.vars[0][0], -0.1, 1e-8);
}

TEST(AdamTest, ConvergesOnQuadratic) {
  OptimizerState s = OptimizerState::Adam(0.1);
  std::vector<Tensor> x = {Vec1(1.0)};
  for (int i = 0; i < 100; ++i) x = AdamStep(s, x, Square(x).grads).vars;
  EXPECT_LT(std::abs(x[0][0]), 0.05);
}

// Textbook recurrence, written out independently.
TEST(AdamTest, MatchesClosedFormRecurrence) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 1);
  OptimizerState s = OptimizerState::Adam(0.05);
  std::vector<Tensor> x = {Tensor({3}, {0.2, -0.4, 1.0})};
  double ref[3] = {0.2, -0.4, 1.0}, m[3] = {}, v[3] = {};
  for (int t = 1; t <= 50; ++t) {
    std::vector<double> g = {n(rng), n(rng), 1e-3 * n(rng)};
    x = AdamStep(s, x, {Tensor({3}, g)}).vars;
    for (int i = 0; i < 3; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(0.9, t));
      const double vh = v[i] / (1 - std::pow(0.999, t));
      ref[i] -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(x[0][i], ref[i], 1e-12);
    }
  }
}

TEST(AdamTest, NonFiniteGradientSkipsStep) {
  OptimizerState s = OptimizerState::Adam();
  AdamStep(s, {Vec1(1)}, {Vec1(1)});
  const OptimizerState before = s;
  AdamResult r = AdamStep(s, {Vec1(1)}, {Vec1(std::numeric_limits<double>::infinity())});
  EXPECT_TRUE(r.skipped);
  EXPECT_EQ(r.vars[0][0], 1.0);
  EXPECT_EQ(s.t, before.t);
  EXPECT_EQ(s.m, before.m);
}

TEST(AdamTest, ShapeMismatchThrows) {
  OptimizerState s = OptimizerState::Adam();
  EXPECT_THROW(AdamStep(s, {Vec1(1)}, {Tensor::Zeros({2})}), DimensionError);
}

TEST(LbfgsTest, QuadraticConvergesWithinTenSteps) {
  OptimizerState s = OptimizerState::Lbfgs();
  std::vector<Tensor> x = {Vec1(1.0)};
  int steps = 0;
  while (std::abs(x[0][0]) >= 1e-8 && steps < 10) {
    LbfgsResult r = LbfgsStep(s, x, Square);
    if (r.no_progress) break;
    x = r.vars;
    ++steps;
  }
  EXPECT_LT(std::abs(x[0][0]), 1e-8);
  EXPECT_LE(steps, 10);
}

TEST(LbfgsTest, RosenbrockWithin200Steps) {
  OptimizerState s = OptimizerState::Lbfgs();
  std::vector<Tensor> x = {Tensor({2}, {-1.2, 1.0})};
  double f = Rosenbrock(x).loss;
  for (int i = 0; i < 200 && f >= 1e-6; ++i) {
    LbfgsResult r = LbfgsStep(s, x, Rosenbrock);
    if (r.no_progress) break;
    x = r.vars;
    f = r.loss;
  }
  EXPECT_LT(f, 1e-6);
}

TEST(LbfgsTest, EveryAcceptedStepSatisfiesArmijo) {
  OptimizerState s = OptimizerState::Lbfgs();
  s.max_evals = 2;  // mostly single-iteration steps
  std::vector<Tensor> x = {Tensor({2}, {-1.2, 1.0})};
  for (int i = 0; i < 60; ++i) {
    Evaluation before = Rosenbrock(x);
    LbfgsResult r = LbfgsStep(s, x, Rosenbrock);
    if (r.no_progress) break;
    double gtd = 0;
    for (std::size_t k = 0; k < 2; ++k) {
      gtd += before.grads[0][k] * (r.vars[0][k] - x[0][k]);
    }
    EXPECT_LT(r.loss, before.loss);
    EXPECT_GE(r.iterations, 1);
    if (r.iterations == 1) EXPECT_LE(r.loss, before.loss + 1e-4 * gtd);
    EXPECT_EQ(r.loss, Rosenbrock(r.vars).loss);
    EXPECT_LE(r.evals, 20);
    x = r.vars;
  }
}

TEST(LbfgsTest, StepRunsInnerIterationsWithinBudget) {
  OptimizerState s = OptimizerState::Lbfgs();
  int calls = 0;
  auto counted = [&calls](const std::vector<Tensor>& v) {
    ++calls;
    return Rosenbrock(v);
  };
  LbfgsResult r = LbfgsStep(s, {Tensor({2}, {-1.2, 1.0})}, counted);
  EXPECT_GT(r.iterations, 1);
  EXPECT_EQ(r.evals, calls);
  EXPECT_LE(calls, 20);
  EXPECT_EQ(s.steps, static_cast<std::uint64_t>(r.iterations));
}

TEST(LbfgsTest, HistoryBoundedAndCurvaturePositive) {
  OptimizerState s = OptimizerState::Lbfgs();
  s.history_size = 3;
  std::vector<Tensor> x = {Tensor({2}, {-1.2, 1.0})};
  for (int i = 0; i < 30; ++i) {
    LbfgsResult r = LbfgsStep(s, x, Rosenbrock);
    if (r.no_progress) break;
    x = r.vars;
    EXPECT_LE(s.history.size(), 3u);
    for (const auto& [sv, yv] : s.history) {
      EXPECT_GT(sv[0] * yv[0] + sv[1] * yv[1], 0.0);
    }
  }
}

TEST(LbfgsTest, ConstantFunctionReportsNoProgress) {
  OptimizerState s = OptimizerState::Lbfgs();
  auto constant = [](const std::vector<Tensor>&) {
    return Evaluation{3.0, {Tensor::Zeros({2})}};
  };
  LbfgsResult r = LbfgsStep(s, {Tensor({2}, {1, 2})}, constant);
  EXPECT_TRUE(r.no_progress);
  EXPECT_EQ(r.vars[0][1], 2.0);
  EXPECT_EQ(r.loss, 3.0);
}

// A closure whose reported gradient points uphill everywhere: no trial can
// lower the loss, so the budget is exhausted.
TEST(LbfgsTest, ExhaustedBudgetReportsNoProgress) {
  OptimizerState s = OptimizerState::Lbfgs();
  auto liar = [](const std::vector<Tensor>& v) {
    const double x = v[0][0];
    return Evaluation{x * x, {Vec1(-2 * x - 1)}};
  };
  LbfgsResult r = LbfgsStep(s, {Vec1(1.0)}, liar);
  EXPECT_TRUE(r.no_progress);
  EXPECT_TRUE(r.used_fallback);
  EXPECT_LE(r.evals, 20);
  EXPECT_EQ(r.vars[0][0], 1.0);
}

TEST(LbfgsTest, NonFiniteTrialsAreRejected) {
  OptimizerState s = OptimizerState::Lbfgs(1.0);
  // Finite only on |x| < 1.5; the minimum at 0 is reached without NaN leaks.
  auto f = [](const std::vector<Tensor>& v) {
    const double x = v[0][0];
    if (std::abs(x) >= 1.5) {
      return Evaluation{std::numeric_limits<double>::quiet_NaN(), {Vec1(0)}};
    }
    return Evaluation{x * x, {Vec1(2 * x)}};
  };
  std::vector<Tensor> x = {Vec1(1.0)};
  for (int i = 0; i < 10; ++i) {
    LbfgsResult r = LbfgsStep(s, x, f);
    if (r.no_progress) break;
    ASSERT_TRUE(std::isfinite(r.loss));
    x = r.vars;
  }
  EXPECT_LT(std::abs(x[0][0]), 1e-6);
}

TEST(LbfgsTest, Deterministic) {
  auto run = [] {
    OptimizerState s = OptimizerState::Lbfgs();
    std::vector<Tensor> x = {Tensor({2}, {-1.2, 1.0})};
    for (int i = 0; i < 25; ++i) x = LbfgsStep(s, x, Rosenbrock).vars;
    return x[0].ToVector();
  };
  EXPECT_EQ(run(), run());
}

TEST(HalveLrTest, ArithmeticAndIsolation) {
  OptimizerState s = OptimizerState::Adam(0.1);
  AdamStep(s, {Vec1(1)}, {Vec1(0.5)});
  OptimizerState h = HalveLr(s);
  EXPECT_EQ(h.lr, 0.05);
  EXPECT_EQ(h.m, s.m);
  EXPECT_EQ(h.v, s.v);
  EXPECT_EQ(h.t, s.t);
  OptimizerState l = OptimizerState::Lbfgs(1.0);
  for (int i = 0; i < 10; ++i) l = HalveLr(l);
  EXPECT_NEAR(l.lr, 9.765625e-4, 1e-15);
  l.lr = 0;
  EXPECT_THROW(HalveLr(l), std::invalid_argument);
}

TEST(OptimizerNameTest, RoundTrip) {
  EXPECT_EQ(OptimizerFromName("adam"), OptimizerKind::kAdam);
  EXPECT_EQ(OptimizerName(OptimizerFromName("lbfgs")), "lbfgs");
  EXPECT_THROW(OptimizerFromName("sgd"), std::invalid_argument);
}

}  // namespace
}  // namespace gradleak
