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

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace gradleak {

namespace {

using Vec = std::vector<double>;

Vec Flatten(const std::vector<Tensor>& ts) {
  Vec out;
  for (const Tensor& t : ts) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

std::vector<Tensor> Unflatten(const Vec& flat, const std::vector<Tensor>& like) {
  std::vector<Tensor> out;
  std::size_t at = 0;
  for (const Tensor& t : like) {
    out.emplace_back(t.shape(), Vec(flat.begin() + at, flat.begin() + at + t.size()));
    at += t.size();
  }
  return out;
}

void CheckShapes(const std::vector<Tensor>& vars, const std::vector<Tensor>& grads) {
  if (vars.size() != grads.size()) {
    throw DimensionError("optimizer got " + std::to_string(vars.size()) +
                         " variables and " + std::to_string(grads.size()) +
                         " gradients");
  }
  for (std::size_t i = 0; i < vars.size(); ++i) {
    if (vars[i].shape() != grads[i].shape()) {
      throw DimensionError("gradient " + std::to_string(i) + " has shape " +
                           ShapeToString(grads[i].shape()) + ", variable has " +
                           ShapeToString(vars[i].shape()));
    }
  }
}

double Dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double MaxAbs(const Vec& a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

// x + t·d
Vec Along(const Vec& x, double t, const Vec& d) {
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + t * d[i];
  return out;
}

// Minimizer of the cubic through (x1, f1, g1) and (x2, f2, g2), clamped to
// [lo, hi]; the interval midpoint when the cubic has no real minimizer.
double CubicInterpolate(double x1, double f1, double g1, double x2, double f2,
                        double g2, double lo, double hi) {
  const double d1 = g1 + g2 - 3 * (f1 - f2) / (x1 - x2);
  const double d2_square = d1 * d1 - g1 * g2;
  if (d2_square >= 0 && std::isfinite(d2_square)) {
    const double d2 = std::sqrt(d2_square);
    const double min_pos =
        x1 <= x2 ? x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2 * d2))
                 : x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2 * d2));
    if (std::isfinite(min_pos)) return std::min(std::max(min_pos, lo), hi);
  }
  return (lo + hi) / 2;
}

struct Point {
  double t = 0.0;
  double f = 0.0;
  Vec g;
  double gtd = 0.0;
};

class LineEvaluator {
 public:
  LineEvaluator(const Closure& closure, const std::vector<Tensor>& like,
                const Vec& x, const Vec& d, int budget)
      : closure_(closure), like_(like), x_(x), d_(d), budget_(budget) {}

  bool exhausted() const { return evals_ >= budget_; }
  int evals() const { return evals_; }

  Point At(double t) {
    ++evals_;
    Evaluation e = closure_(Unflatten(Along(x_, t, d_), like_));
    Point p;
    p.t = t;
    p.f = std::isfinite(e.loss) ? e.loss : std::numeric_limits<double>::infinity();
    p.g = Flatten(e.grads);
    if (p.g.size() != x_.size()) {
      throw DimensionError("closure returned a gradient of the wrong size");
    }
    p.gtd = Dot(p.g, d_);
    if (!std::isfinite(p.gtd)) p.f = std::numeric_limits<double>::infinity();
    return p;
  }

 private:
  const Closure& closure_;
  const std::vector<Tensor>& like_;
  const Vec& x_;
  const Vec& d_;
  int budget_;
  int evals_ = 0;
};

// Strong-Wolfe search along d from `start` (t = 0). Returns the best point
// found; its t is 0 when no trial improved on the start.
Point StrongWolfe(LineEvaluator& eval, const Point& start, double t, double c1,
                  double c2, double d_norm) {
  constexpr double kTolChange = 1e-12;
  Point prev = start;
  Point cur = eval.At(t);
  Point best = start;
  auto consider = [&](const Point& p) {
    if (p.f < best.f) best = p;
  };
  consider(cur);
  Point lo, hi;
  bool bracketed = false;
  int iter = 0;
  while (!eval.exhausted()) {
    if (cur.f > start.f + c1 * cur.t * start.gtd || (iter > 0 && cur.f >= prev.f)) {
      lo = prev;
      hi = cur;
      bracketed = true;
      break;
    }
    if (std::abs(cur.gtd) <= -c2 * start.gtd) return cur;
    if (cur.gtd >= 0) {
      lo = cur;
      hi = prev;
      bracketed = true;
      break;
    }
    const double min_step = cur.t + 0.01 * (cur.t - prev.t);
    const double max_step = cur.t * 10;
    const double next = CubicInterpolate(prev.t, prev.f, prev.gtd, cur.t, cur.f,
                                         cur.gtd, min_step, max_step);
    prev = cur;
    cur = eval.At(next);
    consider(cur);
    ++iter;
  }
  if (!bracketed) return best;

  // Zoom. `lo` always holds the lower loss of the bracket ends.
  if (hi.f < lo.f) std::swap(lo, hi);
  bool insufficient_progress = false;
  while (!eval.exhausted()) {
    const double a = std::min(lo.t, hi.t), b = std::max(lo.t, hi.t);
    if ((b - a) * d_norm < kTolChange) break;
    double trial = CubicInterpolate(lo.t, lo.f, lo.gtd, hi.t, hi.f, hi.gtd, a, b);
    const double eps = 0.1 * (b - a);
    if (std::min(b - trial, trial - a) < eps) {
      if (insufficient_progress || trial >= b || trial <= a) {
        trial = std::abs(trial - b) < std::abs(trial - a) ? b - eps : a + eps;
        insufficient_progress = false;
      } else {
        insufficient_progress = true;
      }
    } else {
      insufficient_progress = false;
    }
    Point p = eval.At(trial);
    consider(p);
    if (p.f > start.f + c1 * p.t * start.gtd || p.f >= lo.f) {
      hi = p;
    } else {
      if (std::abs(p.gtd) <= -c2 * start.gtd) return p;
      if (p.gtd * (hi.t - lo.t) >= 0) hi = lo;
      lo = p;
    }
    if (hi.f < lo.f) std::swap(lo, hi);
  }
  return best.f < lo.f ? best : lo;
}

bool Armijo(const Point& p, const Point& start, double c1) {
  return p.t > 0 && p.f < start.f && p.f <= start.f + c1 * p.t * start.gtd;
}

}  // namespace

std::string OptimizerName(OptimizerKind kind) {
  return kind == OptimizerKind::kAdam ? "adam" : "lbfgs";
}

OptimizerKind OptimizerFromName(const std::string& name) {
  if (name == "lbfgs") return OptimizerKind::kLbfgs;
  if (name == "adam") return OptimizerKind::kAdam;
  throw std::invalid_argument("unknown optimizer \"" + name +
                              "\" (expected lbfgs or adam)");
}

OptimizerState OptimizerState::Adam(double lr) {
  OptimizerState s;
  s.kind = OptimizerKind::kAdam;
  s.lr = lr;
  return s;
}

OptimizerState OptimizerState::Lbfgs(double lr) {
  OptimizerState s;
  s.kind = OptimizerKind::kLbfgs;
  s.lr = lr;
  return s;
}

void OptimizerState::ResetHistory() {
  history.clear();
  cached_x.clear();
  cached_grad.clear();
  cached_loss = 0.0;
}

OptimizerState HalveLr(const OptimizerState& state) {
  if (!(state.lr > 0)) throw std::invalid_argument("learning rate must be positive");
  OptimizerState out = state;
  out.lr = state.lr / 2;
  return out;
}

AdamResult AdamStep(OptimizerState& state, const std::vector<Tensor>& vars,
                    const std::vector<Tensor>& grads) {
  CheckShapes(vars, grads);
  if (!(state.lr > 0)) throw std::invalid_argument("learning rate must be positive");
  const Vec g = Flatten(grads);
  if (!std::all_of(g.begin(), g.end(), [](double v) { return std::isfinite(v); })) {
    return {vars, true};
  }
  Vec x = Flatten(vars);
  if (state.m.size() != x.size()) {
    if (state.t != 0) {
      throw DimensionError("Adam moments sized for " + std::to_string(state.m.size()) +
                           " values, variables have " + std::to_string(x.size()));
    }
    state.m.assign(x.size(), 0.0);
    state.v.assign(x.size(), 0.0);
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1 - std::pow(state.beta1, t);
  const double bc2 = 1 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < x.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g[i];
    state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g[i] * g[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    x[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
  return {Unflatten(x, vars), false};
}

LbfgsResult LbfgsStep(OptimizerState& state, const std::vector<Tensor>& vars,
                      const Closure& closure) {
  if (!(state.lr > 0)) throw std::invalid_argument("learning rate must be positive");
  const Vec x = Flatten(vars);
  LbfgsResult result;
  Point start;
  if (state.cached_x == x && !state.cached_grad.empty()) {
    start.f = state.cached_loss;
    start.g = state.cached_grad;
  } else {
    Evaluation e = closure(vars);
    CheckShapes(vars, e.grads);
    ++result.evals;
    start.f = std::isfinite(e.loss) ? e.loss : std::numeric_limits<double>::infinity();
    start.g = Flatten(e.grads);
  }
  result.initial_loss = start.f;

  Vec cur_x = x;
  while (result.evals < state.max_evals) {
    const double g_max = MaxAbs(start.g);
    if (!std::isfinite(start.f) || !std::isfinite(g_max) || g_max <= state.grad_tolerance) break;

    // Two-loop recursion.
    Vec d(start.g.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = -start.g[i];
    if (!state.history.empty()) {
      std::vector<double> alpha(state.history.size());
      for (std::size_t k = state.history.size(); k-- > 0;) {
        const auto& [s, y] = state.history[k];
        alpha[k] = Dot(s, d) / Dot(y, s);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] -= alpha[k] * y[i];
      }
      const auto& [s_last, y_last] = state.history.back();
      const double gamma = Dot(s_last, y_last) / Dot(y_last, y_last);
      for (double& v : d) v *= gamma;
      for (std::size_t k = 0; k < state.history.size(); ++k) {
        const auto& [s, y] = state.history[k];
        const double beta = Dot(y, d) / Dot(y, s);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += (alpha[k] - beta) * s[i];
      }
    }
    start.gtd = Dot(start.g, d);
    if (!(start.gtd < 0) || !std::isfinite(start.gtd)) {
      state.history.clear();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = -start.g[i];
      start.gtd = Dot(start.g, d);
    }
    double g_l1 = 0.0;
    for (double v : start.g) g_l1 += std::abs(v);
    const double t0 = state.history.empty() ? std::min(1.0, 1.0 / g_l1) * state.lr
                                            : state.lr;

    const std::vector<Tensor> cur_vars = Unflatten(cur_x, vars);
    LineEvaluator eval(closure, cur_vars, cur_x, d, state.max_evals - result.evals);
    Point accepted = StrongWolfe(eval, start, t0, state.c1, state.c2, MaxAbs(d));
    if (!Armijo(accepted, start, state.c1) && !eval.exhausted()) {
      // Steepest descent with backtracking on the remaining budget.
      result.used_fallback = true;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = -start.g[i];
      Point sd_start = start;
      sd_start.gtd = Dot(start.g, d);
      double t = std::min(1.0, 1.0 / g_l1) * state.lr;
      while (!eval.exhausted()) {
        Point p = eval.At(t);
        if (Armijo(p, sd_start, state.c1)) {
          accepted = p;
          start.gtd = sd_start.gtd;
          break;
        }
        t /= 2;
      }
    }
    result.evals += eval.evals();
    if (!Armijo(accepted, start, state.c1)) break;

    Vec x_new = Along(cur_x, accepted.t, d);
    Vec s(x_new.size()), y(x_new.size());
    for (std::size_t i = 0; i < x_new.size(); ++i) {
      s[i] = x_new[i] - cur_x[i];
      y[i] = accepted.g[i] - start.g[i];
    }
    if (Dot(s, y) > state.curvature_eps) {
      state.history.emplace_back(std::move(s), std::move(y));
      while (state.history.size() > state.history_size) state.history.pop_front();
    }
    ++state.steps;
    ++result.iterations;
    cur_x = std::move(x_new);
    start.f = accepted.f;
    start.g = accepted.g;
  }

  result.no_progress = result.iterations == 0;
  state.cached_x = cur_x;
  state.cached_loss = start.f;
  state.cached_grad = start.g;
  result.vars = Unflatten(cur_x, vars);
  result.loss = start.f;
  result.grads = Unflatten(start.g, vars);
  return result;
}

}  // namespace gradleak
