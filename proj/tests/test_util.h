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

// Test-only oracles. Nothing here calls into the differentiation engine.

#ifndef GRADLEAK_TESTS_TEST_UTIL_H_
#define GRADLEAK_TESTS_TEST_UTIL_H_

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "gradleak/tensor.h"

namespace gradleak::testing {

inline Tensor RandomTensor(const Shape& shape, std::mt19937_64& rng,
                           double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(NumElements(shape));
  for (double& x : v) x = dist(rng);
  return Tensor(shape, std::move(v));
}

// Central differences of a scalar function of one tensor.
inline std::vector<double> CentralDifference(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, double h = 1e-5) {
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(x);
    x[i] = saved - h;
    const double down = f(x);
    x[i] = saved;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

inline double Norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// ‖a − b‖ / max(‖a‖, ‖b‖), zero when both vanish.
inline double RelativeError(const std::vector<double>& a,
                            const std::vector<double>& b) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double scale = std::max(Norm(a), Norm(b));
  return scale == 0.0 ? 0.0 : Norm(d) / scale;
}

inline double MaxAbsDiff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace gradleak::testing

#endif  // GRADLEAK_TESTS_TEST_UTIL_H_
