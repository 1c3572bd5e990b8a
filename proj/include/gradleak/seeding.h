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

#ifndef GRADLEAK_SEEDING_H_
#define GRADLEAK_SEEDING_H_

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace gradleak {

// FNV-1a, 64-bit.
constexpr std::uint64_t Fnv1a64(std::string_view text,
                                std::uint64_t hash = 0xcbf29ce484222325ULL) {
  for (char c : text) {
    hash ^= static_cast<unsigned char>(c);
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

// SplitMix64 finalizer.
constexpr std::uint64_t MixSeed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stable seed for a labelled sub-stream of `master`.
inline std::uint64_t DeriveSeed(std::uint64_t master,
                                std::initializer_list<std::string_view> parts) {
  std::uint64_t h = MixSeed(master);
  for (std::string_view p : parts) {
    h = Fnv1a64(p, h);
    h = MixSeed(h ^ 0x2f);
  }
  return h;
}

// Uniform double in [0, 1) from the top 53 bits.
inline double UniformUnit(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace gradleak

#endif  // GRADLEAK_SEEDING_H_
