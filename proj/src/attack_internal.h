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

#ifndef GRADLEAK_SRC_ATTACK_INTERNAL_H_
#define GRADLEAK_SRC_ATTACK_INTERNAL_H_

#include <cstddef>

#include "gradleak/capsule.h"
#include "gradleak/models.h"

namespace gradleak::internal {

// Throws ProtocolError unless the capsule's id, input shape and gradient
// keys and shapes match the model's trainable parameters.
void CheckCapsuleMatchesModel(const GradientCapsule& capsule, const Model& model);

// Index of the final layer, which must be linear.
std::size_t LastLinearLayer(const Model& model);

}  // namespace gradleak::internal

#endif  // GRADLEAK_SRC_ATTACK_INTERNAL_H_
