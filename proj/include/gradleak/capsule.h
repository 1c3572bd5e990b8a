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

// Simulated collaborative training round. Participants publish per-sample
// gradient capsules; an observer only ever sees capsules.

#ifndef GRADLEAK_CAPSULE_H_
#define GRADLEAK_CAPSULE_H_

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradleak/models.h"
#include "gradleak/tensor.h"
#include "gradleak/tensor_io.h"
#include "json.hpp"

namespace gradleak {

// Gradient computation produced a value that must not be published.
class CapsuleRejected : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Participants in one round disagree on the shared model.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Gradients of one participant's loss on one sample at one epoch. Keys are
// exactly the trainable parameter names of the model. Holds no input values.
struct GradientCapsule {
  std::string model_id;
  std::string participant_id;
  std::uint64_t epoch = 0;
  std::optional<double> loss;
  Shape input_shape;  // per-sample
  TensorMap gradients;

  bool operator==(const GradientCapsule& other) const;
};

// Loss gradient for a single-sample batch. Model parameters are read only.
GradientCapsule ComputeSharedGradient(const Model& model, const Tensor& input,
                                      const Label& label, std::uint64_t epoch,
                                      const std::string& participant_id = "");

// "GCAP" | u32 version | str model_id | str participant_id | u64 epoch |
// u8 has_loss | f64 loss | u32 rank | u32 dims... | u32 count |
// count × (str name | u32 rank | u32 dims... | f64 values...).
// Strings are u32-length-prefixed; everything is little-endian.
Bytes SerializeCapsule(const GradientCapsule& capsule);
GradientCapsule DeserializeCapsule(std::span<const std::uint8_t> bytes);

// {"model_id", "participant_id", "epoch", "loss", "input_shape",
//  "gradients": {name: {"shape", "data"} | "FTEN:<base64>"}}.
// FTEN entries are single precision.
nlohmann::json CapsuleToJson(const GradientCapsule& capsule, bool ften = false);
GradientCapsule CapsuleFromJson(const nlohmann::json& j);

struct Sample {
  Tensor input;  // [1 × input_shape...]
  std::size_t label = 0;
};

// A data owner. The dataset is reachable only through capsule emission.
class Participant {
 public:
  Participant(std::string id, Model model, std::vector<Sample> dataset);

  const std::string& id() const { return id_; }
  const Model& model() const { return model_; }
  std::size_t dataset_size() const { return dataset_.size(); }

  // Capsule for the sample scheduled at `epoch` (index epoch mod size).
  GradientCapsule EmitCapsule(std::uint64_t epoch) const;

 private:
  std::string id_;
  Model model_;
  std::vector<Sample> dataset_;
};

// One capsule per participant, ordered by participant id.
std::vector<GradientCapsule> RunRound(const std::vector<Participant>& participants,
                                      std::uint64_t epoch);

}  // namespace gradleak

#endif  // GRADLEAK_CAPSULE_H_
