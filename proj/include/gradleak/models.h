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

// Classifier architectures attacked in the experiments and the frozen
// feature extractor placed in front of them.
//
// Shapes given to builders are per-sample; tensors passed to ForwardLoss
// carry a leading batch axis.

#ifndef GRADLEAK_MODELS_H_
#define GRADLEAK_MODELS_H_

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "gradleak/ops.h"
#include "gradleak/tensor.h"
#include "json.hpp"

namespace gradleak {

enum class LayerKind { kConv, kConv1d, kLinear, kActivation, kMaxPool, kFlatten, kReshape };
enum class Activation { kSigmoid, kRelu };

struct LayerSpec {
  LayerKind kind = LayerKind::kFlatten;
  // Parameter prefix for conv/linear layers ("conv1" -> "conv1.weight").
  std::string name;
  std::size_t units = 0;  // filters for conv, outputs for linear
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  Activation activation = Activation::kSigmoid;
  Shape target_shape;  // kReshape, per-sample
  bool frozen = false;
  // Seed of this layer's parameter stream; filled in by BuildModel.
  std::optional<std::uint64_t> init_seed;

  static LayerSpec Conv(std::string name, std::size_t filters,
                        std::size_t kernel, std::size_t stride,
                        std::size_t pad);
  // Convolution over a [C×L] signal.
  static LayerSpec Conv1d(std::string name, std::size_t filters,
                          std::size_t kernel, std::size_t stride,
                          std::size_t pad);
  static LayerSpec Linear(std::string name, std::size_t units);
  static LayerSpec Sigmoid();
  static LayerSpec Relu();
  static LayerSpec MaxPool(std::size_t kernel, std::size_t stride);
  static LayerSpec Flatten();
  static LayerSpec Reshape(Shape target);

  bool has_params() const {
    return kind == LayerKind::kConv || kind == LayerKind::kConv1d ||
           kind == LayerKind::kLinear;
  }
  std::string Describe() const;
};

nlohmann::json LayerToJson(const LayerSpec& layer);
LayerSpec LayerFromJson(const nlohmann::json& j);

struct Parameter {
  std::string name;
  Tensor value;
  bool frozen = false;
};

// Name -> tensor association used for parameter overrides and gradients.
using TensorMap = std::map<std::string, Tensor>;

class Model {
 public:
  const std::string& id() const { return id_; }
  std::uint64_t seed() const { return seed_; }
  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const { return layer_shapes_.back(); }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  // Per-sample shape after each layer; validated at build time.
  const std::vector<Shape>& layer_shapes() const { return layer_shapes_; }
  const std::vector<Parameter>& params() const { return params_; }

  const Parameter& param(const std::string& name) const;
  bool has_param(const std::string& name) const;
  std::vector<std::string> TrainableNames() const;
  std::size_t ParameterCount() const;
  std::size_t TrainableParameterCount() const;
  std::size_t num_classes() const { return NumElements(output_shape()); }

  // Same architecture with different parameter values; shapes must match.
  Model WithParams(const TensorMap& values) const;

 private:
  friend Model BuildModel(std::string id, Shape input_shape,
                          std::vector<LayerSpec> layers, std::uint64_t seed);
  std::string id_;
  std::uint64_t seed_ = 0;
  Shape input_shape_;
  std::vector<LayerSpec> layers_;
  std::vector<Shape> layer_shapes_;
  std::vector<Parameter> params_;
};

// Validates the layer stack by shape propagation and draws every parameter
// uniformly from [-0.5, 0.5] using a stream seeded per layer.
Model BuildModel(std::string id, Shape input_shape,
                 std::vector<LayerSpec> layers, std::uint64_t seed);

// conv(3→12,k5,s2,p2)+σ, conv(12→12,k5,s2,p2)+σ, conv(12→12,k5,s1,p2)+σ,
// flatten(768), linear(→classes).
Model BuildDlgLenet(std::size_t num_classes, std::uint64_t seed,
                    const Shape& input_shape = {3, 32, 32});

// LeNet-style network over a [channels×length] feature block:
// conv1d(→12,k5,s1,p2)+σ, conv1d(12→12,k5,s1,p2)+σ, flatten, linear.
Model BuildFeatureClassifier(const Shape& feature_shape, std::size_t num_classes,
                             std::uint64_t seed);

// flatten, linear(→classes).
Model BuildSimpleClassifier(const Shape& input_shape, std::size_t num_classes,
                            std::uint64_t seed);

// conv(→16,k3,s1,p1)+σ, conv(16→32,k3,s2,p1)+σ, flatten, linear(→128)+σ,
// linear(→classes). Inputs must be [C×H×W].
Model BuildModerateClassifier(const Shape& input_shape, std::size_t num_classes,
                              std::uint64_t seed);

// conv(3→12,k5,s2,p2)+σ, conv(12→12,k5,s2,p2)+σ, flatten,
// linear(→out_features)+σ. Every parameter is frozen.
Model BuildFrozenExtractor(const Shape& input_shape, std::size_t out_features,
                           std::uint64_t seed);

// `front` followed by a reshape to back.input_shape() and then `back`.
// Parameter names are prefixed; frozen flags are kept.
Model ChainModels(const Model& front, const Model& back, std::string id,
                  const std::string& front_prefix = "extractor.",
                  const std::string& back_prefix = "classifier.");

// {"id", "seed", "input_shape", "layers": [...]} plus, optionally,
// "params": {name: base64 FTEN}.
nlohmann::json ModelManifest(const Model& model, bool embed_params = false);
Model ModelFromManifest(const nlohmann::json& manifest);

// Class index or a [B×C] probability table.
using Label = std::variant<std::size_t, Tensor>;

struct ForwardResult {
  Tensor logits;
  Tensor loss;
};

// Runs the layers in order. Parameters are taken from `params` when present
// there, else from the model.
Tensor ForwardLogits(const Model& model, const Tensor& input,
                     const TensorMap* params = nullptr);
ForwardResult ForwardLoss(const Model& model, const Tensor& input,
                          const Label& label, const TensorMap* params = nullptr);

// Per-sample shape with a leading batch axis of 1.
Shape BatchOf(const Shape& sample_shape);

}  // namespace gradleak

#endif  // GRADLEAK_MODELS_H_
