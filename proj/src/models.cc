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

#include "gradleak/models.h"

#include <algorithm>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <utility>

#include "gradleak/seeding.h"
#include "gradleak/tensor_io.h"

namespace gradleak {

namespace {

const char* KindName(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv:
      return "conv";
    case LayerKind::kConv1d:
      return "conv1d";
    case LayerKind::kLinear:
      return "linear";
    case LayerKind::kActivation:
      return "activation";
    case LayerKind::kMaxPool:
      return "maxpool";
    case LayerKind::kFlatten:
      return "flatten";
    case LayerKind::kReshape:
      return "reshape";
  }
  return "?";
}

LayerKind KindFromName(const std::string& name) {
  for (LayerKind k : {LayerKind::kConv, LayerKind::kConv1d, LayerKind::kLinear,
                      LayerKind::kActivation, LayerKind::kMaxPool,
                      LayerKind::kFlatten, LayerKind::kReshape}) {
    if (name == KindName(k)) return k;
  }
  throw ParseError("unknown layer kind \"" + name + "\"", 0);
}

// Shapes of the weight and bias tensors of a parametrized layer.
std::pair<Shape, Shape> ParamShapes(const LayerSpec& layer, const Shape& in) {
  switch (layer.kind) {
    case LayerKind::kConv:
      return {{layer.units, in[0], layer.kernel, layer.kernel}, {layer.units}};
    case LayerKind::kConv1d:
      return {{layer.units, in[0], layer.kernel}, {layer.units}};
    case LayerKind::kLinear:
      return {{layer.units, in[0]}, {layer.units}};
    default:
      return {};
  }
}

Shape PropagateShape(const LayerSpec& layer, const Shape& in) {
  auto require_rank = [&](std::size_t rank) {
    if (in.size() != rank) {
      throw DimensionError("layer " + layer.Describe() + " expects rank-" +
                           std::to_string(rank) + " input, got " +
                           ShapeToString(in));
    }
  };
  switch (layer.kind) {
    case LayerKind::kConv:
      require_rank(3);
      return {layer.units,
              ConvOutputSize(in[1], layer.kernel, layer.stride, layer.pad),
              ConvOutputSize(in[2], layer.kernel, layer.stride, layer.pad)};
    case LayerKind::kConv1d:
      require_rank(2);
      return {layer.units,
              ConvOutputSize(in[1], layer.kernel, layer.stride, layer.pad)};
    case LayerKind::kLinear:
      require_rank(1);
      return {layer.units};
    case LayerKind::kActivation:
      return in;
    case LayerKind::kMaxPool:
      require_rank(3);
      return {in[0], ConvOutputSize(in[1], layer.kernel, layer.stride, 0),
              ConvOutputSize(in[2], layer.kernel, layer.stride, 0)};
    case LayerKind::kFlatten:
      return {NumElements(in)};
    case LayerKind::kReshape:
      if (NumElements(layer.target_shape) != NumElements(in)) {
        throw DimensionError("layer " + layer.Describe() + " cannot reshape " +
                             ShapeToString(in));
      }
      return layer.target_shape;
  }
  return in;
}

Tensor UniformParam(const Shape& shape, std::mt19937_64& rng) {
  std::vector<double> v(NumElements(shape));
  for (double& x : v) x = UniformUnit(rng) - 0.5;
  return Tensor(shape, std::move(v));
}

Tensor ApplyLayer(const LayerSpec& layer, const Tensor& x,
                  const std::function<const Tensor&(const std::string&)>& get) {
  const std::size_t batch = x.dim(0);
  switch (layer.kind) {
    case LayerKind::kConv:
      return BiasAdd(Conv2d(x, get(layer.name + ".weight"),
                            Conv2dParams::Uniform(layer.stride, layer.pad)),
                     get(layer.name + ".bias"));
    case LayerKind::kConv1d: {
      const Tensor& w = get(layer.name + ".weight");
      Tensor x4 = Reshape(x, {batch, x.dim(1), 1, x.dim(2)});
      Tensor w4 = Reshape(w, {w.dim(0), w.dim(1), 1, w.dim(2)});
      Tensor y = Conv2d(x4, w4, Conv2dParams{1, layer.stride, 0, layer.pad});
      return BiasAdd(Reshape(y, {batch, y.dim(1), y.dim(3)}),
                     get(layer.name + ".bias"));
    }
    case LayerKind::kLinear:
      return Linear(x, get(layer.name + ".weight"), get(layer.name + ".bias"));
    case LayerKind::kActivation:
      return layer.activation == Activation::kSigmoid ? Sigmoid(x) : Relu(x);
    case LayerKind::kMaxPool:
      return MaxPool2d(x, layer.kernel, layer.stride);
    case LayerKind::kFlatten:
      return Flatten(x);
    case LayerKind::kReshape: {
      Shape s = layer.target_shape;
      s.insert(s.begin(), batch);
      return Reshape(x, s);
    }
  }
  return x;
}

}  // namespace

LayerSpec LayerSpec::Conv(std::string name, std::size_t filters,
                          std::size_t kernel, std::size_t stride,
                          std::size_t pad) {
  LayerSpec l;
  l.kind = LayerKind::kConv;
  l.name = std::move(name);
  l.units = filters;
  l.kernel = kernel;
  l.stride = stride;
  l.pad = pad;
  return l;
}

LayerSpec LayerSpec::Conv1d(std::string name, std::size_t filters,
                            std::size_t kernel, std::size_t stride,
                            std::size_t pad) {
  LayerSpec l = Conv(std::move(name), filters, kernel, stride, pad);
  l.kind = LayerKind::kConv1d;
  return l;
}

LayerSpec LayerSpec::Linear(std::string name, std::size_t units) {
  LayerSpec l;
  l.kind = LayerKind::kLinear;
  l.name = std::move(name);
  l.units = units;
  return l;
}

LayerSpec LayerSpec::Sigmoid() {
  LayerSpec l;
  l.kind = LayerKind::kActivation;
  l.activation = Activation::kSigmoid;
  return l;
}

LayerSpec LayerSpec::Relu() {
  LayerSpec l = Sigmoid();
  l.activation = Activation::kRelu;
  return l;
}

LayerSpec LayerSpec::MaxPool(std::size_t kernel, std::size_t stride) {
  LayerSpec l;
  l.kind = LayerKind::kMaxPool;
  l.kernel = kernel;
  l.stride = stride;
  return l;
}

LayerSpec LayerSpec::Flatten() { return LayerSpec{}; }

LayerSpec LayerSpec::Reshape(Shape target) {
  LayerSpec l;
  l.kind = LayerKind::kReshape;
  l.target_shape = std::move(target);
  return l;
}

std::string LayerSpec::Describe() const {
  std::ostringstream out;
  out << KindName(kind);
  if (!name.empty()) out << " '" << name << "'";
  switch (kind) {
    case LayerKind::kConv:
    case LayerKind::kConv1d:
      out << "(" << units << ", k" << kernel << ", s" << stride << ", p" << pad
          << ")";
      break;
    case LayerKind::kLinear:
      out << "(" << units << ")";
      break;
    case LayerKind::kActivation:
      out << (activation == Activation::kSigmoid ? "(sigmoid)" : "(relu)");
      break;
    case LayerKind::kMaxPool:
      out << "(k" << kernel << ", s" << stride << ")";
      break;
    case LayerKind::kReshape:
      out << ShapeToString(target_shape);
      break;
    case LayerKind::kFlatten:
      break;
  }
  return out.str();
}

nlohmann::json LayerToJson(const LayerSpec& layer) {
  nlohmann::json j = {{"kind", KindName(layer.kind)}};
  if (!layer.name.empty()) j["name"] = layer.name;
  switch (layer.kind) {
    case LayerKind::kConv:
    case LayerKind::kConv1d:
      j["units"] = layer.units;
      j["kernel"] = layer.kernel;
      j["stride"] = layer.stride;
      j["pad"] = layer.pad;
      break;
    case LayerKind::kLinear:
      j["units"] = layer.units;
      break;
    case LayerKind::kActivation:
      j["activation"] = layer.activation == Activation::kSigmoid ? "sigmoid" : "relu";
      break;
    case LayerKind::kMaxPool:
      j["kernel"] = layer.kernel;
      j["stride"] = layer.stride;
      break;
    case LayerKind::kReshape:
      j["shape"] = layer.target_shape;
      break;
    case LayerKind::kFlatten:
      break;
  }
  if (layer.frozen) j["frozen"] = true;
  if (layer.init_seed) j["init_seed"] = *layer.init_seed;
  return j;
}

LayerSpec LayerFromJson(const nlohmann::json& j) {
  try {
    LayerSpec l;
    l.kind = KindFromName(j.at("kind").get<std::string>());
    l.name = j.value("name", "");
    l.units = j.value("units", std::size_t{0});
    l.kernel = j.value("kernel", std::size_t{0});
    l.stride = j.value("stride", std::size_t{1});
    l.pad = j.value("pad", std::size_t{0});
    if (j.contains("activation")) {
      const auto a = j.at("activation").get<std::string>();
      if (a != "sigmoid" && a != "relu") {
        throw ParseError("unknown activation \"" + a + "\"", 0);
      }
      l.activation = a == "sigmoid" ? Activation::kSigmoid : Activation::kRelu;
    }
    if (j.contains("shape")) l.target_shape = j.at("shape").get<Shape>();
    l.frozen = j.value("frozen", false);
    if (j.contains("init_seed")) l.init_seed = j.at("init_seed").get<std::uint64_t>();
    return l;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("layer JSON: ") + e.what(), 0);
  }
}

const Parameter& Model::param(const std::string& name) const {
  for (const Parameter& p : params_) {
    if (p.name == name) return p;
  }
  throw IndexError("model '" + id_ + "' has no parameter '" + name + "'");
}

bool Model::has_param(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(),
                     [&](const Parameter& p) { return p.name == name; });
}

std::vector<std::string> Model::TrainableNames() const {
  std::vector<std::string> names;
  for (const Parameter& p : params_) {
    if (!p.frozen) names.push_back(p.name);
  }
  return names;
}

std::size_t Model::ParameterCount() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.value.size();
  return n;
}

std::size_t Model::TrainableParameterCount() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) {
    if (!p.frozen) n += p.value.size();
  }
  return n;
}

Model Model::WithParams(const TensorMap& values) const {
  Model m = *this;
  for (Parameter& p : m.params_) {
    auto it = values.find(p.name);
    if (it == values.end()) continue;
    if (it->second.shape() != p.value.shape()) {
      throw DimensionError("parameter '" + p.name + "' expects " +
                           ShapeToString(p.value.shape()) + ", got " +
                           ShapeToString(it->second.shape()));
    }
    p.value = it->second.Detach();
  }
  return m;
}

Model BuildModel(std::string id, Shape input_shape,
                 std::vector<LayerSpec> layers, std::uint64_t seed) {
  Model m;
  m.id_ = std::move(id);
  m.seed_ = seed;
  m.input_shape_ = input_shape;
  std::set<std::string> names;
  Shape shape = input_shape;
  for (LayerSpec& layer : layers) {
    if (layer.has_params()) {
      if (layer.name.empty() || !names.insert(layer.name).second) {
        throw DimensionError("layer " + layer.Describe() +
                             " needs a unique non-empty name");
      }
      if (!layer.init_seed) layer.init_seed = DeriveSeed(seed, {layer.name});
    }
    const Shape in = shape;
    shape = PropagateShape(layer, in);
    m.layer_shapes_.push_back(shape);
    if (layer.has_params()) {
      const auto [w_shape, b_shape] = ParamShapes(layer, in);
      std::mt19937_64 rng(*layer.init_seed);
      m.params_.push_back({layer.name + ".weight", UniformParam(w_shape, rng),
                           layer.frozen});
      m.params_.push_back({layer.name + ".bias", UniformParam(b_shape, rng),
                           layer.frozen});
    }
  }
  if (layers.empty()) m.layer_shapes_.push_back(input_shape);
  m.layers_ = std::move(layers);
  return m;
}

Model BuildDlgLenet(std::size_t num_classes, std::uint64_t seed,
                    const Shape& input_shape) {
  if (num_classes < 2) throw DimensionError("dlg_lenet needs >= 2 classes");
  return BuildModel("dlg_lenet", input_shape,
                    {LayerSpec::Conv("conv1", 12, 5, 2, 2), LayerSpec::Sigmoid(),
                     LayerSpec::Conv("conv2", 12, 5, 2, 2), LayerSpec::Sigmoid(),
                     LayerSpec::Conv("conv3", 12, 5, 1, 2), LayerSpec::Sigmoid(),
                     LayerSpec::Flatten(), LayerSpec::Linear("fc", num_classes)},
                    seed);
}

Model BuildFeatureClassifier(const Shape& feature_shape, std::size_t num_classes,
                             std::uint64_t seed) {
  if (num_classes < 2) throw DimensionError("feature classifier needs >= 2 classes");
  return BuildModel(
      "feature_classifier", feature_shape,
      {LayerSpec::Conv1d("conv1", 12, 5, 1, 2), LayerSpec::Sigmoid(),
       LayerSpec::Conv1d("conv2", 12, 5, 1, 2), LayerSpec::Sigmoid(),
       LayerSpec::Flatten(), LayerSpec::Linear("fc", num_classes)},
      seed);
}

Model BuildSimpleClassifier(const Shape& input_shape, std::size_t num_classes,
                            std::uint64_t seed) {
  if (num_classes < 2) throw DimensionError("simple classifier needs >= 2 classes");
  return BuildModel("simple", input_shape,
                    {LayerSpec::Flatten(), LayerSpec::Linear("fc", num_classes)},
                    seed);
}

Model BuildModerateClassifier(const Shape& input_shape, std::size_t num_classes,
                              std::uint64_t seed) {
  if (num_classes < 2) throw DimensionError("moderate classifier needs >= 2 classes");
  return BuildModel("moderate", input_shape,
                    {LayerSpec::Conv("conv1", 16, 3, 1, 1), LayerSpec::Sigmoid(),
                     LayerSpec::Conv("conv2", 32, 3, 2, 1), LayerSpec::Sigmoid(),
                     LayerSpec::Flatten(), LayerSpec::Linear("fc1", 128),
                     LayerSpec::Sigmoid(), LayerSpec::Linear("fc2", num_classes)},
                    seed);
}

Model BuildFrozenExtractor(const Shape& input_shape, std::size_t out_features,
                           std::uint64_t seed) {
  if (out_features < 1) throw DimensionError("extractor needs >= 1 output feature");
  std::vector<LayerSpec> layers = {
      LayerSpec::Conv("conv1", 12, 5, 2, 2), LayerSpec::Sigmoid(),
      LayerSpec::Conv("conv2", 12, 5, 2, 2), LayerSpec::Sigmoid(),
      LayerSpec::Flatten(), LayerSpec::Linear("fc", out_features),
      LayerSpec::Sigmoid()};
  for (LayerSpec& l : layers) l.frozen = true;
  return BuildModel("frozen_extractor", input_shape, std::move(layers), seed);
}

Model ChainModels(const Model& front, const Model& back, std::string id,
                  const std::string& front_prefix,
                  const std::string& back_prefix) {
  std::vector<LayerSpec> layers;
  TensorMap values;
  auto take = [&](const Model& m, const std::string& prefix) {
    for (LayerSpec l : m.layers()) {
      if (l.has_params()) {
        values[prefix + l.name + ".weight"] = m.param(l.name + ".weight").value;
        values[prefix + l.name + ".bias"] = m.param(l.name + ".bias").value;
        l.name = prefix + l.name;
      }
      layers.push_back(std::move(l));
    }
  };
  take(front, front_prefix);
  layers.push_back(LayerSpec::Reshape(back.input_shape()));
  take(back, back_prefix);
  Model chained = BuildModel(std::move(id), front.input_shape(),
                             std::move(layers), back.seed());
  return chained.WithParams(values);
}

nlohmann::json ModelManifest(const Model& model, bool embed_params) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerSpec& l : model.layers()) layers.push_back(LayerToJson(l));
  nlohmann::json j = {{"id", model.id()},
                      {"seed", model.seed()},
                      {"input_shape", model.input_shape()},
                      {"layers", std::move(layers)}};
  if (embed_params) {
    nlohmann::json params = nlohmann::json::object();
    for (const Parameter& p : model.params()) {
      params[p.name] = Base64Encode(EncodeFten(p.value));
    }
    j["params"] = std::move(params);
  }
  return j;
}

Model ModelFromManifest(const nlohmann::json& manifest) {
  std::vector<LayerSpec> layers;
  std::string id;
  std::uint64_t seed = 0;
  Shape input;
  try {
    for (const auto& l : manifest.at("layers")) layers.push_back(LayerFromJson(l));
    id = manifest.at("id").get<std::string>();
    seed = manifest.at("seed").get<std::uint64_t>();
    input = manifest.at("input_shape").get<Shape>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model manifest: ") + e.what(), 0);
  }
  Model m = BuildModel(id, input, std::move(layers), seed);
  if (manifest.contains("params")) {
    TensorMap values;
    for (const auto& [name, blob] : manifest.at("params").items()) {
      values[name] = DecodeFten(Base64Decode(blob.get<std::string>()));
    }
    m = m.WithParams(values);
  }
  return m;
}

Shape BatchOf(const Shape& sample_shape) {
  Shape s = sample_shape;
  s.insert(s.begin(), 1);
  return s;
}

Tensor ForwardLogits(const Model& model, const Tensor& input,
                     const TensorMap* params) {
  Shape expected = model.input_shape();
  if (input.rank() != expected.size() + 1 ||
      !std::equal(expected.begin(), expected.end(), input.shape().begin() + 1)) {
    throw DimensionError("model '" + model.id() + "' input layer expects [B, " +
                         ShapeToString(expected).substr(1) + ", got " +
                         ShapeToString(input.shape()));
  }
  auto get = [&](const std::string& name) -> const Tensor& {
    if (params) {
      auto it = params->find(name);
      if (it != params->end()) return it->second;
    }
    return model.param(name).value;
  };
  Tensor x = input;
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    const LayerSpec& layer = model.layers()[i];
    try {
      x = ApplyLayer(layer, x, get);
    } catch (const DimensionError& e) {
      throw DimensionError("layer " + std::to_string(i) + " " +
                           layer.Describe() + ": " + e.what());
    }
  }
  return x;
}

ForwardResult ForwardLoss(const Model& model, const Tensor& input,
                          const Label& label, const TensorMap* params) {
  Tensor logits = ForwardLogits(model, input, params);
  if (logits.rank() != 2) {
    throw DimensionError("model '" + model.id() +
                         "' does not end in a logit vector: " +
                         ShapeToString(logits.shape()));
  }
  Tensor loss = std::visit(
      [&](const auto& l) { return SoftmaxCrossEntropy(logits, l); }, label);
  return {std::move(logits), std::move(loss)};
}

}  // namespace gradleak
