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

#include "gradleak/capsule.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <utility>

namespace gradleak {

namespace {

constexpr std::uint32_t kCapsuleVersion = 1;
constexpr char kFtenPrefix[] = "FTEN:";

bool AllFinite(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(),
                     [](double v) { return std::isfinite(v); });
}

void WriteShape(ByteWriter& w, const Shape& shape) {
  w.U32(static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) w.U32(static_cast<std::uint32_t>(d));
}

Shape ReadShape(ByteReader& r) {
  const std::uint32_t rank = r.U32();
  if (rank > 16) throw ParseError("implausible rank", r.offset() - 4);
  Shape shape(rank);
  for (std::size_t& d : shape) {
    d = r.U32();
    if (d == 0) throw ParseError("zero dimension", r.offset() - 4);
  }
  return shape;
}

}  // namespace

bool GradientCapsule::operator==(const GradientCapsule& other) const {
  if (model_id != other.model_id || participant_id != other.participant_id ||
      epoch != other.epoch || input_shape != other.input_shape ||
      loss.has_value() != other.loss.has_value() ||
      gradients.size() != other.gradients.size()) {
    return false;
  }
  if (loss && std::bit_cast<std::uint64_t>(*loss) !=
                  std::bit_cast<std::uint64_t>(*other.loss)) {
    return false;
  }
  for (const auto& [name, g] : gradients) {
    auto it = other.gradients.find(name);
    if (it == other.gradients.end() || it->second.shape() != g.shape() ||
        !it->second.SameValues(g)) {
      return false;
    }
  }
  return true;
}

GradientCapsule ComputeSharedGradient(const Model& model, const Tensor& input,
                                      const Label& label, std::uint64_t epoch,
                                      const std::string& participant_id) {
  if (input.rank() == 0 || input.dim(0) != 1) {
    throw DimensionError("shared gradients are per sample; got input " +
                         ShapeToString(input.shape()));
  }
  if (!AllFinite(input)) {
    throw CapsuleRejected("input for participant '" + participant_id +
                          "' contains non-finite values");
  }
  Tape tape;
  TensorMap params;
  std::vector<std::string> names = model.TrainableNames();
  std::vector<Tensor> wrt;
  for (const std::string& name : names) {
    wrt.push_back(tape.Variable(model.param(name).value));
    params[name] = wrt.back();
  }
  ForwardResult r = ForwardLoss(model, input.Detach(), label, &params);
  const double loss = r.loss.item();
  if (!std::isfinite(loss)) {
    throw CapsuleRejected("non-finite loss " + std::to_string(loss) +
                          " on model '" + model.id() + "'");
  }
  std::vector<Tensor> grads = Grad(r.loss, wrt);
  GradientCapsule c;
  c.model_id = model.id();
  c.participant_id = participant_id;
  c.epoch = epoch;
  c.loss = loss;
  c.input_shape = model.input_shape();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!AllFinite(grads[i])) {
      throw CapsuleRejected("non-finite gradient for '" + names[i] + "'");
    }
    c.gradients[names[i]] = grads[i];
  }
  return c;
}

Bytes SerializeCapsule(const GradientCapsule& capsule) {
  ByteWriter w;
  w.Raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("GCAP"), 4));
  w.U32(kCapsuleVersion);
  w.Str(capsule.model_id);
  w.Str(capsule.participant_id);
  w.U64(capsule.epoch);
  w.U8(capsule.loss.has_value() ? 1 : 0);
  w.F64(capsule.loss.value_or(0.0));
  WriteShape(w, capsule.input_shape);
  w.U32(static_cast<std::uint32_t>(capsule.gradients.size()));
  for (const auto& [name, g] : capsule.gradients) {
    w.Str(name);
    WriteShape(w, g.shape());
    for (double v : g.data()) w.F64(v);
  }
  return w.Take();
}

GradientCapsule DeserializeCapsule(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.Magic("GCAP");
  const std::size_t version_at = r.offset();
  if (r.U32() != kCapsuleVersion) {
    throw ParseError("unsupported capsule version", version_at);
  }
  GradientCapsule c;
  c.model_id = r.Str();
  c.participant_id = r.Str();
  c.epoch = r.U64();
  const std::size_t flag_at = r.offset();
  const std::uint8_t has_loss = r.U8();
  if (has_loss > 1) throw ParseError("bad loss flag", flag_at);
  const double loss = r.F64();
  if (has_loss) c.loss = loss;
  c.input_shape = ReadShape(r);
  const std::uint32_t count = r.U32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t name_at = r.offset();
    std::string name = r.Str();
    Shape shape = ReadShape(r);
    const std::size_t n = NumElements(shape);
    if ((bytes.size() - r.offset()) / 8 < n) {
      throw ParseError("truncated gradient '" + name + "'", r.offset());
    }
    std::vector<double> data(n);
    for (double& v : data) v = r.F64();
    if (!c.gradients.emplace(name, Tensor(std::move(shape), std::move(data))).second) {
      throw ParseError("duplicate gradient '" + name + "'", name_at);
    }
  }
  if (!r.done()) throw ParseError("trailing bytes after capsule", r.offset());
  return c;
}

nlohmann::json CapsuleToJson(const GradientCapsule& capsule, bool ften) {
  nlohmann::json grads = nlohmann::json::object();
  for (const auto& [name, g] : capsule.gradients) {
    grads[name] = ften ? nlohmann::json(kFtenPrefix + Base64Encode(EncodeFten(g)))
                       : TensorToJson(g);
  }
  return {{"model_id", capsule.model_id},
          {"participant_id", capsule.participant_id},
          {"epoch", capsule.epoch},
          {"loss", capsule.loss ? nlohmann::json(*capsule.loss) : nlohmann::json()},
          {"input_shape", capsule.input_shape},
          {"gradients", std::move(grads)}};
}

GradientCapsule CapsuleFromJson(const nlohmann::json& j) {
  GradientCapsule c;
  try {
    c.model_id = j.at("model_id").get<std::string>();
    c.participant_id = j.value("participant_id", "");
    c.epoch = j.at("epoch").get<std::uint64_t>();
    if (j.contains("loss") && !j.at("loss").is_null()) {
      c.loss = j.at("loss").get<double>();
    }
    c.input_shape = j.at("input_shape").get<Shape>();
    for (const auto& [name, g] : j.at("gradients").items()) {
      if (g.is_string()) {
        const std::string s = g.get<std::string>();
        if (s.rfind(kFtenPrefix, 0) != 0) {
          throw ParseError("gradient '" + name + "' is neither FTEN nor a tensor", 0);
        }
        c.gradients[name] = DecodeFten(Base64Decode(s.substr(5)));
      } else {
        c.gradients[name] = TensorFromJson(g);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("capsule JSON: ") + e.what(), 0);
  }
  return c;
}

Participant::Participant(std::string id, Model model, std::vector<Sample> dataset)
    : id_(std::move(id)), model_(std::move(model)), dataset_(std::move(dataset)) {
  if (dataset_.empty()) {
    throw std::invalid_argument("participant '" + id_ + "' has no samples");
  }
}

GradientCapsule Participant::EmitCapsule(std::uint64_t epoch) const {
  const Sample& s = dataset_[epoch % dataset_.size()];
  return ComputeSharedGradient(model_, s.input, s.label, epoch, id_);
}

std::vector<GradientCapsule> RunRound(const std::vector<Participant>& participants,
                                      std::uint64_t epoch) {
  std::vector<const Participant*> order;
  for (const Participant& p : participants) {
    if (p.model().id() != participants.front().model().id()) {
      throw ProtocolError("participant '" + p.id() + "' uses model '" +
                          p.model().id() + "', round uses '" +
                          participants.front().model().id() + "'");
    }
    order.push_back(&p);
  }
  std::sort(order.begin(), order.end(),
            [](const Participant* a, const Participant* b) { return a->id() < b->id(); });
  std::vector<GradientCapsule> capsules;
  for (const Participant* p : order) capsules.push_back(p->EmitCapsule(epoch));
  return capsules;
}

}  // namespace gradleak
