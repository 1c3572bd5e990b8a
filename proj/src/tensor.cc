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

#include "gradleak/tensor.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <utility>

#include "tape_internal.h"

namespace gradleak {

std::size_t NumElements(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string ShapeToString(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor() : Tensor(Shape{1}, std::vector<double>{0.0}) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)) {
  for (std::size_t d : shape_) {
    if (d == 0) {
      throw DimensionError("tensor dimensions must be positive, got " +
                           ShapeToString(shape_));
    }
  }
  if (NumElements(shape_) != data.size()) {
    throw DimensionError("shape " + ShapeToString(shape_) + " needs " +
                         std::to_string(NumElements(shape_)) +
                         " values, got " + std::to_string(data.size()));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::Zeros(const Shape& shape) { return Full(shape, 0.0); }

Tensor Tensor::Full(const Shape& shape, double value) {
  return Tensor(shape, std::vector<double>(NumElements(shape), value));
}

Tensor Tensor::Scalar(double value) { return Tensor({1}, {value}); }

double Tensor::item() const {
  if (size() != 1) {
    throw DimensionError("item() on tensor of shape " + ShapeToString(shape_));
  }
  return (*data_)[0];
}

Tensor Tensor::Detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

bool Tensor::SameValues(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  return std::memcmp(data_->data(), other.data_->data(),
                     data_->size() * sizeof(double)) == 0;
}

Tape::Tape() : state_(std::make_shared<internal::TapeState>()) {}

Tensor Tape::Variable(const Tensor& value) {
  internal::Node node;
  node.kind = internal::OpKind::kLeaf;
  node.output = value.Detach();
  state_->nodes.push_back(std::move(node));
  return internal::TensorAccess::Attach(
      value, state_, static_cast<std::int64_t>(state_->nodes.size()) - 1);
}

std::size_t Tape::size() const { return state_->nodes.size(); }

namespace internal {

Tensor MakeResult(OpKind kind, OpAttrs attrs,
                  std::initializer_list<const Tensor*> inputs, Shape shape,
                  std::vector<double> data) {
  Tensor value(std::move(shape), std::move(data));
  std::shared_ptr<TapeState> tape;
  for (const Tensor* in : inputs) {
    const auto& t = TensorAccess::tape(*in);
    if (!t) continue;
    if (tape && tape != t) {
      throw TapeError("operands belong to different tapes");
    }
    tape = t;
  }
#ifndef NDEBUG
  bool finite_inputs = true;
  for (const Tensor* in : inputs) {
    for (double v : in->data()) finite_inputs = finite_inputs && std::isfinite(v);
  }
  if (finite_inputs) {
    for (double v : value.data()) {
      if (!std::isfinite(v)) {
        throw std::runtime_error("non-finite value produced from finite inputs");
      }
    }
  }
#endif
  if (!tape) return value;

  Node node;
  node.kind = kind;
  node.attrs = std::move(attrs);
  for (const Tensor* in : inputs) {
    node.input_ids.push_back(TensorAccess::tape(*in) ? TensorAccess::node(*in)
                                                     : -1);
    node.inputs.push_back(in->Detach());
  }
  node.output = value;
  tape->nodes.push_back(std::move(node));
  return TensorAccess::Attach(value, tape,
                              static_cast<std::int64_t>(tape->nodes.size()) - 1);
}

}  // namespace internal

std::vector<Tensor> Grad(const Tensor& output, std::span<const Tensor> wrt,
                         bool create_graph) {
  return Grad(output, wrt, GradOptions{.create_graph = create_graph, .retain_graph = std::nullopt});
}

std::vector<Tensor> Grad(const Tensor& output, std::span<const Tensor> wrt,
                         GradOptions options) {
  using internal::Node;
  using internal::TensorAccess;

  if (output.size() != 1) {
    throw TapeError("Grad needs a single-element output, got shape " +
                    ShapeToString(output.shape()));
  }
  const bool retain = options.retain_graph.value_or(options.create_graph);

  std::vector<Tensor> result;
  result.reserve(wrt.size());
  const auto& tape = TensorAccess::tape(output);
  if (!tape) {
    for (const Tensor& w : wrt) result.push_back(Tensor::Zeros(w.shape()));
    return result;
  }

  const auto out_id = static_cast<std::size_t>(TensorAccess::node(output));
  const std::size_t n = out_id + 1;

  // depends[i]: node i is a wrt tensor or has one upstream.
  std::vector<bool> depends(n, false);
  std::vector<bool> is_wrt(n, false);
  for (const Tensor& w : wrt) {
    if (TensorAccess::tape(w) == tape &&
        static_cast<std::size_t>(TensorAccess::node(w)) < n) {
      depends[TensorAccess::node(w)] = true;
      is_wrt[TensorAccess::node(w)] = true;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (depends[i]) continue;
    for (std::int64_t id : tape->nodes[i].input_ids) {
      if (id >= 0 && depends[id]) {
        depends[i] = true;
        break;
      }
    }
  }

  std::vector<std::optional<Tensor>> adjoint(n);
  adjoint[out_id] = Tensor::Full(output.shape(), 1.0);
  std::vector<std::size_t> visited;

  for (std::size_t i = n; i-- > 0;) {
    if (!adjoint[i] || !depends[i]) continue;
    // Copy: recording the backward pass appends to tape->nodes.
    const Node node = tape->nodes[i];
    if (node.kind == internal::OpKind::kLeaf) continue;
    if (node.released) {
      throw TapeError(
          "backward through a graph whose saved values were released; "
          "request retain_graph on the first pass");
    }
    visited.push_back(i);

    std::vector<bool> needs(node.inputs.size());
    bool any = false;
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      needs[j] = node.input_ids[j] >= 0 && depends[node.input_ids[j]];
      any = any || needs[j];
    }
    if (!any) continue;

    std::vector<Tensor> inputs;
    Tensor out_value;
    Tensor grad_out;
    if (options.create_graph) {
      for (std::size_t j = 0; j < node.inputs.size(); ++j) {
        inputs.push_back(node.input_ids[j] >= 0
                             ? TensorAccess::Attach(node.inputs[j], tape,
                                                    node.input_ids[j])
                             : node.inputs[j]);
      }
      out_value = TensorAccess::Attach(node.output, tape,
                                       static_cast<std::int64_t>(i));
      grad_out = *adjoint[i];
    } else {
      inputs = node.inputs;
      out_value = node.output;
      grad_out = adjoint[i]->Detach();
    }

    std::vector<Tensor> grads =
        internal::Backward(node, inputs, out_value, grad_out, needs);
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      if (!needs[j]) continue;
      auto& slot = adjoint[node.input_ids[j]];
      slot = slot ? Add(*slot, grads[j]) : grads[j];
    }
    if (!is_wrt[i]) adjoint[i].reset();
  }

  for (const Tensor& w : wrt) {
    const bool on_tape = TensorAccess::tape(w) == tape &&
                         static_cast<std::size_t>(TensorAccess::node(w)) < n;
    if (on_tape && adjoint[TensorAccess::node(w)]) {
      const Tensor& g = *adjoint[TensorAccess::node(w)];
      result.push_back(options.create_graph ? g : g.Detach());
    } else {
      result.push_back(Tensor::Zeros(w.shape()));
    }
  }

  if (!retain) {
    for (std::size_t i : visited) {
      Node& node = tape->nodes[i];
      node.released = true;
      node.inputs.clear();
      node.output = Tensor();
    }
  }
  return result;
}

}  // namespace gradleak
