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

#ifndef GRADLEAK_SRC_TAPE_INTERNAL_H_
#define GRADLEAK_SRC_TAPE_INTERNAL_H_

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <vector>

#include "gradleak/ops.h"
#include "gradleak/tensor.h"

namespace gradleak {
namespace internal {

enum class OpKind {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAffine,
  kExp,
  kSigmoid,
  kRelu,
  kSum,
  kMatMul,
  kTranspose,
  kConv2d,
  kConv2dInputGrad,
  kConv2dWeightGrad,
  kReshape,
  kLogSoftmax,
  kGather,
  kScatterAdd,
  kReduceToAxis1,
  kBroadcastAxis1,
  kSumRows,
  kBroadcastRows,
  kBroadcastScalar,
};

struct OpAttrs {
  double factor = 0.0;
  double offset = 0.0;
  Conv2dParams conv;
  Shape shape;
  IndexTable index;
  std::size_t count = 0;
  bool transpose_a = false;
  bool transpose_b = false;
};

// Inputs and output are stored detached so the tape never owns itself.
struct Node {
  OpKind kind = OpKind::kLeaf;
  std::vector<std::int64_t> input_ids;  // -1 for constants
  std::vector<Tensor> inputs;
  Tensor output;
  OpAttrs attrs;
  bool released = false;
};

struct TapeState {
  std::vector<Node> nodes;
};

class TensorAccess {
 public:
  static const std::shared_ptr<TapeState>& tape(const Tensor& t) {
    return t.tape_;
  }
  static std::int64_t node(const Tensor& t) { return t.node_; }
  static Tensor Attach(const Tensor& value, std::shared_ptr<TapeState> tape,
                       std::int64_t node) {
    Tensor t = value.Detach();
    t.tape_ = std::move(tape);
    t.node_ = node;
    return t;
  }
};

// Builds an op result. Records a node when any input is on a tape.
Tensor MakeResult(OpKind kind, OpAttrs attrs,
                  std::initializer_list<const Tensor*> inputs, Shape shape,
                  std::vector<double> data);

// Gradients of a node's inputs given the gradient of its output. `inputs`
// and `output` are tape-attached when the backward pass is being recorded.
// Only entries with needs[i] set are computed; others are left empty.
std::vector<Tensor> Backward(const Node& node, const std::vector<Tensor>& inputs,
                             const Tensor& output, const Tensor& grad_out,
                             const std::vector<bool>& needs);

}  // namespace internal
}  // namespace gradleak

#endif  // GRADLEAK_SRC_TAPE_INTERNAL_H_
