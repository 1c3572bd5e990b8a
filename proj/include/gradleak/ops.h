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

// Differentiable primitives. Every op computes its value eagerly and, when
// any operand lives on a Tape, records itself so Grad() can run through it.
// Backward rules are written in terms of these same ops, which is what makes
// second-order gradients available.
//
// There is no implicit broadcasting; bias addition along axis 1 is the only
// exception.

#ifndef GRADLEAK_OPS_H_
#define GRADLEAK_OPS_H_

#include <cstddef>
#include <memory>
#include <vector>

#include "gradleak/tensor.h"

namespace gradleak {

struct Conv2dParams {
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;

  static Conv2dParams Uniform(std::size_t stride, std::size_t pad) {
    return {stride, stride, pad, pad};
  }
  bool operator==(const Conv2dParams&) const = default;
};

// Output spatial extent of a convolution along one axis.
std::size_t ConvOutputSize(std::size_t in, std::size_t kernel,
                           std::size_t stride, std::size_t pad);

// Elementwise.
Tensor Add(const Tensor& a, const Tensor& b);
Tensor Sub(const Tensor& a, const Tensor& b);
Tensor Mul(const Tensor& a, const Tensor& b);
Tensor Scale(const Tensor& x, double factor);
// factor * x + offset
Tensor Affine(const Tensor& x, double factor, double offset);
Tensor Exp(const Tensor& x);
Tensor Sigmoid(const Tensor& x);
Tensor Relu(const Tensor& x);

// Reductions to a one-element tensor of shape {1}.
Tensor Sum(const Tensor& x);
Tensor Mean(const Tensor& x);
Tensor SquaredNorm(const Tensor& x);

// op(a)[M×K] · op(b)[K×N], where op transposes its argument when the flag
// is set. Transposed operands are read in place.
Tensor MatMul(const Tensor& a, const Tensor& b, bool transpose_a = false,
              bool transpose_b = false);
Tensor Transpose(const Tensor& a);
// x[B×I], w[O×I], b[O] -> x·wᵀ + b
Tensor Linear(const Tensor& x, const Tensor& w, const Tensor& b);
// Adds bias[C] along axis 1 of x[B×C×...].
Tensor BiasAdd(const Tensor& x, const Tensor& bias);

// x[B×C×H×W] cross-correlated with k[F×C×Kh×Kw], zero padding.
Tensor Conv2d(const Tensor& x, const Tensor& k, const Conv2dParams& p);
// Adjoint of Conv2d with respect to its input (a transposed convolution).
Tensor Conv2dInputGrad(const Tensor& grad_out, const Tensor& k,
                       const Conv2dParams& p, const Shape& input_shape);
// Adjoint of Conv2d with respect to its kernel.
Tensor Conv2dWeightGrad(const Tensor& x, const Tensor& grad_out,
                        const Conv2dParams& p, const Shape& kernel_shape);

// Non-overlapping-or-strided max pooling over the last two axes.
Tensor MaxPool2d(const Tensor& x, std::size_t kernel, std::size_t stride);

Tensor Reshape(const Tensor& x, const Shape& shape);
// Keeps axis 0, collapses the rest.
Tensor Flatten(const Tensor& x);

// Row-wise over x[B×C].
Tensor LogSoftmax(const Tensor& logits);
Tensor Softmax(const Tensor& logits);

// Mean over the batch of -log softmax(logits)[label].
Tensor SoftmaxCrossEntropy(const Tensor& logits, std::size_t label);
// Soft-label form: `target` is a B×C probability table (may be on the tape).
Tensor SoftmaxCrossEntropy(const Tensor& logits, const Tensor& target);

// Shared index table used by pooling and its adjoints.
using IndexTable = std::shared_ptr<const std::vector<std::size_t>>;

namespace internal {
// out[i] = x[index[i]]
Tensor Gather(const Tensor& x, const IndexTable& index, const Shape& out_shape);
// out[index[i]] += x[i]
Tensor ScatterAdd(const Tensor& x, const IndexTable& index,
                  const Shape& out_shape);
// x[B×C×...] -> [C] summing all other axes.
Tensor ReduceToAxis1(const Tensor& x);
// bias[C] -> shape with bias along axis 1.
Tensor BroadcastAxis1(const Tensor& bias, const Shape& shape);
// x[B×C] -> [B]
Tensor SumRows(const Tensor& x);
// v[B] -> [B×C]
Tensor BroadcastRows(const Tensor& v, std::size_t cols);
// s[1] -> shape
Tensor BroadcastScalar(const Tensor& s, const Shape& shape);
}  // namespace internal

}  // namespace gradleak

#endif  // GRADLEAK_OPS_H_
