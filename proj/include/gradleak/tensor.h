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

#ifndef GRADLEAK_TENSOR_H_
#define GRADLEAK_TENSOR_H_

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gradleak {

using Shape = std::vector<std::size_t>;

std::size_t NumElements(const Shape& shape);
std::string ShapeToString(const Shape& shape);

// Raised when operand shapes are incompatible. The message names the shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Misuse of the differentiation tape (mixed tapes, replay of a released
// graph, non-scalar outputs).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace internal {
struct TapeState;
class TensorAccess;
}  // namespace internal

// Dense row-major tensor of doubles. Values are immutable and shared between
// copies; a tensor that lives on a Tape additionally carries the index of the
// node that produced it.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor Zeros(const Shape& shape);
  static Tensor Full(const Shape& shape, double value);
  static Tensor Scalar(double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_->size(); }
  std::span<const double> data() const { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  // Value of a single-element tensor.
  double item() const;

  std::vector<double> ToVector() const { return *data_; }

  bool requires_grad() const { return tape_ != nullptr; }
  // Same values, no tape membership.
  Tensor Detach() const;

  bool SameValues(const Tensor& other) const;

 private:
  friend class Tape;
  friend struct internal::TapeState;
  friend class internal::TensorAccess;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  std::shared_ptr<internal::TapeState> tape_;
  std::int64_t node_ = -1;
};

// Append-only record of differentiable operations. Tensors created through
// Variable() and every op result depending on them are recorded here; Grad()
// walks the record in reverse.
class Tape {
 public:
  Tape();

  // Registers `value` as a differentiable leaf.
  Tensor Variable(const Tensor& value);

  // Number of recorded nodes.
  std::size_t size() const;

 private:
  std::shared_ptr<internal::TapeState> state_;
};

struct GradOptions {
  // Record the backward pass so the returned gradients are differentiable.
  bool create_graph = false;
  // Keep saved values for another backward pass. Defaults to create_graph.
  std::optional<bool> retain_graph;
};

// Reverse-mode gradients of a single-element `output` with respect to each
// tensor in `wrt`. A wrt tensor that `output` does not depend on gets a zero
// gradient of its own shape.
std::vector<Tensor> Grad(const Tensor& output, std::span<const Tensor> wrt,
                         GradOptions options = {});
std::vector<Tensor> Grad(const Tensor& output, std::span<const Tensor> wrt,
                         bool create_graph);

}  // namespace gradleak

#endif  // GRADLEAK_TENSOR_H_
