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

#include "gradleak/ops.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include <Eigen/Core>

#include "tape_internal.h"

namespace gradleak {

using internal::MakeResult;
using internal::OpAttrs;
using internal::OpKind;

namespace {

void CheckSameShape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         ShapeToString(a.shape()) + " vs " +
                         ShapeToString(b.shape()));
  }
}

void CheckRank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got shape " +
                         ShapeToString(t.shape()));
  }
}

template <typename F>
std::vector<double> Map(const Tensor& x, F f) {
  std::vector<double> out(x.size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return out;
}

template <typename F>
std::vector<double> Zip(const Tensor& a, const Tensor& b, F f) {
  std::vector<double> out(a.size());
  const auto x = a.data();
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
  return out;
}

using RowMajorMap =
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstRowMajorMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

double StableSigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

// Output indices o along one axis for which o*stride + tap - pad lands in
// [0, in). Returned as a half-open range.
std::pair<std::size_t, std::size_t> ValidRange(std::size_t tap, std::size_t pad,
                                               std::size_t stride,
                                               std::size_t in,
                                               std::size_t out) {
  std::size_t lo = 0;
  if (tap < pad) lo = (pad - tap + stride - 1) / stride;
  if (in + pad <= tap) return {0, 0};
  const std::size_t hi_incl = (in - 1 + pad - tap) / stride;
  const std::size_t hi = std::min(out, hi_incl + 1);
  return {std::min(lo, hi), hi};
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t filters, kh, kw;
  std::size_t out_h, out_w;
};

ConvGeometry MakeGeometry(const Shape& x, const Shape& k,
                          const Conv2dParams& p) {
  if (x.size() != 4 || k.size() != 4) {
    throw DimensionError("conv2d: expected 4-D input and kernel, got " +
                         ShapeToString(x) + " and " + ShapeToString(k));
  }
  if (x[1] != k[1]) {
    throw DimensionError("conv2d: input channels " + ShapeToString(x) +
                         " do not match kernel " + ShapeToString(k));
  }
  if (p.stride_h == 0 || p.stride_w == 0) {
    throw DimensionError("conv2d: stride must be >= 1");
  }
  if (x[2] + 2 * p.pad_h < k[2] || x[3] + 2 * p.pad_w < k[3]) {
    throw DimensionError("conv2d: kernel " + ShapeToString(k) +
                         " larger than padded input " + ShapeToString(x));
  }
  return {x[0],
          x[1],
          x[2],
          x[3],
          k[0],
          k[2],
          k[3],
          ConvOutputSize(x[2], k[2], p.stride_h, p.pad_h),
          ConvOutputSize(x[3], k[3], p.stride_w, p.pad_w)};
}

// Visits every kernel tap of a convolution one output row at a time.
// `body(x_start, o_start, k_index, count)`: `count` output columns starting
// at o_start read the input at x_start, x_start + stride_w, ...
template <typename Body>
void ForEachTap(const ConvGeometry& g, const Conv2dParams& p, Body body) {
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t f = 0; f < g.filters; ++f) {
      for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
          const auto [oy_lo, oy_hi] =
              ValidRange(ki, p.pad_h, p.stride_h, g.height, g.out_h);
          for (std::size_t kj = 0; kj < g.kw; ++kj) {
            const auto [ox_lo, ox_hi] =
                ValidRange(kj, p.pad_w, p.stride_w, g.width, g.out_w);
            if (ox_lo >= ox_hi) continue;
            const std::size_t k_index = ((f * g.channels + c) * g.kh + ki) * g.kw + kj;
            for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
              const std::size_t iy = oy * p.stride_h + ki - p.pad_h;
              const std::size_t x_row =
                  ((b * g.channels + c) * g.height + iy) * g.width;
              const std::size_t o_row =
                  ((b * g.filters + f) * g.out_h + oy) * g.out_w;
              body(x_row + ox_lo * p.stride_w + kj - p.pad_w, o_row + ox_lo,
                   k_index, ox_hi - ox_lo);
            }
          }
        }
      }
    }
  }
}

}  // namespace

std::size_t ConvOutputSize(std::size_t in, std::size_t kernel,
                           std::size_t stride, std::size_t pad) {
  if (stride == 0 || in + 2 * pad < kernel) {
    throw DimensionError("conv: kernel " + std::to_string(kernel) +
                         " does not fit input " + std::to_string(in) +
                         " with pad " + std::to_string(pad));
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

Tensor Add(const Tensor& a, const Tensor& b) {
  CheckSameShape("add", a, b);
  return MakeResult(OpKind::kAdd, {}, {&a, &b}, a.shape(),
                    Zip(a, b, [](double x, double y) { return x + y; }));
}

Tensor Sub(const Tensor& a, const Tensor& b) {
  CheckSameShape("sub", a, b);
  return MakeResult(OpKind::kSub, {}, {&a, &b}, a.shape(),
                    Zip(a, b, [](double x, double y) { return x - y; }));
}

Tensor Mul(const Tensor& a, const Tensor& b) {
  CheckSameShape("mul", a, b);
  return MakeResult(OpKind::kMul, {}, {&a, &b}, a.shape(),
                    Zip(a, b, [](double x, double y) { return x * y; }));
}

Tensor Scale(const Tensor& x, double factor) {
  OpAttrs attrs;
  attrs.factor = factor;
  return MakeResult(OpKind::kScale, std::move(attrs), {&x}, x.shape(),
                    Map(x, [factor](double v) { return factor * v; }));
}

Tensor Affine(const Tensor& x, double factor, double offset) {
  OpAttrs attrs;
  attrs.factor = factor;
  attrs.offset = offset;
  return MakeResult(
      OpKind::kAffine, std::move(attrs), {&x}, x.shape(),
      Map(x, [factor, offset](double v) { return factor * v + offset; }));
}

Tensor Exp(const Tensor& x) {
  return MakeResult(OpKind::kExp, {}, {&x}, x.shape(),
                    Map(x, [](double v) { return std::exp(v); }));
}

Tensor Sigmoid(const Tensor& x) {
  return MakeResult(OpKind::kSigmoid, {}, {&x}, x.shape(),
                    Map(x, StableSigmoid));
}

Tensor Relu(const Tensor& x) {
  return MakeResult(OpKind::kRelu, {}, {&x}, x.shape(),
                    Map(x, [](double v) { return v > 0 ? v : 0.0; }));
}

Tensor Sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return MakeResult(OpKind::kSum, {}, {&x}, {1}, {total});
}

Tensor Mean(const Tensor& x) {
  return Scale(Sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor SquaredNorm(const Tensor& x) { return Sum(Mul(x, x)); }

Tensor MatMul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  CheckRank("matmul", a, 2);
  CheckRank("matmul", b, 2);
  const std::size_t m = transpose_a ? a.dim(1) : a.dim(0);
  const std::size_t k = transpose_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (kb != k) {
    throw DimensionError("matmul: inner dimensions disagree " +
                         ShapeToString(a.shape()) + (transpose_a ? "ᵀ" : "") + " · " +
                         ShapeToString(b.shape()) + (transpose_b ? "ᵀ" : ""));
  }
  std::vector<double> out(m * n, 0.0);
  RowMajorMap c(out.data(), m, n);
  const ConstRowMajorMap am(a.data().data(), a.dim(0), a.dim(1));
  const ConstRowMajorMap bm(b.data().data(), b.dim(0), b.dim(1));
  if (!transpose_a && !transpose_b) {
    c.noalias() = am * bm;
  } else if (!transpose_a) {
    c.noalias() = am * bm.transpose();
  } else if (!transpose_b) {
    c.noalias() = am.transpose() * bm;
  } else {
    c.noalias() = am.transpose() * bm.transpose();
  }
  OpAttrs attrs;
  attrs.transpose_a = transpose_a;
  attrs.transpose_b = transpose_b;
  return MakeResult(OpKind::kMatMul, std::move(attrs), {&a, &b}, {m, n}, std::move(out));
}

Tensor Transpose(const Tensor& a) {
  CheckRank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto x = a.data();
  // Tiled so both sides stay in cache for large weight matrices.
  constexpr std::size_t kTile = 32;
  for (std::size_t i0 = 0; i0 < m; i0 += kTile) {
    const std::size_t i1 = std::min(m, i0 + kTile);
    for (std::size_t j0 = 0; j0 < n; j0 += kTile) {
      const std::size_t j1 = std::min(n, j0 + kTile);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) out[j * m + i] = x[i * n + j];
      }
    }
  }
  return MakeResult(OpKind::kTranspose, {}, {&a}, {n, m}, std::move(out));
}

Tensor Linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  CheckRank("linear", x, 2);
  CheckRank("linear", w, 2);
  CheckRank("linear", b, 1);
  if (x.dim(1) != w.dim(1) || b.dim(0) != w.dim(0)) {
    throw DimensionError("linear: incompatible shapes x " +
                         ShapeToString(x.shape()) + ", w " +
                         ShapeToString(w.shape()) + ", b " +
                         ShapeToString(b.shape()));
  }
  return BiasAdd(MatMul(x, w, false, true), b);
}

Tensor BiasAdd(const Tensor& x, const Tensor& bias) {
  return Add(x, internal::BroadcastAxis1(bias, x.shape()));
}

Tensor Conv2d(const Tensor& x, const Tensor& k, const Conv2dParams& p) {
  const ConvGeometry g = MakeGeometry(x.shape(), k.shape(), p);
  std::vector<double> out(g.batch * g.filters * g.out_h * g.out_w, 0.0);
  const double* xd = x.data().data();
  const double* kd = k.data().data();
  const std::size_t sw = p.stride_w;
  ForEachTap(g, p, [&](std::size_t xs, std::size_t os, std::size_t ki,
                       std::size_t count) {
    const double w = kd[ki];
    const double* src = xd + xs;
    double* dst = out.data() + os;
    for (std::size_t i = 0; i < count; ++i) dst[i] += w * src[i * sw];
  });
  OpAttrs attrs;
  attrs.conv = p;
  return MakeResult(OpKind::kConv2d, std::move(attrs), {&x, &k},
                    {g.batch, g.filters, g.out_h, g.out_w}, std::move(out));
}

Tensor Conv2dInputGrad(const Tensor& grad_out, const Tensor& k,
                       const Conv2dParams& p, const Shape& input_shape) {
  const ConvGeometry g = MakeGeometry(input_shape, k.shape(), p);
  const Shape expected{g.batch, g.filters, g.out_h, g.out_w};
  if (grad_out.shape() != expected) {
    throw DimensionError("conv2d input grad: got " +
                         ShapeToString(grad_out.shape()) + ", expected " +
                         ShapeToString(expected));
  }
  std::vector<double> out(NumElements(input_shape), 0.0);
  const double* gd = grad_out.data().data();
  const double* kd = k.data().data();
  const std::size_t sw = p.stride_w;
  ForEachTap(g, p, [&](std::size_t xs, std::size_t os, std::size_t ki,
                       std::size_t count) {
    const double w = kd[ki];
    double* dst = out.data() + xs;
    const double* src = gd + os;
    for (std::size_t i = 0; i < count; ++i) dst[i * sw] += w * src[i];
  });
  OpAttrs attrs;
  attrs.conv = p;
  attrs.shape = input_shape;
  return MakeResult(OpKind::kConv2dInputGrad, std::move(attrs),
                    {&grad_out, &k}, input_shape, std::move(out));
}

Tensor Conv2dWeightGrad(const Tensor& x, const Tensor& grad_out,
                        const Conv2dParams& p, const Shape& kernel_shape) {
  const ConvGeometry g = MakeGeometry(x.shape(), kernel_shape, p);
  const Shape expected{g.batch, g.filters, g.out_h, g.out_w};
  if (grad_out.shape() != expected) {
    throw DimensionError("conv2d weight grad: got " +
                         ShapeToString(grad_out.shape()) + ", expected " +
                         ShapeToString(expected));
  }
  std::vector<double> out(NumElements(kernel_shape), 0.0);
  const double* xd = x.data().data();
  const double* gd = grad_out.data().data();
  const std::size_t sw = p.stride_w;
  ForEachTap(g, p, [&](std::size_t xs, std::size_t os, std::size_t ki,
                       std::size_t count) {
    const double* src = xd + xs;
    const double* gr = gd + os;
    double acc = 0.0;
    for (std::size_t i = 0; i < count; ++i) acc += gr[i] * src[i * sw];
    out[ki] += acc;
  });
  OpAttrs attrs;
  attrs.conv = p;
  attrs.shape = kernel_shape;
  return MakeResult(OpKind::kConv2dWeightGrad, std::move(attrs),
                    {&x, &grad_out}, kernel_shape, std::move(out));
}

Tensor MaxPool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  CheckRank("maxpool2d", x, 4);
  if (kernel == 0 || stride == 0) {
    throw DimensionError("maxpool2d: kernel and stride must be >= 1");
  }
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2), w = x.dim(3);
  const std::size_t oh = ConvOutputSize(h, kernel, stride, 0);
  const std::size_t ow = ConvOutputSize(w, kernel, stride, 0);
  auto index = std::make_shared<std::vector<std::size_t>>(planes * oh * ow);
  const auto xd = x.data();
  std::size_t o = 0;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (pl * h + oy * stride) * w + ox * stride;
        for (std::size_t i = 0; i < kernel; ++i) {
          for (std::size_t j = 0; j < kernel; ++j) {
            const std::size_t at = (pl * h + oy * stride + i) * w + ox * stride + j;
            if (xd[at] > xd[best]) best = at;
          }
        }
        (*index)[o++] = best;
      }
    }
  }
  return internal::Gather(x, index, {x.dim(0), x.dim(1), oh, ow});
}

Tensor Reshape(const Tensor& x, const Shape& shape) {
  if (NumElements(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + ShapeToString(x.shape()) +
                         " as " + ShapeToString(shape));
  }
  OpAttrs attrs;
  attrs.shape = shape;
  return MakeResult(OpKind::kReshape, std::move(attrs), {&x}, shape,
                    x.ToVector());
}

Tensor Flatten(const Tensor& x) {
  return Reshape(x, {x.dim(0), x.size() / x.dim(0)});
}

Tensor LogSoftmax(const Tensor& logits) {
  CheckRank("log_softmax", logits, 2);
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  const auto z = logits.data();
  std::vector<double> out(z.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = z.data() + r * cols;
    const double peak = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(row[c] - peak);
    const double lse = peak + std::log(total);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = row[c] - lse;
  }
  return MakeResult(OpKind::kLogSoftmax, {}, {&logits}, logits.shape(),
                    std::move(out));
}

Tensor Softmax(const Tensor& logits) { return Exp(LogSoftmax(logits)); }

Tensor SoftmaxCrossEntropy(const Tensor& logits, std::size_t label) {
  CheckRank("softmax_cross_entropy", logits, 2);
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (cols < 2) {
    throw DimensionError("softmax_cross_entropy: need at least 2 classes");
  }
  if (label >= cols) {
    throw IndexError("softmax_cross_entropy: label " + std::to_string(label) +
                     " out of range for " + std::to_string(cols) + " classes");
  }
  std::vector<double> onehot(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) onehot[r * cols + label] = 1.0;
  return SoftmaxCrossEntropy(logits, Tensor(logits.shape(), std::move(onehot)));
}

Tensor SoftmaxCrossEntropy(const Tensor& logits, const Tensor& target) {
  CheckRank("softmax_cross_entropy", logits, 2);
  CheckSameShape("softmax_cross_entropy", logits, target);
  if (logits.dim(1) < 2) {
    throw DimensionError("softmax_cross_entropy: need at least 2 classes");
  }
  return Scale(Sum(Mul(target, LogSoftmax(logits))),
               -1.0 / static_cast<double>(logits.dim(0)));
}

namespace internal {

Tensor Gather(const Tensor& x, const IndexTable& index, const Shape& out_shape) {
  if (index->size() != NumElements(out_shape)) {
    throw DimensionError("gather: index table does not match output " +
                         ShapeToString(out_shape));
  }
  const auto xd = x.data();
  std::vector<double> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[(*index)[i]];
  OpAttrs attrs;
  attrs.index = index;
  attrs.shape = out_shape;
  return MakeResult(OpKind::kGather, std::move(attrs), {&x}, out_shape,
                    std::move(out));
}

Tensor ScatterAdd(const Tensor& x, const IndexTable& index,
                  const Shape& out_shape) {
  if (index->size() != x.size()) {
    throw DimensionError("scatter_add: index table does not match input " +
                         ShapeToString(x.shape()));
  }
  const auto xd = x.data();
  std::vector<double> out(NumElements(out_shape), 0.0);
  for (std::size_t i = 0; i < xd.size(); ++i) out[(*index)[i]] += xd[i];
  OpAttrs attrs;
  attrs.index = index;
  attrs.shape = out_shape;
  return MakeResult(OpKind::kScatterAdd, std::move(attrs), {&x}, out_shape,
                    std::move(out));
}

Tensor ReduceToAxis1(const Tensor& x) {
  if (x.rank() < 2) {
    throw DimensionError("reduce_to_axis1: rank < 2 for " +
                         ShapeToString(x.shape()));
  }
  const std::size_t outer = x.dim(0), channels = x.dim(1);
  const std::size_t inner = x.size() / (outer * channels);
  const auto xd = x.data();
  std::vector<double> out(channels, 0.0);
  for (std::size_t b = 0; b < outer; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const double* p = xd.data() + (b * channels + c) * inner;
      double acc = 0.0;
      for (std::size_t i = 0; i < inner; ++i) acc += p[i];
      out[c] += acc;
    }
  }
  return MakeResult(OpKind::kReduceToAxis1, {}, {&x}, {channels},
                    std::move(out));
}

Tensor BroadcastAxis1(const Tensor& bias, const Shape& shape) {
  if (bias.rank() != 1 || shape.size() < 2 || shape[1] != bias.dim(0)) {
    throw DimensionError("bias of shape " + ShapeToString(bias.shape()) +
                         " cannot be added along axis 1 of " +
                         ShapeToString(shape));
  }
  const std::size_t outer = shape[0], channels = shape[1];
  const std::size_t inner = NumElements(shape) / (outer * channels);
  const auto bd = bias.data();
  std::vector<double> out(NumElements(shape));
  for (std::size_t b = 0; b < outer; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      std::fill_n(out.begin() + (b * channels + c) * inner, inner, bd[c]);
    }
  }
  OpAttrs attrs;
  attrs.shape = shape;
  return MakeResult(OpKind::kBroadcastAxis1, std::move(attrs), {&bias}, shape,
                    std::move(out));
}

Tensor SumRows(const Tensor& x) {
  CheckRank("sum_rows", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const auto xd = x.data();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r] += xd[r * cols + c];
  }
  return MakeResult(OpKind::kSumRows, {}, {&x}, {rows}, std::move(out));
}

Tensor BroadcastRows(const Tensor& v, std::size_t cols) {
  CheckRank("broadcast_rows", v, 1);
  const std::size_t rows = v.dim(0);
  const auto vd = v.data();
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    std::fill_n(out.begin() + r * cols, cols, vd[r]);
  }
  OpAttrs attrs;
  attrs.count = cols;
  return MakeResult(OpKind::kBroadcastRows, std::move(attrs), {&v},
                    {rows, cols}, std::move(out));
}

Tensor BroadcastScalar(const Tensor& s, const Shape& shape) {
  OpAttrs attrs;
  attrs.shape = shape;
  return MakeResult(OpKind::kBroadcastScalar, std::move(attrs), {&s}, shape,
                    std::vector<double>(NumElements(shape), s.item()));
}

std::vector<Tensor> Backward(const Node& node, const std::vector<Tensor>& in,
                             const Tensor& out, const Tensor& g,
                             const std::vector<bool>& needs) {
  std::vector<Tensor> grads(in.size());
  const OpAttrs& a = node.attrs;
  switch (node.kind) {
    case OpKind::kLeaf:
      break;
    case OpKind::kAdd:
      if (needs[0]) grads[0] = g;
      if (needs[1]) grads[1] = g;
      break;
    case OpKind::kSub:
      if (needs[0]) grads[0] = g;
      if (needs[1]) grads[1] = Scale(g, -1.0);
      break;
    case OpKind::kMul:
      if (needs[0]) grads[0] = Mul(g, in[1]);
      if (needs[1]) grads[1] = Mul(g, in[0]);
      break;
    case OpKind::kScale:
    case OpKind::kAffine:
      grads[0] = Scale(g, a.factor);
      break;
    case OpKind::kExp:
      grads[0] = Mul(g, out);
      break;
    case OpKind::kSigmoid:
      grads[0] = Mul(g, Mul(out, Affine(out, -1.0, 1.0)));
      break;
    case OpKind::kRelu: {
      std::vector<double> mask(in[0].size());
      const auto x = in[0].data();
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = x[i] > 0 ? 1.0 : 0.0;
      grads[0] = Mul(g, Tensor(in[0].shape(), std::move(mask)));
      break;
    }
    case OpKind::kSum:
      grads[0] = BroadcastScalar(g, in[0].shape());
      break;
    case OpKind::kMatMul:
      // C = op(A)·op(B); each case reads the transposes in place.
      if (!a.transpose_a && !a.transpose_b) {
        if (needs[0]) grads[0] = MatMul(g, in[1], false, true);
        if (needs[1]) grads[1] = MatMul(in[0], g, true, false);
      } else if (!a.transpose_a) {
        if (needs[0]) grads[0] = MatMul(g, in[1]);
        if (needs[1]) grads[1] = MatMul(g, in[0], true, false);
      } else if (!a.transpose_b) {
        if (needs[0]) grads[0] = MatMul(in[1], g, false, true);
        if (needs[1]) grads[1] = MatMul(in[0], g);
      } else {
        if (needs[0]) grads[0] = MatMul(in[1], g, true, true);
        if (needs[1]) grads[1] = MatMul(g, in[0], true, true);
      }
      break;
    case OpKind::kTranspose:
      grads[0] = Transpose(g);
      break;
    case OpKind::kConv2d:
      if (needs[0]) grads[0] = Conv2dInputGrad(g, in[1], a.conv, in[0].shape());
      if (needs[1]) grads[1] = Conv2dWeightGrad(in[0], g, a.conv, in[1].shape());
      break;
    case OpKind::kConv2dInputGrad:
      if (needs[0]) grads[0] = Conv2d(g, in[1], a.conv);
      if (needs[1]) grads[1] = Conv2dWeightGrad(g, in[0], a.conv, in[1].shape());
      break;
    case OpKind::kConv2dWeightGrad:
      if (needs[0]) grads[0] = Conv2dInputGrad(in[1], g, a.conv, in[0].shape());
      if (needs[1]) grads[1] = Conv2d(in[0], g, a.conv);
      break;
    case OpKind::kReshape:
      grads[0] = Reshape(g, in[0].shape());
      break;
    case OpKind::kLogSoftmax:
      grads[0] = Sub(g, Mul(Exp(out), BroadcastRows(SumRows(g), g.dim(1))));
      break;
    case OpKind::kGather:
      grads[0] = ScatterAdd(g, a.index, in[0].shape());
      break;
    case OpKind::kScatterAdd:
      grads[0] = Gather(g, a.index, in[0].shape());
      break;
    case OpKind::kReduceToAxis1:
      grads[0] = BroadcastAxis1(g, in[0].shape());
      break;
    case OpKind::kBroadcastAxis1:
      grads[0] = ReduceToAxis1(g);
      break;
    case OpKind::kSumRows:
      grads[0] = BroadcastRows(g, in[0].dim(1));
      break;
    case OpKind::kBroadcastRows:
      grads[0] = SumRows(g);
      break;
    case OpKind::kBroadcastScalar:
      grads[0] = Sum(g);
      break;
  }
  return grads;
}

}  // namespace internal
}  // namespace gradleak
