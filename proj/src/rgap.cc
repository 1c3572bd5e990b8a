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

// Layer-wise closed-form reconstruction.
//
// For a parametrized layer z = A(x) + b with known weights, known output z and
// known output gradient g = ∂L/∂z, the input x satisfies two linear systems:
// the forward map A x = z − b, and the weight gradient ∇W = G_g(x), which is
// linear in x. Both are stacked and solved in the least-squares sense. The
// last layer has unknown z, so only its gradient block is used, with
// g = ∇b. Walking backwards, z of the previous layer is the inverted
// activation of the recovered x, and its g follows by backpropagation.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>

#include "attack_internal.h"
#include "gradleak/attacks.h"
#include "gradleak/ops.h"
#include "gradleak/tensor_io.h"

namespace gradleak {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Vec = std::vector<double>;

// Pivots below this fraction of the largest pivot count as zero.
constexpr double kRankTolerance = 1e-10;
// Dense QR is used up to these sizes; larger conv systems go to CGLS.
constexpr std::size_t kDenseMaxUnknowns = 2048;
constexpr double kDenseMaxEntries = 1.6e7;

double Norm(const Vec& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

Eigen::Map<const MatrixXd> AsMatrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  // Row-major storage seen as the transpose of a column-major matrix.
  return Eigen::Map<const MatrixXd>(t.data().data(), static_cast<Eigen::Index>(cols),
                                    static_cast<Eigen::Index>(rows));
}

struct LayerSolve {
  Vec x;
  LayerRank rank;
};

// z = W x + b with W[O×I]; gradient block gz ⊗ I_I · x = vec(∇W).
LayerSolve SolveLinear(const std::string& name, const Tensor& w, const Tensor& b,
                       const Vec* z, const Vec& gz, const Tensor* gw) {
  const std::size_t out = w.dim(0), in = w.dim(1);
  const MatrixXd W = AsMatrix(w, out, in).transpose();
  const VectorXd g = Eigen::Map<const VectorXd>(gz.data(), static_cast<Eigen::Index>(out));
  const double a = gw ? g.squaredNorm() : 0.0;

  LayerSolve s;
  s.rank.layer = name;
  s.rank.unknowns = in;
  s.rank.equations = (z ? out : 0) + (gw ? out * in : 0);
  VectorXd x;
  VectorXd r;
  if (z) {
    r = Eigen::Map<const VectorXd>(z->data(), static_cast<Eigen::Index>(out)) -
        Eigen::Map<const VectorXd>(b.data().data(), static_cast<Eigen::Index>(out));
  }
  const MatrixXd GW = gw ? MatrixXd(AsMatrix(*gw, out, in).transpose()) : MatrixXd();

  if (!z) {
    // Gradient block only: every row of ∇W is gz[i]·xᵀ.
    if (a == 0.0) {
      throw RgapError("output gradient of layer '" + name + "' is zero; unsolvable");
    }
    x = GW.transpose() * g / a;
    s.rank.rank = in;
    s.rank.method = "closed_form";
  } else {
    double top = 0.0;
    if (out <= in) {
      top = Eigen::SelfAdjointEigenSolver<MatrixXd>(W * W.transpose(),
                                                    Eigen::EigenvaluesOnly)
                .eigenvalues()
                .maxCoeff();
    } else {
      top = Eigen::SelfAdjointEigenSolver<MatrixXd>(W.transpose() * W,
                                                    Eigen::EigenvaluesOnly)
                .eigenvalues()
                .maxCoeff();
    }
    // The stacked matrix has singular values √(λ(WᵀW) + a) ≥ √a.
    if (a > 0 && std::sqrt(a) > kRankTolerance * std::sqrt(std::max(top, 0.0) + a)) {
      const VectorXd rhs = W.transpose() * r + GW.transpose() * g;
      if (in <= out) {
        MatrixXd normal = W.transpose() * W;
        normal.diagonal().array() += a;
        x = normal.llt().solve(rhs);
      } else {
        // (aI + WᵀW)⁻¹ = (I − Wᵀ(aI + WWᵀ)⁻¹W) / a
        MatrixXd inner = W * W.transpose();
        inner.diagonal().array() += a;
        x = (rhs - W.transpose() * inner.llt().solve(W * rhs)) / a;
      }
      s.rank.rank = in;
      s.rank.method = "closed_form";
    } else {
      Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod;
      cod.setThreshold(kRankTolerance);
      cod.compute(W);
      x = cod.solve(r);
      s.rank.rank = static_cast<std::size_t>(cod.rank());
      s.rank.method = "qr";
    }
  }
  s.rank.deficient = *s.rank.rank < in;
  double res2 = 0.0, rhs2 = 0.0;
  if (z) {
    res2 += (W * x - r).squaredNorm();
    rhs2 += r.squaredNorm();
  }
  if (gw) {
    res2 += (g * x.transpose() - GW).squaredNorm();
    rhs2 += GW.squaredNorm();
  }
  s.rank.residual = rhs2 > 0 ? std::sqrt(res2 / rhs2) : std::sqrt(res2);
  s.x.assign(x.data(), x.data() + x.size());
  return s;
}

struct ConvGeometry {
  std::size_t c, h, w, f, kh, kw, oh, ow, sh, sw, ph, pw;

  std::size_t unknowns() const { return c * h * w; }
  std::size_t forward_rows() const { return f * oh * ow; }
  std::size_t kernel_size() const { return f * c * kh * kw; }

  // fn(output index, input index, kernel index) for every tap that lands
  // inside the unpadded input.
  template <class Fn>
  void ForEachTap(Fn fn) const {
    for (std::size_t fi = 0; fi < f; ++fi)
      for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::size_t k = ((fi * c + ci) * kh + ky) * kw + kx;
            for (std::size_t oy = 0; oy < oh; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * sh + ky) -
                                        static_cast<std::ptrdiff_t>(ph);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t ox = 0; ox < ow; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * sw + kx) -
                                          static_cast<std::ptrdiff_t>(pw);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                fn((fi * oh + oy) * ow + ox,
                   (ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix),
                   k);
              }
            }
          }
  }
};

ConvGeometry GeometryOf(const LayerSpec& layer, const Shape& in, const Shape& out) {
  ConvGeometry g{};
  if (layer.kind == LayerKind::kConv) {
    g = {in[0], in[1], in[2], layer.units, layer.kernel, layer.kernel, out[1], out[2],
         layer.stride, layer.stride, layer.pad, layer.pad};
  } else {
    g = {in[0], 1, in[1], layer.units, 1, layer.kernel, 1, out[1],
         1, layer.stride, 0, layer.pad};
  }
  return g;
}

// Stacked operator [conv(·, K); weight-gradient(·, gz)] and its adjoint.
class ConvSystem {
 public:
  ConvSystem(const ConvGeometry& geo, const Tensor& kernel, const Vec& gz, bool with_grad)
      : geo_(geo), kernel_(kernel), gz_(gz), with_grad_(with_grad) {}

  std::size_t rows() const {
    return geo_.forward_rows() + (with_grad_ ? geo_.kernel_size() : 0);
  }
  std::size_t cols() const { return geo_.unknowns(); }

  void Apply(const Vec& x, Vec& y) const {
    y.assign(rows(), 0.0);
    const std::size_t off = geo_.forward_rows();
    geo_.ForEachTap([&](std::size_t o, std::size_t i, std::size_t k) {
      y[o] += kernel_[k] * x[i];
      if (with_grad_) y[off + k] += gz_[o] * x[i];
    });
  }

  void ApplyTranspose(const Vec& y, Vec& x) const {
    x.assign(cols(), 0.0);
    const std::size_t off = geo_.forward_rows();
    geo_.ForEachTap([&](std::size_t o, std::size_t i, std::size_t k) {
      x[i] += kernel_[k] * y[o] + (with_grad_ ? gz_[o] * y[off + k] : 0.0);
    });
  }

  MatrixXd Dense() const {
    MatrixXd a = MatrixXd::Zero(static_cast<Eigen::Index>(rows()),
                                static_cast<Eigen::Index>(cols()));
    const std::size_t off = geo_.forward_rows();
    geo_.ForEachTap([&](std::size_t o, std::size_t i, std::size_t k) {
      a(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(i)) += kernel_[k];
      if (with_grad_) {
        a(static_cast<Eigen::Index>(off + k), static_cast<Eigen::Index>(i)) += gz_[o];
      }
    });
    return a;
  }

 private:
  ConvGeometry geo_;
  const Tensor& kernel_;
  const Vec& gz_;
  bool with_grad_;
};

// Conjugate gradients on the normal equations, from x = 0.
Vec Cgls(const ConvSystem& sys, const Vec& rhs) {
  Vec x(sys.cols(), 0.0), r = rhs, s, p, q;
  sys.ApplyTranspose(r, s);
  p = s;
  double gamma = 0.0;
  for (double v : s) gamma += v * v;
  const double stop = 1e-13 * std::sqrt(gamma);
  for (int it = 0; it < 20000 && std::sqrt(gamma) > stop && gamma > 0; ++it) {
    sys.Apply(p, q);
    double qq = 0.0;
    for (double v : q) qq += v * v;
    if (qq == 0.0) break;
    const double alpha = gamma / qq;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += alpha * p[i];
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= alpha * q[i];
    sys.ApplyTranspose(r, s);
    double next = 0.0;
    for (double v : s) next += v * v;
    const double beta = next / gamma;
    gamma = next;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = s[i] + beta * p[i];
  }
  return x;
}

LayerSolve SolveConv(const std::string& name, const ConvGeometry& geo,
                     const Tensor& kernel, const Tensor& bias, const Vec& z,
                     const Vec& gz, const Tensor* gw) {
  ConvSystem sys(geo, kernel, gz, gw != nullptr);
  Vec rhs(sys.rows());
  const std::size_t plane = geo.oh * geo.ow;
  for (std::size_t o = 0; o < geo.forward_rows(); ++o) rhs[o] = z[o] - bias[o / plane];
  if (gw) {
    std::copy(gw->data().begin(), gw->data().end(), rhs.begin() + geo.forward_rows());
  }
  LayerSolve s;
  s.rank.layer = name;
  s.rank.unknowns = sys.cols();
  s.rank.equations = sys.rows();
  const double entries = static_cast<double>(sys.rows()) * static_cast<double>(sys.cols());
  if (sys.cols() <= kDenseMaxUnknowns && entries <= kDenseMaxEntries) {
    Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod;
    cod.setThreshold(kRankTolerance);
    cod.compute(sys.Dense());
    const VectorXd x = cod.solve(
        Eigen::Map<const VectorXd>(rhs.data(), static_cast<Eigen::Index>(rhs.size())));
    s.x.assign(x.data(), x.data() + x.size());
    s.rank.rank = static_cast<std::size_t>(cod.rank());
    s.rank.deficient = *s.rank.rank < sys.cols();
    s.rank.method = "qr";
  } else {
    s.x = Cgls(sys, rhs);
    // Without a factorization only the row count bounds the rank.
    s.rank.deficient = sys.rows() < sys.cols();
    s.rank.method = "cgls";
  }
  Vec ax;
  sys.Apply(s.x, ax);
  for (std::size_t i = 0; i < ax.size(); ++i) ax[i] -= rhs[i];
  s.rank.residual = Norm(rhs) > 0 ? Norm(ax) / Norm(rhs) : Norm(ax);
  return s;
}

// ∂L/∂x from ∂L/∂z through the layer's linear map.
Vec BackpropInput(const LayerSpec& layer, const Tensor& w, const Shape& in,
                  const Shape& out, const Vec& gz) {
  if (layer.kind == LayerKind::kLinear) {
    const std::size_t o_dim = w.dim(0), i_dim = w.dim(1);
    Vec gx(i_dim, 0.0);
    for (std::size_t o = 0; o < o_dim; ++o) {
      for (std::size_t i = 0; i < i_dim; ++i) gx[i] += w[o * i_dim + i] * gz[o];
    }
    return gx;
  }
  const ConvGeometry geo = GeometryOf(layer, in, out);
  Vec y(geo.forward_rows(), 0.0), gx;
  std::copy(gz.begin(), gz.end(), y.begin());
  ConvSystem(geo, w, gz, false).ApplyTranspose(y, gx);
  return gx;
}

}  // namespace

RgapResult RgapReconstruct(const GradientCapsule& capsule, const Model& model) {
  internal::CheckCapsuleMatchesModel(capsule, model);
  const std::size_t last = internal::LastLinearLayer(model);
  const auto& layers = model.layers();
  auto in_shape = [&](std::size_t i) {
    return i == 0 ? model.input_shape() : model.layer_shapes()[i - 1];
  };
  auto grad_of = [&](const std::string& key) -> const Tensor* {
    auto it = capsule.gradients.find(key);
    return it == capsule.gradients.end() ? nullptr : &it->second;
  };

  RgapResult result;
  const LayerSpec& final_layer = layers[last];
  const Tensor& w_final = model.param(final_layer.name + ".weight").value;
  const Tensor* gw_final = grad_of(final_layer.name + ".weight");
  const Tensor* gb_final = grad_of(final_layer.name + ".bias");
  if (!gw_final || !gb_final) {
    throw RgapError("final layer '" + final_layer.name + "' has no shared gradient");
  }
  Vec gz = gb_final->ToVector();
  LayerSolve s = SolveLinear(final_layer.name, w_final,
                             model.param(final_layer.name + ".bias").value, nullptr, gz,
                             gw_final);
  result.label = IdlgLabelRecover(capsule, model);
  std::vector<LayerRank> ranks = {s.rank};
  Vec v = std::move(s.x);
  Vec gv = BackpropInput(final_layer, w_final, in_shape(last), model.layer_shapes()[last], gz);

  for (std::size_t i = last; i-- > 0;) {
    const LayerSpec& layer = layers[i];
    const std::string where = "layer " + std::to_string(i) + " " + layer.Describe();
    switch (layer.kind) {
      case LayerKind::kFlatten:
      case LayerKind::kReshape:
        break;
      case LayerKind::kActivation: {
        if (layer.activation != Activation::kSigmoid) {
          throw RgapError(where + " is not invertible");
        }
        for (std::size_t k = 0; k < v.size(); ++k) {
          const double y = v[k];
          if (!(y > 0.0 && y < 1.0)) {
            throw RgapError(where + ": value " + std::to_string(y) + " at index " +
                            std::to_string(k) + " is outside the sigmoid range (0, 1)");
          }
          gv[k] *= y * (1.0 - y);
          v[k] = std::log(y) - std::log1p(-y);
        }
        break;
      }
      case LayerKind::kMaxPool:
        throw RgapError(where + " discards information and cannot be inverted");
      case LayerKind::kConv:
      case LayerKind::kConv1d:
      case LayerKind::kLinear: {
        const Tensor& w = model.param(layer.name + ".weight").value;
        const Tensor& b = model.param(layer.name + ".bias").value;
        const Tensor* gw = grad_of(layer.name + ".weight");
        const Vec z = v;
        gz = gv;
        if (layer.kind == LayerKind::kLinear) {
          s = SolveLinear(layer.name, w, b, &z, gz, gw);
        } else {
          s = SolveConv(layer.name,
                        GeometryOf(layer, in_shape(i), model.layer_shapes()[i]), w, b, z,
                        gz, gw);
        }
        ranks.push_back(s.rank);
        v = std::move(s.x);
        gv = BackpropInput(layer, w, in_shape(i), model.layer_shapes()[i], gz);
        break;
      }
    }
  }
  std::reverse(ranks.begin(), ranks.end());
  result.ranks = std::move(ranks);
  result.exact = std::none_of(result.ranks.begin(), result.ranks.end(),
                              [](const LayerRank& r) { return r.deficient; });
  result.reconstructed_input = Tensor(model.input_shape(), std::move(v));
  return result;
}

nlohmann::json RankReportToJson(const std::vector<LayerRank>& ranks) {
  nlohmann::json out = nlohmann::json::array();
  for (const LayerRank& r : ranks) {
    out.push_back({{"layer", r.layer},
                   {"unknowns", r.unknowns},
                   {"equations", r.equations},
                   {"rank", r.rank ? nlohmann::json(*r.rank) : nlohmann::json()},
                   {"deficient", r.deficient},
                   {"method", r.method},
                   {"residual", JsonDouble(r.residual)}});
  }
  return out;
}

}  // namespace gradleak
