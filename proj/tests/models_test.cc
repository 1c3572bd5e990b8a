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

#include <cmath>
#include <random>

#include "gradleak/ops.h"
#include "gradleak/tensor_io.h"
#include "gtest/gtest.h"
#include "test_util.h"

namespace gradleak {
namespace {

using testing::RandomTensor;

bool SameParams(const Model& a, const Model& b) {
  if (a.params().size() != b.params().size()) return false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    if (a.params()[i].name != b.params()[i].name) return false;
    if (!a.params()[i].value.SameValues(b.params()[i].value)) return false;
  }
  return true;
}

TEST(LenetTest, ShapesAndFlattenWidth) {
  Model m = BuildDlgLenet(100, 7);
  EXPECT_EQ(m.output_shape(), (Shape{100}));
  // Layer 6 is the flatten.
  EXPECT_EQ(m.layer_shapes()[1], (Shape{12, 16, 16}));
  EXPECT_EQ(m.layer_shapes()[3], (Shape{12, 8, 8}));
  EXPECT_EQ(m.layer_shapes()[6], (Shape{768}));
  EXPECT_EQ(m.param("fc.weight").value.shape(), (Shape{100, 768}));
  std::mt19937_64 rng(1);
  Tensor logits = ForwardLogits(m, RandomTensor({1, 3, 32, 32}, rng, 0, 1));
  EXPECT_EQ(logits.shape(), (Shape{1, 100}));
}

TEST(LenetTest, RejectsSingleClass) {
  EXPECT_THROW(BuildDlgLenet(1, 0), DimensionError);
}

TEST(ModelTest, SameSeedSameParameters) {
  EXPECT_TRUE(SameParams(BuildDlgLenet(10, 3), BuildDlgLenet(10, 3)));
  EXPECT_FALSE(SameParams(BuildDlgLenet(10, 3), BuildDlgLenet(10, 4)));
  EXPECT_TRUE(SameParams(BuildFeatureClassifier({10, 64}, 14, 5),
                         BuildFeatureClassifier({10, 64}, 14, 5)));
  EXPECT_TRUE(SameParams(BuildModerateClassifier({1, 8, 8}, 5, 9),
                         BuildModerateClassifier({1, 8, 8}, 5, 9)));
}

TEST(ModelTest, ParametersInitializedInHalfUnitInterval) {
  Model m = BuildDlgLenet(10, 11);
  double lo = 1, hi = -1;
  for (const Parameter& p : m.params()) {
    for (double v : p.value.data()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  EXPECT_GE(lo, -0.5);
  EXPECT_LT(hi, 0.5);
  EXPECT_LT(lo, -0.45);
  EXPECT_GT(hi, 0.45);
}

TEST(ModelTest, ParameterNamesUniqueAndStable) {
  Model m = BuildModerateClassifier({1, 8, 8}, 4, 0);
  std::vector<std::string> expected = {"conv1.weight", "conv1.bias",
                                       "conv2.weight", "conv2.bias",
                                       "fc1.weight",   "fc1.bias",
                                       "fc2.weight",   "fc2.bias"};
  std::vector<std::string> names;
  for (const Parameter& p : m.params()) names.push_back(p.name);
  EXPECT_EQ(names, expected);
  EXPECT_THROW(BuildModel("dup", {4},
                          {LayerSpec::Linear("a", 4), LayerSpec::Linear("a", 2)},
                          0),
               DimensionError);
}

TEST(FeatureClassifierTest, ShapesAndComplexityComparableToLenet) {
  for (std::size_t classes : {14u, 100u}) {
    Model f = BuildFeatureClassifier({10, 64}, classes, 1);
    Model lenet = BuildDlgLenet(classes, 1);
    const double ratio = static_cast<double>(f.ParameterCount()) /
                         static_cast<double>(lenet.ParameterCount());
    EXPECT_GT(ratio, 0.5) << classes;
    EXPECT_LT(ratio, 2.0) << classes;
    std::mt19937_64 rng(2);
    Tensor logits = ForwardLogits(f, RandomTensor({1, 10, 64}, rng));
    EXPECT_EQ(logits.shape(), (Shape{1, classes}));
  }
}

TEST(SimpleClassifierTest, SingleWeightMatrixAndAffine) {
  Model m = BuildSimpleClassifier({64}, 6, 4);
  ASSERT_EQ(m.params().size(), 2u);
  EXPECT_EQ(m.param("fc.weight").value.shape(), (Shape{6, 64}));
  EXPECT_EQ(m.param("fc.bias").value.shape(), (Shape{6}));

  std::mt19937_64 rng(3);
  Tensor a = RandomTensor({1, 64}, rng), b = RandomTensor({1, 64}, rng);
  const double t = 0.3;
  Tensor mix = Add(Scale(a, t), Scale(b, 1 - t));
  Tensor fa = ForwardLogits(m, a), fb = ForwardLogits(m, b),
         fm = ForwardLogits(m, mix);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(fm[i], t * fa[i] + (1 - t) * fb[i], 1e-12);
  }
}

TEST(SimpleClassifierTest, WeightGradientHasRankOne) {
  Model m = BuildSimpleClassifier({64}, 6, 4);
  std::mt19937_64 rng(5);
  Tape tape;
  TensorMap params;
  for (const Parameter& p : m.params()) params[p.name] = tape.Variable(p.value);
  Tensor loss = ForwardLoss(m, RandomTensor({1, 64}, rng), std::size_t{2},
                            &params).loss;
  std::vector<Tensor> wrt = {params["fc.weight"]};
  Tensor g = Grad(loss, wrt)[0];
  // Every 2×2 minor vanishes for a rank-≤1 matrix.
  double max_minor = 0, scale = 0;
  for (std::size_t r = 0; r < 6; ++r) {
    for (std::size_t c = 0; c < 64; ++c) scale = std::max(scale, std::abs(g[r * 64 + c]));
  }
  for (std::size_t r = 0; r + 1 < 6; ++r) {
    for (std::size_t c = 0; c + 1 < 64; ++c) {
      const double minor = g[r * 64 + c] * g[(r + 1) * 64 + c + 1] -
                           g[r * 64 + c + 1] * g[(r + 1) * 64 + c];
      max_minor = std::max(max_minor, std::abs(minor));
    }
  }
  EXPECT_GT(scale, 0.0);
  EXPECT_LT(max_minor, 1e-14 * scale * scale + 1e-300);
}

TEST(ModerateClassifierTest, MoreLayersAndParametersThanSimple) {
  Model simple = BuildSimpleClassifier({1, 8, 8}, 10, 0);
  Model moderate = BuildModerateClassifier({1, 8, 8}, 10, 0);
  EXPECT_GT(moderate.layers().size(), simple.layers().size());
  EXPECT_LT(simple.ParameterCount(), moderate.ParameterCount());
  EXPECT_EQ(simple.ParameterCount(), 64u * 10 + 10);
  // conv1 16·9+16, conv2 32·16·9+32, fc1 128·512+128, fc2 10·128+10.
  EXPECT_EQ(moderate.ParameterCount(),
            160u + 4640u + 65664u + 1290u);
}

TEST(ExtractorTest, FrozenAndDeterministic) {
  Model e = BuildFrozenExtractor({3, 32, 32}, 64, 8);
  EXPECT_EQ(e.TrainableParameterCount(), 0u);
  EXPECT_TRUE(e.TrainableNames().empty());
  EXPECT_THROW(BuildFrozenExtractor({3, 32, 32}, 0, 8), DimensionError);
  std::mt19937_64 rng(9);
  Tensor x = RandomTensor({1, 3, 32, 32}, rng, 0, 1);
  EXPECT_TRUE(ForwardLogits(e, x).SameValues(
      ForwardLogits(BuildFrozenExtractor({3, 32, 32}, 64, 8), x)));
}

TEST(ExtractorTest, DistinctInputsGiveDistinctFeatures) {
  Model e = BuildFrozenExtractor({3, 32, 32}, 64, 8);
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor a = ForwardLogits(e, RandomTensor({1, 3, 32, 32}, rng, 0, 1));
    Tensor b = ForwardLogits(e, RandomTensor({1, 3, 32, 32}, rng, 0, 1));
    EXPECT_GT(testing::MaxAbsDiff(a.data(), b.data()), 0.0) << trial;
  }
}

TEST(ChainTest, ChainedModelMatchesSequentialForward) {
  Model e = BuildFrozenExtractor({3, 32, 32}, 64, 1);
  Model c = BuildModerateClassifier({1, 8, 8}, 10, 2);
  Model chained = ChainModels(e, c, "moderate+extractor");
  EXPECT_EQ(chained.TrainableParameterCount(), c.ParameterCount());
  EXPECT_TRUE(chained.param("extractor.conv1.weight").frozen);
  EXPECT_FALSE(chained.param("classifier.fc2.weight").frozen);
  std::mt19937_64 rng(3);
  Tensor x = RandomTensor({1, 3, 32, 32}, rng, 0, 1);
  Tensor features = Reshape(ForwardLogits(e, x), {1, 1, 8, 8});
  Tensor expected = ForwardLogits(c, features);
  EXPECT_TRUE(ForwardLogits(chained, x).SameValues(expected));
}

TEST(ForwardTest, ShapeMismatchNamesLayer) {
  Model m = BuildDlgLenet(10, 0);
  try {
    ForwardLogits(m, Tensor::Zeros({1, 3, 16, 16}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("input layer"), std::string::npos);
  }
  // A mis-sized parameter override fails inside the named layer.
  TensorMap bad = {{"fc.weight", Tensor::Zeros({10, 700})}};
  try {
    ForwardLogits(m, Tensor::Zeros({1, 3, 32, 32}), &bad);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("'fc'"), std::string::npos) << e.what();
  }
  EXPECT_THROW(BuildModel("bad", {3, 32, 32}, {LayerSpec::Linear("fc", 2)}, 0),
               DimensionError);
}

TEST(ForwardTest, UniformLogitsGiveLogClassCount) {
  Model m = BuildSimpleClassifier({5}, 7, 0);
  Model zero = m.WithParams({{"fc.weight", Tensor::Zeros({7, 5})},
                             {"fc.bias", Tensor::Zeros({7})}});
  std::mt19937_64 rng(4);
  ForwardResult r = ForwardLoss(zero, RandomTensor({1, 5}, rng), std::size_t{3});
  EXPECT_NEAR(r.loss.item(), std::log(7.0), 1e-12);
}

TEST(ForwardTest, LossNonNegative) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Model m = BuildDlgLenet(10, trial);
    Tensor x = RandomTensor({1, 3, 32, 32}, rng, 0, 1);
    EXPECT_GE(ForwardLoss(m, x, std::size_t(trial % 10)).loss.item(), 0.0);
  }
}

// Hand-composed forward pass with explicit loops for the dense layers.
TEST(ForwardTest, MatchesManualComposition) {
  Model m = BuildModerateClassifier({2, 6, 6}, 5, 12);
  std::mt19937_64 rng(7);
  Tensor x = RandomTensor({1, 2, 6, 6}, rng, 0, 1);
  auto P = [&](const char* n) { return m.param(n).value; };

  Tensor h = Sigmoid(BiasAdd(Conv2d(x, P("conv1.weight"), Conv2dParams::Uniform(1, 1)),
                             P("conv1.bias")));
  h = Sigmoid(BiasAdd(Conv2d(h, P("conv2.weight"), Conv2dParams::Uniform(2, 1)),
                      P("conv2.bias")));
  std::vector<double> flat = h.ToVector();
  auto dense = [](const std::vector<double>& in, const Tensor& w, const Tensor& b) {
    std::vector<double> out(w.dim(0));
    for (std::size_t o = 0; o < w.dim(0); ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < w.dim(1); ++i) acc += w[o * w.dim(1) + i] * in[i];
      out[o] = acc;
    }
    return out;
  };
  std::vector<double> z = dense(flat, P("fc1.weight"), P("fc1.bias"));
  for (double& v : z) v = 1 / (1 + std::exp(-v));
  std::vector<double> logits = dense(z, P("fc2.weight"), P("fc2.bias"));
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0;
  for (double v : logits) sum += std::exp(v - mx);
  const double expected = -(logits[3] - mx - std::log(sum));

  ForwardResult r = ForwardLoss(m, x, std::size_t{3});
  EXPECT_NEAR(r.loss.item(), expected, 1e-12);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(r.logits[i], logits[i], 1e-12);
}

TEST(ManifestTest, RebuildsBitwise) {
  Model m = BuildDlgLenet(10, 21);
  Model rebuilt = ModelFromManifest(nlohmann::json::parse(ModelManifest(m).dump()));
  EXPECT_EQ(rebuilt.id(), "dlg_lenet");
  EXPECT_TRUE(SameParams(m, rebuilt));

  Model chained = ChainModels(BuildFrozenExtractor({3, 32, 32}, 64, 1),
                              BuildSimpleClassifier({64}, 10, 2), "chain");
  EXPECT_TRUE(SameParams(chained, ModelFromManifest(ModelManifest(chained))));
}

TEST(ManifestTest, EmbeddedParamsAreSinglePrecision) {
  Model m = BuildSimpleClassifier({4}, 3, 1);
  Model changed = m.WithParams({{"fc.bias", Tensor({3}, {0.1, 0.2, 0.3})}});
  Model rebuilt = ModelFromManifest(ModelManifest(changed, true));
  EXPECT_EQ(rebuilt.param("fc.bias").value[1], static_cast<double>(0.2f));
}

TEST(ManifestTest, UnknownLayerKindRejected) {
  nlohmann::json j = {{"id", "x"}, {"seed", 0}, {"input_shape", {4}},
                      {"layers", {{{"kind", "dropout"}}}}};
  EXPECT_THROW(ModelFromManifest(j), ParseError);
}

}  // namespace
}  // namespace gradleak
