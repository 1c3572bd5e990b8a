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

#include "gradleak/media.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "gtest/gtest.h"

namespace gradleak {
namespace {

namespace fs = std::filesystem;

Frame RandomFrame(std::size_t w, std::size_t h, std::mt19937_64& rng) {
  Frame f(w, h);
  for (auto& p : f.pixels) p = static_cast<std::uint8_t>(rng() & 0xff);
  return f;
}

Frame ConstantFrame(std::size_t w, std::size_t h, std::array<std::uint8_t, 3> rgb) {
  Frame f(w, h);
  for (std::size_t i = 0; i < w * h; ++i)
    for (int c = 0; c < 3; ++c) f.pixels[i * 3 + c] = rgb[c];
  return f;
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("gradleak_media_" + std::to_string(std::random_device{}()));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string str(const std::string& leaf = "") const { return (path_ / leaf).string(); }

 private:
  fs::path path_;
};

TEST(FrameTest, BufferLengthInvariant) {
  EXPECT_THROW(Frame(2, 2, std::vector<std::uint8_t>(11)), DimensionError);
  EXPECT_EQ(Frame(3, 2).pixels.size(), 18u);
}

TEST(FrameDirTest, RoundTripIsLossless) {
  TempDir dir;
  std::mt19937_64 rng(1);
  FrameSequence seq;
  seq.fps = 24;
  for (int i = 0; i < 5; ++i) seq.frames.push_back(RandomFrame(7, 5, rng));
  WriteFrameDir(seq, dir.str("frames"));
  EXPECT_TRUE(fs::exists(dir.str("frames/frame_000004.png")));
  FrameSequence back = LoadFrameDir(dir.str("frames"));
  EXPECT_EQ(back.fps, 24);
  ASSERT_EQ(back.frames.size(), 5u);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(back.frames[i], seq.frames[i]);
}

TEST(FrameDirTest, EmptyDirectoryIsEmptySequence) {
  TempDir dir;
  FrameSequence seq = LoadFrameDir(dir.str());
  EXPECT_TRUE(seq.frames.empty());
  EXPECT_EQ(seq.fps, 30);
  EXPECT_THROW(LoadFrameDir(dir.str("missing")), IoError);
}

TEST(FrameDirTest, NonContiguousNumbersSortAscending) {
  TempDir dir;
  for (int n : {12, 3, 100, 7}) {
    SaveImage(ConstantFrame(2, 2, {static_cast<std::uint8_t>(n), 0, 0}),
              dir.str("img_" + std::to_string(n) + ".png"));
  }
  SaveImage(ConstantFrame(2, 2, {50, 0, 0}), dir.str("img_50.ppm"));
  FrameSequence seq = LoadFrameDir(dir.str());
  std::vector<int> order;
  for (const Frame& f : seq.frames) order.push_back(f.pixels[0]);
  EXPECT_EQ(order, (std::vector<int>{3, 7, 12, 50, 100}));
}

TEST(FrameDirTest, MixedDimensionsAndBadFilesAreReported) {
  TempDir dir;
  SaveImage(Frame(2, 2), dir.str("frame_000000.png"));
  SaveImage(Frame(3, 2), dir.str("frame_000001.png"));
  EXPECT_THROW(LoadFrameDir(dir.str()), FormatError);

  TempDir bad;
  const std::string junk = "not an image";
  WriteFileBytes(bad.str("frame_000000.png"),
                 std::span(reinterpret_cast<const std::uint8_t*>(junk.data()), junk.size()));
  try {
    LoadFrameDir(bad.str());
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("frame_000000.png"), std::string::npos);
  }
}

TEST(PpmTest, RoundTrip) {
  TempDir dir;
  std::mt19937_64 rng(2);
  Frame f = RandomFrame(9, 4, rng);
  SaveImage(f, dir.str("a.ppm"));
  EXPECT_EQ(LoadImage(dir.str("a.ppm")), f);
}

TEST(PreprocessTest, VideoFrameBecomes32Square) {
  std::mt19937_64 rng(3);
  Tensor t = Preprocess(RandomFrame(320, 240, rng));
  EXPECT_EQ(t.shape(), (Shape{3, 32, 32}));
  for (double v : t.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(PreprocessTest, IdentitySizeIsExactScaling) {
  std::mt19937_64 rng(4);
  Frame f = RandomFrame(32, 32, rng);
  Tensor t = Preprocess(f);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x)
        EXPECT_EQ(t[(c * 32 + y) * 32 + x], f.at(x, y, c) / 255.0);
}

TEST(PreprocessTest, ConstantFrameGivesConstantTensor) {
  for (auto [w, h] : {std::pair{320, 240}, std::pair{17, 45}, std::pair{5, 5}}) {
    Tensor t = Preprocess(ConstantFrame(w, h, {10, 200, 255}));
    for (std::size_t i = 0; i < 1024; ++i) {
      EXPECT_NEAR(t[i], 10 / 255.0, 1e-12);
      EXPECT_NEAR(t[1024 + i], 200 / 255.0, 1e-12);
      EXPECT_NEAR(t[2048 + i], 1.0, 1e-12);
    }
  }
}

TEST(PreprocessTest, ConsistentUnderNearestNeighborDoubling) {
  std::mt19937_64 rng(5);
  for (auto [w, h] : {std::pair{320, 240}, std::pair{45, 33}, std::pair{20, 28}}) {
    Frame f = RandomFrame(w, h, rng);
    Frame big(2 * w, 2 * h);
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t x = 0; x < 2 * w; ++x)
        for (int c = 0; c < 3; ++c) big.at(x, y, c) = f.at(x / 2, y / 2, c);
    Tensor a = Preprocess(f), b = Preprocess(big);
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    EXPECT_LT(worst, 1.0 / 255.0) << w << "x" << h;
  }
}

TEST(PreprocessTest, AreaResizeMatchesBlockMeanForIntegerFactors) {
  std::mt19937_64 rng(6);
  std::vector<double> v(2 * 8 * 12);
  for (double& x : v) x = static_cast<double>(rng() % 256);
  Tensor out = ResizeArea(Tensor({2, 8, 12}, v), 2, 3);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 3; ++x) {
        double s = 0;
        for (std::size_t dy = 0; dy < 4; ++dy)
          for (std::size_t dx = 0; dx < 4; ++dx) s += v[(c * 8 + 4 * y + dy) * 12 + 4 * x + dx];
        EXPECT_NEAR(out[(c * 2 + y) * 3 + x], s / 16, 1e-12);
      }
}

TEST(TensorToFrameTest, ClampAndRound) {
  Tensor t({3, 1, 2}, {1.5, 0.5, -0.2, 0.0, 1.0, std::nan("")});
  Frame f = TensorToFrame(t);
  EXPECT_EQ(f.at(0, 0, 0), 255);
  EXPECT_EQ(f.at(1, 0, 0), 128);
  EXPECT_EQ(f.at(0, 0, 1), 0);
  EXPECT_EQ(f.at(1, 0, 1), 0);
  EXPECT_EQ(f.at(0, 0, 2), 255);
  EXPECT_EQ(f.at(1, 0, 2), 0);
  EXPECT_THROW(TensorToFrame(Tensor::Zeros({1, 4, 4})), DimensionError);
}

TEST(TensorToFrameTest, QuantizationRoundTrip) {
  std::mt19937_64 rng(7);
  Frame f = RandomFrame(32, 32, rng);
  Frame back = TensorToFrame(Preprocess(f));
  for (std::size_t i = 0; i < f.pixels.size(); ++i) {
    EXPECT_LE(std::abs(f.pixels[i] - back.pixels[i]), 1);
  }
}

TEST(BicubicTest, DimensionsIdentityAndConstants) {
  std::mt19937_64 rng(8);
  Frame f = RandomFrame(32, 32, rng);
  Frame up = UpscaleBicubic(f, 4);
  EXPECT_EQ(up.width, 128u);
  EXPECT_EQ(up.height, 128u);
  EXPECT_EQ(UpscaleBicubic(f, 1), f);
  EXPECT_EQ(ResizeBicubic(f, 32, 32), f);
  EXPECT_THROW(UpscaleBicubic(f, 0), std::invalid_argument);
  for (int factor : {2, 3, 4}) {
    Frame c = ConstantFrame(5, 7, {0, 77, 255});
    EXPECT_EQ(UpscaleBicubic(c, factor), ConstantFrame(5 * factor, 7 * factor, {0, 77, 255}));
  }
}

// Catmull-Rom interpolates a linear ramp exactly away from the clamped edges.
TEST(BicubicTest, ReproducesLinearRampInInterior) {
  Frame f(16, 1);
  for (std::size_t x = 0; x < 16; ++x)
    for (int c = 0; c < 3; ++c) f.at(x, 0, c) = static_cast<std::uint8_t>(10 * x);
  Frame up = ResizeBicubic(f, 64, 1);
  for (std::size_t x = 8; x < 56; ++x) {
    const double src = (x + 0.5) / 4.0 - 0.5;
    EXPECT_EQ(up.at(x, 0, 0), static_cast<int>(std::round(10 * src)));
  }
}

TEST(BicubicTest, OvershootIsClamped) {
  Frame f(4, 1);
  for (int c = 0; c < 3; ++c) {
    f.at(0, 0, c) = 0;
    f.at(1, 0, c) = 0;
    f.at(2, 0, c) = 255;
    f.at(3, 0, c) = 255;
  }
  Frame up = UpscaleBicubic(f, 8);
  // The kernel's negative lobes push past the step; results stay in range
  // and saturate on both sides.
  EXPECT_EQ(*std::min_element(up.pixels.begin(), up.pixels.end()), 0);
  EXPECT_EQ(*std::max_element(up.pixels.begin(), up.pixels.end()), 255);
}

FeatureMatrix RandomFeatures(const Shape& shape, std::mt19937_64& rng) {
  FeatureMatrix m{shape, {}};
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::normal_distribution<double> g;
  for (std::size_t i = 0; i < n; ++i) m.values.push_back(static_cast<float>(g(rng)));
  return m;
}

TEST(FeatureMatrixTest, FmatRoundTripIsBitIdentical) {
  TempDir dir;
  std::mt19937_64 rng(9);
  FeatureMatrix m = RandomFeatures({1, 10, 2048}, rng);
  WriteFeatureMatrix(m, dir.str("f.fmat"));
  FeatureMatrix back = LoadFeatureMatrix(dir.str("f.fmat"));
  EXPECT_EQ(back.shape, (Shape{1, 10, 2048}));
  EXPECT_EQ(back, m);
  EXPECT_EQ(EncodeFmat(back), EncodeFmat(m));
}

TEST(FeatureMatrixTest, JsonAndBinaryAgree) {
  TempDir dir;
  std::mt19937_64 rng(10);
  FeatureMatrix m = RandomFeatures({2, 3, 8}, rng);
  WriteFeatureMatrix(m, dir.str("f.fmat"));
  WriteFeatureMatrix(m, dir.str("f.json"));
  FeatureMatrix a = LoadFeatureMatrix(dir.str("f.fmat")), b = LoadFeatureMatrix(dir.str("f.json"));
  ASSERT_EQ(a.shape, b.shape);
  for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-15);
}

TEST(FeatureMatrixTest, MalformedInputsAreFormatErrors) {
  std::mt19937_64 rng(11);
  Bytes good = EncodeFmat(RandomFeatures({2, 4}, rng));
  Bytes bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(DecodeFmat(bad_magic), FormatError);
  Bytes short_payload(good.begin(), good.end() - 4);
  EXPECT_THROW(DecodeFmat(short_payload), FormatError);
  Bytes long_payload = good;
  long_payload.push_back(0);
  EXPECT_THROW(DecodeFmat(long_payload), FormatError);
  EXPECT_THROW(FeatureMatrixFromJson({{"shape", {2, 2}}, {"data", {1, 2, 3}}}), FormatError);
}

TEST(MaxPoolTest, PaperShapeAndAscendingValues) {
  FeatureMatrix m{{1, 10, 2048}, {}};
  for (int r = 0; r < 10; ++r)
    for (int i = 0; i < 2048; ++i) m.values.push_back(i);
  FeatureMatrix p = MaxPoolFeatures(m, 32);
  EXPECT_EQ(p.shape, (Shape{1, 10, 64}));
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(p.values[i], 32.0 * i + 31);
  EXPECT_EQ(MaxPoolFeatures(m, 1), m);
}

TEST(MaxPoolTest, BoundedAndPermutationInvariantWithinWindows) {
  std::mt19937_64 rng(12);
  FeatureMatrix m = RandomFeatures({3, 24}, rng);
  FeatureMatrix p = MaxPoolFeatures(m, 4);
  const double top = *std::max_element(m.values.begin(), m.values.end());
  for (double v : p.values) EXPECT_LE(v, top);
  FeatureMatrix shuffled = m;
  for (std::size_t i = 0; i < shuffled.values.size(); i += 4) {
    std::shuffle(shuffled.values.begin() + i, shuffled.values.begin() + i + 4, rng);
  }
  EXPECT_EQ(MaxPoolFeatures(shuffled, 4), p);
}

TEST(MaxPoolTest, NonDivisibleWindowSuggestsDivisors) {
  FeatureMatrix m{{1, 12}, std::vector<double>(12, 0.0)};
  try {
    MaxPoolFeatures(m, 5);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("1, 2, 3, 4, 6, 12"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace gradleak
