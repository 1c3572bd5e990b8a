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

#include "gradleak/quality.h"

#include <cmath>
#include <random>

#include "gtest/gtest.h"
#include "metric_oracles.h"

namespace gradleak {
namespace {

using testing::DirectPsnr;
using testing::DirectSsim;
using testing::RandomFrame;

TEST(PsnrTest, IdenticalFramesAreInfinite) {
  std::mt19937_64 rng(1);
  Frame f = RandomFrame(16, 16, rng);
  EXPECT_TRUE(std::isinf(Psnr(f, f)));
}

TEST(PsnrTest, UniformOffsetOf16) {
  Frame a(8, 8), b(8, 8);
  for (auto& p : b.pixels) p = 16;
  EXPECT_NEAR(Psnr(a, b), 10 * std::log10(255.0 * 255.0 / 256.0), 1e-12);
  EXPECT_NEAR(Psnr(a, b), 24.05, 0.005);
}

TEST(PsnrTest, MaximalDifferenceIsZeroDb) {
  Frame a(4, 4), b(4, 4);
  for (auto& p : b.pixels) p = 255;
  EXPECT_EQ(Psnr(a, b), 0.0);
}

TEST(PsnrTest, MatchesDirectFormula) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 20; ++i) {
    Frame a = RandomFrame(23, 17, rng), b = RandomFrame(23, 17, rng);
    EXPECT_NEAR(Psnr(a, b), DirectPsnr(a, b), 1e-9);
  }
}

TEST(PsnrTest, StrictlyDecreasesAlongNoiseLadder) {
  std::mt19937_64 rng(3);
  Frame base = RandomFrame(32, 32, rng);
  double previous = std::numeric_limits<double>::infinity();
  for (int amplitude = 1; amplitude <= 60; amplitude += 3) {
    Frame noisy = base;
    std::mt19937_64 noise(4);
    for (auto& p : noisy.pixels) {
      const int sign = (noise() & 1) ? 1 : -1;
      p = static_cast<std::uint8_t>(std::clamp(p + sign * amplitude, 0, 255));
    }
    const double v = Psnr(base, noisy);
    EXPECT_LT(v, previous) << amplitude;
    previous = v;
  }
}

TEST(PsnrTest, SizeMismatchThrows) {
  EXPECT_THROW(Psnr(Frame(4, 4), Frame(4, 5)), DimensionError);
}

TEST(SsimTest, SelfSimilarityIsOne) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 5; ++i) {
    Frame f = RandomFrame(40, 30, rng);
    EXPECT_NEAR(Ssim(f, f), 1.0, 1e-12);
  }
}

TEST(SsimTest, MatchesIndependentImplementation) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 5; ++i) {
    Frame a = RandomFrame(64, 64, rng);
    // Correlated pair so the value is far from zero.
    Frame b = a;
    for (auto& p : b.pixels) p = static_cast<std::uint8_t>(std::clamp<int>(p + rng() % 61 - 30, 0, 255));
    EXPECT_NEAR(Ssim(a, b), DirectSsim(a, b), 1e-4);
    Frame c = RandomFrame(64, 64, rng);
    EXPECT_NEAR(Ssim(a, c), DirectSsim(a, c), 1e-4);
  }
}

TEST(SsimTest, SymmetricAndBounded) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 10; ++i) {
    Frame a = RandomFrame(20, 24, rng), b = RandomFrame(20, 24, rng);
    const double s = Ssim(a, b);
    EXPECT_EQ(s, Ssim(b, a));
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
    EXPECT_LT(s, 1.0 - 1e-12);
  }
  Frame a(16, 16), b(16, 16);
  for (auto& p : b.pixels) p = 255;
  EXPECT_GE(Ssim(a, b), -1.0);
}

TEST(SsimTest, TooSmallOrMismatchedThrows) {
  EXPECT_THROW(Ssim(Frame(10, 20), Frame(10, 20)), DimensionError);
  EXPECT_THROW(Ssim(Frame(12, 12), Frame(13, 12)), DimensionError);
}

Frame FlipHorizontal(const Frame& f) {
  Frame out(f.width, f.height);
  for (std::size_t y = 0; y < f.height; ++y)
    for (std::size_t x = 0; x < f.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = f.at(f.width - 1 - x, y, c);
  return out;
}

TEST(MetricTest, InvariantToJointHorizontalFlip) {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 5; ++i) {
    Frame a = RandomFrame(30, 20, rng), b = RandomFrame(30, 20, rng);
    EXPECT_NEAR(Psnr(FlipHorizontal(a), FlipHorizontal(b)), Psnr(a, b), 1e-12);
    EXPECT_NEAR(Ssim(FlipHorizontal(a), FlipHorizontal(b)), Ssim(a, b), 1e-12);
  }
}

TEST(ScoreSequencesTest, SelfComparison) {
  std::mt19937_64 rng(9);
  FrameSequence s;
  for (int i = 0; i < 3; ++i) s.frames.push_back(RandomFrame(32, 32, rng));
  QualityReport r = ScoreSequences(s, s, "Enhanced vs High");
  EXPECT_EQ(r.comparison_label, "Enhanced vs High");
  EXPECT_NEAR(r.mean_ssim, 1.0, 1e-12);
  EXPECT_FALSE(r.mean_psnr.has_value());
  EXPECT_EQ(r.infinite_psnr_frames, 3u);
  for (const FrameScore& f : r.per_frame) EXPECT_TRUE(std::isinf(f.psnr_db));
}

TEST(ScoreSequencesTest, SingleFrameMatchesScalarCalls) {
  std::mt19937_64 rng(10);
  FrameSequence a, b;
  a.frames.push_back(RandomFrame(128, 128, rng));
  b.frames.push_back(RandomFrame(32, 32, rng));
  QualityReport r = ScoreSequences(a, b, "Enhanced vs Low");
  ASSERT_EQ(r.per_frame.size(), 1u);
  const Frame up = ResizeBicubic(b.frames[0], 128, 128);
  EXPECT_EQ(r.per_frame[0].psnr_db, Psnr(a.frames[0], up));
  EXPECT_EQ(r.per_frame[0].ssim, Ssim(a.frames[0], up));
  EXPECT_EQ(*r.mean_psnr, r.per_frame[0].psnr_db);
  EXPECT_EQ(r.mean_ssim, r.per_frame[0].ssim);
}

TEST(ScoreSequencesTest, LengthMismatchNamesBothLengths) {
  FrameSequence a, b;
  a.frames.resize(2, Frame(16, 16));
  b.frames.resize(3, Frame(16, 16));
  try {
    ScoreSequences(a, b, "x");
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find('2'), std::string::npos);
    EXPECT_NE(msg.find('3'), std::string::npos);
  }
}

TEST(QualityReportTest, SerializationAndTableRow) {
  std::mt19937_64 rng(11);
  FrameSequence a, b;
  for (int i = 0; i < 2; ++i) {
    a.frames.push_back(RandomFrame(16, 16, rng));
    b.frames.push_back(RandomFrame(16, 16, rng));
  }
  b.frames.push_back(a.frames[0]);
  a.frames.push_back(a.frames[0]);
  QualityReport r = ScoreSequences(a, b, "Enhanced vs High");
  EXPECT_EQ(r.infinite_psnr_frames, 1u);
  EXPECT_NEAR(*r.mean_psnr, (r.per_frame[0].psnr_db + r.per_frame[1].psnr_db) / 2, 1e-12);
  QualityReport back = QualityReportFromJson(nlohmann::json::parse(QualityReportToJson(r).dump()));
  ASSERT_EQ(back.per_frame.size(), 3u);
  EXPECT_TRUE(std::isinf(back.per_frame[2].psnr_db));
  EXPECT_EQ(back.mean_psnr, r.mean_psnr);
  const std::string csv = QualityReportCsv(r);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  EXPECT_EQ(csv.rfind("frame,psnr_db,ssim\n", 0), 0u);
  nlohmann::json row = Table1Row(r, r, r);
  EXPECT_TRUE(row["one_ref"].is_null());
  EXPECT_TRUE(row["multi_ref"].is_null());
  EXPECT_EQ(row["baseline"], CellText(r));
  EXPECT_NE(CellText(r).find('/'), std::string::npos);
}

}  // namespace
}  // namespace gradleak
