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

// Frames, feature matrices and the transforms between them and tensors.

#ifndef GRADLEAK_MEDIA_H_
#define GRADLEAK_MEDIA_H_

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradleak/tensor.h"
#include "gradleak/tensor_io.h"
#include "json.hpp"

namespace gradleak {

// Image or feature file that decodes but violates its format's invariants.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 8-bit sRGB, row-major, channel-interleaved.
struct Frame {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  Frame() = default;
  // Zero-filled.
  Frame(std::size_t width, std::size_t height);
  Frame(std::size_t width, std::size_t height, std::vector<std::uint8_t> pixels);

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) {
    return pixels[(y * width + x) * 3 + c];
  }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
  bool operator==(const Frame&) const = default;
};

struct FrameSequence {
  std::vector<Frame> frames;
  double fps = 30.0;
};

struct FeatureMatrix {
  Shape shape;
  std::vector<double> values;

  bool operator==(const FeatureMatrix&) const = default;
};

// PNG by default; a ".ppm" extension selects binary PPM (P6).
Frame LoadImage(const std::string& path);
void SaveImage(const Frame& frame, const std::string& path);

// Image files ordered by the number in their name; fps from meta.json when
// present. A directory without images yields an empty sequence.
FrameSequence LoadFrameDir(const std::string& dir);
// Writes frame_%06d.png and meta.json, creating `dir` if needed.
void WriteFrameDir(const FrameSequence& seq, const std::string& dir);

// Resamples by averaging the source over each destination pixel's footprint,
// treating pixels as constant-valued squares. Values stay unquantized.
// Input and output are planar [C, H, W] in the source range.
Tensor ResizeArea(const Tensor& planar, std::size_t out_height, std::size_t out_width);

// Shorter side to `target`, center crop to target × target, divide by 255.
// Output shape [3, target, target].
Tensor Preprocess(const Frame& frame, std::size_t target = 32);

// Accepts [3, H, W] or [1, 3, H, W]. Clamps to [0, 1], scales by 255 and
// rounds half away from zero.
Frame TensorToFrame(const Tensor& t);

// Catmull-Rom (a = −0.5) with edge clamping and pixel-center alignment.
Frame ResizeBicubic(const Frame& frame, std::size_t width, std::size_t height);
// Output is exactly factor × the input in both dimensions.
Frame UpscaleBicubic(const Frame& frame, int factor);

// "FMAT" | u32 rank | u32 dims... | f32 payload, little-endian.
Bytes EncodeFmat(const FeatureMatrix& m);
FeatureMatrix DecodeFmat(std::span<const std::uint8_t> bytes);
// {"shape": [...], "data": [...]}
nlohmann::json FeatureMatrixToJson(const FeatureMatrix& m);
FeatureMatrix FeatureMatrixFromJson(const nlohmann::json& j);

// Binary unless the file starts with '{' (after whitespace).
FeatureMatrix LoadFeatureMatrix(const std::string& path);
// ".json" extension selects the JSON form.
void WriteFeatureMatrix(const FeatureMatrix& m, const std::string& path);

// Non-overlapping maxima over consecutive runs of `window` entries along the
// last axis.
FeatureMatrix MaxPoolFeatures(const FeatureMatrix& m, std::size_t window);

Tensor FeatureMatrixToTensor(const FeatureMatrix& m);
FeatureMatrix TensorToFeatureMatrix(const Tensor& t);

}  // namespace gradleak

#endif  // GRADLEAK_MEDIA_H_
