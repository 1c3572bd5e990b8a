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

#ifndef GRADLEAK_TENSOR_IO_H_
#define GRADLEAK_TENSOR_IO_H_

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gradleak/tensor.h"
#include "json.hpp"

namespace gradleak {

// Malformed serialized payload. `offset()` is the byte position at which
// decoding failed.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Filesystem failure; the message carries the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Bytes = std::vector<std::uint8_t>;

// Finite values as JSON numbers; ±inf and NaN as the strings "inf", "-inf",
// "nan".
nlohmann::json JsonDouble(double v);
double DoubleFromJson(const nlohmann::json& j);

// {"shape": [...], "data": [...]}
nlohmann::json TensorToJson(const Tensor& t);
Tensor TensorFromJson(const nlohmann::json& j);

// "FTEN" | u32 rank | u32 dims... | f32 payload, all little-endian.
// Values are narrowed to single precision.
Bytes EncodeFten(const Tensor& t);
Tensor DecodeFten(std::span<const std::uint8_t> bytes);

std::string Base64Encode(std::span<const std::uint8_t> bytes);
Bytes Base64Decode(std::string_view text);

// Little-endian cursor used by the binary container formats.
class ByteWriter {
 public:
  void U8(std::uint8_t v) { out_.push_back(v); }
  void U32(std::uint32_t v);
  void U64(std::uint64_t v);
  void F32(float v);
  void F64(double v);
  void Str(std::string_view s);
  void Raw(std::span<const std::uint8_t> bytes);
  Bytes Take() { return std::move(out_); }

 private:
  Bytes out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint8_t U8();
  std::uint32_t U32();
  std::uint64_t U64();
  float F32();
  double F64();
  std::string Str();
  void Magic(std::string_view expected);
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void Need(std::size_t n, const char* what);
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

Bytes ReadFileBytes(const std::string& path);
void WriteFileBytes(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace gradleak

#endif  // GRADLEAK_TENSOR_IO_H_
