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

#include "gradleak/tensor_io.h"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace gradleak {

nlohmann::json JsonDouble(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

double DoubleFromJson(const nlohmann::json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw ParseError("expected a number, got " + j.dump(), 0);
}

nlohmann::json TensorToJson(const Tensor& t) {
  return {{"shape", t.shape()}, {"data", t.ToVector()}};
}

Tensor TensorFromJson(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("shape") || !j.contains("data")) {
    throw ParseError("tensor JSON needs \"shape\" and \"data\"", 0);
  }
  try {
    return Tensor(j.at("shape").get<Shape>(),
                  j.at("data").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("tensor JSON: ") + e.what(), 0);
  }
}

void ByteWriter::U32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::U64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::F32(float v) { U32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::F64(double v) { U64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::Str(std::string_view s) {
  U32(static_cast<std::uint32_t>(s.size()));
  out_.insert(out_.end(), s.begin(), s.end());
}

void ByteWriter::Raw(std::span<const std::uint8_t> bytes) {
  out_.insert(out_.end(), bytes.begin(), bytes.end());
}

void ByteReader::Need(std::size_t n, const char* what) {
  if (bytes_.size() - pos_ < n) {
    throw ParseError(std::string("truncated payload reading ") + what, pos_);
  }
}

std::uint8_t ByteReader::U8() {
  Need(1, "u8");
  return bytes_[pos_++];
}

std::uint32_t ByteReader::U32() {
  Need(4, "u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::U64() {
  Need(8, "u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
  pos_ += 8;
  return v;
}

float ByteReader::F32() { return std::bit_cast<float>(U32()); }

double ByteReader::F64() { return std::bit_cast<double>(U64()); }

std::string ByteReader::Str() {
  const std::size_t at = pos_;
  const std::uint32_t n = U32();
  if (bytes_.size() - pos_ < n) {
    throw ParseError("truncated payload reading string", at);
  }
  std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
  pos_ += n;
  return s;
}

void ByteReader::Magic(std::string_view expected) {
  const std::size_t at = pos_;
  Need(expected.size(), "magic");
  if (std::memcmp(bytes_.data() + pos_, expected.data(), expected.size()) != 0) {
    throw ParseError("bad magic, expected \"" + std::string(expected) + "\"", at);
  }
  pos_ += expected.size();
}

Bytes EncodeFten(const Tensor& t) {
  ByteWriter w;
  w.Raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("FTEN"), 4));
  w.U32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.U32(static_cast<std::uint32_t>(d));
  for (double v : t.data()) w.F32(static_cast<float>(v));
  return w.Take();
}

Tensor DecodeFten(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.Magic("FTEN");
  const std::uint32_t rank = r.U32();
  Shape shape;
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::size_t at = r.offset();
    const std::uint32_t d = r.U32();
    if (d == 0) throw ParseError("zero dimension", at);
    shape.push_back(d);
    n *= d;
  }
  if ((bytes.size() - r.offset()) / 4 < n) {
    throw ParseError("payload shorter than shape " + ShapeToString(shape),
                     r.offset());
  }
  std::vector<double> data(n);
  for (double& v : data) v = r.F32();
  if (!r.done()) throw ParseError("trailing bytes after FTEN payload", r.offset());
  return Tensor(std::move(shape), std::move(data));
}

namespace {
constexpr char kAlphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}  // namespace

std::string Base64Encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i < bytes.size()) {
    std::uint32_t v = bytes[i] << 16;
    if (i + 1 < bytes.size()) v |= bytes[i + 1] << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += i + 1 < bytes.size() ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

Bytes Base64Decode(std::string_view text) {
  std::array<int, 256> lookup;
  lookup.fill(-1);
  for (int i = 0; i < 64; ++i) lookup[static_cast<unsigned char>(kAlphabet[i])] = i;
  Bytes out;
  std::uint32_t acc = 0;
  int bits = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '=') break;
    const int v = lookup[static_cast<unsigned char>(c)];
    if (v < 0) throw ParseError("invalid base64 character", i);
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>(acc >> bits));
    }
  }
  return out;
}

Bytes ReadFileBytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void WriteFileBytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace gradleak
