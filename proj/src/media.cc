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

#include <png.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <utility>

namespace gradleak {
namespace {

namespace fs = std::filesystem;

std::string Lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

bool IsPpm(const std::string& path) { return Lower(fs::path(path).extension().string()) == ".ppm"; }

Frame LoadPng(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot read PNG " + path + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  Frame frame(image.width, image.height);
  if (!png_image_finish_read(&image, nullptr, frame.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path + ": " + image.message);
  }
  return frame;
}

void SavePng(const Frame& frame, const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(frame.width);
  image.height = static_cast<png_uint_32>(frame.height);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, frame.pixels.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path + ": " + image.message);
  }
}

// Next whitespace-delimited header token, skipping '#' comments.
std::string PpmToken(std::istream& in, const std::string& path) {
  std::string token;
  while (in) {
    const int c = in.get();
    if (c == '#') {
      std::string ignored;
      std::getline(in, ignored);
    } else if (std::isspace(c) || c == EOF) {
      if (!token.empty()) return token;
    } else {
      token.push_back(static_cast<char>(c));
    }
  }
  throw FormatError("truncated PPM header in " + path);
}

Frame LoadPpm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  if (PpmToken(in, path) != "P6") throw FormatError(path + " is not a binary PPM (P6)");
  std::size_t w = 0, h = 0;
  int maxval = 0;
  try {
    w = std::stoul(PpmToken(in, path));
    h = std::stoul(PpmToken(in, path));
    maxval = std::stoi(PpmToken(in, path));
  } catch (const std::logic_error&) {
    throw FormatError("malformed PPM header in " + path);
  }
  if (maxval != 255) throw FormatError(path + ": only maxval 255 is supported");
  Frame frame(w, h);
  in.read(reinterpret_cast<char*>(frame.pixels.data()),
          static_cast<std::streamsize>(frame.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != frame.pixels.size()) {
    throw IoError("truncated pixel data in " + path);
  }
  return frame;
}

void SavePpm(const Frame& frame, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << "P6\n" << frame.width << ' ' << frame.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(frame.pixels.data()),
            static_cast<std::streamsize>(frame.pixels.size()));
  if (!out) throw IoError("write failed for " + path);
}

// Last run of digits in the file stem, or nothing.
std::optional<std::uint64_t> FrameNumber(const fs::path& p) {
  const std::string stem = p.stem().string();
  std::size_t end = stem.size();
  while (end > 0 && !std::isdigit(static_cast<unsigned char>(stem[end - 1]))) --end;
  std::size_t begin = end;
  while (begin > 0 && std::isdigit(static_cast<unsigned char>(stem[begin - 1]))) --begin;
  if (begin == end) return std::nullopt;
  return std::stoull(stem.substr(begin, end - begin));
}

// Per destination index: source indices and weights summing to one.
struct Taps {
  std::vector<std::size_t> first;
  std::vector<std::vector<double>> weights;
};

Taps AreaTaps(std::size_t src, std::size_t dst) {
  Taps taps;
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t d = 0; d < dst; ++d) {
    const double lo = static_cast<double>(d) * scale;
    const double hi = static_cast<double>(d + 1) * scale;
    const std::size_t i0 = static_cast<std::size_t>(std::floor(lo));
    const std::size_t i1 = std::min(src, static_cast<std::size_t>(std::ceil(hi)));
    std::vector<double> w;
    for (std::size_t i = i0; i < i1; ++i) {
      const double overlap = std::min(hi, static_cast<double>(i + 1)) -
                             std::max(lo, static_cast<double>(i));
      w.push_back(std::max(0.0, overlap) / scale);
    }
    taps.first.push_back(i0);
    taps.weights.push_back(std::move(w));
  }
  return taps;
}

double CatmullRom(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

// Four clamped taps per destination index.
Taps BicubicTaps(std::size_t src, std::size_t dst) {
  Taps taps;
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t d = 0; d < dst; ++d) {
    const double center = (static_cast<double>(d) + 0.5) * scale - 0.5;
    const double base = std::floor(center);
    const double t = center - base;
    std::vector<double> w = {CatmullRom(t + 1.0), CatmullRom(t), CatmullRom(1.0 - t),
                             CatmullRom(2.0 - t)};
    taps.first.push_back(static_cast<std::size_t>(static_cast<long long>(base) + 1));
    taps.weights.push_back(std::move(w));
  }
  return taps;
}

std::uint8_t ToByte(double v) {
  return static_cast<std::uint8_t>(std::round(std::clamp(v, 0.0, 255.0)));
}

}  // namespace

Frame::Frame(std::size_t width, std::size_t height)
    : width(width), height(height), pixels(width * height * 3, 0) {}

Frame::Frame(std::size_t width, std::size_t height, std::vector<std::uint8_t> pixels)
    : width(width), height(height), pixels(std::move(pixels)) {
  if (this->pixels.size() != width * height * 3) {
    throw DimensionError("frame " + std::to_string(width) + "x" + std::to_string(height) +
                         " needs " + std::to_string(width * height * 3) + " bytes, got " +
                         std::to_string(this->pixels.size()));
  }
}

Frame LoadImage(const std::string& path) { return IsPpm(path) ? LoadPpm(path) : LoadPng(path); }

void SaveImage(const Frame& frame, const std::string& path) {
  if (IsPpm(path)) {
    SavePpm(frame, path);
  } else {
    SavePng(frame, path);
  }
}

FrameSequence LoadFrameDir(const std::string& dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IoError("not a directory: " + dir);
  std::vector<std::pair<std::uint64_t, fs::path>> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = Lower(entry.path().extension().string());
    if (ext != ".png" && ext != ".ppm") continue;
    const std::optional<std::uint64_t> n = FrameNumber(entry.path());
    if (!n) continue;
    files.emplace_back(*n, entry.path());
  }
  std::sort(files.begin(), files.end());
  FrameSequence seq;
  for (const auto& [n, path] : files) {
    seq.frames.push_back(LoadImage(path.string()));
    const Frame& f = seq.frames.back();
    if (f.width != seq.frames.front().width || f.height != seq.frames.front().height) {
      throw FormatError("frame " + path.string() + " is " + std::to_string(f.width) + "x" +
                        std::to_string(f.height) + ", expected " +
                        std::to_string(seq.frames.front().width) + "x" +
                        std::to_string(seq.frames.front().height));
    }
  }
  const fs::path meta = fs::path(dir) / "meta.json";
  if (fs::exists(meta)) {
    const Bytes bytes = ReadFileBytes(meta.string());
    try {
      seq.fps = nlohmann::json::parse(bytes.begin(), bytes.end()).at("fps").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(meta.string() + ": " + e.what());
    }
    if (!(seq.fps > 0)) throw FormatError(meta.string() + ": fps must be positive");
  }
  return seq;
}

void WriteFrameDir(const FrameSequence& seq, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%06zu.png", i);
    SavePng(seq.frames[i], (fs::path(dir) / name).string());
  }
  const std::string meta = nlohmann::json{{"fps", seq.fps}}.dump() + "\n";
  WriteFileBytes((fs::path(dir) / "meta.json").string(),
                 std::span(reinterpret_cast<const std::uint8_t*>(meta.data()), meta.size()));
}

Tensor ResizeArea(const Tensor& planar, std::size_t out_height, std::size_t out_width) {
  if (planar.rank() != 3 || out_height == 0 || out_width == 0) {
    throw DimensionError("ResizeArea expects [C, H, W] and a positive target, got " +
                         ShapeToString(planar.shape()));
  }
  const std::size_t c = planar.dim(0), h = planar.dim(1), w = planar.dim(2);
  const Taps tx = AreaTaps(w, out_width), ty = AreaTaps(h, out_height);
  // Horizontal pass into [C, H, out_width], then vertical.
  std::vector<double> mid(c * h * out_width, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      const double* row = planar.data().data() + (ch * h + y) * w;
      for (std::size_t x = 0; x < out_width; ++x) {
        double s = 0.0;
        for (std::size_t k = 0; k < tx.weights[x].size(); ++k) {
          s += tx.weights[x][k] * row[tx.first[x] + k];
        }
        mid[(ch * h + y) * out_width + x] = s;
      }
    }
  }
  std::vector<double> out(c * out_height * out_width, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < out_height; ++y) {
      for (std::size_t k = 0; k < ty.weights[y].size(); ++k) {
        const double wk = ty.weights[y][k];
        const double* src = mid.data() + (ch * h + ty.first[y] + k) * out_width;
        double* dst = out.data() + (ch * out_height + y) * out_width;
        for (std::size_t x = 0; x < out_width; ++x) dst[x] += wk * src[x];
      }
    }
  }
  return Tensor({c, out_height, out_width}, std::move(out));
}

Tensor Preprocess(const Frame& frame, std::size_t target) {
  if (frame.width == 0 || frame.height == 0 || target == 0) {
    throw DimensionError("Preprocess needs a non-empty frame and target");
  }
  std::vector<double> planar(3 * frame.width * frame.height);
  for (std::size_t y = 0; y < frame.height; ++y) {
    for (std::size_t x = 0; x < frame.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        planar[(c * frame.height + y) * frame.width + x] = frame.at(x, y, c);
      }
    }
  }
  const std::size_t short_side = std::min(frame.width, frame.height);
  const std::size_t long_side = std::max(frame.width, frame.height);
  const auto scaled_long = static_cast<std::size_t>(
      std::round(static_cast<double>(long_side) * static_cast<double>(target) /
                 static_cast<double>(short_side)));
  const std::size_t rw = frame.width <= frame.height ? target : scaled_long;
  const std::size_t rh = frame.width <= frame.height ? scaled_long : target;
  Tensor resized = ResizeArea(Tensor({3, frame.height, frame.width}, std::move(planar)), rh, rw);
  const std::size_t x0 = (rw - target) / 2, y0 = (rh - target) / 2;
  std::vector<double> out(3 * target * target);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < target; ++y) {
      for (std::size_t x = 0; x < target; ++x) {
        out[(c * target + y) * target + x] = resized[(c * rh + y0 + y) * rw + x0 + x] / 255.0;
      }
    }
  }
  return Tensor({3, target, target}, std::move(out));
}

Frame TensorToFrame(const Tensor& t) {
  const bool batched = t.rank() == 4 && t.dim(0) == 1;
  if (!(t.rank() == 3 || batched) || t.dim(batched ? 1 : 0) != 3) {
    throw DimensionError("TensorToFrame expects [3, H, W] or [1, 3, H, W], got " +
                         ShapeToString(t.shape()));
  }
  const std::size_t h = t.dim(batched ? 2 : 1), w = t.dim(batched ? 3 : 2);
  Frame frame(w, h);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double v = t[(c * h + y) * w + x];
        // NaN maps to 0 rather than through an undefined cast.
        frame.at(x, y, c) = std::isnan(v) ? 0 : ToByte(v * 255.0);
      }
    }
  }
  return frame;
}

Frame ResizeBicubic(const Frame& frame, std::size_t width, std::size_t height) {
  if (frame.width == 0 || frame.height == 0 || width == 0 || height == 0) {
    throw DimensionError("ResizeBicubic needs non-empty source and target");
  }
  const Taps tx = BicubicTaps(frame.width, width), ty = BicubicTaps(frame.height, height);
  auto clamp_index = [](std::size_t first, std::size_t k, std::size_t n) {
    // `first` is offset by one so that the leftmost tap index is first − 1.
    const long long i = static_cast<long long>(first + k) - 2;
    return static_cast<std::size_t>(std::clamp<long long>(i, 0, static_cast<long long>(n) - 1));
  };
  std::vector<double> mid(frame.height * width * 3);
  for (std::size_t y = 0; y < frame.height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
          s += tx.weights[x][k] * frame.at(clamp_index(tx.first[x], k, frame.width), y, c);
        }
        mid[(y * width + x) * 3 + c] = s;
      }
    }
  }
  Frame out(width, height);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
          s += ty.weights[y][k] * mid[(clamp_index(ty.first[y], k, frame.height) * width + x) * 3 + c];
        }
        out.at(x, y, c) = ToByte(s);
      }
    }
  }
  return out;
}

Frame UpscaleBicubic(const Frame& frame, int factor) {
  if (factor < 1) throw std::invalid_argument("upscale factor must be >= 1");
  if (factor == 1) return frame;
  const auto f = static_cast<std::size_t>(factor);
  return ResizeBicubic(frame, frame.width * f, frame.height * f);
}

Bytes EncodeFmat(const FeatureMatrix& m) {
  ByteWriter w;
  w.Raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>("FMAT"), 4));
  w.U32(static_cast<std::uint32_t>(m.shape.size()));
  for (std::size_t d : m.shape) w.U32(static_cast<std::uint32_t>(d));
  for (double v : m.values) w.F32(static_cast<float>(v));
  return w.Take();
}

FeatureMatrix DecodeFmat(std::span<const std::uint8_t> bytes) {
  try {
    ByteReader r(bytes);
    r.Magic("FMAT");
    const std::uint32_t rank = r.U32();
    FeatureMatrix m;
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      m.shape.push_back(r.U32());
      n *= m.shape.back();
    }
    if ((bytes.size() - r.offset()) != 4 * n) {
      throw FormatError("FMAT payload of " + std::to_string(bytes.size() - r.offset()) +
                        " bytes does not match shape " + ShapeToString(m.shape));
    }
    m.values.resize(n);
    for (double& v : m.values) v = r.F32();
    return m;
  } catch (const ParseError& e) {
    throw FormatError(std::string("FMAT: ") + e.what());
  }
}

nlohmann::json FeatureMatrixToJson(const FeatureMatrix& m) {
  return {{"shape", m.shape}, {"data", m.values}};
}

FeatureMatrix FeatureMatrixFromJson(const nlohmann::json& j) {
  FeatureMatrix m;
  try {
    m.shape = j.at("shape").get<Shape>();
    m.values = j.at("data").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("feature JSON: ") + e.what());
  }
  std::size_t n = 1;
  for (std::size_t d : m.shape) n *= d;
  if (n != m.values.size()) {
    throw FormatError("feature JSON shape " + ShapeToString(m.shape) + " needs " +
                      std::to_string(n) + " values, got " + std::to_string(m.values.size()));
  }
  return m;
}

FeatureMatrix LoadFeatureMatrix(const std::string& path) {
  const Bytes bytes = ReadFileBytes(path);
  auto first = std::find_if(bytes.begin(), bytes.end(), [](std::uint8_t b) { return !std::isspace(b); });
  if (first != bytes.end() && *first == '{') {
    nlohmann::json j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (j.is_discarded()) throw FormatError(path + ": invalid JSON");
    return FeatureMatrixFromJson(j);
  }
  try {
    return DecodeFmat(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void WriteFeatureMatrix(const FeatureMatrix& m, const std::string& path) {
  if (Lower(fs::path(path).extension().string()) == ".json") {
    const std::string text = FeatureMatrixToJson(m).dump() + "\n";
    WriteFileBytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  } else {
    WriteFileBytes(path, EncodeFmat(m));
  }
}

FeatureMatrix MaxPoolFeatures(const FeatureMatrix& m, std::size_t window) {
  if (m.shape.empty()) throw DimensionError("cannot pool a rank-0 feature matrix");
  const std::size_t last = m.shape.back();
  if (window == 0 || last % window != 0) {
    std::string valid;
    for (std::size_t d = 1; d <= last; ++d) {
      if (last % d == 0) valid += (valid.empty() ? "" : ", ") + std::to_string(d);
    }
    throw DimensionError("window " + std::to_string(window) + " does not divide last dimension " +
                         std::to_string(last) + "; valid windows: " + valid);
  }
  FeatureMatrix out;
  out.shape = m.shape;
  out.shape.back() = last / window;
  out.values.reserve(m.values.size() / window);
  for (std::size_t i = 0; i < m.values.size(); i += window) {
    out.values.push_back(*std::max_element(m.values.begin() + i, m.values.begin() + i + window));
  }
  return out;
}

Tensor FeatureMatrixToTensor(const FeatureMatrix& m) { return Tensor(m.shape, m.values); }

FeatureMatrix TensorToFeatureMatrix(const Tensor& t) { return {t.shape(), t.ToVector()}; }

}  // namespace gradleak
