// Copyright 2026 The psslforge Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// Image and mask value types with PGM (P5) / PPM (P6) binary I/O, plus the
// tab-separated dataset manifest. Pixel bytes are mapped to [0,1] on load and
// re-quantized with round-half-up on save, so save->load round-trips are
// byte-identical.

#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "psslforge/common.hpp"

namespace pssl {

// Row-major, channel-interleaved, values in [0,1]. channels is 1 or 3.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;

  double& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
};

inline Image make_image(int width, int height, int channels, double fill = 0.0) {
  if (width < 1 || height < 1 || (channels != 1 && channels != 3))
    throw ConfigError("image dimensions must be positive with 1 or 3 channels");
  Image img;
  img.width = width;
  img.height = height;
  img.channels = channels;
  img.data.assign(static_cast<std::size_t>(width) * height * channels, fill);
  return img;
}

inline void validate_image(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ShapeError("channels must be 1 or 3");
  if (img.data.size() != static_cast<std::size_t>(img.width) * img.height * img.channels)
    throw ShapeError("image data length does not match width*height*channels");
  for (double v : img.data)
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) throw ShapeError("image values must be finite and in [0,1]");
}

// Per-pixel class labels; foreground classes are [0, K) and the background
// index is K. Shares dimensions with its paired Image.
struct GroundTruthMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint16_t> labels;

  std::uint16_t at(int x, int y) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::uint16_t& at(int x, int y) { return labels[static_cast<std::size_t>(y) * width + x]; }
};

struct ManifestEntry {
  std::string record_path;
  int class_id = 0;
};

namespace detail {

// Reads one PNM header token, skipping whitespace and '#' comments.
inline std::string pnm_token(std::istream& in, const char* field) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw FormatError(std::string("truncated header while reading ") + field);
  return tok;
}

inline int pnm_int(std::istream& in, const char* field) {
  std::string tok = pnm_token(in, field);
  int value = 0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
  if (ec != std::errc() || ptr != tok.data() + tok.size() || value < 1)
    throw FormatError(std::string("invalid ") + field + " '" + tok + "'");
  return value;
}

}  // namespace detail

// Loads a binary PGM (P5, 1 channel) or PPM (P6, 3 channels) with maxval 255.
inline Image load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic = detail::pnm_token(in, "magic");
  int channels;
  if (magic == "P5")
    channels = 1;
  else if (magic == "P6")
    channels = 3;
  else
    throw FormatError("unsupported magic '" + magic + "' in " + path.string());
  int width = detail::pnm_int(in, "width");
  int height = detail::pnm_int(in, "height");
  int maxval = detail::pnm_int(in, "maxval");
  if (maxval != 255) throw FormatError("unsupported maxval " + std::to_string(maxval) + " (must be 255)");
  std::size_t n = static_cast<std::size_t>(width) * height * channels;
  std::vector<std::uint8_t> bytes(n);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw FormatError("truncated payload: expected " + std::to_string(n) + " bytes, got " +
                      std::to_string(in.gcount()));
  Image img = make_image(width, height, channels);
  for (std::size_t i = 0; i < n; ++i) img.data[i] = bytes[i] / 255.0;
  return img;
}

// Quantization rule: byte = floor(v*255 + 0.5) (round half up).
inline std::uint8_t quantize_byte(double v) {
  double q = std::floor(v * 255.0 + 0.5);
  if (q < 0.0) q = 0.0;
  if (q > 255.0) q = 255.0;
  return static_cast<std::uint8_t>(q);
}

inline void save_image(const Image& img, const std::filesystem::path& path) {
  validate_image(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
  std::vector<std::uint8_t> bytes(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) bytes[i] = quantize_byte(img.data[i]);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

// Masks travel as P5 files whose bytes are raw class indices (not scaled).
inline void save_mask(const GroundTruthMask& mask, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << mask.width << " " << mask.height << "\n255\n";
  std::vector<std::uint8_t> bytes(mask.labels.size());
  for (std::size_t i = 0; i < mask.labels.size(); ++i) {
    if (mask.labels[i] > 255) throw FormatError("mask label exceeds 255, cannot store as PGM");
    bytes[i] = static_cast<std::uint8_t>(mask.labels[i]);
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline GroundTruthMask load_mask(const std::filesystem::path& path) {
  Image raw = load_image(path);
  if (raw.channels != 1) throw FormatError("mask file must be single-channel PGM: " + path.string());
  GroundTruthMask mask;
  mask.width = raw.width;
  mask.height = raw.height;
  mask.labels.resize(raw.data.size());
  for (std::size_t i = 0; i < raw.data.size(); ++i)
    mask.labels[i] = static_cast<std::uint16_t>(std::lround(raw.data[i] * 255.0));
  return mask;
}

// Manifest format: one `<record_path>\t<class_id>` per line; blank lines and
// lines starting with '#' are skipped.
inline std::vector<ManifestEntry> parse_manifest(std::istream& in, const std::string& origin) {
  std::vector<ManifestEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw FormatError(origin + ":" + std::to_string(line_no) + ": missing tab delimiter");
    std::string path = line.substr(0, tab);
    if (path.empty())
      throw FormatError(origin + ":" + std::to_string(line_no) + ": empty record path");
    std::string id_str = line.substr(tab + 1);
    int class_id = 0;
    auto [ptr, ec] = std::from_chars(id_str.data(), id_str.data() + id_str.size(), class_id);
    if (ec != std::errc() || ptr != id_str.data() + id_str.size() || class_id < 0)
      throw FormatError(origin + ":" + std::to_string(line_no) + ": invalid class id '" + id_str + "'");
    entries.push_back({std::move(path), class_id});
  }
  return entries;
}

inline std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  return parse_manifest(in, path.filename().string());
}

inline void save_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto& e : entries) out << e.record_path << "\t" << e.class_id << "\n";
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace pssl
