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
// Pseudo-label records: rank-based decile quantization of saliency maps and
// the packed on-disk record format.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "psslforge/common.hpp"
#include "psslforge/image.hpp"
#include "psslforge/saliency.hpp"

namespace pssl {

// Per-pixel decile indices, each in [0, 9].
struct DecileMap {
  int width = 0, height = 0;
  std::vector<std::uint8_t> deciles;

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
};

// decile(x) = floor(rank(x) * 10 / N) where rank(x) counts pixels with a
// strictly smaller score, so tied scores share a decile and the arithmetic
// is exact in integers. rank <= N-1 keeps every decile below 10.
inline DecileMap decile_quantize(const SaliencyMap& map) {
  const std::size_t n = map.scores.size();
  if (n == 0) throw ShapeError("cannot quantize an empty saliency map");
  DecileMap out;
  out.width = map.width;
  out.height = map.height;
  out.deciles.resize(n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return map.scores[a] < map.scores[b]; });
  std::size_t run_start = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (map.scores[order[r]] != map.scores[order[run_start]]) run_start = r;
    std::size_t d = run_start * 10 / n;
    if (d > 9) throw Error("decile index exceeded 9, quantization invariant broken");
    out.deciles[order[r]] = static_cast<std::uint8_t>(d);
  }
  return out;
}

inline std::size_t count_decile(const DecileMap& map, int decile) {
  return static_cast<std::size_t>(
      std::count(map.deciles.begin(), map.deciles.end(), static_cast<std::uint8_t>(decile)));
}

// Pseudo segmentation labels: top-decile pixels take the image-level class,
// everything else is background.
inline GroundTruthMask pseudo_mask(const DecileMap& map, int class_id, int background_index) {
  if (class_id < 0 || class_id >= background_index)
    throw ConfigError("class_id must lie in [0, background_index)");
  GroundTruthMask mask;
  mask.width = map.width;
  mask.height = map.height;
  mask.labels.resize(map.deciles.size());
  for (std::size_t i = 0; i < map.deciles.size(); ++i)
    mask.labels[i] = map.deciles[i] == 9 ? static_cast<std::uint16_t>(class_id)
                                         : static_cast<std::uint16_t>(background_index);
  return mask;
}

// One stored pseudo-label record: the full decile map plus the image-level
// class it came from.
struct PsslRecord {
  int width = 0, height = 0;
  int class_id = 0;
  std::vector<std::uint8_t> deciles;
};

// Record layout (all multi-byte fields little-endian):
//   magic "PSSL" | version u8 = 1 | width u16 | height u16 | class_id u8
// followed by deciles packed two per byte, earlier pixel in the low nibble;
// an odd pixel count pads the final high nibble with 0xF. Total size is
// exactly 10 + ceil(N / 2) bytes for N pixels.
inline constexpr std::size_t kRecordHeaderSize = 10;

inline std::size_t record_size(std::size_t pixel_count) {
  return kRecordHeaderSize + (pixel_count + 1) / 2;
}

inline std::vector<std::uint8_t> pack_record(const PsslRecord& rec) {
  if (rec.width < 1 || rec.height < 1 || rec.width > 65535 || rec.height > 65535)
    throw FormatError("record dimensions out of range: " + std::to_string(rec.width) + "x" +
                      std::to_string(rec.height));
  if (rec.class_id < 0 || rec.class_id > 255)
    throw FormatError("class id " + std::to_string(rec.class_id) + " does not fit the record header");
  const std::size_t n = static_cast<std::size_t>(rec.width) * rec.height;
  if (rec.deciles.size() != n)
    throw ShapeError("decile count does not match record dimensions");
  for (std::uint8_t d : rec.deciles)
    if (d > 9) throw FormatError("decile value " + std::to_string(d) + " out of range [0, 9]");
  std::vector<std::uint8_t> buf;
  buf.reserve(record_size(n));
  for (char c : {'P', 'S', 'S', 'L'}) buf.push_back(static_cast<std::uint8_t>(c));
  put_u8(buf, 0x01);
  put_u16le(buf, static_cast<std::uint16_t>(rec.width));
  put_u16le(buf, static_cast<std::uint16_t>(rec.height));
  put_u8(buf, static_cast<std::uint8_t>(rec.class_id));
  for (std::size_t i = 0; i < n; i += 2) {
    std::uint8_t lo = rec.deciles[i];
    std::uint8_t hi = i + 1 < n ? rec.deciles[i + 1] : std::uint8_t{0xF};
    buf.push_back(static_cast<std::uint8_t>(lo | (hi << 4)));
  }
  return buf;
}

inline PsslRecord unpack_record(const std::vector<std::uint8_t>& buf, const std::string& origin = "record") {
  if (buf.size() < kRecordHeaderSize) throw FormatError(origin + " shorter than the record header");
  if (buf[0] != 'P' || buf[1] != 'S' || buf[2] != 'S' || buf[3] != 'L')
    throw FormatError("bad magic in " + origin);
  if (buf[4] != 0x01) throw FormatError("unsupported record version " + std::to_string(buf[4]));
  PsslRecord rec;
  rec.width = get_u16le(buf.data() + 5);
  rec.height = get_u16le(buf.data() + 7);
  rec.class_id = buf[9];
  if (rec.width < 1 || rec.height < 1) throw FormatError("zero dimension in " + origin);
  const std::size_t n = static_cast<std::size_t>(rec.width) * rec.height;
  const std::size_t expected = record_size(n);
  if (buf.size() != expected)
    throw FormatError(origin + " payload truncated: expected " + std::to_string(expected) +
                      " bytes, got " + std::to_string(buf.size()));
  rec.deciles.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint8_t byte = buf[kRecordHeaderSize + i / 2];
    std::uint8_t nib = (i % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
    if (nib > 9)
      throw FormatError("decile nibble " + std::to_string(nib) + " out of range at pixel " +
                        std::to_string(i) + " in " + origin);
    rec.deciles[i] = nib;
  }
  return rec;
}

inline void save_record(const PsslRecord& rec, const std::filesystem::path& path) {
  std::vector<std::uint8_t> buf = pack_record(rec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write record " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline PsslRecord load_record(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open record " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return unpack_record(buf, path.filename().string());
}

inline DecileMap record_deciles(const PsslRecord& rec) {
  return DecileMap{rec.width, rec.height, rec.deciles};
}

}  // namespace pssl
