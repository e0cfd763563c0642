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
// Synthetic "blob" dataset: each image holds exactly one foreground shape of
// its class on a noisy gray background, with the paired ground-truth mask.
// Class colors are chosen so that at noise 0 every foreground pixel is
// strictly brighter in its class channel than any background pixel.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "psslforge/common.hpp"
#include "psslforge/image.hpp"

namespace pssl {

struct BlobConfig {
  int image_size = 32;       // square images
  int num_classes = 4;       // foreground classes; background index = num_classes
  double noise_level = 0.0;  // in [0,1]
  int count = 1;             // images to generate (classes assigned round-robin)
};

inline void validate_blob_config(const BlobConfig& cfg) {
  if (cfg.image_size < 8) throw ConfigError("image_size must be >= 8");
  if (cfg.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (cfg.noise_level < 0.0 || cfg.noise_level > 1.0) throw ConfigError("noise_level must be in [0,1]");
  if (cfg.count < 0) throw ConfigError("count must be >= 0");
}

struct BlobSample {
  Image image;
  GroundTruthMask mask;
  int class_id = 0;
};

namespace detail {

// Shape family cycles with the class index: disk, rectangle, diamond, triangle.
inline bool shape_contains(int family, double cx, double cy, double rx, double ry, int x, int y) {
  double dx = x + 0.5 - cx;
  double dy = y + 0.5 - cy;
  switch (family % 4) {
    case 0: return (dx * dx) / (rx * rx) + (dy * dy) / (ry * ry) <= 1.0;   // disk/ellipse
    case 1: return std::fabs(dx) <= rx && std::fabs(dy) <= ry;             // rectangle
    case 2: return std::fabs(dx) / rx + std::fabs(dy) / ry <= 1.0;         // diamond
    default:                                                               // triangle (apex up)
      return dy >= -ry && dy <= ry && std::fabs(dx) <= rx * (dy + ry) / (2.0 * ry);
  }
}

// Bright-channel bitmask per class: RG, RB, GB, RGB, R, G, B, cycling.
// Multi-channel colors lead so that small class sets share every bright
// channel pairwise; no class is then recognizable purely by the absence of
// the other classes' channels.
inline unsigned class_channel_bits(int class_id) {
  static constexpr unsigned kOrder[7] = {3u, 5u, 6u, 7u, 1u, 2u, 4u};
  return kOrder[class_id % 7];
}

}  // namespace detail

// Pure function of (config, seed): identical calls produce bit-identical
// samples. Image i gets class i % num_classes.
inline std::vector<BlobSample> synth_blob_dataset(const BlobConfig& cfg, std::uint64_t seed) {
  validate_blob_config(cfg);
  const int S = cfg.image_size;
  const double bg_base = 0.25;
  const double fg_bright_lo = 0.75, fg_bright_hi = 0.95;
  const double fg_dim = 0.08;

  std::vector<BlobSample> out;
  out.reserve(static_cast<std::size_t>(cfg.count));
  for (int i = 0; i < cfg.count; ++i) {
    SplitMix64 rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    BlobSample sample;
    sample.class_id = i % cfg.num_classes;
    sample.image = make_image(S, S, 3);
    sample.mask.width = S;
    sample.mask.height = S;
    sample.mask.labels.assign(static_cast<std::size_t>(S) * S, static_cast<std::uint16_t>(cfg.num_classes));

    // Shape geometry: target area roughly 7-12% of the image, placed fully inside.
    double area_frac = rng.uniform(0.07, 0.12);
    double area = area_frac * S * S;
    double aspect = rng.uniform(0.7, 1.4);
    int family = sample.class_id % 4;
    double rx, ry;
    switch (family) {
      case 0: ry = std::sqrt(area / (3.14159265358979323846 * aspect)); rx = ry * aspect; break;
      case 1: ry = std::sqrt(area / (4.0 * aspect)) ; rx = ry * aspect; break;
      case 2: ry = std::sqrt(area / (2.0 * aspect)); rx = ry * aspect; break;
      default: ry = std::sqrt(area / (2.0 * aspect)); rx = ry * aspect; break;
    }
    rx = std::max(1.5, rx);
    ry = std::max(1.5, ry);
    double max_half = (S - 3.0) / 2.0;  // keep the shape fully inside
    rx = std::min(rx, max_half);
    ry = std::min(ry, max_half);
    double margin_x = rx + 1.0, margin_y = ry + 1.0;
    double cx = rng.uniform(margin_x, S - margin_x);
    double cy = rng.uniform(margin_y, S - margin_y);

    double brightness = rng.uniform(fg_bright_lo, fg_bright_hi);
    unsigned bits = detail::class_channel_bits(sample.class_id);

    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) {
        bool fg = detail::shape_contains(family, cx, cy, rx, ry, x, y);
        for (int c = 0; c < 3; ++c) {
          double v;
          if (fg) {
            v = (bits & (1u << c)) ? brightness : fg_dim;
          } else {
            v = bg_base;
          }
          double noise = cfg.noise_level * rng.uniform(-0.4, 0.4);
          v += noise;
          if (v < 0.0) v = 0.0;
          if (v > 1.0) v = 1.0;
          sample.image.at(x, y, c) = v;
        }
        if (fg) sample.mask.at(x, y) = static_cast<std::uint16_t>(sample.class_id);
      }
    }
    out.push_back(std::move(sample));
  }
  return out;
}

inline std::string blob_stem(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%05d", index);
  return buf;
}

inline std::filesystem::path mask_path_for(const std::filesystem::path& image_path) {
  std::filesystem::path p = image_path;
  p.replace_extension();
  p += ".mask.pgm";
  return p;
}

// Writes images, masks, and manifest.tsv into dir. Layout:
//   img_00000.ppm, img_00000.mask.pgm, ..., manifest.tsv
inline void write_blob_dataset(const std::vector<BlobSample>& samples, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<ManifestEntry> manifest;
  manifest.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::string stem = blob_stem(static_cast<int>(i));
    save_image(samples[i].image, dir / (stem + ".ppm"));
    save_mask(samples[i].mask, dir / (stem + ".mask.pgm"));
    manifest.push_back({stem + ".ppm", samples[i].class_id});
  }
  save_manifest(manifest, dir / "manifest.tsv");
}

// Loads a dataset directory written by write_blob_dataset (or any directory
// with the same manifest + derived-mask layout). Masks are optional.
inline std::vector<BlobSample> load_blob_dataset(const std::filesystem::path& dir, bool need_masks = true) {
  auto manifest = load_manifest(dir / "manifest.tsv");
  std::vector<BlobSample> out;
  out.reserve(manifest.size());
  for (const auto& entry : manifest) {
    BlobSample s;
    s.image = load_image(dir / entry.record_path);
    s.class_id = entry.class_id;
    auto mpath = mask_path_for(dir / entry.record_path);
    if (std::filesystem::exists(mpath)) {
      s.mask = load_mask(mpath);
    } else if (need_masks) {
      throw IoError("missing mask file " + mpath.string());
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace pssl
