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
// Saliency extraction: vanilla input gradients and their SmoothGrad
// average under Gaussian input perturbations.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "psslforge/common.hpp"
#include "psslforge/image.hpp"
#include "psslforge/net.hpp"

namespace pssl {

// Per-pixel relevance scores. Scores are stored as float32; normalized marks
// a map already min-max rescaled to [0, 1], degenerate marks a map whose
// scores were all equal before normalization (rescaling is undefined there,
// so the scores are zeroed instead).
struct SaliencyMap {
  int width = 0, height = 0;
  std::vector<float> scores;
  bool normalized = false;
  bool degenerate = false;

  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
};

struct SmoothGradConfig {
  int n_samples = 25;
  double noise_sigma = 0.15;
  std::uint64_t seed = 0;
};

inline void validate_smoothgrad_config(const SmoothGradConfig& cfg) {
  if (cfg.n_samples < 1) throw ConfigError("smoothgrad needs at least one sample");
  if (!(cfg.noise_sigma >= 0.0)) throw ConfigError("noise sigma must be >= 0");
}

// argmax over logits; ties resolve to the smaller class index.
inline int predicted_class(const ClassifierNet& net, const Image& img) {
  std::vector<double> logits = forward_classify(net, img);
  int best = 0;
  for (int k = 1; k < static_cast<int>(logits.size()); ++k)
    if (logits[static_cast<std::size_t>(k)] > logits[static_cast<std::size_t>(best)]) best = k;
  return best;
}

// Pixel score = max over channels of |d logit[class_id] / d input|.
inline SaliencyMap vanilla_saliency(const ClassifierNet& net, const Image& img, int class_id) {
  std::vector<double> g = grad_input(net, img, class_id);
  SaliencyMap map;
  map.width = img.width;
  map.height = img.height;
  map.scores.resize(img.pixel_count());
  const int C = img.channels;
  for (std::size_t p = 0; p < map.scores.size(); ++p) {
    double best = 0.0;
    for (int c = 0; c < C; ++c) best = std::max(best, std::fabs(g[p * C + c]));
    map.scores[p] = static_cast<float>(best);
  }
  return map;
}

// SmoothGrad: the mean of vanilla saliency over n_samples Gaussian input
// perturbations.
//
// Noise stream contract: one GaussianStream is seeded with cfg.seed and read
// strictly sequentially, samples in the outer loop, and within each sample
// one draw per image value in row-major channel-interleaved order (the Image
// data order). Perturbed inputs are clipped back to [0, 1]. This makes the
// output a pure function of (net, img, class_id, cfg).
inline SaliencyMap smoothgrad(const ClassifierNet& net, const Image& img, int class_id,
                              const SmoothGradConfig& cfg) {
  validate_smoothgrad_config(cfg);
  GaussianStream noise(cfg.seed);
  std::vector<double> acc(img.pixel_count(), 0.0);
  Image perturbed = img;
  const int C = img.channels;
  for (int s = 0; s < cfg.n_samples; ++s) {
    for (std::size_t i = 0; i < img.data.size(); ++i)
      perturbed.data[i] = std::clamp(img.data[i] + cfg.noise_sigma * noise.next(), 0.0, 1.0);
    std::vector<double> g = grad_input(net, perturbed, class_id);
    for (std::size_t p = 0; p < acc.size(); ++p) {
      double best = 0.0;
      for (int c = 0; c < C; ++c) best = std::max(best, std::fabs(g[p * C + c]));
      acc[p] += best;
    }
  }
  SaliencyMap map;
  map.width = img.width;
  map.height = img.height;
  map.scores.resize(acc.size());
  for (std::size_t p = 0; p < acc.size(); ++p)
    map.scores[p] = static_cast<float>(acc[p] / static_cast<double>(cfg.n_samples));
  return map;
}

// Rescales scores to [0, 1] by (v - min) / (max - min). A constant map has
// no defined rescaling; it comes back all-zero with degenerate set.
inline SaliencyMap minmax_normalize(const SaliencyMap& in) {
  if (in.scores.empty()) throw ShapeError("cannot normalize an empty saliency map");
  SaliencyMap out = in;
  float lo = in.scores[0], hi = in.scores[0];
  for (float v : in.scores) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi == lo) {
    std::fill(out.scores.begin(), out.scores.end(), 0.0f);
    out.degenerate = true;
  } else {
    float range = hi - lo;
    for (float& v : out.scores) v = (v - lo) / range;
  }
  out.normalized = true;
  return out;
}

// Raw saliency dump: width u32 LE, height u32 LE, then float32 LE scores in
// row-major order.
inline void save_saliency_raw(const SaliencyMap& map, const std::filesystem::path& path) {
  std::vector<std::uint8_t> buf;
  buf.reserve(8 + map.scores.size() * 4);
  put_u32le(buf, static_cast<std::uint32_t>(map.width));
  put_u32le(buf, static_cast<std::uint32_t>(map.height));
  for (float v : map.scores) put_f32le(buf, v);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write saliency file " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline SaliencyMap load_saliency_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open saliency file " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 8) throw FormatError("saliency file too short: " + path.string());
  SaliencyMap map;
  map.width = static_cast<int>(get_u32le(buf.data()));
  map.height = static_cast<int>(get_u32le(buf.data() + 4));
  std::size_t n = map.pixel_count();
  if (buf.size() != 8 + n * 4)
    throw FormatError("saliency payload truncated: expected " + std::to_string(n * 4) + " bytes, got " +
                      std::to_string(buf.size() - 8));
  map.scores.resize(n);
  for (std::size_t i = 0; i < n; ++i) map.scores[i] = get_f32le(buf.data() + 8 + i * 4);
  return map;
}

}  // namespace pssl
