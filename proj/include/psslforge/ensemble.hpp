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
// Cross-model saliency ensembling: the per-pixel mean of normalized
// per-model maps.

#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "psslforge/common.hpp"
#include "psslforge/saliency.hpp"

namespace pssl {

struct EnsembleConfig {
  int num_models = 5;
  int minimum_recommended = 15;

  bool below_recommended() const { return num_models < minimum_recommended; }
};

inline void validate_ensemble_config(const EnsembleConfig& cfg) {
  if (cfg.num_models < 1) throw ConfigError("ensemble needs at least one model");
}

// Per-pixel mean over models. Each pixel's contributions are sorted by value
// before a 64-bit accumulation, so the result is bit-identical under any
// permutation of the input maps, and the mean of M identical maps reproduces
// the input exactly. Inputs must all be normalized and share dimensions.
// The result is degenerate only when every input map is degenerate.
inline SaliencyMap ensemble(const std::vector<SaliencyMap>& maps) {
  if (maps.empty()) throw ShapeError("cannot ensemble zero saliency maps");
  const SaliencyMap& first = maps[0];
  for (const SaliencyMap& m : maps) {
    if (!m.normalized) throw ConfigError("ensemble inputs must be normalized saliency maps");
    if (m.width != first.width || m.height != first.height)
      throw ShapeError("saliency map dimensions differ: " + std::to_string(first.width) + "x" +
                       std::to_string(first.height) + " vs " + std::to_string(m.width) + "x" +
                       std::to_string(m.height));
  }
  SaliencyMap out;
  out.width = first.width;
  out.height = first.height;
  out.normalized = true;
  out.degenerate = std::all_of(maps.begin(), maps.end(), [](const SaliencyMap& m) { return m.degenerate; });
  const std::size_t n = first.scores.size();
  const double count = static_cast<double>(maps.size());
  out.scores.resize(n);
  std::vector<double> vals(maps.size());
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t m = 0; m < maps.size(); ++m) vals[m] = static_cast<double>(maps[m].scores[p]);
    std::sort(vals.begin(), vals.end());
    double sum = 0.0;
    for (double v : vals) sum += v;
    out.scores[p] = static_cast<float>(sum / count);
  }
  return out;
}

}  // namespace pssl
