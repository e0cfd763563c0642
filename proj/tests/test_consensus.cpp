// Copyright 2026 The PSSLForge Authors. All Rights Reserved.
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

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "psslforge/ensemble.hpp"

using namespace pssl;

namespace {

SaliencyMap random_normalized_map(int width, int height, std::uint64_t seed) {
  SaliencyMap map;
  map.width = width;
  map.height = height;
  map.scores.resize(map.pixel_count());
  SplitMix64 rng(seed);
  for (auto& v : map.scores) v = static_cast<float>(rng.uniform());
  // Pin the extremes so the map is genuinely min-max scaled.
  map.scores.front() = 0.0f;
  map.scores.back() = 1.0f;
  map.normalized = true;
  return map;
}

}  // namespace

TEST_CASE("ensemble matches a naive per-pixel mean") {
  std::vector<SaliencyMap> maps;
  for (std::uint64_t s = 0; s < 7; ++s) maps.push_back(random_normalized_map(9, 5, s + 1));
  SaliencyMap out = ensemble(maps);
  REQUIRE(out.scores.size() == maps[0].scores.size());
  for (std::size_t p = 0; p < out.scores.size(); ++p) {
    double mean = 0.0;
    for (const auto& m : maps) mean += m.scores[p];
    mean /= static_cast<double>(maps.size());
    CHECK_THAT(static_cast<double>(out.scores[p]), Catch::Matchers::WithinAbs(mean, 1e-6));
  }
}

TEST_CASE("ensemble output is bit-identical under input permutation") {
  std::vector<SaliencyMap> maps;
  for (std::uint64_t s = 0; s < 6; ++s) maps.push_back(random_normalized_map(8, 8, 100 + s));
  SaliencyMap forward = ensemble(maps);

  std::vector<SaliencyMap> reversed(maps.rbegin(), maps.rend());
  CHECK(ensemble(reversed).scores == forward.scores);

  std::vector<SaliencyMap> rotated(maps.begin() + 3, maps.end());
  rotated.insert(rotated.end(), maps.begin(), maps.begin() + 3);
  CHECK(ensemble(rotated).scores == forward.scores);
}

TEST_CASE("ensembling M copies of one map reproduces it exactly") {
  SaliencyMap base = random_normalized_map(7, 6, 55);
  for (std::size_t m : {1u, 2u, 3u, 5u, 8u}) {
    std::vector<SaliencyMap> maps(m, base);
    SaliencyMap out = ensemble(maps);
    CHECK(out.scores == base.scores);
  }
}

TEST_CASE("ensemble of a single map is the identity") {
  SaliencyMap base = random_normalized_map(4, 4, 77);
  SaliencyMap out = ensemble({base});
  CHECK(out.scores == base.scores);
  CHECK(out.width == base.width);
  CHECK(out.height == base.height);
  CHECK(out.normalized);
  CHECK_FALSE(out.degenerate);
}

TEST_CASE("ensemble of normalized maps stays within the unit interval") {
  std::vector<SaliencyMap> maps;
  for (std::uint64_t s = 0; s < 5; ++s) maps.push_back(random_normalized_map(10, 10, 200 + s));
  SaliencyMap out = ensemble(maps);
  for (float v : out.scores) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("ensemble is degenerate only when every input is degenerate") {
  SaliencyMap flat;
  flat.width = 3;
  flat.height = 3;
  flat.scores.assign(9, 0.0f);
  flat.normalized = true;
  flat.degenerate = true;

  CHECK(ensemble({flat, flat}).degenerate);

  SaliencyMap live = random_normalized_map(3, 3, 9);
  SaliencyMap mixed = ensemble({flat, live});
  CHECK_FALSE(mixed.degenerate);
  // A flat map dilutes but does not erase the live signal.
  for (std::size_t p = 0; p < mixed.scores.size(); ++p)
    CHECK(mixed.scores[p] == live.scores[p] / 2.0f);
}

TEST_CASE("ensemble rejects malformed input sets") {
  CHECK_THROWS_AS(ensemble({}), ShapeError);

  SaliencyMap raw = random_normalized_map(4, 4, 3);
  raw.normalized = false;
  CHECK_THROWS_AS(ensemble({raw}), ConfigError);

  SaliencyMap a = random_normalized_map(4, 4, 4);
  SaliencyMap b = random_normalized_map(5, 4, 5);
  CHECK_THROWS_AS(ensemble({a, b}), ShapeError);
}

TEST_CASE("ensemble config flags undersized committees") {
  EnsembleConfig cfg;
  cfg.num_models = 5;
  CHECK(cfg.below_recommended());
  cfg.num_models = 15;
  CHECK_FALSE(cfg.below_recommended());
  cfg.num_models = 20;
  CHECK_FALSE(cfg.below_recommended());

  cfg.num_models = 0;
  CHECK_THROWS_AS(validate_ensemble_config(cfg), ConfigError);
  cfg.num_models = 1;
  CHECK_NOTHROW(validate_ensemble_config(cfg));
}
