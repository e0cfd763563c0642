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
// Pseudo-label dataset construction: per-model SmoothGrad saliency on each
// image, min-max normalization, cross-model ensembling, decile quantization,
// and packed record output with a manifest.

#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "psslforge/common.hpp"
#include "psslforge/ensemble.hpp"
#include "psslforge/image.hpp"
#include "psslforge/net.hpp"
#include "psslforge/pssl.hpp"
#include "psslforge/saliency.hpp"
#include "psslforge/train.hpp"

namespace pssl {

struct BuildInput {
  Image image;
  int class_id = 0;
  std::string stem;
};

struct BuildReport {
  std::size_t processed = 0;
  std::size_t skipped = 0;
  double mean_top_decile_fraction = 0.0;
  double wall_seconds = 0.0;
  std::vector<std::size_t> per_class_counts;
};

// Dropped while a build is in flight so an interrupted output directory is
// recognizable; removed on success.
inline constexpr const char* kIncompleteMarker = ".pssl-incomplete";

// Computes the ensemble decile map for one image. Every model shares the
// image's noise stream (seeded sg.seed XOR image_index by the caller) and
// explains its own predicted class.
inline DecileMap ensemble_deciles(const std::vector<ClassifierNet>& models, const Image& img,
                                  const SmoothGradConfig& sg) {
  if (models.empty()) throw ConfigError("need at least one model to build pseudo labels");
  std::vector<SaliencyMap> maps;
  maps.reserve(models.size());
  for (const ClassifierNet& net : models) {
    int target = predicted_class(net, img);
    maps.push_back(minmax_normalize(smoothgrad(net, img, target, sg)));
  }
  return decile_quantize(ensemble(maps));
}

// Builds one record per input image, skipping images whose ensemble map has
// an empty top decile (a fully degenerate explanation carries no foreground
// signal). Records land at <out_dir>/<stem>.pssl and the manifest lists them
// in input order regardless of worker count.
inline BuildReport build_dataset(const std::vector<ClassifierNet>& models,
                                 const std::vector<BuildInput>& inputs, const SmoothGradConfig& sg,
                                 int num_classes, const std::filesystem::path& out_dir, int workers = 1) {
  if (models.empty()) throw ConfigError("need at least one model to build pseudo labels");
  if (inputs.empty()) throw ConfigError("no input images to build from");
  validate_smoothgrad_config(sg);
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  auto t0 = std::chrono::steady_clock::now();
  std::filesystem::create_directories(out_dir);
  std::filesystem::path marker = out_dir / kIncompleteMarker;
  {
    std::ofstream m(marker);
    if (!m) throw IoError("cannot create " + marker.string());
  }

  struct Outcome {
    bool kept = false;
    double top_fraction = 0.0;
  };
  std::vector<Outcome> outcomes(inputs.size());

  parallel_for(inputs.size(), workers, [&](std::size_t i) {
    const BuildInput& in = inputs[i];
    if (in.class_id < 0 || in.class_id >= num_classes)
      throw ConfigError("input class " + std::to_string(in.class_id) + " outside [0, " +
                        std::to_string(num_classes) + ")");
    SmoothGradConfig per_image = sg;
    per_image.seed = sg.seed ^ static_cast<std::uint64_t>(i);
    DecileMap dm = ensemble_deciles(models, in.image, per_image);
    std::size_t top = count_decile(dm, 9);
    if (top == 0) return;
    PsslRecord rec{dm.width, dm.height, in.class_id, dm.deciles};
    save_record(rec, out_dir / (in.stem + ".pssl"));
    outcomes[i].kept = true;
    outcomes[i].top_fraction = static_cast<double>(top) / static_cast<double>(dm.pixel_count());
  });

  BuildReport report;
  report.per_class_counts.assign(static_cast<std::size_t>(num_classes), 0);
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!outcomes[i].kept) {
      ++report.skipped;
      continue;
    }
    ++report.processed;
    report.mean_top_decile_fraction += outcomes[i].top_fraction;
    ++report.per_class_counts[static_cast<std::size_t>(inputs[i].class_id)];
    entries.push_back({inputs[i].stem + ".pssl", inputs[i].class_id});
  }
  if (report.processed > 0) report.mean_top_decile_fraction /= static_cast<double>(report.processed);
  save_manifest(entries, out_dir / "manifest.tsv");
  std::filesystem::remove(marker);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// Loads (image, pseudo mask) training pairs by joining a record directory's
// manifest against the image directory that produced it. Record stems map to
// <stem>.ppm images; the pseudo mask assigns the record's class to top-decile
// pixels and background (= num_classes) elsewhere.
inline std::vector<SegSample> load_pretrain_samples(const std::filesystem::path& pssl_dir,
                                                    const std::filesystem::path& image_dir,
                                                    int num_classes) {
  if (std::filesystem::exists(pssl_dir / kIncompleteMarker))
    throw IoError("record directory " + pssl_dir.string() + " is from an interrupted build");
  std::vector<ManifestEntry> entries = load_manifest(pssl_dir / "manifest.tsv");
  std::vector<SegSample> samples;
  samples.reserve(entries.size());
  for (const ManifestEntry& e : entries) {
    PsslRecord rec = load_record(pssl_dir / e.record_path);
    if (rec.class_id != e.class_id)
      throw FormatError("class mismatch between manifest (" + std::to_string(e.class_id) +
                        ") and record (" + std::to_string(rec.class_id) + ") for " + e.record_path);
    std::filesystem::path stem = std::filesystem::path(e.record_path).stem();
    Image img = load_image(image_dir / (stem.string() + ".ppm"));
    if (img.width != rec.width || img.height != rec.height)
      throw ShapeError("image and record dimensions differ for " + e.record_path);
    samples.push_back({std::move(img), pseudo_mask(record_deciles(rec), rec.class_id, num_classes)});
  }
  return samples;
}

}  // namespace pssl
