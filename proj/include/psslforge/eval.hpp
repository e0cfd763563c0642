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
// Evaluation: confusion matrices, intersection-over-union, pseudo-label
// agreement with ground truth, and classification readouts from per-pixel
// probabilities.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "psslforge/common.hpp"
#include "psslforge/image.hpp"
#include "psslforge/net.hpp"
#include "psslforge/pssl.hpp"

namespace pssl {

// Numerically safe softmax over one logit vector (max subtraction).
inline std::vector<double> softmax(const std::vector<double>& logits) {
  if (logits.empty()) throw ShapeError("softmax over an empty vector");
  double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

// Per-pixel softmax across channels of a logit grid.
inline PixelGrid softmax_grid(const PixelGrid& logits) {
  PixelGrid probs = logits;
  const int T = logits.channels;
  const std::size_t npix = logits.pixel_count();
  for (std::size_t p = 0; p < npix; ++p) {
    double* row = probs.v.data() + p * T;
    double mx = row[0];
    for (int t = 1; t < T; ++t) mx = std::max(mx, row[t]);
    double sum = 0.0;
    for (int t = 0; t < T; ++t) {
      row[t] = std::exp(row[t] - mx);
      sum += row[t];
    }
    for (int t = 0; t < T; ++t) row[t] /= sum;
  }
  return probs;
}

// Per-pixel argmax over channels; ties resolve to the smaller label.
inline GroundTruthMask argmax_mask(const PixelGrid& grid) {
  GroundTruthMask mask;
  mask.width = grid.width;
  mask.height = grid.height;
  mask.labels.resize(grid.pixel_count());
  const int T = grid.channels;
  for (std::size_t p = 0; p < mask.labels.size(); ++p) {
    const double* row = grid.v.data() + p * T;
    int best = 0;
    for (int t = 1; t < T; ++t)
      if (row[t] > row[best]) best = t;
    mask.labels[p] = static_cast<std::uint16_t>(best);
  }
  return mask;
}

struct ConfusionMatrix {
  int num_labels = 0;
  std::vector<std::uint64_t> counts;  // row = truth, column = prediction

  explicit ConfusionMatrix(int labels = 0)
      : num_labels(labels), counts(static_cast<std::size_t>(labels) * labels, 0) {}

  std::uint64_t& at(int truth, int pred) {
    return counts[static_cast<std::size_t>(truth) * num_labels + pred];
  }
  std::uint64_t at(int truth, int pred) const {
    return counts[static_cast<std::size_t>(truth) * num_labels + pred];
  }

  // Pixels whose truth label equals ignore_index are excluded; pass a
  // negative ignore_index to count every pixel.
  void add(const GroundTruthMask& truth, const GroundTruthMask& pred, int ignore_index = -1) {
    if (truth.width != pred.width || truth.height != pred.height)
      throw ShapeError("truth and prediction mask dimensions differ");
    for (std::size_t i = 0; i < truth.labels.size(); ++i) {
      int t = truth.labels[i], p = pred.labels[i];
      if (t == ignore_index) continue;
      if (t >= num_labels || p >= num_labels)
        throw ShapeError("label " + std::to_string(std::max(t, p)) + " outside confusion matrix with " +
                         std::to_string(num_labels) + " labels");
      ++at(t, p);
    }
  }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (std::uint64_t c : counts) s += c;
    return s;
  }
};

// Per-label IoU = diag / (row_sum + col_sum - diag). Labels absent from both
// truth and prediction have no defined IoU and come back as NaN.
inline std::vector<double> per_label_iou(const ConfusionMatrix& cm) {
  std::vector<double> iou(static_cast<std::size_t>(cm.num_labels),
                          std::numeric_limits<double>::quiet_NaN());
  for (int k = 0; k < cm.num_labels; ++k) {
    std::uint64_t row = 0, col = 0;
    for (int j = 0; j < cm.num_labels; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    std::uint64_t diag = cm.at(k, k);
    std::uint64_t denom = row + col - diag;
    if (denom == 0) continue;
    iou[static_cast<std::size_t>(k)] = static_cast<double>(diag) / static_cast<double>(denom);
  }
  return iou;
}

// Mean IoU over the labels that appear in truth or prediction.
inline double miou(const ConfusionMatrix& cm) {
  std::vector<double> iou = per_label_iou(cm);
  double sum = 0.0;
  int present = 0;
  for (double v : iou) {
    if (std::isnan(v)) continue;
    sum += v;
    ++present;
  }
  if (present == 0) throw MetricError("mean IoU undefined: no label present in truth or prediction");
  return sum / present;
}

// Agreement between a decile map's top decile and the pixels truly labeled
// class_id. Empty sets never error: a ratio with an empty denominator is 0,
// so disjoint or empty comparisons report all zeros.
struct PseudoQuality {
  std::size_t top_decile_pixels = 0;
  std::size_t truth_pixels = 0;
  std::size_t intersection = 0;
  double precision = 0.0;
  double recall = 0.0;
  double iou = 0.0;
};

inline PseudoQuality pseudo_quality(const DecileMap& deciles, const GroundTruthMask& truth, int class_id) {
  if (deciles.width != truth.width || deciles.height != truth.height)
    throw ShapeError("decile map and truth mask dimensions differ");
  PseudoQuality q;
  for (std::size_t i = 0; i < deciles.deciles.size(); ++i) {
    bool in_top = deciles.deciles[i] == 9;
    bool in_truth = truth.labels[i] == class_id;
    q.top_decile_pixels += in_top;
    q.truth_pixels += in_truth;
    q.intersection += in_top && in_truth;
  }
  auto ratio = [](std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  q.precision = ratio(q.intersection, q.top_decile_pixels);
  q.recall = ratio(q.intersection, q.truth_pixels);
  q.iou = ratio(q.intersection, q.top_decile_pixels + q.truth_pixels - q.intersection);
  return q;
}

// Image-level class from per-pixel probabilities: average the probability
// vector over all pixels, then take the argmax. The background channel
// (assumed last) is excluded unless include_background is set. Ties resolve
// to the smaller class index.
struct PixelAverageResult {
  int class_id = 0;
  std::vector<double> mean_probs;
};

inline PixelAverageResult classify_from_probs(const PixelGrid& probs, bool include_background = false) {
  if (probs.channels < 2) throw ShapeError("need at least two channels to classify");
  const int T = probs.channels;
  const std::size_t npix = probs.pixel_count();
  PixelAverageResult res;
  res.mean_probs.assign(static_cast<std::size_t>(T), 0.0);
  for (std::size_t p = 0; p < npix; ++p)
    for (int t = 0; t < T; ++t) res.mean_probs[static_cast<std::size_t>(t)] += probs.v[p * T + t];
  for (double& v : res.mean_probs) v /= static_cast<double>(npix);
  int limit = include_background ? T : T - 1;
  for (int t = 1; t < limit; ++t)
    if (res.mean_probs[static_cast<std::size_t>(t)] > res.mean_probs[static_cast<std::size_t>(res.class_id)])
      res.class_id = t;
  return res;
}

inline PixelAverageResult classify_by_pixel_average(const SegmenterNet& net, const Image& img,
                                                    bool include_background = false) {
  PixelGrid probs = softmax_grid(forward_segment(net, img));
  return classify_from_probs(probs, include_background);
}

struct SegEvalResult {
  ConfusionMatrix confusion{0};
  std::vector<double> per_label;
  double mean_iou = 0.0;
};

template <typename SampleRange>
inline SegEvalResult evaluate_segmenter(const SegmenterNet& net, const SampleRange& samples,
                                        int ignore_index = -1) {
  SegEvalResult res;
  res.confusion = ConfusionMatrix(net.arch.num_classes + 1);
  for (const auto& s : samples) {
    GroundTruthMask pred = argmax_mask(forward_segment(net, s.image));
    res.confusion.add(s.mask, pred, ignore_index);
  }
  res.per_label = per_label_iou(res.confusion);
  res.mean_iou = miou(res.confusion);
  return res;
}

template <typename SampleRange>
inline double classifier_accuracy(const ClassifierNet& net, const SampleRange& samples) {
  if (samples.empty()) throw MetricError("accuracy undefined over zero samples");
  std::size_t hits = 0;
  for (const auto& s : samples) {
    std::vector<double> logits = forward_classify(net, s.image);
    int best = 0;
    for (int k = 1; k < static_cast<int>(logits.size()); ++k)
      if (logits[static_cast<std::size_t>(k)] > logits[static_cast<std::size_t>(best)]) best = k;
    if (best == s.class_id) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

}  // namespace pssl
