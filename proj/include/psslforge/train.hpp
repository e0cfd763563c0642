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
// Training: class-weighted cross-entropy, learning-rate schedules, light
// augmentation, SGD with momentum, and the pretrain / fine-tune loops.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "psslforge/common.hpp"
#include "psslforge/eval.hpp"
#include "psslforge/image.hpp"
#include "psslforge/net.hpp"

namespace pssl {

// Per-class loss weights indexed by label. The background label carries a
// reduced weight by default so the dominant pseudo-background does not drown
// out the sparse foreground signal.
struct ClassWeights {
  std::vector<double> w;

  static ClassWeights uniform(int num_labels) {
    return ClassWeights{std::vector<double>(static_cast<std::size_t>(num_labels), 1.0)};
  }
  // num_foreground classes at weight 1, background (last label) at bg_weight.
  static ClassWeights background_weighted(int num_foreground, double bg_weight = 0.1) {
    std::vector<double> w(static_cast<std::size_t>(num_foreground) + 1, 1.0);
    w.back() = bg_weight;
    return ClassWeights{std::move(w)};
  }
};

inline void validate_weights(const ClassWeights& cw, int num_labels) {
  if (static_cast<int>(cw.w.size()) != num_labels)
    throw ConfigError("expected " + std::to_string(num_labels) + " class weights, got " +
                      std::to_string(cw.w.size()));
  bool any_positive = false;
  for (double v : cw.w) {
    if (!(v >= 0.0)) throw ConfigError("class weights must be >= 0");
    any_positive = any_positive || v > 0.0;
  }
  if (!any_positive) throw ConfigError("at least one class weight must be positive");
}

struct CeResult {
  double loss = 0.0;
  PixelGrid dlogits;  // gradient with respect to the pre-softmax logits
};

// Mean over pixels of -w[label] * log(p[label]), with the matching exact
// gradient w[label] * (p - onehot(label)) / n_pixels with respect to the
// logits. Probabilities are clamped at 1e-12 inside the log only.
inline CeResult weighted_ce(const PixelGrid& probs, const GroundTruthMask& mask, const ClassWeights& cw) {
  if (probs.width != mask.width || probs.height != mask.height)
    throw ShapeError("probability grid and mask dimensions differ");
  validate_weights(cw, probs.channels);
  const int T = probs.channels;
  const std::size_t npix = probs.pixel_count();
  CeResult res;
  res.dlogits = make_grid(probs.height, probs.width, T);
  const double inv_n = 1.0 / static_cast<double>(npix);
  for (std::size_t p = 0; p < npix; ++p) {
    int label = mask.labels[p];
    if (label >= T) throw ShapeError("mask label " + std::to_string(label) + " outside logit channels");
    double wt = cw.w[static_cast<std::size_t>(label)];
    const double* prob = probs.v.data() + p * T;
    res.loss -= wt * std::log(std::max(prob[static_cast<std::size_t>(label)], 1e-12));
    double* g = res.dlogits.v.data() + p * T;
    for (int t = 0; t < T; ++t) g[t] = wt * prob[t] * inv_n;
    g[label] -= wt * inv_n;
  }
  res.loss *= inv_n;
  return res;
}

enum class LrSchedule { Step, Polynomial };

struct TrainConfig {
  int epochs = 30;
  int batch_size = 8;
  double base_lr = 0.01;
  LrSchedule schedule = LrSchedule::Step;
  int step_decay_epoch = 20;
  double poly_power = 0.9;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  bool augment_flip = true;
  bool augment_scale = false;
  double scale_min = 1.0;
  double scale_max = 1.25;
  // Stop classifier training once this training accuracy is reached
  // (checked after each epoch; 0 disables).
  double early_stop_accuracy = 0.0;
};

inline void validate_train_config(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(cfg.base_lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
  if (cfg.schedule == LrSchedule::Step && cfg.step_decay_epoch < 1)
    throw ConfigError("step decay epoch must be >= 1");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(cfg.weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  if (cfg.augment_scale && !(cfg.scale_min >= 1.0 && cfg.scale_max >= cfg.scale_min))
    throw ConfigError("scale factors must satisfy 1 <= scale_min <= scale_max");
  if (!(cfg.early_stop_accuracy >= 0.0 && cfg.early_stop_accuracy <= 1.0))
    throw ConfigError("early stop accuracy must lie in [0, 1]");
}

// Learning rate at a point inside training. The step schedule divides the
// base rate by 10 once the decay epoch is reached; the polynomial schedule
// uses base * (1 - progress)^power with progress measured in fractional
// epochs.
inline double lr_at(const TrainConfig& cfg, int epoch, double step_fraction = 0.0) {
  if (cfg.schedule == LrSchedule::Step)
    return epoch >= cfg.step_decay_epoch ? cfg.base_lr / 10.0 : cfg.base_lr;
  double progress = (static_cast<double>(epoch) + step_fraction) / static_cast<double>(cfg.epochs);
  progress = std::clamp(progress, 0.0, 1.0);
  return cfg.base_lr * std::pow(1.0 - progress, cfg.poly_power);
}

// ---- Augmentation ----

inline Image flip_horizontal(const Image& img) {
  Image out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(img.width - 1 - x, y, c) = img.at(x, y, c);
  return out;
}

inline GroundTruthMask flip_horizontal(const GroundTruthMask& mask) {
  GroundTruthMask out = mask;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      out.labels[static_cast<std::size_t>(y) * mask.width + (mask.width - 1 - x)] =
          mask.labels[static_cast<std::size_t>(y) * mask.width + x];
  return out;
}

namespace detail {

inline int nearest_src(int dst, int dst_size, int src_size) {
  double scale = static_cast<double>(src_size) / dst_size;
  int src = static_cast<int>(std::floor((dst + 0.5) * scale));
  return std::clamp(src, 0, src_size - 1);
}

}  // namespace detail

inline Image scale_nearest(const Image& img, int new_w, int new_h) {
  if (new_w < 1 || new_h < 1) throw ShapeError("scaled size must be positive");
  Image out = make_image(new_w, new_h, img.channels);
  for (int y = 0; y < new_h; ++y) {
    int sy = detail::nearest_src(y, new_h, img.height);
    for (int x = 0; x < new_w; ++x) {
      int sx = detail::nearest_src(x, new_w, img.width);
      for (int c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(sx, sy, c);
    }
  }
  return out;
}

inline GroundTruthMask scale_nearest(const GroundTruthMask& mask, int new_w, int new_h) {
  if (new_w < 1 || new_h < 1) throw ShapeError("scaled size must be positive");
  GroundTruthMask out;
  out.width = new_w;
  out.height = new_h;
  out.labels.resize(static_cast<std::size_t>(new_w) * new_h);
  for (int y = 0; y < new_h; ++y) {
    int sy = detail::nearest_src(y, new_h, mask.height);
    for (int x = 0; x < new_w; ++x) {
      int sx = detail::nearest_src(x, new_w, mask.width);
      out.labels[static_cast<std::size_t>(y) * new_w + x] =
          mask.labels[static_cast<std::size_t>(sy) * mask.width + sx];
    }
  }
  return out;
}

inline Image crop(const Image& img, int x0, int y0, int w, int h) {
  if (w < 1 || h < 1 || x0 < 0 || y0 < 0 || x0 + w > img.width || y0 + h > img.height)
    throw ShapeError("crop window " + std::to_string(w) + "x" + std::to_string(h) + "+" +
                     std::to_string(x0) + "+" + std::to_string(y0) + " exceeds image " +
                     std::to_string(img.width) + "x" + std::to_string(img.height));
  Image out = make_image(w, h, img.channels);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(x, y, c) = img.at(x0 + x, y0 + y, c);
  return out;
}

inline GroundTruthMask crop(const GroundTruthMask& mask, int x0, int y0, int w, int h) {
  if (w < 1 || h < 1 || x0 < 0 || y0 < 0 || x0 + w > mask.width || y0 + h > mask.height)
    throw ShapeError("crop window exceeds mask bounds");
  GroundTruthMask out;
  out.width = w;
  out.height = h;
  out.labels.resize(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      out.labels[static_cast<std::size_t>(y) * w + x] =
          mask.labels[static_cast<std::size_t>(y0 + y) * mask.width + (x0 + x)];
  return out;
}

// One image+mask training example for segmentation.
struct SegSample {
  Image image;
  GroundTruthMask mask;
};

// Random upscale followed by a crop back to the original size, then an even
// chance of a horizontal flip. Image and mask receive identical transforms.
inline SegSample augment_sample(const SegSample& in, const TrainConfig& cfg, SplitMix64& rng) {
  SegSample out = in;
  if (cfg.augment_scale) {
    double f = rng.uniform(cfg.scale_min, cfg.scale_max);
    int sw = std::max(in.image.width, static_cast<int>(std::lround(in.image.width * f)));
    int sh = std::max(in.image.height, static_cast<int>(std::lround(in.image.height * f)));
    Image scaled = scale_nearest(in.image, sw, sh);
    GroundTruthMask scaled_mask = scale_nearest(in.mask, sw, sh);
    int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(sw - in.image.width + 1)));
    int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(sh - in.image.height + 1)));
    out.image = crop(scaled, x0, y0, in.image.width, in.image.height);
    out.mask = crop(scaled_mask, x0, y0, in.image.width, in.image.height);
  }
  if (cfg.augment_flip && rng.uniform() < 0.5) {
    out.image = flip_horizontal(out.image);
    out.mask = flip_horizontal(out.mask);
  }
  return out;
}

// ---- Optimizer ----

// Classic SGD with momentum and decoupled-from-nothing L2: the weight decay
// term joins the batch-mean gradient before the velocity update.
struct SgdState {
  std::vector<double> velocity;

  void step(std::vector<double>& params, const std::vector<double>& grad, double lr, double momentum,
            double weight_decay) {
    if (velocity.size() != params.size()) velocity.assign(params.size(), 0.0);
    for (std::size_t i = 0; i < params.size(); ++i) {
      velocity[i] = momentum * velocity[i] + (grad[i] + weight_decay * params[i]);
      params[i] -= lr * velocity[i];
    }
  }
};

struct TrainLogRow {
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
  double accuracy = -1.0;  // classifier runs only
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
  std::uint64_t final_param_checksum = 0;
  bool early_stopped = false;
};

namespace detail {

inline std::uint64_t param_checksum(const std::vector<double>& params) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(params.size() * 4);
  for (double v : params) put_f32le(bytes, static_cast<float>(v));
  return fnv1a64(bytes.data(), bytes.size());
}

inline void check_finite(double loss, int epoch) {
  if (!std::isfinite(loss))
    throw TrainError("loss became non-finite at epoch " + std::to_string(epoch) +
                     ", aborting (try a smaller learning rate)");
}

}  // namespace detail

// ---- Segmentation training ----

// One pass of mini-batch SGD over (image, mask) samples under the weighted
// cross-entropy objective. Deterministic for a fixed (net, samples, weights,
// config): batch order, augmentation draws, and update order all come from
// cfg.seed. Sample types need .image and .mask members.
template <typename SampleRange>
inline TrainLog train_segmenter(SegmenterNet& net, const SampleRange& samples, const ClassWeights& cw,
                                const TrainConfig& cfg) {
  validate_train_config(cfg);
  if (samples.empty()) throw TrainError("no training samples");
  validate_weights(cw, net.arch.num_classes + 1);
  TrainLog log;
  SgdState sgd;
  const std::size_t n = samples.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> batch_grad(net.params.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    seeded_shuffle(order, derive_seed(cfg.seed, 0x10000u + static_cast<std::uint64_t>(epoch)));
    SplitMix64 aug_rng(derive_seed(cfg.seed, 0x20000u + static_cast<std::uint64_t>(epoch)));
    double epoch_loss = 0.0;
    std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
    for (std::size_t b = 0; b < batches; ++b) {
      std::size_t begin = b * cfg.batch_size;
      std::size_t end = std::min(begin + cfg.batch_size, n);
      std::fill(batch_grad.begin(), batch_grad.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& raw = samples[order[i]];
        SegSample s = augment_sample(SegSample{raw.image, raw.mask}, cfg, aug_rng);
        PixelGrid probs = softmax_grid(forward_segment(net, s.image));
        CeResult ce = weighted_ce(probs, s.mask, cw);
        batch_loss += ce.loss;
        std::vector<double> g = backward_params(net, s.image, ce.dlogits);
        for (std::size_t j = 0; j < batch_grad.size(); ++j) batch_grad[j] += g[j];
      }
      double inv_b = 1.0 / static_cast<double>(end - begin);
      for (double& g : batch_grad) g *= inv_b;
      epoch_loss += batch_loss;
      double frac = static_cast<double>(b) / static_cast<double>(batches);
      sgd.step(net.params, batch_grad, lr_at(cfg, epoch, frac), cfg.momentum, cfg.weight_decay);
    }
    epoch_loss /= static_cast<double>(n);
    detail::check_finite(epoch_loss, epoch);
    double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log.rows.push_back({epoch, epoch_loss, lr_at(cfg, epoch), ms, -1.0});
  }
  log.final_param_checksum = detail::param_checksum(net.params);
  return log;
}

// Pretraining on pseudo labels and fine-tuning on true masks are the same
// loop under different weights; the names keep call sites readable.
template <typename SampleRange>
inline TrainLog pretrain_segmenter(SegmenterNet& net, const SampleRange& samples, const ClassWeights& cw,
                                   const TrainConfig& cfg) {
  return train_segmenter(net, samples, cw, cfg);
}

template <typename SampleRange>
inline TrainLog finetune_segmenter(SegmenterNet& net, const SampleRange& samples, const TrainConfig& cfg) {
  return train_segmenter(net, samples, ClassWeights::uniform(net.arch.num_classes + 1), cfg);
}

// ---- Classifier training ----

// Mini-batch SGD on image-level softmax cross-entropy. Sample types need
// .image and .class_id members. Stops early once training accuracy reaches
// cfg.early_stop_accuracy (when set).
template <typename SampleRange>
inline TrainLog train_classifier(ClassifierNet& net, const SampleRange& samples, const TrainConfig& cfg) {
  validate_train_config(cfg);
  if (samples.empty()) throw TrainError("no training samples");
  TrainLog log;
  SgdState sgd;
  const std::size_t n = samples.size();
  const int K = net.arch.num_classes;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> batch_grad(net.params.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    seeded_shuffle(order, derive_seed(cfg.seed, 0x10000u + static_cast<std::uint64_t>(epoch)));
    SplitMix64 aug_rng(derive_seed(cfg.seed, 0x20000u + static_cast<std::uint64_t>(epoch)));
    double epoch_loss = 0.0;
    std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
    for (std::size_t b = 0; b < batches; ++b) {
      std::size_t begin = b * cfg.batch_size;
      std::size_t end = std::min(begin + cfg.batch_size, n);
      std::fill(batch_grad.begin(), batch_grad.end(), 0.0);
      for (std::size_t i = begin; i < end; ++i) {
        const auto& raw = samples[order[i]];
        if (raw.class_id < 0 || raw.class_id >= K)
          throw TrainError("sample class " + std::to_string(raw.class_id) + " outside [0, " +
                           std::to_string(K) + ")");
        Image img = raw.image;
        if (cfg.augment_flip && aug_rng.uniform() < 0.5) img = flip_horizontal(img);
        std::vector<double> logits = forward_classify(net, img);
        std::vector<double> p = softmax(logits);
        epoch_loss -= std::log(std::max(p[static_cast<std::size_t>(raw.class_id)], 1e-12));
        std::vector<double> upstream = p;
        upstream[static_cast<std::size_t>(raw.class_id)] -= 1.0;
        std::vector<double> g = backward_params(net, img, upstream);
        for (std::size_t j = 0; j < batch_grad.size(); ++j) batch_grad[j] += g[j];
      }
      double inv_b = 1.0 / static_cast<double>(end - begin);
      for (double& g : batch_grad) g *= inv_b;
      double frac = static_cast<double>(b) / static_cast<double>(batches);
      sgd.step(net.params, batch_grad, lr_at(cfg, epoch, frac), cfg.momentum, cfg.weight_decay);
    }
    epoch_loss /= static_cast<double>(n);
    detail::check_finite(epoch_loss, epoch);
    double acc = classifier_accuracy(net, samples);
    double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log.rows.push_back({epoch, epoch_loss, lr_at(cfg, epoch), ms, acc});
    if (cfg.early_stop_accuracy > 0.0 && acc >= cfg.early_stop_accuracy) {
      log.early_stopped = true;
      break;
    }
  }
  log.final_param_checksum = detail::param_checksum(net.params);
  return log;
}

// ---- Fine-tune learning-rate search ----

struct GridCell {
  double lr = 0.0;
  double val_miou = 0.0;
};

struct GridResult {
  double best_lr = 0.0;
  double best_miou = 0.0;
  SegmenterNet best_net;
  TrainLog best_log;
  std::vector<GridCell> cells;
};

// Fine-tunes a copy of the net at each candidate rate and keeps the one with
// the best validation mean IoU. Rates are visited in ascending order and
// only a strictly better score displaces the incumbent, so ties go to the
// smaller rate.
template <typename TrainRange, typename ValRange>
inline GridResult finetune_grid(const SegmenterNet& net, const TrainRange& train_samples,
                                const ValRange& val_samples, std::vector<double> lr_grid, TrainConfig cfg) {
  if (lr_grid.empty()) throw ConfigError("learning-rate grid is empty");
  std::sort(lr_grid.begin(), lr_grid.end());
  GridResult res;
  res.best_miou = -1.0;
  for (double lr : lr_grid) {
    if (!(lr > 0.0)) throw ConfigError("learning rates must be > 0");
    cfg.base_lr = lr;
    SegmenterNet candidate = net;
    TrainLog log = finetune_segmenter(candidate, train_samples, cfg);
    double score = evaluate_segmenter(candidate, val_samples).mean_iou;
    res.cells.push_back({lr, score});
    if (score > res.best_miou) {
      res.best_miou = score;
      res.best_lr = lr;
      res.best_net = std::move(candidate);
      res.best_log = std::move(log);
    }
  }
  return res;
}

}  // namespace pssl
