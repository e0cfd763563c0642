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
// psslforge: command-line front end for the pseudo-label pipeline.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 quality-floor
// failure, 4 I/O failure.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "psslforge/psslforge.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int workers_from_env() {
  const char* env = std::getenv("PSSL_FORGE_WORKERS");
  if (!env) return 1;
  try {
    int n = std::stoi(env);
    return n >= 1 ? n : 1;
  } catch (const std::exception&) {
    throw pssl::ConfigError("PSSL_FORGE_WORKERS is not a number: " + std::string(env));
  }
}

// Reproducibility record dropped next to every command's outputs. Worker
// count and timings are deliberately absent: they do not influence output
// bytes, and output trees must compare equal across worker counts.
void write_runspec(const fs::path& path, const std::string& command, const json& config) {
  json spec;
  spec["tool"] = pssl::kToolName;
  spec["version"] = pssl::kVersion;
  spec["command"] = command;
  spec["config"] = config;
  std::ofstream out(path);
  if (!out) throw pssl::IoError("cannot write " + path.string());
  out << spec.dump(2) << "\n";
  if (!out) throw pssl::IoError("short write to " + path.string());
}

void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw pssl::ConfigError(what + " not found: " + p.string());
}

std::vector<int> parse_widths(const std::string& csv) {
  std::vector<int> widths;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    std::size_t comma = csv.find(',', pos);
    std::string tok = csv.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (tok.empty()) throw pssl::ConfigError("empty entry in width list '" + csv + "'");
    try {
      widths.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw pssl::ConfigError("bad width '" + tok + "' in '" + csv + "'");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return widths;
}

std::vector<double> parse_double_list(const std::string& csv, const std::string& flag) {
  std::vector<double> vals;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    std::size_t comma = csv.find(',', pos);
    std::string tok = csv.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (tok.empty()) throw pssl::ConfigError("empty entry in " + flag + " list '" + csv + "'");
    try {
      vals.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw pssl::ConfigError("bad value '" + tok + "' in " + flag);
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return vals;
}

// Shared training flags; every TrainConfig field is reachable from the
// command line.
struct TrainFlags {
  int epochs = 30;
  int batch = 8;
  double lr = 0.01;
  std::string schedule = "step";
  int step_decay_epoch = 20;
  double poly_power = 0.9;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  bool no_flip = false;
  bool scale_aug = false;
  double scale_min = 1.0;
  double scale_max = 1.25;
};

void add_train_flags(CLI::App* cmd, TrainFlags& tf) {
  cmd->add_option("--epochs", tf.epochs, "Training epochs");
  cmd->add_option("--batch", tf.batch, "Mini-batch size");
  cmd->add_option("--lr", tf.lr, "Base learning rate");
  cmd->add_option("--schedule", tf.schedule, "Learning-rate schedule: step or poly");
  cmd->add_option("--step-decay-epoch", tf.step_decay_epoch, "Epoch at which the step schedule divides lr by 10");
  cmd->add_option("--poly-power", tf.poly_power, "Exponent of the polynomial schedule");
  cmd->add_option("--momentum", tf.momentum, "SGD momentum");
  cmd->add_option("--weight-decay", tf.weight_decay, "L2 weight decay");
  cmd->add_option("--seed", tf.seed, "Random seed");
  cmd->add_flag("--no-flip", tf.no_flip, "Disable random horizontal flips");
  cmd->add_flag("--scale-aug", tf.scale_aug, "Enable random scale-and-crop augmentation");
  cmd->add_option("--scale-min", tf.scale_min, "Minimum augmentation scale factor (>= 1)");
  cmd->add_option("--scale-max", tf.scale_max, "Maximum augmentation scale factor");
}

pssl::TrainConfig to_train_config(const TrainFlags& tf) {
  pssl::TrainConfig cfg;
  cfg.epochs = tf.epochs;
  cfg.batch_size = tf.batch;
  cfg.base_lr = tf.lr;
  if (tf.schedule == "step")
    cfg.schedule = pssl::LrSchedule::Step;
  else if (tf.schedule == "poly")
    cfg.schedule = pssl::LrSchedule::Polynomial;
  else
    throw pssl::ConfigError("unknown schedule '" + tf.schedule + "' (expected step or poly)");
  cfg.step_decay_epoch = tf.step_decay_epoch;
  cfg.poly_power = tf.poly_power;
  cfg.momentum = tf.momentum;
  cfg.weight_decay = tf.weight_decay;
  cfg.seed = tf.seed;
  cfg.augment_flip = !tf.no_flip;
  cfg.augment_scale = tf.scale_aug;
  cfg.scale_min = tf.scale_min;
  cfg.scale_max = tf.scale_max;
  return cfg;
}

json train_config_json(const pssl::TrainConfig& cfg) {
  json j;
  j["epochs"] = cfg.epochs;
  j["batch"] = cfg.batch_size;
  j["lr"] = cfg.base_lr;
  j["schedule"] = cfg.schedule == pssl::LrSchedule::Step ? "step" : "poly";
  j["step_decay_epoch"] = cfg.step_decay_epoch;
  j["poly_power"] = cfg.poly_power;
  j["momentum"] = cfg.momentum;
  j["weight_decay"] = cfg.weight_decay;
  j["seed"] = cfg.seed;
  j["flip"] = cfg.augment_flip;
  j["scale_aug"] = cfg.augment_scale;
  j["scale_min"] = cfg.scale_min;
  j["scale_max"] = cfg.scale_max;
  return j;
}

void write_train_log(const pssl::TrainLog& log, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw pssl::IoError("cannot write " + path.string());
  bool has_accuracy = !log.rows.empty() && log.rows.front().accuracy >= 0.0;
  out << (has_accuracy ? "# epoch\tloss\tlr\twall_ms\taccuracy\n" : "# epoch\tloss\tlr\twall_ms\n");
  for (const auto& row : log.rows) {
    out << row.epoch << "\t" << row.loss << "\t" << row.lr << "\t" << row.wall_ms;
    if (row.accuracy >= 0.0) out << "\t" << row.accuracy;
    out << "\n";
  }
  if (!out) throw pssl::IoError("short write to " + path.string());
}

std::vector<pssl::ClassifierNet> load_model_dir(const fs::path& dir) {
  require_exists(dir, "model directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".tnet") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<pssl::ClassifierNet> models;
  models.reserve(files.size());
  for (const fs::path& f : files) models.push_back(pssl::load_classifier(f));
  if (models.empty()) throw pssl::ConfigError("no .tnet checkpoints in " + dir.string());
  for (const auto& m : models)
    if (!(m.arch == models[0].arch))
      throw pssl::ConfigError("model architectures differ inside " + dir.string());
  return models;
}

void warn_if_small_ensemble(std::size_t m) {
  pssl::EnsembleConfig ec;
  ec.num_models = static_cast<int>(m);
  if (ec.below_recommended())
    std::cerr << "warning: ensemble of " << m << " models is below the recommended minimum of "
              << ec.minimum_recommended << "\n";
}

int infer_num_classes(const std::vector<pssl::ManifestEntry>& entries) {
  int max_class = -1;
  for (const auto& e : entries) max_class = std::max(max_class, e.class_id);
  if (max_class < 0) throw pssl::ConfigError("manifest lists no classes");
  return max_class + 1;
}

// Deterministic train/validation split by seeded shuffle.
template <typename T>
void split_samples(const std::vector<T>& all, double val_fraction, std::uint64_t seed,
                   std::vector<T>& train, std::vector<T>& val) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw pssl::ConfigError("validation fraction must lie in (0, 1)");
  std::vector<std::size_t> idx(all.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  pssl::seeded_shuffle(idx, pssl::derive_seed(seed, 0x5917ull));
  std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(all.size() * val_fraction)));
  if (n_val >= all.size()) throw pssl::ConfigError("validation split leaves no training samples");
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (i < n_val)
      val.push_back(all[idx[i]]);
    else
      train.push_back(all[idx[i]]);
  }
}

// ---- Initialization modes: random | backbone:PATH | full:PATH ----

struct InitSpec {
  std::string mode = "random";
  fs::path path;
};

InitSpec parse_init(const std::string& raw) {
  InitSpec spec;
  if (raw == "random") return spec;
  auto colon = raw.find(':');
  if (colon == std::string::npos)
    throw pssl::ConfigError("bad --init '" + raw + "' (expected random, backbone:PATH, or full:PATH)");
  spec.mode = raw.substr(0, colon);
  spec.path = raw.substr(colon + 1);
  if (spec.mode != "backbone" && spec.mode != "full")
    throw pssl::ConfigError("unknown init mode '" + spec.mode + "'");
  if (spec.path.empty()) throw pssl::ConfigError("--init " + spec.mode + ": missing checkpoint path");
  return spec;
}

pssl::SegmenterNet make_initialized_segmenter(const pssl::ArchDescriptor& arch, const InitSpec& init,
                                              std::uint64_t seed) {
  pssl::SegmenterNet net = pssl::init_segmenter(arch, seed);
  if (init.mode == "random") return net;
  require_exists(init.path, "init checkpoint");
  pssl::Checkpoint ck = pssl::load_checkpoint(init.path);
  if (init.mode == "backbone") {
    if (ck.kind == pssl::NetKind::Classifier)
      return pssl::transplant_backbone(pssl::ClassifierNet{ck.arch, std::move(ck.params)}, std::move(net));
    return pssl::transplant_backbone(pssl::SegmenterNet{ck.arch, std::move(ck.params)}, std::move(net),
                                     pssl::TransplantMode::BackboneOnly);
  }
  if (ck.kind != pssl::NetKind::Segmenter)
    throw pssl::ConfigError("--init full requires a segmenter checkpoint");
  return pssl::transplant_backbone(pssl::SegmenterNet{ck.arch, std::move(ck.params)}, std::move(net),
                                   pssl::TransplantMode::Full);
}

std::string color_hex(const pssl::Rgb& c) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", pssl::quantize_byte(c.r), pssl::quantize_byte(c.g),
                pssl::quantize_byte(c.b));
  return buf;
}

// ---- Subcommands ----

int cmd_synth(const fs::path& out, int count, int classes, int size, double noise, std::uint64_t seed) {
  pssl::BlobConfig cfg;
  cfg.count = count;
  cfg.num_classes = classes;
  cfg.image_size = size;
  cfg.noise_level = noise;
  pssl::validate_blob_config(cfg);
  std::vector<pssl::BlobSample> samples = pssl::synth_blob_dataset(cfg, seed);
  pssl::write_blob_dataset(samples, out);
  json config = {{"out", out.string()}, {"count", count},  {"classes", classes},
                 {"size", size},        {"noise", noise},  {"seed", seed}};
  write_runspec(out / "runspec.json", "synth", config);
  std::cout << "wrote " << samples.size() << " images (" << size << "x" << size << ", " << classes
            << " classes) to " << out.string() << "\n";
  return 0;
}

int cmd_train_classifiers(const fs::path& data, const fs::path& out, int models,
                          const std::string& widths_csv, double acc_floor, const TrainFlags& tf) {
  require_exists(data, "dataset directory");
  if (models < 1) throw pssl::ConfigError("--models must be >= 1");
  warn_if_small_ensemble(static_cast<std::size_t>(models));
  std::vector<pssl::BlobSample> samples = pssl::load_blob_dataset(data, false);
  pssl::ArchDescriptor arch;
  arch.conv_widths = parse_widths(widths_csv);
  arch.num_classes = infer_num_classes(pssl::load_manifest(data / "manifest.tsv"));
  pssl::TrainConfig cfg = to_train_config(tf);
  // An unreachable floor (> 1) still trains to max epochs and then fails the
  // floor check below.
  cfg.early_stop_accuracy = std::min(acc_floor, 1.0);
  fs::create_directories(out);
  std::vector<double> accuracies;
  for (int m = 0; m < models; ++m) {
    pssl::TrainConfig model_cfg = cfg;
    model_cfg.seed = pssl::derive_seed(tf.seed, static_cast<std::uint64_t>(m));
    pssl::ClassifierNet net = pssl::init_classifier(arch, model_cfg.seed);
    pssl::TrainLog log = pssl::train_classifier(net, samples, model_cfg);
    double acc = log.rows.back().accuracy;
    accuracies.push_back(acc);
    char name[32];
    std::snprintf(name, sizeof name, "model_%02d.tnet", m);
    pssl::save_checkpoint(net, out / name);
    write_train_log(log, out / (std::string(name) + ".log.tsv"));
    std::cout << name << ": accuracy " << acc << " after " << log.rows.size() << " epochs\n";
  }
  json config = {{"data", data.string()},   {"out", out.string()},
                 {"models", models},        {"widths", widths_csv},
                 {"acc_floor", acc_floor},  {"train", train_config_json(cfg)}};
  write_runspec(out / "runspec.json", "train-classifiers", config);
  for (int m = 0; m < models; ++m) {
    if (accuracies[static_cast<std::size_t>(m)] < acc_floor) {
      std::string report;
      for (std::size_t i = 0; i < accuracies.size(); ++i)
        report += (i ? ", " : "") + std::to_string(accuracies[i]);
      throw pssl::QualityError("model " + std::to_string(m) + " ended below the accuracy floor " +
                               std::to_string(acc_floor) + " (per-model: " + report + ")");
    }
  }
  return 0;
}

int cmd_build(const fs::path& data, const fs::path& models_dir, const fs::path& out, int samples,
              double sigma, std::uint64_t seed, int workers) {
  require_exists(data, "image directory");
  require_exists(data / "manifest.tsv", "image manifest");
  std::vector<pssl::ClassifierNet> models = load_model_dir(models_dir);
  warn_if_small_ensemble(models.size());
  std::vector<pssl::ManifestEntry> entries = pssl::load_manifest(data / "manifest.tsv");
  if (entries.empty()) throw pssl::ConfigError("image manifest is empty");
  std::vector<pssl::BuildInput> inputs;
  inputs.reserve(entries.size());
  for (const auto& e : entries) {
    pssl::BuildInput in;
    in.image = pssl::load_image(data / e.record_path);
    in.class_id = e.class_id;
    in.stem = fs::path(e.record_path).stem().string();
    inputs.push_back(std::move(in));
  }
  pssl::SmoothGradConfig sg;
  sg.n_samples = samples;
  sg.noise_sigma = sigma;
  sg.seed = seed;
  int num_classes = models[0].arch.num_classes;
  pssl::BuildReport report = pssl::build_dataset(models, inputs, sg, num_classes, out, workers);
  json config = {{"data", data.string()},     {"models", models_dir.string()}, {"out", out.string()},
                 {"samples", samples},        {"sigma", sigma},                {"seed", seed},
                 {"num_models", models.size()}};
  write_runspec(out / "runspec.json", "build", config);
  std::cout << "records: " << report.processed << " written, " << report.skipped << " skipped\n";
  std::cout << "mean top-decile pixel fraction: " << report.mean_top_decile_fraction << "\n";
  for (std::size_t k = 0; k < report.per_class_counts.size(); ++k)
    std::cout << "class " << k << ": " << report.per_class_counts[k] << " records\n";
  std::cout << "wall time: " << report.wall_seconds << " s (" << workers << " workers)\n";
  return 0;
}

int cmd_pretrain(const fs::path& images, const fs::path& pssl_dir, const fs::path& out,
                 const std::string& widths_csv, double bg_weight, const std::string& init_raw,
                 int classes_override, const TrainFlags& tf) {
  require_exists(images, "image directory");
  require_exists(pssl_dir, "record directory");
  if (!(bg_weight >= 0.0)) throw pssl::ConfigError("--bg-weight must be >= 0");
  int num_classes = classes_override > 0
                        ? classes_override
                        : infer_num_classes(pssl::load_manifest(pssl_dir / "manifest.tsv"));
  std::vector<pssl::SegSample> samples = pssl::load_pretrain_samples(pssl_dir, images, num_classes);
  pssl::ArchDescriptor arch;
  arch.conv_widths = parse_widths(widths_csv);
  arch.num_classes = num_classes;
  pssl::TrainConfig cfg = to_train_config(tf);
  InitSpec init = parse_init(init_raw);
  pssl::SegmenterNet net =
      make_initialized_segmenter(arch, init, pssl::derive_seed(tf.seed, 0x1217ull));
  pssl::ClassWeights cw = pssl::ClassWeights::background_weighted(num_classes, bg_weight);
  pssl::TrainLog log = pssl::pretrain_segmenter(net, samples, cw, cfg);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  pssl::save_checkpoint(net, out);
  write_train_log(log, fs::path(out).concat(".log.tsv"));
  json config = {{"images", images.string()}, {"pssl", pssl_dir.string()},   {"out", out.string()},
                 {"widths", widths_csv},      {"bg_weight", bg_weight},      {"init", init_raw},
                 {"classes", num_classes},    {"train", train_config_json(cfg)}};
  write_runspec(fs::path(out).concat(".runspec.json"), "pretrain", config);
  std::cout << "pretrained on " << samples.size() << " records, final loss "
            << log.rows.back().loss << ", params checksum " << std::hex << log.final_param_checksum
            << std::dec << "\n";
  return 0;
}

int cmd_finetune(const fs::path& data, const fs::path& out, const std::string& init_raw,
                 const std::string& widths_csv, const std::string& lr_grid_csv, double val_fraction,
                 const TrainFlags& tf) {
  require_exists(data, "dataset directory");
  std::vector<pssl::BlobSample> all = pssl::load_blob_dataset(data, true);
  int num_classes = infer_num_classes(pssl::load_manifest(data / "manifest.tsv"));
  std::vector<pssl::SegSample> pairs;
  pairs.reserve(all.size());
  for (auto& s : all) pairs.push_back({std::move(s.image), std::move(s.mask)});
  std::vector<pssl::SegSample> train, val;
  split_samples(pairs, val_fraction, tf.seed, train, val);

  pssl::ArchDescriptor arch;
  arch.conv_widths = parse_widths(widths_csv);
  arch.num_classes = num_classes;
  InitSpec init = parse_init(init_raw);
  pssl::SegmenterNet net =
      make_initialized_segmenter(arch, init, pssl::derive_seed(tf.seed, 0xF17Eull));
  pssl::TrainConfig cfg = to_train_config(tf);

  double chosen_lr = cfg.base_lr;
  double val_miou = 0.0;
  pssl::TrainLog log;
  if (!lr_grid_csv.empty()) {
    std::vector<double> grid = parse_double_list(lr_grid_csv, "--lr-grid");
    pssl::GridResult res = pssl::finetune_grid(net, train, val, grid, cfg);
    for (const auto& cell : res.cells)
      std::cout << "lr " << cell.lr << ": validation mIoU " << cell.val_miou << "\n";
    net = std::move(res.best_net);
    log = std::move(res.best_log);
    chosen_lr = res.best_lr;
    val_miou = res.best_miou;
  } else {
    log = pssl::finetune_segmenter(net, train, cfg);
    val_miou = pssl::evaluate_segmenter(net, val).mean_iou;
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  pssl::save_checkpoint(net, out);
  write_train_log(log, fs::path(out).concat(".log.tsv"));
  json config = {{"data", data.string()},      {"out", out.string()},       {"init", init_raw},
                 {"widths", widths_csv},       {"lr_grid", lr_grid_csv},    {"val_fraction", val_fraction},
                 {"classes", num_classes},     {"train", train_config_json(cfg)}};
  write_runspec(fs::path(out).concat(".runspec.json"), "finetune", config);
  std::cout << "fine-tuned on " << train.size() << " samples (validation " << val.size() << "), lr "
            << chosen_lr << ", validation mIoU " << val_miou << "\n";
  return 0;
}

int cmd_sweep(const fs::path& images, const fs::path& pssl_dir, const fs::path& ft_data,
              const fs::path& out, const std::string& weights_csv, int n_seeds,
              const std::string& widths_csv, int pre_epochs, double ft_lr, int ft_epochs,
              double val_fraction, const TrainFlags& tf) {
  require_exists(images, "image directory");
  require_exists(pssl_dir, "record directory");
  require_exists(ft_data, "fine-tune dataset directory");
  if (n_seeds < 1) throw pssl::ConfigError("--seeds must be >= 1");
  std::vector<double> weights = parse_double_list(weights_csv, "--weights");
  if (weights.empty()) throw pssl::ConfigError("--weights list is empty");
  int num_classes = infer_num_classes(pssl::load_manifest(pssl_dir / "manifest.tsv"));
  std::vector<pssl::SegSample> pre_samples = pssl::load_pretrain_samples(pssl_dir, images, num_classes);

  std::vector<pssl::BlobSample> ft_all = pssl::load_blob_dataset(ft_data, true);
  std::vector<pssl::SegSample> ft_pairs;
  for (auto& s : ft_all) ft_pairs.push_back({std::move(s.image), std::move(s.mask)});

  pssl::ArchDescriptor arch;
  arch.conv_widths = parse_widths(widths_csv);
  arch.num_classes = num_classes;

  fs::create_directories(out);
  struct Cell {
    double weight;
    std::uint64_t seed;
    double miou = 0.0;
    bool ok = false;
    std::string error;
  };
  std::vector<Cell> cells;
  for (double w : weights) {
    for (int s = 0; s < n_seeds; ++s) {
      Cell cell{w, tf.seed + static_cast<std::uint64_t>(s)};
      try {
        pssl::TrainConfig pre_cfg = to_train_config(tf);
        pre_cfg.epochs = pre_epochs;
        pre_cfg.seed = cell.seed;
        pssl::SegmenterNet net =
            pssl::init_segmenter(arch, pssl::derive_seed(cell.seed, 0x1217ull));
        pssl::ClassWeights cw = pssl::ClassWeights::background_weighted(num_classes, w);
        pssl::pretrain_segmenter(net, pre_samples, cw, pre_cfg);

        std::vector<pssl::SegSample> train, val;
        split_samples(ft_pairs, val_fraction, cell.seed, train, val);
        pssl::TrainConfig ft_cfg = to_train_config(tf);
        ft_cfg.epochs = ft_epochs;
        ft_cfg.base_lr = ft_lr;
        ft_cfg.schedule = pssl::LrSchedule::Polynomial;
        ft_cfg.seed = cell.seed;
        pssl::finetune_segmenter(net, train, ft_cfg);
        cell.miou = pssl::evaluate_segmenter(net, val).mean_iou;
        cell.ok = true;
      } catch (const pssl::Error& e) {
        cell.error = e.what();
        std::cerr << "cell (w=" << w << ", seed=" << cell.seed << ") failed: " << e.what() << "\n";
      }
      cells.push_back(std::move(cell));
      std::cout << "cell w=" << cells.back().weight << " seed=" << cells.back().seed << ": "
                << (cells.back().ok ? "mIoU " + std::to_string(cells.back().miou) : "FAILED") << "\n";
    }
  }

  std::ofstream report(out / "sweep.tsv");
  if (!report) throw pssl::IoError("cannot write " + (out / "sweep.tsv").string());
  report << "# bg_weight\tseed\tval_miou\tstatus\n";
  for (const Cell& c : cells)
    report << c.weight << "\t" << c.seed << "\t" << (c.ok ? std::to_string(c.miou) : "nan") << "\t"
           << (c.ok ? "ok" : c.error) << "\n";

  std::vector<pssl::Bar> bars;
  std::cout << "\nbg_weight\tmean_mIoU\tspread\n";
  for (double w : weights) {
    std::vector<double> vals;
    for (const Cell& c : cells)
      if (c.ok && c.weight == w) vals.push_back(c.miou);
    double mean = 0.0, spread = 0.0;
    if (!vals.empty()) {
      for (double v : vals) mean += v;
      mean /= static_cast<double>(vals.size());
      for (double v : vals) spread += (v - mean) * (v - mean);
      spread = vals.size() > 1 ? std::sqrt(spread / static_cast<double>(vals.size() - 1)) : 0.0;
    }
    char label[32];
    std::snprintf(label, sizeof label, "%g", w);
    bars.push_back({label, mean, spread});
    std::cout << w << "\t" << mean << "\t" << spread << "\n";
  }
  pssl::write_bar_chart_svg(bars, "Validation mIoU vs background weight", "mIoU", out / "sweep.svg");

  report << "# reference, full-scale 50K-record pretraining: bg_weight 0.001 -> 72.7, 0.01 -> 73.9, "
            "0.1 -> 74.1, 1.0 -> 73.7 mIoU\n";
  if (!report) throw pssl::IoError("short write to " + (out / "sweep.tsv").string());
  std::cout << "reference, full-scale 50K-record pretraining: bg_weight 0.001 -> 72.7, 0.01 -> 73.9, "
               "0.1 -> 74.1, 1.0 -> 73.7 mIoU\n";

  json config = {{"images", images.string()},  {"pssl", pssl_dir.string()},
                 {"finetune_data", ft_data.string()}, {"out", out.string()},
                 {"weights", weights},         {"seeds", n_seeds},
                 {"widths", widths_csv},       {"pre_epochs", pre_epochs},
                 {"ft_lr", ft_lr},             {"ft_epochs", ft_epochs},
                 {"val_fraction", val_fraction}, {"train", train_config_json(to_train_config(tf))}};
  write_runspec(out / "runspec.json", "sweep-bgweight", config);
  std::size_t failed = 0;
  for (const Cell& c : cells) failed += !c.ok;
  std::cout << cells.size() << " cells, " << failed << " failed; report at "
            << (out / "sweep.tsv").string() << "\n";
  return 0;
}

int cmd_eval(const fs::path& model, const fs::path& data, bool classify, bool include_background,
             int ignore_index) {
  require_exists(model, "checkpoint");
  require_exists(data, "dataset directory");
  if (classify) {
    pssl::SegmenterNet net = pssl::load_segmenter(model);
    std::vector<pssl::BlobSample> samples = pssl::load_blob_dataset(data, false);
    if (samples.empty()) throw pssl::MetricError("accuracy undefined over zero samples");
    std::size_t hits = 0;
    for (const auto& s : samples) {
      pssl::PixelAverageResult r = pssl::classify_by_pixel_average(net, s.image, include_background);
      if (r.class_id == s.class_id) ++hits;
    }
    double acc = static_cast<double>(hits) / static_cast<double>(samples.size());
    std::cout << "top-1 accuracy: " << acc << " (" << hits << "/" << samples.size() << ")\n";
    return 0;
  }
  pssl::SegmenterNet net = pssl::load_segmenter(model);
  std::vector<pssl::BlobSample> samples = pssl::load_blob_dataset(data, true);
  pssl::SegEvalResult res = pssl::evaluate_segmenter(net, samples, ignore_index);
  std::cout << "label\tiou\n";
  for (std::size_t k = 0; k < res.per_label.size(); ++k) {
    std::cout << k;
    if (static_cast<int>(k) == net.arch.num_classes) std::cout << " (background)";
    if (std::isnan(res.per_label[k]))
      std::cout << "\tabsent\n";
    else
      std::cout << "\t" << res.per_label[k] << "\n";
  }
  std::cout << "mIoU: " << res.mean_iou << " over " << res.confusion.total() << " pixels\n";
  return 0;
}

int cmd_inspect(const std::string& record_raw, const std::string& model_raw,
                const std::string& image_raw, const std::string& prefix) {
  if (record_raw.empty() && model_raw.empty())
    throw pssl::ConfigError("inspect needs --record and/or --model");
  fs::path prefix_path(prefix);
  if (prefix_path.has_parent_path()) fs::create_directories(prefix_path.parent_path());
  json config = {{"record", record_raw}, {"model", model_raw}, {"image", image_raw}, {"prefix", prefix}};

  std::optional<pssl::Image> image;
  if (!image_raw.empty()) {
    require_exists(image_raw, "image");
    image = pssl::load_image(image_raw);
  }

  if (!record_raw.empty()) {
    require_exists(record_raw, "record");
    pssl::PsslRecord rec = pssl::load_record(record_raw);
    pssl::DecileMap dm = pssl::record_deciles(rec);
    std::cout << "record: " << rec.width << "x" << rec.height << ", class " << rec.class_id << "\n";
    std::cout << "decile histogram:";
    for (int d = 0; d <= 9; ++d) std::cout << " " << pssl::count_decile(dm, d);
    std::cout << "\n";
    pssl::save_image(pssl::decile_heatmap(dm), prefix + "_heatmap.ppm");
    std::cout << "wrote " << prefix << "_heatmap.ppm\n";
    if (image) {
      if (pssl::count_decile(dm, 9) == 0)
        std::cout << "warning: top decile is empty, overlay equals the input image\n";
      pssl::save_image(pssl::top_decile_overlay(*image, dm), prefix + "_overlay.ppm");
      std::cout << "wrote " << prefix << "_overlay.ppm\n";
    }
  }

  if (!model_raw.empty()) {
    require_exists(model_raw, "checkpoint");
    if (!image) throw pssl::ConfigError("--model inspection needs --image");
    pssl::SegmenterNet net = pssl::load_segmenter(model_raw);
    pssl::GroundTruthMask pred = pssl::argmax_mask(pssl::forward_segment(net, *image));
    pssl::save_image(pssl::colorize_mask(pred, net.arch.num_classes), prefix + "_pred.ppm");
    std::ofstream legend(prefix + "_legend.txt");
    if (!legend) throw pssl::IoError("cannot write " + prefix + "_legend.txt");
    for (int k = 0; k < net.arch.num_classes; ++k)
      legend << "class " << k << ": "
             << color_hex(pssl::class_palette()[static_cast<std::size_t>(k) % pssl::class_palette().size()])
             << "\n";
    legend << "background: " << color_hex(pssl::Rgb{0.15, 0.15, 0.15}) << "\n";
    std::cout << "wrote " << prefix << "_pred.ppm and " << prefix << "_legend.txt\n";
  }

  write_runspec(prefix + "_runspec.json", "inspect", config);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pseudo segmentation label pipeline"};
  app.set_version_flag("--version", std::string(pssl::kToolName) + " " + pssl::kVersion);
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic labeled blob dataset");
  fs::path synth_out;
  int synth_count = 200, synth_classes = 4, synth_size = 32;
  double synth_noise = 0.0;
  std::uint64_t synth_seed = 1;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--count", synth_count, "Number of images");
  synth->add_option("--classes", synth_classes, "Number of foreground classes");
  synth->add_option("--size", synth_size, "Image side length");
  synth->add_option("--noise", synth_noise, "Additive noise level in [0, 1]");
  synth->add_option("--seed", synth_seed, "Random seed");

  // train-classifiers
  auto* trainc = app.add_subcommand("train-classifiers", "Train an ensemble of blob classifiers");
  fs::path trainc_data, trainc_out;
  int trainc_models = 5;
  std::string trainc_widths = "8,16";
  double trainc_floor = 0.9;
  TrainFlags trainc_tf;
  trainc_tf.epochs = 40;
  trainc->add_option("--data", trainc_data, "Dataset directory from synth")->required();
  trainc->add_option("--out", trainc_out, "Output directory for checkpoints")->required();
  trainc->add_option("--models", trainc_models, "Number of classifiers");
  trainc->add_option("--widths", trainc_widths, "Comma-separated conv widths");
  trainc->add_option("--acc-floor", trainc_floor, "Required training accuracy");
  add_train_flags(trainc, trainc_tf);

  // build
  auto* build = app.add_subcommand("build", "Build pseudo-label records from classifier explanations");
  fs::path build_data, build_models, build_out;
  int build_samples = 25, build_workers = 0;
  double build_sigma = 0.15;
  std::uint64_t build_seed = 1;
  build->add_option("--data", build_data, "Image directory with manifest.tsv")->required();
  build->add_option("--models", build_models, "Directory of classifier checkpoints")->required();
  build->add_option("--out", build_out, "Output record directory")->required();
  build->add_option("--samples", build_samples, "Perturbation samples per image");
  build->add_option("--sigma", build_sigma, "Perturbation noise sigma");
  build->add_option("--seed", build_seed, "Random seed");
  build->add_option("--workers", build_workers, "Worker threads (default: PSSL_FORGE_WORKERS or 1)");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Pretrain a segmenter on pseudo-label records");
  fs::path pre_images, pre_pssl, pre_out;
  std::string pre_widths = "8,16", pre_init = "random";
  double pre_bgw = 0.1;
  int pre_classes = 0;
  TrainFlags pre_tf;
  pre->add_option("--images", pre_images, "Image directory the records were built from")->required();
  pre->add_option("--pssl", pre_pssl, "Record directory")->required();
  pre->add_option("--out", pre_out, "Output checkpoint path")->required();
  pre->add_option("--widths", pre_widths, "Comma-separated conv widths");
  pre->add_option("--bg-weight", pre_bgw, "Background class weight");
  pre->add_option("--init", pre_init, "random | backbone:PATH | full:PATH");
  pre->add_option("--classes", pre_classes, "Foreground class count (default: inferred from manifest)");
  add_train_flags(pre, pre_tf);

  // finetune
  auto* fine = app.add_subcommand("finetune", "Fine-tune a segmenter on labeled data");
  fs::path fine_data, fine_out;
  std::string fine_init = "random", fine_widths = "8,16", fine_grid;
  double fine_valfrac = 0.25;
  TrainFlags fine_tf;
  fine_tf.schedule = "poly";
  fine->add_option("--data", fine_data, "Labeled dataset directory")->required();
  fine->add_option("--out", fine_out, "Output checkpoint path")->required();
  fine->add_option("--init", fine_init, "random | backbone:PATH | full:PATH");
  fine->add_option("--widths", fine_widths, "Comma-separated conv widths");
  fine->add_option("--lr-grid", fine_grid, "Comma-separated learning rates to search");
  fine->add_option("--val-fraction", fine_valfrac, "Fraction of samples held out for validation");
  add_train_flags(fine, fine_tf);

  // sweep-bgweight
  auto* sweep = app.add_subcommand("sweep-bgweight", "Sweep the background weight over pretrain+finetune");
  fs::path sweep_images, sweep_pssl, sweep_ft, sweep_out;
  std::string sweep_weights = "0.001,0.01,0.1,1.0", sweep_widths = "8,16";
  int sweep_seeds = 3, sweep_pre_epochs = 10, sweep_ft_epochs = 10;
  double sweep_ft_lr = 0.01, sweep_valfrac = 0.25;
  TrainFlags sweep_tf;
  sweep_tf.epochs = 10;
  sweep->add_option("--images", sweep_images, "Image directory the records were built from")->required();
  sweep->add_option("--pssl", sweep_pssl, "Record directory")->required();
  sweep->add_option("--finetune-data", sweep_ft, "Labeled dataset for the downstream task")->required();
  sweep->add_option("--out", sweep_out, "Output directory for the report and plot")->required();
  sweep->add_option("--weights", sweep_weights, "Comma-separated background weights");
  sweep->add_option("--seeds", sweep_seeds, "Seeds per weight");
  sweep->add_option("--widths", sweep_widths, "Comma-separated conv widths");
  sweep->add_option("--pre-epochs", sweep_pre_epochs, "Pretraining epochs per cell");
  sweep->add_option("--ft-epochs", sweep_ft_epochs, "Fine-tuning epochs per cell");
  sweep->add_option("--ft-lr", sweep_ft_lr, "Fine-tuning learning rate");
  sweep->add_option("--val-fraction", sweep_valfrac, "Validation fraction of the downstream dataset");
  add_train_flags(sweep, sweep_tf);

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a segmenter checkpoint");
  fs::path eval_model, eval_data;
  bool eval_classify = false, eval_incbg = false;
  int eval_ignore = -1;
  eval->add_option("--model", eval_model, "Segmenter checkpoint")->required();
  eval->add_option("--data", eval_data, "Labeled dataset directory")->required();
  eval->add_flag("--classify", eval_classify, "Report image-level top-1 accuracy by pixel averaging");
  eval->add_flag("--include-background", eval_incbg, "Let the background channel compete in --classify");
  eval->add_option("--ignore-index", eval_ignore, "Truth label excluded from segmentation metrics");

  // inspect
  auto* inspect = app.add_subcommand("inspect", "Render records and predictions as images");
  std::string ins_record, ins_model, ins_image, ins_prefix = "inspect";
  inspect->add_option("--record", ins_record, "Pseudo-label record to render");
  inspect->add_option("--model", ins_model, "Segmenter checkpoint to run");
  inspect->add_option("--image", ins_image, "Input image (for overlays and predictions)");
  inspect->add_option("--out-prefix", ins_prefix, "Prefix for output files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) return cmd_synth(synth_out, synth_count, synth_classes, synth_size, synth_noise, synth_seed);
    if (*trainc)
      return cmd_train_classifiers(trainc_data, trainc_out, trainc_models, trainc_widths, trainc_floor,
                                   trainc_tf);
    if (*build) {
      int workers = build_workers >= 1 ? build_workers : workers_from_env();
      return cmd_build(build_data, build_models, build_out, build_samples, build_sigma, build_seed,
                       workers);
    }
    if (*pre)
      return cmd_pretrain(pre_images, pre_pssl, pre_out, pre_widths, pre_bgw, pre_init, pre_classes,
                          pre_tf);
    if (*fine)
      return cmd_finetune(fine_data, fine_out, fine_init, fine_widths, fine_grid, fine_valfrac, fine_tf);
    if (*sweep)
      return cmd_sweep(sweep_images, sweep_pssl, sweep_ft, sweep_out, sweep_weights, sweep_seeds,
                       sweep_widths, sweep_pre_epochs, sweep_ft_lr, sweep_ft_epochs, sweep_valfrac,
                       sweep_tf);
    if (*eval) return cmd_eval(eval_model, eval_data, eval_classify, eval_incbg, eval_ignore);
    if (*inspect) return cmd_inspect(ins_record, ins_model, ins_image, ins_prefix);
  } catch (const pssl::QualityError& e) {
    std::cerr << "psslforge: " << e.what() << "\n";
    return 3;
  } catch (const pssl::IoError& e) {
    std::cerr << "psslforge: " << e.what() << "\n";
    return 4;
  } catch (const pssl::Error& e) {
    std::cerr << "psslforge: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "psslforge: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
