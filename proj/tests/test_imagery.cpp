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

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "psslforge/image.hpp"
#include "psslforge/synth.hpp"

namespace fs = std::filesystem;
using namespace pssl;

namespace {

fs::path temp_dir() {
  static int counter = 0;
  fs::path dir = fs::temp_directory_path() / ("psslforge_imagery_" + std::to_string(counter++));
  fs::create_directories(dir);
  return dir;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("byte quantization rounds half up") {
  CHECK(quantize_byte(0.0) == 0);
  CHECK(quantize_byte(1.0) == 255);
  CHECK(quantize_byte(0.5) == 128);
  CHECK(quantize_byte(127.4999 / 255.0) == 127);
  CHECK(quantize_byte(127.5 / 255.0) == 128);
  CHECK(quantize_byte(-0.5) == 0);
  CHECK(quantize_byte(2.0) == 255);
}

TEST_CASE("grayscale pgm loads each byte as value/255") {
  fs::path dir = temp_dir();
  spit(dir / "g.pgm", std::string("P5\n2 2\n255\n") + '\x00' + '\xff' + '\x80' + '\x40');
  Image img = load_image(dir / "g.pgm");
  CHECK(img.width == 2);
  CHECK(img.height == 2);
  CHECK(img.channels == 1);
  CHECK(img.data[0] == 0.0);
  CHECK(img.data[1] == 1.0);
  CHECK(img.data[2] == Catch::Approx(128.0 / 255.0));
  CHECK(img.data[3] == Catch::Approx(64.0 / 255.0));
}

TEST_CASE("ppm save/load round-trips quantized values") {
  fs::path dir = temp_dir();
  Image img = make_image(3, 2, 3);
  SplitMix64 rng(11);
  for (double& v : img.data) v = rng.uniform();
  save_image(img, dir / "c.ppm");
  Image back = load_image(dir / "c.ppm");
  REQUIRE(back.channels == 3);
  REQUIRE(back.data.size() == img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i)
    CHECK(back.data[i] == Catch::Approx(quantize_byte(img.data[i]) / 255.0));
  // a second save of the loaded image reproduces the file exactly
  save_image(back, dir / "c2.ppm");
  CHECK(slurp(dir / "c.ppm") == slurp(dir / "c2.ppm"));
}

TEST_CASE("pnm header comments and whitespace are tolerated") {
  fs::path dir = temp_dir();
  spit(dir / "c.pgm", std::string("P5 # magic\n# a comment line\n 2\t1 \n255\n") + '\x01' + '\x02');
  Image img = load_image(dir / "c.pgm");
  CHECK(img.width == 2);
  CHECK(img.height == 1);
  CHECK(img.data[0] == Catch::Approx(1.0 / 255.0));
}

TEST_CASE("unsupported pnm magic is a format error naming the field") {
  fs::path dir = temp_dir();
  spit(dir / "bad.pbm", std::string("P4\n2 2\n") + '\x00');
  try {
    load_image(dir / "bad.pbm");
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("magic") != std::string::npos);
  }
}

TEST_CASE("pnm maxval other than 255 is rejected") {
  fs::path dir = temp_dir();
  spit(dir / "m.pgm", std::string("P5\n1 1\n65535\n") + '\x00' + '\x00');
  CHECK_THROWS_AS(load_image(dir / "m.pgm"), FormatError);
}

TEST_CASE("truncated pnm payload reports expected and actual sizes") {
  fs::path dir = temp_dir();
  spit(dir / "t.ppm", std::string("P6\n2 2\n255\n") + "abc");
  try {
    load_image(dir / "t.ppm");
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    std::string msg = e.what();
    CHECK(msg.find("12") != std::string::npos);
    CHECK(msg.find("3") != std::string::npos);
  }
}

TEST_CASE("masks round-trip raw label bytes") {
  fs::path dir = temp_dir();
  GroundTruthMask mask;
  mask.width = 4;
  mask.height = 2;
  mask.labels = {0, 1, 2, 3, 4, 4, 4, 9};
  save_mask(mask, dir / "m.pgm");
  GroundTruthMask back = load_mask(dir / "m.pgm");
  CHECK(back.width == 4);
  CHECK(back.height == 2);
  CHECK(back.labels == mask.labels);
}

static std::vector<ManifestEntry> parse_manifest_text(const std::string& text) {
  std::istringstream in(text);
  return parse_manifest(in, "test");
}

TEST_CASE("manifest parses tab-separated lines and skips comments") {
  std::string text = "# header comment\n\nimg_0.ppm\t3\nsub/img_1.ppm\t0\n";
  std::vector<ManifestEntry> entries = parse_manifest_text(text);
  REQUIRE(entries.size() == 2);
  CHECK(entries[0].record_path == "img_0.ppm");
  CHECK(entries[0].class_id == 3);
  CHECK(entries[1].record_path == "sub/img_1.ppm");
  CHECK(entries[1].class_id == 0);
}

TEST_CASE("manifest with a space separator reports the line number") {
  try {
    parse_manifest_text("# comment\na.pssl 3\n");
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    std::string msg = e.what();
    CHECK(msg.find("test:2") != std::string::npos);
  }
}

TEST_CASE("manifest rejects bad class fields") {
  CHECK_THROWS_AS(parse_manifest_text("a.pssl\t-1\n"), FormatError);
  CHECK_THROWS_AS(parse_manifest_text("a.pssl\tx3\n"), FormatError);
  CHECK_THROWS_AS(parse_manifest_text("a.pssl\t3x\n"), FormatError);
  CHECK_THROWS_AS(parse_manifest_text("a.pssl\t\n"), FormatError);
  CHECK_THROWS_AS(parse_manifest_text("\t3\n"), FormatError);
}

TEST_CASE("manifest save/load round trip") {
  fs::path dir = temp_dir();
  std::vector<ManifestEntry> entries = {{"x.pssl", 2}, {"y.pssl", 0}, {"z.pssl", 11}};
  save_manifest(entries, dir / "manifest.tsv");
  std::vector<ManifestEntry> back = load_manifest(dir / "manifest.tsv");
  REQUIRE(back.size() == entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    CHECK(back[i].record_path == entries[i].record_path);
    CHECK(back[i].class_id == entries[i].class_id);
  }
}

TEST_CASE("blob dataset is deterministic and balanced") {
  BlobConfig cfg;
  cfg.count = 100;
  cfg.num_classes = 4;
  cfg.image_size = 16;
  cfg.noise_level = 0.3;
  std::vector<BlobSample> a = synth_blob_dataset(cfg, 42);
  std::vector<BlobSample> b = synth_blob_dataset(cfg, 42);
  REQUIRE(a.size() == 100);
  std::map<int, int> per_class;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image.data == b[i].image.data);
    CHECK(a[i].mask.labels == b[i].mask.labels);
    CHECK(a[i].class_id == b[i].class_id);
    ++per_class[a[i].class_id];
  }
  for (int k = 0; k < 4; ++k) CHECK(per_class[k] == 25);
  std::vector<BlobSample> c = synth_blob_dataset(cfg, 43);
  CHECK(a[0].image.data != c[0].image.data);
}

TEST_CASE("blob masks mark the bright shape") {
  BlobConfig cfg;
  cfg.count = 12;
  cfg.num_classes = 3;
  cfg.image_size = 24;
  cfg.noise_level = 0.0;
  for (const BlobSample& s : synth_blob_dataset(cfg, 5)) {
    std::size_t fg = 0;
    for (std::size_t p = 0; p < s.mask.labels.size(); ++p) {
      int label = s.mask.labels[p];
      CHECK((label == s.class_id || label == cfg.num_classes));
      if (label == s.class_id) {
        ++fg;
        double brightest = 0.0;
        for (int c = 0; c < 3; ++c) brightest = std::max(brightest, s.image.data[p * 3 + c]);
        CHECK(brightest > 0.5);
      }
    }
    CHECK(fg > 0);
    CHECK(fg < s.mask.labels.size() / 2);
  }
}

TEST_CASE("blob config validation") {
  BlobConfig cfg;
  cfg.num_classes = 1;
  CHECK_THROWS_AS(validate_blob_config(cfg), ConfigError);
  cfg.num_classes = 2;
  cfg.image_size = 4;
  CHECK_THROWS_AS(validate_blob_config(cfg), ConfigError);
  cfg.image_size = 8;
  cfg.noise_level = 1.5;
  CHECK_THROWS_AS(validate_blob_config(cfg), ConfigError);
}

TEST_CASE("blob dataset directory round trip") {
  fs::path dir = temp_dir();
  BlobConfig cfg;
  cfg.count = 6;
  cfg.num_classes = 2;
  cfg.image_size = 12;
  std::vector<BlobSample> samples = synth_blob_dataset(cfg, 9);
  write_blob_dataset(samples, dir);
  std::vector<BlobSample> back = load_blob_dataset(dir, true);
  REQUIRE(back.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(back[i].class_id == samples[i].class_id);
    CHECK(back[i].mask.labels == samples[i].mask.labels);
    REQUIRE(back[i].image.data.size() == samples[i].image.data.size());
    for (std::size_t j = 0; j < samples[i].image.data.size(); ++j)
      CHECK(back[i].image.data[j] == Catch::Approx(samples[i].image.data[j]).margin(0.5 / 255.0));
  }
}
