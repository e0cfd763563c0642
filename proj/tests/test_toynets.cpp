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

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "psslforge/net.hpp"

namespace fs = std::filesystem;
using namespace pssl;

namespace {

fs::path temp_dir() {
  static int counter = 0;
  fs::path dir = fs::temp_directory_path() / ("psslforge_net_" + std::to_string(counter++));
  fs::create_directories(dir);
  return dir;
}

Image random_image(int width, int height, int channels, std::uint64_t seed) {
  Image img = make_image(width, height, channels);
  SplitMix64 rng(seed);
  for (auto& v : img.data) v = rng.uniform();
  return img;
}

// Reference 3x3 convolution written as a direct transcription of the
// definition: zero padding, weights indexed [out][in][ky][kx].
std::vector<double> ref_conv3x3(const std::vector<double>& in, int H, int W, int Cin,
                                const double* w, const double* b, int Cout) {
  auto in_at = [&](int x, int y, int c) -> double {
    if (x < 0 || x >= W || y < 0 || y >= H) return 0.0;
    return in[(static_cast<std::size_t>(y) * W + x) * Cin + c];
  };
  std::vector<double> out(static_cast<std::size_t>(H) * W * Cout);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int oc = 0; oc < Cout; ++oc) {
        double acc = b[oc];
        for (int ic = 0; ic < Cin; ++ic)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx)
              acc += w[((static_cast<std::size_t>(oc) * Cin + ic) * 3 + ky) * 3 + kx] *
                     in_at(x + kx - 1, y + ky - 1, ic);
        out[(static_cast<std::size_t>(y) * W + x) * Cout + oc] = acc;
      }
  return out;
}

// Reference trunk: conv3x3 -> ReLU per layer.
std::vector<double> ref_trunk(const ArchDescriptor& arch, const ParamLayout& lay,
                              const std::vector<double>& params, const Image& img) {
  std::vector<double> cur = img.data;
  int cin = arch.in_channels;
  for (const auto& conv : lay.convs) {
    cur = ref_conv3x3(cur, img.height, img.width, cin, params.data() + conv.w_off,
                      params.data() + conv.b_off, conv.out_c);
    for (auto& v : cur) v = v > 0.0 ? v : 0.0;
    cin = conv.out_c;
  }
  return cur;
}

std::vector<double> ref_classify(const ClassifierNet& net, const Image& img) {
  ParamLayout lay = net.layout();
  std::vector<double> top = ref_trunk(net.arch, lay, net.params, img);
  const std::size_t npix = img.pixel_count();
  const int C = lay.head_in;
  std::vector<double> gap(static_cast<std::size_t>(C), 0.0);
  for (std::size_t p = 0; p < npix; ++p)
    for (int c = 0; c < C; ++c) gap[static_cast<std::size_t>(c)] += top[p * C + c];
  for (auto& g : gap) g /= static_cast<double>(npix);
  std::vector<double> logits(static_cast<std::size_t>(lay.head_out));
  for (int k = 0; k < lay.head_out; ++k) {
    double acc = net.params[lay.head_b_off + k];
    for (int c = 0; c < C; ++c)
      acc += net.params[lay.head_w_off + static_cast<std::size_t>(k) * C + c] *
             gap[static_cast<std::size_t>(c)];
    logits[static_cast<std::size_t>(k)] = acc;
  }
  return logits;
}

}  // namespace

TEST_CASE("parameter layout offsets follow the declared packing") {
  ArchDescriptor arch;
  arch.in_channels = 3;
  arch.conv_widths = {8, 16};
  arch.num_classes = 4;

  ParamLayout cl = make_layout(arch, NetKind::Classifier);
  REQUIRE(cl.convs.size() == 2);
  CHECK(cl.convs[0].w_off == 0);
  CHECK(cl.convs[0].weight_count() == 8u * 3 * 9);
  CHECK(cl.convs[0].b_off == 216);
  CHECK(cl.convs[1].w_off == 224);
  CHECK(cl.convs[1].weight_count() == 16u * 8 * 9);
  CHECK(cl.convs[1].b_off == 224 + 1152);
  CHECK(cl.trunk_total == 1392);
  CHECK(cl.head_in == 16);
  CHECK(cl.head_out == 4);
  CHECK(cl.head_w_off == 1392);
  CHECK(cl.head_b_off == 1392 + 64);
  CHECK(cl.total == 1460);

  ParamLayout sg = make_layout(arch, NetKind::Segmenter);
  CHECK(sg.trunk_total == 1392);
  CHECK(sg.head_out == 5);
  CHECK(sg.total == 1392 + 80 + 5);
}

TEST_CASE("architecture validation rejects bad shapes") {
  ArchDescriptor arch;
  arch.in_channels = 3;
  arch.conv_widths = {4};
  arch.num_classes = 2;
  CHECK_NOTHROW(validate_arch(arch));

  ArchDescriptor bad = arch;
  bad.in_channels = 2;
  CHECK_THROWS_AS(validate_arch(bad), ConfigError);
  bad = arch;
  bad.conv_widths = {};
  CHECK_THROWS_AS(validate_arch(bad), ConfigError);
  bad = arch;
  bad.conv_widths = {0};
  CHECK_THROWS_AS(validate_arch(bad), ConfigError);
  bad = arch;
  bad.num_classes = 0;
  CHECK_THROWS_AS(validate_arch(bad), ConfigError);
}

TEST_CASE("initialization is bounded, zero-biased, and seed-deterministic") {
  ArchDescriptor arch;
  arch.in_channels = 3;
  arch.conv_widths = {8, 16};
  arch.num_classes = 4;

  ClassifierNet a = init_classifier(arch, 7);
  ClassifierNet b = init_classifier(arch, 7);
  ClassifierNet c = init_classifier(arch, 8);
  CHECK(a.params == b.params);
  CHECK(a.params != c.params);

  ParamLayout lay = a.layout();
  for (const auto& conv : lay.convs) {
    double bound = std::sqrt(3.0 / (conv.in_c * 9));
    for (std::size_t i = 0; i < conv.weight_count(); ++i) {
      CHECK(std::fabs(a.params[conv.w_off + i]) <= bound);
    }
    for (int i = 0; i < conv.out_c; ++i) CHECK(a.params[conv.b_off + i] == 0.0);
  }
  double head_bound = std::sqrt(3.0 / lay.head_in);
  for (std::size_t i = 0; i < static_cast<std::size_t>(lay.head_out) * lay.head_in; ++i)
    CHECK(std::fabs(a.params[lay.head_w_off + i]) <= head_bound);
  for (int k = 0; k < lay.head_out; ++k) CHECK(a.params[lay.head_b_off + k] == 0.0);

  // Classifier and segmenter trunks draw from distinct streams.
  SegmenterNet s = init_segmenter(arch, 7);
  CHECK(s.params[0] != a.params[0]);
}

TEST_CASE("classifier forward matches a naive reference network") {
  ArchDescriptor arch;
  arch.in_channels = 3;
  arch.conv_widths = {5, 7};
  arch.num_classes = 4;
  ClassifierNet net = init_classifier(arch, 11);
  Image img = random_image(9, 6, 3, 1234);

  std::vector<double> got = forward_classify(net, img);
  std::vector<double> want = ref_classify(net, img);
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i)
    CHECK_THAT(got[i], Catch::Matchers::WithinAbs(want[i], 1e-12));
}

TEST_CASE("segmenter forward matches a naive reference network") {
  ArchDescriptor arch;
  arch.in_channels = 1;
  arch.conv_widths = {6};
  arch.num_classes = 3;
  SegmenterNet net = init_segmenter(arch, 21);
  Image img = random_image(7, 8, 1, 99);

  PixelGrid got = forward_segment(net, img);
  ParamLayout lay = net.layout();
  std::vector<double> top = ref_trunk(net.arch, lay, net.params, img);
  REQUIRE(got.channels == 4);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int t = 0; t < lay.head_out; ++t) {
        std::size_t p = static_cast<std::size_t>(y) * img.width + x;
        double want = net.params[lay.head_b_off + t];
        for (int c = 0; c < lay.head_in; ++c)
          want += net.params[lay.head_w_off + static_cast<std::size_t>(t) * lay.head_in + c] *
                  top[p * lay.head_in + c];
        CHECK_THAT(got.at(x, y, t), Catch::Matchers::WithinAbs(want, 1e-12));
      }
}

TEST_CASE("constant-bias network reproduces hand-computed logits") {
  ArchDescriptor arch;
  arch.in_channels = 3;
  arch.conv_widths = {1};
  arch.num_classes = 2;
  ClassifierNet net{arch, std::vector<double>(make_layout(arch, NetKind::Classifier).total, 0.0)};
  ParamLayout lay = net.layout();
  net.params[lay.convs[0].b_off] = 0.5;
  net.params[lay.head_w_off + 0] = 2.0;
  net.params[lay.head_w_off + 1] = -3.0;
  net.params[lay.head_b_off + 0] = 0.125;
  net.params[lay.head_b_off + 1] = 0.25;

  Image img = random_image(4, 4, 3, 5);
  std::vector<double> logits = forward_classify(net, img);
  REQUIRE(logits.size() == 2);
  CHECK_THAT(logits[0], Catch::Matchers::WithinAbs(2.0 * 0.5 + 0.125, 1e-15));
  CHECK_THAT(logits[1], Catch::Matchers::WithinAbs(-3.0 * 0.5 + 0.25, 1e-15));
}

TEST_CASE("forward rejects channel-mismatched input") {
  ArchDescriptor arch;
  arch.in_channels = 3;
  arch.conv_widths = {4};
  arch.num_classes = 2;
  ClassifierNet net = init_classifier(arch, 3);
  Image gray = random_image(4, 4, 1, 2);
  CHECK_THROWS_AS(forward_classify(net, gray), ShapeError);
}

TEST_CASE("input gradient targets must address a valid class") {
  ArchDescriptor arch;
  arch.in_channels = 3;
  arch.conv_widths = {4};
  arch.num_classes = 2;
  ClassifierNet net = init_classifier(arch, 3);
  Image img = random_image(4, 4, 3, 2);
  CHECK_THROWS_AS(grad_input(net, img, -1), ConfigError);
  CHECK_THROWS_AS(grad_input(net, img, 2), ConfigError);
  CHECK_NOTHROW(grad_input(net, img, 1));
}

TEST_CASE("parameter gradients agree with central differences") {
  Image img = random_image(8, 8, 3, 77);

  ArchDescriptor arch;
  arch.in_channels = 3;
  arch.conv_widths = {4};
  arch.num_classes = 2;

  SECTION("classifier") {
    ClassifierNet net = init_classifier(arch, 13);
    GradCheckReport rep = finite_diff_check(net, img, 1e-5);
    CHECK(rep.probe_count > 100);
    CHECK(rep.max_rel_error <= 1e-4);
  }
  SECTION("segmenter") {
    SegmenterNet net = init_segmenter(arch, 13);
    GradCheckReport rep = finite_diff_check(net, img, 1e-5);
    CHECK(rep.probe_count > 100);
    CHECK(rep.max_rel_error <= 1e-4);
  }
  SECTION("two conv layers") {
    ArchDescriptor deep = arch;
    deep.conv_widths = {4, 6};
    SegmenterNet net = init_segmenter(deep, 29);
    GradCheckReport rep = finite_diff_check(net, img, 1e-5);
    CHECK(rep.probe_count > 200);
    CHECK(rep.max_rel_error <= 1e-4);
  }
}

TEST_CASE("finite-difference check rejects a non-positive step") {
  ArchDescriptor arch;
  arch.in_channels = 3;
  arch.conv_widths = {4};
  arch.num_classes = 2;
  ClassifierNet net = init_classifier(arch, 1);
  Image img = random_image(4, 4, 3, 1);
  CHECK_THROWS_AS(finite_diff_check(net, img, 0.0), ConfigError);
  CHECK_THROWS_AS(finite_diff_check(net, img, -1e-5), ConfigError);
}

TEST_CASE("input gradients agree with central differences") {
  ArchDescriptor arch;
  arch.in_channels = 3;
  arch.conv_widths = {4};
  arch.num_classes = 3;
  ClassifierNet net = init_classifier(arch, 17);
  Image img = random_image(6, 6, 3, 55);
  const int target = 1;
  const double step = 1e-5;

  std::vector<double> analytic = grad_input(net, img, target);
  REQUIRE(analytic.size() == img.data.size());

  std::size_t checked = 0;
  double max_rel = 0.0;
  Image work = img;
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    double original = work.data[i];
    detail::TrunkTrace tr;
    work.data[i] = original + step;
    double f_plus = forward_classify_traced(net, work, &tr, nullptr)[target];
    double kink_plus = tr.min_abs_pre;
    work.data[i] = original - step;
    double f_minus = forward_classify_traced(net, work, &tr, nullptr)[target];
    double kink_minus = tr.min_abs_pre;
    work.data[i] = original;
    if (kink_plus < detail::kKinkTol || kink_minus < detail::kKinkTol) continue;
    double fd = (f_plus - f_minus) / (2.0 * step);
    max_rel = std::max(max_rel, rel_error(analytic[i], fd));
    ++checked;
  }
  CHECK(checked > 50);
  CHECK(max_rel <= 1e-4);
}

TEST_CASE("gradient check flags a sign-flipped coordinate") {
  ArchDescriptor arch;
  arch.in_channels = 3;
  arch.conv_widths = {4};
  arch.num_classes = 2;
  ClassifierNet net = init_classifier(arch, 31);
  Image img = random_image(8, 8, 3, 31);
  ParamLayout lay = net.layout();

  std::vector<double> u = detail::fixed_upstream(static_cast<std::size_t>(lay.head_out));
  std::vector<double> analytic = backward_params(net, img, u);

  std::vector<std::size_t> probes(lay.total);
  std::iota(probes.begin(), probes.end(), std::size_t{0});
  std::vector<double> fd;
  std::vector<bool> skipped;
  fd_param_gradient(net.params, probes, 1e-5,
                    [&](const std::vector<double>& p, double* kink) {
                      return classifier_objective(net.arch, p, img, u, kink);
                    },
                    fd, skipped);

  // Corrupt the largest-magnitude unskipped coordinate and confirm the
  // comparison blows past any plausible tolerance.
  std::size_t victim = lay.total;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    if (skipped[i]) continue;
    if (victim == lay.total || std::fabs(analytic[probes[i]]) > std::fabs(analytic[victim]))
      victim = probes[i];
  }
  REQUIRE(victim != lay.total);
  REQUIRE(std::fabs(analytic[victim]) > 1e-3);

  std::vector<double> corrupted = analytic;
  corrupted[victim] = -corrupted[victim];
  double max_rel = 0.0;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    if (skipped[i]) continue;
    max_rel = std::max(max_rel, rel_error(corrupted[probes[i]], fd[i]));
  }
  CHECK(max_rel >= 0.5);
}

TEST_CASE("backbone transplant copies the trunk and keeps the head") {
  ArchDescriptor carch;
  carch.in_channels = 3;
  carch.conv_widths = {5, 7};
  carch.num_classes = 6;
  ArchDescriptor sarch = carch;
  sarch.num_classes = 4;

  ClassifierNet cls = init_classifier(carch, 41);
  SegmenterNet fresh = init_segmenter(sarch, 42);
  SegmenterNet moved = transplant_backbone(cls, fresh);

  ParamLayout lay = moved.layout();
  for (std::size_t i = 0; i < lay.trunk_total; ++i) CHECK(moved.params[i] == cls.params[i]);
  for (std::size_t i = lay.trunk_total; i < lay.total; ++i) CHECK(moved.params[i] == fresh.params[i]);

  ArchDescriptor other = carch;
  other.conv_widths = {5, 8};
  CHECK_THROWS_AS(transplant_backbone(init_classifier(other, 1), fresh), ConfigError);
}

TEST_CASE("segmenter transplant supports backbone-only and full modes") {
  ArchDescriptor arch;
  arch.in_channels = 3;
  arch.conv_widths = {4};
  arch.num_classes = 3;
  SegmenterNet src = init_segmenter(arch, 51);
  SegmenterNet dst = init_segmenter(arch, 52);

  SegmenterNet bb = transplant_backbone(src, dst, TransplantMode::BackboneOnly);
  ParamLayout lay = bb.layout();
  for (std::size_t i = 0; i < lay.trunk_total; ++i) CHECK(bb.params[i] == src.params[i]);
  for (std::size_t i = lay.trunk_total; i < lay.total; ++i) CHECK(bb.params[i] == dst.params[i]);

  SegmenterNet full = transplant_backbone(src, dst, TransplantMode::Full);
  CHECK(full.params == src.params);

  ArchDescriptor more_classes = arch;
  more_classes.num_classes = 5;
  SegmenterNet wider = init_segmenter(more_classes, 53);
  CHECK_NOTHROW(transplant_backbone(src, wider, TransplantMode::BackboneOnly));
  CHECK_THROWS_AS(transplant_backbone(src, wider, TransplantMode::Full), ConfigError);
}

TEST_CASE("checkpoints round-trip through single-precision storage") {
  ArchDescriptor arch;
  arch.in_channels = 3;
  arch.conv_widths = {5, 7};
  arch.num_classes = 4;
  ClassifierNet net = init_classifier(arch, 61);
  fs::path dir = temp_dir();
  fs::path path = dir / "model.tnet";
  save_checkpoint(net, path);

  ClassifierNet back = load_classifier(path);
  CHECK(back.arch == net.arch);
  REQUIRE(back.params.size() == net.params.size());
  for (std::size_t i = 0; i < net.params.size(); ++i)
    CHECK(back.params[i] == static_cast<double>(static_cast<float>(net.params[i])));

  // Re-saving the loaded net reproduces the file byte for byte.
  fs::path path2 = dir / "model2.tnet";
  save_checkpoint(back, path2);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  std::string bytes_a((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string bytes_b((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(bytes_a == bytes_b);

  CHECK_THROWS_AS(load_segmenter(path), FormatError);
}

TEST_CASE("segmenter checkpoints preserve kind and architecture") {
  ArchDescriptor arch;
  arch.in_channels = 1;
  arch.conv_widths = {4};
  arch.num_classes = 2;
  SegmenterNet net = init_segmenter(arch, 71);
  fs::path path = temp_dir() / "seg.tnet";
  save_checkpoint(net, path);
  Checkpoint ck = load_checkpoint(path);
  CHECK(ck.kind == NetKind::Segmenter);
  CHECK(ck.arch == arch);
  CHECK_THROWS_AS(load_classifier(path), FormatError);
}

TEST_CASE("checkpoint loader rejects corruption") {
  ArchDescriptor arch;
  arch.in_channels = 3;
  arch.conv_widths = {4};
  arch.num_classes = 2;
  ClassifierNet net = init_classifier(arch, 81);
  fs::path dir = temp_dir();
  fs::path good = dir / "good.tnet";
  save_checkpoint(net, good);

  std::ifstream in(good, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();

  auto write_bytes = [&](const std::string& data, const fs::path& p) {
    std::ofstream out(p, std::ios::binary);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
  };

  SECTION("flipped payload byte fails the checksum") {
    std::string bad = bytes;
    bad[bad.size() / 2] = static_cast<char>(bad[bad.size() / 2] ^ 0x5a);
    fs::path p = dir / "sum.tnet";
    write_bytes(bad, p);
    try {
      load_checkpoint(p);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("checksum") != std::string::npos);
    }
  }
  SECTION("wrong magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    fs::path p = dir / "magic.tnet";
    write_bytes(bad, p);
    try {
      load_checkpoint(p);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("magic") != std::string::npos);
    }
  }
  SECTION("unknown version") {
    std::string bad = bytes;
    bad[4] = 0x02;
    fs::path p = dir / "ver.tnet";
    write_bytes(bad, p);
    try {
      load_checkpoint(p);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
  }
  SECTION("truncated file") {
    std::string bad = bytes.substr(0, bytes.size() - 5);
    fs::path p = dir / "trunc.tnet";
    write_bytes(bad, p);
    CHECK_THROWS_AS(load_checkpoint(p), FormatError);
  }
  SECTION("parameter count disagrees with the architecture") {
    std::vector<double> padded = net.params;
    padded.push_back(0.0);
    fs::path p = dir / "count.tnet";
    save_checkpoint(NetKind::Classifier, arch, padded, p);
    try {
      load_checkpoint(p);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("count") != std::string::npos);
    }
  }
  SECTION("missing file raises an I/O error") {
    CHECK_THROWS_AS(load_checkpoint(dir / "absent.tnet"), IoError);
  }
}
