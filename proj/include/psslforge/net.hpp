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
// Tiny differentiable networks with exact hand-derived backpropagation.
//
// ClassifierNet: [conv3x3 same-pad -> relu] x L -> global average pool ->
// affine -> K logits. SegmenterNet shares the conv trunk and replaces the
// pooled affine head with a 1x1 convolution producing K+1 per-pixel logits
// (K foreground classes plus background), so output spatial dims equal input
// dims. Parameters live in one flat double vector with an explicit layout.
// ReLU uses subgradient 0 at the kink; finite-difference probes skip points
// within kink_tol of a kink so gradient checks stay well-posed.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "psslforge/common.hpp"
#include "psslforge/image.hpp"

namespace pssl {

enum class NetKind : std::uint8_t { Classifier = 0, Segmenter = 1 };

struct ArchDescriptor {
  int in_channels = 3;
  std::vector<int> conv_widths = {8, 16};
  int num_classes = 0;  // K foreground classes

  bool trunk_equals(const ArchDescriptor& other) const {
    return in_channels == other.in_channels && conv_widths == other.conv_widths;
  }
  bool operator==(const ArchDescriptor& other) const {
    return trunk_equals(other) && num_classes == other.num_classes;
  }
};

inline void validate_arch(const ArchDescriptor& arch) {
  if (arch.in_channels != 1 && arch.in_channels != 3) throw ConfigError("in_channels must be 1 or 3");
  if (arch.conv_widths.empty()) throw ConfigError("at least one conv layer required");
  for (int w : arch.conv_widths)
    if (w < 1 || w > 4096) throw ConfigError("conv width out of range: " + std::to_string(w));
  if (arch.num_classes < 1) throw ConfigError("num_classes must be >= 1");
}

// Offsets of each parameter block inside the flat vector.
// Conv weights are [out][in][ky][kx]; the head is an affine K x C block for
// classifiers or a 1x1 conv (K+1) x C block for segmenters, weights first,
// then biases.
struct ParamLayout {
  struct ConvSlice {
    std::size_t w_off = 0, b_off = 0;
    int in_c = 0, out_c = 0;
    std::size_t weight_count() const { return static_cast<std::size_t>(out_c) * in_c * 9; }
  };
  std::vector<ConvSlice> convs;
  std::size_t head_w_off = 0, head_b_off = 0;
  int head_in = 0, head_out = 0;
  std::size_t total = 0;
  std::size_t trunk_total = 0;  // parameters before the head
};

inline ParamLayout make_layout(const ArchDescriptor& arch, NetKind kind) {
  validate_arch(arch);
  ParamLayout lay;
  std::size_t off = 0;
  int prev = arch.in_channels;
  for (int w : arch.conv_widths) {
    ParamLayout::ConvSlice s;
    s.in_c = prev;
    s.out_c = w;
    s.w_off = off;
    off += s.weight_count();
    s.b_off = off;
    off += static_cast<std::size_t>(w);
    lay.convs.push_back(s);
    prev = w;
  }
  lay.trunk_total = off;
  lay.head_in = prev;
  lay.head_out = kind == NetKind::Classifier ? arch.num_classes : arch.num_classes + 1;
  lay.head_w_off = off;
  off += static_cast<std::size_t>(lay.head_out) * lay.head_in;
  lay.head_b_off = off;
  off += static_cast<std::size_t>(lay.head_out);
  lay.total = off;
  return lay;
}

struct ClassifierNet {
  ArchDescriptor arch;
  std::vector<double> params;
  ParamLayout layout() const { return make_layout(arch, NetKind::Classifier); }
};

struct SegmenterNet {
  ArchDescriptor arch;
  std::vector<double> params;
  ParamLayout layout() const { return make_layout(arch, NetKind::Segmenter); }
};

// Weights uniform in (-sqrt(3/fan_in), sqrt(3/fan_in)) (variance 1/fan_in),
// biases zero; deterministic per (arch, seed).
inline std::vector<double> init_params(const ArchDescriptor& arch, NetKind kind, std::uint64_t seed) {
  ParamLayout lay = make_layout(arch, kind);
  std::vector<double> p(lay.total, 0.0);
  SplitMix64 rng(derive_seed(seed, static_cast<std::uint64_t>(kind)));
  for (const auto& conv : lay.convs) {
    double bound = std::sqrt(3.0 / (conv.in_c * 9));
    for (std::size_t i = 0; i < conv.weight_count(); ++i) p[conv.w_off + i] = rng.uniform(-bound, bound);
  }
  double bound = std::sqrt(3.0 / lay.head_in);
  for (std::size_t i = 0; i < static_cast<std::size_t>(lay.head_out) * lay.head_in; ++i)
    p[lay.head_w_off + i] = rng.uniform(-bound, bound);
  return p;
}

inline ClassifierNet init_classifier(const ArchDescriptor& arch, std::uint64_t seed) {
  return {arch, init_params(arch, NetKind::Classifier, seed)};
}

inline SegmenterNet init_segmenter(const ArchDescriptor& arch, std::uint64_t seed) {
  return {arch, init_params(arch, NetKind::Segmenter, seed)};
}

// Per-pixel multi-channel grid (row-major, channel-interleaved), used for
// segmentation logits, probabilities, and their gradients.
struct PixelGrid {
  int height = 0, width = 0, channels = 0;
  std::vector<double> v;

  double& at(int x, int y, int c) { return v[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int x, int y, int c) const { return v[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
};

inline PixelGrid make_grid(int height, int width, int channels, double fill = 0.0) {
  PixelGrid g;
  g.height = height;
  g.width = width;
  g.channels = channels;
  g.v.assign(static_cast<std::size_t>(height) * width * channels, fill);
  return g;
}

namespace detail {

// 3x3 convolution, stride 1, zero padding 1. in: H*W*Cin, out: H*W*Cout.
// w: [oc][ic][ky][kx], b: [oc].
inline void conv3x3_forward(const double* in, int H, int W, int Cin, const double* w, const double* b,
                            int Cout, double* out) {
  for (int oy = 0; oy < H; ++oy) {
    for (int ox = 0; ox < W; ++ox) {
      double* orow = out + (static_cast<std::size_t>(oy) * W + ox) * Cout;
      for (int oc = 0; oc < Cout; ++oc) {
        double acc = b[oc];
        const double* wk = w + static_cast<std::size_t>(oc) * Cin * 9;
        for (int ky = 0; ky < 3; ++ky) {
          int iy = oy + ky - 1;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < 3; ++kx) {
            int ix = ox + kx - 1;
            if (ix < 0 || ix >= W) continue;
            const double* irow = in + (static_cast<std::size_t>(iy) * W + ix) * Cin;
            const double* wrow = wk + (ky * 3 + kx);
            for (int ic = 0; ic < Cin; ++ic) acc += irow[ic] * wrow[static_cast<std::size_t>(ic) * 9];
          }
        }
        orow[oc] = acc;
      }
    }
  }
}

inline void conv3x3_backward_input(const double* dout, int H, int W, int Cout, const double* w, int Cin,
                                   double* din) {
  std::fill(din, din + static_cast<std::size_t>(H) * W * Cin, 0.0);
  for (int oy = 0; oy < H; ++oy) {
    for (int ox = 0; ox < W; ++ox) {
      const double* drow = dout + (static_cast<std::size_t>(oy) * W + ox) * Cout;
      for (int oc = 0; oc < Cout; ++oc) {
        double g = drow[oc];
        if (g == 0.0) continue;
        const double* wk = w + static_cast<std::size_t>(oc) * Cin * 9;
        for (int ky = 0; ky < 3; ++ky) {
          int iy = oy + ky - 1;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < 3; ++kx) {
            int ix = ox + kx - 1;
            if (ix < 0 || ix >= W) continue;
            double* irow = din + (static_cast<std::size_t>(iy) * W + ix) * Cin;
            const double* wrow = wk + (ky * 3 + kx);
            for (int ic = 0; ic < Cin; ++ic) irow[ic] += g * wrow[static_cast<std::size_t>(ic) * 9];
          }
        }
      }
    }
  }
}

inline void conv3x3_backward_params(const double* dout, const double* in, int H, int W, int Cin, int Cout,
                                    double* dw, double* db) {
  for (int oy = 0; oy < H; ++oy) {
    for (int ox = 0; ox < W; ++ox) {
      const double* drow = dout + (static_cast<std::size_t>(oy) * W + ox) * Cout;
      for (int oc = 0; oc < Cout; ++oc) {
        double g = drow[oc];
        if (g == 0.0) continue;
        db[oc] += g;
        double* wk = dw + static_cast<std::size_t>(oc) * Cin * 9;
        for (int ky = 0; ky < 3; ++ky) {
          int iy = oy + ky - 1;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < 3; ++kx) {
            int ix = ox + kx - 1;
            if (ix < 0 || ix >= W) continue;
            const double* irow = in + (static_cast<std::size_t>(iy) * W + ix) * Cin;
            double* wrow = wk + (ky * 3 + kx);
            for (int ic = 0; ic < Cin; ++ic) wrow[static_cast<std::size_t>(ic) * 9] += g * irow[ic];
          }
        }
      }
    }
  }
}

// Trunk evaluation with stored pre-activations (needed for the backward
// passes) and the distance to the nearest ReLU kink.
struct TrunkTrace {
  std::vector<std::vector<double>> pre;
  std::vector<std::vector<double>> act;
  double min_abs_pre = std::numeric_limits<double>::infinity();
};

inline TrunkTrace trunk_forward(const ArchDescriptor& arch, const ParamLayout& lay,
                                const std::vector<double>& params, const Image& img) {
  if (img.channels != arch.in_channels)
    throw ShapeError("image channels (" + std::to_string(img.channels) + ") do not match net input channels (" +
                     std::to_string(arch.in_channels) + ")");
  TrunkTrace tr;
  const int H = img.height, W = img.width;
  const double* cur = img.data.data();
  int cur_c = arch.in_channels;
  for (const auto& conv : lay.convs) {
    std::vector<double> pre(static_cast<std::size_t>(H) * W * conv.out_c);
    conv3x3_forward(cur, H, W, cur_c, params.data() + conv.w_off, params.data() + conv.b_off, conv.out_c,
                    pre.data());
    std::vector<double> act(pre.size());
    for (std::size_t i = 0; i < pre.size(); ++i) {
      tr.min_abs_pre = std::min(tr.min_abs_pre, std::fabs(pre[i]));
      act[i] = pre[i] > 0.0 ? pre[i] : 0.0;
    }
    tr.pre.push_back(std::move(pre));
    tr.act.push_back(std::move(act));
    cur = tr.act.back().data();
    cur_c = conv.out_c;
  }
  return tr;
}

// Shared conv-chain backward: consumes d(last activation), accumulates
// parameter gradients (when dparams != nullptr) and optionally returns
// d(input) (when dinput != nullptr).
inline void trunk_backward(const ArchDescriptor& arch, const ParamLayout& lay,
                           const std::vector<double>& params, const Image& img, const TrunkTrace& tr,
                           std::vector<double> dact_last, std::vector<double>* dparams,
                           std::vector<double>* dinput) {
  const int H = img.height, W = img.width;
  std::vector<double> dact = std::move(dact_last);
  for (int l = static_cast<int>(lay.convs.size()) - 1; l >= 0; --l) {
    const auto& conv = lay.convs[static_cast<std::size_t>(l)];
    // relu backward, subgradient 0 at the kink
    std::vector<double>& dpre = dact;
    const std::vector<double>& pre = tr.pre[static_cast<std::size_t>(l)];
    for (std::size_t i = 0; i < dpre.size(); ++i)
      if (!(pre[i] > 0.0)) dpre[i] = 0.0;
    const double* below = l == 0 ? img.data.data() : tr.act[static_cast<std::size_t>(l - 1)].data();
    int below_c = l == 0 ? arch.in_channels : lay.convs[static_cast<std::size_t>(l - 1)].out_c;
    if (dparams)
      conv3x3_backward_params(dpre.data(), below, H, W, below_c, conv.out_c, dparams->data() + conv.w_off,
                              dparams->data() + conv.b_off);
    if (l > 0) {
      std::vector<double> dbelow(static_cast<std::size_t>(H) * W * below_c);
      conv3x3_backward_input(dpre.data(), H, W, conv.out_c, params.data() + conv.w_off, below_c,
                             dbelow.data());
      dact = std::move(dbelow);
    } else if (dinput) {
      dinput->assign(static_cast<std::size_t>(H) * W * below_c, 0.0);
      conv3x3_backward_input(dpre.data(), H, W, conv.out_c, params.data() + conv.w_off, below_c,
                             dinput->data());
    }
  }
}

}  // namespace detail

// ---- Classifier ----

inline std::vector<double> forward_classify_traced(const ClassifierNet& net, const Image& img,
                                                   detail::TrunkTrace* trace_out,
                                                   std::vector<double>* gap_out) {
  ParamLayout lay = net.layout();
  detail::TrunkTrace tr = detail::trunk_forward(net.arch, lay, net.params, img);
  const std::size_t npix = img.pixel_count();
  const int C = lay.head_in;
  std::vector<double> gap(static_cast<std::size_t>(C), 0.0);
  const std::vector<double>& top = tr.act.back();
  for (std::size_t p = 0; p < npix; ++p)
    for (int c = 0; c < C; ++c) gap[static_cast<std::size_t>(c)] += top[p * C + c];
  for (int c = 0; c < C; ++c) gap[static_cast<std::size_t>(c)] /= static_cast<double>(npix);
  std::vector<double> logits(static_cast<std::size_t>(lay.head_out));
  for (int k = 0; k < lay.head_out; ++k) {
    double acc = net.params[lay.head_b_off + k];
    for (int c = 0; c < C; ++c) acc += net.params[lay.head_w_off + static_cast<std::size_t>(k) * C + c] * gap[static_cast<std::size_t>(c)];
    logits[static_cast<std::size_t>(k)] = acc;
  }
  if (trace_out) *trace_out = std::move(tr);
  if (gap_out) *gap_out = std::move(gap);
  return logits;
}

inline std::vector<double> forward_classify(const ClassifierNet& net, const Image& img) {
  return forward_classify_traced(net, img, nullptr, nullptr);
}

// Exact gradient of logits[class_id] with respect to every input value,
// returned as an H*W*channels grid (channel-interleaved like Image).
inline std::vector<double> grad_input(const ClassifierNet& net, const Image& img, int class_id) {
  if (class_id < 0 || class_id >= net.arch.num_classes)
    throw ConfigError("class_id " + std::to_string(class_id) + " out of range [0," +
                      std::to_string(net.arch.num_classes) + ")");
  ParamLayout lay = net.layout();
  detail::TrunkTrace tr = detail::trunk_forward(net.arch, lay, net.params, img);
  const std::size_t npix = img.pixel_count();
  const int C = lay.head_in;
  std::vector<double> dact(npix * C);
  for (std::size_t p = 0; p < npix; ++p)
    for (int c = 0; c < C; ++c)
      dact[p * C + c] = net.params[lay.head_w_off + static_cast<std::size_t>(class_id) * C + c] /
                        static_cast<double>(npix);
  std::vector<double> dinput;
  detail::trunk_backward(net.arch, lay, net.params, img, tr, std::move(dact), nullptr, &dinput);
  return dinput;
}

// Gradient of <upstream, logits> with respect to every parameter.
inline std::vector<double> backward_params(const ClassifierNet& net, const Image& img,
                                           const std::vector<double>& upstream) {
  ParamLayout lay = net.layout();
  if (upstream.size() != static_cast<std::size_t>(lay.head_out))
    throw ShapeError("upstream gradient length does not match logit count");
  detail::TrunkTrace tr;
  std::vector<double> gap;
  forward_classify_traced(net, img, &tr, &gap);
  const std::size_t npix = img.pixel_count();
  const int C = lay.head_in;
  std::vector<double> grad(lay.total, 0.0);
  for (int k = 0; k < lay.head_out; ++k) {
    grad[lay.head_b_off + k] = upstream[static_cast<std::size_t>(k)];
    for (int c = 0; c < C; ++c)
      grad[lay.head_w_off + static_cast<std::size_t>(k) * C + c] =
          upstream[static_cast<std::size_t>(k)] * gap[static_cast<std::size_t>(c)];
  }
  std::vector<double> dgap(static_cast<std::size_t>(C), 0.0);
  for (int k = 0; k < lay.head_out; ++k)
    for (int c = 0; c < C; ++c)
      dgap[static_cast<std::size_t>(c)] +=
          upstream[static_cast<std::size_t>(k)] * net.params[lay.head_w_off + static_cast<std::size_t>(k) * C + c];
  std::vector<double> dact(npix * C);
  for (std::size_t p = 0; p < npix; ++p)
    for (int c = 0; c < C; ++c) dact[p * C + c] = dgap[static_cast<std::size_t>(c)] / static_cast<double>(npix);
  detail::trunk_backward(net.arch, lay, net.params, img, tr, std::move(dact), &grad, nullptr);
  return grad;
}

// ---- Segmenter ----

inline PixelGrid forward_segment_traced(const SegmenterNet& net, const Image& img,
                                        detail::TrunkTrace* trace_out) {
  ParamLayout lay = net.layout();
  detail::TrunkTrace tr = detail::trunk_forward(net.arch, lay, net.params, img);
  const std::size_t npix = img.pixel_count();
  const int C = lay.head_in;
  const int T = lay.head_out;
  PixelGrid out = make_grid(img.height, img.width, T);
  const std::vector<double>& top = tr.act.back();
  for (std::size_t p = 0; p < npix; ++p) {
    for (int t = 0; t < T; ++t) {
      double acc = net.params[lay.head_b_off + t];
      const double* w = net.params.data() + lay.head_w_off + static_cast<std::size_t>(t) * C;
      for (int c = 0; c < C; ++c) acc += w[c] * top[p * C + c];
      out.v[p * T + t] = acc;
    }
  }
  if (trace_out) *trace_out = std::move(tr);
  return out;
}

inline PixelGrid forward_segment(const SegmenterNet& net, const Image& img) {
  return forward_segment_traced(net, img, nullptr);
}

// Gradient of <upstream, output> over all parameters; upstream is an
// H x W x (K+1) grid matching forward_segment's output.
inline std::vector<double> backward_params(const SegmenterNet& net, const Image& img,
                                           const PixelGrid& upstream) {
  ParamLayout lay = net.layout();
  if (upstream.height != img.height || upstream.width != img.width || upstream.channels != lay.head_out)
    throw ShapeError("upstream grid shape does not match segmenter output");
  detail::TrunkTrace tr;
  forward_segment_traced(net, img, &tr);
  const std::size_t npix = img.pixel_count();
  const int C = lay.head_in;
  const int T = lay.head_out;
  std::vector<double> grad(lay.total, 0.0);
  const std::vector<double>& top = tr.act.back();
  std::vector<double> dact(npix * C, 0.0);
  for (std::size_t p = 0; p < npix; ++p) {
    for (int t = 0; t < T; ++t) {
      double g = upstream.v[p * T + t];
      if (g == 0.0) continue;
      grad[lay.head_b_off + t] += g;
      double* dw = grad.data() + lay.head_w_off + static_cast<std::size_t>(t) * C;
      const double* w = net.params.data() + lay.head_w_off + static_cast<std::size_t>(t) * C;
      for (int c = 0; c < C; ++c) {
        dw[c] += g * top[p * C + c];
        dact[p * C + c] += g * w[c];
      }
    }
  }
  detail::trunk_backward(net.arch, lay, net.params, img, tr, std::move(dact), &grad, nullptr);
  return grad;
}

// ---- Backbone transplant ----

enum class TransplantMode { BackboneOnly, Full };

// Copies the conv trunk from a trained classifier into dst, leaving the head
// as initialized. This is the conventional initialization.
inline SegmenterNet transplant_backbone(const ClassifierNet& src, SegmenterNet dst) {
  if (!src.arch.trunk_equals(dst.arch)) throw ConfigError("trunk architectures differ, cannot transplant");
  ParamLayout src_lay = src.layout();
  std::copy(src.params.begin(), src.params.begin() + static_cast<std::ptrdiff_t>(src_lay.trunk_total),
            dst.params.begin());
  return dst;
}

// Segmenter-to-segmenter transplant: backbone-only copies the trunk, full
// copies every parameter (the proposed end-to-end initialization).
inline SegmenterNet transplant_backbone(const SegmenterNet& src, SegmenterNet dst, TransplantMode mode) {
  if (!src.arch.trunk_equals(dst.arch)) throw ConfigError("trunk architectures differ, cannot transplant");
  ParamLayout src_lay = src.layout();
  if (mode == TransplantMode::Full) {
    if (!(src.arch == dst.arch)) throw ConfigError("full transplant requires identical architectures");
    dst.params = src.params;
  } else {
    std::copy(src.params.begin(), src.params.begin() + static_cast<std::ptrdiff_t>(src_lay.trunk_total),
              dst.params.begin());
  }
  return dst;
}

// ---- Checkpoint format ----
//
// magic "TNET", version byte 0x01, kind byte, in_channels u16 LE,
// num_classes u16 LE, conv layer count u8, conv widths u16 LE each,
// parameter count u64 LE, raw float32 LE parameter values, trailing
// FNV-1a 64 checksum (u64 LE) over all preceding bytes.

struct Checkpoint {
  NetKind kind = NetKind::Classifier;
  ArchDescriptor arch;
  std::vector<double> params;
};

inline void save_checkpoint(NetKind kind, const ArchDescriptor& arch, const std::vector<double>& params,
                            const std::filesystem::path& path) {
  std::vector<std::uint8_t> buf;
  buf.reserve(params.size() * 4 + 64);
  for (char c : {'T', 'N', 'E', 'T'}) buf.push_back(static_cast<std::uint8_t>(c));
  put_u8(buf, 0x01);
  put_u8(buf, static_cast<std::uint8_t>(kind));
  put_u16le(buf, static_cast<std::uint16_t>(arch.in_channels));
  put_u16le(buf, static_cast<std::uint16_t>(arch.num_classes));
  put_u8(buf, static_cast<std::uint8_t>(arch.conv_widths.size()));
  for (int w : arch.conv_widths) put_u16le(buf, static_cast<std::uint16_t>(w));
  put_u64le(buf, static_cast<std::uint64_t>(params.size()));
  for (double v : params) put_f32le(buf, static_cast<float>(v));
  put_u64le(buf, fnv1a64(buf.data(), buf.size()));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline void save_checkpoint(const ClassifierNet& net, const std::filesystem::path& path) {
  save_checkpoint(NetKind::Classifier, net.arch, net.params, path);
}

inline void save_checkpoint(const SegmenterNet& net, const std::filesystem::path& path) {
  save_checkpoint(NetKind::Segmenter, net.arch, net.params, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 + 8 + 8) throw FormatError("checkpoint too short: " + path.string());
  if (buf[0] != 'T' || buf[1] != 'N' || buf[2] != 'E' || buf[3] != 'T')
    throw FormatError("bad magic in checkpoint " + path.string());
  if (buf[4] != 0x01) throw FormatError("unsupported checkpoint version " + std::to_string(buf[4]));
  std::uint64_t stored_sum = get_u64le(buf.data() + buf.size() - 8);
  if (stored_sum != fnv1a64(buf.data(), buf.size() - 8))
    throw FormatError("checksum mismatch in checkpoint " + path.string());
  Checkpoint ck;
  if (buf[5] > 1) throw FormatError("unknown net kind in checkpoint");
  ck.kind = static_cast<NetKind>(buf[5]);
  ck.arch.in_channels = get_u16le(buf.data() + 6);
  ck.arch.num_classes = get_u16le(buf.data() + 8);
  std::size_t n_conv = buf[10];
  std::size_t off = 11;
  if (buf.size() < off + n_conv * 2 + 8 + 8) throw FormatError("checkpoint header truncated");
  ck.arch.conv_widths.clear();
  for (std::size_t i = 0; i < n_conv; ++i, off += 2)
    ck.arch.conv_widths.push_back(get_u16le(buf.data() + off));
  std::uint64_t count = get_u64le(buf.data() + off);
  off += 8;
  if (buf.size() != off + count * 4 + 8)
    throw FormatError("checkpoint parameter payload truncated: expected " + std::to_string(count * 4) +
                      " bytes");
  ParamLayout lay = make_layout(ck.arch, ck.kind);
  if (count != lay.total) throw FormatError("parameter count does not match architecture");
  ck.params.resize(count);
  for (std::uint64_t i = 0; i < count; ++i)
    ck.params[static_cast<std::size_t>(i)] = static_cast<double>(get_f32le(buf.data() + off + i * 4));
  return ck;
}

inline ClassifierNet load_classifier(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.kind != NetKind::Classifier) throw FormatError("checkpoint is not a classifier: " + path.string());
  return {ck.arch, std::move(ck.params)};
}

inline SegmenterNet load_segmenter(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.kind != NetKind::Segmenter) throw FormatError("checkpoint is not a segmenter: " + path.string());
  return {ck.arch, std::move(ck.params)};
}

// ---- Finite-difference gradient checking ----

struct GradCheckReport {
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  std::size_t probe_count = 0;
};

// Relative error with an absolute floor: differences at or below the floor
// count as zero.
inline double rel_error(double a, double b, double abs_floor = 1e-6) {
  double diff = std::fabs(a - b);
  if (diff <= abs_floor) return 0.0;
  return diff / std::max(std::fabs(a), std::fabs(b));
}

namespace detail {

constexpr double kKinkTol = 1e-5;
constexpr std::uint64_t kProbeSeed = 0x5eedf00dcafe1234ull;

inline std::vector<std::size_t> probe_indices(std::size_t total, std::size_t cap) {
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (total <= cap) return idx;
  seeded_shuffle(idx, kProbeSeed);
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<double> fixed_upstream(std::size_t n) {
  SplitMix64 rng(kProbeSeed);
  std::vector<double> u(n);
  for (auto& v : u) v = rng.uniform(-1.0, 1.0);
  return u;
}

}  // namespace detail

// Scalar objective <u, logits> for a classifier at the given parameters, with
// kink proximity reported for probe skipping.
inline double classifier_objective(const ArchDescriptor& arch, const std::vector<double>& params,
                                   const Image& img, const std::vector<double>& u, double* min_abs_pre) {
  ClassifierNet tmp{arch, params};
  detail::TrunkTrace tr;
  std::vector<double> gap;
  std::vector<double> logits = forward_classify_traced(tmp, img, &tr, &gap);
  if (min_abs_pre) *min_abs_pre = tr.min_abs_pre;
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += u[i] * logits[i];
  return s;
}

inline double segmenter_objective(const ArchDescriptor& arch, const std::vector<double>& params,
                                  const Image& img, const std::vector<double>& u, double* min_abs_pre) {
  SegmenterNet tmp{arch, params};
  detail::TrunkTrace tr;
  PixelGrid out = forward_segment_traced(tmp, img, &tr);
  if (min_abs_pre) *min_abs_pre = tr.min_abs_pre;
  double s = 0.0;
  for (std::size_t i = 0; i < out.v.size(); ++i) s += u[i] * out.v[i];
  return s;
}

// Central-difference parameter gradient at the probe indices; entries whose
// perturbed passes come within kink_tol of a ReLU kink are flagged skipped.
template <typename Objective>
inline void fd_param_gradient(const std::vector<double>& params, const std::vector<std::size_t>& probes,
                              double step, Objective&& objective, std::vector<double>& fd,
                              std::vector<bool>& skipped) {
  fd.assign(probes.size(), 0.0);
  skipped.assign(probes.size(), false);
  std::vector<double> work = params;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    std::size_t idx = probes[i];
    double original = work[idx];
    double kink_plus = 0.0, kink_minus = 0.0;
    work[idx] = original + step;
    double f_plus = objective(work, &kink_plus);
    work[idx] = original - step;
    double f_minus = objective(work, &kink_minus);
    work[idx] = original;
    if (kink_plus < detail::kKinkTol || kink_minus < detail::kKinkTol) {
      skipped[i] = true;
      continue;
    }
    fd[i] = (f_plus - f_minus) / (2.0 * step);
  }
}

template <typename NetT>
inline GradCheckReport finite_diff_check(const NetT& net, const Image& img, double step) {
  if (!(step > 0.0)) throw ConfigError("finite-difference step must be > 0");
  ParamLayout lay = net.layout();
  constexpr std::size_t kExhaustiveLimit = 5000;
  constexpr std::size_t kSampledProbes = 512;
  std::vector<std::size_t> probes = detail::probe_indices(lay.total, lay.total <= kExhaustiveLimit
                                                                          ? lay.total
                                                                          : kSampledProbes);
  GradCheckReport report;
  std::vector<double> analytic;
  std::vector<double> fd;
  std::vector<bool> skipped;
  if constexpr (std::is_same_v<NetT, ClassifierNet>) {
    std::vector<double> u = detail::fixed_upstream(static_cast<std::size_t>(lay.head_out));
    analytic = backward_params(net, img, u);
    fd_param_gradient(net.params, probes, step,
                      [&](const std::vector<double>& p, double* kink) {
                        return classifier_objective(net.arch, p, img, u, kink);
                      },
                      fd, skipped);
  } else {
    std::vector<double> uv = detail::fixed_upstream(img.pixel_count() * static_cast<std::size_t>(lay.head_out));
    PixelGrid u = make_grid(img.height, img.width, lay.head_out);
    u.v = uv;
    analytic = backward_params(net, img, u);
    fd_param_gradient(net.params, probes, step,
                      [&](const std::vector<double>& p, double* kink) {
                        return segmenter_objective(net.arch, p, img, uv, kink);
                      },
                      fd, skipped);
  }
  for (std::size_t i = 0; i < probes.size(); ++i) {
    if (skipped[i]) continue;
    double a = analytic[probes[i]];
    double diff = std::fabs(a - fd[i]);
    report.max_abs_error = std::max(report.max_abs_error, diff);
    report.max_rel_error = std::max(report.max_rel_error, rel_error(a, fd[i]));
    ++report.probe_count;
  }
  return report;
}

}  // namespace pssl
