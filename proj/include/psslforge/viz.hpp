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
// Visual output: decile heatmaps, label colorization, top-decile overlays,
// and a minimal SVG bar chart writer.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "psslforge/common.hpp"
#include "psslforge/image.hpp"
#include "psslforge/pssl.hpp"

namespace pssl {

struct Rgb {
  double r = 0.0, g = 0.0, b = 0.0;
};

// Fixed cold-to-hot ramp, one color per decile, so heatmaps from any run are
// directly comparable.
inline const std::array<Rgb, 10>& decile_palette() {
  static const std::array<Rgb, 10> palette = {{
      {0.050, 0.030, 0.300},
      {0.110, 0.100, 0.500},
      {0.150, 0.250, 0.680},
      {0.130, 0.430, 0.710},
      {0.100, 0.600, 0.620},
      {0.250, 0.730, 0.400},
      {0.570, 0.800, 0.230},
      {0.870, 0.800, 0.150},
      {0.980, 0.580, 0.090},
      {0.960, 0.200, 0.080},
  }};
  return palette;
}

// Distinct colors for class labels in colorized masks; label index wraps
// around when a dataset has more classes than palette entries.
inline const std::array<Rgb, 8>& class_palette() {
  static const std::array<Rgb, 8> palette = {{
      {0.894, 0.102, 0.110},
      {0.216, 0.494, 0.722},
      {0.302, 0.686, 0.290},
      {0.596, 0.306, 0.639},
      {1.000, 0.498, 0.000},
      {1.000, 0.929, 0.435},
      {0.651, 0.337, 0.157},
      {0.969, 0.506, 0.749},
  }};
  return palette;
}

inline Image decile_heatmap(const DecileMap& map) {
  Image out = make_image(map.width, map.height, 3);
  for (std::size_t p = 0; p < map.deciles.size(); ++p) {
    const Rgb& c = decile_palette()[map.deciles[p]];
    out.data[p * 3 + 0] = c.r;
    out.data[p * 3 + 1] = c.g;
    out.data[p * 3 + 2] = c.b;
  }
  return out;
}

// Top-decile pixels blended toward red over the source image; other pixels
// pass through. An empty top decile returns the image unchanged.
inline Image top_decile_overlay(const Image& img, const DecileMap& map) {
  if (img.width != map.width || img.height != map.height)
    throw ShapeError("image and decile map dimensions differ");
  Image rgb = img;
  if (img.channels == 1) {
    rgb = make_image(img.width, img.height, 3);
    for (std::size_t p = 0; p < map.deciles.size(); ++p)
      rgb.data[p * 3 + 0] = rgb.data[p * 3 + 1] = rgb.data[p * 3 + 2] = img.data[p];
  }
  for (std::size_t p = 0; p < map.deciles.size(); ++p) {
    if (map.deciles[p] != 9) continue;
    rgb.data[p * 3 + 0] = 0.5 * rgb.data[p * 3 + 0] + 0.5;
    rgb.data[p * 3 + 1] = 0.5 * rgb.data[p * 3 + 1];
    rgb.data[p * 3 + 2] = 0.5 * rgb.data[p * 3 + 2];
  }
  return rgb;
}

// Labels colorized from the class palette; the background label renders dark
// gray.
inline Image colorize_mask(const GroundTruthMask& mask, int background_index) {
  Image out = make_image(mask.width, mask.height, 3);
  for (std::size_t p = 0; p < mask.labels.size(); ++p) {
    Rgb c{0.15, 0.15, 0.15};
    if (mask.labels[p] != background_index)
      c = class_palette()[mask.labels[p] % class_palette().size()];
    out.data[p * 3 + 0] = c.r;
    out.data[p * 3 + 1] = c.g;
    out.data[p * 3 + 2] = c.b;
  }
  return out;
}

// ---- SVG bar chart ----

struct Bar {
  std::string label;
  double value = 0.0;
  double err = 0.0;  // symmetric whisker half-length, 0 for none
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

}  // namespace detail

// Self-contained chart, y axis from zero, optional error whiskers. Kept
// deliberately small: fixed canvas, five ticks, no styling hooks.
inline void write_bar_chart_svg(const std::vector<Bar>& bars, const std::string& title,
                                const std::string& y_label, const std::filesystem::path& path) {
  if (bars.empty()) throw ConfigError("bar chart needs at least one bar");
  const double W = 640, H = 400, left = 70, right = 20, top = 50, bottom = 60;
  const double plot_w = W - left - right, plot_h = H - top - bottom;
  double y_max = 0.0;
  for (const Bar& b : bars) y_max = std::max(y_max, b.value + b.err);
  if (y_max <= 0.0) y_max = 1.0;
  y_max *= 1.05;
  auto ypix = [&](double v) { return top + plot_h * (1.0 - v / y_max); };
  std::ofstream out(path);
  if (!out) throw IoError("cannot write chart " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  out << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  out << "<text x=\"" << W / 2 << "\" y=\"28\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"16\">"
      << title << "</text>\n";
  out << "<text x=\"16\" y=\"" << top + plot_h / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 "
      << top + plot_h / 2 << ")\">" << y_label << "</text>\n";
  for (int t = 0; t <= 5; ++t) {
    double v = y_max * t / 5.0;
    double y = ypix(v);
    out << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << W - right << "\" y2=\"" << y
        << "\" stroke=\"#ddd\"/>\n";
    out << "<text x=\"" << left - 6 << "\" y=\"" << y + 4
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << detail::fmt(v)
        << "</text>\n";
  }
  double slot = plot_w / static_cast<double>(bars.size());
  double bar_w = slot * 0.6;
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const Bar& b = bars[i];
    double cx = left + slot * (static_cast<double>(i) + 0.5);
    double x0 = cx - bar_w / 2;
    double y = ypix(b.value);
    out << "<rect x=\"" << x0 << "\" y=\"" << y << "\" width=\"" << bar_w << "\" height=\""
        << ypix(0.0) - y << "\" fill=\"#4878a8\"/>\n";
    if (b.err > 0.0) {
      double ylo = ypix(std::max(0.0, b.value - b.err)), yhi = ypix(b.value + b.err);
      out << "<line x1=\"" << cx << "\" y1=\"" << ylo << "\" x2=\"" << cx << "\" y2=\"" << yhi
          << "\" stroke=\"black\"/>\n";
      out << "<line x1=\"" << cx - 6 << "\" y1=\"" << yhi << "\" x2=\"" << cx + 6 << "\" y2=\"" << yhi
          << "\" stroke=\"black\"/>\n";
      out << "<line x1=\"" << cx - 6 << "\" y1=\"" << ylo << "\" x2=\"" << cx + 6 << "\" y2=\"" << ylo
          << "\" stroke=\"black\"/>\n";
    }
    out << "<text x=\"" << cx << "\" y=\"" << H - bottom + 18
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << b.label
        << "</text>\n";
    out << "<text x=\"" << cx << "\" y=\"" << y - 6
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
        << detail::fmt(b.value) << "</text>\n";
  }
  out << "<line x1=\"" << left << "\" y1=\"" << ypix(0.0) << "\" x2=\"" << W - right << "\" y2=\""
      << ypix(0.0) << "\" stroke=\"black\"/>\n";
  out << "</svg>\n";
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace pssl
