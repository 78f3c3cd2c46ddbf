#pragma once

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include "taskcl/evalkit.hpp"

namespace taskcl::plot {

// Minimal raster plotting: plots are emitted as binary PPM (P6) images.

struct Image {
  int w = 0, h = 0;
  std::vector<unsigned char> rgb;

  Image(int width, int height, unsigned char fill = 255)
      : w(width), h(height), rgb(static_cast<std::size_t>(width) * height * 3, fill) {}

  void set(int x, int y, unsigned char r, unsigned char g, unsigned char b) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    std::size_t i = (static_cast<std::size_t>(y) * w + x) * 3;
    rgb[i] = r;
    rgb[i + 1] = g;
    rgb[i + 2] = b;
  }

  void fill_rect(int x0, int y0, int x1, int y1, unsigned char r, unsigned char g, unsigned char b) {
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) set(x, y, r, g, b);
  }

  void dot(int x, int y, int radius, unsigned char r, unsigned char g, unsigned char b) {
    for (int dy = -radius; dy <= radius; ++dy)
      for (int dx = -radius; dx <= radius; ++dx)
        if (dx * dx + dy * dy <= radius * radius) set(x + dx, y + dy, r, g, b);
  }
};

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("write_ppm: cannot open " + path);
  out << "P6\n" << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
}

inline std::array<unsigned char, 3> heat_color(double v) {
  v = std::clamp(v, 0.0, 1.0);
  // white -> blue ramp
  auto ch = [](double x) { return static_cast<unsigned char>(255.0 * x + 0.5); };
  return {ch(1.0 - 0.85 * v), ch(1.0 - 0.65 * v), ch(1.0 - 0.15 * v)};
}

inline std::array<unsigned char, 3> palette(int i) {
  static const std::array<std::array<unsigned char, 3>, 8> colors = {{{212, 74, 60},
                                                                      {62, 105, 178},
                                                                      {68, 153, 83},
                                                                      {219, 155, 53},
                                                                      {126, 83, 161},
                                                                      {64, 164, 170},
                                                                      {170, 90, 130},
                                                                      {100, 100, 100}}};
  return colors[static_cast<std::size_t>(i) % colors.size()];
}

inline Image heatmap_image(const evalkit::HeatmapMatrix& hm, int cell = 48) {
  int k = hm.clusters(), d = hm.domains();
  Image img(d * cell + 2, k * cell + 2, 230);
  for (int r = 0; r < k; ++r)
    for (int c = 0; c < d; ++c) {
      auto col = heat_color(hm.matrix.at(r, c));
      img.fill_rect(c * cell + 2, r * cell + 2, (c + 1) * cell, (r + 1) * cell, col[0], col[1],
                    col[2]);
    }
  return img;
}

inline Image scatter_image(const std::vector<std::array<double, 2>>& points,
                           const std::vector<int>& labels, int size = 480) {
  Image img(size, size, 252);
  if (points.empty()) return img;
  double x0 = points[0][0], x1 = x0, y0 = points[0][1], y1 = y0;
  for (const auto& p : points) {
    x0 = std::min(x0, p[0]);
    x1 = std::max(x1, p[0]);
    y0 = std::min(y0, p[1]);
    y1 = std::max(y1, p[1]);
  }
  double sx = x1 > x0 ? (size - 40.0) / (x1 - x0) : 1.0;
  double sy = y1 > y0 ? (size - 40.0) / (y1 - y0) : 1.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    int px = 20 + static_cast<int>((points[i][0] - x0) * sx);
    int py = size - 20 - static_cast<int>((points[i][1] - y0) * sy);
    auto col = palette(i < labels.size() ? labels[i] : 0);
    img.dot(px, py, 3, col[0], col[1], col[2]);
  }
  return img;
}

}  // namespace taskcl::plot
