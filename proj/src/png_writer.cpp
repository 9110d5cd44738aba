#include "mcl3d/png.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include "mcl3d/embedeval.hpp"

namespace mcl3d {

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

void put_chunk(std::ofstream& f, const char type[4], const std::vector<uint8_t>& payload) {
  std::vector<uint8_t> head;
  put_u32(head, static_cast<uint32_t>(payload.size()));
  f.write(reinterpret_cast<const char*>(head.data()), 4);
  f.write(type, 4);
  if (!payload.empty()) f.write(reinterpret_cast<const char*>(payload.data()),
                                static_cast<std::streamsize>(payload.size()));
  uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
  if (!payload.empty()) crc = crc32(crc, payload.data(), static_cast<uInt>(payload.size()));
  std::vector<uint8_t> tail;
  put_u32(tail, static_cast<uint32_t>(crc));
  f.write(reinterpret_cast<const char*>(tail.data()), 4);
}

}  // namespace

void write_png_rgb(const std::string& path, int width, int height,
                   const std::vector<uint8_t>& rgb) {
  if (width <= 0 || height <= 0) throw std::invalid_argument("png dimensions must be positive");
  if (rgb.size() != static_cast<size_t>(width) * height * 3)
    throw std::invalid_argument("rgb buffer size does not match dimensions");

  // filter byte 0 in front of every scanline
  std::vector<uint8_t> raw;
  raw.reserve(static_cast<size_t>(height) * (static_cast<size_t>(width) * 3 + 1));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);
    const uint8_t* row = rgb.data() + static_cast<size_t>(y) * width * 3;
    raw.insert(raw.end(), row, row + static_cast<size_t>(width) * 3);
  }
  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> comp(comp_len);
  if (compress2(comp.data(), &comp_len, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png deflate failed");
  comp.resize(comp_len);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  f.write(reinterpret_cast<const char*>(sig), 8);
  std::vector<uint8_t> ihdr;
  put_u32(ihdr, static_cast<uint32_t>(width));
  put_u32(ihdr, static_cast<uint32_t>(height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  put_chunk(f, "IHDR", ihdr);
  put_chunk(f, "IDAT", comp);
  put_chunk(f, "IEND", {});
}

}  // namespace mcl3d

namespace mcl3d::embed {

namespace {

struct Canvas {
  int w, h;
  std::vector<uint8_t> rgb;

  Canvas(int w_, int h_) : w(w_), h(h_), rgb(static_cast<size_t>(w_) * h_ * 3, 255) {}

  void set(int x, int y, std::array<uint8_t, 3> c) {
    if (x < 0 || x >= w || y < 0 || y >= h) return;
    size_t o = (static_cast<size_t>(y) * w + x) * 3;
    rgb[o] = c[0];
    rgb[o + 1] = c[1];
    rgb[o + 2] = c[2];
  }
};

constexpr std::array<std::array<uint8_t, 3>, 8> kPalette{{{214, 39, 40},
                                                          {31, 119, 180},
                                                          {44, 160, 44},
                                                          {255, 127, 14},
                                                          {148, 103, 189},
                                                          {140, 86, 75},
                                                          {227, 119, 194},
                                                          {23, 190, 207}}};

void draw_marker(Canvas& cv, int cx, int cy, int shape, std::array<uint8_t, 3> c) {
  const int r = 3;
  switch (shape % 4) {
    case 0:  // filled square
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) cv.set(cx + dx, cy + dy, c);
      break;
    case 1:  // plus
      for (int d = -r; d <= r; ++d) {
        cv.set(cx + d, cy, c);
        cv.set(cx + d, cy + 1, c);
        cv.set(cx, cy + d, c);
        cv.set(cx + 1, cy + d, c);
      }
      break;
    case 2:  // cross
      for (int d = -r; d <= r; ++d) {
        cv.set(cx + d, cy + d, c);
        cv.set(cx + d + 1, cy + d, c);
        cv.set(cx + d, cy - d, c);
        cv.set(cx + d + 1, cy - d, c);
      }
      break;
    default:  // diamond
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx)
          if (std::abs(dx) + std::abs(dy) <= r) cv.set(cx + dx, cy + dy, c);
  }
}

}  // namespace

void plot_scatter_png(const std::vector<ScatterPoint>& points, const std::string& out_path,
                      int width, int height) {
  if (points.empty()) throw std::invalid_argument("no points to plot");
  Canvas cv(width, height);

  double xlo = points[0].x, xhi = points[0].x, ylo = points[0].y, yhi = points[0].y;
  for (const auto& p : points) {
    xlo = std::min(xlo, p.x);
    xhi = std::max(xhi, p.x);
    ylo = std::min(ylo, p.y);
    yhi = std::max(yhi, p.y);
  }
  if (xhi - xlo < 1e-12) xhi = xlo + 1;
  if (yhi - ylo < 1e-12) yhi = ylo + 1;

  std::map<std::string, int> modality_color, subject_shape;
  for (const auto& p : points) {
    modality_color.emplace(p.modality, static_cast<int>(modality_color.size()));
    subject_shape.emplace(p.subject_id, static_cast<int>(subject_shape.size()));
  }

  const int margin = 12;
  for (const auto& p : points) {
    int px = margin + static_cast<int>(std::lround((p.x - xlo) / (xhi - xlo) *
                                                   (width - 2 * margin - 1)));
    int py = height - 1 - margin -
             static_cast<int>(std::lround((p.y - ylo) / (yhi - ylo) * (height - 2 * margin - 1)));
    draw_marker(cv, px, py, subject_shape[p.subject_id],
                kPalette[static_cast<size_t>(modality_color[p.modality]) % kPalette.size()]);
  }
  // color legend swatches, one per modality, top-left
  for (const auto& [mod, idx] : modality_color)
    for (int dy = 0; dy < 6; ++dy)
      for (int dx = 0; dx < 6; ++dx)
        cv.set(2 + dx, 2 + idx * 8 + dy, kPalette[static_cast<size_t>(idx) % kPalette.size()]);

  write_png_rgb(out_path, width, height, cv.rgb);
}

}  // namespace mcl3d::embed
