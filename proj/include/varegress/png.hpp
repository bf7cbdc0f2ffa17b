#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <png.h>

#include "varegress/errors.hpp"
#include "varegress/image.hpp"

/// 8-bit grayscale/RGB PNG output through libpng.
namespace varegress::png {

/// A pixel buffer in [0,1], H x W x C row-major with C in {1, 3}.
struct Canvas {
  ImageShape shape;
  std::vector<double> pixels;

  explicit Canvas(ImageShape s, double fill = 0.0) : shape(s), pixels(s.pixels(), fill) {}

  void paste(std::span<const double> img, const ImageShape& s, std::size_t top, std::size_t left) {
    if (s.channels != shape.channels) throw ShapeError("png: channel count mismatch");
    if (img.size() != s.pixels()) throw ShapeError("png: tile has " + std::to_string(img.size()) + " values, shape needs " + std::to_string(s.pixels()));
    if (top + s.height > shape.height || left + s.width > shape.width) throw ShapeError("png: tile out of bounds");
    for (std::size_t r = 0; r < s.height; ++r)
      for (std::size_t c = 0; c < s.width; ++c)
        for (std::size_t ch = 0; ch < s.channels; ++ch)
          pixels[shape.index(top + r, left + c, ch)] = img[s.index(r, c, ch)];
  }
};

inline std::vector<std::uint8_t> encode(const Canvas& canvas) {
  const auto& s = canvas.shape;
  if (s.channels != 1 && s.channels != 3) throw Error("png: only 1 or 3 channels are supported");
  std::vector<std::uint8_t> raw(s.pixels());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    raw[i] = static_cast<std::uint8_t>(std::lround(std::clamp(canvas.pixels[i], 0.0, 1.0) * 255.0));
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(s.width);
  img.height = static_cast<png_uint_32>(s.height);
  img.format = s.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(img, size, 0, raw.data(), 0, nullptr)) {
    throw Error(std::string("png: ") + img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, raw.data(), 0, nullptr)) {
    throw Error(std::string("png: ") + img.message);
  }
  out.resize(size);
  return out;
}

inline void write(const std::string& path, const Canvas& canvas) {
  const auto bytes = encode(canvas);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(path, "cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(path, "write failed");
}

/// Rows of equally shaped tiles separated by a 1-pixel gutter.
inline Canvas grid(const std::vector<std::vector<std::span<const double>>>& rows, const ImageShape& tile,
                   double gutter = 1.0) {
  std::size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.size());
  Canvas c({rows.size() * (tile.height + 1) + 1, cols * (tile.width + 1) + 1, tile.channels}, gutter);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) c.paste(rows[i][j], tile, 1 + i * (tile.height + 1), 1 + j * (tile.width + 1));
  return c;
}

}  // namespace varegress::png
