#pragma once

// Deterministic PNG quicklooks (no timestamps, fixed compression).

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <vector>

#include "fieldshift/core/error.hpp"
#include "fieldshift/core/raster.hpp"
#include "fieldshift/evaluation.hpp"
#include "fieldshift/io/files.hpp"

namespace fieldshift::io {

namespace detail {

inline void png_append(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}

inline void png_flush(png_structp) {}

/// color_type: PNG_COLOR_TYPE_GRAY or PNG_COLOR_TYPE_RGB, 8-bit samples.
inline std::vector<std::uint8_t> encode_png(int width, int height, int color_type, std::span<const std::uint8_t> pixels) {
  const int channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
  if (pixels.size() != static_cast<std::size_t>(width) * height * channels) throw DimensionError("png: pixel buffer size mismatch");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw InputError("png: cannot create writer");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> out;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    throw InputError("png: encoding failed");
  }
  png_set_write_fn(png, &out, png_append, png_flush);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * width * channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

}  // namespace detail

inline void write_png_rgb(const fs::path& path, int width, int height, std::span<const std::uint8_t> rgb) {
  write_atomic(path, detail::encode_png(width, height, PNG_COLOR_TYPE_RGB, rgb));
}

inline void write_png_gray(const fs::path& path, int width, int height, std::span<const std::uint8_t> gray) {
  write_atomic(path, detail::encode_png(width, height, PNG_COLOR_TYPE_GRAY, gray));
}

/// Values in [0,1] mapped to 0..255.
inline void write_probability_png(const fs::path& path, std::span<const double> values, int width, int height) {
  std::vector<std::uint8_t> g(values.size());
  for (std::size_t i = 0; i < values.size(); ++i)
    g[i] = static_cast<std::uint8_t>(std::lround(std::clamp(values[i], 0.0, 1.0) * 255.0));
  write_png_gray(path, width, height, g);
}

inline void write_mask_png(const fs::path& path, const LabelMask& m) {
  std::vector<std::uint8_t> rgb(m.data.size() * 3);
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    const auto v = m.data[i];
    const Rgb& c = kMaskPalette[v <= kBoundary ? v : 3];
    std::copy(c.begin(), c.end(), rgb.begin() + static_cast<std::ptrdiff_t>(3 * i));
  }
  write_png_rgb(path, m.width, m.height, rgb);
}

inline void write_confusion_png(const fs::path& path, const CategoryRaster& r) {
  std::vector<std::uint8_t> rgb(r.data.size() * 3);
  for (std::size_t i = 0; i < r.data.size(); ++i) {
    const Rgb& c = kConfusionPalette[std::min<std::uint8_t>(r.data[i], kCatIgnore)];
    std::copy(c.begin(), c.end(), rgb.begin() + static_cast<std::ptrdiff_t>(3 * i));
  }
  write_png_rgb(path, r.width, r.height, rgb);
}

}  // namespace fieldshift::io
