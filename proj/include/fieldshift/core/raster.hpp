#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fieldshift/core/error.hpp"

namespace fieldshift {

/// Dense channels x height x width array, channel-sequential.
template <typename T>
struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int c, int h, int w, T fill = T{})
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane() const noexcept { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const noexcept { return data.size(); }

  T& operator()(int c, int y, int x) noexcept { return data[(c * plane()) + static_cast<std::size_t>(y) * width + x]; }
  const T& operator()(int c, int y, int x) const noexcept {
    return data[(c * plane()) + static_cast<std::size_t>(y) * width + x];
  }

  std::span<T> channel(int c) noexcept { return {data.data() + c * plane(), plane()}; }
  std::span<const T> channel(int c) const noexcept { return {data.data() + c * plane(), plane()}; }

  bool same_shape(const Tensor& o) const noexcept {
    return channels == o.channels && height == o.height && width == o.width;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.channels = channels;
    out.height = height;
    out.width = width;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

/// Where a chip came from and how it has been processed.
struct ChipInfo {
  std::string tile_id;
  std::string year;
  int offset_x = 0;
  int offset_y = 0;
  int core_x = 0;  // core region inside the window
  int core_y = 0;
  int core_size = 0;
  std::string norm_scheme;  // empty when raw
  bool degenerate = false;
};

/// Multi-band imagery raster (reflectance-like floats) plus provenance.
struct Chip {
  Tensor<float> pixels;
  ChipInfo info;

  int bands() const noexcept { return pixels.channels; }
  int height() const noexcept { return pixels.height; }
  int width() const noexcept { return pixels.width; }
  float& at(int b, int y, int x) noexcept { return pixels(b, y, x); }
  float at(int b, int y, int x) const noexcept { return pixels(b, y, x); }
};

inline Chip make_chip(int bands, int height, int width, float fill = 0.0f) {
  Chip c;
  c.pixels = Tensor<float>(bands, height, width, fill);
  return c;
}

enum class ClassCode : std::uint8_t {
  Background = 0,
  Interior = 1,
  Boundary = 2,
  Ignore = 255,
};

inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kInterior = 1;
inline constexpr std::uint8_t kBoundary = 2;
inline constexpr std::uint8_t kIgnore = 255;
inline constexpr int kNumClasses = 3;

/// H x W class raster with codes {0,1,2,255}.
struct LabelMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  LabelMask() = default;
  LabelMask(int h, int w, std::uint8_t fill = kBackground)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& operator()(int y, int x) noexcept { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t operator()(int y, int x) const noexcept { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const noexcept { return data.size(); }

  std::size_t count(std::uint8_t code) const noexcept {
    std::size_t n = 0;
    for (auto v : data) n += (v == code);
    return n;
  }

  /// Loss-mask view: true where the pixel takes part in losses and metrics.
  std::vector<bool> valid_mask() const {
    std::vector<bool> out(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out[i] = data[i] != kIgnore;
    return out;
  }

  bool operator==(const LabelMask&) const = default;
};

inline void require_same_dims(const LabelMask& a, const LabelMask& b, const char* what) {
  if (a.height != b.height || a.width != b.width) {
    throw DimensionError(std::string(what) + ": mask dimensions differ (" + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                         std::to_string(b.width) + ")");
  }
}

}  // namespace fieldshift
