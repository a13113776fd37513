#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fieldshift/core/error.hpp"
#include "fieldshift/core/raster.hpp"
#include "fieldshift/geometry.hpp"

namespace fieldshift {

/// Per-pixel field index (-1 = no field).
struct FieldIdRaster {
  int height = 0;
  int width = 0;
  std::vector<std::int32_t> data;

  FieldIdRaster(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w, -1) {}
  std::int32_t& operator()(int y, int x) noexcept { return data[static_cast<std::size_t>(y) * width + x]; }
  std::int32_t operator()(int y, int x) const noexcept { return data[static_cast<std::size_t>(y) * width + x]; }
};

namespace detail {

inline void validate_polygons(std::span<const Polygon> polygons, int width, int height) {
  for (std::size_t i = 0; i < polygons.size(); ++i) {
    const Polygon& poly = polygons[i];
    if (!is_simple_polygon(poly))
      throw GeometryError("polygon " + std::to_string(i) + " is not simple (self-intersecting or degenerate)", i);
    for (const Point& p : poly) {
      if (p.x < 0.0 || p.y < 0.0 || p.x > width || p.y > height)
        throw GeometryError("polygon " + std::to_string(i) + " leaves the raster bounds", i);
    }
  }
}

/// Calls fill(y, x0, x1) for each half-open run [x0, x1) of pixels whose
/// centers fall inside the polygon under the even-odd rule.
template <typename Fill>
void scan_polygon(const Polygon& poly, int width, int height, Fill&& fill) {
  double ymin = poly[0].y, ymax = poly[0].y;
  for (const Point& p : poly) {
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  const int y_begin = std::max(0, static_cast<int>(std::floor(ymin - 0.5)));
  const int y_end = std::min(height, static_cast<int>(std::ceil(ymax + 0.5)));
  std::vector<double> xs;
  for (int y = y_begin; y < y_end; ++y) {
    const double yc = y + 0.5;
    xs.clear();
    for (std::size_t i = 0, n = poly.size(), j = n - 1; i < n; j = i++) {
      const Point& a = poly[i];
      const Point& b = poly[j];
      if ((a.y <= yc) != (b.y <= yc)) xs.push_back(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      // centers x + 0.5 in [xs[k], xs[k+1])
      const int x0 = std::max(0, static_cast<int>(std::ceil(xs[k] - 0.5)));
      const int x1 = std::min(width, static_cast<int>(std::ceil(xs[k + 1] - 0.5)));
      if (x1 > x0) fill(y, x0, x1);
    }
  }
}

/// Window max over Chebyshev radius r, separable, clipped at the borders.
inline std::vector<std::int32_t> window_extreme(const std::vector<std::int32_t>& src, int h, int w, int r,
                                                bool take_max) {
  if (r <= 0) return src;
  auto pick = [take_max](std::int32_t a, std::int32_t b) { return take_max ? std::max(a, b) : std::min(a, b); };
  std::vector<std::int32_t> tmp(src.size()), out(src.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      std::int32_t v = src[static_cast<std::size_t>(y) * w + x];
      for (int k = std::max(0, x - r); k <= std::min(w - 1, x + r); ++k) v = pick(v, src[static_cast<std::size_t>(y) * w + k]);
      tmp[static_cast<std::size_t>(y) * w + x] = v;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      std::int32_t v = tmp[static_cast<std::size_t>(y) * w + x];
      for (int k = std::max(0, y - r); k <= std::min(h - 1, y + r); ++k) v = pick(v, tmp[static_cast<std::size_t>(k) * w + x]);
      out[static_cast<std::size_t>(y) * w + x] = v;
    }
  }
  return out;
}

}  // namespace detail

/// Pixel is interior iff its center lies inside any polygon (union of
/// even-odd fills).
inline LabelMask rasterize_fields(std::span<const Polygon> polygons, int width, int height) {
  if (width <= 0 || height <= 0) throw DimensionError("rasterize_fields: raster must be non-empty");
  detail::validate_polygons(polygons, width, height);
  LabelMask mask(height, width, kBackground);
  for (const Polygon& poly : polygons) {
    detail::scan_polygon(poly, width, height, [&](int y, int x0, int x1) {
      std::fill(mask.data.begin() + static_cast<std::ptrdiff_t>(y) * width + x0,
                mask.data.begin() + static_cast<std::ptrdiff_t>(y) * width + x1, kInterior);
    });
  }
  return mask;
}

/// Same fill rule as rasterize_fields, keeping which polygon covers each
/// pixel. Later polygons win where polygons overlap.
inline FieldIdRaster rasterize_field_ids(std::span<const Polygon> polygons, int width, int height) {
  if (width <= 0 || height <= 0) throw DimensionError("rasterize_field_ids: raster must be non-empty");
  detail::validate_polygons(polygons, width, height);
  FieldIdRaster ids(height, width);
  for (std::size_t i = 0; i < polygons.size(); ++i) {
    detail::scan_polygon(polygons[i], width, height, [&](int y, int x0, int x1) {
      std::fill(ids.data.begin() + static_cast<std::ptrdiff_t>(y) * width + x0,
                ids.data.begin() + static_cast<std::ptrdiff_t>(y) * width + x1, static_cast<std::int32_t>(i));
    });
  }
  return ids;
}

/// Inward/outward split of a boundary band of the given total thickness.
struct BoundarySplit {
  int inward = 0;
  int outward = 0;
};

inline BoundarySplit boundary_split(int thickness_px) {
  return {(thickness_px + 1) / 2, thickness_px / 2};
}

/// Instance-aware boundary buffering: field pixels within `inward` Chebyshev
/// distance of any pixel not belonging to the same field, and background
/// pixels within `outward` distance of any field, become boundary. Shared
/// edges between touching fields therefore become boundary too.
inline LabelMask buffer_boundaries(const FieldIdRaster& ids, int thickness_px = 2) {
  if (thickness_px <= 0) throw ConfigError("buffer_boundaries: thickness_px must be positive, got " + std::to_string(thickness_px));
  const auto split = boundary_split(thickness_px);
  const int h = ids.height, w = ids.width;
  const auto max_in = detail::window_extreme(ids.data, h, w, split.inward, true);
  const auto min_in = detail::window_extreme(ids.data, h, w, split.inward, false);
  const auto max_out = detail::window_extreme(ids.data, h, w, split.outward, true);
  LabelMask out(h, w, kBackground);
  for (std::size_t i = 0; i < ids.data.size(); ++i) {
    const std::int32_t id = ids.data[i];
    if (id >= 0) {
      out.data[i] = (max_in[i] != id || min_in[i] != id) ? kBoundary : kInterior;
    } else {
      out.data[i] = (max_out[i] >= 0) ? kBoundary : kBackground;
    }
  }
  return out;
}

/// Mask form of boundary buffering for {background, interior} masks; all
/// interior pixels are treated as one region.
inline LabelMask buffer_boundaries(const LabelMask& mask, int thickness_px = 2) {
  if (thickness_px <= 0) throw ConfigError("buffer_boundaries: thickness_px must be positive, got " + std::to_string(thickness_px));
  FieldIdRaster ids(mask.height, mask.width);
  for (std::size_t i = 0; i < mask.data.size(); ++i) {
    const auto v = mask.data[i];
    if (v == kInterior) ids.data[i] = 0;
    else if (v != kBackground) throw InputError("buffer_boundaries: mask must only contain background/interior codes");
  }
  return buffer_boundaries(ids, thickness_px);
}

/// Centers the mask in a target x target raster filled with the ignore
/// code; the odd extra pixel goes to the bottom/right.
inline LabelMask pad_with_ignore(const LabelMask& mask, int target = 224) {
  if (target < mask.height || target < mask.width)
    throw DimensionError("pad_with_ignore: target " + std::to_string(target) + " smaller than mask " +
                         std::to_string(mask.height) + "x" + std::to_string(mask.width));
  LabelMask out(target, target, kIgnore);
  const int top = (target - mask.height) / 2;
  const int left = (target - mask.width) / 2;
  for (int y = 0; y < mask.height; ++y)
    std::copy_n(mask.data.begin() + static_cast<std::ptrdiff_t>(y) * mask.width, mask.width,
                out.data.begin() + static_cast<std::ptrdiff_t>(y + top) * target + left);
  return out;
}

}  // namespace fieldshift
