#pragma once

// Synthetic multi-year agricultural scenes with controllable covariate shift.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "fieldshift/core/error.hpp"
#include "fieldshift/core/parallel.hpp"
#include "fieldshift/core/raster.hpp"
#include "fieldshift/core/rng.hpp"
#include "fieldshift/geometry.hpp"
#include "fieldshift/labeling.hpp"

namespace fieldshift {

/// Per-year acquisition model: per-band spread/offset change, sensor noise
/// and an optional 3x3 smoothing pass (compositing).
struct YearShift {
  std::string year_tag;
  std::vector<double> band_mean_offset;
  std::vector<double> band_std_scale;
  double noise_sigma = 0.0;
  int smoothing_passes = 0;
};

inline YearShift identity_shift(std::string tag, int bands) {
  return {std::move(tag), std::vector<double>(bands, 0.0), std::vector<double>(bands, 1.0), 0.0, 0};
}

struct SceneConfig {
  int scene_size_px = 512;
  int band_count = 4;
  double field_density = 0.4;
  int mean_field_diameter_px = 16;
  double churn_fraction = 0.1;
  double field_gap_px = 1.0;  // erosion applied to Voronoi cells (0 = touching fields)
  std::vector<YearShift> years;
  std::uint64_t seed = 0;

  // reflectance model; empty vectors select the built-in 4-band defaults
  std::vector<double> background_reflectance;
  std::vector<double> field_reflectance;
  double texture_amplitude = 0.03;
  int texture_scale_px = 32;
  double field_variation = 0.02;
  double pixel_texture_sigma = 0.01;
};

struct SceneYear {
  std::string year_tag;
  Chip imagery;
  std::vector<Polygon> polygons;
  std::vector<int> field_cells;  // Voronoi cell index of each polygon
};

struct Scene {
  SceneConfig config;
  std::vector<SceneYear> years;
  std::size_t cell_count = 0;
};

inline std::vector<double> default_background_reflectance(int bands) {
  if (bands == 4) return {0.06, 0.09, 0.12, 0.30};
  std::vector<double> v(bands);
  for (int b = 0; b < bands; ++b) v[b] = 0.06 + 0.24 * b / std::max(1, bands - 1);
  return v;
}

inline std::vector<double> default_field_reflectance(int bands) {
  if (bands == 4) return {0.08, 0.11, 0.15, 0.24};
  std::vector<double> v(bands);
  for (int b = 0; b < bands; ++b) v[b] = 0.08 + 0.16 * b / std::max(1, bands - 1);
  return v;
}

inline void validate(const YearShift& shift, int band_count) {
  if (static_cast<int>(shift.band_mean_offset.size()) != band_count ||
      static_cast<int>(shift.band_std_scale.size()) != band_count)
    throw ConfigError("year '" + shift.year_tag + "': band_mean_offset and band_std_scale need " +
                      std::to_string(band_count) + " entries");
  for (double s : shift.band_std_scale)
    if (!(s > 0.0)) throw ConfigError("year '" + shift.year_tag + "': band_std_scale must be strictly positive");
  if (!(shift.noise_sigma >= 0.0)) throw ConfigError("year '" + shift.year_tag + "': noise_sigma must be >= 0");
  if (shift.smoothing_passes < 0) throw ConfigError("year '" + shift.year_tag + "': smoothing_passes must be >= 0");
}

inline void validate(const SceneConfig& cfg) {
  if (cfg.scene_size_px < 64) throw ConfigError("scene_size_px must be >= 64");
  if (cfg.band_count < 1) throw ConfigError("band_count must be >= 1");
  if (!(cfg.field_density >= 0.0 && cfg.field_density <= 1.0)) throw ConfigError("field_density must lie in [0,1]");
  if (!(cfg.churn_fraction >= 0.0 && cfg.churn_fraction <= 1.0)) throw ConfigError("churn_fraction must lie in [0,1]");
  if (cfg.mean_field_diameter_px <= 0) throw ConfigError("mean_field_diameter_px must be positive");
  if (cfg.field_gap_px < 0.0) throw ConfigError("field_gap_px must be >= 0");
  if (cfg.years.empty()) throw ConfigError("years must list at least one YearShift");
  if (cfg.texture_scale_px <= 0) throw ConfigError("texture_scale_px must be positive");
  for (const auto& y : cfg.years) validate(y, cfg.band_count);
  for (std::size_t i = 0; i < cfg.years.size(); ++i)
    for (std::size_t j = i + 1; j < cfg.years.size(); ++j)
      if (cfg.years[i].year_tag == cfg.years[j].year_tag) throw ConfigError("duplicate year_tag '" + cfg.years[i].year_tag + "'");
  auto check_refl = [&](const std::vector<double>& v, const char* name) {
    if (!v.empty() && static_cast<int>(v.size()) != cfg.band_count)
      throw ConfigError(std::string(name) + " needs band_count entries");
  };
  check_refl(cfg.background_reflectance, "background_reflectance");
  check_refl(cfg.field_reflectance, "field_reflectance");
}

namespace detail {

inline void box_smooth(Tensor<float>& t) {
  const int h = t.height, w = t.width;
  std::vector<float> tmp(t.plane());
  for (int c = 0; c < t.channels; ++c) {
    auto ch = t.channel(c);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double s = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = std::clamp(y + dy, 0, h - 1), xx = std::clamp(x + dx, 0, w - 1);
            s += ch[static_cast<std::size_t>(yy) * w + xx];
          }
        tmp[static_cast<std::size_t>(y) * w + x] = static_cast<float>(s / 9.0);
      }
    std::copy(tmp.begin(), tmp.end(), ch.begin());
  }
}

/// Smooth low-frequency noise in [-1, 1]: random lattice values with
/// smoothstep bilinear interpolation.
inline std::vector<float> value_noise(int size, int spacing, Rng& rng) {
  const int cells = size / spacing + 2;
  std::vector<double> lattice(static_cast<std::size_t>(cells) * cells);
  for (auto& v : lattice) v = uniform(rng, -1.0, 1.0);
  std::vector<float> out(static_cast<std::size_t>(size) * size);
  auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
  for (int y = 0; y < size; ++y) {
    const double fy = (y + 0.5) / spacing;
    const int gy = static_cast<int>(fy);
    const double ty = smooth(fy - gy);
    for (int x = 0; x < size; ++x) {
      const double fx = (x + 0.5) / spacing;
      const int gx = static_cast<int>(fx);
      const double tx = smooth(fx - gx);
      auto L = [&](int yy, int xx) { return lattice[static_cast<std::size_t>(yy) * cells + xx]; };
      const double top = L(gy, gx) * (1 - tx) + L(gy, gx + 1) * tx;
      const double bot = L(gy + 1, gx) * (1 - tx) + L(gy + 1, gx + 1) * tx;
      out[static_cast<std::size_t>(y) * size + x] = static_cast<float>(top * (1 - ty) + bot * ty);
    }
  }
  return out;
}

struct VoronoiLayout {
  std::vector<Point> sites;
  std::vector<Polygon> cells;  // eroded cells, empty when nothing survives erosion
};

inline VoronoiLayout voronoi_layout(const SceneConfig& cfg) {
  Rng rng = make_rng(cfg.seed, {stream_tag("layout")});
  const double size = cfg.scene_size_px;
  const double radius = 0.5 * cfg.mean_field_diameter_px;
  const double expected = size * size / (3.14159265358979323846 * radius * radius);
  std::poisson_distribution<int> count_dist(expected);
  const int n = std::max(1, count_dist(rng));
  VoronoiLayout layout;
  layout.sites.resize(n);
  for (auto& p : layout.sites) p = {uniform(rng, 0.0, size), uniform(rng, 0.0, size)};

  // bucket grid for neighbour search
  const double cell = std::max(4.0, 2.0 * radius);
  const int g = static_cast<int>(std::ceil(size / cell));
  std::vector<std::vector<int>> grid(static_cast<std::size_t>(g) * g);
  auto gidx = [&](double v) { return std::clamp(static_cast<int>(v / cell), 0, g - 1); };
  for (int i = 0; i < n; ++i) grid[static_cast<std::size_t>(gidx(layout.sites[i].y)) * g + gidx(layout.sites[i].x)].push_back(i);

  layout.cells.resize(n);
  const double half_gap = 0.5 * cfg.field_gap_px;
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t ii) {
    const int i = static_cast<int>(ii);
    const Point pi = layout.sites[i];
    Polygon poly = rectangle(0.0, 0.0, size, size);
    const int cx = gidx(pi.x), cy = gidx(pi.y);
    for (int ring = 0; ring <= g; ++ring) {
      for (int gy = cy - ring; gy <= cy + ring; ++gy) {
        for (int gx = cx - ring; gx <= cx + ring; ++gx) {
          if (gx < 0 || gy < 0 || gx >= g || gy >= g) continue;
          if (std::max(std::abs(gx - cx), std::abs(gy - cy)) != ring) continue;
          for (int j : grid[static_cast<std::size_t>(gy) * g + gx]) {
            if (j == i) continue;
            const Point pj = layout.sites[j];
            const double dx = pj.x - pi.x, dy = pj.y - pi.y;
            const double d = std::sqrt(dx * dx + dy * dy);
            if (d <= 0.0) continue;
            const double ux = dx / d, uy = dy / d;
            poly = clip_half_plane(poly, ux, uy, ux * pi.x + uy * pi.y + 0.5 * d - half_gap);
            if (poly.empty()) break;
          }
          if (poly.empty()) break;
        }
        if (poly.empty()) break;
      }
      if (poly.empty()) break;
      // every unvisited site is at least ring*cell away; its bisector cannot
      // cut the cell once that exceeds twice the farthest vertex distance
      double reach = 0.0;
      for (const Point& v : poly) reach = std::max(reach, std::hypot(v.x - pi.x, v.y - pi.y));
      if (ring * cell > 2.0 * reach) break;
    }
    if (!poly.empty() && polygon_area(poly) < 1.0) poly.clear();
    layout.cells[i] = std::move(poly);
  });
  return layout;
}

}  // namespace detail

/// Applies the acquisition model of one year to a chip:
/// optional smoothing, then v' = (v - mu_b) * scale_b + mu_b + offset_b + N(0, sigma^2)
/// where mu_b is the band mean of the (smoothed) input.
inline Chip apply_year_shift(const Chip& chip, const YearShift& shift, Rng& rng) {
  if (static_cast<int>(shift.band_mean_offset.size()) != chip.bands() ||
      static_cast<int>(shift.band_std_scale.size()) != chip.bands())
    throw DimensionError("apply_year_shift: chip has " + std::to_string(chip.bands()) +
                         " bands but the shift vectors have " + std::to_string(shift.band_mean_offset.size()) + "/" +
                         std::to_string(shift.band_std_scale.size()));
  Chip out = chip;
  out.info.year = shift.year_tag.empty() ? chip.info.year : shift.year_tag;
  for (int p = 0; p < shift.smoothing_passes; ++p) detail::box_smooth(out.pixels);
  std::normal_distribution<double> noise(0.0, shift.noise_sigma > 0 ? shift.noise_sigma : 1.0);
  for (int b = 0; b < out.bands(); ++b) {
    auto ch = out.pixels.channel(b);
    double mean = 0.0;
    for (float v : ch) mean += v;
    mean /= static_cast<double>(ch.size());
    const double scale = shift.band_std_scale[b];
    const double offset = shift.band_mean_offset[b];
    for (float& v : ch) {
      double r = (v - mean) * scale + mean + offset;
      if (shift.noise_sigma > 0) r += noise(rng);
      v = static_cast<float>(r);
    }
  }
  return out;
}

/// Field polygons of one year rasterized to the 3-class mask.
inline LabelMask scene_labels(const Scene& scene, std::size_t year, int boundary_thickness = 2) {
  const int s = scene.config.scene_size_px;
  return buffer_boundaries(rasterize_field_ids(scene.years.at(year).polygons, s, s), boundary_thickness);
}

inline Scene generate_scene(const SceneConfig& config) {
  validate(config);
  const int size = config.scene_size_px;
  const int bands = config.band_count;
  const auto bg = config.background_reflectance.empty() ? default_background_reflectance(bands) : config.background_reflectance;
  const auto fd = config.field_reflectance.empty() ? default_field_reflectance(bands) : config.field_reflectance;

  Scene scene;
  scene.config = config;
  const auto layout = detail::voronoi_layout(config);
  scene.cell_count = layout.cells.size();

  std::vector<int> usable;
  for (std::size_t i = 0; i < layout.cells.size(); ++i)
    if (!layout.cells[i].empty()) usable.push_back(static_cast<int>(i));

  // base-year layout: random cell order, take cells until the target cover is met
  std::vector<int> fields;
  {
    Rng rng = make_rng(config.seed, {stream_tag("fields")});
    std::vector<int> order = usable;
    std::shuffle(order.begin(), order.end(), rng);
    const double target = config.field_density * size * size;
    double covered = 0.0;
    for (int c : order) {
      if (covered >= target || config.field_density <= 0.0) break;
      const double a = polygon_area(layout.cells[c]);
      // stop before the cell that would overshoot by more than it undershoots
      if (covered + a - target > target - covered) break;
      fields.push_back(c);
      covered += a;
    }
    std::sort(fields.begin(), fields.end());
  }

  std::vector<std::vector<int>> year_fields(config.years.size());
  year_fields[0] = fields;
  for (std::size_t k = 1; k < config.years.size(); ++k) {
    Rng rng = make_rng(config.seed, {stream_tag("churn"), k});
    std::vector<int> current = year_fields[k - 1];
    const auto m = static_cast<std::size_t>(std::llround(config.churn_fraction * static_cast<double>(current.size())));
    const std::size_t drop = std::min(current.size(), m / 2);
    std::shuffle(current.begin(), current.end(), rng);
    current.resize(current.size() - drop);
    std::vector<int> pool;
    std::vector<char> taken(layout.cells.size(), 0);
    for (int c : year_fields[k - 1]) taken[c] = 1;
    for (int c : usable)
      if (!taken[c]) pool.push_back(c);
    std::shuffle(pool.begin(), pool.end(), rng);
    const std::size_t add = std::min(pool.size(), m - drop);
    current.insert(current.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(add));
    std::sort(current.begin(), current.end());
    year_fields[k] = std::move(current);
  }

  // static landscape texture and per-field reflectance variation
  std::vector<std::vector<float>> texture(bands);
  std::vector<std::vector<float>> pixel_texture(bands);
  for (int b = 0; b < bands; ++b) {
    Rng rng = make_rng(config.seed, {stream_tag("texture"), static_cast<std::uint64_t>(b)});
    texture[b] = detail::value_noise(size, config.texture_scale_px, rng);
    Rng prng = make_rng(config.seed, {stream_tag("pixel-texture"), static_cast<std::uint64_t>(b)});
    std::normal_distribution<double> nd(0.0, 1.0);
    pixel_texture[b].resize(static_cast<std::size_t>(size) * size);
    for (auto& v : pixel_texture[b]) v = static_cast<float>(config.pixel_texture_sigma * nd(prng));
  }
  std::vector<std::vector<double>> field_offset(layout.cells.size(), std::vector<double>(bands));
  for (std::size_t c = 0; c < layout.cells.size(); ++c) {
    Rng rng = make_rng(config.seed, {stream_tag("field-offset"), c});
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int b = 0; b < bands; ++b) field_offset[c][b] = config.field_variation * nd(rng);
  }

  scene.years.resize(config.years.size());
  parallel_for(config.years.size(), [&](std::size_t k) {
    const YearShift& shift = config.years[k];
    SceneYear& year = scene.years[k];
    year.year_tag = shift.year_tag;
    year.field_cells = year_fields[k];
    for (int c : year_fields[k]) year.polygons.push_back(layout.cells[c]);
    const FieldIdRaster ids = rasterize_field_ids(year.polygons, size, size);

    Chip base = make_chip(bands, size, size);
    base.info.tile_id = "scene";
    base.info.year = shift.year_tag;
    for (int b = 0; b < bands; ++b) {
      auto ch = base.pixels.channel(b);
      for (std::size_t i = 0; i < ch.size(); ++i) {
        const std::int32_t id = ids.data[i];
        double v;
        if (id >= 0) {
          v = fd[b] + field_offset[year.field_cells[id]][b] + 0.5 * config.texture_amplitude * texture[b][i];
        } else {
          v = bg[b] + config.texture_amplitude * texture[b][i];
        }
        ch[i] = static_cast<float>(v + pixel_texture[b][i]);
      }
    }
    Rng noise_rng = make_rng(config.seed, {stream_tag("year-noise"), k});
    year.imagery = apply_year_shift(base, shift, noise_rng);
    for (float& v : year.imagery.pixels.data) v = std::clamp(v, 0.0f, 1.0f);
  });
  return scene;
}

/// One exported training/inference window with its label.
struct ChipSample {
  Chip image;
  LabelMask label;
  std::size_t year_index = 0;
};

/// Number of core positions per axis for a chip grid.
inline int chip_grid_count(int scene_size, int chip_size, int overlap) {
  return (scene_size - 2 * overlap) / chip_size;
}

inline void check_chip_grid(int size, int chip_size, int overlap, int downsample_factor) {
  if (chip_size <= 0 || overlap < 0) throw ConfigError("export_chips: chip_size must be positive and overlap >= 0");
  const int window = chip_size + 2 * overlap;
  if (window > size)
    throw DimensionError("export_chips: window " + std::to_string(window) + " exceeds scene size " + std::to_string(size));
  if (downsample_factor > 1 && window % downsample_factor != 0)
    throw ConfigError("export_chips: window " + std::to_string(window) + " is not divisible by the network downsampling factor " +
                      std::to_string(downsample_factor));
}

/// Grid of windows of side chip_size + 2*overlap over one year's imagery.
/// Labels cover the chip_size core and are ignore-padded out to the window.
inline std::vector<ChipSample> cut_chips(const Chip& img, const LabelMask& labels, int chip_size, int overlap,
                                         std::size_t year_index = 0, int downsample_factor = 1) {
  if (img.height() != img.width() || labels.height != img.height() || labels.width != img.width())
    throw DimensionError("cut_chips: imagery and labels must be the same square size");
  const int size = img.height();
  check_chip_grid(size, chip_size, overlap, downsample_factor);
  const int window = chip_size + 2 * overlap;
  const int n = chip_grid_count(size, chip_size, overlap);
  std::vector<ChipSample> out;
  out.reserve(static_cast<std::size_t>(n) * n);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      ChipSample s;
      s.year_index = year_index;
      const int ox = c * chip_size, oy = r * chip_size;
      s.image = make_chip(img.bands(), window, window);
      for (int b = 0; b < img.bands(); ++b)
        for (int y = 0; y < window; ++y)
          for (int x = 0; x < window; ++x) s.image.at(b, y, x) = img.at(b, oy + y, ox + x);
      s.image.info.tile_id = "r" + std::to_string(r) + "c" + std::to_string(c);
      s.image.info.year = img.info.year;
      s.image.info.offset_x = ox;
      s.image.info.offset_y = oy;
      s.image.info.core_x = overlap;
      s.image.info.core_y = overlap;
      s.image.info.core_size = chip_size;
      LabelMask core(chip_size, chip_size);
      for (int y = 0; y < chip_size; ++y)
        for (int x = 0; x < chip_size; ++x) core(y, x) = labels(oy + overlap + y, ox + overlap + x);
      s.label = pad_with_ignore(core, window);
      out.push_back(std::move(s));
    }
  }
  return out;
}

/// cut_chips over every year of the scene.
inline std::vector<ChipSample> export_chips(const Scene& scene, int chip_size, int overlap, int downsample_factor = 1,
                                            int boundary_thickness = 2) {
  check_chip_grid(scene.config.scene_size_px, chip_size, overlap, downsample_factor);
  std::vector<ChipSample> out;
  for (std::size_t k = 0; k < scene.years.size(); ++k) {
    Chip img = scene.years[k].imagery;
    img.info.year = scene.years[k].year_tag;
    auto chips = cut_chips(img, scene_labels(scene, k, boundary_thickness), chip_size, overlap, k, downsample_factor);
    for (auto& c : chips) out.push_back(std::move(c));
  }
  return out;
}

}  // namespace fieldshift
