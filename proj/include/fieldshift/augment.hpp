#pragma once

// On-the-fly augmentation chain: flip -> rotation -> resize -> photometric.
// Geometric stages move chip and mask together; photometric stages touch
// imagery only.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "fieldshift/core/error.hpp"
#include "fieldshift/core/raster.hpp"
#include "fieldshift/core/rng.hpp"

namespace fieldshift {

enum class FlipMode { Horizontal, Vertical, Diagonal, AntiDiagonal };
enum class PhotometricMode { Gamma, GaussianNoise, Additive, Multiplicative };
enum class GeometricKind { FlipH, FlipV, FlipDiag, FlipAntiDiag, Rotate90k, Resize };

inline FlipMode parse_flip_mode(const std::string& s) {
  if (s == "horizontal") return FlipMode::Horizontal;
  if (s == "vertical") return FlipMode::Vertical;
  if (s == "diagonal") return FlipMode::Diagonal;
  if (s == "anti-diagonal") return FlipMode::AntiDiagonal;
  throw ConfigError("unknown flip mode '" + s + "'");
}

inline std::string to_string(FlipMode m) {
  switch (m) {
    case FlipMode::Horizontal: return "horizontal";
    case FlipMode::Vertical: return "vertical";
    case FlipMode::Diagonal: return "diagonal";
    case FlipMode::AntiDiagonal: return "anti-diagonal";
  }
  return "?";
}

inline PhotometricMode parse_photometric_mode(const std::string& s) {
  if (s == "gamma") return PhotometricMode::Gamma;
  if (s == "gaussian-noise") return PhotometricMode::GaussianNoise;
  if (s == "additive") return PhotometricMode::Additive;
  if (s == "multiplicative") return PhotometricMode::Multiplicative;
  throw ConfigError("unknown photometric mode '" + s + "'");
}

inline std::string to_string(PhotometricMode m) {
  switch (m) {
    case PhotometricMode::Gamma: return "gamma";
    case PhotometricMode::GaussianNoise: return "gaussian-noise";
    case PhotometricMode::Additive: return "additive";
    case PhotometricMode::Multiplicative: return "multiplicative";
  }
  return "?";
}

inline GeometricKind parse_geometric_kind(const std::string& s) {
  if (s == "flip-h") return GeometricKind::FlipH;
  if (s == "flip-v") return GeometricKind::FlipV;
  if (s == "flip-diag") return GeometricKind::FlipDiag;
  if (s == "flip-antidiag") return GeometricKind::FlipAntiDiag;
  if (s == "rotate90k") return GeometricKind::Rotate90k;
  if (s == "resize") return GeometricKind::Resize;
  throw ConfigError("unknown geometric transform '" + s + "'");
}

struct AugmentConfig {
  double apply_probability = 0.5;  // per stage
  std::vector<FlipMode> flip_modes{FlipMode::Horizontal, FlipMode::Vertical, FlipMode::Diagonal};
  std::vector<int> rotation_angles{90, 180, 270};
  double resize_min = 0.8;
  double resize_max = 1.2;
  bool photometric = true;
  std::vector<PhotometricMode> photometric_modes{PhotometricMode::Gamma, PhotometricMode::GaussianNoise,
                                                 PhotometricMode::Additive, PhotometricMode::Multiplicative};
  double gamma_min = 0.7;
  double gamma_max = 1.4;
  double noise_sigma = 0.02;
  double additive_range = 0.05;
  double multiplicative_min = 0.9;
  double multiplicative_max = 1.1;
};

inline void validate(const AugmentConfig& c) {
  if (!(c.apply_probability >= 0.0 && c.apply_probability <= 1.0)) throw ConfigError("augment.apply_probability must lie in [0,1]");
  if (c.flip_modes.empty() || c.rotation_angles.empty() || c.photometric_modes.empty())
    throw ConfigError("augment mode lists must be non-empty");
  for (int a : c.rotation_angles)
    if (a % 90 != 0 || a <= 0 || a >= 360) throw ConfigError("augment.rotation_angles must be 90, 180 or 270");
  if (!(c.resize_min > 0.0 && c.resize_min <= c.resize_max)) throw ConfigError("augment resize range is empty");
  if (!(c.gamma_min > 0.0 && c.gamma_min <= c.gamma_max)) throw ConfigError("augment gamma range is empty");
  if (!(c.noise_sigma >= 0.0)) throw ConfigError("augment.noise_sigma must be >= 0");
  if (!(c.additive_range >= 0.0)) throw ConfigError("augment.additive_range must be >= 0");
  if (!(c.multiplicative_min > 0.0 && c.multiplicative_min <= c.multiplicative_max))
    throw ConfigError("augment multiplicative range is empty");
}

namespace detail {

/// Generic pixel permutation: dst(y, x) = src(map(y, x)). Square inputs
/// are required for the transposing maps.
template <typename Map>
void permute_pair(Chip& chip, LabelMask& mask, Map&& map) {
  const int h = chip.height(), w = chip.width();
  Chip c2 = chip;
  LabelMask m2 = mask;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto [sy, sx] = map(y, x);
      for (int b = 0; b < chip.bands(); ++b) c2.at(b, y, x) = chip.at(b, sy, sx);
      m2(y, x) = mask(sy, sx);
    }
  chip = std::move(c2);
  mask = std::move(m2);
}

inline double bilinear(const Tensor<float>& t, int b, double sy, double sx) {
  const int h = t.height, w = t.width;
  sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
  sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
  const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - y0, fx = sx - x0;
  const double top = t(b, y0, x0) * (1 - fx) + t(b, y0, x1) * fx;
  const double bot = t(b, y1, x0) * (1 - fx) + t(b, y1, x1) * fx;
  return top * (1 - fy) + bot * fy;
}

}  // namespace detail

/// Resamples by `scale` (bilinear imagery, nearest mask) then center-crops
/// or pads back to the original size; padding is edge-replicated for
/// imagery and ignore for the mask.
inline void resize_pair(Chip& chip, LabelMask& mask, double scale) {
  if (!(scale > 0.0)) throw ConfigError("resize scale must be positive");
  const int h = chip.height(), w = chip.width();
  const int rh = std::max(1, static_cast<int>(std::lround(h * scale)));
  const int rw = std::max(1, static_cast<int>(std::lround(w * scale)));
  const double sy_scale = static_cast<double>(h) / rh, sx_scale = static_cast<double>(w) / rw;
  // resized image is implicit: pixel (ry, rx) samples source at ((r + 0.5) * s - 0.5)
  const int top = (rh - h) / 2, left = (rw - w) / 2;  // negative when padding
  Chip out = chip;
  LabelMask m2(h, w, kIgnore);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int ry = y + top, rx = x + left;
      const bool inside = ry >= 0 && rx >= 0 && ry < rh && rx < rw;
      const int cy = std::clamp(ry, 0, rh - 1), cx = std::clamp(rx, 0, rw - 1);
      const double sy = (cy + 0.5) * sy_scale - 0.5, sx = (cx + 0.5) * sx_scale - 0.5;
      for (int b = 0; b < chip.bands(); ++b) out.at(b, y, x) = static_cast<float>(detail::bilinear(chip.pixels, b, sy, sx));
      if (inside) {
        const int ny = std::min(h - 1, static_cast<int>(std::floor((cy + 0.5) * sy_scale)));
        const int nx = std::min(w - 1, static_cast<int>(std::floor((cx + 0.5) * sx_scale)));
        m2(y, x) = mask(ny, nx);
      }
    }
  }
  chip = std::move(out);
  mask = std::move(m2);
}

/// parameter: quarter turns for Rotate90k, scale for Resize, unused otherwise.
inline std::pair<Chip, LabelMask> geometric_transform(Chip chip, LabelMask mask, GeometricKind kind, double parameter = 0.0) {
  if (chip.height() != mask.height || chip.width() != mask.width)
    throw DimensionError("geometric_transform: chip and mask are not aligned");
  const int h = chip.height(), w = chip.width();
  const bool square = h == w;
  switch (kind) {
    case GeometricKind::FlipH:
      detail::permute_pair(chip, mask, [w](int y, int x) { return std::pair{y, w - 1 - x}; });
      break;
    case GeometricKind::FlipV:
      detail::permute_pair(chip, mask, [h](int y, int x) { return std::pair{h - 1 - y, x}; });
      break;
    case GeometricKind::FlipDiag:
      if (!square) throw DimensionError("diagonal flip needs a square chip");
      detail::permute_pair(chip, mask, [](int y, int x) { return std::pair{x, y}; });
      break;
    case GeometricKind::FlipAntiDiag:
      if (!square) throw DimensionError("anti-diagonal flip needs a square chip");
      detail::permute_pair(chip, mask, [w](int y, int x) { return std::pair{w - 1 - x, w - 1 - y}; });
      break;
    case GeometricKind::Rotate90k: {
      const int k = ((static_cast<int>(std::lround(parameter)) % 4) + 4) % 4;
      if (k != 0 && !square) throw DimensionError("quarter-turn rotation needs a square chip");
      // counter-clockwise quarter turns
      for (int i = 0; i < k; ++i)
        detail::permute_pair(chip, mask, [w](int y, int x) { return std::pair{x, w - 1 - y}; });
      break;
    }
    case GeometricKind::Resize:
      resize_pair(chip, mask, parameter);
      break;
    default:
      throw ConfigError("unknown geometric transform");
  }
  return {std::move(chip), std::move(mask)};
}

/// Photometric transform with one value per band (gamma/noise use the first
/// entry for all bands). Output is clamped to [0,1].
inline Chip photometric_transform(Chip chip, PhotometricMode kind, const std::vector<double>& per_band, Rng& rng) {
  if (per_band.empty()) throw ConfigError("photometric_transform needs a parameter");
  auto param = [&](int b) { return per_band.size() == 1 ? per_band[0] : per_band.at(b); };
  if (kind == PhotometricMode::Gamma) {
    for (float v : chip.pixels.data)
      if (v < 0.0f) throw DomainError("gamma correction applied to negative values");
  }
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int b = 0; b < chip.bands(); ++b) {
    const double p = param(b);
    for (float& v : chip.pixels.channel(b)) {
      double r = v;
      switch (kind) {
        case PhotometricMode::Gamma: r = std::pow(r, p); break;
        case PhotometricMode::GaussianNoise: r += p * noise(rng); break;
        case PhotometricMode::Additive: r += p; break;
        case PhotometricMode::Multiplicative: r *= p; break;
      }
      v = static_cast<float>(std::clamp(r, 0.0, 1.0));
    }
  }
  return chip;
}

inline Chip photometric_transform(Chip chip, PhotometricMode kind, double parameter, Rng& rng) {
  return photometric_transform(std::move(chip), kind, std::vector<double>{parameter}, rng);
}

/// Runs the four-stage chain. Every stage draws its firing decision from
/// the stream even when the probability is 0 or 1, so the stream layout
/// is independent of the outcome.
inline std::pair<Chip, LabelMask> augment_pair(Chip chip, LabelMask mask, const AugmentConfig& cfg, Rng& rng) {
  if (chip.height() != mask.height || chip.width() != mask.width)
    throw DimensionError("augment_pair: chip and mask are not aligned");
  auto fires = [&] { return uniform01(rng) < cfg.apply_probability; };

  if (fires()) {
    const FlipMode m = cfg.flip_modes[uniform_index(rng, cfg.flip_modes.size())];
    const GeometricKind k = m == FlipMode::Horizontal ? GeometricKind::FlipH
                            : m == FlipMode::Vertical ? GeometricKind::FlipV
                            : m == FlipMode::Diagonal ? GeometricKind::FlipDiag
                                                      : GeometricKind::FlipAntiDiag;
    std::tie(chip, mask) = geometric_transform(std::move(chip), std::move(mask), k);
  }
  if (fires()) {
    const int angle = cfg.rotation_angles[uniform_index(rng, cfg.rotation_angles.size())];
    std::tie(chip, mask) = geometric_transform(std::move(chip), std::move(mask), GeometricKind::Rotate90k, angle / 90);
  }
  if (fires()) {
    const double s = uniform(rng, cfg.resize_min, cfg.resize_max);
    std::tie(chip, mask) = geometric_transform(std::move(chip), std::move(mask), GeometricKind::Resize, s);
  }
  const bool photo = fires();
  if (photo && cfg.photometric) {
    const PhotometricMode m = cfg.photometric_modes[uniform_index(rng, cfg.photometric_modes.size())];
    std::vector<double> params;
    switch (m) {
      case PhotometricMode::Gamma: params = {uniform(rng, cfg.gamma_min, cfg.gamma_max)}; break;
      case PhotometricMode::GaussianNoise: params = {cfg.noise_sigma}; break;
      case PhotometricMode::Additive:
        for (int b = 0; b < chip.bands(); ++b) params.push_back(uniform(rng, -cfg.additive_range, cfg.additive_range));
        break;
      case PhotometricMode::Multiplicative:
        for (int b = 0; b < chip.bands(); ++b) params.push_back(uniform(rng, cfg.multiplicative_min, cfg.multiplicative_max));
        break;
    }
    chip = photometric_transform(std::move(chip), m, params, rng);
  }
  return {std::move(chip), std::move(mask)};
}

}  // namespace fieldshift
