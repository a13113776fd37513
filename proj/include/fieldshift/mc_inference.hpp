#pragma once

// Monte-Carlo dropout ensembles: per-pixel mean/std of class probabilities,
// predictive entropy and mutual information, threshold hardening, and
// overlap-tiled scene prediction.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fieldshift/core/error.hpp"
#include "fieldshift/core/parallel.hpp"
#include "fieldshift/core/raster.hpp"
#include "fieldshift/core/rng.hpp"
#include "fieldshift/network.hpp"

namespace fieldshift {

enum class Aggregation { Mean, MajorityVote };
enum class ThresholdKind { Fixed, Adaptive, Argmax };

inline constexpr double kDefaultThreshold = 0.75;
inline constexpr double kAdaptiveMin = 0.3;
inline constexpr double kAdaptiveMax = 0.9;
inline constexpr int kAdaptiveBins = 256;

struct ThresholdPolicy {
  ThresholdKind kind = ThresholdKind::Adaptive;
  double threshold = kDefaultThreshold;

  static ThresholdPolicy fixed(double t) { return {ThresholdKind::Fixed, t}; }
  static ThresholdPolicy adaptive() { return {ThresholdKind::Adaptive, kDefaultThreshold}; }
  static ThresholdPolicy argmax() { return {ThresholdKind::Argmax, 0.0}; }
};

inline std::string to_string(ThresholdKind k) {
  switch (k) {
    case ThresholdKind::Fixed: return "fixed";
    case ThresholdKind::Adaptive: return "adaptive";
    case ThresholdKind::Argmax: return "argmax";
  }
  return "?";
}

inline ThresholdKind parse_threshold_kind(const std::string& s) {
  if (s == "fixed") return ThresholdKind::Fixed;
  if (s == "adaptive") return ThresholdKind::Adaptive;
  if (s == "argmax") return ThresholdKind::Argmax;
  throw ConfigError("unknown threshold policy '" + s + "'");
}

inline std::string to_string(Aggregation a) { return a == Aggregation::Mean ? "mean" : "majority-vote"; }

inline Aggregation parse_aggregation(const std::string& s) {
  if (s == "mean") return Aggregation::Mean;
  if (s == "majority-vote") return Aggregation::MajorityVote;
  throw ConfigError("unknown aggregation '" + s + "'");
}

struct McConfig {
  int trials = 10;
  double inference_dropout_rate = 0.1;
  Aggregation aggregation = Aggregation::Mean;
  ThresholdPolicy policy = ThresholdPolicy::adaptive();
  std::uint64_t seed = 0;
};

inline void validate(const McConfig& c) {
  if (c.trials < 1) throw ConfigError("mc: trials must be at least 1, got " + std::to_string(c.trials));
  if (!(c.inference_dropout_rate >= 0.0 && c.inference_dropout_rate < 1.0))
    throw ConfigError("mc: inference_dropout_rate must lie in [0,1)");
  if (c.policy.kind == ThresholdKind::Fixed && !(c.policy.threshold >= 0.0 && c.policy.threshold <= 1.0))
    throw ConfigError("mc: fixed threshold must lie in [0,1]");
}

struct McEnsembleOutput {
  Tensor<double> mean_probs;   // K x H x W
  Tensor<double> std_probs;    // K x H x W, population std over trials
  Tensor<double> entropy;      // 1 x H x W, nats
  Tensor<double> mutual_info;  // 1 x H x W, nats
  LabelMask hardened;
  double threshold_used = kDefaultThreshold;  // NaN under the argmax policy
  bool threshold_fallback = false;
  double probability_range = 0.0;  // p99 - p1 of the interior mean probability
  int trials = 0;
};

struct HardenResult {
  LabelMask mask;
  double threshold = kDefaultThreshold;
  bool fallback = false;
};

/// Otsu-style threshold on a 256-bin histogram of interior probabilities:
/// the midpoint of the run of split points with maximal between-class
/// variance, clamped to [0.3, 0.9]. Returns the fixed default with
/// fallback = true when every split has zero variance.
inline HardenResult adaptive_threshold(std::span<const double> interior_probs) {
  std::array<std::int64_t, kAdaptiveBins> hist{};
  for (double p : interior_probs) {
    const int b = std::clamp(static_cast<int>(std::floor(p * kAdaptiveBins)), 0, kAdaptiveBins - 1);
    ++hist[b];
  }
  std::int64_t n = 0, s = 0;
  for (int b = 0; b < kAdaptiveBins; ++b) {
    n += hist[b];
    s += hist[b] * b;
  }
  HardenResult r;
  r.threshold = kDefaultThreshold;
  if (n == 0) {
    r.fallback = true;
    return r;
  }
  double best = 0.0;
  int first = -1, last = -1;
  std::int64_t n0 = 0, s0 = 0;
  for (int k = 0; k + 1 < kAdaptiveBins; ++k) {
    n0 += hist[k];
    s0 += hist[k] * k;
    const std::int64_t n1 = n - n0;
    if (n0 == 0 || n1 == 0) continue;
    const double a = static_cast<double>(s0) * static_cast<double>(n1) - static_cast<double>(s - s0) * static_cast<double>(n0);
    const double var = a * a / (static_cast<double>(n0) * static_cast<double>(n1));
    if (var > best) {
      best = var;
      first = last = k;
    } else if (var == best && first >= 0 && last == k - 1) {
      last = k;
    }
  }
  if (first < 0 || best <= 0.0) {
    r.fallback = true;
    return r;
  }
  const double t = 0.5 * ((first + 1) + (last + 1)) / kAdaptiveBins;
  r.threshold = std::clamp(t, kAdaptiveMin, kAdaptiveMax);
  return r;
}

/// Interior wherever its probability reaches the threshold; elsewhere the
/// larger of background and boundary (ties to background). The argmax
/// policy takes the plain per-pixel argmax (ties to the lower class code).
inline HardenResult harden(const Tensor<double>& mean_probs, const ThresholdPolicy& policy) {
  if (mean_probs.channels != kNumClasses) throw DimensionError("harden: expected 3 class planes");
  const std::size_t hw = mean_probs.plane();
  HardenResult r;
  r.mask = LabelMask(mean_probs.height, mean_probs.width, kBackground);
  auto bg = mean_probs.channel(kBackground);
  auto in = mean_probs.channel(kInterior);
  auto bd = mean_probs.channel(kBoundary);
  if (policy.kind == ThresholdKind::Argmax) {
    r.threshold = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t i = 0; i < hw; ++i) {
      std::uint8_t c = kBackground;
      double best = bg[i];
      if (in[i] > best) c = kInterior, best = in[i];
      if (bd[i] > best) c = kBoundary;
      r.mask.data[i] = c;
    }
    return r;
  }
  if (policy.kind == ThresholdKind::Fixed) {
    r.threshold = policy.threshold;
  } else {
    auto a = adaptive_threshold(in);
    r.threshold = a.threshold;
    r.fallback = a.fallback;
  }
  for (std::size_t i = 0; i < hw; ++i) {
    if (in[i] >= r.threshold) r.mask.data[i] = kInterior;
    else r.mask.data[i] = bd[i] > bg[i] ? kBoundary : kBackground;
  }
  return r;
}

inline double probability_range(std::span<const double> interior) {
  if (interior.empty()) return 0.0;
  std::vector<double> v(interior.begin(), interior.end());
  auto at = [&](double q) {
    const std::size_t k = static_cast<std::size_t>(std::llround(q * static_cast<double>(v.size() - 1)));
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
    return v[k];
  };
  const double hi = at(0.99);
  const double lo = at(0.01);
  return hi - lo;
}

namespace detail {

inline double entropy_of(const double* p, std::size_t stride, int k) {
  double h = 0.0;
  for (int c = 0; c < k; ++c) {
    const double v = p[c * stride];
    if (v > 0.0) h -= v * std::log(v);
  }
  return std::max(0.0, h);
}

/// Order-independent mean: sorted values, offset from the minimum, so a set
/// of identical values averages to exactly that value.
inline double symmetric_mean(std::span<double> v) {
  std::sort(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += x - v.front();
  return v.front() + acc / static_cast<double>(v.size());
}

}  // namespace detail

/// Combines per-trial class probabilities (each K x H x W). The result does
/// not depend on trial order.
inline McEnsembleOutput aggregate_trials(std::span<const Tensor<double>> trials, const ThresholdPolicy& policy,
                                         Aggregation aggregation = Aggregation::Mean) {
  if (trials.empty()) throw ConfigError("aggregate_trials: at least one trial is required");
  const auto& first = trials.front();
  for (const auto& t : trials)
    if (!t.same_shape(first)) throw DimensionError("aggregate_trials: trial shapes differ");
  const int K = first.channels;
  const std::size_t hw = first.plane();
  const std::size_t T = trials.size();
  McEnsembleOutput out;
  out.trials = static_cast<int>(T);
  out.mean_probs = Tensor<double>(K, first.height, first.width);
  out.std_probs = Tensor<double>(K, first.height, first.width);
  out.entropy = Tensor<double>(1, first.height, first.width);
  out.mutual_info = Tensor<double>(1, first.height, first.width);
  const double ln_k = std::log(static_cast<double>(K));
  std::vector<double> buf(T);
  for (std::size_t i = 0; i < hw; ++i) {
    for (int c = 0; c < K; ++c) {
      const std::size_t idx = c * hw + i;
      for (std::size_t t = 0; t < T; ++t) buf[t] = trials[t].data[idx];
      const double m = detail::symmetric_mean(buf);
      double ss = 0.0;
      for (double x : buf) ss += (x - m) * (x - m);
      out.mean_probs.data[idx] = m;
      out.std_probs.data[idx] = std::sqrt(ss / static_cast<double>(T));
    }
    const double h = std::min(ln_k, detail::entropy_of(out.mean_probs.data.data() + i, hw, K));
    for (std::size_t t = 0; t < T; ++t) buf[t] = detail::entropy_of(trials[t].data.data() + i, hw, K);
    const double expected_h = detail::symmetric_mean(buf);
    out.entropy.data[i] = h;
    out.mutual_info.data[i] = std::clamp(h - expected_h, 0.0, h);
  }
  auto hr = harden(out.mean_probs, policy);
  out.threshold_used = hr.threshold;
  out.threshold_fallback = hr.fallback;
  out.hardened = std::move(hr.mask);
  if (aggregation == Aggregation::MajorityVote) {
    // every trial is hardened with the threshold chosen on the mean
    const ThresholdPolicy per_trial =
        policy.kind == ThresholdKind::Argmax ? policy : ThresholdPolicy::fixed(out.threshold_used);
    std::vector<std::array<int, kNumClasses>> votes(hw, std::array<int, kNumClasses>{});
    for (const auto& t : trials) {
      const auto m = harden(t, per_trial).mask;
      for (std::size_t i = 0; i < hw; ++i) ++votes[i][m.data[i]];
    }
    for (std::size_t i = 0; i < hw; ++i) {
      const auto& v = votes[i];
      const int top = *std::max_element(v.begin(), v.end());
      const int holders = static_cast<int>(std::count(v.begin(), v.end(), top));
      out.hardened.data[i] = holders > 1 ? kBackground : static_cast<std::uint8_t>(std::max_element(v.begin(), v.end()) - v.begin());
    }
  }
  out.probability_range = probability_range(out.mean_probs.channel(kInterior));
  return out;
}

/// Softmax probabilities of one trial, computed in double.
template <typename T>
Tensor<double> trial_probs(const NetworkParams<T>& params, const Tensor<T>& chip, double rate, std::uint64_t mask_seed) {
  const auto logits = nn::forward_sample<T>(params, chip, rate > 0.0, rate, mask_seed, nullptr);
  return softmax(logits.template cast<double>());
}

inline std::uint64_t trial_seed(std::uint64_t seed, std::size_t t) {
  Rng r = make_rng(seed, {stream_tag("mc-trial"), t});
  return r();
}

/// T stochastic forward passes, trial t driven by its own derived stream.
template <typename T>
McEnsembleOutput mc_predict(const NetworkParams<T>& params, const Tensor<T>& chip, const McConfig& cfg) {
  validate(cfg);
  if (chip.channels != params.arch.in_bands) throw DimensionError("mc_predict: band count does not match the network");
  check_spatial(params.arch, chip.height, chip.width);
  std::vector<Tensor<double>> trials(cfg.trials);
  parallel_for(trials.size(), [&](std::size_t t) {
    trials[t] = trial_probs(params, chip, cfg.inference_dropout_rate, trial_seed(cfg.seed, t));
  });
  return aggregate_trials(std::span<const Tensor<double>>(trials), cfg.policy, cfg.aggregation);
}

struct TileScheme {
  int core_size = 64;
  int input_size = 96;

  int overlap() const noexcept { return (input_size - core_size) / 2; }
};

inline void validate(const TileScheme& s, const ArchSpec& arch) {
  if (s.core_size <= 0 || s.input_size < s.core_size) throw ConfigError("tiles: need 0 < core_size <= input_size");
  if ((s.input_size - s.core_size) % 2 != 0) throw ConfigError("tiles: input_size - core_size must be even");
  check_spatial(arch, s.input_size, s.input_size);
}

/// Reflect without repeating the edge sample (-1 -> 1, n -> n-2).
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

/// Input window of core (row, col), reflection-padded at the scene edge.
template <typename T>
Tensor<T> extract_window(const Tensor<T>& scene, const TileScheme& s, int row, int col) {
  const int y0 = row * s.core_size - s.overlap();
  const int x0 = col * s.core_size - s.overlap();
  Tensor<T> w(scene.channels, s.input_size, s.input_size);
  for (int c = 0; c < scene.channels; ++c)
    for (int y = 0; y < s.input_size; ++y) {
      const int sy = reflect_index(y0 + y, scene.height);
      for (int x = 0; x < s.input_size; ++x) w(c, y, x) = scene(c, sy, reflect_index(x0 + x, scene.width));
    }
  return w;
}

inline McConfig tile_config(const McConfig& cfg, int row, int col) {
  McConfig c = cfg;
  c.seed = derive_seed(cfg.seed, {stream_tag("tile"), static_cast<std::uint64_t>(row), static_cast<std::uint64_t>(col)});
  return c;
}

/// Predicts every core from its enlarged window and writes only the core
/// into the mosaic. `prepare`, when set, transforms each extracted window
/// (e.g. per-window normalization). Hardening (except majority vote, which
/// is per tile) runs once on the stitched mean probabilities.
template <typename T>
McEnsembleOutput predict_scene(const NetworkParams<T>& params, const Tensor<T>& scene, const TileScheme& scheme,
                               const McConfig& cfg, const std::function<void(Tensor<T>&)>& prepare = {}) {
  validate(cfg);
  validate(scheme, params.arch);
  if (scene.channels != params.arch.in_bands) throw DimensionError("predict_scene: band count does not match the network");
  if (scene.height % scheme.core_size != 0 || scene.width % scheme.core_size != 0)
    throw DimensionError("predict_scene: scene " + std::to_string(scene.height) + "x" + std::to_string(scene.width) +
                         " is not a whole number of " + std::to_string(scheme.core_size) + "px cores");
  const int rows = scene.height / scheme.core_size, cols = scene.width / scheme.core_size;
  const int K = params.arch.classes;
  McEnsembleOutput out;
  out.trials = cfg.trials;
  out.mean_probs = Tensor<double>(K, scene.height, scene.width);
  out.std_probs = Tensor<double>(K, scene.height, scene.width);
  out.entropy = Tensor<double>(1, scene.height, scene.width);
  out.mutual_info = Tensor<double>(1, scene.height, scene.width);
  out.hardened = LabelMask(scene.height, scene.width, kBackground);
  std::vector<double> tile_thresholds(static_cast<std::size_t>(rows) * cols);
  const int off = scheme.overlap(), cs = scheme.core_size;
  auto crop = [&](const Tensor<double>& src, Tensor<double>& dst, int r, int c) {
    for (int k = 0; k < src.channels; ++k)
      for (int y = 0; y < cs; ++y)
        for (int x = 0; x < cs; ++x) dst(k, r * cs + y, c * cs + x) = src(k, off + y, off + x);
  };
  auto run_tile = [&](std::size_t index) {
    const int r = static_cast<int>(index) / cols, c = static_cast<int>(index) % cols;
    auto window = extract_window(scene, scheme, r, c);
    if (prepare) prepare(window);
    const McConfig tc = tile_config(cfg, r, c);
    std::vector<Tensor<double>> trials(tc.trials);
    for (int t = 0; t < tc.trials; ++t)
      trials[t] = trial_probs(params, window, tc.inference_dropout_rate, trial_seed(tc.seed, static_cast<std::size_t>(t)));
    const auto o = aggregate_trials(std::span<const Tensor<double>>(trials), tc.policy, tc.aggregation);
    crop(o.mean_probs, out.mean_probs, r, c);
    crop(o.std_probs, out.std_probs, r, c);
    crop(o.entropy, out.entropy, r, c);
    crop(o.mutual_info, out.mutual_info, r, c);
    tile_thresholds[index] = o.threshold_used;
    if (cfg.aggregation == Aggregation::MajorityVote)
      for (int y = 0; y < cs; ++y)
        for (int x = 0; x < cs; ++x) out.hardened(r * cs + y, c * cs + x) = o.hardened(off + y, off + x);
  };
  parallel_for(static_cast<std::size_t>(rows) * cols, run_tile);
  if (cfg.aggregation == Aggregation::MajorityVote) {
    out.threshold_used = std::accumulate(tile_thresholds.begin(), tile_thresholds.end(), 0.0) /
                         static_cast<double>(tile_thresholds.size());
  } else {
    auto hr = harden(out.mean_probs, cfg.policy);
    out.hardened = std::move(hr.mask);
    out.threshold_used = hr.threshold;
    out.threshold_fallback = hr.fallback;
  }
  out.probability_range = probability_range(out.mean_probs.channel(kInterior));
  return out;
}

}  // namespace fieldshift
