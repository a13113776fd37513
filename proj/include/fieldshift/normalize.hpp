#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fieldshift/core/error.hpp"
#include "fieldshift/core/raster.hpp"

namespace fieldshift {

enum class NormMethod { MinMax, ZValue };
enum class NormLocality { Local, Global };
enum class BandScope { AllBands, PerBand };

/// One of the eight normalization schemes, named mm|zv - l|g ab|pb.
struct NormScheme {
  NormMethod method = NormMethod::MinMax;
  NormLocality locality = NormLocality::Local;
  BandScope scope = BandScope::AllBands;
  bool percentile_clip = false;  // min-max only: use 2%/98% percentiles instead of min/max
  double clip_low = 0.02;
  double clip_high = 0.98;

  std::string code() const {
    std::string s = method == NormMethod::MinMax ? "mm-" : "zv-";
    s += locality == NormLocality::Local ? "l" : "g";
    s += scope == BandScope::AllBands ? "ab" : "pb";
    return s;
  }

  static NormScheme parse(const std::string& code) {
    if (code.size() != 6 || code[2] != '-') throw ConfigError("unknown normalization scheme '" + code + "'");
    NormScheme s;
    const auto m = code.substr(0, 2), l = code.substr(3, 1), b = code.substr(4, 2);
    if (m == "mm") s.method = NormMethod::MinMax;
    else if (m == "zv") s.method = NormMethod::ZValue;
    else throw ConfigError("unknown normalization method in '" + code + "'");
    if (l == "l") s.locality = NormLocality::Local;
    else if (l == "g") s.locality = NormLocality::Global;
    else throw ConfigError("unknown normalization locality in '" + code + "'");
    if (b == "ab") s.scope = BandScope::AllBands;
    else if (b == "pb") s.scope = BandScope::PerBand;
    else throw ConfigError("unknown band scope in '" + code + "'");
    return s;
  }

  static std::array<NormScheme, 8> all() {
    std::array<NormScheme, 8> out{};
    int i = 0;
    for (auto m : {NormMethod::MinMax, NormMethod::ZValue})
      for (auto l : {NormLocality::Local, NormLocality::Global})
        for (auto b : {BandScope::AllBands, BandScope::PerBand}) {
          out[i].method = m;
          out[i].locality = l;
          out[i].scope = b;
          ++i;
        }
    return out;
  }
};

/// Streaming mean/variance (Welford) with min/max and an exact-merge rule
/// (Chan et al.), so partial statistics over shards combine associatively.
struct RunningStats {
  std::uint64_t count = 0;
  double mean = 0.0;
  double m2 = 0.0;
  double min = std::numeric_limits<double>::infinity();
  double max = -std::numeric_limits<double>::infinity();

  void add(double v) noexcept {
    ++count;
    const double delta = v - mean;
    mean += delta / static_cast<double>(count);
    m2 += delta * (v - mean);
    min = std::min(min, v);
    max = std::max(max, v);
  }

  void merge(const RunningStats& o) noexcept {
    if (o.count == 0) return;
    if (count == 0) {
      *this = o;
      return;
    }
    const double n = static_cast<double>(count) + static_cast<double>(o.count);
    const double delta = o.mean - mean;
    mean += delta * static_cast<double>(o.count) / n;
    m2 += o.m2 + delta * delta * static_cast<double>(count) * static_cast<double>(o.count) / n;
    count += o.count;
    min = std::min(min, o.min);
    max = std::max(max, o.max);
  }

  double variance() const noexcept { return count > 0 ? m2 / static_cast<double>(count) : 0.0; }
  double stddev() const noexcept { return std::sqrt(std::max(0.0, variance())); }
};

/// Statistics at a band scope: one entry for all-bands scope, one per band otherwise.
struct NormStats {
  BandScope scope = BandScope::AllBands;
  std::vector<double> min, max, mean, std;
  std::vector<double> p_low, p_high;  // only filled when percentile clipping is requested
  std::uint64_t sample_count = 0;

  std::size_t entries() const noexcept { return mean.size(); }
  bool empty() const noexcept { return mean.empty(); }
};

namespace detail {

inline NormStats stats_from_accumulators(BandScope scope, const std::vector<RunningStats>& acc) {
  NormStats s;
  s.scope = scope;
  for (const auto& a : acc) {
    s.min.push_back(a.min);
    s.max.push_back(a.max);
    s.mean.push_back(a.mean);
    s.std.push_back(a.stddev());
  }
  s.sample_count = acc.empty() ? 0 : acc.front().count;
  return s;
}

inline std::vector<RunningStats> accumulate(const Chip& chip, BandScope scope) {
  std::vector<RunningStats> acc(scope == BandScope::AllBands ? 1 : chip.bands());
  for (int b = 0; b < chip.bands(); ++b) {
    RunningStats& a = acc[scope == BandScope::AllBands ? 0 : b];
    for (float v : chip.pixels.channel(b)) a.add(v);
  }
  return acc;
}

inline double quantile_sorted(const std::vector<float>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(sorted.size() - 1, lo + 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

template <typename ChipRange>
void fill_percentiles(NormStats& s, const ChipRange& chips, const NormScheme& scheme) {
  const std::size_t n = s.entries();
  s.p_low.assign(n, 0.0);
  s.p_high.assign(n, 0.0);
  for (std::size_t e = 0; e < n; ++e) {
    std::vector<float> values;
    for (const Chip& c : chips)
      for (int b = 0; b < c.bands(); ++b)
        if (s.scope == BandScope::AllBands || static_cast<std::size_t>(b) == e)
          values.insert(values.end(), c.pixels.channel(b).begin(), c.pixels.channel(b).end());
    std::sort(values.begin(), values.end());
    s.p_low[e] = quantile_sorted(values, scheme.clip_low);
    s.p_high[e] = quantile_sorted(values, scheme.clip_high);
  }
}

}  // namespace detail

/// Dataset statistics for a global scheme. For local schemes the statistics
/// are computed per chip at apply time; an empty dataset then yields empty stats.
inline NormStats compute_stats(std::span<const Chip> dataset, const NormScheme& scheme) {
  if (dataset.empty()) {
    if (scheme.locality == NormLocality::Global) throw StatisticsError("compute_stats: empty dataset for a global scheme");
    NormStats s;
    s.scope = scheme.scope;
    return s;
  }
  const int bands = dataset.front().bands();
  std::vector<RunningStats> acc(scheme.scope == BandScope::AllBands ? 1 : bands);
  for (const Chip& c : dataset) {
    if (c.bands() != bands) throw DimensionError("compute_stats: chips disagree on band count");
    const auto part = detail::accumulate(c, scheme.scope);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i].merge(part[i]);
  }
  NormStats s = detail::stats_from_accumulators(scheme.scope, acc);
  if (scheme.percentile_clip && scheme.method == NormMethod::MinMax) detail::fill_percentiles(s, dataset, scheme);
  return s;
}

/// Applies a scheme. Local schemes derive their statistics from the chip
/// itself; global schemes need `stats`. A constant scope (max == min, or
/// std == 0) maps to 0 and sets the chip's degenerate flag.
inline Chip normalize_chip(const Chip& chip, const NormScheme& scheme, const NormStats* stats = nullptr) {
  NormStats local;
  if (scheme.locality == NormLocality::Local) {
    local = detail::stats_from_accumulators(scheme.scope, detail::accumulate(chip, scheme.scope));
    if (scheme.percentile_clip && scheme.method == NormMethod::MinMax) {
      std::array<Chip, 1> one{chip};
      detail::fill_percentiles(local, one, scheme);
    }
    stats = &local;
  } else if (stats == nullptr || stats->empty()) {
    throw StatisticsError("normalize_chip: global scheme " + scheme.code() + " requires dataset statistics");
  }
  if (stats->scope != scheme.scope) throw StatisticsError("normalize_chip: statistics band scope does not match scheme");
  if (stats->scope == BandScope::PerBand && static_cast<int>(stats->entries()) != chip.bands())
    throw DimensionError("normalize_chip: per-band statistics have " + std::to_string(stats->entries()) +
                         " entries for a " + std::to_string(chip.bands()) + "-band chip");

  Chip out = chip;
  out.info.norm_scheme = scheme.code();
  out.info.degenerate = false;
  const bool clip = scheme.percentile_clip && scheme.method == NormMethod::MinMax && !stats->p_low.empty();
  for (int b = 0; b < chip.bands(); ++b) {
    const std::size_t e = stats->scope == BandScope::AllBands ? 0 : static_cast<std::size_t>(b);
    double shift, scale;
    if (scheme.method == NormMethod::MinMax) {
      const double lo = clip ? stats->p_low[e] : stats->min[e];
      const double hi = clip ? stats->p_high[e] : stats->max[e];
      shift = lo;
      scale = hi - lo;
    } else {
      shift = stats->mean[e];
      scale = stats->std[e];
    }
    auto src = chip.pixels.channel(b);
    auto dst = out.pixels.channel(b);
    if (!(scale > 0.0)) {
      out.info.degenerate = true;
      std::fill(dst.begin(), dst.end(), 0.0f);
      continue;
    }
    for (std::size_t i = 0; i < src.size(); ++i) {
      double v = (static_cast<double>(src[i]) - shift) / scale;
      if (clip) v = std::clamp(v, 0.0, 1.0);
      dst[i] = static_cast<float>(v);
    }
  }
  return out;
}

inline constexpr int kHistogramBins = 1024;

/// Per-band empirical distribution on a fixed 1024-bin grid over [lo, hi].
struct BandHistogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<double> counts;  // kHistogramBins entries
  double total = 0.0;

  bool constant() const noexcept { return !(hi > lo); }
  double bin_width() const noexcept { return (hi - lo) / kHistogramBins; }

  static BandHistogram from_values(std::span<const float> values) {
    BandHistogram h;
    h.counts.assign(kHistogramBins, 0.0);
    if (values.empty()) return h;
    auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    h.lo = *mn;
    h.hi = *mx;
    for (float v : values) h.counts[h.bin_of(v)] += 1.0;
    h.total = static_cast<double>(values.size());
    return h;
  }

  std::size_t bin_of(double v) const noexcept {
    if (constant()) return 0;
    const double t = (v - lo) / (hi - lo) * kHistogramBins;
    return static_cast<std::size_t>(std::clamp(t, 0.0, static_cast<double>(kHistogramBins - 1)));
  }
};

/// Per-band histograms of a reference image.
using ReferenceHistograms = std::vector<BandHistogram>;

inline ReferenceHistograms band_histograms(const Chip& chip) {
  ReferenceHistograms out;
  for (int b = 0; b < chip.bands(); ++b) out.push_back(BandHistogram::from_values(chip.pixels.channel(b)));
  return out;
}

namespace detail {

struct CumulativeHistogram {
  const BandHistogram* hist;
  std::vector<double> edges_cum;  // cumulative count at each bin edge, kHistogramBins + 1 entries

  explicit CumulativeHistogram(const BandHistogram& h) : hist(&h), edges_cum(kHistogramBins + 1, 0.0) {
    for (int i = 0; i < kHistogramBins; ++i) edges_cum[i + 1] = edges_cum[i] + h.counts[i];
  }

  double cdf(double v) const noexcept {
    const BandHistogram& h = *hist;
    if (h.constant()) return 0.5;
    if (v <= h.lo) return 0.0;
    if (v >= h.hi) return 1.0;
    const double t = (v - h.lo) / (h.hi - h.lo) * kHistogramBins;
    const auto k = std::min<std::size_t>(static_cast<std::size_t>(t), kHistogramBins - 1);
    return (edges_cum[k] + (t - static_cast<double>(k)) * h.counts[k]) / h.total;
  }

  /// Smallest value whose CDF reaches u, linear inside a bin.
  double inverse(double u) const noexcept {
    const BandHistogram& h = *hist;
    if (h.constant()) return h.lo;
    const double target = std::clamp(u, 0.0, 1.0) * h.total;
    auto it = std::lower_bound(edges_cum.begin() + 1, edges_cum.end(), target);
    std::size_t k = static_cast<std::size_t>(it - edges_cum.begin()) - 1;
    k = std::min<std::size_t>(k, kHistogramBins - 1);
    const double c = h.counts[k];
    const double frac = c > 0 ? (target - edges_cum[k]) / c : 0.0;
    return h.lo + (static_cast<double>(k) + std::clamp(frac, 0.0, 1.0)) * h.bin_width();
  }
};

}  // namespace detail

/// Monotone per-band CDF matching of chip onto reference distributions.
inline Chip histogram_match(const Chip& chip, const ReferenceHistograms& reference) {
  if (static_cast<int>(reference.size()) != chip.bands())
    throw DimensionError("histogram_match: reference has " + std::to_string(reference.size()) + " bands, chip has " +
                         std::to_string(chip.bands()));
  Chip out = chip;
  for (int b = 0; b < chip.bands(); ++b) {
    const BandHistogram src_hist = BandHistogram::from_values(chip.pixels.channel(b));
    const detail::CumulativeHistogram src(src_hist);
    const detail::CumulativeHistogram ref(reference[b]);
    auto in = chip.pixels.channel(b);
    auto dst = out.pixels.channel(b);
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (reference[b].constant()) {
        dst[i] = static_cast<float>(reference[b].lo);
        continue;
      }
      dst[i] = static_cast<float>(ref.inverse(src.cdf(in[i])));
    }
  }
  return out;
}

inline Chip histogram_match(const Chip& chip, const Chip& reference) {
  if (reference.bands() != chip.bands())
    throw DimensionError("histogram_match: band count mismatch (" + std::to_string(chip.bands()) + " vs " +
                         std::to_string(reference.bands()) + ")");
  return histogram_match(chip, band_histograms(reference));
}

}  // namespace fieldshift
