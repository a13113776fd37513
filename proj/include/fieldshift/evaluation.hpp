#pragma once

// Field-interior vs rest confusion counts, the four overlap metrics, spatial
// confusion rasters, and grouped CSV reports.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fieldshift/core/error.hpp"
#include "fieldshift/core/raster.hpp"

namespace fieldshift {

/// How reference boundary pixels are scored.
enum class BoundaryMode { Negative, Ignore };

struct ConfusionCounts {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0, ignore_count = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    ignore_count += o.ignore_count;
    return *this;
  }
  std::int64_t total() const noexcept { return tp + fp + fn + tn + ignore_count; }
  bool operator==(const ConfusionCounts&) const = default;
};

inline ConfusionCounts operator+(ConfusionCounts a, const ConfusionCounts& b) { return a += b; }

enum ConfusionCategory : std::uint8_t { kCatTP = 0, kCatFP = 1, kCatFN = 2, kCatTN = 3, kCatIgnore = 4 };

inline bool ignored_reference(std::uint8_t ref, BoundaryMode mode) {
  return ref == kIgnore || (mode == BoundaryMode::Ignore && ref == kBoundary);
}

inline ConfusionCategory classify_pixel(std::uint8_t pred, std::uint8_t ref, BoundaryMode mode) {
  if (ignored_reference(ref, mode)) return kCatIgnore;
  const bool p = pred == kInterior, r = ref == kInterior;
  if (p) return r ? kCatTP : kCatFP;
  return r ? kCatFN : kCatTN;
}

inline ConfusionCounts confusion_counts(const LabelMask& pred, const LabelMask& ref,
                                        BoundaryMode mode = BoundaryMode::Negative) {
  require_same_dims(pred, ref, "confusion_counts");
  ConfusionCounts c;
  for (std::size_t i = 0; i < ref.data.size(); ++i) {
    switch (classify_pixel(pred.data[i], ref.data[i], mode)) {
      case kCatTP: ++c.tp; break;
      case kCatFP: ++c.fp; break;
      case kCatFN: ++c.fn; break;
      case kCatTN: ++c.tn; break;
      default: ++c.ignore_count; break;
    }
  }
  return c;
}

struct MetricRow {
  double precision = 0.0, recall = 0.0, f1 = 0.0, iou = 0.0;
  bool degenerate = false;
};

/// Empty denominators: precision is 1 when nothing was claimed and nothing
/// was missed (else 0), recall likewise with fp; IoU and F1 are 1 when
/// tp = fp = fn = 0. Any such case sets `degenerate`.
inline MetricRow metrics(const ConfusionCounts& c) {
  MetricRow m;
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  if (c.tp + c.fp == 0) {
    m.precision = c.fn == 0 ? 1.0 : 0.0;
    m.degenerate = true;
  } else {
    m.precision = tp / (tp + fp);
  }
  if (c.tp + c.fn == 0) {
    m.recall = c.fp == 0 ? 1.0 : 0.0;
    m.degenerate = true;
  } else {
    m.recall = tp / (tp + fn);
  }
  if (c.tp + c.fp + c.fn == 0) {
    m.f1 = m.iou = 1.0;
  } else {
    m.f1 = 2.0 * tp / (2.0 * tp + fp + fn);
    m.iou = tp / (tp + fp + fn);
  }
  return m;
}

struct CategoryRaster {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;
};

inline CategoryRaster spatial_confusion(const LabelMask& pred, const LabelMask& ref,
                                        BoundaryMode mode = BoundaryMode::Negative) {
  require_same_dims(pred, ref, "spatial_confusion");
  CategoryRaster r{ref.height, ref.width, std::vector<std::uint8_t>(ref.data.size())};
  for (std::size_t i = 0; i < ref.data.size(); ++i) r.data[i] = classify_pixel(pred.data[i], ref.data[i], mode);
  return r;
}

inline ConfusionCounts category_counts(const CategoryRaster& r) {
  ConfusionCounts c;
  for (auto v : r.data) {
    switch (v) {
      case kCatTP: ++c.tp; break;
      case kCatFP: ++c.fp; break;
      case kCatFN: ++c.fn; break;
      case kCatTN: ++c.tn; break;
      default: ++c.ignore_count; break;
    }
  }
  return c;
}

using Rgb = std::array<std::uint8_t, 3>;

/// Indexed by ConfusionCategory.
inline constexpr std::array<Rgb, 5> kConfusionPalette{{
    {0, 255, 0},      // TP green
    {255, 0, 0},      // FP red
    {0, 0, 255},      // FN blue
    {211, 211, 211},  // TN light gray
    {255, 255, 255},  // ignore white
}};

/// Indexed by class code; index 3 is used for the ignore code.
inline constexpr std::array<Rgb, 4> kMaskPalette{{
    {255, 255, 255},  // background white
    {0, 255, 0},      // interior green
    {0, 0, 0},        // boundary black
    {128, 128, 128},  // ignore gray
}};

struct EvalRow {
  std::string run_id;
  std::string norm_scheme;
  std::string year;
  std::string tile_id;
  ConfusionCounts counts;
};

enum class GroupBy { Run, Year, Tile };

namespace detail {

inline std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

template <typename Key>
std::vector<std::string> first_seen(std::span<const EvalRow> rows, Key key) {
  std::vector<std::string> out;
  for (const auto& r : rows)
    if (std::find(out.begin(), out.end(), key(r)) == out.end()) out.push_back(key(r));
  return out;
}

/// "best" / "second" flags for a column; ties share a flag.
inline std::vector<std::string> rank_flags(const std::vector<double>& v) {
  std::vector<double> distinct(v);
  std::sort(distinct.begin(), distinct.end(), std::greater<>());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::vector<std::string> flags(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!distinct.empty() && v[i] == distinct[0]) flags[i] = "best";
    else if (distinct.size() > 1 && v[i] == distinct[1]) flags[i] = "second";
  }
  return flags;
}

inline double metric_value(const MetricRow& m, const std::string& name) {
  if (name == "precision") return m.precision;
  if (name == "recall") return m.recall;
  if (name == "f1") return m.f1;
  return m.iou;
}

}  // namespace detail

/// One line per (run, year, tile) row.
inline std::string rows_csv(std::span<const EvalRow> rows) {
  if (rows.empty()) throw InputError("report: no rows to report");
  std::ostringstream os;
  os << "run_id,norm_scheme,year,tile_id,tp,fp,fn,tn,precision,recall,f1,iou,degenerate_flag\n";
  for (const auto& r : rows) {
    const auto m = metrics(r.counts);
    os << r.run_id << ',' << r.norm_scheme << ',' << r.year << ',' << r.tile_id << ',' << r.counts.tp << ','
       << r.counts.fp << ',' << r.counts.fn << ',' << r.counts.tn << ',' << detail::fmt6(m.precision) << ','
       << detail::fmt6(m.recall) << ',' << detail::fmt6(m.f1) << ',' << detail::fmt6(m.iou) << ','
       << (m.degenerate ? 1 : 0) << '\n';
  }
  return os.str();
}

/// Grouped tables. By run: one micro-averaged row per run (macro F1/IoU over
/// its rows alongside), best and second-best flagged per metric. By year or
/// tile: a run x {iou, f1} by column pivot, plus an "all" column, each
/// column flagged.
inline std::string report_csv(std::span<const EvalRow> rows, GroupBy group) {
  if (rows.empty()) throw InputError("report: no rows to report");
  const auto runs = detail::first_seen(rows, [](const EvalRow& r) { return r.run_id; });
  auto scheme_of = [&](const std::string& run) {
    for (const auto& r : rows)
      if (r.run_id == run) return r.norm_scheme;
    return std::string{};
  };
  std::ostringstream os;
  if (group == GroupBy::Run) {
    std::vector<ConfusionCounts> pooled(runs.size());
    std::vector<MetricRow> micro(runs.size());
    std::vector<double> macro_f1(runs.size(), 0.0), macro_iou(runs.size(), 0.0);
    for (std::size_t k = 0; k < runs.size(); ++k) {
      std::size_t n = 0;
      for (const auto& r : rows)
        if (r.run_id == runs[k]) {
          pooled[k] += r.counts;
          const auto m = metrics(r.counts);
          macro_f1[k] += m.f1;
          macro_iou[k] += m.iou;
          ++n;
        }
      micro[k] = metrics(pooled[k]);
      macro_f1[k] /= static_cast<double>(n);
      macro_iou[k] /= static_cast<double>(n);
    }
    const std::array<std::string, 4> names{"precision", "recall", "f1", "iou"};
    std::array<std::vector<std::string>, 4> flags;
    for (std::size_t j = 0; j < names.size(); ++j) {
      std::vector<double> col;
      for (const auto& m : micro) col.push_back(detail::metric_value(m, names[j]));
      flags[j] = detail::rank_flags(col);
    }
    os << "run_id,norm_scheme,year,tile_id,tp,fp,fn,tn,precision,recall,f1,iou,degenerate_flag,"
          "macro_f1,macro_iou,flag_precision,flag_recall,flag_f1,flag_iou\n";
    for (std::size_t k = 0; k < runs.size(); ++k) {
      const auto& c = pooled[k];
      const auto& m = micro[k];
      os << runs[k] << ',' << scheme_of(runs[k]) << ",all,all," << c.tp << ',' << c.fp << ',' << c.fn << ',' << c.tn
         << ',' << detail::fmt6(m.precision) << ',' << detail::fmt6(m.recall) << ',' << detail::fmt6(m.f1) << ','
         << detail::fmt6(m.iou) << ',' << (m.degenerate ? 1 : 0) << ',' << detail::fmt6(macro_f1[k]) << ','
         << detail::fmt6(macro_iou[k]);
      for (const auto& f : flags) os << ',' << f[k];
      os << '\n';
    }
    return os.str();
  }

  auto key = [group](const EvalRow& r) { return group == GroupBy::Year ? r.year : r.tile_id; };
  auto columns = detail::first_seen(rows, key);
  columns.push_back("all");
  // pooled[run][column]
  std::vector<std::vector<ConfusionCounts>> pooled(runs.size(), std::vector<ConfusionCounts>(columns.size()));
  std::vector<std::vector<bool>> present(runs.size(), std::vector<bool>(columns.size(), false));
  for (const auto& r : rows) {
    const std::size_t k = static_cast<std::size_t>(std::find(runs.begin(), runs.end(), r.run_id) - runs.begin());
    const std::size_t j = static_cast<std::size_t>(std::find(columns.begin(), columns.end(), key(r)) - columns.begin());
    pooled[k][j] += r.counts;
    pooled[k].back() += r.counts;
    present[k][j] = present[k].back() = true;
  }
  os << "run_id,norm_scheme,metric";
  for (const auto& c : columns) os << ',' << c << ',' << c << "_flag";
  os << '\n';
  const std::array<std::string, 2> metric_names{"iou", "f1"};
  // flags[metric][column][run]
  std::array<std::vector<std::vector<std::string>>, 2> flags;
  for (std::size_t m = 0; m < metric_names.size(); ++m)
    for (std::size_t j = 0; j < columns.size(); ++j) {
      std::vector<double> col;
      for (std::size_t k = 0; k < runs.size(); ++k)
        col.push_back(present[k][j] ? detail::metric_value(metrics(pooled[k][j]), metric_names[m]) : -1.0);
      flags[m].push_back(detail::rank_flags(col));
    }
  for (std::size_t k = 0; k < runs.size(); ++k) {
    for (std::size_t m = 0; m < metric_names.size(); ++m) {
      os << runs[k] << ',' << scheme_of(runs[k]) << ',' << metric_names[m];
      for (std::size_t j = 0; j < columns.size(); ++j) {
        if (present[k][j])
          os << ',' << detail::fmt6(detail::metric_value(metrics(pooled[k][j]), metric_names[m])) << ',' << flags[m][j][k];
        else
          os << ",,";
      }
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace fieldshift
