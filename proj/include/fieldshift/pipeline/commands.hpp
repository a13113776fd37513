#pragma once

// The five workflow commands. Each writes into a staging directory that is
// renamed onto the output directory only after every file and the manifest
// are complete.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fieldshift/core/error.hpp"
#include "fieldshift/core/parallel.hpp"
#include "fieldshift/core/rng.hpp"
#include "fieldshift/evaluation.hpp"
#include "fieldshift/io/container.hpp"
#include "fieldshift/io/files.hpp"
#include "fieldshift/io/png.hpp"
#include "fieldshift/mc_inference.hpp"
#include "fieldshift/pipeline/config.hpp"
#include "fieldshift/pipeline/train.hpp"
#include "fieldshift/scene_sim.hpp"

namespace fieldshift::pipeline {

namespace fs = std::filesystem;

inline constexpr int kManifestVersion = 1;

class Stopwatch {
 public:
  void lap(const std::string& name) {
    const auto now = std::chrono::steady_clock::now();
    times_[name] = std::chrono::duration<double>(now - last_).count();
    last_ = now;
  }
  json to_json() const { return json(times_); }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
  std::map<std::string, double> times_;
};

/// Staging directory next to the final output. Every file recorded through
/// `file()` is digested into the manifest on commit.
class OutputStage {
 public:
  explicit OutputStage(fs::path final_dir) : final_(std::move(final_dir)) {
    if (final_.empty()) throw ConfigError("an output directory is required (--out)");
    if (fs::exists(final_) && !fs::is_empty(final_) && !fs::exists(final_ / "manifest.json"))
      throw InputError("refusing to replace " + final_.string() + ": it exists and holds no manifest.json");
    stage_ = final_;
    stage_ += ".staging-" + std::to_string(::getpid());
    fs::remove_all(stage_);
    fs::create_directories(stage_);
  }
  OutputStage(const OutputStage&) = delete;
  OutputStage& operator=(const OutputStage&) = delete;
  ~OutputStage() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(stage_, ec);
    }
  }

  /// Absolute staging path for `rel`, with parent directories created.
  fs::path file(const std::string& rel) {
    const fs::path p = stage_ / rel;
    fs::create_directories(p.parent_path());
    outputs_.push_back(rel);
    return p;
  }

  void add_input(const fs::path& p) { inputs_.push_back(p); }

  json digests() const {
    json out = json::array();
    std::vector<std::string> sorted = outputs_;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    for (const auto& rel : sorted) out.push_back({{"path", rel}, {"sha256", io::sha256_file(stage_ / rel)}});
    return out;
  }

  json input_digests() const {
    json out = json::array();
    for (const auto& p : inputs_) out.push_back({{"path", p.generic_string()}, {"sha256", io::sha256_file(p)}});
    return out;
  }

  const fs::path& final_dir() const noexcept { return final_; }

  json commit(const std::string& command, const RunConfig& cfg, json extra, const Stopwatch& timings) {
    json m = std::move(extra);
    m["manifest_version"] = kManifestVersion;
    m["command"] = command;
    m["tool_version"] = kToolVersion;
    m["config"] = to_json(cfg);
    m["inputs"] = input_digests();
    m["outputs"] = digests();
    m["sidecars"] = json::array({"timings.json"});
    io::write_atomic(stage_ / "manifest.json", m.dump(2) + "\n");
    json t = {{"threads", thread_cap()}, {"seconds", timings.to_json()}};
    io::write_atomic(stage_ / "timings.json", t.dump(2) + "\n");
    fs::path old;
    if (fs::exists(final_)) {
      old = final_;
      old += ".old-" + std::to_string(::getpid());
      fs::rename(final_, old);
    }
    fs::rename(stage_, final_);
    committed_ = true;
    if (!old.empty()) fs::remove_all(old);
    return m;
  }

 private:
  fs::path final_, stage_;
  std::vector<std::string> outputs_;
  std::vector<fs::path> inputs_;
  bool committed_ = false;
};

// ---------------------------------------------------------------- scenes

struct SceneSplit {
  std::vector<std::string> years;
  std::vector<Chip> imagery;
  std::vector<LabelMask> labels;
};

inline std::uint64_t scene_seed(std::uint64_t seed, bool eval_split) {
  return eval_split ? derive_seed(seed, {stream_tag("scene"), stream_tag("eval")}) : derive_seed(seed, {stream_tag("scene")});
}

inline SceneConfig split_config(const RunConfig& cfg, std::uint64_t seed, bool eval_split) {
  SceneConfig sc = cfg.scene;
  if (eval_split) sc.scene_size_px = cfg.eval_scene_size_px;
  sc.seed = scene_seed(seed, eval_split);
  return sc;
}

inline SceneSplit to_split(const Scene& scene, int boundary_thickness) {
  SceneSplit s;
  for (std::size_t k = 0; k < scene.years.size(); ++k) {
    s.years.push_back(scene.years[k].year_tag);
    Chip img = scene.years[k].imagery;
    img.info.year = scene.years[k].year_tag;
    img.info.tile_id = "scene";
    s.imagery.push_back(std::move(img));
    s.labels.push_back(scene_labels(scene, k, boundary_thickness));
  }
  return s;
}

inline json polygons_json(const SceneYear& y) {
  json out = json::array();
  for (std::size_t i = 0; i < y.polygons.size(); ++i) {
    json pts = json::array();
    for (const auto& p : y.polygons[i]) pts.push_back({p.x, p.y});
    out.push_back({{"cell", y.field_cells.at(i)}, {"points", pts}});
  }
  return out;
}

inline const char* split_name(bool eval_split) { return eval_split ? "eval" : "train"; }

inline void write_split(OutputStage& stage, const std::string& prefix, const Scene& scene, const SceneSplit& split) {
  for (std::size_t k = 0; k < split.years.size(); ++k) {
    const std::string dir = prefix + split.years[k] + "/";
    io::write_chip(stage.file(dir + "imagery.fsch"), split.imagery[k]);
    io::write_mask(stage.file(dir + "labels.fsmk"), split.labels[k], {{"year", split.years[k]}});
    io::write_mask_png(stage.file(dir + "labels.png"), split.labels[k]);
    io::write_atomic(stage.file(dir + "polygons.json"), polygons_json(scene.years[k]).dump() + "\n");
  }
}

inline SceneSplit read_split(const fs::path& scene_dir, bool eval_split, const RunConfig& cfg, OutputStage* stage) {
  SceneSplit s;
  for (const auto& y : cfg.scene.years) {
    const fs::path dir = scene_dir / split_name(eval_split) / y.year_tag;
    s.years.push_back(y.year_tag);
    s.imagery.push_back(io::read_chip(dir / "imagery.fsch"));
    s.labels.push_back(io::read_mask(dir / "labels.fsmk"));
    if (stage) {
      stage->add_input(dir / "imagery.fsch");
      stage->add_input(dir / "labels.fsmk");
    }
  }
  return s;
}

/// The scene directory must have been simulated from the same scene block.
inline void check_scene_dir(const fs::path& scene_dir, const RunConfig& cfg, OutputStage* stage) {
  if (scene_dir.empty()) throw ConfigError("config: paths.scene is required");
  const fs::path mpath = scene_dir / "manifest.json";
  json m;
  try {
    m = json::parse(io::read_text(mpath));
  } catch (const json::exception& e) {
    throw InputError(mpath.string() + ": " + e.what());
  }
  const json mine = to_json(cfg);
  const json& theirs = m.at("config");
  for (const char* key : {"scene", "eval_scene_size_px", "labels"})
    if (theirs.at(key) != mine.at(key))
      throw ConfigError("config: '" + std::string(key) + "' differs from the one the scene directory was simulated with");
  if (stage) stage->add_input(mpath);
}

// ---------------------------------------------------------------- stats

inline json stats_to_json(const NormStats& s) {
  if (s.empty()) return nullptr;
  return {{"scope", s.scope == BandScope::AllBands ? "ab" : "pb"},
          {"min", s.min},
          {"max", s.max},
          {"mean", s.mean},
          {"std", s.std},
          {"p_low", s.p_low},
          {"p_high", s.p_high},
          {"sample_count", s.sample_count}};
}

inline NormStats stats_from_json(const json& j) {
  NormStats s;
  if (j.is_null()) return s;
  s.scope = j.at("scope").get<std::string>() == "ab" ? BandScope::AllBands : BandScope::PerBand;
  s.min = j.at("min").get<std::vector<double>>();
  s.max = j.at("max").get<std::vector<double>>();
  s.mean = j.at("mean").get<std::vector<double>>();
  s.std = j.at("std").get<std::vector<double>>();
  s.p_low = j.at("p_low").get<std::vector<double>>();
  s.p_high = j.at("p_high").get<std::vector<double>>();
  s.sample_count = j.at("sample_count").get<std::uint64_t>();
  return s;
}

// ---------------------------------------------------------------- stages

inline TrainResult train_on_split(const RunConfig& cfg, const SceneSplit& train_split, std::uint64_t seed) {
  const auto k = static_cast<std::size_t>(cfg.chips.train_year);
  auto samples = cut_chips(train_split.imagery.at(k), train_split.labels.at(k), cfg.chips.chip_size, cfg.chips.overlap, k,
                           cfg.arch.downsample_factor());
  auto [train, val] = split_dataset(samples, cfg.chips.validation_every);
  return train_model(cfg, train, val, seed);
}

struct YearPrediction {
  std::string year;
  McEnsembleOutput ensemble;
  LabelMask fixed;  // the mean probabilities hardened at cfg.fixed_threshold
};

inline YearPrediction predict_year(const RunConfig& cfg, const NetworkParams<float>& params, const NormStats& stats,
                                   const SceneSplit& split, std::size_t k, std::uint64_t seed) {
  McConfig mc = cfg.mc;
  mc.seed = derive_seed(seed, {stream_tag("predict"), k});
  const NormScheme scheme = cfg.normalization;
  const std::function<void(Tensor<float>&)> prepare = [&](Tensor<float>& window) {
    Chip c;
    c.pixels = std::move(window);
    window = prepare_input(c, scheme, stats);
  };
  YearPrediction yp;
  yp.year = split.years[k];
  yp.ensemble = predict_scene(params, split.imagery[k].pixels, cfg.tiles, mc, prepare);
  yp.fixed = harden(yp.ensemble.mean_probs, ThresholdPolicy::fixed(cfg.fixed_threshold)).mask;
  return yp;
}

/// One row per tile core of a tile_size grid.
inline std::vector<EvalRow> tile_rows(const std::string& run_id, const std::string& scheme, const std::string& year,
                                      const LabelMask& pred, const LabelMask& ref, int tile_size, BoundaryMode mode) {
  require_same_dims(pred, ref, "evaluate");
  if (ref.height % tile_size != 0 || ref.width % tile_size != 0)
    throw DimensionError("evaluate: mask is not a whole number of tiles");
  const int rows = ref.height / tile_size, cols = ref.width / tile_size;
  std::vector<ConfusionCounts> counts(static_cast<std::size_t>(rows) * cols);
  for (int y = 0; y < ref.height; ++y)
    for (int x = 0; x < ref.width; ++x) {
      auto& c = counts[static_cast<std::size_t>(y / tile_size) * cols + x / tile_size];
      switch (classify_pixel(pred(y, x), ref(y, x), mode)) {
        case kCatTP: ++c.tp; break;
        case kCatFP: ++c.fp; break;
        case kCatFN: ++c.fn; break;
        case kCatTN: ++c.tn; break;
        default: ++c.ignore_count; break;
      }
    }
  std::vector<EvalRow> out;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out.push_back({run_id, scheme, year, "r" + std::to_string(r) + "c" + std::to_string(c),
                     counts[static_cast<std::size_t>(r) * cols + c]});
  return out;
}

inline void write_reports(OutputStage& stage, const std::string& prefix, std::span<const EvalRow> rows, const std::string& suffix,
                          bool by_tile) {
  io::write_atomic(stage.file(prefix + "rows" + suffix + ".csv"), rows_csv(rows));
  io::write_atomic(stage.file(prefix + "by_run" + suffix + ".csv"), report_csv(rows, GroupBy::Run));
  io::write_atomic(stage.file(prefix + "by_year" + suffix + ".csv"), report_csv(rows, GroupBy::Year));
  if (by_tile) io::write_atomic(stage.file(prefix + "by_tile" + suffix + ".csv"), report_csv(rows, GroupBy::Tile));
}

inline json threshold_json(double t) { return std::isfinite(t) ? json(t) : json(nullptr); }

// ---------------------------------------------------------------- commands

inline json cmd_simulate(const RunConfig& cfg, const fs::path& out) {
  const std::uint64_t seed = cfg.require_seed();
  Stopwatch sw;
  OutputStage stage(out);
  json extra;
  for (bool eval_split : {false, true}) {
    const Scene scene = generate_scene(split_config(cfg, seed, eval_split));
    const SceneSplit split = to_split(scene, cfg.boundary_thickness_px);
    write_split(stage, std::string(split_name(eval_split)) + "/", scene, split);
    extra["splits"][split_name(eval_split)] = {{"scene_size_px", scene.config.scene_size_px},
                                               {"field_cells", scene.cell_count},
                                               {"years", split.years}};
    sw.lap(std::string("simulate_") + split_name(eval_split));
  }
  return stage.commit("simulate", cfg, extra, sw);
}

inline json cmd_train(const RunConfig& cfg, const fs::path& out) {
  const std::uint64_t seed = cfg.require_seed();
  Stopwatch sw;
  OutputStage stage(out);
  const fs::path scene_dir = cfg.paths.scene;
  check_scene_dir(scene_dir, cfg, &stage);
  const SceneSplit split = read_split(scene_dir, false, cfg, &stage);
  sw.lap("load");
  const TrainResult tr = train_on_split(cfg, split, seed);
  sw.lap("train");
  const json stats = stats_to_json(tr.stats);
  io::write_checkpoint(stage.file("checkpoint.fsnw"), tr.params,
                       {{"norm_scheme", cfg.normalization.code()}, {"norm_stats", stats}, {"best_epoch", tr.best_epoch},
                        {"seed", seed}, {"tool_version", kToolVersion}});
  io::write_atomic(stage.file("training_log.csv"), log_csv(tr.log));
  json extra = {{"norm_stats", stats}, {"best_epoch", tr.best_epoch}, {"parameter_count", tr.params.values.size()}};
  if (!tr.log.empty()) extra["best_val_iou"] = tr.log[static_cast<std::size_t>(std::max(0, tr.best_epoch))].val.iou;
  return stage.commit("train", cfg, extra, sw);
}

struct LoadedCheckpoint {
  NetworkParams<float> params;
  NormStats stats;
};

inline LoadedCheckpoint load_checkpoint_for(const RunConfig& cfg, const fs::path& path) {
  if (path.empty()) throw ConfigError("config: paths.checkpoint is required");
  json h;
  LoadedCheckpoint lc;
  lc.params = io::read_checkpoint(path, &h);
  if (io::arch_to_json(lc.params.arch) != io::arch_to_json(cfg.arch))
    throw CheckpointError(path.string() + ": architecture does not match the config");
  if (h.value("norm_scheme", std::string()) != cfg.normalization.code())
    throw CheckpointError(path.string() + ": trained with normalization '" + h.value("norm_scheme", std::string()) +
                          "', config asks for '" + cfg.normalization.code() + "'");
  try {
    lc.stats = stats_from_json(h.value("norm_stats", json(nullptr)));
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": bad norm_stats block: " + e.what());
  }
  if (cfg.normalization.locality == NormLocality::Global && lc.stats.empty())
    throw CheckpointError(path.string() + ": global normalization needs frozen statistics");
  return lc;
}

inline json cmd_predict(const RunConfig& cfg, const fs::path& out) {
  const std::uint64_t seed = cfg.require_seed();
  Stopwatch sw;
  OutputStage stage(out);
  const LoadedCheckpoint ck = load_checkpoint_for(cfg, cfg.paths.checkpoint);
  stage.add_input(cfg.paths.checkpoint);
  const fs::path scene_dir = cfg.paths.scene;
  check_scene_dir(scene_dir, cfg, &stage);
  const SceneSplit split = read_split(scene_dir, true, cfg, &stage);
  sw.lap("load");
  json years = json::object();
  for (std::size_t k = 0; k < split.years.size(); ++k) {
    const YearPrediction yp = predict_year(cfg, ck.params, ck.stats, split, k, seed);
    const auto& e = yp.ensemble;
    const std::string dir = yp.year + "/";
    const json h = {{"year", yp.year}, {"trials", e.trials}};
    io::write_raster(stage.file(dir + "mean.fsch"), e.mean_probs, h);
    io::write_raster(stage.file(dir + "std.fsch"), e.std_probs, h);
    io::write_raster(stage.file(dir + "entropy.fsch"), e.entropy, h);
    io::write_raster(stage.file(dir + "mi.fsch"), e.mutual_info, h);
    io::write_mask(stage.file(dir + "hardened.fsmk"), e.hardened,
                   {{"year", yp.year}, {"threshold", threshold_json(e.threshold_used)}, {"policy", to_string(cfg.mc.policy.kind)}});
    io::write_mask(stage.file(dir + "hardened_fixed.fsmk"), yp.fixed,
                   {{"year", yp.year}, {"threshold", cfg.fixed_threshold}, {"policy", "fixed"}});
    io::write_probability_png(stage.file(dir + "mean_interior.png"), e.mean_probs.channel(kInterior), e.mean_probs.width,
                              e.mean_probs.height);
    io::write_mask_png(stage.file(dir + "hardened.png"), e.hardened);
    years[yp.year] = {{"threshold", threshold_json(e.threshold_used)},
                      {"threshold_fallback", e.threshold_fallback},
                      {"probability_range", e.probability_range},
                      {"trials", e.trials}};
    sw.lap("predict_" + yp.year);
  }
  return stage.commit("predict", cfg, {{"years", years}}, sw);
}

inline json cmd_evaluate(const RunConfig& cfg, const fs::path& out) {
  Stopwatch sw;
  OutputStage stage(out);
  const fs::path scene_dir = cfg.paths.scene, pred_dir = cfg.paths.predictions;
  if (pred_dir.empty()) throw ConfigError("config: paths.predictions is required");
  check_scene_dir(scene_dir, cfg, &stage);
  std::vector<EvalRow> rows, rows_fixed;
  for (const auto& y : cfg.scene.years) {
    const fs::path ref_path = scene_dir / "eval" / y.year_tag / "labels.fsmk";
    const fs::path pred_path = pred_dir / y.year_tag / "hardened.fsmk";
    const fs::path fixed_path = pred_dir / y.year_tag / "hardened_fixed.fsmk";
    const LabelMask ref = io::read_mask(ref_path), pred = io::read_mask(pred_path), fixed = io::read_mask(fixed_path);
    for (const auto& p : {ref_path, pred_path, fixed_path}) stage.add_input(p);
    for (auto& r : tile_rows(cfg.run_id, cfg.normalization.code(), y.year_tag, pred, ref, cfg.tiles.core_size, cfg.boundary_mode))
      rows.push_back(std::move(r));
    for (auto& r : tile_rows(cfg.run_id, cfg.normalization.code(), y.year_tag, fixed, ref, cfg.tiles.core_size, cfg.boundary_mode))
      rows_fixed.push_back(std::move(r));
    io::write_confusion_png(stage.file("confusion/" + y.year_tag + ".png"), spatial_confusion(pred, ref, cfg.boundary_mode));
  }
  write_reports(stage, "", rows, "", true);
  write_reports(stage, "", rows_fixed, "_fixed", true);
  sw.lap("evaluate");
  return stage.commit("evaluate", cfg, json::object(), sw);
}

// ---------------------------------------------------------------- ablation

struct AblationCell {
  std::string name;
  RunConfig config;
};

struct CellResult {
  std::string name;
  bool ok = false;
  std::string error;
  std::vector<EvalRow> rows;        // the config's own hardening policy
  std::vector<EvalRow> rows_fixed;  // fixed threshold on the same ensembles
  std::vector<double> thresholds;   // per year, NaN under argmax
  int best_epoch = -1;
};

struct AblationResult {
  std::vector<CellResult> cells;
  bool partial = false;
};

/// Cells are {"name": ..., "config": <merge patch onto the base config>}.
inline std::vector<AblationCell> ablation_cells(const RunConfig& base) {
  if (!base.ablation.contains("cells") || !base.ablation.at("cells").is_array() || base.ablation.at("cells").empty())
    throw ConfigError("config: ablation.cells must be a nonempty array");
  json base_doc = to_json(base);
  base_doc.erase("ablation");
  std::vector<AblationCell> out;
  for (const auto& cell : base.ablation.at("cells")) {
    if (!cell.is_object() || !cell.contains("name") || !cell.at("name").is_string())
      throw ConfigError("config: every ablation cell needs a string 'name'");
    const std::string name = cell.at("name").get<std::string>();
    for (const auto& c : out)
      if (c.name == name) throw ConfigError("config: duplicate ablation cell '" + name + "'");
    for (auto it = cell.begin(); it != cell.end(); ++it)
      if (it.key() != "name" && it.key() != "config") throw ConfigError("config: unknown key '" + it.key() + "' in ablation cell");
    json doc = base_doc;
    if (cell.contains("config")) {
      const json& patch = cell.at("config");
      if (!patch.is_object()) throw ConfigError("config: ablation cell '" + name + "' config must be an object");
      for (const char* key : {"scene", "eval_scene_size_px", "labels", "seed", "ablation", "preset", "paths"})
        if (patch.contains(key)) throw ConfigError("config: ablation cell '" + name + "' may not override '" + key + "'");
      doc.merge_patch(patch);
    }
    doc["run_id"] = name;
    AblationCell c{name, parse_config(doc)};
    out.push_back(std::move(c));
  }
  return out;
}

/// Config blocks that influence training; cells agreeing on all of them
/// share one trained network.
inline std::string training_key(const RunConfig& cfg) {
  json j = to_json(cfg);
  for (const char* key : {"run_id", "mc", "tiles", "evaluation", "paths", "ablation"}) j.erase(key);
  return j.dump();
}

/// Trains, predicts and evaluates every cell on one shared simulated scene.
/// When `stage` is set, per-cell checkpoints, logs and confusion PNGs are
/// written under cells/<name>/.
inline AblationResult run_ablation(const RunConfig& base, std::uint64_t seed, OutputStage* stage = nullptr,
                                   Stopwatch* sw = nullptr) {
  const auto cells = ablation_cells(base);
  const Scene train_scene = generate_scene(split_config(base, seed, false));
  const Scene eval_scene = generate_scene(split_config(base, seed, true));
  const SceneSplit train_split = to_split(train_scene, base.boundary_thickness_px);
  const SceneSplit eval_split = to_split(eval_scene, base.boundary_thickness_px);
  if (stage) {
    write_split(*stage, "scene/train/", train_scene, train_split);
    write_split(*stage, "scene/eval/", eval_scene, eval_split);
  }
  if (sw) sw->lap("simulate");

  std::map<std::string, std::shared_ptr<const TrainResult>> trained;
  AblationResult result;
  for (const auto& cell : cells) {
    CellResult cr;
    cr.name = cell.name;
    const RunConfig& cfg = cell.config;
    try {
      const std::string key = training_key(cfg);
      auto it = trained.find(key);
      if (it == trained.end()) it = trained.emplace(key, std::make_shared<const TrainResult>(train_on_split(cfg, train_split, seed))).first;
      const TrainResult& tr = *it->second;
      cr.best_epoch = tr.best_epoch;
      const std::string dir = "cells/" + cell.name + "/";
      if (stage) {
        io::write_checkpoint(stage->file(dir + "checkpoint.fsnw"), tr.params,
                             {{"norm_scheme", cfg.normalization.code()}, {"norm_stats", stats_to_json(tr.stats)},
                              {"best_epoch", tr.best_epoch}, {"seed", seed}, {"tool_version", kToolVersion}});
        io::write_atomic(stage->file(dir + "training_log.csv"), log_csv(tr.log));
      }
      for (std::size_t k = 0; k < eval_split.years.size(); ++k) {
        const YearPrediction yp = predict_year(cfg, tr.params, tr.stats, eval_split, k, seed);
        const LabelMask& ref = eval_split.labels[k];
        for (auto& r : tile_rows(cell.name, cfg.normalization.code(), yp.year, yp.ensemble.hardened, ref, cfg.tiles.core_size,
                                 cfg.boundary_mode))
          cr.rows.push_back(std::move(r));
        for (auto& r : tile_rows(cell.name, cfg.normalization.code(), yp.year, yp.fixed, ref, cfg.tiles.core_size, cfg.boundary_mode))
          cr.rows_fixed.push_back(std::move(r));
        cr.thresholds.push_back(yp.ensemble.threshold_used);
        if (stage)
          io::write_confusion_png(stage->file(dir + "confusion_" + yp.year + ".png"),
                                  spatial_confusion(yp.ensemble.hardened, ref, cfg.boundary_mode));
      }
      cr.ok = true;
    } catch (const Error& e) {
      cr.ok = false;
      cr.error = std::string(e.category()) + ": " + e.what();
      cr.rows.clear();
      cr.rows_fixed.clear();
      result.partial = true;
    }
    if (sw) sw->lap("cell_" + cell.name);
    result.cells.push_back(std::move(cr));
  }
  return result;
}

inline json cmd_ablate(const RunConfig& cfg, const fs::path& out) {
  const std::uint64_t seed = cfg.require_seed();
  Stopwatch sw;
  OutputStage stage(out);
  const AblationResult res = run_ablation(cfg, seed, &stage, &sw);
  std::vector<EvalRow> rows, rows_fixed;
  json cells = json::array();
  for (const auto& c : res.cells) {
    rows.insert(rows.end(), c.rows.begin(), c.rows.end());
    rows_fixed.insert(rows_fixed.end(), c.rows_fixed.begin(), c.rows_fixed.end());
    json th = json::array();
    for (double t : c.thresholds) th.push_back(threshold_json(t));
    cells.push_back({{"name", c.name}, {"status", c.ok ? "ok" : "failed"}, {"error", c.error},
                     {"best_epoch", c.best_epoch}, {"thresholds", th}});
  }
  if (!rows.empty()) {
    write_reports(stage, "", rows, "", false);
    write_reports(stage, "", rows_fixed, "_fixed", false);
  }
  io::write_atomic(stage.file("cells.json"), json{{"cells", cells}, {"partial", res.partial}}.dump(2) + "\n");
  sw.lap("report");
  return stage.commit("ablate", cfg, {{"partial", res.partial}}, sw);
}

}  // namespace fieldshift::pipeline
