#pragma once

// Run configuration: JSON documents with a `preset` inheritance key,
// resolved by JSON merge-patch onto the named preset, then materialized
// with every default spelled out.

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "fieldshift/augment.hpp"
#include "fieldshift/core/error.hpp"
#include "fieldshift/evaluation.hpp"
#include "fieldshift/io/files.hpp"
#include "fieldshift/losses.hpp"
#include "fieldshift/mc_inference.hpp"
#include "fieldshift/network.hpp"
#include "fieldshift/normalize.hpp"
#include "fieldshift/optim.hpp"
#include "fieldshift/scene_sim.hpp"

namespace fieldshift::pipeline {

using nlohmann::json;

inline constexpr const char* kToolVersion = "0.1.0";

enum class LossKind { Tfl, Ce };
enum class WeightMode { Local, Global, Uniform };

inline std::string to_string(LossKind k) { return k == LossKind::Tfl ? "tfl" : "ce"; }
inline std::string to_string(WeightMode w) {
  switch (w) {
    case WeightMode::Local: return "local";
    case WeightMode::Global: return "global";
    case WeightMode::Uniform: return "uniform";
  }
  return "?";
}

struct LossConfig {
  LossKind kind = LossKind::Tfl;
  TflConfig tfl;
  WeightMode weights = WeightMode::Local;
};

struct ChipConfig {
  int chip_size = 64;
  int overlap = 0;
  int validation_every = 4;  // every k-th chip is held out for validation
  int train_year = 0;
};

struct Paths {
  std::string scene;       // simulate output directory
  std::string checkpoint;  // train output checkpoint file
  std::string predictions; // predict output directory
};

struct RunConfig {
  std::optional<std::uint64_t> seed;
  std::string run_id = "run";  // label of this run in report rows
  SceneConfig scene;
  int eval_scene_size_px = 384;
  int boundary_thickness_px = 2;
  ChipConfig chips;
  NormScheme normalization;
  AugmentConfig augment;
  ArchSpec arch;
  LossConfig loss;
  OptConfig optimizer;
  LrSchedule schedule;
  int batch_size = 8;
  McConfig mc;
  double fixed_threshold = kDefaultThreshold;
  TileScheme tiles;
  BoundaryMode boundary_mode = BoundaryMode::Negative;
  Paths paths;
  json ablation = json::object();

  std::uint64_t require_seed() const {
    if (!seed) throw ConfigError("config: 'seed' is mandatory (set it in the config or pass --seed)");
    return *seed;
  }
};

namespace presets {

inline json desk() {
  return json::parse(R"({
    "run_id": "run",
    "scene": {
      "scene_size_px": 512, "band_count": 4, "field_density": 0.4, "mean_field_diameter_px": 16,
      "churn_fraction": 0.1, "field_gap_px": 1.0, "texture_amplitude": 0.03, "texture_scale_px": 32,
      "field_variation": 0.02, "pixel_texture_sigma": 0.01,
      "background_reflectance": [], "field_reflectance": [],
      "years": [
        {"year_tag": "y1", "band_mean_offset": [0, 0, 0, 0], "band_std_scale": [1, 1, 1, 1],
         "noise_sigma": 0.0, "smoothing_passes": 1},
        {"year_tag": "y2", "band_mean_offset": [-0.01, -0.01, -0.015, 0.05], "band_std_scale": [0.9, 0.9, 0.9, 0.85],
         "noise_sigma": 0.01, "smoothing_passes": 0},
        {"year_tag": "y3", "band_mean_offset": [0.0, -0.005, -0.01, 0.07], "band_std_scale": [0.85, 0.85, 0.85, 0.8],
         "noise_sigma": 0.015, "smoothing_passes": 0}
      ]
    },
    "eval_scene_size_px": 384,
    "labels": {"boundary_thickness_px": 2},
    "chips": {"chip_size": 64, "overlap": 0, "validation_every": 4, "train_year": 0},
    "normalization": {"scheme": "mm-lab", "percentile_clip": false, "clip_low": 0.02, "clip_high": 0.98},
    "augment": {
      "apply_probability": 0.5, "flip_modes": ["horizontal", "vertical", "diagonal"], "rotation_angles": [90, 180, 270],
      "resize_min": 0.8, "resize_max": 1.2, "photometric": true,
      "photometric_modes": ["gamma", "gaussian-noise", "additive", "multiplicative"],
      "gamma_min": 0.7, "gamma_max": 1.4, "noise_sigma": 0.02, "additive_range": 0.1,
      "multiplicative_min": 0.8, "multiplicative_max": 1.2
    },
    "arch": {"depth": 3, "base_width": 8, "in_bands": 4, "classes": 3, "dropout_rate_train": 0.15,
             "dropout_kind": "spatial", "dropout_placement": "all"},
    "loss": {"kind": "tfl", "alpha": 0.65, "beta": 0.35, "gamma": 0.9, "smooth": 1e-6,
             "inverse_gamma": false, "relax_sum": false, "per_sample": false, "weights": "local"},
    "optimizer": {"kind": "nesterov", "inner": "nesterov", "momentum": 0.9, "beta1": 0.9, "beta2": 0.999,
                  "eps": 1e-8, "rho": 0.05},
    "schedule": {"initial_lr": 0.03, "power": 0.8, "epochs": 30},
    "batch_size": 8,
    "mc": {"trials": 10, "inference_dropout_rate": 0.1, "aggregation": "mean", "threshold": "adaptive",
           "fixed_threshold": 0.75},
    "tiles": {"core_size": 64, "input_size": 96},
    "evaluation": {"boundary_mode": "negative"},
    "paths": {"scene": "", "checkpoint": "", "predictions": ""}
  })");
}

/// Full-size architecture and schedule; not trainable on a desk machine.
inline json paper_xl() {
  return json::parse(R"({
    "preset": "desk",
    "scene": {"scene_size_px": 2400},
    "eval_scene_size_px": 4000,
    "chips": {"chip_size": 200, "overlap": 12},
    "arch": {"depth": 5, "base_width": 64},
    "schedule": {"initial_lr": 0.003, "power": 0.8, "epochs": 120},
    "batch_size": 32,
    "tiles": {"core_size": 2000, "input_size": 2368}
  })");
}

inline json paper_final() {
  return json::parse(R"({"preset": "paper-xl", "mc": {"trials": 30}})");
}

inline std::optional<json> find(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper-xl") return paper_xl();
  if (name == "paper-final") return paper_final();
  return std::nullopt;
}

}  // namespace presets

/// Applies preset inheritance: the document is merge-patched onto its
/// (recursively resolved) preset. Documents without a preset inherit desk.
inline json resolve_presets(const json& doc, int depth = 0) {
  if (!doc.is_object()) throw ConfigError("config: top level must be a JSON object");
  if (depth > 8) throw ConfigError("config: preset inheritance is cyclic or too deep");
  const std::string name = doc.value("preset", std::string(depth == 0 ? "desk" : ""));
  json base = json::object();
  if (!name.empty()) {
    auto p = presets::find(name);
    if (!p) throw ConfigError("config: unknown preset '" + name + "'");
    base = name == "desk" ? *p : resolve_presets(*p, depth + 1);
  }
  json patch = doc;
  patch.erase("preset");
  base.merge_patch(patch);
  return base;
}

namespace detail {

template <typename T>
T get(const json& j, const char* key, const std::string& path) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: '" + path + "." + key + "' is missing or has the wrong type");
  }
}

inline json year_to_json(const YearShift& y) {
  return {{"year_tag", y.year_tag},
          {"band_mean_offset", y.band_mean_offset},
          {"band_std_scale", y.band_std_scale},
          {"noise_sigma", y.noise_sigma},
          {"smoothing_passes", y.smoothing_passes}};
}

inline YearShift year_from_json(const json& j) {
  YearShift y;
  y.year_tag = get<std::string>(j, "year_tag", "scene.years[]");
  y.band_mean_offset = get<std::vector<double>>(j, "band_mean_offset", "scene.years[]");
  y.band_std_scale = get<std::vector<double>>(j, "band_std_scale", "scene.years[]");
  y.noise_sigma = get<double>(j, "noise_sigma", "scene.years[]");
  y.smoothing_passes = get<int>(j, "smoothing_passes", "scene.years[]");
  return y;
}

/// Reports keys of `given` that the materialized form does not know about.
inline void check_known_keys(const json& given, const json& known, const std::string& path) {
  if (given.is_object() && known.is_object()) {
    for (auto it = given.begin(); it != given.end(); ++it) {
      if (!known.contains(it.key())) throw ConfigError("config: unknown key '" + path + it.key() + "'");
      if (it.key() == "ablation") continue;
      check_known_keys(it.value(), known.at(it.key()), path + it.key() + ".");
    }
  } else if (given.is_array() && known.is_array() && given.size() == known.size()) {
    for (std::size_t i = 0; i < given.size(); ++i) check_known_keys(given[i], known[i], path);
  }
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  json j;
  if (c.seed) j["seed"] = *c.seed;
  j["run_id"] = c.run_id;
  json years = json::array();
  for (const auto& y : c.scene.years) years.push_back(detail::year_to_json(y));
  j["scene"] = {{"scene_size_px", c.scene.scene_size_px},
                {"band_count", c.scene.band_count},
                {"field_density", c.scene.field_density},
                {"mean_field_diameter_px", c.scene.mean_field_diameter_px},
                {"churn_fraction", c.scene.churn_fraction},
                {"field_gap_px", c.scene.field_gap_px},
                {"texture_amplitude", c.scene.texture_amplitude},
                {"texture_scale_px", c.scene.texture_scale_px},
                {"field_variation", c.scene.field_variation},
                {"pixel_texture_sigma", c.scene.pixel_texture_sigma},
                {"background_reflectance", c.scene.background_reflectance},
                {"field_reflectance", c.scene.field_reflectance},
                {"years", years}};
  j["eval_scene_size_px"] = c.eval_scene_size_px;
  j["labels"] = {{"boundary_thickness_px", c.boundary_thickness_px}};
  j["chips"] = {{"chip_size", c.chips.chip_size},
                {"overlap", c.chips.overlap},
                {"validation_every", c.chips.validation_every},
                {"train_year", c.chips.train_year}};
  j["normalization"] = {{"scheme", c.normalization.code()},
                        {"percentile_clip", c.normalization.percentile_clip},
                        {"clip_low", c.normalization.clip_low},
                        {"clip_high", c.normalization.clip_high}};
  json flips = json::array(), modes = json::array();
  for (auto f : c.augment.flip_modes) flips.push_back(to_string(f));
  for (auto m : c.augment.photometric_modes) modes.push_back(to_string(m));
  j["augment"] = {{"apply_probability", c.augment.apply_probability},
                  {"flip_modes", flips},
                  {"rotation_angles", c.augment.rotation_angles},
                  {"resize_min", c.augment.resize_min},
                  {"resize_max", c.augment.resize_max},
                  {"photometric", c.augment.photometric},
                  {"photometric_modes", modes},
                  {"gamma_min", c.augment.gamma_min},
                  {"gamma_max", c.augment.gamma_max},
                  {"noise_sigma", c.augment.noise_sigma},
                  {"additive_range", c.augment.additive_range},
                  {"multiplicative_min", c.augment.multiplicative_min},
                  {"multiplicative_max", c.augment.multiplicative_max}};
  j["arch"] = {{"depth", c.arch.depth},
               {"base_width", c.arch.base_width},
               {"in_bands", c.arch.in_bands},
               {"classes", c.arch.classes},
               {"dropout_rate_train", c.arch.dropout_rate_train},
               {"dropout_kind", to_string(c.arch.dropout_kind)},
               {"dropout_placement", to_string(c.arch.dropout_placement)}};
  j["loss"] = {{"kind", to_string(c.loss.kind)},
               {"alpha", c.loss.tfl.alpha},
               {"beta", c.loss.tfl.beta},
               {"gamma", c.loss.tfl.gamma},
               {"smooth", c.loss.tfl.smooth},
               {"inverse_gamma", c.loss.tfl.inverse_gamma},
               {"relax_sum", c.loss.tfl.relax_sum},
               {"per_sample", c.loss.tfl.per_sample},
               {"weights", to_string(c.loss.weights)}};
  j["optimizer"] = {{"kind", to_string(c.optimizer.kind)},   {"inner", to_string(c.optimizer.inner)},
                    {"momentum", c.optimizer.momentum},      {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},            {"eps", c.optimizer.eps},
                    {"rho", c.optimizer.rho}};
  j["schedule"] = {{"initial_lr", c.schedule.initial_lr}, {"power", c.schedule.power}, {"epochs", c.schedule.total_epochs}};
  j["batch_size"] = c.batch_size;
  j["mc"] = {{"trials", c.mc.trials},
             {"inference_dropout_rate", c.mc.inference_dropout_rate},
             {"aggregation", to_string(c.mc.aggregation)},
             {"threshold", to_string(c.mc.policy.kind)},
             {"fixed_threshold", c.fixed_threshold}};
  j["tiles"] = {{"core_size", c.tiles.core_size}, {"input_size", c.tiles.input_size}};
  j["evaluation"] = {{"boundary_mode", c.boundary_mode == BoundaryMode::Negative ? "negative" : "ignore"}};
  j["paths"] = {{"scene", c.paths.scene}, {"checkpoint", c.paths.checkpoint}, {"predictions", c.paths.predictions}};
  if (!c.ablation.empty()) j["ablation"] = c.ablation;
  return j;
}

/// Parses a fully resolved document (see resolve_presets).
inline RunConfig from_resolved_json(const json& j) {
  using detail::get;
  RunConfig c;
  if (j.contains("seed") && !j.at("seed").is_null()) {
    if (!j.at("seed").is_number_unsigned() && !(j.at("seed").is_number_integer() && j.at("seed").get<long long>() >= 0))
      throw ConfigError("config: 'seed' must be a nonnegative integer");
    c.seed = j.at("seed").get<std::uint64_t>();
  }
  c.run_id = get<std::string>(j, "run_id", "");
  const json& s = j.at("scene");
  c.scene.scene_size_px = get<int>(s, "scene_size_px", "scene");
  c.scene.band_count = get<int>(s, "band_count", "scene");
  c.scene.field_density = get<double>(s, "field_density", "scene");
  c.scene.mean_field_diameter_px = get<int>(s, "mean_field_diameter_px", "scene");
  c.scene.churn_fraction = get<double>(s, "churn_fraction", "scene");
  c.scene.field_gap_px = get<double>(s, "field_gap_px", "scene");
  c.scene.texture_amplitude = get<double>(s, "texture_amplitude", "scene");
  c.scene.texture_scale_px = get<int>(s, "texture_scale_px", "scene");
  c.scene.field_variation = get<double>(s, "field_variation", "scene");
  c.scene.pixel_texture_sigma = get<double>(s, "pixel_texture_sigma", "scene");
  c.scene.background_reflectance = get<std::vector<double>>(s, "background_reflectance", "scene");
  c.scene.field_reflectance = get<std::vector<double>>(s, "field_reflectance", "scene");
  for (const auto& y : s.at("years")) c.scene.years.push_back(detail::year_from_json(y));
  c.eval_scene_size_px = get<int>(j, "eval_scene_size_px", "");
  c.boundary_thickness_px = get<int>(j.at("labels"), "boundary_thickness_px", "labels");

  const json& ch = j.at("chips");
  c.chips = {get<int>(ch, "chip_size", "chips"), get<int>(ch, "overlap", "chips"), get<int>(ch, "validation_every", "chips"),
             get<int>(ch, "train_year", "chips")};

  const json& n = j.at("normalization");
  c.normalization = NormScheme::parse(get<std::string>(n, "scheme", "normalization"));
  c.normalization.percentile_clip = get<bool>(n, "percentile_clip", "normalization");
  c.normalization.clip_low = get<double>(n, "clip_low", "normalization");
  c.normalization.clip_high = get<double>(n, "clip_high", "normalization");

  const json& a = j.at("augment");
  c.augment.apply_probability = get<double>(a, "apply_probability", "augment");
  c.augment.flip_modes.clear();
  for (const auto& f : get<std::vector<std::string>>(a, "flip_modes", "augment")) c.augment.flip_modes.push_back(parse_flip_mode(f));
  c.augment.rotation_angles = get<std::vector<int>>(a, "rotation_angles", "augment");
  c.augment.resize_min = get<double>(a, "resize_min", "augment");
  c.augment.resize_max = get<double>(a, "resize_max", "augment");
  c.augment.photometric = get<bool>(a, "photometric", "augment");
  c.augment.photometric_modes.clear();
  for (const auto& m : get<std::vector<std::string>>(a, "photometric_modes", "augment"))
    c.augment.photometric_modes.push_back(parse_photometric_mode(m));
  c.augment.gamma_min = get<double>(a, "gamma_min", "augment");
  c.augment.gamma_max = get<double>(a, "gamma_max", "augment");
  c.augment.noise_sigma = get<double>(a, "noise_sigma", "augment");
  c.augment.additive_range = get<double>(a, "additive_range", "augment");
  c.augment.multiplicative_min = get<double>(a, "multiplicative_min", "augment");
  c.augment.multiplicative_max = get<double>(a, "multiplicative_max", "augment");

  const json& ar = j.at("arch");
  c.arch.depth = get<int>(ar, "depth", "arch");
  c.arch.base_width = get<int>(ar, "base_width", "arch");
  c.arch.in_bands = get<int>(ar, "in_bands", "arch");
  c.arch.classes = get<int>(ar, "classes", "arch");
  c.arch.dropout_rate_train = get<double>(ar, "dropout_rate_train", "arch");
  c.arch.dropout_kind = parse_dropout_kind(get<std::string>(ar, "dropout_kind", "arch"));
  c.arch.dropout_placement = parse_dropout_placement(get<std::string>(ar, "dropout_placement", "arch"));

  const json& l = j.at("loss");
  const auto kind = get<std::string>(l, "kind", "loss");
  if (kind == "tfl") c.loss.kind = LossKind::Tfl;
  else if (kind == "ce") c.loss.kind = LossKind::Ce;
  else throw ConfigError("config: unknown loss kind '" + kind + "'");
  c.loss.tfl.alpha = get<double>(l, "alpha", "loss");
  c.loss.tfl.beta = get<double>(l, "beta", "loss");
  c.loss.tfl.gamma = get<double>(l, "gamma", "loss");
  c.loss.tfl.smooth = get<double>(l, "smooth", "loss");
  c.loss.tfl.inverse_gamma = get<bool>(l, "inverse_gamma", "loss");
  c.loss.tfl.relax_sum = get<bool>(l, "relax_sum", "loss");
  c.loss.tfl.per_sample = get<bool>(l, "per_sample", "loss");
  const auto w = get<std::string>(l, "weights", "loss");
  if (w == "local") c.loss.weights = WeightMode::Local;
  else if (w == "global") c.loss.weights = WeightMode::Global;
  else if (w == "uniform") c.loss.weights = WeightMode::Uniform;
  else throw ConfigError("config: unknown loss weighting '" + w + "'");

  const json& o = j.at("optimizer");
  c.optimizer.kind = parse_opt_kind(get<std::string>(o, "kind", "optimizer"));
  c.optimizer.inner = parse_opt_kind(get<std::string>(o, "inner", "optimizer"));
  c.optimizer.momentum = get<double>(o, "momentum", "optimizer");
  c.optimizer.beta1 = get<double>(o, "beta1", "optimizer");
  c.optimizer.beta2 = get<double>(o, "beta2", "optimizer");
  c.optimizer.eps = get<double>(o, "eps", "optimizer");
  c.optimizer.rho = get<double>(o, "rho", "optimizer");

  const json& sc = j.at("schedule");
  c.schedule.initial_lr = get<double>(sc, "initial_lr", "schedule");
  c.schedule.power = get<double>(sc, "power", "schedule");
  c.schedule.total_epochs = get<int>(sc, "epochs", "schedule");
  c.batch_size = get<int>(j, "batch_size", "");

  const json& m = j.at("mc");
  c.mc.trials = get<int>(m, "trials", "mc");
  c.mc.inference_dropout_rate = get<double>(m, "inference_dropout_rate", "mc");
  c.mc.aggregation = parse_aggregation(get<std::string>(m, "aggregation", "mc"));
  c.fixed_threshold = get<double>(m, "fixed_threshold", "mc");
  const auto tk = parse_threshold_kind(get<std::string>(m, "threshold", "mc"));
  c.mc.policy = tk == ThresholdKind::Fixed ? ThresholdPolicy::fixed(c.fixed_threshold)
                : tk == ThresholdKind::Argmax ? ThresholdPolicy::argmax()
                                              : ThresholdPolicy::adaptive();

  const json& t = j.at("tiles");
  c.tiles = {get<int>(t, "core_size", "tiles"), get<int>(t, "input_size", "tiles")};
  const auto bm = get<std::string>(j.at("evaluation"), "boundary_mode", "evaluation");
  if (bm == "negative") c.boundary_mode = BoundaryMode::Negative;
  else if (bm == "ignore") c.boundary_mode = BoundaryMode::Ignore;
  else throw ConfigError("config: unknown evaluation.boundary_mode '" + bm + "'");

  const json& p = j.at("paths");
  c.paths = {get<std::string>(p, "scene", "paths"), get<std::string>(p, "checkpoint", "paths"),
             get<std::string>(p, "predictions", "paths")};
  if (j.contains("ablation")) c.ablation = j.at("ablation");
  return c;
}

inline void validate(const RunConfig& c) {
  validate(c.scene);
  validate(c.augment);
  validate(c.arch);
  validate(c.loss.tfl);
  validate(c.optimizer);
  validate(c.mc);
  validate(c.tiles, c.arch);
  if (c.arch.in_bands != c.scene.band_count) throw ConfigError("config: arch.in_bands must equal scene.band_count");
  if (c.arch.classes != kNumClasses) throw ConfigError("config: arch.classes must be 3");
  if (c.run_id.empty() || c.run_id.find_first_of(",\n\"") != std::string::npos)
    throw ConfigError("config: run_id must be nonempty and free of commas, quotes and newlines");
  if (c.batch_size < 1) throw ConfigError("config: batch_size must be positive");
  if (c.schedule.total_epochs < 0) throw ConfigError("config: schedule.epochs must be >= 0");
  if (!(c.schedule.initial_lr > 0.0)) throw ConfigError("config: schedule.initial_lr must be positive");
  if (c.boundary_thickness_px < 1) throw ConfigError("config: labels.boundary_thickness_px must be positive");
  if (c.chips.validation_every < 2) throw ConfigError("config: chips.validation_every must be >= 2");
  if (c.chips.train_year < 0 || c.chips.train_year >= static_cast<int>(c.scene.years.size()))
    throw ConfigError("config: chips.train_year does not name a configured year");
  check_chip_grid(c.scene.scene_size_px, c.chips.chip_size, c.chips.overlap, c.arch.downsample_factor());
  if (c.eval_scene_size_px < 64 || c.eval_scene_size_px % c.tiles.core_size != 0)
    throw ConfigError("config: eval_scene_size_px must be >= 64 and a multiple of tiles.core_size");
  if (c.normalization.percentile_clip && c.normalization.method != NormMethod::MinMax)
    throw ConfigError("config: percentile clipping applies to min-max schemes only");
}

/// Resolves presets, parses, checks for unknown keys and validates.
inline RunConfig parse_config(const json& doc) {
  json resolved = resolve_presets(doc);
  RunConfig c;
  try {
    c = from_resolved_json(resolved);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  detail::check_known_keys(resolved, to_json(c), "");
  validate(c);
  return c;
}

/// Accepts a config document or a run manifest (its "config" member).
inline RunConfig load_config(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  } catch (const InputError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (doc.is_object() && doc.contains("manifest_version") && doc.contains("config")) doc = doc.at("config");
  return parse_config(doc);
}

}  // namespace fieldshift::pipeline
