// fieldshift: simulate | train | predict | ablate | evaluate

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <json.hpp>
#include <new>
#include <optional>
#include <string>
#include <thread>

#include "fieldshift/core/error.hpp"
#include "fieldshift/core/parallel.hpp"
#include "fieldshift/pipeline/commands.hpp"

namespace {

using nlohmann::json;
namespace fp = fieldshift::pipeline;

int report_error(const std::string& category, const std::string& message, int code) {
  std::cerr << json{{"error", category}, {"message", message}, {"exit_code", code}}.dump() << std::endl;
  return code;
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::string out;
  std::string scene, checkpoint, predictions;
  bool no_photometric = false;
};

int run(const std::string& command, const Options& o) {
  fp::RunConfig cfg = fp::load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.scene.empty()) cfg.paths.scene = o.scene;
  if (!o.checkpoint.empty()) cfg.paths.checkpoint = o.checkpoint;
  if (!o.predictions.empty()) cfg.paths.predictions = o.predictions;
  if (o.no_photometric) cfg.augment.photometric = false;
  fp::validate(cfg);
  fieldshift::set_thread_cap(o.threads > 0 ? o.threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));

  json m;
  if (command == "simulate") m = fp::cmd_simulate(cfg, o.out);
  else if (command == "train") m = fp::cmd_train(cfg, o.out);
  else if (command == "predict") m = fp::cmd_predict(cfg, o.out);
  else if (command == "evaluate") m = fp::cmd_evaluate(cfg, o.out);
  else m = fp::cmd_ablate(cfg, o.out);

  std::cout << command << ": wrote " << m.at("outputs").size() << " files to " << o.out << "\n";
  if (command == "train" && m.contains("best_val_iou"))
    std::cout << "best epoch " << m.at("best_epoch") << ", validation IoU " << m.at("best_val_iou") << "\n";
  if (command == "ablate" && m.value("partial", false)) std::cout << "some cells failed; see cells.json\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-year cropland field segmentation workflow"};
  app.require_subcommand(1);
  Options o;
  const std::pair<const char*, const char*> commands[] = {
      {"simulate", "Generate the multi-year training and evaluation scenes"},
      {"train", "Train the segmentation network on the training-year chips"},
      {"predict", "MC-dropout prediction over every evaluation year"},
      {"ablate", "Train and evaluate each ablation cell"},
      {"evaluate", "Score predictions against reference labels"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "Run config or a manifest to re-run")->required();
    sub->add_option("--seed", o.seed, "Root seed (overrides the config)");
    sub->add_option("--threads", o.threads, "Worker thread cap (default: all cores)")->check(CLI::NonNegativeNumber);
    sub->add_option("--out", o.out, "Output directory")->required();
    sub->add_option("--scene", o.scene, "Scene directory (overrides paths.scene)");
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint file (overrides paths.checkpoint)");
    sub->add_option("--predictions", o.predictions, "Prediction directory (overrides paths.predictions)");
    sub->add_flag("--no-photometric", o.no_photometric, "Disable photometric augmentation");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what(), 2);
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, o);
  } catch (const fieldshift::Error& e) {
    return report_error(e.category(), e.what(), e.exit_code());
  } catch (const json::exception& e) {
    return report_error("config", e.what(), 2);
  } catch (const std::filesystem::filesystem_error& e) {
    return report_error("io", e.what(), 3);
  } catch (const std::bad_alloc&) {
    return report_error("resource", "out of memory", 3);
  } catch (const std::exception& e) {
    return report_error("internal", e.what(), 3);
  }
}
