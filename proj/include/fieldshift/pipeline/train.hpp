#pragma once

// Training loop: augment -> normalize -> forward -> loss -> backward ->
// optimizer step, with per-epoch validation and best-checkpoint retention.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fieldshift/augment.hpp"
#include "fieldshift/core/error.hpp"
#include "fieldshift/core/rng.hpp"
#include "fieldshift/evaluation.hpp"
#include "fieldshift/losses.hpp"
#include "fieldshift/mc_inference.hpp"
#include "fieldshift/network.hpp"
#include "fieldshift/normalize.hpp"
#include "fieldshift/optim.hpp"
#include "fieldshift/pipeline/config.hpp"

namespace fieldshift::pipeline {

struct Dataset {
  std::vector<Chip> images;
  std::vector<LabelMask> labels;

  std::size_t size() const noexcept { return images.size(); }
};

/// Every k-th sample (k = validation_every) goes to validation.
inline std::pair<Dataset, Dataset> split_dataset(const std::vector<ChipSample>& samples, int validation_every) {
  Dataset train, val;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Dataset& d = (i % static_cast<std::size_t>(validation_every) == static_cast<std::size_t>(validation_every - 1)) ? val : train;
    d.images.push_back(samples[i].image);
    d.labels.push_back(samples[i].label);
  }
  return {std::move(train), std::move(val)};
}

struct TrainLogRow {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  MetricRow val;
  bool best = false;
};

struct TrainResult {
  NetworkParams<float> params;  // best validation IoU
  std::vector<TrainLogRow> log;
  int best_epoch = -1;          // -1: no epoch run, params are the initialization
  NormStats stats;              // global schemes only
};

inline std::string log_csv(const std::vector<TrainLogRow>& log) {
  std::ostringstream os;
  os << "epoch,lr,train_loss,val_loss,val_precision,val_recall,val_f1,val_iou,best\n";
  char buf[256];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.6f,%.6f,%.6f,%.6f,%d\n", r.epoch, r.lr, r.train_loss, r.val_loss,
                  r.val.precision, r.val.recall, r.val.f1, r.val.iou, r.best ? 1 : 0);
    os << buf;
  }
  return os.str();
}

inline Tensor<float> prepare_input(const Chip& chip, const NormScheme& scheme, const NormStats& stats) {
  return normalize_chip(chip, scheme, scheme.locality == NormLocality::Global ? &stats : nullptr).pixels;
}

struct BatchLoss {
  double loss = 0.0;
  std::vector<Tensor<float>> grad_logits;
};

inline BatchLoss batch_loss(const LossConfig& cfg, const ClassWeights* global_weights, std::span<const Tensor<float>> logits,
                            std::span<const LabelMask> targets) {
  std::vector<Tensor<float>> probs;
  probs.reserve(logits.size());
  for (const auto& l : logits) probs.push_back(softmax(l));
  ClassWeights w = cfg.weights == WeightMode::Uniform ? uniform_weights(kNumClasses)
                   : cfg.weights == WeightMode::Global ? *global_weights
                                                       : dynamic_class_weights(targets);
  LossResult<float> r = cfg.kind == LossKind::Tfl
                            ? tversky_focal_loss(std::span<const Tensor<float>>(probs), targets, cfg.tfl, w)
                            : weighted_ce_loss(std::span<const Tensor<float>>(probs), targets, w);
  BatchLoss out;
  out.loss = r.loss;
  for (std::size_t n = 0; n < probs.size(); ++n) out.grad_logits.push_back(softmax_backward(probs[n], r.grad_probs[n]));
  return out;
}

/// Eval-mode loss and argmax field metrics over the validation set.
inline std::pair<double, MetricRow> validate_model(const NetworkParams<float>& params, const std::vector<Tensor<float>>& inputs,
                                                   const std::vector<LabelMask>& labels, const LossConfig& loss,
                                                   const ClassWeights* global_weights) {
  if (inputs.empty()) return {0.0, metrics(ConfusionCounts{})};
  Rng unused(0);
  const auto logits = forward(params, std::span<const Tensor<float>>(inputs), ForwardMode::Eval, 0.0, unused);
  ConfusionCounts counts;
  for (std::size_t n = 0; n < logits.size(); ++n) {
    const auto pred = harden(softmax(logits[n]).cast<double>(), ThresholdPolicy::argmax()).mask;
    counts += confusion_counts(pred, labels[n]);
  }
  double loss_value = 0.0;
  try {
    loss_value = batch_loss(loss, global_weights, std::span<const Tensor<float>>(logits), std::span<const LabelMask>(labels)).loss;
  } catch (const StatisticsError&) {
    loss_value = 0.0;  // validation labels entirely ignore
  }
  return {loss_value, metrics(counts)};
}

inline TrainResult train_model(const RunConfig& cfg, const Dataset& train, const Dataset& val, std::uint64_t seed) {
  validate(cfg);
  if (train.size() == 0 && cfg.schedule.total_epochs > 0) throw StatisticsError("train: empty training set");
  TrainResult result;
  NetworkParams<float> params = init_params<float>(cfg.arch, derive_seed(seed, {stream_tag("init")}));
  result.params = params;
  const NormScheme& scheme = cfg.normalization;
  if (scheme.locality == NormLocality::Global) result.stats = compute_stats(std::span<const Chip>(train.images), scheme);

  ClassWeights global_weights;
  if (cfg.loss.weights == WeightMode::Global && train.size() > 0)
    global_weights = dynamic_class_weights(std::span<const LabelMask>(train.labels));

  std::vector<Tensor<float>> val_inputs;
  for (const auto& c : val.images) val_inputs.push_back(prepare_input(c, scheme, result.stats));

  OptState opt = make_opt_state(cfg.optimizer, params.values.size());
  const ParamLocator locate = [&params](std::size_t i) { return params.locate(i); };
  const std::size_t n = train.size();
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  double best_iou = -1.0;

  for (int epoch = 0; epoch < cfg.schedule.total_epochs; ++epoch) {
    const double lr = lr_at(cfg.schedule, epoch);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = make_rng(seed, {stream_tag("shuffle"), static_cast<std::uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t end = std::min(n, start + batch);
      std::vector<Tensor<float>> inputs;
      std::vector<LabelMask> targets;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t idx = order[k];
        Rng aug_rng = make_rng(seed, {stream_tag("augment"), static_cast<std::uint64_t>(epoch), idx});
        auto [img, lbl] = augment_pair(train.images[idx], train.labels[idx], cfg.augment, aug_rng);
        inputs.push_back(prepare_input(img, scheme, result.stats));
        targets.push_back(std::move(lbl));
      }
      const Rng drop_rng = make_rng(seed, {stream_tag("dropout"), static_cast<std::uint64_t>(epoch), batches});
      auto gradient_at = [&](const NetworkParams<float>& p, double* loss_out) {
        Rng r = drop_rng;
        ForwardCache<float> cache;
        const auto logits = forward(p, std::span<const Tensor<float>>(inputs), ForwardMode::Train, cfg.arch.dropout_rate_train, r, &cache);
        const auto bl = batch_loss(cfg.loss, &global_weights, std::span<const Tensor<float>>(logits), std::span<const LabelMask>(targets));
        if (loss_out) *loss_out = bl.loss;
        if (!std::isfinite(bl.loss))
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches));
        return backward(p, cache, std::span<const Tensor<float>>(bl.grad_logits)).values;
      };
      double batch_loss_value = 0.0;
      if (cfg.optimizer.kind == OptKind::Sam) {
        bool first = true;
        sam_step<float>(std::span<float>(params.values),
                        [&](std::span<const float> values) {
                          NetworkParams<float> p = params;
                          p.values.assign(values.begin(), values.end());
                          auto g = gradient_at(p, first ? &batch_loss_value : nullptr);
                          first = false;
                          return g;
                        },
                        opt, lr, locate);
      } else {
        const auto g = gradient_at(params, &batch_loss_value);
        try {
          optimizer_step(std::span<float>(params.values), std::span<const float>(g), opt, lr, locate);
        } catch (const NumericError& e) {
          throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches));
        }
      }
      loss_sum += batch_loss_value;
      ++batches;
    }

    TrainLogRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    std::tie(row.val_loss, row.val) = validate_model(params, val_inputs, val.labels, cfg.loss, &global_weights);
    if (row.val.iou > best_iou) {
      best_iou = row.val.iou;
      result.params = params;
      result.best_epoch = epoch;
      row.best = true;
    }
    result.log.push_back(row);
  }
  return result;
}

}  // namespace fieldshift::pipeline
