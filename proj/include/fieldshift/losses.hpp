#pragma once

// Tversky-focal and weighted cross-entropy losses on softmax probabilities,
// with ignore masking and batch-level dynamic class weights.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "fieldshift/core/error.hpp"
#include "fieldshift/core/raster.hpp"

namespace fieldshift {

inline constexpr double kClassWeightCap = 100.0;

struct TflConfig {
  double alpha = 0.65;  // false-negative weight
  double beta = 0.35;   // false-positive weight
  double gamma = 0.9;
  double smooth = 1e-6;
  bool inverse_gamma = false;  // exponent 1/gamma instead of gamma
  bool relax_sum = false;      // allow alpha + beta != 1
  bool per_sample = false;     // Tversky index per sample, losses averaged
};

inline void validate(const TflConfig& c) {
  if (!(c.alpha >= 0.0 && c.beta >= 0.0)) throw ConfigError("tfl: alpha and beta must be nonnegative");
  if (!c.relax_sum && std::abs(c.alpha + c.beta - 1.0) > 1e-9) throw ConfigError("tfl: alpha + beta must equal 1");
  if (!(c.gamma > 0.0)) throw ConfigError("tfl: gamma must be positive");
  if (!(c.smooth > 0.0)) throw ConfigError("tfl: smooth must be positive");
}

struct ClassWeights {
  std::vector<double> w;
  double operator[](std::size_t c) const { return w[c]; }
  std::size_t size() const noexcept { return w.size(); }
};

inline ClassWeights uniform_weights(int classes) { return {std::vector<double>(classes, 1.0)}; }

/// w_c = T / (K n_c) over non-ignore pixels of the batch, capped; an absent
/// class receives the cap.
inline ClassWeights dynamic_class_weights(std::span<const LabelMask> targets, int classes = kNumClasses,
                                          double cap = kClassWeightCap) {
  if (targets.empty()) throw StatisticsError("dynamic_class_weights: empty batch");
  std::vector<double> n(classes, 0.0);
  for (const auto& m : targets)
    for (auto v : m.data)
      if (v != kIgnore && v < classes) n[v] += 1.0;
  double total = 0.0;
  for (double x : n) total += x;
  if (total == 0.0) throw StatisticsError("dynamic_class_weights: batch contains only ignore pixels");
  ClassWeights out{std::vector<double>(classes)};
  for (int c = 0; c < classes; ++c) out.w[c] = n[c] > 0.0 ? std::min(cap, total / (classes * n[c])) : cap;
  return out;
}

template <typename T>
struct LossResult {
  double loss = 0.0;
  std::vector<Tensor<T>> grad_probs;
  std::vector<double> tversky_index;  // pooled per-class index (TFL only)
  bool numeric_floor = false;         // a target probability was clamped (CE only)
};

namespace detail {

template <typename T>
void check_loss_inputs(std::span<const Tensor<T>> probs, std::span<const LabelMask> targets, std::size_t classes) {
  if (probs.size() != targets.size() || probs.empty()) throw DimensionError("loss: probs and targets batch sizes differ or are empty");
  for (std::size_t n = 0; n < probs.size(); ++n) {
    const auto& p = probs[n];
    const auto& t = targets[n];
    if (p.height != t.height || p.width != t.width) throw DimensionError("loss: probs and targets dims differ");
    if (static_cast<std::size_t>(p.channels) != classes) throw DimensionError("loss: class count does not match weights");
    const std::size_t hw = p.plane();
    for (std::size_t i = 0; i < hw; ++i) {
      const auto g = t.data[i];
      if (g == kIgnore) continue;
      if (g >= classes) throw InputError("loss: target code " + std::to_string(g) + " outside the class range");
      double s = 0.0;
      for (std::size_t k = 0; k < classes; ++k) s += p.data[k * hw + i];
      if (std::abs(s - 1.0) > 1e-4) throw InputError("loss: probabilities are not normalized at a pixel (sum " + std::to_string(s) + ")");
    }
  }
}

struct TverskyTerms {
  std::vector<double> tp, fn, fp;
};

template <typename T>
TverskyTerms tversky_terms(std::span<const Tensor<T>> probs, std::span<const LabelMask> targets, std::size_t classes) {
  TverskyTerms s{std::vector<double>(classes, 0.0), std::vector<double>(classes, 0.0), std::vector<double>(classes, 0.0)};
  for (std::size_t n = 0; n < probs.size(); ++n) {
    const auto& p = probs[n];
    const std::size_t hw = p.plane();
    for (std::size_t i = 0; i < hw; ++i) {
      const auto g = targets[n].data[i];
      if (g == kIgnore) continue;
      for (std::size_t c = 0; c < classes; ++c) {
        const double pc = p.data[c * hw + i];
        if (g == c) {
          s.tp[c] += pc;
          s.fn[c] += 1.0 - pc;
        } else {
          s.fp[c] += pc;
        }
      }
    }
  }
  return s;
}

/// Adds d(loss)/d(probs) for one Tversky pool to grads, scaled by `scale`;
/// returns the pool loss.
template <typename T>
double tversky_pool(std::span<const Tensor<T>> probs, std::span<const LabelMask> targets, const TflConfig& cfg,
                    const ClassWeights& w, double scale, std::span<Tensor<T>> grads, std::vector<double>* ti_out) {
  const std::size_t K = w.size();
  const auto s = tversky_terms(probs, targets, K);
  const double ge = cfg.inverse_gamma ? 1.0 / cfg.gamma : cfg.gamma;
  double loss = 0.0;
  std::vector<double> num(K), den(K), dl_dti(K);
  for (std::size_t c = 0; c < K; ++c) {
    num[c] = s.tp[c] + cfg.smooth;
    den[c] = s.tp[c] + cfg.alpha * s.fn[c] + cfg.beta * s.fp[c] + cfg.smooth;
    const double ti = num[c] / den[c];
    const double one_minus = std::max(0.0, 1.0 - ti);
    loss += w[c] * std::pow(one_minus, ge);
    dl_dti[c] = one_minus > 0.0 ? -w[c] * ge * std::pow(one_minus, ge - 1.0) : 0.0;
    if (ti_out) ti_out->push_back(ti);
  }
  for (std::size_t n = 0; n < probs.size(); ++n) {
    const std::size_t hw = probs[n].plane();
    for (std::size_t i = 0; i < hw; ++i) {
      const auto g = targets[n].data[i];
      if (g == kIgnore) continue;
      for (std::size_t c = 0; c < K; ++c) {
        const double is_g = g == c ? 1.0 : 0.0;
        // d num / dp = g ; d den / dp = g - alpha g + beta (1 - g)
        const double dden = is_g * (1.0 - cfg.alpha) + cfg.beta * (1.0 - is_g);
        const double dti = (is_g * den[c] - num[c] * dden) / (den[c] * den[c]);
        grads[n].data[c * hw + i] += static_cast<T>(scale * dl_dti[c] * dti);
      }
    }
  }
  return loss;
}

template <typename T>
std::vector<Tensor<T>> zero_like(std::span<const Tensor<T>> probs) {
  std::vector<Tensor<T>> g;
  g.reserve(probs.size());
  for (const auto& p : probs) g.emplace_back(p.channels, p.height, p.width);
  return g;
}

}  // namespace detail

/// TI_c = (TP + e) / (TP + alpha FN + beta FP + e) over non-ignore pixels
/// (target code 255), loss = sum_c w_c (1 - TI_c)^gamma.
template <typename T>
LossResult<T> tversky_focal_loss(std::span<const Tensor<T>> probs, std::span<const LabelMask> targets,
                                 const TflConfig& cfg, const ClassWeights& weights) {
  validate(cfg);
  detail::check_loss_inputs(probs, targets, weights.size());
  LossResult<T> r;
  r.grad_probs = detail::zero_like(probs);
  if (!cfg.per_sample) {
    r.loss = detail::tversky_pool(probs, targets, cfg, weights, 1.0, std::span<Tensor<T>>(r.grad_probs), &r.tversky_index);
    return r;
  }
  const double scale = 1.0 / static_cast<double>(probs.size());
  for (std::size_t n = 0; n < probs.size(); ++n)
    r.loss += scale * detail::tversky_pool(probs.subspan(n, 1), targets.subspan(n, 1), cfg, weights, scale,
                                           std::span<Tensor<T>>(r.grad_probs).subspan(n, 1), nullptr);
  return r;
}

/// Mean over non-ignore pixels of w_g * -log p_g, with p clamped at 1e-12.
template <typename T>
LossResult<T> weighted_ce_loss(std::span<const Tensor<T>> probs, std::span<const LabelMask> targets,
                               const ClassWeights& weights) {
  constexpr double kFloor = 1e-12;
  detail::check_loss_inputs(probs, targets, weights.size());
  LossResult<T> r;
  r.grad_probs = detail::zero_like(probs);
  std::size_t valid = 0;
  for (const auto& t : targets)
    for (auto v : t.data) valid += v != kIgnore;
  if (valid == 0) return r;
  const double inv = 1.0 / static_cast<double>(valid);
  double sum = 0.0;
  for (std::size_t n = 0; n < probs.size(); ++n) {
    const std::size_t hw = probs[n].plane();
    for (std::size_t i = 0; i < hw; ++i) {
      const auto g = targets[n].data[i];
      if (g == kIgnore) continue;
      const double p = probs[n].data[g * hw + i];
      if (p < kFloor) {
        r.numeric_floor = true;
        sum += weights[g] * -std::log(kFloor);
        continue;
      }
      sum += weights[g] * -std::log(p);
      r.grad_probs[n].data[g * hw + i] = static_cast<T>(-weights[g] * inv / p);
    }
  }
  r.loss = sum * inv;
  return r;
}

}  // namespace fieldshift
