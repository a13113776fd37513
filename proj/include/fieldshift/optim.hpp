#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fieldshift/core/error.hpp"

namespace fieldshift {

enum class OptKind { Sgd, Momentum, Nesterov, Adam, Sam };

inline std::string to_string(OptKind k) {
  switch (k) {
    case OptKind::Sgd: return "sgd";
    case OptKind::Momentum: return "momentum";
    case OptKind::Nesterov: return "nesterov";
    case OptKind::Adam: return "adam";
    case OptKind::Sam: return "sam";
  }
  return "?";
}

inline OptKind parse_opt_kind(const std::string& s) {
  if (s == "sgd") return OptKind::Sgd;
  if (s == "momentum") return OptKind::Momentum;
  if (s == "nesterov") return OptKind::Nesterov;
  if (s == "adam") return OptKind::Adam;
  if (s == "sam") return OptKind::Sam;
  throw ConfigError("unknown optimizer '" + s + "'");
}

struct OptConfig {
  OptKind kind = OptKind::Nesterov;
  OptKind inner = OptKind::Nesterov;  // update rule used by SAM
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double rho = 0.05;
};

inline void validate(const OptConfig& c) {
  if (c.inner == OptKind::Sam) throw ConfigError("optimizer: SAM cannot wrap itself");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError("optimizer: momentum must lie in [0,1)");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0)) throw ConfigError("optimizer: adam betas must lie in [0,1)");
  if (!(c.rho >= 0.0)) throw ConfigError("optimizer: sam rho must be nonnegative");
}

struct OptState {
  OptConfig cfg;
  std::vector<double> m;  // momentum buffer / adam first moment
  std::vector<double> v;  // adam second moment
  long step = 0;

  OptKind rule() const noexcept { return cfg.kind == OptKind::Sam ? cfg.inner : cfg.kind; }
};

inline OptState make_opt_state(const OptConfig& cfg, std::size_t n) {
  validate(cfg);
  OptState s{cfg, std::vector<double>(n, 0.0), {}, 0};
  if (s.rule() == OptKind::Adam) s.v.assign(n, 0.0);
  return s;
}

using ParamLocator = std::function<std::string(std::size_t)>;

template <typename T>
void check_finite(std::span<const T> grads, const ParamLocator& locate) {
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(static_cast<double>(grads[i])))
      throw NumericError("non-finite gradient at parameter " + std::to_string(i) +
                         (locate ? " (" + locate(i) + ")" : std::string{}));
}

/// One update with the state's rule (the inner rule for SAM). Momentum and
/// Nesterov follow buf = mu buf + g; Nesterov steps along g + mu buf.
template <typename T>
void optimizer_step(std::span<T> params, std::span<const T> grads, OptState& state, double lr,
                    const ParamLocator& locate = {}) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw DimensionError("optimizer_step: parameter, gradient and state sizes differ");
  check_finite(grads, locate);
  ++state.step;
  const auto& c = state.cfg;
  switch (state.rule()) {
    case OptKind::Sgd:
      for (std::size_t i = 0; i < params.size(); ++i) params[i] = static_cast<T>(params[i] - lr * grads[i]);
      break;
    case OptKind::Momentum:
      for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = c.momentum * state.m[i] + grads[i];
        params[i] = static_cast<T>(params[i] - lr * state.m[i]);
      }
      break;
    case OptKind::Nesterov:
      for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = c.momentum * state.m[i] + grads[i];
        params[i] = static_cast<T>(params[i] - lr * (grads[i] + c.momentum * state.m[i]));
      }
      break;
    case OptKind::Adam: {
      const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
      const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
      for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
        state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
        params[i] = static_cast<T>(params[i] - lr * (state.m[i] / bc1) / (std::sqrt(state.v[i] / bc2) + c.eps));
      }
      break;
    }
    case OptKind::Sam: break;  // unreachable: rule() never returns Sam
  }
}

/// Sharpness-aware step: perturb by rho g/|g|, take gradients there, and
/// apply the inner rule to the unperturbed parameters. A zero gradient
/// degrades to a plain inner step.
template <typename T>
void sam_step(std::span<T> params, const std::function<std::vector<T>(std::span<const T>)>& grad_fn, OptState& state,
              double lr, const ParamLocator& locate = {}) {
  const std::vector<T> g = grad_fn(std::span<const T>(params.data(), params.size()));
  check_finite(std::span<const T>(g), locate);
  double norm = 0.0;
  for (T x : g) norm += static_cast<double>(x) * x;
  norm = std::sqrt(norm);
  if (norm == 0.0 || state.cfg.rho == 0.0) {
    optimizer_step(params, std::span<const T>(g), state, lr, locate);
    return;
  }
  std::vector<T> perturbed(params.begin(), params.end());
  const double scale = state.cfg.rho / norm;
  for (std::size_t i = 0; i < perturbed.size(); ++i) perturbed[i] = static_cast<T>(perturbed[i] + scale * g[i]);
  const std::vector<T> g2 = grad_fn(std::span<const T>(perturbed));
  optimizer_step(params, std::span<const T>(g2), state, lr, locate);
}

struct LrSchedule {
  double initial_lr = 0.003;
  double power = 0.8;
  int total_epochs = 120;
};

/// Polynomial decay: initial_lr (1 - epoch/total)^power.
inline double lr_at(const LrSchedule& s, double epoch) {
  if (s.total_epochs <= 0) throw ConfigError("lr schedule: total_epochs must be positive");
  if (!(epoch >= 0.0 && epoch <= s.total_epochs))
    throw ConfigError("lr schedule: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(s.total_epochs) + "]");
  return s.initial_lr * std::pow(1.0 - epoch / s.total_epochs, s.power);
}

}  // namespace fieldshift
