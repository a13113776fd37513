#include <gtest/gtest.h>

#include <cmath>

#include "checks.hpp"
#include "fieldshift/losses.hpp"
#include "fieldshift/optim.hpp"
#include "oracles.hpp"

using namespace fieldshift;

namespace {

LabelMask counts_mask(const std::vector<int>& counts) {
  int total = 0;
  for (int c : counts) total += c;
  LabelMask m(1, total);
  int i = 0;
  for (std::size_t c = 0; c < counts.size(); ++c)
    for (int k = 0; k < counts[c]; ++k) m.data[static_cast<std::size_t>(i++)] = static_cast<std::uint8_t>(c);
  return m;
}

struct Batch {
  std::vector<Tensor<double>> probs;
  std::vector<LabelMask> masks;
  std::span<const Tensor<double>> p() const { return probs; }
  std::span<const LabelMask> m() const { return masks; }
};

Batch random_batch(std::uint64_t seed, int n = 2, int size = 6, double spread = 3.0) {
  Batch b;
  const auto trials = checks::random_trials(seed, n, size, size, spread);
  Rng rng(seed + 100);
  for (int i = 0; i < n; ++i) {
    b.probs.push_back(trials[static_cast<std::size_t>(i)]);
    b.masks.push_back(checks::random_mask(rng, size, size));
  }
  return b;
}

using LossFn = std::function<LossResult<double>(std::span<const Tensor<double>>, std::span<const LabelMask>)>;

double fd_max_rel(const Batch& b, const LossFn& f) {
  const auto r = f(b.p(), b.m());
  Batch x = b;
  double worst = 0;
  const double h = 1e-6;
  for (std::size_t n = 0; n < x.probs.size(); ++n)
    for (std::size_t i = 0; i < x.probs[n].data.size(); ++i) {
      const double v = x.probs[n].data[i];
      x.probs[n].data[i] = v + h;
      const double up = f(x.p(), x.m()).loss;
      x.probs[n].data[i] = v - h;
      const double dn = f(x.p(), x.m()).loss;
      x.probs[n].data[i] = v;
      const double num = (up - dn) / (2 * h), a = r.grad_probs[n].data[i];
      worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-3}));
    }
  return worst;
}

std::vector<std::vector<std::vector<double>>> nested(const Batch& b) {
  std::vector<std::vector<std::vector<double>>> out;
  for (const auto& t : b.probs) {
    out.emplace_back();
    for (int k = 0; k < t.channels; ++k) {
      auto c = t.channel(k);
      out.back().emplace_back(c.begin(), c.end());
    }
  }
  return out;
}

std::vector<std::vector<int>> nested(const std::vector<LabelMask>& m) {
  std::vector<std::vector<int>> out;
  for (const auto& x : m) out.emplace_back(x.data.begin(), x.data.end());
  return out;
}

}  // namespace

TEST(ClassWeights, InverseFrequency) {
  const auto m = counts_mask({900, 90, 10});
  const auto w = dynamic_class_weights(std::span<const LabelMask>(&m, 1));
  EXPECT_NEAR(w[0], 1000.0 / 2700.0, 1e-12);
  EXPECT_NEAR(w[1], 1000.0 / 270.0, 1e-12);
  EXPECT_NEAR(w[2], 1000.0 / 30.0, 1e-12);
  EXPECT_NEAR(w[0], 0.370, 5e-4);
  EXPECT_NEAR(w[1], 3.704, 5e-4);
  EXPECT_NEAR(w[2], 33.333, 5e-4);
}

TEST(ClassWeights, BalancedIsUniform) {
  const auto m = counts_mask({50, 50, 50});
  for (double v : dynamic_class_weights(std::span<const LabelMask>(&m, 1)).w) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(ClassWeights, AbsentAndRareClassesCapped) {
  auto m = counts_mask({500, 500, 0});
  auto w = dynamic_class_weights(std::span<const LabelMask>(&m, 1));
  EXPECT_EQ(w[2], kClassWeightCap);
  m = counts_mask({5000, 4999, 1});
  w = dynamic_class_weights(std::span<const LabelMask>(&m, 1));
  EXPECT_EQ(w[2], kClassWeightCap);
}

TEST(ClassWeights, IgnoreExcludedAndAllIgnoreThrows) {
  auto m = counts_mask({10, 10, 10});
  m.data.push_back(kIgnore);
  m.width += 1;
  for (double v : dynamic_class_weights(std::span<const LabelMask>(&m, 1)).w) EXPECT_DOUBLE_EQ(v, 1.0);
  LabelMask ig(2, 2, kIgnore);
  EXPECT_THROW(dynamic_class_weights(std::span<const LabelMask>(&ig, 1)), StatisticsError);
}

TEST(LossOracles, SuitePasses) {
  const auto v = checks::loss_oracle_suite();
  EXPECT_TRUE(v.pass) << v.detail;
}

TEST(LossOracles, RandomFixturesMatchScalarOracles) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto b = random_batch(s);
    const auto w = dynamic_class_weights(b.m());
    TflConfig c;
    EXPECT_NEAR(tversky_focal_loss(b.p(), b.m(), c, w).loss,
                oracle::tfl(nested(b), nested(b.masks), w.w, c.alpha, c.beta, c.gamma, c.smooth), 1e-10);
    EXPECT_NEAR(weighted_ce_loss(b.p(), b.m(), w).loss, oracle::weighted_ce(nested(b), nested(b.masks), w.w), 1e-10);
  }
}

TEST(LossGradients, MatchFiniteDifferences) {
  const auto b = random_batch(7, 2, 6, 1.0);
  const auto w = dynamic_class_weights(b.m());
  TflConfig c;
  EXPECT_LE(fd_max_rel(b, [&](auto p, auto m) { return tversky_focal_loss(p, m, c, w); }), 1e-6);
  EXPECT_LE(fd_max_rel(b, [&](auto p, auto m) { return weighted_ce_loss(p, m, w); }), 1e-6);
  TflConfig ps = c;
  ps.per_sample = true;
  EXPECT_LE(fd_max_rel(b, [&](auto p, auto m) { return tversky_focal_loss(p, m, ps, w); }), 1e-6);
  for (const auto& f : checks::loss_fixtures()) {
    Batch fb{checks::to_tensors(f), checks::to_masks(f)};
    const ClassWeights cw{{0.8, 2.5, 1.7}};
    EXPECT_LE(fd_max_rel(fb, [&](auto p, auto m) { return tversky_focal_loss(p, m, c, cw); }), 1e-6);
    EXPECT_LE(fd_max_rel(fb, [&](auto p, auto m) { return weighted_ce_loss(p, m, cw); }), 1e-6);
  }
}

TEST(LossValues, PerfectPrediction) {
  LabelMask m(2, 2);
  m.data = {0, 1, 2, 1};
  Tensor<double> p(3, 2, 2);
  for (int i = 0; i < 4; ++i) p.data[static_cast<std::size_t>(m.data[i] * 4 + i)] = 1.0;
  const auto tfl = tversky_focal_loss(std::span<const Tensor<double>>(&p, 1), std::span<const LabelMask>(&m, 1), TflConfig{},
                                      uniform_weights(3));
  EXPECT_NEAR(tfl.loss, 0.0, 1e-12);
  for (double ti : tfl.tversky_index) EXPECT_NEAR(ti, 1.0, 1e-12);
  for (double g : tfl.grad_probs[0].data) EXPECT_TRUE(std::isfinite(g));
  const auto ce = weighted_ce_loss(std::span<const Tensor<double>>(&p, 1), std::span<const LabelMask>(&m, 1), uniform_weights(3));
  EXPECT_LE(ce.loss, 1e-11);
}

TEST(LossValues, UniformCrossEntropyIsLn3) {
  LabelMask m(3, 3);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = static_cast<std::uint8_t>(i % 3);
  Tensor<double> p(3, 3, 3, 1.0 / 3.0);
  const auto ce = weighted_ce_loss(std::span<const Tensor<double>>(&p, 1), std::span<const LabelMask>(&m, 1), uniform_weights(3));
  EXPECT_NEAR(ce.loss, std::log(3.0), 1e-12);
}

TEST(LossValues, CeFloorFlag) {
  LabelMask m(1, 1);
  m.data = {1};
  Tensor<double> p(3, 1, 1);
  p.data = {1.0, 0.0, 0.0};
  const auto ce = weighted_ce_loss(std::span<const Tensor<double>>(&p, 1), std::span<const LabelMask>(&m, 1), uniform_weights(3));
  EXPECT_TRUE(ce.numeric_floor);
  EXPECT_NEAR(ce.loss, -std::log(1e-12), 1e-9);
}

TEST(LossValues, UnnormalizedProbsRejected) {
  LabelMask m(1, 1);
  Tensor<double> p(3, 1, 1);
  p.data = {0.5, 0.3, 0.3};
  EXPECT_THROW(tversky_focal_loss(std::span<const Tensor<double>>(&p, 1), std::span<const LabelMask>(&m, 1), TflConfig{},
                                  uniform_weights(3)),
               InputError);
  EXPECT_THROW(weighted_ce_loss(std::span<const Tensor<double>>(&p, 1), std::span<const LabelMask>(&m, 1), uniform_weights(3)),
               InputError);
}

TEST(LossProperties, IgnorePixelsAreInert) {
  const auto b = random_batch(11);
  const auto w = dynamic_class_weights(b.m());
  Batch x = b;
  Rng rng(3);
  std::size_t changed = 0;
  for (std::size_t n = 0; n < x.probs.size(); ++n) {
    const std::size_t hw = x.probs[n].plane();
    for (std::size_t i = 0; i < hw; ++i)
      if (x.masks[n].data[i] == kIgnore) {
        for (int k = 0; k < 3; ++k) x.probs[n].data[k * hw + i] = uniform01(rng);
        ++changed;
      }
  }
  ASSERT_GT(changed, 0u);
  const auto a1 = tversky_focal_loss(b.p(), b.m(), TflConfig{}, w), a2 = tversky_focal_loss(x.p(), x.m(), TflConfig{}, w);
  EXPECT_EQ(a1.loss, a2.loss);
  for (std::size_t n = 0; n < b.probs.size(); ++n) EXPECT_EQ(a1.grad_probs[n].data, a2.grad_probs[n].data);
  const auto c1 = weighted_ce_loss(b.p(), b.m(), w), c2 = weighted_ce_loss(x.p(), x.m(), w);
  EXPECT_EQ(c1.loss, c2.loss);
  for (std::size_t n = 0; n < b.probs.size(); ++n) EXPECT_EQ(c1.grad_probs[n].data, c2.grad_probs[n].data);
}

TEST(LossProperties, WeightScalingScalesLoss) {
  const auto b = random_batch(13);
  const auto w = dynamic_class_weights(b.m());
  ClassWeights w3 = w;
  for (double& v : w3.w) v *= 3.0;
  EXPECT_NEAR(tversky_focal_loss(b.p(), b.m(), TflConfig{}, w3).loss, 3.0 * tversky_focal_loss(b.p(), b.m(), TflConfig{}, w).loss,
              1e-12);
  EXPECT_NEAR(weighted_ce_loss(b.p(), b.m(), w3).loss, 3.0 * weighted_ce_loss(b.p(), b.m(), w).loss, 1e-12);

  // argmin over a one-parameter family p(t) = t * truth + (1 - t) * uniform
  auto family = [&](double t) {
    Batch x = b;
    for (std::size_t n = 0; n < x.probs.size(); ++n) {
      const std::size_t hw = x.probs[n].plane();
      for (std::size_t i = 0; i < hw; ++i)
        for (int k = 0; k < 3; ++k) {
          const auto g = x.masks[n].data[i];
          const double one_hot = g == k || (g == kIgnore && k == 0) ? 1.0 : 0.0;
          x.probs[n].data[k * hw + i] = 0.05 * one_hot + 0.95 * (t * (k == (i % 3) ? 1.0 : 0.0) + (1 - t) / 3.0);
        }
    }
    return x;
  };
  auto argmin = [&](const ClassWeights& cw) {
    int best = 0;
    double lo = 1e300;
    for (int s = 0; s <= 20; ++s) {
      const auto x = family(s / 20.0);
      const double l = tversky_focal_loss(x.p(), x.m(), TflConfig{}, cw).loss;
      if (l < lo) lo = l, best = s;
    }
    return best;
  };
  EXPECT_EQ(argmin(w), argmin(w3));
}

TEST(LossProperties, RaisingAlphaPenalizesMisses) {
  const auto b = random_batch(17);
  const auto w = uniform_weights(3);
  TflConfig c;
  c.relax_sum = true;
  double prev = -1;
  for (double a : {0.3, 0.5, 0.65, 0.8, 0.95}) {
    c.alpha = a;
    const double l = tversky_focal_loss(b.p(), b.m(), c, w).loss;
    EXPECT_GT(l, prev) << "alpha " << a;
    prev = l;
  }
}

TEST(LossProperties, TverskyDiceIdentityOnRandomBatches) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto b = random_batch(30 + s);
    TflConfig c;
    c.alpha = c.beta = 0.5;
    c.gamma = 1.0;
    const ClassWeights w{{1.0, 1.0, 1.0}};
    EXPECT_NEAR(tversky_focal_loss(b.p(), b.m(), c, w).loss, oracle::soft_dice_loss(nested(b), nested(b.masks), w.w, c.smooth),
                1e-12);
  }
}

// ---------------------------------------------------------------- optimizers

namespace {

double quad_step(OptKind kind, double w, OptState& s, double lr) {
  std::vector<double> p{w}, g{w};
  optimizer_step(std::span<double>(p), std::span<const double>(g), s, lr);
  return p[0];
}

OptConfig opt(OptKind kind, OptKind inner = OptKind::Nesterov) {
  OptConfig c;
  c.kind = kind;
  c.inner = inner;
  return c;
}

}  // namespace

TEST(Optimizer, ZeroGradientIsFixedPoint) {
  for (auto k : {OptKind::Sgd, OptKind::Momentum, OptKind::Nesterov, OptKind::Adam}) {
    auto s = make_opt_state(opt(k), 3);
    std::vector<double> p{1.0, -2.0, 0.5}, g(3, 0.0);
    const auto before = p;
    optimizer_step(std::span<double>(p), std::span<const double>(g), s, 0.1);
    EXPECT_EQ(p, before) << to_string(k);
  }
}

TEST(Optimizer, SgdGeometricDecay) {
  auto s = make_opt_state(opt(OptKind::Sgd), 1);
  double w = 1.0;
  w = quad_step(OptKind::Sgd, w, s, 0.1);
  EXPECT_NEAR(w, 0.9, 1e-15);
  w = quad_step(OptKind::Sgd, w, s, 0.1);
  EXPECT_NEAR(w, 0.81, 1e-15);
}

TEST(Optimizer, NesterovMatchesHandRecurrence) {
  auto s = make_opt_state(opt(OptKind::Nesterov), 1);
  double w = 1.0, ow = 1.0, buf = 0.0;
  for (int t = 0; t < 5; ++t) {
    w = quad_step(OptKind::Nesterov, w, s, 0.1);
    const double g = ow;
    buf = 0.9 * buf + g;
    ow = ow - 0.1 * (g + 0.9 * buf);
    EXPECT_NEAR(w, ow, 1e-12) << "step " << t;
  }
  // first two steps by hand: 1 - 0.1*1.9 = 0.81; buf = 0.9 + 0.81 = 1.71
  EXPECT_NEAR(1.0 - 0.1 * 1.9, 0.81, 1e-15);
}

TEST(Optimizer, AdamFirstStepIsSignedLr) {
  auto s = make_opt_state(opt(OptKind::Adam), 2);
  std::vector<double> p{1.0, 1.0}, g{0.3, -7.0};
  optimizer_step(std::span<double>(p), std::span<const double>(g), s, 0.01);
  EXPECT_NEAR(p[0], 0.99, 1e-7);
  EXPECT_NEAR(p[1], 1.01, 1e-7);
}

TEST(Optimizer, NonFiniteGradientNamesLayer) {
  ArchSpec a;
  a.depth = 1;
  a.base_width = 2;
  auto params = init_params<float>(a, 1);
  std::vector<float> g(params.values.size(), 0.0f);
  g[params.layers[2].bias_offset] = std::nanf("");
  auto s = make_opt_state(opt(OptKind::Nesterov), g.size());
  try {
    optimizer_step(std::span<float>(params.values), std::span<const float>(g), s, 0.1,
                   [&](std::size_t i) { return params.locate(i); });
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find(params.layers[2].name + ".bias"), std::string::npos) << e.what();
  }
}

TEST(Sam, ScalarQuadratic) {
  OptConfig c = opt(OptKind::Sam, OptKind::Sgd);
  c.rho = 0.1;
  auto s = make_opt_state(c, 1);
  std::vector<double> p{1.0};
  std::vector<double> seen;
  sam_step<double>(std::span<double>(p),
                   [&](std::span<const double> w) {
                     seen.push_back(w[0]);
                     return std::vector<double>{w[0]};
                   },
                   s, 0.1);
  ASSERT_EQ(seen.size(), 2u);
  EXPECT_NEAR(seen[1], 1.1, 1e-15);
  EXPECT_NEAR(p[0], 0.89, 1e-15);
}

TEST(Sam, ZeroRhoEqualsInnerStep) {
  for (auto inner : {OptKind::Sgd, OptKind::Nesterov, OptKind::Adam}) {
    OptConfig c = opt(OptKind::Sam, inner);
    c.rho = 0.0;
    auto s = make_opt_state(c, 2);
    auto plain = make_opt_state(opt(inner), 2);
    std::vector<double> a{0.7, -0.2}, b = a;
    auto grad = [](std::span<const double> w) { return std::vector<double>{w[0] * w[0], 3 * w[1]}; };
    for (int t = 0; t < 3; ++t) {
      sam_step<double>(std::span<double>(a), grad, s, 0.05);
      const auto g = grad(b);
      optimizer_step(std::span<double>(b), std::span<const double>(g), plain, 0.05);
    }
    EXPECT_EQ(a, b) << to_string(inner);
  }
}

TEST(Sam, DoubleWellSharpnessTerm) {
  // f(w) = (w^2 - 1)^2 / 4, f'(w) = w^3 - w
  auto fp = [](double w) { return w * w * w - w; };
  OptConfig c = opt(OptKind::Sam, OptKind::Sgd);
  c.rho = 0.05;
  for (double w0 : {-1.6, -0.4, 0.3, 1.4}) {
    auto s = make_opt_state(c, 1);
    std::vector<double> p{w0};
    sam_step<double>(std::span<double>(p), [&](std::span<const double> w) { return std::vector<double>{fp(w[0])}; }, s, 0.1);
    const double eps = 0.05 * (fp(w0) > 0 ? 1.0 : -1.0);
    const double sgd_delta = 0.1 * fp(w0), sam_delta = w0 - p[0];
    EXPECT_NEAR(sam_delta - sgd_delta, 0.1 * (fp(w0 + eps) - fp(w0)), 1e-14) << w0;
  }
}

TEST(Sam, ZeroGradientFallsBack) {
  auto s = make_opt_state(opt(OptKind::Sam, OptKind::Sgd), 1);
  std::vector<double> p{0.0};
  int calls = 0;
  sam_step<double>(std::span<double>(p),
                   [&](std::span<const double>) {
                     ++calls;
                     return std::vector<double>{0.0};
                   },
                   s, 0.1);
  EXPECT_EQ(calls, 1);
  EXPECT_EQ(p[0], 0.0);
}

TEST(Optimizer, SamCannotWrapItself) { EXPECT_THROW(make_opt_state(opt(OptKind::Sam, OptKind::Sam), 1), ConfigError); }

TEST(LrSchedule, Endpoints) {
  const LrSchedule s{0.003, 0.8, 120};
  EXPECT_DOUBLE_EQ(lr_at(s, 0), 0.003);
  EXPECT_NEAR(lr_at(s, 60), 0.003 * std::pow(0.5, 0.8), 1e-15);
  EXPECT_EQ(lr_at(s, 120), 0.0);
  EXPECT_THROW(lr_at(s, -1), ConfigError);
  EXPECT_THROW(lr_at(s, 121), ConfigError);
}

TEST(LrSchedule, MonotoneAndConcaveForPowerBelowOne) {
  const LrSchedule s{0.003, 0.8, 120};
  for (int e = 1; e < 120; ++e) {
    EXPECT_LT(lr_at(s, e), lr_at(s, e - 1));
    EXPECT_GE(lr_at(s, e), 0.5 * (lr_at(s, e - 1) + lr_at(s, e + 1)));
  }
}
