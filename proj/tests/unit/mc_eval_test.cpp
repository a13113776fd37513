#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "checks.hpp"
#include "fieldshift/evaluation.hpp"
#include "fieldshift/mc_inference.hpp"
#include "oracles.hpp"

using namespace fieldshift;

namespace {

Tensor<double> pixel(double bg, double in, double bd) {
  Tensor<double> t(3, 1, 1);
  t.data = {bg, in, bd};
  return t;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  for (std::string f; std::getline(is, f, ',');) out.push_back(f);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

TEST(McSuite, DegeneracyBoundsPermutation) {
  const auto v = checks::mc_suite();
  EXPECT_TRUE(v.pass) << v.detail;
}

TEST(McAggregate, ThreeTrialOracle) {
  const std::vector<Tensor<double>> trials{pixel(0.2, 0.7, 0.1), pixel(0.5, 0.3, 0.2), pixel(0.1, 0.8, 0.1)};
  const auto o = aggregate_trials(std::span<const Tensor<double>>(trials), ThresholdPolicy::fixed(0.5));
  const std::vector<double> mean{0.8 / 3, 1.8 / 3, 0.4 / 3};
  for (int k = 0; k < 3; ++k) {
    EXPECT_NEAR(o.mean_probs.data[k], mean[k], 1e-15);
    double ss = 0;
    for (const auto& t : trials) ss += (t.data[k] - mean[k]) * (t.data[k] - mean[k]);
    EXPECT_NEAR(o.std_probs.data[k], std::sqrt(ss / 3), 1e-15);
  }
  double h = 0, eh = 0;
  for (double p : mean) h -= p * std::log(p);
  for (const auto& t : trials)
    for (double p : t.data) eh -= p * std::log(p) / 3;
  EXPECT_NEAR(o.entropy.data[0], h, 1e-15);
  EXPECT_NEAR(o.mutual_info.data[0], h - eh, 1e-15);
  EXPECT_EQ(o.hardened.data[0], kInterior);
}

TEST(McAggregate, UniformEntropyIsLn3) {
  const std::vector<Tensor<double>> trials{pixel(1.0 / 3, 1.0 / 3, 1.0 / 3)};
  const auto o = aggregate_trials(std::span<const Tensor<double>>(trials), ThresholdPolicy::adaptive());
  EXPECT_NEAR(o.entropy.data[0], std::log(3.0), 1e-15);
  EXPECT_EQ(o.mutual_info.data[0], 0.0);
}

TEST(McAggregate, MeanProbsNormalized) {
  const auto trials = checks::random_trials(3, 9, 12, 12);
  const auto o = aggregate_trials(std::span<const Tensor<double>>(trials), ThresholdPolicy::adaptive());
  for (std::size_t i = 0; i < o.mean_probs.plane(); ++i)
    EXPECT_NEAR(o.mean_probs.data[i] + o.mean_probs.data[i + 144] + o.mean_probs.data[i + 288], 1.0, 1e-5);
}

TEST(McAggregate, IdenticalTrialsGiveExactZeros) {
  const auto one = checks::random_trials(8, 1, 8, 8);
  const std::vector<Tensor<double>> trials(5, one[0]);
  const auto o = aggregate_trials(std::span<const Tensor<double>>(trials), ThresholdPolicy::adaptive());
  EXPECT_EQ(o.mean_probs.data, one[0].data);
  for (double v : o.std_probs.data) EXPECT_EQ(v, 0.0);
  for (double v : o.mutual_info.data) EXPECT_EQ(v, 0.0);
}

TEST(McAggregate, RejectsEmptyAndMismatched) {
  std::vector<Tensor<double>> none;
  EXPECT_THROW(aggregate_trials(std::span<const Tensor<double>>(none), ThresholdPolicy::adaptive()), ConfigError);
  std::vector<Tensor<double>> bad{Tensor<double>(3, 2, 2), Tensor<double>(3, 2, 3)};
  EXPECT_THROW(aggregate_trials(std::span<const Tensor<double>>(bad), ThresholdPolicy::adaptive()), DimensionError);
}

TEST(McAggregate, MajorityVoteTiesGoToBackground) {
  const std::vector<Tensor<double>> trials{pixel(0.1, 0.8, 0.1), pixel(0.1, 0.1, 0.8)};
  McConfig c;
  const auto o = aggregate_trials(std::span<const Tensor<double>>(trials), ThresholdPolicy::fixed(0.75), Aggregation::MajorityVote);
  EXPECT_EQ(o.hardened.data[0], kBackground);
  const std::vector<Tensor<double>> three{pixel(0.1, 0.8, 0.1), pixel(0.1, 0.1, 0.8), pixel(0.05, 0.9, 0.05)};
  EXPECT_EQ(aggregate_trials(std::span<const Tensor<double>>(three), ThresholdPolicy::fixed(0.75), Aggregation::MajorityVote)
                .hardened.data[0],
            kInterior);
}

TEST(Harden, FixedThresholdUsesGreaterOrEqual) {
  EXPECT_EQ(harden(pixel(0.1, 0.8, 0.1), ThresholdPolicy::fixed(0.75)).mask.data[0], kInterior);
  EXPECT_EQ(harden(pixel(0.125, 0.75, 0.125), ThresholdPolicy::fixed(0.75)).mask.data[0], kInterior);
  EXPECT_EQ(harden(pixel(0.1, 0.7, 0.2), ThresholdPolicy::fixed(0.75)).mask.data[0], kBoundary);
  EXPECT_EQ(harden(pixel(0.2, 0.7, 0.1), ThresholdPolicy::fixed(0.75)).mask.data[0], kBackground);
  EXPECT_EQ(harden(pixel(0.15, 0.7, 0.15), ThresholdPolicy::fixed(0.75)).mask.data[0], kBackground);
}

TEST(Harden, ArgmaxPolicy) {
  const auto r = harden(pixel(0.3, 0.4, 0.3), ThresholdPolicy::argmax());
  EXPECT_EQ(r.mask.data[0], kInterior);
  EXPECT_TRUE(std::isnan(r.threshold));
}

TEST(Harden, RaisingThresholdNeverAddsInterior) {
  const auto o = aggregate_trials(std::span<const Tensor<double>>(checks::random_trials(4, 3, 20, 20)), ThresholdPolicy::adaptive());
  long prev = 1L << 30;
  for (int t = 0; t <= 20; ++t) {
    const auto m = harden(o.mean_probs, ThresholdPolicy::fixed(t / 20.0)).mask;
    const long n = std::count(m.data.begin(), m.data.end(), kInterior);
    EXPECT_LE(n, prev);
    prev = n;
  }
}

TEST(AdaptiveThreshold, BimodalHistogram) {
  std::vector<double> v;
  for (int i = 0; i < 500; ++i) {
    v.push_back(0.1 + 0.0001 * (i % 7));
    v.push_back(0.9 - 0.0001 * (i % 7));
  }
  const auto r = adaptive_threshold(v);
  EXPECT_FALSE(r.fallback);
  EXPECT_GE(r.threshold, 0.4);
  EXPECT_LE(r.threshold, 0.6);
}

TEST(AdaptiveThreshold, DegenerateFallsBack) {
  const std::vector<double> flat(100, 0.42);
  const auto r = adaptive_threshold(flat);
  EXPECT_TRUE(r.fallback);
  EXPECT_EQ(r.threshold, 0.75);
  EXPECT_TRUE(adaptive_threshold({}).fallback);
}

TEST(AdaptiveThreshold, ClampedToRange) {
  std::vector<double> low;
  for (int i = 0; i < 100; ++i) low.push_back(i % 2 ? 0.01 : 0.05);
  EXPECT_EQ(adaptive_threshold(low).threshold, 0.3);
}

TEST(McPredict, TrialCountOneEqualsTenAtRateZero) {
  const auto net = checks::small_net(3);
  const auto x = checks::random_input(4, 4, 16, 16);
  McConfig one, ten;
  one.trials = 1;
  ten.trials = 10;
  one.inference_dropout_rate = ten.inference_dropout_rate = 0.0;
  const auto a = mc_predict(net, x, one), b = mc_predict(net, x, ten);
  EXPECT_EQ(a.mean_probs.data, b.mean_probs.data);
  EXPECT_EQ(a.hardened.data, b.hardened.data);
}

TEST(McPredict, SeededAndThreadIndependent) {
  const auto net = checks::small_net(3);
  const auto x = checks::random_input(4, 4, 16, 16);
  McConfig c;
  c.trials = 4;
  c.inference_dropout_rate = 0.3;
  c.seed = 77;
  set_thread_cap(1);
  const auto a = mc_predict(net, x, c);
  set_thread_cap(4);
  const auto b = mc_predict(net, x, c);
  set_thread_cap(1);
  EXPECT_EQ(a.mean_probs.data, b.mean_probs.data);
  EXPECT_EQ(a.mutual_info.data, b.mutual_info.data);
  c.seed = 78;
  EXPECT_NE(mc_predict(net, x, c).mean_probs.data, a.mean_probs.data);
}

TEST(McPredict, ValidatesConfig) {
  const auto net = checks::small_net(3);
  const auto x = checks::random_input(4, 4, 16, 16);
  McConfig c;
  c.trials = 0;
  EXPECT_THROW(mc_predict(net, x, c), ConfigError);
  c.trials = 2;
  c.inference_dropout_rate = 1.0;
  EXPECT_THROW(mc_predict(net, x, c), ConfigError);
}

TEST(Stitching, CoresMatchIndependentWindows) {
  const auto v = checks::stitching_suite();
  EXPECT_TRUE(v.pass) << v.detail;
}

TEST(Stitching, SingleTileEqualsCroppedWindow) {
  const auto net = checks::small_net(8);
  const TileScheme tiles{32, 48};
  const auto scene = checks::random_input(2, 4, 32, 32);
  McConfig c;
  c.trials = 2;
  c.inference_dropout_rate = 0.2;
  const auto s = predict_scene(net, scene, tiles, c);
  const auto w = mc_predict(net, extract_window(scene, tiles, 0, 0), tile_config(c, 0, 0));
  for (int k = 0; k < 3; ++k)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) ASSERT_EQ(s.mean_probs(k, y, x), w.mean_probs(k, y + 8, x + 8));
}

TEST(Stitching, ZeroOverlapConcatenates) {
  const auto net = checks::small_net(8);
  const TileScheme tiles{16, 16};
  const auto scene = checks::random_input(2, 4, 32, 48);
  McConfig c;
  c.trials = 2;
  c.inference_dropout_rate = 0.2;
  const auto s = predict_scene(net, scene, tiles, c);
  for (int r = 0; r < 2; ++r)
    for (int q = 0; q < 3; ++q) {
      const auto w = mc_predict(net, extract_window(scene, tiles, r, q), tile_config(c, r, q));
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) ASSERT_EQ(s.entropy(0, r * 16 + y, q * 16 + x), w.entropy(0, y, x));
    }
}

TEST(Stitching, ReflectPadding) {
  EXPECT_EQ(reflect_index(-1, 5), 1);
  EXPECT_EQ(reflect_index(-2, 5), 2);
  EXPECT_EQ(reflect_index(5, 5), 3);
  EXPECT_EQ(reflect_index(2, 5), 2);
  EXPECT_EQ(reflect_index(-3, 1), 0);
}

TEST(Stitching, MismatchedSceneRejected) {
  const auto net = checks::small_net(8);
  McConfig c;
  c.trials = 1;
  EXPECT_THROW(predict_scene(net, checks::random_input(2, 4, 40, 32), TileScheme{32, 48}, c), DimensionError);
  EXPECT_THROW(predict_scene(net, checks::random_input(2, 4, 32, 32), TileScheme{32, 47}, c), ConfigError);
}

// ---------------------------------------------------------------- evaluation

TEST(Metrics, SuitePasses) {
  const auto v = checks::metric_suite();
  EXPECT_TRUE(v.pass) << v.detail;
}

TEST(Metrics, HandArithmetic) {
  ConfusionCounts c;
  c.tp = 3;
  c.fp = 1;
  c.fn = 1;
  const auto m = metrics(c);
  EXPECT_DOUBLE_EQ(m.precision, 0.75);
  EXPECT_DOUBLE_EQ(m.recall, 0.75);
  EXPECT_DOUBLE_EQ(m.f1, 0.75);
  EXPECT_DOUBLE_EQ(m.iou, 0.6);
  EXPECT_FALSE(m.degenerate);
}

TEST(Metrics, DegenerateConventions) {
  ConfusionCounts empty;
  empty.tn = 10;
  auto m = metrics(empty);
  EXPECT_TRUE(m.degenerate);
  EXPECT_EQ(m.precision, 1.0);
  EXPECT_EQ(m.recall, 1.0);
  EXPECT_EQ(m.f1, 1.0);
  EXPECT_EQ(m.iou, 1.0);
  ConfusionCounts missed;
  missed.fn = 4;
  m = metrics(missed);
  EXPECT_EQ(m.precision, 0.0);
  EXPECT_EQ(m.recall, 0.0);
  EXPECT_TRUE(m.degenerate);
  ConfusionCounts perfect;
  perfect.tp = 7;
  m = metrics(perfect);
  EXPECT_EQ(m.precision, 1.0);
  EXPECT_EQ(m.iou, 1.0);
  EXPECT_FALSE(m.degenerate);
}

TEST(Metrics, SwapSymmetryAndIgnoreExclusion) {
  Rng rng(9);
  for (int n = 0; n < 20; ++n) {
    auto a = checks::random_mask(rng, 16, 16), b = checks::random_mask(rng, 16, 16);
    for (auto& v : a.data)
      if (v == kIgnore) v = kBackground;
    for (auto& v : b.data)
      if (v == kIgnore) v = kBackground;
    const auto ab = confusion_counts(a, b, BoundaryMode::Ignore), ba = confusion_counts(b, a, BoundaryMode::Ignore);
    const auto nab = confusion_counts(a, b), nba = confusion_counts(b, a);
    EXPECT_EQ(nab.fp, nba.fn);
    EXPECT_EQ(nab.fn, nba.fp);
    EXPECT_DOUBLE_EQ(metrics(nab).iou, metrics(nba).iou);
    EXPECT_DOUBLE_EQ(metrics(nab).f1, metrics(nba).f1);
    (void)ab;
    (void)ba;
  }
  auto pred = checks::random_mask(rng, 16, 16);
  const auto ref = checks::random_mask(rng, 16, 16);
  const auto before = confusion_counts(pred, ref);
  for (std::size_t i = 0; i < ref.data.size(); ++i)
    if (ref.data[i] == kIgnore) pred.data[i] = pred.data[i] == kInterior ? kBackground : kInterior;
  const auto after = confusion_counts(pred, ref);
  EXPECT_EQ(before.tp, after.tp);
  EXPECT_EQ(before.fp, after.fp);
  EXPECT_EQ(before.fn, after.fn);
  EXPECT_EQ(before.tn, after.tn);
}

TEST(Metrics, AddingCorrectPixelNeverHurts) {
  for (long tp = 0; tp < 5; ++tp)
    for (long fp = 0; fp < 4; ++fp)
      for (long fn = 1; fn < 4; ++fn) {
        ConfusionCounts a;
        a.tp = tp, a.fp = fp, a.fn = fn;
        ConfusionCounts b = a;
        ++b.tp, --b.fn;
        const auto ma = metrics(a), mb = metrics(b);
        EXPECT_GE(mb.precision, ma.precision);
        EXPECT_GE(mb.recall, ma.recall);
        EXPECT_GE(mb.f1, ma.f1);
        EXPECT_GE(mb.iou, ma.iou);
      }
}

TEST(Metrics, DimensionMismatchThrows) {
  EXPECT_THROW(confusion_counts(LabelMask(2, 2), LabelMask(2, 3)), DimensionError);
  EXPECT_THROW(spatial_confusion(LabelMask(2, 2), LabelMask(3, 2)), DimensionError);
}

TEST(SpatialConfusion, CheckerboardAgainstAllInterior) {
  LabelMask ref(4, 4, kInterior), pred(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) pred(y, x) = (x + y) % 2 ? kInterior : kBackground;
  const auto r = spatial_confusion(pred, ref);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) EXPECT_EQ(r.data[static_cast<std::size_t>(y * 4 + x)], (x + y) % 2 ? kCatTP : kCatFN);
}

TEST(SpatialConfusion, HistogramEqualsCounts) {
  Rng rng(12);
  for (auto mode : {BoundaryMode::Negative, BoundaryMode::Ignore}) {
    const auto p = checks::random_mask(rng, 20, 20), q = checks::random_mask(rng, 20, 20);
    const auto a = category_counts(spatial_confusion(p, q, mode)), b = confusion_counts(p, q, mode);
    EXPECT_EQ(a.tp, b.tp);
    EXPECT_EQ(a.fp, b.fp);
    EXPECT_EQ(a.fn, b.fn);
    EXPECT_EQ(a.tn, b.tn);
    EXPECT_EQ(a.ignore_count, b.ignore_count);
    const auto self = spatial_confusion(p, p, mode);
    for (auto v : self.data) EXPECT_TRUE(v == kCatTP || v == kCatTN || v == kCatIgnore);
  }
}

TEST(Report, RowsCsvLayout) {
  std::vector<EvalRow> rows{{"r1", "mm-lab", "2019", "t0", {3, 1, 1, 5, 0}}};
  const auto l = lines(rows_csv(rows));
  ASSERT_EQ(l.size(), 2u);
  EXPECT_EQ(l[0], "run_id,norm_scheme,year,tile_id,tp,fp,fn,tn,precision,recall,f1,iou,degenerate_flag");
  EXPECT_EQ(l[1], "r1,mm-lab,2019,t0,3,1,1,5,0.750000,0.750000,0.750000,0.600000,0");
  EXPECT_THROW(rows_csv({}), InputError);
}

TEST(Report, SingleRunFlaggedBest) {
  std::vector<EvalRow> rows{{"r1", "mm-lab", "2019", "t0", {3, 1, 1, 5, 0}}};
  const auto l = lines(report_csv(rows, GroupBy::Run));
  ASSERT_EQ(l.size(), 2u);
  const auto f = fields(l[1]);
  EXPECT_EQ(f[f.size() - 1], "best");
  EXPECT_EQ(f[f.size() - 4], "best");
}

TEST(Report, AggregateIsMicroAveraged) {
  std::vector<EvalRow> rows{{"r1", "zv-gpb", "2019", "t0", {9, 1, 0, 10, 0}}, {"r1", "zv-gpb", "2020", "t0", {1, 0, 4, 10, 0}}};
  const auto f = fields(lines(report_csv(rows, GroupBy::Run))[1]);
  const auto pooled = metrics(ConfusionCounts{10, 1, 4, 20, 0});
  EXPECT_EQ(f[11], detail::fmt6(pooled.iou));
  const double macro = 0.5 * (metrics(rows[0].counts).iou + metrics(rows[1].counts).iou);
  EXPECT_EQ(f[14], detail::fmt6(macro));
  EXPECT_NE(f[11], f[14]);
}

TEST(Report, YearPivotLayout) {
  std::vector<EvalRow> rows{{"a", "mm-lab", "2019", "t0", {9, 1, 0, 10, 0}},
                            {"a", "mm-lab", "2020", "t0", {5, 5, 0, 10, 0}},
                            {"b", "zv-gpb", "2019", "t0", {5, 1, 4, 10, 0}},
                            {"b", "zv-gpb", "2020", "t0", {8, 1, 1, 10, 0}}};
  const auto l = lines(report_csv(rows, GroupBy::Year));
  ASSERT_EQ(l.size(), 5u);
  EXPECT_EQ(l[0], "run_id,norm_scheme,metric,2019,2019_flag,2020,2020_flag,all,all_flag");
  EXPECT_EQ(fields(l[1])[2], "iou");
  EXPECT_EQ(fields(l[2])[2], "f1");
  EXPECT_EQ(fields(l[3])[0], "b");
  EXPECT_EQ(fields(l[1])[4], "best");
  EXPECT_EQ(fields(l[3])[4], "second");
  EXPECT_EQ(fields(l[3])[6], "best");
  EXPECT_EQ(fields(l[1])[3], detail::fmt6(0.9));
}
