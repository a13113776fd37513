#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "fieldshift/core/rng.hpp"
#include "fieldshift/labeling.hpp"
#include "fieldshift/scene_sim.hpp"
#include "oracles.hpp"

using namespace fieldshift;

namespace {

SceneConfig small_scene(std::uint64_t seed, int years = 3) {
  SceneConfig c;
  c.scene_size_px = 128;
  c.seed = seed;
  for (int k = 0; k < years; ++k) c.years.push_back(identity_shift("y" + std::to_string(k + 1), 4));
  return c;
}

double band_mean(const Chip& c, int b) {
  double s = 0;
  for (float v : c.pixels.channel(b)) s += v;
  return s / static_cast<double>(c.pixels.plane());
}

LabelMask rotate(const LabelMask& m) {
  LabelMask r(m.width, m.height);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) r(m.width - 1 - x, y) = m(y, x);
  return r;
}

}  // namespace

TEST(Rng, DerivedStreamsAreStableAndDistinct) {
  EXPECT_EQ(derive_seed(7, {1, 2}), derive_seed(7, {1, 2}));
  EXPECT_NE(derive_seed(7, {1, 2}), derive_seed(7, {2, 1}));
  EXPECT_NE(derive_seed(7, {1}), derive_seed(8, {1}));
  EXPECT_NE(stream_tag("scene"), stream_tag("eval"));
  Rng a = make_rng(3, {stream_tag("x")});
  for (int i = 0; i < 1000; ++i) {
    const double u = uniform01(a);
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

TEST(SceneSim, SameConfigIsBitIdentical) {
  const Scene a = generate_scene(small_scene(11));
  const Scene b = generate_scene(small_scene(11));
  ASSERT_EQ(a.years.size(), b.years.size());
  for (std::size_t k = 0; k < a.years.size(); ++k) {
    EXPECT_EQ(a.years[k].imagery.pixels.data, b.years[k].imagery.pixels.data);
    EXPECT_EQ(a.years[k].field_cells, b.years[k].field_cells);
  }
}

TEST(SceneSim, NoShiftNoChurnGivesIdenticalYears) {
  SceneConfig c = small_scene(5);
  c.churn_fraction = 0.0;
  const Scene s = generate_scene(c);
  EXPECT_EQ(s.years[0].imagery.pixels.data, s.years[1].imagery.pixels.data);
  EXPECT_EQ(s.years[0].imagery.pixels.data, s.years[2].imagery.pixels.data);
}

TEST(SceneSim, ZeroDensityHasNoFields) {
  SceneConfig c = small_scene(5);
  c.field_density = 0.0;
  const Scene s = generate_scene(c);
  for (std::size_t k = 0; k < s.years.size(); ++k) {
    EXPECT_TRUE(s.years[k].polygons.empty());
    EXPECT_EQ(scene_labels(s, k).count(kBackground), s.years[k].imagery.pixels.plane());
  }
}

TEST(SceneSim, NirOffsetShiftsYearMean) {
  SceneConfig c;
  c.seed = 7;
  c.years = {identity_shift("y1", 4), identity_shift("y2", 4), identity_shift("y3", 4)};
  c.years[1].band_mean_offset = {0, 0, 0, 0.08};
  const Scene s = generate_scene(c);
  for (int b = 0; b < 4; ++b) {
    const double d = band_mean(s.years[1].imagery, b) - band_mean(s.years[0].imagery, b);
    EXPECT_NEAR(d, b == 3 ? 0.08 : 0.0, 0.005) << "band " << b;
  }
}

TEST(SceneSim, ChurnStaysWithinFraction) {
  SceneConfig c = small_scene(9);
  c.scene_size_px = 256;
  c.churn_fraction = 0.2;
  const Scene s = generate_scene(c);
  for (std::size_t k = 1; k < s.years.size(); ++k) {
    const auto& prev = s.years[k - 1].field_cells;
    const auto& cur = s.years[k].field_cells;
    std::vector<int> diff;
    std::set_symmetric_difference(prev.begin(), prev.end(), cur.begin(), cur.end(), std::back_inserter(diff));
    EXPECT_LE(static_cast<double>(diff.size()), std::llround(0.2 * static_cast<double>(prev.size())) + 0.0);
    EXPECT_GT(diff.size(), 0u);
  }
}

TEST(YearShift, IdentityAndAdditive) {
  Rng rng(1);
  Chip c = make_chip(2, 8, 8, 0.5f);
  c.at(0, 3, 3) = 0.7f;
  EXPECT_EQ(apply_year_shift(c, identity_shift("", 2), rng).pixels.data, c.pixels.data);
  Chip k = make_chip(2, 8, 8, 0.5f);
  YearShift add = identity_shift("", 2);
  add.band_mean_offset = {0.1, 0.1};
  for (float v : apply_year_shift(k, add, rng).pixels.data) EXPECT_NEAR(v, 0.6f, 1e-7);
}

TEST(YearShift, ScaleDoublesStd) {
  Rng rng(2), fill(3);
  Chip c = make_chip(3, 32, 32);
  for (float& v : c.pixels.data) v = static_cast<float>(uniform(fill, 0.2, 0.4));
  YearShift s = identity_shift("", 3);
  s.band_std_scale = {2, 2, 2};
  const Chip out = apply_year_shift(c, s, rng);
  for (int b = 0; b < 3; ++b) {
    std::vector<double> in(c.pixels.channel(b).begin(), c.pixels.channel(b).end());
    std::vector<double> o(out.pixels.channel(b).begin(), out.pixels.channel(b).end());
    EXPECT_NEAR(oracle::mean_std(o).second, 2.0 * oracle::mean_std(in).second, 1e-6);
  }
}

TEST(YearShift, BandCountMismatchThrows) {
  Rng rng(1);
  EXPECT_THROW(apply_year_shift(make_chip(3, 4, 4), identity_shift("", 4), rng), DimensionError);
}

TEST(ChipGrid, WindowArithmetic) {
  SceneConfig c = small_scene(3, 1);
  c.scene_size_px = 512;
  const Scene s = generate_scene(c);
  const auto chips = export_chips(s, 224, 12);
  const int per_axis = (512 - 2 * 12) / 224;
  EXPECT_EQ(per_axis, 2);
  ASSERT_EQ(chips.size(), static_cast<std::size_t>(per_axis * per_axis));
  for (const auto& ch : chips) {
    EXPECT_EQ(ch.image.height(), 248);
    EXPECT_EQ(ch.image.width(), 248);
    EXPECT_EQ(ch.image.info.core_size, 224);
    EXPECT_EQ(ch.label.count(kIgnore), static_cast<std::size_t>(248 * 248 - 224 * 224));
  }
}

TEST(ChipGrid, ZeroOverlapTilesExactly) {
  const Scene s = generate_scene(small_scene(4, 1));
  const auto chips = export_chips(s, 32, 0);
  ASSERT_EQ(chips.size(), 16u);
  std::vector<int> hits(128 * 128, 0);
  for (const auto& ch : chips)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const int sy = ch.image.info.offset_y + y, sx = ch.image.info.offset_x + x;
        ++hits[sy * 128 + sx];
        ASSERT_EQ(ch.image.at(2, y, x), s.years[0].imagery.at(2, sy, sx));
      }
  for (int h : hits) EXPECT_EQ(h, 1);
}

TEST(ChipGrid, SceneSmallerThanChipThrows) {
  const Scene s = generate_scene(small_scene(4, 1));
  EXPECT_THROW(export_chips(s, 256, 0), DimensionError);
}

TEST(Labeling, EmptyPolygonsAreBackground) {
  const auto m = rasterize_fields({}, 16, 16);
  EXPECT_EQ(m.count(kBackground), 256u);
}

TEST(Labeling, RectangleInteriorMatchesBruteForce) {
  const Polygon r = rectangle(10, 10, 20, 20);
  const auto m = rasterize_fields(std::vector<Polygon>{r}, 32, 32);
  std::size_t brute = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) brute += point_in_polygon(r, x + 0.5, y + 0.5) ? 1 : 0;
  EXPECT_EQ(brute, 100u);
  EXPECT_EQ(m.count(kInterior), brute);
}

TEST(Labeling, DisjointRectanglesAdd) {
  const std::vector<Polygon> a{rectangle(1, 1, 6, 9)}, b{rectangle(12, 3, 20, 7)}, ab{a[0], b[0]};
  EXPECT_EQ(rasterize_fields(ab, 24, 24).count(kInterior),
            rasterize_fields(a, 24, 24).count(kInterior) + rasterize_fields(b, 24, 24).count(kInterior));
}

TEST(Labeling, BoundaryBandMatchesChebyshevOracle) {
  const auto m = rasterize_fields(std::vector<Polygon>{rectangle(10, 10, 20, 20)}, 32, 32);
  const auto buf = buffer_boundaries(m, 2);
  const auto split = boundary_split(2);
  EXPECT_EQ(split.inward, 1);
  EXPECT_EQ(split.outward, 1);
  // brute force: Chebyshev distance to the nearest pixel of the other class
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      int dist = 1 << 20;
      for (int v = 0; v < 32; ++v)
        for (int u = 0; u < 32; ++u)
          if (m(v, u) != m(y, x)) dist = std::min(dist, std::max(std::abs(v - y), std::abs(u - x)));
      const bool field = m(y, x) == kInterior;
      const int reach = field ? split.inward : split.outward;
      const std::uint8_t want = dist <= reach ? kBoundary : m(y, x);
      ASSERT_EQ(buf(y, x), want) << y << "," << x;
    }
  EXPECT_EQ(buf.count(kInterior), 64u);
  EXPECT_EQ(buf.count(kBoundary), 12u * 12u - 64u);
}

TEST(Labeling, BufferEdgeCases) {
  LabelMask bg(8, 8, kBackground);
  EXPECT_EQ(buffer_boundaries(bg, 2).data, bg.data);
  EXPECT_THROW(buffer_boundaries(bg, 0), ConfigError);
}

TEST(Labeling, BufferCommutesWithRotation) {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    LabelMask m(20, 20, kBackground);
    for (int r = 0; r < 3; ++r) {
      const int x0 = static_cast<int>(uniform_index(rng, 14)), y0 = static_cast<int>(uniform_index(rng, 14));
      const int w = 2 + static_cast<int>(uniform_index(rng, 5)), h = 2 + static_cast<int>(uniform_index(rng, 5));
      for (int y = y0; y < std::min(20, y0 + h); ++y)
        for (int x = x0; x < std::min(20, x0 + w); ++x) m(y, x) = kInterior;
    }
    for (int t : {1, 2, 3}) EXPECT_EQ(buffer_boundaries(rotate(m), t).data, rotate(buffer_boundaries(m, t)).data);
  }
}

TEST(Labeling, TouchingFieldsShareABoundary) {
  const std::vector<Polygon> two{rectangle(2, 2, 10, 10), rectangle(10, 2, 18, 10)};
  const auto buf = buffer_boundaries(rasterize_field_ids(two, 20, 12), 2);
  for (int y = 3; y < 9; ++y) {
    EXPECT_EQ(buf(y, 9), kBoundary);
    EXPECT_EQ(buf(y, 10), kBoundary);
  }
}

TEST(Labeling, PadWithIgnore) {
  LabelMask m(200, 200, kInterior);
  const auto p = pad_with_ignore(m, 224);
  EXPECT_EQ(p.height, 224);
  for (int y = 0; y < 224; ++y)
    for (int x = 0; x < 224; ++x) {
      const bool frame = y < 12 || y >= 212 || x < 12 || x >= 212;
      ASSERT_EQ(p(y, x), frame ? kIgnore : kInterior);
    }
  EXPECT_EQ(pad_with_ignore(m, 200).data, m.data);
  LabelMask ig(10, 10, kIgnore);
  EXPECT_EQ(pad_with_ignore(ig, 16).count(kIgnore), 256u);
  EXPECT_THROW(pad_with_ignore(m, 100), DimensionError);
}
