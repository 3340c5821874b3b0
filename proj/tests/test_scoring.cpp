#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "patchbank/scoring.hpp"
#include "test_util.hpp"

using namespace patchbank;
using testutil::Gen;

namespace {

PatchDistances dist_of(int h, int w, const std::vector<double>& v) {
  PatchDistances d(h, w);
  d.values = v;
  return d;
}

PatchDistances random_dist(Gen& g, int h, int w, double p_excluded = 0.0) {
  PatchDistances d(h, w);
  for (std::size_t c = 0; c < d.cells(); ++c) {
    d.excluded[c] = g.coin(p_excluded);
    d.values[c] = d.excluded[c] ? 0.0 : g.uniform(0, 2);
  }
  if (d.included().empty()) {
    d.excluded[0] = false;
    d.values[0] = g.uniform(0, 2);
  }
  return d;
}

ScoreConfig agg(Aggregation a, double fraction = 0.01) {
  ScoreConfig c;
  c.aggregation = a;
  c.fraction = fraction;
  return c;
}

// Mirror index into [0, n) for the half-sample symmetric boundary.
int mirror(int i, int n) {
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - 1 - i;
  return i;
}

// Dense oracle: per-pixel bilinear sample of the cell-centered grid, then a
// direct 2-D convolution with the normalized, truncated Gaussian.
std::vector<double> dense_map(const PatchDistances& d, int H, int W, double sigma) {
  std::vector<double> up(static_cast<std::size_t>(H) * W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double gy = std::min(std::max((y + 0.5) / H * d.grid_h - 0.5, 0.0), d.grid_h - 1.0);
      const double gx = std::min(std::max((x + 0.5) / W * d.grid_w - 0.5, 0.0), d.grid_w - 1.0);
      const int r0 = static_cast<int>(gy), c0 = static_cast<int>(gx);
      const int r1 = std::min(r0 + 1, d.grid_h - 1), c1 = std::min(c0 + 1, d.grid_w - 1);
      const double ty = gy - r0, tx = gx - c0;
      up[y * W + x] = (1 - ty) * ((1 - tx) * d.at(r0, c0) + tx * d.at(r0, c1)) +
                      ty * ((1 - tx) * d.at(r1, c0) + tx * d.at(r1, c1));
    }
  const int R = static_cast<int>(std::ceil(4 * sigma));
  const int K = 2 * R + 1;
  std::vector<double> kern(static_cast<std::size_t>(K) * K);
  double norm = 0;
  for (int i = -R; i <= R; ++i)
    for (int j = -R; j <= R; ++j) norm += kern[(i + R) * K + j + R] = std::exp(-(i * i + j * j) / (2 * sigma * sigma));
  std::vector<double> out(up.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = 0;
      for (int i = -R; i <= R; ++i)
        for (int j = -R; j <= R; ++j)
          s += kern[(i + R) * K + j + R] * up[mirror(y + i, H) * W + mirror(x + j, W)];
      out[y * W + x] = s / norm;
    }
  return out;
}

}  // namespace

TEST(Aggregate, TopTwoOfTwoHundred) {
  std::vector<double> v(200);
  std::iota(v.begin(), v.end(), 1.0);
  EXPECT_DOUBLE_EQ(aggregate(dist_of(10, 20, v), agg(Aggregation::kMeanTopFraction)), 199.5);
}

TEST(Aggregate, CeilingKeepsOnePatch) {
  EXPECT_EQ(tail_count(0.01, 3), 1u);
  EXPECT_EQ(aggregate(dist_of(1, 3, {3, 1, 2}), agg(Aggregation::kMeanTopFraction)), 3.0);
  EXPECT_EQ(tail_count(0.07, 100), 7u);
  EXPECT_EQ(tail_count(1.0, 9), 9u);
  EXPECT_EQ(tail_count(0.5, 3), 2u);
}

TEST(Aggregate, ConstantInput) {
  const auto d = dist_of(3, 4, std::vector<double>(12, 0.37));
  for (auto a : {Aggregation::kMeanTopFraction, Aggregation::kMaxPatch, Aggregation::kMaxMap})
    EXPECT_NEAR(aggregate(d, agg(a)), 0.37, 1e-12);
}

TEST(Aggregate, AllExcludedIsAnError) {
  PatchDistances d(2, 2);
  d.excluded.assign(4, true);
  EXPECT_THROW(aggregate(d, agg(Aggregation::kMaxPatch)), EmptyInput);
}

TEST(Aggregate, ExcludedCellsNeverCount) {
  PatchDistances d = dist_of(1, 3, {0.1, 0.2, 0.0});
  d.excluded[2] = true;
  d.values[2] = 0.0;
  EXPECT_DOUBLE_EQ(aggregate(d, agg(Aggregation::kMeanTopFraction, 1.0)), 0.15);
}

TEST(AggregateProperty, OrderBoundAgainstSortingOracle) {
  for (int i = 0; i < 200; ++i) {
    Gen g = testutil::case_gen(31, i);
    const auto d = random_dist(g, g.integer(1, 12), g.integer(1, 12), g.coin() ? 0.3 : 0.0);
    const double f = g.coin(0.2) ? 0.01 : g.uniform(1e-3, 1.0);
    const double got = aggregate(d, agg(Aggregation::kMeanTopFraction, f));
    auto inc = d.included();
    std::sort(inc.rbegin(), inc.rend());
    const std::size_t m = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(f * inc.size() - 1e-9)));
    const double want = std::accumulate(inc.begin(), inc.begin() + std::min(m, inc.size()), 0.0) /
                        static_cast<double>(std::min(m, inc.size()));
    ASSERT_NEAR(got, want, 1e-12);
    const double mean = std::accumulate(inc.begin(), inc.end(), 0.0) / inc.size();
    ASSERT_LE(mean, got + 1e-12);
    ASSERT_LE(got, inc.front());
    ASSERT_LE(got, aggregate(d, agg(Aggregation::kMaxPatch)));
  }
}

TEST(AggregateProperty, FullFractionIsTheMean) {
  for (int i = 0; i < 100; ++i) {
    Gen g = testutil::case_gen(32, i);
    const auto d = random_dist(g, g.integer(1, 10), g.integer(1, 10), 0.2);
    const auto inc = d.included();
    ASSERT_NEAR(aggregate(d, agg(Aggregation::kMeanTopFraction, 1.0)),
                std::accumulate(inc.begin(), inc.end(), 0.0) / inc.size(), 1e-12);
  }
}

TEST(AggregateProperty, ConstantSetsAreFixedPoints) {
  for (int i = 0; i < 100; ++i) {
    Gen g = testutil::case_gen(33, i);
    const double c = g.uniform(0, 2);
    const int h = g.integer(1, 10), w = g.integer(1, 10);
    const auto d = dist_of(h, w, std::vector<double>(static_cast<std::size_t>(h) * w, c));
    ASSERT_EQ(aggregate(d, agg(Aggregation::kMeanTopFraction, g.uniform(1e-3, 1))), c);
    ASSERT_EQ(aggregate(d, agg(Aggregation::kMaxPatch)), c);
  }
}

TEST(AggregateProperty, PermutationInvariant) {
  for (int i = 0; i < 100; ++i) {
    Gen g = testutil::case_gen(34, i);
    const int h = g.integer(1, 10), w = g.integer(1, 10);
    const auto d = random_dist(g, h, w, 0.2);
    std::vector<std::size_t> perm(d.cells());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), g.engine());
    PatchDistances p(h, w);
    for (std::size_t c = 0; c < d.cells(); ++c) {
      p.values[c] = d.values[perm[c]];
      p.excluded[c] = d.excluded[perm[c]];
    }
    const double f = g.uniform(1e-3, 1);
    ASSERT_EQ(aggregate(p, agg(Aggregation::kMeanTopFraction, f)), aggregate(d, agg(Aggregation::kMeanTopFraction, f)));
    ASSERT_EQ(aggregate(p, agg(Aggregation::kMaxPatch)), aggregate(d, agg(Aggregation::kMaxPatch)));
  }
}

TEST(AggregateProperty, Monotone) {
  for (int i = 0; i < 100; ++i) {
    Gen g = testutil::case_gen(35, i);
    const auto d = random_dist(g, g.integer(1, 8), g.integer(1, 8), 0.2);
    PatchDistances up = d;
    for (std::size_t c = 0; c < up.cells(); ++c)
      if (!up.excluded[c] && g.coin()) up.values[c] += g.uniform(0, 0.5);
    for (auto a : {Aggregation::kMeanTopFraction, Aggregation::kMaxPatch, Aggregation::kMaxMap}) {
      const ScoreConfig cfg = agg(a, g.uniform(1e-3, 1));
      ASSERT_GE(aggregate(up, cfg), aggregate(d, cfg) - 1e-12) << "case " << i;
    }
  }
}

TEST(Map, ConstantStaysConstant) {
  const auto d = dist_of(3, 2, std::vector<double>(6, 0.8));
  const AnomalyMap m = make_map(d, 42, 28, {});
  for (double v : m.values) EXPECT_NEAR(v, 0.8, 1e-12);
}

TEST(Map, SingleCellPeaksAtItsCenter) {
  PatchDistances d(5, 5);
  d.values[2 * 5 + 2] = 1.0;
  ScoreConfig cfg;
  cfg.sigma = 2.0;
  const AnomalyMap m = make_map(d, 70, 70, cfg);
  const auto it = std::max_element(m.values.begin(), m.values.end());
  const std::size_t at = static_cast<std::size_t>(it - m.values.begin());
  // Cell (2,2) spans pixels 28..41; its center lies between pixels 34 and 35.
  EXPECT_TRUE(at / 70 == 34 || at / 70 == 35);
  EXPECT_TRUE(at % 70 == 34 || at % 70 == 35);
  EXPECT_LE(*it, 1.0);
  const double mass = std::accumulate(m.values.begin(), m.values.end(), 0.0);
  EXPECT_LE(mass, 196.0 * 1.0 + 1e-9);
}

TEST(Map, TwoByTwoMatchesDenseOracle) {
  const auto d = dist_of(2, 2, {0.1, 0.9, 0.4, 0.2});
  const AnomalyMap m = make_map(d, 28, 28, {});
  const auto want = dense_map(d, 28, 28, 4.0);
  for (std::size_t k = 0; k < want.size(); ++k) ASSERT_NEAR(m.values[k], want[k], 1e-6);
}

TEST(MapProperty, MatchesDenseOracleAndStaysBelowMax) {
  for (int i = 0; i < 100; ++i) {
    Gen g = testutil::case_gen(36, i);
    const int h = g.integer(1, 8), w = g.integer(1, 8);
    const auto d = random_dist(g, h, w);
    const int H = g.integer(1, 112), W = g.integer(1, 112);
    ScoreConfig cfg;
    cfg.sigma = g.coin(0.3) ? 4.0 : g.uniform(0.3, 4.0);
    const AnomalyMap m = make_map(d, H, W, cfg);
    const auto want = dense_map(d, H, W, cfg.sigma);
    for (std::size_t k = 0; k < want.size(); ++k) ASSERT_NEAR(m.values[k], want[k], 1e-6) << "case " << i;
    ASSERT_LE(m.max(), *std::max_element(d.values.begin(), d.values.end()) + 1e-9);
  }
}

TEST(Map, RejectsBadConfig) {
  const auto d = dist_of(1, 1, {1});
  ScoreConfig cfg;
  cfg.sigma = 0;
  EXPECT_THROW(make_map(d, 14, 14, cfg), InvalidInput);
  EXPECT_THROW(make_map(d, 0, 14, {}), InvalidInput);
}

TEST(Heatmap, ColorIndices) {
  EXPECT_EQ(colormap_index(0.0, 2.0), 0);
  EXPECT_EQ(colormap_index(2.0, 2.0), 255);
  EXPECT_EQ(colormap_index(1.0, 2.0), 128);  // 127.5 rounds half up
  EXPECT_EQ(colormap_index(-1.0, 2.0), 0);
  EXPECT_EQ(colormap_index(5.0, 2.0), 255);
}

TEST(Heatmap, UniformImages) {
  AnomalyMap zero(3, 4);
  const Image lo = render_heatmap(zero, 1.0);
  AnomalyMap full(3, 4);
  full.values.assign(12, 1.0);
  const Image hi = render_heatmap(full, 1.0);
  const auto& cm = heat_colormap();
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) {
        EXPECT_EQ(lo.at(x, y, c), cm[0][c]);
        EXPECT_EQ(hi.at(x, y, c), cm[255][c]);
      }
  EXPECT_NE(cm[0], cm[255]);
  EXPECT_THROW(render_heatmap(zero, 0.0), InvalidInput);
}

TEST(Heatmap, RawExportRoundTrips) {
  testutil::TempDir dir("heat");
  AnomalyMap m(2, 3);
  m.values = {0, 0.25, 0.5, 0.75, 1, 1.5};
  export_heatmap(m, 1.0, dir / "m.png", dir / "m.pfv");
  const auto raw = read_feature_file(dir / "m.pfv");
  EXPECT_EQ(raw.grid_h, 2);
  EXPECT_EQ(raw.grid_w, 3);
  for (int k = 0; k < 6; ++k) EXPECT_EQ(raw.features[k], static_cast<float>(m.values[k]));
  EXPECT_EQ(read_rgb_png(dir / "m.png").width, 3);
}

TEST(ScoreConfig, ParseAggregation) {
  EXPECT_EQ(parse_aggregation("max-patch").aggregation, Aggregation::kMaxPatch);
  EXPECT_EQ(parse_aggregation("max-map").aggregation, Aggregation::kMaxMap);
  EXPECT_DOUBLE_EQ(parse_aggregation("mean-top:0.05").fraction, 0.05);
  EXPECT_DOUBLE_EQ(parse_aggregation("mean-top").fraction, 0.01);
  EXPECT_THROW(parse_aggregation("mean-top:0"), InvalidInput);
  EXPECT_THROW(parse_aggregation("mean-top:1.5"), InvalidInput);
  EXPECT_THROW(parse_aggregation("mean-top:x"), InvalidInput);
  EXPECT_THROW(parse_aggregation("median"), InvalidInput);
  EXPECT_EQ(to_string(parse_aggregation("mean-top:0.25")), "mean-top:0.25");
  EXPECT_EQ(to_string(parse_aggregation("max-map")), "max-map");
}
