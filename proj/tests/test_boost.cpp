#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "support.hpp"

using namespace cfmdet;
using testsupport::Rng;

namespace {

// Window geometry that makes a D-dimensional sample set a 1-channel,
// 1 x D cell window at ratio 4.
TrainConfig flat_config(std::size_t d) {
  TrainConfig c;
  c.window_h = 4;
  c.window_w = std::uint32_t(4 * d);
  return c;
}

std::vector<std::uint32_t> iota_u32(std::size_t n) {
  std::vector<std::uint32_t> v(n);
  std::iota(v.begin(), v.end(), 0u);
  return v;
}

}  // namespace

TEST(Split, MatchesExhaustiveSearch) {
  Rng rng(1);
  for (int trial = 0; trial < 40; ++trial) {
    const auto n = std::size_t(rng.integer(2, 120)), d = std::size_t(rng.integer(1, 20));
    const auto s = testsupport::random_dyadic_samples(n, d, rng, trial % 3 == 0);
    const auto bins = std::uint32_t(trial % 2 ? 256 : rng.integer(2, 16));
    const BinnedFeatures data(s, bins);
    const auto got = find_best_split(data, s.labels, s.weights, iota_u32(n), iota_u32(d));
    const auto want = testsupport::exhaustive_split(s, data, s.weights);
    ASSERT_EQ(got.found, want.found) << "trial " << trial;
    if (!want.found) continue;
    EXPECT_EQ(got.feature, want.feature) << "trial " << trial;
    EXPECT_EQ(data.threshold(got.feature, got.bin), want.threshold) << "trial " << trial;
    EXPECT_EQ(got.impurity, want.impurity) << "trial " << trial;
  }
}

TEST(Split, TiesGoToLowestFeatureThenLowestThreshold) {
  // Two identical columns: the first must win.
  SampleSet s(2);
  const float xs[] = {0, 1, 2, 3};
  const int ys[] = {-1, -1, 1, 1};
  for (int i = 0; i < 4; ++i) s.add(std::vector<float>{xs[i], xs[i]}, ys[i], 0.25);
  const BinnedFeatures data(s, 4);
  const auto r = find_best_split(data, s.labels, s.weights, iota_u32(4), iota_u32(2));
  ASSERT_TRUE(r.found);
  EXPECT_EQ(r.feature, 0u);
  EXPECT_EQ(r.impurity, 0.0);
  // Pure split is possible at exactly one threshold between 1 and 2.
  EXPECT_GT(data.threshold(0, r.bin), 1.0f);
  EXPECT_LE(data.threshold(0, r.bin), 2.0f);
}

TEST(Split, PureOrConstantNodesDoNotSplit) {
  SampleSet pure(1);
  for (int i = 0; i < 5; ++i) pure.add(std::vector<float>{float(i)}, 1);
  const BinnedFeatures a(pure, 8);
  EXPECT_FALSE(find_best_split(a, pure.labels, pure.weights, iota_u32(5), iota_u32(1)).found);

  SampleSet constant(1);
  for (int i = 0; i < 6; ++i) constant.add(std::vector<float>{3.0f}, i % 2 ? 1 : -1);
  const BinnedFeatures b(constant, 8);
  EXPECT_FALSE(find_best_split(b, constant.labels, constant.weights, iota_u32(6), iota_u32(1)).found);
}

TEST(Split, ThresholdReproducesBinnedPartition) {
  Rng rng(2);
  const auto s = testsupport::random_dyadic_samples(150, 5, rng);
  const BinnedFeatures data(s, 256);
  for (std::size_t f = 0; f < 5; ++f)
    for (std::uint32_t t = 1; t < 256; t += 7)
      for (std::size_t i = 0; i < s.size(); ++i)
        ASSERT_EQ(data.code(i, f) < t, s.features[i * 5 + f] < data.threshold(f, t));
}

TEST(Boost, LeafValueFormula) {
  EXPECT_DOUBLE_EQ(leaf_value(0.3, 0.1, 0.01), 0.5 * std::log(0.31 / 0.11));
  EXPECT_DOUBLE_EQ(leaf_value(0.2, 0.2, 0.5), 0.0);
  EXPECT_TRUE(std::isfinite(leaf_value(0.0, 0.4, 1e-3)));
}

TEST(Boost, LossNeverIncreases) {
  Rng rng(3);
  for (double nu : {0.5, 1.0})
    for (int trial = 0; trial < 8; ++trial) {
      const auto d = std::size_t(rng.integer(1, 10));
      const auto s = testsupport::random_dyadic_samples(std::size_t(rng.integer(10, 150)), d, rng, trial % 2 == 0);
      auto cfg = flat_config(d);
      cfg.num_trees = 32;
      cfg.max_depth = std::uint32_t(rng.integer(1, 3));
      cfg.shrinkage = nu;
      double prev = 1.0;
      train_forest(s, cfg, 4, 1, [&](const RoundLog& log) {
        EXPECT_LE(log.loss, prev + 1e-12) << "nu " << nu << " round " << log.round;
        prev = log.loss;
      });
    }
}

TEST(Boost, SeparableDataIsLearned) {
  Rng rng(4);
  SampleSet s(3);
  for (int i = 0; i < 200; ++i) {
    const float x = float(rng.uniform(0.1, 1) * (rng.coin() ? 1 : -1));
    s.add(std::vector<float>{float(rng.uniform(0, 1)), x, float(rng.uniform(0, 1))}, x > 0 ? 1 : -1);
  }
  auto cfg = flat_config(3);
  cfg.num_trees = 8;
  cfg.max_depth = 1;
  const auto f = train_forest(s, cfg, 4, 1);
  ASSERT_EQ(f.trees.size(), 8u);
  EXPECT_EQ(f.trees[0].nodes[0].feature.cell_col, 1u);
  ChannelStack st(1, 1, 3, 4);
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::uint32_t k = 0; k < 3; ++k) st.at(0, 0, k) = s.features[i * 3 + k];
    const double score = score_window(f, st, {0, 0});
    EXPECT_EQ(score > 0, s.labels[i] > 0) << i;
  }
}

TEST(Boost, TrainingIsDeterministic) {
  Rng rng(5);
  const auto s = testsupport::random_dyadic_samples(120, 6, rng);
  auto cfg = flat_config(6);
  cfg.num_trees = 10;
  cfg.max_depth = 3;
  cfg.feature_fraction = 0.5;
  cfg.seed = 9;
  const auto a = train_forest(s, cfg, 4, 1);
  const auto b = train_forest(s, cfg, 4, 1);
  EXPECT_EQ(a.trees, b.trees);
  cfg.seed = 10;
  const auto c = train_forest(s, cfg, 4, 1);
  EXPECT_NE(a.trees, c.trees);
}

TEST(Boost, InvalidInputsRejected) {
  Rng rng(6);
  auto s = testsupport::random_dyadic_samples(20, 2, rng);
  auto cfg = flat_config(2);
  cfg.num_trees = 2;
  auto bad = cfg;
  bad.shrinkage = 0;
  EXPECT_THROW(train_forest(s, bad, 4, 1), Error);
  bad = cfg;
  bad.feature_bins = 300;
  EXPECT_THROW(train_forest(s, bad, 4, 1), Error);
  EXPECT_THROW(train_forest(s, cfg, 4, 2), Error);  // dimension does not match window
  SampleSet one_class(2);
  one_class.add(std::vector<float>{1, 2}, 1);
  one_class.add(std::vector<float>{2, 1}, 1);
  EXPECT_THROW(train_forest(one_class, cfg, 4, 1), Error);
  s.weights[0] = 0;
  EXPECT_THROW(train_forest(s, cfg, 4, 1), Error);
}

TEST(Forest, ScoreMatchesNaiveTraversal) {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const auto f = testsupport::random_forest(std::size_t(rng.integer(1, 20)), std::uint32_t(rng.integer(1, 5)), 3, 8,
                                              rng, trial % 2 ? 0.5 : 1.0);
    const auto st = testsupport::random_stack(3, 16 + std::uint32_t(rng.integer(0, 5)), 8 + std::uint32_t(rng.integer(0, 5)),
                                              8, rng);
    const CellOrigin o{std::uint32_t(rng.integer(0, st.height() - 16)), std::uint32_t(rng.integer(0, st.width() - 8))};
    ASSERT_EQ(score_window(f, st, o), testsupport::naive_score(f, st, o)) << "trial " << trial;
  }
}

TEST(Forest, GridMatchesPerWindowScores) {
  Rng rng(8);
  const auto f = testsupport::random_forest(30, 4, 2, 4, rng);
  const auto st = testsupport::random_stack(2, 45, 30, 4, rng);
  const CompiledForest cf(f, st.height(), st.width());
  for (std::uint32_t step : {1u, 2u, 3u}) {
    const auto g = cf.score_grid(st, step);
    ASSERT_EQ(g.rows, (45 - 32) / step + 1);
    ASSERT_EQ(g.cols, (30 - 16) / step + 1);
    for (std::uint32_t r = 0; r < g.rows; ++r)
      for (std::uint32_t c = 0; c < g.cols; ++c)
        ASSERT_EQ(g.scores[std::size_t(r) * g.cols + c], testsupport::naive_score(f, st, {r * step, c * step}));
  }
  const auto tiny = testsupport::random_stack(2, 10, 10, 4, rng);
  EXPECT_EQ(CompiledForest(f, 10, 10).score_grid(tiny, 1).scores.size(), 0u);
}

TEST(Forest, StackMismatchRejected) {
  Rng rng(9);
  const auto f = testsupport::random_forest(3, 2, 2, 4, rng);
  EXPECT_THROW(score_window(f, testsupport::random_stack(2, 32, 16, 8, rng), {0, 0}), Error);
  EXPECT_THROW(score_window(f, testsupport::random_stack(3, 32, 16, 4, rng), {0, 0}), Error);
  EXPECT_THROW(score_window(f, testsupport::random_stack(2, 32, 16, 4, rng), {1, 0}), Error);
}

TEST(Forest, JsonRoundTrip) {
  Rng rng(10);
  auto f = testsupport::random_forest(12, 4, 5, 4, rng);
  f.core_h = 100;
  f.core_w = 41;
  const auto back = forest_from_json(nlohmann::json::parse(forest_to_json(f).dump()));
  EXPECT_EQ(back.trees, f.trees);
  EXPECT_EQ(back.shrinkage, f.shrinkage);
  EXPECT_EQ(back.core_h, 100.0);
  EXPECT_EQ(back.core_w, 41.0);
  EXPECT_EQ(back.channels, 5u);

  auto j = forest_to_json(f);
  j.erase("core");
  EXPECT_EQ(forest_from_json(j).core_h, 128.0);
}

TEST(Forest, MalformedJsonRejected) {
  Rng rng(11);
  const auto f = testsupport::random_forest(2, 2, 2, 4, rng);
  auto j = forest_to_json(f);
  j["trees"][0]["nodes"][0]["left"] = 0;  // self loop
  EXPECT_THROW(forest_from_json(j), Error);
  j = forest_to_json(f);
  j["trees"][0]["nodes"][0]["feat"] = {2, 0, 0};  // channel out of range
  EXPECT_THROW(forest_from_json(j), Error);
  j = forest_to_json(f);
  j["ratio"] = 3;
  EXPECT_THROW(forest_from_json(j), Error);
  j = forest_to_json(f);
  j.erase("trees");
  EXPECT_THROW(forest_from_json(j), Error);
}

TEST(Forest, HeatmapCountsSplits) {
  Rng rng(12);
  const auto f = testsupport::random_forest(20, 3, 2, 8, rng);
  const auto h = feature_usage_heatmap(f);
  ASSERT_EQ(h.size(), 16u);
  ASSERT_EQ(h[0].size(), 8u);
  double total = 0;
  for (const auto& row : h) total += std::accumulate(row.begin(), row.end(), 0.0);
  std::size_t splits = 0;
  for (const auto& t : f.trees) splits += t.split_count();
  EXPECT_EQ(total, double(splits));
}
