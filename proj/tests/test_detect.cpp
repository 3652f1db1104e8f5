#include <gtest/gtest.h>

#include <limits>

#include "support.hpp"

using namespace cfmdet;
using testsupport::Rng;

namespace {

bool same_dets(const std::vector<Detection>& a, const std::vector<Detection>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i].box == b[i].box) || a[i].score != b[i].score) return false;
  return true;
}

}  // namespace

TEST(Geometry, IouBasics) {
  const Box a{0, 0, 10, 10}, b{5, 0, 10, 10}, c{20, 20, 5, 5};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, b), 50.0 / 150.0);
  EXPECT_EQ(iou(a, c), 0.0);
  EXPECT_EQ(iou(a, {10, 0, 5, 5}), 0.0);  // touching edges
}

TEST(Nms, MatchesQuadraticOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto dets = testsupport::random_boxes(std::size_t(rng.integer(0, 50)), rng, trial % 3 == 0);
    for (double ov : {0.3, 0.5, 0.7}) {
      const auto got = nms(dets, ov);
      ASSERT_TRUE(same_dets(got, testsupport::nms_oracle(dets, ov))) << "trial " << trial;
      ASSERT_TRUE(same_dets(nms(got, ov), got)) << "not idempotent, trial " << trial;
      for (std::size_t i = 1; i < got.size(); ++i) ASSERT_GE(got[i - 1].score, got[i].score);
      for (std::size_t i = 0; i < got.size(); ++i)
        for (std::size_t j = i + 1; j < got.size(); ++j) ASSERT_LE(iou(got[i].box, got[j].box), ov);
    }
  }
}

TEST(Nms, OverlapOutsideOpenIntervalRejected) {
  EXPECT_THROW(nms({}, 0.0), Error);
  EXPECT_THROW(nms({}, 1.0), Error);
}

TEST(Detect, WindowBoxMapsCoreAtScale) {
  BoostedForest f;
  f.ratio = 4;
  f.core_h = 100;
  f.core_w = 41;
  const Box b = window_to_box(f, 0.5, {3, 5});
  EXPECT_DOUBLE_EQ(b.x, (5 * 4 + 11.5) / 0.5);
  EXPECT_DOUBLE_EQ(b.y, (3 * 4 + 14) / 0.5);
  EXPECT_DOUBLE_EQ(b.w, 82);
  EXPECT_DOUBLE_EQ(b.h, 200);
}

TEST(Detect, StrideMustBeMultipleOfRatio) {
  DetectConfig c;
  c.stride = 6;
  EXPECT_THROW(c.cell_step(4), Error);
  c.stride = 2;
  EXPECT_THROW(c.cell_step(4), Error);
  c.stride = 8;
  EXPECT_EQ(c.cell_step(4), 2u);
}

TEST(Detect, ScanCoversEveryWindowOnce) {
  Rng rng(2);
  auto f = testsupport::random_forest(5, 2, 10, 4, rng);
  PyramidConfig pc;
  pc.min_scale = 0.5;
  pc.scales_per_octave = 2;
  const auto img = testsupport::random_image(160, 200, rng);
  const auto pyr = build_acf_pyramid(img, pc);
  ASSERT_EQ(pyr.size(), 2u);  // 0.7071 -> 113 x 141 still fits, 0.5 -> 80 x 100 does not
  const auto cands = score_pyramid(f, pyr, 8);
  std::size_t expected = 0;
  for (const auto& l : pyr) expected += ((l.stack.height() - 32) / 2 + 1) * ((l.stack.width() - 16) / 2 + 1);
  EXPECT_EQ(cands.size(), expected);
  for (const auto& c : cands)
    EXPECT_EQ(c.det.score, testsupport::naive_score(f, pyr[c.level].stack, c.origin));
}

TEST(Detect, ThresholdNmsAndCap) {
  std::vector<Candidate> cands;
  auto add = [&](Box b, double s) { cands.push_back({{"i", b, s, ""}, 0, {}}); };
  add({0, 0, 10, 20}, 5);
  add({1, 0, 10, 20}, 4);  // suppressed by the first
  add({50, 0, 10, 20}, 3);
  add({100, 0, 10, 20}, 2);
  add({150, 0, 10, 20}, -1);
  DetectConfig c;
  c.score_threshold = 0;
  auto out = finalize_candidates(cands, c);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[1].score, 3);
  c.max_per_image = 2;
  EXPECT_EQ(finalize_candidates(cands, c).size(), 2u);
  c.max_per_image = 0;
  c.score_threshold = -std::numeric_limits<double>::infinity();
  EXPECT_EQ(finalize_candidates(cands, c).size(), 4u);
}

TEST(Calibration, HitsTargetOnDisjointCandidates) {
  // 10 images, 100 non-overlapping candidates each with distinct scores: any
  // target count is reachable exactly.
  Rng rng(3);
  std::vector<std::vector<Candidate>> cal(10);
  for (auto& img : cal)
    for (int k = 0; k < 100; ++k)
      img.push_back({{"i", {double(k) * 20, 0, 10, 20}, rng.uniform(-5, 5), ""}, 0, {}});
  DetectConfig c;
  for (double target : {1.0, 7.5, 20.0, 60.0}) {
    const auto r = calibrate_threshold(cal, c, target);
    EXPECT_NEAR(r.mean_per_image, target, 0.05) << target;
    EXPECT_EQ(r.images, 10u);
    std::size_t total = 0;
    for (const auto& img : cal)
      for (const auto& cand : img) total += cand.det.score >= r.threshold;
    EXPECT_DOUBLE_EQ(double(total) / 10.0, r.mean_per_image);
  }
}

TEST(Calibration, RejectsBadInput) {
  EXPECT_THROW(calibrate_threshold({}, DetectConfig{}, 20), Error);
  EXPECT_THROW(calibrate_threshold({{}}, DetectConfig{}, 0), Error);
}

TEST(Detect, SyntheticPlantIsFound) {
  // Stumps on the L channel: bright cells just inside the core box vote for,
  // bright cells in the padding vote against.
  BoostedForest f;
  f.ratio = 4;
  f.channels = 10;
  f.core_h = 100;
  f.core_w = 41;
  auto stump = [](std::uint32_t row, std::uint32_t col, double bright) {
    Tree t;
    TreeNode root, dark, lit;
    root.feature = {0, row, col};
    root.threshold = 0.6f;
    root.left = 1;
    root.right = 2;
    dark.leaf = -bright;
    lit.leaf = bright;
    t.nodes = {root, dark, lit};
    return t;
  };
  for (auto [r, c] : {std::pair{4u, 3u}, {4u, 12u}, {27u, 3u}, {27u, 12u}}) f.trees.push_back(stump(r, c, 1));
  for (auto [r, c] : {std::pair{1u, 7u}, {29u, 7u}, {15u, 1u}, {15u, 14u}}) f.trees.push_back(stump(r, c, -1));
  Image img(160, 160, 30);
  for (std::uint32_t y = 30; y < 130; ++y)
    for (std::uint32_t x = 60; x < 101; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = 220;
  PyramidConfig pc;
  pc.min_scale = pc.max_scale = 1;
  DetectConfig dc;
  dc.score_threshold = 0.5;
  const auto dets = detect(f, build_acf_pyramid(img, pc), dc, "x");
  ASSERT_FALSE(dets.empty());
  EXPECT_EQ(dets.front().score, 8.0);
  EXPECT_GE(iou(dets.front().box, {60, 30, 41, 100}), 0.95);
  EXPECT_EQ(dets.front().image_id, "x");
}
