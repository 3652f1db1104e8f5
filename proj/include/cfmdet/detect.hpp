#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "cfmdet/boost.hpp"
#include "cfmdet/channels.hpp"
#include "cfmdet/error.hpp"
#include "cfmdet/geometry.hpp"
#include "cfmdet/parallel.hpp"

namespace cfmdet {

struct DetectConfig {
  std::uint32_t stride = 4;  // input pixels
  double score_threshold = 0.0;
  double nms_overlap = 0.5;
  std::size_t max_per_image = 0;  // 0 = unlimited

  // Cell step for a forest of the given ratio.
  std::uint32_t cell_step(std::uint32_t ratio) const {
    if (ratio == 0 || stride < ratio || stride % ratio != 0) throw Error("stride must be a positive multiple of the forest ratio");
    return stride / ratio;
  }
};

// Object box in input-image pixels for the window whose top-left cell is
// `origin` in a level with the given scale.
inline Box window_to_box(const BoostedForest& forest, double scale, CellOrigin origin) {
  const double wx = double(origin.col) * forest.ratio + forest.pad_x();
  const double wy = double(origin.row) * forest.ratio + forest.pad_y();
  return {wx / scale, wy / scale, forest.core_w / scale, forest.core_h / scale};
}

// A scored window with its position in the deterministic scan order
// (level, row, col).
struct Candidate {
  Detection det;
  std::size_t level = 0;
  CellOrigin origin;
};

// Every window of every level on the stride grid, in scan order.
inline std::vector<Candidate> score_pyramid(const BoostedForest& forest, const Pyramid& pyramid, std::uint32_t stride,
                                            const std::string& image_id = {}) {
  DetectConfig probe;
  probe.stride = stride;
  const std::uint32_t step = probe.cell_step(forest.ratio);
  for (const auto& level : pyramid) check_forest_stack(forest, level.stack);

  std::vector<std::vector<Candidate>> per_level(pyramid.size());
  parallel_for(pyramid.size(), [&](std::size_t li) {
    const auto& level = pyramid[li];
    const CompiledForest compiled(forest, level.stack.height(), level.stack.width());
    const auto grid = compiled.score_grid(level.stack, step);
    auto& out = per_level[li];
    out.reserve(grid.scores.size());
    for (std::uint32_t r = 0; r < grid.rows; ++r)
      for (std::uint32_t c = 0; c < grid.cols; ++c) {
        const CellOrigin o{r * step, c * step};
        Candidate cand;
        cand.det.image_id = image_id;
        cand.det.box = window_to_box(forest, level.scale, o);
        cand.det.score = grid.scores[std::size_t(r) * grid.cols + c];
        cand.det.source = level.stack.source();
        cand.level = li;
        cand.origin = o;
        out.push_back(std::move(cand));
      }
  });
  std::vector<Candidate> all;
  for (auto& v : per_level) all.insert(all.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
  return all;
}

namespace detail {

// Stable descending-score order; equal scores keep input order.
inline std::vector<std::size_t> score_order(const std::vector<Detection>& dets) {
  std::vector<std::size_t> idx(dets.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return idx;
}

inline std::vector<Detection> greedy_nms(const std::vector<Detection>& dets, double overlap, std::size_t cap) {
  std::vector<Detection> kept;
  for (auto i : score_order(dets)) {
    const auto& d = dets[i];
    bool suppressed = false;
    for (const auto& k : kept)
      if (iou(d.box, k.box) > overlap) {
        suppressed = true;
        break;
      }
    if (suppressed) continue;
    kept.push_back(d);
    if (cap && kept.size() == cap) break;
  }
  return kept;
}

}  // namespace detail

// Greedy non-maximum suppression: keep the best remaining box, drop every box
// overlapping it by IoU > overlap, repeat. Output is sorted by descending
// score, ties in input order.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double overlap) {
  if (!(overlap > 0.0 && overlap < 1.0)) throw Error("nms overlap must be in (0, 1)");
  return detail::greedy_nms(dets, overlap, 0);
}

// Threshold, then NMS, then cap. Candidates must be in scan order so that
// ties are resolved deterministically.
inline std::vector<Detection> finalize_candidates(const std::vector<Candidate>& cands, const DetectConfig& cfg) {
  std::vector<Detection> pass;
  for (const auto& c : cands)
    if (c.det.score >= cfg.score_threshold && c.det.box.w >= 1.0 && c.det.box.h >= 1.0) pass.push_back(c.det);
  if (!(cfg.nms_overlap > 0.0 && cfg.nms_overlap < 1.0)) throw Error("nms overlap must be in (0, 1)");
  return detail::greedy_nms(pass, cfg.nms_overlap, cfg.max_per_image);
}

inline std::vector<Detection> detect(const BoostedForest& forest, const Pyramid& pyramid, const DetectConfig& cfg,
                                     const std::string& image_id = {}) {
  return finalize_candidates(score_pyramid(forest, pyramid, cfg.stride, image_id), cfg);
}

struct CalibrationReport {
  double threshold = 0.0;
  double mean_per_image = 0.0;
  double target = 0.0;
  std::size_t images = 0;
};

// Picks the score threshold whose mean post-NMS proposal count over the
// calibration images is closest to `target` (bisection on the threshold).
inline CalibrationReport calibrate_threshold(const std::vector<std::vector<Candidate>>& calibration, DetectConfig cfg,
                                             double target) {
  if (calibration.empty()) throw Error("empty calibration set");
  if (!(target > 0)) throw Error("proposal target must be positive");

  // Pre-sorted copies keep each NMS pass proportional to the kept count.
  std::vector<std::vector<Detection>> sorted(calibration.size());
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < calibration.size(); ++i) {
    std::vector<Detection> dets;
    for (const auto& c : calibration[i])
      if (c.det.box.w >= 1.0 && c.det.box.h >= 1.0) dets.push_back(c.det);
    for (auto k : detail::score_order(dets)) sorted[i].push_back(dets[k]);
    if (!sorted[i].empty()) {
      hi = std::max(hi, sorted[i].front().score);
      lo = std::min(lo, sorted[i].back().score);
    }
  }
  auto mean_at = [&](double thr) {
    std::size_t total = 0;
    for (const auto& dets : sorted) {
      const auto end = std::find_if(dets.begin(), dets.end(), [&](const Detection& d) { return d.score < thr; });
      std::vector<Detection> pass(dets.begin(), end);
      total += detail::greedy_nms(pass, cfg.nms_overlap, cfg.max_per_image).size();
    }
    return double(total) / double(sorted.size());
  };

  CalibrationReport best{std::numeric_limits<double>::infinity(), 0.0, target, calibration.size()};
  if (!(lo <= hi)) return best;
  auto consider = [&](double thr) {
    const double m = mean_at(thr);
    if (std::abs(m - target) < std::abs(best.mean_per_image - target) ||
        (std::abs(m - target) == std::abs(best.mean_per_image - target) && thr > best.threshold))
      best = {thr, m, target, calibration.size()};
    return m;
  };
  double a = lo, b = std::nextafter(hi, std::numeric_limits<double>::infinity());
  consider(a);
  for (int it = 0; it < 64 && a < b; ++it) {
    const double mid = a + (b - a) / 2;
    if (mid <= a || mid >= b) break;
    if (consider(mid) > target)
      a = mid;
    else
      b = mid;
  }
  return best;
}

// Detections at a calibrated (or configured) threshold, capped per image.
inline std::vector<Detection> propose(const BoostedForest& forest, const Pyramid& pyramid, const DetectConfig& cfg,
                                      const std::string& image_id = {}) {
  auto dets = detect(forest, pyramid, cfg, image_id);
  for (auto& d : dets) d.source = "proposal";
  return dets;
}

}  // namespace cfmdet
