#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <queue>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "cfmdet/boost.hpp"
#include "cfmdet/channels.hpp"
#include "cfmdet/detect.hpp"
#include "cfmdet/error.hpp"
#include "cfmdet/geometry.hpp"
#include "cfmdet/tensorio.hpp"

namespace cfmdet {

// One training image: its pyramid (computed at the training ratio) and its
// ground truth in input pixels.
struct TrainingImage {
  std::string id;
  Pyramid pyramid;
  std::vector<GroundTruthBox> boxes;
};

struct SamplingConfig {
  std::uint32_t stride = 4;
  double pos_iou_min = 0.5;
  double neg_iou_max = 0.25;
  std::size_t pos_per_gt = 0;  // 0 keeps every qualifying window
  std::size_t seed_negatives_per_image = 25;
  std::size_t neg_cap = 90000;  // hard negatives added per bootstrap round
  std::uint32_t window_h = 128;
  std::uint32_t window_w = 64;
  double core_h = 100;
  double core_w = 41;
  std::uint64_t seed = 0;
};

namespace detail {

struct WindowRef {
  std::size_t image = 0;
  std::size_t level = 0;
  CellOrigin origin;
};

inline BoostedForest geometry_only(const SamplingConfig& cfg, std::uint32_t ratio, std::uint32_t channels) {
  BoostedForest f;
  f.window_h = cfg.window_h;
  f.window_w = cfg.window_w;
  f.ratio = ratio;
  f.channels = channels;
  f.core_h = cfg.core_h;
  f.core_w = cfg.core_w;
  return f;
}

template <class Fn>
void for_each_window(const Pyramid& pyr, std::uint32_t cells_h, std::uint32_t cells_w, std::uint32_t step, Fn&& fn) {
  for (std::size_t li = 0; li < pyr.size(); ++li) {
    const auto& s = pyr[li].stack;
    if (s.height() < cells_h || s.width() < cells_w) continue;
    for (std::uint32_t r = 0; r + cells_h <= s.height(); r += step)
      for (std::uint32_t c = 0; c + cells_w <= s.width(); c += step) fn(li, CellOrigin{r, c});
  }
}

inline double max_iou(const Box& b, const std::vector<GroundTruthBox>& gts) {
  double m = 0;
  for (const auto& g : gts) m = std::max(m, iou(b, g.box));
  return m;
}

inline void check_images(const std::vector<TrainingImage>& images, std::uint32_t& ratio, std::uint32_t& channels) {
  bool first = true;
  for (const auto& img : images)
    for (const auto& lvl : img.pyramid) {
      if (first) {
        ratio = lvl.stack.ratio();
        channels = lvl.stack.channels();
        first = false;
      } else if (lvl.stack.ratio() != ratio || lvl.stack.channels() != channels) {
        throw Error("incompatible stacks");
      }
    }
  if (first) throw Error("no pyramid levels to sample from");
}

}  // namespace detail

// Seed round (detector == nullptr): positives are windows whose object box
// overlaps a non-ignored ground truth by IoU in [pos_iou_min, 1]; negatives
// are drawn uniformly (seeded) from windows with IoU <= neg_iou_max to every
// ground truth. Bootstrap round: the prior set plus the neg_cap top-scoring
// windows of the detector that overlap no ground truth by more than
// neg_iou_max; ties follow scan order (image, level, row, col).
inline SampleSet collect_samples(const std::vector<TrainingImage>& images, const SamplingConfig& cfg,
                                 const BoostedForest* detector = nullptr, const SampleSet* prior = nullptr) {
  std::uint32_t ratio = 0, channels = 0;
  detail::check_images(images, ratio, channels);
  DetectConfig dc;
  dc.stride = cfg.stride;
  const std::uint32_t step = dc.cell_step(ratio);
  const auto geom = detail::geometry_only(cfg, ratio, channels);
  const std::uint32_t ch = geom.cells_h(), cw = geom.cells_w();
  SampleSet out(geom.feature_dim());

  auto features = [&](const detail::WindowRef& w) {
    return window_features(images[w.image].pyramid[w.level].stack, w.origin, ch, cw);
  };

  if (detector == nullptr) {
    bool any_gt = false;
    for (const auto& img : images)
      for (const auto& g : img.boxes) any_gt = any_gt || !g.ignore;
    if (!any_gt) throw Error("cannot seed positives");

    std::mt19937_64 rng(cfg.seed);
    for (std::size_t ii = 0; ii < images.size(); ++ii) {
      const auto& img = images[ii];
      // (iou, scan index) per ground truth
      std::vector<std::vector<std::tuple<double, std::size_t, detail::WindowRef>>> pos(img.boxes.size());
      std::vector<detail::WindowRef> negs;
      std::size_t scan = 0;
      detail::for_each_window(img.pyramid, ch, cw, step, [&](std::size_t li, CellOrigin o) {
        const Box b = window_to_box(geom, img.pyramid[li].scale, o);
        const detail::WindowRef ref{ii, li, o};
        for (std::size_t g = 0; g < img.boxes.size(); ++g) {
          if (img.boxes[g].ignore) continue;
          const double v = iou(b, img.boxes[g].box);
          if (v >= cfg.pos_iou_min) pos[g].emplace_back(v, scan, ref);
        }
        if (detail::max_iou(b, img.boxes) <= cfg.neg_iou_max) negs.push_back(ref);
        ++scan;
      });
      std::vector<std::size_t> taken;
      for (auto& list : pos) {
        std::stable_sort(list.begin(), list.end(),
                         [](const auto& a, const auto& b) { return std::get<0>(a) > std::get<0>(b); });
        std::size_t n = 0;
        for (const auto& [v, s, ref] : list) {
          if (cfg.pos_per_gt && n == cfg.pos_per_gt) break;
          if (std::find(taken.begin(), taken.end(), s) != taken.end()) continue;
          taken.push_back(s);
          out.add(features(ref), +1);
          ++n;
        }
      }
      const std::size_t k = std::min(cfg.seed_negatives_per_image, negs.size());
      for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, negs.size() - 1);
        std::swap(negs[i], negs[pick(rng)]);
        out.add(features(negs[i]), -1);
      }
    }
    return out;
  }

  if (prior) {
    if (prior->size() && prior->dim != out.dim) throw Error("sample dimension mismatch");
    out = *prior;
    out.dim = geom.feature_dim();
  }
  if (cfg.neg_cap == 0) return out;
  check_forest_stack(*detector, images.front().pyramid.front().stack);
  if (detector->window_h != cfg.window_h || detector->window_w != cfg.window_w)
    throw Error("detector window differs from sampling window");

  // The heap top is the weakest of the best neg_cap windows seen so far.
  struct Hard {
    double score;
    std::size_t order;
    detail::WindowRef ref;
  };
  auto better = [](const Hard& a, const Hard& b) {
    return a.score > b.score || (a.score == b.score && a.order < b.order);
  };
  std::priority_queue<Hard, std::vector<Hard>, decltype(better)> heap(better);
  std::size_t order = 0;
  for (std::size_t ii = 0; ii < images.size(); ++ii) {
    const auto& img = images[ii];
    for (std::size_t li = 0; li < img.pyramid.size(); ++li) {
      const auto& lvl = img.pyramid[li];
      const CompiledForest compiled(*detector, lvl.stack.height(), lvl.stack.width());
      const auto grid = compiled.score_grid(lvl.stack, step);
      for (std::uint32_t r = 0; r < grid.rows; ++r)
        for (std::uint32_t c = 0; c < grid.cols; ++c, ++order) {
          const CellOrigin o{r * step, c * step};
          if (detail::max_iou(window_to_box(geom, lvl.scale, o), img.boxes) > cfg.neg_iou_max) continue;
          Hard h{grid.scores[std::size_t(r) * grid.cols + c], order, {ii, li, o}};
          if (heap.size() < cfg.neg_cap) {
            heap.push(h);
          } else if (better(h, heap.top())) {
            heap.pop();
            heap.push(h);
          }
        }
    }
  }
  std::vector<Hard> hard;
  while (!heap.empty()) {
    hard.push_back(heap.top());
    heap.pop();
  }
  std::reverse(hard.begin(), hard.end());
  for (const auto& h : hard) out.add(features(h.ref), -1);
  return out;
}

// Seed round followed by cfg.bootstrap_rounds rounds of hard-negative mining.
// Returns the forest of every round, seed first.
inline std::vector<BoostedForest> train_with_bootstrapping(
    const std::vector<TrainingImage>& images, const TrainConfig& tcfg, const SamplingConfig& scfg,
    const std::function<void(std::uint32_t, const RoundLog&)>& on_round = {}) {
  std::uint32_t ratio = 0, channels = 0;
  detail::check_images(images, ratio, channels);
  std::vector<BoostedForest> forests;
  SampleSet samples = collect_samples(images, scfg);
  for (std::uint32_t round = 0; round <= tcfg.bootstrap_rounds; ++round) {
    if (round > 0) samples = collect_samples(images, scfg, &forests.back(), &samples);
    for (auto& w : samples.weights) w = 1.0;
    auto forest = train_forest(samples, tcfg, ratio, channels, [&](const RoundLog& log) {
      if (on_round) on_round(round, log);
    });
    forest.core_h = scfg.core_h;
    forest.core_w = scfg.core_w;
    forests.push_back(std::move(forest));
  }
  return forests;
}

}  // namespace cfmdet
