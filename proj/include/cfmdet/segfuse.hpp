#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "cfmdet/error.hpp"
#include "cfmdet/geometry.hpp"
#include "cfmdet/image.hpp"
#include "cfmdet/tensorio.hpp"

namespace cfmdet {

inline constexpr std::uint32_t kMaskRows = 100;
inline constexpr std::uint32_t kMaskCols = 41;
inline constexpr std::size_t kMaskSize = std::size_t(kMaskRows) * kMaskCols;

// Per-pixel "person" probability at input resolution.
struct ScoreMap {
  std::string image_id;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<float> values;

  float at(std::uint32_t y, std::uint32_t x) const { return values[std::size_t(y) * width + x]; }

  void validate() const {
    if (height == 0 || width == 0 || values.size() != std::size_t(height) * width) throw Error("malformed score map");
    for (float v : values)
      if (!(v >= 0.0f && v <= 1.0f)) throw Error("score map value outside [0, 1]");
  }
};

struct WeightMask {
  std::array<double, kMaskSize> values{};
  std::size_t sample_count = 0;
};

inline ScoreMap score_map_from_tensor(const Tensor& t, std::string image_id) {
  if (t.dims.size() != 2) throw Error("score map tensor needs 2 dims");
  ScoreMap m{std::move(image_id), t.dims[0], t.dims[1], t.values};
  m.validate();
  return m;
}

inline Tensor score_map_to_tensor(const ScoreMap& m) { return Tensor{{m.height, m.width}, 1, "person-score", m.values}; }

inline Tensor mask_to_tensor(const WeightMask& m) {
  Tensor t{{kMaskRows, kMaskCols}, 1, "weight-mask n=" + std::to_string(m.sample_count), {}};
  t.values.assign(m.values.begin(), m.values.end());
  return t;
}

inline WeightMask mask_from_tensor(const Tensor& t) {
  if (t.dims != std::vector<std::uint32_t>{kMaskRows, kMaskCols}) throw Error("weight mask must be 100x41");
  WeightMask m;
  std::copy(t.values.begin(), t.values.end(), m.values.begin());
  const auto pos = t.name.find("n=");
  if (pos != std::string::npos) m.sample_count = std::stoul(t.name.substr(pos + 2));
  return m;
}

// Crops the map to the pixels the box touches (clamped to the image) and
// resamples the crop to 100x41 with half-pixel-centred bilinear sampling,
// clamping at the crop edge.
inline std::array<double, kMaskSize> crop_resize(const ScoreMap& map, const Box& box) {
  const double x0f = std::max(0.0, std::floor(box.x));
  const double y0f = std::max(0.0, std::floor(box.y));
  const double x1f = std::min(double(map.width), std::ceil(box.right()));
  const double y1f = std::min(double(map.height), std::ceil(box.bottom()));
  if (!(x1f > x0f) || !(y1f > y0f)) throw Error("box outside image");
  const auto x0 = std::uint32_t(x0f), y0 = std::uint32_t(y0f);
  const int cw = int(x1f - x0f), ch = int(y1f - y0f);
  std::array<double, kMaskSize> out{};
  for (std::uint32_t r = 0; r < kMaskRows; ++r) {
    const double sy = detail::half_pixel_source(r, ch, kMaskRows);
    for (std::uint32_t c = 0; c < kMaskCols; ++c) {
      const double sx = detail::half_pixel_source(c, cw, kMaskCols);
      out[std::size_t(r) * kMaskCols + c] = detail::bilinear_sample(
          [&](int yy, int xx) { return double(map.at(y0 + std::uint32_t(yy), x0 + std::uint32_t(xx))); }, ch, cw, sy,
          sx);
    }
  }
  return out;
}

struct MaskTrainingItem {
  const ScoreMap* map = nullptr;
  std::vector<GroundTruthBox> boxes;
};

// Element-wise mean of the resampled score-map crops of every non-ignored
// ground-truth box.
inline WeightMask learn_mask(const std::vector<MaskTrainingItem>& items) {
  WeightMask mask;
  for (const auto& item : items) {
    if (!item.map) throw Error("missing score map");
    item.map->validate();
    for (const auto& g : item.boxes) {
      if (g.ignore) continue;
      const auto crop = crop_resize(*item.map, g.box);
      for (std::size_t i = 0; i < kMaskSize; ++i) mask.values[i] += crop[i];
      ++mask.sample_count;
    }
  }
  if (mask.sample_count == 0) throw Error("no usable ground truth");
  for (auto& v : mask.values) v /= double(mask.sample_count);
  return mask;
}

// (1 / (100 * 41)) * sum(mask .* resampled crop).
inline double seg_score(const WeightMask& mask, const ScoreMap& map, const Box& box) {
  const auto crop = crop_resize(map, box);
  double acc = 0;
  for (std::size_t i = 0; i < kMaskSize; ++i) acc += mask.values[i] * crop[i];
  return acc / double(kMaskSize);
}

// final_i = det_i + lambda * seg_i
inline std::vector<double> fuse_scores(const std::vector<double>& det, const std::vector<double>& seg, double lambda) {
  if (det.size() != seg.size()) throw Error("score list length mismatch");
  std::vector<double> out(det.size());
  for (std::size_t i = 0; i < det.size(); ++i) out[i] = det[i] + lambda * seg[i];
  return out;
}

inline const std::vector<double>& default_lambda_grid() {
  static const std::vector<double> grid{0.25, 0.5, 1.0, 2.0, 4.0};
  return grid;
}

// Grid search for the fusion weight that minimizes `objective` (e.g. the
// log-average miss rate on a validation split). Ties keep the smaller lambda.
template <class Objective>
double tune_lambda(Objective&& objective, const std::vector<double>& grid = default_lambda_grid()) {
  if (grid.empty()) throw Error("empty lambda grid");
  double best = grid.front(), best_value = std::numeric_limits<double>::infinity();
  for (double l : grid) {
    const double v = objective(l);
    if (v < best_value) {
      best_value = v;
      best = l;
    }
  }
  return best;
}

}  // namespace cfmdet
