#pragma once

// Random generators and brute-force reference implementations shared by the
// unit suites and the acceptance binary. The oracles are written from the
// documented definitions, not from the optimized code paths.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cfmdet/cfmdet.hpp"

namespace testsupport {

using namespace cfmdet;

struct Rng {
  std::mt19937_64 gen;
  explicit Rng(std::uint64_t seed) : gen(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(gen); }
  std::int64_t integer(std::int64_t lo, std::int64_t hi) { return std::uniform_int_distribution<std::int64_t>(lo, hi)(gen); }
  bool coin(double p = 0.5) { return uniform(0, 1) < p; }
};

inline Image random_image(std::uint32_t w, std::uint32_t h, Rng& rng, int lo = 0, int hi = 255) {
  Image img(w, h);
  for (auto& v : img.data) v = std::uint8_t(rng.integer(lo, hi));
  return img;
}

inline ChannelStack random_stack(std::uint32_t c, std::uint32_t h, std::uint32_t w, std::uint32_t ratio, Rng& rng) {
  ChannelStack s(c, h, w, ratio, "random");
  for (auto& v : s.values()) v = float(rng.uniform(-1, 1));
  return s;
}

// Random CFT1 tensor: 1-4 dims, arbitrary bit patterns for values except
// NaNs, which are kept as-is to check bit-exactness.
inline Tensor random_tensor(Rng& rng) {
  Tensor t;
  const auto nd = rng.integer(1, 4);
  std::size_t n = 1;
  for (int i = 0; i < nd; ++i) {
    t.dims.push_back(std::uint32_t(rng.integer(1, 7)));
    n *= t.dims.back();
  }
  t.ratio = std::uint32_t(rng.integer(0, 16));
  const auto len = rng.integer(0, 12);
  for (int i = 0; i < len; ++i) t.name.push_back(char(rng.integer(32, 126)));
  for (std::size_t i = 0; i < n; ++i)
    t.values.push_back(rng.coin(0.1) ? std::bit_cast<float>(std::uint32_t(rng.integer(0, 0xffffffffLL)))
                                     : float(rng.uniform(-1e3, 1e3)));
  return t;
}

inline bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
  return true;
}

// Mangles a valid encoding so that it can no longer decode: truncation, a
// corrupted magic/version/dtype/dim, a huge dimension or an extra byte.
inline std::vector<std::uint8_t> mangle(std::vector<std::uint8_t> bytes, Rng& rng) {
  switch (rng.integer(0, 4)) {
    case 0:
      bytes.resize(std::size_t(rng.integer(0, std::int64_t(bytes.size()) - 1)));
      break;
    case 1:
      bytes[std::size_t(rng.integer(0, 3))] ^= std::uint8_t(rng.integer(1, 255));
      break;
    case 2: {
      // version, dtype, or a byte of one of the dims
      const std::uint32_t ndim = bytes[12];
      bytes[std::size_t(rng.coin() ? rng.integer(4, 11) : rng.integer(16, 16 + 4 * std::int64_t(ndim) - 1))] ^=
          std::uint8_t(rng.integer(1, 255));
      break;
    }
    case 3:
      for (int i = 0; i < 4; ++i) bytes[16 + i] = 0xff;  // first dim = 2^32 - 1
      break;
    default:
      bytes.push_back(std::uint8_t(rng.integer(0, 255)));
      break;
  }
  return bytes;
}

// ---------------------------------------------------------------------------
// Channels
// ---------------------------------------------------------------------------

// Per-pixel gradient histogram, accumulated cell by cell. Gray is
// (R+G+B)/(3*255), coordinates outside the image replicate the border, the
// orientation is folded into [0, pi) and each bin k (centre k*pi/6) takes
// mag * max(0, 1 - circular_distance / (pi/6)).
inline std::vector<double> acf_gradient_oracle(const Image& img, std::uint32_t ratio) {
  const std::uint32_t ch = (img.height + ratio - 1) / ratio, cw = (img.width + ratio - 1) / ratio;
  auto gray = [&](std::int64_t x, std::int64_t y) {
    x = std::clamp<std::int64_t>(x, 0, img.width - 1);
    y = std::clamp<std::int64_t>(y, 0, img.height - 1);
    const auto ux = std::uint32_t(x), uy = std::uint32_t(y);
    return (double(img.at(ux, uy, 0)) + double(img.at(ux, uy, 1)) + double(img.at(ux, uy, 2))) / 765.0;
  };
  // channels 3..9 of the ACF layout
  std::vector<double> out(std::size_t(7) * ch * cw, 0.0);
  const double width = std::numbers::pi / 6;
  for (std::uint32_t cy = 0; cy < ch; ++cy)
    for (std::uint32_t cx = 0; cx < cw; ++cx)
      for (std::uint32_t dy = 0; dy < ratio; ++dy)
        for (std::uint32_t dx = 0; dx < ratio; ++dx) {
          const std::int64_t x = std::int64_t(cx) * ratio + dx, y = std::int64_t(cy) * ratio + dy;
          const double gx = (gray(x + 1, y) - gray(x - 1, y)) / 2;
          const double gy = (gray(x, y + 1) - gray(x, y - 1)) / 2;
          const double mag = std::hypot(gx, gy);
          out[(std::size_t(0) * ch + cy) * cw + cx] += mag / (ratio * ratio);
          if (mag == 0) continue;
          double theta = std::atan2(gy, gx);
          while (theta < 0) theta += std::numbers::pi;
          while (theta >= std::numbers::pi) theta -= std::numbers::pi;
          for (int k = 0; k < 6; ++k) {
            double d = std::abs(theta - k * width);
            d = std::min(d, std::numbers::pi - d);
            const double wgt = std::max(0.0, 1.0 - d / width);
            out[(std::size_t(1 + k) * ch + cy) * cw + cx] += mag * wgt / (ratio * ratio);
          }
        }
  return out;
}

// Naive valid-region cross-correlation per (channel, kernel), zero in the
// last row and column.
inline std::vector<float> filter_bank_oracle(const ChannelStack& s, const FilterBank& bank) {
  const std::size_t K = bank.count(), H = s.height(), W = s.width();
  std::vector<float> out(s.channels() * K * H * W, 0.0f);
  for (std::size_t c = 0; c < s.channels(); ++c)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t y = 0; y + 1 < H; ++y)
        for (std::size_t x = 0; x + 1 < W; ++x) {
          float acc = 0;
          for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t j = 0; j < 2; ++j)
              acc += bank.filters[k][i * 2 + j] * s.at(std::uint32_t(c), std::uint32_t(y + i), std::uint32_t(x + j));
          out[((c * K + k) * H + y) * W + x] = acc;
        }
  return out;
}

// ---------------------------------------------------------------------------
// Boosting
// ---------------------------------------------------------------------------

// Random samples with dyadic weights (integers over a power of two) so that
// every partial sum is exact regardless of summation order.
inline SampleSet random_dyadic_samples(std::size_t n, std::size_t d, Rng& rng, bool low_cardinality = false) {
  SampleSet s(d);
  std::vector<float> x(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : x) v = low_cardinality ? float(rng.integer(0, 5)) : float(rng.uniform(-10, 10));
    s.add(x, rng.coin() ? 1 : -1, double(rng.integer(1, 64)) / 1024.0);
  }
  if (s.count(1) == 0) s.labels[0] = 1;
  if (s.count(-1) == 0) s.labels[0] = -1;
  return s;
}

struct OracleSplit {
  bool found = false;
  std::size_t feature = 0;
  std::uint32_t bin = 0;
  float threshold = 0;
  double impurity = 0;
};

// Every feature, every quantized threshold, raw values compared against the
// threshold (x < thr goes left); impurity sum over children of
// W * (1 - p+^2 - p-^2) written as 2 W+ W- / W.
inline OracleSplit exhaustive_split(const SampleSet& s, const BinnedFeatures& bins, const std::vector<double>& w) {
  OracleSplit best;
  auto gini = [](double p, double n) { return p + n > 0 ? 2.0 * p * n / (p + n) : 0.0; };
  for (std::size_t f = 0; f < s.dim; ++f)
    for (std::uint32_t t = 1; t < bins.bins(); ++t) {
      const float thr = bins.threshold(f, t);
      double lp = 0, ln = 0, rp = 0, rn = 0;
      std::size_t nl = 0;
      for (std::size_t i = 0; i < s.size(); ++i) {
        const bool left = s.features[i * s.dim + f] < thr;
        nl += left;
        (left ? (s.labels[i] > 0 ? lp : ln) : (s.labels[i] > 0 ? rp : rn)) += w[i];
      }
      if (nl == 0 || nl == s.size()) continue;
      const double g = gini(lp, ln) + gini(rp, rn);
      if (!best.found || g < best.impurity) best = {true, f, t, thr, g};
    }
  return best;
}

// Random forest over a cells_h x cells_w window with up to max_depth levels;
// leaves may appear early.
inline BoostedForest random_forest(std::size_t trees, std::uint32_t max_depth, std::uint32_t channels,
                                   std::uint32_t ratio, Rng& rng, double shrinkage = 0.5) {
  BoostedForest f;
  f.ratio = ratio;
  f.channels = channels;
  f.shrinkage = shrinkage;
  for (std::size_t t = 0; t < trees; ++t) {
    Tree tree;
    std::function<std::int32_t(std::uint32_t)> grow = [&](std::uint32_t depth) -> std::int32_t {
      const auto id = std::int32_t(tree.nodes.size());
      tree.nodes.emplace_back();
      if (depth == max_depth || (depth > 0 && rng.coin(0.2))) {
        tree.nodes[std::size_t(id)].leaf = rng.uniform(-2, 2);
        return id;
      }
      TreeNode n;
      n.feature = {std::uint32_t(rng.integer(0, channels - 1)), std::uint32_t(rng.integer(0, f.cells_h() - 1)),
                   std::uint32_t(rng.integer(0, f.cells_w() - 1))};
      n.threshold = float(rng.uniform(-1, 1));
      n.left = grow(depth + 1);
      n.right = grow(depth + 1);
      tree.nodes[std::size_t(id)] = n;
      return id;
    };
    grow(0);
    f.trees.push_back(std::move(tree));
  }
  return f;
}

// Plain node-pointer traversal of every tree, summed in tree order, times nu.
inline double naive_score(const BoostedForest& f, const ChannelStack& s, CellOrigin o) {
  double sum = 0;
  for (const auto& tree : f.trees) {
    std::size_t i = 0;
    while (!tree.nodes[i].is_leaf()) {
      const auto& n = tree.nodes[i];
      const float v = s.at(n.feature.channel, o.row + n.feature.cell_row, o.col + n.feature.cell_col);
      i = std::size_t(v < n.threshold ? n.left : n.right);
    }
    sum += tree.nodes[i].leaf;
  }
  return f.shrinkage * sum;
}

// ---------------------------------------------------------------------------
// Detection and evaluation
// ---------------------------------------------------------------------------

inline std::vector<Detection> random_boxes(std::size_t n, Rng& rng, bool coarse_scores = false) {
  std::vector<Detection> out;
  for (std::size_t i = 0; i < n; ++i) {
    Detection d;
    d.image_id = "img";
    d.box = {std::round(rng.uniform(0, 200)), std::round(rng.uniform(0, 150)), std::round(rng.uniform(10, 80)),
             std::round(rng.uniform(20, 160))};
    d.score = coarse_scores ? double(rng.integer(0, 5)) : rng.uniform(-5, 5);
    out.push_back(d);
  }
  return out;
}

// Textbook O(n^2) greedy NMS: pick the highest remaining score (earliest on
// ties), discard everything overlapping it by more than `overlap`.
inline std::vector<Detection> nms_oracle(const std::vector<Detection>& dets, double overlap) {
  std::vector<bool> alive(dets.size(), true);
  std::vector<Detection> out;
  while (true) {
    std::size_t best = dets.size();
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (alive[i] && (best == dets.size() || dets[i].score > dets[best].score)) best = i;
    if (best == dets.size()) break;
    out.push_back(dets[best]);
    alive[best] = false;
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (alive[i] && iou(dets[i].box, dets[best].box) > overlap) alive[i] = false;
  }
  return out;
}

// Repeatedly takes the unvisited detection that is first in (score desc, x,
// y, w, h, index) order and assigns it the best still-unmatched evaluated box.
inline std::vector<Verdict> matcher_oracle(const std::vector<Detection>& dets, const std::vector<Box>& evaluated,
                                           const std::vector<Box>& ignored, const EvalCriteria& c) {
  std::vector<Verdict> out(dets.size(), Verdict::FP);
  std::vector<bool> done(dets.size(), false), taken(evaluated.size(), false);
  auto before = [&](std::size_t a, std::size_t b) {
    const auto& x = dets[a];
    const auto& y = dets[b];
    if (x.score != y.score) return x.score > y.score;
    if (x.box.x != y.box.x) return x.box.x < y.box.x;
    if (x.box.y != y.box.y) return x.box.y < y.box.y;
    if (x.box.w != y.box.w) return x.box.w < y.box.w;
    if (x.box.h != y.box.h) return x.box.h < y.box.h;
    return a < b;
  };
  for (std::size_t step = 0; step < dets.size(); ++step) {
    std::size_t d = dets.size();
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (!done[i] && (d == dets.size() || before(i, d))) d = i;
    done[d] = true;
    std::size_t g_best = evaluated.size();
    double v_best = 0;
    for (std::size_t g = 0; g < evaluated.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(dets[d].box, evaluated[g]);
      if (v >= c.iou_min && (g_best == evaluated.size() || v > v_best)) {
        g_best = g;
        v_best = v;
      }
    }
    if (g_best < evaluated.size()) {
      taken[g_best] = true;
      out[d] = Verdict::TP;
      continue;
    }
    for (const auto& ig : ignored)
      if (intersection_area(dets[d].box, ig) / dets[d].box.area() > c.ignore_cover_min) out[d] = Verdict::IGN;
  }
  return out;
}

// Interpolated AP by enumerating every threshold directly.
inline double ap_oracle(const std::vector<ScoredVerdict>& v, std::size_t num_gt, std::uint32_t points) {
  std::vector<double> thresholds;
  for (const auto& d : v)
    if (d.verdict != Verdict::IGN) thresholds.push_back(d.score);
  std::vector<std::pair<double, double>> pr;  // (recall, precision)
  for (double t : thresholds) {
    std::size_t tp = 0, fp = 0;
    for (const auto& d : v) {
      if (d.verdict == Verdict::IGN || d.score < t) continue;
      (d.verdict == Verdict::TP ? tp : fp)++;
    }
    pr.emplace_back(double(tp) / double(num_gt), double(tp) / double(tp + fp));
  }
  double sum = 0;
  for (std::uint32_t k = 0; k < points; ++k) {
    const double r = double(k) / double(points - 1);
    double p = 0;
    for (const auto& [rec, prec] : pr)
      if (rec >= r) p = std::max(p, prec);
    sum += p;
  }
  return sum / points;
}

// ---------------------------------------------------------------------------
// Segmentation fusion
// ---------------------------------------------------------------------------

// Crop to the integer pixel range the box touches (clamped to the map), then
// sample each of the 100x41 outputs at half-pixel-centred source coordinates
// with bilinear weights, clamping at the crop edge.
inline std::vector<double> crop_resize_oracle(const ScoreMap& m, const Box& b) {
  const int x0 = std::max(0, int(std::floor(b.x))), y0 = std::max(0, int(std::floor(b.y)));
  const int x1 = std::min(int(m.width), int(std::ceil(b.x + b.w)));
  const int y1 = std::min(int(m.height), int(std::ceil(b.y + b.h)));
  const int cw = x1 - x0, ch = y1 - y0;
  std::vector<double> out(100 * 41);
  for (int r = 0; r < 100; ++r)
    for (int c = 0; c < 41; ++c) {
      const double sy = std::min(std::max((r + 0.5) * ch / 100.0 - 0.5, 0.0), double(ch - 1));
      const double sx = std::min(std::max((c + 0.5) * cw / 41.0 - 0.5, 0.0), double(cw - 1));
      const int ya = int(sy), xa = int(sx);
      const int yb = std::min(ya + 1, ch - 1), xb = std::min(xa + 1, cw - 1);
      const double fy = sy - ya, fx = sx - xa;
      auto px = [&](int y, int x) { return double(m.at(std::uint32_t(y0 + y), std::uint32_t(x0 + x))); };
      out[std::size_t(r) * 41 + c] = (1 - fy) * ((1 - fx) * px(ya, xa) + fx * px(ya, xb)) +
                                     fy * ((1 - fx) * px(yb, xa) + fx * px(yb, xb));
    }
  return out;
}

inline ScoreMap random_score_map(std::uint32_t h, std::uint32_t w, Rng& rng) {
  ScoreMap m{"img", h, w, std::vector<float>(std::size_t(h) * w)};
  for (auto& v : m.values) v = float(rng.uniform(0, 1));
  return m;
}

inline std::vector<std::size_t> argsort_desc(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  return idx;
}

// ---------------------------------------------------------------------------
// Hand-enumerated evaluation fixture: 3 images, 4 evaluated ground truths,
// one ignore region, 6 detections.
//
//   img A: GT a1 (0,0,40,100), GT a2 (100,0,40,100)
//          d1 (0,0,40,100)  s=0.9  IoU 1 with a1            -> TP
//          d2 (2,0,40,100)  s=0.8  a1 taken, IoU<.5 to a2    -> FP
//   img B: GT b1 (10,10,50,120); ignore region (200,0,60,60)
//          d3 (210,10,40,40) s=0.7 fully inside the ignore box -> IGN
//          d4 (10,10,50,120) s=0.6 IoU 1 with b1             -> TP
//   img C: GT c1 (0,0,30,60)
//          d5 (100,100,30,60) s=0.5 no overlap                -> FP
//          d6 (0,0,30,60)     s=0.4 IoU 1 with c1             -> TP
//   a2 is never found.
// ---------------------------------------------------------------------------

struct MetricFixture {
  AnnotationSet gt;
  std::vector<Detection> dets;
  std::vector<Verdict> verdicts;
};

inline MetricFixture metric_fixture() {
  MetricFixture f;
  f.gt["A"] = {640, 480, {{{0, 0, 40, 100}, "person", false, 0}, {{100, 0, 40, 100}, "person", false, 0}}};
  f.gt["B"] = {640, 480, {{{10, 10, 50, 120}, "person", false, 0}, {{200, 0, 60, 60}, "person", true, 0}}};
  f.gt["C"] = {640, 480, {{{0, 0, 30, 60}, "person", false, 0}}};
  f.dets = {{"A", {0, 0, 40, 100}, 0.9, ""},   {"A", {2, 0, 40, 100}, 0.8, ""}, {"B", {210, 10, 40, 40}, 0.7, ""},
            {"B", {10, 10, 50, 120}, 0.6, ""}, {"C", {100, 100, 30, 60}, 0.5, ""}, {"C", {0, 0, 30, 60}, 0.4, ""}};
  f.verdicts = {Verdict::TP, Verdict::FP, Verdict::IGN, Verdict::TP, Verdict::FP, Verdict::TP};
  return f;
}

}  // namespace testsupport
