#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfmdet/channels.hpp"
#include "cfmdet/error.hpp"

namespace cfmdet {

struct TrainConfig {
  std::uint32_t num_trees = 4096;
  std::uint32_t max_depth = 5;
  double shrinkage = 0.5;
  std::uint32_t window_h = 128;
  std::uint32_t window_w = 64;
  std::uint32_t feature_bins = 256;
  std::uint32_t bootstrap_rounds = 1;
  std::uint32_t neg_cap = 90000;
  // Fraction of candidate features drawn per tree; 1 searches all of them.
  double feature_fraction = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_trees < 1) throw Error("num_trees must be >= 1");
    if (max_depth < 1) throw Error("max_depth must be >= 1");
    if (!(shrinkage > 0.0 && shrinkage <= 1.0)) throw Error("shrinkage must be in (0, 1]");
    if (feature_bins < 2 || feature_bins > 256) throw Error("feature_bins must be in [2, 256]");
    if (!(feature_fraction > 0.0 && feature_fraction <= 1.0)) throw Error("feature_fraction must be in (0, 1]");
  }
};

struct FeatureIndex {
  std::uint32_t channel = 0;
  std::uint32_t cell_row = 0;
  std::uint32_t cell_col = 0;

  friend bool operator==(const FeatureIndex&, const FeatureIndex&) = default;
};

struct TreeNode {
  FeatureIndex feature;
  float threshold = 0.0f;
  std::int32_t left = -1;
  std::int32_t right = -1;
  double leaf = 0.0;

  bool is_leaf() const { return left < 0; }
  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

// Node 0 is the root. Samples go left when value < threshold.
struct Tree {
  std::vector<TreeNode> nodes;

  std::uint32_t depth() const {
    std::function<std::uint32_t(std::int32_t)> rec = [&](std::int32_t i) -> std::uint32_t {
      const auto& n = nodes[std::size_t(i)];
      if (n.is_leaf()) return 0;
      return 1 + std::max(rec(n.left), rec(n.right));
    };
    return nodes.empty() ? 0 : rec(0);
  }

  std::size_t split_count() const {
    return std::size_t(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return !n.is_leaf(); }));
  }

  friend bool operator==(const Tree&, const Tree&) = default;
};

struct BoostedForest {
  std::vector<Tree> trees;
  double shrinkage = 1.0;
  std::uint32_t window_h = 128;
  std::uint32_t window_w = 64;
  std::uint32_t ratio = 4;
  std::uint32_t channels = 0;
  // Object box inside the model window, centred. Equal to the window when
  // the model is unpadded; 100x41 for the padded pedestrian model.
  double core_h = 128;
  double core_w = 64;

  std::uint32_t cells_h() const { return window_h / ratio; }
  std::uint32_t cells_w() const { return window_w / ratio; }
  std::size_t feature_dim() const { return std::size_t(channels) * cells_h() * cells_w(); }
  double pad_y() const { return (window_h - core_h) / 2.0; }
  double pad_x() const { return (window_w - core_w) / 2.0; }

  std::uint32_t max_depth() const {
    std::uint32_t d = 0;
    for (const auto& t : trees) d = std::max(d, t.depth());
    return d;
  }

  void validate() const {
    if (ratio == 0 || window_h % ratio || window_w % ratio) throw Error("window not divisible by ratio");
    if (!(shrinkage > 0.0 && shrinkage <= 1.0)) throw Error("shrinkage must be in (0, 1]");
    if (!(core_h > 0 && core_h <= window_h && core_w > 0 && core_w <= window_w)) throw Error("invalid core box");
    for (const auto& t : trees) {
      if (t.nodes.empty()) throw Error("empty tree");
      const auto n = std::int32_t(t.nodes.size());
      for (std::int32_t i = 0; i < n; ++i) {
        const auto& node = t.nodes[std::size_t(i)];
        if (node.is_leaf()) {
          if (node.right >= 0) throw Error("leaf with a child");
          if (!std::isfinite(node.leaf)) throw Error("non-finite leaf value");
          continue;
        }
        if (node.left <= i || node.right <= i || node.left >= n || node.right >= n)
          throw Error("invalid child index");
        const auto& f = node.feature;
        if (f.channel >= channels || f.cell_row >= cells_h() || f.cell_col >= cells_w())
          throw Error("feature index out of bounds");
        if (std::isnan(node.threshold)) throw Error("NaN threshold");
      }
    }
  }
};

inline FeatureIndex feature_from_flat(std::size_t d, std::uint32_t cells_h, std::uint32_t cells_w) {
  const std::size_t per_channel = std::size_t(cells_h) * cells_w;
  const auto c = std::uint32_t(d / per_channel);
  const std::size_t rem = d % per_channel;
  return {c, std::uint32_t(rem / cells_w), std::uint32_t(rem % cells_w)};
}

inline std::size_t flat_from_feature(const FeatureIndex& f, std::uint32_t cells_h, std::uint32_t cells_w) {
  return (std::size_t(f.channel) * cells_h + f.cell_row) * cells_w + f.cell_col;
}

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

// Row-major N x D features with +/-1 labels and positive weights.
struct SampleSet {
  std::size_t dim = 0;
  std::vector<float> features;
  std::vector<std::int8_t> labels;
  std::vector<double> weights;

  SampleSet() = default;
  explicit SampleSet(std::size_t d) : dim(d) {}

  std::size_t size() const { return labels.size(); }
  std::span<const float> row(std::size_t i) const { return {features.data() + i * dim, dim}; }

  void add(std::span<const float> x, int label, double weight = 1.0) {
    if (x.size() != dim) throw Error("sample dimension mismatch");
    features.insert(features.end(), x.begin(), x.end());
    labels.push_back(std::int8_t(label > 0 ? 1 : -1));
    weights.push_back(weight);
  }

  void append(const SampleSet& other) {
    if (other.size() == 0) return;
    if (other.dim != dim) throw Error("sample dimension mismatch");
    features.insert(features.end(), other.features.begin(), other.features.end());
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
    weights.insert(weights.end(), other.weights.begin(), other.weights.end());
  }

  std::size_t count(int label) const {
    return std::size_t(std::count(labels.begin(), labels.end(), std::int8_t(label > 0 ? 1 : -1)));
  }
};

// ---------------------------------------------------------------------------
// Feature quantization
// ---------------------------------------------------------------------------

// Per-feature uniform bins over the training [min, max]. edge[t-1] is the
// float threshold that separates bins < t from bins >= t, so comparing raw
// values against a learned threshold reproduces the binned partition exactly.
class BinnedFeatures {
public:
  BinnedFeatures(const SampleSet& samples, std::uint32_t bins) : n_(samples.size()), d_(samples.dim), bins_(bins) {
    if (bins < 2 || bins > 256) throw Error("feature_bins must be in [2, 256]");
    edges_.resize(d_ * (bins_ - 1));
    codes_.resize(n_ * d_);
    for (std::size_t f = 0; f < d_; ++f) {
      float lo = std::numeric_limits<float>::infinity(), hi = -lo;
      for (std::size_t i = 0; i < n_; ++i) {
        const float v = samples.features[i * d_ + f];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      float* e = edges_.data() + f * (bins_ - 1);
      const double span = double(hi) - double(lo);
      for (std::uint32_t t = 1; t < bins_; ++t) e[t - 1] = float(double(lo) + span * t / bins_);
      std::uint8_t* col = codes_.data() + f * n_;
      for (std::size_t i = 0; i < n_; ++i) col[i] = std::uint8_t(bin_of(f, samples.features[i * d_ + f], lo, span));
    }
  }

  std::size_t samples() const { return n_; }
  std::size_t features() const { return d_; }
  std::uint32_t bins() const { return bins_; }

  const std::uint8_t* column(std::size_t f) const { return codes_.data() + f * n_; }
  std::uint8_t code(std::size_t i, std::size_t f) const { return codes_[f * n_ + i]; }

  // Threshold for "bin < t", t in [1, bins).
  float threshold(std::size_t f, std::uint32_t t) const { return edges_[f * (bins_ - 1) + t - 1]; }

  // Number of edges <= v.
  std::uint32_t bin_of(std::size_t f, float v) const {
    const float* e = edges_.data() + f * (bins_ - 1);
    return std::uint32_t(std::upper_bound(e, e + bins_ - 1, v) - e);
  }

private:
  std::uint32_t bin_of(std::size_t f, float v, float lo, double span) const {
    const float* e = edges_.data() + f * (bins_ - 1);
    const std::int64_t last = std::int64_t(bins_) - 1;
    std::int64_t t = span > 0 ? std::int64_t((double(v) - lo) / span * bins_) : last;
    t = std::clamp<std::int64_t>(t, 0, last);
    while (t > 0 && e[t - 1] > v) --t;
    while (t < last && e[t] <= v) ++t;
    return std::uint32_t(t);
  }

  std::size_t n_, d_;
  std::uint32_t bins_;
  std::vector<float> edges_;
  std::vector<std::uint8_t> codes_;
};

// ---------------------------------------------------------------------------
// Split search
// ---------------------------------------------------------------------------

// Weighted two-class Gini impurity of a child, scaled by its mass:
// W * (1 - p+^2 - p-^2) = 2 W+ W- / (W+ + W-).
inline double weighted_gini(double pos, double neg) {
  const double total = pos + neg;
  return total > 0 ? 2.0 * pos * neg / total : 0.0;
}

struct SplitResult {
  bool found = false;
  std::uint32_t feature = 0;  // flat feature index
  std::uint32_t bin = 0;      // left iff code < bin
  double impurity = 0.0;
};

// Exhaustive search over candidate features and quantized thresholds for the
// minimum weighted Gini impurity. Ties go to the lowest feature index, then the
// lowest threshold. Pure nodes and nodes that cannot be split return found=false.
inline SplitResult find_best_split(const BinnedFeatures& data, std::span<const std::int8_t> labels,
                                   std::span<const double> weights, std::span<const std::uint32_t> node,
                                   std::span<const std::uint32_t> candidates) {
  SplitResult best;
  if (node.size() < 2) return best;
  double tot_pos = 0, tot_neg = 0;
  for (auto i : node) (labels[i] > 0 ? tot_pos : tot_neg) += weights[i];
  if (tot_pos == 0 || tot_neg == 0) return best;

  const std::uint32_t bins = data.bins();
  std::vector<double> hpos(bins), hneg(bins);
  std::vector<std::uint32_t> hcnt(bins);
  const std::size_t n_node = node.size();
  for (auto f : candidates) {
    std::fill(hpos.begin(), hpos.end(), 0.0);
    std::fill(hneg.begin(), hneg.end(), 0.0);
    std::fill(hcnt.begin(), hcnt.end(), 0u);
    const std::uint8_t* col = data.column(f);
    for (auto i : node) {
      const auto b = col[i];
      (labels[i] > 0 ? hpos[b] : hneg[b]) += weights[i];
      ++hcnt[b];
    }
    double lpos = 0, lneg = 0;
    std::size_t lcnt = 0;
    for (std::uint32_t t = 1; t < bins; ++t) {
      lpos += hpos[t - 1];
      lneg += hneg[t - 1];
      lcnt += hcnt[t - 1];
      if (lcnt == 0) continue;
      if (lcnt == n_node) break;
      if (hcnt[t - 1] == 0 && t > 1) continue;  // same partition as t-1
      const double g = weighted_gini(lpos, lneg) + weighted_gini(tot_pos - lpos, tot_neg - lneg);
      if (!best.found || g < best.impurity || (g == best.impurity && f < best.feature)) best = {true, f, t, g};
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Real AdaBoost with shrinkage
// ---------------------------------------------------------------------------

// Leaf response from the weighted class masses of the samples reaching it.
inline double leaf_value(double w_pos, double w_neg, double eps) {
  return 0.5 * std::log((w_pos + eps) / (w_neg + eps));
}

struct RoundLog {
  std::uint32_t round = 0;
  std::size_t distinct_features = 0;
  double loss = 0.0;
};

namespace detail {

inline void validate_samples(const SampleSet& s) {
  if (s.features.size() != s.size() * s.dim || s.weights.size() != s.size()) throw Error("malformed sample set");
  if (s.count(1) == 0 || s.count(-1) == 0) throw Error("degenerate labels");
  double total = 0;
  for (double w : s.weights) {
    if (!(w > 0) || !std::isfinite(w)) throw Error("zero weights");
    total += w;
  }
  if (!(total > 0)) throw Error("zero weights");
}

// Grows one tree on the current weights. out_leaf[i] receives the leaf value
// reached by training sample i.
inline Tree grow_tree(const BinnedFeatures& data, std::span<const std::int8_t> labels,
                      std::span<const double> weights, std::span<const std::uint32_t> candidates,
                      std::uint32_t max_depth, double eps, std::uint32_t cells_h, std::uint32_t cells_w,
                      std::vector<double>& out_leaf) {
  Tree tree;
  std::vector<std::uint32_t> all(labels.size());
  std::iota(all.begin(), all.end(), 0u);
  out_leaf.assign(labels.size(), 0.0);

  auto make_leaf = [&](std::span<const std::uint32_t> idx) {
    double wp = 0, wn = 0;
    for (auto i : idx) (labels[i] > 0 ? wp : wn) += weights[i];
    TreeNode leaf;
    leaf.leaf = leaf_value(wp, wn, eps);
    for (auto i : idx) out_leaf[i] = leaf.leaf;
    return leaf;
  };

  std::function<std::int32_t(std::vector<std::uint32_t>, std::uint32_t)> build =
      [&](std::vector<std::uint32_t> idx, std::uint32_t depth) -> std::int32_t {
    const auto id = std::int32_t(tree.nodes.size());
    tree.nodes.emplace_back();
    SplitResult split;
    if (depth < max_depth) split = find_best_split(data, labels, weights, idx, candidates);
    if (!split.found) {
      tree.nodes[std::size_t(id)] = make_leaf(idx);
      return id;
    }
    std::vector<std::uint32_t> left, right;
    const std::uint8_t* col = data.column(split.feature);
    for (auto i : idx) (col[i] < split.bin ? left : right).push_back(i);
    idx.clear();
    idx.shrink_to_fit();
    const std::int32_t l = build(std::move(left), depth + 1);
    const std::int32_t r = build(std::move(right), depth + 1);
    TreeNode& node = tree.nodes[std::size_t(id)];
    node.threshold = data.threshold(split.feature, split.bin);
    node.left = l;
    node.right = r;
    node.feature = feature_from_flat(split.feature, cells_h, cells_w);
    return id;
  };
  build(std::move(all), 0);
  return tree;
}

inline void check_window(const TrainConfig& cfg, std::uint32_t ratio, std::uint32_t channels, std::size_t dim) {
  if (ratio == 0 || cfg.window_h % ratio || cfg.window_w % ratio) throw Error("window not divisible by ratio");
  if (dim != std::size_t(channels) * (cfg.window_h / ratio) * (cfg.window_w / ratio))
    throw Error("sample dimension does not match window");
}

}  // namespace detail

// One unboosted tree on the normalized sample weights.
inline Tree train_tree(const SampleSet& samples, const TrainConfig& cfg, std::uint32_t ratio, std::uint32_t channels) {
  cfg.validate();
  detail::validate_samples(samples);
  detail::check_window(cfg, ratio, channels, samples.dim);
  BinnedFeatures data(samples, cfg.feature_bins);
  std::vector<double> w = samples.weights;
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& x : w) x /= total;
  std::vector<std::uint32_t> cand(samples.dim);
  std::iota(cand.begin(), cand.end(), 0u);
  std::vector<double> leaf;
  return detail::grow_tree(data, samples.labels, w, cand, cfg.max_depth, 1.0 / double(samples.size()),
                           cfg.window_h / ratio, cfg.window_w / ratio, leaf);
}

// Shrinkage real-AdaBoost. Round t fits a tree f_t to the current weights,
// then w_i <- w_i * exp(-y_i * nu * f_t(x_i)) and renormalizes. The forest
// score is nu * sum_t f_t(x). Feature indices address (channel, cell_row,
// cell_col) of a window_h/ratio x window_w/ratio grid.
inline BoostedForest train_forest(const SampleSet& samples, const TrainConfig& cfg, std::uint32_t ratio,
                                  std::uint32_t channels,
                                  const std::function<void(const RoundLog&)>& on_round = {}) {
  cfg.validate();
  detail::validate_samples(samples);
  detail::check_window(cfg, ratio, channels, samples.dim);
  const std::uint32_t cells_h = cfg.window_h / ratio, cells_w = cfg.window_w / ratio;

  BoostedForest forest;
  forest.shrinkage = cfg.shrinkage;
  forest.window_h = cfg.window_h;
  forest.window_w = cfg.window_w;
  forest.core_h = cfg.window_h;
  forest.core_w = cfg.window_w;
  forest.ratio = ratio;
  forest.channels = channels;

  const std::size_t n = samples.size();
  BinnedFeatures data(samples, cfg.feature_bins);
  std::vector<double> w = samples.weights;
  double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& x : w) x /= total;
  const double eps = 1.0 / double(n);

  std::vector<std::uint32_t> all_features(samples.dim);
  std::iota(all_features.begin(), all_features.end(), 0u);
  std::mt19937_64 rng(cfg.seed);
  std::set<std::size_t> used;
  double loss = 1.0;
  std::vector<double> leaf;

  for (std::uint32_t t = 0; t < cfg.num_trees; ++t) {
    std::vector<std::uint32_t> cand = all_features;
    if (cfg.feature_fraction < 1.0) {
      const auto k = std::max<std::size_t>(1, std::size_t(std::ceil(cfg.feature_fraction * cand.size())));
      std::shuffle(cand.begin(), cand.end(), rng);
      cand.resize(k);
      std::sort(cand.begin(), cand.end());
    }
    Tree tree = detail::grow_tree(data, samples.labels, w, cand, cfg.max_depth, eps, cells_h, cells_w, leaf);
    for (const auto& node : tree.nodes)
      if (!node.is_leaf()) used.insert(flat_from_feature(node.feature, cells_h, cells_w));
    forest.trees.push_back(std::move(tree));

    double z = 0;
    for (std::size_t i = 0; i < n; ++i) {
      w[i] *= std::exp(-double(samples.labels[i]) * cfg.shrinkage * leaf[i]);
      z += w[i];
    }
    for (auto& x : w) x /= z;
    loss *= z;
    if (on_round) on_round(RoundLog{t, used.size(), loss});
  }
  return forest;
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

struct CellOrigin {
  std::uint32_t row = 0;
  std::uint32_t col = 0;
  friend bool operator==(const CellOrigin&, const CellOrigin&) = default;
};

// Forest flattened into complete binary trees of the forest's maximum depth,
// with feature offsets resolved for one stack geometry. Shallow leaves are
// pushed down through pass-through nodes (threshold +inf, always left).
class CompiledForest {
public:
  CompiledForest(const BoostedForest& forest, std::uint32_t stack_h, std::uint32_t stack_w)
      : stack_h_(stack_h), stack_w_(stack_w), shrinkage_(forest.shrinkage),
        cells_h_(forest.cells_h()), cells_w_(forest.cells_w()) {
    forest.validate();
    depth_ = forest.max_depth();
    if (depth_ > 20) throw Error("forest too deep to compile");
    internal_ = (std::size_t(1) << depth_) - 1;
    const std::size_t leaves = std::size_t(1) << depth_;
    const std::size_t plane = std::size_t(stack_h) * stack_w;
    offsets_.assign(forest.trees.size() * internal_, 0);
    thresholds_.assign(forest.trees.size() * internal_, std::numeric_limits<float>::infinity());
    leaves_.assign(forest.trees.size() * leaves, 0.0);
    for (std::size_t t = 0; t < forest.trees.size(); ++t) {
      const auto& tree = forest.trees[t];
      std::function<void(std::int32_t, std::size_t, std::uint32_t)> fill = [&](std::int32_t ni, std::size_t pos,
                                                                                std::uint32_t d) {
        const auto& node = tree.nodes[std::size_t(ni)];
        if (d == depth_) {
          leaves_[t * leaves + (pos - internal_)] = node.leaf;
          return;
        }
        if (node.is_leaf()) {
          fill(ni, 2 * pos + 1, d + 1);
          fill(ni, 2 * pos + 2, d + 1);
          return;
        }
        const auto& f = node.feature;
        offsets_[t * internal_ + pos] = std::uint32_t(f.channel * plane + std::size_t(f.cell_row) * stack_w + f.cell_col);
        thresholds_[t * internal_ + pos] = node.threshold;
        fill(node.left, 2 * pos + 1, d + 1);
        fill(node.right, 2 * pos + 2, d + 1);
      };
      fill(0, 0, 0);
    }
    trees_ = forest.trees.size();
  }

  std::uint32_t stack_height() const { return stack_h_; }
  std::uint32_t stack_width() const { return stack_w_; }
  std::size_t tree_count() const { return trees_; }

  // Sum of raw leaf values (before shrinkage) for the window whose top-left
  // cell is at flat offset `base` in channel 0.
  double raw_sum(const float* data, std::size_t base) const {
    double acc = 0.0;
    const std::size_t leaves = internal_ + 1;
    for (std::size_t t = 0; t < trees_; ++t) acc += leaves_[t * leaves + traverse(data + base, t)];
    return acc;
  }

  double score(const ChannelStack& stack, CellOrigin origin) const {
    check_stack(stack);
    if (origin.row + cells_h_ > stack.height() || origin.col + cells_w_ > stack.width())
      throw Error("window out of bounds");
    return shrinkage_ * raw_sum(stack.values().data(), std::size_t(origin.row) * stack_w_ + origin.col);
  }

  struct Grid {
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::uint32_t step = 1;
    std::vector<double> scores;  // row-major over window origins
  };

  // Scores every window whose origin lies on a grid of `step` cells,
  // tree-major so each tree stays hot in cache.
  Grid score_grid(const ChannelStack& stack, std::uint32_t step) const {
    check_stack(stack);
    if (step == 0) throw Error("zero step");
    Grid g;
    g.step = step;
    if (stack.height() < cells_h_ || stack.width() < cells_w_) return g;
    g.rows = (stack.height() - cells_h_) / step + 1;
    g.cols = (stack.width() - cells_w_) / step + 1;
    const std::size_t n = std::size_t(g.rows) * g.cols;
    std::vector<std::size_t> bases(n);
    for (std::uint32_t r = 0; r < g.rows; ++r)
      for (std::uint32_t c = 0; c < g.cols; ++c)
        bases[std::size_t(r) * g.cols + c] = std::size_t(r) * step * stack_w_ + std::size_t(c) * step;
    std::vector<double> acc(n, 0.0);
    const float* data = stack.values().data();
    const std::size_t leaves = internal_ + 1;
    for (std::size_t t = 0; t < trees_; ++t) {
      const double* lv = leaves_.data() + t * leaves;
      for (std::size_t i = 0; i < n; ++i) acc[i] += lv[traverse(data + bases[i], t)];
    }
    for (auto& a : acc) a *= shrinkage_;
    g.scores = std::move(acc);
    return g;
  }

private:
  std::size_t traverse(const float* window, std::size_t t) const {
    const std::uint32_t* off = offsets_.data() + t * internal_;
    const float* thr = thresholds_.data() + t * internal_;
    std::size_t pos = 0;
    for (std::uint32_t d = 0; d < depth_; ++d) pos = 2 * pos + 1 + (window[off[pos]] >= thr[pos] ? 1 : 0);
    return pos - internal_;
  }

  void check_stack(const ChannelStack& stack) const {
    if (stack.height() != stack_h_ || stack.width() != stack_w_) throw Error("stack geometry differs from compiled forest");
  }

  std::uint32_t stack_h_, stack_w_;
  double shrinkage_;
  std::uint32_t cells_h_, cells_w_;
  std::uint32_t depth_ = 0;
  std::size_t internal_ = 0;
  std::size_t trees_ = 0;
  std::vector<std::uint32_t> offsets_;
  std::vector<float> thresholds_;
  std::vector<double> leaves_;
};

inline void check_forest_stack(const BoostedForest& forest, const ChannelStack& stack) {
  if (stack.ratio() != forest.ratio) throw Error("ratio mismatch between forest and stack");
  if (stack.channels() != forest.channels) throw Error("channel count mismatch between forest and stack");
}

// nu * sum of leaf values for the window with top-left cell `origin`.
inline double score_window(const BoostedForest& forest, const ChannelStack& stack, CellOrigin origin) {
  check_forest_stack(forest, stack);
  if (std::size_t(origin.row) + forest.cells_h() > stack.height() ||
      std::size_t(origin.col) + forest.cells_w() > stack.width())
    throw Error("window out of bounds");
  return CompiledForest(forest, stack.height(), stack.width()).score(stack, origin);
}

// Extracts the D = C * cells_h * cells_w feature vector of one window in
// (channel, row, col) order, matching flat_from_feature.
inline std::vector<float> window_features(const ChannelStack& stack, CellOrigin origin, std::uint32_t cells_h,
                                          std::uint32_t cells_w) {
  if (std::size_t(origin.row) + cells_h > stack.height() || std::size_t(origin.col) + cells_w > stack.width())
    throw Error("window out of bounds");
  std::vector<float> out;
  out.reserve(std::size_t(stack.channels()) * cells_h * cells_w);
  for (std::uint32_t c = 0; c < stack.channels(); ++c)
    for (std::uint32_t u = 0; u < cells_h; ++u)
      for (std::uint32_t v = 0; v < cells_w; ++v) out.push_back(stack.at(c, origin.row + u, origin.col + v));
  return out;
}

// Split counts per (cell_row, cell_col), summed over channels and trees.
inline std::vector<std::vector<double>> feature_usage_heatmap(const BoostedForest& forest) {
  std::vector<std::vector<double>> grid(forest.cells_h(), std::vector<double>(forest.cells_w(), 0.0));
  for (const auto& t : forest.trees)
    for (const auto& n : t.nodes)
      if (!n.is_leaf()) grid.at(n.feature.cell_row).at(n.feature.cell_col) += 1.0;
  return grid;
}

// ---------------------------------------------------------------------------
// Forest model file (JSON)
// ---------------------------------------------------------------------------

inline nlohmann::json forest_to_json(const BoostedForest& f) {
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& t : f.trees) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : t.nodes) {
      nlohmann::json jn;
      jn["feat"] = {n.feature.channel, n.feature.cell_row, n.feature.cell_col};
      jn["thr"] = n.is_leaf() ? 0.0 : double(n.threshold);
      jn["left"] = n.left;
      jn["right"] = n.right;
      jn["leaf"] = n.is_leaf() ? nlohmann::json(n.leaf) : nlohmann::json(nullptr);
      nodes.push_back(std::move(jn));
    }
    trees.push_back({{"nodes", std::move(nodes)}});
  }
  return {{"window", {f.window_h, f.window_w}},
          {"ratio", f.ratio},
          {"channels", f.channels},
          {"shrinkage", f.shrinkage},
          {"core", {f.core_h, f.core_w}},
          {"trees", std::move(trees)}};
}

inline BoostedForest forest_from_json(const nlohmann::json& j) {
  try {
    BoostedForest f;
    f.window_h = j.at("window").at(0).get<std::uint32_t>();
    f.window_w = j.at("window").at(1).get<std::uint32_t>();
    f.ratio = j.at("ratio").get<std::uint32_t>();
    f.channels = j.at("channels").get<std::uint32_t>();
    f.shrinkage = j.at("shrinkage").get<double>();
    if (j.contains("core")) {
      f.core_h = j["core"].at(0).get<double>();
      f.core_w = j["core"].at(1).get<double>();
    } else {
      f.core_h = f.window_h;
      f.core_w = f.window_w;
    }
    for (const auto& jt : j.at("trees")) {
      Tree t;
      for (const auto& jn : jt.at("nodes")) {
        TreeNode n;
        n.left = jn.at("left").get<std::int32_t>();
        n.right = jn.at("right").get<std::int32_t>();
        if (n.is_leaf()) {
          if (jn.at("leaf").is_null()) throw Error("leaf node without a value");
          n.leaf = jn["leaf"].get<double>();
        } else {
          const auto& feat = jn.at("feat");
          n.feature = {feat.at(0).get<std::uint32_t>(), feat.at(1).get<std::uint32_t>(), feat.at(2).get<std::uint32_t>()};
          n.threshold = float(jn.at("thr").get<double>());
        }
        t.nodes.push_back(n);
      }
      f.trees.push_back(std::move(t));
    }
    f.validate();
    return f;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed forest: ") + e.what());
  }
}

inline void save_forest(const BoostedForest& f, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << forest_to_json(f).dump() << '\n';
}

inline BoostedForest load_forest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed forest " + path.string() + ": " + e.what());
  }
  return forest_from_json(j);
}

}  // namespace cfmdet
