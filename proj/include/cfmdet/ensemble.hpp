#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cfmdet/boost.hpp"
#include "cfmdet/channels.hpp"
#include "cfmdet/error.hpp"
#include "cfmdet/geometry.hpp"
#include "cfmdet/tensorio.hpp"

namespace cfmdet {

// Cell origin for a model-window box given in level pixels:
// (round(y / ratio), round(x / ratio)), clamped so the whole cell window
// fits inside the stack.
inline CellOrigin map_box_to_cells(const Box& window_box, std::uint32_t ratio, std::uint32_t stack_h,
                                   std::uint32_t stack_w, std::uint32_t window_h = 128, std::uint32_t window_w = 64) {
  if (!is_supported_ratio(ratio)) throw Error("unsupported ratio " + std::to_string(ratio));
  const std::uint32_t ch = window_h / ratio, cw = window_w / ratio;
  if (stack_h < ch || stack_w < cw) throw Error("stack smaller than cell window");
  const auto clamp_cell = [](double v, std::uint32_t hi) {
    const double r = std::round(v);
    if (!(r > 0)) return std::uint32_t{0};
    return std::uint32_t(std::min(r, double(hi)));
  };
  return {clamp_cell(window_box.y / ratio, stack_h - ch), clamp_cell(window_box.x / ratio, stack_w - cw)};
}

// One rescoring member for one image: a forest and its feature pyramid.
struct EnsembleMember {
  const BoostedForest* forest = nullptr;
  const Pyramid* pyramid = nullptr;
};

namespace detail {

// Pyramid level whose scale is closest (in log space) to the scale at which
// the proposal fills the model's object box.
inline std::size_t nearest_level(const Pyramid& pyr, double scale) {
  if (pyr.empty()) throw Error("member has no pyramid levels");
  std::size_t best = 0;
  double best_d = std::abs(std::log(pyr[0].scale / scale));
  for (std::size_t i = 1; i < pyr.size(); ++i) {
    const double d = std::abs(std::log(pyr[i].scale / scale));
    if (d < best_d) {
      best = i;
      best_d = d;
    }
  }
  return best;
}

}  // namespace detail

// Scores every proposal with every member at the window position the
// proposal maps to. Result[m][i] is member m's score for proposal i.
inline std::vector<std::vector<double>> rescore_proposals(const std::vector<Detection>& proposals,
                                                          const std::vector<EnsembleMember>& members) {
  std::vector<std::vector<double>> out;
  out.reserve(members.size());
  for (const auto& m : members) {
    if (!m.forest || !m.pyramid) throw Error("incomplete ensemble member");
    const auto& f = *m.forest;
    for (const auto& lvl : *m.pyramid) check_forest_stack(f, lvl.stack);
    std::vector<std::optional<CompiledForest>> compiled(m.pyramid->size());
    std::vector<double> scores;
    scores.reserve(proposals.size());
    for (const auto& p : proposals) {
      const std::size_t li = detail::nearest_level(*m.pyramid, f.core_h / p.box.h);
      const auto& lvl = (*m.pyramid)[li];
      const Box window{p.box.x * lvl.scale - f.pad_x(), p.box.y * lvl.scale - f.pad_y(), double(f.window_w),
                       double(f.window_h)};
      const auto origin = map_box_to_cells(window, f.ratio, lvl.stack.height(), lvl.stack.width(), f.window_h, f.window_w);
      if (!compiled[li]) compiled[li].emplace(f, lvl.stack.height(), lvl.stack.width());
      scores.push_back(compiled[li]->score(lvl.stack, origin));
    }
    out.push_back(std::move(scores));
  }
  return out;
}

// Element-wise arithmetic mean over all member lists and, when given, the
// external list.
inline std::vector<double> combine_scores(const std::vector<std::vector<double>>& lists,
                                          const std::optional<std::vector<double>>& external = std::nullopt) {
  std::vector<const std::vector<double>*> all;
  for (const auto& l : lists) all.push_back(&l);
  if (external) all.push_back(&*external);
  if (all.empty()) throw Error("no score lists to combine");
  const std::size_t n = all.front()->size();
  for (const auto* l : all)
    if (l->size() != n) throw Error("score list length mismatch");
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0;
    for (const auto* l : all) sum += (*l)[i];
    out[i] = sum / double(all.size());
  }
  return out;
}

// External score CSV "image_id,proposal_index,score"; proposal_index counts
// proposals of the same image in list order.
inline std::vector<double> fuse_external_scores(const std::vector<Detection>& proposals, std::istream& in) {
  if (proposals.empty()) return {};
  std::map<std::pair<std::string, std::size_t>, double> table;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 && line == "image_id,proposal_index,score") continue;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    try {
      if (f.size() != 3) throw Error("expected 3 fields");
      const double idx = parse_real(f[1]);
      if (!(idx >= 0) || idx != std::floor(idx)) throw Error("bad proposal index");
      const double score = parse_real(f[2]);
      if (!std::isfinite(score)) throw Error("non-finite score");
      if (!table.emplace(std::make_pair(std::string(f[0]), std::size_t(idx)), score).second)
        throw Error("duplicate external score");
    } catch (const Error& e) {
      throw Error(std::string(e.what()) == "duplicate external score"
                      ? "duplicate external score"
                      : "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  std::map<std::string, std::size_t> next_index;
  std::vector<double> out;
  out.reserve(proposals.size());
  for (const auto& p : proposals) {
    const std::size_t idx = next_index[p.image_id]++;
    const auto it = table.find({p.image_id, idx});
    if (it == table.end()) throw Error("unscored proposal");
    out.push_back(it->second);
  }
  return out;
}

inline std::vector<double> fuse_external_scores(const std::vector<Detection>& proposals,
                                                const std::filesystem::path& path) {
  if (proposals.empty()) return {};
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return fuse_external_scores(proposals, in);
}

// (x - mean) / stddev; a constant list maps to zeros.
inline std::vector<double> z_normalize(const std::vector<double>& v) {
  if (v.empty()) return {};
  double mean = 0;
  for (double x : v) mean += x;
  mean /= double(v.size());
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= double(v.size());
  const double sd = std::sqrt(var);
  std::vector<double> out(v.size(), 0.0);
  if (sd > 0)
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mean) / sd;
  return out;
}

}  // namespace cfmdet
