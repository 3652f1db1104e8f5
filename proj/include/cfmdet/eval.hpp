#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "cfmdet/error.hpp"
#include "cfmdet/geometry.hpp"
#include "cfmdet/tensorio.hpp"

namespace cfmdet {

// n reference points log-evenly spaced in [lo, hi].
inline std::vector<double> log_spaced(double lo, double hi, std::size_t n) {
  std::vector<double> out(n);
  if (n == 1) {
    out[0] = lo;
    return out;
  }
  const double a = std::log10(lo), b = std::log10(hi);
  for (std::size_t i = 0; i < n; ++i) out[i] = std::pow(10.0, a + (b - a) * double(i) / double(n - 1));
  return out;
}

struct EvalCriteria {
  double iou_min = 0.5;
  double min_height = 50;
  double max_occlusion = 0.35;
  double ignore_cover_min = 0.5;
  std::vector<double> fppi_refs = log_spaced(0.01, 1.0, 9);
  std::uint32_t recall_points = 41;
};

enum class Verdict { TP, FP, IGN };

struct EvalCurve {
  enum class Kind { RocMr, Pr };
  Kind kind = Kind::RocMr;
  std::vector<std::pair<double, double>> points;
  double summary = 0.0;
};

// Boxes that are too short, too occluded or flagged ignore go to the ignore
// set; the rest are evaluated.
inline std::pair<std::vector<Box>, std::vector<Box>> filter_ground_truth(const std::vector<GroundTruthBox>& gts,
                                                                         const EvalCriteria& c) {
  std::vector<Box> evaluated, ignored;
  for (const auto& g : gts) {
    if (g.ignore || g.box.h < c.min_height || g.occlusion > c.max_occlusion)
      ignored.push_back(g.box);
    else
      evaluated.push_back(g.box);
  }
  return {evaluated, ignored};
}

struct MatchResult {
  std::vector<Verdict> verdicts;  // aligned with the input detections
  std::vector<bool> gt_matched;   // aligned with the evaluated boxes
};

// Detections are visited by descending score (ties: box coordinates, so the
// result does not depend on input order). Each takes the unmatched evaluated
// box with the highest IoU >= iou_min (ties: lowest index). Unmatched
// detections covered by more than ignore_cover_min of their own area by an
// ignored box are IGN; the rest are FP.
inline MatchResult match_detections(const std::vector<Detection>& dets, const std::vector<Box>& evaluated,
                                    const std::vector<Box>& ignored, const EvalCriteria& c) {
  MatchResult r;
  r.verdicts.assign(dets.size(), Verdict::FP);
  r.gt_matched.assign(evaluated.size(), false);
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& da = dets[a];
    const auto& db = dets[b];
    if (da.score != db.score) return da.score > db.score;
    return std::tie(da.box.x, da.box.y, da.box.w, da.box.h, a) < std::tie(db.box.x, db.box.y, db.box.w, db.box.h, b);
  });
  for (auto di : order) {
    const Box& d = dets[di].box;
    double best = -1;
    std::size_t best_gt = 0;
    for (std::size_t g = 0; g < evaluated.size(); ++g) {
      if (r.gt_matched[g]) continue;
      const double v = iou(d, evaluated[g]);
      if (v >= c.iou_min && v > best) {
        best = v;
        best_gt = g;
      }
    }
    if (best >= 0) {
      r.gt_matched[best_gt] = true;
      r.verdicts[di] = Verdict::TP;
      continue;
    }
    for (const auto& ig : ignored)
      if (d.area() > 0 && intersection_area(d, ig) / d.area() > c.ignore_cover_min) {
        r.verdicts[di] = Verdict::IGN;
        break;
      }
  }
  return r;
}

struct ScoredVerdict {
  double score = 0;
  Verdict verdict = Verdict::FP;
};

// Pooled verdicts over an image set.
struct EvalInput {
  std::vector<ScoredVerdict> dets;
  std::size_t num_images = 0;
  std::size_t num_gt = 0;  // evaluated ground truth
};

// Matches every image of the annotation set; detections on unknown images
// are an error.
inline EvalInput match_all(const std::vector<Detection>& dets, const AnnotationSet& gt, const EvalCriteria& c) {
  std::map<std::string, std::vector<Detection>> by_image;
  for (const auto& d : dets) {
    if (!gt.count(d.image_id)) throw Error("detection on unknown image " + d.image_id);
    by_image[d.image_id].push_back(d);
  }
  EvalInput in;
  in.num_images = gt.size();
  for (const auto& [id, img] : gt) {
    const auto [evaluated, ignored] = filter_ground_truth(img.boxes, c);
    in.num_gt += evaluated.size();
    const auto it = by_image.find(id);
    if (it == by_image.end()) continue;
    const auto m = match_detections(it->second, evaluated, ignored, c);
    for (std::size_t i = 0; i < it->second.size(); ++i) in.dets.push_back({it->second[i].score, m.verdicts[i]});
  }
  return in;
}

namespace detail {

// Non-ignored verdicts grouped by distinct score, descending:
// (score, tp in group, fp in group).
inline std::vector<std::tuple<double, std::size_t, std::size_t>> score_groups(const EvalInput& in) {
  std::vector<ScoredVerdict> v;
  for (const auto& d : in.dets)
    if (d.verdict != Verdict::IGN) v.push_back(d);
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::vector<std::tuple<double, std::size_t, std::size_t>> groups;
  for (const auto& d : v) {
    if (groups.empty() || std::get<0>(groups.back()) != d.score) groups.emplace_back(d.score, 0, 0);
    (d.verdict == Verdict::TP ? std::get<1>(groups.back()) : std::get<2>(groups.back()))++;
  }
  return groups;
}

}  // namespace detail

// FPPI vs miss rate with every distinct score as a threshold. Starts at
// (0, 1); points sharing an FPPI keep the lowest miss rate.
inline EvalCurve mr_curve(const EvalInput& in) {
  if (in.num_gt == 0) throw Error("no ground truth");
  if (in.num_images == 0) throw Error("no images");
  EvalCurve curve;
  curve.kind = EvalCurve::Kind::RocMr;
  curve.points.emplace_back(0.0, 1.0);
  std::size_t tp = 0, fp = 0;
  for (const auto& [score, gtp, gfp] : detail::score_groups(in)) {
    tp += gtp;
    fp += gfp;
    const double fppi = double(fp) / double(in.num_images);
    const double mr = 1.0 - double(tp) / double(in.num_gt);
    if (curve.points.back().first == fppi)
      curve.points.back().second = std::min(curve.points.back().second, mr);
    else
      curve.points.emplace_back(fppi, mr);
  }
  return curve;
}

inline constexpr double kMissRateFloor = 1e-4;

// Geometric mean of the miss rate sampled at each reference FPPI (largest
// curve FPPI <= reference, 1.0 if none), each clamped below at 1e-4.
inline double log_avg_mr(const EvalCurve& curve, const std::vector<double>& refs) {
  if (refs.empty()) throw Error("empty fppi references");
  double acc = 0;
  for (double f : refs) {
    double mr = 1.0;
    for (const auto& [x, y] : curve.points)
      if (x <= f) mr = y;
    acc += std::log(std::max(mr, kMissRateFloor));
  }
  return std::exp(acc / double(refs.size()));
}

inline EvalCurve mr_curve(const EvalInput& in, const std::vector<double>& refs) {
  auto curve = mr_curve(in);
  curve.summary = log_avg_mr(curve, refs);
  return curve;
}

// Interpolated precision p(r) = max precision at recall >= r, averaged over
// recall_points levels evenly spaced in [0, 1]. The curve holds (recall,
// precision) after each distinct score.
inline EvalCurve average_precision(const EvalInput& in, std::uint32_t recall_points) {
  if (in.num_gt == 0) throw Error("no ground truth");
  if (recall_points < 2) throw Error("recall_points must be >= 2");
  EvalCurve curve;
  curve.kind = EvalCurve::Kind::Pr;
  std::size_t tp = 0, fp = 0;
  for (const auto& [score, gtp, gfp] : detail::score_groups(in)) {
    tp += gtp;
    fp += gfp;
    const double recall = double(tp) / double(in.num_gt);
    const double precision = double(tp) / double(tp + fp);
    if (!curve.points.empty() && curve.points.back().first == recall) continue;
    curve.points.emplace_back(recall, precision);
  }
  // The first point at a recall level carries that level's highest precision.
  double sum = 0;
  for (std::uint32_t k = 0; k < recall_points; ++k) {
    const double r = double(k) / double(recall_points - 1);
    double p = 0;
    for (const auto& [rec, prec] : curve.points)
      if (rec >= r) p = std::max(p, prec);
    sum += p;
  }
  curve.summary = sum / double(recall_points);
  return curve;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

inline void write_curve_csv(const EvalCurve& curve, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << (curve.kind == EvalCurve::Kind::RocMr ? "fppi,miss_rate\n" : "recall,precision\n");
  for (const auto& [x, y] : curve.points) out << format_real(x) << ',' << format_real(y) << '\n';
  out << (curve.kind == EvalCurve::Kind::RocMr ? "# log_avg_mr," : "# ap,") << format_real(curve.summary) << '\n';
}

inline EvalCurve read_curve_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  EvalCurve curve;
  std::string line;
  std::size_t lineno = 0;
  bool summary = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    try {
      if (lineno == 1) {
        if (line == "fppi,miss_rate")
          curve.kind = EvalCurve::Kind::RocMr;
        else if (line == "recall,precision")
          curve.kind = EvalCurve::Kind::Pr;
        else
          throw Error("unknown curve header");
        continue;
      }
      if (line.empty()) continue;
      if (line.rfind("# ", 0) == 0) {
        const auto f = split_csv(std::string_view(line).substr(2));
        if (f.size() != 2) throw Error("bad summary line");
        curve.summary = parse_real(f[1]);
        summary = true;
        continue;
      }
      const auto f = split_csv(line);
      if (f.size() != 2) throw Error("expected 2 fields");
      curve.points.emplace_back(parse_real(f[0]), parse_real(f[1]));
    } catch (const Error& e) {
      throw Error(path.string() + ": line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (lineno == 0) throw Error(path.string() + ": empty curve file");
  if (!summary) throw Error(path.string() + ": missing summary line");
  return curve;
}

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

struct LabeledCurve {
  std::string label;
  EvalCurve curve;
};

// Miss rate vs FPPI on log-log axes (or precision vs recall on linear axes).
inline std::string curves_to_svg(const std::vector<LabeledCurve>& curves, const std::string& title) {
  constexpr double W = 640, H = 480, L = 70, R = 200, T = 40, B = 60;
  const bool roc = curves.empty() || curves.front().curve.kind == EvalCurve::Kind::RocMr;
  auto px = [&](double x) {
    if (roc) x = (std::log10(std::clamp(x, 1e-3, 1e1)) + 3.0) / 4.0;
    return L + x * (W - L - R);
  };
  auto py = [&](double y) {
    if (roc) y = (std::log10(std::clamp(y, 0.05, 1.0)) - std::log10(0.05)) / -std::log10(0.05);
    return H - B - y * (H - T - B);
  };
  static const char* colors[] = {"#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << detail::xml_escape(title) << "</text>\n";
  s << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << W - L - R << "\" height=\"" << H - T - B
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  const std::vector<double> xticks = roc ? std::vector<double>{1e-3, 1e-2, 1e-1, 1, 10} : std::vector<double>{0, 0.25, 0.5, 0.75, 1};
  const std::vector<double> yticks = roc ? std::vector<double>{0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.64, 0.8, 1}
                                         : std::vector<double>{0, 0.25, 0.5, 0.75, 1};
  for (double t : xticks)
    s << "<text x=\"" << px(t) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\" font-size=\"11\">" << t << "</text>\n";
  for (double t : yticks)
    s << "<text x=\"" << L - 6 << "\" y=\"" << py(t) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << t << "</text>\n";
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 18 << "\" text-anchor=\"middle\" font-size=\"13\">"
    << (roc ? "false positives per image" : "recall") << "</text>\n";
  s << "<text x=\"18\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 18 "
    << (T + H - B) / 2 << ")\">" << (roc ? "miss rate" : "precision") << "</text>\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i];
    const char* color = colors[i % std::size(colors)];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    double prev_y = roc ? 1.0 : 0.0;
    bool first = true;
    for (const auto& [x, y] : c.curve.points) {
      if (roc && !first) s << px(x) << ',' << py(prev_y) << ' ';
      s << px(roc ? std::max(x, 1e-3) : x) << ',' << py(y) << ' ';
      prev_y = y;
      first = false;
    }
    if (roc && !c.curve.points.empty()) s << px(10) << ',' << py(prev_y);
    s << "\"/>\n";
    std::ostringstream label;
    label.precision(2);
    label << std::fixed << c.curve.summary * 100 << "% " << detail::xml_escape(c.label);
    s << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 18 * (i + 1) << "\" font-size=\"12\" fill=\"" << color << "\">"
      << label.str() << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace cfmdet
