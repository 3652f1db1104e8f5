#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfmdet/boost.hpp"
#include "cfmdet/bootstrap.hpp"
#include "cfmdet/channels.hpp"
#include "cfmdet/detect.hpp"
#include "cfmdet/digest.hpp"
#include "cfmdet/ensemble.hpp"
#include "cfmdet/error.hpp"
#include "cfmdet/eval.hpp"
#include "cfmdet/image.hpp"
#include "cfmdet/segfuse.hpp"
#include "cfmdet/tensorio.hpp"

// Config-driven batch commands. One JSON document configures every command;
// each command reads its own section ("train", "detect", ...) plus the shared
// "dataset", "pyramid" and "features" keys. Input paths are resolved against
// the config file's directory, outputs against "output_dir".
namespace cfmdet::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kVersion = "0.1.0";

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c{"channels", "train",   "bootstrap", "detect",  "propose", "rescore",
                                          "segfuse",  "eval",    "heatmap",   "report"};
  return c;
}

inline bool is_command(const std::string& c) {
  return c == "run" || std::find(commands().begin(), commands().end(), c) != commands().end();
}

// ---------------------------------------------------------------------------
// Config plumbing
// ---------------------------------------------------------------------------

// Parses `value` as JSON when it is valid JSON, otherwise keeps it as a string.
inline json parse_value(const std::string& value) {
  json v = json::parse(value, nullptr, false);
  if (v.is_discarded()) return json(value);
  return v;
}

// "a.b.c=value" sets config["a"]["b"]["c"].
inline void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw Error("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (part.empty()) throw Error("empty key segment in " + key);
    if (!node->is_object()) throw Error("cannot set " + key + ": parent is not an object");
    if (dot == std::string::npos) {
      (*node)[part] = parse_value(assignment.substr(eq + 1));
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

struct Context {
  json config = json::object();
  fs::path base_dir = ".";
  fs::path output_dir = "out";
  std::optional<std::uint64_t> seed;
  std::ostream* out = &std::cout;
  std::ostream* log = &std::cerr;
  std::vector<fs::path> outputs;

  json section(const std::string& name) const {
    if (!config.contains(name)) return json::object();
    const auto& s = config.at(name);
    if (!s.is_object()) throw Error("config section '" + name + "' must be an object");
    return s;
  }

  fs::path input(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }

  fs::path output(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : output_dir / path;
  }

  // Input that defaults to an artifact written by another command.
  fs::path artifact(const json& sec, const std::string& key, const std::string& default_name) const {
    if (sec.contains(key) && !sec.at(key).is_null()) return input(sec.at(key).get<std::string>());
    return output(default_name);
  }

  fs::path produce(const json& sec, const std::string& key, const std::string& default_name) {
    return produce(sec.value(key, default_name));
  }

  fs::path produce(const std::string& name) {
    fs::path p = output(name);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    outputs.push_back(p);
    return p;
  }

  std::uint64_t require_seed(const std::string& command) const {
    if (!seed) throw Error("'" + command + "' requires a seed (config \"seed\" or --seed)");
    return *seed;
  }
};

template <class T>
T get_or(const json& sec, const std::string& key, T fallback) {
  if (!sec.contains(key) || sec.at(key).is_null()) return fallback;
  try {
    return sec.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error("config key '" + key + "' has the wrong type");
  }
}

inline Context make_context(json config, const fs::path& base_dir) {
  if (!config.is_object()) throw Error("config must be a JSON object");
  Context ctx;
  ctx.base_dir = base_dir;
  ctx.config = std::move(config);
  ctx.output_dir = ctx.input(get_or<std::string>(ctx.config, "output_dir", "out"));
  if (ctx.config.contains("seed") && !ctx.config["seed"].is_null()) {
    const auto& s = ctx.config["seed"];
    if (!s.is_number_integer() || s.get<std::int64_t>() < 0) throw Error("seed must be a non-negative integer");
    ctx.seed = s.get<std::uint64_t>();
  }
  return ctx;
}

inline json load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error("invalid config " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Datasets and feature sources
// ---------------------------------------------------------------------------

struct Split {
  std::string name;
  fs::path images;  // directory of <image_id>.ppm
  fs::path annotations;
  AnnotationSet gt;
};

inline Split load_split(const Context& ctx, const std::string& name) {
  const auto ds = ctx.section("dataset");
  if (!ds.contains(name) || !ds[name].is_object()) throw Error("dataset split '" + name + "' is not configured");
  const auto& s = ds[name];
  Split split;
  split.name = name;
  split.images = ctx.input(get_or<std::string>(s, "images", "."));
  split.annotations = ctx.input(get_or<std::string>(s, "annotations", ""));
  split.gt = read_annotations(split.annotations);
  return split;
}

inline Image load_image(const Split& split, const std::string& id) {
  Image img = read_ppm(split.images / (id + ".ppm"));
  const auto& a = split.gt.at(id);
  if (img.width != a.width || img.height != a.height)
    throw Error("image " + id + " is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                " but annotated as " + std::to_string(a.width) + "x" + std::to_string(a.height));
  return img;
}

// index.jsonl: {"image": id, "scale": s, "path": relative-or-absolute}
struct TensorEntry {
  double scale = 1.0;
  fs::path path;
};
using TensorIndex = std::map<std::string, std::vector<TensorEntry>>;

inline TensorIndex read_tensor_index(const fs::path& dir) {
  const fs::path index = dir / "index.jsonl";
  std::ifstream in(index);
  if (!in) throw Error("cannot open " + index.string());
  TensorIndex out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      TensorEntry e;
      e.scale = j.value("scale", 1.0);
      if (!(e.scale > 0)) throw Error("scale must be positive");
      const fs::path p = j.at("path").get<std::string>();
      e.path = p.is_absolute() ? p : dir / p;
      out[j.at("image").get<std::string>()].push_back(e);
    } catch (const std::exception& e) {
      throw Error(index.string() + ": line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  for (auto& [id, entries] : out)
    std::stable_sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.scale > b.scale; });
  return out;
}

// One entry of the "features" list: "acf", "checkerboard",
// {"checkerboard": bank.json} or {"tensors": dir}.
struct FeatureSource {
  enum class Kind { Acf, Checkerboard, Tensors } kind = Kind::Acf;
  FilterBank bank;
  fs::path dir;
  TensorIndex index;
};

struct FeatureSpec {
  std::vector<FeatureSource> sources;
  PyramidConfig pyramid;
};

inline PyramidConfig pyramid_config(const json& p) {
  PyramidConfig cfg;
  cfg.scales_per_octave = get_or<std::uint32_t>(p, "scales_per_octave", cfg.scales_per_octave);
  cfg.min_scale = get_or<double>(p, "min_scale", cfg.min_scale);
  cfg.max_scale = get_or<double>(p, "max_scale", cfg.max_scale);
  cfg.ratio = get_or<std::uint32_t>(p, "ratio", cfg.ratio);
  cfg.validate();
  if (!is_supported_ratio(cfg.ratio)) throw Error("unsupported pyramid ratio " + std::to_string(cfg.ratio));
  return cfg;
}

// `features`/`pyramid` may be overridden per section (ensemble members).
inline FeatureSpec feature_spec(const Context& ctx, const json& sec = json::object()) {
  FeatureSpec spec;
  const json p = sec.contains("pyramid") ? sec.at("pyramid") : ctx.section("pyramid");
  spec.pyramid = pyramid_config(p);
  const json list = sec.contains("features") ? sec.at("features") : ctx.config.value("features", json::array({"acf"}));
  if (!list.is_array() || list.empty()) throw Error("\"features\" must be a non-empty list");
  for (const auto& f : list) {
    FeatureSource s;
    if (f == "acf") {
      s.kind = FeatureSource::Kind::Acf;
    } else if (f == "checkerboard") {
      s.kind = FeatureSource::Kind::Checkerboard;
      s.bank = default_checkerboard_bank();
    } else if (f.is_object() && f.contains("checkerboard")) {
      s.kind = FeatureSource::Kind::Checkerboard;
      s.bank = load_filter_bank(ctx.input(f["checkerboard"].get<std::string>()));
    } else if (f.is_object() && f.contains("tensors")) {
      s.kind = FeatureSource::Kind::Tensors;
      s.dir = ctx.input(f["tensors"].get<std::string>());
      s.index = read_tensor_index(s.dir);
    } else {
      throw Error("unknown feature source " + f.dump());
    }
    spec.sources.push_back(std::move(s));
  }
  return spec;
}

struct Layout {
  std::uint32_t ratio = 0;
  std::uint32_t channels = 0;
};

// Ratio and channel count of the concatenated stack, from tensor headers
// only, so incompatible pairings fail before any feature is computed.
inline Layout feature_layout(const FeatureSpec& spec) {
  Layout out;
  auto merge = [&](std::uint32_t ratio, std::uint32_t channels, const std::string& what) {
    if (out.ratio != 0 && out.ratio != ratio)
      throw Error("incompatible stacks: " + what + " has ratio " + std::to_string(ratio) + ", expected " +
                  std::to_string(out.ratio));
    out.ratio = ratio;
    out.channels += channels;
  };
  for (const auto& s : spec.sources) {
    switch (s.kind) {
      case FeatureSource::Kind::Acf:
        merge(spec.pyramid.ratio, kAcfChannels, "acf");
        break;
      case FeatureSource::Kind::Checkerboard:
        merge(spec.pyramid.ratio, kAcfChannels * std::uint32_t(s.bank.count()), "checkerboard");
        break;
      case FeatureSource::Kind::Tensors: {
        std::optional<std::uint32_t> channels;
        for (const auto& [id, entries] : s.index)
          for (const auto& e : entries) {
            const Tensor h = read_tensor_header(e.path);
            if (h.dims.size() != 3) throw Error(e.path.string() + ": feature tensor needs 3 dims");
            if (h.ratio != (out.ratio ? out.ratio : h.ratio) || (channels && *channels != h.dims[0]))
              throw Error("incompatible stacks: " + e.path.string() + " has ratio " + std::to_string(h.ratio) +
                          " and " + std::to_string(h.dims[0]) + " channels");
            if (!channels) {
              merge(h.ratio, h.dims[0], e.path.string());
              channels = h.dims[0];
            }
          }
        if (!channels) throw Error("tensor source " + s.dir.string() + " is empty");
        break;
      }
    }
  }
  return out;
}

inline void check_forest_layout(const BoostedForest& f, const Layout& layout, const std::string& what) {
  if (f.ratio != layout.ratio)
    throw Error(what + ": forest ratio " + std::to_string(f.ratio) + " does not match feature ratio " +
                std::to_string(layout.ratio));
  if (f.channels != layout.channels)
    throw Error(what + ": forest expects " + std::to_string(f.channels) + " channels, features provide " +
                std::to_string(layout.channels));
}

namespace detail {

inline ChannelStack computed_channels(const FeatureSource& s, const Image& img, std::uint32_t ratio) {
  if (s.kind == FeatureSource::Kind::Acf) return compute_acf_channels(img, ratio);
  return compute_checkerboard_channels(img, ratio, s.bank);
}

}  // namespace detail

// Pyramid of the concatenated sources. With tensor sources the level scales
// come from the (first) tensor index; computed sources are evaluated on the
// image resized to each of those scales.
inline Pyramid build_feature_pyramid(const FeatureSpec& spec, const Image& img, const std::string& image_id) {
  const FeatureSource* first_tensor = nullptr;
  for (const auto& s : spec.sources)
    if (s.kind == FeatureSource::Kind::Tensors) {
      first_tensor = &s;
      break;
    }
  if (!first_tensor) {
    return build_pyramid(img, spec.pyramid, [&](const Image& im) {
      std::vector<ChannelStack> parts;
      for (const auto& s : spec.sources) parts.push_back(detail::computed_channels(s, im, spec.pyramid.ratio));
      return parts.size() == 1 ? std::move(parts.front()) : concat_stacks(parts);
    });
  }
  const auto it = first_tensor->index.find(image_id);
  if (it == first_tensor->index.end()) throw Error("no tensors for image " + image_id + " in " + first_tensor->dir.string());
  Pyramid pyr;
  for (const auto& entry : it->second) {
    const auto w = std::uint32_t(std::lround(img.width * entry.scale));
    const auto h = std::uint32_t(std::lround(img.height * entry.scale));
    if (h < spec.pyramid.window_h || w < spec.pyramid.window_w) continue;
    std::optional<Image> resized;
    std::vector<ChannelStack> parts;
    for (const auto& s : spec.sources) {
      if (s.kind == FeatureSource::Kind::Tensors) {
        const auto jt = s.index.find(image_id);
        if (jt == s.index.end()) throw Error("no tensors for image " + image_id + " in " + s.dir.string());
        const auto match = std::find_if(jt->second.begin(), jt->second.end(),
                                        [&](const TensorEntry& e) { return std::abs(e.scale - entry.scale) < 1e-9; });
        if (match == jt->second.end())
          throw Error("tensor source " + s.dir.string() + " lacks scale " + format_real(entry.scale) + " for " + image_id);
        Tensor t = read_tensor(match->path);
        validate_feature_tensor(t, img.width, img.height, entry.scale);
        parts.push_back(tensor_to_stack(std::move(t)));
      } else {
        if (!resized) resized = (w == img.width && h == img.height) ? img : resize_bilinear(img, w, h);
        parts.push_back(detail::computed_channels(s, *resized, spec.pyramid.ratio));
      }
    }
    pyr.push_back(PyramidLevel{entry.scale, parts.size() == 1 ? std::move(parts.front()) : concat_stacks(parts)});
  }
  return pyr;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline DetectConfig detect_config(const json& sec) {
  DetectConfig dc;
  dc.stride = get_or<std::uint32_t>(sec, "stride", dc.stride);
  // null means "no threshold"
  dc.score_threshold = sec.contains("threshold") && sec["threshold"].is_null()
                           ? -std::numeric_limits<double>::infinity()
                           : get_or<double>(sec, "threshold", dc.score_threshold);
  dc.nms_overlap = get_or<double>(sec, "nms_overlap", dc.nms_overlap);
  dc.max_per_image = get_or<std::size_t>(sec, "max_per_image", dc.max_per_image);
  return dc;
}

inline void cmd_channels(Context& ctx) {
  const auto sec = ctx.section("channels");
  const auto split = load_split(ctx, get_or<std::string>(sec, "split", "train"));
  const auto spec = feature_spec(ctx, sec);
  feature_layout(spec);
  const fs::path dir = ctx.output(get_or<std::string>(sec, "output", "channels/" + split.name));
  fs::create_directories(dir);
  std::ofstream index(dir / "index.jsonl", std::ios::trunc);
  if (!index) throw Error("cannot write " + (dir / "index.jsonl").string());
  std::size_t files = 0;
  for (const auto& [id, ann] : split.gt) {
    const auto pyr = build_feature_pyramid(spec, load_image(split, id), id);
    for (std::size_t li = 0; li < pyr.size(); ++li) {
      const std::string name = id + "_" + std::to_string(li) + ".cft";
      write_tensor(stack_to_tensor(pyr[li].stack), dir / name);
      ctx.outputs.push_back(dir / name);
      index << json{{"image", id}, {"scale", pyr[li].scale}, {"path", name}}.dump() << '\n';
      ++files;
    }
  }
  ctx.outputs.push_back(dir / "index.jsonl");
  *ctx.out << "wrote " << files << " tensors to " << dir.string() << '\n';
}

inline std::vector<TrainingImage> training_images(const Context& ctx, const Split& split, const FeatureSpec& spec) {
  std::vector<TrainingImage> images;
  for (const auto& [id, ann] : split.gt) images.push_back({id, build_feature_pyramid(spec, load_image(split, id), id), ann.boxes});
  return images;
}

inline void cmd_train(Context& ctx, bool bootstrap) {
  const std::string name = bootstrap ? "bootstrap" : "train";
  const std::uint64_t seed = ctx.require_seed(name);
  // "bootstrap" reads the "train" section too, so one block configures both.
  json sec = ctx.section("train");
  if (bootstrap) sec.update(ctx.section("bootstrap"));
  const auto split = load_split(ctx, get_or<std::string>(sec, "split", "train"));
  const auto spec = feature_spec(ctx, sec);
  const Layout layout = feature_layout(spec);

  TrainConfig tc;
  tc.num_trees = get_or<std::uint32_t>(sec, "num_trees", tc.num_trees);
  tc.max_depth = get_or<std::uint32_t>(sec, "max_depth", tc.max_depth);
  tc.shrinkage = get_or<double>(sec, "shrinkage", tc.shrinkage);
  tc.feature_bins = get_or<std::uint32_t>(sec, "feature_bins", tc.feature_bins);
  tc.feature_fraction = get_or<double>(sec, "feature_fraction", tc.feature_fraction);
  tc.bootstrap_rounds = bootstrap ? get_or<std::uint32_t>(sec, "bootstrap_rounds", tc.bootstrap_rounds) : 0;
  tc.neg_cap = get_or<std::uint32_t>(sec, "neg_cap", tc.neg_cap);
  tc.seed = seed;
  tc.window_h = spec.pyramid.window_h;
  tc.window_w = spec.pyramid.window_w;
  tc.validate();
  if (tc.window_h % layout.ratio || tc.window_w % layout.ratio) throw Error("window not divisible by feature ratio");

  SamplingConfig sc;
  sc.stride = get_or<std::uint32_t>(sec, "stride", sc.stride);
  sc.pos_per_gt = get_or<std::size_t>(sec, "pos_per_gt", sc.pos_per_gt);
  sc.seed_negatives_per_image = get_or<std::size_t>(sec, "seed_negatives", sc.seed_negatives_per_image);
  sc.neg_cap = tc.neg_cap;
  sc.seed = seed;

  const auto images = training_images(ctx, split, spec);
  const fs::path log_path = ctx.produce(sec, "log", name + "-log.csv");
  std::ofstream log(log_path, std::ios::trunc);
  log << "bootstrap_round,tree,distinct_features,loss\n";
  const auto forests = train_with_bootstrapping(images, tc, sc, [&](std::uint32_t round, const RoundLog& r) {
    log << round << ',' << r.round << ',' << r.distinct_features << ',' << format_real(r.loss) << '\n';
  });
  if (bootstrap)
    for (std::size_t r = 0; r < forests.size(); ++r)
      save_forest(forests[r], ctx.produce("forest-round" + std::to_string(r) + ".json"));
  const fs::path model = ctx.produce(sec, "model", "forest.json");
  save_forest(forests.back(), model);
  *ctx.out << name << ": " << forests.back().trees.size() << " trees, " << forests.size() << " round(s) -> "
           << model.string() << '\n';
}

struct Scored {
  Split split;
  std::vector<Detection> dets;
};

inline BoostedForest load_checked_forest(const Context& ctx, const json& sec, const FeatureSpec& spec,
                                         const std::string& what) {
  const auto model = ctx.artifact(sec, "model", "forest.json");
  auto forest = load_forest(model);
  check_forest_layout(forest, feature_layout(spec), what + " (" + model.string() + ")");
  if (forest.window_h != spec.pyramid.window_h || forest.window_w != spec.pyramid.window_w)
    throw Error(what + ": forest window differs from pyramid window");
  return forest;
}

inline void cmd_detect(Context& ctx) {
  const auto sec = ctx.section("detect");
  const auto spec = feature_spec(ctx, sec);
  const auto forest = load_checked_forest(ctx, sec, spec, "detect");
  const auto dc = detect_config(sec);
  dc.cell_step(forest.ratio);
  const auto split = load_split(ctx, get_or<std::string>(sec, "split", "test"));
  std::vector<Detection> all;
  for (const auto& [id, ann] : split.gt) {
    auto d = detect(forest, build_feature_pyramid(spec, load_image(split, id), id), dc, id);
    all.insert(all.end(), d.begin(), d.end());
  }
  const auto out = ctx.produce(sec, "output", "detections.csv");
  write_detections(all, out);
  *ctx.out << "detect: " << all.size() << " detections on " << split.gt.size() << " images -> " << out.string() << '\n';
}

inline void cmd_propose(Context& ctx) {
  const auto sec = ctx.section("propose");
  const auto spec = feature_spec(ctx, sec);
  const auto forest = load_checked_forest(ctx, sec, spec, "propose");
  DetectConfig dc = detect_config(sec);
  dc.cell_step(forest.ratio);
  const auto split = load_split(ctx, get_or<std::string>(sec, "split", "test"));

  json report = {{"target", nullptr}, {"threshold", dc.score_threshold}};
  if (sec.contains("target") && !sec["target"].is_null()) {
    const double target = sec["target"].get<double>();
    const auto cal_split = load_split(ctx, get_or<std::string>(sec, "calibration_split", split.name));
    std::vector<std::vector<Candidate>> cal;
    for (const auto& [id, ann] : cal_split.gt)
      cal.push_back(score_pyramid(forest, build_feature_pyramid(spec, load_image(cal_split, id), id), dc.stride, id));
    const auto rep = calibrate_threshold(cal, dc, target);
    dc.score_threshold = rep.threshold;
    report = {{"target", target},
              {"threshold", rep.threshold},
              {"mean_per_image", rep.mean_per_image},
              {"calibration_images", rep.images},
              {"calibration_split", cal_split.name}};
  }
  std::vector<Detection> all;
  for (const auto& [id, ann] : split.gt) {
    auto d = propose(forest, build_feature_pyramid(spec, load_image(split, id), id), dc, id);
    all.insert(all.end(), d.begin(), d.end());
  }
  report["proposals"] = all.size();
  report["mean_per_image"] = split.gt.empty() ? 0.0 : double(all.size()) / double(split.gt.size());
  const auto out = ctx.produce(sec, "output", "proposals.csv");
  write_detections(all, out);
  write_json(report, ctx.produce(sec, "report", "calibration.json"));
  *ctx.out << "propose: threshold " << format_real(dc.score_threshold) << ", "
           << format_real(report["mean_per_image"].get<double>()) << " proposals/image -> " << out.string() << '\n';
}

inline void cmd_rescore(Context& ctx) {
  const auto sec = ctx.section("rescore");
  if (!sec.contains("members") || !sec["members"].is_array() || sec["members"].empty())
    throw Error("rescore needs a non-empty \"members\" list");
  struct Member {
    FeatureSpec spec;
    BoostedForest forest;
  };
  std::vector<Member> members;
  for (const auto& m : sec["members"]) {
    if (!m.is_object()) throw Error("ensemble member must be an object");
    auto spec = feature_spec(ctx, m);
    auto forest = load_checked_forest(ctx, m, spec, "rescore member");
    members.push_back({std::move(spec), std::move(forest)});
  }
  const auto proposals = read_detections(ctx.artifact(sec, "proposals", "proposals.csv"));
  const auto split = load_split(ctx, get_or<std::string>(sec, "split", "test"));
  for (const auto& p : proposals)
    if (!split.gt.count(p.image_id)) throw Error("proposal on unknown image " + p.image_id);

  std::vector<std::vector<double>> lists;
  if (get_or<bool>(sec, "include_proposal_score", true)) {
    std::vector<double> own;
    for (const auto& p : proposals) own.push_back(p.score);
    lists.push_back(std::move(own));
  }
  for (std::size_t m = 0; m < members.size(); ++m) lists.emplace_back(proposals.size(), 0.0);
  std::map<std::string, std::vector<std::size_t>> by_image;
  for (std::size_t i = 0; i < proposals.size(); ++i) by_image[proposals[i].image_id].push_back(i);
  const std::size_t offset = lists.size() - members.size();
  for (const auto& [id, idx] : by_image) {
    const Image img = load_image(split, id);
    std::vector<Detection> local;
    for (auto i : idx) local.push_back(proposals[i]);
    for (std::size_t m = 0; m < members.size(); ++m) {
      const auto pyr = build_feature_pyramid(members[m].spec, img, id);
      const auto scores = rescore_proposals(local, {EnsembleMember{&members[m].forest, &pyr}});
      for (std::size_t k = 0; k < idx.size(); ++k) lists[offset + m][idx[k]] = scores[0][k];
    }
  }
  std::optional<std::vector<double>> external;
  if (sec.contains("external") && !sec["external"].is_null()) {
    external = fuse_external_scores(proposals, ctx.input(sec["external"].get<std::string>()));
    const auto norm = get_or<std::string>(sec, "external_scores", "raw");
    if (norm == "z")
      external = z_normalize(*external);
    else if (norm != "raw")
      throw Error("external_scores must be \"raw\" or \"z\"");
  }
  const auto combined = combine_scores(lists, external);
  std::vector<Detection> out = proposals;
  for (std::size_t i = 0; i < out.size(); ++i) out[i].score = combined[i];
  const auto path = ctx.produce(sec, "output", "rescored.csv");
  write_detections(out, path);
  *ctx.out << "rescore: " << out.size() << " proposals, " << lists.size() + (external ? 1 : 0)
           << " score lists averaged -> " << path.string() << '\n';
}

// Score-map directory: index.jsonl with {"image": id, "path": file}.
inline std::map<std::string, ScoreMap> load_score_maps(const fs::path& dir) {
  std::map<std::string, ScoreMap> maps;
  for (const auto& [id, entries] : read_tensor_index(dir)) {
    if (entries.size() != 1) throw Error("score map index lists image " + id + " more than once");
    maps.emplace(id, score_map_from_tensor(read_tensor(entries.front().path), id));
  }
  return maps;
}

inline EvalCriteria eval_criteria(const json& sec) {
  EvalCriteria c;
  c.iou_min = get_or<double>(sec, "iou", c.iou_min);
  c.min_height = get_or<double>(sec, "min_height", c.min_height);
  c.max_occlusion = get_or<double>(sec, "max_occlusion", c.max_occlusion);
  c.ignore_cover_min = get_or<double>(sec, "ignore_cover", c.ignore_cover_min);
  c.recall_points = get_or<std::uint32_t>(sec, "recall_points", c.recall_points);
  if (sec.contains("fppi_refs")) c.fppi_refs = sec["fppi_refs"].get<std::vector<double>>();
  if (!(c.iou_min > 0 && c.iou_min < 1)) throw Error("iou must be in (0, 1)");
  if (!std::is_sorted(c.fppi_refs.begin(), c.fppi_refs.end())) throw Error("fppi_refs must be ascending");
  return c;
}

inline std::vector<double> seg_scores(const WeightMask& mask, const std::map<std::string, ScoreMap>& maps,
                                      const std::vector<Detection>& dets) {
  std::vector<double> out;
  out.reserve(dets.size());
  for (const auto& d : dets) {
    const auto it = maps.find(d.image_id);
    if (it == maps.end()) throw Error("no score map for image " + d.image_id);
    out.push_back(seg_score(mask, it->second, d.box));
  }
  return out;
}

inline void cmd_segfuse(Context& ctx) {
  const auto sec = ctx.section("segfuse");
  if (!sec.contains("score_maps") || !sec["score_maps"].is_object())
    throw Error("segfuse needs \"score_maps\": {split: directory}");
  auto maps_for = [&](const std::string& split) {
    if (!sec["score_maps"].contains(split)) throw Error("no score maps configured for split '" + split + "'");
    return load_score_maps(ctx.input(sec["score_maps"][split].get<std::string>()));
  };
  const auto train = load_split(ctx, get_or<std::string>(sec, "train_split", "train"));
  const auto train_maps = maps_for(train.name);
  std::vector<MaskTrainingItem> items;
  for (const auto& [id, ann] : train.gt) {
    const auto it = train_maps.find(id);
    if (it == train_maps.end()) throw Error("no score map for training image " + id);
    items.push_back({&it->second, ann.boxes});
  }
  const WeightMask mask = learn_mask(items);
  write_tensor(mask_to_tensor(mask), ctx.produce(sec, "mask", "mask.cft"));

  double lambda = 1.0;
  if (sec.contains("lambda") && sec["lambda"].is_string()) {
    if (sec["lambda"] != "tune") throw Error("lambda must be a number or \"tune\"");
    // Validation detections are scored against the validation split's ground truth.
    const auto val = load_split(ctx, get_or<std::string>(sec, "validation_split", train.name));
    const auto val_maps = maps_for(val.name);
    if (!sec.contains("validation_detections")) throw Error("lambda tuning needs \"validation_detections\"");
    const auto val_dets = read_detections(ctx.input(sec["validation_detections"].get<std::string>()));
    const auto crit = eval_criteria(ctx.section("eval"));
    std::vector<double> det;
    for (const auto& d : val_dets) det.push_back(d.score);
    const auto seg = seg_scores(mask, val_maps, val_dets);
    std::vector<double> grid = default_lambda_grid();
    if (sec.contains("lambda_grid")) grid = sec["lambda_grid"].get<std::vector<double>>();
    lambda = tune_lambda(
        [&](double l) {
          auto fused = val_dets;
          const auto f = fuse_scores(det, seg, l);
          for (std::size_t i = 0; i < fused.size(); ++i) fused[i].score = f[i];
          return mr_curve(match_all(fused, val.gt, crit), crit.fppi_refs).summary;
        },
        grid);
  } else {
    lambda = get_or<double>(sec, "lambda", lambda);
  }

  const auto split = load_split(ctx, get_or<std::string>(sec, "split", "test"));
  const auto maps = maps_for(split.name);
  auto dets = read_detections(ctx.artifact(sec, "detections", "detections.csv"));
  std::vector<double> det;
  for (const auto& d : dets) det.push_back(d.score);
  const auto fused = fuse_scores(det, seg_scores(mask, maps, dets), lambda);
  for (std::size_t i = 0; i < dets.size(); ++i) dets[i].score = fused[i];
  const auto out = ctx.produce(sec, "output", "fused.csv");
  write_detections(dets, out);
  *ctx.out << "segfuse: mask from " << mask.sample_count << " boxes, lambda " << format_real(lambda) << " -> "
           << out.string() << '\n';
}

inline void cmd_eval(Context& ctx) {
  const auto sec = ctx.section("eval");
  const auto crit = eval_criteria(sec);
  const auto dets = read_detections(ctx.artifact(sec, "detections", "detections.csv"));
  AnnotationSet gt;
  if (sec.contains("annotations"))
    gt = read_annotations(ctx.input(sec["annotations"].get<std::string>()));
  else
    gt = load_split(ctx, get_or<std::string>(sec, "split", "test")).gt;
  const auto metric = get_or<std::string>(sec, "metric", "mr");
  const auto in = match_all(dets, gt, crit);
  EvalCurve curve;
  if (metric == "mr")
    curve = mr_curve(in, crit.fppi_refs);
  else if (metric == "ap")
    curve = average_precision(in, crit.recall_points);
  else
    throw Error("metric must be \"mr\" or \"ap\"");
  write_curve_csv(curve, ctx.produce(sec, "output", "curve-" + metric + ".csv"));
  *ctx.out << (metric == "mr" ? "log_avg_mr " : "ap ") << format_real(curve.summary) << '\n';
}

inline void cmd_heatmap(Context& ctx) {
  const auto sec = ctx.section("heatmap");
  const auto forest = load_forest(ctx.artifact(sec, "model", "forest.json"));
  const auto grid = feature_usage_heatmap(forest);
  const auto path = ctx.produce(sec, "output", "heatmap.csv");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  double total = 0;
  for (const auto& row : grid) {
    for (std::size_t v = 0; v < row.size(); ++v) {
      out << (v ? "," : "") << format_real(row[v]);
      total += row[v];
    }
    out << '\n';
  }
  *ctx.out << "heatmap: " << grid.size() << "x" << (grid.empty() ? 0 : grid.front().size()) << " cells, "
           << format_real(total) << " splits -> " << path.string() << '\n';
}

inline void cmd_report(Context& ctx) {
  const auto sec = ctx.section("report");
  std::vector<LabeledCurve> curves;
  if (sec.contains("curves")) {
    for (const auto& c : sec["curves"]) {
      const auto path = ctx.input(c.at("path").get<std::string>());
      curves.push_back({c.value("label", path.stem().string()), read_curve_csv(path)});
    }
  } else {
    curves.push_back({"detector", read_curve_csv(ctx.output("curve-mr.csv"))});
  }
  for (const auto& c : curves)
    if (c.curve.kind != curves.front().curve.kind) throw Error("report mixes miss-rate and precision curves");
  const auto path = ctx.produce(sec, "output", "report.svg");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << curves_to_svg(curves, get_or<std::string>(sec, "title", "detection results"));
  *ctx.out << "report: " << curves.size() << " curve(s) -> " << path.string() << '\n';
}

// ---------------------------------------------------------------------------
// Dispatch, stage planning, manifest
// ---------------------------------------------------------------------------

// Files a command reads that may be produced by an earlier stage, used to
// validate a stage list before anything runs.
inline std::vector<fs::path> declared_inputs(const Context& ctx, const std::string& cmd) {
  const auto sec = ctx.section(cmd);
  std::vector<fs::path> in;
  if (cmd == "detect" || cmd == "propose" || cmd == "heatmap") in.push_back(ctx.artifact(sec, "model", "forest.json"));
  if (cmd == "rescore") {
    in.push_back(ctx.artifact(sec, "proposals", "proposals.csv"));
    if (sec.contains("members"))
      for (const auto& m : sec["members"]) in.push_back(ctx.artifact(m, "model", "forest.json"));
  }
  if (cmd == "segfuse" || cmd == "eval") in.push_back(ctx.artifact(sec, "detections", "detections.csv"));
  if (cmd == "report") {
    if (sec.contains("curves"))
      for (const auto& c : sec["curves"]) in.push_back(ctx.input(c.at("path").get<std::string>()));
    else
      in.push_back(ctx.output("curve-mr.csv"));
  }
  return in;
}

inline std::vector<fs::path> declared_outputs(const Context& ctx, const std::string& cmd) {
  const auto sec = ctx.section(cmd);
  auto o = [&](const std::string& key, const std::string& def) { return ctx.output(sec.value(key, def)); };
  if (cmd == "train" || cmd == "bootstrap") {
    auto t = ctx.section("train");
    if (cmd == "bootstrap") t.update(sec);
    return {ctx.output(t.value("model", "forest.json"))};
  }
  if (cmd == "detect") return {o("output", "detections.csv")};
  if (cmd == "propose") return {o("output", "proposals.csv")};
  if (cmd == "rescore") return {o("output", "rescored.csv")};
  if (cmd == "segfuse") return {o("output", "fused.csv")};
  if (cmd == "eval") return {o("output", "curve-" + sec.value("metric", std::string("mr")) + ".csv")};
  if (cmd == "heatmap") return {o("output", "heatmap.csv")};
  if (cmd == "report") return {o("output", "report.svg")};
  return {};
}

inline void run_command(Context& ctx, const std::string& cmd) {
  if (cmd == "channels") return cmd_channels(ctx);
  if (cmd == "train") return cmd_train(ctx, false);
  if (cmd == "bootstrap") return cmd_train(ctx, true);
  if (cmd == "detect") return cmd_detect(ctx);
  if (cmd == "propose") return cmd_propose(ctx);
  if (cmd == "rescore") return cmd_rescore(ctx);
  if (cmd == "segfuse") return cmd_segfuse(ctx);
  if (cmd == "eval") return cmd_eval(ctx);
  if (cmd == "heatmap") return cmd_heatmap(ctx);
  if (cmd == "report") return cmd_report(ctx);
  throw Error("unknown command '" + cmd + "'");
}

struct Stage {
  std::string command;
  json overrides = json::object();
};

inline std::vector<Stage> parse_stages(const json& config) {
  if (!config.contains("stages") || !config["stages"].is_array() || config["stages"].empty())
    throw Error("'run' needs a non-empty \"stages\" list");
  std::vector<Stage> stages;
  for (const auto& s : config["stages"]) {
    Stage st;
    if (s.is_string()) {
      st.command = s.get<std::string>();
    } else if (s.is_object() && s.contains("command")) {
      st.command = s["command"].get<std::string>();
      st.overrides = s;
      st.overrides.erase("command");
    } else {
      throw Error("stage must be a command name or an object with \"command\"");
    }
    if (st.command == "run" || !is_command(st.command)) throw Error("unknown stage command '" + st.command + "'");
    stages.push_back(std::move(st));
  }
  return stages;
}

inline Context stage_context(const Context& base, const Stage& st) {
  Context c = base;
  c.outputs.clear();
  json sec = c.section(st.command);
  sec.update(st.overrides);
  c.config[st.command] = sec;
  return c;
}

// Every stage input must exist already or be produced by an earlier stage.
inline void validate_stages(const Context& ctx, const std::vector<Stage>& stages) {
  std::set<fs::path> produced;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const Context c = stage_context(ctx, stages[i]);
    if (stages[i].command == "train" || stages[i].command == "bootstrap") c.require_seed(stages[i].command);
    for (const auto& p : declared_inputs(c, stages[i].command))
      if (!produced.count(p.lexically_normal()) && !fs::exists(p))
        throw Error("stage " + std::to_string(i + 1) + " (" + stages[i].command + ") reads " + p.string() +
                    ", which no earlier stage produces");
    for (const auto& p : declared_outputs(c, stages[i].command)) produced.insert(p.lexically_normal());
  }
}

inline json digest_tree(const fs::path& p) {
  json out = json::object();
  if (fs::is_regular_file(p)) {
    out[p.generic_string()] = sha256_file(p);
  } else if (fs::is_directory(p)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(p))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) out[f.generic_string()] = sha256_file(f);
  }
  return out;
}

// Inputs named by the config that exist before the command runs.
inline json input_digests(const Context& ctx, const std::optional<fs::path>& config_path,
                          const std::vector<std::string>& cmds) {
  json d = json::object();
  auto add = [&](const fs::path& p) {
    if (fs::exists(p)) d.update(digest_tree(p));
  };
  if (config_path) add(*config_path);
  if (ctx.config.contains("dataset") && ctx.config["dataset"].is_object())
    for (const auto& [name, split] : ctx.config["dataset"].items())
      if (split.is_object())
        for (const char* key : {"annotations", "images"})
          if (split.contains(key) && split[key].is_string()) add(ctx.input(split[key].get<std::string>()));
  std::function<void(const json&)> add_features = [&](const json& list) {
    if (!list.is_array()) return;
    for (const auto& f : list)
      if (f.is_object())
        for (const char* key : {"tensors", "checkerboard"})
          if (f.contains(key) && f[key].is_string()) add(ctx.input(f[key].get<std::string>()));
  };
  add_features(ctx.config.value("features", json::array()));
  for (const auto& cmd : cmds) {
    const auto sec = ctx.section(cmd);
    add_features(sec.value("features", json::array()));
    if (sec.contains("members"))
      for (const auto& m : sec["members"]) add_features(m.value("features", json::array()));
    if (sec.contains("score_maps") && sec["score_maps"].is_object())
      for (const auto& [k, v] : sec["score_maps"].items())
        if (v.is_string()) add(ctx.input(v.get<std::string>()));
    for (const char* key : {"external", "annotations", "validation_detections"})
      if (sec.contains(key) && sec[key].is_string()) add(ctx.input(sec[key].get<std::string>()));
    for (const auto& p : declared_inputs(ctx, cmd)) add(p);
  }
  return d;
}

// Runs one command (or the configured stage list for "run") and writes
// manifest-<command>.json into the output directory.
inline void execute(Context& ctx, const std::string& command, const std::optional<fs::path>& config_path = {}) {
  if (!is_command(command)) throw Error("unknown command '" + command + "'");
  std::vector<Stage> stages;
  if (command == "run") {
    stages = parse_stages(ctx.config);
    validate_stages(ctx, stages);
  } else {
    stages.push_back({command, json::object()});
  }
  std::vector<std::string> names;
  for (const auto& s : stages) names.push_back(s.command);

  fs::create_directories(ctx.output_dir);
  json manifest = {{"tool", "cfmdet"},
                   {"version", kVersion},
                   {"command", command},
                   {"stages", names},
                   {"seed", ctx.seed ? json(*ctx.seed) : json(nullptr)},
                   {"config", ctx.config},
                   {"inputs", input_digests(ctx, config_path, names)}};

  std::vector<fs::path> outputs;
  for (const auto& st : stages) {
    Context c = stage_context(ctx, st);
    run_command(c, st.command);
    outputs.insert(outputs.end(), c.outputs.begin(), c.outputs.end());
  }
  json out = json::object();
  for (const auto& p : outputs)
    if (fs::is_regular_file(p)) out[p.generic_string()] = sha256_file(p);
  manifest["outputs"] = out;
  write_json(manifest, ctx.output_dir / ("manifest-" + command + ".json"));
}

}  // namespace cfmdet::pipeline
