#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cfmdet/geometry.hpp"
#include "cfmdet/image.hpp"
#include "cfmdet/tensorio.hpp"

namespace cfmdet {

// Noise images with bright 100x41 "pedestrians" planted on them, plus
// bright distractor shapes that are not annotated.
struct SyntheticConfig {
  std::uint32_t width = 320;
  std::uint32_t height = 240;
  std::uint32_t min_plants = 1;
  std::uint32_t max_plants = 2;
  std::uint32_t max_distractors = 3;
  // Plant-sized rectangles in a warm tint; only the colour channels tell
  // them apart from plants.
  std::uint32_t max_decoys = 2;
  std::uint32_t plant_h = 100;
  std::uint32_t plant_w = 41;
  // Minimum distance of plants from the image border.
  std::uint32_t margin_y = 0;
  std::uint32_t margin_x = 0;
};

struct SyntheticImage {
  std::string id;
  Image image;
  std::vector<GroundTruthBox> boxes;
};

namespace detail {

inline void fill_rect(Image& img, const Box& b, std::array<std::pair<int, int>, 3> range, std::mt19937_64& rng) {
  for (auto y = std::uint32_t(b.y); y < std::uint32_t(b.bottom()); ++y)
    for (auto x = std::uint32_t(b.x); x < std::uint32_t(b.right()); ++x)
      for (int c = 0; c < 3; ++c)
        img.at(x, y, c) = std::uint8_t(std::uniform_int_distribution<int>(range[c].first, range[c].second)(rng));
}

inline void fill_rect(Image& img, const Box& b, int lo, int hi, std::mt19937_64& rng) {
  fill_rect(img, b, {{{lo, hi}, {lo, hi}, {lo, hi}}}, rng);
}

}  // namespace detail

inline std::vector<SyntheticImage> make_synthetic_set(std::size_t count, std::uint64_t seed,
                                                      const std::string& prefix = "img",
                                                      const SyntheticConfig& cfg = {}) {
  std::mt19937_64 rng(seed);
  std::vector<SyntheticImage> out;
  out.reserve(count);
  // Distractor shapes (h, w). The last two are near misses of the plant.
  const std::vector<std::pair<std::uint32_t, std::uint32_t>> shapes{
      {41, 41}, {100, 14}, {56, 60}, {64, 41}, {100, 24}};

  for (std::size_t i = 0; i < count; ++i) {
    SyntheticImage s;
    char name[32];
    std::snprintf(name, sizeof name, "%s%04zu", prefix.c_str(), i);
    s.id = name;
    s.image = Image(cfg.width, cfg.height);
    std::uniform_int_distribution<int> noise(20, 140);
    for (auto& px : s.image.data) px = std::uint8_t(noise(rng));

    std::vector<Box> placed;
    auto place = [&](std::uint32_t h, std::uint32_t w, std::uint32_t my, std::uint32_t mx) -> std::optional<Box> {
      std::uniform_int_distribution<std::uint32_t> px(mx, cfg.width - w - mx), py(my, cfg.height - h - my);
      for (int attempt = 0; attempt < 200; ++attempt) {
        const Box b{double(px(rng)), double(py(rng)), double(w), double(h)};
        const Box grown{b.x - 4, b.y - 4, b.w + 8, b.h + 8};
        if (std::none_of(placed.begin(), placed.end(), [&](const Box& o) { return intersection_area(grown, o) > 0; })) {
          placed.push_back(b);
          return b;
        }
      }
      return std::nullopt;
    };

    const auto plants = std::uniform_int_distribution<std::uint32_t>(cfg.min_plants, cfg.max_plants)(rng);
    for (std::uint32_t p = 0; p < plants; ++p)
      if (auto b = place(cfg.plant_h, cfg.plant_w, cfg.margin_y, cfg.margin_x)) {
        detail::fill_rect(s.image, *b, 175, 235, rng);
        s.boxes.push_back(GroundTruthBox{*b, "person", false, 0.0});
      }
    const auto distractors = std::uniform_int_distribution<std::uint32_t>(0, cfg.max_distractors)(rng);
    for (std::uint32_t d = 0; d < distractors; ++d) {
      const auto [h, w] = shapes[std::uniform_int_distribution<std::size_t>(0, shapes.size() - 1)(rng)];
      if (auto b = place(h, w, 0, 0)) detail::fill_rect(s.image, *b, 175, 235, rng);
    }
    const auto decoys = std::uniform_int_distribution<std::uint32_t>(0, cfg.max_decoys)(rng);
    for (std::uint32_t d = 0; d < decoys; ++d)
      if (auto b = place(cfg.plant_h, cfg.plant_w, 0, 0))
        detail::fill_rect(s.image, *b, {{{205, 250}, {165, 215}, {100, 150}}}, rng);
    out.push_back(std::move(s));
  }
  return out;
}

inline AnnotationSet to_annotations(const std::vector<SyntheticImage>& set) {
  AnnotationSet out;
  for (const auto& s : set) out[s.id] = AnnotatedImage{s.image.width, s.image.height, s.boxes};
  return out;
}

}  // namespace cfmdet
