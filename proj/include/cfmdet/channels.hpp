#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfmdet/error.hpp"
#include "cfmdet/image.hpp"

namespace cfmdet {

// C x H x W grid of 32-bit feature values; each cell covers ratio x ratio
// input pixels. Values are stored channel-major (c, y, x).
class ChannelStack {
public:
  ChannelStack() = default;

  ChannelStack(std::uint32_t channels, std::uint32_t height, std::uint32_t width, std::uint32_t ratio,
               std::string source = {})
      : channels_(channels),
        height_(height),
        width_(width),
        ratio_(ratio),
        values_(std::size_t(channels) * height * width, 0.0f),
        source_(std::move(source)) {}

  ChannelStack(std::uint32_t channels, std::uint32_t height, std::uint32_t width, std::uint32_t ratio,
               std::vector<float> values, std::string source)
      : channels_(channels),
        height_(height),
        width_(width),
        ratio_(ratio),
        values_(std::move(values)),
        source_(std::move(source)) {
    if (values_.size() != std::size_t(channels_) * height_ * width_)
      throw Error("channel stack size mismatch");
  }

  std::uint32_t channels() const { return channels_; }
  std::uint32_t height() const { return height_; }
  std::uint32_t width() const { return width_; }
  std::uint32_t ratio() const { return ratio_; }
  const std::string& source() const { return source_; }
  void set_source(std::string s) { source_ = std::move(s); }

  std::size_t plane_size() const { return std::size_t(height_) * width_; }

  float& at(std::uint32_t c, std::uint32_t y, std::uint32_t x) {
    return values_[c * plane_size() + std::size_t(y) * width_ + x];
  }
  float at(std::uint32_t c, std::uint32_t y, std::uint32_t x) const {
    return values_[c * plane_size() + std::size_t(y) * width_ + x];
  }

  const std::vector<float>& values() const { return values_; }
  std::vector<float>& values() { return values_; }

  bool all_finite() const {
    for (float v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

private:
  std::uint32_t channels_ = 0;
  std::uint32_t height_ = 0;
  std::uint32_t width_ = 0;
  std::uint32_t ratio_ = 1;
  std::vector<float> values_;
  std::string source_;
};

inline constexpr std::uint32_t kAcfChannels = 10;
inline constexpr int kOrientationBins = 6;

inline bool is_supported_ratio(std::uint32_t r) { return r == 4 || r == 8 || r == 16; }

namespace detail {

inline const std::array<double, 256>& srgb_to_linear_table() {
  static const std::array<double, 256> table = [] {
    std::array<double, 256> t{};
    for (int i = 0; i < 256; ++i) {
      const double c = i / 255.0;
      t[i] = c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
    }
    return t;
  }();
  return table;
}

// CIE LUV (D65) from 8-bit sRGB, each component rescaled to roughly [0, 1].
inline std::array<float, 3> rgb_to_luv(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
  const auto& lin = srgb_to_linear_table();
  const double r = lin[r8], g = lin[g8], b = lin[b8];
  const double X = 0.412453 * r + 0.357580 * g + 0.180423 * b;
  const double Y = 0.212671 * r + 0.715160 * g + 0.072169 * b;
  const double Z = 0.019334 * r + 0.119193 * g + 0.950227 * b;
  const double L = Y > 0.008856 ? 116.0 * std::cbrt(Y) - 16.0 : 903.3 * Y;
  const double denom = X + 15.0 * Y + 3.0 * Z;
  double u = 0, v = 0;
  if (denom > 1e-12) {
    constexpr double un = 0.197833, vn = 0.468331;
    u = 13.0 * L * (4.0 * X / denom - un);
    v = 13.0 * L * (9.0 * Y / denom - vn);
  }
  return {float(L / 100.0), float((u + 134.0) / 354.0), float((v + 140.0) / 262.0)};
}

}  // namespace detail

// Ten aggregate channels: L, U, V, gradient magnitude, then six unsigned
// orientation bins (soft-binned, bin k centred at k*pi/6). The image is
// replicate-padded up to a multiple of ratio, then every channel is averaged
// over ratio x ratio cells.
inline ChannelStack compute_acf_channels(const Image& img, std::uint32_t ratio) {
  if (img.empty()) throw Error("empty image");
  img.validate();
  if (!is_supported_ratio(ratio)) throw Error("unsupported ratio " + std::to_string(ratio));

  const std::uint32_t ch = (img.height + ratio - 1) / ratio;
  const std::uint32_t cw = (img.width + ratio - 1) / ratio;
  const std::uint32_t ph = ch * ratio, pw = cw * ratio;

  auto src_x = [&](std::int64_t x) { return std::uint32_t(std::clamp<std::int64_t>(x, 0, img.width - 1)); };
  auto src_y = [&](std::int64_t y) { return std::uint32_t(std::clamp<std::int64_t>(y, 0, img.height - 1)); };

  // Gray = mean of the 8-bit components, on the padded grid; gradients are taken here.
  std::vector<double> gray(std::size_t(ph) * pw);
  for (std::uint32_t y = 0; y < ph; ++y)
    for (std::uint32_t x = 0; x < pw; ++x) {
      const std::uint32_t sx = src_x(x), sy = src_y(y);
      gray[std::size_t(y) * pw + x] =
          (double(img.at(sx, sy, 0)) + img.at(sx, sy, 1) + img.at(sx, sy, 2)) / (3.0 * 255.0);
    }

  ChannelStack out(kAcfChannels, ch, cw, ratio, "acf");
  const double inv_area = 1.0 / (double(ratio) * ratio);
  constexpr double bin_width = std::numbers::pi / kOrientationBins;

  std::vector<double> acc(std::size_t(kAcfChannels) * ch * cw, 0.0);
  auto add = [&](int c, std::uint32_t cy, std::uint32_t cx, double v) {
    acc[(std::size_t(c) * ch + cy) * cw + cx] += v;
  };

  for (std::uint32_t y = 0; y < ph; ++y) {
    const std::uint32_t cy = y / ratio;
    const std::uint32_t ym = y == 0 ? 0 : y - 1, yp = y + 1 < ph ? y + 1 : ph - 1;
    for (std::uint32_t x = 0; x < pw; ++x) {
      const std::uint32_t cx = x / ratio;
      const std::uint32_t sx = src_x(x), sy = src_y(y);
      const auto luv = detail::rgb_to_luv(img.at(sx, sy, 0), img.at(sx, sy, 1), img.at(sx, sy, 2));
      add(0, cy, cx, luv[0]);
      add(1, cy, cx, luv[1]);
      add(2, cy, cx, luv[2]);

      const std::uint32_t xm = x == 0 ? 0 : x - 1, xp = x + 1 < pw ? x + 1 : pw - 1;
      const double gx = (gray[std::size_t(y) * pw + xp] - gray[std::size_t(y) * pw + xm]) * 0.5;
      const double gy = (gray[std::size_t(yp) * pw + x] - gray[std::size_t(ym) * pw + x]) * 0.5;
      const double mag = std::sqrt(gx * gx + gy * gy);
      add(3, cy, cx, mag);
      if (mag == 0.0) continue;

      double theta = std::atan2(gy, gx);
      if (theta < 0) theta += std::numbers::pi;
      if (theta >= std::numbers::pi) theta -= std::numbers::pi;
      const double pos = theta / bin_width;
      const double lo = std::floor(pos);
      const double frac = pos - lo;
      const int b0 = int(lo) % kOrientationBins;
      const int b1 = (b0 + 1) % kOrientationBins;
      add(4 + b0, cy, cx, mag * (1.0 - frac));
      add(4 + b1, cy, cx, mag * frac);
    }
  }
  for (std::size_t i = 0; i < acc.size(); ++i) out.values()[i] = float(acc[i] * inv_area);
  return out;
}

// Bank of 2x2 kernels stored row-major: {k00, k01, k10, k11}.
struct FilterBank {
  std::vector<std::array<float, 4>> filters;
  std::size_t count() const { return filters.size(); }
};

// Twelve binary checkerboard-style kernels: constant, two horizontal and two
// vertical differences, two diagonal differences, four single-cell
// indicators, and the 2x2 checkerboard.
inline FilterBank default_checkerboard_bank() {
  return FilterBank{{
      {1, 1, 1, 1},
      {1, -1, 0, 0},
      {0, 0, 1, -1},
      {1, 0, -1, 0},
      {0, 1, 0, -1},
      {1, 0, 0, -1},
      {0, 1, -1, 0},
      {1, 0, 0, 0},
      {0, 1, 0, 0},
      {0, 0, 1, 0},
      {0, 0, 0, 1},
      {1, -1, -1, 1},
  }};
}

// JSON list of kernels, each either [[a,b],[c,d]] or [a,b,c,d].
inline FilterBank filter_bank_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw Error("filter bank must be a JSON array");
  FilterBank bank;
  for (const auto& k : j) {
    std::array<float, 4> f{};
    if (k.is_array() && k.size() == 2 && k[0].is_array()) {
      if (k[0].size() != 2 || k[1].size() != 2) throw Error("filter kernel must be 2x2");
      f = {k[0][0].get<float>(), k[0][1].get<float>(), k[1][0].get<float>(), k[1][1].get<float>()};
    } else if (k.is_array() && k.size() == 4) {
      for (int i = 0; i < 4; ++i) f[i] = k[i].get<float>();
    } else {
      throw Error("filter kernel must be 2x2");
    }
    bank.filters.push_back(f);
  }
  return bank;
}

inline FilterBank load_filter_bank(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return filter_bank_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad filter bank " + path.string() + ": " + e.what());
  }
}

// Valid-region 2x2 cross-correlation of every channel with every kernel,
// zero-padded on the bottom row and right column. Output channel c*K + k is
// input channel c filtered by kernel k.
inline ChannelStack apply_filter_bank(const ChannelStack& stack, const FilterBank& bank) {
  if (bank.filters.empty()) throw Error("empty filter bank");
  if (stack.height() < 2 || stack.width() < 2) throw Error("stack smaller than 2x2");
  const auto K = std::uint32_t(bank.count());
  ChannelStack out(stack.channels() * K, stack.height(), stack.width(), stack.ratio(),
                   stack.source() + "+checkerboard");
  for (std::uint32_t c = 0; c < stack.channels(); ++c)
    for (std::uint32_t k = 0; k < K; ++k) {
      const auto& f = bank.filters[k];
      const std::uint32_t oc = c * K + k;
      for (std::uint32_t y = 0; y + 1 < stack.height(); ++y)
        for (std::uint32_t x = 0; x + 1 < stack.width(); ++x)
          out.at(oc, y, x) = f[0] * stack.at(c, y, x) + f[1] * stack.at(c, y, x + 1) +
                             f[2] * stack.at(c, y + 1, x) + f[3] * stack.at(c, y + 1, x + 1);
    }
  return out;
}

inline ChannelStack compute_checkerboard_channels(const Image& img, std::uint32_t ratio,
                                                  const FilterBank& bank = default_checkerboard_bank()) {
  return apply_filter_bank(compute_acf_channels(img, ratio), bank);
}

// Channels concatenated in argument order; all inputs must share geometry.
inline ChannelStack concat_stacks(const std::vector<ChannelStack>& stacks) {
  if (stacks.empty()) throw Error("incompatible stacks");
  const auto& first = stacks.front();
  std::uint32_t total = 0;
  std::string label;
  for (const auto& s : stacks) {
    if (s.height() != first.height() || s.width() != first.width() || s.ratio() != first.ratio())
      throw Error("incompatible stacks");
    total += s.channels();
    if (!label.empty()) label += '+';
    label += s.source();
  }
  std::vector<float> values;
  values.reserve(std::size_t(total) * first.plane_size());
  for (const auto& s : stacks) values.insert(values.end(), s.values().begin(), s.values().end());
  return ChannelStack(total, first.height(), first.width(), first.ratio(), std::move(values), label);
}

struct PyramidConfig {
  std::uint32_t scales_per_octave = 8;
  double min_scale = 0.5;
  double max_scale = 1.0;
  std::uint32_t ratio = 4;
  // Model window in input pixels; levels that cannot hold one window are dropped.
  std::uint32_t window_h = 128;
  std::uint32_t window_w = 64;

  void validate() const {
    if (!(min_scale > 0) || !(min_scale <= max_scale)) throw Error("invalid pyramid scale range");
    if (scales_per_octave < 1) throw Error("scales_per_octave must be >= 1");
  }

  // Number of nominal levels before the window-fit rule is applied.
  std::size_t nominal_levels() const {
    return std::size_t(std::floor(scales_per_octave * std::log2(max_scale / min_scale) + 1e-9)) + 1;
  }

  double scale_at(std::size_t i) const {
    return max_scale * std::exp2(-double(i) / scales_per_octave);
  }
};

struct PyramidLevel {
  double scale = 1.0;
  ChannelStack stack;
};

using Pyramid = std::vector<PyramidLevel>;

// Geometric scale sequence from max_scale down to min_scale; each level is
// a bilinear resize of the image with channels recomputed from scratch.
template <class ChannelFn>
Pyramid build_pyramid(const Image& img, const PyramidConfig& cfg, ChannelFn&& channel_fn) {
  cfg.validate();
  img.validate();
  Pyramid levels;
  const std::size_t n = cfg.nominal_levels();
  for (std::size_t i = 0; i < n; ++i) {
    const double s = cfg.scale_at(i);
    const auto w = std::uint32_t(std::lround(img.width * s));
    const auto h = std::uint32_t(std::lround(img.height * s));
    if (h < cfg.window_h || w < cfg.window_w) continue;
    ChannelStack stack = (w == img.width && h == img.height) ? channel_fn(img)
                                                             : channel_fn(resize_bilinear(img, w, h));
    levels.push_back(PyramidLevel{s, std::move(stack)});
  }
  return levels;
}

inline Pyramid build_acf_pyramid(const Image& img, const PyramidConfig& cfg) {
  return build_pyramid(img, cfg, [&](const Image& im) { return compute_acf_channels(im, cfg.ratio); });
}

}  // namespace cfmdet
