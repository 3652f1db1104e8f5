#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cfmdet/error.hpp"

namespace cfmdet {

// 8-bit interleaved RGB image, row-major.
struct Image {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<std::uint8_t> data;

  Image() = default;
  Image(std::uint32_t w, std::uint32_t h, std::uint8_t fill = 0)
      : width(w), height(h), data(std::size_t(w) * h * 3, fill) {}

  bool empty() const { return width == 0 || height == 0; }

  std::uint8_t& at(std::uint32_t x, std::uint32_t y, int c) {
    return data[(std::size_t(y) * width + x) * 3 + c];
  }
  std::uint8_t at(std::uint32_t x, std::uint32_t y, int c) const {
    return data[(std::size_t(y) * width + x) * 3 + c];
  }

  void validate() const {
    if (empty()) throw Error("empty image");
    if (data.size() != std::size_t(width) * height * 3) throw Error("image data size mismatch");
  }
};

namespace detail {

// Half-pixel-centred source coordinate for output index i when mapping a
// source extent of src_len onto dst_len samples.
inline double half_pixel_source(std::size_t i, double src_len, double dst_len) {
  return (double(i) + 0.5) * (src_len / dst_len) - 0.5;
}

// Bilinear sample of a row-major single-channel grid, clamp-at-edge.
template <class Get>
double bilinear_sample(Get&& get, int h, int w, double sy, double sx) {
  sy = std::clamp(sy, 0.0, double(h - 1));
  sx = std::clamp(sx, 0.0, double(w - 1));
  const int y0 = int(std::floor(sy));
  const int x0 = int(std::floor(sx));
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - y0;
  const double fx = sx - x0;
  const double top = get(y0, x0) * (1 - fx) + get(y0, x1) * fx;
  const double bot = get(y1, x0) * (1 - fx) + get(y1, x1) * fx;
  return top * (1 - fy) + bot * fy;
}

}  // namespace detail

inline Image resize_bilinear(const Image& img, std::uint32_t new_w, std::uint32_t new_h) {
  img.validate();
  if (new_w == 0 || new_h == 0) throw Error("empty image");
  if (new_w == img.width && new_h == img.height) return img;
  Image out(new_w, new_h);
  const int h = int(img.height), w = int(img.width);
  for (std::uint32_t y = 0; y < new_h; ++y) {
    const double sy = detail::half_pixel_source(y, img.height, new_h);
    for (std::uint32_t x = 0; x < new_w; ++x) {
      const double sx = detail::half_pixel_source(x, img.width, new_w);
      for (int c = 0; c < 3; ++c) {
        const double v = detail::bilinear_sample(
            [&](int yy, int xx) { return double(img.at(xx, yy, c)); }, h, w, sy, sx);
        out.at(x, y, c) = std::uint8_t(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

// Binary PPM (P6, maxval 255).
inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  auto next_token = [&]() {
    std::string tok;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(ch);
    }
    return tok;
  };
  if (next_token() != "P6") throw Error("not a binary PPM: " + path.string());
  unsigned long w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(next_token());
    h = std::stoul(next_token());
    maxval = std::stoul(next_token());
  } catch (const std::exception&) {
    throw Error("malformed PPM header: " + path.string());
  }
  if (maxval != 255) throw Error("unsupported PPM maxval: " + path.string());
  if (w == 0 || h == 0 || w > 1u << 16 || h > 1u << 16) throw Error("empty image");
  Image img{std::uint32_t(w), std::uint32_t(h)};
  in.read(reinterpret_cast<char*>(img.data.data()), std::streamsize(img.data.size()));
  if (in.gcount() != std::streamsize(img.data.size())) throw Error("truncated PPM: " + path.string());
  return img;
}

inline void write_ppm(const Image& img, const std::filesystem::path& path) {
  img.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()), std::streamsize(img.data.size()));
}

}  // namespace cfmdet
