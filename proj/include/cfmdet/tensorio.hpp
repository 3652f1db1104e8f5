#pragma once

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <iterator>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfmdet/channels.hpp"
#include "cfmdet/error.hpp"
#include "cfmdet/geometry.hpp"

namespace cfmdet {

// ---------------------------------------------------------------------------
// CFT1 tensor files
//
//   magic "CFT1" | version u32 = 1 | dtype u32 = 1 (f32) | ndim u32 |
//   dims ndim x u32 | ratio u32 | name_len u32 | name bytes | payload
//
// Integers and payload are little-endian; payload is channel-major (c, y, x).
// ---------------------------------------------------------------------------

enum class TensorErrc {
  io,
  bad_magic,
  bad_version,
  bad_dtype,
  bad_dims,
  dims_overflow,
  truncated_header,
  truncated_payload,
  trailing_bytes,
};

class TensorError : public Error {
public:
  TensorError(TensorErrc code, const std::string& what) : Error(what), code_(code) {}
  TensorErrc code() const { return code_; }

private:
  TensorErrc code_;
};

inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 1;
inline constexpr std::uint32_t kMaxTensorDims = 8;

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::uint32_t ratio = 1;
  std::string name;
  std::vector<float> values;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(in[pos + i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  if (t.dims.empty() || t.dims.size() > kMaxTensorDims)
    throw TensorError(TensorErrc::bad_dims, "tensor must have 1 to 8 dims");
  for (auto d : t.dims)
    if (d == 0) throw TensorError(TensorErrc::bad_dims, "zero-sized dim");
  if (t.values.size() != t.element_count())
    throw TensorError(TensorErrc::bad_dims, "values length does not match dims");

  std::vector<std::uint8_t> out;
  out.reserve(24 + 4 * t.dims.size() + t.name.size() + 4 * t.values.size());
  for (char c : {'C', 'F', 'T', '1'}) out.push_back(std::uint8_t(c));
  detail::put_u32(out, kTensorVersion);
  detail::put_u32(out, kDtypeF32);
  detail::put_u32(out, std::uint32_t(t.dims.size()));
  for (auto d : t.dims) detail::put_u32(out, d);
  detail::put_u32(out, t.ratio);
  detail::put_u32(out, std::uint32_t(t.name.size()));
  out.insert(out.end(), t.name.begin(), t.name.end());
  for (float v : t.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline Tensor decode_tensor(std::span<const std::uint8_t> in) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (in.size() - pos < n) throw TensorError(TensorErrc::truncated_header, "truncated header");
  };
  need(4);
  if (std::memcmp(in.data(), "CFT1", 4) != 0) throw TensorError(TensorErrc::bad_magic, "bad magic");
  pos = 4;
  need(12);
  const auto version = detail::get_u32(in, pos);
  const auto dtype = detail::get_u32(in, pos + 4);
  const auto ndim = detail::get_u32(in, pos + 8);
  pos += 12;
  if (version != kTensorVersion) throw TensorError(TensorErrc::bad_version, "unsupported version");
  if (dtype != kDtypeF32) throw TensorError(TensorErrc::bad_dtype, "unsupported dtype");
  if (ndim == 0 || ndim > kMaxTensorDims) throw TensorError(TensorErrc::bad_dims, "bad ndim");

  Tensor t;
  need(std::size_t(ndim) * 4 + 8);
  std::uint64_t count = 1;
  constexpr std::uint64_t kMaxElements = std::uint64_t(1) << 40;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    const auto d = detail::get_u32(in, pos);
    pos += 4;
    if (d == 0) throw TensorError(TensorErrc::bad_dims, "zero-sized dim");
    count *= d;
    if (count > kMaxElements) throw TensorError(TensorErrc::dims_overflow, "dims overflow");
    t.dims.push_back(d);
  }
  t.ratio = detail::get_u32(in, pos);
  const auto name_len = detail::get_u32(in, pos + 4);
  pos += 8;
  need(name_len);
  t.name.assign(reinterpret_cast<const char*>(in.data() + pos), name_len);
  pos += name_len;

  const std::uint64_t payload = count * 4;
  if (in.size() - pos < payload) throw TensorError(TensorErrc::truncated_payload, "truncated payload");
  if (in.size() - pos > payload) throw TensorError(TensorErrc::trailing_bytes, "trailing bytes after payload");
  t.values.resize(std::size_t(count));
  for (std::size_t i = 0; i < t.values.size(); ++i, pos += 4)
    t.values[i] = std::bit_cast<float>(detail::get_u32(in, pos));
  return t;
}

inline void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw TensorError(TensorErrc::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw TensorError(TensorErrc::io, "write failed " + path.string());
}

inline void write_tensor(std::span<const float> values, std::vector<std::uint32_t> dims, std::uint32_t ratio,
                         std::string name, const std::filesystem::path& path) {
  write_tensor(Tensor{std::move(dims), ratio, std::move(name), {values.begin(), values.end()}}, path);
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorError(TensorErrc::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

// Header fields only (values left empty); the file size must still match the
// declared payload exactly.
inline Tensor read_tensor_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorError(TensorErrc::io, "cannot open " + path.string());
  std::vector<std::uint8_t> head;
  auto grab = [&](std::size_t n) {
    const std::size_t old = head.size();
    head.resize(old + n);
    in.read(reinterpret_cast<char*>(head.data() + old), std::streamsize(n));
    head.resize(old + std::size_t(in.gcount()));
  };
  std::error_code ec;
  const auto file_size = std::filesystem::file_size(path, ec);
  if (ec) throw TensorError(TensorErrc::io, "cannot stat " + path.string());
  grab(16);
  if (head.size() >= 16) {
    const auto ndim = detail::get_u32(head, 12);
    if (ndim >= 1 && ndim <= kMaxTensorDims) {
      grab(std::size_t(ndim) * 4 + 8);
      if (head.size() == 16 + std::size_t(ndim) * 4 + 8)
        grab(std::min<std::uint64_t>(detail::get_u32(head, head.size() - 4), file_size));
    }
  }
  // Header validation only; the payload length is checked against the file size.
  try {
    decode_tensor(head);
  } catch (const TensorError& e) {
    if (e.code() != TensorErrc::truncated_payload && e.code() != TensorErrc::trailing_bytes) throw;
  }
  Tensor t;
  const auto ndim = detail::get_u32(head, 12);
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    t.dims.push_back(detail::get_u32(head, 16 + 4 * i));
    count *= t.dims.back();
  }
  t.ratio = detail::get_u32(head, 16 + 4 * ndim);
  t.name.assign(reinterpret_cast<const char*>(head.data()) + 24 + 4 * ndim, head.size() - 24 - 4 * ndim);
  const std::uint64_t payload = file_size - head.size();
  if (payload < count * 4) throw TensorError(TensorErrc::truncated_payload, "truncated payload");
  if (payload > count * 4) throw TensorError(TensorErrc::trailing_bytes, "trailing bytes after payload");
  return t;
}

inline Tensor stack_to_tensor(const ChannelStack& s) {
  return Tensor{{s.channels(), s.height(), s.width()}, s.ratio(), s.source(), s.values()};
}

inline ChannelStack tensor_to_stack(Tensor t) {
  if (t.dims.size() != 3) throw TensorError(TensorErrc::bad_dims, "channel stack needs 3 dims");
  for (float v : t.values)
    if (!std::isfinite(v)) throw Error("non-finite channel value");
  return ChannelStack(t.dims[0], t.dims[1], t.dims[2], t.ratio, std::move(t.values), std::move(t.name));
}

// Checks a feature tensor produced for an image of the given size at the
// given pyramid scale: dims (C, ceil(s*H/ratio), ceil(s*W/ratio)).
inline void validate_feature_tensor(const Tensor& t, std::uint32_t image_w, std::uint32_t image_h, double scale,
                                    std::optional<std::uint32_t> expected_channels = std::nullopt) {
  if (t.dims.size() != 3) throw Error("feature tensor needs 3 dims");
  if (t.ratio == 0) throw Error("feature tensor ratio is zero");
  const auto eh = std::uint32_t(std::ceil(std::lround(scale * image_h) / double(t.ratio)));
  const auto ew = std::uint32_t(std::ceil(std::lround(scale * image_w) / double(t.ratio)));
  if (t.dims[1] != eh || t.dims[2] != ew) throw Error("feature tensor dims do not match ratio");
  if (expected_channels && t.dims[0] != *expected_channels) throw Error("feature tensor channel count mismatch");
}

// ---------------------------------------------------------------------------
// Annotations (JSON-Lines, one record per image)
// ---------------------------------------------------------------------------

struct GroundTruthBox {
  Box box;
  std::string label = "person";
  bool ignore = false;
  double occlusion = 0.0;
};

struct AnnotatedImage {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<GroundTruthBox> boxes;
};

using AnnotationSet = std::map<std::string, AnnotatedImage>;

inline AnnotationSet parse_annotations(std::istream& in) {
  AnnotationSet out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& msg) -> Error {
      return Error("line " + std::to_string(lineno) + ": " + msg);
    };
    try {
      const auto rec = nlohmann::json::parse(line);
      if (!rec.is_object()) throw fail("record must be an object");
      const auto id = rec.at("image").get<std::string>();
      AnnotatedImage img;
      img.width = rec.value("width", 0u);
      img.height = rec.value("height", 0u);
      for (const auto& b : rec.value("boxes", nlohmann::json::array())) {
        GroundTruthBox g;
        g.box = {b.at("x").get<double>(), b.at("y").get<double>(), b.at("w").get<double>(), b.at("h").get<double>()};
        if (!(g.box.w > 0) || !(g.box.h > 0)) throw fail("degenerate box");
        if (!std::isfinite(g.box.x) || !std::isfinite(g.box.y) || !std::isfinite(g.box.w) || !std::isfinite(g.box.h))
          throw fail("non-finite box");
        g.label = b.value("label", std::string("person"));
        g.ignore = b.value("ignore", false);
        g.occlusion = b.value("occl", 0.0);
        if (!(g.occlusion >= 0.0 && g.occlusion <= 1.0)) throw fail("occlusion outside [0, 1]");
        img.boxes.push_back(std::move(g));
      }
      if (!out.emplace(id, std::move(img)).second) throw fail("duplicate image " + id);
    } catch (const nlohmann::json::exception& e) {
      throw fail(e.what());
    }
  }
  return out;
}

inline AnnotationSet read_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return parse_annotations(in);
}

inline void write_annotations(const AnnotationSet& set, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& [id, img] : set) {
    nlohmann::json rec{{"image", id}, {"width", img.width}, {"height", img.height}, {"boxes", nlohmann::json::array()}};
    for (const auto& g : img.boxes)
      rec["boxes"].push_back({{"x", g.box.x}, {"y", g.box.y}, {"w", g.box.w}, {"h", g.box.h},
                              {"label", g.label}, {"ignore", g.ignore}, {"occl", g.occlusion}});
    out << rec.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Detection CSV: "image_id,x,y,w,h,score", shortest round-trip decimals.
// ---------------------------------------------------------------------------

inline constexpr std::string_view kDetectionHeader = "image_id,x,y,w,h,score";

inline std::string format_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_real(std::string_view s) {
  double v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw Error("non-numeric field '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline void write_detections(std::ostream& out, const std::vector<Detection>& dets) {
  out << kDetectionHeader << '\n';
  for (const auto& d : dets) {
    if (d.image_id.find_first_of(",\n\r") != std::string::npos) throw Error("image id contains a separator");
    out << d.image_id << ',' << format_real(d.box.x) << ',' << format_real(d.box.y) << ',' << format_real(d.box.w)
        << ',' << format_real(d.box.h) << ',' << format_real(d.score) << '\n';
  }
}

inline void write_detections(const std::vector<Detection>& dets, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  write_detections(out, dets);
}

inline std::vector<Detection> parse_detections(std::istream& in) {
  std::vector<Detection> dets;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1) {
      if (line != kDetectionHeader) throw Error("line 1: expected header '" + std::string(kDetectionHeader) + "'");
      continue;
    }
    if (line.empty()) continue;
    const auto f = split_csv(line);
    try {
      if (f.size() != 6) throw Error("expected 6 fields");
      Detection d;
      d.image_id = std::string(f[0]);
      d.box = {parse_real(f[1]), parse_real(f[2]), parse_real(f[3]), parse_real(f[4])};
      d.score = parse_real(f[5]);
      if (!(d.box.w > 0) || !(d.box.h > 0)) throw Error("degenerate box");
      if (!std::isfinite(d.score)) throw Error("non-finite score");
      dets.push_back(std::move(d));
    } catch (const Error& e) {
      throw Error("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return dets;
}

inline std::vector<Detection> read_detections(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return parse_detections(in);
}

}  // namespace cfmdet
