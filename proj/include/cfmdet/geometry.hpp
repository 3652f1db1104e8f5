#pragma once

#include <algorithm>
#include <string>

namespace cfmdet {

// Axis-aligned box in input-image pixels, (x, y) is the top-left corner.
struct Box {
  double x = 0, y = 0, w = 0, h = 0;

  double right() const { return x + w; }
  double bottom() const { return y + h; }
  double area() const { return w * h; }

  friend bool operator==(const Box&, const Box&) = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.right(), b.right()) - std::max(a.x, b.x);
  const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y);
  if (iw <= 0 || ih <= 0) return 0.0;
  return iw * ih;
}

// Intersection over union on closed real boxes. Zero-area boxes are excluded
// by precondition; a zero union still yields 0 rather than NaN.
inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct Detection {
  std::string image_id;
  Box box;
  double score = 0;
  std::string source;
};

}  // namespace cfmdet
