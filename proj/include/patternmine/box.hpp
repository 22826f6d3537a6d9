#pragma once

#include <algorithm>
#include <array>

#include <nlohmann/json.hpp>

namespace patternmine {

/// Axis-aligned box in pixels, [x, y, w, h].
struct Box {
  double x = 0, y = 0, w = 0, h = 0;

  double area() const { return std::max(w, 0.0) * std::max(h, 0.0); }
  double right() const { return x + w; }
  double bottom() const { return y + h; }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Intersection over union; 0 when the union is empty.
inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.right(), b.right()) - std::max(a.x, b.x);
  const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y);
  const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline Box clamp_box(const Box& b, double width, double height) {
  const double x0 = std::clamp(b.x, 0.0, width);
  const double y0 = std::clamp(b.y, 0.0, height);
  const double x1 = std::clamp(b.right(), 0.0, width);
  const double y1 = std::clamp(b.bottom(), 0.0, height);
  return {x0, y0, x1 - x0, y1 - y0};
}

inline void to_json(nlohmann::json& j, const Box& b) { j = std::array<double, 4>{b.x, b.y, b.w, b.h}; }

inline void from_json(const nlohmann::json& j, Box& b) {
  const auto v = j.get<std::array<double, 4>>();
  b = {v[0], v[1], v[2], v[3]};
}

} // namespace patternmine
