#pragma once

#include <algorithm>

namespace fedsparse {

/// Axis-aligned box, corner form.
struct Box {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }

  static Box from_center(double cx, double cy, double w, double h) {
    return Box{cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0};
  }
};

/// Intersection over union. Zero-area boxes have IoU 0 with everything.
inline double iou(const Box& a, const Box& b) {
  const double area_a = a.area();
  const double area_b = b.area();
  if (area_a <= 0.0 || area_b <= 0.0) return 0.0;
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (area_a + area_b - inter);
}

}  // namespace fedsparse
