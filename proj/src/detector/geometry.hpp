#pragma once

#include <cstddef>

namespace bidet {

// Axis-aligned box in pixel coordinates (corner form, x_max/y_max exclusive edges).
struct Box {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  double cx() const { return 0.5 * (x_min + x_max); }
  double cy() const { return 0.5 * (y_min + y_max); }

  friend bool operator==(const Box&, const Box&) = default;
};

struct LabeledBox {
  Box box;
  int class_id = 0;

  friend bool operator==(const LabeledBox&, const LabeledBox&) = default;
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
  std::size_t image_id = 0;
  // block * anchors_per_block + anchor; tie-break key for NMS and matching.
  std::size_t anchor_index = 0;
};

// Intersection over union; 0 when either box has zero area.
double iou(const Box& a, const Box& b);

Box clip_box(const Box& b, double width, double height);

}  // namespace bidet
