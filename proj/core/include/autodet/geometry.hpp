#pragma once

#include <compare>
#include <cstddef>
#include <span>
#include <vector>

namespace autodet {

/// Axis-aligned box in pixels, origin top-left, corners (x1,y1)-(x2,y2).
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }

  /// Ordered corners with finite coordinates.
  bool valid() const;
  /// Valid but zero area.
  bool degenerate() const { return valid() && area() <= 0.0; }

  friend auto operator<=>(const Box&, const Box&) = default;
};

struct ScoredBox {
  Box box;
  double score = 0.0;
};

/// Intersection over union; 0 when disjoint or when the union is empty.
double iou(const Box& a, const Box& b) noexcept;

/// Clips a box to [0,w]x[0,h].
Box clamp_to(const Box& b, double width, double height);

/// Greedy class-agnostic NMS.
///
/// Candidates are visited by descending score (ties: lower index first). A
/// candidate is suppressed iff its IoU with an already kept box is strictly
/// greater than `iou_thresh`. Degenerate or invalid boxes are dropped up front
/// with a warning. Returns the kept indices in ascending (input) order.
///
/// Throws std::invalid_argument unless 0 < iou_thresh < 1.
std::vector<std::size_t> nms_class_agnostic(std::span<const ScoredBox> items, double iou_thresh);

/// Normalized YOLO (cx, cy, w, h) representation.
struct YoloBox {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;
};

YoloBox to_yolo(const Box& b, double image_width, double image_height);
Box from_yolo(const YoloBox& y, double image_width, double image_height);

}  // namespace autodet
