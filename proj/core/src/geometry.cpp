#include "autodet/geometry.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace autodet {

bool Box::valid() const {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
         x1 <= x2 && y1 <= y2;
}

double iou(const Box& a, const Box& b) noexcept {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

Box clamp_to(const Box& b, double width, double height) {
  Box out{std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height),
          std::clamp(b.x2, 0.0, width), std::clamp(b.y2, 0.0, height)};
  if (out.x2 < out.x1) std::swap(out.x1, out.x2);
  if (out.y2 < out.y1) std::swap(out.y1, out.y2);
  return out;
}

std::vector<std::size_t> nms_class_agnostic(std::span<const ScoredBox> items, double iou_thresh) {
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0)) {
    throw std::invalid_argument("nms iou_thresh must lie in (0, 1)");
  }

  std::vector<std::size_t> order;
  order.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& b = items[i].box;
    if (!b.valid() || b.area() <= 0.0) {
      spdlog::warn("nms: dropping degenerate box #{} ({}, {}, {}, {})", i, b.x1, b.y1, b.x2, b.y2);
      continue;
    }
    order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return items[a].score > items[b].score; });

  std::vector<std::size_t> kept;
  for (std::size_t idx : order) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
      return iou(items[idx].box, items[k].box) > iou_thresh;
    });
    if (!suppressed) kept.push_back(idx);
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

YoloBox to_yolo(const Box& b, double image_width, double image_height) {
  return {(b.x1 + b.x2) / 2.0 / image_width, (b.y1 + b.y2) / 2.0 / image_height,
          b.width() / image_width, b.height() / image_height};
}

Box from_yolo(const YoloBox& y, double image_width, double image_height) {
  const double cx = y.cx * image_width;
  const double cy = y.cy * image_height;
  const double hw = y.w * image_width / 2.0;
  const double hh = y.h * image_height / 2.0;
  return {cx - hw, cy - hh, cx + hw, cy + hh};
}

}  // namespace autodet
