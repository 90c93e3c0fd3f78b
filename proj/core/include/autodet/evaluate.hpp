#pragma once

#include "autodet/geometry.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace autodet {

struct Detection {
  std::string image_id;
  Box box;
  double score = 0.0;
  std::string class_name;
};

struct GroundTruth {
  std::string image_id;
  Box box;
  std::string class_name;
};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
inline constexpr std::size_t kNumIouThresholds = 10;
double iou_threshold(std::size_t k);

/// Recall grid 0, 0.01, ..., 1.
inline constexpr std::size_t kRecallPoints = 101;

struct ClassMatch {
  std::vector<std::size_t> ranked;  // detection indices by descending score, ties by index
  std::vector<bool> tp;             // aligned with `ranked`
  std::size_t n_gt = 0;
  std::size_t fn = 0;
};

struct MatchResult {
  std::vector<bool> tp;  // per input detection
  std::map<std::string, ClassMatch> classes;
};

/// Greedy matching per image and class: detections in descending score take
/// the unmatched ground truth with the highest IoU >= iou_t.
MatchResult match_detections(std::span<const Detection> dets, std::span<const GroundTruth> gts, double iou_t);

struct PRCurve {
  std::string class_name;
  double iou_t = 0.5;
  std::vector<std::pair<double, double>> points;  // (recall, precision) by rank
  std::array<double, kRecallPoints> envelope{};   // max precision at recall >= grid point
};

/// Empty when the class has no ground truth.
std::optional<PRCurve> pr_curve(const ClassMatch& match, std::string class_name, double iou_t);

/// Mean of the envelope over the 101-point grid; empty when the class has no
/// ground truth.
std::optional<double> ap_at(std::span<const Detection> dets, std::span<const GroundTruth> gts, double iou_t,
                            std::string_view class_name);

struct APReport {
  std::vector<std::string> classes;  // classes with ground truth, sorted
  std::map<std::string, std::array<double, kNumIouThresholds>> per_class;
  std::vector<std::string> absent;  // detected classes without ground truth
  double ap50 = 0.0;
  double ap50_95 = 0.0;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Per-class AP at every threshold, averaged over classes and then over
/// thresholds. Throws ValidationError when `gts` is empty.
APReport ap_summary(std::span<const Detection> dets, std::span<const GroundTruth> gts);

struct ConfusionMatrix {
  std::vector<std::string> classes;      // background is the extra last row/column
  std::vector<std::vector<long>> counts; // [ground truth][prediction]

  long at(std::string_view gt, std::string_view pred) const;
  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Detections below `conf_t` are ignored. Per image, pairs with IoU >= iou_t
/// are matched one-to-one by descending IoU regardless of class.
/// An empty `classes` uses the sorted union of classes seen.
/// Throws std::invalid_argument unless both thresholds lie in (0, 1), and
/// ValidationError for classes outside a given list.
ConfusionMatrix confusion_matrix(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                                 double iou_t = 0.45, double conf_t = 0.25, std::vector<std::string> classes = {});

/// Annotation JSON-lines (any stage) or a COCO detection document, chosen by
/// content. COCO images are keyed by "image_key" when present, else by the
/// stem of "file_name".
std::vector<GroundTruth> load_ground_truth(const std::filesystem::path& path);
/// Annotation JSON-lines.
std::vector<Detection> load_detections(const std::filesystem::path& path);

}  // namespace autodet
