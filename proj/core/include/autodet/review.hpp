#pragma once

#include "autodet/annotate.hpp"
#include "autodet/catalog.hpp"
#include "autodet/common.hpp"
#include "autodet/dataset.hpp"

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace autodet {

namespace backends {
class BackendClient;
}

inline constexpr int kOverlayLongSide = 512;

/// BGR colors cycled by annotation index.
const std::array<cv::Scalar, 12>& overlay_palette();

struct OverlayImage {
  std::string source_id;
  cv::Mat pixels;
  double scale = 1.0;  // overlay pixels per source pixel
  std::vector<Annotation> drawn;

  /// {"source_id", "scale", "boxes": [{"class", "score", "box"}]}, boxes in
  /// overlay pixels.
  nlohmann::json sidecar() const;
};

/// Downscales so the long side is min(512, original long side), then draws
/// each annotation as a 2 px rectangle with a "class 0.87" label at its
/// top-left corner.
OverlayImage render_overlay(const cv::Mat& image, const std::string& source_id,
                            std::span<const Annotation> annotations);
/// Throws ParseError when the file cannot be decoded.
OverlayImage render_overlay(const std::filesystem::path& image, const std::string& source_id,
                            std::span<const Annotation> annotations);

/// Writes the PNG and `<png>.json` with the sidecar.
void write_overlay(const OverlayImage& overlay, const std::filesystem::path& png);

/// True when the image has more than one annotation or any score below 0.5.
bool select_for_review(std::span<const Annotation> annotations);

struct ReviewPrompts {
  std::string system;
  std::string user;
};

/// {target} is the image's primary class, {secondary_target} its co-occurring
/// classes joined with ", ", or "no secondary target".
ReviewPrompts build_review_prompts(const ImageRecord& image, const ClassCatalog& catalog);

struct ReviewBundle {
  OverlayImage overlay;
  ReviewPrompts prompts;
};

ReviewBundle build_review_request(const cv::Mat& image, const ImageRecord& record,
                                  std::span<const Annotation> annotations, const ClassCatalog& catalog);

/// Photorealism question pair for a generated image of `class_name`.
std::string build_photorealism_prompt(const std::string& class_name);

// ---------------------------------------------------------------------------
// Verdicts

class VerdictParseError : public ParseError {
 public:
  using ParseError::ParseError;
};

struct ReviewVerdict {
  std::string image_id;
  bool precision = false;
  bool recall = false;
  bool fit = false;
  std::string raw_text;
  std::string reviewer;
};

struct PhotorealismVerdict {
  std::string image_id;
  bool suitable = false;
  bool authentic = false;
  std::string raw_text;
};

/// Takes the first JSON object (fenced or bare) that has any of the keys
/// Precision/Recall/Fit, compared case-insensitively, and requires all three.
/// Each value must be a string whose answer is yes or no; surrounding prose is
/// tolerated, a value naming both is not.
///
/// Throws VerdictParseError; never returns a partial verdict.
ReviewVerdict parse_verdict(std::string_view raw_text);

/// Reads the first two lines that open with YES or NO (case-insensitive,
/// list numbering allowed). Throws VerdictParseError otherwise.
PhotorealismVerdict parse_photorealism(std::string_view raw_text);

bool gate_pseudo_labels(const ReviewVerdict& v);
bool gate_photorealism(const PhotorealismVerdict& v);

struct AgreementMatrix {
  long keep_keep = 0;
  long keep_drop = 0;  // first keeps, second drops
  long drop_keep = 0;
  long drop_drop = 0;
  double agreement = 0.0;
};

/// Keep/drop decisions by image id from two reviewers. Throws ValidationError
/// when the id sets differ or are empty.
AgreementMatrix agreement_matrix(const std::map<std::string, bool>& a, const std::map<std::string, bool>& b);
AgreementMatrix agreement_matrix(std::span<const ReviewVerdict> a, std::span<const ReviewVerdict> b);

// ---------------------------------------------------------------------------
// Review pass

/// Disposition of one image after the pseudo-label review.
struct ReviewOutcome {
  std::string image_id;
  bool selected = false;  // went to the reviewer
  std::optional<ReviewVerdict> verdict;
  std::string error;  // set when the image needs attention
  bool kept = false;

  nlohmann::json to_json() const;
  static ReviewOutcome from_json(const nlohmann::json& j);
};

struct ReviewPassOptions {
  std::filesystem::path overlay_dir;
  /// When false every image with annotations is kept without a reviewer call.
  bool enabled = true;
  unsigned parallelism = 4;
};

/// Reviews every image that has final annotations; images without any are
/// skipped entirely. Outcomes come back sorted by image id.
std::vector<ReviewOutcome> review_images(std::span<const ImageRecord> images,
                                         const std::map<std::string, std::vector<Annotation>>& finals,
                                         const std::function<std::filesystem::path(const ImageRecord&)>& image_path,
                                         const ClassCatalog& catalog, backends::BackendClient* reviewer,
                                         const ReviewPassOptions& options);

}  // namespace autodet
