#pragma once

#include "autodet/catalog.hpp"
#include "autodet/dataset.hpp"
#include "autodet/geometry.hpp"

#include <nlohmann/json.hpp>

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace autodet {

namespace backends {
class BackendClient;
}

/// Which branch of the prompt enumeration produced a prompt.
enum class PromptKind { original, cooccurring, synonym, synonym_cooccurring };

std::string_view to_string(PromptKind k);
PromptKind parse_prompt_kind(std::string_view s);

/// Phrases joined into one multi-class prompt are separated by this.
inline constexpr std::string_view kPhraseDelimiter = " . ";

struct DetectPrompt {
  std::string text;
  PromptKind kind = PromptKind::original;
  std::string query_class;
  /// normalized phrase -> canonical class, one entry per name in `text`
  std::map<std::string, std::string> decode_map;
};

/// The prompts for one class, in this order: the class name; the class with
/// its co-occurring classes (if any); then per synonym, the synonym alone and
/// the synonym with the co-occurring classes (if any). Co-occurring classes
/// follow catalog order.
///
/// Throws ValidationError for unknown classes.
std::vector<DetectPrompt> build_prompt_set(std::string_view class_name, const ClassCatalog& catalog);

/// 1 + [co != {}] + |syn| * (1 + [co != {}])
std::size_t expected_prompt_count(const ClassEntry& entry);

/// Canonical class for a phrase the detector echoed. Exact lookup in the
/// decode map first, then the longest decode-map key that contains the phrase
/// or is contained in it. Ties between different classes stay unresolved.
std::optional<std::string> decode_phrase(const DetectPrompt& prompt, std::string_view phrase);

struct Thresholds {
  double box = 0.27;
  double text = 0.25;
};

struct RawAnnotation {
  std::string image_id;
  Box box;
  double score = 0.0;
  std::string phrase;
  PromptKind prompt_kind = PromptKind::original;
  std::string prompt;       // text of the eliciting prompt
  std::string query_class;  // class whose prompt set contained it
};

enum class Stage { raw, filtered, final, approved, rejected };

std::string_view to_string(Stage s);
Stage parse_stage(std::string_view s);

/// One record of the annotation store. Raw records carry the query class in
/// `class_name` until decoding.
struct Annotation {
  std::string image_id;
  Box box;
  double score = 0.0;
  std::string phrase;
  std::string class_name;
  Stage stage = Stage::final;
  PromptKind prompt_kind = PromptKind::original;
  std::string prompt;

  /// Moves to a later stage. approved/rejected are reachable only from final.
  /// Throws ValidationError on a backward or skipping transition.
  void advance(Stage next);
};

Annotation to_annotation(const RawAnnotation& raw);
RawAnnotation to_raw(const Annotation& a);

/// Runs every prompt of every pre-assigned class against the detector and
/// returns the union, boxes clamped to the image. `image_ref` is what the
/// backend receives (path or URL).
std::vector<RawAnnotation> annotate_image(const ImageRecord& image, const std::string& image_ref,
                                          const ClassCatalog& catalog, backends::BackendClient& detector,
                                          Thresholds thresholds = {});

/// annotate_image over many images with up to `parallelism` requests in
/// flight. Results align with `images`.
std::vector<std::vector<RawAnnotation>> annotate_images(
    std::span<const ImageRecord> images, const std::function<std::string(const ImageRecord&)>& image_ref,
    const ClassCatalog& catalog, backends::BackendClient& detector, Thresholds thresholds, unsigned parallelism);

struct FilterResult {
  std::vector<Annotation> filtered;  // after the score rule and decoding, stage=filtered
  std::vector<Annotation> final;     // after NMS, stage=final, by descending score
  std::size_t unresolved = 0;        // phrases dropped for lack of a class
};

/// Filtering and class-agnostic NMS for one image.
///
/// 1. A pool of exactly one raw annotation is kept whatever its score;
///    otherwise only scores >= `score_thresh` survive.
/// 2. Phrases decode to canonical classes through the eliciting prompt.
/// 3. Survivors are ordered by (score desc, box, prompt kind, class, phrase)
///    and pass through NMS at `iou_thresh`.
///
/// Throws std::invalid_argument when the records span several images.
FilterResult filter_and_nms_detailed(std::span<const RawAnnotation> raw, const ClassCatalog& catalog,
                                     double score_thresh = 0.5, double iou_thresh = 0.5);

std::vector<Annotation> filter_and_nms(std::span<const RawAnnotation> raw, const ClassCatalog& catalog,
                                       double score_thresh = 0.5, double iou_thresh = 0.5);

// ---------------------------------------------------------------------------
// Store

void to_json(nlohmann::json& j, const Annotation& a);
void from_json(const nlohmann::json& j, Annotation& a);

std::vector<Annotation> read_annotations(const std::filesystem::path& path);
void write_annotations(const std::filesystem::path& path, std::span<const Annotation> annotations);

struct StageRow {
  std::string name;
  std::size_t count = 0;
  std::optional<double> mean_score;  // absent when count is 0
};

struct StageAccounting {
  std::vector<StageRow> rows;
  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Count and mean score per stage: raw annotations from original and
/// co-occurring prompts, all raw annotations, filtered, and final.
StageAccounting stage_accounting(std::span<const Annotation> store);

}  // namespace autodet
