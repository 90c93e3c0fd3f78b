#pragma once

#include "autodet/annotate.hpp"
#include "autodet/backends/client.hpp"
#include "autodet/backends/synthetic.hpp"
#include "autodet/catalog.hpp"
#include "autodet/diversify.hpp"
#include "autodet/preprocess.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace autodet {

namespace backends {
class MockBackend;
}

/// Declarative run configuration, read from one JSON file. `${NAME}` is
/// replaced by environment variable NAME before parsing. Relative paths are
/// relative to the config file.
struct RunConfig {
  std::filesystem::path config_path;
  std::uint64_t seed = 0;

  std::filesystem::path catalog_path;
  /// Either a synthetic world (generated during ingest) or an image manifest.
  std::optional<backends::WorldParams> world;
  std::filesystem::path dataset_root;
  std::filesystem::path images_manifest;
  std::filesystem::path output_dir;

  std::map<backends::Role, backends::EndpointConfig> endpoints;
  nlohmann::json mock = nlohmann::json::object();

  Thresholds thresholds;
  double filter_thresh = 0.5;
  double nms_thresh = 0.5;
  int dedup_exact = 0;
  int dedup_near = 10;
  SplitFractions fractions;

  bool review_enabled = true;

  bool diversify_enabled = false;
  std::filesystem::path prompts_path;
  int images_per_prompt = 1;
  int max_prompts_per_instance = 0;  // 0 keeps all
  DreamBoothDefaults dreambooth;

  MixPlan mix;

  std::string detector_model = "yolov8n";
  nlohmann::json hyperparameters = nlohmann::json::object();  // overrides of the model defaults

  std::optional<std::filesystem::path> eval_ground_truth;
  double cm_iou = 0.45;
  double cm_conf = 0.25;

  /// Loads, interpolates, resolves paths and validates. `seed_override`
  /// replaces the configured seed.
  static RunConfig load(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override = {});
  static RunConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir);

  /// Throws ValidationError when thresholds are out of range or referenced
  /// files are missing.
  void validate() const;
};

enum class StageId { ingest, dedup, split, diversify, annotate, review, mix, train, eval };

inline constexpr std::array<StageId, 9> kStages = {StageId::ingest,   StageId::dedup,  StageId::split,
                                                   StageId::diversify, StageId::annotate, StageId::review,
                                                   StageId::mix,      StageId::train,  StageId::eval};

std::string_view to_string(StageId s);
StageId parse_stage_id(std::string_view s);

/// A stage ran without the artifacts of an earlier one.
class MissingArtifactError : public Error {
 public:
  MissingArtifactError(StageId needed, const std::string& what) : Error(what), needed_(needed) {}
  StageId needed() const { return needed_; }

 private:
  StageId needed_;
};

struct RunOptions {
  /// Skip stages whose content-addressed output already exists.
  bool resume = false;
  bool dry_run = false;
};

struct StageReport {
  StageId stage;
  std::string key;
  bool skipped = false;
  double seconds = 0.0;
};

/// Stage outputs live in `<out>/<stage>/<key>/`, where the key hashes the
/// stage's configuration and every earlier key. A `DONE` file marks a
/// complete directory and `<out>/<stage>/CURRENT` names the latest key.
/// Timestamps go only to `<out>/run_metadata.json`.
class Pipeline {
 public:
  Pipeline(RunConfig config, RunOptions options = {});
  ~Pipeline();

  /// Runs one stage; earlier stages must have completed.
  StageReport run(StageId stage);
  /// Runs every stage in order.
  std::vector<StageReport> run_all();

  /// One line per stage: key and whether it would run or be skipped.
  std::vector<std::string> plan() const;

  const RunConfig& config() const { return config_; }
  const ClassCatalog& catalog() const { return catalog_; }
  std::string key(StageId stage) const;
  std::filesystem::path stage_dir(StageId stage) const;
  bool complete(StageId stage) const;

  /// Where an image record's pixels live.
  std::filesystem::path image_path(const ImageRecord& image) const;

  backends::BackendClient& client(backends::Role role);

 private:
  void compute_keys();
  void require(StageId stage) const;
  void write_metadata(const std::vector<StageReport>& reports) const;

  void do_ingest(const std::filesystem::path& dir);
  void do_dedup(const std::filesystem::path& dir);
  void do_split(const std::filesystem::path& dir);
  void do_diversify(const std::filesystem::path& dir);
  void do_annotate(const std::filesystem::path& dir);
  void do_review(const std::filesystem::path& dir);
  void do_mix(const std::filesystem::path& dir);
  void do_train(const std::filesystem::path& dir);
  void do_eval(const std::filesystem::path& dir);

  RunConfig config_;
  RunOptions options_;
  ClassCatalog catalog_;
  std::map<StageId, std::string> keys_;
  std::shared_ptr<backends::MockBackend> mock_;
  std::map<backends::Role, std::unique_ptr<backends::BackendClient>> clients_;
  int lock_fd_ = -1;
};

}  // namespace autodet
