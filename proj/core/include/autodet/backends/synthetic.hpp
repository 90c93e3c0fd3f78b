#pragma once

// Synthetic world: seeded scenes of flat backgrounds and drawn rectangles with
// known ground truth, stored as PNG plus a `<image>.truth.json` sidecar. The
// mock backends read the sidecars, which makes every pipeline stage
// measurable without a model.

#include "autodet/catalog.hpp"
#include "autodet/dataset.hpp"
#include "autodet/geometry.hpp"

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace autodet::backends {

struct TruthObject {
  std::string class_name;
  Box box;
};

struct SceneTruth {
  std::string id;
  int width = 0;
  int height = 0;
  std::vector<TruthObject> objects;
  bool hard = false;       // detector noise is amplified on hard scenes
  bool photoreal = true;   // generated scenes may be flagged unrealistic
  std::uint64_t seed = 0;  // render seed

  nlohmann::json to_json() const;
  static SceneTruth from_json(const nlohmann::json& j);
};

std::filesystem::path truth_path(const std::filesystem::path& image);
SceneTruth read_truth(const std::filesystem::path& image);
void write_truth(const std::filesystem::path& image, const SceneTruth& truth);

/// Pure function of the truth record (including its seed).
cv::Mat render_scene(const SceneTruth& truth);

/// Places `classes.size()` objects, each 20-45% of the frame per side, with
/// little mutual overlap.
std::vector<TruthObject> place_objects(std::uint64_t seed, const std::vector<std::string>& classes, int width,
                                       int height);

struct WorldParams {
  std::uint64_t seed = 0;
  int images_per_class = 8;
  int width = 320;
  int height = 240;
  /// Chance that an image of a class with co-occurring partners also shows one.
  double cooccur_rate = 0.5;
  /// Chance of a second object of the primary class.
  double extra_object_rate = 0.3;
  double hard_fraction = 0.25;
  int exact_duplicates = 2;
  int near_duplicates = 2;
  /// Restrict to these classes; empty means every catalog class.
  std::vector<std::string> classes;

  static WorldParams from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Writes `dir/images/<id>.png` with sidecars and `dir/images.jsonl`, returning
/// the records (paths relative to `dir`).
std::vector<ImageRecord> generate_world(const ClassCatalog& catalog, const WorldParams& params,
                                        const std::filesystem::path& dir);

}  // namespace autodet::backends
