#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace autodet {

enum class Origin { original, generated };

std::string_view to_string(Origin o);
Origin parse_origin(std::string_view s);

struct ImageRecord {
  std::string id;
  std::string path;                      // relative to the dataset root, or absolute
  std::vector<std::string> class_names;  // pre-assigned; the first is the primary class
  Origin origin = Origin::original;
  int width = 0;
  int height = 0;
  nlohmann::json provenance;  // generated images: instance, prompt_id, seed, model_ref

  const std::string& primary_class() const { return class_names.front(); }
};

void to_json(nlohmann::json& j, const ImageRecord& r);
void from_json(const nlohmann::json& j, ImageRecord& r);

/// Throws ValidationError when dimensions are not positive or no class is assigned.
void validate(const ImageRecord& r);

/// JSON-lines helpers. Blank lines are skipped on read.
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows);

std::vector<ImageRecord> read_images(const std::filesystem::path& path);
void write_images(const std::filesystem::path& path, const std::vector<ImageRecord>& images);

}  // namespace autodet
