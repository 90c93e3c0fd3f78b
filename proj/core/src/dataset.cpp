#include "autodet/dataset.hpp"

#include "autodet/common.hpp"

#include <sstream>

namespace autodet {

std::string_view to_string(Origin o) { return o == Origin::generated ? "generated" : "original"; }

Origin parse_origin(std::string_view s) {
  if (s == "original") return Origin::original;
  if (s == "generated") return Origin::generated;
  throw ParseError("unknown origin \"" + std::string(s) + "\"");
}

void to_json(nlohmann::json& j, const ImageRecord& r) {
  j = nlohmann::json{{"id", r.id},
                     {"path", r.path},
                     {"classes", r.class_names},
                     {"origin", std::string(to_string(r.origin))},
                     {"width", r.width},
                     {"height", r.height}};
  if (!r.provenance.is_null()) j["provenance"] = r.provenance;
}

void from_json(const nlohmann::json& j, ImageRecord& r) {
  try {
    r.id = j.at("id").get<std::string>();
    r.path = j.at("path").get<std::string>();
    r.class_names = j.at("classes").get<std::vector<std::string>>();
    r.origin = parse_origin(j.value("origin", std::string("original")));
    r.width = j.value("width", 0);
    r.height = j.value("height", 0);
    r.provenance = j.contains("provenance") ? j["provenance"] : nlohmann::json();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("image record: ") + e.what());
  }
}

void validate(const ImageRecord& r) {
  if (r.id.empty()) throw ValidationError("image record without id");
  if (r.width <= 0 || r.height <= 0) {
    throw ValidationError("image " + r.id + " has non-positive dimensions");
  }
  if (r.class_names.empty()) throw ValidationError("image " + r.id + " has no class assigned");
}

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<nlohmann::json> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += r.dump();
    out += '\n';
  }
  write_file(path, out);
}

std::vector<ImageRecord> read_images(const std::filesystem::path& path) {
  std::vector<ImageRecord> out;
  for (const auto& row : read_jsonl(path)) out.push_back(row.get<ImageRecord>());
  return out;
}

void write_images(const std::filesystem::path& path, const std::vector<ImageRecord>& images) {
  std::vector<nlohmann::json> rows;
  rows.reserve(images.size());
  for (const auto& r : images) rows.emplace_back(r);
  write_jsonl(path, rows);
}

}  // namespace autodet
