#pragma once

#include "autodet/annotate.hpp"
#include "autodet/catalog.hpp"
#include "autodet/dataset.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace autodet {

enum class ExportFormat { yolo_txt, coco_json, jsonl };

std::string_view to_string(ExportFormat f);
ExportFormat parse_export_format(std::string_view s);

/// Shortest round-trip decimal, always with a fractional part ("1.0", "0.5").
std::string format_number(double v);

/// One YOLO label line: "k cx cy w h", coordinates normalized to [0, 1].
std::string yolo_line(std::size_t class_index, const Box& box, int image_width, int image_height);

using AnnotationsByImage = std::map<std::string, std::vector<Annotation>>;

AnnotationsByImage group_by_image(std::span<const Annotation> annotations);

/// Writes `labels/<id>.txt` per image (empty file for images without boxes),
/// `classes.txt` in catalog order and `images.txt` listing image paths.
/// Throws ValidationError for a class missing from the catalog.
void export_yolo(std::span<const ImageRecord> images, const AnnotationsByImage& annotations,
                 const ClassCatalog& catalog, const std::filesystem::path& out_dir);

/// COCO detection document. Category ids are catalog index + 1; image ids
/// count from 1 in manifest order and each image also carries "image_key".
nlohmann::json to_coco(std::span<const ImageRecord> images, const AnnotationsByImage& annotations,
                       const ClassCatalog& catalog);

void export_coco(std::span<const ImageRecord> images, const AnnotationsByImage& annotations,
                 const ClassCatalog& catalog, const std::filesystem::path& out_file);

/// The annotation store format; round-trips byte for byte.
void export_jsonl(std::span<const Annotation> annotations, const std::filesystem::path& out_file);

}  // namespace autodet
