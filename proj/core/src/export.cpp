#include "autodet/export.hpp"

#include "autodet/common.hpp"

#include <fmt/format.h>

#include <cmath>

namespace autodet {

using nlohmann::json;

std::string_view to_string(ExportFormat f) {
  switch (f) {
    case ExportFormat::yolo_txt: return "yolo_txt";
    case ExportFormat::coco_json: return "coco_json";
    case ExportFormat::jsonl: return "jsonl";
  }
  return "jsonl";
}

ExportFormat parse_export_format(std::string_view s) {
  if (s == "yolo_txt") return ExportFormat::yolo_txt;
  if (s == "coco_json") return ExportFormat::coco_json;
  if (s == "jsonl") return ExportFormat::jsonl;
  throw ParseError("unknown export format \"" + std::string(s) + "\" (yolo_txt, coco_json, jsonl)");
}

std::string format_number(double v) {
  if (!std::isfinite(v)) throw ValidationError("cannot export a non-finite number");
  if (v == 0.0) v = 0.0;  // drop the sign of -0
  std::string s = fmt::format("{}", v);
  if (s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

std::string yolo_line(std::size_t class_index, const Box& box, int image_width, int image_height) {
  const YoloBox y = to_yolo(clamp_to(box, image_width, image_height), image_width, image_height);
  return fmt::format("{} {} {} {} {}", class_index, format_number(y.cx), format_number(y.cy), format_number(y.w),
                     format_number(y.h));
}

AnnotationsByImage group_by_image(std::span<const Annotation> annotations) {
  AnnotationsByImage out;
  for (const auto& a : annotations) out[a.image_id].push_back(a);
  return out;
}

namespace {

std::size_t class_index(const ClassCatalog& catalog, const Annotation& a) {
  auto idx = catalog.index_of(a.class_name);
  if (!idx) throw ValidationError("annotation on " + a.image_id + " refers to unknown class \"" + a.class_name + "\"");
  return *idx;
}

}  // namespace

void export_yolo(std::span<const ImageRecord> images, const AnnotationsByImage& annotations,
                 const ClassCatalog& catalog, const std::filesystem::path& out_dir) {
  std::string listing;
  for (const auto& im : images) {
    std::string body;
    if (auto it = annotations.find(im.id); it != annotations.end()) {
      for (const auto& a : it->second) {
        body += yolo_line(class_index(catalog, a), a.box, im.width, im.height);
        body += '\n';
      }
    }
    write_file(out_dir / "labels" / (im.id + ".txt"), body);
    listing += im.path + '\n';
  }
  std::string names;
  for (const auto& c : catalog.classes()) names += c.name + '\n';
  write_file(out_dir / "classes.txt", names);
  write_file(out_dir / "images.txt", listing);
}

json to_coco(std::span<const ImageRecord> images, const AnnotationsByImage& annotations,
             const ClassCatalog& catalog) {
  json doc;
  doc["info"] = {{"description", "autodet export"}, {"version", catalog.version()}};
  doc["licenses"] = json::array();
  auto& jimages = doc["images"] = json::array();
  auto& janns = doc["annotations"] = json::array();
  auto& jcats = doc["categories"] = json::array();
  for (std::size_t i = 0; i < catalog.classes().size(); ++i) {
    jcats.push_back({{"id", i + 1}, {"name", catalog.classes()[i].name}, {"supercategory", "object"}});
  }
  long ann_id = 1;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& im = images[i];
    jimages.push_back({{"id", i + 1},
                       {"file_name", im.path},
                       {"width", im.width},
                       {"height", im.height},
                       {"image_key", im.id}});
    auto it = annotations.find(im.id);
    if (it == annotations.end()) continue;
    for (const auto& a : it->second) {
      const Box b = clamp_to(a.box, im.width, im.height);
      janns.push_back({{"id", ann_id++},
                       {"image_id", i + 1},
                       {"category_id", class_index(catalog, a) + 1},
                       {"bbox", {b.x1, b.y1, b.width(), b.height()}},
                       {"area", b.area()},
                       {"iscrowd", 0},
                       {"score", a.score}});
    }
  }
  return doc;
}

void export_coco(std::span<const ImageRecord> images, const AnnotationsByImage& annotations,
                 const ClassCatalog& catalog, const std::filesystem::path& out_file) {
  write_file(out_file, to_coco(images, annotations, catalog).dump(2) + "\n");
}

void export_jsonl(std::span<const Annotation> annotations, const std::filesystem::path& out_file) {
  write_annotations(out_file, annotations);
}

}  // namespace autodet
