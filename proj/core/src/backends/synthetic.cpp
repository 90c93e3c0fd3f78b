#include "autodet/backends/synthetic.hpp"

#include "autodet/common.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>

namespace autodet::backends {

using nlohmann::json;

json SceneTruth::to_json() const {
  json objs = json::array();
  for (const auto& o : objects) {
    objs.push_back({{"class", o.class_name}, {"box", {o.box.x1, o.box.y1, o.box.x2, o.box.y2}}});
  }
  return json{{"id", id},       {"width", width},         {"height", height}, {"objects", objs},
              {"hard", hard},   {"photoreal", photoreal}, {"seed", seed}};
}

SceneTruth SceneTruth::from_json(const json& j) {
  SceneTruth t;
  try {
    t.id = j.at("id").get<std::string>();
    t.width = j.at("width").get<int>();
    t.height = j.at("height").get<int>();
    for (const auto& o : j.at("objects")) {
      const auto& b = o.at("box");
      t.objects.push_back({o.at("class").get<std::string>(),
                           {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()}});
    }
    t.hard = j.value("hard", false);
    t.photoreal = j.value("photoreal", true);
    t.seed = j.value("seed", std::uint64_t{0});
  } catch (const json::exception& e) {
    throw ParseError(std::string("truth sidecar: ") + e.what());
  }
  return t;
}

std::filesystem::path truth_path(const std::filesystem::path& image) {
  return std::filesystem::path(image.string() + ".truth.json");
}

SceneTruth read_truth(const std::filesystem::path& image) {
  const auto p = truth_path(image);
  try {
    return SceneTruth::from_json(json::parse(read_file(p)));
  } catch (const json::parse_error& e) {
    throw ParseError(p.string() + ": " + e.what());
  }
}

void write_truth(const std::filesystem::path& image, const SceneTruth& truth) {
  write_file(truth_path(image), truth.to_json().dump(2) + "\n");
}

namespace {

cv::Scalar class_color(const std::string& name) {
  const auto h = fnv1a(name);
  return cv::Scalar(40 + static_cast<double>(h & 0xaf), 40 + static_cast<double>((h >> 8) & 0xaf),
                    40 + static_cast<double>((h >> 16) & 0xaf));
}

cv::Point pt(double x, double y) { return {static_cast<int>(std::lround(x)), static_cast<int>(std::lround(y))}; }

}  // namespace

cv::Mat render_scene(const SceneTruth& truth) {
  Rng rng(hash_combine(truth.seed, std::string_view("render")));
  cv::Mat img(truth.height, truth.width, CV_8UC3);

  // Vertical gradient background with a few clutter shapes.
  const double top = rng.uniform(90, 200);
  const double bottom = rng.uniform(60, 220);
  const double tint = rng.uniform(-30, 30);
  for (int y = 0; y < img.rows; ++y) {
    const double v = top + (bottom - top) * y / std::max(1, img.rows - 1);
    img.row(y).setTo(cv::Scalar(std::clamp(v + tint, 0.0, 255.0), std::clamp(v, 0.0, 255.0),
                                std::clamp(v - tint, 0.0, 255.0)));
  }
  const int clutter = 3 + static_cast<int>(rng.below(5));
  for (int i = 0; i < clutter; ++i) {
    const double g = rng.uniform(50, 230);
    cv::circle(img, pt(rng.uniform(0, truth.width), rng.uniform(0, truth.height)),
               static_cast<int>(rng.uniform(4, truth.width / 8.0)), cv::Scalar(g, g, g), cv::FILLED);
  }

  for (const auto& o : truth.objects) {
    const auto color = truth.photoreal ? class_color(o.class_name) : cv::Scalar(255, 0, 255);
    const auto& b = o.box;
    cv::rectangle(img, pt(b.x1, b.y1), pt(b.x2 - 1, b.y2 - 1), color, cv::FILLED);
    cv::rectangle(img, pt(b.x1, b.y1), pt(b.x2 - 1, b.y2 - 1), color * 0.5, 2);
    // A cab and a boom so objects are not plain blocks.
    cv::rectangle(img, pt(b.x1 + b.width() * 0.1, b.y1 + b.height() * 0.15),
                  pt(b.x1 + b.width() * 0.4, b.y1 + b.height() * 0.5), color * 0.7, cv::FILLED);
    cv::line(img, pt(b.x1 + b.width() * 0.5, b.y1 + b.height() * 0.3), pt(b.x2 - 2, b.y1 + 2), color * 0.4, 2);
  }
  return img;
}

std::vector<TruthObject> place_objects(std::uint64_t seed, const std::vector<std::string>& classes, int width,
                                       int height) {
  Rng rng(hash_combine(seed, std::string_view("place")));
  std::vector<TruthObject> out;
  for (const auto& cls : classes) {
    Box best;
    double best_overlap = 2.0;
    for (int attempt = 0; attempt < 20; ++attempt) {
      const double w = std::floor(rng.uniform(0.2, 0.45) * width);
      const double h = std::floor(rng.uniform(0.2, 0.45) * height);
      const double x = std::floor(rng.uniform(0, width - w));
      const double y = std::floor(rng.uniform(0, height - h));
      const Box cand{x, y, x + w, y + h};
      double overlap = 0.0;
      for (const auto& o : out) overlap = std::max(overlap, iou(cand, o.box));
      if (overlap < best_overlap) {
        best = cand;
        best_overlap = overlap;
      }
      if (overlap <= 0.05) break;
    }
    out.push_back({cls, best});
  }
  return out;
}

WorldParams WorldParams::from_json(const json& j) {
  WorldParams p;
  try {
    p.seed = j.value("seed", p.seed);
    p.images_per_class = j.value("images_per_class", p.images_per_class);
    p.width = j.value("width", p.width);
    p.height = j.value("height", p.height);
    p.cooccur_rate = j.value("cooccur_rate", p.cooccur_rate);
    p.extra_object_rate = j.value("extra_object_rate", p.extra_object_rate);
    p.hard_fraction = j.value("hard_fraction", p.hard_fraction);
    p.exact_duplicates = j.value("exact_duplicates", p.exact_duplicates);
    p.near_duplicates = j.value("near_duplicates", p.near_duplicates);
    p.classes = j.value("classes", p.classes);
  } catch (const json::exception& e) {
    throw ParseError(std::string("world params: ") + e.what());
  }
  if (p.images_per_class < 1 || p.width < 32 || p.height < 32) {
    throw ValidationError("world params: need at least one image per class and 32px frames");
  }
  return p;
}

json WorldParams::to_json() const {
  return json{{"seed", seed},
              {"images_per_class", images_per_class},
              {"width", width},
              {"height", height},
              {"cooccur_rate", cooccur_rate},
              {"extra_object_rate", extra_object_rate},
              {"hard_fraction", hard_fraction},
              {"exact_duplicates", exact_duplicates},
              {"near_duplicates", near_duplicates},
              {"classes", classes}};
}

std::vector<ImageRecord> generate_world(const ClassCatalog& catalog, const WorldParams& params,
                                        const std::filesystem::path& dir) {
  std::vector<const ClassEntry*> classes;
  if (params.classes.empty()) {
    for (const auto& c : catalog.classes()) classes.push_back(&c);
  } else {
    for (const auto& name : params.classes) classes.push_back(&catalog.at(name));
  }

  Rng rng(hash_combine(params.seed, std::string_view("world")));
  std::vector<SceneTruth> scenes;
  for (std::size_t ci = 0; ci < classes.size(); ++ci) {
    const auto& cls = *classes[ci];
    for (int i = 0; i < params.images_per_class; ++i) {
      SceneTruth t;
      t.id = "img-" + std::to_string(ci * 1000 + static_cast<std::size_t>(i));
      t.width = params.width;
      t.height = params.height;
      t.seed = rng.next();
      t.hard = rng.bernoulli(params.hard_fraction);
      std::vector<std::string> names{cls.name};
      if (rng.bernoulli(params.extra_object_rate)) names.push_back(cls.name);
      if (!cls.co_occurring.empty() && rng.bernoulli(params.cooccur_rate)) {
        names.push_back(catalog.at(cls.co_occurring[rng.below(cls.co_occurring.size())]).name);
      }
      t.objects = place_objects(t.seed, names, t.width, t.height);
      scenes.push_back(std::move(t));
    }
  }

  // Exact duplicates re-render an existing scene; near duplicates nudge it.
  const std::size_t base = scenes.size();
  for (int i = 0; i < params.exact_duplicates && base > 0; ++i) {
    SceneTruth t = scenes[rng.below(base)];
    t.id += "-copy" + std::to_string(i);
    scenes.push_back(std::move(t));
  }
  for (int i = 0; i < params.near_duplicates && base > 0; ++i) {
    SceneTruth t = scenes[rng.below(base)];
    t.id += "-burst" + std::to_string(i);
    for (auto& o : t.objects) {
      o.box.x1 += 1;
      o.box.x2 += 1;
      o.box = clamp_to(o.box, t.width, t.height);
    }
    scenes.push_back(std::move(t));
  }

  std::vector<ImageRecord> records;
  for (const auto& t : scenes) {
    const std::string rel = "images/" + t.id + ".png";
    const auto path = dir / rel;
    std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), render_scene(t))) throw Error("cannot write " + path.string());
    write_truth(path, t);

    ImageRecord r;
    r.id = t.id;
    r.path = rel;
    r.width = t.width;
    r.height = t.height;
    for (const auto& o : t.objects) {
      if (std::find(r.class_names.begin(), r.class_names.end(), o.class_name) == r.class_names.end()) {
        r.class_names.push_back(o.class_name);
      }
    }
    records.push_back(std::move(r));
  }
  write_images(dir / "images.jsonl", records);
  return records;
}

}  // namespace autodet::backends
