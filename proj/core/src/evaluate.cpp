#include "autodet/evaluate.hpp"

#include "autodet/annotate.hpp"
#include "autodet/common.hpp"
#include "autodet/dataset.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <numeric>
#include <set>
#include <stdexcept>

namespace autodet {

using nlohmann::json;

double iou_threshold(std::size_t k) { return static_cast<double>(50 + 5 * k) / 100.0; }

MatchResult match_detections(std::span<const Detection> dets, std::span<const GroundTruth> gts, double iou_t) {
  MatchResult out;
  out.tp.assign(dets.size(), false);

  // (class, image) -> gt indices
  std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> gt_index;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    gt_index[{gts[g].class_name, gts[g].image_id}].push_back(g);
    ++out.classes[gts[g].class_name].n_gt;
  }
  for (std::size_t d = 0; d < dets.size(); ++d) out.classes[dets[d].class_name].ranked.push_back(d);

  std::vector<bool> gt_used(gts.size(), false);
  for (auto& [cls, m] : out.classes) {
    std::stable_sort(m.ranked.begin(), m.ranked.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    m.tp.assign(m.ranked.size(), false);
    std::size_t matched = 0;
    for (std::size_t r = 0; r < m.ranked.size(); ++r) {
      const Detection& d = dets[m.ranked[r]];
      auto it = gt_index.find({cls, d.image_id});
      if (it == gt_index.end()) continue;
      double best = iou_t;
      std::optional<std::size_t> pick;
      for (std::size_t g : it->second) {
        if (gt_used[g]) continue;
        const double v = iou(d.box, gts[g].box);
        if (v >= best && (!pick || v > best)) {
          best = v;
          pick = g;
        }
      }
      if (pick) {
        gt_used[*pick] = true;
        m.tp[r] = true;
        out.tp[m.ranked[r]] = true;
        ++matched;
      }
    }
    m.fn = m.n_gt - matched;
  }
  return out;
}

std::optional<PRCurve> pr_curve(const ClassMatch& match, std::string class_name, double iou_t) {
  if (match.n_gt == 0) return std::nullopt;
  PRCurve c;
  c.class_name = std::move(class_name);
  c.iou_t = iou_t;
  std::size_t tp = 0;
  for (std::size_t r = 0; r < match.tp.size(); ++r) {
    if (match.tp[r]) ++tp;
    c.points.emplace_back(static_cast<double>(tp) / static_cast<double>(match.n_gt),
                          static_cast<double>(tp) / static_cast<double>(r + 1));
  }
  // Suffix maximum of precision, then sample at each grid recall.
  std::vector<double> smax(c.points.size());
  double run = 0.0;
  for (std::size_t i = c.points.size(); i-- > 0;) {
    run = std::max(run, c.points[i].second);
    smax[i] = run;
  }
  for (std::size_t k = 0; k < kRecallPoints; ++k) {
    const double r = static_cast<double>(k) / 100.0;
    auto it = std::lower_bound(c.points.begin(), c.points.end(), r,
                               [](const std::pair<double, double>& p, double v) { return p.first < v; });
    c.envelope[k] = it == c.points.end() ? 0.0 : smax[static_cast<std::size_t>(it - c.points.begin())];
  }
  return c;
}

namespace {

double mean_envelope(const PRCurve& c) {
  return std::accumulate(c.envelope.begin(), c.envelope.end(), 0.0) / static_cast<double>(kRecallPoints);
}

}  // namespace

std::optional<double> ap_at(std::span<const Detection> dets, std::span<const GroundTruth> gts, double iou_t,
                            std::string_view class_name) {
  const auto m = match_detections(dets, gts, iou_t);
  auto it = m.classes.find(std::string(class_name));
  if (it == m.classes.end()) return std::nullopt;
  const auto c = pr_curve(it->second, it->first, iou_t);
  if (!c) return std::nullopt;
  return mean_envelope(*c);
}

APReport ap_summary(std::span<const Detection> dets, std::span<const GroundTruth> gts) {
  if (gts.empty()) throw ValidationError("ap_summary: no ground truth");
  APReport rep;
  std::set<std::string> gt_classes;
  for (const auto& g : gts) gt_classes.insert(g.class_name);
  rep.classes.assign(gt_classes.begin(), gt_classes.end());
  std::set<std::string> absent;
  for (const auto& d : dets) {
    if (!gt_classes.contains(d.class_name)) absent.insert(d.class_name);
  }
  rep.absent.assign(absent.begin(), absent.end());

  std::array<double, kNumIouThresholds> class_mean{};
  for (std::size_t k = 0; k < kNumIouThresholds; ++k) {
    const double t = iou_threshold(k);
    const auto m = match_detections(dets, gts, t);
    double sum = 0.0;
    for (const auto& cls : rep.classes) {
      const double ap = mean_envelope(*pr_curve(m.classes.at(cls), cls, t));
      rep.per_class[cls][k] = ap;
      sum += ap;
    }
    class_mean[k] = sum / static_cast<double>(rep.classes.size());
  }
  rep.ap50 = class_mean[0];
  rep.ap50_95 = std::accumulate(class_mean.begin(), class_mean.end(), 0.0) / static_cast<double>(kNumIouThresholds);
  return rep;
}

json APReport::to_json() const {
  json pc = json::object();
  for (const auto& [cls, aps] : per_class) {
    const double mean = std::accumulate(aps.begin(), aps.end(), 0.0) / static_cast<double>(kNumIouThresholds);
    pc[cls] = {{"ap", aps}, {"ap50", aps[0]}, {"ap50_95", mean}};
  }
  std::vector<double> thresholds;
  for (std::size_t k = 0; k < kNumIouThresholds; ++k) thresholds.push_back(iou_threshold(k));
  return json{{"ap50", ap50},         {"ap50_95", ap50_95},         {"num_classes", classes.size()},
              {"classes", classes},   {"absent_classes", absent},   {"iou_thresholds", thresholds},
              {"per_class", pc}};
}

std::string APReport::to_text() const {
  std::size_t width = 5;
  for (const auto& c : classes) width = std::max(width, c.size());
  std::string out = fmt::format("{:<{}}  {:>8}  {:>8}\n", "class", width, "AP50", "AP50-95");
  for (const auto& cls : classes) {
    const auto& aps = per_class.at(cls);
    const double mean = std::accumulate(aps.begin(), aps.end(), 0.0) / static_cast<double>(kNumIouThresholds);
    out += fmt::format("{:<{}}  {:>8.3f}  {:>8.3f}\n", cls, width, aps[0], mean);
  }
  out += fmt::format("{:<{}}  {:>8.3f}  {:>8.3f}\n", "all", width, ap50, ap50_95);
  if (!absent.empty()) out += "detected but absent from ground truth: " + join(absent, ", ") + "\n";
  return out;
}

long ConfusionMatrix::at(std::string_view gt, std::string_view pred) const {
  auto index = [&](std::string_view name) {
    if (name == "background") return classes.size();
    auto it = std::find(classes.begin(), classes.end(), name);
    if (it == classes.end()) throw ValidationError("confusion matrix has no class " + std::string(name));
    return static_cast<std::size_t>(it - classes.begin());
  };
  return counts[index(gt)][index(pred)];
}

json ConfusionMatrix::to_json() const {
  auto labels = classes;
  labels.push_back("background");
  return json{{"labels", labels}, {"counts", counts}, {"axes", {"ground_truth", "prediction"}}};
}

std::string ConfusionMatrix::to_text() const {
  auto labels = classes;
  labels.push_back("background");
  std::size_t width = 6;
  for (const auto& l : labels) width = std::max(width, l.size());
  std::string out = fmt::format("{:<{}}", "gt \\ pred", width);
  for (const auto& l : labels) out += fmt::format("  {:>{}}", l, width);
  out += '\n';
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out += fmt::format("{:<{}}", labels[i], width);
    for (long v : counts[i]) out += fmt::format("  {:>{}}", v, width);
    out += '\n';
  }
  return out;
}

ConfusionMatrix confusion_matrix(std::span<const Detection> dets, std::span<const GroundTruth> gts, double iou_t,
                                 double conf_t, std::vector<std::string> classes) {
  if (!(iou_t > 0.0 && iou_t < 1.0) || !(conf_t > 0.0 && conf_t < 1.0)) {
    throw std::invalid_argument("confusion_matrix: thresholds must lie in (0, 1)");
  }
  if (classes.empty()) {
    std::set<std::string> seen;
    for (const auto& g : gts) seen.insert(g.class_name);
    for (const auto& d : dets) seen.insert(d.class_name);
    classes.assign(seen.begin(), seen.end());
  }
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < classes.size(); ++i) index.emplace(classes[i], i);
  auto idx = [&](const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw ValidationError("confusion_matrix: class " + name + " not in the class list");
    return it->second;
  };

  ConfusionMatrix cm;
  cm.classes = classes;
  const std::size_t bg = classes.size();
  cm.counts.assign(bg + 1, std::vector<long>(bg + 1, 0));

  std::map<std::string, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> by_image;
  for (std::size_t g = 0; g < gts.size(); ++g) by_image[gts[g].image_id].first.push_back(g);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    if (dets[d].score >= conf_t) by_image[dets[d].image_id].second.push_back(d);
  }

  for (const auto& [image, members] : by_image) {
    const auto& [gi, di] = members;
    struct Pair {
      double iou;
      std::size_t g, d;
    };
    std::vector<Pair> pairs;
    for (std::size_t g : gi) {
      for (std::size_t d : di) {
        const double v = iou(gts[g].box, dets[d].box);
        if (v >= iou_t) pairs.push_back({v, g, d});
      }
    }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });
    std::set<std::size_t> g_used, d_used;
    for (const auto& p : pairs) {
      if (g_used.contains(p.g) || d_used.contains(p.d)) continue;
      g_used.insert(p.g);
      d_used.insert(p.d);
      ++cm.counts[idx(gts[p.g].class_name)][idx(dets[p.d].class_name)];
    }
    for (std::size_t g : gi) {
      if (!g_used.contains(g)) ++cm.counts[idx(gts[g].class_name)][bg];
    }
    for (std::size_t d : di) {
      if (!d_used.contains(d)) ++cm.counts[bg][idx(dets[d].class_name)];
    }
  }
  return cm;
}

namespace {

std::vector<GroundTruth> ground_truth_from_coco(const json& doc) {
  std::map<long, std::string> images;
  std::map<long, std::string> categories;
  try {
    for (const auto& im : doc.at("images")) {
      std::string key = im.contains("image_key") ? im["image_key"].get<std::string>()
                                                 : std::filesystem::path(im.at("file_name").get<std::string>()).stem().string();
      images[im.at("id").get<long>()] = std::move(key);
    }
    for (const auto& c : doc.at("categories")) categories[c.at("id").get<long>()] = c.at("name").get<std::string>();
    std::vector<GroundTruth> out;
    for (const auto& a : doc.at("annotations")) {
      const auto& b = a.at("bbox");
      const double x = b.at(0).get<double>(), y = b.at(1).get<double>();
      const double w = b.at(2).get<double>(), h = b.at(3).get<double>();
      const long image_id = a.at("image_id").get<long>();
      const long cat = a.at("category_id").get<long>();
      if (!images.contains(image_id)) throw ParseError("COCO annotation refers to unknown image " + std::to_string(image_id));
      if (!categories.contains(cat)) throw ParseError("COCO annotation refers to unknown category " + std::to_string(cat));
      out.push_back({images[image_id], {x, y, x + w, y + h}, categories[cat]});
    }
    return out;
  } catch (const json::exception& e) {
    throw ParseError(std::string("COCO document: ") + e.what());
  }
}

}  // namespace

std::vector<GroundTruth> load_ground_truth(const std::filesystem::path& path) {
  const std::string content = read_file(path);
  const auto first = content.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && content[first] == '{') {
    // A COCO document is one object with an "images" key; JSONL rows are not.
    try {
      const json doc = json::parse(content);
      if (doc.is_object() && doc.contains("images")) return ground_truth_from_coco(doc);
    } catch (const json::parse_error&) {
    }
  }
  std::vector<GroundTruth> out;
  for (const auto& a : read_annotations(path)) out.push_back({a.image_id, a.box, a.class_name});
  return out;
}

std::vector<Detection> load_detections(const std::filesystem::path& path) {
  std::vector<Detection> out;
  for (const auto& a : read_annotations(path)) out.push_back({a.image_id, a.box, a.score, a.class_name});
  return out;
}

}  // namespace autodet
