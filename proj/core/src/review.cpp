#include "autodet/review.hpp"

#include "autodet/backends/client.hpp"
#include "autodet/common.hpp"

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <mutex>
#include <thread>

namespace autodet {

using nlohmann::json;

const std::array<cv::Scalar, 12>& overlay_palette() {
  static const std::array<cv::Scalar, 12> palette = {{
      {56, 56, 255},
      {151, 157, 255},
      {31, 112, 255},
      {29, 178, 255},
      {49, 210, 207},
      {10, 249, 72},
      {23, 204, 146},
      {134, 219, 61},
      {211, 188, 0},
      {255, 128, 0},
      {236, 24, 0},
      {255, 56, 132},
  }};
  return palette;
}

json OverlayImage::sidecar() const {
  json boxes = json::array();
  for (const auto& a : drawn) {
    boxes.push_back({{"class", a.class_name},
                     {"score", a.score},
                     {"box", {a.box.x1 * scale, a.box.y1 * scale, a.box.x2 * scale, a.box.y2 * scale}}});
  }
  return json{{"source_id", source_id}, {"scale", scale}, {"boxes", boxes}};
}

OverlayImage render_overlay(const cv::Mat& image, const std::string& source_id,
                            std::span<const Annotation> annotations) {
  if (image.empty()) throw ParseError("render_overlay: empty image " + source_id);
  OverlayImage out;
  out.source_id = source_id;
  out.drawn.assign(annotations.begin(), annotations.end());

  const int long_side = std::max(image.cols, image.rows);
  const int target = std::min(kOverlayLongSide, long_side);
  out.scale = static_cast<double>(target) / long_side;
  if (target == long_side) {
    out.pixels = image.clone();
  } else {
    const cv::Size size = image.cols >= image.rows
                              ? cv::Size(target, static_cast<int>(std::lround(image.rows * out.scale)))
                              : cv::Size(static_cast<int>(std::lround(image.cols * out.scale)), target);
    cv::resize(image, out.pixels, size, 0, 0, cv::INTER_AREA);
  }
  if (out.pixels.channels() == 1) cv::cvtColor(out.pixels, out.pixels, cv::COLOR_GRAY2BGR);
  if (out.pixels.channels() == 4) cv::cvtColor(out.pixels, out.pixels, cv::COLOR_BGRA2BGR);

  const auto& palette = overlay_palette();
  for (std::size_t i = 0; i < out.drawn.size(); ++i) {
    const auto& a = out.drawn[i];
    const cv::Scalar color = palette[i % palette.size()];
    const cv::Point tl(static_cast<int>(std::lround(a.box.x1 * out.scale)),
                       static_cast<int>(std::lround(a.box.y1 * out.scale)));
    const cv::Point br(static_cast<int>(std::lround(a.box.x2 * out.scale)),
                       static_cast<int>(std::lround(a.box.y2 * out.scale)));
    cv::rectangle(out.pixels, tl, br, color, 2, cv::LINE_8);

    const std::string label = fmt::format("{} {:.2f}", a.class_name, a.score);
    int baseline = 0;
    const cv::Size text = cv::getTextSize(label, cv::FONT_HERSHEY_SIMPLEX, 0.4, 1, &baseline);
    const int top = tl.y - text.height - baseline >= 0 ? tl.y - text.height - baseline : tl.y;
    cv::rectangle(out.pixels, cv::Point(tl.x, top), cv::Point(tl.x + text.width, top + text.height + baseline), color,
                  cv::FILLED);
    cv::putText(out.pixels, label, cv::Point(tl.x, top + text.height), cv::FONT_HERSHEY_SIMPLEX, 0.4,
                cv::Scalar(255, 255, 255), 1, cv::LINE_8);
  }
  return out;
}

OverlayImage render_overlay(const std::filesystem::path& image, const std::string& source_id,
                            std::span<const Annotation> annotations) {
  cv::Mat img = cv::imread(image.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw ParseError("cannot decode image " + image.string());
  return render_overlay(img, source_id, annotations);
}

void write_overlay(const OverlayImage& overlay, const std::filesystem::path& png) {
  std::filesystem::create_directories(png.parent_path());
  if (!cv::imwrite(png.string(), overlay.pixels)) throw Error("cannot write " + png.string());
  write_file(png.string() + ".json", overlay.sidecar().dump(2) + "\n");
}

bool select_for_review(std::span<const Annotation> annotations) {
  if (annotations.size() > 1) return true;
  return std::any_of(annotations.begin(), annotations.end(), [](const Annotation& a) { return a.score < 0.5; });
}

ReviewPrompts build_review_prompts(const ImageRecord& image, const ClassCatalog& catalog) {
  const ClassEntry& primary = catalog.at(image.primary_class());
  std::vector<std::string> secondary;
  for (const auto& name : primary.co_occurring) secondary.push_back(catalog.at(name).name);
  Bindings b{{"target", primary.name},
             {"secondary_target", secondary.empty() ? std::string("no secondary target") : join(secondary, ", ")}};
  return {render_prompt(builtin_template(PromptRole::review_system), {}),
          render_prompt(builtin_template(PromptRole::review_user), b)};
}

ReviewBundle build_review_request(const cv::Mat& image, const ImageRecord& record,
                                  std::span<const Annotation> annotations, const ClassCatalog& catalog) {
  return {render_overlay(image, record.id, annotations), build_review_prompts(record, catalog)};
}

std::string build_photorealism_prompt(const std::string& class_name) {
  return render_prompt(builtin_template(PromptRole::photorealism), {{"target", class_name}});
}

// ---------------------------------------------------------------------------

namespace {

// Words made of letters, lower-cased.
std::vector<std::string> words(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (std::isalpha(static_cast<unsigned char>(c))) {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

bool yes_no(const std::string& key, const json& value) {
  if (!value.is_string()) throw VerdictParseError("value of \"" + key + "\" is not a string");
  const auto w = words(value.get<std::string>());
  if (w.empty()) throw VerdictParseError("value of \"" + key + "\" is empty");
  const bool has_yes = std::find(w.begin(), w.end(), "yes") != w.end();
  const bool has_no = std::find(w.begin(), w.end(), "no") != w.end();
  if (has_yes && has_no) throw VerdictParseError("value of \"" + key + "\" answers both yes and no");
  if (w.front() == "yes") return true;
  if (w.front() == "no") return false;
  throw VerdictParseError("value of \"" + key + "\" is not a yes/no answer");
}

// End of the balanced object starting at `open`, skipping string contents.
std::size_t object_end(std::string_view s, std::size_t open) {
  int depth = 0;
  bool in_string = false;
  for (std::size_t i = open; i < s.size(); ++i) {
    const char c = s[i];
    if (in_string) {
      if (c == '\\') {
        ++i;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') {
      in_string = true;
    } else if (c == '{') {
      ++depth;
    } else if (c == '}' && --depth == 0) {
      return i;
    }
  }
  return std::string_view::npos;
}

}  // namespace

ReviewVerdict parse_verdict(std::string_view raw_text) {
  static constexpr std::array<std::string_view, 3> kKeys = {"precision", "recall", "fit"};
  for (std::size_t open = raw_text.find('{'); open != std::string_view::npos; open = raw_text.find('{', open + 1)) {
    const std::size_t close = object_end(raw_text, open);
    if (close == std::string_view::npos) continue;
    json obj;
    try {
      obj = json::parse(raw_text.substr(open, close - open + 1));
    } catch (const json::parse_error&) {
      continue;
    }
    if (!obj.is_object()) continue;

    std::map<std::string, std::vector<const json*>> found;
    for (const auto& [k, v] : obj.items()) {
      const auto lk = to_lower(trim(k));
      if (std::find(kKeys.begin(), kKeys.end(), lk) != kKeys.end()) found[lk].push_back(&v);
    }
    if (found.empty()) continue;

    std::array<bool, 3> answers{};
    for (std::size_t i = 0; i < kKeys.size(); ++i) {
      const std::string key(kKeys[i]);
      auto it = found.find(key);
      if (it == found.end()) throw VerdictParseError("verdict object lacks \"" + key + "\"");
      answers[i] = yes_no(key, *it->second.front());
      for (const json* dup : it->second) {
        if (yes_no(key, *dup) != answers[i]) throw VerdictParseError("conflicting answers for \"" + key + "\"");
      }
    }
    ReviewVerdict v;
    v.precision = answers[0];
    v.recall = answers[1];
    v.fit = answers[2];
    v.raw_text = std::string(raw_text);
    return v;
  }
  throw VerdictParseError("no verdict object found");
}

PhotorealismVerdict parse_photorealism(std::string_view raw_text) {
  std::vector<bool> answers;
  for (const auto& line : split(raw_text, "\n")) {
    const auto w = words(line);
    std::size_t i = 0;
    // Tolerate list markers such as "1." or "A:" and a leading "answer".
    while (i < w.size() && i < 2 && w[i] != "yes" && w[i] != "no" && (w[i].size() == 1 || w[i] == "answer")) ++i;
    if (i < w.size() && (w[i] == "yes" || w[i] == "no")) answers.push_back(w[i] == "yes");
    if (answers.size() == 2) break;
  }
  if (answers.size() < 2) {
    throw VerdictParseError("expected two YES/NO answers, found " + std::to_string(answers.size()));
  }
  PhotorealismVerdict v;
  v.suitable = answers[0];
  v.authentic = answers[1];
  v.raw_text = std::string(raw_text);
  return v;
}

bool gate_pseudo_labels(const ReviewVerdict& v) { return v.precision && v.recall && v.fit; }

bool gate_photorealism(const PhotorealismVerdict& v) { return v.suitable && v.authentic; }

AgreementMatrix agreement_matrix(const std::map<std::string, bool>& a, const std::map<std::string, bool>& b) {
  if (a.empty()) throw ValidationError("agreement_matrix: no verdicts");
  AgreementMatrix m;
  for (const auto& [id, keep_a] : a) {
    auto it = b.find(id);
    if (it == b.end()) throw ValidationError("agreement_matrix: image " + id + " reviewed only by the first reviewer");
    const bool keep_b = it->second;
    if (keep_a && keep_b) ++m.keep_keep;
    if (keep_a && !keep_b) ++m.keep_drop;
    if (!keep_a && keep_b) ++m.drop_keep;
    if (!keep_a && !keep_b) ++m.drop_drop;
  }
  if (b.size() != a.size()) throw ValidationError("agreement_matrix: image sets differ");
  m.agreement = static_cast<double>(m.keep_keep + m.drop_drop) / static_cast<double>(a.size());
  return m;
}

AgreementMatrix agreement_matrix(std::span<const ReviewVerdict> a, std::span<const ReviewVerdict> b) {
  auto decisions = [](std::span<const ReviewVerdict> vs) {
    std::map<std::string, bool> out;
    for (const auto& v : vs) {
      if (!out.emplace(v.image_id, gate_pseudo_labels(v)).second) {
        throw ValidationError("agreement_matrix: image " + v.image_id + " reviewed twice");
      }
    }
    return out;
  };
  return agreement_matrix(decisions(a), decisions(b));
}

// ---------------------------------------------------------------------------

json ReviewOutcome::to_json() const {
  json j{{"image_id", image_id}, {"selected", selected}, {"kept", kept}};
  if (verdict) {
    j["reviewer"] = verdict->reviewer;
    j["precision"] = verdict->precision;
    j["recall"] = verdict->recall;
    j["fit"] = verdict->fit;
    j["raw_text"] = verdict->raw_text;
  }
  if (!error.empty()) j["error"] = error;
  return j;
}

ReviewOutcome ReviewOutcome::from_json(const json& j) {
  ReviewOutcome o;
  try {
    o.image_id = j.at("image_id").get<std::string>();
    o.selected = j.value("selected", false);
    o.kept = j.at("kept").get<bool>();
    o.error = j.value("error", std::string());
    if (j.contains("precision")) {
      ReviewVerdict v;
      v.image_id = o.image_id;
      v.reviewer = j.value("reviewer", std::string());
      v.precision = j.at("precision").get<bool>();
      v.recall = j.at("recall").get<bool>();
      v.fit = j.at("fit").get<bool>();
      v.raw_text = j.value("raw_text", std::string());
      o.verdict = std::move(v);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("review outcome: ") + e.what());
  }
  return o;
}

std::vector<ReviewOutcome> review_images(std::span<const ImageRecord> images,
                                         const std::map<std::string, std::vector<Annotation>>& finals,
                                         const std::function<std::filesystem::path(const ImageRecord&)>& image_path,
                                         const ClassCatalog& catalog, backends::BackendClient* reviewer,
                                         const ReviewPassOptions& options) {
  std::vector<const ImageRecord*> todo;
  for (const auto& im : images) {
    auto it = finals.find(im.id);
    if (it != finals.end() && !it->second.empty()) todo.push_back(&im);
  }
  std::sort(todo.begin(), todo.end(), [](const ImageRecord* a, const ImageRecord* b) { return a->id < b->id; });
  if (options.enabled && reviewer == nullptr) throw ValidationError("review enabled without a review endpoint");

  std::vector<ReviewOutcome> out(todo.size());
  auto review_one = [&](std::size_t i) {
    const ImageRecord& im = *todo[i];
    const auto& anns = finals.at(im.id);
    ReviewOutcome& o = out[i];
    o.image_id = im.id;
    if (!options.enabled || !select_for_review(anns)) {
      o.kept = true;
      return;
    }
    o.selected = true;
    const auto overlay_png = options.overlay_dir / (im.id + ".png");
    try {
      const auto overlay = render_overlay(image_path(im), im.id, anns);
      write_overlay(overlay, overlay_png);
      const auto prompts = build_review_prompts(im, catalog);
      backends::ReviewRequest req;
      req.request_id = im.id;
      req.kind = backends::ReviewKind::pseudo_label;
      req.image_ref = std::filesystem::absolute(overlay_png).string();
      req.system_prompt = prompts.system;
      req.user_prompt = prompts.user;
      const auto res = reviewer->review(req);
      ReviewVerdict v = parse_verdict(res.text);
      v.image_id = im.id;
      v.reviewer = res.reviewer;
      o.kept = gate_pseudo_labels(v);
      o.verdict = std::move(v);
    } catch (const Error& e) {
      spdlog::warn("{} needs attention: {}", im.id, e.what());
      o.error = e.what();
      o.kept = false;
    }
  };

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < todo.size(); i = next++) review_one(i);
  };
  const unsigned n = std::clamp<unsigned>(options.parallelism, 1, static_cast<unsigned>(std::max<std::size_t>(1, todo.size())));
  std::vector<std::jthread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  pool.clear();
  return out;
}

}  // namespace autodet
