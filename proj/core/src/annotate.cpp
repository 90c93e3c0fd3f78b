#include "autodet/annotate.hpp"

#include "autodet/backends/client.hpp"
#include "autodet/common.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>
#include <tuple>

namespace autodet {

using nlohmann::json;

std::string_view to_string(PromptKind k) {
  switch (k) {
    case PromptKind::original: return "original";
    case PromptKind::cooccurring: return "cooccurring";
    case PromptKind::synonym: return "synonym";
    case PromptKind::synonym_cooccurring: return "synonym_cooccurring";
  }
  return "original";
}

PromptKind parse_prompt_kind(std::string_view s) {
  if (s == "original") return PromptKind::original;
  if (s == "cooccurring") return PromptKind::cooccurring;
  if (s == "synonym") return PromptKind::synonym;
  if (s == "synonym_cooccurring") return PromptKind::synonym_cooccurring;
  throw ParseError("unknown prompt kind \"" + std::string(s) + "\"");
}

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::raw: return "raw";
    case Stage::filtered: return "filtered";
    case Stage::final: return "final";
    case Stage::approved: return "approved";
    case Stage::rejected: return "rejected";
  }
  return "raw";
}

Stage parse_stage(std::string_view s) {
  if (s == "raw") return Stage::raw;
  if (s == "filtered") return Stage::filtered;
  if (s == "final") return Stage::final;
  if (s == "approved") return Stage::approved;
  if (s == "rejected") return Stage::rejected;
  throw ParseError("unknown annotation stage \"" + std::string(s) + "\"");
}

void Annotation::advance(Stage next) {
  const bool ok = (stage == Stage::raw && next == Stage::filtered) ||
                  (stage == Stage::filtered && next == Stage::final) ||
                  (stage == Stage::final && (next == Stage::approved || next == Stage::rejected));
  if (!ok) {
    throw ValidationError(fmt::format("annotation on {}: cannot move from {} to {}", image_id, to_string(stage),
                                      to_string(next)));
  }
  stage = next;
}

Annotation to_annotation(const RawAnnotation& raw) {
  return {raw.image_id, raw.box, raw.score, raw.phrase, raw.query_class, Stage::raw, raw.prompt_kind, raw.prompt};
}

RawAnnotation to_raw(const Annotation& a) {
  return {a.image_id, a.box, a.score, a.phrase, a.prompt_kind, a.prompt, a.class_name};
}

std::size_t expected_prompt_count(const ClassEntry& entry) {
  const std::size_t co = entry.co_occurring.empty() ? 0 : 1;
  return 1 + co + entry.synonyms.size() * (1 + co);
}

std::vector<DetectPrompt> build_prompt_set(std::string_view class_name, const ClassCatalog& catalog) {
  const ClassEntry& entry = catalog.at(class_name);

  std::vector<const ClassEntry*> partners;
  for (const auto& name : entry.co_occurring) partners.push_back(&catalog.at(name));
  std::sort(partners.begin(), partners.end(), [&](const ClassEntry* a, const ClassEntry* b) {
    return *catalog.index_of(a->name) < *catalog.index_of(b->name);
  });

  auto make = [&](const std::string& head, PromptKind kind, bool with_partners) {
    DetectPrompt p;
    p.kind = kind;
    p.query_class = entry.name;
    p.text = head;
    p.decode_map[normalize_phrase(head)] = entry.name;
    if (with_partners) {
      for (const auto* other : partners) {
        p.text += kPhraseDelimiter;
        p.text += other->name;
        p.decode_map.emplace(normalize_phrase(other->name), other->name);
      }
    }
    return p;
  };

  const bool co = !partners.empty();
  std::vector<DetectPrompt> out;
  out.push_back(make(entry.name, PromptKind::original, false));
  if (co) out.push_back(make(entry.name, PromptKind::cooccurring, true));
  for (const auto& syn : entry.synonyms) {
    out.push_back(make(syn, PromptKind::synonym, false));
    if (co) out.push_back(make(syn, PromptKind::synonym_cooccurring, true));
  }
  return out;
}

std::optional<std::string> decode_phrase(const DetectPrompt& prompt, std::string_view phrase) {
  const std::string p = normalize_phrase(phrase);
  if (p.empty()) return std::nullopt;
  if (auto it = prompt.decode_map.find(p); it != prompt.decode_map.end()) return it->second;

  std::size_t best_len = 0;
  std::optional<std::string> best;
  bool tied = false;
  for (const auto& [key, cls] : prompt.decode_map) {
    if (key.find(p) == std::string::npos && p.find(key) == std::string::npos) continue;
    if (key.size() > best_len) {
      best_len = key.size();
      best = cls;
      tied = false;
    } else if (key.size() == best_len && best != cls) {
      tied = true;
    }
  }
  if (tied) return std::nullopt;
  return best;
}

std::vector<RawAnnotation> annotate_image(const ImageRecord& image, const std::string& image_ref,
                                          const ClassCatalog& catalog, backends::BackendClient& detector,
                                          Thresholds thresholds) {
  std::vector<std::string> classes;
  for (const auto& name : image.class_names) {
    const auto& canonical = catalog.at(name).name;
    if (std::find(classes.begin(), classes.end(), canonical) == classes.end()) classes.push_back(canonical);
  }

  std::vector<RawAnnotation> out;
  std::size_t n = 0;
  for (const auto& cls : classes) {
    for (const auto& prompt : build_prompt_set(cls, catalog)) {
      backends::DetectRequest req;
      req.request_id = image.id + "#" + std::to_string(n++);
      req.image_ref = image_ref;
      req.prompt = prompt.text;
      req.box_threshold = thresholds.box;
      req.text_threshold = thresholds.text;
      for (const auto& d : detector.detect(req).detections) {
        const Box box = clamp_to(d.box, image.width, image.height);
        if (box.area() <= 0.0) {
          spdlog::debug("{}: detection outside the frame dropped", image.id);
          continue;
        }
        out.push_back({image.id, box, d.score, d.phrase, prompt.kind, prompt.text, cls});
      }
    }
  }
  return out;
}

std::vector<std::vector<RawAnnotation>> annotate_images(
    std::span<const ImageRecord> images, const std::function<std::string(const ImageRecord&)>& image_ref,
    const ClassCatalog& catalog, backends::BackendClient& detector, Thresholds thresholds, unsigned parallelism) {
  std::vector<std::vector<RawAnnotation>> out(images.size());
  parallelism = std::clamp<unsigned>(parallelism, 1, static_cast<unsigned>(std::max<std::size_t>(1, images.size())));

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < images.size(); i = next++) {
      try {
        out[i] = annotate_image(images[i], image_ref(images[i]), catalog, detector, thresholds);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = images.size();
      }
    }
  };
  std::vector<std::jthread> pool;
  for (unsigned t = 1; t < parallelism; ++t) pool.emplace_back(worker);
  worker();
  pool.clear();
  if (failure) std::rethrow_exception(failure);
  return out;
}

FilterResult filter_and_nms_detailed(std::span<const RawAnnotation> raw, const ClassCatalog& catalog,
                                     double score_thresh, double iou_thresh) {
  FilterResult result;
  if (raw.empty()) return result;
  for (const auto& r : raw) {
    if (r.image_id != raw.front().image_id) {
      throw std::invalid_argument("filter_and_nms: annotations from several images (" + raw.front().image_id +
                                  ", " + r.image_id + ")");
    }
  }

  std::map<std::pair<std::string, std::string>, DetectPrompt> prompts;  // (query class, text) -> prompt
  auto prompt_for = [&](const RawAnnotation& r) -> const DetectPrompt* {
    const auto key = std::make_pair(r.query_class, r.prompt);
    if (auto it = prompts.find(key); it != prompts.end()) return &it->second;
    for (auto& p : build_prompt_set(r.query_class, catalog)) {
      prompts.emplace(std::make_pair(p.query_class, p.text), std::move(p));
    }
    auto it = prompts.find(key);
    return it == prompts.end() ? nullptr : &it->second;
  };

  const bool single = raw.size() == 1;
  for (const auto& r : raw) {
    if (!single && !(r.score >= score_thresh)) continue;
    std::optional<std::string> cls;
    if (const auto* p = prompt_for(r)) {
      cls = decode_phrase(*p, r.phrase);
    } else {
      cls = catalog.resolve(r.phrase);
    }
    if (!cls) {
      spdlog::warn("{}: phrase \"{}\" from prompt \"{}\" matches no class, dropped", r.image_id, r.phrase, r.prompt);
      ++result.unresolved;
      continue;
    }
    result.filtered.push_back({r.image_id, r.box, r.score, r.phrase, *cls, Stage::filtered, r.prompt_kind, r.prompt});
  }

  auto key = [](const Annotation& a) {
    return std::make_tuple(-a.score, a.box, a.prompt_kind, std::cref(a.class_name), std::cref(a.phrase),
                           std::cref(a.prompt));
  };
  std::sort(result.filtered.begin(), result.filtered.end(),
            [&](const Annotation& a, const Annotation& b) { return key(a) < key(b); });

  std::vector<ScoredBox> boxes;
  boxes.reserve(result.filtered.size());
  for (const auto& a : result.filtered) boxes.push_back({a.box, a.score});
  for (std::size_t i : nms_class_agnostic(boxes, iou_thresh)) {
    Annotation a = result.filtered[i];
    a.advance(Stage::final);
    result.final.push_back(std::move(a));
  }
  return result;
}

std::vector<Annotation> filter_and_nms(std::span<const RawAnnotation> raw, const ClassCatalog& catalog,
                                       double score_thresh, double iou_thresh) {
  return filter_and_nms_detailed(raw, catalog, score_thresh, iou_thresh).final;
}

void to_json(json& j, const Annotation& a) {
  j = json{{"image_id", a.image_id}, {"x1", a.box.x1},       {"y1", a.box.y1},
           {"x2", a.box.x2},         {"y2", a.box.y2},       {"score", a.score},
           {"phrase", a.phrase},     {"class", a.class_name}, {"stage", std::string(to_string(a.stage))},
           {"prompt_kind", std::string(to_string(a.prompt_kind))}};
  if (!a.prompt.empty()) j["prompt"] = a.prompt;
}

void from_json(const json& j, Annotation& a) {
  try {
    a.image_id = j.at("image_id").get<std::string>();
    a.box = {j.at("x1").get<double>(), j.at("y1").get<double>(), j.at("x2").get<double>(), j.at("y2").get<double>()};
    a.score = j.at("score").get<double>();
    a.phrase = j.value("phrase", std::string());
    a.class_name = j.at("class").get<std::string>();
    a.stage = parse_stage(j.value("stage", std::string("final")));
    a.prompt_kind = parse_prompt_kind(j.value("prompt_kind", std::string("original")));
    a.prompt = j.value("prompt", std::string());
  } catch (const json::exception& e) {
    throw ParseError(std::string("annotation record: ") + e.what());
  }
  if (!a.box.valid()) throw ParseError("annotation record on " + a.image_id + ": invalid box");
}

std::vector<Annotation> read_annotations(const std::filesystem::path& path) {
  std::vector<Annotation> out;
  for (const auto& row : read_jsonl(path)) out.push_back(row.get<Annotation>());
  return out;
}

void write_annotations(const std::filesystem::path& path, std::span<const Annotation> annotations) {
  std::vector<json> rows(annotations.begin(), annotations.end());
  write_jsonl(path, rows);
}

StageAccounting stage_accounting(std::span<const Annotation> store) {
  struct Acc {
    std::size_t n = 0;
    double sum = 0.0;
    void add(double s) {
      ++n;
      sum += s;
    }
  };
  Acc base, raw, filtered, final_;
  for (const auto& a : store) {
    switch (a.stage) {
      case Stage::raw:
        raw.add(a.score);
        if (a.prompt_kind == PromptKind::original || a.prompt_kind == PromptKind::cooccurring) base.add(a.score);
        break;
      case Stage::filtered: filtered.add(a.score); break;
      case Stage::final:
      case Stage::approved:
      case Stage::rejected: final_.add(a.score); break;
    }
  }
  auto row = [](std::string name, const Acc& acc) {
    StageRow r{std::move(name), acc.n, std::nullopt};
    if (acc.n > 0) r.mean_score = acc.sum / static_cast<double>(acc.n);
    return r;
  };
  return {{row("original/co-occurring", base), row("+synonym/co-occurring", raw), row("+filtering", filtered),
           row("+NMS", final_)}};
}

json StageAccounting::to_json() const {
  json arr = json::array();
  for (const auto& r : rows) {
    arr.push_back({{"stage", r.name}, {"count", r.count}, {"mean_score", r.mean_score ? json(*r.mean_score) : json()}});
  }
  return arr;
}

std::string StageAccounting::to_text() const {
  std::string out = fmt::format("{:<24} {:>10} {:>10}\n", "stage", "count", "mean");
  for (const auto& r : rows) {
    out += fmt::format("{:<24} {:>10} {:>10}\n", r.name, r.count,
                       r.mean_score ? fmt::format("{:.2f}", *r.mean_score) : std::string("-"));
  }
  return out;
}

}  // namespace autodet
