#include "autodet/catalog.hpp"

#include "autodet/common.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <set>

namespace autodet {

std::string_view to_string(Terrain t) {
  switch (t) {
    case Terrain::general: return "general";
    case Terrain::land: return "land";
    case Terrain::water: return "water";
  }
  return "general";
}

Terrain parse_terrain(std::string_view s) {
  const auto n = normalize_phrase(s);
  if (n == "general") return Terrain::general;
  if (n == "land") return Terrain::land;
  if (n == "water") return Terrain::water;
  throw ParseError("unknown terrain tag \"" + std::string(s) + "\"");
}

namespace {

std::vector<std::string> string_list(const nlohmann::json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) return {};
  const auto& v = obj.at(key);
  if (!v.is_array()) throw ParseError(where + ": \"" + key + "\" must be an array of strings");
  std::vector<std::string> out;
  for (const auto& item : v) {
    if (!item.is_string()) throw ParseError(where + ": \"" + key + "\" must be an array of strings");
    out.push_back(item.get<std::string>());
  }
  return out;
}

ClassEntry parse_class(const nlohmann::json& j, std::size_t index) {
  const std::string where = "classes[" + std::to_string(index) + "]";
  if (!j.is_object()) throw ParseError(where + " is not an object");
  if (!j.contains("name") || !j["name"].is_string()) throw ParseError(where + ": missing string \"name\"");

  ClassEntry c;
  c.name = j["name"].get<std::string>();
  c.synonyms = string_list(j, "synonyms", where);
  c.co_occurring = string_list(j, "co_occurring", where);
  if (j.contains("diversify")) {
    if (!j["diversify"].is_boolean()) throw ParseError(where + ": \"diversify\" must be a boolean");
    c.diversify = j["diversify"].get<bool>();
  }
  if (j.contains("terrain")) {
    if (!j["terrain"].is_string()) throw ParseError(where + ": \"terrain\" must be a string");
    c.terrain = parse_terrain(j["terrain"].get<std::string>());
  }
  if (j.contains("instances")) {
    if (!j["instances"].is_array()) throw ParseError(where + ": \"instances\" must be an array");
    for (const auto& ij : j["instances"]) {
      if (!ij.is_object() || !ij.contains("name") || !ij["name"].is_string()) {
        throw ParseError(where + ": instance without a string \"name\"");
      }
      c.instances.push_back({ij["name"].get<std::string>(), string_list(ij, "images", where)});
    }
  }
  return c;
}

}  // namespace

ClassCatalog ClassCatalog::from_json(const nlohmann::json& doc, CatalogOptions options) {
  if (!doc.is_object()) throw ParseError("catalog must be a JSON object");
  ClassCatalog cat;
  cat.options_ = options;
  if (doc.contains("shared_synonyms")) {
    if (!doc["shared_synonyms"].is_boolean()) throw ParseError("\"shared_synonyms\" must be a boolean");
    cat.options_.allow_shared_synonyms = cat.options_.allow_shared_synonyms || doc["shared_synonyms"].get<bool>();
  }
  if (doc.contains("version")) {
    if (!doc["version"].is_string()) throw ParseError("\"version\" must be a string");
    cat.version_ = doc["version"].get<std::string>();
  }
  if (!doc.contains("classes") || !doc["classes"].is_array()) {
    throw ParseError("catalog needs a \"classes\" array");
  }
  std::size_t i = 0;
  for (const auto& cj : doc["classes"]) cat.classes_.push_back(parse_class(cj, i++));

  cat.validate();

  for (std::size_t k = 0; k < cat.classes_.size(); ++k) {
    cat.by_name_.emplace(normalize_phrase(cat.classes_[k].name), k);
    for (const auto& s : cat.classes_[k].synonyms) cat.by_synonym_[normalize_phrase(s)].push_back(k);
  }
  return cat;
}

void ClassCatalog::validate() const {
  if (classes_.empty()) throw ValidationError("empty catalog");

  std::map<std::string, std::string> names;
  for (const auto& c : classes_) {
    const auto key = normalize_phrase(c.name);
    if (key.empty()) throw ValidationError("class with empty name");
    if (auto [it, fresh] = names.emplace(key, c.name); !fresh) {
      throw ValidationError("duplicate class name \"" + c.name + "\"");
    }
  }

  std::map<std::string, std::string> synonym_owner;
  for (const auto& c : classes_) {
    std::set<std::string> seen;
    for (const auto& s : c.synonyms) {
      const auto key = normalize_phrase(s);
      if (key.empty()) throw ValidationError("class \"" + c.name + "\" has an empty synonym");
      if (key == normalize_phrase(c.name)) {
        throw ValidationError("class \"" + c.name + "\" lists itself as a synonym");
      }
      if (!seen.insert(key).second) {
        throw ValidationError("class \"" + c.name + "\" repeats synonym \"" + s + "\"");
      }
      if (options_.allow_shared_synonyms) continue;
      if (auto it = names.find(key); it != names.end()) {
        throw ValidationError("synonym \"" + s + "\" of class \"" + c.name + "\" is also the class \"" +
                              it->second + "\"");
      }
      if (auto [it, fresh] = synonym_owner.emplace(key, c.name); !fresh) {
        throw ValidationError("synonym \"" + s + "\" claimed by both \"" + it->second + "\" and \"" +
                              c.name + "\"");
      }
    }
    for (const auto& co : c.co_occurring) {
      const auto key = normalize_phrase(co);
      if (!names.contains(key)) {
        throw ValidationError("class \"" + c.name + "\" lists unknown co-occurring class \"" + co + "\"");
      }
      if (key == normalize_phrase(c.name)) {
        throw ValidationError("class \"" + c.name + "\" lists itself as co-occurring");
      }
    }
    for (const auto& inst : c.instances) {
      if (inst.name.empty()) throw ValidationError("class \"" + c.name + "\" has an unnamed instance");
      if (inst.images.size() < 3) {
        throw ValidationError("instance \"" + inst.name + "\" of class \"" + c.name + "\" has " +
                              std::to_string(inst.images.size()) + " images; at least 3 are required");
      }
    }
  }
}

nlohmann::json ClassCatalog::to_json() const {
  nlohmann::json doc;
  doc["version"] = version_;
  if (options_.allow_shared_synonyms) doc["shared_synonyms"] = true;
  auto& arr = doc["classes"] = nlohmann::json::array();
  for (const auto& c : classes_) {
    nlohmann::json cj;
    cj["name"] = c.name;
    cj["synonyms"] = c.synonyms;
    cj["co_occurring"] = c.co_occurring;
    cj["diversify"] = c.diversify;
    if (c.terrain != Terrain::general) cj["terrain"] = std::string(to_string(c.terrain));
    auto& insts = cj["instances"] = nlohmann::json::array();
    for (const auto& inst : c.instances) insts.push_back({{"name", inst.name}, {"images", inst.images}});
    arr.push_back(std::move(cj));
  }
  return doc;
}

const ClassEntry* ClassCatalog::find(std::string_view name) const {
  auto it = by_name_.find(normalize_phrase(name));
  return it == by_name_.end() ? nullptr : &classes_[it->second];
}

const ClassEntry& ClassCatalog::at(std::string_view name) const {
  if (const auto* c = find(name)) return *c;
  throw ValidationError("unknown class \"" + std::string(name) + "\"");
}

std::optional<std::size_t> ClassCatalog::index_of(std::string_view name) const {
  auto it = by_name_.find(normalize_phrase(name));
  if (it == by_name_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::string> ClassCatalog::resolve(std::string_view phrase) const {
  const auto key = normalize_phrase(phrase);
  if (auto it = by_name_.find(key); it != by_name_.end()) return classes_[it->second].name;
  if (auto it = by_synonym_.find(key); it != by_synonym_.end() && it->second.size() == 1) {
    return classes_[it->second.front()].name;
  }
  return std::nullopt;
}

std::vector<std::string> ClassCatalog::classes_for_phrase(std::string_view phrase) const {
  const auto key = normalize_phrase(phrase);
  std::vector<std::string> out;
  if (auto it = by_name_.find(key); it != by_name_.end()) out.push_back(classes_[it->second].name);
  if (auto it = by_synonym_.find(key); it != by_synonym_.end()) {
    for (auto k : it->second) {
      if (std::find(out.begin(), out.end(), classes_[k].name) == out.end()) out.push_back(classes_[k].name);
    }
  }
  return out;
}

ClassCatalog load_catalog(const std::filesystem::path& path, CatalogOptions options) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return ClassCatalog::from_json(doc, options);
}

void save_catalog(const ClassCatalog& catalog, const std::filesystem::path& path) {
  write_file(path, catalog.to_json().dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Prompt templates

namespace {

bool is_ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool is_ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

// Calls on_text(literal) and on_placeholder(name) in order.
template <typename OnText, typename OnPlaceholder>
void scan_template(std::string_view text, OnText on_text, OnPlaceholder on_placeholder) {
  std::size_t i = 0;
  std::size_t literal_start = 0;
  while (i < text.size()) {
    if (text[i] == '{' && i + 1 < text.size() && is_ident_start(text[i + 1])) {
      std::size_t j = i + 1;
      while (j < text.size() && is_ident_char(text[j])) ++j;
      if (j < text.size() && text[j] == '}') {
        on_text(text.substr(literal_start, i - literal_start));
        on_placeholder(text.substr(i + 1, j - i - 1));
        i = j + 1;
        literal_start = i;
        continue;
      }
    }
    ++i;
  }
  on_text(text.substr(literal_start));
}

constexpr std::string_view kReviewSystem =
    "You are an AI bounding box annotation evaluator. Your task is to evaluate the correctness of bounding "
    "box annotations for given images and target objects. The bounding boxes are directly drawn as colored "
    "rectangles on top of the image. The class label is shown at the top-left corner of the corresponding "
    "bounding box. You will evaluate each bounding box annotation based on three criteria: precision, recall, "
    "and fit.";

constexpr std::string_view kReviewTask =
    "In this image, the target object for bounding box annotation is {target}. There may also be "
    "{secondary_target}. Each of the existing {target}s and {secondary_target}s should be annotated by a "
    "bounding box drawn as a colored rectangle. The goal is to accurately localize all {target}s and "
    "{secondary_target}s using these bounding boxes. Your task is to evaluate whether all bounding boxes are "
    "correct.";

constexpr std::string_view kReviewQuestions =
    "Correctness should be assessed in terms of precision, recall, and fit. Specifically, consider the "
    "following questions before making your judgment:\n"
    "1. Does each bounding box perfectly enclose one single target object?\n"
    "2. Are all target objects localized by a bounding box?\n"
    "3. Is each bounding box neither too loose nor too tight?";

constexpr std::string_view kReviewOutput =
    "Please provide your evaluation in the following JSON format:\n"
    "```json{\n"
    "\"Precision\": \"Yes/No answer to question 1\",\n"
    "\"Recall\": \"Yes/No answer to question 2\",\n"
    "\"Fit\": \"Yes/No answer to question 3\"\n"
    "}\n"
    "Please think step-by-step and be sure to provide the correct answers. Very briefly explain yourself "
    "before answering the question.";

constexpr std::string_view kReviewRelaxation =
    "Before finalizing your evaluation, please consider the following suggestions:\n"
    "1. For question 1 (Precision), if an object is occluded, the bounding box should be inferred based on a "
    "reasonable estimation of the object's size.\n"
    "2. For question 2 (Recall), it's fairly normal to have only one object in the dataset.\n"
    "3. For question 3 (Fit), don't be too harsh when bounding box edges just slightly cut off the object or "
    "just enclose a little bit of the outside area.";

constexpr std::string_view kReviewReminder =
    "Always consider my suggestions before answering questions. But the suggestions are not strict rules. You "
    "can also use your own judgment. The most important thing is to answer the three questions correctly.";

constexpr std::array<std::string_view, 5> kReviewSections = {
    kReviewTask, kReviewQuestions, kReviewOutput, kReviewRelaxation, kReviewReminder};

constexpr std::string_view kPhotorealism =
    "Is this image suitable as training data object detection for {target}? Answer YES or NO.\n"
    "Does the main object in the image look like an authentic {target}? Answer YES or NO.";

std::string joined_review_user() {
  std::string out;
  for (std::size_t i = 0; i < kReviewSections.size(); ++i) {
    if (i) out += "\n\n";
    out += kReviewSections[i];
  }
  return out;
}

}  // namespace

std::vector<std::string> PromptTemplate::placeholders() const {
  std::vector<std::string> out;
  scan_template(
      text, [](std::string_view) {},
      [&](std::string_view name) {
        if (std::find(out.begin(), out.end(), name) == out.end()) out.emplace_back(name);
      });
  return out;
}

std::string render_prompt(const PromptTemplate& tmpl, const Bindings& bindings) {
  std::string out;
  scan_template(
      tmpl.text, [&](std::string_view lit) { out.append(lit); },
      [&](std::string_view name) {
        auto it = bindings.find(name);
        if (it == bindings.end()) {
          throw ValidationError("prompt placeholder {" + std::string(name) + "} is not bound");
        }
        out.append(it->second);
      });
  if (trim(out).empty()) throw ValidationError("prompt rendered to empty text");
  return out;
}

const PromptTemplate& builtin_template(PromptRole role) {
  static const std::array<PromptTemplate, 8> kTemplates = {
      PromptTemplate{PromptRole::class_prior, "a photo of a {class_name}"},
      PromptTemplate{PromptRole::instance_train, "a photo of a <{instance_name}> {class_name}"},
      PromptTemplate{PromptRole::detect_original, "{class_name}"},
      PromptTemplate{PromptRole::detect_synonym, "{synonym}"},
      PromptTemplate{PromptRole::detect_cooccurring, "{names}"},
      PromptTemplate{PromptRole::review_system, std::string(kReviewSystem)},
      PromptTemplate{PromptRole::review_user, joined_review_user()},
      PromptTemplate{PromptRole::photorealism, std::string(kPhotorealism)},
  };
  return kTemplates[static_cast<std::size_t>(role)];
}

std::span<const std::string_view> review_user_sections() { return kReviewSections; }

}  // namespace autodet
