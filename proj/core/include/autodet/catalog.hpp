#pragma once

#include <nlohmann/json.hpp>

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace autodet {

/// Which scene family of generation prompts a class receives.
enum class Terrain { general, land, water };

std::string_view to_string(Terrain t);
/// Throws ParseError on an unknown tag.
Terrain parse_terrain(std::string_view s);

struct InstanceEntry {
  std::string name;                 // product number or descriptive word
  std::vector<std::string> images;  // at least 3
};

struct ClassEntry {
  std::string name;
  std::vector<std::string> synonyms;      // aliases and superclasses, may be empty
  std::vector<std::string> co_occurring;  // names of other catalog classes
  bool diversify = true;                  // receives generated data
  Terrain terrain = Terrain::general;
  std::vector<InstanceEntry> instances;
};

struct CatalogOptions {
  /// Permit one synonym string to be listed under several classes ("crane" for
  /// every crane type). Such synonyms resolve only through a prompt's decode
  /// map, never through the global lookup.
  bool allow_shared_synonyms = false;
};

/// Immutable class/synonym/co-occurrence/instance registry.
class ClassCatalog {
 public:
  /// Parses and validates. Throws ParseError on schema problems and
  /// ValidationError on invariant violations.
  static ClassCatalog from_json(const nlohmann::json& doc, CatalogOptions options = {});
  nlohmann::json to_json() const;

  const std::string& version() const { return version_; }
  std::span<const ClassEntry> classes() const { return classes_; }
  const CatalogOptions& options() const { return options_; }

  /// Case-insensitive, whitespace-normalized lookup by canonical name.
  const ClassEntry* find(std::string_view name) const;
  /// Like find() but throws ValidationError for unknown classes.
  const ClassEntry& at(std::string_view name) const;
  std::optional<std::size_t> index_of(std::string_view name) const;

  /// Canonical class for a class name or synonym. Empty when the phrase is
  /// unknown or shared between several classes.
  std::optional<std::string> resolve(std::string_view phrase) const;

  /// Every class whose name or synonym list contains the phrase.
  std::vector<std::string> classes_for_phrase(std::string_view phrase) const;

 private:
  void validate() const;

  std::string version_;
  std::vector<ClassEntry> classes_;
  CatalogOptions options_;
  std::map<std::string, std::size_t> by_name_;                // normalized name -> index
  std::map<std::string, std::vector<std::size_t>> by_synonym_;  // normalized synonym -> owners
};

ClassCatalog load_catalog(const std::filesystem::path& path, CatalogOptions options = {});
/// Canonical serialization: sorted keys, two-space indent, trailing newline.
void save_catalog(const ClassCatalog& catalog, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Prompt templates

enum class PromptRole {
  class_prior,
  instance_train,
  detect_original,
  detect_synonym,
  detect_cooccurring,
  review_system,
  review_user,
  photorealism,
};

/// Text with `{name}` placeholders. Braces that do not enclose an identifier
/// are literal.
struct PromptTemplate {
  PromptRole role;
  std::string text;

  std::vector<std::string> placeholders() const;
};

using Bindings = std::map<std::string, std::string, std::less<>>;

/// Substitutes every placeholder. Throws ValidationError naming the first
/// unbound placeholder, or when the result is empty.
std::string render_prompt(const PromptTemplate& tmpl, const Bindings& bindings);

/// The stock template for a role.
const PromptTemplate& builtin_template(PromptRole role);

/// The five user-prompt sections of the pseudo-label review, in order.
std::span<const std::string_view> review_user_sections();

}  // namespace autodet
