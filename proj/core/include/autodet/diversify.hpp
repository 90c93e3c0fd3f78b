#pragma once

#include "autodet/backends/protocol.hpp"
#include "autodet/catalog.hpp"
#include "autodet/dataset.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace autodet {

namespace backends {
class BackendClient;
}

struct DreamBoothDefaults {
  int steps_floor = 800;
  std::array<int, 2> multipliers{120, 140};
  double prior_loss_weight = 1.0;
  double snr_gamma = 5.0;
  double lr_unet = 1e-4;
  double lr_text_encoder = 5e-6;
  int resolution = 1024;
  std::size_t min_images = 3;
};

/// max(floor, k * n)
int max_steps_for(int k, std::size_t n_images, int floor = 800);

/// One spec per step multiplier, identical otherwise. Throws ValidationError
/// when the instance has fewer than `min_images` images or a knob is not
/// positive.
std::array<backends::DiversificationJobSpec, 2> make_job_specs(const InstanceEntry& instance, const ClassEntry& cls,
                                                               const DreamBoothDefaults& defaults = {});

struct InferencePrompt {
  int id = 0;
  std::string description;
  std::string template_text;  // placeholders {instance_name}, {class_name}
  Terrain terrain = Terrain::general;
};

/// Id-indexed generation prompts, each tagged with the terrain it serves.
class PromptCatalog {
 public:
  /// Parses `[{id, description, template, terrain}]`. Throws ParseError on
  /// schema problems and ValidationError on duplicate ids.
  static PromptCatalog from_json(const nlohmann::json& doc);
  static PromptCatalog load(const std::filesystem::path& path);

  std::span<const InferencePrompt> prompts() const { return prompts_; }
  const InferencePrompt& at(int id) const;

 private:
  std::vector<InferencePrompt> prompts_;  // by id
};

struct GenerationRequest {
  std::string class_name;
  std::string instance_name;
  std::string model_ref;
  int prompt_id = 0;
  std::string prompt_text;
  std::uint64_t seed = 0;
  int count = 1;
};

/// General prompts for every class, plus the land or water family for classes
/// with that terrain. Model refs are left empty.
std::vector<GenerationRequest> expand_inference_prompts(const ClassEntry& cls, Terrain terrain,
                                                        const PromptCatalog& prompts,
                                                        const std::string& instance_name);
/// Same, with the terrain given as a tag; throws ParseError on unknown tags.
std::vector<GenerationRequest> expand_inference_prompts(const ClassEntry& cls, std::string_view terrain,
                                                        const PromptCatalog& prompts,
                                                        const std::string& instance_name);

/// Fills model_ref by alternating between the instance's two models, seeds
/// each request from (seed, instance, prompt id) and sets `count`.
void assign_models(std::vector<GenerationRequest>& requests, const std::array<std::string, 2>& model_refs,
                   std::uint64_t seed, int count);

/// Submits both fine-tuning jobs of an instance and waits for the artifacts.
std::array<std::string, 2> train_instance_models(const std::array<backends::DiversificationJobSpec, 2>& specs,
                                                 backends::BackendClient& trainer);

struct GenerationRejection {
  ImageRecord image;
  std::string reason;
  std::string raw_text;
};

struct GenerationResult {
  std::vector<ImageRecord> approved;
  std::vector<GenerationRejection> rejected;
  std::size_t failed_requests = 0;
};

/// Generates every request and passes each image through the photorealism
/// gate (skipped when `reviewer` is null). Failed requests are logged and
/// skipped. Approved records carry origin=generated and provenance
/// {instance, prompt_id, seed, model_ref}; paths are the backend's refs.
GenerationResult run_generation(std::span<const GenerationRequest> requests, backends::BackendClient& generator,
                                backends::BackendClient* reviewer, unsigned parallelism = 4);

// ---------------------------------------------------------------------------
// Mixing

/// generated:original
struct Ratio {
  long generated = 0;
  long original = 1;

  /// "3:1" style. Throws ParseError.
  static Ratio parse(std::string_view text);
  std::string to_string() const;
};

struct MixPlan {
  Ratio ratio;
  /// Fixed per-class quotas; the rest of the total is apportioned.
  std::map<std::string, long> quota_override;
  /// Added to the catalog's diversify=false classes.
  std::set<std::string> excluded;
};

class InsufficientPoolError : public ValidationError {
 public:
  InsufficientPoolError(const std::string& what, std::map<std::string, long> shortfall)
      : ValidationError(what), shortfall_(std::move(shortfall)) {}
  const std::map<std::string, long>& shortfall() const { return shortfall_; }

 private:
  std::map<std::string, long> shortfall_;
};

/// Generated images wanted per class. The total is ratio * |original| (floor),
/// or the whole eligible pool for a ratio with no original share. Classes with
/// diversify=false or listed as excluded get 0; the rest share the total in
/// proportion to their original counts, floors first and the remainder to
/// the largest quota.
std::map<std::string, long> plan_quotas(std::span<const ImageRecord> original_train,
                                        std::span<const ImageRecord> generated_pool, const MixPlan& plan,
                                        const ClassCatalog& catalog);

struct MixResult {
  std::vector<ImageRecord> manifest;  // originals in input order, then generated by id
  std::map<std::string, long> quotas;
};

/// Throws InsufficientPoolError naming every class whose approved pool is
/// smaller than its quota.
MixResult mix_dataset(std::span<const ImageRecord> original_train, std::span<const ImageRecord> generated_pool,
                      const MixPlan& plan, const ClassCatalog& catalog, std::uint64_t seed);

}  // namespace autodet
