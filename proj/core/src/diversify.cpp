#include "autodet/diversify.hpp"

#include "autodet/backends/client.hpp"
#include "autodet/common.hpp"
#include "autodet/review.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <mutex>
#include <thread>

namespace autodet {

using nlohmann::json;

int max_steps_for(int k, std::size_t n_images, int floor) {
  return std::max(floor, k * static_cast<int>(n_images));
}

std::array<backends::DiversificationJobSpec, 2> make_job_specs(const InstanceEntry& instance, const ClassEntry& cls,
                                                               const DreamBoothDefaults& d) {
  if (instance.images.size() < d.min_images) {
    throw ValidationError(fmt::format("instance {} of {} has {} images, at least {} are needed", instance.name,
                                      cls.name, instance.images.size(), d.min_images));
  }
  if (!(d.prior_loss_weight > 0) || !(d.snr_gamma > 0) || !(d.lr_unet > 0) || !(d.lr_text_encoder > 0) ||
      d.resolution <= 0) {
    throw ValidationError("fine-tuning knobs must be positive");
  }
  std::array<backends::DiversificationJobSpec, 2> out;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& s = out[i];
    s.instance_name = instance.name;
    s.class_name = cls.name;
    s.train_image_refs = instance.images;
    s.steps_multiplier = d.multipliers[i];
    s.max_steps = max_steps_for(s.steps_multiplier, instance.images.size(), d.steps_floor);
    s.prior_loss_weight = d.prior_loss_weight;
    s.snr_gamma = d.snr_gamma;
    s.lr_unet = d.lr_unet;
    s.lr_text_encoder = d.lr_text_encoder;
    s.resolution = d.resolution;
    s.class_prior_prompt = render_prompt(builtin_template(PromptRole::class_prior), {{"class_name", cls.name}});
    s.instance_prompt = render_prompt(builtin_template(PromptRole::instance_train),
                                      {{"class_name", cls.name}, {"instance_name", instance.name}});
  }
  return out;
}

PromptCatalog PromptCatalog::from_json(const json& doc) {
  if (!doc.is_array()) throw ParseError("prompt catalog must be a JSON array");
  PromptCatalog c;
  for (const auto& e : doc) {
    InferencePrompt p;
    try {
      p.id = e.at("id").get<int>();
      p.description = e.value("description", std::string());
      p.template_text = e.at("template").get<std::string>();
      p.terrain = parse_terrain(e.value("terrain", std::string("general")));
    } catch (const json::exception& ex) {
      throw ParseError(std::string("prompt catalog: ") + ex.what());
    }
    if (p.id <= 0) throw ValidationError("prompt catalog: ids must be positive");
    c.prompts_.push_back(std::move(p));
  }
  std::sort(c.prompts_.begin(), c.prompts_.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < c.prompts_.size(); ++i) {
    if (c.prompts_[i].id == c.prompts_[i - 1].id) {
      throw ValidationError("prompt catalog: duplicate id " + std::to_string(c.prompts_[i].id));
    }
  }
  return c;
}

PromptCatalog PromptCatalog::load(const std::filesystem::path& path) {
  try {
    return from_json(json::parse(read_file(path)));
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

const InferencePrompt& PromptCatalog::at(int id) const {
  auto it = std::lower_bound(prompts_.begin(), prompts_.end(), id, [](const auto& p, int v) { return p.id < v; });
  if (it == prompts_.end() || it->id != id) throw ValidationError("no generation prompt with id " + std::to_string(id));
  return *it;
}

std::vector<GenerationRequest> expand_inference_prompts(const ClassEntry& cls, Terrain terrain,
                                                        const PromptCatalog& prompts,
                                                        const std::string& instance_name) {
  std::vector<GenerationRequest> out;
  for (const auto& p : prompts.prompts()) {
    if (p.terrain != Terrain::general && p.terrain != terrain) continue;
    PromptTemplate tmpl{PromptRole::instance_train, p.template_text};
    GenerationRequest r;
    r.class_name = cls.name;
    r.instance_name = instance_name;
    r.prompt_id = p.id;
    r.prompt_text = render_prompt(tmpl, {{"class_name", cls.name}, {"instance_name", instance_name}});
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<GenerationRequest> expand_inference_prompts(const ClassEntry& cls, std::string_view terrain,
                                                        const PromptCatalog& prompts,
                                                        const std::string& instance_name) {
  return expand_inference_prompts(cls, parse_terrain(terrain), prompts, instance_name);
}

void assign_models(std::vector<GenerationRequest>& requests, const std::array<std::string, 2>& model_refs,
                   std::uint64_t seed, int count) {
  for (std::size_t i = 0; i < requests.size(); ++i) {
    auto& r = requests[i];
    r.model_ref = model_refs[i % 2];
    r.seed = hash_combine(hash_combine(seed, r.instance_name), static_cast<std::uint64_t>(r.prompt_id)) >> 16;
    r.count = count;
  }
}

std::array<std::string, 2> train_instance_models(const std::array<backends::DiversificationJobSpec, 2>& specs,
                                                 backends::BackendClient& trainer) {
  std::array<std::string, 2> refs;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    backends::TrainRequest req{specs[i].instance_name + "/k" + std::to_string(specs[i].steps_multiplier), specs[i]};
    const auto job = trainer.train(req);
    refs[i] = trainer.wait(job.job_id).artifact_ref;
  }
  return refs;
}

GenerationResult run_generation(std::span<const GenerationRequest> requests, backends::BackendClient& generator,
                                backends::BackendClient* reviewer, unsigned parallelism) {
  struct Slot {
    std::vector<ImageRecord> approved;
    std::vector<GenerationRejection> rejected;
    bool failed = false;
  };
  std::vector<Slot> slots(requests.size());

  auto run_one = [&](std::size_t i) {
    const auto& r = requests[i];
    Slot& slot = slots[i];
    backends::GenerateResponse res;
    try {
      res = generator.generate({fmt::format("{}/{}/{}", r.instance_name, r.prompt_id, r.seed), r.model_ref,
                                r.prompt_text, r.seed, r.count});
    } catch (const Error& e) {
      spdlog::warn("generation for {} prompt {} failed: {}", r.instance_name, r.prompt_id, e.what());
      slot.failed = true;
      return;
    }
    for (std::size_t k = 0; k < res.images.size(); ++k) {
      const auto& g = res.images[k];
      ImageRecord rec;
      rec.id = std::filesystem::path(g.ref).stem().string();
      rec.path = g.ref;
      rec.class_names = {r.class_name};
      rec.origin = Origin::generated;
      rec.width = g.width;
      rec.height = g.height;
      rec.provenance = {{"instance", r.instance_name},
                        {"prompt_id", r.prompt_id},
                        {"seed", r.seed + k},
                        {"model_ref", r.model_ref}};
      if (reviewer == nullptr) {
        slot.approved.push_back(std::move(rec));
        continue;
      }
      std::string raw;
      try {
        backends::ReviewRequest q;
        q.request_id = rec.id;
        q.kind = backends::ReviewKind::photorealism;
        q.image_ref = g.ref;
        q.user_prompt = build_photorealism_prompt(r.class_name);
        raw = reviewer->review(q).text;
        if (gate_photorealism(parse_photorealism(raw))) {
          slot.approved.push_back(std::move(rec));
        } else {
          slot.rejected.push_back({std::move(rec), "rejected", raw});
        }
      } catch (const Error& e) {
        slot.rejected.push_back({std::move(rec), std::string("needs attention: ") + e.what(), raw});
      }
    }
  };

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < requests.size(); i = next++) run_one(i);
  };
  parallelism = std::clamp<unsigned>(parallelism, 1, static_cast<unsigned>(std::max<std::size_t>(1, requests.size())));
  std::vector<std::jthread> pool;
  for (unsigned t = 1; t < parallelism; ++t) pool.emplace_back(worker);
  worker();
  pool.clear();

  GenerationResult out;
  for (auto& s : slots) {
    std::move(s.approved.begin(), s.approved.end(), std::back_inserter(out.approved));
    std::move(s.rejected.begin(), s.rejected.end(), std::back_inserter(out.rejected));
    if (s.failed) ++out.failed_requests;
  }
  return out;
}

// ---------------------------------------------------------------------------

Ratio Ratio::parse(std::string_view text) {
  const auto parts = split(text, ":");
  Ratio r;
  auto number = [&](const std::string& s, long& v) {
    const auto t = trim(s);
    const auto* end = t.data() + t.size();
    auto [p, ec] = std::from_chars(t.data(), end, v);
    if (t.empty() || ec != std::errc() || p != end || v < 0) {
      throw ParseError("ratio \"" + std::string(text) + "\" must look like G:O with non-negative integers");
    }
  };
  if (parts.size() != 2) throw ParseError("ratio \"" + std::string(text) + "\" must look like G:O");
  number(parts[0], r.generated);
  number(parts[1], r.original);
  if (r.generated == 0 && r.original == 0) throw ParseError("ratio 0:0 selects nothing");
  return r;
}

std::string Ratio::to_string() const { return std::to_string(generated) + ":" + std::to_string(original); }

std::map<std::string, long> plan_quotas(std::span<const ImageRecord> original_train,
                                        std::span<const ImageRecord> generated_pool, const MixPlan& plan,
                                        const ClassCatalog& catalog) {
  std::map<std::string, long> quotas;
  std::vector<std::string> eligible;  // catalog order
  for (const auto& c : catalog.classes()) {
    quotas[c.name] = 0;
    if (c.diversify && !plan.excluded.contains(c.name)) eligible.push_back(c.name);
  }
  for (const auto& [cls, q] : plan.quota_override) {
    const auto& name = catalog.at(cls).name;
    if (q < 0) throw ValidationError("quota for " + name + " is negative");
    if (std::find(eligible.begin(), eligible.end(), name) == eligible.end() && q > 0) {
      throw ValidationError("quota given for excluded class " + name);
    }
  }

  if (plan.ratio.original == 0) {
    for (const auto& g : generated_pool) {
      const auto& name = catalog.at(g.primary_class()).name;
      if (std::find(eligible.begin(), eligible.end(), name) != eligible.end()) ++quotas[name];
    }
    return quotas;
  }

  const long total = plan.ratio.generated * static_cast<long>(original_train.size()) / plan.ratio.original;
  long remaining = total;
  std::map<std::string, long> weight;
  long weight_sum = 0;
  for (const auto& name : eligible) {
    if (auto it = plan.quota_override.find(name); it != plan.quota_override.end()) {
      quotas[name] = it->second;
      remaining -= it->second;
    } else {
      weight[name] = 0;
    }
  }
  if (remaining < 0) throw ValidationError("quota overrides exceed the generated total " + std::to_string(total));
  for (const auto& im : original_train) {
    const auto& name = catalog.at(im.primary_class()).name;
    if (auto it = weight.find(name); it != weight.end()) {
      ++it->second;
      ++weight_sum;
    }
  }
  if (weight_sum == 0) {
    if (remaining > 0) throw ValidationError("no eligible class has original images to apportion quotas by");
    return quotas;
  }

  long assigned = 0;
  for (const auto& name : eligible) {
    auto it = weight.find(name);
    if (it == weight.end()) continue;
    const long q = remaining * it->second / weight_sum;
    quotas[name] = q;
    assigned += q;
  }
  std::string largest;
  for (const auto& name : eligible) {
    if (!weight.contains(name)) continue;
    if (largest.empty() || quotas[name] > quotas[largest]) largest = name;
  }
  quotas[largest] += remaining - assigned;
  return quotas;
}

MixResult mix_dataset(std::span<const ImageRecord> original_train, std::span<const ImageRecord> generated_pool,
                      const MixPlan& plan, const ClassCatalog& catalog, std::uint64_t seed) {
  MixResult out;
  out.quotas = plan_quotas(original_train, generated_pool, plan, catalog);

  std::map<std::string, std::vector<const ImageRecord*>> by_class;
  for (const auto& g : generated_pool) {
    if (g.origin != Origin::generated) throw ValidationError("image " + g.id + " in the generated pool is not generated");
    by_class[catalog.at(g.primary_class()).name].push_back(&g);
  }

  std::map<std::string, long> shortfall;
  for (const auto& [cls, q] : out.quotas) {
    const long have = static_cast<long>(by_class[cls].size());
    if (have < q) shortfall[cls] = q - have;
  }
  if (!shortfall.empty()) {
    std::string msg = "approved generated pool too small:";
    for (const auto& [cls, n] : shortfall) msg += fmt::format(" {} short by {};", cls, n);
    throw InsufficientPoolError(msg, shortfall);
  }

  if (plan.ratio.original != 0) out.manifest.assign(original_train.begin(), original_train.end());
  std::vector<ImageRecord> picked;
  for (const auto& [cls, q] : out.quotas) {
    if (q == 0) continue;
    auto pool = by_class[cls];
    std::sort(pool.begin(), pool.end(), [](const ImageRecord* a, const ImageRecord* b) { return a->id < b->id; });
    Rng rng(hash_combine(seed, cls));
    rng.shuffle(pool);
    for (long i = 0; i < q; ++i) picked.push_back(*pool[static_cast<std::size_t>(i)]);
  }
  std::sort(picked.begin(), picked.end(), [](const ImageRecord& a, const ImageRecord& b) { return a.id < b.id; });
  std::move(picked.begin(), picked.end(), std::back_inserter(out.manifest));
  return out;
}

}  // namespace autodet
