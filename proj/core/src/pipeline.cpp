#include "autodet/pipeline.hpp"

#include "autodet/backends/mock.hpp"
#include "autodet/evaluate.hpp"
#include "autodet/review.hpp"

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <spdlog/spdlog.h>

#include <sys/file.h>
#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <ctime>
#include <set>
#include <thread>

namespace autodet {

using nlohmann::json;
namespace fs = std::filesystem;
using backends::Role;

std::string_view to_string(StageId s) {
  switch (s) {
    case StageId::ingest: return "ingest";
    case StageId::dedup: return "dedup";
    case StageId::split: return "split";
    case StageId::diversify: return "diversify";
    case StageId::annotate: return "annotate";
    case StageId::review: return "review";
    case StageId::mix: return "mix";
    case StageId::train: return "train";
    case StageId::eval: return "eval";
  }
  return "ingest";
}

StageId parse_stage_id(std::string_view s) {
  for (auto id : kStages) {
    if (to_string(id) == s) return id;
  }
  throw ParseError("unknown stage \"" + std::string(s) + "\"");
}

// ---------------------------------------------------------------------------
// Config

namespace {

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception& e) {
    throw ParseError(fmt::format("config key \"{}\": {}", key, e.what()));
  }
}

void check_unit(double v, const char* what) {
  if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(fmt::format("{} must lie in [0, 1], got {}", what, v));
}

}  // namespace

RunConfig RunConfig::from_json(const json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) throw ParseError("run config must be a JSON object");
  RunConfig c;
  c.seed = get_or<std::uint64_t>(doc, "seed", 0);

  if (!doc.contains("catalog")) throw ParseError("run config needs \"catalog\"");
  c.catalog_path = resolve(base_dir, doc.at("catalog").get<std::string>());

  if (auto it = doc.find("synthetic_world"); it != doc.end()) {
    c.world = backends::WorldParams::from_json(*it);
  } else {
    const json ds = get_or<json>(doc, "dataset", json::object());
    if (!ds.contains("images")) throw ParseError("run config needs \"dataset.images\" or \"synthetic_world\"");
    c.images_manifest = resolve(base_dir, ds.at("images").get<std::string>());
    c.dataset_root = ds.contains("root") ? resolve(base_dir, ds.at("root").get<std::string>())
                                         : c.images_manifest.parent_path();
  }
  c.output_dir = resolve(base_dir, get_or<std::string>(doc, "output_dir", "out"));

  const json endpoints = get_or<json>(doc, "endpoints", json::object());
  for (Role r : {Role::detect, Role::generate, Role::review, Role::train}) {
    const std::string name(backends::to_string(r));
    c.endpoints[r] = endpoints.contains(name) ? backends::EndpointConfig::from_json(r, endpoints.at(name))
                                              : backends::EndpointConfig::defaults(r);
  }
  c.mock = get_or<json>(doc, "mock", json::object());

  const json th = get_or<json>(doc, "thresholds", json::object());
  c.thresholds.box = get_or(th, "box", c.thresholds.box);
  c.thresholds.text = get_or(th, "text", c.thresholds.text);
  c.filter_thresh = get_or(th, "filter", c.filter_thresh);
  c.nms_thresh = get_or(th, "nms", c.nms_thresh);

  const json dd = get_or<json>(doc, "dedup", json::object());
  c.dedup_exact = get_or(dd, "exact", c.dedup_exact);
  c.dedup_near = get_or(dd, "near", c.dedup_near);

  const json sp = get_or<json>(doc, "split", json::object());
  c.fractions.train = get_or(sp, "train", c.fractions.train);
  c.fractions.val = get_or(sp, "val", c.fractions.val);
  c.fractions.test = get_or(sp, "test", c.fractions.test);

  c.review_enabled = get_or(get_or<json>(doc, "review", json::object()), "enabled", true);

  const json dv = get_or<json>(doc, "diversify", json::object());
  c.diversify_enabled = get_or(dv, "enabled", false);
  if (dv.contains("prompts")) c.prompts_path = resolve(base_dir, dv.at("prompts").get<std::string>());
  c.images_per_prompt = get_or(dv, "images_per_prompt", c.images_per_prompt);
  c.max_prompts_per_instance = get_or(dv, "max_prompts_per_instance", c.max_prompts_per_instance);
  c.dreambooth.steps_floor = get_or(dv, "steps_floor", c.dreambooth.steps_floor);

  const json mx = get_or<json>(doc, "mix", json::object());
  c.mix.ratio = Ratio::parse(get_or<std::string>(mx, "ratio", "0:1"));
  c.mix.quota_override = get_or<std::map<std::string, long>>(mx, "quotas", {});
  for (const auto& e : get_or<std::vector<std::string>>(mx, "excluded", {})) c.mix.excluded.insert(e);

  const json tr = get_or<json>(doc, "train", json::object());
  c.detector_model = get_or<std::string>(tr, "model", c.detector_model);
  c.hyperparameters = get_or<json>(tr, "hyperparameters", json::object());

  const json ev = get_or<json>(doc, "eval", json::object());
  if (ev.contains("ground_truth")) c.eval_ground_truth = resolve(base_dir, ev.at("ground_truth").get<std::string>());
  c.cm_iou = get_or(ev, "confusion_iou", c.cm_iou);
  c.cm_conf = get_or(ev, "confusion_conf", c.cm_conf);
  return c;
}

RunConfig RunConfig::load(const fs::path& path, std::optional<std::uint64_t> seed_override) {
  const std::string text = interpolate_env(read_file(path));
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  RunConfig c = from_json(doc, fs::absolute(path).parent_path());
  c.config_path = fs::absolute(path);
  if (seed_override) c.seed = *seed_override;
  c.validate();
  return c;
}

void RunConfig::validate() const {
  check_unit(thresholds.box, "thresholds.box");
  check_unit(thresholds.text, "thresholds.text");
  check_unit(filter_thresh, "thresholds.filter");
  check_unit(nms_thresh, "thresholds.nms");
  if (!(cm_iou > 0.0 && cm_iou < 1.0)) throw ValidationError("eval.confusion_iou must lie in (0, 1)");
  if (!(cm_conf > 0.0 && cm_conf < 1.0)) throw ValidationError("eval.confusion_conf must lie in (0, 1)");
  fractions.validate();
  if (dedup_exact < 0 || dedup_near < dedup_exact) throw ValidationError("dedup thresholds need 0 <= exact <= near");
  if (images_per_prompt < 1) throw ValidationError("diversify.images_per_prompt must be positive");
  if (max_prompts_per_instance < 0) throw ValidationError("diversify.max_prompts_per_instance must be >= 0");
  if (!fs::exists(catalog_path)) throw ValidationError("catalog not found: " + catalog_path.string());
  if (!world && !fs::exists(images_manifest)) {
    throw ValidationError("image manifest not found: " + images_manifest.string());
  }
  if (diversify_enabled && !fs::exists(prompts_path)) {
    throw ValidationError("diversify.prompts not found: " + prompts_path.string());
  }
  if (eval_ground_truth && !fs::exists(*eval_ground_truth)) {
    throw ValidationError("eval.ground_truth not found: " + eval_ground_truth->string());
  }
  for (const auto& [role, ep] : endpoints) ep.validate();
  (void)backends::default_detector_hyperparameters(detector_model);
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

std::set<std::string> read_id_list(const fs::path& path) {
  std::set<std::string> ids;
  for (const auto& line : split(read_file(path), "\n")) {
    auto t = trim(line);
    if (!t.empty()) ids.insert(t);
  }
  return ids;
}

void write_id_list(const fs::path& path, const std::vector<std::string>& ids) {
  std::string body;
  for (const auto& id : ids) body += id + '\n';
  write_file(path, body);
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string all_classes_prompt(const ClassCatalog& catalog) {
  std::vector<std::string> names;
  for (const auto& c : catalog.classes()) names.push_back(c.name);
  return join(names, kPhraseDelimiter);
}

}  // namespace

Pipeline::Pipeline(RunConfig config, RunOptions options)
    : config_(std::move(config)), options_(options), catalog_(load_catalog(config_.catalog_path)) {
  compute_keys();
  if (config_.world) config_.dataset_root = stage_dir(StageId::ingest) / "world";
  if (options_.dry_run) return;

  fs::create_directories(config_.output_dir);
  const fs::path lock = config_.output_dir / ".lock";
  lock_fd_ = ::open(lock.c_str(), O_CREAT | O_RDWR, 0644);
  if (lock_fd_ < 0) throw Error("cannot open lock file " + lock.string());
  if (::flock(lock_fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(lock_fd_);
    lock_fd_ = -1;
    throw Error("another run holds " + lock.string());
  }
}

Pipeline::~Pipeline() {
  if (lock_fd_ >= 0) {
    ::flock(lock_fd_, LOCK_UN);
    ::close(lock_fd_);
  }
}

void Pipeline::compute_keys() {
  const auto& c = config_;
  std::uint64_t h = fnv1a("autodet-pipeline-1");

  // Everything a backend answer can depend on.
  json backend;
  for (const auto& [role, ep] : c.endpoints) backend[std::string(backends::to_string(role))] = ep.base_url;
  backend["mock"] = c.mock;
  const std::string backend_dump = backend.dump();

  for (auto s : kStages) {
    json slice;
    switch (s) {
      case StageId::ingest:
        slice["catalog"] = read_file(c.catalog_path);
        if (c.world) {
          slice["world"] = c.world->to_json();
        } else {
          slice["images"] = read_file(c.images_manifest);
          slice["root"] = c.dataset_root.string();
        }
        break;
      case StageId::dedup:
        slice = {{"exact", c.dedup_exact}, {"near", c.dedup_near}};
        break;
      case StageId::split:
        slice = {{"seed", c.seed}, {"train", c.fractions.train}, {"val", c.fractions.val}, {"test", c.fractions.test}};
        break;
      case StageId::diversify:
        slice = {{"enabled", c.diversify_enabled}, {"review", c.review_enabled}};
        if (c.diversify_enabled) {
          slice["prompts"] = read_file(c.prompts_path);
          slice["images_per_prompt"] = c.images_per_prompt;
          slice["max_prompts"] = c.max_prompts_per_instance;
          slice["steps_floor"] = c.dreambooth.steps_floor;
          slice["excluded"] = c.mix.excluded;
          slice["seed"] = c.seed;
          slice["backend"] = backend_dump;
        }
        break;
      case StageId::annotate:
        slice = {{"box", c.thresholds.box},   {"text", c.thresholds.text}, {"filter", c.filter_thresh},
                 {"nms", c.nms_thresh},       {"backend", backend_dump}};
        break;
      case StageId::review:
        slice = {{"enabled", c.review_enabled}, {"backend", backend_dump}};
        break;
      case StageId::mix:
        slice = {{"ratio", c.mix.ratio.to_string()},
                 {"quotas", c.mix.quota_override},
                 {"excluded", c.mix.excluded},
                 {"seed", c.seed}};
        break;
      case StageId::train:
        slice = {{"model", c.detector_model}, {"hyper", c.hyperparameters}, {"seed", c.seed}, {"backend", backend_dump}};
        break;
      case StageId::eval:
        slice = {{"iou", c.cm_iou}, {"conf", c.cm_conf}, {"backend", backend_dump}};
        if (c.eval_ground_truth) slice["ground_truth"] = read_file(*c.eval_ground_truth);
        break;
    }
    h = hash_combine(hash_combine(h, to_string(s)), slice.dump());
    keys_[s] = hex64(h);
  }
}

std::string Pipeline::key(StageId stage) const { return keys_.at(stage); }

fs::path Pipeline::stage_dir(StageId stage) const {
  return config_.output_dir / std::string(to_string(stage)) / key(stage);
}

bool Pipeline::complete(StageId stage) const { return fs::exists(stage_dir(stage) / "DONE"); }

fs::path Pipeline::image_path(const ImageRecord& image) const {
  fs::path p(image.path);
  if (p.is_absolute()) return p;
  return (image.origin == Origin::generated ? config_.output_dir : config_.dataset_root) / p;
}

backends::BackendClient& Pipeline::client(Role role) {
  if (auto it = clients_.find(role); it != clients_.end()) return *it->second;
  const auto& ep = config_.endpoints.at(role);
  std::shared_ptr<backends::Transport> transport;
  if (ep.base_url.rfind("inproc:", 0) == 0) {
    if (!mock_) {
      auto mc = backends::MockConfig::from_json(config_.mock, catalog_);
      if (!config_.mock.contains("seed")) mc.seed = config_.seed;
      mc.roots = {config_.dataset_root, config_.output_dir / "backend"};
      mc.work_dir = config_.output_dir / "backend";
      mock_ = std::make_shared<backends::MockBackend>(std::move(mc));
    }
    transport = std::make_shared<backends::InProcessTransport>(mock_->handler());
  } else {
    transport = std::make_shared<backends::HttpTransport>(ep.base_url, ep.timeout);
  }
  auto [it, inserted] = clients_.emplace(role, std::make_unique<backends::BackendClient>(ep, std::move(transport)));
  return *it->second;
}

void Pipeline::require(StageId stage) const {
  for (auto s : kStages) {
    if (s == stage) return;
    if (!complete(s)) {
      throw MissingArtifactError(
          s, fmt::format("`{}` needs the output of `{}`, which is missing for this configuration; run `autodet {}` first",
                         to_string(stage), to_string(s), to_string(s)));
    }
  }
}

StageReport Pipeline::run(StageId stage) {
  StageReport report{stage, key(stage)};
  const fs::path dir = stage_dir(stage);
  if (options_.dry_run) {
    report.skipped = true;
    return report;
  }
  require(stage);
  if (options_.resume && complete(stage)) {
    spdlog::info("{}: up to date ({})", to_string(stage), report.key);
    report.skipped = true;
    write_file(dir.parent_path() / "CURRENT", report.key + "\n");
    return report;
  }

  const auto t0 = std::chrono::steady_clock::now();
  fs::remove_all(dir);
  fs::create_directories(dir);
  spdlog::info("{}: running ({})", to_string(stage), report.key);
  switch (stage) {
    case StageId::ingest: do_ingest(dir); break;
    case StageId::dedup: do_dedup(dir); break;
    case StageId::split: do_split(dir); break;
    case StageId::diversify: do_diversify(dir); break;
    case StageId::annotate: do_annotate(dir); break;
    case StageId::review: do_review(dir); break;
    case StageId::mix: do_mix(dir); break;
    case StageId::train: do_train(dir); break;
    case StageId::eval: do_eval(dir); break;
  }
  write_file(dir / "DONE", report.key + "\n");
  write_file(dir.parent_path() / "CURRENT", report.key + "\n");
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_metadata({report});
  return report;
}

std::vector<StageReport> Pipeline::run_all() {
  std::vector<StageReport> reports;
  for (auto s : kStages) reports.push_back(run(s));
  if (!options_.dry_run) write_metadata(reports);
  return reports;
}

std::vector<std::string> Pipeline::plan() const {
  std::vector<std::string> lines;
  for (auto s : kStages) {
    const bool done = complete(s);
    const char* action = done && options_.resume ? "skip" : (done ? "rerun" : "run");
    lines.push_back(fmt::format("{:<10} {} {}", to_string(s), key(s), action));
  }
  return lines;
}

void Pipeline::write_metadata(const std::vector<StageReport>& reports) const {
  const fs::path path = config_.output_dir / "run_metadata.json";
  json doc = json::object();
  if (fs::exists(path)) {
    try {
      doc = json::parse(read_file(path));
    } catch (const json::exception&) {
      doc = json::object();
    }
  }
  doc["config"] = config_.config_path.string();
  doc["updated_at"] = utc_now();
  if (!doc.contains("stages")) doc["stages"] = json::object();
  for (const auto& r : reports) {
    doc["stages"][std::string(to_string(r.stage))] = {
        {"key", r.key}, {"skipped", r.skipped}, {"seconds", r.seconds}, {"finished_at", utc_now()}};
  }
  write_file(path, doc.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Stages

void Pipeline::do_ingest(const fs::path& dir) {
  std::vector<ImageRecord> images;
  if (config_.world) {
    images = backends::generate_world(catalog_, *config_.world, dir / "world");
  } else {
    images = read_images(config_.images_manifest);
  }
  std::set<std::string> seen;
  for (auto& im : images) {
    if (!seen.insert(im.id).second) throw ValidationError("duplicate image id " + im.id);
    for (auto& name : im.class_names) name = catalog_.at(name).name;
    if (im.width <= 0 || im.height <= 0) {
      const cv::Mat m = cv::imread(image_path(im).string(), cv::IMREAD_UNCHANGED);
      if (m.empty()) throw ParseError("cannot decode " + image_path(im).string());
      im.width = m.cols;
      im.height = m.rows;
    }
    validate(im);
  }
  write_images(dir / "images.jsonl", images);
  save_catalog(catalog_, dir / "catalog.json");
  spdlog::info("ingest: {} images", images.size());
}

void Pipeline::do_dedup(const fs::path& dir) {
  const auto images = read_images(stage_dir(StageId::ingest) / "images.jsonl");
  const auto hashed = hash_images(images, config_.dataset_root);
  const auto result = dedup(hashed, config_.dedup_exact, config_.dedup_near);

  std::vector<json> hashes;
  for (const auto& h : hashed) hashes.push_back({{"id", h.record.id}, {"phash", hex64(h.hash)}});
  write_jsonl(dir / "hashes.jsonl", hashes);
  json clusters = json::array();
  for (const auto& c : result.clusters) {
    clusters.push_back({{"representative", c.representative},
                        {"members", c.members},
                        {"kind", c.kind == DupKind::exact ? "exact" : "near"}});
  }
  write_file(dir / "clusters.json", clusters.dump(2) + "\n");
  write_images(dir / "retained.jsonl", result.retained);
  spdlog::info("dedup: {} of {} images retained, {} clusters", result.retained.size(), images.size(),
               result.clusters.size());
}

void Pipeline::do_split(const fs::path& dir) {
  const fs::path dd = stage_dir(StageId::dedup);
  const auto images = read_images(dd / "retained.jsonl");
  std::vector<DupCluster> clusters;
  for (const auto& c : json::parse(read_file(dd / "clusters.json"))) {
    clusters.push_back({c.at("representative").get<std::string>(), c.at("members").get<std::vector<std::string>>(),
                        c.at("kind").get<std::string>() == "exact" ? DupKind::exact : DupKind::near});
  }
  const SplitManifest m = stratified_split(images, clusters, config_.fractions, config_.seed);
  write_file(dir / "split.json", m.to_json().dump(2) + "\n");
  for (Split which : {Split::train, Split::val, Split::test}) {
    std::vector<ImageRecord> part;
    for (const auto& im : images) {
      if (m.assignments.at(im.id) == which) part.push_back(im);
    }
    write_images(dir / (std::string(to_string(which)) + ".jsonl"), part);
  }
}

void Pipeline::do_diversify(const fs::path& dir) {
  std::vector<ImageRecord> approved;
  json rejected_rows = json::array();
  json jobs = json::object();
  if (config_.diversify_enabled) {
    const PromptCatalog prompts = PromptCatalog::load(config_.prompts_path);
    std::vector<GenerationRequest> requests;
    auto& trainer = client(Role::train);
    for (const auto& cls : catalog_.classes()) {
      if (!cls.diversify || config_.mix.excluded.count(cls.name)) continue;
      for (const auto& inst : cls.instances) {
        const auto specs = make_job_specs(inst, cls, config_.dreambooth);
        const auto refs = train_instance_models(specs, trainer);
        jobs[cls.name + "/" + inst.name] = refs;
        auto reqs = expand_inference_prompts(cls, cls.terrain, prompts, inst.name);
        if (config_.max_prompts_per_instance > 0 &&
            reqs.size() > static_cast<std::size_t>(config_.max_prompts_per_instance)) {
          reqs.resize(static_cast<std::size_t>(config_.max_prompts_per_instance));
        }
        assign_models(reqs, refs, config_.seed, config_.images_per_prompt);
        requests.insert(requests.end(), reqs.begin(), reqs.end());
      }
    }
    auto* reviewer = config_.review_enabled ? &client(Role::review) : nullptr;
    auto& gen = client(Role::generate);
    auto result = run_generation(requests, gen, reviewer,
                                 static_cast<unsigned>(config_.endpoints.at(Role::generate).max_in_flight));
    const fs::path out = fs::absolute(config_.output_dir);
    auto relativize = [&](ImageRecord& r) {
      fs::path p(r.path);
      if (p.is_absolute()) r.path = p.lexically_relative(out).generic_string();
    };
    for (auto& r : result.approved) {
      relativize(r);
      approved.push_back(r);
    }
    for (auto& rej : result.rejected) {
      relativize(rej.image);
      rejected_rows.push_back({{"image", rej.image}, {"reason", rej.reason}, {"raw_text", rej.raw_text}});
    }
    std::sort(approved.begin(), approved.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    spdlog::info("diversify: {} requests, {} approved, {} rejected, {} failed", requests.size(), approved.size(),
                 result.rejected.size(), result.failed_requests);
  }
  write_images(dir / "approved.jsonl", approved);
  write_file(dir / "rejected.json", rejected_rows.dump(2) + "\n");
  write_file(dir / "jobs.json", jobs.dump(2) + "\n");
}

void Pipeline::do_annotate(const fs::path& dir) {
  const fs::path sp = stage_dir(StageId::split);
  std::vector<ImageRecord> images = read_images(sp / "train.jsonl");
  for (auto& im : read_images(sp / "val.jsonl")) images.push_back(std::move(im));
  for (auto& im : read_images(stage_dir(StageId::diversify) / "approved.jsonl")) images.push_back(std::move(im));

  auto& detector = client(Role::detect);
  const auto raw = annotate_images(
      images, [&](const ImageRecord& im) { return fs::absolute(image_path(im)).string(); }, catalog_, detector,
      config_.thresholds, static_cast<unsigned>(config_.endpoints.at(Role::detect).max_in_flight));

  std::vector<Annotation> store;
  std::vector<std::string> unannotated;
  std::size_t unresolved = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (const auto& r : raw[i]) store.push_back(to_annotation(r));
    const auto fr = filter_and_nms_detailed(raw[i], catalog_, config_.filter_thresh, config_.nms_thresh);
    unresolved += fr.unresolved;
    store.insert(store.end(), fr.filtered.begin(), fr.filtered.end());
    store.insert(store.end(), fr.final.begin(), fr.final.end());
    if (fr.final.empty()) unannotated.push_back(images[i].id);
  }
  write_images(dir / "images.jsonl", images);
  write_annotations(dir / "annotations.jsonl", store);
  const auto acc = stage_accounting(store);
  write_file(dir / "accounting.json", acc.to_json().dump(2) + "\n");
  write_file(dir / "accounting.txt", acc.to_text());
  write_id_list(dir / "unannotated.txt", unannotated);
  if (!unannotated.empty()) {
    spdlog::warn("annotate: {} images without annotations are excluded from training", unannotated.size());
  }
  if (unresolved) spdlog::warn("annotate: {} detections had phrases matching no class", unresolved);
}

void Pipeline::do_review(const fs::path& dir) {
  const fs::path an = stage_dir(StageId::annotate);
  const auto images = read_images(an / "images.jsonl");
  std::map<std::string, std::vector<Annotation>> finals;
  for (auto& a : read_annotations(an / "annotations.jsonl")) {
    if (a.stage == Stage::final) finals[a.image_id].push_back(std::move(a));
  }

  ReviewPassOptions opts;
  opts.overlay_dir = dir / "overlays";
  opts.enabled = config_.review_enabled;
  opts.parallelism = static_cast<unsigned>(config_.endpoints.at(Role::review).max_in_flight);
  auto* reviewer = config_.review_enabled ? &client(Role::review) : nullptr;
  const auto outcomes = review_images(
      images, finals, [&](const ImageRecord& im) { return image_path(im); }, catalog_, reviewer, opts);

  std::vector<json> rows;
  std::vector<Annotation> labels;
  std::vector<std::string> kept, attention;
  for (const auto& o : outcomes) {
    rows.push_back(o.to_json());
    if (!o.error.empty()) attention.push_back(o.image_id);
    if (o.kept) kept.push_back(o.image_id);
    for (auto a : finals.at(o.image_id)) {
      a.advance(o.kept ? Stage::approved : Stage::rejected);
      labels.push_back(std::move(a));
    }
  }
  write_jsonl(dir / "verdicts.jsonl", rows);
  write_annotations(dir / "labels.jsonl", labels);
  write_id_list(dir / "kept.txt", kept);
  write_id_list(dir / "needs_attention.txt", attention);
  spdlog::info("review: {} of {} annotated images kept, {} need attention", kept.size(), outcomes.size(),
               attention.size());
}

void Pipeline::do_mix(const fs::path& dir) {
  const fs::path sp = stage_dir(StageId::split);
  const fs::path rv = stage_dir(StageId::review);
  const auto kept = read_id_list(rv / "kept.txt");
  auto keep = [&](std::vector<ImageRecord> v) {
    std::erase_if(v, [&](const ImageRecord& im) { return !kept.count(im.id); });
    return v;
  };
  const auto train = keep(read_images(sp / "train.jsonl"));
  const auto val = keep(read_images(sp / "val.jsonl"));
  const auto pool = keep(read_images(stage_dir(StageId::diversify) / "approved.jsonl"));

  const auto mixed = mix_dataset(train, pool, config_.mix, catalog_, config_.seed);

  std::map<std::string, std::vector<Annotation>> labels;
  for (auto& a : read_annotations(rv / "labels.jsonl")) {
    if (a.stage == Stage::approved) labels[a.image_id].push_back(std::move(a));
  }
  const fs::path abs_dir = fs::absolute(dir);
  auto manifest_rows = [&](const std::vector<ImageRecord>& images) {
    std::vector<json> rows;
    for (const auto& im : images) {
      json anns = json::array();
      for (const auto& a : labels[im.id]) anns.push_back({{"class", a.class_name}, {"box", {a.box.x1, a.box.y1, a.box.x2, a.box.y2}}});
      rows.push_back({{"id", im.id},
                      {"path", fs::absolute(image_path(im)).lexically_relative(abs_dir).generic_string()},
                      {"width", im.width},
                      {"height", im.height},
                      {"annotations", std::move(anns)}});
    }
    return rows;
  };
  write_images(dir / "manifest.jsonl", mixed.manifest);
  write_jsonl(dir / "train_manifest.jsonl", manifest_rows(mixed.manifest));
  write_jsonl(dir / "val_manifest.jsonl", manifest_rows(val));
  write_file(dir / "quotas.json", json(mixed.quotas).dump(2) + "\n");
  spdlog::info("mix: {} originals + {} generated", train.size(), mixed.manifest.size() - train.size());
}

void Pipeline::do_train(const fs::path& dir) {
  backends::DetectorTrainSpec spec;
  spec.manifest_ref = fs::absolute(stage_dir(StageId::mix) / "train_manifest.jsonl").string();
  spec.model = config_.detector_model;
  spec.hyperparameters = backends::default_detector_hyperparameters(config_.detector_model);
  spec.hyperparameters.merge_patch(config_.hyperparameters);
  spec.seed = config_.seed;

  auto& trainer = client(Role::train);
  backends::TrainRequest req;
  req.request_id = "detector-" + key(StageId::train);
  req.job = spec;
  const auto resp = trainer.train(req);
  const auto status = trainer.wait(resp.job_id);
  write_file(dir / "model.json", json{{"job_id", status.job_id},
                                      {"artifact_ref", status.artifact_ref},
                                      {"model", spec.model},
                                      {"hyperparameters", spec.hyperparameters},
                                      {"seed", spec.seed}}
                                         .dump(2) + "\n");
}

void Pipeline::do_eval(const fs::path& dir) {
  const auto test = read_images(stage_dir(StageId::split) / "test.jsonl");
  const json model = json::parse(read_file(stage_dir(StageId::train) / "model.json"));
  const std::string model_ref = model.at("artifact_ref").get<std::string>();
  const std::string prompt = all_classes_prompt(catalog_);

  auto& detector = client(Role::detect);
  std::vector<std::vector<Detection>> per_image(test.size());
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i = next++; i < test.size(); i = next++) {
      try {
        backends::DetectRequest req;
        req.request_id = test[i].id + "#eval";
        req.image_ref = fs::absolute(image_path(test[i])).string();
        req.prompt = prompt;
        req.box_threshold = 0.001;
        req.text_threshold = 0.0;
        req.model_ref = model_ref;
        for (const auto& d : detector.detect(req).detections) {
          auto cls = catalog_.resolve(d.phrase);
          if (!cls) continue;
          per_image[i].push_back({test[i].id, clamp_to(d.box, test[i].width, test[i].height), d.score, *cls});
        }
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const unsigned n = std::max(1, config_.endpoints.at(Role::detect).max_in_flight);
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  std::vector<Detection> dets;
  for (auto& v : per_image) dets.insert(dets.end(), v.begin(), v.end());

  std::vector<GroundTruth> gts;
  if (config_.eval_ground_truth) {
    std::set<std::string> ids;
    for (const auto& im : test) ids.insert(im.id);
    for (auto& g : load_ground_truth(*config_.eval_ground_truth)) {
      if (ids.count(g.image_id)) gts.push_back(std::move(g));
    }
  } else {
    for (const auto& im : test) {
      const fs::path p = image_path(im);
      if (!fs::exists(backends::truth_path(p))) {
        throw ValidationError("no ground truth for test image " + im.id + "; set eval.ground_truth");
      }
      for (const auto& o : backends::read_truth(p).objects) gts.push_back({im.id, o.box, o.class_name});
    }
  }

  std::vector<Annotation> det_rows;
  for (const auto& d : dets) {
    Annotation a;
    a.image_id = d.image_id;
    a.box = d.box;
    a.score = d.score;
    a.phrase = d.class_name;
    a.class_name = d.class_name;
    det_rows.push_back(std::move(a));
  }
  write_annotations(dir / "detections.jsonl", det_rows);

  const auto report = ap_summary(dets, gts);
  write_file(dir / "ap_report.json", report.to_json().dump(2) + "\n");
  write_file(dir / "ap_report.txt", report.to_text());
  std::vector<std::string> names;
  for (const auto& c : catalog_.classes()) names.push_back(c.name);
  const auto cm = confusion_matrix(dets, gts, config_.cm_iou, config_.cm_conf, names);
  write_file(dir / "confusion.json", cm.to_json().dump(2) + "\n");
  write_file(dir / "confusion.txt", cm.to_text());
  spdlog::info("eval: AP50 {:.4f}, AP50:95 {:.4f} over {} test images", report.ap50, report.ap50_95, test.size());
}

}  // namespace autodet
