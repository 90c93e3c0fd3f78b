#include "autodet/backends/mock.hpp"

#include "autodet/common.hpp"
#include "autodet/dataset.hpp"

#include <opencv2/imgcodecs.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>

namespace autodet::backends {

using nlohmann::json;

NoiseModel NoiseModel::from_json(const json& j) {
  NoiseModel n;
  n.jitter = j.value("jitter", n.jitter);
  n.hard_multiplier = j.value("hard_multiplier", n.hard_multiplier);
  n.miss_rate = j.value("miss_rate", n.miss_rate);
  n.decoy_rate = j.value("decoy_rate", n.decoy_rate);
  n.score_scale = j.value("score_scale", n.score_scale);
  return n;
}

json NoiseModel::to_json() const {
  return json{{"jitter", jitter},
              {"hard_multiplier", hard_multiplier},
              {"miss_rate", miss_rate},
              {"decoy_rate", decoy_rate},
              {"score_scale", score_scale}};
}

MockConfig MockConfig::from_json(const json& j, const ClassCatalog& catalog) {
  MockConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("noise")) c.noise = NoiseModel::from_json(j["noise"]);
    const auto policy = j.value("photorealism", std::string("truth"));
    if (policy == "truth") {
      c.photorealism = PhotorealismPolicy::truth;
    } else if (policy == "always_yes") {
      c.photorealism = PhotorealismPolicy::always_yes;
    } else if (policy == "reject_odd_seeds") {
      c.photorealism = PhotorealismPolicy::reject_odd_seeds;
    } else {
      throw ValidationError("unknown photorealism policy \"" + policy + "\"");
    }
    c.unrealistic_rate = j.value("unrealistic_rate", c.unrealistic_rate);
    c.gen_width = j.value("gen_width", c.gen_width);
    c.gen_height = j.value("gen_height", c.gen_height);
  } catch (const json::exception& e) {
    throw ParseError(std::string("mock config: ") + e.what());
  }
  for (const auto& cls : catalog.classes()) c.vocabulary[cls.name] = cls.synonyms;
  return c;
}

json MockBackend::DetectorModel::to_json() const {
  json mem = json::object();
  for (const auto& [id, objs] : memorized) {
    auto& arr = mem[id] = json::array();
    for (const auto& o : objs) arr.push_back({{"class", o.class_name}, {"box", {o.box.x1, o.box.y1, o.box.x2, o.box.y2}}});
  }
  json st = json::object();
  for (const auto& [cls, s] : stats) {
    st[cls] = {{"labels", s.labels}, {"quality", s.quality}, {"recall", s.recall}, {"false_positive", s.false_positive}};
  }
  return json{{"id", id}, {"memorized", mem}, {"stats", st}};
}

MockBackend::DetectorModel MockBackend::DetectorModel::from_json(const json& j) {
  DetectorModel m;
  m.id = j.at("id").get<std::string>();
  for (const auto& [id, arr] : j.at("memorized").items()) {
    auto& objs = m.memorized[id];
    for (const auto& o : arr) {
      const auto& b = o.at("box");
      objs.push_back({o.at("class").get<std::string>(), {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()}});
    }
  }
  for (const auto& [cls, s] : j.at("stats").items()) {
    m.stats[cls] = {s.at("labels").get<long>(), s.at("quality").get<double>(), s.at("recall").get<double>(),
                    s.at("false_positive").get<double>()};
  }
  return m;
}

MockBackend::MockBackend(MockConfig config) : config_(std::move(config)) {
  if (config_.work_dir.empty()) config_.work_dir = std::filesystem::temp_directory_path() / "autodet-mock";
  config_.work_dir = std::filesystem::absolute(config_.work_dir);
  for (auto& r : config_.roots) r = std::filesystem::absolute(r);
}

Handler MockBackend::handler() {
  return [this](const WireRequest& r) { return handle(r); };
}

MockBackend::Counters MockBackend::counters() const {
  std::lock_guard lock(mu_);
  return counters_;
}

namespace {

WireResponse error_response(int status, const std::string& code, const std::string& message) {
  return {status, to_wire(ProtocolErrorBody{code, message}).dump()};
}

bool phrase_names(const std::map<std::string, std::vector<std::string>>& vocab, const std::string& cls,
                  const std::string& phrase) {
  if (normalize_phrase(cls) == phrase) return true;
  auto it = vocab.find(cls);
  if (it == vocab.end()) return false;
  return std::any_of(it->second.begin(), it->second.end(),
                     [&](const std::string& s) { return normalize_phrase(s) == phrase; });
}

Box jitter_box(const Box& b, double sigma, Rng& rng, double width, double height) {
  const double w = b.width();
  const double h = b.height();
  const double dx1 = rng.normal() * sigma * w;
  const double dy1 = rng.normal() * sigma * h;
  const double dx2 = rng.normal() * sigma * w;
  const double dy2 = rng.normal() * sigma * h;
  Box out{b.x1 + dx1, b.y1 + dy1, b.x2 + dx2, b.y2 + dy2};
  if (out.x1 > out.x2) std::swap(out.x1, out.x2);
  if (out.y1 > out.y2) std::swap(out.y1, out.y2);
  return clamp_to(out, width, height);
}

Box random_box(Rng& rng, double width, double height) {
  const double w = rng.uniform(0.15, 0.4) * width;
  const double h = rng.uniform(0.15, 0.4) * height;
  const double x = rng.uniform(0, width - w);
  const double y = rng.uniform(0, height - h);
  return {x, y, x + w, y + h};
}

Box box_from_json(const json& b) { return {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()}; }

}  // namespace

WireResponse MockBackend::handle(const WireRequest& request) {
  try {
    if (request.method == "GET" && request.path.rfind("/jobs/", 0) == 0) {
      return {200, to_wire(job(request.path.substr(6))).dump()};
    }
    if (request.method != "POST") return error_response(405, "method_not_allowed", request.method);
    if (request.path == "/healthz") return {200, json{{"protocol_version", kProtocolVersion}, {"status", "ok"}}.dump()};

    const json body = parse_body(request.body);
    auto key_it = request.headers.find("Idempotency-Key");
    const std::string key = request.path + "#" + (key_it != request.headers.end() ? key_it->second : idempotency_key(body));

    std::lock_guard lock(mu_);
    if (auto hit = replies_.find(key); hit != replies_.end()) {
      ++counters_.replayed;
      json replay = parse_body(hit->second.body);
      if (body.contains("request_id")) replay["request_id"] = body["request_id"];
      return {hit->second.status, replay.dump()};
    }

    json out;
    if (request.path == "/detect") {
      out = to_wire(detect(from_wire<DetectRequest>(body)));
    } else if (request.path == "/generate") {
      out = to_wire(generate(from_wire<GenerateRequest>(body)));
    } else if (request.path == "/review") {
      out = to_wire(review(from_wire<ReviewRequest>(body)));
    } else if (request.path == "/train") {
      out = to_wire(train(from_wire<TrainRequest>(body)));
    } else {
      return error_response(404, "not_found", request.path);
    }
    WireResponse res{200, out.dump()};
    replies_[key] = res;
    return res;
  } catch (const MalformedPayload& e) {
    return error_response(400, "malformed_payload", e.what());
  } catch (const BackendError& e) {
    return error_response(e.status() ? e.status() : 422, "backend_error", e.what());
  } catch (const Error& e) {
    return error_response(422, "unprocessable", e.what());
  } catch (const std::exception& e) {
    return error_response(500, "internal", e.what());
  }
}

void MockBackend::index_roots() {
  if (roots_indexed_) return;
  roots_indexed_ = true;
  const std::string suffix = ".truth.json";
  std::vector<std::filesystem::path> roots = config_.roots;
  roots.push_back(config_.work_dir);
  for (const auto& root : roots) {
    if (!std::filesystem::exists(root)) continue;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(root)) {
      const auto name = entry.path().filename().string();
      if (!entry.is_regular_file() || name.size() <= suffix.size() ||
          name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) {
        continue;
      }
      const auto image_name = std::filesystem::path(name.substr(0, name.size() - suffix.size()));
      truth_files_.emplace(image_name.stem().string(), entry.path().parent_path() / image_name);
    }
  }
}

SceneTruth MockBackend::truth_for_image(const std::string& image_ref) {
  std::filesystem::path p(image_ref);
  if (p.is_relative()) {
    for (const auto& root : config_.roots) {
      if (std::filesystem::exists(truth_path(root / p))) {
        p = root / p;
        break;
      }
    }
  }
  if (!std::filesystem::exists(truth_path(p))) throw ValidationError("no truth sidecar for image " + image_ref);
  SceneTruth t = read_truth(p);
  truths_[t.id] = t;
  return t;
}

SceneTruth MockBackend::truth_by_id(const std::string& id) {
  if (auto it = truths_.find(id); it != truths_.end()) return it->second;
  auto file = truth_files_.find(id);
  if (file == truth_files_.end()) {
    roots_indexed_ = false;
    truth_files_.clear();
    index_roots();
    file = truth_files_.find(id);
  }
  if (file == truth_files_.end()) throw ValidationError("unknown scene id " + id);
  SceneTruth t = read_truth(file->second);
  truths_[t.id] = t;
  return t;
}

DetectResponse MockBackend::detect(const DetectRequest& req) {
  std::lock_guard lock(mu_);
  ++counters_.detect;
  const SceneTruth truth = truth_for_image(req.image_ref);
  return req.model_ref.empty() ? detect_open_vocabulary(req, truth) : detect_trained(req, truth);
}

DetectResponse MockBackend::detect_open_vocabulary(const DetectRequest& req, const SceneTruth& truth) {
  std::vector<std::string> phrases;
  for (const auto& p : split(req.prompt, ".")) {
    auto n = normalize_phrase(p);
    if (!n.empty()) phrases.push_back(std::move(n));
  }
  if (phrases.empty()) throw MalformedPayload("empty prompt");

  const auto& noise = config_.noise;
  Rng rng(hash_combine(hash_combine(config_.seed, truth.id), normalize_phrase(req.prompt)));
  DetectResponse res{req.request_id, {}};
  bool matched = false;
  for (const auto& obj : truth.objects) {
    // Draw the same amount of randomness per object whether or not it matches,
    // so one prompt's outcome does not shift another object's noise.
    const bool missed = rng.bernoulli(noise.miss_rate);
    const double sigma = noise.jitter * (truth.hard ? noise.hard_multiplier : 1.0);
    const Box box = jitter_box(obj.box, sigma, rng, truth.width, truth.height);
    auto phrase = std::find_if(phrases.begin(), phrases.end(),
                               [&](const std::string& p) { return phrase_names(config_.vocabulary, obj.class_name, p); });
    if (phrase == phrases.end()) continue;
    matched = true;
    if (missed || !box.valid() || box.area() <= 0) continue;
    const double score = noise.score_scale * iou(box, obj.box);
    if (score >= req.box_threshold) res.detections.push_back({box, score, *phrase});
  }
  if (matched && rng.bernoulli(noise.decoy_rate)) {
    const Box box = random_box(rng, truth.width, truth.height);
    const double score = rng.uniform(0.2, 0.7);
    const auto& phrase = phrases[rng.below(phrases.size())];
    if (score >= req.box_threshold) res.detections.push_back({box, score, phrase});
  }
  return res;
}

const MockBackend::DetectorModel& MockBackend::model(const std::string& ref) {
  const std::string prefix = "mock-detector:";
  if (ref.rfind(prefix, 0) != 0) throw ValidationError("unknown detector artifact " + ref);
  const std::string id = ref.substr(prefix.size());
  if (auto it = models_.find(id); it != models_.end()) return it->second;
  const auto file = config_.work_dir / "models" / (id + ".json");
  if (!std::filesystem::exists(file)) throw ValidationError("unknown detector artifact " + ref);
  return models_[id] = DetectorModel::from_json(json::parse(read_file(file)));
}

DetectResponse MockBackend::detect_trained(const DetectRequest& req, const SceneTruth& truth) {
  const DetectorModel& m = model(req.model_ref);
  DetectResponse res{req.request_id, {}};

  if (auto mem = m.memorized.find(truth.id); mem != m.memorized.end()) {
    Rng rng(hash_combine(hash_combine(config_.seed, truth.id), std::string_view("replay")));
    for (const auto& o : mem->second) {
      res.detections.push_back({jitter_box(o.box, 0.005, rng, truth.width, truth.height), 0.9, o.class_name});
    }
    return res;
  }

  // Common random numbers: the draws depend only on the scene, so two models
  // differ solely through their per-class statistics.
  for (std::size_t k = 0; k < truth.objects.size(); ++k) {
    const auto& obj = truth.objects[k];
    Rng rng(hash_combine(hash_combine(config_.seed, truth.id), static_cast<std::uint64_t>(k)));
    const double u = rng.uniform();
    auto st = m.stats.find(obj.class_name);
    if (st == m.stats.end() || st->second.labels == 0) continue;
    const auto& s = st->second;
    if (u < 0.02 + 0.6 * (1.0 - s.recall)) continue;
    const double sigma = 0.02 + 0.2 / std::sqrt(static_cast<double>(s.labels)) + 0.5 * (1.0 - s.quality);
    const Box box = jitter_box(obj.box, sigma, rng, truth.width, truth.height);
    if (!box.valid() || box.area() <= 0) continue;
    res.detections.push_back({box, 0.3 + 0.65 * iou(box, obj.box), obj.class_name});
  }
  Rng fp(hash_combine(hash_combine(config_.seed, truth.id), std::string_view("false-positive")));
  for (const auto& [cls, s] : m.stats) {
    const double u = fp.uniform();
    const Box box = random_box(fp, truth.width, truth.height);
    const double score = fp.uniform(0.3, 0.7);
    if (s.labels > 0 && u < 0.5 * s.false_positive) res.detections.push_back({box, score, cls});
  }
  return res;
}

GenerateResponse MockBackend::generate(const GenerateRequest& req) {
  std::lock_guard lock(mu_);
  ++counters_.generate;
  const std::string prompt = normalize_phrase(req.prompt);

  std::string cls;
  for (const auto& [name, syn] : config_.vocabulary) {
    if (prompt.find(normalize_phrase(name)) != std::string::npos && name.size() > cls.size()) cls = name;
  }
  if (cls.empty()) {
    const auto parts = split(req.model_ref, ":");
    if (parts.size() >= 2 && config_.vocabulary.contains(parts[1])) cls = parts[1];
  }
  if (cls.empty()) throw ValidationError("prompt names no known class: " + req.prompt);
  const bool multiple = prompt.find("multiple machines") != std::string::npos;

  GenerateResponse res{req.request_id, {}};
  for (int i = 0; i < req.count; ++i) {
    const std::uint64_t seed = req.seed + static_cast<std::uint64_t>(i);
    const std::uint64_t h = hash_combine(hash_combine(fnv1a(req.model_ref), prompt), seed);
    Rng rng(h);
    SceneTruth t;
    t.id = "gen-" + hex64(h);
    t.width = config_.gen_width;
    t.height = config_.gen_height;
    t.seed = seed;
    t.photoreal = !rng.bernoulli(config_.unrealistic_rate);
    const std::size_t n = multiple ? 2 + rng.below(3) : 1;
    t.objects = place_objects(h, std::vector<std::string>(n, cls), t.width, t.height);

    const auto path = config_.work_dir / "generated" / (t.id + ".png");
    std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), render_scene(t))) throw Error("cannot write " + path.string());
    write_truth(path, t);
    truths_[t.id] = t;
    ++counters_.generated_images;
    res.images.push_back({path.string(), t.width, t.height});
  }
  return res;
}

ReviewResponse MockBackend::review(const ReviewRequest& req) {
  std::lock_guard lock(mu_);
  ++counters_.review;
  if (req.image_ref.empty()) throw ValidationError("mock reviewer needs an image_ref");

  if (req.kind == ReviewKind::photorealism) {
    const SceneTruth t = truth_for_image(req.image_ref);
    bool suitable = true;
    bool authentic = true;
    switch (config_.photorealism) {
      case PhotorealismPolicy::truth: suitable = authentic = t.photoreal; break;
      case PhotorealismPolicy::always_yes: break;
      case PhotorealismPolicy::reject_odd_seeds: authentic = t.seed % 2 == 0; break;
    }
    return {req.request_id, std::string(suitable ? "YES" : "NO") + "\n" + (authentic ? "YES" : "NO"), "mock"};
  }

  const auto sidecar = std::filesystem::path(req.image_ref + ".json");
  if (!std::filesystem::exists(sidecar)) throw ValidationError("overlay has no sidecar: " + req.image_ref);
  const json overlay = json::parse(read_file(sidecar));
  const SceneTruth t = truth_by_id(overlay.at("source_id").get<std::string>());
  const double scale = overlay.at("scale").get<double>();

  struct Drawn {
    std::string cls;
    Box box;
  };
  std::vector<Drawn> drawn;
  for (const auto& b : overlay.at("boxes")) {
    const Box s = box_from_json(b.at("box"));
    drawn.push_back({b.at("class").get<std::string>(), {s.x1 / scale, s.y1 / scale, s.x2 / scale, s.y2 / scale}});
  }

  // Greedy one-to-one matching by IoU over same-class pairs.
  struct Pair {
    double iou;
    std::size_t d, g;
  };
  std::vector<Pair> pairs;
  for (std::size_t d = 0; d < drawn.size(); ++d) {
    for (std::size_t g = 0; g < t.objects.size(); ++g) {
      if (drawn[d].cls != t.objects[g].class_name) continue;
      const double v = iou(drawn[d].box, t.objects[g].box);
      if (v > 0) pairs.push_back({v, d, g});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });
  std::vector<double> drawn_iou(drawn.size(), 0.0);
  std::vector<bool> truth_used(t.objects.size(), false);
  std::vector<bool> drawn_used(drawn.size(), false);
  for (const auto& p : pairs) {
    if (drawn_used[p.d] || truth_used[p.g]) continue;
    drawn_used[p.d] = truth_used[p.g] = true;
    drawn_iou[p.d] = p.iou;
  }
  const bool precision = std::all_of(drawn_iou.begin(), drawn_iou.end(), [](double v) { return v >= 0.75; });
  bool recall = true;
  for (const auto& g : t.objects) {
    const bool covered = std::any_of(drawn.begin(), drawn.end(), [&](const Drawn& d) {
      return d.cls == g.class_name && iou(d.box, g.box) >= 0.5;
    });
    recall = recall && covered;
  }
  bool fit = true;
  for (std::size_t d = 0; d < drawn.size(); ++d) {
    if (drawn_used[d] && drawn_iou[d] < 0.85) fit = false;
  }

  auto yn = [](bool v) { return v ? "\"Yes\"" : "\"No\""; };
  std::string text = "Checked " + std::to_string(drawn.size()) + " boxes against the target objects.\n```json\n{\"Precision\": " +
                     yn(precision) + ", \"Recall\": " + yn(recall) + ", \"Fit\": " + yn(fit) + "}\n```";
  return {req.request_id, text, "mock"};
}

std::string MockBackend::train_detector(const DetectorTrainSpec& spec) {
  std::filesystem::path manifest(spec.manifest_ref);
  if (manifest.is_relative()) {
    for (const auto& root : config_.roots) {
      if (std::filesystem::exists(root / manifest)) {
        manifest = root / manifest;
        break;
      }
    }
  }
  const std::string content = read_file(manifest);
  DetectorModel m;
  m.id = hex64(hash_combine(hash_combine(fnv1a(content), spec.model), spec.seed));

  struct Acc {
    long labels = 0;
    double iou_sum = 0.0;
    long fp = 0;
    long truth = 0;
    long covered = 0;
  };
  std::map<std::string, Acc> acc;
  for (const auto& row : read_jsonl(manifest)) {
    const std::string id = row.at("id").get<std::string>();
    auto& labels = m.memorized[id];
    for (const auto& a : row.at("annotations")) labels.push_back({a.at("class").get<std::string>(), box_from_json(a.at("box"))});
    const SceneTruth t = truth_by_id(id);
    for (const auto& l : labels) {
      double best = 0.0;
      for (const auto& g : t.objects) {
        if (g.class_name == l.class_name) best = std::max(best, iou(l.box, g.box));
      }
      auto& a = acc[l.class_name];
      ++a.labels;
      a.iou_sum += best;
      if (best < 0.5) ++a.fp;
    }
    for (const auto& g : t.objects) {
      auto& a = acc[g.class_name];
      ++a.truth;
      const bool hit = std::any_of(labels.begin(), labels.end(), [&](const TruthObject& l) {
        return l.class_name == g.class_name && iou(l.box, g.box) >= 0.5;
      });
      if (hit) ++a.covered;
    }
  }
  for (const auto& [cls, a] : acc) {
    ClassStats s;
    s.labels = a.labels;
    s.quality = a.labels ? a.iou_sum / static_cast<double>(a.labels) : 0.0;
    s.false_positive = a.labels ? static_cast<double>(a.fp) / static_cast<double>(a.labels) : 0.0;
    s.recall = a.truth ? static_cast<double>(a.covered) / static_cast<double>(a.truth) : 0.0;
    m.stats[cls] = s;
  }
  write_file(config_.work_dir / "models" / (m.id + ".json"), m.to_json().dump() + "\n");
  const std::string ref = "mock-detector:" + m.id;
  models_[m.id] = std::move(m);
  return ref;
}

TrainResponse MockBackend::train(const TrainRequest& req) {
  std::lock_guard lock(mu_);
  ++counters_.train;
  JobStatus status;
  if (const auto* d = std::get_if<DiversificationJobSpec>(&req.job)) {
    if (d->train_image_refs.size() < 3) throw ValidationError("instance " + d->instance_name + " has fewer than 3 images");
    status.job_id = "job-" + hex64(fnv1a(to_json(*d).dump()));
    status.artifact_ref = "mock-dreambooth:" + d->class_name + ":" + d->instance_name + ":" + std::to_string(d->steps_multiplier);
  } else {
    const auto& spec = std::get<DetectorTrainSpec>(req.job);
    status.artifact_ref = train_detector(spec);
    status.job_id = "job-" + status.artifact_ref.substr(status.artifact_ref.find(':') + 1);
  }
  status.state = JobState::succeeded;
  jobs_[status.job_id] = status;
  return {req.request_id, status.job_id};
}

JobStatus MockBackend::job(const std::string& job_id) {
  std::lock_guard lock(mu_);
  auto it = jobs_.find(job_id);
  if (it == jobs_.end()) throw BackendError("unknown job " + job_id, false, 404);
  return it->second;
}

}  // namespace autodet::backends
