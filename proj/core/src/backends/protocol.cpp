#include "autodet/backends/protocol.hpp"

#include <array>

namespace autodet::backends {

using nlohmann::json;

std::string_view to_string(Role r) {
  switch (r) {
    case Role::detect: return "detect";
    case Role::generate: return "generate";
    case Role::review: return "review";
    case Role::train: return "train";
  }
  return "detect";
}

Role parse_role(std::string_view s) {
  if (s == "detect") return Role::detect;
  if (s == "generate") return Role::generate;
  if (s == "review") return Role::review;
  if (s == "train") return Role::train;
  throw ParseError("unknown backend role \"" + std::string(s) + "\"");
}

std::string_view to_string(ReviewKind k) { return k == ReviewKind::photorealism ? "photorealism" : "pseudo_label"; }

ReviewKind parse_review_kind(std::string_view s) {
  if (s == "pseudo_label") return ReviewKind::pseudo_label;
  if (s == "photorealism") return ReviewKind::photorealism;
  throw MalformedPayload("unknown review kind \"" + std::string(s) + "\"");
}

std::string_view to_string(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::succeeded: return "succeeded";
    case JobState::failed: return "failed";
  }
  return "queued";
}

JobState parse_job_state(std::string_view s) {
  if (s == "queued") return JobState::queued;
  if (s == "running") return JobState::running;
  if (s == "succeeded") return JobState::succeeded;
  if (s == "failed") return JobState::failed;
  throw MalformedPayload("unknown job state \"" + std::string(s) + "\"");
}

json default_detector_hyperparameters(std::string_view model) {
  struct Variant {
    std::string_view name;
    double lr0;
    int batch;
    std::string_view schedule;
    int warmup_epochs;
  };
  static constexpr std::array<Variant, 4> kVariants = {{
      {"yolov8n", 27e-5, 64, "cosine", 4},
      {"yolov8s", 7.3e-5, 32, "cosine", 1},
      {"yolov10n", 50e-5, 32, "cosine", 3},
      {"yolov10s", 7.0e-5, 32, "linear", 4},
  }};
  const Variant* v = nullptr;
  for (const auto& cand : kVariants) {
    if (cand.name == model) v = &cand;
  }
  if (v == nullptr) throw ValidationError("no detector defaults for model \"" + std::string(model) + "\"");
  return json{
      {"epochs", 60},
      {"optimizer", "AdamW"},
      {"beta1", 0.9},
      {"beta2", 0.999},
      {"weight_decay", 5e-4},
      {"mixed_precision", "fp16"},
      {"imgsz", 640},
      {"lr0", v->lr0},
      {"lrf", 0.5},
      {"batch", v->batch},
      {"lr_schedule", std::string(v->schedule)},
      {"warmup_epochs", v->warmup_epochs},
      {"warmup_momentum", 0.8},
      {"warmup_bias_lr", 0.1},
      {"box", 7.5},
      {"cls", 0.5},
      {"dfl", 1.5},
      {"hsv_s", 0.7},
      {"hsv_v", 0.4},
      {"hsv_h", 0.015},
      {"translate", 0.1},
      {"fliplr", 0.5},
      {"scale", 0.5},
      {"mosaic", 1.0},
      {"close_mosaic", 10},
  };
}

namespace {

json envelope(const std::string& request_id) {
  json j;
  j["protocol_version"] = kProtocolVersion;
  if (!request_id.empty()) j["request_id"] = request_id;
  return j;
}

void check_version(const json& j) {
  if (!j.is_object()) throw MalformedPayload("payload is not a JSON object");
  auto it = j.find("protocol_version");
  if (it == j.end() || !it->is_number_integer()) throw MalformedPayload("missing protocol_version");
  if (it->get<int>() != kProtocolVersion) {
    throw MalformedPayload("unsupported protocol_version " + std::to_string(it->get<int>()));
  }
}

// Field accessors that turn nlohmann type errors into MalformedPayload.
template <typename T>
T field(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw MalformedPayload(std::string("missing field \"") + key + "\"");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw MalformedPayload(std::string("field \"") + key + "\" has the wrong type");
  }
}

template <typename T>
T field_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j[key].is_null()) return fallback;
  return field<T>(j, key);
}

json box_json(const Box& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

Box box_from(const json& j) {
  if (!j.is_array() || j.size() != 4) throw MalformedPayload("box must be [x1, y1, x2, y2]");
  Box b;
  try {
    b = {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  } catch (const json::exception&) {
    throw MalformedPayload("box coordinates must be numbers");
  }
  if (!b.valid()) throw MalformedPayload("box corners are not ordered or not finite");
  return b;
}

}  // namespace

json to_json(const DiversificationJobSpec& s) {
  return json{{"kind", "diversification"},
              {"instance_name", s.instance_name},
              {"class_name", s.class_name},
              {"train_image_refs", s.train_image_refs},
              {"max_steps", s.max_steps},
              {"steps_multiplier", s.steps_multiplier},
              {"prior_loss_weight", s.prior_loss_weight},
              {"snr_gamma", s.snr_gamma},
              {"lr_unet", s.lr_unet},
              {"lr_text_encoder", s.lr_text_encoder},
              {"resolution", s.resolution},
              {"class_prior_prompt", s.class_prior_prompt},
              {"instance_prompt", s.instance_prompt}};
}

DiversificationJobSpec job_spec_from_json(const json& j) {
  DiversificationJobSpec s;
  s.instance_name = field<std::string>(j, "instance_name");
  s.class_name = field<std::string>(j, "class_name");
  s.train_image_refs = field<std::vector<std::string>>(j, "train_image_refs");
  s.max_steps = field<int>(j, "max_steps");
  s.steps_multiplier = field<int>(j, "steps_multiplier");
  s.prior_loss_weight = field<double>(j, "prior_loss_weight");
  s.snr_gamma = field<double>(j, "snr_gamma");
  s.lr_unet = field<double>(j, "lr_unet");
  s.lr_text_encoder = field<double>(j, "lr_text_encoder");
  s.resolution = field<int>(j, "resolution");
  s.class_prior_prompt = field<std::string>(j, "class_prior_prompt");
  s.instance_prompt = field<std::string>(j, "instance_prompt");
  return s;
}

json to_wire(const DetectRequest& r) {
  auto j = envelope(r.request_id);
  j["image_ref"] = r.image_ref;
  j["prompt"] = r.prompt;
  j["box_threshold"] = r.box_threshold;
  j["text_threshold"] = r.text_threshold;
  if (!r.model_ref.empty()) j["model_ref"] = r.model_ref;
  return j;
}

json to_wire(const DetectResponse& r) {
  auto j = envelope(r.request_id);
  auto& arr = j["detections"] = json::array();
  for (const auto& d : r.detections) arr.push_back({{"box", box_json(d.box)}, {"score", d.score}, {"phrase", d.phrase}});
  return j;
}

json to_wire(const GenerateRequest& r) {
  auto j = envelope(r.request_id);
  j["model_ref"] = r.model_ref;
  j["prompt"] = r.prompt;
  j["seed"] = r.seed;
  j["count"] = r.count;
  return j;
}

json to_wire(const GenerateResponse& r) {
  auto j = envelope(r.request_id);
  auto& arr = j["images"] = json::array();
  for (const auto& im : r.images) arr.push_back({{"ref", im.ref}, {"width", im.width}, {"height", im.height}});
  return j;
}

json to_wire(const ReviewRequest& r) {
  auto j = envelope(r.request_id);
  j["kind"] = std::string(to_string(r.kind));
  j["image_ref"] = r.image_ref;
  if (!r.image_base64.empty()) j["image_base64"] = r.image_base64;
  j["system_prompt"] = r.system_prompt;
  j["user_prompt"] = r.user_prompt;
  return j;
}

json to_wire(const ReviewResponse& r) {
  auto j = envelope(r.request_id);
  j["text"] = r.text;
  j["reviewer"] = r.reviewer;
  return j;
}

json to_wire(const TrainRequest& r) {
  auto j = envelope(r.request_id);
  if (const auto* d = std::get_if<DiversificationJobSpec>(&r.job)) {
    j["job"] = to_json(*d);
  } else {
    const auto& t = std::get<DetectorTrainSpec>(r.job);
    j["job"] = {{"kind", "detector"},
                {"manifest_ref", t.manifest_ref},
                {"model", t.model},
                {"hyperparameters", t.hyperparameters},
                {"seed", t.seed}};
  }
  return j;
}

json to_wire(const TrainResponse& r) {
  auto j = envelope(r.request_id);
  j["job_id"] = r.job_id;
  return j;
}

json to_wire(const JobStatus& r) {
  auto j = envelope("");
  j["job_id"] = r.job_id;
  j["state"] = std::string(to_string(r.state));
  if (!r.artifact_ref.empty()) j["artifact_ref"] = r.artifact_ref;
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

json to_wire(const ProtocolErrorBody& r) {
  auto j = envelope("");
  j["error"] = {{"code", r.code}, {"message", r.message}};
  return j;
}

template <>
DetectRequest from_wire<DetectRequest>(const json& j) {
  check_version(j);
  DetectRequest r;
  r.request_id = field_or<std::string>(j, "request_id", "");
  r.image_ref = field<std::string>(j, "image_ref");
  r.prompt = field<std::string>(j, "prompt");
  r.box_threshold = field_or<double>(j, "box_threshold", 0.27);
  r.text_threshold = field_or<double>(j, "text_threshold", 0.25);
  r.model_ref = field_or<std::string>(j, "model_ref", "");
  return r;
}

template <>
DetectResponse from_wire<DetectResponse>(const json& j) {
  check_version(j);
  DetectResponse r;
  r.request_id = field_or<std::string>(j, "request_id", "");
  const auto arr = field<json>(j, "detections");
  if (!arr.is_array()) throw MalformedPayload("detections must be an array");
  for (const auto& d : arr) {
    if (!d.is_object()) throw MalformedPayload("detection must be an object");
    WireDetection w;
    w.box = box_from(field<json>(d, "box"));
    w.score = field<double>(d, "score");
    if (!(w.score >= 0.0 && w.score <= 1.0)) throw MalformedPayload("detection score outside [0, 1]");
    w.phrase = field<std::string>(d, "phrase");
    r.detections.push_back(std::move(w));
  }
  return r;
}

template <>
GenerateRequest from_wire<GenerateRequest>(const json& j) {
  check_version(j);
  GenerateRequest r;
  r.request_id = field_or<std::string>(j, "request_id", "");
  r.model_ref = field<std::string>(j, "model_ref");
  r.prompt = field<std::string>(j, "prompt");
  r.seed = field<std::uint64_t>(j, "seed");
  r.count = field<int>(j, "count");
  if (r.count < 0) throw MalformedPayload("count must be non-negative");
  return r;
}

template <>
GenerateResponse from_wire<GenerateResponse>(const json& j) {
  check_version(j);
  GenerateResponse r;
  r.request_id = field_or<std::string>(j, "request_id", "");
  const auto arr = field<json>(j, "images");
  if (!arr.is_array()) throw MalformedPayload("images must be an array");
  for (const auto& im : arr) {
    r.images.push_back({field<std::string>(im, "ref"), field<int>(im, "width"), field<int>(im, "height")});
  }
  return r;
}

template <>
ReviewRequest from_wire<ReviewRequest>(const json& j) {
  check_version(j);
  ReviewRequest r;
  r.request_id = field_or<std::string>(j, "request_id", "");
  r.kind = parse_review_kind(field<std::string>(j, "kind"));
  r.image_ref = field_or<std::string>(j, "image_ref", "");
  r.image_base64 = field_or<std::string>(j, "image_base64", "");
  if (r.image_ref.empty() && r.image_base64.empty()) throw MalformedPayload("review needs image_ref or image_base64");
  r.system_prompt = field_or<std::string>(j, "system_prompt", "");
  r.user_prompt = field<std::string>(j, "user_prompt");
  return r;
}

template <>
ReviewResponse from_wire<ReviewResponse>(const json& j) {
  check_version(j);
  return {field_or<std::string>(j, "request_id", ""), field<std::string>(j, "text"),
          field_or<std::string>(j, "reviewer", "")};
}

template <>
TrainRequest from_wire<TrainRequest>(const json& j) {
  check_version(j);
  TrainRequest r;
  r.request_id = field_or<std::string>(j, "request_id", "");
  const auto job = field<json>(j, "job");
  const auto kind = field<std::string>(job, "kind");
  if (kind == "diversification") {
    r.job = job_spec_from_json(job);
  } else if (kind == "detector") {
    DetectorTrainSpec t;
    t.manifest_ref = field<std::string>(job, "manifest_ref");
    t.model = field<std::string>(job, "model");
    t.hyperparameters = field_or<json>(job, "hyperparameters", json::object());
    t.seed = field_or<std::uint64_t>(job, "seed", 0);
    r.job = std::move(t);
  } else {
    throw MalformedPayload("unknown job kind \"" + kind + "\"");
  }
  return r;
}

template <>
TrainResponse from_wire<TrainResponse>(const json& j) {
  check_version(j);
  return {field_or<std::string>(j, "request_id", ""), field<std::string>(j, "job_id")};
}

template <>
JobStatus from_wire<JobStatus>(const json& j) {
  check_version(j);
  JobStatus s;
  s.job_id = field<std::string>(j, "job_id");
  s.state = parse_job_state(field<std::string>(j, "state"));
  s.artifact_ref = field_or<std::string>(j, "artifact_ref", "");
  s.error = field_or<std::string>(j, "error", "");
  return s;
}

template <>
ProtocolErrorBody from_wire<ProtocolErrorBody>(const json& j) {
  check_version(j);
  const auto err = field<json>(j, "error");
  return {field<std::string>(err, "code"), field<std::string>(err, "message")};
}

json parse_body(std::string_view body) {
  try {
    return json::parse(body);
  } catch (const json::parse_error& e) {
    throw MalformedPayload(std::string("body is not JSON: ") + e.what());
  }
}

std::string idempotency_key(const json& payload) {
  json copy = payload;
  if (copy.is_object()) {
    copy.erase("request_id");
    copy.erase("idempotency_key");
  }
  return hex64(fnv1a(copy.dump()));
}

}  // namespace autodet::backends
