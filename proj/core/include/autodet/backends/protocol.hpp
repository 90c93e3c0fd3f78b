#pragma once

// Wire payloads for the four model roles. All bodies are JSON objects carrying
// `protocol_version`; boxes are pixel xyxy floats with origin top-left; images
// travel by reference (path or URL), except review overlays which may also be
// inlined as base64.
//
//   POST /detect    DetectRequest    -> DetectResponse
//   POST /generate  GenerateRequest  -> GenerateResponse
//   POST /review    ReviewRequest    -> ReviewResponse
//   POST /train     TrainRequest     -> TrainResponse
//   GET  /jobs/{id}                  -> JobStatus
//
// Failures answer with a non-2xx status and {"protocol_version", "error": {"code", "message"}}.

#include "autodet/common.hpp"
#include "autodet/geometry.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace autodet::backends {

inline constexpr int kProtocolVersion = 1;

enum class Role { detect, generate, review, train };
std::string_view to_string(Role r);
Role parse_role(std::string_view s);

/// Payload could not be decoded or violates the schema. Never retried.
class MalformedPayload : public ParseError {
 public:
  using ParseError::ParseError;
};

/// A request failed at the backend or in transit.
class BackendError : public Error {
 public:
  BackendError(const std::string& what, bool retryable, int status = 0)
      : Error(what), retryable_(retryable), status_(status) {}
  bool retryable() const { return retryable_; }
  int status() const { return status_; }

 private:
  bool retryable_;
  int status_;
};

struct WireDetection {
  Box box;
  double score = 0.0;
  std::string phrase;
};

struct DetectRequest {
  std::string request_id;
  std::string image_ref;
  std::string prompt;
  double box_threshold = 0.27;
  double text_threshold = 0.25;
  /// Empty selects the open-vocabulary detector; otherwise a trained detector
  /// artifact returned by /train.
  std::string model_ref;
};

struct DetectResponse {
  std::string request_id;
  std::vector<WireDetection> detections;
};

struct GenerateRequest {
  std::string request_id;
  std::string model_ref;
  std::string prompt;
  std::uint64_t seed = 0;
  int count = 1;
};

struct GeneratedImage {
  std::string ref;
  int width = 0;
  int height = 0;
};

struct GenerateResponse {
  std::string request_id;
  std::vector<GeneratedImage> images;
};

enum class ReviewKind { pseudo_label, photorealism };
std::string_view to_string(ReviewKind k);
ReviewKind parse_review_kind(std::string_view s);

struct ReviewRequest {
  std::string request_id;
  ReviewKind kind = ReviewKind::pseudo_label;
  std::string image_ref;
  std::string image_base64;  // optional inline overlay
  std::string system_prompt;
  std::string user_prompt;
};

struct ReviewResponse {
  std::string request_id;
  std::string text;
  std::string reviewer;
};

/// Subject-driven fine-tuning job. The diffusion loss (reconstruction plus
/// weighted prior preservation, Min-SNR timestep weights) runs in the backend;
/// these fields are its knobs.
struct DiversificationJobSpec {
  std::string instance_name;
  std::string class_name;
  std::vector<std::string> train_image_refs;
  int max_steps = 0;
  int steps_multiplier = 120;
  double prior_loss_weight = 1.0;
  double snr_gamma = 5.0;
  double lr_unet = 1e-4;
  double lr_text_encoder = 5e-6;
  int resolution = 1024;
  std::string class_prior_prompt;
  std::string instance_prompt;

  friend bool operator==(const DiversificationJobSpec&, const DiversificationJobSpec&) = default;
};

/// Real-time detector training job over a dataset manifest.
struct DetectorTrainSpec {
  std::string manifest_ref;
  std::string model = "yolov8n";
  nlohmann::json hyperparameters = nlohmann::json::object();
  std::uint64_t seed = 0;

  friend bool operator==(const DetectorTrainSpec&, const DetectorTrainSpec&) = default;
};

/// Detector hyperparameter defaults per model variant (yolov8n, yolov8s, yolov10n, yolov10s).
nlohmann::json default_detector_hyperparameters(std::string_view model);

using TrainJob = std::variant<DiversificationJobSpec, DetectorTrainSpec>;

struct TrainRequest {
  std::string request_id;
  TrainJob job;
};

struct TrainResponse {
  std::string request_id;
  std::string job_id;
};

enum class JobState { queued, running, succeeded, failed };
std::string_view to_string(JobState s);
JobState parse_job_state(std::string_view s);

struct JobStatus {
  std::string job_id;
  JobState state = JobState::queued;
  std::string artifact_ref;
  std::string error;
};

struct ProtocolErrorBody {
  std::string code;
  std::string message;
};

// Serialization. to_wire() stamps protocol_version; from_wire() checks it and
// throws MalformedPayload on any schema violation.
nlohmann::json to_wire(const DetectRequest& r);
nlohmann::json to_wire(const DetectResponse& r);
nlohmann::json to_wire(const GenerateRequest& r);
nlohmann::json to_wire(const GenerateResponse& r);
nlohmann::json to_wire(const ReviewRequest& r);
nlohmann::json to_wire(const ReviewResponse& r);
nlohmann::json to_wire(const TrainRequest& r);
nlohmann::json to_wire(const TrainResponse& r);
nlohmann::json to_wire(const JobStatus& r);
nlohmann::json to_wire(const ProtocolErrorBody& r);

nlohmann::json to_json(const DiversificationJobSpec& s);
DiversificationJobSpec job_spec_from_json(const nlohmann::json& j);

template <typename T>
T from_wire(const nlohmann::json& j);

/// Parses text into JSON, raising MalformedPayload on failure.
nlohmann::json parse_body(std::string_view body);

/// Key shared by all retries of one logical request: a hash of the payload
/// with request bookkeeping fields removed.
std::string idempotency_key(const nlohmann::json& payload);

}  // namespace autodet::backends
