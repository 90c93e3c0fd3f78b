#pragma once

#include "autodet/backends/protocol.hpp"
#include "autodet/backends/transport.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <memory>
#include <mutex>
#include <string>

namespace autodet::backends {

/// Role-typed backend target.
struct EndpointConfig {
  Role role = Role::detect;
  /// "http://host:port" or "inproc:<name>" for an in-process backend.
  std::string base_url;
  /// Name of the environment variable holding a bearer token; empty for none.
  std::string token_env;
  std::chrono::milliseconds timeout{30000};
  int max_retries = 3;
  int max_in_flight = 4;
  /// Token-bucket refill rate; 0 disables rate limiting.
  double requests_per_second = 0.0;
  std::chrono::milliseconds backoff_base{100};

  /// Throws ValidationError on non-positive timeout or in-flight limit.
  void validate() const;

  /// Defaults per role: reviewers retry once, everything else three times.
  static EndpointConfig defaults(Role role);
  static EndpointConfig from_json(Role role, const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Blocking client for one endpoint. Safe for concurrent use: at most
/// `max_in_flight` calls proceed at once, and the token bucket paces them.
///
/// Transport failures and 5xx answers are retried with exponential backoff
/// under a stable idempotency key. 4xx answers and malformed payloads are not.
class BackendClient {
 public:
  BackendClient(EndpointConfig config, std::shared_ptr<Transport> transport);

  const EndpointConfig& config() const { return config_; }

  DetectResponse detect(const DetectRequest& req);
  GenerateResponse generate(const GenerateRequest& req);
  ReviewResponse review(const ReviewRequest& req);
  TrainResponse train(const TrainRequest& req);
  JobStatus poll(const std::string& job_id);
  /// Polls until the job leaves queued/running. Throws BackendError on
  /// failure status or when `deadline` passes.
  JobStatus wait(const std::string& job_id, std::chrono::milliseconds interval = std::chrono::milliseconds(50),
                 std::chrono::milliseconds deadline = std::chrono::minutes(10));

  /// Attempts made, including retries.
  long attempts() const { return attempts_.load(); }

 private:
  nlohmann::json call(Role expected, const std::string& method, const std::string& path,
                      const nlohmann::json& payload);
  void acquire();
  void release();

  EndpointConfig config_;
  std::shared_ptr<Transport> transport_;
  std::string token_;

  std::mutex mu_;
  std::condition_variable cv_;
  int in_flight_ = 0;
  double tokens_ = 0.0;
  std::chrono::steady_clock::time_point last_refill_;
  std::atomic<long> attempts_{0};
};

}  // namespace autodet::backends
