#include "autodet/backends/client.hpp"

#include <spdlog/spdlog.h>

#include <cstdlib>
#include <thread>

namespace autodet::backends {

using nlohmann::json;

void EndpointConfig::validate() const {
  if (base_url.empty()) throw ValidationError(std::string(to_string(role)) + " endpoint has no base_url");
  if (timeout.count() <= 0) throw ValidationError(std::string(to_string(role)) + " endpoint timeout must be positive");
  if (max_in_flight <= 0) throw ValidationError(std::string(to_string(role)) + " endpoint max_in_flight must be positive");
  if (max_retries < 0) throw ValidationError(std::string(to_string(role)) + " endpoint max_retries must be >= 0");
  if (requests_per_second < 0) throw ValidationError("requests_per_second must be >= 0");
}

EndpointConfig EndpointConfig::defaults(Role role) {
  EndpointConfig c;
  c.role = role;
  c.base_url = "inproc:mock";
  if (role == Role::review) c.max_retries = 1;
  return c;
}

EndpointConfig EndpointConfig::from_json(Role role, const json& j) {
  EndpointConfig c = defaults(role);
  try {
    if (j.contains("role") && parse_role(j["role"].get<std::string>()) != role) {
      throw ValidationError("endpoint declared as " + j["role"].get<std::string>() + " configured for " +
                            std::string(to_string(role)));
    }
    c.base_url = j.value("base_url", c.base_url);
    c.token_env = j.value("token_env", c.token_env);
    c.timeout = std::chrono::milliseconds(j.value("timeout_ms", static_cast<long>(c.timeout.count())));
    c.max_retries = j.value("max_retries", c.max_retries);
    c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
    c.requests_per_second = j.value("requests_per_second", c.requests_per_second);
    c.backoff_base = std::chrono::milliseconds(j.value("backoff_ms", static_cast<long>(c.backoff_base.count())));
  } catch (const json::exception& e) {
    throw ParseError(std::string(to_string(role)) + " endpoint: " + e.what());
  }
  c.validate();
  return c;
}

json EndpointConfig::to_json() const {
  return json{{"role", std::string(to_string(role))},
              {"base_url", base_url},
              {"token_env", token_env},
              {"timeout_ms", timeout.count()},
              {"max_retries", max_retries},
              {"max_in_flight", max_in_flight},
              {"requests_per_second", requests_per_second},
              {"backoff_ms", backoff_base.count()}};
}

BackendClient::BackendClient(EndpointConfig config, std::shared_ptr<Transport> transport)
    : config_(std::move(config)), transport_(std::move(transport)) {
  config_.validate();
  if (!config_.token_env.empty()) {
    const char* v = std::getenv(config_.token_env.c_str());
    if (v == nullptr) throw ValidationError("environment variable " + config_.token_env + " is not set");
    token_ = v;
  }
  tokens_ = std::max(1.0, config_.requests_per_second);
  last_refill_ = std::chrono::steady_clock::now();
}

void BackendClient::acquire() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return in_flight_ < config_.max_in_flight; });
  ++in_flight_;
  if (config_.requests_per_second <= 0) return;
  for (;;) {
    const auto now = std::chrono::steady_clock::now();
    const double elapsed = std::chrono::duration<double>(now - last_refill_).count();
    last_refill_ = now;
    tokens_ = std::min(std::max(1.0, config_.requests_per_second), tokens_ + elapsed * config_.requests_per_second);
    if (tokens_ >= 1.0) {
      tokens_ -= 1.0;
      return;
    }
    const auto wait = std::chrono::duration<double>((1.0 - tokens_) / config_.requests_per_second);
    lock.unlock();
    std::this_thread::sleep_for(wait);
    lock.lock();
  }
}

void BackendClient::release() {
  {
    std::lock_guard lock(mu_);
    --in_flight_;
  }
  cv_.notify_one();
}

json BackendClient::call(Role expected, const std::string& method, const std::string& path, const json& payload) {
  if (config_.role != expected) {
    throw ValidationError("endpoint " + config_.base_url + " has role " + std::string(to_string(config_.role)) +
                          ", cannot serve " + std::string(to_string(expected)));
  }
  WireRequest req{method, path, payload.is_null() ? std::string() : payload.dump(), {}};
  req.headers["Content-Type"] = "application/json";
  if (!payload.is_null()) req.headers["Idempotency-Key"] = idempotency_key(payload);
  if (!token_.empty()) req.headers["Authorization"] = "Bearer " + token_;

  acquire();
  struct Release {
    BackendClient* self;
    ~Release() { self->release(); }
  } guard{this};

  for (int attempt = 0;; ++attempt) {
    ++attempts_;
    std::string failure;
    int status = 0;
    try {
      const WireResponse res = transport_->send(req);
      status = res.status;
      if (res.status >= 200 && res.status < 300) return parse_body(res.body);
      std::string message = "HTTP " + std::to_string(res.status);
      try {
        const auto err = from_wire<ProtocolErrorBody>(parse_body(res.body));
        message += " " + err.code + ": " + err.message;
      } catch (const MalformedPayload&) {
      }
      if (res.status < 500) throw BackendError(config_.base_url + path + ": " + message, false, res.status);
      failure = message;
    } catch (const BackendError& e) {
      if (!e.retryable()) throw;
      failure = e.what();
    }
    if (attempt >= config_.max_retries) {
      throw BackendError(config_.base_url + path + ": giving up after " + std::to_string(attempt + 1) +
                             " attempts: " + failure,
                         true, status);
    }
    spdlog::warn("{}{} attempt {} failed ({}), retrying", config_.base_url, path, attempt + 1, failure);
    std::this_thread::sleep_for(config_.backoff_base * (1 << std::min(attempt, 10)));
  }
}

DetectResponse BackendClient::detect(const DetectRequest& req) {
  return from_wire<DetectResponse>(call(Role::detect, "POST", "/detect", to_wire(req)));
}

GenerateResponse BackendClient::generate(const GenerateRequest& req) {
  return from_wire<GenerateResponse>(call(Role::generate, "POST", "/generate", to_wire(req)));
}

ReviewResponse BackendClient::review(const ReviewRequest& req) {
  return from_wire<ReviewResponse>(call(Role::review, "POST", "/review", to_wire(req)));
}

TrainResponse BackendClient::train(const TrainRequest& req) {
  return from_wire<TrainResponse>(call(Role::train, "POST", "/train", to_wire(req)));
}

JobStatus BackendClient::poll(const std::string& job_id) {
  return from_wire<JobStatus>(call(Role::train, "GET", "/jobs/" + job_id, json()));
}

JobStatus BackendClient::wait(const std::string& job_id, std::chrono::milliseconds interval,
                              std::chrono::milliseconds deadline) {
  const auto until = std::chrono::steady_clock::now() + deadline;
  for (;;) {
    JobStatus s = poll(job_id);
    if (s.state == JobState::succeeded) return s;
    if (s.state == JobState::failed) throw BackendError("job " + job_id + " failed: " + s.error, false);
    if (std::chrono::steady_clock::now() > until) throw BackendError("job " + job_id + " timed out", false);
    std::this_thread::sleep_for(interval);
  }
}

}  // namespace autodet::backends
