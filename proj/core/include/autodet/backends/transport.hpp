#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <string>

namespace autodet::backends {

struct WireRequest {
  std::string method;  // "GET" or "POST"
  std::string path;    // "/detect", "/jobs/abc", ...
  std::string body;
  std::map<std::string, std::string> headers;
};

struct WireResponse {
  int status = 200;
  std::string body;
};

/// Server-side entry point shared by the in-process and HTTP paths.
using Handler = std::function<WireResponse(const WireRequest&)>;

/// Moves one request to a backend and brings back its response. Connection
/// level failures raise BackendError(retryable = true); HTTP error statuses
/// are returned, not thrown.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual WireResponse send(const WireRequest& request) = 0;
};

/// Calls a handler directly, no sockets involved.
class InProcessTransport : public Transport {
 public:
  explicit InProcessTransport(Handler handler) : handler_(std::move(handler)) {}
  WireResponse send(const WireRequest& request) override { return handler_(request); }

 private:
  Handler handler_;
};

class HttpTransport : public Transport {
 public:
  /// `base_url` like "http://127.0.0.1:8080".
  HttpTransport(std::string base_url, std::chrono::milliseconds timeout);
  ~HttpTransport() override;
  WireResponse send(const WireRequest& request) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Serves a handler over HTTP on a background thread.
class HttpServer {
 public:
  explicit HttpServer(Handler handler);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds and starts listening. Port 0 picks a free port. Returns the port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  /// Blocks serving on the calling thread.
  void run(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace autodet::backends
