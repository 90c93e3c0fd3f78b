#include "autodet/backends/transport.hpp"

#include "autodet/backends/protocol.hpp"

#include <httplib.h>

#include <thread>

namespace autodet::backends {

struct HttpTransport::Impl {
  httplib::Client client;
  std::string base_url;

  Impl(const std::string& url, std::chrono::milliseconds timeout) : client(url), base_url(url) {
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());
  }
};

HttpTransport::HttpTransport(std::string base_url, std::chrono::milliseconds timeout)
    : impl_(std::make_unique<Impl>(base_url, timeout)) {
  if (!impl_->client.is_valid()) throw BackendError("invalid backend url " + base_url, false);
}

HttpTransport::~HttpTransport() = default;

WireResponse HttpTransport::send(const WireRequest& request) {
  httplib::Headers headers(request.headers.begin(), request.headers.end());
  httplib::Result res = request.method == "GET"
                            ? impl_->client.Get(request.path, headers)
                            : impl_->client.Post(request.path, headers, request.body, "application/json");
  if (!res) {
    throw BackendError(impl_->base_url + request.path + ": " + httplib::to_string(res.error()), true);
  }
  return {res->status, res->body};
}

struct HttpServer::Impl {
  httplib::Server server;
  std::thread thread;
};

HttpServer::HttpServer(Handler handler) : impl_(std::make_unique<Impl>()) {
  auto adapt = [handler](const httplib::Request& req, httplib::Response& res) {
    WireRequest w{req.method, req.path, req.body, {}};
    for (const auto& [k, v] : req.headers) w.headers.emplace(k, v);
    const WireResponse out = handler(w);
    res.status = out.status;
    res.set_content(out.body, "application/json");
  };
  impl_->server.Post(R"(/.*)", adapt);
  impl_->server.Get(R"(/.*)", adapt);
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw BackendError("cannot bind " + host + ":" + std::to_string(port), false);
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void HttpServer::run(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) {
    throw BackendError("cannot listen on " + host + ":" + std::to_string(port), false);
  }
}

void HttpServer::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace autodet::backends
