// Standalone mock backend over HTTP, for contract tests of external servers.

#include "autodet/backends/mock.hpp"
#include "autodet/backends/transport.hpp"
#include "autodet/catalog.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <pthread.h>

#include <csignal>
#include <iostream>

using namespace autodet;

int main(int argc, char** argv) {
  CLI::App app{"autodet-mock-server: deterministic detect/generate/review/train backend"};
  std::string catalog_path, config_path, host = "127.0.0.1", work_dir = "mock-work";
  std::vector<std::string> roots;
  int port = 8080;
  std::uint64_t seed = 0;
  bool shared_synonyms = false;
  app.add_option("--catalog", catalog_path, "Class catalog (JSON)")->required()->check(CLI::ExistingFile);
  app.add_option("--config", config_path, "Mock settings: noise, photorealism, unrealistic_rate")
      ->check(CLI::ExistingFile);
  app.add_option("--root", roots, "Directory searched for truth sidecars (repeatable)");
  app.add_option("--work-dir", work_dir, "Receives generated images and trained models");
  app.add_option("--host", host);
  app.add_option("--port", port, "0 picks a free port");
  app.add_option("--seed", seed);
  app.add_flag("--shared-synonyms", shared_synonyms, "Allow one synonym under several classes");
  CLI11_PARSE(app, argc, argv);

  try {
    CatalogOptions opts;
    opts.allow_shared_synonyms = shared_synonyms;
    const ClassCatalog catalog = load_catalog(catalog_path, opts);

    nlohmann::json settings = config_path.empty() ? nlohmann::json::object() : nlohmann::json::parse(read_file(config_path));
    auto config = backends::MockConfig::from_json(settings, catalog);
    if (!settings.contains("seed")) config.seed = seed;
    for (const auto& r : roots) config.roots.emplace_back(r);
    config.work_dir = work_dir;
    config.roots.push_back(config.work_dir);

    backends::MockBackend mock(std::move(config));
    backends::HttpServer server(mock.handler());

    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    const int bound = server.start(host, port);
    std::cout << "listening on http://" << host << ":" << bound << std::endl;
    int sig = 0;
    sigwait(&signals, &sig);
    server.stop();
    spdlog::info("stopped on signal {}", sig);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
