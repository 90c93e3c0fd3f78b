#pragma once

// Deterministic stand-ins for the four model roles, driven by synthetic-world
// truth sidecars. Every answer is a pure function of (config seed, request).
//
//   detect      truth objects whose class or synonym is a prompt phrase,
//               jittered; score = score_scale * IoU; seeded decoys and misses.
//               With a model_ref from /train the memorizing detector answers.
//   generate    rendered scenes of the class named in the prompt, with sidecars.
//   review      pseudo-label verdicts from the overlay sidecar against truth;
//               photorealism answers per policy.
//   train       diversification jobs succeed immediately; detector jobs
//               memorize the manifest and derive per-class noise from it.

#include "autodet/backends/protocol.hpp"
#include "autodet/backends/synthetic.hpp"
#include "autodet/backends/transport.hpp"
#include "autodet/catalog.hpp"

#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <vector>

namespace autodet::backends {

struct NoiseModel {
  double jitter = 0.04;  // per-edge sigma as a fraction of box size
  double hard_multiplier = 4.0;
  double miss_rate = 0.05;
  double decoy_rate = 0.25;
  double score_scale = 0.95;

  static NoiseModel from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

enum class PhotorealismPolicy { truth, always_yes, reject_odd_seeds };

struct MockConfig {
  std::uint64_t seed = 0;
  NoiseModel noise;
  /// class name -> synonyms, usually copied from the catalog.
  std::map<std::string, std::vector<std::string>> vocabulary;
  /// Directories searched (recursively) for truth sidecars by scene id.
  std::vector<std::filesystem::path> roots;
  /// Receives generated images and detector models.
  std::filesystem::path work_dir;
  PhotorealismPolicy photorealism = PhotorealismPolicy::truth;
  double unrealistic_rate = 0.1;
  int gen_width = 320;
  int gen_height = 240;

  /// Reads "seed", "noise", "photorealism", "unrealistic_rate"; vocabulary
  /// comes from the catalog.
  static MockConfig from_json(const nlohmann::json& j, const ClassCatalog& catalog);
};

class MockBackend {
 public:
  explicit MockBackend(MockConfig config);

  /// HTTP-shaped entry point; maps errors to protocol error bodies.
  WireResponse handle(const WireRequest& request);
  Handler handler();

  DetectResponse detect(const DetectRequest& req);
  GenerateResponse generate(const GenerateRequest& req);
  ReviewResponse review(const ReviewRequest& req);
  TrainResponse train(const TrainRequest& req);
  JobStatus job(const std::string& job_id);

  struct Counters {
    long detect = 0;
    long generate = 0;
    long review = 0;
    long train = 0;
    long generated_images = 0;
    long replayed = 0;  // requests answered from the idempotency cache
  };
  Counters counters() const;

  const MockConfig& config() const { return config_; }

 private:
  struct ClassStats {
    long labels = 0;
    double quality = 0.0;  // mean IoU of labels against truth
    double recall = 0.0;   // truth objects covered at IoU >= 0.5
    double false_positive = 0.0;
  };
  struct DetectorModel {
    std::string id;
    std::map<std::string, std::vector<TruthObject>> memorized;
    std::map<std::string, ClassStats> stats;
    nlohmann::json to_json() const;
    static DetectorModel from_json(const nlohmann::json& j);
  };

  SceneTruth truth_for_image(const std::string& image_ref);
  SceneTruth truth_by_id(const std::string& id);
  void index_roots();
  const DetectorModel& model(const std::string& ref);
  DetectResponse detect_open_vocabulary(const DetectRequest& req, const SceneTruth& truth);
  DetectResponse detect_trained(const DetectRequest& req, const SceneTruth& truth);
  std::string train_detector(const DetectorTrainSpec& spec);

  MockConfig config_;
  mutable std::recursive_mutex mu_;
  std::map<std::string, SceneTruth> truths_;
  bool roots_indexed_ = false;
  std::map<std::string, std::filesystem::path> truth_files_;
  std::map<std::string, DetectorModel> models_;
  std::map<std::string, JobStatus> jobs_;
  std::map<std::string, WireResponse> replies_;  // idempotency cache
  Counters counters_;
};

}  // namespace autodet::backends
