#include "autodet/evaluate.hpp"
#include "autodet/geometry.hpp"
#include "autodet/preprocess.hpp"

#include <benchmark/benchmark.h>
#include <opencv2/core.hpp>

#include <random>

using namespace autodet;

namespace {

std::vector<ScoredBox> random_boxes(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> pos(0, 1000), size(10, 200), score(0, 1);
  std::vector<ScoredBox> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = pos(gen), y = pos(gen);
    out.push_back({{x, y, x + size(gen), y + size(gen)}, score(gen)});
  }
  return out;
}

void BM_Nms(benchmark::State& state) {
  const auto boxes = random_boxes(static_cast<std::size_t>(state.range(0)), 1);
  for (auto _ : state) benchmark::DoNotOptimize(nms_class_agnostic(boxes, 0.5));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Nms)->RangeMultiplier(4)->Range(16, 1024)->Complexity();

void BM_ApSummary(benchmark::State& state) {
  std::mt19937_64 gen(2);
  std::uniform_real_distribution<double> jitter(-8, 8);
  const std::vector<std::string> classes{"a", "b", "c", "d"};
  std::vector<GroundTruth> gts;
  std::vector<Detection> dets;
  const auto boxes = random_boxes(static_cast<std::size_t>(state.range(0)), 3);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto image = "im" + std::to_string(i % 50);
    const auto& cls = classes[i % classes.size()];
    const auto& b = boxes[i].box;
    gts.push_back({image, b, cls});
    dets.push_back({image, {b.x1 + jitter(gen), b.y1 + jitter(gen), b.x2 + jitter(gen), b.y2 + jitter(gen)},
                    boxes[i].score, cls});
  }
  for (auto _ : state) benchmark::DoNotOptimize(ap_summary(dets, gts));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ApSummary)->Arg(500)->Arg(5000);

void BM_PHash(benchmark::State& state) {
  cv::Mat image(480, 640, CV_8UC3);
  cv::randu(image, cv::Scalar::all(0), cv::Scalar::all(255));
  for (auto _ : state) benchmark::DoNotOptimize(phash(image));
}
BENCHMARK(BM_PHash);

}  // namespace
BENCHMARK_MAIN();
