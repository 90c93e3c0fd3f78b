#include "autodet/common.hpp"
#include "autodet/preprocess.hpp"

#include "support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>

using namespace autodet;

namespace {

ImageRecord rec(const std::string& id, const std::string& cls) {
  ImageRecord r;
  r.id = id;
  r.path = id + ".png";
  r.class_names = {cls};
  r.width = 10;
  r.height = 10;
  return r;
}

}  // namespace

TEST(PHash, MatchesReferenceFixtures) {
  const auto dir = testing_support::data_dir() / "phash";
  const auto expected = nlohmann::json::parse(read_file(dir / "expected.json"));
  ASSERT_GE(expected.size(), 10u);
  for (const auto& e : expected) {
    const auto file = e.at("file").get<std::string>();
    EXPECT_EQ(hex64(phash_file(dir / file)), e.at("phash").get<std::string>()) << file;
  }
}

TEST(PHash, ColorAndGrayAgree) {
  const auto gray = cv::imread((testing_support::data_dir() / "phash" / "waves.png").string(), cv::IMREAD_GRAYSCALE);
  cv::Mat bgr;
  cv::cvtColor(gray, bgr, cv::COLOR_GRAY2BGR);
  EXPECT_EQ(phash(gray), phash(bgr));
}

TEST(PHash, NearDuplicatesAreClose) {
  const auto dir = testing_support::data_dir() / "phash";
  const PHash scene = phash_file(dir / "scene.png");
  EXPECT_LE(hamming(scene, phash_file(dir / "scene_noisy.png")), 10);
  EXPECT_LE(hamming(scene, phash_file(dir / "scene_brighter.png")), 10);
  EXPECT_GT(hamming(scene, phash_file(dir / "noise.png")), 10);
}

TEST(PHash, Errors) {
  EXPECT_THROW(phash(cv::Mat()), ParseError);
  testing_support::TempDir dir;
  write_file(dir / "bad.png", "not an image");
  EXPECT_THROW(phash_file(dir / "bad.png"), ParseError);
}

TEST(Hamming, Counts) {
  EXPECT_EQ(hamming(0, 0), 0);
  EXPECT_EQ(hamming(0, ~PHash{0}), 64);
  EXPECT_EQ(hamming(0b1011, 0b0001), 2);
}

TEST(Dedup, ExactCollapsesNearGroups) {
  std::vector<HashedImage> items{
      {rec("b", "x"), 0x0},
      {rec("a", "x"), 0x0},       // exact copy of b; a leads since ids sort first
      {rec("c", "x"), 0xF},       // 4 bits from a: near duplicate
      {rec("d", "x"), ~PHash{0}}, // far away
  };
  const auto r = dedup(items, 0, 10);
  std::vector<std::string> kept;
  for (const auto& im : r.retained) kept.push_back(im.id);
  EXPECT_EQ(kept, (std::vector<std::string>{"a", "c", "d"}));
  ASSERT_EQ(r.clusters.size(), 2u);
  EXPECT_EQ(r.clusters[0].kind, DupKind::exact);
  EXPECT_EQ(r.clusters[0].members, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(r.clusters[1].kind, DupKind::near);
  EXPECT_EQ(r.clusters[1].members, (std::vector<std::string>{"a", "c"}));
  EXPECT_THROW(dedup(items, 5, 2), std::invalid_argument);
}

TEST(Dedup, InputOrderDoesNotMatter) {
  std::vector<HashedImage> items;
  for (int i = 0; i < 30; ++i) items.push_back({rec("i" + std::to_string(i), "x"), PHash(i * 0x1111)});
  auto shuffled = items;
  std::reverse(shuffled.begin(), shuffled.end());
  const auto a = dedup(items, 2, 8), b = dedup(shuffled, 2, 8);
  ASSERT_EQ(a.retained.size(), b.retained.size());
  for (std::size_t i = 0; i < a.retained.size(); ++i) EXPECT_EQ(a.retained[i].id, b.retained[i].id);
  ASSERT_EQ(a.clusters.size(), b.clusters.size());
}

TEST(Split, StratifiedCountsAndDeterminism) {
  std::vector<ImageRecord> images;
  for (int i = 0; i < 50; ++i) images.push_back(rec("a" + std::to_string(i), "alpha"));
  for (int i = 0; i < 10; ++i) images.push_back(rec("b" + std::to_string(i), "beta"));
  const auto m = stratified_split(images, {}, {}, 3);
  const auto m2 = stratified_split(images, {}, {}, 3);
  EXPECT_EQ(m.assignments, m2.assignments);
  EXPECT_NE(m.assignments, stratified_split(images, {}, {}, 4).assignments);

  auto count = [&](const std::string& prefix, Split s) {
    return std::count_if(m.assignments.begin(), m.assignments.end(),
                         [&](const auto& kv) { return kv.first.starts_with(prefix) && kv.second == s; });
  };
  EXPECT_EQ(count("a", Split::test), 10);
  EXPECT_EQ(count("a", Split::val), 8);
  EXPECT_EQ(count("a", Split::train), 32);
  EXPECT_EQ(count("b", Split::test), 2);
  EXPECT_EQ(count("b", Split::val), 2);
  EXPECT_EQ(count("b", Split::train), 6);
}

TEST(Split, NearDuplicatesArePinnedToTrain) {
  std::vector<ImageRecord> images;
  for (int i = 0; i < 10; ++i) images.push_back(rec("a" + std::to_string(i), "alpha"));
  std::vector<DupCluster> clusters{{"a1", {"a1", "a2", "a3"}, DupKind::near}};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto m = stratified_split(images, clusters, {}, seed);
    for (const char* id : {"a1", "a2", "a3"}) EXPECT_EQ(m.assignments.at(id), Split::train);
  }
}

TEST(Split, EveryClassGetsATestImage) {
  std::vector<ImageRecord> images{rec("only", "rare")};
  for (int i = 0; i < 5; ++i) images.push_back(rec("c" + std::to_string(i), "common"));
  const auto m = stratified_split(images, {}, {}, 1);
  EXPECT_EQ(m.assignments.at("only"), Split::test);
}

TEST(Split, Errors) {
  std::vector<ImageRecord> images{rec("x", "a")};
  EXPECT_THROW(stratified_split(images, {}, {0.5, 0.5, 0.2}, 1), ValidationError);
  EXPECT_THROW(stratified_split(images, {}, {0.8, 0.2, 0.0}, 1), ValidationError);
  std::vector<DupCluster> all_pinned{{"x", {"x"}, DupKind::near}};
  EXPECT_THROW(stratified_split(images, all_pinned, {}, 1), ValidationError);
}

TEST(Split, ManifestJsonRoundTrip) {
  std::vector<ImageRecord> images;
  for (int i = 0; i < 12; ++i) images.push_back(rec("a" + std::to_string(i), "alpha"));
  const auto m = stratified_split(images, {}, {}, 9);
  const auto back = SplitManifest::from_json(m.to_json());
  EXPECT_EQ(back.assignments, m.assignments);
  EXPECT_EQ(back.seed, 9u);
  EXPECT_EQ(back.ids(Split::test).size(), m.ids(Split::test).size());
}
