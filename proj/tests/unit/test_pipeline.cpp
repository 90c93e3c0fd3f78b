#include "autodet/common.hpp"
#include "autodet/dataset.hpp"
#include "autodet/pipeline.hpp"

#include "support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <set>

using namespace autodet;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json small_config(const fs::path& out) {
  auto doc = json::parse(read_file(testing_support::source_dir() / "data" / "configs" / "synthetic.json"));
  const auto configs = testing_support::source_dir() / "data" / "configs";
  doc["catalog"] = (configs / "synthetic_catalog.json").string();
  doc["diversify"]["prompts"] = (testing_support::source_dir() / "data" / "prompts" / "inference_prompts.json").string();
  doc["diversify"]["max_prompts_per_instance"] = 16;
  doc["synthetic_world"]["images_per_class"] = 5;
  doc["output_dir"] = out.string();
  return doc;
}

RunConfig config_for(const testing_support::TempDir& dir, const std::string& out, json patch = json::object()) {
  auto doc = small_config(dir / out);
  doc.merge_patch(patch);
  write_file(dir / (out + ".json"), doc.dump(2));
  return RunConfig::load(dir / (out + ".json"));
}

// Relative path -> content for every file under `root`, minus run metadata.
std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename().string();
    if (name == "run_metadata.json" || name == ".lock") continue;
    out[fs::relative(e.path(), root).string()] = read_file(e.path());
  }
  return out;
}

std::vector<std::string> ids_of(const fs::path& jsonl) {
  std::vector<std::string> ids;
  for (const auto& row : read_jsonl(jsonl)) ids.push_back(row.at("id").get<std::string>());
  return ids;
}

}  // namespace

TEST(RunConfig, LoadsAndResolvesPaths) {
  testing_support::TempDir dir;
  const auto cfg = config_for(dir, "a");
  EXPECT_EQ(cfg.seed, 7u);
  EXPECT_TRUE(cfg.world);
  EXPECT_TRUE(cfg.diversify_enabled);
  EXPECT_EQ(cfg.mix.ratio.to_string(), "1:1");
  EXPECT_EQ(cfg.endpoints.at(backends::Role::review).max_retries, 1);
  EXPECT_EQ(RunConfig::load(dir / "a.json", 99).seed, 99u);
}

TEST(RunConfig, InterpolatesEnvironment) {
  testing_support::TempDir dir;
  ::setenv("AUTODET_TEST_OUT", (dir / "from-env").c_str(), 1);
  auto doc = small_config(dir / "unused");
  doc["output_dir"] = "${AUTODET_TEST_OUT}";
  write_file(dir / "c.json", doc.dump());
  EXPECT_EQ(RunConfig::load(dir / "c.json").output_dir, dir / "from-env");
}

TEST(RunConfig, Validation) {
  testing_support::TempDir dir;
  EXPECT_THROW(config_for(dir, "a", {{"thresholds", {{"nms", 1.5}}}}), ValidationError);
  EXPECT_THROW(config_for(dir, "b", {{"split", {{"train", 0.9}}}}), ValidationError);
  EXPECT_THROW(config_for(dir, "c", {{"catalog", (dir / "missing.json").string()}}), ValidationError);
  EXPECT_THROW(config_for(dir, "d", {{"mix", {{"ratio", "lots"}}}}), ParseError);
  EXPECT_THROW(config_for(dir, "e", {{"endpoints", {{"detect", {{"max_in_flight", 0}}}}}}), ValidationError);
  write_file(dir / "broken.json", "{");
  EXPECT_THROW(RunConfig::load(dir / "broken.json"), ParseError);
}

TEST(StageIds, Names) {
  for (auto s : kStages) EXPECT_EQ(parse_stage_id(to_string(s)), s);
  EXPECT_THROW(parse_stage_id("bake"), ParseError);
}

TEST(PipelineRun, MissingPredecessorIsNamed) {
  testing_support::TempDir dir;
  Pipeline p(config_for(dir, "a"));
  try {
    p.run(StageId::annotate);
    FAIL();
  } catch (const MissingArtifactError& e) {
    EXPECT_EQ(e.needed(), StageId::ingest);
    EXPECT_NE(std::string(e.what()).find("ingest"), std::string::npos);
  }
}

TEST(PipelineRun, SecondRunOnSameOutputIsLockedOut) {
  testing_support::TempDir dir;
  const auto cfg = config_for(dir, "a");
  Pipeline first(cfg);
  EXPECT_THROW(Pipeline second(cfg), Error);
}

TEST(PipelineRun, KeysFollowConfiguration) {
  testing_support::TempDir dir;
  const auto a = config_for(dir, "a");
  const auto b = config_for(dir, "b", {{"thresholds", {{"nms", 0.6}}}});
  std::map<StageId, std::string> ka, kb;
  {
    Pipeline p(a);
    for (auto s : kStages) ka[s] = p.key(s);
  }
  {
    Pipeline p(b);
    for (auto s : kStages) kb[s] = p.key(s);
  }
  EXPECT_EQ(ka[StageId::split], kb[StageId::split]);
  EXPECT_EQ(ka[StageId::diversify], kb[StageId::diversify]);
  EXPECT_NE(ka[StageId::annotate], kb[StageId::annotate]);
  EXPECT_NE(ka[StageId::eval], kb[StageId::eval]);
}

class EndToEnd : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testing_support::TempDir;
    Pipeline p(config_for(*dir_, "full"));
    reports_ = p.run_all();
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static testing_support::TempDir* dir_;
  static std::vector<StageReport> reports_;
};

testing_support::TempDir* EndToEnd::dir_ = nullptr;
std::vector<StageReport> EndToEnd::reports_;

TEST_F(EndToEnd, EveryStageCompletes) {
  ASSERT_EQ(reports_.size(), kStages.size());
  Pipeline p(RunConfig::load(*dir_ / "full.json"));
  for (auto s : kStages) {
    EXPECT_TRUE(p.complete(s)) << to_string(s);
    EXPECT_TRUE(fs::exists(p.stage_dir(s) / "DONE"));
    EXPECT_EQ(read_file(*dir_ / "full" / std::string(to_string(s)) / "CURRENT"), p.key(s) + "\n");
  }
  const auto report = json::parse(read_file(p.stage_dir(StageId::eval) / "ap_report.json"));
  EXPECT_GT(report["ap50"].get<double>(), 0.3);
  EXPECT_LE(report["ap50_95"].get<double>(), report["ap50"].get<double>());
  EXPECT_TRUE(fs::exists(*dir_ / "full" / "run_metadata.json"));
}

TEST_F(EndToEnd, ResumeSkipsEverything) {
  RunOptions opt;
  opt.resume = true;
  Pipeline p(RunConfig::load(*dir_ / "full.json"), opt);
  for (const auto& r : p.run_all()) EXPECT_TRUE(r.skipped) << to_string(r.stage);
  for (const auto& line : p.plan()) EXPECT_NE(line.find("skip"), std::string::npos) << line;
}

TEST_F(EndToEnd, RerunIsByteIdenticalAndMatchesStageByStage) {
  const auto before = snapshot(*dir_ / "full");
  {
    Pipeline again(RunConfig::load(*dir_ / "full.json"));
    again.run_all();
  }
  EXPECT_EQ(snapshot(*dir_ / "full"), before);

  auto doc = json::parse(read_file(*dir_ / "full.json"));
  doc["output_dir"] = (*dir_ / "steps").string();
  write_file(*dir_ / "steps.json", doc.dump(2));
  {
    Pipeline p(RunConfig::load(*dir_ / "steps.json"));
    for (auto s : kStages) p.run(s);
  }
  const auto steps = snapshot(*dir_ / "steps");
  ASSERT_EQ(steps.size(), before.size());
  for (const auto& [path, content] : before) {
    auto it = steps.find(path);
    ASSERT_NE(it, steps.end()) << path;
    EXPECT_EQ(it->second, content) << path;
  }
}

TEST_F(EndToEnd, OriginalOnlyMixIsTheReviewedTrainSplit) {
  auto doc = json::parse(read_file(*dir_ / "full.json"));
  doc["mix"]["ratio"] = "0:1";
  write_file(*dir_ / "orig.json", doc.dump(2));
  RunOptions opt;
  opt.resume = true;
  Pipeline p(RunConfig::load(*dir_ / "orig.json"), opt);
  p.run_all();

  std::set<std::string> kept;
  for (const auto& line : split(read_file(p.stage_dir(StageId::review) / "kept.txt"), "\n")) {
    if (!line.empty()) kept.insert(line);
  }
  std::vector<std::string> expected;
  for (const auto& id : ids_of(p.stage_dir(StageId::split) / "train.jsonl")) {
    if (kept.contains(id)) expected.push_back(id);
  }
  const auto got = ids_of(p.stage_dir(StageId::mix) / "manifest.jsonl");
  EXPECT_EQ(got, expected);
  EXPECT_FALSE(got.empty());
  for (const auto& row : read_jsonl(p.stage_dir(StageId::mix) / "manifest.jsonl")) {
    EXPECT_EQ(row.value("origin", std::string("original")), "original");
  }
}

TEST_F(EndToEnd, AccountingIsMonotone) {
  Pipeline p(RunConfig::load(*dir_ / "full.json"));
  const auto rows = json::parse(read_file(p.stage_dir(StageId::annotate) / "accounting.json"));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_LE(rows[0]["count"].get<long>(), rows[1]["count"].get<long>());
  EXPECT_GE(rows[1]["count"].get<long>(), rows[2]["count"].get<long>());
  EXPECT_GE(rows[2]["count"].get<long>(), rows[3]["count"].get<long>());
}
