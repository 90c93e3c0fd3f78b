#include "autodet/annotate.hpp"
#include "autodet/common.hpp"

#include "../oracles/oracles.hpp"
#include "world.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace autodet;

namespace {

ClassCatalog full() { return load_catalog(testing_support::data_dir() / "catalog_full.json"); }

RawAnnotation raw(double score, Box box, std::string phrase, std::string query, PromptKind kind = PromptKind::original,
                  std::string prompt = "") {
  RawAnnotation r;
  r.image_id = "img";
  r.score = score;
  r.box = box;
  r.phrase = phrase;
  r.query_class = query;
  r.prompt_kind = kind;
  r.prompt = prompt.empty() ? phrase : prompt;
  return r;
}

}  // namespace

TEST(PromptSet, SpotChecks) {
  const auto cat = full();
  EXPECT_EQ(build_prompt_set("bulldozer", cat).size(), 3u);
  EXPECT_EQ(build_prompt_set("mining truck", cat).size(), 2u);
  EXPECT_EQ(build_prompt_set("articulated dump truck", cat).size(), 1u);
  EXPECT_EQ(build_prompt_set("telescopic handler", cat).size(), 6u);
}

TEST(PromptSet, CountsMatchDefinitionForEveryClass) {
  const auto cat = full();
  for (const auto& c : cat.classes()) {
    const auto prompts = build_prompt_set(c.name, cat);
    EXPECT_EQ(prompts.size(), oracle::prompt_count(c)) << c.name;
    EXPECT_EQ(prompts.size(), expected_prompt_count(c)) << c.name;
  }
}

TEST(PromptSet, OrderAndDecodeMaps) {
  const auto cat = full();
  const auto p = build_prompt_set("mining truck", cat);
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p[0].text, "mining truck");
  EXPECT_EQ(p[0].kind, PromptKind::original);
  EXPECT_EQ(p[1].text, "mining truck . mining bulldozer . mining excavator");
  EXPECT_EQ(p[1].kind, PromptKind::cooccurring);
  EXPECT_EQ(p[1].decode_map.size(), 3u);

  const auto b = build_prompt_set("bulldozer", cat);
  EXPECT_EQ(b[1].text, "dozer");
  EXPECT_EQ(b[1].kind, PromptKind::synonym);
  EXPECT_EQ(b[2].text, "crawler tractor");
  EXPECT_EQ(b[2].decode_map.at("crawler tractor"), "bulldozer");
  EXPECT_THROW(build_prompt_set("forklift", cat), ValidationError);
}

TEST(PromptSet, SharedSynonymDecodesToQueryClass) {
  const auto cat = full();
  for (const char* cls : {"crawler crane", "mobile crane", "tower crane", "maritime crane"}) {
    for (const auto& p : build_prompt_set(cls, cat)) {
      if (p.text == "crane") {
        EXPECT_EQ(decode_phrase(p, "crane"), cls);
      }
    }
  }
}

TEST(DecodePhrase, Fallbacks) {
  const auto cat = full();
  const auto p = build_prompt_set("mining truck", cat)[1];
  EXPECT_EQ(decode_phrase(p, "Mining  Truck"), "mining truck");
  EXPECT_EQ(decode_phrase(p, "bulldozer"), "mining bulldozer");  // contained in a key
  EXPECT_EQ(decode_phrase(p, "large mining excavator"), "mining excavator");  // contains a key
  EXPECT_FALSE(decode_phrase(p, "mining"));  // inside all three keys equally
  EXPECT_FALSE(decode_phrase(p, "crane"));
  EXPECT_FALSE(decode_phrase(p, "  "));
}

TEST(Filter, SingleAnnotationIsKeptWhateverItsScore) {
  const auto cat = full();
  std::vector<RawAnnotation> one{raw(0.1, {0, 0, 10, 10}, "bulldozer", "bulldozer")};
  const auto r = filter_and_nms_detailed(one, cat);
  ASSERT_EQ(r.final.size(), 1u);
  EXPECT_EQ(r.final[0].stage, Stage::final);
  EXPECT_EQ(r.final[0].class_name, "bulldozer");
}

TEST(Filter, ScoreRuleAppliesToPools) {
  const auto cat = full();
  std::vector<RawAnnotation> two{raw(0.1, {0, 0, 10, 10}, "bulldozer", "bulldozer"),
                                 raw(0.49, {50, 50, 60, 60}, "dozer", "bulldozer", PromptKind::synonym)};
  EXPECT_TRUE(filter_and_nms(two, cat).empty());
  two[1].score = 0.5;
  const auto kept = filter_and_nms(two, cat);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].class_name, "bulldozer");
  EXPECT_EQ(kept[0].phrase, "dozer");
}

TEST(Filter, NmsIsClassAgnostic) {
  const auto cat = full();
  const std::string prompt = "mining truck . mining bulldozer . mining excavator";
  std::vector<RawAnnotation> pool{
      raw(0.8, {0, 0, 100, 100}, "mining truck", "mining truck", PromptKind::cooccurring, prompt),
      raw(0.9, {2, 2, 100, 100}, "mining excavator", "mining truck", PromptKind::cooccurring, prompt),
      raw(0.7, {200, 200, 250, 250}, "mining truck", "mining truck")};
  const auto kept = filter_and_nms(pool, cat);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].class_name, "mining excavator");
  EXPECT_EQ(kept[1].class_name, "mining truck");
}

TEST(Filter, UnresolvablePhrasesAreCounted) {
  const auto cat = full();
  std::vector<RawAnnotation> pool{raw(0.9, {0, 0, 10, 10}, "giraffe", "bulldozer"),
                                  raw(0.9, {50, 0, 60, 10}, "dozer", "bulldozer", PromptKind::synonym)};
  const auto r = filter_and_nms_detailed(pool, cat);
  EXPECT_EQ(r.unresolved, 1u);
  EXPECT_EQ(r.filtered.size(), 1u);
}

TEST(Filter, RejectsMixedImages) {
  const auto cat = full();
  std::vector<RawAnnotation> pool{raw(0.9, {0, 0, 10, 10}, "dozer", "bulldozer"),
                                  raw(0.9, {0, 0, 10, 10}, "dozer", "bulldozer")};
  pool[1].image_id = "other";
  EXPECT_THROW(filter_and_nms(pool, cat), std::invalid_argument);
}

TEST(Filter, PermutationInvariantAndMatchesOracle) {
  const auto cat = full();
  std::mt19937_64 gen(5);
  const std::vector<std::string> phrases{"bulldozer", "dozer", "crawler tractor"};
  for (int rep = 0; rep < 300; ++rep) {
    std::vector<RawAnnotation> pool;
    const int n = 1 + static_cast<int>(gen() % 12);
    for (int i = 0; i < n; ++i) {
      const double x = static_cast<double>(gen() % 60), y = static_cast<double>(gen() % 60);
      const auto& ph = phrases[gen() % 3];
      pool.push_back(raw(static_cast<double>(gen() % 1000) / 1000.0, {x, y, x + 10 + static_cast<double>(gen() % 30), y + 20},
                         ph, "bulldozer", ph == "bulldozer" ? PromptKind::original : PromptKind::synonym));
    }
    const auto a = filter_and_nms(pool, cat);
    auto shuffled = pool;
    std::shuffle(shuffled.begin(), shuffled.end(), gen);
    const auto b = filter_and_nms(shuffled, cat);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].box, b[i].box);
      EXPECT_EQ(a[i].phrase, b[i].phrase);
    }
    const auto counts = oracle::stage_counts({{"img", pool}}, cat);
    EXPECT_EQ(a.size(), counts.nms);
  }
}

TEST(Annotation, StageTransitions) {
  Annotation a;
  a.stage = Stage::raw;
  EXPECT_THROW(a.advance(Stage::final), ValidationError);
  a.advance(Stage::filtered);
  a.advance(Stage::final);
  EXPECT_THROW(a.advance(Stage::filtered), ValidationError);
  a.advance(Stage::rejected);
  EXPECT_THROW(a.advance(Stage::approved), ValidationError);
}

TEST(Store, JsonLinesRoundTripIsByteExact) {
  testing_support::TempDir dir;
  std::vector<Annotation> anns;
  Annotation a;
  a.image_id = "x";
  a.box = {1.5, 2.25, 30.125, 40};
  a.score = 0.123456789012345;
  a.phrase = "dozer";
  a.class_name = "bulldozer";
  a.stage = Stage::final;
  a.prompt_kind = PromptKind::synonym;
  a.prompt = "dozer";
  anns.push_back(a);
  a.stage = Stage::raw;
  a.prompt.clear();
  anns.push_back(a);
  write_annotations(dir / "a.jsonl", anns);
  const auto back = read_annotations(dir / "a.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].box, anns[0].box);
  EXPECT_EQ(back[0].score, anns[0].score);
  EXPECT_EQ(back[0].prompt_kind, PromptKind::synonym);
  write_annotations(dir / "b.jsonl", back);
  EXPECT_EQ(read_file(dir / "a.jsonl"), read_file(dir / "b.jsonl"));
}

TEST(Store, MalformedRowsAreParseErrors) {
  testing_support::TempDir dir;
  write_file(dir / "bad.jsonl", "{\"image_id\": \"x\"}\n");
  EXPECT_THROW(read_annotations(dir / "bad.jsonl"), ParseError);
  write_file(dir / "bad2.jsonl", "not json\n");
  EXPECT_THROW(read_annotations(dir / "bad2.jsonl"), ParseError);
}

TEST(AnnotateImage, RunsEveryPromptAgainstTheDetector) {
  testing_support::World w(3);
  auto detector = w.client(backends::Role::detect);
  const auto& im = w.images.front();
  const auto out = annotate_image(im, w.path(im).string(), w.catalog, detector);
  std::size_t expected = 0;
  for (const auto& c : im.class_names) expected += expected_prompt_count(w.catalog.at(c));
  EXPECT_EQ(static_cast<std::size_t>(w.mock->counters().detect), expected);
  for (const auto& r : out) {
    EXPECT_EQ(r.image_id, im.id);
    EXPECT_GE(r.score, 0.27);
    EXPECT_GE(r.box.x1, 0.0);
    EXPECT_LE(r.box.x2, im.width);
  }
}

TEST(AnnotateImage, ParallelMatchesSequential) {
  testing_support::World w(4);
  auto detector = w.client(backends::Role::detect);
  auto ref = [&](const ImageRecord& im) { return w.path(im).string(); };
  const auto par = annotate_images(w.images, ref, w.catalog, detector, {}, 4);
  const auto seq = annotate_images(w.images, ref, w.catalog, detector, {}, 1);
  ASSERT_EQ(par.size(), seq.size());
  for (std::size_t i = 0; i < par.size(); ++i) {
    ASSERT_EQ(par[i].size(), seq[i].size());
    for (std::size_t k = 0; k < par[i].size(); ++k) EXPECT_EQ(par[i][k].box, seq[i][k].box);
  }
}

TEST(StageAccounting, MatchesOracleOnTheWorld) {
  testing_support::World w(5);
  auto detector = w.client(backends::Role::detect);
  auto ref = [&](const ImageRecord& im) { return w.path(im).string(); };
  const auto raw_all = annotate_images(w.images, ref, w.catalog, detector, {}, 2);
  std::vector<Annotation> store;
  std::map<std::string, std::vector<RawAnnotation>> by_image;
  for (std::size_t i = 0; i < raw_all.size(); ++i) {
    by_image[w.images[i].id] = raw_all[i];
    for (const auto& r : raw_all[i]) store.push_back(to_annotation(r));
    const auto fr = filter_and_nms_detailed(raw_all[i], w.catalog);
    store.insert(store.end(), fr.filtered.begin(), fr.filtered.end());
    store.insert(store.end(), fr.final.begin(), fr.final.end());
  }
  const auto acc = stage_accounting(store);
  const auto o = oracle::stage_counts(by_image, w.catalog);
  ASSERT_EQ(acc.rows.size(), 4u);
  EXPECT_EQ(acc.rows[0].count, o.original_cooccurring);
  EXPECT_EQ(acc.rows[1].count, o.all_raw);
  EXPECT_EQ(acc.rows[2].count, o.filtered);
  EXPECT_EQ(acc.rows[3].count, o.nms);
  EXPECT_GT(o.nms, 0u);
  EXPECT_LT(o.nms, o.all_raw);
}
