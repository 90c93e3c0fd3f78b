#include "autodet/backends/synthetic.hpp"
#include "autodet/common.hpp"
#include "autodet/review.hpp"

#include "world.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>

using namespace autodet;
using nlohmann::json;

namespace {

Annotation ann(const std::string& cls, Box box, double score) {
  Annotation a;
  a.image_id = "img";
  a.class_name = cls;
  a.phrase = cls;
  a.box = box;
  a.score = score;
  return a;
}

ReviewVerdict verdict(const std::string& id, bool p, bool r, bool f) {
  ReviewVerdict v;
  v.image_id = id;
  v.precision = p;
  v.recall = r;
  v.fit = f;
  return v;
}

}  // namespace

TEST(Verdict, Goldens) {
  const auto cases = json::parse(read_file(testing_support::data_dir() / "verdict_goldens.json"));
  ASSERT_GE(cases.size(), 20u);
  for (const auto& c : cases) {
    const auto name = c.at("name").get<std::string>();
    const auto text = c.at("text").get<std::string>();
    if (c.at("expected").is_string()) {
      EXPECT_THROW(parse_verdict(text), VerdictParseError) << name;
      continue;
    }
    ReviewVerdict v;
    ASSERT_NO_THROW(v = parse_verdict(text)) << name;
    EXPECT_EQ(v.precision, c["expected"]["precision"].get<bool>()) << name;
    EXPECT_EQ(v.recall, c["expected"]["recall"].get<bool>()) << name;
    EXPECT_EQ(v.fit, c["expected"]["fit"].get<bool>()) << name;
    EXPECT_EQ(v.raw_text, text);
  }
}

TEST(Verdict, GateNeedsAllThree) {
  for (int m = 0; m < 8; ++m) {
    const auto v = verdict("x", m & 1, m & 2, m & 4);
    EXPECT_EQ(gate_pseudo_labels(v), m == 7);
  }
}

TEST(Photorealism, Parsing) {
  auto v = parse_photorealism("YES\nNO");
  EXPECT_TRUE(v.suitable);
  EXPECT_FALSE(v.authentic);
  EXPECT_FALSE(gate_photorealism(v));
  v = parse_photorealism("Sure.\n1. Yes, it is.\n2. yes");
  EXPECT_TRUE(gate_photorealism(v));
  v = parse_photorealism("Answer: NO\nAnswer: YES\nYES");
  EXPECT_FALSE(v.suitable);
  EXPECT_TRUE(v.authentic);
  EXPECT_THROW(parse_photorealism("YES"), VerdictParseError);
  EXPECT_THROW(parse_photorealism("Maybe\nPerhaps"), VerdictParseError);
  EXPECT_THROW(parse_photorealism(""), VerdictParseError);
}

TEST(Overlay, DownscalesToLongSide) {
  cv::Mat big(768, 1024, CV_8UC3, cv::Scalar(40, 40, 40));
  const std::vector<Annotation> anns{ann("bulldozer", {100, 200, 300, 400}, 0.87)};
  const auto o = render_overlay(big, "big", anns);
  EXPECT_EQ(o.pixels.cols, kOverlayLongSide);
  EXPECT_EQ(o.pixels.rows, 384);
  EXPECT_DOUBLE_EQ(o.scale, 0.5);
  const auto side = o.sidecar();
  EXPECT_EQ(side["source_id"], "big");
  ASSERT_EQ(side["boxes"].size(), 1u);
  EXPECT_EQ(side["boxes"][0]["class"], "bulldozer");
  EXPECT_EQ(side["boxes"][0]["box"], json({50.0, 100.0, 150.0, 200.0}));
  // Something was drawn on the overlay.
  EXPECT_GT(cv::norm(o.pixels, cv::NORM_L1), 0.0);
  EXPECT_NE(o.pixels.at<cv::Vec3b>(100, 50), cv::Vec3b(40, 40, 40));
}

TEST(Overlay, NeverUpscales) {
  cv::Mat small(100, 200, CV_8UC3, cv::Scalar(0, 0, 0));
  const auto o = render_overlay(small, "s", std::vector<Annotation>{});
  EXPECT_EQ(o.pixels.cols, 200);
  EXPECT_EQ(o.pixels.rows, 100);
  EXPECT_DOUBLE_EQ(o.scale, 1.0);
  cv::Mat tall(1000, 300, CV_8UC3);
  EXPECT_EQ(render_overlay(tall, "t", std::vector<Annotation>{}).pixels.rows, kOverlayLongSide);
}

TEST(Overlay, WritesPngAndSidecar) {
  testing_support::TempDir dir;
  cv::Mat img(60, 80, CV_8UC3, cv::Scalar(10, 20, 30));
  const auto o = render_overlay(img, "w", std::vector<Annotation>{ann("x", {1, 1, 20, 20}, 0.3)});
  write_overlay(o, dir / "sub" / "w.png");
  EXPECT_FALSE(cv::imread((dir / "sub" / "w.png").string()).empty());
  EXPECT_EQ(json::parse(read_file(dir / "sub" / "w.png.json")), o.sidecar());
  EXPECT_THROW(render_overlay(dir / "missing.png", "m", std::vector<Annotation>{}), ParseError);
}

TEST(Review, SelectionRule) {
  EXPECT_FALSE(select_for_review(std::vector<Annotation>{ann("a", {0, 0, 1, 1}, 0.9)}));
  EXPECT_FALSE(select_for_review(std::vector<Annotation>{ann("a", {0, 0, 1, 1}, 0.5)}));
  EXPECT_TRUE(select_for_review(std::vector<Annotation>{ann("a", {0, 0, 1, 1}, 0.49)}));
  EXPECT_TRUE(select_for_review(std::vector<Annotation>{ann("a", {0, 0, 1, 1}, 0.9), ann("a", {2, 2, 3, 3}, 0.9)}));
  EXPECT_FALSE(select_for_review(std::vector<Annotation>{}));
}

TEST(Review, PromptsBindTargets) {
  const auto cat = load_catalog(testing_support::data_dir() / "catalog_full.json");
  ImageRecord im;
  im.id = "x";
  im.class_names = {"mining truck"};
  const auto p = build_review_prompts(im, cat);
  EXPECT_EQ(p.system, builtin_template(PromptRole::review_system).text);
  EXPECT_NE(p.user.find("mining truck"), std::string::npos);
  EXPECT_NE(p.user.find("mining bulldozer, mining excavator"), std::string::npos);
  EXPECT_EQ(p.user.find("{target}"), std::string::npos);
  EXPECT_EQ(p.user.find("{secondary_target}"), std::string::npos);

  im.class_names = {"bulldozer"};
  EXPECT_NE(build_review_prompts(im, cat).user.find("no secondary target"), std::string::npos);
  EXPECT_NE(build_photorealism_prompt("reachstacker").find("authentic reachstacker"), std::string::npos);
}

TEST(Review, AgreementMatrix) {
  const std::vector<ReviewVerdict> a{verdict("1", 1, 1, 1), verdict("2", 1, 1, 1), verdict("3", 0, 1, 1),
                                     verdict("4", 1, 0, 1)};
  const std::vector<ReviewVerdict> b{verdict("4", 1, 1, 1), verdict("3", 1, 0, 1), verdict("2", 1, 1, 0),
                                     verdict("1", 1, 1, 1)};
  const auto m = agreement_matrix(a, b);
  EXPECT_EQ(m.keep_keep, 1);
  EXPECT_EQ(m.keep_drop, 1);
  EXPECT_EQ(m.drop_keep, 1);
  EXPECT_EQ(m.drop_drop, 1);
  EXPECT_DOUBLE_EQ(m.agreement, 0.5);
  EXPECT_THROW(agreement_matrix(a, std::vector<ReviewVerdict>(b.begin(), b.end() - 1)), ValidationError);
  EXPECT_THROW(agreement_matrix(std::vector<ReviewVerdict>{}, std::vector<ReviewVerdict>{}), ValidationError);
  auto twice = a;
  twice.push_back(verdict("1", 1, 1, 1));
  EXPECT_THROW(agreement_matrix(twice, b), ValidationError);
}

TEST(Review, OutcomeJsonRoundTrip) {
  ReviewOutcome o;
  o.image_id = "i";
  o.selected = true;
  o.verdict = verdict("i", true, false, true);
  o.verdict->raw_text = "{}";
  o.verdict->reviewer = "r";
  const auto back = ReviewOutcome::from_json(o.to_json());
  EXPECT_EQ(back.to_json(), o.to_json());
  EXPECT_FALSE(back.kept);
  EXPECT_TRUE(back.verdict->precision);
  EXPECT_FALSE(back.verdict->recall);
}

class MockReview : public ::testing::Test {
 protected:
  testing_support::World w{11};

  // Final annotations straight from the truth sidecar, scores below 0.5 so
  // every image goes to the reviewer.
  std::map<std::string, std::vector<Annotation>> from_truth() {
    std::map<std::string, std::vector<Annotation>> finals;
    for (const auto& im : w.images) {
      for (const auto& o : backends::read_truth(w.path(im)).objects) {
        auto a = ann(o.class_name, o.box, 0.4);
        a.image_id = im.id;
        finals[im.id].push_back(a);
      }
    }
    return finals;
  }

  std::vector<ReviewOutcome> run(const std::map<std::string, std::vector<Annotation>>& finals) {
    auto reviewer = w.client(backends::Role::review);
    ReviewPassOptions opt;
    opt.overlay_dir = w.dir / "overlays";
    return review_images(
        w.images, finals, [&](const ImageRecord& im) { return w.path(im); }, w.catalog, &reviewer, opt);
  }
};

TEST_F(MockReview, ExactLabelsPass) {
  const auto out = run(from_truth());
  ASSERT_EQ(out.size(), w.images.size());
  for (const auto& o : out) {
    EXPECT_TRUE(o.selected);
    ASSERT_TRUE(o.verdict) << o.error;
    EXPECT_TRUE(o.kept) << o.verdict->raw_text;
  }
  EXPECT_TRUE(std::is_sorted(out.begin(), out.end(),
                             [](const ReviewOutcome& a, const ReviewOutcome& b) { return a.image_id < b.image_id; }));
}

TEST_F(MockReview, MissingBoxFailsRecall) {
  auto finals = from_truth();
  for (auto& [id, anns] : finals) {
    if (anns.size() > 1) anns.pop_back();
  }
  const auto out = run(finals);
  int checked = 0;
  for (const auto& o : out) {
    const auto truth = backends::read_truth(w.path(*std::find_if(
        w.images.begin(), w.images.end(), [&](const ImageRecord& im) { return im.id == o.image_id; })));
    if (truth.objects.size() < 2) continue;
    ++checked;
    ASSERT_TRUE(o.verdict);
    EXPECT_TRUE(o.verdict->precision);
    EXPECT_FALSE(o.verdict->recall);
    EXPECT_FALSE(o.kept);
  }
  EXPECT_GT(checked, 0);
}

TEST_F(MockReview, LooseBoxFailsFit) {
  auto finals = from_truth();
  for (auto& [id, anns] : finals) {
    // Shrinking the width to 60% inside the true box gives IoU 0.6.
    auto& b = anns.front().box;
    b.x2 = b.x1 + 0.6 * (b.x2 - b.x1);
  }
  for (const auto& o : run(finals)) {
    ASSERT_TRUE(o.verdict);
    EXPECT_FALSE(o.verdict->precision);
    EXPECT_FALSE(o.verdict->fit);
    EXPECT_FALSE(o.kept);
  }
}

TEST_F(MockReview, DisabledKeepsEverythingWithoutCalls) {
  ReviewPassOptions opt;
  opt.enabled = false;
  const auto out = review_images(
      w.images, from_truth(), [&](const ImageRecord& im) { return w.path(im); }, w.catalog, nullptr, opt);
  for (const auto& o : out) {
    EXPECT_TRUE(o.kept);
    EXPECT_FALSE(o.selected);
  }
  EXPECT_EQ(w.mock->counters().review, 0);
}

TEST_F(MockReview, UnreadableImageNeedsAttention) {
  auto finals = from_truth();
  auto reviewer = w.client(backends::Role::review);
  ReviewPassOptions opt;
  opt.overlay_dir = w.dir / "overlays";
  const auto out = review_images(
      w.images, finals, [&](const ImageRecord&) { return w.dir / "nope.png"; }, w.catalog, &reviewer, opt);
  for (const auto& o : out) {
    EXPECT_FALSE(o.kept);
    EXPECT_FALSE(o.error.empty());
  }
}
