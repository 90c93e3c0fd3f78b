#include "autodet/geometry.hpp"

#include "../oracles/oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace autodet;

TEST(Iou, Basics) {
  const Box a{0, 0, 10, 10};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, {5, 0, 15, 10}), 50.0 / 150.0);
  EXPECT_DOUBLE_EQ(iou(a, {10, 0, 20, 10}), 0.0);  // touching edges
  EXPECT_DOUBLE_EQ(iou(a, {20, 20, 30, 30}), 0.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 0, 0}, {0, 0, 0, 0}), 0.0);
  EXPECT_DOUBLE_EQ(iou(a, {2, 2, 4, 4}), 4.0 / 100.0);
}

TEST(Box, Validity) {
  EXPECT_TRUE((Box{0, 0, 1, 1}).valid());
  EXPECT_FALSE((Box{2, 0, 1, 1}).valid());
  EXPECT_TRUE((Box{1, 1, 1, 5}).degenerate());
  EXPECT_FALSE((Box{0, 0, std::nan(""), 1}).valid());
}

TEST(Box, ClampTo) {
  const Box c = clamp_to({-5, -5, 700, 300}, 640, 480);
  EXPECT_EQ(c, (Box{0, 0, 640, 300}));
}

TEST(Nms, RejectsThresholdOutsideOpenInterval) {
  std::vector<ScoredBox> items{{{0, 0, 1, 1}, 0.5}};
  EXPECT_THROW(nms_class_agnostic(items, 0.0), std::invalid_argument);
  EXPECT_THROW(nms_class_agnostic(items, 1.0), std::invalid_argument);
}

TEST(Nms, SuppressesOnlyStrictlyAboveThreshold) {
  // IoU of the pair is exactly 1/3.
  std::vector<ScoredBox> items{{{0, 0, 10, 10}, 0.9}, {{5, 0, 15, 10}, 0.8}};
  EXPECT_EQ(nms_class_agnostic(items, 1.0 / 3.0).size(), 2u);
  EXPECT_EQ(nms_class_agnostic(items, 0.3).size(), 1u);
}

TEST(Nms, TiesKeepLowerIndex) {
  std::vector<ScoredBox> items{{{0, 0, 10, 10}, 0.7}, {{0, 0, 10, 10}, 0.7}};
  EXPECT_EQ(nms_class_agnostic(items, 0.5), (std::vector<std::size_t>{0}));
}

TEST(Nms, DropsDegenerateBoxes) {
  std::vector<ScoredBox> items{{{0, 0, 0, 10}, 0.99}, {{0, 0, 10, 10}, 0.5}};
  EXPECT_EQ(nms_class_agnostic(items, 0.5), (std::vector<std::size_t>{1}));
}

TEST(Nms, ChainDoesNotSuppressTransitively) {
  // b overlaps a and c; a suppresses b, so c survives.
  std::vector<ScoredBox> items{{{0, 0, 10, 10}, 0.9}, {{3, 0, 13, 10}, 0.8}, {{6, 0, 16, 10}, 0.7}};
  EXPECT_EQ(nms_class_agnostic(items, 0.5), (std::vector<std::size_t>{0, 2}));
}

TEST(Nms, MatchesBruteForceOnRandomInstances) {
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> pos(0, 100), size(1, 40), score(0, 1);
  for (int rep = 0; rep < 200; ++rep) {
    const int n = static_cast<int>(gen() % 30);
    std::vector<ScoredBox> items;
    std::vector<Box> boxes;
    std::vector<double> scores;
    for (int i = 0; i < n; ++i) {
      const double x = pos(gen), y = pos(gen);
      items.push_back({{x, y, x + size(gen), y + size(gen)}, score(gen)});
      boxes.push_back(items.back().box);
      scores.push_back(items.back().score);
    }
    EXPECT_EQ(nms_class_agnostic(items, 0.5), oracle::nms(boxes, scores, 0.5));
  }
}

TEST(Yolo, FullFrameBox) {
  const YoloBox y = to_yolo({0, 0, 640, 480}, 640, 480);
  EXPECT_DOUBLE_EQ(y.cx, 0.5);
  EXPECT_DOUBLE_EQ(y.cy, 0.5);
  EXPECT_DOUBLE_EQ(y.w, 1.0);
  EXPECT_DOUBLE_EQ(y.h, 1.0);
}

TEST(Yolo, RoundTrip) {
  const Box b{12.5, 30, 100.25, 200};
  const Box r = from_yolo(to_yolo(b, 320, 240), 320, 240);
  EXPECT_NEAR(r.x1, b.x1, 1e-9);
  EXPECT_NEAR(r.y1, b.y1, 1e-9);
  EXPECT_NEAR(r.x2, b.x2, 1e-9);
  EXPECT_NEAR(r.y2, b.y2, 1e-9);
}
