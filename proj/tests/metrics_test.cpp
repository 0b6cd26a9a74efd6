#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "rethseg/metrics.hpp"

namespace rethseg {
namespace {

using testing::random_labels;

void expect_same(const std::vector<double>& a, const std::vector<double>& b) {
  EXPECT_TRUE(testing::same_or_both_nan(a, b));
}

TEST(ConfusionMatrix, PerfectPredictionIsDiagonal) {
  std::mt19937_64 rng(1);
  const auto truth = random_labels(rng, 64, 4);
  ConfusionMatrix cm(4);
  cm.accumulate(truth, truth);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      if (i != j) {
        EXPECT_EQ(cm.at(i, j), 0u);
      }
  EXPECT_EQ(cm.total(), 64u);
  EXPECT_EQ(miou(cm), 1.0);
  EXPECT_EQ(pixel_acc(cm), 1.0);
  EXPECT_EQ(dice(cm), 1.0);
}

TEST(ConfusionMatrix, IgnoredPixelsLeaveItUnchanged) {
  ConfusionMatrix cm(3);
  cm.accumulate(std::vector<int>{0, 1, 2}, std::vector<int>{255, 255, 255});
  EXPECT_EQ(cm, ConfusionMatrix(3));
  EXPECT_THROW(miou(cm), UsageError);
  EXPECT_THROW(pixel_acc(cm), UsageError);
}

TEST(ConfusionMatrix, MatchesPixelLoop) {
  std::mt19937_64 rng(2);
  const auto pred = random_labels(rng, 64, 3), truth = random_labels(rng, 64, 3);
  ConfusionMatrix cm(3);
  cm.accumulate(pred, truth);
  for (int t = 0; t < 3; ++t) {
    for (int p = 0; p < 3; ++p) {
      std::uint64_t n = 0;
      for (std::size_t i = 0; i < 64; ++i) n += truth[i] == t && pred[i] == p;
      EXPECT_EQ(cm.at(t, p), n);
    }
  }
}

TEST(ConfusionMatrix, RejectsOutOfRangeClasses) {
  ConfusionMatrix cm(3);
  EXPECT_THROW(cm.accumulate(std::vector<int>{3}, std::vector<int>{0}), ShapeError);
  EXPECT_THROW(cm.accumulate(std::vector<int>{0}, std::vector<int>{-1}), ShapeError);
  EXPECT_THROW(cm.accumulate(std::vector<int>{0, 1}, std::vector<int>{0}), ShapeError);
  EXPECT_THROW(cm.merge(ConfusionMatrix(4)), ShapeError);
}

TEST(Metrics, TwoClassHandExample) {
  // truth 0: three hits, one miss; truth 1: two misses, four hits
  ConfusionMatrix cm(2);
  cm.accumulate(std::vector<int>{0, 0, 0, 1, 0, 0, 1, 1, 1, 1}, std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1, 1, 1});
  const auto iou = per_class_iou(cm);
  EXPECT_EQ(iou[0], 0.5);
  EXPECT_EQ(iou[1], 4.0 / 7.0);
  EXPECT_NEAR(miou(cm), 0.5357, 5e-5);
  EXPECT_EQ(pixel_acc(cm), 0.7);
}

TEST(Metrics, BinaryAllWrongIsZero) {
  ConfusionMatrix cm(2);
  cm.accumulate(std::vector<int>{1, 1, 0, 0}, std::vector<int>{0, 0, 1, 1});
  EXPECT_EQ(miou(cm), 0.0);
  EXPECT_EQ(pixel_acc(cm), 0.0);
  EXPECT_EQ(dice(cm), 0.0);
}

TEST(Metrics, AbsentClassesAreExcluded) {
  ConfusionMatrix cm(4);
  cm.accumulate(std::vector<int>{0, 1}, std::vector<int>{0, 1});
  EXPECT_TRUE(std::isnan(per_class_iou(cm)[3]));
  EXPECT_EQ(miou(cm), 1.0);
}

TEST(Metrics, MatchEnumerationOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = testing::MaskPair::draw(rng);
    ConfusionMatrix cm(static_cast<std::size_t>(m.k));
    cm.accumulate(m.pred, m.truth);
    const auto oracle = testing::enumerate_metrics(m.pred, m.truth, m.k, 255);
    expect_same(per_class_iou(cm), oracle.iou);
    expect_same(per_class_dice(cm), oracle.dice);
    EXPECT_EQ(miou(cm), oracle.miou);
    EXPECT_EQ(dice(cm), oracle.dice_mean);
    EXPECT_EQ(pixel_acc(cm), oracle.pixel_acc);
  }
}

TEST(Metrics, DiceDominatesIou) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    ConfusionMatrix cm(4);
    cm.accumulate(random_labels(rng, 30, 4), random_labels(rng, 30, 4));
    const auto iou = per_class_iou(cm), d = per_class_dice(cm);
    for (std::size_t c = 0; c < 4; ++c) {
      if (std::isnan(iou[c])) continue;
      EXPECT_GE(d[c], iou[c]);
      EXPECT_NEAR(d[c], 2 * iou[c] / (1 + iou[c]), 1e-15);
    }
  }
}

TEST(Metrics, ConsistentRelabelingPermutesIou) {
  std::mt19937_64 rng(5);
  std::vector<int> perm{2, 0, 3, 1};
  for (int trial = 0; trial < 50; ++trial) {
    auto pred = random_labels(rng, 40, 4), truth = random_labels(rng, 40, 4);
    ConfusionMatrix a(4), b(4);
    a.accumulate(pred, truth);
    for (auto& v : pred) v = perm[v];
    for (auto& v : truth) v = perm[v];
    b.accumulate(pred, truth);
    const auto ia = per_class_iou(a), ib = per_class_iou(b);
    for (std::size_t c = 0; c < 4; ++c) {
      if (std::isnan(ia[c])) {
        EXPECT_TRUE(std::isnan(ib[perm[c]]));
      } else {
        EXPECT_EQ(ia[c], ib[perm[c]]);
      }
    }
    EXPECT_NEAR(miou(a), miou(b), 1e-15);
  }
}

TEST(Metrics, StreamingTilesEqualWholeImage) {
  std::mt19937_64 rng(6);
  const auto pred = random_labels(rng, 256, 5), truth = random_labels(rng, 256, 5);
  ConfusionMatrix whole(5), streamed(5), left(5), right(5);
  whole.accumulate(pred, truth);
  for (std::size_t t = 0; t < 256; t += 32) {
    ConfusionMatrix tile(5);
    tile.accumulate(std::span(pred).subspan(t, 32), std::span(truth).subspan(t, 32));
    streamed.merge(tile);
    (t < 128 ? left : right).merge(tile);
  }
  EXPECT_EQ(streamed, whole);
  ConfusionMatrix ab = left, ba = right;
  ab.merge(right);
  ba.merge(left);
  EXPECT_EQ(ab, ba);
  EXPECT_EQ(miou(streamed), miou(whole));
}

TEST(Metrics, SubsetMeanSkipsAbsentClasses) {
  ConfusionMatrix cm(4);
  cm.accumulate(std::vector<int>{0, 0, 0, 1, 0, 0, 1, 1, 1, 1}, std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1, 1, 1});
  const std::vector<int> both{0, 1}, one{1}, with_absent{1, 3};
  EXPECT_EQ(miou_over(cm, both), miou(cm));
  EXPECT_EQ(miou_over(cm, one), 4.0 / 7.0);
  EXPECT_EQ(miou_over(cm, with_absent), 4.0 / 7.0);
  const std::vector<int> bad{4};
  EXPECT_THROW(miou_over(cm, bad), ShapeError);
}

TEST(MetricReport, KeyValueAndCsv) {
  ConfusionMatrix cm(2);
  cm.accumulate(std::vector<int>{0, 0, 0, 1, 0, 0, 1, 1, 1, 1}, std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1, 1, 1});
  const auto report = make_report(cm);
  const auto kv = KeyValues::parse(report.to_keyvalues().dump());
  EXPECT_EQ(kv.number<double>("miou"), report.miou);
  EXPECT_EQ(kv.number<double>("pixel_acc"), 0.7);
  EXPECT_EQ(kv.number<double>("iou.0"), 0.5);
  EXPECT_EQ(kv.number<std::uint64_t>("pixels"), 10u);
  const std::string csv = report.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "miou,pixel_acc,dice,pixels,iou_0,iou_1");
  EXPECT_NE(csv.find(",0.69999999999999996,"), std::string::npos);
}

}  // namespace
}  // namespace rethseg
