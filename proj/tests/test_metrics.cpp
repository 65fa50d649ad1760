#include <gtest/gtest.h>

#include <json.hpp>

#include "crobim/metrics.hpp"
#include "crobim/verify.hpp"

using namespace crobim;
using metrics::MetricAccumulator;

namespace {

Mask block(std::size_t h, std::size_t w, std::size_t y0, std::size_t x0, std::size_t bh, std::size_t bw) {
    Mask m(h, w);
    for (std::size_t y = y0; y < y0 + bh; ++y)
        for (std::size_t x = x0; x < x0 + bw; ++x) m(y, x) = 1;
    return m;
}

Mask first_pixels(std::size_t h, std::size_t w, std::size_t n, std::size_t skip = 0) {
    Mask m(h, w);
    for (std::size_t i = skip; i < skip + n; ++i) m[i] = 1;
    return m;
}

}  // namespace

TEST(Binarize, ThresholdRule) {
    EXPECT_EQ(metrics::binarize(Matrix<float>(3, 3, 0.0f)), Mask(3, 3, 1));
    EXPECT_EQ(metrics::binarize(Matrix<float>(3, 3, -1.0f)), Mask(3, 3, 0));
    const auto m = metrics::binarize(Matrix<double>(1, 4, {-2.0, -1e-9, 0.0, 3.0}));
    EXPECT_EQ(m, Mask(1, 4, std::vector<std::uint8_t>{0, 0, 1, 1}));
    // 0.7 in probability is logit ln(7/3) ~ 0.847.
    EXPECT_EQ(metrics::binarize(Matrix<double>(1, 2, {0.84, 0.85}), 0.7), Mask(1, 2, std::vector<std::uint8_t>{0, 1}));
}

TEST(SampleIou, Examples) {
    MetricAccumulator acc;
    const auto same = acc.accumulate(first_pixels(4, 4, 10), first_pixels(4, 4, 10));
    EXPECT_EQ(same.intersection, 10u);
    EXPECT_EQ(same.union_, 10u);
    EXPECT_EQ(same.iou(), 1.0);
    const auto disjoint = acc.accumulate(first_pixels(4, 4, 5), first_pixels(4, 4, 5, 5));
    EXPECT_EQ(disjoint.intersection, 0u);
    EXPECT_EQ(disjoint.union_, 10u);
    EXPECT_EQ(disjoint.iou(), 0.0);
    const auto overlap = acc.accumulate(block(4, 4, 0, 0, 2, 2), block(4, 4, 0, 1, 2, 2));
    EXPECT_EQ(overlap.intersection, 2u);
    EXPECT_EQ(overlap.union_, 6u);
    EXPECT_DOUBLE_EQ(overlap.iou(), 1.0 / 3.0);
    EXPECT_EQ(acc.accumulate(Mask(3, 3), Mask(3, 3)).iou(), 1.0);
    EXPECT_THROW(acc.accumulate(Mask(3, 3), Mask(3, 4)), ShapeError);
}

TEST(Report, HalfAndHalf) {
    MetricAccumulator acc;
    acc.accumulate(first_pixels(4, 4, 10), first_pixels(4, 4, 10));
    acc.accumulate(first_pixels(4, 4, 5), first_pixels(4, 4, 5, 5));
    const auto r = acc.finalize();
    EXPECT_DOUBLE_EQ(r.miou, 0.5);
    EXPECT_DOUBLE_EQ(r.oiou, 0.5);
    EXPECT_DOUBLE_EQ(r.precision[0], 0.5);
    EXPECT_EQ(r.count, 2u);
}

TEST(Report, OverallIouWeightsLargeObjects) {
    MetricAccumulator acc;
    acc.accumulate(first_pixels(10, 10, 100), first_pixels(10, 10, 100));
    acc.accumulate(Mask(2, 2), first_pixels(2, 2, 1));
    const auto r = acc.finalize();
    EXPECT_DOUBLE_EQ(r.oiou, 100.0 / 101.0);
    EXPECT_NEAR(r.oiou, 0.9901, 1e-4);
    EXPECT_DOUBLE_EQ(r.miou, 0.5);
}

TEST(Report, PrecisionThresholdsAreInclusive) {
    MetricAccumulator acc;
    // IoUs 0.5, 0.6, 0.7, 0.8, 0.9 exactly (gt 10 pixels, prediction a subset).
    for (std::size_t k = 5; k <= 9; ++k) acc.accumulate(first_pixels(4, 4, k), first_pixels(4, 4, 10));
    const auto r = acc.finalize();
    EXPECT_DOUBLE_EQ(r.precision[0], 1.0);
    EXPECT_DOUBLE_EQ(r.precision[1], 0.8);
    EXPECT_DOUBLE_EQ(r.precision[2], 0.6);
    EXPECT_DOUBLE_EQ(r.precision[3], 0.4);
    EXPECT_DOUBLE_EQ(r.precision[4], 0.2);
}

TEST(Report, PerfectPredictionsGiveAllOnes) {
    MetricAccumulator acc;
    Rng rng(1);
    for (int i = 0; i < 5; ++i) {
        Mask m(8, 8);
        for (auto& v : m.data()) v = static_cast<std::uint8_t>(rng.index(2));
        acc.accumulate(m, m);
    }
    const auto r = acc.finalize();
    EXPECT_EQ(r.oiou, 1.0);
    EXPECT_EQ(r.miou, 1.0);
    for (double p : r.precision) EXPECT_EQ(p, 1.0);
}

TEST(Report, EmptyAccumulatorThrows) { EXPECT_THROW(MetricAccumulator().finalize(), ArgumentError); }

TEST(Report, TextAndJson) {
    MetricAccumulator acc;
    acc.accumulate(block(4, 4, 0, 0, 2, 2), block(4, 4, 0, 1, 2, 2));
    const auto r = acc.finalize();
    const auto j = nlohmann::json::parse(r.to_json());
    EXPECT_DOUBLE_EQ(j.at("mIoU").get<double>(), 1.0 / 3.0);
    EXPECT_EQ(j.at("count").get<int>(), 1);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_TRUE(j.contains(metrics::threshold_key(i)));
    EXPECT_NE(r.to_text().find("Pr@0.9 0"), std::string::npos);
    EXPECT_EQ(metrics::threshold_key(0), "Pr@0.5");
}

TEST(Merge, EmptyIsNeutralAndOrderDoesNotMatter) {
    Rng rng(2);
    MetricAccumulator a, b;
    for (int i = 0; i < 4; ++i) {
        Mask p(6, 6), g(6, 6);
        for (auto& v : p.data()) v = static_cast<std::uint8_t>(rng.index(2));
        for (auto& v : g.data()) v = static_cast<std::uint8_t>(rng.index(2));
        (i % 2 ? a : b).accumulate(p, g);
    }
    MetricAccumulator e1, e2;
    e1.merge(a);
    EXPECT_EQ(e1.finalize().to_text(), a.finalize().to_text());
    auto ab = a, ba = b;
    ab.merge(b);
    ba.merge(a);
    EXPECT_EQ(ab.finalize().to_text(), ba.finalize().to_text());
    e2.merge(MetricAccumulator{});
    EXPECT_EQ(e2.count(), 0u);
}

TEST(Merge, RandomSplitsMatchSinglePass) {
    Rng rng(3);
    std::vector<std::pair<Mask, Mask>> pairs;
    for (int i = 0; i < 60; ++i) {
        Mask p(16, 16), g(16, 16);
        for (auto& v : p.data()) v = static_cast<std::uint8_t>(rng.uniform() < 0.4);
        for (auto& v : g.data()) v = static_cast<std::uint8_t>(rng.uniform() < 0.4);
        pairs.emplace_back(p, g);
    }
    MetricAccumulator single;
    for (const auto& [p, g] : pairs) single.accumulate(p, g);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<MetricAccumulator> shards(1 + rng.index(6));
        for (const auto& [p, g] : pairs) shards[rng.index(shards.size())].accumulate(p, g);
        MetricAccumulator merged;
        for (const auto& s : shards) merged.merge(s);
        const auto a = merged.finalize(), b = single.finalize();
        EXPECT_EQ(merged.sum_intersection(), single.sum_intersection());
        EXPECT_EQ(merged.sum_union(), single.sum_union());
        EXPECT_EQ(a.oiou, b.oiou);
        EXPECT_NEAR(a.miou, b.miou, 1e-15);
        EXPECT_EQ(a.precision, b.precision);
    }
}

TEST(IouOracle, AgreesWithAccumulator) {
    Rng rng(4);
    for (int i = 0; i < 100; ++i) {
        Mask p(16, 16), g(16, 16);
        for (auto& v : p.data()) v = static_cast<std::uint8_t>(rng.index(2));
        for (auto& v : g.data()) v = static_cast<std::uint8_t>(rng.index(2));
        MetricAccumulator acc;
        const auto s = acc.accumulate(p, g);
        const auto [inter, uni] = verify::oracle_iou(p, g);
        EXPECT_EQ(s.intersection, inter);
        EXPECT_EQ(s.union_, uni);
    }
}
