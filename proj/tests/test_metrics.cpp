#include <gtest/gtest.h>

#include <cmath>

#include "mamlab/metrics.hpp"
#include "mamlab/rng.hpp"

namespace mamlab {
namespace {

TEST(Accuracy, CountsArgmaxHits) {
    const ScoreTable s{3, 2, {0.9, 0.1, 0.2, 0.8, 0.5, 0.5}};
    EXPECT_DOUBLE_EQ(accuracy(s, {0, 1, 1}), 2.0 / 3.0); // tie resolves to class 0
    EXPECT_THROW(accuracy(s, {0, 1}), InputError);
}

TEST(MeanAveragePrecision, HandWorkedExample) {
    // class 0 positives at ranks 1 and 3 -> (1 + 2/3) / 2; class 1 positive at rank 2 -> 1/2
    const ScoreTable s{3, 2, {0.9, 0.1, 0.5, 0.7, 0.3, 0.9}};
    const ScoreTable y{3, 2, {1, 0, 0, 1, 1, 0}};
    EXPECT_NEAR(mean_average_precision(s, y), ((1.0 + 2.0 / 3.0) / 2.0 + 0.5) / 2.0, 1e-15);
}

TEST(MeanAveragePrecision, ClassWithoutPositivesIsSkipped) {
    const ScoreTable s{2, 2, {0.9, 0.1, 0.5, 0.7}};
    const ScoreTable y{2, 2, {1, 0, 0, 0}};
    EXPECT_EQ(mean_average_precision(s, y), 1.0);
    EXPECT_THROW(mean_average_precision(s, ScoreTable{2, 2, {0, 0, 0, 0}}), InputError);
}

TEST(MeanAveragePrecision, TiesKeepSampleOrder) {
    const ScoreTable s{3, 1, {0.5, 0.5, 0.5}};
    EXPECT_NEAR(mean_average_precision(s, ScoreTable{3, 1, {0, 0, 1}}), 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(mean_average_precision(s, ScoreTable{3, 1, {1, 0, 0}}), 1.0, 1e-15);
}

TEST(MeanAveragePrecision, PerfectRankingIsOne) {
    const ScoreTable s{4, 1, {0.9, 0.8, 0.2, 0.1}};
    EXPECT_EQ(mean_average_precision(s, ScoreTable{4, 1, {1, 1, 0, 0}}), 1.0);
}

TEST(MeanAveragePrecision, SingleClassHandRanking) {
    const ScoreTable s{3, 1, {0.9, 0.8, 0.7}};
    EXPECT_NEAR(mean_average_precision(s, ScoreTable{3, 1, {1, 0, 1}}), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
}

TEST(MeanAveragePrecision, InvariantUnderMonotoneTransforms) {
    Rng rng(11);
    const std::size_t n = 50, k = 3;
    ScoreTable s{n, k, std::vector<double>(n * k)}, y{n, k, std::vector<double>(n * k)};
    for (double& v : s.values) v = rng.normal();
    for (double& v : y.values) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    const double base = mean_average_precision(s, y);
    ScoreTable e = s, a = s;
    for (double& v : e.values) v = std::exp(v);
    for (double& v : a.values) v = 3.0 * v - 7.0;
    EXPECT_EQ(mean_average_precision(e, y), base);
    EXPECT_EQ(mean_average_precision(a, y), base);
}

TEST(MeanAveragePrecision, UniformRandomScoresGiveHalf) {
    // balanced 2-class multi-label set, scores independent of labels
    Rng rng(5);
    const std::size_t n = 1000;
    ScoreTable s{n, 2, std::vector<double>(n * 2)}, y{n, 2, std::vector<double>(n * 2)};
    for (double& v : s.values) v = rng.uniform();
    for (double& v : y.values) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    EXPECT_NEAR(mean_average_precision(s, y), 0.5, 0.05);
}

TEST(OneHot, BuildsLabelTable) {
    const ScoreTable t = one_hot({2, 0}, 3);
    EXPECT_EQ(t.values, (std::vector<double>{0, 0, 1, 1, 0, 0}));
    EXPECT_THROW(one_hot({3}, 3), InputError);
}

} // namespace
} // namespace mamlab
