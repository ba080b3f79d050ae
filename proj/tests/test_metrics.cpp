#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "advnorm/losses.hpp"
#include "advnorm/metrics.hpp"
#include "advnorm/rng.hpp"
#include "test_util.hpp"

using namespace advnorm;
using nn::Tensor;

TEST(ArgmaxLabels, PicksHighestChannelAndBreaksTiesLow) {
    Tensor<float> t(3, 2, 1, 1);
    // voxel 0: clear winner class 2; voxel 1: tie between 0 and 1
    t.plane(0)[0] = 0.1f; t.plane(1)[0] = 0.2f; t.plane(2)[0] = 0.7f;
    t.plane(0)[1] = 0.4f; t.plane(1)[1] = 0.4f; t.plane(2)[1] = 0.2f;
    auto l = argmax_labels(t);
    EXPECT_EQ(l[0], 2);
    EXPECT_EQ(l[1], 0);
}

TEST(DiceScore, PerfectHalfAndZeroOverlap) {
    std::vector<std::uint8_t> truth{1, 1, 1, 1};

    DiceAccumulator perfect(2);
    perfect.add(truth.data(), truth.data(), truth.size());
    EXPECT_DOUBLE_EQ(perfect.per_class()[1].dice, 1.0);

    std::vector<std::uint8_t> half{1, 1, 0, 0};
    DiceAccumulator halved(2);
    halved.add(half.data(), truth.data(), truth.size());
    // 2*2 / (2 + 4) = 2/3 on class 1; use a case engineered for 0.5 instead:
    // pred marks 4 voxels, truth marks 4, overlap 2 -> 2*2/8 = 0.5
    std::vector<std::uint8_t> p2{1, 1, 1, 1, 0, 0, 0, 0};
    std::vector<std::uint8_t> t2{1, 1, 0, 0, 1, 1, 0, 0};
    DiceAccumulator d2(2);
    d2.add(p2.data(), t2.data(), p2.size());
    EXPECT_DOUBLE_EQ(d2.per_class()[1].dice, 0.5);

    std::vector<std::uint8_t> none{0, 0, 0, 0};
    DiceAccumulator zero(2);
    zero.add(none.data(), truth.data(), truth.size());
    EXPECT_DOUBLE_EQ(zero.per_class()[1].dice, 0.0);
}

TEST(DiceScore, ClassMissingFromBothSidesScoresOneAndIsFlagged) {
    std::vector<std::uint8_t> a{0, 1, 0, 1};
    DiceAccumulator acc(3); // class 2 appears nowhere
    acc.add(a.data(), a.data(), a.size());
    auto pc = acc.per_class();
    EXPECT_DOUBLE_EQ(pc[2].dice, 1.0);
    EXPECT_TRUE(pc[2].both_empty);
    EXPECT_FALSE(pc[1].both_empty);
}

TEST(DiceScore, MicroAggregationWeighsByVoxelCount) {
    // one tiny perfect patch plus one large all-wrong patch: micro Dice is
    // dominated by the large patch, not the average of 1.0 and 0.0
    std::vector<std::uint8_t> small_p{1}, small_t{1};
    std::vector<std::uint8_t> big_p(100, 0), big_t(100, 1);
    DiceAccumulator acc(2);
    acc.add(small_p.data(), small_t.data(), 1);
    acc.add(big_p.data(), big_t.data(), 100);
    // inter = 1, pred mass = 1, true mass = 101 -> 2/102
    EXPECT_NEAR(acc.per_class()[1].dice, 2.0 / 102.0, 1e-12);
}

TEST(DiceScore, MeanForegroundSkipsBackground) {
    std::vector<std::uint8_t> p{0, 1, 2, 2};
    std::vector<std::uint8_t> t{0, 1, 2, 1};
    DiceAccumulator acc(3);
    acc.add(p.data(), t.data(), p.size());
    auto pc = acc.per_class();
    EXPECT_NEAR(acc.mean_foreground(), (pc[1].dice + pc[2].dice) / 2.0, 1e-12);
}

TEST(DiceScore, AgreesWithSoftDiceLossOnHardLabels) {
    // On indicator inputs the soft loss complements the hard score, which
    // keeps the training objective and the reported metric consistent.
    Rng rng(201);
    std::vector<std::uint8_t> pred(512), truth(512);
    for (auto& x : pred) x = static_cast<std::uint8_t>(rng.below(2));
    for (auto& x : truth) x = static_cast<std::uint8_t>(rng.below(2));

    DiceAccumulator acc(2);
    acc.add(pred.data(), truth.data(), pred.size());
    double hard = acc.per_class()[1].dice;

    Tensor<double> s(1, 8, 8, 8), y(1, 8, 8, 8);
    for (std::size_t v = 0; v < 512; ++v) {
        s.v[v] = pred[v];
        y.v[v] = truth[v];
    }
    auto soft = weighted_dice_loss<double>(s, y, {1.0}, 1e-12);
    EXPECT_NEAR(1.0 - soft.value, hard, 1e-9);
}

TEST(HistogramTest, MassSumsToOne) {
    Rng rng(202);
    std::vector<float> values(5000);
    testutil::fill_uniform(values, rng, -2.0, 5.0);
    auto h = make_histogram(values, -2.0, 5.0, 64);
    double total = std::accumulate(h.mass.begin(), h.mass.end(), 0.0);
    EXPECT_NEAR(total, 1.0, 1e-9);
}

TEST(HistogramTest, UniformSamplesFillBinsEvenly) {
    Rng rng(203);
    const int n = 100000, bins = 20;
    std::vector<float> values(n);
    testutil::fill_uniform(values, rng, 0.0, 1.0);
    auto h = make_histogram(values, 0.0, 1.0, bins);
    // binomial std dev of a bin's mass is sqrt(p(1-p)/n), p = 1/bins
    double p = 1.0 / bins;
    double sigma = std::sqrt(p * (1 - p) / n);
    for (double m : h.mass) EXPECT_NEAR(m, p, 3 * sigma);
}

TEST(HistogramTest, OutOfRangeValuesClampToEdgeBins) {
    std::vector<float> values{-100.0f, 0.5f, 100.0f};
    auto h = make_histogram(values, 0.0, 1.0, 4);
    EXPECT_NEAR(h.mass[0], 1.0 / 3, 1e-12);
    EXPECT_NEAR(h.mass[2], 1.0 / 3, 1e-12); // 0.5 sits at the start of bin 2
    EXPECT_NEAR(h.mass[3], 1.0 / 3, 1e-12);
}

TEST(HistogramTest, ConstantInputCollapsesToOneBin) {
    std::vector<float> values(10, 3.5f);
    auto h = make_histogram(values, 3.5, 3.5, 8);
    EXPECT_NEAR(h.mass[0], 1.0, 1e-12);
    for (std::size_t b = 1; b < h.mass.size(); ++b) EXPECT_EQ(h.mass[b], 0.0);
}

TEST(HistogramTest, BinCentersSpanTheRange) {
    auto h = make_histogram({0.5f}, 0.0, 1.0, 4);
    EXPECT_NEAR(h.bin_center(0), 0.125, 1e-12);
    EXPECT_NEAR(h.bin_center(3), 0.875, 1e-12);
}

TEST(HistogramTest, RejectsBadParameters) {
    std::vector<float> v{1.0f};
    EXPECT_THROW(make_histogram(v, 0.0, 1.0, 0), ValidationError);
    EXPECT_THROW(make_histogram(v, 1.0, 0.0, 4), ValidationError);
}

TEST(Jsd, IdenticalHistogramsDivergeByZero) {
    auto h = make_histogram({0.1f, 0.4f, 0.4f, 0.9f}, 0.0, 1.0, 10);
    EXPECT_NEAR(jsd({h, h}), 0.0, 1e-9);
    EXPECT_NEAR(jsd({h, h, h, h}), 0.0, 1e-9);
}

TEST(Jsd, DisjointPointMassesSaturateTheBound) {
    // N fully disjoint distributions reach the maximum ln N
    auto a = make_histogram({0.05f}, 0.0, 1.0, 4);
    auto b = make_histogram({0.30f}, 0.0, 1.0, 4);
    auto c = make_histogram({0.55f}, 0.0, 1.0, 4);
    auto d = make_histogram({0.80f}, 0.0, 1.0, 4);
    EXPECT_NEAR(jsd({a, b}), std::log(2.0), 1e-6);
    EXPECT_NEAR(jsd({a, b, c, d}), std::log(4.0), 1e-6);
}

TEST(Jsd, OrderOfArgumentsDoesNotMatter) {
    Rng rng(204);
    std::vector<float> v1(300), v2(300);
    testutil::fill_uniform(v1, rng, 0.0, 0.7);
    testutil::fill_uniform(v2, rng, 0.3, 1.0);
    auto a = make_histogram(v1, 0.0, 1.0, 16);
    auto b = make_histogram(v2, 0.0, 1.0, 16);
    EXPECT_NEAR(jsd({a, b}), jsd({b, a}), 1e-12);
    EXPECT_GT(jsd({a, b}), 0.0);
}

TEST(Jsd, MismatchedBinningIsRejected) {
    auto a = make_histogram({0.5f}, 0.0, 1.0, 8);
    auto b = make_histogram({0.5f}, 0.0, 1.0, 16);
    EXPECT_THROW(jsd({a, b}), ValidationError);
    auto c = make_histogram({0.5f}, 0.0, 2.0, 8);
    EXPECT_THROW(jsd({a, c}), ValidationError);
    EXPECT_THROW(jsd({a}), ValidationError);
}

TEST(ForegroundIntensities, FiltersBackgroundVoxels) {
    auto img = testutil::make_volume(2, 2, 1);
    img.data = {10.0f, 20.0f, 30.0f, 40.0f};
    auto mask = testutil::make_mask(2, 2, 1, 3);
    mask.labels = {0, 1, 0, 2};
    auto fg = foreground_intensities(img, mask);
    ASSERT_EQ(fg.size(), 2u);
    EXPECT_FLOAT_EQ(fg[0], 20.0f);
    EXPECT_FLOAT_EQ(fg[1], 40.0f);

    auto small = testutil::make_mask(2, 1, 1, 2);
    EXPECT_THROW(foreground_intensities(img, small), ValidationError);
}

TEST(PopulationJsd, SharedBinningOverGlobalRange) {
    // two point masses at the global extremes land in different bins
    std::vector<std::vector<float>> sets{{0.0f, 0.0f}, {10.0f, 10.0f}};
    EXPECT_NEAR(population_jsd(sets, 100), std::log(2.0), 1e-6);

    // identical sets agree regardless of bin count
    std::vector<std::vector<float>> same{{1.0f, 2.0f, 3.0f}, {1.0f, 2.0f, 3.0f}};
    EXPECT_NEAR(population_jsd(same, 100), 0.0, 1e-9);

    std::vector<std::vector<float>> empties{{}, {}};
    EXPECT_THROW(population_jsd(empties, 10), ValidationError);
    EXPECT_THROW(population_jsd({{1.0f}}, 10), ValidationError);
}

TEST(PopulationJsd, OverlappingSetsDivergeLessThanSeparatedOnes) {
    Rng rng(205);
    std::vector<float> base(2000), near(2000), far(2000);
    for (std::size_t i = 0; i < base.size(); ++i) {
        base[i] = static_cast<float>(rng.normal());
        near[i] = static_cast<float>(rng.normal() + 0.3);
        far[i] = static_cast<float>(rng.normal() + 4.0);
    }
    double close_jsd = population_jsd({base, near});
    double far_jsd = population_jsd({base, far});
    EXPECT_LT(close_jsd, far_jsd);
}
