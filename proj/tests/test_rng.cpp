#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "advnorm/rng.hpp"

using advnorm::Rng;

TEST(Rng, SameSeedSameStream) {
    Rng a(1234), b(1234);
    for (int i = 0; i < 1000; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, DifferentSeedsDiverge) {
    Rng a(1), b(2);
    int equal = 0;
    for (int i = 0; i < 1000; ++i)
        if (a.next_u64() == b.next_u64()) ++equal;
    EXPECT_EQ(equal, 0);
}

TEST(Rng, DerivedStreamsAreIndependentOfEachOther) {
    auto a = Rng::derive(42, 0x494e4954, 0);
    auto b = Rng::derive(42, 0x494e4954, 1);
    auto c = Rng::derive(42, 0x45504f43, 0);
    int ab = 0, ac = 0;
    for (int i = 0; i < 1000; ++i) {
        auto va = a.next_u64();
        if (va == b.next_u64()) ++ab;
        if (va == c.next_u64()) ++ac;
    }
    // derive() on distinct salts must not produce colliding streams
    EXPECT_EQ(ab, 0);
    EXPECT_EQ(ac, 0);
}

TEST(Rng, DeriveIsAPureFunction) {
    auto a = Rng::derive(7, 1, 2, 3);
    auto b = Rng::derive(7, 1, 2, 3);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, UniformStaysInHalfOpenUnitInterval) {
    Rng rng(5);
    double lo = 1.0, hi = 0.0;
    for (int i = 0; i < 100000; ++i) {
        double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        lo = std::min(lo, u);
        hi = std::max(hi, u);
    }
    // with 1e5 draws the extremes should come close to the interval ends
    EXPECT_LT(lo, 0.001);
    EXPECT_GT(hi, 0.999);
}

TEST(Rng, UniformRangeRespectsBounds) {
    Rng rng(6);
    for (int i = 0; i < 10000; ++i) {
        double u = rng.uniform(-3.0, 2.0);
        ASSERT_GE(u, -3.0);
        ASSERT_LT(u, 2.0);
    }
}

TEST(Rng, BelowCoversAllResidues) {
    Rng rng(8);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 1000; ++i) {
        auto v = rng.below(7);
        ASSERT_LT(v, 7u);
        seen.insert(v);
    }
    EXPECT_EQ(seen.size(), 7u);
}

TEST(Rng, NormalHasUnitMomentsToSamplingAccuracy) {
    Rng rng(9);
    const int n = 200000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        double x = rng.normal();
        sum += x;
        sq += x * x;
    }
    double mean = sum / n;
    double var = sq / n - mean * mean;
    // standard error of the mean is 1/sqrt(n) ~ 0.0022; allow 4 sigma
    EXPECT_NEAR(mean, 0.0, 4.0 / std::sqrt(double(n)));
    EXPECT_NEAR(var, 1.0, 0.02);
}

TEST(Rng, ShuffleIsAPermutationAndSeedStable) {
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    auto w = v;

    Rng r1(17);
    r1.shuffle(v);
    auto sorted = v;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, w);      // still a permutation of 0..49
    EXPECT_NE(v, w);           // and with 50 elements virtually never the identity

    auto again = w;
    Rng r2(17);
    r2.shuffle(again);
    EXPECT_EQ(again, v);       // same seed, same order
}

TEST(Rng, ShuffleHandlesDegenerateSizes) {
    Rng rng(3);
    std::vector<int> empty;
    rng.shuffle(empty);
    EXPECT_TRUE(empty.empty());
    std::vector<int> one{42};
    rng.shuffle(one);
    EXPECT_EQ(one[0], 42);
}
