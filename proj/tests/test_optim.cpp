#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "advnorm/optim.hpp"

using namespace advnorm;

namespace {

// Minimal stand-in for a network: one kernel-like parameter (decayed) and
// one bias-like parameter (never decayed), with externally writable grads.
struct TwoParams {
    std::vector<double> kernel{1.0, -2.0};
    std::vector<double> bias{0.5};
    std::vector<double> gk{0.0, 0.0};
    std::vector<double> gb{0.0};

    std::vector<nn::ParamRef<double>> refs() {
        return {
            {"kernel", {2}, &kernel, &gk, true},
            {"bias", {1}, &bias, &gb, false},
        };
    }
};

} // namespace

TEST(SgdTest, PlainStepMatchesHandComputation) {
    TwoParams p;
    Sgd<double> opt(p.refs(), 0.1, 0.0, 0.0);
    p.gk = {0.5, -1.0};
    p.gb = {2.0};
    opt.step();
    EXPECT_DOUBLE_EQ(p.kernel[0], 1.0 - 0.1 * 0.5);
    EXPECT_DOUBLE_EQ(p.kernel[1], -2.0 + 0.1 * 1.0);
    EXPECT_DOUBLE_EQ(p.bias[0], 0.5 - 0.1 * 2.0);
}

TEST(SgdTest, MomentumAccumulatesAcrossSteps) {
    TwoParams p;
    p.kernel = {1.0, 0.0};
    Sgd<double> opt(p.refs(), 0.1, 0.9, 0.0);
    p.gk = {0.5, 0.0};
    opt.step(); // m = 0.5, w = 1 - 0.05 = 0.95
    EXPECT_DOUBLE_EQ(p.kernel[0], 0.95);
    opt.step(); // m = 0.9*0.5 + 0.5 = 0.95, w = 0.95 - 0.095 = 0.855
    EXPECT_DOUBLE_EQ(p.kernel[0], 0.855);
}

TEST(SgdTest, WeightDecayTouchesOnlyKernelParameters) {
    TwoParams p;
    p.kernel = {2.0, -4.0};
    p.bias = {3.0};
    Sgd<double> opt(p.refs(), 0.1, 0.0, 0.1);
    // zero gradients isolate the decay term
    opt.step();
    EXPECT_DOUBLE_EQ(p.kernel[0], 2.0 - 0.1 * 0.1 * 2.0);
    EXPECT_DOUBLE_EQ(p.kernel[1], -4.0 + 0.1 * 0.1 * 4.0);
    EXPECT_DOUBLE_EQ(p.bias[0], 3.0); // biases are exempt
}

TEST(SgdTest, ZeroLearningRateFreezesParameters) {
    TwoParams p;
    auto k0 = p.kernel;
    auto b0 = p.bias;
    Sgd<double> opt(p.refs(), 0.0, 0.9, 0.1);
    p.gk = {123.0, -7.0};
    p.gb = {9.0};
    for (int i = 0; i < 5; ++i) opt.step();
    EXPECT_EQ(p.kernel, k0);
    EXPECT_EQ(p.bias, b0);
}

TEST(SgdTest, LearningRateIsAdjustableMidRun) {
    TwoParams p;
    Sgd<double> opt(p.refs(), 0.1, 0.0, 0.0);
    EXPECT_DOUBLE_EQ(opt.lr(), 0.1);
    opt.set_lr(0.01);
    EXPECT_DOUBLE_EQ(opt.lr(), 0.01);
    p.gk = {1.0, 0.0};
    opt.step();
    EXPECT_DOUBLE_EQ(p.kernel[0], 1.0 - 0.01);
    EXPECT_THROW(opt.set_lr(-1.0), ValidationError);
}

TEST(SgdTest, ConstructorRejectsBadHyperparameters) {
    TwoParams p;
    EXPECT_THROW(Sgd<double>(p.refs(), -0.1, 0.9, 0.0), ValidationError);
    EXPECT_THROW(Sgd<double>(p.refs(), 0.1, 1.0, 0.0), ValidationError);
    EXPECT_THROW(Sgd<double>(p.refs(), 0.1, -0.1, 0.0), ValidationError);
    EXPECT_THROW(Sgd<double>(p.refs(), 0.1, 0.9, -1.0), ValidationError);
    EXPECT_NO_THROW(Sgd<double>(p.refs(), 0.0, 0.0, 0.0));
}

TEST(SgdTest, VelocityBuffersAreExposedInVisitOrder) {
    TwoParams p;
    Sgd<double> opt(p.refs(), 0.1, 0.9, 0.0);
    p.gk = {1.0, 2.0};
    p.gb = {3.0};
    opt.step();
    std::vector<std::string> names;
    std::vector<std::vector<double>> buffers;
    opt.visit_velocity([&](const std::string& n, const std::vector<int>&,
                           const std::vector<double>& m) {
        names.push_back(n);
        buffers.push_back(m);
    });
    ASSERT_EQ(names.size(), 2u);
    EXPECT_EQ(names[0], "kernel");
    EXPECT_EQ(names[1], "bias");
    EXPECT_DOUBLE_EQ(buffers[0][0], 1.0);
    EXPECT_DOUBLE_EQ(buffers[0][1], 2.0);
    EXPECT_DOUBLE_EQ(buffers[1][0], 3.0);
    EXPECT_EQ(opt.num_params(), 2u);
}

TEST(PlateauSchedulerTest, CutsAfterExactlyPatienceStallObservations) {
    PlateauScheduler s(3, 10.0);
    EXPECT_FALSE(s.observe(1.0)); // establishes the best
    EXPECT_FALSE(s.observe(1.0)); // stall 1
    EXPECT_FALSE(s.observe(1.0)); // stall 2
    EXPECT_TRUE(s.observe(1.0));  // stall 3 -> cut
    EXPECT_EQ(s.cuts(), 1);
    EXPECT_EQ(s.bad_epochs(), 0); // counter reset by the cut
}

TEST(PlateauSchedulerTest, EqualToBestCountsAsStall) {
    PlateauScheduler s(2, 10.0);
    EXPECT_FALSE(s.observe(0.5));
    EXPECT_FALSE(s.observe(0.5)); // not strictly better
    EXPECT_TRUE(s.observe(0.5));
    EXPECT_EQ(s.cuts(), 1);
}

TEST(PlateauSchedulerTest, ImprovementResetsTheCounter) {
    PlateauScheduler s(3, 10.0);
    EXPECT_FALSE(s.observe(1.0));
    EXPECT_FALSE(s.observe(1.1));
    EXPECT_FALSE(s.observe(1.2));
    EXPECT_FALSE(s.observe(0.9)); // improvement wipes the two stalls
    EXPECT_FALSE(s.observe(0.95));
    EXPECT_FALSE(s.observe(0.95));
    EXPECT_TRUE(s.observe(0.95));
    EXPECT_EQ(s.cuts(), 1);
}

TEST(PlateauSchedulerTest, KeepsCuttingOnContinuedStall) {
    PlateauScheduler s(2, 10.0);
    s.observe(1.0);
    int cuts_seen = 0;
    for (int i = 0; i < 8; ++i)
        if (s.observe(1.0)) ++cuts_seen;
    // 8 stall observations with patience 2 -> cuts at 2, 4, 6, 8
    EXPECT_EQ(cuts_seen, 4);
    EXPECT_EQ(s.cuts(), 4);
}

TEST(PlateauSchedulerTest, StateRoundTripContinuesIdentically) {
    PlateauScheduler a(3, 10.0);
    a.observe(2.0);
    a.observe(2.5); // one stall in flight
    auto b = PlateauScheduler::from_state(a.state());
    for (double loss : {2.5, 2.5, 2.5, 1.0, 1.5}) {
        EXPECT_EQ(a.observe(loss), b.observe(loss)) << "diverged at loss " << loss;
        EXPECT_EQ(a.cuts(), b.cuts());
        EXPECT_EQ(a.bad_epochs(), b.bad_epochs());
    }
}

TEST(PlateauSchedulerTest, FreshStateSerializesBestAsNull) {
    PlateauScheduler s(3, 10.0);
    auto j = s.state();
    EXPECT_TRUE(j.at("best").is_null());
    auto back = PlateauScheduler::from_state(j);
    EXPECT_FALSE(back.observe(100.0)); // anything finite improves on +inf
    EXPECT_DOUBLE_EQ(back.best(), 100.0);
}

TEST(PlateauSchedulerTest, RejectsBadParameters) {
    EXPECT_THROW(PlateauScheduler(0, 10.0), ValidationError);
    EXPECT_THROW(PlateauScheduler(3, 1.0), ValidationError);
    EXPECT_THROW(PlateauScheduler(3, 0.5), ValidationError);
    EXPECT_NO_THROW(PlateauScheduler(1, 1.5));
}
