#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "advnorm/nn.hpp"
#include "advnorm/rng.hpp"
#include "test_util.hpp"

using namespace advnorm;
using namespace advnorm::nn;

namespace {

// Scalar probe loss sum(r * out) so that d(loss)/d(out) = r; every gradient
// check below projects through a fixed random direction this way.
double dot(const Tensor<double>& a, const Tensor<double>& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) acc += a.v[i] * b.v[i];
    return acc;
}

// Inputs for activation tests stay away from the kink at zero, where a
// finite difference straddles the non-differentiable point.
Tensor<double> kink_free_input(int ch, int n, Rng& rng) {
    Tensor<double> x(ch, n, n, n);
    for (auto& v : x.v) {
        double m = rng.uniform(0.1, 1.0);
        v = rng.uniform() < 0.5 ? -m : m;
    }
    return x;
}

// Reference convolution: direct triple loop over the kernel with zero
// padding, no layout tricks. Used to pin down the optimized path.
Tensor<double> conv_reference(const Tensor<double>& x, const std::vector<double>& w,
                              const std::vector<double>& b, int out_ch, int k, int stride,
                              int pad) {
    auto ext = [&](int n) { return (n + 2 * pad - k) / stride + 1; };
    Tensor<double> out(out_ch, ext(x.nx), ext(x.ny), ext(x.nz));
    for (int oc = 0; oc < out_ch; ++oc)
        for (int z = 0; z < out.nz; ++z)
            for (int y = 0; y < out.ny; ++y)
                for (int xx = 0; xx < out.nx; ++xx) {
                    double acc = b[static_cast<std::size_t>(oc)];
                    for (int ic = 0; ic < x.ch; ++ic)
                        for (int kz = 0; kz < k; ++kz)
                            for (int ky = 0; ky < k; ++ky)
                                for (int kx = 0; kx < k; ++kx) {
                                    int iz = z * stride + kz - pad;
                                    int iy = y * stride + ky - pad;
                                    int ix = xx * stride + kx - pad;
                                    if (iz < 0 || iz >= x.nz || iy < 0 || iy >= x.ny || ix < 0 ||
                                        ix >= x.nx)
                                        continue;
                                    std::size_t wi =
                                        ((((static_cast<std::size_t>(oc) * x.ch + ic) * k) + kz) * k +
                                         ky) * k + kx;
                                    acc += w[wi] * x.plane(ic)[(static_cast<std::size_t>(iz) * x.ny +
                                                                iy) * x.nx + ix];
                                }
                    out.plane(oc)[out.at(0, xx, y, z)] = acc;
                }
    return out;
}

} // namespace

TEST(Conv3dTest, OutExtentFollowsTheUsualFormula) {
    Conv3d<double> same("same", 1, 1, 3, 1, 1);
    EXPECT_EQ(same.out_extent(16), 16);
    Conv3d<double> down("down", 1, 1, 3, 2, 1);
    EXPECT_EQ(down.out_extent(16), 8);
    EXPECT_EQ(down.out_extent(15), 8);
    Conv3d<double> one("one", 1, 1, 1, 1, 0);
    EXPECT_EQ(one.out_extent(16), 16);
}

TEST(Conv3dTest, FastPathMatchesReferenceConvolution) {
    Rng rng(301);
    Conv3d<double> conv("c", 2, 3, 3, 1, 1);
    conv.init_kaiming(rng);
    for (auto& b : conv.bias()) b = rng.uniform(-0.5, 0.5);

    Tensor<double> x(2, 5, 4, 3); // non-cubic grid catches axis mixups
    testutil::fill_uniform(x, rng);
    auto got = conv.forward(x);
    auto want = conv_reference(x, conv.weights(), conv.bias(), 3, 3, 1, 1);
    ASSERT_TRUE(got.same_grid(want));
    for (std::size_t i = 0; i < got.v.size(); ++i) EXPECT_NEAR(got.v[i], want.v[i], 1e-12);
}

TEST(Conv3dTest, StridedPathMatchesReferenceConvolution) {
    Rng rng(302);
    Conv3d<double> conv("c", 2, 2, 3, 2, 1);
    conv.init_kaiming(rng);
    Tensor<double> x(2, 6, 5, 4);
    testutil::fill_uniform(x, rng);
    auto got = conv.forward(x);
    auto want = conv_reference(x, conv.weights(), conv.bias(), 2, 3, 2, 1);
    ASSERT_TRUE(got.same_grid(want));
    for (std::size_t i = 0; i < got.v.size(); ++i) EXPECT_NEAR(got.v[i], want.v[i], 1e-12);
}

TEST(Conv3dTest, WrongChannelCountIsRejected) {
    Conv3d<double> conv("c", 2, 3, 3, 1, 1);
    Tensor<double> x(3, 4, 4, 4);
    EXPECT_THROW(conv.forward(x), ValidationError);
}

// One finite-difference sweep per conv configuration: input gradients via
// backward(), parameter gradients via the visit() refs.
static void check_conv_grads(int in_ch, int out_ch, int k, int stride, int pad, int nx, int ny,
                             int nz, std::uint64_t seed) {
    Rng rng(seed);
    Conv3d<double> conv("c", in_ch, out_ch, k, stride, pad);
    conv.init_kaiming(rng);
    for (auto& b : conv.bias()) b = rng.uniform(-0.3, 0.3);

    Tensor<double> x(in_ch, nx, ny, nz);
    testutil::fill_uniform(x, rng);
    auto out = conv.forward(x);
    Tensor<double> r(out.ch, out.nx, out.ny, out.nz);
    testutil::fill_uniform(r, rng);

    conv.zero_grads();
    auto gin = conv.backward(r);

    const double h = 1e-5;
    auto probe = [&](const Tensor<double>& xi) { return dot(conv.forward(xi), r); };

    for (int trial = 0; trial < 12; ++trial) {
        std::size_t i = static_cast<std::size_t>(rng.below(x.size()));
        auto xp = x, xm = x;
        xp.v[i] += h;
        xm.v[i] -= h;
        double fd = (probe(xp) - probe(xm)) / (2 * h);
        EXPECT_LT(testutil::rel_err(gin.v[i], fd), 1e-6) << "input entry " << i;
    }

    std::vector<ParamRef<double>> params;
    conv.visit([&](const ParamRef<double>& p) { params.push_back(p); });
    for (const auto& p : params) {
        for (int trial = 0; trial < 8; ++trial) {
            std::size_t i = static_cast<std::size_t>(rng.below(p.value->size()));
            double saved = (*p.value)[i];
            (*p.value)[i] = saved + h;
            double up = probe(x);
            (*p.value)[i] = saved - h;
            double down = probe(x);
            (*p.value)[i] = saved;
            double fd = (up - down) / (2 * h);
            EXPECT_LT(testutil::rel_err((*p.grad)[i], fd), 1e-6) << p.name << " entry " << i;
        }
    }
    conv.forward(x); // leave the cache in a sane state
}

TEST(Conv3dTest, FastPathGradientsMatchFiniteDifferences) {
    check_conv_grads(2, 3, 3, 1, 1, 4, 4, 4, 303);
}

TEST(Conv3dTest, StridedGradientsMatchFiniteDifferences) {
    check_conv_grads(2, 2, 3, 2, 1, 6, 6, 6, 304);
}

TEST(Conv3dTest, PointwiseGradientsMatchFiniteDifferences) {
    check_conv_grads(3, 2, 1, 1, 0, 4, 4, 4, 305);
}

TEST(Conv3dTest, BackwardCanLeaveParameterGradsUntouched) {
    Rng rng(306);
    Conv3d<double> conv("c", 1, 1, 3, 1, 1);
    conv.init_kaiming(rng);
    Tensor<double> x(1, 4, 4, 4);
    testutil::fill_uniform(x, rng);
    auto out = conv.forward(x);
    Tensor<double> r(1, 4, 4, 4);
    testutil::fill_uniform(r, rng);

    conv.zero_grads();
    conv.backward(r, false);
    conv.visit([&](const ParamRef<double>& p) {
        for (double g : *p.grad) EXPECT_EQ(g, 0.0) << p.name;
    });
}

TEST(ActTest, ForwardShapesAndValues) {
    Tensor<double> x(1, 2, 1, 1);
    x.v = {-2.0, 3.0};

    Act<double> relu(Activation::ReLU);
    auto yr = relu.forward(x);
    EXPECT_EQ(yr.v[0], 0.0);
    EXPECT_EQ(yr.v[1], 3.0);

    Act<double> leaky(Activation::LeakyReLU, 0.01);
    auto yl = leaky.forward(x);
    EXPECT_DOUBLE_EQ(yl.v[0], -0.02);
    EXPECT_EQ(yl.v[1], 3.0);

    Act<double> lin(Activation::Linear);
    auto yi = lin.forward(x);
    EXPECT_EQ(yi.v, x.v);
}

TEST(ActTest, GradientsMatchFiniteDifferences) {
    Rng rng(307);
    for (auto kind : {Activation::ReLU, Activation::LeakyReLU, Activation::Linear}) {
        Act<double> act(kind);
        auto x = kink_free_input(2, 3, rng);
        auto out = act.forward(x);
        Tensor<double> r(out.ch, out.nx, out.ny, out.nz);
        testutil::fill_uniform(r, rng);
        auto gin = act.backward(r);

        const double h = 1e-5;
        for (int trial = 0; trial < 15; ++trial) {
            std::size_t i = static_cast<std::size_t>(rng.below(x.size()));
            auto xp = x, xm = x;
            xp.v[i] += h;
            xm.v[i] -= h;
            double fd = (dot(act.forward(xp), r) - dot(act.forward(xm), r)) / (2 * h);
            act.forward(x);
            EXPECT_LT(testutil::rel_err(gin.v[i], fd), 1e-6)
                << activation_name(kind) << " entry " << i;
        }
    }
}

TEST(InstanceNormTest, NormalizesEachChannelToZeroMeanUnitVariance) {
    Rng rng(308);
    InstanceNorm3d<double> norm("n", 2);
    Tensor<double> x(2, 4, 4, 4);
    testutil::fill_uniform(x, rng, -3.0, 5.0);
    auto y = norm.forward(x);
    for (int c = 0; c < 2; ++c) {
        double mean = 0.0, var = 0.0;
        const double* p = y.plane(c);
        for (std::size_t i = 0; i < y.spatial(); ++i) mean += p[i];
        mean /= static_cast<double>(y.spatial());
        for (std::size_t i = 0; i < y.spatial(); ++i) var += (p[i] - mean) * (p[i] - mean);
        var /= static_cast<double>(y.spatial());
        EXPECT_NEAR(mean, 0.0, 1e-9);
        EXPECT_NEAR(var, 1.0, 1e-4); // off by the stabilizing 1e-5 epsilon
    }
}

TEST(InstanceNormTest, AffineTermsScaleAndShift) {
    InstanceNorm3d<double> norm("n", 1);
    std::vector<ParamRef<double>> params;
    norm.visit([&](const ParamRef<double>& p) { params.push_back(p); });
    ASSERT_EQ(params.size(), 2u);
    EXPECT_EQ(params[0].name, "n.gamma");
    EXPECT_EQ(params[1].name, "n.beta");
    EXPECT_FALSE(params[0].decay);
    EXPECT_FALSE(params[1].decay);

    (*params[0].value)[0] = 2.0;
    (*params[1].value)[0] = 5.0;
    Rng rng(309);
    Tensor<double> x(1, 3, 3, 3);
    testutil::fill_uniform(x, rng);
    auto y = norm.forward(x);
    double mean = 0.0;
    for (double v : y.v) mean += v;
    mean /= static_cast<double>(y.v.size());
    EXPECT_NEAR(mean, 5.0, 1e-9);
}

TEST(InstanceNormTest, GradientsMatchFiniteDifferences) {
    Rng rng(310);
    InstanceNorm3d<double> norm("n", 2);
    std::vector<ParamRef<double>> params;
    norm.visit([&](const ParamRef<double>& p) { params.push_back(p); });
    for (auto& p : params)
        for (auto& v : *p.value) v = rng.uniform(0.5, 1.5);

    Tensor<double> x(2, 3, 3, 3);
    testutil::fill_uniform(x, rng);
    auto out = norm.forward(x);
    Tensor<double> r(out.ch, out.nx, out.ny, out.nz);
    testutil::fill_uniform(r, rng);
    norm.zero_grads();
    auto gin = norm.backward(r);

    const double h = 1e-5;
    auto probe = [&](const Tensor<double>& xi) { return dot(norm.forward(xi), r); };
    for (int trial = 0; trial < 15; ++trial) {
        std::size_t i = static_cast<std::size_t>(rng.below(x.size()));
        auto xp = x, xm = x;
        xp.v[i] += h;
        xm.v[i] -= h;
        double fd = (probe(xp) - probe(xm)) / (2 * h);
        EXPECT_LT(testutil::rel_err(gin.v[i], fd), 1e-6) << "input entry " << i;
    }
    for (const auto& p : params) {
        for (std::size_t i = 0; i < p.value->size(); ++i) {
            double saved = (*p.value)[i];
            (*p.value)[i] = saved + h;
            double up = probe(x);
            (*p.value)[i] = saved - h;
            double down = probe(x);
            (*p.value)[i] = saved;
            double fd = (up - down) / (2 * h);
            EXPECT_LT(testutil::rel_err((*p.grad)[i], fd), 1e-6) << p.name << " entry " << i;
        }
    }
}

TEST(UpsampleTest, NearestNeighborForward) {
    Tensor<double> x(1, 2, 2, 1);
    x.v = {1.0, 2.0, 3.0, 4.0};
    Upsample2x<double> up;
    auto y = up.forward(x);
    EXPECT_EQ(y.nx, 4);
    EXPECT_EQ(y.ny, 4);
    EXPECT_EQ(y.nz, 2);
    // every 2x2x2 block carries the parent value
    for (int z = 0; z < 2; ++z)
        for (int yy = 0; yy < 4; ++yy)
            for (int xx = 0; xx < 4; ++xx)
                EXPECT_EQ(y.v[y.at(0, xx, yy, z)], x.v[x.at(0, xx / 2, yy / 2, 0)]);
}

TEST(UpsampleTest, BackwardIsTheExactAdjoint) {
    Rng rng(311);
    Upsample2x<double> up;
    Tensor<double> x(2, 3, 2, 2);
    testutil::fill_uniform(x, rng);
    auto y = up.forward(x);
    Tensor<double> r(y.ch, y.nx, y.ny, y.nz);
    testutil::fill_uniform(r, rng);
    auto gin = up.backward(r);
    // <up(x), r> must equal <x, up^T(r)> for a linear operator
    EXPECT_NEAR(dot(y, r), dot(x, gin), 1e-10);
}

TEST(SoftmaxTest, ProbabilitiesAreAStrictSimplex) {
    Rng rng(312);
    ChannelSoftmax<double> sm;
    Tensor<double> x(4, 3, 3, 3);
    testutil::fill_uniform(x, rng, -30.0, 30.0); // large logits stay stable
    auto y = sm.forward(x);
    for (std::size_t i = 0; i < y.spatial(); ++i) {
        double total = 0.0;
        for (int c = 0; c < y.ch; ++c) {
            EXPECT_GE(y.plane(c)[i], 0.0);
            total += y.plane(c)[i];
        }
        EXPECT_NEAR(total, 1.0, 1e-9);
    }
}

TEST(SoftmaxTest, ZeroLogitsGiveTheUniformDistribution) {
    ChannelSoftmax<double> sm;
    Tensor<double> x(5, 2, 2, 2);
    auto y = sm.forward(x);
    for (double v : y.v) EXPECT_NEAR(v, 0.2, 1e-12);
    EXPECT_EQ(sm.probs().v[0], y.v[0]); // probs() exposes the cached output
}

TEST(SoftmaxTest, LogitGradientsMatchFiniteDifferences) {
    Rng rng(313);
    ChannelSoftmax<double> sm;
    Tensor<double> x(3, 2, 2, 2);
    testutil::fill_uniform(x, rng, -2.0, 2.0);
    auto y = sm.forward(x);
    Tensor<double> r(y.ch, y.nx, y.ny, y.nz);
    testutil::fill_uniform(r, rng);
    auto gin = sm.backward(r);

    const double h = 1e-5;
    for (int trial = 0; trial < 20; ++trial) {
        std::size_t i = static_cast<std::size_t>(rng.below(x.size()));
        auto xp = x, xm = x;
        xp.v[i] += h;
        xm.v[i] -= h;
        ChannelSoftmax<double> fresh;
        double fd = (dot(fresh.forward(xp), r) - dot(fresh.forward(xm), r)) / (2 * h);
        EXPECT_LT(testutil::rel_err(gin.v[i], fd), 1e-6) << "logit " << i;
    }
}

TEST(SoftmaxTest, ConstantShiftAcrossChannelsChangesNothing) {
    Rng rng(314);
    ChannelSoftmax<double> sm;
    Tensor<double> x(3, 2, 2, 2);
    testutil::fill_uniform(x, rng);
    auto y = sm.forward(x);
    auto shifted = x;
    for (auto& v : shifted.v) v += 17.5;
    ChannelSoftmax<double> sm2;
    auto y2 = sm2.forward(shifted);
    for (std::size_t i = 0; i < y.v.size(); ++i) EXPECT_NEAR(y2.v[i], y.v[i], 1e-12);
}

TEST(DenseTest, ForwardIsARowMajorMatmul) {
    Dense<double> d("d", 3, 2);
    std::vector<ParamRef<double>> params;
    d.visit([&](const ParamRef<double>& p) { params.push_back(p); });
    ASSERT_EQ(params.size(), 2u);
    EXPECT_TRUE(params[0].decay);
    EXPECT_FALSE(params[1].decay);
    *params[0].value = {1.0, 2.0, 3.0, 4.0, 5.0, 6.0};
    *params[1].value = {0.5, -0.5};

    auto y = d.forward({1.0, 0.0, -1.0});
    ASSERT_EQ(y.size(), 2u);
    EXPECT_DOUBLE_EQ(y[0], 1.0 - 3.0 + 0.5);
    EXPECT_DOUBLE_EQ(y[1], 4.0 - 6.0 - 0.5);
}

TEST(DenseTest, GradientsMatchFiniteDifferences) {
    Rng rng(315);
    Dense<double> d("d", 6, 4);
    d.init_kaiming(rng);
    std::vector<double> x(6), r(4);
    testutil::fill_uniform(x, rng);
    testutil::fill_uniform(r, rng);

    auto out = d.forward(x);
    d.zero_grads();
    auto gin = d.backward(r);

    auto probe = [&](const std::vector<double>& xi) {
        auto y = d.forward(xi);
        double acc = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * r[i];
        return acc;
    };
    const double h = 1e-5;
    for (std::size_t i = 0; i < x.size(); ++i) {
        auto xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        double fd = (probe(xp) - probe(xm)) / (2 * h);
        EXPECT_LT(testutil::rel_err(gin[i], fd), 1e-6) << "input " << i;
    }
    std::vector<ParamRef<double>> params;
    d.visit([&](const ParamRef<double>& p) { params.push_back(p); });
    for (const auto& p : params) {
        for (std::size_t i = 0; i < p.value->size(); ++i) {
            double saved = (*p.value)[i];
            (*p.value)[i] = saved + h;
            double up = probe(x);
            (*p.value)[i] = saved - h;
            double down = probe(x);
            (*p.value)[i] = saved;
            double fd = (up - down) / (2 * h);
            EXPECT_LT(testutil::rel_err((*p.grad)[i], fd), 1e-6) << p.name << " entry " << i;
        }
    }
}
