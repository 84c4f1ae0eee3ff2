#include <casteer/vector_builder.hpp>

#include "support/generators.hpp"

#include <gtest/gtest.h>

using namespace casteer;
using casteer::testing::Gen;
using casteer::testing::single_slot_trace;

namespace {

constexpr double inv_sqrt2 = 0.70710678118654752;

ActivationTrace zeros_like(const ActivationTrace& t) {
    ActivationTrace z = ActivationTrace::zeros(t.layout);
    z.seed = t.seed;
    return z;
}

}  // namespace

TEST(PatchAverage, HandValues) {
    auto avg = patch_average(single_slot_trace({{1.0f, 0.0f}, {0.0f, 1.0f}}));
    EXPECT_DOUBLE_EQ(avg.at(0, 0)[0], 0.5);
    EXPECT_DOUBLE_EQ(avg.at(0, 0)[1], 0.5);

    avg = patch_average(single_slot_trace({{0.25f, -3.0f, 7.5f}}));
    EXPECT_EQ(avg.at(0, 0)[0], 0.25);
    EXPECT_EQ(avg.at(0, 0)[1], -3.0);
    EXPECT_EQ(avg.at(0, 0)[2], 7.5);

    avg = patch_average(single_slot_trace({{0.0f, 0.0f}, {0.0f, 0.0f}, {0.0f, 0.0f}}));
    EXPECT_EQ(avg.at(0, 0)[0], 0.0);
    EXPECT_EQ(avg.at(0, 0)[1], 0.0);
}

TEST(Normalize, HandValuesAndZero) {
    const auto v = normalize(std::vector<double>{3.0, 4.0});
    EXPECT_NEAR(v[0], 0.6, 1e-15);
    EXPECT_NEAR(v[1], 0.8, 1e-15);
    const auto u = normalize(std::vector<double>{0.0, 1.0, 0.0});
    EXPECT_EQ(u, (std::vector<double>{0.0, 1.0, 0.0}));
    try {
        (void)normalize(std::vector<double>{0.0, 0.0});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::numeric);
        EXPECT_STREQ(e.what(), "zero-norm vector");
    }
}

TEST(BuildSteeringSet, SinglePair) {
    const auto pos = single_slot_trace({{1.0f, 0.0f}, {0.0f, 1.0f}});
    const auto set = build_steering_set({pos}, {zeros_like(pos)}, ZeroPolicy::error);
    EXPECT_EQ(set.mode, SteeringMode::erase);
    EXPECT_NEAR(set.at(0, 0)[0], inv_sqrt2, 1e-7);
    EXPECT_NEAR(set.at(0, 0)[1], inv_sqrt2, 1e-7);
    EXPECT_FALSE(set.is_null(0, 0));
}

TEST(BuildSteeringSet, IdenticalTracesFollowZeroPolicy) {
    const auto t = single_slot_trace({{1.0f, 2.0f}});
    try {
        (void)build_steering_set({t}, {t}, ZeroPolicy::error);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::numeric);
        EXPECT_STREQ(e.what(), "zero-norm at layer 1 step 1");
    }
    const auto set = build_steering_set({t}, {t}, ZeroPolicy::null_mask);
    EXPECT_TRUE(set.is_null(0, 0));
    EXPECT_EQ(set.at(0, 0)[0], 0.0f);
    EXPECT_NO_THROW(set.validate());
}

TEST(BuildSteeringSet, TwoPairsAverage) {
    const auto p1 = single_slot_trace({{1.0f, 0.0f}}, 1);
    const auto p2 = single_slot_trace({{0.0f, 1.0f}}, 2);
    const auto set = build_steering_set({p1, p2}, {zeros_like(p1), zeros_like(p2)}, ZeroPolicy::error);
    EXPECT_NEAR(set.at(0, 0)[0], inv_sqrt2, 1e-7);
    EXPECT_NEAR(set.at(0, 0)[1], inv_sqrt2, 1e-7);
    EXPECT_EQ(set.metadata["pairs"], 2);
}

TEST(BuildSteeringSet, RejectsMismatchedInputs) {
    const auto a = single_slot_trace({{1.0f, 0.0f}}, 1);
    const auto b = single_slot_trace({{0.0f, 1.0f}}, 2);
    EXPECT_THROW((void)build_steering_set({a}, {b}, ZeroPolicy::error), Error);  // seeds differ
    const auto c = single_slot_trace({{0.0f, 1.0f, 0.0f}}, 1);
    EXPECT_THROW((void)build_steering_set({a}, {c}, ZeroPolicy::error), Error);  // widths differ
    EXPECT_THROW((void)build_steering_set({}, {}, ZeroPolicy::error), Error);
    EXPECT_THROW((void)build_steering_set({a, a}, {a}, ZeroPolicy::error), Error);
}

TEST(BuildSwitchSet, HandValuesAndAntisymmetry) {
    const auto x = single_slot_trace({{2.0f, 0.0f}});
    const auto y = single_slot_trace({{0.0f, 2.0f}});
    const auto xy = build_switch_set({x}, {y}, ZeroPolicy::error);
    EXPECT_EQ(xy.mode, SteeringMode::switch_concept);
    EXPECT_NEAR(xy.at(0, 0)[0], inv_sqrt2, 1e-7);
    EXPECT_NEAR(xy.at(0, 0)[1], -inv_sqrt2, 1e-7);
    const auto yx = build_switch_set({y}, {x}, ZeroPolicy::error);
    EXPECT_EQ(yx.at(0, 0)[0], -xy.at(0, 0)[0]);
    EXPECT_EQ(yx.at(0, 0)[1], -xy.at(0, 0)[1]);
    EXPECT_THROW((void)build_switch_set({x}, {x}, ZeroPolicy::error), Error);
}

TEST(BuilderProperties, AntisymmetryScaleInvarianceAndDeterminism) {
    Gen gen(77);
    for (int round = 0; round < 50; ++round) {
        const TraceLayout layout = gen.layout(3, 3, 6, 8);
        const std::size_t pairs = gen.size(1, 3);
        std::vector<ActivationTrace> pos, neg, pos_scaled;
        const double lambda = gen.uniform(0.5, 8.0);
        for (std::size_t p = 0; p < pairs; ++p) {
            ActivationTrace n = gen.trace(layout);
            ActivationTrace d = gen.trace(layout);
            ActivationTrace a = n, b = n;
            for (std::size_t s = 0; s < n.tensors.size(); ++s)
                for (std::size_t e = 0; e < n.tensors[s].data.size(); ++e) {
                    a.tensors[s].data[e] = static_cast<float>(n.tensors[s].data[e] + d.tensors[s].data[e]);
                    b.tensors[s].data[e] = static_cast<float>(n.tensors[s].data[e] + lambda * d.tensors[s].data[e]);
                }
            pos.push_back(a);
            pos_scaled.push_back(b);
            neg.push_back(n);
        }
        const auto forward = build_steering_set(pos, neg, ZeroPolicy::error);
        const auto backward = build_steering_set(neg, pos, ZeroPolicy::error);
        const auto scaled = build_steering_set(pos_scaled, neg, ZeroPolicy::error);
        EXPECT_EQ(build_steering_set(pos, neg, ZeroPolicy::error), forward);
        for (std::size_t s = 0; s < forward.vectors.size(); ++s)
            for (std::size_t j = 0; j < forward.vectors[s].size(); ++j) {
                EXPECT_NEAR(backward.vectors[s][j], -forward.vectors[s][j], 1e-6);
                EXPECT_NEAR(scaled.vectors[s][j], forward.vectors[s][j], 1e-6);
            }
    }
}

TEST(BuilderProperties, PairAverageEqualsAverageOfDifferences) {
    Gen gen(78);
    for (int round = 0; round < 30; ++round) {
        const TraceLayout layout = gen.layout(2, 2, 4, 6);
        const std::size_t pairs = gen.size(1, 4);
        std::vector<ActivationTrace> pos, neg;
        for (std::size_t p = 0; p < pairs; ++p) {
            pos.push_back(gen.trace(layout));
            neg.push_back(gen.trace(layout));
            neg.back().seed = pos.back().seed;
        }
        const auto set = build_steering_set(pos, neg, ZeroPolicy::error);
        // Oracle: per-pair, per-patch differences averaged directly.
        for (std::size_t i = 0; i < layout.num_layers; ++i)
            for (std::size_t t = 0; t < layout.num_steps; ++t) {
                std::vector<double> diff(layout.emb_sizes[i], 0.0);
                for (std::size_t p = 0; p < pairs; ++p)
                    for (std::size_t k = 0; k < layout.patch_nums[i]; ++k)
                        for (std::size_t j = 0; j < diff.size(); ++j)
                            diff[j] += (static_cast<double>(pos[p].at(i, t)(k, j)) - neg[p].at(i, t)(k, j)) /
                                       static_cast<double>(pairs * layout.patch_nums[i]);
                double n = 0.0;
                for (double x : diff)
                    n += x * x;
                n = std::sqrt(n);
                for (std::size_t j = 0; j < diff.size(); ++j)
                    EXPECT_NEAR(set.at(i, t)[j], diff[j] / n, 1e-6);
            }
    }
}
