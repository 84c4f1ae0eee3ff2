#include <casteer/heatmap.hpp>
#include <casteer/steering.hpp>

#include "support/generators.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace casteer;
using casteer::testing::Gen;

namespace {

using Vec = std::vector<double>;

SteeringConfig erase(double beta, bool clip = false) {
    SteeringConfig cfg;
    cfg.beta = beta;
    cfg.clip = clip;
    return cfg;
}

double dot(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j)
        s += a[j] * b[j];
    return s;
}

// Scalar reference for one patch, written out from the update rule.
std::vector<float> reference_patch(const std::vector<float>& c, std::span<const float> s, double beta) {
    double d = 0.0;
    for (std::size_t j = 0; j < c.size(); ++j)
        d += static_cast<double>(c[j]) * static_cast<double>(s[j]);
    std::vector<float> out(c.size());
    for (std::size_t j = 0; j < c.size(); ++j)
        out[j] = static_cast<float>(static_cast<double>(c[j]) - beta * d * static_cast<double>(s[j]));
    return out;
}

}  // namespace

TEST(SteerPatch, HandExamples) {
    const Vec s{1.0, 0.0};
    Vec out = steer_patch(Vec{2.0, 3.0}, s, erase(2.0));
    EXPECT_EQ(out, (Vec{-2.0, 3.0}));
    EXPECT_DOUBLE_EQ(std::hypot(out[0], out[1]), std::sqrt(13.0));

    EXPECT_EQ(steer_patch(Vec{-2.0, 3.0}, s, erase(2.0, true)), (Vec{-2.0, 3.0}));
    EXPECT_EQ(steer_patch(Vec{2.0, 3.0}, s, erase(1.0)), (Vec{0.0, 3.0}));

    SteeringConfig constant = erase(2.0);
    constant.alpha_mode = AlphaMode::constant;
    constant.constant_alpha = 1.0;
    EXPECT_EQ(steer_patch(Vec{2.0, 3.0}, s, constant), (Vec{1.0, 3.0}));
    constant.clip = true;
    EXPECT_EQ(steer_patch(Vec{-2.0, 3.0}, s, constant), (Vec{-3.0, 3.0}));

    SteeringConfig add;
    add.mode = SteeringMode::add;
    add.alpha_mode = AlphaMode::constant;
    add.constant_alpha = 0.5;
    EXPECT_EQ(steer_patch(Vec{2.0, 3.0}, s, add), (Vec{2.5, 3.0}));
    add.constant_alpha = 0.0;
    EXPECT_EQ(steer_patch(Vec{2.0, 3.0}, s, add), (Vec{2.0, 3.0}));
}

TEST(SteerPatch, Errors) {
    EXPECT_THROW((void)steer_patch(Vec{1.0, 2.0}, Vec{1.0, 0.0, 0.0}, erase(2.0)), Error);
    EXPECT_THROW((void)steer_patch(Vec{NAN, 2.0}, Vec{1.0, 0.0}, erase(2.0)), Error);
    EXPECT_THROW((void)steer_patch(Vec{1.0, 2.0}, Vec{2.0, 0.0}, erase(2.0)), Error);
    SteeringConfig add;
    add.mode = SteeringMode::add;
    EXPECT_THROW((void)steer_patch(Vec{1.0, 2.0}, Vec{1.0, 0.0}, add), Error);
    EXPECT_THROW((void)steer_patch(Vec{1.0, 2.0}, Vec{1.0, 0.0}, erase(-1.0)), Error);
    EXPECT_EQ(steer_patch(Vec{1.0, 2.0}, Vec{0.0, 0.0}, erase(2.0)), (Vec{1.0, 2.0}));
}

TEST(SteerPatch, HouseholderProperties) {
    Gen gen(101);
    for (int round = 0; round < 300; ++round) {
        const std::size_t d = gen.size(2, 32);
        const Vec s = gen.unit(d);
        const Vec c = gen.vec(d, gen.uniform(0.1, 10.0));
        const Vec once = steer_patch(c, s, erase(2.0));
        const Vec twice = steer_patch(once, s, erase(2.0));
        const double nc = std::sqrt(dot(c, c));
        EXPECT_NEAR(std::sqrt(dot(once, once)), nc, 1e-5 * nc);
        for (std::size_t j = 0; j < d; ++j)
            EXPECT_NEAR(twice[j], c[j], 1e-5);
        for (double beta : {0.0, 0.5, 1.0, 1.5, 2.0, 3.0}) {
            const Vec out = steer_patch(c, s, erase(beta));
            EXPECT_NEAR(dot(s, out), (1.0 - beta) * dot(s, c), 1e-5);
        }
    }
}

TEST(SteerPatch, OrthogonalComplementUntouched) {
    const Vec s{0.6, 0.8, 0.0};
    const Vec c{-0.8, 0.6, 5.0};
    ASSERT_EQ(dot(s, c), 0.0);
    for (double beta : {0.5, 2.0, 7.0})
        for (bool clip : {false, true})
            EXPECT_EQ(steer_patch(c, s, erase(beta, clip)), c);
    SteeringConfig sw = erase(2.0);
    sw.mode = SteeringMode::switch_concept;
    EXPECT_EQ(steer_patch(c, s, sw), c);
}

TEST(SteerPatch, ClipEquivalence) {
    Gen gen(102);
    for (int round = 0; round < 300; ++round) {
        const std::size_t d = gen.size(2, 16);
        const Vec s = gen.unit(d);
        const Vec c = gen.vec(d);
        const double beta = gen.uniform(0.0, 4.0);
        const Vec clipped = steer_patch(c, s, erase(beta, true));
        if (dot(s, c) >= 0.0)
            EXPECT_EQ(clipped, steer_patch(c, s, erase(beta)));
        else
            EXPECT_EQ(clipped, c);
    }
}

TEST(SteerPatch, SwitchFlipsSign) {
    Gen gen(103);
    SteeringConfig sw = erase(2.0);
    sw.mode = SteeringMode::switch_concept;
    for (int round = 0; round < 100; ++round) {
        const std::size_t d = gen.size(2, 16);
        const Vec s = gen.unit(d);
        const Vec c = gen.vec(d);
        EXPECT_NEAR(dot(s, steer_patch(c, s, sw)), -dot(s, c), 1e-5);
    }
}

TEST(ApplyToTrace, EmptySubsetAndNullSetAreIdentity) {
    Gen gen(104);
    const TraceLayout layout = gen.layout();
    const ActivationTrace trace = gen.trace(layout);
    SteeringConfig cfg = erase(2.0);
    cfg.layer_subset = std::set<std::size_t>{};
    EXPECT_EQ(apply_to_trace(trace, gen.steering_set(layout), cfg), trace);
    EXPECT_EQ(apply_to_trace(trace, gen.steering_set(layout, 1.0), erase(2.0)), trace);
}

TEST(ApplyToTrace, LayerSubsetMatchesScalarReference) {
    Gen gen(105);
    const TraceLayout layout{2, 3, {4, 5}, {3, 6}};
    const ActivationTrace trace = gen.trace(layout);
    const SteeringSet set = gen.steering_set(layout);
    SteeringConfig cfg = erase(1.5);
    cfg.layer_subset = std::set<std::size_t>{1};
    const ActivationTrace out = apply_to_trace(trace, set, cfg);
    for (std::size_t t = 0; t < 3; ++t) {
        EXPECT_EQ(out.at(0, t), trace.at(0, t));
        for (std::size_t k = 0; k < 5; ++k) {
            const auto row = trace.at(1, t).row(k);
            const auto expect = reference_patch({row.begin(), row.end()}, set.at(1, t), 1.5);
            const auto got = out.at(1, t).row(k);
            for (std::size_t j = 0; j < 6; ++j)
                EXPECT_EQ(got[j], expect[j]);
        }
    }
    cfg.layer_subset = std::set<std::size_t>{2};
    EXPECT_THROW((void)apply_to_trace(trace, set, cfg), Error);
}

TEST(ApplyToTrace, LocalityOnRandomSubsets) {
    Gen gen(106);
    for (int round = 0; round < 40; ++round) {
        const TraceLayout layout = gen.layout(4, 2, 3, 4);
        const ActivationTrace trace = gen.trace(layout);
        SteeringConfig cfg = erase(gen.uniform(0.0, 3.0), gen.coin());
        std::set<std::size_t> subset;
        for (std::size_t i = 0; i < layout.num_layers; ++i)
            if (gen.coin())
                subset.insert(i);
        cfg.layer_subset = subset;
        const ActivationTrace out = apply_to_trace(trace, gen.steering_set(layout, 0.2), cfg);
        for (std::size_t i = 0; i < layout.num_layers; ++i)
            if (!subset.contains(i)) {
                for (std::size_t t = 0; t < layout.num_steps; ++t)
                    EXPECT_EQ(out.at(i, t), trace.at(i, t));
            }
    }
}

TEST(ApplyToTrace, StepMapping) {
    Gen gen(107);
    const TraceLayout layout = TraceLayout::uniform(2, 4, 3, 5);
    const ActivationTrace trace = gen.trace(layout);
    const SteeringSet single = gen.steering_set(TraceLayout::uniform(2, 1, 1, 5));
    EXPECT_THROW((void)apply_to_trace(trace, single, erase(2.0)), Error);
    SteeringConfig cfg = erase(2.0);
    cfg.step_map = StepMap::broadcast_single;
    const auto via_map = apply_to_trace(trace, single, cfg);
    EXPECT_EQ(apply_to_trace(trace, broadcast_set(single, 4), erase(2.0)), via_map);
    EXPECT_THROW((void)apply_to_trace(trace, gen.steering_set(TraceLayout::uniform(2, 2, 1, 5)), cfg), Error);
}

TEST(Broadcast, ReplicatesAndRejectsMultiStep) {
    Gen gen(108);
    const SteeringSet single = gen.steering_set(TraceLayout::uniform(3, 1, 1, 4), 0.3);
    const SteeringSet four = broadcast_set(single, 4);
    EXPECT_EQ(four.layout.num_steps, 4u);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t t = 0; t < 4; ++t) {
            EXPECT_EQ(four.vectors[four.layout.slot(i, t)], single.vectors[i]);
            EXPECT_EQ(four.is_null(i, t), single.is_null(i, 0));
        }
    EXPECT_EQ(four.metadata["broadcast_from_steps"], 1);
    EXPECT_EQ(broadcast_set(single, 1), single);
    EXPECT_THROW((void)broadcast_set(four, 8), Error);
}

TEST(Heatmap, DotProductsAndExports) {
    const auto set = casteer::testing::single_slot_set({1.0f, 0.0f});
    auto trace = casteer::testing::single_slot_trace({{1.0f, 0.0f}, {0.0f, 1.0f}});
    Heatmap h = heatmap(trace, set, 0, 0);
    EXPECT_EQ(h.values, (std::vector<double>{1.0, 0.0}));
    EXPECT_FALSE(h.grid.has_value());
    EXPECT_EQ(heatmap_csv(h), "patch,value\n0,1\n1,0\n");
    const auto pgm = heatmap_pgm(h);
    const std::string header = "P5\n2 1\n255\n";
    ASSERT_EQ(pgm.size(), header.size() + 2);
    EXPECT_EQ(std::string(pgm.begin(), pgm.begin() + static_cast<long>(header.size())), header);
    EXPECT_EQ(pgm[header.size()], 255);
    EXPECT_EQ(pgm[header.size() + 1], 0);

    trace = casteer::testing::single_slot_trace({{1.0f, 0.0f}, {1.0f, 0.0f}, {1.0f, 0.0f}, {1.0f, 0.0f}});
    h = heatmap(trace, set, 0, 0);
    EXPECT_EQ(h.values, (std::vector<double>(4, 1.0)));
    ASSERT_TRUE(h.grid.has_value());
    EXPECT_EQ(h.grid->first, 2u);
    const auto flat = heatmap_pgm(h);
    EXPECT_EQ(std::string(flat.begin(), flat.begin() + 11), "P5\n2 2\n255\n");
    EXPECT_EQ(flat.back(), 0);

    trace = casteer::testing::single_slot_trace({{0.0f, 3.0f}, {0.0f, -1.0f}});
    EXPECT_EQ(heatmap(trace, set, 0, 0).values, (std::vector<double>{0.0, 0.0}));

    EXPECT_THROW((void)heatmap(trace, casteer::testing::single_slot_set({0.0f, 0.0f}, true), 0, 0), Error);
    EXPECT_THROW((void)heatmap(trace, set, 1, 0), Error);
}
