#pragma once

// Multi-concept composition: averaging merge, per-slot Gram-Schmidt and
// sequential application of an ordered bundle of steering sets.

#include <casteer/error.hpp>
#include <casteer/linalg.hpp>
#include <casteer/steering.hpp>
#include <casteer/tensor.hpp>
#include <casteer/vector_builder.hpp>

#include <json.hpp>

#include <cmath>
#include <string>
#include <vector>

namespace casteer {

/// Ordered list of steering sets sharing one layout. The order is the
/// application order and the Gram-Schmidt order.
struct SetBundle {
    std::vector<SteeringSet> sets;
    bool orthogonalized = false;

    void validate() const {
        if (sets.empty())
            fail(ErrorKind::validation, "empty bundle");
        const TraceLayout& ref = sets.front().layout;
        for (const auto& set : sets) {
            set.validate();
            if (!compatible(set.layout, ref) || set.layout.num_steps != ref.num_steps)
                fail(ErrorKind::validation, "bundle members have incompatible layouts");
        }
    }

    std::vector<std::string> labels() const {
        std::vector<std::string> out;
        for (const auto& set : sets)
            out.push_back(set.concept_label);
        return out;
    }
};

/// Residuals below this norm are treated as linearly dependent.
inline constexpr double dependence_tolerance = 1e-6;

/// Normalized mean of the member vectors per slot.
inline SteeringSet merge_average(const SetBundle& bundle) {
    bundle.validate();
    const SteeringSet& first = bundle.sets.front();
    SteeringSet out = first;
    out.mode = SteeringMode::erase;
    out.normalized = true;
    std::string label;
    for (const auto& set : bundle.sets)
        label += (label.empty() ? "" : "+") + set.concept_label;
    out.concept_label = label;
    out.metadata = {{"merged_from", bundle.labels()}, {"merge", "average"}};

    const TraceLayout& layout = first.layout;
    for (std::size_t i = 0; i < layout.num_layers; ++i)
        for (std::size_t t = 0; t < layout.num_steps; ++t) {
            const std::size_t s = layout.slot(i, t);
            std::size_t nulls = 0;
            for (const auto& set : bundle.sets)
                nulls += set.null_mask[s] ? 1 : 0;
            if (nulls == bundle.sets.size()) {
                out.null_mask[s] = true;
                out.vectors[s].assign(layout.emb_sizes[i], 0.0f);
                continue;
            }
            if (nulls != 0)
                fail(ErrorKind::validation, "partially null slot at " + slot_name(i, t));
            std::vector<double> mean(layout.emb_sizes[i], 0.0);
            for (const auto& set : bundle.sets) {
                const auto v = set.at(i, t);
                for (std::size_t j = 0; j < mean.size(); ++j)
                    mean[j] += v[j];
            }
            for (double& x : mean)
                x /= static_cast<double>(bundle.sets.size());
            if (linalg::norm<double>(mean) < zero_norm_threshold)
                fail(ErrorKind::numeric, "zero-norm mean at " + slot_name(i, t));
            out.null_mask[s] = false;
            out.vectors[s] = linalg::narrow(normalize(mean));
        }
    return out;
}

struct OrthogonalizationResult {
    SetBundle bundle;
    /// Slots whose residual fell below dependence_tolerance and were null-masked.
    std::size_t warning_count = 0;
    nlohmann::json report;
};

/// Classical Gram-Schmidt per (layer, step), in bundle order. Every residual
/// is renormalized to unit length; dependent residuals become null slots.
inline OrthogonalizationResult orthogonalize(const SetBundle& bundle) {
    bundle.validate();
    if (bundle.sets.size() < 2)
        fail(ErrorKind::validation, "orthogonalization needs at least two sets");
    const TraceLayout& layout = bundle.sets.front().layout;

    OrthogonalizationResult result;
    result.bundle = bundle;
    result.bundle.orthogonalized = true;
    nlohmann::json slots = nlohmann::json::array();
    std::size_t null_count = 0;

    for (std::size_t i = 0; i < layout.num_layers; ++i)
        for (std::size_t t = 0; t < layout.num_steps; ++t) {
            const std::size_t s = layout.slot(i, t);
            std::vector<std::vector<double>> basis;
            nlohmann::json residuals = nlohmann::json::array();
            nlohmann::json nulled = nlohmann::json::array();
            for (std::size_t m = 0; m < bundle.sets.size(); ++m) {
                SteeringSet& target = result.bundle.sets[m];
                if (bundle.sets[m].null_mask[s]) {
                    residuals.push_back(0.0);
                    nulled.push_back(m);
                    ++null_count;
                    continue;
                }
                const std::vector<double> v = linalg::widen(bundle.sets[m].at(i, t));
                std::vector<double> r = v;
                for (const auto& q : basis) {
                    const double proj = linalg::dot<double, double>(q, v);
                    for (std::size_t j = 0; j < r.size(); ++j)
                        r[j] -= proj * q[j];
                }
                const double rn = linalg::norm<double>(r);
                residuals.push_back(rn);
                if (rn < dependence_tolerance) {
                    target.null_mask[s] = true;
                    target.vectors[s].assign(r.size(), 0.0f);
                    nulled.push_back(m);
                    ++null_count;
                    ++result.warning_count;
                    continue;
                }
                for (double& x : r)
                    x /= rn;
                target.vectors[s] = linalg::narrow(r);
                basis.push_back(std::move(r));
            }
            slots.push_back({{"layer", i + 1}, {"step", t + 1}, {"residual_norms", residuals}, {"nulled", nulled}});
        }

    for (std::size_t m = 0; m < result.bundle.sets.size(); ++m) {
        auto& meta = result.bundle.sets[m].metadata;
        if (!meta.is_object())
            meta = nlohmann::json::object();
        meta["orthogonalized"] = true;
        meta["bundle_order"] = bundle.labels();
        meta["bundle_position"] = m;
        result.bundle.sets[m].normalized = true;
    }
    result.report = {{"order", bundle.labels()},
                     {"slots", std::move(slots)},
                     {"null_count", null_count},
                     {"warning_count", result.warning_count}};
    return result;
}

/// Largest |<u, v>| between non-null vectors of different sets in any slot.
inline double max_pairwise_dot(const SetBundle& bundle) {
    double worst = 0.0;
    const TraceLayout& layout = bundle.sets.front().layout;
    for (std::size_t i = 0; i < layout.num_layers; ++i)
        for (std::size_t t = 0; t < layout.num_steps; ++t)
            for (std::size_t a = 0; a < bundle.sets.size(); ++a)
                for (std::size_t b = a + 1; b < bundle.sets.size(); ++b) {
                    if (bundle.sets[a].is_null(i, t) || bundle.sets[b].is_null(i, t))
                        continue;
                    worst = std::max(worst, std::abs(linalg::dot(bundle.sets[a].at(i, t), bundle.sets[b].at(i, t))));
                }
    return worst;
}

/// Applies the sets one after another in bundle order. Erasing with more than
/// one set requires an orthogonalized bundle unless allow_unorthogonalized.
inline ActivationTrace apply_bundle(const ActivationTrace& trace, const SetBundle& bundle, const SteeringConfig& cfg,
                                    bool allow_unorthogonalized = false) {
    bundle.validate();
    if (cfg.mode == SteeringMode::erase && bundle.sets.size() > 1 && !bundle.orthogonalized && !allow_unorthogonalized)
        fail(ErrorKind::validation, "erasing with several sets needs an orthogonalized bundle");
    ActivationTrace out = trace;
    for (const auto& set : bundle.sets)
        out = apply_to_trace(out, set, cfg);
    return out;
}

}  // namespace casteer
