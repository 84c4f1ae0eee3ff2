#pragma once

// Applying steering vectors to cross-attention outputs.
//
//   erase / switch, dot-weighted:  c' = c - alpha s,  alpha = beta <s, c>
//                                  (alpha clamped at 0 when clipping)
//   erase / switch, constant:      c' = c - alpha s
//   add:                           c' = c + alpha s
//
// With beta = 2 and no clipping the dot-weighted rule is the Householder
// reflection (I - 2 s s^T) c.

#include <casteer/error.hpp>
#include <casteer/linalg.hpp>
#include <casteer/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace casteer {

enum class AlphaMode { dot_weighted, constant };
enum class StepMap { per_step, broadcast_single };

struct SteeringConfig {
    double beta = 2.0;
    bool clip = false;
    AlphaMode alpha_mode = AlphaMode::dot_weighted;
    double constant_alpha = 1.0;
    SteeringMode mode = SteeringMode::erase;
    /// Zero-based layer indices to steer; nullopt steers every layer.
    std::optional<std::set<std::size_t>> layer_subset;
    StepMap step_map = StepMap::per_step;

    bool steers_layer(std::size_t layer) const { return !layer_subset || layer_subset->contains(layer); }
};

inline void validate_config(const SteeringConfig& cfg) {
    if (!std::isfinite(cfg.beta) || cfg.beta < 0.0)
        fail(ErrorKind::validation, "beta must be finite and non-negative");
    if (!std::isfinite(cfg.constant_alpha))
        fail(ErrorKind::validation, "constant alpha must be finite");
    if (cfg.mode == SteeringMode::add && cfg.alpha_mode == AlphaMode::dot_weighted)
        fail(ErrorKind::validation, "add mode requires a constant alpha");
}

inline void validate_config(const SteeringConfig& cfg, std::size_t num_layers) {
    validate_config(cfg);
    if (cfg.layer_subset)
        for (std::size_t layer : *cfg.layer_subset)
            if (layer >= num_layers)
                fail(ErrorKind::validation,
                     "layer " + std::to_string(layer + 1) + " outside 1.." + std::to_string(num_layers));
}

/// Steering coefficient for one patch: the multiple of s added to c.
template <class C, class S>
double steering_coefficient(std::span<const C> c, std::span<const S> s, const SteeringConfig& cfg) {
    if (cfg.mode == SteeringMode::add)
        return cfg.constant_alpha;
    if (cfg.alpha_mode == AlphaMode::constant)
        return -cfg.constant_alpha;
    double alpha = cfg.beta * linalg::dot(s, c);
    if (cfg.clip)
        alpha = std::max(alpha, 0.0);
    return -alpha;
}

/// In-place application to one patch. s is assumed unit (or skipped upstream).
template <class C, class S>
void steer_in_place(std::span<C> c, std::span<const S> s, const SteeringConfig& cfg) {
    const double coeff = steering_coefficient(std::span<const C>(c), s, cfg);
    if (coeff == 0.0)
        return;
    for (std::size_t j = 0; j < c.size(); ++j)
        c[j] = static_cast<C>(static_cast<double>(c[j]) + coeff * static_cast<double>(s[j]));
}

/// Steers a single patch vector. An all-zero s counts as null-masked and
/// returns c unchanged.
template <class T>
std::vector<T> steer_patch(std::span<const T> c, std::span<const T> s, const SteeringConfig& cfg) {
    validate_config(cfg);
    if (c.size() != s.size())
        fail(ErrorKind::validation, "dimension mismatch: " + std::to_string(c.size()) + " vs " + std::to_string(s.size()));
    for (std::size_t j = 0; j < c.size(); ++j)
        if (!std::isfinite(static_cast<double>(c[j])) || !std::isfinite(static_cast<double>(s[j])))
            fail(ErrorKind::numeric, "non-finite input");
    std::vector<T> out(c.begin(), c.end());
    const double n = linalg::norm(s);
    if (n == 0.0)
        return out;
    if (std::abs(n - 1.0) > SteeringSet::unit_tolerance)
        fail(ErrorKind::validation, "steering vector is not unit norm");
    steer_in_place(std::span<T>(out), s, cfg);
    return out;
}

template <class T>
std::vector<T> steer_patch(const std::vector<T>& c, const std::vector<T>& s, const SteeringConfig& cfg) {
    return steer_patch(std::span<const T>(c), std::span<const T>(s), cfg);
}

/// Step of the set that drives trace step t.
inline std::size_t source_step(const SteeringSet& set, std::size_t trace_steps, std::size_t t, const SteeringConfig& cfg) {
    if (set.layout.num_steps == trace_steps)
        return t;
    if (set.layout.num_steps == 1 && cfg.step_map == StepMap::broadcast_single)
        return 0;
    fail(ErrorKind::validation, "step count mismatch: set has " + std::to_string(set.layout.num_steps) +
                                    ", trace has " + std::to_string(trace_steps) +
                                    (set.layout.num_steps == 1 ? " (use broadcast_single)" : ""));
}

/// Steers every patch of every (layer, step) in cfg.layer_subset. Everything
/// else is copied verbatim.
inline ActivationTrace apply_to_trace(const ActivationTrace& trace, const SteeringSet& set, const SteeringConfig& cfg) {
    set.validate();
    if (!compatible(trace.layout, set.layout))
        fail(ErrorKind::validation, "layout mismatch between trace and steering set");
    validate_config(cfg, trace.layout.num_layers);
    if (set.layout.num_steps != trace.layout.num_steps)
        (void)source_step(set, trace.layout.num_steps, 0, cfg);

    ActivationTrace out = trace;
    for (std::size_t i = 0; i < trace.layout.num_layers; ++i) {
        if (!cfg.steers_layer(i))
            continue;
        for (std::size_t t = 0; t < trace.layout.num_steps; ++t) {
            const std::size_t st = source_step(set, trace.layout.num_steps, t, cfg);
            if (set.is_null(i, st))
                continue;
            const auto s = set.at(i, st);
            Matrix& m = out.at(i, t);
            for (std::size_t k = 0; k < m.rows; ++k)
                steer_in_place(m.row(k), s, cfg);
        }
    }
    return out;
}

/// Replicates a single-step set across target_steps steps.
inline SteeringSet broadcast_set(const SteeringSet& set, std::size_t target_steps) {
    if (set.layout.num_steps != 1)
        fail(ErrorKind::validation, "broadcast needs a single-step set, got T=" + std::to_string(set.layout.num_steps));
    if (target_steps < 1)
        fail(ErrorKind::validation, "broadcast target must be at least one step");
    SteeringSet out = set;
    out.layout.num_steps = target_steps;
    out.vectors.clear();
    out.null_mask.clear();
    for (std::size_t i = 0; i < set.layout.num_layers; ++i)
        for (std::size_t t = 0; t < target_steps; ++t) {
            out.vectors.push_back(set.vectors[i]);
            out.null_mask.push_back(set.null_mask[i]);
        }
    if (target_steps != 1)
        out.metadata["broadcast_from_steps"] = 1;
    return out;
}

}  // namespace casteer
