#pragma once

// Steering-vector construction from paired activation traces: average every
// trace over patches, average over prompt pairs, subtract, normalize.

#include <casteer/error.hpp>
#include <casteer/linalg.hpp>
#include <casteer/tensor.hpp>

#include <json.hpp>

#include <span>
#include <string>
#include <vector>

namespace casteer {

/// One patch-averaged vector per (layer, step).
struct AveragedActivations {
    TraceLayout layout;
    std::vector<std::vector<double>> vectors;

    std::span<const double> at(std::size_t layer, std::size_t step) const { return vectors[layout.slot(layer, step)]; }
};

enum class ZeroPolicy { error, null_mask };

inline ZeroPolicy parse_zero_policy(const std::string& text) {
    if (text == "error")
        return ZeroPolicy::error;
    if (text == "null_mask" || text == "null-mask")
        return ZeroPolicy::null_mask;
    fail(ErrorKind::validation, "unknown zero policy '" + text + "'");
}

/// Vectors with an L2 norm below this are treated as zero.
inline constexpr double zero_norm_threshold = 1e-12;

inline AveragedActivations patch_average(const ActivationTrace& trace) {
    AveragedActivations out;
    out.layout = trace.layout;
    out.vectors.reserve(trace.layout.slots());
    for (std::size_t i = 0; i < trace.layout.num_layers; ++i)
        for (std::size_t t = 0; t < trace.layout.num_steps; ++t) {
            const Matrix& m = trace.at(i, t);
            std::vector<double> sum(m.cols, 0.0);
            for (std::size_t k = 0; k < m.rows; ++k) {
                const auto row = m.row(k);
                for (std::size_t j = 0; j < m.cols; ++j)
                    sum[j] += row[j];
            }
            for (double& x : sum)
                x /= static_cast<double>(m.rows);
            out.vectors.push_back(std::move(sum));
        }
    return out;
}

/// v / ||v||_2. Throws a numeric error for a (near-)zero vector.
inline std::vector<double> normalize(std::span<const double> v) {
    const double n = linalg::norm(v);
    if (!std::isfinite(n))
        fail(ErrorKind::numeric, "non-finite vector");
    if (n < zero_norm_threshold)
        fail(ErrorKind::numeric, "zero-norm vector");
    std::vector<double> out(v.begin(), v.end());
    for (double& x : out)
        x /= n;
    return out;
}

namespace detail {

inline std::vector<std::vector<double>> mean_of_averages(const std::vector<ActivationTrace>& traces) {
    std::vector<std::vector<double>> sum;
    for (const auto& trace : traces) {
        const AveragedActivations avg = patch_average(trace);
        if (sum.empty()) {
            sum = avg.vectors;
            continue;
        }
        for (std::size_t s = 0; s < sum.size(); ++s)
            for (std::size_t j = 0; j < sum[s].size(); ++j)
                sum[s][j] += avg.vectors[s][j];
    }
    for (auto& v : sum)
        for (double& x : v)
            x /= static_cast<double>(traces.size());
    return sum;
}

}  // namespace detail

/// Builds a unit steering vector per (layer, step) from P >= 1 seed-matched
/// pairs of traces. The result is mode erase; build_switch_set relabels it.
inline SteeringSet build_steering_set(const std::vector<ActivationTrace>& pos, const std::vector<ActivationTrace>& neg,
                                      ZeroPolicy on_zero) {
    if (pos.empty() || pos.size() != neg.size())
        fail(ErrorKind::validation, "need the same non-zero number of positive and negative traces");
    const TraceLayout& ref = pos.front().layout;
    for (std::size_t p = 0; p < pos.size(); ++p) {
        pos[p].validate();
        neg[p].validate();
        if (!compatible(pos[p].layout, ref) || !compatible(neg[p].layout, ref) ||
            pos[p].layout.num_steps != ref.num_steps || neg[p].layout.num_steps != ref.num_steps)
            fail(ErrorKind::validation, "layout mismatch in pair " + std::to_string(p + 1));
        if (pos[p].seed != neg[p].seed)
            fail(ErrorKind::validation, "seed mismatch in pair " + std::to_string(p + 1));
    }

    const auto pos_avg = detail::mean_of_averages(pos);
    const auto neg_avg = detail::mean_of_averages(neg);

    SteeringSet set;
    set.layout = ref;
    set.model_id = pos.front().model_id;
    set.mode = SteeringMode::erase;
    set.normalized = true;
    set.vectors.reserve(ref.slots());
    set.null_mask.assign(ref.slots(), false);
    for (std::size_t i = 0; i < ref.num_layers; ++i)
        for (std::size_t t = 0; t < ref.num_steps; ++t) {
            const std::size_t s = ref.slot(i, t);
            std::vector<double> diff(pos_avg[s].size());
            for (std::size_t j = 0; j < diff.size(); ++j)
                diff[j] = pos_avg[s][j] - neg_avg[s][j];
            if (linalg::norm<double>(diff) < zero_norm_threshold) {
                if (on_zero == ZeroPolicy::error)
                    fail(ErrorKind::numeric, "zero-norm at " + slot_name(i, t));
                set.null_mask[s] = true;
                set.vectors.emplace_back(diff.size(), 0.0f);
                continue;
            }
            set.vectors.push_back(linalg::narrow(normalize(diff)));
        }
    set.metadata = {{"pairs", pos.size()}, {"source", "paired_traces"}};
    return set;
}

/// Concept-switch set: positive traces contain X, negative traces contain Y.
inline SteeringSet build_switch_set(const std::vector<ActivationTrace>& x_traces,
                                    const std::vector<ActivationTrace>& y_traces, ZeroPolicy on_zero) {
    SteeringSet set = build_steering_set(x_traces, y_traces, on_zero);
    set.mode = SteeringMode::switch_concept;
    return set;
}

}  // namespace casteer
