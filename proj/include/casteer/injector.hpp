#pragma once

// Folding the unclipped erasure operator (I - beta s s^T) into output
// projection weights, so that W' x equals steering applied to W x.

#include <casteer/composer.hpp>
#include <casteer/error.hpp>
#include <casteer/linalg.hpp>
#include <casteer/steering.hpp>
#include <casteer/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace casteer {

namespace detail {

inline void check_unit(std::span<const double> s) {
    if (std::abs(linalg::norm(s) - 1.0) > SteeringSet::unit_tolerance)
        fail(ErrorKind::validation, "steering vector is not unit norm");
}

// W <- (I - beta s s^T) W, in double.
inline void reflect_rows(std::vector<double>& w, std::size_t rows, std::size_t cols, std::span<const double> s,
                         double beta) {
    std::vector<double> st_w(cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            st_w[c] += s[r] * w[r * cols + c];
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            w[r * cols + c] -= beta * s[r] * st_w[c];
}

inline Matrix to_matrix(const std::vector<double>& w, std::size_t rows, std::size_t cols) {
    return Matrix(rows, cols, linalg::narrow(w));
}

}  // namespace detail

/// (I - beta s s^T) W for a unit s with dim(s) == rows(W).
inline Matrix fold_erasure(const Matrix& w, std::span<const double> s, double beta) {
    if (s.size() != w.rows)
        fail(ErrorKind::validation, "shape mismatch: steering vector has " + std::to_string(s.size()) +
                                        " entries, weight has " + std::to_string(w.rows) + " rows");
    detail::check_unit(s);
    std::vector<double> acc(w.data.begin(), w.data.end());
    detail::reflect_rows(acc, w.rows, w.cols, s, beta);
    return detail::to_matrix(acc, w.rows, w.cols);
}

inline Matrix fold_erasure(const Matrix& w, std::span<const float> s, double beta) {
    const auto wide = linalg::widen(s);
    return fold_erasure(w, std::span<const double>(wide), beta);
}

/// Max |<s_a, s_b>| accepted between vectors passed to fold_bundle.
inline constexpr double fold_orthogonality_tolerance = 1e-5;

/// (I - beta s_m s_m^T) ... (I - beta s_1 s_1^T) W, i.e. s_1 acts first.
inline Matrix fold_bundle(const Matrix& w, const std::vector<std::vector<double>>& directions, double beta) {
    for (std::size_t a = 0; a < directions.size(); ++a) {
        if (directions[a].size() != w.rows)
            fail(ErrorKind::validation, "shape mismatch between steering vector and weight rows");
        detail::check_unit(directions[a]);
        for (std::size_t b = a + 1; b < directions.size(); ++b)
            if (std::abs(linalg::dot<double, double>(directions[a], directions[b])) > fold_orthogonality_tolerance)
                fail(ErrorKind::validation, "steering vectors " + std::to_string(a + 1) + " and " +
                                                std::to_string(b + 1) + " are not orthogonal");
    }
    std::vector<double> acc(w.data.begin(), w.data.end());
    for (const auto& s : directions)
        detail::reflect_rows(acc, w.rows, w.cols, s, beta);
    return detail::to_matrix(acc, w.rows, w.cols);
}

namespace detail {

// The single vector that drives layer i for every step, or nullopt when the
// slot is null. Multi-step sets must repeat one vector across all steps.
inline std::optional<std::vector<double>> static_direction(const SteeringSet& set, std::size_t layer) {
    for (std::size_t t = 1; t < set.layout.num_steps; ++t) {
        if (set.is_null(layer, t) != set.is_null(layer, 0) ||
            !std::equal(set.at(layer, t).begin(), set.at(layer, t).end(), set.at(layer, 0).begin()))
            fail(ErrorKind::validation, "per-step vectors differ at layer " + std::to_string(layer + 1) +
                                            "; injection needs a single-step or uniform set");
    }
    if (set.is_null(layer, 0))
        return std::nullopt;
    return linalg::widen(set.at(layer, 0));
}

}  // namespace detail

/// Folds every set of the bundle into the per-layer projection weights.
/// Only unclipped, dot-weighted erase or switch steering is a fixed matrix.
inline ProjectionWeights inject(const ProjectionWeights& weights, const SetBundle& bundle, const SteeringConfig& cfg) {
    weights.validate();
    bundle.validate();
    validate_config(cfg, weights.matrices.size());
    if (cfg.clip)
        fail(ErrorKind::validation, "clipping not injectable");
    if (cfg.mode == SteeringMode::add || cfg.alpha_mode != AlphaMode::dot_weighted)
        fail(ErrorKind::validation, "only dot-weighted erase or switch steering is injectable");
    const TraceLayout& layout = bundle.sets.front().layout;
    if (layout.num_layers != weights.matrices.size())
        fail(ErrorKind::validation, "weights have " + std::to_string(weights.matrices.size()) + " layers, set has " +
                                        std::to_string(layout.num_layers));

    ProjectionWeights out = weights;
    for (std::size_t i = 0; i < layout.num_layers; ++i) {
        if (weights.matrices[i].rows != layout.emb_sizes[i])
            fail(ErrorKind::validation, "weights layer " + std::to_string(i + 1) + " has " +
                                            std::to_string(weights.matrices[i].rows) + " rows, set expects " +
                                            std::to_string(layout.emb_sizes[i]));
        if (!cfg.steers_layer(i))
            continue;
        std::vector<std::vector<double>> directions;
        for (const auto& set : bundle.sets)
            if (auto d = detail::static_direction(set, i))
                directions.push_back(std::move(*d));
        if (!directions.empty())
            out.matrices[i] = fold_bundle(weights.matrices[i], directions, cfg.beta);
    }
    return out;
}

}  // namespace casteer
