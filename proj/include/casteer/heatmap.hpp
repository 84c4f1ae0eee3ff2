#pragma once

// Per-patch dot products between one steering vector and the CA outputs of
// one (layer, step), with CSV and 8-bit PGM export.

#include <casteer/error.hpp>
#include <casteer/linalg.hpp>
#include <casteer/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace casteer {

struct Heatmap {
    std::size_t layer = 0;
    std::size_t step = 0;
    std::vector<double> values;
    /// (rows, cols) when the patch count is a perfect square.
    std::optional<std::pair<std::size_t, std::size_t>> grid;
};

inline std::optional<std::pair<std::size_t, std::size_t>> square_grid(std::size_t n) {
    auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    while (side * side > n)
        --side;
    while ((side + 1) * (side + 1) <= n)
        ++side;
    if (side * side != n)
        return std::nullopt;
    return std::pair{side, side};
}

/// Zero-based layer and step. Steps of a single-step set broadcast.
inline Heatmap heatmap(const ActivationTrace& trace, const SteeringSet& set, std::size_t layer, std::size_t step) {
    if (!compatible(trace.layout, set.layout))
        fail(ErrorKind::validation, "layout mismatch between trace and steering set");
    if (layer >= trace.layout.num_layers || step >= trace.layout.num_steps)
        fail(ErrorKind::validation, "no " + slot_name(layer, step) + " in trace");
    const std::size_t set_step = set.layout.num_steps == 1 ? 0 : step;
    if (set_step >= set.layout.num_steps)
        fail(ErrorKind::validation, "no " + slot_name(layer, step) + " in steering set");
    if (set.is_null(layer, set_step))
        fail(ErrorKind::validation, "null vector at " + slot_name(layer, step));

    Heatmap h;
    h.layer = layer;
    h.step = step;
    const auto s = set.at(layer, set_step);
    const Matrix& m = trace.at(layer, step);
    h.values.reserve(m.rows);
    for (std::size_t k = 0; k < m.rows; ++k)
        h.values.push_back(linalg::dot(s, m.row(k)));
    h.grid = square_grid(m.rows);
    return h;
}

/// "patch,value" header, then one row per patch. Values use %.9g.
inline std::string heatmap_csv(const Heatmap& h) {
    std::string out = "patch,value\n";
    char buf[64];
    for (std::size_t k = 0; k < h.values.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g\n", k, h.values[k]);
        out += buf;
    }
    return out;
}

/// Binary PGM (P5). Values are mapped affinely from [min, max] onto [0, 255];
/// a constant map renders black. Without a square grid the image is one row.
inline std::vector<std::uint8_t> heatmap_pgm(const Heatmap& h) {
    const auto [rows, cols] = h.grid.value_or(std::pair<std::size_t, std::size_t>{1, h.values.size()});
    const std::string header = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    if (h.values.empty())
        return out;
    const auto [lo, hi] = std::minmax_element(h.values.begin(), h.values.end());
    const double span = *hi - *lo;
    for (double v : h.values) {
        const double scaled = span > 0.0 ? (v - *lo) / span * 255.0 : 0.0;
        out.push_back(static_cast<std::uint8_t>(std::clamp(std::lround(scaled), 0L, 255L)));
    }
    return out;
}

}  // namespace casteer
