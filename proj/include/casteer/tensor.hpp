#pragma once

#include <casteer/error.hpp>

#include <json.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace casteer {

/// Shape of a recorded run: N cross-attention layers, T denoising steps, and
/// per-layer patch count and embedding width. Layer and step indices are
/// zero-based in code and one-based in names, messages and CLI flags.
struct TraceLayout {
    std::size_t num_layers = 0;
    std::size_t num_steps = 0;
    std::vector<std::size_t> patch_nums;
    std::vector<std::size_t> emb_sizes;

    static TraceLayout uniform(std::size_t layers, std::size_t steps, std::size_t patches, std::size_t emb) {
        return TraceLayout{layers, steps, std::vector<std::size_t>(layers, patches),
                           std::vector<std::size_t>(layers, emb)};
    }

    void validate() const {
        if (num_layers < 1 || num_steps < 1)
            fail(ErrorKind::validation, "layout needs at least one layer and one step");
        if (patch_nums.size() != num_layers || emb_sizes.size() != num_layers)
            fail(ErrorKind::validation, "layout per-layer lists do not match layer count");
        for (std::size_t i = 0; i < num_layers; ++i)
            if (patch_nums[i] < 1 || emb_sizes[i] < 1)
                fail(ErrorKind::validation, "layout layer " + std::to_string(i + 1) + " has an empty dimension");
    }

    std::size_t slots() const noexcept { return num_layers * num_steps; }
    std::size_t slot(std::size_t layer, std::size_t step) const noexcept { return layer * num_steps + step; }

    bool operator==(const TraceLayout&) const = default;
};

/// Layer count and embedding widths agree. Patch counts and step counts may differ.
inline bool compatible(const TraceLayout& a, const TraceLayout& b) noexcept {
    return a.num_layers == b.num_layers && a.emb_sizes == b.emb_sizes;
}

inline std::string slot_name(std::size_t layer, std::size_t step) {
    return "layer " + std::to_string(layer + 1) + " step " + std::to_string(step + 1);
}

/// Dense row-major float32 matrix.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}
    Matrix(std::size_t r, std::size_t c, std::vector<float> values) : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != r * c)
            fail(ErrorKind::validation, "matrix data does not match its shape");
    }

    float& operator()(std::size_t r, std::size_t c) noexcept { return data[r * cols + c]; }
    float operator()(std::size_t r, std::size_t c) const noexcept { return data[r * cols + c]; }

    std::span<float> row(std::size_t r) noexcept { return {data.data() + r * cols, cols}; }
    std::span<const float> row(std::size_t r) const noexcept { return {data.data() + r * cols, cols}; }

    bool operator==(const Matrix&) const = default;
};

inline bool all_finite(std::span<const float> values) noexcept {
    for (float v : values)
        if (!std::isfinite(v))
            return false;
    return true;
}

/// Cross-attention outputs for one generation run, one patch_num x emb_size
/// matrix per (layer, step).
struct ActivationTrace {
    TraceLayout layout;
    std::vector<Matrix> tensors;
    std::string model_id;
    std::string prompt;
    std::int64_t seed = 0;

    static ActivationTrace zeros(TraceLayout layout) {
        ActivationTrace trace;
        trace.tensors.reserve(layout.slots());
        for (std::size_t i = 0; i < layout.num_layers; ++i)
            for (std::size_t t = 0; t < layout.num_steps; ++t)
                trace.tensors.emplace_back(layout.patch_nums[i], layout.emb_sizes[i]);
        trace.layout = std::move(layout);
        return trace;
    }

    Matrix& at(std::size_t layer, std::size_t step) { return tensors[layout.slot(layer, step)]; }
    const Matrix& at(std::size_t layer, std::size_t step) const { return tensors[layout.slot(layer, step)]; }

    void validate() const {
        layout.validate();
        if (tensors.size() != layout.slots())
            fail(ErrorKind::validation, "trace holds " + std::to_string(tensors.size()) + " tensors, layout needs " +
                                            std::to_string(layout.slots()));
        for (std::size_t i = 0; i < layout.num_layers; ++i)
            for (std::size_t t = 0; t < layout.num_steps; ++t) {
                const Matrix& m = at(i, t);
                if (m.rows != layout.patch_nums[i] || m.cols != layout.emb_sizes[i] || m.data.size() != m.rows * m.cols)
                    fail(ErrorKind::validation, "tensor shape mismatch at " + slot_name(i, t));
                if (!all_finite(m.data))
                    fail(ErrorKind::numeric, "non-finite tensor at " + slot_name(i, t));
            }
    }

    bool operator==(const ActivationTrace&) const = default;
};

enum class SteeringMode { erase, add, switch_concept };

inline std::string_view to_string(SteeringMode mode) noexcept {
    switch (mode) {
    case SteeringMode::erase:
        return "erase";
    case SteeringMode::add:
        return "add";
    case SteeringMode::switch_concept:
        return "switch";
    }
    return "erase";
}

inline SteeringMode parse_mode(std::string_view text) {
    if (text == "erase")
        return SteeringMode::erase;
    if (text == "add")
        return SteeringMode::add;
    if (text == "switch")
        return SteeringMode::switch_concept;
    fail(ErrorKind::validation, "unknown steering mode '" + std::string(text) + "'");
}

/// One steering direction per (layer, step). Slots flagged in null_mask hold
/// zeros and are skipped when the set is applied. Patch counts in the layout
/// carry no meaning for a set.
struct SteeringSet {
    TraceLayout layout;
    std::vector<std::vector<float>> vectors;
    std::vector<bool> null_mask;
    SteeringMode mode = SteeringMode::erase;
    std::string concept_label;
    std::string model_id;
    bool normalized = true;
    nlohmann::json metadata = nlohmann::json::object();

    static constexpr double unit_tolerance = 1e-5;

    std::span<const float> at(std::size_t layer, std::size_t step) const { return vectors[layout.slot(layer, step)]; }
    bool is_null(std::size_t layer, std::size_t step) const { return null_mask[layout.slot(layer, step)]; }

    std::size_t null_count() const noexcept {
        std::size_t n = 0;
        for (bool b : null_mask)
            n += b ? 1 : 0;
        return n;
    }

    void validate() const {
        layout.validate();
        if (vectors.size() != layout.slots() || null_mask.size() != layout.slots())
            fail(ErrorKind::validation, "steering set slot count does not match layout");
        for (std::size_t i = 0; i < layout.num_layers; ++i)
            for (std::size_t t = 0; t < layout.num_steps; ++t) {
                const auto& v = vectors[layout.slot(i, t)];
                if (v.size() != layout.emb_sizes[i])
                    fail(ErrorKind::validation, "steering vector length mismatch at " + slot_name(i, t));
                if (!all_finite(v))
                    fail(ErrorKind::numeric, "non-finite tensor at " + slot_name(i, t));
                double sq = 0.0;
                for (float x : v)
                    sq += static_cast<double>(x) * x;
                if (is_null(i, t)) {
                    if (sq != 0.0)
                        fail(ErrorKind::validation, "null-masked vector is not zero at " + slot_name(i, t));
                } else if (normalized && std::abs(std::sqrt(sq) - 1.0) > unit_tolerance) {
                    fail(ErrorKind::numeric, "vector is not unit norm at " + slot_name(i, t));
                }
            }
    }

    bool operator==(const SteeringSet&) const = default;
};

/// Output-projection matrices W_i (emb_size_i x in_dim_i), one per layer.
struct ProjectionWeights {
    std::vector<Matrix> matrices;
    std::vector<std::string> layer_ids;
    std::string model_id;

    void validate() const {
        if (matrices.empty())
            fail(ErrorKind::validation, "weights hold no layers");
        if (layer_ids.size() != matrices.size())
            fail(ErrorKind::validation, "weights layer id count does not match matrix count");
        for (std::size_t i = 0; i < matrices.size(); ++i) {
            const Matrix& m = matrices[i];
            if (m.rows < 1 || m.cols < 1 || m.data.size() != m.rows * m.cols)
                fail(ErrorKind::validation, "weights layer " + std::to_string(i + 1) + " has a bad shape");
            if (!all_finite(m.data))
                fail(ErrorKind::numeric, "non-finite tensor in weights layer " + std::to_string(i + 1));
        }
    }

    bool operator==(const ProjectionWeights&) const = default;
};

}  // namespace casteer
