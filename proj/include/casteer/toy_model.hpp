#pragma once

// Deterministic linear cross-attention simulator with planted concepts.
//
//   ca[i, t, k] = M_it e + p_ik,   e = sum of the prompt's concept embeddings
//
// M_it = M_i in static mode and M_i + eps R_it in varying mode. All random
// entries come from a counter-based generator keyed by (seed, stream,
// indices), so any entry can be regenerated independently of the others.

#include <casteer/error.hpp>
#include <casteer/linalg.hpp>
#include <casteer/steering.hpp>
#include <casteer/tensor.hpp>
#include <casteer/vector_builder.hpp>

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace casteer::toy {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

enum class Stream : std::uint64_t { embedding = 1, map = 2, time = 3, offset = 4 };

/// Hashes (seed, stream, a, b, c, j) into 64 random bits.
constexpr std::uint64_t counter_bits(std::uint64_t seed, Stream stream, std::uint64_t a, std::uint64_t b,
                                     std::uint64_t c, std::uint64_t j) noexcept {
    std::uint64_t h = mix64(seed);
    for (std::uint64_t word : {static_cast<std::uint64_t>(stream), a, b, c, j})
        h = mix64(h ^ word);
    return h;
}

/// Standard normal draw for one counter key (Box-Muller on two derived words).
inline double counter_normal(std::uint64_t seed, Stream stream, std::uint64_t a, std::uint64_t b, std::uint64_t c,
                             std::uint64_t j) noexcept {
    const std::uint64_t h = counter_bits(seed, stream, a, b, c, j);
    const double u1 = (static_cast<double>(mix64(h) >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = static_cast<double>(mix64(h ^ 0xda942042e4dd58b5ULL) >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

enum class MapKind { gaussian, orthogonal, identity };
enum class TimeMode { static_map, varying };

struct ToyModelSpec {
    std::size_t emb_dim = 8;
    std::size_t prompt_dim = 8;
    std::size_t layers = 1;
    std::size_t steps = 1;
    std::vector<std::size_t> patches{1};
    std::vector<std::string> vocabulary;
    MapKind map_kind = MapKind::gaussian;
    TimeMode time_mode = TimeMode::static_map;
    double epsilon = 0.1;
    /// Standard deviation of the positional offsets; 0 gives p_ik = 0.
    double offset_scale = 0.0;
    /// Concept c gets the c-th standard basis vector instead of a seeded one.
    bool canonical_embeddings = false;
    std::uint64_t seed = 0;
    std::string model_id = "toy";

    TraceLayout layout() const {
        return TraceLayout{layers, steps, patches, std::vector<std::size_t>(layers, emb_dim)};
    }

    void validate() const {
        if (emb_dim < 1 || prompt_dim < 1)
            fail(ErrorKind::validation, "toy model dimensions must be positive");
        if (patches.size() != layers)
            fail(ErrorKind::validation, "toy model needs one patch count per layer");
        layout().validate();
        if (vocabulary.empty())
            fail(ErrorKind::validation, "toy model vocabulary is empty");
        if (std::set<std::string>(vocabulary.begin(), vocabulary.end()).size() != vocabulary.size())
            fail(ErrorKind::validation, "toy model vocabulary has duplicates");
        if (map_kind == MapKind::orthogonal && emb_dim < prompt_dim)
            fail(ErrorKind::validation, "orthogonal map needs emb_dim >= prompt_dim");
        if (canonical_embeddings && prompt_dim < vocabulary.size())
            fail(ErrorKind::validation, "canonical embeddings need prompt_dim >= vocabulary size");
        if (!std::isfinite(epsilon) || !std::isfinite(offset_scale) || offset_scale < 0.0)
            fail(ErrorKind::validation, "toy model epsilon and offset scale must be finite");
    }
};

inline nlohmann::json to_json(const ToyModelSpec& spec) {
    static const char* maps[] = {"gaussian", "orthogonal", "identity"};
    return {{"emb_dim", spec.emb_dim},
            {"prompt_dim", spec.prompt_dim},
            {"layers", spec.layers},
            {"steps", spec.steps},
            {"patches", spec.patches},
            {"vocabulary", spec.vocabulary},
            {"map", maps[static_cast<int>(spec.map_kind)]},
            {"time_mode", spec.time_mode == TimeMode::static_map ? "static" : "varying"},
            {"epsilon", spec.epsilon},
            {"offset_scale", spec.offset_scale},
            {"canonical_embeddings", spec.canonical_embeddings},
            {"seed", spec.seed},
            {"model_id", spec.model_id}};
}

inline ToyModelSpec spec_from_json(const nlohmann::json& j) {
    ToyModelSpec spec;
    try {
        spec.emb_dim = j.at("emb_dim").get<std::size_t>();
        spec.prompt_dim = j.at("prompt_dim").get<std::size_t>();
        spec.layers = j.at("layers").get<std::size_t>();
        spec.steps = j.at("steps").get<std::size_t>();
        const auto& p = j.at("patches");
        spec.patches = p.is_array() ? p.get<std::vector<std::size_t>>()
                                    : std::vector<std::size_t>(spec.layers, p.get<std::size_t>());
        spec.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
        const std::string map = j.value("map", "gaussian");
        if (map == "gaussian")
            spec.map_kind = MapKind::gaussian;
        else if (map == "orthogonal")
            spec.map_kind = MapKind::orthogonal;
        else if (map == "identity")
            spec.map_kind = MapKind::identity;
        else
            fail(ErrorKind::validation, "unknown toy map kind '" + map + "'");
        const std::string time = j.value("time_mode", "static");
        if (time == "static")
            spec.time_mode = TimeMode::static_map;
        else if (time == "varying")
            spec.time_mode = TimeMode::varying;
        else
            fail(ErrorKind::validation, "unknown toy time mode '" + time + "'");
        spec.epsilon = j.value("epsilon", 0.1);
        spec.offset_scale = j.value("offset_scale", 0.0);
        spec.canonical_embeddings = j.value("canonical_embeddings", false);
        spec.seed = j.value("seed", std::uint64_t{0});
        spec.model_id = j.value("model_id", "toy");
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("malformed toy model spec: ") + e.what());
    }
    spec.validate();
    return spec;
}

namespace detail {

// Orthonormalizes columns in place (two classical passes). Returns false if a
// column is dependent on the earlier ones.
inline bool orthonormalize(std::vector<std::vector<double>>& columns) {
    for (std::size_t m = 0; m < columns.size(); ++m) {
        auto& v = columns[m];
        for (int pass = 0; pass < 2; ++pass) {
            const std::vector<double> original = v;
            for (std::size_t q = 0; q < m; ++q) {
                const double proj = linalg::dot<double, double>(columns[q], original);
                for (std::size_t j = 0; j < v.size(); ++j)
                    v[j] -= proj * columns[q][j];
            }
        }
        const double n = linalg::norm<double>(v);
        if (n < 1e-12)
            return false;
        for (double& x : v)
            x /= n;
    }
    return true;
}

}  // namespace detail

/// Set of concept ids making up one prompt.
struct ToyPrompt {
    std::set<std::string> concepts;
};

/// Realized simulator: embeddings, maps and offsets materialized from a spec.
class ToyModel {
public:
    explicit ToyModel(ToyModelSpec spec) : spec_(std::move(spec)) {
        spec_.validate();
        build_embeddings();
        build_maps();
        build_offsets();
    }

    const ToyModelSpec& spec() const noexcept { return spec_; }
    TraceLayout layout() const { return spec_.layout(); }

    const std::vector<double>& embedding(const std::string& concept_id) const {
        const auto it = embeddings_.find(concept_id);
        if (it == embeddings_.end())
            fail(ErrorKind::validation, "unknown concept '" + concept_id + "'");
        return it->second;
    }

    /// M_it as a row-major emb_dim x prompt_dim array.
    const std::vector<double>& map(std::size_t layer, std::size_t step) const {
        return maps_[spec_.time_mode == TimeMode::varying ? layer * spec_.steps + step : layer];
    }

    std::span<const double> offset(std::size_t layer, std::size_t patch) const {
        return {offsets_[layer].data() + patch * spec_.emb_dim, spec_.emb_dim};
    }

    std::vector<double> apply_map(std::size_t layer, std::size_t step, std::span<const double> e) const {
        const auto& m = map(layer, step);
        std::vector<double> out(spec_.emb_dim, 0.0);
        for (std::size_t r = 0; r < spec_.emb_dim; ++r)
            for (std::size_t c = 0; c < spec_.prompt_dim; ++c)
                out[r] += m[r * spec_.prompt_dim + c] * e[c];
        return out;
    }

    ToyPrompt prompt(std::initializer_list<std::string> ids) const { return make_prompt(std::set<std::string>(ids)); }

    ToyPrompt make_prompt(std::set<std::string> ids) const {
        if (ids.empty())
            fail(ErrorKind::validation, "toy prompt has no concepts");
        for (const auto& id : ids)
            (void)embedding(id);
        return ToyPrompt{std::move(ids)};
    }

    /// Vocabulary words found in free text (split on anything but
    /// alphanumerics, '_' and '-'). Other words are ignored.
    ToyPrompt parse_prompt(const std::string& text) const {
        std::set<std::string> ids;
        std::string word;
        auto flush = [&] {
            if (!word.empty() && embeddings_.contains(word))
                ids.insert(word);
            word.clear();
        };
        for (char ch : text) {
            if (std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-')
                word += ch;
            else
                flush();
        }
        flush();
        if (ids.empty())
            fail(ErrorKind::validation, "prompt '" + text + "' names no vocabulary concept");
        return ToyPrompt{std::move(ids)};
    }

    std::vector<double> prompt_embedding(const ToyPrompt& prompt) const {
        std::vector<double> e(spec_.prompt_dim, 0.0);
        for (const auto& id : prompt.concepts) {
            const auto& v = embedding(id);
            for (std::size_t j = 0; j < e.size(); ++j)
                e[j] += v[j];
        }
        return e;
    }

    /// Unit direction M_it e_concept (nullopt when it vanishes).
    std::optional<std::vector<double>> concept_direction(const std::string& concept_id, std::size_t layer,
                                                         std::size_t step) const {
        const auto d = apply_map(layer, step, embedding(concept_id));
        if (linalg::norm<double>(d) < zero_norm_threshold)
            return std::nullopt;
        return normalize(d);
    }

private:
    void build_embeddings() {
        const std::size_t q = spec_.prompt_dim;
        std::vector<std::vector<double>> vecs;
        for (std::size_t c = 0; c < spec_.vocabulary.size(); ++c) {
            std::vector<double> v(q, 0.0);
            for (std::size_t j = 0; j < q; ++j)
                v[j] = spec_.canonical_embeddings ? (j == c ? 1.0 : 0.0)
                                                  : counter_normal(spec_.seed, Stream::embedding, c, 0, 0, j);
            vecs.push_back(std::move(v));
        }
        if (!spec_.canonical_embeddings && q >= vecs.size()) {
            if (!detail::orthonormalize(vecs))
                fail(ErrorKind::numeric, "degenerate concept embeddings for seed " + std::to_string(spec_.seed));
        } else if (!spec_.canonical_embeddings) {
            for (auto& v : vecs)
                v = normalize(v);
        }
        for (std::size_t c = 0; c < vecs.size(); ++c)
            embeddings_.emplace(spec_.vocabulary[c], std::move(vecs[c]));
    }

    std::vector<double> base_map(std::size_t layer) const {
        const std::size_t d = spec_.emb_dim, q = spec_.prompt_dim;
        std::vector<double> m(d * q, 0.0);
        const double scale = 1.0 / std::sqrt(static_cast<double>(q));
        switch (spec_.map_kind) {
        case MapKind::identity:
            for (std::size_t j = 0; j < std::min(d, q); ++j)
                m[j * q + j] = 1.0;
            break;
        case MapKind::gaussian:
            for (std::size_t r = 0; r < d; ++r)
                for (std::size_t c = 0; c < q; ++c)
                    m[r * q + c] = scale * counter_normal(spec_.seed, Stream::map, layer, r, 0, c);
            break;
        case MapKind::orthogonal: {
            std::vector<std::vector<double>> cols(q, std::vector<double>(d));
            for (std::size_t c = 0; c < q; ++c)
                for (std::size_t r = 0; r < d; ++r)
                    cols[c][r] = counter_normal(spec_.seed, Stream::map, layer, r, 0, c);
            if (!detail::orthonormalize(cols))
                fail(ErrorKind::numeric, "degenerate orthogonal map at layer " + std::to_string(layer + 1));
            for (std::size_t r = 0; r < d; ++r)
                for (std::size_t c = 0; c < q; ++c)
                    m[r * q + c] = cols[c][r];
            break;
        }
        }
        return m;
    }

    void build_maps() {
        const std::size_t d = spec_.emb_dim, q = spec_.prompt_dim;
        const double scale = spec_.epsilon / std::sqrt(static_cast<double>(q));
        for (std::size_t i = 0; i < spec_.layers; ++i) {
            const auto base = base_map(i);
            if (spec_.time_mode == TimeMode::static_map) {
                maps_.push_back(base);
                continue;
            }
            for (std::size_t t = 0; t < spec_.steps; ++t) {
                auto m = base;
                for (std::size_t r = 0; r < d; ++r)
                    for (std::size_t c = 0; c < q; ++c)
                        m[r * q + c] += scale * counter_normal(spec_.seed, Stream::time, i, t, r, c);
                maps_.push_back(std::move(m));
            }
        }
    }

    void build_offsets() {
        const std::size_t d = spec_.emb_dim;
        for (std::size_t i = 0; i < spec_.layers; ++i) {
            std::vector<double> p(spec_.patches[i] * d, 0.0);
            if (spec_.offset_scale > 0.0)
                for (std::size_t k = 0; k < spec_.patches[i]; ++k)
                    for (std::size_t j = 0; j < d; ++j)
                        p[k * d + j] = spec_.offset_scale * counter_normal(spec_.seed, Stream::offset, i, k, 0, j);
            offsets_.push_back(std::move(p));
        }
    }

    ToyModelSpec spec_;
    std::map<std::string, std::vector<double>> embeddings_;
    std::vector<std::vector<double>> maps_;
    std::vector<std::vector<double>> offsets_;
};

inline std::string describe(const ToyPrompt& prompt) {
    std::string out;
    for (const auto& id : prompt.concepts)
        out += (out.empty() ? "" : " ") + id;
    return out;
}

/// Runs the simulator, optionally steering every patch as it is produced.
inline ActivationTrace run(const ToyModel& model, const ToyPrompt& prompt,
                           const std::optional<std::pair<SteeringSet, SteeringConfig>>& steering = std::nullopt,
                           std::int64_t seed = 0) {
    const TraceLayout layout = model.layout();
    if (steering) {
        steering->first.validate();
        if (!compatible(steering->first.layout, layout))
            fail(ErrorKind::validation, "layout mismatch between toy model and steering set");
        validate_config(steering->second, layout.num_layers);
        (void)source_step(steering->first, layout.num_steps, 0, steering->second);
    }
    ActivationTrace trace = ActivationTrace::zeros(layout);
    trace.model_id = model.spec().model_id;
    trace.prompt = describe(prompt);
    trace.seed = seed;
    const auto e = model.prompt_embedding(prompt);
    for (std::size_t i = 0; i < layout.num_layers; ++i)
        for (std::size_t t = 0; t < layout.num_steps; ++t) {
            const auto base = model.apply_map(i, t, e);
            const float* s_data = nullptr;
            if (steering && steering->second.steers_layer(i)) {
                const std::size_t st = source_step(steering->first, layout.num_steps, t, steering->second);
                if (!steering->first.is_null(i, st))
                    s_data = steering->first.at(i, st).data();
            }
            Matrix& m = trace.at(i, t);
            std::vector<double> c(layout.emb_sizes[i]);
            for (std::size_t k = 0; k < m.rows; ++k) {
                const auto p = model.offset(i, k);
                for (std::size_t j = 0; j < c.size(); ++j)
                    c[j] = base[j] + p[j];
                if (s_data)
                    steer_in_place(std::span<double>(c), std::span<const float>(s_data, c.size()), steering->second);
                for (std::size_t j = 0; j < c.size(); ++j)
                    m(k, j) = static_cast<float>(c[j]);
            }
        }
    return trace;
}

/// Mean over (layer, step, patch) of <unit(M_it e_concept), ca>. Slots whose
/// direction vanishes are skipped; with none left the score is 0.
inline double concept_score(const ActivationTrace& trace, const ToyModel& model, const std::string& concept_id) {
    (void)model.embedding(concept_id);
    if (!compatible(trace.layout, model.layout()) || trace.layout.num_steps != model.layout().num_steps)
        fail(ErrorKind::validation, "trace layout does not match the toy model");
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < trace.layout.num_layers; ++i)
        for (std::size_t t = 0; t < trace.layout.num_steps; ++t) {
            const auto dir = model.concept_direction(concept_id, i, t);
            if (!dir)
                continue;
            const Matrix& m = trace.at(i, t);
            for (std::size_t k = 0; k < m.rows; ++k) {
                sum += linalg::dot(std::span<const double>(*dir), m.row(k));
                ++count;
            }
        }
    return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

/// Analytic steering set: s_it = unit(M_it e_concept).
inline SteeringSet ground_truth_set(const ToyModel& model, const std::string& concept_id) {
    const TraceLayout layout = model.layout();
    SteeringSet set;
    set.layout = layout;
    set.model_id = model.spec().model_id;
    set.concept_label = concept_id;
    set.mode = SteeringMode::erase;
    set.normalized = true;
    set.null_mask.assign(layout.slots(), false);
    for (std::size_t i = 0; i < layout.num_layers; ++i)
        for (std::size_t t = 0; t < layout.num_steps; ++t) {
            const auto dir = model.concept_direction(concept_id, i, t);
            if (!dir)
                fail(ErrorKind::numeric, "zero-norm direction for '" + concept_id + "' at " + slot_name(i, t));
            set.vectors.push_back(linalg::narrow(*dir));
        }
    set.metadata = {{"source", "toy_ground_truth"}};
    return set;
}

}  // namespace casteer::toy
