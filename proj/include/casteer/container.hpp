#pragma once

// Binary container shared by traces, steering sets and projection weights.
//
//   magic "CAST" | version u32 LE | header_length u64 LE | JSON header | f32 LE payload
//
// Tensor byte offsets in the header are relative to the start of the payload
// and must be contiguous in index order.

#include <casteer/error.hpp>
#include <casteer/tensor.hpp>

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace casteer {

inline constexpr std::string_view container_magic = "CAST";
inline constexpr std::uint32_t container_version = 1;

enum class ContainerKind { trace, steering_set, weights };

inline std::string_view to_string(ContainerKind kind) noexcept {
    switch (kind) {
    case ContainerKind::trace:
        return "trace";
    case ContainerKind::steering_set:
        return "steering_set";
    case ContainerKind::weights:
        return "weights";
    }
    return "trace";
}

using ContainerPayload = std::variant<ActivationTrace, SteeringSet, ProjectionWeights>;

inline ContainerKind kind_of(const ContainerPayload& payload) noexcept {
    return static_cast<ContainerKind>(payload.index());
}

namespace detail {

using Bytes = std::vector<std::uint8_t>;

template <class U>
void put_le(Bytes& out, U value) {
    for (std::size_t b = 0; b < sizeof(U); ++b)
        out.push_back(static_cast<std::uint8_t>(value >> (8 * b)));
}

template <class U>
U get_le(const std::uint8_t* p) {
    U value = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b)
        value |= static_cast<U>(p[b]) << (8 * b);
    return value;
}

inline void put_floats(Bytes& out, std::span<const float> values) {
    for (float v : values)
        put_le(out, std::bit_cast<std::uint32_t>(v));
}

inline std::vector<float> get_floats(const std::uint8_t* p, std::size_t count) {
    std::vector<float> values(count);
    for (std::size_t j = 0; j < count; ++j)
        values[j] = std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * j));
    return values;
}

inline nlohmann::json layout_json(const TraceLayout& layout) {
    return {{"N", layout.num_layers},
            {"T", layout.num_steps},
            {"patch_nums", layout.patch_nums},
            {"emb_sizes", layout.emb_sizes}};
}

inline TraceLayout layout_from_json(const nlohmann::json& j) {
    TraceLayout layout;
    layout.num_layers = j.at("N").get<std::size_t>();
    layout.num_steps = j.at("T").get<std::size_t>();
    layout.patch_nums = j.at("patch_nums").get<std::vector<std::size_t>>();
    layout.emb_sizes = j.at("emb_sizes").get<std::vector<std::size_t>>();
    return layout;
}

inline std::string tensor_name(std::size_t layer, std::size_t step) {
    return "ca_" + std::to_string(layer + 1) + "_" + std::to_string(step + 1);
}

struct IndexEntry {
    std::string name;
    std::vector<std::size_t> shape;
    std::span<const float> values;
};

inline Bytes assemble(nlohmann::json header, const std::vector<IndexEntry>& entries) {
    nlohmann::json index = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& e : entries) {
        index.push_back({{"name", e.name}, {"byte_offset", offset}, {"shape", e.shape}});
        offset += 4 * e.values.size();
    }
    header["tensor_index"] = std::move(index);
    const std::string text = header.dump();

    Bytes out;
    out.reserve(16 + text.size() + offset);
    out.insert(out.end(), container_magic.begin(), container_magic.end());
    put_le<std::uint32_t>(out, container_version);
    put_le<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& e : entries)
        put_floats(out, e.values);
    return out;
}

}  // namespace detail

/// Serializes a payload after checking its invariants.
inline std::vector<std::uint8_t> encode_container(const ContainerPayload& payload) {
    using nlohmann::json;
    std::vector<detail::IndexEntry> entries;
    json header = json::object();
    header["kind"] = to_string(kind_of(payload));

    if (const auto* trace = std::get_if<ActivationTrace>(&payload)) {
        trace->validate();
        header["model_id"] = trace->model_id;
        header["concept"] = "";
        header["layout"] = detail::layout_json(trace->layout);
        header["mode"] = nullptr;
        header["normalized"] = nullptr;
        header["null_mask"] = json::array();
        header["metadata"] = {{"prompt", trace->prompt}, {"seed", trace->seed}};
        for (std::size_t i = 0; i < trace->layout.num_layers; ++i)
            for (std::size_t t = 0; t < trace->layout.num_steps; ++t) {
                const Matrix& m = trace->at(i, t);
                entries.push_back({detail::tensor_name(i, t), {m.rows, m.cols}, m.data});
            }
    } else if (const auto* set = std::get_if<SteeringSet>(&payload)) {
        set->validate();
        header["model_id"] = set->model_id;
        header["concept"] = set->concept_label;
        header["layout"] = detail::layout_json(set->layout);
        header["mode"] = to_string(set->mode);
        header["normalized"] = set->normalized;
        header["null_mask"] = set->null_mask;
        header["metadata"] = set->metadata;
        for (std::size_t i = 0; i < set->layout.num_layers; ++i)
            for (std::size_t t = 0; t < set->layout.num_steps; ++t) {
                const auto v = set->at(i, t);
                entries.push_back({detail::tensor_name(i, t), {v.size()}, v});
            }
    } else {
        const auto& weights = std::get<ProjectionWeights>(payload);
        weights.validate();
        TraceLayout layout;
        layout.num_layers = weights.matrices.size();
        layout.num_steps = 1;
        for (const Matrix& m : weights.matrices) {
            layout.emb_sizes.push_back(m.rows);
            layout.patch_nums.push_back(m.cols);
        }
        header["model_id"] = weights.model_id;
        header["concept"] = "";
        header["layout"] = detail::layout_json(layout);
        header["mode"] = nullptr;
        header["normalized"] = nullptr;
        header["null_mask"] = json::array();
        header["metadata"] = {{"layer_ids", weights.layer_ids}};
        for (std::size_t i = 0; i < weights.matrices.size(); ++i) {
            const Matrix& m = weights.matrices[i];
            entries.push_back({"w_" + std::to_string(i + 1), {m.rows, m.cols}, m.data});
        }
    }
    return detail::assemble(std::move(header), entries);
}

/// Parses container bytes. Errors: bad magic, unsupported version,
/// truncated payload, shape/offset mismatch, malformed header.
inline ContainerPayload decode_container(std::span<const std::uint8_t> bytes) {
    using nlohmann::json;
    if (bytes.size() < 4 || std::memcmp(bytes.data(), container_magic.data(), 4) != 0)
        fail(ErrorKind::format, "bad magic");
    if (bytes.size() < 16)
        fail(ErrorKind::format, "truncated header");
    const auto version = detail::get_le<std::uint32_t>(bytes.data() + 4);
    if (version != container_version)
        fail(ErrorKind::format, "unsupported version " + std::to_string(version));
    const auto header_length = detail::get_le<std::uint64_t>(bytes.data() + 8);
    if (header_length > bytes.size() - 16)
        fail(ErrorKind::format, "truncated header");

    json header;
    try {
        header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_length));
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("malformed header: ") + e.what());
    }
    const std::uint8_t* payload = bytes.data() + 16 + header_length;
    const std::uint64_t available = bytes.size() - 16 - header_length;

    try {
        const std::string kind = header.at("kind").get<std::string>();
        const TraceLayout layout = detail::layout_from_json(header.at("layout"));
        layout.validate();
        const json& index = header.at("tensor_index");

        std::uint64_t expected_offset = 0;
        std::size_t cursor = 0;
        auto next_tensor = [&](const std::string& name, const std::vector<std::size_t>& shape) {
            if (cursor >= index.size())
                fail(ErrorKind::format, "shape/offset mismatch: missing tensor " + name);
            const json& entry = index[cursor++];
            if (entry.at("name").get<std::string>() != name ||
                entry.at("shape").get<std::vector<std::size_t>>() != shape)
                fail(ErrorKind::format, "shape/offset mismatch at tensor " + name);
            if (entry.at("byte_offset").get<std::uint64_t>() != expected_offset)
                fail(ErrorKind::format, "shape/offset mismatch: offset of tensor " + name);
            std::size_t count = 1;
            for (std::size_t d : shape)
                count *= d;
            if (expected_offset + 4 * count > available)
                fail(ErrorKind::format, "truncated payload");
            auto values = detail::get_floats(payload + expected_offset, count);
            expected_offset += 4 * count;
            return values;
        };
        auto finish = [&] {
            if (cursor != index.size())
                fail(ErrorKind::format, "shape/offset mismatch: extra tensor index entries");
            if (expected_offset != available)
                fail(ErrorKind::format, "shape/offset mismatch: trailing payload bytes");
        };

        if (kind == "trace") {
            ActivationTrace trace;
            trace.layout = layout;
            trace.model_id = header.at("model_id").get<std::string>();
            trace.prompt = header.at("metadata").value("prompt", "");
            trace.seed = header.at("metadata").value("seed", std::int64_t{0});
            for (std::size_t i = 0; i < layout.num_layers; ++i)
                for (std::size_t t = 0; t < layout.num_steps; ++t) {
                    const std::size_t rows = layout.patch_nums[i], cols = layout.emb_sizes[i];
                    trace.tensors.emplace_back(rows, cols, next_tensor(detail::tensor_name(i, t), {rows, cols}));
                }
            finish();
            trace.validate();
            return trace;
        }
        if (kind == "steering_set") {
            SteeringSet set;
            set.layout = layout;
            set.model_id = header.at("model_id").get<std::string>();
            set.concept_label = header.at("concept").get<std::string>();
            set.mode = parse_mode(header.at("mode").get<std::string>());
            set.normalized = header.at("normalized").get<bool>();
            set.null_mask = header.at("null_mask").get<std::vector<bool>>();
            set.metadata = header.at("metadata");
            for (std::size_t i = 0; i < layout.num_layers; ++i)
                for (std::size_t t = 0; t < layout.num_steps; ++t)
                    set.vectors.push_back(next_tensor(detail::tensor_name(i, t), {layout.emb_sizes[i]}));
            finish();
            set.validate();
            return set;
        }
        if (kind == "weights") {
            ProjectionWeights weights;
            weights.model_id = header.at("model_id").get<std::string>();
            const json& meta = header.at("metadata");
            if (meta.contains("bias"))
                fail(ErrorKind::validation, "biased projection layers are not supported");
            weights.layer_ids = meta.at("layer_ids").get<std::vector<std::string>>();
            for (std::size_t i = 0; i < layout.num_layers; ++i) {
                const std::size_t rows = layout.emb_sizes[i], cols = layout.patch_nums[i];
                weights.matrices.emplace_back(rows, cols, next_tensor("w_" + std::to_string(i + 1), {rows, cols}));
            }
            finish();
            weights.validate();
            return weights;
        }
        fail(ErrorKind::format, "unknown container kind '" + kind + "'");
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("malformed header: ") + e.what());
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::validation)
            fail(ErrorKind::format, e.what());
        throw;
    }
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        fail(ErrorKind::io, "cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad())
        fail(ErrorKind::io, "read failed for " + path.string());
    return bytes;
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        fail(ErrorKind::io, "write failed for " + path.string());
}

inline void write_container(const ContainerPayload& payload, const std::filesystem::path& path) {
    const auto bytes = encode_container(payload);
    write_file_bytes(path, bytes);
}

inline ContainerPayload read_container(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return decode_container(bytes);
}

template <class T>
T read_as(const std::filesystem::path& path) {
    ContainerPayload payload = read_container(path);
    if (auto* value = std::get_if<T>(&payload))
        return std::move(*value);
    fail(ErrorKind::validation,
         path.string() + " holds a " + std::string(to_string(kind_of(payload))) + " container");
}

inline ActivationTrace read_trace(const std::filesystem::path& path) { return read_as<ActivationTrace>(path); }
inline SteeringSet read_steering_set(const std::filesystem::path& path) { return read_as<SteeringSet>(path); }
inline ProjectionWeights read_weights(const std::filesystem::path& path) { return read_as<ProjectionWeights>(path); }

}  // namespace casteer
