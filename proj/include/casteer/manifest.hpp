#pragma once

// Prompt-pair manifest.
//
// {
//   "entries":   [{"positive": "...", "negative": "...", "seed": 7}, ...],
//   "expansion": {
//     "templates":   ["a girl {}", "a boy {}"],
//     "slot_values": ["", "on a beach"],
//     "concept":     "nudity",
//     "positive":    "{prompt}, {concept}",     // optional, this is the default
//     "negative":    "{prompt}",                // optional, this is the default
//     "seed_base":   0                          // optional
//   }
// }
//
// Explicit entries come first, unchanged. Expanded pairs follow in
// template-major order; pair j of the expansion gets seed seed_base + j.
// Both prompts of a pair always share one seed.

#include <casteer/error.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace casteer {

struct PromptPair {
    std::string positive;
    std::string negative;
    std::int64_t seed = 0;

    bool operator==(const PromptPair&) const = default;
};

struct TemplateExpansion {
    std::vector<std::string> templates;
    std::vector<std::string> slot_values;
    std::string concept_text;
    std::string positive_pattern = "{prompt}, {concept}";
    std::string negative_pattern = "{prompt}";
    std::int64_t seed_base = 0;
};

struct PairManifest {
    std::vector<PromptPair> entries;
    std::optional<TemplateExpansion> expansion;
};

namespace detail {

inline std::size_t count_occurrences(const std::string& text, const std::string& token) {
    std::size_t n = 0;
    for (auto pos = text.find(token); pos != std::string::npos; pos = text.find(token, pos + token.size()))
        ++n;
    return n;
}

inline std::string replace_all(std::string text, const std::string& token, const std::string& value) {
    for (auto pos = text.find(token); pos != std::string::npos; pos = text.find(token, pos + value.size()))
        text.replace(pos, token.size(), value);
    return text;
}

inline std::string trim(const std::string& text) {
    const auto first = text.find_first_not_of(" \t");
    if (first == std::string::npos)
        return {};
    const auto last = text.find_last_not_of(" \t");
    return text.substr(first, last - first + 1);
}

}  // namespace detail

/// Explicit entries followed by the templates x slot_values product.
inline std::vector<PromptPair> expand_manifest(const PairManifest& manifest) {
    std::vector<PromptPair> pairs = manifest.entries;
    if (manifest.expansion) {
        const TemplateExpansion& ex = *manifest.expansion;
        for (const auto& tmpl : ex.templates)
            if (detail::count_occurrences(tmpl, "{}") != 1)
                fail(ErrorKind::validation, "template without exactly one slot: '" + tmpl + "'");
        std::int64_t j = 0;
        for (const auto& tmpl : ex.templates)
            for (const auto& value : ex.slot_values) {
                const std::string prompt = detail::trim(detail::replace_all(tmpl, "{}", value));
                auto render = [&](const std::string& pattern) {
                    return detail::replace_all(detail::replace_all(pattern, "{prompt}", prompt), "{concept}",
                                               ex.concept_text);
                };
                pairs.push_back({render(ex.positive_pattern), render(ex.negative_pattern), ex.seed_base + j++});
            }
    }
    if (pairs.empty())
        fail(ErrorKind::validation, "manifest expands to no prompt pairs");
    return pairs;
}

inline PairManifest manifest_from_json(const nlohmann::json& j) {
    PairManifest m;
    try {
        if (j.contains("entries"))
            for (const auto& e : j.at("entries"))
                m.entries.push_back(
                    {e.at("positive").get<std::string>(), e.at("negative").get<std::string>(), e.value("seed", std::int64_t{0})});
        if (j.contains("expansion")) {
            const auto& x = j.at("expansion");
            TemplateExpansion ex;
            ex.templates = x.at("templates").get<std::vector<std::string>>();
            ex.slot_values = x.at("slot_values").get<std::vector<std::string>>();
            ex.concept_text = x.value("concept", "");
            ex.positive_pattern = x.value("positive", ex.positive_pattern);
            ex.negative_pattern = x.value("negative", ex.negative_pattern);
            ex.seed_base = x.value("seed_base", std::int64_t{0});
            m.expansion = std::move(ex);
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("malformed manifest: ") + e.what());
    }
    return m;
}

inline nlohmann::json to_json(const PairManifest& m) {
    nlohmann::json j;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : m.entries)
        j["entries"].push_back({{"positive", e.positive}, {"negative", e.negative}, {"seed", e.seed}});
    if (m.expansion) {
        const auto& ex = *m.expansion;
        j["expansion"] = {{"templates", ex.templates},
                          {"slot_values", ex.slot_values},
                          {"concept", ex.concept_text},
                          {"positive", ex.positive_pattern},
                          {"negative", ex.negative_pattern},
                          {"seed_base", ex.seed_base}};
    }
    return j;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in)
        fail(ErrorKind::io, "cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, path.string() + ": " + e.what());
    }
}

inline PairManifest read_manifest(const std::filesystem::path& path) { return manifest_from_json(read_json_file(path)); }

}  // namespace casteer
