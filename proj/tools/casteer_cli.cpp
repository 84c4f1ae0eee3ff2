// casteer: build, apply, compose and inspect concept steering vectors.
//
// Exit codes: 0 ok, 1 IO/format, 2 validation, 3 numeric (NaN / zero-norm).
// Failures print exactly one line, "error: <message>", on stderr.

#include <casteer/casteer.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

using namespace casteer;

namespace {

void warn(const std::string& message) { std::cerr << "warning: " << message << "\n"; }

/// "all", "k" or "A..B" (one-based, inclusive). 0 stands for "no layer", so
/// "0..0" selects nothing and "0..2" selects layers 1 and 2.
std::optional<std::set<std::size_t>> parse_layers(const std::string& text) {
    if (text.empty() || text == "all")
        return std::nullopt;
    std::size_t lo = 0, hi = 0;
    try {
        const auto dots = text.find("..");
        std::size_t used = 0;
        if (dots == std::string::npos) {
            lo = hi = std::stoul(text, &used);
            if (used != text.size())
                throw std::invalid_argument(text);
        } else {
            lo = std::stoul(text.substr(0, dots), &used);
            if (used != dots)
                throw std::invalid_argument(text);
            const std::string rest = text.substr(dots + 2);
            hi = std::stoul(rest, &used);
            if (used != rest.size())
                throw std::invalid_argument(text);
        }
    } catch (const std::exception&) {
        fail(ErrorKind::validation, "bad layer range '" + text + "'");
    }
    if (lo > hi)
        fail(ErrorKind::validation, "bad layer range '" + text + "'");
    std::set<std::size_t> layers;
    for (std::size_t layer = std::max<std::size_t>(lo, 1); layer <= hi; ++layer)
        layers.insert(layer - 1);
    return layers;
}

void write_text(const std::string& path, const std::string& text) {
    write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_json(const std::string& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

/// Flags shared by every subcommand that steers activations.
struct SteeringFlags {
    double beta = 2.0;
    bool clip = false;
    std::string mode;
    std::string alpha_mode = "dot";
    double alpha = 1.0;
    std::string layers = "all";
    std::string step_map = "per_step";

    void attach(CLI::App* cmd) {
        cmd->add_option("--beta", beta, "Steering strength for dot-weighted modes")->capture_default_str();
        cmd->add_flag("--clip", clip, "Only steer patches with a positive dot product");
        cmd->add_option("--mode", mode, "erase, add or switch (default: the set's mode)");
        cmd->add_option("--alpha-mode", alpha_mode, "dot or constant")->capture_default_str();
        cmd->add_option("--alpha", alpha, "Constant strength (constant alpha mode and add)")->capture_default_str();
        cmd->add_option("--layers", layers, "Layer range A..B, one-based inclusive, or 'all'")->capture_default_str();
        cmd->add_option("--step-map", step_map, "per_step or broadcast_single")->capture_default_str();
    }

    SteeringConfig config(SteeringMode fallback) const {
        SteeringConfig cfg;
        cfg.beta = beta;
        cfg.clip = clip;
        cfg.mode = mode.empty() ? fallback : parse_mode(mode);
        if (alpha_mode == "dot" || alpha_mode == "dot_weighted")
            cfg.alpha_mode = AlphaMode::dot_weighted;
        else if (alpha_mode == "constant")
            cfg.alpha_mode = AlphaMode::constant;
        else
            fail(ErrorKind::validation, "unknown alpha mode '" + alpha_mode + "'");
        cfg.constant_alpha = alpha;
        cfg.layer_subset = parse_layers(layers);
        if (step_map == "per_step")
            cfg.step_map = StepMap::per_step;
        else if (step_map == "broadcast_single")
            cfg.step_map = StepMap::broadcast_single;
        else
            fail(ErrorKind::validation, "unknown step map '" + step_map + "'");
        validate_config(cfg);
        if (cfg.beta > 4.0)
            warn("beta above 4 is outside the studied range");
        return cfg;
    }
};

SetBundle load_bundle(const std::vector<std::string>& paths) {
    SetBundle bundle;
    bundle.orthogonalized = true;
    for (const auto& path : paths) {
        bundle.sets.push_back(read_steering_set(path));
        const auto& meta = bundle.sets.back().metadata;
        if (!meta.is_object() || !meta.value("orthogonalized", false))
            bundle.orthogonalized = false;
    }
    if (paths.size() < 2)
        bundle.orthogonalized = false;
    return bundle;
}

nlohmann::json summarize_set(const SteeringSet& set) {
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (std::size_t s = 0; s < set.vectors.size(); ++s) {
        if (set.null_mask[s])
            continue;
        const double n = linalg::norm(std::span<const float>(set.vectors[s]));
        lo = std::min(lo, n);
        hi = std::max(hi, n);
    }
    const bool any = set.null_count() < set.vectors.size();
    return {{"kind", "steering_set"},
            {"concept", set.concept_label},
            {"mode", to_string(set.mode)},
            {"layers", set.layout.num_layers},
            {"steps", set.layout.num_steps},
            {"emb_sizes", set.layout.emb_sizes},
            {"null_count", set.null_count()},
            {"min_norm", any ? lo : 0.0},
            {"max_norm", hi},
            {"unit_norms", any && std::abs(lo - 1.0) <= SteeringSet::unit_tolerance &&
                               std::abs(hi - 1.0) <= SteeringSet::unit_tolerance},
            {"metadata", set.metadata}};
}

nlohmann::json summarize(const ContainerPayload& payload) {
    if (const auto* set = std::get_if<SteeringSet>(&payload))
        return summarize_set(*set);
    if (const auto* trace = std::get_if<ActivationTrace>(&payload))
        return {{"kind", "trace"},
                {"model_id", trace->model_id},
                {"prompt", trace->prompt},
                {"seed", trace->seed},
                {"layers", trace->layout.num_layers},
                {"steps", trace->layout.num_steps},
                {"patch_nums", trace->layout.patch_nums},
                {"emb_sizes", trace->layout.emb_sizes}};
    const auto& w = std::get<ProjectionWeights>(payload);
    nlohmann::json shapes = nlohmann::json::array();
    for (const auto& m : w.matrices)
        shapes.push_back({m.rows, m.cols});
    return {{"kind", "weights"}, {"model_id", w.model_id}, {"layer_ids", w.layer_ids}, {"shapes", shapes}};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Concept steering for cross-attention activations"};
    app.require_subcommand(1);

    // vectors
    auto* vectors = app.add_subcommand("vectors", "Build a steering set from paired traces or a prompt manifest");
    std::vector<std::string> pos_paths, neg_paths;
    std::string manifest_path, model_path, on_zero = "error", vectors_out, concept_label, vectors_mode = "erase";
    vectors->add_option("--pos", pos_paths, "Positive (concept-present) trace containers");
    vectors->add_option("--neg", neg_paths, "Negative trace containers, paired with --pos in order");
    vectors->add_option("--manifest", manifest_path, "Prompt-pair manifest (JSON)");
    vectors->add_option("--model", model_path, "Toy model spec (JSON) used to render the manifest");
    vectors->add_option("--on-zero", on_zero, "error or null_mask")->capture_default_str();
    vectors->add_option("--concept", concept_label, "Concept label stored in the set");
    vectors->add_option("--mode", vectors_mode, "erase, add or switch")->capture_default_str();
    vectors->add_option("--out", vectors_out, "Output steering-set container")->required();

    // apply
    auto* apply = app.add_subcommand("apply", "Steer a recorded trace");
    std::string apply_trace, apply_out;
    std::vector<std::string> apply_sets;
    bool allow_unorthogonal = false;
    SteeringFlags apply_flags;
    apply->add_option("--trace", apply_trace, "Input trace container")->required();
    apply->add_option("--set", apply_sets, "Steering set container(s), applied in order")->required();
    apply->add_flag("--allow-unorthogonal", allow_unorthogonal, "Erase with several non-orthogonalized sets");
    apply->add_option("--out", apply_out, "Output trace container")->required();
    apply_flags.attach(apply);

    // inject
    auto* inject_cmd = app.add_subcommand("inject", "Fold erasure into output-projection weights");
    std::string inject_weights, inject_out;
    std::vector<std::string> inject_sets;
    SteeringFlags inject_flags;
    inject_cmd->add_option("--weights", inject_weights, "Weights container")->required();
    inject_cmd->add_option("--set", inject_sets, "Steering set container(s), single-step or uniform")->required();
    inject_cmd->add_option("--out", inject_out, "Output weights container")->required();
    inject_flags.attach(inject_cmd);

    // ortho
    auto* ortho = app.add_subcommand("ortho", "Gram-Schmidt a bundle of steering sets");
    std::vector<std::string> ortho_sets, ortho_outs;
    std::string ortho_report;
    ortho->add_option("--set", ortho_sets, "Steering sets in orthogonalization order")->required();
    ortho->add_option("--out", ortho_outs, "One output container per input set")->required();
    ortho->add_option("--report", ortho_report, "JSON report path (stdout if omitted)");

    // merge
    auto* merge = app.add_subcommand("merge", "Average several steering sets into one");
    std::vector<std::string> merge_sets;
    std::string merge_out;
    merge->add_option("--set", merge_sets, "Steering sets to average")->required();
    merge->add_option("--out", merge_out, "Output steering-set container")->required();

    // broadcast
    auto* broadcast = app.add_subcommand("broadcast", "Replicate a single-step set across steps");
    std::string broadcast_in, broadcast_out;
    std::size_t broadcast_steps = 1;
    broadcast->add_option("--set", broadcast_in, "Single-step steering set")->required();
    broadcast->add_option("--steps", broadcast_steps, "Target step count")->required();
    broadcast->add_option("--out", broadcast_out, "Output steering-set container")->required();

    // inspect
    auto* inspect = app.add_subcommand("inspect", "Summarize a container or export a dot-product heatmap");
    std::string inspect_container, inspect_trace, inspect_set, inspect_csv, inspect_pgm;
    std::size_t inspect_layer = 1, inspect_step = 1;
    inspect->add_option("--container", inspect_container, "Any container to summarize as JSON");
    inspect->add_option("--trace", inspect_trace, "Trace for the heatmap");
    inspect->add_option("--set", inspect_set, "Steering set for the heatmap (or to summarize)");
    inspect->add_option("--layer", inspect_layer, "One-based layer")->capture_default_str();
    inspect->add_option("--step", inspect_step, "One-based step")->capture_default_str();
    inspect->add_option("--csv", inspect_csv, "Heatmap CSV output (stdout if omitted)");
    inspect->add_option("--pgm", inspect_pgm, "Heatmap PGM output");

    // simulate
    auto* simulate = app.add_subcommand("simulate", "Run the toy simulator, optionally steered");
    std::string sim_model, sim_prompt, sim_out, sim_report, sim_set, sim_ground_truth, sim_write_set;
    std::int64_t sim_seed = 0;
    SteeringFlags sim_flags;
    simulate->add_option("--model", sim_model, "Toy model spec (JSON)")->required();
    simulate->add_option("--prompt", sim_prompt, "Prompt text; vocabulary words select concepts")->required();
    simulate->add_option("--seed", sim_seed, "Generation seed recorded in the trace")->capture_default_str();
    simulate->add_option("--out", sim_out, "Output trace container");
    simulate->add_option("--report", sim_report, "Score report JSON (stdout if omitted)");
    simulate->add_option("--set", sim_set, "Steering set applied during the run");
    simulate->add_option("--ground-truth", sim_ground_truth, "Steer with the analytic set of this concept");
    simulate->add_option("--write-set", sim_write_set, "Write the analytic set used by --ground-truth");
    sim_flags.attach(simulate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(ErrorKind::validation);
    }

    try {
        if (*vectors) {
            const ZeroPolicy policy = parse_zero_policy(on_zero);
            std::vector<ActivationTrace> pos, neg;
            if (!manifest_path.empty()) {
                if (model_path.empty() || !pos_paths.empty() || !neg_paths.empty())
                    fail(ErrorKind::validation, "--manifest needs --model and excludes --pos/--neg");
                const toy::ToyModel model(toy::spec_from_json(read_json_file(model_path)));
                for (const auto& pair : expand_manifest(read_manifest(manifest_path))) {
                    pos.push_back(toy::run(model, model.parse_prompt(pair.positive), std::nullopt, pair.seed));
                    neg.push_back(toy::run(model, model.parse_prompt(pair.negative), std::nullopt, pair.seed));
                    pos.back().prompt = pair.positive;
                    neg.back().prompt = pair.negative;
                }
            } else {
                if (pos_paths.empty() || pos_paths.size() != neg_paths.size())
                    fail(ErrorKind::validation, "need matching --pos and --neg lists, or --manifest");
                for (const auto& p : pos_paths)
                    pos.push_back(read_trace(p));
                for (const auto& p : neg_paths)
                    neg.push_back(read_trace(p));
            }
            const SteeringMode mode = parse_mode(vectors_mode);
            SteeringSet set = mode == SteeringMode::switch_concept ? build_switch_set(pos, neg, policy)
                                                                   : build_steering_set(pos, neg, policy);
            set.mode = mode;
            set.concept_label = concept_label;
            if (set.null_count() > 0)
                warn(std::to_string(set.null_count()) + " null-masked slot(s)");
            write_container(set, vectors_out);
        } else if (*apply) {
            const ActivationTrace trace = read_trace(apply_trace);
            const SetBundle bundle = load_bundle(apply_sets);
            const SteeringConfig cfg = apply_flags.config(bundle.sets.front().mode);
            write_container(apply_bundle(trace, bundle, cfg, allow_unorthogonal), apply_out);
        } else if (*inject_cmd) {
            const SteeringConfig cfg = inject_flags.config(SteeringMode::erase);
            if (cfg.clip)
                fail(ErrorKind::validation, "clipping not injectable");
            const ProjectionWeights weights = read_weights(inject_weights);
            write_container(inject(weights, load_bundle(inject_sets), cfg), inject_out);
        } else if (*ortho) {
            if (ortho_outs.size() != ortho_sets.size())
                fail(ErrorKind::validation, "ortho needs one --out per --set");
            SetBundle bundle = load_bundle(ortho_sets);
            const auto result = orthogonalize(bundle);
            if (result.warning_count > 0)
                warn(std::to_string(result.warning_count) + " dependent slot(s) null-masked");
            for (std::size_t m = 0; m < ortho_outs.size(); ++m)
                write_container(result.bundle.sets[m], ortho_outs[m]);
            if (ortho_report.empty())
                std::cout << result.report.dump(2) << "\n";
            else
                write_json(ortho_report, result.report);
        } else if (*merge) {
            write_container(merge_average(load_bundle(merge_sets)), merge_out);
        } else if (*broadcast) {
            write_container(broadcast_set(read_steering_set(broadcast_in), broadcast_steps), broadcast_out);
        } else if (*inspect) {
            if (!inspect_trace.empty()) {
                if (inspect_set.empty())
                    fail(ErrorKind::validation, "heatmap needs --trace and --set");
                if (inspect_layer < 1 || inspect_step < 1)
                    fail(ErrorKind::validation, "layer and step are one-based");
                const Heatmap h = heatmap(read_trace(inspect_trace), read_steering_set(inspect_set),
                                          inspect_layer - 1, inspect_step - 1);
                const std::string csv = heatmap_csv(h);
                if (inspect_csv.empty())
                    std::cout << csv;
                else
                    write_text(inspect_csv, csv);
                if (!inspect_pgm.empty())
                    write_file_bytes(inspect_pgm, heatmap_pgm(h));
            } else if (!inspect_container.empty() || !inspect_set.empty()) {
                const auto payload = read_container(inspect_container.empty() ? inspect_set : inspect_container);
                std::cout << summarize(payload).dump(2) << "\n";
            } else {
                fail(ErrorKind::validation, "inspect needs --container, --set, or --trace with --set");
            }
        } else if (*simulate) {
            const toy::ToyModel model(toy::spec_from_json(read_json_file(sim_model)));
            const toy::ToyPrompt prompt = model.parse_prompt(sim_prompt);
            std::optional<std::pair<SteeringSet, SteeringConfig>> steering;
            if (!sim_set.empty() && !sim_ground_truth.empty())
                fail(ErrorKind::validation, "--set and --ground-truth are exclusive");
            if (!sim_set.empty() || !sim_ground_truth.empty()) {
                SteeringSet set = sim_set.empty() ? toy::ground_truth_set(model, sim_ground_truth)
                                                  : read_steering_set(sim_set);
                if (!sim_write_set.empty())
                    write_container(set, sim_write_set);
                const SteeringConfig cfg = sim_flags.config(set.mode);
                steering.emplace(std::move(set), cfg);
            }
            const ActivationTrace trace = toy::run(model, prompt, steering, sim_seed);
            if (!sim_out.empty())
                write_container(trace, sim_out);
            nlohmann::json scores = nlohmann::json::object();
            for (const auto& concept_id : model.spec().vocabulary)
                scores[concept_id] = toy::concept_score(trace, model, concept_id);
            const nlohmann::json report = {{"prompt", sim_prompt},
                                           {"concepts", prompt.concepts},
                                           {"seed", sim_seed},
                                           {"steered", steering.has_value()},
                                           {"scores", scores}};
            if (sim_report.empty())
                std::cout << report.dump(2) << "\n";
            else
                write_json(sim_report, report);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
