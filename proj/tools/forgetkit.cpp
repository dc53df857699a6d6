// forgetkit: command-line front end for checkpoint merging, LoRA folding,
// replay manifests, stage data formatting and the forgetting simulator.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "forgetkit/dataformat.hpp"
#include "forgetkit/lora.hpp"
#include "forgetkit/merge.hpp"
#include "forgetkit/replay.hpp"
#include "forgetkit/simulator.hpp"
#include "forgetkit/tensor_store.hpp"

namespace fs = std::filesystem;
using namespace forgetkit;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kInternal = 3 };

enum class LogLevel { error, info, debug };
LogLevel g_log = LogLevel::info;

void log_info(const std::string& msg) {
    if (g_log >= LogLevel::info) std::cerr << msg << '\n';
}

nlohmann::json load_json(const fs::path& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw DataError(std::string("cannot open ") + what + " '" + path.string() + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("<root>", "invalid JSON in '" + path.string() + "': " + e.what());
    }
}

fs::path resolve(const fs::path& relative_to, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : relative_to / path;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t k = 0; k < a.numel(); ++k)
        m = std::max(m, std::abs(static_cast<double>(a[k]) - static_cast<double>(b[k])));
    return m;
}

// ---------------------------------------------------------------------------

struct MergeArgs {
    std::string spec;
    std::string out;
    std::vector<std::string> models;
    std::string base;
    std::vector<std::string> exclude;
    std::optional<std::uint64_t> seed;
};

int cmd_merge(const MergeArgs& a) {
    auto spec = MergeSpec::load(a.spec);
    const fs::path spec_dir = fs::path(a.spec).parent_path();
    if (!a.models.empty()) {
        if (a.models.size() != spec.entries.size())
            throw DataError("--model given " + std::to_string(a.models.size()) + " times but the spec lists " +
                            std::to_string(spec.entries.size()) + " models");
        for (std::size_t i = 0; i < a.models.size(); ++i) spec.entries[i].path = a.models[i];
    } else {
        for (auto& e : spec.entries) e.path = resolve(spec_dir, e.path).string();
    }
    if (!a.base.empty()) {
        spec.base = a.base;
    } else if (spec.base) {
        spec.base = resolve(spec_dir, *spec.base).string();
    }
    for (const auto& n : a.exclude) spec.exclude.insert(n);
    if (a.seed) spec.seed = *a.seed;
    spec.validate();

    std::vector<Checkpoint> models;
    for (const auto& e : spec.entries) models.push_back(read_checkpoint(e.path));
    std::optional<Checkpoint> base;
    if (spec.base) base = read_checkpoint(*spec.base);
    const auto merged = run_merge(spec, models, base ? &*base : nullptr);
    write_checkpoint(merged, a.out);

    const Checkpoint& reference = base ? *base : models.front();
    std::cout << "merged " << models.size() << " checkpoints with " << to_string(spec.method) << " -> " << a.out
              << '\n';
    std::cout << std::left << std::setw(32) << "tensor" << std::right << std::setw(12) << "count" << std::setw(16)
              << "max|delta|" << '\n';
    for (const auto& [name, t] : merged.tensors) {
        std::cout << std::left << std::setw(32) << name << std::right << std::setw(12) << t.numel();
        if (reference.contains(name) && reference.at(name).shape() == t.shape())
            std::cout << std::setw(16) << std::setprecision(6) << max_abs_diff(t, reference.at(name));
        else
            std::cout << std::setw(16) << "n/a";
        std::cout << '\n';
    }
    return kOk;
}

// ---------------------------------------------------------------------------

struct FoldArgs {
    std::string base;
    std::string adapter;
    std::optional<double> alpha;
    std::string out;
};

int cmd_fold_lora(const FoldArgs& a) {
    const auto base = read_checkpoint(a.base);
    const auto adapters = adapters_from_checkpoint(read_checkpoint(a.adapter));
    const auto folded = fold_lora(base, adapters, a.alpha);
    write_checkpoint(folded, a.out);
    std::cout << "folded " << adapters.size() << " adapters -> " << a.out << '\n';
    for (const auto& [target, ad] : adapters)
        std::cout << "  " << target << ": rank " << ad.rank << ", alpha " << ad.alpha << " -> "
                  << folded.metadata.at("lora_alpha_eff." + target) << ", max|dW| "
                  << max_abs_diff(folded.at(target), base.at(target)) << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------

struct ReplayArgs {
    std::vector<std::size_t> sizes;
    std::size_t stage = 0;
    double ratio = 0.0;
    std::uint64_t seed = 0;
    std::vector<std::string> manifests;
    std::string out;
    std::string plan_out;
    std::string ordering = "shuffle";
};

int cmd_replay_plan(const ReplayArgs& a) {
    std::vector<Manifest> manifests;
    std::vector<std::size_t> sizes = a.sizes;
    if (!a.manifests.empty()) {
        if (!a.sizes.empty()) throw DataError("give either --sizes or --manifests, not both");
        if (a.out.empty()) throw DataError("--manifests requires --out for the augmented manifest");
        if (a.manifests.size() < a.stage + 1)
            throw DataError("stage " + std::to_string(a.stage) + " needs " + std::to_string(a.stage + 1) +
                            " manifests, got " + std::to_string(a.manifests.size()));
        for (std::size_t j = 0; j <= a.stage; ++j) manifests.push_back(read_manifest(a.manifests[j]));
        sizes.clear();
        for (const auto& m : manifests) sizes.push_back(m.size());
    }
    if (sizes.empty()) throw DataError("either --sizes or --manifests is required");
    const auto plan = plan_replay(sizes, a.stage, a.ratio, a.seed);
    std::cout << plan.to_json().dump() << '\n';
    if (!a.plan_out.empty()) {
        std::ofstream out(a.plan_out, std::ios::trunc);
        if (!out) throw DataError("cannot write '" + a.plan_out + "'");
        out << plan.to_json().dump(2) << '\n';
    }
    if (!manifests.empty()) {
        const auto ordering = a.ordering == "concatenate" ? ReplayOrdering::concatenate : ReplayOrdering::shuffle;
        const auto augmented = build_augmented_manifest(manifests, plan, ordering);
        write_manifest(augmented, a.out);
        std::cout << "wrote " << augmented.size() << " examples -> " << a.out << '\n';
        for (const auto& [label, n] : augmented.source_counts) std::cout << "  " << label << ": " << n << '\n';
    }
    return kOk;
}

// ---------------------------------------------------------------------------

struct FormatArgs {
    std::string task;
    std::string in;
    std::string out;
    std::string config;
    std::uint64_t seed = 0;
};

struct FormatContext {
    VocabLayout layout;
    FormatOptions options;
    std::map<Task, std::vector<Tokens>> instructions;
};

FormatContext load_format_context(const std::string& path) {
    FormatContext ctx;
    nlohmann::json j = nlohmann::json::object();
    if (!path.empty()) j = load_json(path, "format config");
    if (!j.is_object()) throw ConfigError("<root>", "format config must be an object");
    ctx.layout = VocabLayout::from_json(j);
    if (j.contains("sqa_separator")) {
        if (!numeric::is_count(j["sqa_separator"])) throw ConfigError("sqa_separator", "must be a token id");
        ctx.options.sqa_separator = j["sqa_separator"].get<TokenId>();
    }
    if (j.contains("instructions")) {
        const auto& ins = j["instructions"];
        if (!ins.is_object()) throw ConfigError("instructions", "must map task names to token-id lists");
        for (const auto& [task, lists] : ins.items()) {
            Task t;
            try {
                t = parse_task(task);
            } catch (const DataError& e) {
                throw ConfigError("instructions." + task, e.what());
            }
            if (!lists.is_array() || lists.empty())
                throw ConfigError("instructions." + task, "must be a non-empty array of token-id lists");
            for (std::size_t i = 0; i < lists.size(); ++i) {
                try {
                    ctx.instructions[t].push_back(tokens_from_json(lists[i], "instructions." + task));
                } catch (const DataError& e) {
                    throw ConfigError("instructions." + task + "[" + std::to_string(i) + "]", e.what());
                }
            }
        }
    }
    // Built-in templates, one token per UTF-8 byte, for tasks without
    // configured instructions.
    for (Task t : {Task::asr, Task::tts}) {
        if (ctx.instructions.count(t) || ctx.layout.text_vocab_size < 256) continue;
        for (auto s : instruction_templates(t)) ctx.instructions[t].push_back(Tokens(s.begin(), s.end()));
    }
    return ctx;
}

Example format_line(Task task, const nlohmann::json& j, const FormatContext& ctx, std::uint64_t seed) {
    if (!j.is_object()) throw DataError("line is not a JSON object");
    if (!j.contains("id") || !j["id"].is_string() || j["id"].get<std::string>().empty())
        throw DataError("missing string field 'id'");
    const auto id = j["id"].get<std::string>();
    auto tokens = [&](const char* key) {
        if (!j.contains(key)) throw DataError(std::string("missing field '") + key + "'");
        return tokens_from_json(j[key], key);
    };
    auto words = [&](const char* key) {
        if (!j.contains(key)) throw DataError(std::string("missing field '") + key + "'");
        return words_from_json(j[key], key);
    };
    auto instruction = [&]() -> Tokens {
        if (j.contains("instruction")) return tokens_from_json(j["instruction"], "instruction");
        auto it = ctx.instructions.find(task);
        if (it == ctx.instructions.end())
            throw DataError("no 'instruction' field and no instruction templates configured for this task");
        rng::Engine eng(rng::derive(seed, std::string_view("instruction"), std::string_view(id)));
        return it->second[rng::uniform_index(eng, it->second.size())];
    };
    switch (task) {
        case Task::asr: return format_asr(instruction(), tokens("speech"), tokens("transcript"), ctx.layout, id);
        case Task::tts: return format_tts(instruction(), words("words"), ctx.layout, id);
        case Task::sqa:
            return format_sqa(tokens("question_speech"), tokens("question_text"), words("words"), ctx.layout, id,
                              ctx.options);
        case Task::text: return format_text(tokens("instruction"), tokens("response"), ctx.layout, id);
    }
    throw Error("unreachable task");
}

int cmd_format(const FormatArgs& a) {
    const Task task = parse_task(a.task);
    const auto ctx = load_format_context(a.config);
    std::ifstream in(a.in);
    if (!in) throw DataError("cannot open input manifest '" + a.in + "'");
    std::ofstream out(a.out, std::ios::trunc);
    if (!out) throw DataError("cannot write '" + a.out + "'");

    std::size_t lines = 0, written = 0, errors = 0;
    std::set<std::string> ids;
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        ++lines;
        try {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw DataError(std::string("invalid JSON: ") + e.what());
            }
            auto ex = format_line(task, j, ctx, a.seed);
            validate_example(ex, ctx.layout);
            if (!ids.insert(ex.id).second) throw DataError("duplicate id '" + ex.id + "'");
            auto o = example_to_json(ex);
            for (const char* key : {"dataset_label", "stage", "payload_ref"})
                if (j.contains(key)) o[key] = j[key];
            out << o.dump() << '\n';
            ++written;
        } catch (const DataError& e) {
            ++errors;
            std::cerr << a.in << ':' << lineno << ": " << e.what() << '\n';
        }
    }
    if (!out) throw DataError("write failed for '" + a.out + "'");
    std::cout << "formatted " << written << " of " << lines << " lines as " << to_string(task) << " -> " << a.out
              << '\n';
    if (errors) {
        std::cout << errors << " line(s) rejected\n";
        return kData;
    }
    return kOk;
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
    std::string config;
    std::optional<std::size_t> seeds;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
};

int cmd_simulate(const SimulateArgs& a) {
    sim::SimulationConfig cfg;
    if (!a.config.empty()) cfg = sim::parse_simulation_config(load_json(a.config, "simulation config"));
    if (a.seeds) {
        if (*a.seeds == 0) throw ConfigError("seeds", "must be positive");
        cfg.seeds = *a.seeds;
    }
    if (a.seed) cfg.seed = *a.seed;
    fs::path dir = a.out_dir;
    if (dir.empty()) {
        const char* env = std::getenv("FORGETKIT_OUTPUT_DIR");
        dir = env && *env ? fs::path(env) : fs::path("forgetkit_out");
    }
    log_info("simulating " + std::to_string(cfg.strategies.size()) + " strategies over " +
             std::to_string(cfg.seeds) + " seed(s)");
    const auto results = sim::simulate(cfg);
    const auto paths = sim::write_simulation_outputs(results, cfg, dir);

    const std::size_t T = results.front().mean.front().size();
    std::cout << std::left << std::setw(16) << "strategy";
    for (std::size_t t = 0; t < T; ++t) std::cout << std::right << std::setw(16) << ("task" + std::to_string(t));
    std::cout << '\n';
    for (const auto& s : results) {
        std::cout << std::left << std::setw(16) << s.strategy << std::right << std::fixed << std::setprecision(1);
        for (std::size_t t = 0; t < T; ++t) {
            std::ostringstream cell;
            cell << std::fixed << std::setprecision(1) << 100.0 * s.mean.back()[t];
            if (s.runs.size() > 1) cell << " +- " << std::setprecision(1) << 100.0 * s.stddev.back()[t];
            std::cout << std::setw(16) << cell.str();
        }
        std::cout << '\n';
    }
    std::cout << "wrote " << paths.size() << " files to " << dir.string() << '\n';
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"forgetkit: catastrophic-forgetting mitigation toolkit"};
    app.require_subcommand(1);
    std::string log_level = "info";
    app.add_option("--log-level", log_level, "Diagnostics on stderr")
        ->check(CLI::IsMember({"error", "info", "debug"}));

    MergeArgs merge_args;
    auto* merge = app.add_subcommand("merge", "Merge checkpoints according to a JSON merge spec");
    merge->add_option("--spec", merge_args.spec, "Merge spec JSON (e.g. presets/ties.json)")->required();
    merge->add_option("--out", merge_args.out, "Output checkpoint")->required();
    merge->add_option("--model", merge_args.models, "Override model paths in spec order (repeatable)");
    merge->add_option("--base", merge_args.base, "Override the base checkpoint path");
    merge->add_option("--exclude", merge_args.exclude, "Tensor copied from the last model instead of merged");
    merge->add_option("--seed", merge_args.seed, "Override the spec seed");

    FoldArgs fold_args;
    auto* fold = app.add_subcommand("fold-lora", "Fold LoRA adapters into base weights");
    fold->add_option("--base", fold_args.base, "Base checkpoint")->required();
    fold->add_option("--adapter", fold_args.adapter, "Adapter checkpoint")->required();
    fold->add_option("--alpha", fold_args.alpha, "Override the scaling factor alpha");
    fold->add_option("--out", fold_args.out, "Output checkpoint")->required();

    ReplayArgs replay_args;
    auto* replay = app.add_subcommand("replay-plan", "Plan (and optionally build) an experience-replay dataset");
    replay->add_option("--sizes", replay_args.sizes, "Dataset sizes |D_0| .. |D_i|");
    replay->add_option("--i", replay_args.stage, "Current stage index (>= 1)")->required();
    replay->add_option("--s", replay_args.ratio, "Sampling ratio s")->required();
    replay->add_option("--seed", replay_args.seed, "Sampling seed");
    replay->add_option("--manifests", replay_args.manifests, "Manifests D_0 .. D_i (JSON Lines)");
    replay->add_option("--out", replay_args.out, "Augmented manifest output");
    replay->add_option("--plan-out", replay_args.plan_out, "Also write the plan JSON to this file");
    replay->add_option("--ordering", replay_args.ordering, "Order of the augmented manifest")
        ->check(CLI::IsMember({"shuffle", "concatenate"}));

    FormatArgs format_args;
    auto* format = app.add_subcommand("format", "Format raw stage records into prompt/response examples");
    format->add_option("--task", format_args.task, "asr, tts, sqa or text")
        ->required()
        ->check(CLI::IsMember({"asr", "tts", "sqa", "text"}));
    format->add_option("--in", format_args.in, "Input JSON Lines")->required();
    format->add_option("--out", format_args.out, "Output JSON Lines")->required();
    format->add_option("--config", format_args.config, "Vocabulary layout / instruction config JSON");
    format->add_option("--seed", format_args.seed, "Seed for instruction template choice");

    SimulateArgs sim_args;
    auto* simulate = app.add_subcommand("simulate", "Run the toy continual-learning comparison");
    simulate->add_option("--config", sim_args.config, "Simulation config JSON");
    simulate->add_option("--seeds", sim_args.seeds, "Number of seeds (overrides config)");
    simulate->add_option("--seed", sim_args.seed, "Base seed (overrides config)");
    simulate->add_option("--out-dir", sim_args.out_dir, "Output directory (default $FORGETKIT_OUTPUT_DIR or ./forgetkit_out)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }
    g_log = log_level == "error" ? LogLevel::error : log_level == "debug" ? LogLevel::debug : LogLevel::info;

    try {
        if (merge->parsed()) return cmd_merge(merge_args);
        if (fold->parsed()) return cmd_fold_lora(fold_args);
        if (replay->parsed()) return cmd_replay_plan(replay_args);
        if (format->parsed()) return cmd_format(format_args);
        if (simulate->parsed()) return cmd_simulate(sim_args);
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << '\n';
        return kInternal;
    }
    return kUsage;
}
