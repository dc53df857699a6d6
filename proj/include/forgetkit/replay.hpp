#pragma once

// Experience replay: the stage-i training set is D_i plus round(s·|D_i|)
// examples drawn without replacement from each earlier D_j (j < i),
// including the original-distribution proxy D_0.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "forgetkit/core.hpp"

namespace forgetkit {

/// One manifest line. Fields other than the standard keys are preserved in
/// `extra` so replayed examples keep their original stage formatting.
struct ManifestEntry {
    std::string id;
    std::string dataset_label;
    std::int64_t stage = 0;
    Task task = Task::text;
    std::string payload_ref;
    nlohmann::json extra = nlohmann::json::object();

    nlohmann::json to_json() const {
        nlohmann::json j = extra;
        j["id"] = id;
        j["dataset_label"] = dataset_label;
        j["stage"] = stage;
        j["task"] = to_string(task);
        if (!payload_ref.empty()) j["payload_ref"] = payload_ref;
        return j;
    }

    static ManifestEntry from_json(const nlohmann::json& j) {
        if (!j.is_object()) throw DataError("manifest line is not a JSON object");
        auto str = [&](const char* key) {
            if (!j.contains(key) || !j[key].is_string()) throw DataError(std::string("missing string field '") + key + "'");
            return j[key].get<std::string>();
        };
        ManifestEntry e;
        e.id = str("id");
        if (e.id.empty()) throw DataError("empty id");
        e.dataset_label = str("dataset_label");
        if (!j.contains("stage") || !j["stage"].is_number_integer() || j["stage"].get<std::int64_t>() < 0)
            throw DataError("missing or invalid integer field 'stage'");
        e.stage = j["stage"].get<std::int64_t>();
        e.task = parse_task(str("task"));
        if (j.contains("payload_ref")) {
            if (!j["payload_ref"].is_string()) throw DataError("field 'payload_ref' must be a string");
            e.payload_ref = j["payload_ref"].get<std::string>();
        }
        for (const auto& [k, v] : j.items())
            if (k != "id" && k != "dataset_label" && k != "stage" && k != "task" && k != "payload_ref")
                e.extra[k] = v;
        return e;
    }
};

struct Manifest {
    std::vector<ManifestEntry> entries;
    std::string stage_label;
    std::map<std::string, std::size_t> source_counts;

    std::size_t size() const noexcept { return entries.size(); }

    /// Throws if two entries share an id.
    void check_unique_ids() const {
        std::set<std::string> seen;
        for (const auto& e : entries)
            if (!seen.insert(e.id).second) throw DataError("duplicate id '" + e.id + "' in manifest '" + stage_label + "'");
    }

    void recount_sources() {
        source_counts.clear();
        for (const auto& e : entries) ++source_counts[e.dataset_label];
    }
};

/// Reads a JSON Lines manifest. Blank lines are skipped; errors carry the
/// 1-based line number.
inline Manifest read_manifest(const std::filesystem::path& path, std::string stage_label = "") {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
    Manifest m;
    m.stage_label = stage_label.empty() ? path.stem().string() : std::move(stage_label);
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            m.entries.push_back(ManifestEntry::from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    m.check_unique_ids();
    m.recount_sources();
    return m;
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write manifest '" + path.string() + "'");
    for (const auto& e : m.entries) out << e.to_json().dump() << '\n';
    if (!out) throw DataError("write failed for '" + path.string() + "'");
}

/// Sample counts for building the stage-i augmented dataset.
struct ReplayPlan {
    std::size_t stage_index = 0;
    double ratio = 0.0;
    /// per_source[j] for j = 0..i-1.
    std::vector<std::size_t> per_source;
    std::uint64_t seed = 0;

    std::size_t total_replayed() const {
        return std::accumulate(per_source.begin(), per_source.end(), std::size_t{0});
    }

    nlohmann::json to_json() const {
        return {{"i", stage_index}, {"s", ratio}, {"seed", seed}, {"per_source", per_source}};
    }

    bool operator==(const ReplayPlan&) const = default;
};

/// Plans replay for stage `i` given |D_0|..|D_i| (extra trailing sizes are
/// ignored). Each prior source contributes round_half_up(s·|D_i|) samples,
/// capped at its own size.
inline ReplayPlan plan_replay(std::span<const std::size_t> stage_sizes, std::size_t i, double s, std::uint64_t seed) {
    if (i < 1 || i >= stage_sizes.size())
        throw DataError("replay stage index " + std::to_string(i) + " out of range for " +
                        std::to_string(stage_sizes.size()) + " datasets (need 1 <= i < count)");
    if (!(s >= 0.0 && s <= 1.0)) throw DataError("sampling ratio must lie in [0, 1]");
    for (std::size_t j = 0; j <= i; ++j)
        if (stage_sizes[j] == 0) throw DataError("dataset " + std::to_string(j) + " is empty");
    ReplayPlan plan{i, s, {}, seed};
    const std::size_t requested = numeric::round_half_up(s * static_cast<double>(stage_sizes[i]));
    for (std::size_t j = 0; j < i; ++j) plan.per_source.push_back(std::min(requested, stage_sizes[j]));
    return plan;
}

/// Draws `count` distinct indices uniformly from [0, n) (partial Fisher-Yates).
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count, std::uint64_t seed) {
    if (count > n) throw DataError("cannot sample " + std::to_string(count) + " of " + std::to_string(n));
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng::Engine eng(seed);
    for (std::size_t k = 0; k < count; ++k) {
        const auto r = k + static_cast<std::size_t>(rng::uniform_index(eng, n - k));
        std::swap(idx[k], idx[r]);
    }
    idx.resize(count);
    return idx;
}

enum class ReplayOrdering {
    shuffle,      ///< seeded shuffle of the union (mixed-task batches)
    concatenate,  ///< D_i first, then replayed samples by source
};

inline std::uint64_t replay_source_seed(std::uint64_t seed, std::size_t source) {
    return rng::derive(seed, std::string_view("replay-source"), static_cast<std::uint64_t>(source));
}

inline std::uint64_t replay_shuffle_seed(std::uint64_t seed) {
    return rng::derive(seed, std::string_view("replay-shuffle"));
}

/// Builds D_i' from manifests D_0..D_i following `plan`.
inline Manifest build_augmented_manifest(std::span<const Manifest> manifests, const ReplayPlan& plan,
                                         ReplayOrdering ordering = ReplayOrdering::shuffle) {
    if (manifests.size() != plan.stage_index + 1)
        throw DataError("replay plan is for stage " + std::to_string(plan.stage_index) + " but " +
                        std::to_string(manifests.size()) + " manifests were given");
    std::vector<std::size_t> sizes;
    for (const auto& m : manifests) sizes.push_back(m.size());
    const auto expected = plan_replay(sizes, plan.stage_index, plan.ratio, plan.seed);
    if (expected.per_source != plan.per_source)
        throw DataError("replay plan counts do not match the manifest sizes");

    const auto& current = manifests[plan.stage_index];
    Manifest out;
    out.stage_label = current.stage_label;
    out.entries = current.entries;
    out.source_counts[current.stage_label] += current.size();
    for (std::size_t j = 0; j < plan.stage_index; ++j) {
        const auto picks = sample_without_replacement(manifests[j].size(), plan.per_source[j],
                                                      replay_source_seed(plan.seed, j));
        for (auto k : picks) out.entries.push_back(manifests[j].entries[k]);
        out.source_counts[manifests[j].stage_label] += picks.size();
    }
    if (ordering == ReplayOrdering::shuffle) {
        rng::Engine eng(replay_shuffle_seed(plan.seed));
        rng::shuffle(out.entries, eng);
    }
    out.check_unique_ids();
    return out;
}

}  // namespace forgetkit
