#pragma once

// Checkpoint merging: weighted linear combination, TIES and DARE over task
// vectors taken against a shared base checkpoint.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "forgetkit/core.hpp"
#include "forgetkit/tensor_store.hpp"

namespace forgetkit {

/// Per-tensor deltas of a fine-tuned checkpoint against its base.
struct TaskVector {
    std::map<std::string, std::vector<double>> deltas;
    std::map<std::string, Shape> shapes;
    std::string model_ref;
    std::string base_ref;
};

inline TaskVector task_vector(const Checkpoint& model, const Checkpoint& base, std::string model_ref = "",
                              std::string base_ref = "") {
    auto report = validate_compatible(model, base);
    if (!report.compatible()) throw CompatibilityError(std::move(report), "task_vector");
    TaskVector tv{{}, {}, std::move(model_ref), std::move(base_ref)};
    for (const auto& [name, m] : model.tensors) {
        const auto& b = base.tensors.at(name);
        std::vector<double> d(m.numel());
        for (std::size_t k = 0; k < d.size(); ++k)
            d[k] = static_cast<double>(m[k]) - static_cast<double>(b[k]);
        tv.deltas.emplace(name, std::move(d));
        tv.shapes.emplace(name, m.shape());
    }
    return tv;
}

enum class MergeMethod { linear, ties, dare };

inline const char* to_string(MergeMethod m) {
    switch (m) {
        case MergeMethod::linear: return "linear";
        case MergeMethod::ties: return "ties";
        case MergeMethod::dare: return "dare";
    }
    return "?";
}

inline MergeMethod parse_merge_method(const std::string& s) {
    if (s == "linear") return MergeMethod::linear;
    if (s == "ties") return MergeMethod::ties;
    if (s == "dare") return MergeMethod::dare;
    throw ConfigError("method", "expected one of linear, ties, dare; got '" + s + "'");
}

struct MergeEntry {
    std::string path;
    double weight = 0.0;
    std::optional<double> density;
};

/// A complete merge recipe, as read from a JSON config file.
struct MergeSpec {
    MergeMethod method = MergeMethod::linear;
    std::vector<MergeEntry> entries;
    std::optional<std::string> base;
    std::uint64_t seed = 0;
    /// Tensors that are not merged but copied from the last entry. Their
    /// shapes may differ across inputs (e.g. embeddings grown by vocabulary
    /// expansion).
    std::set<std::string> exclude;

    std::vector<double> weights() const {
        std::vector<double> w;
        for (const auto& e : entries) w.push_back(e.weight);
        return w;
    }

    std::vector<double> densities() const {
        std::vector<double> d;
        for (const auto& e : entries) d.push_back(e.density.value_or(1.0));
        return d;
    }

    void validate() const {
        if (entries.empty()) throw ConfigError("models", "at least one model is required");
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const auto field = "models[" + std::to_string(i) + "]";
            if (!std::isfinite(entries[i].weight)) throw ConfigError(field + ".weight", "must be finite");
            if (method == MergeMethod::linear) {
                if (entries[i].density) throw ConfigError(field + ".density", "not allowed for linear merges");
            } else {
                if (!entries[i].density) throw ConfigError(field + ".density", "required for ties/dare");
                const double d = *entries[i].density;
                if (!(d > 0.0 && d <= 1.0)) throw ConfigError(field + ".density", "must lie in (0, 1]");
                if (base && entries[i].path == *base)
                    throw ConfigError(field + ".path", "base model must not be listed among the models");
            }
        }
        if (method == MergeMethod::linear && base) throw ConfigError("base", "not allowed for linear merges");
        if (method != MergeMethod::linear && !base) throw ConfigError("base", "required for ties/dare");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["method"] = to_string(method);
        if (base) j["base"] = *base;
        j["seed"] = seed;
        j["models"] = nlohmann::json::array();
        for (const auto& e : entries) {
            nlohmann::json m{{"path", e.path}, {"weight", e.weight}};
            if (e.density) m["density"] = *e.density;
            j["models"].push_back(std::move(m));
        }
        if (!exclude.empty()) j["exclude"] = exclude;
        return j;
    }

    static MergeSpec from_json(const nlohmann::json& j) {
        if (!j.is_object()) throw ConfigError("<root>", "merge spec must be a JSON object");
        MergeSpec spec;
        if (!j.contains("method") || !j["method"].is_string()) throw ConfigError("method", "missing or not a string");
        spec.method = parse_merge_method(j["method"].get<std::string>());
        if (j.contains("base") && !j["base"].is_null()) {
            if (!j["base"].is_string()) throw ConfigError("base", "must be a path string");
            spec.base = j["base"].get<std::string>();
        }
        if (j.contains("seed")) {
            if (!numeric::is_count(j["seed"])) throw ConfigError("seed", "must be a non-negative integer");
            spec.seed = j["seed"].get<std::uint64_t>();
        }
        if (!j.contains("models") || !j["models"].is_array()) throw ConfigError("models", "missing or not an array");
        for (std::size_t i = 0; i < j["models"].size(); ++i) {
            const auto& m = j["models"][i];
            const auto field = "models[" + std::to_string(i) + "]";
            if (!m.is_object()) throw ConfigError(field, "must be an object");
            MergeEntry e;
            if (!m.contains("path") || !m["path"].is_string()) throw ConfigError(field + ".path", "missing or not a string");
            e.path = m["path"].get<std::string>();
            if (!m.contains("weight") || !m["weight"].is_number()) throw ConfigError(field + ".weight", "missing or not a number");
            e.weight = m["weight"].get<double>();
            if (m.contains("density") && !m["density"].is_null()) {
                if (!m["density"].is_number()) throw ConfigError(field + ".density", "must be a number");
                e.density = m["density"].get<double>();
            }
            spec.entries.push_back(std::move(e));
        }
        if (j.contains("exclude")) {
            if (!j["exclude"].is_array()) throw ConfigError("exclude", "must be an array of tensor names");
            for (const auto& n : j["exclude"]) {
                if (!n.is_string()) throw ConfigError("exclude", "must be an array of tensor names");
                spec.exclude.insert(n.get<std::string>());
            }
        }
        spec.validate();
        return spec;
    }

    static MergeSpec load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open merge spec '" + path.string() + "'");
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("<root>", std::string("invalid JSON in '") + path.string() + "': " + e.what());
        }
        return from_json(j);
    }
};

/// Shipped configurations for a four-checkpoint history {θ0, θ1, θ2, θ3}:
/// initial model, then after each of three training stages.
namespace presets {

inline MergeSpec linear(const std::vector<std::string>& paths) {
    if (paths.size() != 4) throw DataError("linear preset expects 4 checkpoints");
    MergeSpec s;
    s.method = MergeMethod::linear;
    const double w[] = {0.02, 0.03, 0.05, 0.9};
    for (std::size_t i = 0; i < 4; ++i) s.entries.push_back({paths[i], w[i], std::nullopt});
    return s;
}

inline MergeSpec sparse(MergeMethod method, const std::vector<std::string>& paths, std::uint64_t seed = 0) {
    if (paths.size() != 4) throw DataError("ties/dare presets expect 4 checkpoints");
    MergeSpec s;
    s.method = method;
    s.base = paths[0];
    s.seed = seed;
    const double w[] = {0.04, 0.06, 0.9};
    for (std::size_t i = 0; i < 3; ++i) s.entries.push_back({paths[i + 1], w[i], 0.9});
    return s;
}

inline MergeSpec ties(const std::vector<std::string>& paths, std::uint64_t seed = 0) {
    return sparse(MergeMethod::ties, paths, seed);
}

inline MergeSpec dare(const std::vector<std::string>& paths, std::uint64_t seed = 0) {
    return sparse(MergeMethod::dare, paths, seed);
}

}  // namespace presets

struct MergeOptions {
    std::set<std::string> exclude;
    /// Recorded verbatim under the "merge_spec" metadata key when non-empty.
    std::string spec_json;
};

namespace detail {

inline void check_merge_inputs(std::span<const Checkpoint> models, std::span<const double> weights,
                               const std::set<std::string>& exclude, const Checkpoint& reference,
                               const char* what) {
    if (models.empty()) throw DataError(std::string(what) + ": empty model list");
    if (models.size() != weights.size())
        throw DataError(std::string(what) + ": " + std::to_string(models.size()) + " models but " +
                        std::to_string(weights.size()) + " weights");
    for (double w : weights)
        if (!std::isfinite(w)) throw DataError(std::string(what) + ": weights must be finite");
    for (std::size_t i = 0; i < models.size(); ++i) {
        auto report = validate_compatible(reference, models[i], exclude);
        if (!report.compatible())
            throw CompatibilityError(std::move(report), std::string(what) + ": model " + std::to_string(i));
    }
    for (const auto& name : exclude)
        if (!models.back().contains(name))
            throw DataError(std::string(what) + ": excluded tensor '" + name + "' missing from the last model");
}

inline void check_densities(std::span<const double> densities, std::size_t n, const char* what) {
    if (densities.size() != n)
        throw DataError(std::string(what) + ": " + std::to_string(n) + " models but " +
                        std::to_string(densities.size()) + " densities");
    for (double d : densities)
        if (!(d > 0.0 && d <= 1.0))
            throw DataError(std::string(what) + ": density " + std::to_string(d) + " outside (0, 1]");
}

inline Tensor to_f32(const Shape& shape, const std::vector<double>& values) {
    std::vector<float> out(values.size());
    for (std::size_t k = 0; k < values.size(); ++k) out[k] = static_cast<float>(values[k]);
    return Tensor(shape, std::move(out));
}

inline void finish(Checkpoint& out, std::span<const Checkpoint> models, const MergeOptions& opts,
                   const char* method) {
    for (const auto& name : opts.exclude) out.tensors.insert_or_assign(name, models.back().at(name));
    out.metadata["merge_method"] = method;
    if (!opts.spec_json.empty()) out.metadata["merge_spec"] = opts.spec_json;
}

}  // namespace detail

/// out[n] = Σ_i weights[i] · models[i][n], accumulated in f64.
inline Checkpoint merge_linear(std::span<const Checkpoint> models, std::span<const double> weights,
                               const MergeOptions& opts = {}) {
    if (models.empty()) throw DataError("merge_linear: empty model list");
    detail::check_merge_inputs(models, weights, opts.exclude, models.front(), "merge_linear");
    Checkpoint out;
    for (const auto& [name, first] : models.front().tensors) {
        if (opts.exclude.count(name)) continue;
        std::vector<double> acc(first.numel(), 0.0);
        for (std::size_t i = 0; i < models.size(); ++i) {
            const auto& t = models[i].tensors.at(name);
            for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += weights[i] * static_cast<double>(t[k]);
        }
        out.tensors.emplace(name, detail::to_f32(first.shape(), acc));
    }
    detail::finish(out, models, opts, "linear");
    return out;
}

/// Number of coordinates kept when trimming K values at the given density.
inline std::size_t ties_keep_count(double density, std::size_t K) {
    return std::min(K, numeric::tolerant_ceil(density * static_cast<double>(K)));
}

/// Zeroes all but the ceil(density·K) largest-magnitude entries. Equal
/// magnitudes are ranked by lower flat index first.
inline std::vector<double> ties_trim(std::span<const double> delta, double density) {
    const std::size_t keep = ties_keep_count(density, delta.size());
    std::vector<std::size_t> order(delta.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::abs(delta[a]) > std::abs(delta[b]); });
    std::vector<double> out(delta.size(), 0.0);
    for (std::size_t r = 0; r < keep; ++r) out[order[r]] = delta[order[r]];
    return out;
}

/// Sign election and disjoint mean over already-trimmed deltas.
///
/// Elected sign s = sign(Σ_i w_i·t_i), with zero counted as positive. The
/// merged value is the weighted mean of the nonzero t_i whose sign equals s,
/// scaled by Σ_i w_i. Coordinates without such a contributor are zero.
inline std::vector<double> ties_combine(std::span<const std::vector<double>> trimmed, std::span<const double> weights) {
    const std::size_t K = trimmed.empty() ? 0 : trimmed.front().size();
    double weight_total = 0.0;
    for (double w : weights) weight_total += w;
    std::vector<double> merged(K, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
        double vote = 0.0;
        for (std::size_t i = 0; i < trimmed.size(); ++i) vote += weights[i] * trimmed[i][k];
        const bool positive = vote >= 0.0;
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < trimmed.size(); ++i) {
            const double t = trimmed[i][k];
            if (t == 0.0 || (t > 0.0) != positive) continue;
            num += weights[i] * t;
            den += weights[i];
        }
        merged[k] = den != 0.0 ? num / den * weight_total : 0.0;
    }
    return merged;
}

/// TIES: trim each task vector, elect per-coordinate signs, average the
/// agreeing contributions, add the result to the base. The seed is unused
/// (TIES is deterministic) and accepted for signature parity with DARE.
inline Checkpoint merge_ties(const Checkpoint& base, std::span<const Checkpoint> models,
                             std::span<const double> weights, std::span<const double> densities,
                             std::uint64_t /*seed*/ = 0, const MergeOptions& opts = {}) {
    detail::check_merge_inputs(models, weights, opts.exclude, base, "merge_ties");
    detail::check_densities(densities, models.size(), "merge_ties");
    Checkpoint out;
    for (const auto& [name, b] : base.tensors) {
        if (opts.exclude.count(name)) continue;
        std::vector<std::vector<double>> trimmed;
        trimmed.reserve(models.size());
        std::vector<double> delta(b.numel());
        for (std::size_t i = 0; i < models.size(); ++i) {
            const auto& m = models[i].tensors.at(name);
            for (std::size_t k = 0; k < delta.size(); ++k)
                delta[k] = static_cast<double>(m[k]) - static_cast<double>(b[k]);
            trimmed.push_back(ties_trim(delta, densities[i]));
        }
        auto merged = ties_combine(trimmed, weights);
        for (std::size_t k = 0; k < merged.size(); ++k) merged[k] += static_cast<double>(b[k]);
        out.tensors.emplace(name, detail::to_f32(b.shape(), merged));
    }
    detail::finish(out, models, opts, "ties");
    return out;
}

/// Seed of the DARE drop-mask stream for one (tensor, model) pair.
inline std::uint64_t dare_stream_seed(std::uint64_t seed, const std::string& tensor, std::size_t model_index) {
    return rng::derive(seed, std::string_view(tensor), static_cast<std::uint64_t>(model_index));
}

/// Drops each coordinate with probability 1 - density and rescales the
/// survivors by 1/density. A coordinate survives when its uniform draw is
/// below the density, drawn in flat index order.
inline std::vector<double> dare_drop_rescale(std::span<const double> delta, double density, std::uint64_t stream_seed) {
    rng::Engine eng(stream_seed);
    std::vector<double> out(delta.size(), 0.0);
    for (std::size_t k = 0; k < delta.size(); ++k)
        if (rng::uniform01(eng) < density) out[k] = delta[k] / density;
    return out;
}

/// DARE: random drop-and-rescale of each task vector, then a weighted sum
/// added to the base.
inline Checkpoint merge_dare(const Checkpoint& base, std::span<const Checkpoint> models,
                             std::span<const double> weights, std::span<const double> densities,
                             std::uint64_t seed, const MergeOptions& opts = {}) {
    detail::check_merge_inputs(models, weights, opts.exclude, base, "merge_dare");
    detail::check_densities(densities, models.size(), "merge_dare");
    Checkpoint out;
    for (const auto& [name, b] : base.tensors) {
        if (opts.exclude.count(name)) continue;
        std::vector<double> acc(b.numel(), 0.0);
        std::vector<double> delta(b.numel());
        for (std::size_t i = 0; i < models.size(); ++i) {
            const auto& m = models[i].tensors.at(name);
            for (std::size_t k = 0; k < delta.size(); ++k)
                delta[k] = static_cast<double>(m[k]) - static_cast<double>(b[k]);
            const auto kept = dare_drop_rescale(delta, densities[i], dare_stream_seed(seed, name, i));
            for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += weights[i] * kept[k];
        }
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += static_cast<double>(b[k]);
        out.tensors.emplace(name, detail::to_f32(b.shape(), acc));
    }
    detail::finish(out, models, opts, "dare");
    return out;
}

/// Runs the method named in `spec` over already-loaded checkpoints. `models`
/// aligns with spec.entries; `base` is required for ties/dare.
inline Checkpoint run_merge(const MergeSpec& spec, std::span<const Checkpoint> models,
                            const Checkpoint* base = nullptr) {
    spec.validate();
    MergeOptions opts{spec.exclude, spec.to_json().dump()};
    const auto w = spec.weights();
    switch (spec.method) {
        case MergeMethod::linear: return merge_linear(models, w, opts);
        case MergeMethod::ties:
        case MergeMethod::dare: {
            if (!base) throw DataError("merge: method requires a base checkpoint");
            const auto d = spec.densities();
            return spec.method == MergeMethod::ties ? merge_ties(*base, models, w, d, spec.seed, opts)
                                                    : merge_dare(*base, models, w, d, spec.seed, opts);
        }
    }
    throw Error("unreachable merge method");
}

}  // namespace forgetkit
