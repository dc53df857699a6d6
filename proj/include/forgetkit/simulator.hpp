#pragma once

// Desk-scale continual-learning harness. A toy classifier is trained on a
// sequence of synthetic stages; each stage rotates the inputs and permutes
// the labels of a shared class structure, which is enough to produce
// measurable forgetting of stage 0 (the "original ability"). Replay, merge
// and scaling mitigations are plugged in through the replay, merge and lora
// modules.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "forgetkit/adamw.hpp"
#include "forgetkit/core.hpp"
#include "forgetkit/lora.hpp"
#include "forgetkit/merge.hpp"
#include "forgetkit/replay.hpp"
#include "forgetkit/toy_model.hpp"

namespace forgetkit::sim {

struct StageTask {
    std::string label;
    std::size_t stage = 0;
    std::vector<Sample> train;
    std::vector<Sample> test;
    /// Maps the shared class id to this stage's label.
    std::vector<std::size_t> label_permutation;
};

/// Stage tasks 0..num_stages-1. Stage 0 uses the identity rotation and
/// permutation; later stages draw a random orthogonal rotation and a label
/// permutation distinct from every earlier stage's.
struct TaskGenConfig {
    std::size_t num_stages = 4;
    ToyDims dims{};
    std::size_t train_per_stage = 2000;
    std::size_t test_per_stage = 1000;
    /// Per-coordinate noise around the class prototypes.
    double noise = 1.0;
};

namespace detail {

/// Random orthogonal matrix (row-major) from Gram-Schmidt on Gaussian rows.
inline std::vector<double> random_rotation(std::size_t d, rng::Engine& eng) {
    std::vector<double> q(d * d);
    for (std::size_t r = 0; r < d; ++r) {
        double* row = q.data() + r * d;
        for (;;) {
            for (std::size_t c = 0; c < d; ++c) row[c] = rng::normal(eng);
            for (std::size_t p = 0; p < r; ++p) {
                const double* prev = q.data() + p * d;
                double dot = 0.0;
                for (std::size_t c = 0; c < d; ++c) dot += row[c] * prev[c];
                for (std::size_t c = 0; c < d; ++c) row[c] -= dot * prev[c];
            }
            double norm = 0.0;
            for (std::size_t c = 0; c < d; ++c) norm += row[c] * row[c];
            norm = std::sqrt(norm);
            if (norm > 1e-8) {
                for (std::size_t c = 0; c < d; ++c) row[c] /= norm;
                break;
            }
        }
    }
    return q;
}

inline std::vector<Sample> draw_split(std::size_t n, const std::vector<std::vector<double>>& prototypes,
                                      const std::vector<double>* rotation, const std::vector<std::size_t>& perm,
                                      double noise, rng::Engine& eng) {
    const std::size_t C = prototypes.size(), D = prototypes.front().size();
    // Exactly balanced up to n mod C, then shuffled.
    std::vector<std::size_t> classes(n);
    for (std::size_t k = 0; k < n; ++k) classes[k] = k % C;
    rng::shuffle(classes, eng);
    const double norm = 1.0 / std::sqrt(1.0 + noise * noise);
    std::vector<Sample> out(n);
    std::vector<double> raw(D);
    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t i = 0; i < D; ++i) raw[i] = (prototypes[classes[k]][i] + noise * rng::normal(eng)) * norm;
        auto& x = out[k].x;
        if (rotation) {
            x.assign(D, 0.0);
            for (std::size_t r = 0; r < D; ++r)
                for (std::size_t c = 0; c < D; ++c) x[r] += (*rotation)[r * D + c] * raw[c];
        } else {
            x = raw;
        }
        out[k].label = perm[classes[k]];
    }
    return out;
}

}  // namespace detail

inline std::vector<StageTask> make_stage_tasks(const TaskGenConfig& cfg, std::uint64_t seed) {
    if (cfg.num_stages < 2) throw DataError("make_stage_tasks: need at least 2 stages");
    cfg.dims.validate();
    if (cfg.train_per_stage == 0 || cfg.test_per_stage == 0) throw DataError("make_stage_tasks: empty splits");
    if (!(cfg.noise >= 0.0) || !std::isfinite(cfg.noise)) throw DataError("make_stage_tasks: noise must be finite and >= 0");
    const std::size_t D = cfg.dims.input, C = cfg.dims.classes;

    rng::Engine proto_eng(rng::derive(seed, std::string_view("prototypes")));
    std::vector<std::vector<double>> prototypes(C, std::vector<double>(D));
    for (auto& p : prototypes)
        for (auto& v : p) v = rng::normal(proto_eng);

    std::vector<StageTask> tasks;
    std::vector<std::vector<std::size_t>> seen_perms;
    for (std::size_t s = 0; s < cfg.num_stages; ++s) {
        rng::Engine eng(rng::derive(seed, std::string_view("stage"), static_cast<std::uint64_t>(s)));
        StageTask t;
        t.stage = s;
        t.label = "stage" + std::to_string(s);
        t.label_permutation.resize(C);
        std::iota(t.label_permutation.begin(), t.label_permutation.end(), std::size_t{0});
        std::optional<std::vector<double>> rotation;
        if (s > 0) {
            rotation = detail::random_rotation(D, eng);
            do {
                rng::shuffle(t.label_permutation, eng);
            } while (std::find(seen_perms.begin(), seen_perms.end(), t.label_permutation) != seen_perms.end());
        }
        seen_perms.push_back(t.label_permutation);
        const auto* rot = rotation ? &*rotation : nullptr;
        t.train = detail::draw_split(cfg.train_per_stage, prototypes, rot, t.label_permutation, cfg.noise, eng);
        t.test = detail::draw_split(cfg.test_per_stage, prototypes, rot, t.label_permutation, cfg.noise, eng);
        tasks.push_back(std::move(t));
    }
    return tasks;
}

struct TrainConfig {
    double learning_rate = 1e-3;
    double warmup_ratio = 0.1;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    AdamWParams adamw{};
    LrDecay decay = LrDecay::linear;

    void validate() const {
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train.learning_rate", "must be positive");
        if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) throw ConfigError("train.warmup_ratio", "must lie in [0, 1]");
        if (batch_size == 0) throw ConfigError("train.batch_size", "must be positive");
    }
};

/// Raised when training produces a non-finite loss.
class DivergenceError : public Error {
public:
    DivergenceError(std::size_t step, double loss)
        : Error("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")"),
          step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

struct TrainStats {
    std::vector<double> epoch_loss;
    std::size_t steps = 0;
};

/// Trains on `data` with AdamW and a warmup schedule. The data order is
/// reshuffled each epoch from a stream derived from (cfg.seed, stream).
inline TrainStats train_stage(ToyModel& model, const std::vector<const Sample*>& data, const TrainConfig& cfg,
                              std::uint64_t stream = 0) {
    cfg.validate();
    TrainStats stats;
    if (cfg.epochs == 0 || data.empty()) return stats;
    for (const auto* s : data)
        if (s->x.size() != model.dims().input || s->label >= model.dims().classes)
            throw DataError("train_stage: sample dimensions do not match the model");

    const std::size_t per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
    const auto schedule = WarmupSchedule::make(cfg.learning_rate, cfg.warmup_ratio, per_epoch * cfg.epochs, cfg.decay);
    AdamW opt(model.params().size(), cfg.adamw);
    rng::Engine eng(rng::derive(cfg.seed, std::string_view("train-order"), stream));
    std::vector<const Sample*> order = data;
    std::vector<double> grad;
    std::size_t step = 0;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        rng::shuffle(order, eng);
        double total = 0.0;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - b);
            std::span<const Sample* const> batch(order.data() + b, n);
            const double loss = model.loss_and_grad(batch, &grad);
            ++step;
            if (!std::isfinite(loss)) throw DivergenceError(step, loss);
            opt.step(model.params(), grad, schedule.at(step));
            total += loss * static_cast<double>(n);
        }
        stats.epoch_loss.push_back(total / static_cast<double>(order.size()));
    }
    stats.steps = step;
    if (!numeric::all_finite(model.params())) throw DivergenceError(step, NAN);
    return stats;
}

/// Fraction of test samples whose argmax prediction matches the label.
inline double evaluate(const ToyModel& model, const std::vector<Sample>& test) {
    if (test.empty()) throw DataError("evaluate: empty test split");
    std::size_t correct = 0;
    for (const auto& s : test) correct += model.predict(s.x) == s.label;
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

inline double evaluate(const ToyModel& model, const StageTask& task) { return evaluate(model, task.test); }

/// Post-training merge of the stage snapshots θ0..θN.
struct MergeMitigation {
    MergeMethod method = MergeMethod::linear;
    /// linear: one weight per snapshot θ0..θN; ties/dare: one per θ1..θN.
    std::vector<double> weights;
    /// ties/dare only, one per θ1..θN.
    std::vector<double> densities;
    std::uint64_t seed = 0;
};

/// Attenuates the adaptation delta θN − θ0 by alpha_new/alpha_base.
struct ScaleMitigation {
    double alpha_base = 16.0;
    double alpha_new = 15.0;
};

struct MitigationConfig {
    std::string name = "none";
    std::optional<double> replay_ratio;
    std::optional<MergeMitigation> merge;
    std::optional<ScaleMitigation> scale;

    void validate() const {
        if (name.empty()) throw ConfigError("strategies[].name", "must not be empty");
        if (replay_ratio && !(*replay_ratio >= 0.0 && *replay_ratio <= 1.0))
            throw ConfigError("strategies[" + name + "].replay_ratio", "must lie in [0, 1]");
        if (merge && scale) throw ConfigError("strategies[" + name + "]", "merge and scale cannot be combined");
        if (scale && (!(scale->alpha_base > 0.0) || !(scale->alpha_new >= 0.0)))
            throw ConfigError("strategies[" + name + "].alpha", "alpha_base must be > 0 and alpha_new >= 0");
    }
};

/// Default toy-scale replay ratio; 0.005 of a 2,000-example stage would replay
/// only 10 examples per source.
inline constexpr double kToyReplayRatio = 0.05;

inline MergeMitigation default_merge(MergeMethod method) {
    MergeMitigation m;
    m.method = method;
    if (method == MergeMethod::linear) {
        m.weights = {0.02, 0.03, 0.05, 0.9};
    } else {
        m.weights = {0.04, 0.06, 0.9};
        m.densities = {0.9, 0.9, 0.9};
    }
    return m;
}

/// The eight comparison rows: none, replay, merge-{linear,ties,dare}, scale,
/// replay+merge (linear) and replay+scale (α 16 → 15).
inline std::vector<MitigationConfig> default_strategies(double replay_ratio = kToyReplayRatio) {
    std::vector<MitigationConfig> s;
    s.push_back({"none", std::nullopt, std::nullopt, std::nullopt});
    s.push_back({"replay", replay_ratio, std::nullopt, std::nullopt});
    s.push_back({"merge-linear", std::nullopt, default_merge(MergeMethod::linear), std::nullopt});
    s.push_back({"merge-ties", std::nullopt, default_merge(MergeMethod::ties), std::nullopt});
    s.push_back({"merge-dare", std::nullopt, default_merge(MergeMethod::dare), std::nullopt});
    s.push_back({"scale", std::nullopt, std::nullopt, ScaleMitigation{}});
    s.push_back({"replay+merge", replay_ratio, default_merge(MergeMethod::linear), std::nullopt});
    s.push_back({"replay+scale", replay_ratio, std::nullopt, ScaleMitigation{}});
    return s;
}

/// Training run through all stages for one replay setting, before any
/// post-hoc mitigation.
struct Trajectory {
    std::vector<ToyModel> snapshots;            ///< θ0..θN
    std::vector<std::vector<double>> accuracy;  ///< [after_stage][task]
    /// Per stage i >= 1: the replay plan used (empty counts without replay)
    /// and the source counts of the stage's training manifest.
    std::vector<ReplayPlan> plans;
    std::vector<std::map<std::string, std::size_t>> training_sources;
};

struct ForgettingReport {
    std::string strategy;
    std::uint64_t seed = 0;
    /// acc[after_stage][task]; row 0 is the initial model (after stage 0).
    /// The last row reflects the post-hoc mitigation, if any.
    std::vector<std::vector<double>> accuracy;
    /// Last-row accuracies before the post-hoc mitigation was applied.
    std::vector<double> unmitigated_final;
    std::vector<std::map<std::string, std::size_t>> training_sources;
    double learning_rate = 0.0;

    double final_accuracy(std::size_t task) const { return accuracy.back().at(task); }
};

inline Manifest task_manifest(const StageTask& t) {
    static constexpr Task kinds[] = {Task::text, Task::asr, Task::tts, Task::sqa};
    Manifest m;
    m.stage_label = t.label;
    m.entries.reserve(t.train.size());
    for (std::size_t k = 0; k < t.train.size(); ++k) {
        ManifestEntry e;
        e.id = t.label + "-" + std::to_string(k);
        e.dataset_label = t.label;
        e.stage = static_cast<std::int64_t>(t.stage);
        e.task = kinds[std::min<std::size_t>(t.stage, 3)];
        e.payload_ref = std::to_string(t.stage) + ":" + std::to_string(k);
        m.entries.push_back(std::move(e));
    }
    m.recount_sources();
    return m;
}

inline const Sample* resolve_payload(const std::vector<StageTask>& tasks, const std::string& ref) {
    const auto colon = ref.find(':');
    if (colon == std::string::npos) throw DataError("bad payload ref '" + ref + "'");
    const auto stage = std::stoull(ref.substr(0, colon));
    const auto index = std::stoull(ref.substr(colon + 1));
    if (stage >= tasks.size() || index >= tasks[stage].train.size()) throw DataError("dangling payload ref '" + ref + "'");
    return &tasks[stage].train[index];
}

inline std::vector<double> evaluate_all(const ToyModel& model, const std::vector<StageTask>& tasks) {
    std::vector<double> row;
    for (const auto& t : tasks) row.push_back(evaluate(model, t));
    return row;
}

inline std::uint64_t replay_plan_seed(std::uint64_t seed, std::size_t stage) {
    return rng::derive(seed, std::string_view("replay"), static_cast<std::uint64_t>(stage));
}

/// Trains stage 0 from a fresh initialization, then stages 1..N in order.
/// With a replay ratio, stage i trains on the augmented manifest D_i' built
/// by the replay module; otherwise on D_i alone.
inline Trajectory train_trajectory(const std::vector<StageTask>& tasks, ToyDims dims, const TrainConfig& cfg,
                                   std::optional<double> replay_ratio) {
    if (tasks.size() < 2) throw DataError("run_pipeline: need stage 0 plus at least one training stage");
    cfg.validate();
    dims.validate();
    std::vector<Manifest> manifests;
    for (const auto& t : tasks) manifests.push_back(task_manifest(t));
    std::vector<std::size_t> sizes;
    for (const auto& m : manifests) sizes.push_back(m.size());

    Trajectory traj;
    ToyModel model = ToyModel::init(dims, rng::derive(cfg.seed, std::string_view("init")));
    {
        std::vector<const Sample*> data;
        for (const auto& s : tasks[0].train) data.push_back(&s);
        train_stage(model, data, cfg, 0);
    }
    traj.snapshots.push_back(model);
    traj.accuracy.push_back(evaluate_all(model, tasks));

    for (std::size_t i = 1; i < tasks.size(); ++i) {
        const auto plan = plan_replay(sizes, i, replay_ratio.value_or(0.0), replay_plan_seed(cfg.seed, i));
        const auto augmented =
            build_augmented_manifest(std::span<const Manifest>(manifests.data(), i + 1), plan, ReplayOrdering::shuffle);
        std::vector<const Sample*> data;
        data.reserve(augmented.size());
        for (const auto& e : augmented.entries) data.push_back(resolve_payload(tasks, e.payload_ref));
        train_stage(model, data, cfg, i);
        traj.plans.push_back(plan);
        traj.training_sources.push_back(augmented.source_counts);
        traj.snapshots.push_back(model);
        traj.accuracy.push_back(evaluate_all(model, tasks));
    }
    return traj;
}

/// θ0 + (alpha_new/alpha_base)·(θN − θ0), computed by folding each tensor's
/// delta as a full-rank adapter (A = I, B = delta·r/alpha_base) with the
/// discounted alpha. Vectors are folded as [n, 1] matrices.
inline Checkpoint discount_delta(const Checkpoint& before, const Checkpoint& after, const ScaleMitigation& scale) {
    auto report = validate_compatible(before, after);
    if (!report.compatible()) throw CompatibilityError(std::move(report), "discount_delta");
    Checkpoint out;
    for (const auto& [name, w0] : before.tensors) {
        const auto& w1 = after.at(name);
        const std::size_t rows = w0.shape().empty() ? 1 : w0.shape()[0];
        const std::size_t cols = w0.numel() / std::max<std::size_t>(rows, 1);
        Checkpoint base;
        base.tensors.emplace(name, Tensor({rows, cols}, std::vector<float>(w0.data().begin(), w0.data().end())));
        LoraAdapter ad;
        ad.rank = cols;
        ad.alpha = scale.alpha_base;
        ad.target = name;
        std::vector<float> eye(cols * cols, 0.0f);
        for (std::size_t k = 0; k < cols; ++k) eye[k * cols + k] = 1.0f;
        ad.a = Tensor({cols, cols}, std::move(eye));
        std::vector<float> b(rows * cols);
        const double pre = static_cast<double>(cols) / scale.alpha_base;
        for (std::size_t k = 0; k < b.size(); ++k)
            b[k] = static_cast<float>((static_cast<double>(w1[k]) - static_cast<double>(w0[k])) * pre);
        ad.b = Tensor({rows, cols}, std::move(b));
        const auto folded = fold_lora(base, AdapterSet{{name, ad}}, scale.alpha_new);
        const auto& t = folded.at(name);
        out.tensors.emplace(name, Tensor(w0.shape(), std::vector<float>(t.data().begin(), t.data().end())));
    }
    return out;
}

/// Applies the post-hoc part of a mitigation (merge or scale) to the final
/// row of a trajectory.
inline ForgettingReport finish_report(const Trajectory& traj, const std::vector<StageTask>& tasks,
                                      const MitigationConfig& mitigation, const TrainConfig& cfg) {
    ForgettingReport rep;
    rep.strategy = mitigation.name;
    rep.seed = cfg.seed;
    rep.accuracy = traj.accuracy;
    rep.unmitigated_final = traj.accuracy.back();
    rep.training_sources = traj.training_sources;
    rep.learning_rate = cfg.learning_rate;
    const ToyDims dims = traj.snapshots.front().dims();

    if (mitigation.merge) {
        const auto& mm = *mitigation.merge;
        std::vector<Checkpoint> ckpts;
        for (const auto& s : traj.snapshots) ckpts.push_back(s.to_checkpoint());
        const std::size_t n = ckpts.size();
        Checkpoint merged;
        if (mm.method == MergeMethod::linear) {
            if (mm.weights.size() != n)
                throw ConfigError("strategies[" + mitigation.name + "].merge.weights",
                                  "linear merge needs " + std::to_string(n) + " weights (one per snapshot)");
            merged = merge_linear(ckpts, mm.weights);
        } else {
            if (mm.weights.size() != n - 1 || mm.densities.size() != n - 1)
                throw ConfigError("strategies[" + mitigation.name + "].merge",
                                  "ties/dare need " + std::to_string(n - 1) + " weights and densities");
            std::span<const Checkpoint> tuned(ckpts.data() + 1, n - 1);
            const auto seed = rng::derive(cfg.seed, std::string_view("merge"), mm.seed);
            merged = mm.method == MergeMethod::ties ? merge_ties(ckpts.front(), tuned, mm.weights, mm.densities, seed)
                                                    : merge_dare(ckpts.front(), tuned, mm.weights, mm.densities, seed);
        }
        rep.accuracy.back() = evaluate_all(ToyModel::from_checkpoint(merged, dims), tasks);
    } else if (mitigation.scale) {
        const auto scaled = discount_delta(traj.snapshots.front().to_checkpoint(),
                                           traj.snapshots.back().to_checkpoint(), *mitigation.scale);
        rep.accuracy.back() = evaluate_all(ToyModel::from_checkpoint(scaled, dims), tasks);
    }
    return rep;
}

inline ForgettingReport run_pipeline(const std::vector<StageTask>& tasks, ToyDims dims, const TrainConfig& cfg,
                                     const MitigationConfig& mitigation) {
    mitigation.validate();
    return finish_report(train_trajectory(tasks, dims, cfg, mitigation.replay_ratio), tasks, mitigation, cfg);
}

/// One report per strategy over shared tasks and seeds. Strategies with the
/// same replay setting share one training trajectory, which is identical to
/// what separate runs would produce.
inline std::vector<ForgettingReport> compare_strategies(const std::vector<StageTask>& tasks, ToyDims dims,
                                                        const TrainConfig& cfg,
                                                        const std::vector<MitigationConfig>& strategies) {
    if (strategies.empty()) throw DataError("compare_strategies: empty strategy list");
    for (const auto& s : strategies) s.validate();
    std::map<std::optional<double>, Trajectory> cache;
    std::vector<ForgettingReport> out;
    for (const auto& s : strategies) {
        auto it = cache.find(s.replay_ratio);
        if (it == cache.end()) it = cache.emplace(s.replay_ratio, train_trajectory(tasks, dims, cfg, s.replay_ratio)).first;
        out.push_back(finish_report(it->second, tasks, s, cfg));
    }
    return out;
}

/// Everything `simulate` needs; parsed from the JSON config file.
struct SimulationConfig {
    TaskGenConfig tasks{};
    TrainConfig train{};
    std::uint64_t seed = 0;
    std::size_t seeds = 1;
    std::vector<MitigationConfig> strategies = default_strategies();
};

struct StrategySummary {
    std::string strategy;
    std::vector<ForgettingReport> runs;             ///< one per seed
    std::vector<std::vector<double>> mean, stddev;  ///< [after_stage][task]
};

inline std::uint64_t run_seed(std::uint64_t base, std::size_t k) { return base + k; }

/// Checks strategy parameters that depend on the number of stages, before
/// any training starts.
inline void check_strategies(const std::vector<MitigationConfig>& strategies, std::size_t num_stages) {
    for (std::size_t i = 0; i < strategies.size(); ++i) {
        const auto& s = strategies[i];
        s.validate();
        if (s.name.find_first_not_of("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789+-_.") !=
            std::string::npos)
            throw ConfigError("strategies[" + std::to_string(i) + "].name",
                              "may only use letters, digits and + - _ . (it names an output file)");
        if (!s.merge) continue;
        const auto field = "strategies[" + std::to_string(i) + "].merge.";
        if (s.merge->method == MergeMethod::linear) {
            if (s.merge->weights.size() != num_stages)
                throw ConfigError(field + "weights", "linear merge needs " + std::to_string(num_stages) +
                                                         " weights (one per snapshot)");
        } else {
            if (s.merge->weights.size() != num_stages - 1)
                throw ConfigError(field + "weights", std::to_string(num_stages - 1) + " weights required");
            if (s.merge->densities.size() != num_stages - 1)
                throw ConfigError(field + "densities", std::to_string(num_stages - 1) + " densities required");
        }
    }
}

inline std::vector<StrategySummary> simulate(const SimulationConfig& cfg) {
    if (cfg.seeds == 0) throw ConfigError("seeds", "must be positive");
    if (cfg.strategies.empty()) throw ConfigError("strategies", "must not be empty");
    check_strategies(cfg.strategies, cfg.tasks.num_stages);
    std::vector<StrategySummary> out(cfg.strategies.size());
    for (std::size_t s = 0; s < cfg.strategies.size(); ++s) out[s].strategy = cfg.strategies[s].name;
    for (std::size_t k = 0; k < cfg.seeds; ++k) {
        const auto seed = run_seed(cfg.seed, k);
        const auto tasks = make_stage_tasks(cfg.tasks, rng::derive(seed, std::string_view("tasks")));
        TrainConfig train = cfg.train;
        train.seed = seed;
        auto reports = compare_strategies(tasks, cfg.tasks.dims, train, cfg.strategies);
        for (std::size_t s = 0; s < reports.size(); ++s) out[s].runs.push_back(std::move(reports[s]));
    }
    for (auto& sum : out) {
        const auto& first = sum.runs.front().accuracy;
        sum.mean.assign(first.size(), std::vector<double>(first.front().size(), 0.0));
        sum.stddev = sum.mean;
        const double n = static_cast<double>(sum.runs.size());
        for (const auto& r : sum.runs)
            for (std::size_t i = 0; i < first.size(); ++i)
                for (std::size_t t = 0; t < first[i].size(); ++t) sum.mean[i][t] += r.accuracy[i][t] / n;
        if (sum.runs.size() > 1)
            for (std::size_t i = 0; i < first.size(); ++i)
                for (std::size_t t = 0; t < first[i].size(); ++t) {
                    double ss = 0.0;
                    for (const auto& r : sum.runs) ss += std::pow(r.accuracy[i][t] - sum.mean[i][t], 2);
                    sum.stddev[i][t] = std::sqrt(ss / (n - 1.0));
                }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Config parsing

namespace detail {

inline const nlohmann::json* field(const nlohmann::json& j, const char* key) {
    return j.contains(key) ? &j[key] : nullptr;
}

inline double get_number(const nlohmann::json& j, const char* key, const std::string& path, double fallback) {
    const auto* v = field(j, key);
    if (!v) return fallback;
    if (!v->is_number()) throw ConfigError(path + key, "must be a number");
    return v->get<double>();
}

inline std::size_t get_count(const nlohmann::json& j, const char* key, const std::string& path, std::size_t fallback) {
    const auto* v = field(j, key);
    if (!v) return fallback;
    if (!numeric::is_count(*v)) throw ConfigError(path + key, "must be a non-negative integer");
    return v->get<std::size_t>();
}

inline std::vector<double> get_numbers(const nlohmann::json& j, const char* key, const std::string& path,
                                       std::vector<double> fallback) {
    const auto* v = field(j, key);
    if (!v) return fallback;
    if (!v->is_array()) throw ConfigError(path + key, "must be an array of numbers");
    std::vector<double> out;
    for (const auto& x : *v) {
        if (!x.is_number()) throw ConfigError(path + key, "must be an array of numbers");
        out.push_back(x.get<double>());
    }
    return out;
}

inline MitigationConfig parse_strategy(const nlohmann::json& j, std::size_t index, double default_ratio) {
    const std::string path = "strategies[" + std::to_string(index) + "].";
    if (!j.is_object()) throw ConfigError("strategies[" + std::to_string(index) + "]", "must be an object");
    if (!j.contains("kind") || !j["kind"].is_string()) throw ConfigError(path + "kind", "missing or not a string");
    const auto kind = j["kind"].get<std::string>();
    MitigationConfig m;
    m.name = kind;
    if (const auto* n = field(j, "name")) {
        if (!n->is_string()) throw ConfigError(path + "name", "must be a string");
        m.name = n->get<std::string>();
    }
    const bool replay = kind == "replay" || kind.rfind("replay+", 0) == 0;
    const std::string post = replay ? (kind == "replay" ? "" : kind.substr(7)) : (kind == "none" ? "" : kind);
    if (replay) m.replay_ratio = get_number(j, "replay_ratio", path, default_ratio);
    if (post == "merge") {
        MergeMethod method = MergeMethod::linear;
        const nlohmann::json empty = nlohmann::json::object();
        const auto& mj = j.contains("merge") ? j["merge"] : empty;
        if (!mj.is_object()) throw ConfigError(path + "merge", "must be an object");
        if (const auto* v = field(mj, "method")) {
            if (!v->is_string()) throw ConfigError(path + "merge.method", "must be a string");
            try {
                method = parse_merge_method(v->get<std::string>());
            } catch (const ConfigError& e) {
                throw ConfigError(path + "merge.method", e.what());
            }
        }
        auto mm = default_merge(method);
        mm.weights = get_numbers(mj, "weights", path + "merge.", mm.weights);
        mm.densities = get_numbers(mj, "densities", path + "merge.", mm.densities);
        mm.seed = get_count(mj, "seed", path + "merge.", 0);
        if (method == MergeMethod::linear && !mm.densities.empty())
            throw ConfigError(path + "merge.densities", "not allowed for linear merges");
        for (double d : mm.densities)
            if (!(d > 0.0 && d <= 1.0)) throw ConfigError(path + "merge.densities", "must lie in (0, 1]");
        m.merge = mm;
    } else if (post == "scale") {
        ScaleMitigation sc;
        sc.alpha_base = get_number(j, "alpha_base", path, sc.alpha_base);
        sc.alpha_new = get_number(j, "alpha_new", path, sc.alpha_new);
        m.scale = sc;
    } else if (!post.empty()) {
        throw ConfigError(path + "kind", "unknown strategy kind '" + kind +
                                             "' (expected none, replay, merge, scale, replay+merge, replay+scale)");
    }
    m.validate();
    return m;
}

}  // namespace detail

/// Parses a simulation config. Every key is optional; see README for the
/// schema. Unknown top-level keys are rejected so typos surface.
inline SimulationConfig parse_simulation_config(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
    static const std::set<std::string> known = {"seed", "seeds", "num_stages", "dims", "train_per_stage",
                                                "test_per_stage", "noise", "train", "replay_ratio", "strategies"};
    for (const auto& [k, _] : j.items())
        if (!known.count(k)) throw ConfigError(k, "unknown key");
    using detail::get_count;
    using detail::get_number;
    SimulationConfig c;
    c.seed = get_count(j, "seed", "", 0);
    c.seeds = get_count(j, "seeds", "", 1);
    if (c.seeds == 0) throw ConfigError("seeds", "must be positive");
    c.tasks.num_stages = get_count(j, "num_stages", "", c.tasks.num_stages);
    if (c.tasks.num_stages < 2) throw ConfigError("num_stages", "must be at least 2");
    if (const auto* d = detail::field(j, "dims")) {
        if (!d->is_object()) throw ConfigError("dims", "must be an object {input, hidden, classes}");
        c.tasks.dims.input = get_count(*d, "input", "dims.", c.tasks.dims.input);
        c.tasks.dims.hidden = get_count(*d, "hidden", "dims.", c.tasks.dims.hidden);
        c.tasks.dims.classes = get_count(*d, "classes", "dims.", c.tasks.dims.classes);
        if (c.tasks.dims.input == 0 || c.tasks.dims.hidden == 0 || c.tasks.dims.classes < 2)
            throw ConfigError("dims", "need input > 0, hidden > 0, classes >= 2");
    }
    c.tasks.train_per_stage = get_count(j, "train_per_stage", "", c.tasks.train_per_stage);
    if (c.tasks.train_per_stage == 0) throw ConfigError("train_per_stage", "must be positive");
    c.tasks.test_per_stage = get_count(j, "test_per_stage", "", c.tasks.test_per_stage);
    if (c.tasks.test_per_stage == 0) throw ConfigError("test_per_stage", "must be positive");
    c.tasks.noise = get_number(j, "noise", "", c.tasks.noise);
    if (!(c.tasks.noise >= 0.0)) throw ConfigError("noise", "must be non-negative");

    if (const auto* t = detail::field(j, "train")) {
        if (!t->is_object()) throw ConfigError("train", "must be an object");
        auto& tr = c.train;
        tr.learning_rate = get_number(*t, "learning_rate", "train.", tr.learning_rate);
        tr.warmup_ratio = get_number(*t, "warmup_ratio", "train.", tr.warmup_ratio);
        tr.epochs = get_count(*t, "epochs", "train.", tr.epochs);
        tr.batch_size = get_count(*t, "batch_size", "train.", tr.batch_size);
        tr.adamw.beta1 = get_number(*t, "beta1", "train.", tr.adamw.beta1);
        tr.adamw.beta2 = get_number(*t, "beta2", "train.", tr.adamw.beta2);
        tr.adamw.epsilon = get_number(*t, "epsilon", "train.", tr.adamw.epsilon);
        tr.adamw.weight_decay = get_number(*t, "weight_decay", "train.", tr.adamw.weight_decay);
        if (const auto* d = detail::field(*t, "lr_decay")) {
            if (*d == "linear") tr.decay = LrDecay::linear;
            else if (*d == "constant") tr.decay = LrDecay::constant;
            else throw ConfigError("train.lr_decay", "must be \"linear\" or \"constant\"");
        }
        if (tr.epochs == 0) throw ConfigError("train.epochs", "must be positive");
        tr.validate();
    }
    const double ratio = get_number(j, "replay_ratio", "", kToyReplayRatio);
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("replay_ratio", "must lie in [0, 1]");
    if (const auto* s = detail::field(j, "strategies")) {
        if (!s->is_array() || s->empty()) throw ConfigError("strategies", "must be a non-empty array");
        c.strategies.clear();
        std::set<std::string> names;
        for (std::size_t i = 0; i < s->size(); ++i) {
            c.strategies.push_back(detail::parse_strategy((*s)[i], i, ratio));
            if (!names.insert(c.strategies.back().name).second)
                throw ConfigError("strategies[" + std::to_string(i) + "].name", "duplicate strategy name");
        }
    } else {
        c.strategies = default_strategies(ratio);
    }
    check_strategies(c.strategies, c.tasks.num_stages);
    return c;
}

inline nlohmann::json simulation_config_to_json(const SimulationConfig& c) {
    nlohmann::json strategies = nlohmann::json::array();
    for (const auto& s : c.strategies) {
        nlohmann::json j{{"name", s.name}};
        std::string kind = s.replay_ratio ? "replay" : "";
        if (s.merge) kind += kind.empty() ? "merge" : "+merge";
        if (s.scale) kind += kind.empty() ? "scale" : "+scale";
        j["kind"] = kind.empty() ? "none" : kind;
        if (s.replay_ratio) j["replay_ratio"] = *s.replay_ratio;
        if (s.merge) {
            j["merge"] = {{"method", to_string(s.merge->method)}, {"weights", s.merge->weights}, {"seed", s.merge->seed}};
            if (!s.merge->densities.empty()) j["merge"]["densities"] = s.merge->densities;
        }
        if (s.scale) {
            j["alpha_base"] = s.scale->alpha_base;
            j["alpha_new"] = s.scale->alpha_new;
        }
        strategies.push_back(std::move(j));
    }
    return {
        {"seed", c.seed},
        {"seeds", c.seeds},
        {"num_stages", c.tasks.num_stages},
        {"dims", {{"input", c.tasks.dims.input}, {"hidden", c.tasks.dims.hidden}, {"classes", c.tasks.dims.classes}}},
        {"train_per_stage", c.tasks.train_per_stage},
        {"test_per_stage", c.tasks.test_per_stage},
        {"noise", c.tasks.noise},
        {"train",
         {{"learning_rate", c.train.learning_rate},
          {"warmup_ratio", c.train.warmup_ratio},
          {"epochs", c.train.epochs},
          {"batch_size", c.train.batch_size},
          {"beta1", c.train.adamw.beta1},
          {"beta2", c.train.adamw.beta2},
          {"epsilon", c.train.adamw.epsilon},
          {"weight_decay", c.train.adamw.weight_decay},
          {"lr_decay", c.train.decay == LrDecay::linear ? "linear" : "constant"}}},
        {"strategies", strategies},
    };
}

// ---------------------------------------------------------------------------
// CSV output

namespace detail {

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6) << v;
    return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw DataError("write failed for '" + path.string() + "'");
}

}  // namespace detail

/// Per-strategy table: one row per after-stage, mean and std per task.
inline std::string report_csv(const StrategySummary& s) {
    std::ostringstream os;
    const std::size_t T = s.mean.front().size();
    os << "after_stage";
    for (std::size_t t = 0; t < T; ++t) os << ",task" << t << "_mean,task" << t << "_std";
    os << '\n';
    for (std::size_t i = 0; i < s.mean.size(); ++i) {
        os << i;
        for (std::size_t t = 0; t < T; ++t) os << ',' << detail::fmt(s.mean[i][t]) << ',' << detail::fmt(s.stddev[i][t]);
        os << '\n';
    }
    return os.str();
}

/// Strategy comparison over final-row accuracies (rows: strategies).
inline std::string comparison_csv(const std::vector<StrategySummary>& all) {
    std::ostringstream os;
    const std::size_t T = all.front().mean.front().size();
    os << "strategy,seeds";
    for (std::size_t t = 0; t < T; ++t) os << ",task" << t << "_mean,task" << t << "_std";
    os << ",average_mean\n";
    for (const auto& s : all) {
        const auto& m = s.mean.back();
        const auto& sd = s.stddev.back();
        os << s.strategy << ',' << s.runs.size();
        double avg = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
            os << ',' << detail::fmt(m[t]) << ',' << detail::fmt(sd[t]);
            avg += m[t] / static_cast<double>(T);
        }
        os << ',' << detail::fmt(avg) << '\n';
    }
    return os.str();
}

/// Long format for plotting forgetting curves: one accuracy per line.
inline std::string curves_csv(const std::vector<StrategySummary>& all) {
    std::ostringstream os;
    os << "strategy,seed,after_stage,task,accuracy\n";
    for (const auto& s : all)
        for (const auto& r : s.runs)
            for (std::size_t i = 0; i < r.accuracy.size(); ++i)
                for (std::size_t t = 0; t < r.accuracy[i].size(); ++t)
                    os << s.strategy << ',' << r.seed << ',' << i << ',' << t << ',' << detail::fmt(r.accuracy[i][t]) << '\n';
    return os.str();
}

/// Writes report_<strategy>.csv, comparison.csv, curves.csv and the resolved
/// config into `dir`; returns the paths written.
inline std::vector<std::filesystem::path> write_simulation_outputs(const std::vector<StrategySummary>& all,
                                                                   const SimulationConfig& cfg,
                                                                   const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("cannot create output directory '" + dir.string() + "': " + ec.message());
    std::vector<std::filesystem::path> paths;
    for (const auto& s : all) {
        paths.push_back(dir / ("report_" + s.strategy + ".csv"));
        detail::write_text(paths.back(), report_csv(s));
    }
    paths.push_back(dir / "comparison.csv");
    detail::write_text(paths.back(), comparison_csv(all));
    paths.push_back(dir / "curves.csv");
    detail::write_text(paths.back(), curves_csv(all));
    paths.push_back(dir / "config_resolved.json");
    detail::write_text(paths.back(), simulation_config_to_json(cfg).dump(2) + "\n");
    return paths;
}

}  // namespace forgetkit::sim
