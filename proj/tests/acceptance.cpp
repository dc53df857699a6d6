// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "forgetkit/adamw.hpp"
#include "forgetkit/dataformat.hpp"
#include "forgetkit/lora.hpp"
#include "forgetkit/merge.hpp"
#include "forgetkit/replay.hpp"
#include "forgetkit/simulator.hpp"
#include "forgetkit/toy_model.hpp"
#include "test_support.hpp"

using namespace forgetkit;
namespace ts = testing_support;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string num(double v, int prec = 3) {
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

// 1 ------------------------------------------------------------------------

Outcome merge_linear_oracle() {
    std::mt19937_64 g(101);
    const std::vector<double> w = {0.02, 0.03, 0.05, 0.9};
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const auto fam = ts::random_family(g, 4);
        const auto out = merge_linear(fam, w);
        for (const auto& [name, t] : fam[0].tensors)
            for (std::size_t k = 0; k < t.numel(); ++k) {
                double want = 0.0;
                for (std::size_t i = 0; i < 4; ++i) want += w[i] * double(fam[i].at(name)[k]);
                const double err = std::abs(double(out.at(name)[k]) - want) / std::max(std::abs(want), 1e-30);
                worst = std::max(worst, want == 0.0 ? std::abs(double(out.at(name)[k])) : err);
            }
    }
    return {worst <= 1e-6, "50 quadruples, max relative error " + num(worst)};
}

// 2 ------------------------------------------------------------------------

std::vector<double> brute_force_ties(const std::vector<std::vector<double>>& deltas, const std::vector<double>& w,
                                     const std::vector<double>& density) {
    const std::size_t K = deltas.front().size();
    std::vector<std::vector<double>> trimmed;
    for (std::size_t i = 0; i < deltas.size(); ++i) {
        std::size_t keep = std::size_t(std::ceil(density[i] * double(K) - 1e-9));
        std::vector<bool> taken(K, false);
        std::vector<double> t(K, 0.0);
        // Repeatedly take the largest remaining magnitude, lowest index first.
        for (std::size_t r = 0; r < std::min(keep, K); ++r) {
            std::size_t best = K;
            for (std::size_t k = 0; k < K; ++k)
                if (!taken[k] && (best == K || std::abs(deltas[i][k]) > std::abs(deltas[i][best]))) best = k;
            taken[best] = true;
            t[best] = deltas[i][best];
        }
        trimmed.push_back(t);
    }
    double wsum = 0.0;
    for (double x : w) wsum += x;
    std::vector<double> out(K, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
        double vote = 0.0;
        for (std::size_t i = 0; i < trimmed.size(); ++i) vote += w[i] * trimmed[i][k];
        const bool positive = !(vote < 0.0);
        double num_ = 0.0, den = 0.0;
        for (std::size_t i = 0; i < trimmed.size(); ++i) {
            const double t = trimmed[i][k];
            if (t != 0.0 && (t > 0.0) == positive) {
                num_ += w[i] * t;
                den += w[i];
            }
        }
        out[k] = den != 0.0 ? num_ / den * wsum : 0.0;
    }
    return out;
}

Outcome ties_exhaustive() {
    std::mt19937_64 g(202);
    const double densities[] = {0.25, 0.5, 1.0};
    const double weights[] = {0.04, 0.06, 0.9, 0.5, 1.0};
    int mismatches = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + g() % 4, K = 1 + g() % 8;
        std::vector<std::vector<double>> deltas(n, std::vector<double>(K));
        std::vector<double> w(n), dens(n);
        Checkpoint base;
        base.tensors.emplace("t", Tensor::zeros({K}));
        std::vector<Checkpoint> models(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<float> v(K);
            for (std::size_t k = 0; k < K; ++k) {
                deltas[i][k] = double(int(g() % 5) - 2);
                v[k] = float(deltas[i][k]);
            }
            models[i].tensors.emplace("t", Tensor({K}, v));
            w[i] = weights[g() % 5];
            dens[i] = densities[g() % 3];
        }
        const auto got = merge_ties(base, models, w, dens);
        const auto want = brute_force_ties(deltas, w, dens);
        for (std::size_t k = 0; k < K; ++k)
            if (got.at("t")[k] != float(want[k])) ++mismatches;
    }
    return {mismatches == 0, "1000 sampled cases, " + std::to_string(mismatches) + " mismatching coordinates"};
}

// 3 ------------------------------------------------------------------------

Outcome dare_expectation() {
    std::mt19937_64 g(303);
    std::vector<float> delta(64);
    for (auto& d : delta) d = float(g() % 2 ? 1 : -1) * (0.5f + float(g() % 1000) / 1000.0f);
    Checkpoint base;
    base.tensors.emplace("w", Tensor::zeros({64}));
    const std::vector<Checkpoint> model = {[&] {
        Checkpoint c;
        c.tensors.emplace("w", Tensor({64}, delta));
        return c;
    }()};
    std::vector<double> mean(64, 0.0);
    const int trials = 10000;
    for (int s = 0; s < trials; ++s) {
        const auto out = merge_dare(base, model, std::vector<double>{1.0}, std::vector<double>{0.9}, std::uint64_t(s));
        for (std::size_t k = 0; k < 64; ++k) mean[k] += double(out.at("w")[k]) / trials;
    }
    double worst = 0.0;
    for (std::size_t k = 0; k < 64; ++k) worst = std::max(worst, std::abs(mean[k] - delta[k]) / std::abs(delta[k]));
    return {worst <= 0.02, "64 elements x 10000 seeds, max relative deviation " + num(worst)};
}

// 4 ------------------------------------------------------------------------

Outcome lora_fold() {
    std::mt19937_64 g(404);
    double worst_fwd = 0.0, worst_ratio = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d_out = 1 + g() % 16, d_in = 1 + g() % 16, r = 1 + g() % 4;
        const Tensor w({d_out, d_in}, ts::random_floats(g, d_out * d_in, -1.0f, 1.0f));
        const LoraAdapter ad{Tensor({r, d_in}, ts::random_floats(g, r * d_in, -0.1f, 0.1f)),
                             Tensor({d_out, r}, ts::random_floats(g, d_out * r, -0.1f, 0.1f)), r, 16.0, "w"};
        std::vector<double> x;
        for (float v : ts::random_floats(g, d_in)) x.push_back(v);
        Checkpoint base;
        base.tensors.emplace("w", w);
        const auto w16 = fold_lora(base, {{"w", ad}}).at("w");
        const auto w14 = fold_lora(base, {{"w", ad}}, 14.0).at("w");

        const auto y = lora_forward(w, ad, x);
        double num_ = 0.0, den = 0.0;
        for (std::size_t o = 0; o < d_out; ++o) {
            double folded = 0.0;
            for (std::size_t j = 0; j < d_in; ++j) folded += double(w16[o * d_in + j]) * x[j];
            num_ += (folded - y[o]) * (folded - y[o]);
            den += y[o] * y[o];
        }
        worst_fwd = std::max(worst_fwd, std::sqrt(num_) / std::max(std::sqrt(den), 1e-30));
        for (std::size_t k = 0; k < w.numel(); ++k)
            worst_ratio = std::max(worst_ratio, std::abs((double(w14[k]) - w[k]) - 14.0 / 16.0 * (double(w16[k]) - w[k])));
    }
    return {worst_fwd <= 1e-5 && worst_ratio <= 1e-6,
            "100 instances, forward rel err " + num(worst_fwd) + ", 14/16 ratio abs err " + num(worst_ratio)};
}

// 5 ------------------------------------------------------------------------

Manifest stage_manifest(std::size_t j, std::size_t n) {
    Manifest m;
    m.stage_label = "D" + std::to_string(j);
    for (std::size_t k = 0; k < n; ++k) {
        ManifestEntry e;
        e.id = m.stage_label + "_" + std::to_string(k);
        e.dataset_label = m.stage_label;
        e.stage = std::int64_t(j);
        m.entries.push_back(e);
    }
    return m;
}

Outcome replay_counts() {
    const std::vector<std::size_t> sizes = {10000, 10000, 10000, 10000};
    const auto plan = plan_replay(sizes, 3, 0.005, 1);
    bool ok = plan.per_source == std::vector<std::size_t>{50, 50, 50};
    std::mt19937_64 g(505);
    int bad = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t i = 1 + g() % 4;
        std::vector<std::size_t> sz(i + 1);
        for (auto& s : sz) s = 1 + g() % 2000;
        const double s = double(g() % 1001) / 10000.0;
        std::vector<Manifest> ms;
        for (std::size_t j = 0; j <= i; ++j) ms.push_back(stage_manifest(j, sz[j]));
        const auto p = plan_replay(sz, i, s, g());
        const auto out = build_augmented_manifest(ms, p);
        std::size_t want = sz[i];
        for (std::size_t j = 0; j < i; ++j) want += std::min<std::size_t>(std::size_t(std::floor(s * double(sz[i]) + 0.5 + 1e-9)), sz[j]);
        std::set<std::string> ids;
        std::map<std::string, std::size_t> per;
        bool dup = false;
        for (const auto& e : out.entries) {
            dup |= !ids.insert(e.id).second;
            ++per[e.dataset_label];
        }
        bool superset = true;
        for (const auto& e : ms[i].entries) superset &= ids.count(e.id) == 1;
        bool counts = per["D" + std::to_string(i)] == sz[i];
        for (std::size_t j = 0; j < i; ++j) counts &= per["D" + std::to_string(j)] == p.per_source[j];
        if (out.size() != want || dup || !superset || !counts) ++bad;
    }
    ok &= bad == 0;
    return {ok, "per_source [" + std::to_string(plan.per_source[0]) + "," + std::to_string(plan.per_source[1]) + "," +
                    std::to_string(plan.per_source[2]) + "], " + std::to_string(bad) + "/100 fuzzed configs violating"};
}

// 6 ------------------------------------------------------------------------

Outcome interleave_round_trip() {
    const VocabLayout layout;
    std::mt19937_64 g(606);
    int failures = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        WordAligned w;
        for (std::size_t L = g() % 16; L > 0; --L) {
            Word word;
            for (std::size_t k = 1 + g() % 5; k > 0; --k) word.text.push_back(TokenId(g() % layout.text_vocab_size));
            for (std::size_t k = 1 + g() % 8; k > 0; --k)
                word.speech.push_back(TokenId(layout.speech_offset + g() % layout.speech_token_count));
            w.words.push_back(word);
        }
        try {
            if (!(deinterleave(interleave(w), layout) == w)) ++failures;
        } catch (const std::exception&) {
            ++failures;
        }
    }
    return {failures == 0, "10000 fuzzed inputs, " + std::to_string(failures) + " failures"};
}

// 7 ------------------------------------------------------------------------

Outcome gradient_check() {
    std::mt19937_64 g(707);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const ToyDims dims{3 + g() % 6, 3 + g() % 6, 2 + g() % 4};
        auto m = ToyModel::init(dims, g());
        for (auto& b : m.b1()) b = double(int(g() % 11) - 5) / 10.0;
        for (auto& b : m.b2()) b = double(int(g() % 11) - 5) / 10.0;
        std::vector<Sample> data(1 + g() % 6);
        for (auto& s : data) {
            for (std::size_t i = 0; i < dims.input; ++i) s.x.push_back(double(int(g() % 2001) - 1000) / 1000.0);
            s.label = g() % dims.classes;
        }
        std::vector<const Sample*> batch;
        for (const auto& s : data) batch.push_back(&s);
        std::vector<double> grad;
        m.loss_and_grad(batch, &grad);
        const double eps = 1e-4;
        double num_ = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t k = 0; k < grad.size(); ++k) {
            const double orig = m.params()[k];
            m.params()[k] = orig + eps;
            const double up = m.loss_and_grad(batch, nullptr);
            m.params()[k] = orig - eps;
            const double down = m.loss_and_grad(batch, nullptr);
            m.params()[k] = orig;
            const double fd = (up - down) / (2 * eps);
            num_ += (fd - grad[k]) * (fd - grad[k]);
            na += grad[k] * grad[k];
            nb += fd * fd;
        }
        worst = std::max(worst, std::sqrt(num_) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12}));
    }
    return {worst <= 1e-5, "20 instances, eps 1e-4, max relative error " + num(worst)};
}

// 8 ------------------------------------------------------------------------

Outcome adamw_oracle() {
    const std::vector<double> c = {2.0, 0.5, 1.0, 4.0}, target = {1.0, -2.0, 0.0, 0.25};
    std::vector<double> theta = {0.0, 0.0, 3.0, -1.0};
    std::vector<double> ref = theta, m(4, 0.0), v(4, 0.0);
    const AdamWParams p;  // defaults: 0.9, 0.999, 1e-8, 0.01
    AdamW opt(4, p);
    const auto sched = WarmupSchedule::make(0.05, 0.1, 100, LrDecay::linear);
    double worst = 0.0;
    for (std::size_t step = 1; step <= 100; ++step) {
        const double lr = sched.at(step);
        std::vector<double> grad(4);
        for (int k = 0; k < 4; ++k) grad[k] = c[k] * (theta[k] - target[k]);
        opt.step(theta, grad, lr);
        for (int k = 0; k < 4; ++k) {
            const double gk = c[k] * (ref[k] - target[k]);
            m[k] = p.beta1 * m[k] + (1.0 - p.beta1) * gk;
            v[k] = p.beta2 * v[k] + (1.0 - p.beta2) * gk * gk;
            const double mh = m[k] / (1.0 - std::pow(p.beta1, double(step)));
            const double vh = v[k] / (1.0 - std::pow(p.beta2, double(step)));
            ref[k] = ref[k] * (1.0 - lr * p.weight_decay) - lr * mh / (std::sqrt(vh) + p.epsilon);
            worst = std::max(worst, std::abs(theta[k] - ref[k]));
        }
    }
    return {worst <= 1e-10, "100 steps, max abs deviation " + num(worst)};
}

// 9 ------------------------------------------------------------------------

Outcome forgetting_phenomenology() {
    sim::SimulationConfig cfg;
    cfg.seeds = 10;
    const auto t0 = std::chrono::steady_clock::now();
    const auto results = sim::simulate(cfg);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    auto find = [&](const std::string& name) -> const sim::StrategySummary& {
        for (const auto& s : results)
            if (s.strategy == name) return s;
        throw std::runtime_error("missing strategy " + name);
    };
    const auto& none = find("none");
    const auto& replay = find("replay");
    const double initial = 100.0 * none.mean.front()[0];
    const double none_final = 100.0 * none.mean.back()[0];
    const double replay_final = 100.0 * replay.mean.back()[0];
    const double rm = 100.0 * find("replay+merge").mean.back()[0];
    const double rs = 100.0 * find("replay+scale").mean.back()[0];
    const bool a = initial - none_final >= 15.0;
    const bool b = replay_final - none_final >= 5.0;
    const bool c = rm >= replay_final - 2.0 && rs >= replay_final - 2.0;
    const bool time_ok = secs < 300.0;
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << "(a) none task0 " << initial << " -> " << none_final << (a ? " ok" : " FAIL")
       << "; (b) replay " << replay_final << (b ? " ok" : " FAIL") << "; (c) replay+merge " << rm << ", replay+scale "
       << rs << (c ? " ok" : " FAIL") << "; " << secs << " s";
    return {a && b && c && time_ok, os.str()};
}

// 10 -----------------------------------------------------------------------

int run_cli(const std::string& args) {
    const std::string cmd = "'" FORGETKIT_CLI "' --log-level error " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

Outcome determinism() {
    ts::TempDir dir("accept");
    std::mt19937_64 g(1010);
    const auto fam = ts::random_family(g, 4);
    std::string models;
    for (int i = 0; i < 4; ++i) {
        const auto p = dir / ("theta" + std::to_string(i) + ".safetensors");
        write_checkpoint(fam[i], p);
        if (i > 0) models += " --model " + q(p);
    }
    ts::write_text(dir / "ties.json", R"({"method":"ties","base":"theta0.safetensors","seed":3,"models":[
        {"path":"theta1.safetensors","weight":0.04,"density":0.9},
        {"path":"theta2.safetensors","weight":0.06,"density":0.9},
        {"path":"theta3.safetensors","weight":0.9,"density":0.9}]})");
    std::string dare = ts::read_bytes(dir / "ties.json");
    dare.replace(dare.find("ties"), 4, "dare");
    ts::write_text(dir / "dare.json", dare);
    std::string linear = R"({"method":"linear","models":[{"path":"theta0.safetensors","weight":0.02},
        {"path":"theta1.safetensors","weight":0.03},{"path":"theta2.safetensors","weight":0.05},
        {"path":"theta3.safetensors","weight":0.9}]})";
    ts::write_text(dir / "linear.json", linear);

    Checkpoint base;
    base.tensors.emplace("proj", ts::random_tensor(g, {5, 4}));
    write_checkpoint(base, dir / "base.st");
    const LoraAdapter ad{Tensor({2, 4}, ts::random_floats(g, 8, -0.1f, 0.1f)),
                         Tensor({5, 2}, ts::random_floats(g, 10, -0.1f, 0.1f)), 2, 16.0, "proj"};
    write_checkpoint(adapters_to_checkpoint({{"proj", ad}}), dir / "ad.st");

    std::string manifests;
    for (int j = 0; j < 3; ++j) {
        std::string text;
        for (int k = 0; k < 200; ++k)
            text += nlohmann::json{{"id", "s" + std::to_string(j) + "_" + std::to_string(k)},
                                   {"dataset_label", "D" + std::to_string(j)},
                                   {"stage", j},
                                   {"task", "text"}}
                        .dump() +
                    "\n";
        ts::write_text(dir / ("m" + std::to_string(j) + ".jsonl"), text);
        manifests += " " + q(dir / ("m" + std::to_string(j) + ".jsonl"));
    }
    std::string raw;
    for (int k = 0; k < 50; ++k)
        raw += nlohmann::json{{"id", "a" + std::to_string(k)}, {"speech", {128256 + k, 128300}}, {"transcript", {k + 1}}}.dump() + "\n";
    ts::write_text(dir / "raw.jsonl", raw);
    ts::write_text(dir / "sim.json", R"({"num_stages": 4, "dims": {"input": 8, "hidden": 8, "classes": 4},
        "train_per_stage": 100, "test_per_stage": 50, "train": {"epochs": 2}, "seeds": 2})");

    const std::vector<std::pair<std::string, std::vector<std::string>>> commands = {
        {"merge --spec " + q(dir / "linear.json") + " --out {o}/merge_linear.st", {"merge_linear.st"}},
        {"merge --spec " + q(dir / "ties.json") + " --out {o}/merge_ties.st", {"merge_ties.st"}},
        {"merge --spec " + q(dir / "dare.json") + " --out {o}/merge_dare.st", {"merge_dare.st"}},
        {"fold-lora --base " + q(dir / "base.st") + " --adapter " + q(dir / "ad.st") + " --alpha 14 --out {o}/fold.st",
         {"fold.st"}},
        {"replay-plan --i 2 --s 0.05 --seed 4 --manifests" + manifests + " --out {o}/aug.jsonl --plan-out {o}/plan.json",
         {"aug.jsonl", "plan.json"}},
        {"format --task asr --seed 2 --in " + q(dir / "raw.jsonl") + " --out {o}/fmt.jsonl", {"fmt.jsonl"}},
        {"simulate --config " + q(dir / "sim.json") + " --out-dir {o}/sim",
         {"sim/comparison.csv", "sim/curves.csv", "sim/report_replay+scale.csv", "sim/config_resolved.json"}},
    };
    int differing = 0, failed = 0;
    std::string which;
    for (const auto& [tmpl, outputs] : commands) {
        std::vector<std::string> bytes[2];
        for (int rep = 0; rep < 2; ++rep) {
            const auto out_dir = dir / ("run" + std::to_string(rep));
            std::filesystem::create_directories(out_dir);
            std::string cmd = tmpl;
            for (auto pos = cmd.find("{o}"); pos != std::string::npos; pos = cmd.find("{o}"))
                cmd.replace(pos, 3, out_dir.string());
            if (run_cli(cmd) != 0) {
                ++failed;
                which += " [" + tmpl.substr(0, tmpl.find(' ')) + " failed]";
            }
            for (const auto& o : outputs) bytes[rep].push_back(ts::read_bytes(out_dir / o));
        }
        for (std::size_t k = 0; k < outputs.size(); ++k)
            if (bytes[0][k] != bytes[1][k] || bytes[0][k].empty()) {
                ++differing;
                which += " " + outputs[k];
            }
    }
    return {differing == 0 && failed == 0,
            std::to_string(commands.size()) + " commands run twice, " + std::to_string(differing) + " differing outputs" + which};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"1 merge linear oracle equivalence", merge_linear_oracle},
        {"2 TIES brute-force oracle", ties_exhaustive},
        {"3 DARE expectation", dare_expectation},
        {"4 LoRA fold equivalence and alpha ratio", lora_fold},
        {"5 replay counts and manifest invariants", replay_counts},
        {"6 interleave round-trip", interleave_round_trip},
        {"7 toy-model gradient check", gradient_check},
        {"8 AdamW oracle", adamw_oracle},
        {"9 forgetting phenomenology", forgetting_phenomenology},
        {"10 determinism of CLI outputs", determinism},
    };
    int failures = 0;
    for (const auto& [name, fn] : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << name << ": " << o.detail << " [" << std::fixed
                  << std::setprecision(2) << secs << " s]" << std::defaultfloat << std::endl;
    }
    std::cout << (failures == 0 ? "all acceptance criteria passed" : std::to_string(failures) + " criteria failed")
              << std::endl;
    return failures == 0 ? 0 : 1;
}
