#pragma once

// LoRA adapter arithmetic: y = W·x + (α/r)·B·(A·x), folding adapters into
// base weights, and scaling-factor discounting.

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "forgetkit/core.hpp"
#include "forgetkit/tensor_store.hpp"

namespace forgetkit {

/// One low-rank adapter: A is [r, d_in], B is [d_out, r].
struct LoraAdapter {
    Tensor a;
    Tensor b;
    std::size_t rank = 0;
    double alpha = 0.0;
    std::string target;

    std::size_t d_in() const { return a.shape().at(1); }
    std::size_t d_out() const { return b.shape().at(0); }

    void validate() const {
        if (a.shape().size() != 2 || b.shape().size() != 2)
            throw DataError("adapter '" + target + "': A and B must be matrices");
        if (rank == 0) throw DataError("adapter '" + target + "': rank must be positive");
        if (a.shape()[0] != rank || b.shape()[1] != rank)
            throw DataError("adapter '" + target + "': A " + shape_str(a.shape()) + " and B " +
                            shape_str(b.shape()) + " disagree with rank " + std::to_string(rank));
        if (!std::isfinite(alpha) || alpha <= 0.0)
            throw DataError("adapter '" + target + "': alpha must be finite and positive");
    }
};

using AdapterSet = std::map<std::string, LoraAdapter>;

/// Checks every adapter against the base weight it targets.
inline void validate_adapters(const Checkpoint& base, const AdapterSet& adapters) {
    for (const auto& [target, ad] : adapters) {
        ad.validate();
        if (target != ad.target) throw DataError("adapter keyed '" + target + "' targets '" + ad.target + "'");
        auto it = base.tensors.find(target);
        if (it == base.tensors.end()) throw DataError("adapter target '" + target + "' missing from base checkpoint");
        const Shape want{ad.d_out(), ad.d_in()};
        if (it->second.shape() != want)
            throw DataError("adapter target '" + target + "': base weight " + shape_str(it->second.shape()) +
                            " but adapter implies " + shape_str(want));
    }
}

/// y = W·x + (α/r)·(B·(A·x)), accumulated in f64.
inline std::vector<double> lora_forward(const Tensor& w, const LoraAdapter& ad, std::span<const double> x) {
    ad.validate();
    if (w.shape().size() != 2 || w.shape()[0] != ad.d_out() || w.shape()[1] != ad.d_in() || x.size() != ad.d_in())
        throw DataError("lora_forward: W " + shape_str(w.shape()) + ", adapter [" + std::to_string(ad.d_out()) + "," +
                        std::to_string(ad.d_in()) + "], x of length " + std::to_string(x.size()) + " are inconsistent");
    const std::size_t d_out = ad.d_out(), d_in = ad.d_in(), r = ad.rank;
    std::vector<double> ax(r, 0.0);
    for (std::size_t k = 0; k < r; ++k)
        for (std::size_t j = 0; j < d_in; ++j) ax[k] += static_cast<double>(ad.a[k * d_in + j]) * x[j];
    const double scale = ad.alpha / static_cast<double>(r);
    std::vector<double> y(d_out, 0.0);
    for (std::size_t o = 0; o < d_out; ++o) {
        double base = 0.0, low = 0.0;
        for (std::size_t j = 0; j < d_in; ++j) base += static_cast<double>(w[o * d_in + j]) * x[j];
        for (std::size_t k = 0; k < r; ++k) low += static_cast<double>(ad.b[o * r + k]) * ax[k];
        y[o] = base + scale * low;
    }
    return y;
}

/// W' = W + (α_eff/r)·B·A for every adapter target; other tensors are copied.
/// α_eff is `alpha_override` when given (zero allowed), else each adapter's α.
inline Checkpoint fold_lora(const Checkpoint& base, const AdapterSet& adapters,
                            std::optional<double> alpha_override = std::nullopt) {
    validate_adapters(base, adapters);
    if (alpha_override && (!std::isfinite(*alpha_override) || *alpha_override < 0.0))
        throw DataError("fold_lora: alpha override must be finite and non-negative");
    Checkpoint out = base;
    for (const auto& [target, ad] : adapters) {
        const double alpha = alpha_override.value_or(ad.alpha);
        const double scale = alpha / static_cast<double>(ad.rank);
        const std::size_t d_out = ad.d_out(), d_in = ad.d_in(), r = ad.rank;
        auto& w = out.tensors.at(target);
        for (std::size_t o = 0; o < d_out; ++o)
            for (std::size_t j = 0; j < d_in; ++j) {
                double ba = 0.0;
                for (std::size_t k = 0; k < r; ++k)
                    ba += static_cast<double>(ad.b[o * r + k]) * static_cast<double>(ad.a[k * d_in + j]);
                w[o * d_in + j] = static_cast<float>(static_cast<double>(w[o * d_in + j]) + scale * ba);
            }
        std::ostringstream os;
        os.precision(17);
        os << alpha;
        out.metadata["lora_alpha_eff." + target] = os.str();
    }
    return out;
}

/// Returns the same adapters with every α replaced by `alpha_new`.
inline AdapterSet discount(const AdapterSet& adapters, double alpha_new) {
    if (!std::isfinite(alpha_new) || alpha_new <= 0.0) throw DataError("discount: alpha must be finite and positive");
    AdapterSet out = adapters;
    for (auto& [_, ad] : out) ad.alpha = alpha_new;
    return out;
}

// Adapter containers reuse the checkpoint format: tensors "<target>.lora_A"
// and "<target>.lora_B", metadata keys "rank" and "alpha" shared by all
// adapters in the file.

inline constexpr std::string_view kLoraASuffix = ".lora_A";
inline constexpr std::string_view kLoraBSuffix = ".lora_B";

inline AdapterSet adapters_from_checkpoint(const Checkpoint& ckpt) {
    auto meta = [&](const char* key) -> double {
        auto it = ckpt.metadata.find(key);
        if (it == ckpt.metadata.end()) throw DataError(std::string("adapter file lacks metadata key '") + key + "'");
        try {
            std::size_t used = 0;
            const double v = std::stod(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw DataError(std::string("adapter metadata '") + key + "' is not a number: '" + it->second + "'");
        }
    };
    const double rank_value = meta("rank");
    const double alpha = meta("alpha");
    if (rank_value < 1 || rank_value != std::floor(rank_value)) throw DataError("adapter metadata 'rank' must be a positive integer");

    AdapterSet set;
    auto ends_with = [](const std::string& s, std::string_view suffix) {
        return s.size() > suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    for (const auto& [name, t] : ckpt.tensors) {
        if (ends_with(name, kLoraASuffix)) {
            const auto target = name.substr(0, name.size() - kLoraASuffix.size());
            const auto b_name = target + std::string(kLoraBSuffix);
            if (!ckpt.contains(b_name)) throw DataError("adapter '" + target + "' has lora_A but no lora_B");
            LoraAdapter ad{t, ckpt.at(b_name), static_cast<std::size_t>(rank_value), alpha, target};
            ad.validate();
            set.emplace(target, std::move(ad));
        } else if (ends_with(name, kLoraBSuffix)) {
            const auto target = name.substr(0, name.size() - kLoraBSuffix.size());
            if (!ckpt.contains(target + std::string(kLoraASuffix)))
                throw DataError("adapter '" + target + "' has lora_B but no lora_A");
        } else {
            throw DataError("unexpected tensor '" + name + "' in adapter file");
        }
    }
    return set;
}

inline Checkpoint adapters_to_checkpoint(const AdapterSet& adapters) {
    Checkpoint ckpt;
    std::optional<std::size_t> rank;
    std::optional<double> alpha;
    for (const auto& [target, ad] : adapters) {
        ad.validate();
        if ((rank && *rank != ad.rank) || (alpha && *alpha != ad.alpha))
            throw DataError("adapter file format requires one rank and alpha for all adapters");
        rank = ad.rank;
        alpha = ad.alpha;
        ckpt.tensors.emplace(target + std::string(kLoraASuffix), ad.a);
        ckpt.tensors.emplace(target + std::string(kLoraBSuffix), ad.b);
    }
    if (rank) {
        std::ostringstream os;
        os.precision(17);
        os << *alpha;
        ckpt.metadata["rank"] = std::to_string(*rank);
        ckpt.metadata["alpha"] = os.str();
    }
    return ckpt;
}

}  // namespace forgetkit
