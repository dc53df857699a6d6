#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "forgetkit/core.hpp"

namespace forgetkit {

struct AdamWParams {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay:
///   θ ← θ·(1 − lr·λ)
///   m ← β1·m + (1 − β1)·g,  v ← β2·v + (1 − β2)·g²
///   θ ← θ − lr · m̂ / (√v̂ + ε),  m̂ = m/(1 − β1^t), v̂ = v/(1 − β2^t)
class AdamW {
public:
    AdamW(std::size_t parameter_count, AdamWParams params = {})
        : params_(params), m_(parameter_count, 0.0), v_(parameter_count, 0.0) {}

    void step(std::span<double> theta, std::span<const double> grad, double lr) {
        if (theta.size() != m_.size() || grad.size() != m_.size())
            throw DataError("AdamW: parameter/gradient size mismatch");
        ++t_;
        const double c1 = 1.0 - std::pow(params_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(params_.beta2, static_cast<double>(t_));
        for (std::size_t k = 0; k < theta.size(); ++k) {
            theta[k] *= 1.0 - lr * params_.weight_decay;
            m_[k] = params_.beta1 * m_[k] + (1.0 - params_.beta1) * grad[k];
            v_[k] = params_.beta2 * v_[k] + (1.0 - params_.beta2) * grad[k] * grad[k];
            const double m_hat = m_[k] / c1;
            const double v_hat = v_[k] / c2;
            theta[k] -= lr * m_hat / (std::sqrt(v_hat) + params_.epsilon);
        }
    }

    std::size_t steps_taken() const noexcept { return t_; }
    const AdamWParams& params() const noexcept { return params_; }

private:
    AdamWParams params_;
    std::vector<double> m_;
    std::vector<double> v_;
    std::size_t t_ = 0;
};

enum class LrDecay { constant, linear };

/// Linear warmup to `peak` over ceil(warmup_ratio·total) steps, then either
/// constant or linear decay to zero at `total`. Steps are 1-based.
struct WarmupSchedule {
    double peak = 1e-3;
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 0;
    LrDecay decay = LrDecay::linear;

    static WarmupSchedule make(double peak, double warmup_ratio, std::size_t total, LrDecay decay) {
        if (!(warmup_ratio >= 0.0 && warmup_ratio <= 1.0)) throw DataError("warmup ratio must lie in [0, 1]");
        return {peak, numeric::tolerant_ceil(warmup_ratio * static_cast<double>(total)), total, decay};
    }

    double at(std::size_t step) const {
        if (warmup_steps > 0 && step <= warmup_steps)
            return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
        if (decay == LrDecay::constant || total_steps <= warmup_steps) return peak;
        const double remaining = static_cast<double>(total_steps - std::min(step, total_steps));
        // One extra step keeps the final update non-zero.
        return peak * (remaining + 1.0) / static_cast<double>(total_steps - warmup_steps + 1);
    }
};

}  // namespace forgetkit
