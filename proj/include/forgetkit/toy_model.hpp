#pragma once

// Two-layer tanh perceptron used by the continual-learning simulator.
//   h = tanh(W1·x + b1),  logits = W2·h + b2,  loss = cross-entropy(softmax(logits), y)

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "forgetkit/core.hpp"
#include "forgetkit/tensor_store.hpp"

namespace forgetkit {

struct ToyDims {
    std::size_t input = 32;
    std::size_t hidden = 64;
    std::size_t classes = 10;

    void validate() const {
        if (input == 0 || hidden == 0 || classes < 2)
            throw DataError("toy model dims must satisfy input > 0, hidden > 0, classes >= 2");
    }

    std::size_t parameter_count() const { return hidden * input + hidden + classes * hidden + classes; }
    bool operator==(const ToyDims&) const = default;
};

struct Sample {
    std::vector<double> x;
    std::size_t label = 0;
};

/// Parameters live in one flat vector laid out as [W1 | b1 | W2 | b2],
/// matrices row-major.
class ToyModel {
public:
    explicit ToyModel(ToyDims dims) : dims_(dims), theta_(dims.parameter_count(), 0.0) { dims_.validate(); }

    /// Gaussian init with std 1/sqrt(fan_in); biases zero.
    static ToyModel init(ToyDims dims, std::uint64_t seed) {
        ToyModel m(dims);
        rng::Engine eng(seed);
        const double s1 = 1.0 / std::sqrt(static_cast<double>(dims.input));
        const double s2 = 1.0 / std::sqrt(static_cast<double>(dims.hidden));
        for (auto& w : m.w1()) w = s1 * rng::normal(eng);
        for (auto& w : m.w2()) w = s2 * rng::normal(eng);
        return m;
    }

    const ToyDims& dims() const noexcept { return dims_; }
    std::span<double> params() noexcept { return theta_; }
    std::span<const double> params() const noexcept { return theta_; }

    std::span<double> w1() { return params().subspan(0, dims_.hidden * dims_.input); }
    std::span<double> b1() { return params().subspan(dims_.hidden * dims_.input, dims_.hidden); }
    std::span<double> w2() { return params().subspan(off_w2(), dims_.classes * dims_.hidden); }
    std::span<double> b2() { return params().subspan(off_w2() + dims_.classes * dims_.hidden, dims_.classes); }
    std::span<const double> w1() const { return params().subspan(0, dims_.hidden * dims_.input); }
    std::span<const double> b1() const { return params().subspan(dims_.hidden * dims_.input, dims_.hidden); }
    std::span<const double> w2() const { return params().subspan(off_w2(), dims_.classes * dims_.hidden); }
    std::span<const double> b2() const { return params().subspan(off_w2() + dims_.classes * dims_.hidden, dims_.classes); }

    /// Forward pass; fills the hidden activations when `hidden` is given.
    std::vector<double> logits(std::span<const double> x, std::vector<double>* hidden = nullptr) const {
        if (x.size() != dims_.input) throw DataError("toy model: input has wrong dimension");
        const auto W1 = w1(), B1 = b1(), W2 = w2(), B2 = b2();
        std::vector<double> h(dims_.hidden);
        for (std::size_t j = 0; j < dims_.hidden; ++j) {
            double z = B1[j];
            const double* row = W1.data() + j * dims_.input;
            for (std::size_t i = 0; i < dims_.input; ++i) z += row[i] * x[i];
            h[j] = std::tanh(z);
        }
        std::vector<double> out(dims_.classes);
        for (std::size_t c = 0; c < dims_.classes; ++c) {
            double z = B2[c];
            const double* row = W2.data() + c * dims_.hidden;
            for (std::size_t j = 0; j < dims_.hidden; ++j) z += row[j] * h[j];
            out[c] = z;
        }
        if (hidden) *hidden = std::move(h);
        return out;
    }

    /// Argmax of the logits; ties go to the lowest class index.
    std::size_t predict(std::span<const double> x) const {
        const auto z = logits(x);
        return static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    }

    /// Mean cross-entropy over `batch`; accumulates the mean gradient into
    /// `grad` (resized and zeroed first) when non-null.
    double loss_and_grad(std::span<const Sample* const> batch, std::vector<double>* grad) const {
        if (batch.empty()) throw DataError("toy model: empty batch");
        if (grad) grad->assign(theta_.size(), 0.0);
        const std::size_t D = dims_.input, H = dims_.hidden, C = dims_.classes;
        const auto W2 = w2();
        const double inv_n = 1.0 / static_cast<double>(batch.size());
        double loss = 0.0;
        std::vector<double> h, dz2(C), dz1(H);
        for (const Sample* s : batch) {
            if (s->label >= C) throw DataError("toy model: label out of range");
            const auto z = logits(s->x, &h);
            const double zmax = *std::max_element(z.begin(), z.end());
            double sum = 0.0;
            for (std::size_t c = 0; c < C; ++c) sum += std::exp(z[c] - zmax);
            const double log_sum = std::log(sum) + zmax;
            loss += (log_sum - z[s->label]) * inv_n;
            if (!grad) continue;

            for (std::size_t c = 0; c < C; ++c) dz2[c] = (std::exp(z[c] - log_sum) - (c == s->label ? 1.0 : 0.0)) * inv_n;
            double* g = grad->data();
            double* gW1 = g;
            double* gb1 = g + H * D;
            double* gW2 = g + off_w2();
            double* gb2 = gW2 + C * H;
            std::fill(dz1.begin(), dz1.end(), 0.0);
            for (std::size_t c = 0; c < C; ++c) {
                gb2[c] += dz2[c];
                const double* row = W2.data() + c * H;
                double* grow = gW2 + c * H;
                for (std::size_t j = 0; j < H; ++j) {
                    grow[j] += dz2[c] * h[j];
                    dz1[j] += row[j] * dz2[c];
                }
            }
            for (std::size_t j = 0; j < H; ++j) {
                const double d = dz1[j] * (1.0 - h[j] * h[j]);
                gb1[j] += d;
                double* grow = gW1 + j * D;
                for (std::size_t i = 0; i < D; ++i) grow[i] += d * s->x[i];
            }
        }
        return loss;
    }

    /// f32 checkpoint with tensors fc1.weight, fc1.bias, fc2.weight, fc2.bias.
    Checkpoint to_checkpoint() const {
        auto tensor = [](Shape shape, std::span<const double> v) {
            std::vector<float> f(v.size());
            for (std::size_t k = 0; k < v.size(); ++k) f[k] = static_cast<float>(v[k]);
            return Tensor(std::move(shape), std::move(f));
        };
        Checkpoint c;
        c.tensors.emplace("fc1.weight", tensor({dims_.hidden, dims_.input}, w1()));
        c.tensors.emplace("fc1.bias", tensor({dims_.hidden}, b1()));
        c.tensors.emplace("fc2.weight", tensor({dims_.classes, dims_.hidden}, w2()));
        c.tensors.emplace("fc2.bias", tensor({dims_.classes}, b2()));
        return c;
    }

    static ToyModel from_checkpoint(const Checkpoint& c, ToyDims dims) {
        ToyModel m(dims);
        auto load = [&](const char* name, const Shape& shape, std::span<double> dst) {
            const auto& t = c.at(name);
            if (t.shape() != shape)
                throw DataError(std::string("toy checkpoint tensor '") + name + "' has shape " + shape_str(t.shape()) +
                                ", expected " + shape_str(shape));
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<double>(t[k]);
        };
        load("fc1.weight", {dims.hidden, dims.input}, m.w1());
        load("fc1.bias", {dims.hidden}, m.b1());
        load("fc2.weight", {dims.classes, dims.hidden}, m.w2());
        load("fc2.bias", {dims.classes}, m.b2());
        return m;
    }

    bool operator==(const ToyModel&) const = default;

private:
    std::size_t off_w2() const { return dims_.hidden * dims_.input + dims_.hidden; }

    ToyDims dims_;
    std::vector<double> theta_;
};

}  // namespace forgetkit
