#pragma once

// Shared error types, deterministic random streams and small numeric helpers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iterator>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace forgetkit {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid input data: bad files, violated preconditions, inconsistent configs.
class DataError : public Error {
public:
    using Error::Error;
};

/// A configuration document is missing a field or carries a bad value.
class ConfigError : public DataError {
public:
    ConfigError(std::string field, const std::string& what)
        : DataError("config field '" + field + "': " + what), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

/// Training-stage task families carried by manifests and examples.
enum class Task { asr, tts, sqa, text };

inline const char* to_string(Task t) {
    switch (t) {
        case Task::asr: return "asr";
        case Task::tts: return "tts";
        case Task::sqa: return "sqa";
        case Task::text: return "text";
    }
    return "?";
}

inline Task parse_task(std::string_view s) {
    if (s == "asr") return Task::asr;
    if (s == "tts") return Task::tts;
    if (s == "sqa") return Task::sqa;
    if (s == "text") return Task::text;
    throw DataError("unknown task '" + std::string(s) + "' (expected asr, tts, sqa or text)");
}

namespace rng {

/// splitmix64 finalizer; a bijective 64-bit mixer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// 64-bit FNV-1a over the bytes of a string.
constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t key_bits(std::uint64_t key) noexcept { return key; }
inline std::uint64_t key_bits(std::string_view key) noexcept { return fnv1a(key); }

/// Combines a seed with integer or string keys into an independent stream seed.
template <typename... Keys>
std::uint64_t derive(std::uint64_t seed, const Keys&... keys) noexcept {
    std::uint64_t h = seed;
    ((h = mix64(h ^ mix64(key_bits(keys)))), ...);
    return mix64(h);
}

/// Engine used for every random stream. mt19937_64's output sequence is fixed
/// by the standard; all distributions below are implemented here rather than
/// taken from <random>, whose distributions are implementation-defined.
using Engine = std::mt19937_64;

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Engine& eng) {
    return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

/// Uniform integer in [0, n) by rejection; n must be positive.
inline std::uint64_t uniform_index(Engine& eng, std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
        x = eng();
    } while (x >= limit);
    return x % n;
}

/// Standard normal deviate (Box-Muller, one value per call).
inline double normal(Engine& eng) {
    double u1;
    do {
        u1 = uniform01(eng);
    } while (u1 <= 0.0);
    const double u2 = uniform01(eng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

/// In-place Fisher-Yates shuffle.
template <typename Range>
void shuffle(Range& r, Engine& eng) {
    const auto n = static_cast<std::uint64_t>(std::size(r));
    for (std::uint64_t i = n; i > 1; --i) {
        const auto j = uniform_index(eng, i);
        using std::swap;
        swap(r[i - 1], r[j]);
    }
}

}  // namespace rng

namespace numeric {

/// Ceiling that absorbs binary representation error in products such as
/// 0.7 * 10 (which evaluates to 7.000000000000001).
inline std::size_t tolerant_ceil(double x) {
    const double r = std::round(x);
    if (std::abs(x - r) <= 1e-9 * std::max(1.0, std::abs(x))) return static_cast<std::size_t>(r);
    return static_cast<std::size_t>(std::ceil(x));
}

/// Round-half-up with the same tolerance, so 0.015 * 100 rounds to 2.
inline std::size_t round_half_up(double x) {
    return static_cast<std::size_t>(std::floor(x + 0.5 + 1e-9 * std::max(1.0, std::abs(x))));
}

inline bool all_finite(const auto& values) {
    for (auto v : values)
        if (!std::isfinite(v)) return false;
    return true;
}

/// JSON integers built in code are signed even when non-negative.
template <typename Json>
bool is_count(const Json& j) {
    return j.is_number_unsigned() || (j.is_number_integer() && j.template get<std::int64_t>() >= 0);
}

}  // namespace numeric

}  // namespace forgetkit
