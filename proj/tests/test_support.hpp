#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "forgetkit/tensor_store.hpp"

namespace testing_support {

namespace fs = std::filesystem;

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::uint64_t counter = 0;
        std::random_device rd;
        path_ = fs::temp_directory_path() /
                ("forgetkit_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& name) const { return path_ / name; }

private:
    fs::path path_;
};

inline std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << s;
}

inline std::vector<float> random_floats(std::mt19937_64& g, std::size_t n, float lo = -2.0f, float hi = 2.0f) {
    std::uniform_real_distribution<float> d(lo, hi);
    std::vector<float> v(n);
    for (auto& x : v) x = d(g);
    return v;
}

inline forgetkit::Tensor random_tensor(std::mt19937_64& g, forgetkit::Shape shape) {
    const auto n = forgetkit::shape_numel(shape);
    return forgetkit::Tensor(std::move(shape), random_floats(g, n));
}

/// Checkpoints sharing one random layout of 1..3 tensors, each at most 8x8.
inline std::vector<forgetkit::Checkpoint> random_family(std::mt19937_64& g, std::size_t count) {
    std::uniform_int_distribution<std::size_t> ntensors(1, 3), dim(1, 8), rank(1, 2);
    std::vector<std::pair<std::string, forgetkit::Shape>> layout;
    const std::size_t n = ntensors(g);
    for (std::size_t t = 0; t < n; ++t) {
        forgetkit::Shape s;
        for (std::size_t r = rank(g); r > 0; --r) s.push_back(dim(g));
        layout.emplace_back("layer" + std::to_string(t) + ".weight", s);
    }
    std::vector<forgetkit::Checkpoint> out(count);
    for (auto& c : out)
        for (const auto& [name, shape] : layout) c.tensors.emplace(name, random_tensor(g, shape));
    return out;
}

inline bool close_rel(double got, double want, double rel, double abs_floor = 1e-12) {
    return std::abs(got - want) <= rel * std::max(std::abs(want), abs_floor) + abs_floor;
}

}  // namespace testing_support
