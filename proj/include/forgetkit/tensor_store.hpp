#pragma once

// Checkpoint container: named f32 tensors in a safetensors-style file.
//
// Layout:
//   [8 bytes]  little-endian u64 N, the header length
//   [N bytes]  UTF-8 JSON header, space padded to a multiple of 8 bytes:
//              { "<name>": {"dtype": "F32", "shape": [...], "data_offsets": [b, e]},
//                "__metadata__": {"<key>": "<value>", ...} }
//   [rest]     data section; offsets are relative to its start
//
// Writing is canonical: tensors are laid out in lexicographic name order,
// JSON keys are sorted, and floats are stored little-endian. Equal
// checkpoints therefore serialize to identical bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "forgetkit/core.hpp"

namespace forgetkit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Dense row-major f32 tensor. The element count always matches the shape.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size())
            throw DataError("tensor shape " + shape_str(shape_) + " needs " +
                            std::to_string(shape_numel(shape_)) + " values, got " +
                            std::to_string(data_.size()));
    }

    static Tensor zeros(Shape shape) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<float>(n, 0.0f));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t numel() const noexcept { return data_.size(); }
    std::span<const float> data() const noexcept { return data_; }
    std::span<float> data() noexcept { return data_; }

    float operator[](std::size_t i) const { return data_[i]; }
    float& operator[](std::size_t i) { return data_[i]; }

    bool operator==(const Tensor&) const = default;

private:
    Shape shape_;
    std::vector<float> data_;
};

/// Named tensors plus free-form string metadata. std::map keeps names in
/// lexicographic order.
struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;

    bool contains(const std::string& name) const { return tensors.count(name) != 0; }

    const Tensor& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw DataError("checkpoint has no tensor '" + name + "'");
        return it->second;
    }

    bool operator==(const Checkpoint&) const = default;
};

enum class MismatchReason { missing_in_left, missing_in_right, shape_mismatch };

inline const char* to_string(MismatchReason r) {
    switch (r) {
        case MismatchReason::missing_in_left: return "missing-in-left";
        case MismatchReason::missing_in_right: return "missing-in-right";
        case MismatchReason::shape_mismatch: return "shape-mismatch";
    }
    return "?";
}

struct Mismatch {
    std::string name;
    MismatchReason reason;
    bool operator==(const Mismatch&) const = default;
};

struct CompatibilityReport {
    std::vector<Mismatch> mismatches;

    bool compatible() const noexcept { return mismatches.empty(); }

    std::string summary() const {
        std::string s;
        for (const auto& m : mismatches) {
            if (!s.empty()) s += ", ";
            s += m.name + " (" + to_string(m.reason) + ")";
        }
        return s.empty() ? "compatible" : s;
    }
};

/// Thrown when an operation needs compatible checkpoints and gets others.
class CompatibilityError : public DataError {
public:
    explicit CompatibilityError(CompatibilityReport report, const std::string& context = "")
        : DataError((context.empty() ? "" : context + ": ") + "incompatible checkpoints: " +
                    report.summary()),
          report_(std::move(report)) {}

    const CompatibilityReport& report() const noexcept { return report_; }

private:
    CompatibilityReport report_;
};

/// Compares key sets and shapes. Names listed in `ignore` are skipped.
inline CompatibilityReport validate_compatible(const Checkpoint& a, const Checkpoint& b,
                                               const std::set<std::string>& ignore = {}) {
    CompatibilityReport report;
    auto ia = a.tensors.begin();
    auto ib = b.tensors.begin();
    auto push = [&](const std::string& name, MismatchReason r) {
        if (!ignore.count(name)) report.mismatches.push_back({name, r});
    };
    while (ia != a.tensors.end() || ib != b.tensors.end()) {
        if (ib == b.tensors.end() || (ia != a.tensors.end() && ia->first < ib->first)) {
            push(ia->first, MismatchReason::missing_in_right);
            ++ia;
        } else if (ia == a.tensors.end() || ib->first < ia->first) {
            push(ib->first, MismatchReason::missing_in_left);
            ++ib;
        } else {
            if (ia->second.shape() != ib->second.shape())
                push(ia->first, MismatchReason::shape_mismatch);
            ++ia;
            ++ib;
        }
    }
    return report;
}

/// Failure while decoding or encoding a checkpoint container.
class CheckpointFormatError : public DataError {
public:
    enum class Kind { io, malformed_header, truncated_data, duplicate_name, non_finite };

    CheckpointFormatError(Kind kind, std::string tensor, const std::string& detail)
        : DataError(describe(kind, tensor, detail)), kind_(kind), tensor_(std::move(tensor)), detail_(detail) {}

    Kind kind() const noexcept { return kind_; }
    /// Offending tensor name; empty when the problem is not tied to one tensor.
    const std::string& tensor() const noexcept { return tensor_; }
    const std::string& detail() const noexcept { return detail_; }

private:
    static std::string describe(Kind kind, const std::string& tensor, const std::string& detail) {
        std::string what;
        switch (kind) {
            case Kind::io: what = "I/O error"; break;
            case Kind::malformed_header: what = "malformed header"; break;
            case Kind::truncated_data: what = "truncated data section"; break;
            case Kind::duplicate_name: what = "duplicate tensor name"; break;
            case Kind::non_finite: what = "non-finite value"; break;
        }
        if (!tensor.empty()) what += " in tensor '" + tensor + "'";
        if (!detail.empty()) what += ": " + detail;
        return what;
    }

    Kind kind_;
    std::string tensor_;
    std::string detail_;
};

namespace detail {

inline constexpr const char* kMetadataKey = "__metadata__";

inline void require_finite(const std::string& name, const Tensor& t) {
    const auto d = t.data();
    for (std::size_t i = 0; i < d.size(); ++i)
        if (!std::isfinite(d[i]))
            throw CheckpointFormatError(CheckpointFormatError::Kind::non_finite, name,
                                        "element " + std::to_string(i));
}

inline void put_u32_le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32_le(const unsigned char* p) {
    return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
           (std::uint32_t{p[3]} << 24);
}

}  // namespace detail

/// Encodes a checkpoint into container bytes. Refuses non-finite values.
inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
    using Kind = CheckpointFormatError::Kind;
    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        if (name.empty()) throw CheckpointFormatError(Kind::malformed_header, "", "empty tensor name");
        if (name == detail::kMetadataKey)
            throw CheckpointFormatError(Kind::malformed_header, name, "reserved tensor name");
        detail::require_finite(name, t);
        const std::uint64_t bytes = 4 * static_cast<std::uint64_t>(t.numel());
        header[name] = {{"dtype", "F32"}, {"shape", t.shape()}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    if (!ckpt.metadata.empty()) header[detail::kMetadataKey] = ckpt.metadata;

    std::string head = header.dump();
    head.append((8 - head.size() % 8) % 8, ' ');

    std::string out;
    out.reserve(8 + head.size() + offset);
    const std::uint64_t n = head.size();
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((n >> (8 * i)) & 0xffu));
    out += head;
    for (const auto& [name, t] : ckpt.tensors)
        for (float v : t.data()) detail::put_u32_le(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

/// Decodes container bytes, enforcing every checkpoint invariant.
inline Checkpoint parse_checkpoint(std::span<const unsigned char> bytes) {
    using Kind = CheckpointFormatError::Kind;
    if (bytes.size() < 8) throw CheckpointFormatError(Kind::malformed_header, "", "file shorter than 8 bytes");
    std::uint64_t header_len = 0;
    for (int i = 0; i < 8; ++i) header_len |= std::uint64_t{bytes[i]} << (8 * i);
    if (header_len > bytes.size() - 8)
        throw CheckpointFormatError(Kind::malformed_header, "",
                                    "header length " + std::to_string(header_len) + " exceeds file size");

    const auto* head_begin = reinterpret_cast<const char*>(bytes.data() + 8);
    std::set<std::string> seen;
    std::string duplicate;
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(
            head_begin, head_begin + header_len,
            [&](int depth, nlohmann::json::parse_event_t event, nlohmann::json& parsed) {
                if (event == nlohmann::json::parse_event_t::key && depth == 1 && duplicate.empty()) {
                    auto key = parsed.get<std::string>();
                    if (!seen.insert(key).second) duplicate = key;
                }
                return true;
            });
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointFormatError(Kind::malformed_header, "", e.what());
    }
    if (!duplicate.empty()) throw CheckpointFormatError(Kind::duplicate_name, duplicate, "");
    if (!header.is_object()) throw CheckpointFormatError(Kind::malformed_header, "", "header is not a JSON object");

    const auto data = bytes.subspan(8 + header_len);
    Checkpoint ckpt;
    for (const auto& [name, entry] : header.items()) {
        if (name == detail::kMetadataKey) {
            if (!entry.is_object())
                throw CheckpointFormatError(Kind::malformed_header, "", "__metadata__ must be an object");
            for (const auto& [k, v] : entry.items()) {
                if (!v.is_string())
                    throw CheckpointFormatError(Kind::malformed_header, "", "metadata value for '" + k + "' is not a string");
                ckpt.metadata[k] = v.get<std::string>();
            }
            continue;
        }
        if (name.empty()) throw CheckpointFormatError(Kind::malformed_header, "", "empty tensor name");
        if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
            !entry.contains("data_offsets"))
            throw CheckpointFormatError(Kind::malformed_header, name, "entry needs dtype, shape and data_offsets");
        if (entry["dtype"] != "F32")
            throw CheckpointFormatError(Kind::malformed_header, name, "unsupported dtype " + entry["dtype"].dump());

        Shape shape;
        std::uint64_t begin = 0, end = 0;
        try {
            shape = entry["shape"].get<Shape>();
            const auto& offs = entry["data_offsets"];
            if (!offs.is_array() || offs.size() != 2) throw std::runtime_error("data_offsets must have two entries");
            begin = offs[0].get<std::uint64_t>();
            end = offs[1].get<std::uint64_t>();
        } catch (const std::exception& e) {
            throw CheckpointFormatError(Kind::malformed_header, name, e.what());
        }
        const std::uint64_t numel = shape_numel(shape);
        if (end < begin || end - begin != 4 * numel)
            throw CheckpointFormatError(Kind::malformed_header, name,
                                        "data_offsets span " + std::to_string(end - begin) + " bytes, shape " +
                                            shape_str(shape) + " needs " + std::to_string(4 * numel));
        if (end > data.size())
            throw CheckpointFormatError(Kind::truncated_data, name,
                                        "needs bytes up to " + std::to_string(end) + ", data section has " +
                                            std::to_string(data.size()));
        std::vector<float> values(numel);
        for (std::size_t i = 0; i < numel; ++i)
            values[i] = std::bit_cast<float>(detail::get_u32_le(data.data() + begin + 4 * i));
        Tensor t(std::move(shape), std::move(values));
        detail::require_finite(name, t);
        ckpt.tensors.emplace(name, std::move(t));
    }
    return ckpt;
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw CheckpointFormatError(CheckpointFormatError::Kind::io, "", "cannot open '" + path.string() + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return parse_checkpoint(bytes);
    } catch (const CheckpointFormatError& e) {
        throw CheckpointFormatError(e.kind(), e.tensor(), e.detail() + " (file '" + path.string() + "')");
    }
}

inline void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const std::string bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw CheckpointFormatError(CheckpointFormatError::Kind::io, "", "cannot write '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw CheckpointFormatError(CheckpointFormatError::Kind::io, "", "write failed for '" + path.string() + "'");
}

}  // namespace forgetkit
