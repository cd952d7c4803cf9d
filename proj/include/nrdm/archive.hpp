#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "nrdm/tensor.hpp"

// Versioned binary container shared by checkpoints and adversarial batches.
//
//   magic      8 bytes ("NRDMCKPT", "NRDMADVB", ...)
//   version    u32
//   label      u32 length + bytes (architecture or attack name)
//   metadata   u32 length + bytes (JSON text)
//   count      u32 number of tensors
//   per tensor u32 name length + name, u32 rank, u64 extents[rank],
//              float32 payload
//
// All integers and floats are little-endian.

namespace nrdm {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t archive_version = 1;

struct NamedTensor {
    std::string name;
    Tensor value;
};

struct Archive {
    std::string magic;  ///< exactly 8 characters
    std::string label;
    std::string metadata;
    std::vector<NamedTensor> tensors;

    const Tensor& get(std::string_view name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t.value;
        throw FormatError("archive has no tensor named '" + std::string(name) + "'");
    }
};

namespace detail {

template <class U>
void put_le(std::string& out, U value) {
    static_assert(std::is_trivially_copyable_v<U>);
    std::array<char, sizeof(U)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    out.append(bytes.data(), bytes.size());
}

class ByteReader {
public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    template <class U>
    U get() {
        need(sizeof(U));
        std::array<char, sizeof(U)> bytes;
        std::memcpy(bytes.data(), data_.data() + pos_, sizeof(U));
        if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
        pos_ += sizeof(U);
        U value;
        std::memcpy(&value, bytes.data(), sizeof(U));
        return value;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s(data_.substr(pos_, n));
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) throw FormatError("archive truncated");
    }
    std::string_view data_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_archive(const Archive& a) {
    if (a.magic.size() != 8) throw std::invalid_argument("archive magic must be 8 bytes");
    std::string out = a.magic;
    detail::put_le<std::uint32_t>(out, archive_version);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.label.size()));
    out += a.label;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.metadata.size()));
    out += a.metadata;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.tensors.size()));
    for (const auto& t : a.tensors) {
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out += t.name;
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.value.rank()));
        for (std::size_t d : t.value.shape()) detail::put_le<std::uint64_t>(out, d);
        if constexpr (std::endian::native == std::endian::little) {
            out.append(reinterpret_cast<const char*>(t.value.raw()), t.value.size() * sizeof(float));
        } else {
            for (float v : t.value.data()) detail::put_le<float>(out, v);
        }
    }
    return out;
}

inline Archive decode_archive(std::string_view bytes, std::string_view expected_magic) {
    if (bytes.size() < 8 || bytes.substr(0, 8) != expected_magic)
        throw FormatError("bad magic: expected '" + std::string(expected_magic) + "'");
    detail::ByteReader r(bytes.substr(8));
    Archive a;
    a.magic = std::string(expected_magic);
    const auto version = r.get<std::uint32_t>();
    if (version != archive_version) throw FormatError("unsupported archive version " + std::to_string(version));
    a.label = r.bytes(r.get<std::uint32_t>());
    a.metadata = r.bytes(r.get<std::uint32_t>());
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name = r.bytes(r.get<std::uint32_t>());
        const auto rank = r.get<std::uint32_t>();
        if (rank > 8) throw FormatError("tensor '" + t.name + "' has implausible rank");
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
        const std::size_t n = numel(shape);
        const std::string payload = r.bytes(n * sizeof(float));
        std::vector<float> data(n);
        if constexpr (std::endian::native == std::endian::little) {
            std::memcpy(data.data(), payload.data(), payload.size());
        } else {
            detail::ByteReader pr(payload);
            for (auto& v : data) v = pr.get<float>();
        }
        t.value = Tensor(std::move(shape), std::move(data));
        a.tensors.push_back(std::move(t));
    }
    if (!r.done()) throw FormatError("trailing bytes after archive");
    return a;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Writes through a temporary file and renames, so a failed write never
/// leaves a partial artifact behind.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".partial");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            out.close();
            std::filesystem::remove(tmp);
            throw std::runtime_error("write failed for '" + path.string() + "'");
        }
    }
    std::filesystem::rename(tmp, path);
}

inline void save_archive(const std::filesystem::path& path, const Archive& a) {
    write_file_atomic(path, encode_archive(a));
}

inline Archive load_archive(const std::filesystem::path& path, std::string_view expected_magic) {
    return decode_archive(read_file_bytes(path), expected_magic);
}

/// Magic of an archive file, or empty if the file is shorter than 8 bytes.
inline std::string peek_magic(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::string m(8, '\0');
    if (!in.read(m.data(), 8)) return {};
    return m;
}

}  // namespace nrdm
