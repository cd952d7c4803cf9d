#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nrdm/archive.hpp"
#include "nrdm/random.hpp"
#include "nrdm/tensor.hpp"

namespace nrdm {

/// Malformed or inconsistent dataset files.
class DataError : public std::runtime_error {
public:
    enum class Kind { io, bad_magic, truncated, count_mismatch, bad_size };
    DataError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

/// Images as [N,C,H,W] floats holding raw byte values in [0,255].
struct Dataset {
    std::string name;   ///< "mnist" or "cifar10"
    std::string split;  ///< "train" or "test"
    Tensor images;
    std::vector<int> labels;

    std::size_t size() const noexcept { return labels.size(); }
};

inline constexpr std::uint32_t idx_image_magic = 0x00000803;
inline constexpr std::uint32_t idx_label_magic = 0x00000801;
inline constexpr std::size_t cifar_record_bytes = 1 + 3 * 32 * 32;

namespace detail {

inline std::uint32_t read_be32(const std::string& bytes, std::size_t offset) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + offset);
    return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

inline std::string read_dataset_file(const std::filesystem::path& path) {
    try {
        return read_file_bytes(path);
    } catch (const std::exception& e) {
        throw DataError(DataError::Kind::io, e.what());
    }
}

}  // namespace detail

/// Reads an IDX image file (magic 0x803) and label file (magic 0x801).
inline Dataset load_mnist(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                          std::string split = "test") {
    const std::string img = detail::read_dataset_file(images_path);
    const std::string lab = detail::read_dataset_file(labels_path);
    if (img.size() < 16) throw DataError(DataError::Kind::truncated, "IDX image header truncated: " + images_path.string());
    if (lab.size() < 8) throw DataError(DataError::Kind::truncated, "IDX label header truncated: " + labels_path.string());
    if (const auto m = detail::read_be32(img, 0); m != idx_image_magic)
        throw DataError(DataError::Kind::bad_magic, "IDX image magic mismatch in " + images_path.string() +
                                                        ": got " + std::to_string(m));
    if (const auto m = detail::read_be32(lab, 0); m != idx_label_magic)
        throw DataError(DataError::Kind::bad_magic, "IDX label magic mismatch in " + labels_path.string() +
                                                        ": got " + std::to_string(m));
    const std::size_t n = detail::read_be32(img, 4), rows = detail::read_be32(img, 8), cols = detail::read_be32(img, 12);
    const std::size_t n_labels = detail::read_be32(lab, 4);
    if (img.size() < 16 + n * rows * cols)
        throw DataError(DataError::Kind::truncated, "IDX image payload truncated: " + images_path.string());
    if (lab.size() < 8 + n_labels)
        throw DataError(DataError::Kind::truncated, "IDX label payload truncated: " + labels_path.string());
    if (n != n_labels)
        throw DataError(DataError::Kind::count_mismatch, std::to_string(n) + " images but " +
                                                             std::to_string(n_labels) + " labels");
    if (n == 0 || rows == 0 || cols == 0) throw DataError(DataError::Kind::bad_size, "empty IDX file");

    std::vector<float> pixels(n * rows * cols);
    const auto* src = reinterpret_cast<const unsigned char*>(img.data() + 16);
    std::transform(src, src + pixels.size(), pixels.begin(), [](unsigned char b) { return static_cast<float>(b); });
    std::vector<int> labels(n);
    const auto* lsrc = reinterpret_cast<const unsigned char*>(lab.data() + 8);
    for (std::size_t i = 0; i < n; ++i) {
        if (lsrc[i] > 9) throw DataError(DataError::Kind::bad_size, "label out of range at index " + std::to_string(i));
        labels[i] = lsrc[i];
    }
    return {"mnist", std::move(split), Tensor(Shape{n, 1, rows, cols}, std::move(pixels)), std::move(labels)};
}

/// Reads CIFAR-10 binary batches: records of 1 label byte + 1024 R, 1024 G,
/// 1024 B bytes.
inline Dataset load_cifar10(std::span<const std::filesystem::path> batch_paths, std::string split = "test") {
    std::vector<float> pixels;
    std::vector<int> labels;
    for (const auto& path : batch_paths) {
        const std::string bytes = detail::read_dataset_file(path);
        if (bytes.empty() || bytes.size() % cifar_record_bytes != 0)
            throw DataError(DataError::Kind::bad_size, "CIFAR-10 file " + path.string() + " has " +
                                                           std::to_string(bytes.size()) +
                                                           " bytes, not a multiple of 3073");
        const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
        const std::size_t records = bytes.size() / cifar_record_bytes;
        for (std::size_t r = 0; r < records; ++r, p += cifar_record_bytes) {
            if (p[0] > 9)
                throw DataError(DataError::Kind::bad_size, "CIFAR-10 label out of range in " + path.string());
            labels.push_back(p[0]);
            for (std::size_t i = 1; i < cifar_record_bytes; ++i) pixels.push_back(static_cast<float>(p[i]));
        }
    }
    if (labels.empty()) throw DataError(DataError::Kind::bad_size, "no CIFAR-10 batches given");
    const std::size_t n = labels.size();
    return {"cifar10", std::move(split), Tensor(Shape{n, 3, 32, 32}, std::move(pixels)), std::move(labels)};
}

/// Standard file names inside a dataset directory.
inline Dataset load_dataset(const std::string& name, const std::filesystem::path& dir, const std::string& split) {
    if (split != "train" && split != "test") throw std::invalid_argument("split must be 'train' or 'test'");
    if (name == "mnist") {
        const std::string prefix = split == "train" ? "train" : "t10k";
        return load_mnist(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"), split);
    }
    if (name == "cifar10") {
        std::vector<std::filesystem::path> paths;
        if (split == "train")
            for (int i = 1; i <= 5; ++i) paths.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
        else
            paths.push_back(dir / "test_batch.bin");
        return load_cifar10(paths, split);
    }
    throw std::invalid_argument("unknown dataset '" + name + "' (expected mnist or cifar10)");
}

/// `count` samples drawn without replacement with a fixed seed, kept in
/// ascending index order. count >= size returns the dataset unchanged.
inline Dataset subsample(const Dataset& d, std::size_t count, std::uint64_t seed) {
    if (count == 0 || count >= d.size()) return d;
    std::vector<std::size_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.below(d.size() - i)]);
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    Dataset out{d.name, d.split, gather_rows(d.images, std::span<const std::size_t>(idx)), {}};
    for (std::size_t i : idx) out.labels.push_back(d.labels[i]);
    return out;
}

}  // namespace nrdm
