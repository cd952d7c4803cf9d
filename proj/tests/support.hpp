#pragma once

#include <filesystem>
#include <fstream>
#include <ostream>
#include <random>
#include <string>

#include <unistd.h>

#include "nrdm/models.hpp"
#include "nrdm/ops.hpp"
#include "nrdm/random.hpp"

namespace nrdm::testing {

template <class T = float>
BasicTensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    BasicTensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

inline Tensor random_pixels(Shape shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<float>(rng.below(256));
    return t;
}

/// logits = W flatten(x) + b, tap = A flatten(x). Closed-form oracle model.
struct LinearModel {
    using scalar_type = float;
    Tensor weight;                 ///< [K, D]
    Tensor bias;                   ///< [K]
    Tensor tap_matrix;             ///< [P, D]

    ForwardOutput forward_with_tap(Tape<float>& tape, Var x) const {
        const Var flat = flatten(tape, x);
        const Var logits = dense(tape, flat, tape.constant(weight), tape.constant(bias));
        const Var tap = dense(tape, flat, tape.constant(tap_matrix), std::nullopt);
        return {logits, tap};
    }
};

/// Two-class linear model whose cross-entropy gradient for label 0 is a
/// positive multiple of w: logits (0, w.x).
inline LinearModel two_class_linear(const std::vector<float>& w) {
    const std::size_t d = w.size();
    std::vector<float> W(2 * d, 0.0f);
    std::copy(w.begin(), w.end(), W.begin() + static_cast<std::ptrdiff_t>(d));
    return {Tensor({2, d}, W), Tensor({2}), Tensor({1, d}, w)};
}

/// Logits are the flattened input itself, tap is the input: the identity test double.
struct IdentityModel {
    using scalar_type = float;
    ForwardOutput forward_with_tap(Tape<float>& tape, Var x) const {
        const Var flat = flatten(tape, x);
        return {flat, x};
    }
};

class TempDir {
public:
    TempDir() {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("nrdm_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string be32(std::uint32_t v) {
    return {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
}

/// IDX files for a random MNIST-shaped dataset under the standard names.
inline void write_mnist_dir(const std::filesystem::path& dir, std::size_t n_train, std::size_t n_test,
                            std::uint64_t seed) {
    std::filesystem::create_directories(dir);
    Rng rng(seed);
    for (const auto& [prefix, n] : {std::pair{"train", n_train}, std::pair{"t10k", n_test}}) {
        std::string pix, lab;
        for (std::size_t i = 0; i < n * 784; ++i) pix.push_back(static_cast<char>(rng.below(256)));
        for (std::size_t i = 0; i < n; ++i) lab.push_back(static_cast<char>(rng.below(10)));
        const auto count = static_cast<std::uint32_t>(n);
        write_bytes(dir / (std::string(prefix) + "-images-idx3-ubyte"), be32(0x803) + be32(count) + be32(28) + be32(28) + pix);
        write_bytes(dir / (std::string(prefix) + "-labels-idx1-ubyte"), be32(0x801) + be32(count) + lab);
    }
}

}  // namespace nrdm::testing

namespace nrdm {

// Readable gtest failure messages for tensors.
template <class T>
void PrintTo(const BasicTensor<T>& t, std::ostream* os) {
    *os << to_string(t.shape()) << " [";
    for (std::size_t i = 0; i < std::min<std::size_t>(t.size(), 8); ++i) *os << (i ? ", " : "") << t[i];
    *os << (t.size() > 8 ? ", ...]" : "]");
}

}  // namespace nrdm
