#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "nrdm/tensor.hpp"

// Input-transformation defenses on [C,H,W] or [N,C,H,W] images in [0,255].

namespace nrdm {

enum class DefenseKind { none, jpeg, tvm, median };

struct DefenseConfig {
    DefenseKind kind = DefenseKind::none;
    int quality = 75;          ///< jpeg, 1..100
    double weight = 30.0;      ///< tvm, > 0
    int window = 3;            ///< median, odd >= 3
    int tvm_iterations = 50;

    void validate() const {
        switch (kind) {
            case DefenseKind::jpeg:
                if (quality < 1 || quality > 100) throw std::invalid_argument("defense.quality must lie in [1,100]");
                break;
            case DefenseKind::tvm:
                if (!(weight > 0) || !std::isfinite(weight)) throw std::invalid_argument("defense.weight must be > 0");
                if (tvm_iterations < 1) throw std::invalid_argument("defense.tvm_iterations must be >= 1");
                break;
            case DefenseKind::median:
                if (window < 3 || window % 2 == 0) throw std::invalid_argument("defense.window must be odd and >= 3");
                break;
            case DefenseKind::none: break;
        }
    }

    /// Stable label used in reports, e.g. "jpeg:75", "tvm:30", "median:3".
    std::string label() const {
        std::ostringstream s;
        switch (kind) {
            case DefenseKind::none: return "none";
            case DefenseKind::jpeg: s << "jpeg:" << quality; break;
            case DefenseKind::tvm: s << "tvm:" << weight; break;
            case DefenseKind::median: s << "median:" << window; break;
        }
        return s.str();
    }
};

inline DefenseKind parse_defense_kind(std::string_view name) {
    if (name == "none") return DefenseKind::none;
    if (name == "jpeg") return DefenseKind::jpeg;
    if (name == "tvm") return DefenseKind::tvm;
    if (name == "median") return DefenseKind::median;
    throw std::invalid_argument("unknown defense '" + std::string(name) + "' (expected none, jpeg, tvm or median)");
}

inline std::string_view defense_kind_name(DefenseKind k) {
    switch (k) {
        case DefenseKind::none: return "none";
        case DefenseKind::jpeg: return "jpeg";
        case DefenseKind::tvm: return "tvm";
        case DefenseKind::median: return "median";
    }
    return "?";
}

namespace detail {

inline void require_image(const Tensor& img, const char* op) {
    if (img.rank() != 3) throw ShapeError(std::string(op) + ": expected [C,H,W], got " + to_string(img.shape()));
}

inline constexpr std::array<int, 64> jpeg_luma_table{
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

inline constexpr std::array<int, 64> jpeg_chroma_table{
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99,
    99, 99, 47, 66, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

inline std::array<double, 64> scaled_table(const std::array<int, 64>& base, int quality) {
    const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    std::array<double, 64> out{};
    for (std::size_t i = 0; i < 64; ++i) out[i] = std::clamp((base[i] * scale + 50) / 100, 1, 255);
    return out;
}

/// Orthonormal 8-point DCT-II basis: basis[u][x].
inline const std::array<std::array<double, 8>, 8>& dct_basis() {
    static const auto basis = [] {
        std::array<std::array<double, 8>, 8> b{};
        for (int u = 0; u < 8; ++u)
            for (int x = 0; x < 8; ++x)
                b[u][x] = (u == 0 ? std::sqrt(0.125) : 0.5) * std::cos((2 * x + 1) * u * std::numbers::pi / 16);
        return b;
    }();
    return basis;
}

/// Quantises one plane in 8x8 blocks; extents are edge-replicated up to a
/// multiple of 8 and cropped back.
inline void jpeg_plane(std::vector<double>& plane, std::size_t h, std::size_t w, const std::array<double, 64>& q) {
    const std::size_t ph = (h + 7) / 8 * 8, pw = (w + 7) / 8 * 8;
    std::vector<double> padded(ph * pw);
    for (std::size_t i = 0; i < ph; ++i)
        for (std::size_t j = 0; j < pw; ++j) padded[i * pw + j] = plane[std::min(i, h - 1) * w + std::min(j, w - 1)];
    const auto& B = dct_basis();
    std::array<double, 64> blk{}, tmp{};
    for (std::size_t bi = 0; bi < ph; bi += 8)
        for (std::size_t bj = 0; bj < pw; bj += 8) {
            for (std::size_t i = 0; i < 8; ++i)
                for (std::size_t j = 0; j < 8; ++j) blk[i * 8 + j] = padded[(bi + i) * pw + bj + j] - 128.0;
            // forward: C = B X B^T
            for (std::size_t u = 0; u < 8; ++u)
                for (std::size_t j = 0; j < 8; ++j) {
                    double s = 0;
                    for (std::size_t i = 0; i < 8; ++i) s += B[u][i] * blk[i * 8 + j];
                    tmp[u * 8 + j] = s;
                }
            for (std::size_t u = 0; u < 8; ++u)
                for (std::size_t v = 0; v < 8; ++v) {
                    double s = 0;
                    for (std::size_t j = 0; j < 8; ++j) s += tmp[u * 8 + j] * B[v][j];
                    blk[u * 8 + v] = std::round(s / q[u * 8 + v]) * q[u * 8 + v];
                }
            // inverse: X = B^T C B
            for (std::size_t i = 0; i < 8; ++i)
                for (std::size_t v = 0; v < 8; ++v) {
                    double s = 0;
                    for (std::size_t u = 0; u < 8; ++u) s += B[u][i] * blk[u * 8 + v];
                    tmp[i * 8 + v] = s;
                }
            for (std::size_t i = 0; i < 8; ++i)
                for (std::size_t j = 0; j < 8; ++j) {
                    double s = 0;
                    for (std::size_t v = 0; v < 8; ++v) s += tmp[i * 8 + v] * B[v][j];
                    padded[(bi + i) * pw + bj + j] = s + 128.0;
                }
        }
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) plane[i * w + j] = padded[i * pw + j];
}

inline float to_pixel(double v) { return static_cast<float>(std::clamp(std::round(v), 0.0, 255.0)); }

}  // namespace detail

/// Lossy part of baseline JPEG (no chroma subsampling, entropy coding
/// omitted). Grayscale uses the luminance table; RGB goes through YCbCr with
/// the chrominance table on Cb and Cr. Output is integer-valued.
inline Tensor jpeg_roundtrip(const Tensor& image, int quality) {
    detail::require_image(image, "jpeg_roundtrip");
    if (quality < 1 || quality > 100) throw std::invalid_argument("jpeg quality must lie in [1,100]");
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2), area = h * w;
    if (c != 1 && c != 3) throw ShapeError("jpeg_roundtrip supports 1 or 3 channels");
    const auto luma = detail::scaled_table(detail::jpeg_luma_table, quality);
    Tensor out(image.shape());
    if (c == 1) {
        std::vector<double> p(image.data().begin(), image.data().end());
        detail::jpeg_plane(p, h, w, luma);
        for (std::size_t i = 0; i < area; ++i) out[i] = detail::to_pixel(p[i]);
        return out;
    }
    const auto chroma = detail::scaled_table(detail::jpeg_chroma_table, quality);
    std::vector<double> y(area), cb(area), cr(area);
    for (std::size_t i = 0; i < area; ++i) {
        const double r = image[i], g = image[area + i], b = image[2 * area + i];
        y[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        cb[i] = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
        cr[i] = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
    }
    detail::jpeg_plane(y, h, w, luma);
    detail::jpeg_plane(cb, h, w, chroma);
    detail::jpeg_plane(cr, h, w, chroma);
    for (std::size_t i = 0; i < area; ++i) {
        const double yy = y[i], u = cb[i] - 128.0, v = cr[i] - 128.0;
        out[i] = detail::to_pixel(yy + 1.402 * v);
        out[area + i] = detail::to_pixel(yy - 0.344136 * u - 0.714136 * v);
        out[2 * area + i] = detail::to_pixel(yy + 1.772 * u);
    }
    return out;
}

/// Isotropic total-variation denoising, min ||u - f||^2 + lambda TV(u) per
/// channel, by Chambolle's dual projection. Images are scaled to [0,1]
/// internally and lambda = 1 / weight.
inline Tensor tvm_denoise(const Tensor& image, double weight, int iterations = 50) {
    detail::require_image(image, "tvm_denoise");
    if (!(weight > 0)) throw std::invalid_argument("tvm weight must be > 0");
    if (iterations < 1) throw std::invalid_argument("tvm iterations must be >= 1");
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2), area = h * w;
    // ||u-f||^2 + lambda TV(u)  <=>  ||u-f||^2 / (2 theta) + TV(u) with theta = lambda / 2
    const double theta = 0.5 / weight;
    const double tau = 0.25;
    Tensor out(image.shape());
    std::vector<double> f(area), px(area), py(area), div(area), gx(area), gy(area);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < area; ++i) f[i] = image[ch * area + i] / 255.0;
        std::fill(px.begin(), px.end(), 0.0);
        std::fill(py.begin(), py.end(), 0.0);
        auto divergence = [&] {
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) {
                    const std::size_t k = i * w + j;
                    double d = 0;
                    if (j + 1 < w) d += px[k];
                    if (j > 0) d -= px[k - 1];
                    if (i + 1 < h) d += py[k];
                    if (i > 0) d -= py[k - w];
                    div[k] = d;
                }
        };
        for (int it = 0; it < iterations; ++it) {
            divergence();
            for (std::size_t k = 0; k < area; ++k) gx[k] = div[k] - f[k] / theta;  // reuse gx as the field
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) {
                    const std::size_t k = i * w + j;
                    const double dx = j + 1 < w ? gx[k + 1] - gx[k] : 0.0;
                    const double dy = i + 1 < h ? gx[k + w] - gx[k] : 0.0;
                    gy[k] = std::hypot(dx, dy);
                    px[k] = (px[k] + tau * dx);
                    py[k] = (py[k] + tau * dy);
                }
            for (std::size_t k = 0; k < area; ++k) {
                px[k] /= 1.0 + tau * gy[k];
                py[k] /= 1.0 + tau * gy[k];
            }
        }
        divergence();
        for (std::size_t k = 0; k < area; ++k)
            out[ch * area + k] = static_cast<float>(std::clamp(255.0 * (f[k] - theta * div[k]), 0.0, 255.0));
    }
    return out;
}

/// Index into [0, n) with half-sample symmetric reflection (a b | b a).
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
    const auto m = static_cast<std::ptrdiff_t>(n);
    const std::ptrdiff_t period = 2 * m;
    i %= period;
    if (i < 0) i += period;
    return static_cast<std::size_t>(i < m ? i : period - 1 - i);
}

/// Per-channel sliding-window median with reflected edges.
inline Tensor median_filter(const Tensor& image, int window) {
    detail::require_image(image, "median_filter");
    if (window < 3 || window % 2 == 0) throw std::invalid_argument("median window must be odd and >= 3");
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    const std::ptrdiff_t r = window / 2;
    Tensor out(image.shape());
    std::vector<float> buf(static_cast<std::size_t>(window * window));
    for (std::size_t ch = 0; ch < c; ++ch) {
        const float* src = image.raw() + ch * h * w;
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j) {
                std::size_t n = 0;
                for (std::ptrdiff_t di = -r; di <= r; ++di)
                    for (std::ptrdiff_t dj = -r; dj <= r; ++dj)
                        buf[n++] = src[reflect_index(static_cast<std::ptrdiff_t>(i) + di, h) * w +
                                       reflect_index(static_cast<std::ptrdiff_t>(j) + dj, w)];
                std::nth_element(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(n / 2), buf.end());
                out.raw()[ch * h * w + i * w + j] = buf[n / 2];
            }
    }
    return out;
}

/// Applies a defense to one [C,H,W] image or every image of an [N,C,H,W] batch.
inline Tensor apply_defense(const DefenseConfig& cfg, const Tensor& images) {
    cfg.validate();
    if (cfg.kind == DefenseKind::none) return images;
    auto one = [&](const Tensor& img) {
        switch (cfg.kind) {
            case DefenseKind::jpeg: return jpeg_roundtrip(img, cfg.quality);
            case DefenseKind::tvm: return tvm_denoise(img, cfg.weight, cfg.tvm_iterations);
            case DefenseKind::median: return median_filter(img, cfg.window);
            case DefenseKind::none: break;
        }
        return img;
    };
    if (images.rank() == 3) return one(images);
    if (images.rank() != 4) throw ShapeError("apply_defense expects [C,H,W] or [N,C,H,W]");
    Tensor out(images.shape());
    const Shape single{images.dim(1), images.dim(2), images.dim(3)};
    const std::size_t per = numel(single);
    for (std::size_t b = 0; b < images.dim(0); ++b) {
        const Tensor img(single, std::vector<float>(images.raw() + b * per, images.raw() + (b + 1) * per));
        const Tensor d = one(img);
        std::copy(d.data().begin(), d.data().end(), out.raw() + b * per);
    }
    return out;
}

}  // namespace nrdm
