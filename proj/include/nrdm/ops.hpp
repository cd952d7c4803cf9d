#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nrdm/blas.hpp"
#include "nrdm/tape.hpp"
#include "nrdm/tensor.hpp"

// Differentiable operations recorded on a Tape. Every op computes its forward
// value eagerly and, when an input requires a gradient, registers a closure
// that pushes d(loss)/d(input) back through Tape::accumulate().

namespace nrdm {

namespace detail {

inline void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

template <class T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* op) {
    if (t.rank() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         to_string(t.shape()));
}

/// Geometry of a square-kernel convolution or pooling window.
struct Window2d {
    std::size_t channels, height, width;
    std::size_t kernel, stride, padding;
    std::size_t out_h, out_w;

    static Window2d make(std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t s,
                         std::size_t p, const char* op) {
        require(s >= 1, std::string(op) + ": stride must be >= 1");
        require(k >= 1 && k <= h + 2 * p && k <= w + 2 * p,
                std::string(op) + ": window " + std::to_string(k) + " exceeds padded extent " +
                    std::to_string(h + 2 * p) + "x" + std::to_string(w + 2 * p));
        return {c, h, w, k, s, p, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1};
    }
    std::size_t col_rows() const { return channels * kernel * kernel; }
    std::size_t out_area() const { return out_h * out_w; }
};

/// Output columns [lo, hi) whose input column ow*stride + k - pad is inside [0, extent).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t extent, std::size_t k,
                                                       std::size_t stride, std::size_t pad) {
    // smallest ow with ow*stride + k >= pad
    const std::size_t lo = k >= pad ? 0 : (pad - k + stride - 1) / stride;
    // largest ow with ow*stride + k - pad <= extent - 1
    const std::size_t limit = extent - 1 + pad;
    const std::size_t hi = k > limit ? 0 : std::min(out, (limit - k) / stride + 1);
    return {std::min(lo, hi), hi};
}

/// Unfolds `count` samples (starting at `src`) into col[C*k*k, count*out_area].
template <class T>
void im2col(const T* src, std::size_t count, const Window2d& g, T* col) {
    const std::size_t image = g.channels * g.height * g.width;
    const std::size_t cols = count * g.out_area();
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
            const auto [oh_lo, oh_hi] = valid_range(g.out_h, g.height, ki, g.stride, g.padding);
            for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                const auto [ow_lo, ow_hi] = valid_range(g.out_w, g.width, kj, g.stride, g.padding);
                T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * cols;
                for (std::size_t b = 0; b < count; ++b) {
                    const T* plane = src + b * image + c * g.height * g.width;
                    T* out = row + b * g.out_area();
                    std::fill_n(out, oh_lo * g.out_w, T{0});
                    for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                        const T* line = plane + (oh * g.stride + ki - g.padding) * g.width;
                        T* dst = out + oh * g.out_w;
                        std::fill_n(dst, ow_lo, T{0});
                        if (g.stride == 1) {
                            std::copy_n(line + ow_lo + kj - g.padding, ow_hi - ow_lo, dst + ow_lo);
                        } else {
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                                dst[ow] = line[ow * g.stride + kj - g.padding];
                        }
                        std::fill(dst + ow_hi, dst + g.out_w, T{0});
                    }
                    std::fill(out + oh_hi * g.out_w, out + g.out_area(), T{0});
                }
            }
        }
}

/// Adjoint of im2col: scatter-adds col back into `count` images at `dst`.
template <class T>
void col2im(const T* col, std::size_t count, const Window2d& g, T* dst) {
    const std::size_t image = g.channels * g.height * g.width;
    const std::size_t cols = count * g.out_area();
    for (std::size_t c = 0; c < g.channels; ++c)
        for (std::size_t ki = 0; ki < g.kernel; ++ki) {
            const auto [oh_lo, oh_hi] = valid_range(g.out_h, g.height, ki, g.stride, g.padding);
            for (std::size_t kj = 0; kj < g.kernel; ++kj) {
                const auto [ow_lo, ow_hi] = valid_range(g.out_w, g.width, kj, g.stride, g.padding);
                const T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * cols;
                for (std::size_t b = 0; b < count; ++b) {
                    T* plane = dst + b * image + c * g.height * g.width;
                    const T* in = row + b * g.out_area();
                    for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                        T* line = plane + (oh * g.stride + ki - g.padding) * g.width;
                        const T* src = in + oh * g.out_w;
                        if (g.stride == 1) {
                            T* base = line + kj - g.padding;
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) base[ow] += src[ow];
                        } else {
                            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow)
                                line[ow * g.stride + kj - g.padding] += src[ow];
                        }
                    }
                }
            }
        }
}

/// Samples per im2col chunk, keeping the column buffer cache-sized.
inline std::size_t conv_chunk(const Window2d& g, std::size_t batch) {
    const std::size_t per_sample = std::max<std::size_t>(1, g.col_rows() * g.out_area());
    return std::clamp<std::size_t>((std::size_t{1} << 17) / per_sample, 1, batch);
}

}  // namespace detail

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
    const auto& va = tape.value(a);
    const auto& vb = tape.value(b);
    detail::require(va.shape() == vb.shape(),
                    "add: shape mismatch " + to_string(va.shape()) + " vs " + to_string(vb.shape()));
    BasicTensor<T> out = va;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
    return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g) {
        t.accumulate(a, g.data());
        t.accumulate(b, g.data());
    });
}

template <class T>
Var sub(Tape<T>& tape, Var a, Var b) {
    const auto& va = tape.value(a);
    const auto& vb = tape.value(b);
    detail::require(va.shape() == vb.shape(),
                    "sub: shape mismatch " + to_string(va.shape()) + " vs " + to_string(vb.shape()));
    BasicTensor<T> out = va;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
    return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g) {
        t.accumulate(a, g.data());
        if (auto* gb = t.grad_buffer(b))
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    });
}

/// Elementwise product.
template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
    const auto& va = tape.value(a);
    const auto& vb = tape.value(b);
    detail::require(va.shape() == vb.shape(),
                    "mul: shape mismatch " + to_string(va.shape()) + " vs " + to_string(vb.shape()));
    BasicTensor<T> out = va;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
    return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g) {
        const auto& va = t.value(a);
        const auto& vb = t.value(b);
        if (auto* ga = t.grad_buffer(a))
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * vb[i];
        if (auto* gb = t.grad_buffer(b))
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * va[i];
    });
}

template <class T>
Var scale(Tape<T>& tape, Var x, T factor) {
    BasicTensor<T> out = tape.value(x);
    for (T& v : out.data()) v *= factor;
    return tape.record(std::move(out), {x}, [x, factor](Tape<T>& t, const BasicTensor<T>& g) {
        if (auto* gx = t.grad_buffer(x))
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * factor;
    });
}

template <class T>
Var reshape(Tape<T>& tape, Var x, Shape shape) {
    return tape.record(tape.value(x).reshaped(std::move(shape)), {x},
                       [x](Tape<T>& t, const BasicTensor<T>& g) { t.accumulate(x, g.data()); });
}

/// [N, ...] -> [N, prod(...)] in channel-major order.
template <class T>
Var flatten(Tape<T>& tape, Var x) {
    const auto& v = tape.value(x);
    detail::require(v.rank() >= 1, "flatten: scalar input");
    return reshape(tape, x, Shape{v.dim(0), v.size() / v.dim(0)});
}

template <class T>
Var sum(Tape<T>& tape, Var x) {
    const auto& v = tape.value(x);
    T total{0};
    for (T e : v.data()) total += e;
    return tape.record(BasicTensor<T>::scalar(total), {x}, [x](Tape<T>& t, const BasicTensor<T>& g) {
        if (auto* gx = t.grad_buffer(x))
            for (T& e : gx->data()) e += g[0];
    });
}

template <class T>
Var relu(Tape<T>& tape, Var x) {
    BasicTensor<T> out = tape.value(x);
    for (T& v : out.data()) v = v > T{0} ? v : T{0};
    return tape.record(std::move(out), {x}, [x](Tape<T>& t, const BasicTensor<T>& g) {
        auto* gx = t.grad_buffer(x);
        if (!gx) return;
        const auto& in = t.value(x);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (in[i] > T{0}) (*gx)[i] += g[i];
    });
}

/// 2-D convolution, input [N,C,H,W], kernel [F,C,k,k], optional bias [F].
template <class T>
Var conv2d(Tape<T>& tape, Var input, Var kernel, std::optional<Var> bias, std::size_t stride,
           std::size_t padding) {
    const auto& x = tape.value(input);
    const auto& w = tape.value(kernel);
    detail::require_rank(x, 4, "conv2d input");
    detail::require_rank(w, 4, "conv2d kernel");
    detail::require(w.dim(2) == w.dim(3), "conv2d: kernel must be square, got " + to_string(w.shape()));
    detail::require(x.dim(1) == w.dim(1), "conv2d: input has " + std::to_string(x.dim(1)) +
                                              " channels but kernel expects " + std::to_string(w.dim(1)) +
                                              " (input " + to_string(x.shape()) + ", kernel " +
                                              to_string(w.shape()) + ")");
    if (bias) {
        const auto& b = tape.value(*bias);
        detail::require(b.rank() == 1 && b.dim(0) == w.dim(0),
                        "conv2d: bias shape " + to_string(b.shape()) + " does not match " +
                            std::to_string(w.dim(0)) + " filters");
    }
    const std::size_t n = x.dim(0), filters = w.dim(0);
    const auto g = detail::Window2d::make(x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, padding, "conv2d");
    const std::size_t area = g.out_area(), rows = g.col_rows(), image = g.channels * g.height * g.width;
    const std::size_t chunk = detail::conv_chunk(g, n);

    BasicTensor<T> out(Shape{n, filters, g.out_h, g.out_w});
    std::vector<T> col(rows * chunk * area), prod(filters * chunk * area);
    for (std::size_t first = 0; first < n; first += chunk) {
        const std::size_t count = std::min(chunk, n - first);
        detail::im2col(x.raw() + first * image, count, g, col.data());
        blas::gemm(false, false, filters, count * area, rows, T{1}, w.raw(), rows, col.data(), count * area, T{0},
                   prod.data(), count * area);
        for (std::size_t b = 0; b < count; ++b)
            for (std::size_t f = 0; f < filters; ++f)
                std::copy_n(prod.data() + f * count * area + b * area, area,
                            out.raw() + ((first + b) * filters + f) * area);
    }
    if (bias) {
        const auto& bv = tape.value(*bias);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t f = 0; f < filters; ++f) {
                T* dst = out.raw() + (b * filters + f) * area;
                for (std::size_t p = 0; p < area; ++p) dst[p] += bv[f];
            }
    }

    std::vector<Var> inputs{input, kernel};
    if (bias) inputs.push_back(*bias);
    return tape.record(std::move(out), inputs, [input, kernel, bias, g, chunk](Tape<T>& t, const BasicTensor<T>& dy) {
        const auto& x = t.value(input);
        const auto& w = t.value(kernel);
        const std::size_t n = x.dim(0), filters = w.dim(0);
        const std::size_t area = g.out_area(), rows = g.col_rows(), image = g.channels * g.height * g.width;
        auto* dx = t.grad_buffer(input);
        auto* dw = t.grad_buffer(kernel);
        if (bias) {
            if (auto* db = t.grad_buffer(*bias))
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t f = 0; f < filters; ++f) {
                        const T* src = dy.raw() + (b * filters + f) * area;
                        T acc{0};
                        for (std::size_t p = 0; p < area; ++p) acc += src[p];
                        (*db)[f] += acc;
                    }
        }
        if (!dx && !dw) return;
        std::vector<T> col(rows * chunk * area), dprod(filters * chunk * area);
        for (std::size_t first = 0; first < n; first += chunk) {
            const std::size_t count = std::min(chunk, n - first);
            for (std::size_t b = 0; b < count; ++b)
                for (std::size_t f = 0; f < filters; ++f)
                    std::copy_n(dy.raw() + ((first + b) * filters + f) * area, area,
                                dprod.data() + f * count * area + b * area);
            if (dw) {
                detail::im2col(x.raw() + first * image, count, g, col.data());
                blas::gemm(false, true, filters, rows, count * area, T{1}, dprod.data(), count * area, col.data(),
                           count * area, T{1}, dw->raw(), rows);
            }
            if (dx) {
                blas::gemm(true, false, rows, count * area, filters, T{1}, w.raw(), rows, dprod.data(),
                           count * area, T{0}, col.data(), count * area);
                detail::col2im(col.data(), count, g, dx->raw() + first * image);
            }
        }
    });
}

/// Max pooling over square windows. Gradient goes to the first maximal
/// element of each window in row-major scan order.
template <class T>
Var maxpool2d(Tape<T>& tape, Var input, std::size_t window, std::size_t stride) {
    const auto& x = tape.value(input);
    detail::require_rank(x, 4, "maxpool2d input");
    const auto g = detail::Window2d::make(x.dim(1), x.dim(2), x.dim(3), window, stride, 0, "maxpool2d");
    const std::size_t n = x.dim(0);
    BasicTensor<T> out(Shape{n, g.channels, g.out_h, g.out_w});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    std::size_t o = 0;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < g.channels; ++c) {
            const std::size_t base = (b * g.channels + c) * g.height * g.width;
            for (std::size_t oh = 0; oh < g.out_h; ++oh)
                for (std::size_t ow = 0; ow < g.out_w; ++ow, ++o) {
                    std::size_t best = base + (oh * stride) * g.width + ow * stride;
                    for (std::size_t i = 0; i < window; ++i)
                        for (std::size_t j = 0; j < window; ++j) {
                            const std::size_t idx = base + (oh * stride + i) * g.width + ow * stride + j;
                            if (x[idx] > x[best]) best = idx;
                        }
                    out[o] = x[best];
                    (*argmax)[o] = best;
                }
        }
    return tape.record(std::move(out), {input}, [input, argmax](Tape<T>& t, const BasicTensor<T>& dy) {
        if (auto* dx = t.grad_buffer(input))
            for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[(*argmax)[i]] += dy[i];
    });
}

/// Mean over the spatial extent: [N,C,H,W] -> [N,C].
template <class T>
Var avgpool_global(Tape<T>& tape, Var input) {
    const auto& x = tape.value(input);
    detail::require_rank(x, 4, "avgpool_global input");
    const std::size_t n = x.dim(0), c = x.dim(1), area = x.dim(2) * x.dim(3);
    BasicTensor<T> out(Shape{n, c});
    for (std::size_t i = 0; i < n * c; ++i) {
        T acc{0};
        for (std::size_t p = 0; p < area; ++p) acc += x[i * area + p];
        out[i] = acc / static_cast<T>(area);
    }
    return tape.record(std::move(out), {input}, [input, area](Tape<T>& t, const BasicTensor<T>& dy) {
        auto* dx = t.grad_buffer(input);
        if (!dx) return;
        const T inv = T{1} / static_cast<T>(area);
        for (std::size_t i = 0; i < dy.size(); ++i)
            for (std::size_t p = 0; p < area; ++p) (*dx)[i * area + p] += dy[i] * inv;
    });
}

/// Fully connected layer: x [N,D], weight [U,D], bias [U] -> [N,U].
template <class T>
Var dense(Tape<T>& tape, Var input, Var weight, std::optional<Var> bias) {
    const auto& x = tape.value(input);
    const auto& w = tape.value(weight);
    detail::require_rank(x, 2, "dense input");
    detail::require_rank(w, 2, "dense weight");
    detail::require(x.dim(1) == w.dim(1), "dense: input features " + std::to_string(x.dim(1)) +
                                              " do not match weight " + to_string(w.shape()));
    const std::size_t n = x.dim(0), d = x.dim(1), u = w.dim(0);
    BasicTensor<T> out(Shape{n, u});
    blas::gemm(false, true, n, u, d, T{1}, x.raw(), d, w.raw(), d, T{0}, out.raw(), u);
    if (bias) {
        const auto& b = tape.value(*bias);
        detail::require(b.rank() == 1 && b.dim(0) == u, "dense: bias shape " + to_string(b.shape()));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < u; ++j) out[i * u + j] += b[j];
    }
    std::vector<Var> inputs{input, weight};
    if (bias) inputs.push_back(*bias);
    return tape.record(std::move(out), inputs, [input, weight, bias](Tape<T>& t, const BasicTensor<T>& dy) {
        const auto& x = t.value(input);
        const auto& w = t.value(weight);
        const std::size_t n = x.dim(0), d = x.dim(1), u = w.dim(0);
        if (auto* dx = t.grad_buffer(input))
            blas::gemm(false, false, n, d, u, T{1}, dy.raw(), u, w.raw(), d, T{1}, dx->raw(), d);
        if (auto* dw = t.grad_buffer(weight))
            blas::gemm(true, false, u, d, n, T{1}, dy.raw(), u, x.raw(), d, T{1}, dw->raw(), d);
        if (bias)
            if (auto* db = t.grad_buffer(*bias))
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < u; ++j) (*db)[j] += dy[i * u + j];
    });
}

enum class BatchNormMode { training, inference };

/// Per-channel running statistics of a batch-norm layer.
template <class T>
struct BatchNormStats {
    std::vector<T> mean;
    std::vector<T> var;
    explicit BatchNormStats(std::size_t channels = 0) : mean(channels, T{0}), var(channels, T{1}) {}
};

inline constexpr double batchnorm_epsilon = 1e-5;

/// Batch normalization over N,H,W of an [N,C,H,W] input. Training mode
/// normalizes with batch statistics and folds them into `stats` with the
/// given momentum; inference mode is the affine map given by `stats`.
template <class T>
Var batchnorm2d(Tape<T>& tape, Var input, Var gamma, Var beta, BatchNormStats<T>& stats, BatchNormMode mode,
                T momentum = T(0.1)) {
    const auto& x = tape.value(input);
    detail::require_rank(x, 4, "batchnorm2d input");
    const std::size_t n = x.dim(0), c = x.dim(1), area = x.dim(2) * x.dim(3);
    detail::require(n > 0, "batchnorm2d: empty batch");
    detail::require(tape.value(gamma).size() == c && tape.value(beta).size() == c && stats.mean.size() == c,
                    "batchnorm2d: parameter size does not match " + std::to_string(c) + " channels");
    const T eps = static_cast<T>(batchnorm_epsilon);
    const std::size_t count = n * area;

    std::vector<T> mean(c), inv_std(c);
    if (mode == BatchNormMode::training) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            double s = 0, ss = 0;
            for (std::size_t b = 0; b < n; ++b) {
                const T* p = x.raw() + (b * c + ch) * area;
                for (std::size_t i = 0; i < area; ++i) s += p[i];
            }
            const double m = s / static_cast<double>(count);
            for (std::size_t b = 0; b < n; ++b) {
                const T* p = x.raw() + (b * c + ch) * area;
                for (std::size_t i = 0; i < area; ++i) ss += (p[i] - m) * (p[i] - m);
            }
            const double v = ss / static_cast<double>(count);
            mean[ch] = static_cast<T>(m);
            inv_std[ch] = static_cast<T>(1.0 / std::sqrt(v + batchnorm_epsilon));
            const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : v;
            stats.mean[ch] = (T{1} - momentum) * stats.mean[ch] + momentum * static_cast<T>(m);
            stats.var[ch] = (T{1} - momentum) * stats.var[ch] + momentum * static_cast<T>(unbiased);
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean[ch] = stats.mean[ch];
            inv_std[ch] = T{1} / std::sqrt(stats.var[ch] + eps);
        }
    }

    const auto& gv = tape.value(gamma);
    const auto& bv = tape.value(beta);
    BasicTensor<T> out(x.shape());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T* p = x.raw() + (b * c + ch) * area;
            T* q = out.raw() + (b * c + ch) * area;
            const T a = gv[ch] * inv_std[ch];
            const T shift = bv[ch] - a * mean[ch];
            for (std::size_t i = 0; i < area; ++i) q[i] = a * p[i] + shift;
        }

    const bool batch_stats = mode == BatchNormMode::training;
    return tape.record(
        std::move(out), {input, gamma, beta},
        [input, gamma, beta, mean = std::move(mean), inv_std = std::move(inv_std), batch_stats](
            Tape<T>& t, const BasicTensor<T>& dy) {
            const auto& x = t.value(input);
            const auto& gv = t.value(gamma);
            const std::size_t n = x.dim(0), c = x.dim(1), area = x.dim(2) * x.dim(3);
            const T m = static_cast<T>(n * area);
            auto* dx = t.grad_buffer(input);
            auto* dg = t.grad_buffer(gamma);
            auto* db = t.grad_buffer(beta);
            for (std::size_t ch = 0; ch < c; ++ch) {
                T sum_dy{0}, sum_dy_xhat{0};
                for (std::size_t b = 0; b < n; ++b) {
                    const T* p = x.raw() + (b * c + ch) * area;
                    const T* d = dy.raw() + (b * c + ch) * area;
                    for (std::size_t i = 0; i < area; ++i) {
                        sum_dy += d[i];
                        sum_dy_xhat += d[i] * (p[i] - mean[ch]) * inv_std[ch];
                    }
                }
                if (dg) (*dg)[ch] += sum_dy_xhat;
                if (db) (*db)[ch] += sum_dy;
                if (!dx) continue;
                const T a = gv[ch] * inv_std[ch];
                for (std::size_t b = 0; b < n; ++b) {
                    const T* p = x.raw() + (b * c + ch) * area;
                    const T* d = dy.raw() + (b * c + ch) * area;
                    T* q = dx->raw() + (b * c + ch) * area;
                    if (batch_stats) {
                        for (std::size_t i = 0; i < area; ++i) {
                            const T xhat = (p[i] - mean[ch]) * inv_std[ch];
                            q[i] += a * (d[i] - sum_dy / m - xhat * sum_dy_xhat / m);
                        }
                    } else {
                        for (std::size_t i = 0; i < area; ++i) q[i] += a * d[i];
                    }
                }
            }
        });
}

/// Inference-only overload for read-only statistics.
template <class T>
Var batchnorm2d(Tape<T>& tape, Var input, Var gamma, Var beta, const BatchNormStats<T>& stats) {
    auto copy = stats;
    return batchnorm2d(tape, input, gamma, beta, copy, BatchNormMode::inference);
}

/// Mean over the batch of -log softmax(logits)[label], max-shifted.
template <class T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::span<const int> labels) {
    const auto& z = tape.value(logits);
    detail::require_rank(z, 2, "softmax_cross_entropy logits");
    const std::size_t n = z.dim(0), k = z.dim(1);
    detail::require(labels.size() == n, "softmax_cross_entropy: " + std::to_string(labels.size()) +
                                            " labels for batch of " + std::to_string(n));
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= k)
            throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," +
                                    std::to_string(k) + ")");
    auto probs = std::make_shared<BasicTensor<T>>(z.shape());
    auto ys = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
    T total{0};
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = z.raw() + i * k;
        const T shift = *std::max_element(row, row + k);
        T denom{0};
        for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - shift);
        for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(row[j] - shift) / denom;
        total += std::log(denom) - (row[(*ys)[i]] - shift);
    }
    return tape.record(BasicTensor<T>::scalar(total / static_cast<T>(n)), {logits},
                       [logits, probs, ys](Tape<T>& t, const BasicTensor<T>& g) {
                           auto* dz = t.grad_buffer(logits);
                           if (!dz) return;
                           const std::size_t n = probs->dim(0), k = probs->dim(1);
                           const T s = g[0] / static_cast<T>(n);
                           for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < k; ++j) {
                                   const T onehot = static_cast<std::size_t>((*ys)[i]) == j ? T{1} : T{0};
                                   (*dz)[i * k + j] += s * ((*probs)[i * k + j] - onehot);
                               }
                       });
}

/// Mean of the elementwise squared difference.
template <class T>
Var mse(Tape<T>& tape, Var a, Var b) {
    const auto& va = tape.value(a);
    const auto& vb = tape.value(b);
    detail::require(va.shape() == vb.shape(),
                    "mse: shape mismatch " + to_string(va.shape()) + " vs " + to_string(vb.shape()));
    T total{0};
    for (std::size_t i = 0; i < va.size(); ++i) total += (va[i] - vb[i]) * (va[i] - vb[i]);
    return tape.record(BasicTensor<T>::scalar(total / static_cast<T>(va.size())), {a, b},
                       [a, b](Tape<T>& t, const BasicTensor<T>& g) {
                           const auto& va = t.value(a);
                           const auto& vb = t.value(b);
                           const T s = T{2} * g[0] / static_cast<T>(va.size());
                           if (auto* ga = t.grad_buffer(a))
                               for (std::size_t i = 0; i < va.size(); ++i) (*ga)[i] += s * (va[i] - vb[i]);
                           if (auto* gb = t.grad_buffer(b))
                               for (std::size_t i = 0; i < va.size(); ++i) (*gb)[i] -= s * (va[i] - vb[i]);
                       });
}

/// Batch mean of per-sample Euclidean distances ||a_i - b_i||_2. A sample at
/// zero distance contributes a zero gradient.
template <class T>
Var l2_distance(Tape<T>& tape, Var a, Var b) {
    const auto& va = tape.value(a);
    const auto& vb = tape.value(b);
    detail::require(va.shape() == vb.shape() && va.rank() >= 1,
                    "l2_distance: shape mismatch " + to_string(va.shape()) + " vs " + to_string(vb.shape()));
    const std::size_t n = va.dim(0), per = va.size() / n;
    auto norms = std::make_shared<std::vector<T>>(n);
    T total{0};
    for (std::size_t i = 0; i < n; ++i) {
        T ss{0};
        for (std::size_t j = 0; j < per; ++j) {
            const T d = va[i * per + j] - vb[i * per + j];
            ss += d * d;
        }
        (*norms)[i] = std::sqrt(ss);
        total += (*norms)[i];
    }
    return tape.record(BasicTensor<T>::scalar(total / static_cast<T>(n)), {a, b},
                       [a, b, norms](Tape<T>& t, const BasicTensor<T>& g) {
                           const auto& va = t.value(a);
                           const auto& vb = t.value(b);
                           const std::size_t n = norms->size(), per = va.size() / n;
                           auto* ga = t.grad_buffer(a);
                           auto* gb = t.grad_buffer(b);
                           for (std::size_t i = 0; i < n; ++i) {
                               if ((*norms)[i] == T{0}) continue;
                               const T s = g[0] / (static_cast<T>(n) * (*norms)[i]);
                               for (std::size_t j = 0; j < per; ++j) {
                                   const T d = s * (va[i * per + j] - vb[i * per + j]);
                                   if (ga) (*ga)[i * per + j] += d;
                                   if (gb) (*gb)[i * per + j] -= d;
                               }
                           }
                       });
}

/// Placement of one sample inside a resize-and-pad transform.
struct ResizePlacement {
    bool active = false;       ///< false leaves the sample untouched
    std::size_t size = 0;      ///< resized square extent
    std::size_t top = 0;
    std::size_t left = 0;
};

/// Nearest-neighbour resize of each active sample to size x size, then
/// zero-padded back to the original H x W at (top, left).
template <class T>
Var resize_pad(Tape<T>& tape, Var input, std::span<const ResizePlacement> placements) {
    const auto& x = tape.value(input);
    detail::require_rank(x, 4, "resize_pad input");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    detail::require(placements.size() == n, "resize_pad: one placement per sample required");
    // source[i] is the input element feeding output i, or npos for padding.
    constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
    auto source = std::make_shared<std::vector<std::size_t>>(x.size(), npos);
    for (std::size_t b = 0; b < n; ++b) {
        const auto& pl = placements[b];
        const std::size_t base = b * c * h * w;
        if (!pl.active) {
            for (std::size_t i = 0; i < c * h * w; ++i) (*source)[base + i] = base + i;
            continue;
        }
        detail::require(pl.size >= 1 && pl.top + pl.size <= h && pl.left + pl.size <= w,
                        "resize_pad: placement exceeds image bounds");
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < pl.size; ++i)
                for (std::size_t j = 0; j < pl.size; ++j) {
                    const std::size_t si = i * h / pl.size, sj = j * w / pl.size;
                    (*source)[base + (ch * h + pl.top + i) * w + pl.left + j] = base + (ch * h + si) * w + sj;
                }
    }
    BasicTensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        if ((*source)[i] != npos) out[i] = x[(*source)[i]];
    return tape.record(std::move(out), {input}, [input, source](Tape<T>& t, const BasicTensor<T>& dy) {
        auto* dx = t.grad_buffer(input);
        if (!dx) return;
        for (std::size_t i = 0; i < dy.size(); ++i)
            if ((*source)[i] != std::numeric_limits<std::size_t>::max()) (*dx)[(*source)[i]] += dy[i];
    });
}

}  // namespace nrdm
