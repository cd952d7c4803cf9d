#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>

#include "nrdm/tensor.hpp"

namespace nrdm {

/// Central-difference gradient of a scalar function:
/// (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate i.
template <std::floating_point T, class F>
BasicTensor<T> finite_diff_gradient(F&& f, const BasicTensor<T>& x, T h) {
    if (!(h > T{0})) throw std::invalid_argument("finite_diff_gradient: step must be positive");
    BasicTensor<T> grad(x.shape());
    BasicTensor<T> probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T saved = probe[i];
        probe[i] = saved + h;
        const T up = static_cast<T>(f(static_cast<const BasicTensor<T>&>(probe)));
        probe[i] = saved - h;
        const T down = static_cast<T>(f(static_cast<const BasicTensor<T>&>(probe)));
        probe[i] = saved;
        grad[i] = (up - down) / (T{2} * h);
    }
    return grad;
}

/// Coordinate subset variant: only entries listed in `coords` are probed.
template <std::floating_point T, class F>
BasicTensor<T> finite_diff_gradient(F&& f, const BasicTensor<T>& x, T h, std::span<const std::size_t> coords) {
    BasicTensor<T> grad(Shape{coords.size()});
    BasicTensor<T> probe = x;
    for (std::size_t k = 0; k < coords.size(); ++k) {
        const std::size_t i = coords[k];
        const T saved = probe[i];
        probe[i] = saved + h;
        const T up = static_cast<T>(f(static_cast<const BasicTensor<T>&>(probe)));
        probe[i] = saved - h;
        const T down = static_cast<T>(f(static_cast<const BasicTensor<T>&>(probe)));
        probe[i] = saved;
        grad[k] = (up - down) / (T{2} * h);
    }
    return grad;
}

/// ||a - b|| / max(||a||, ||b||), zero when both vanish.
template <std::floating_point T>
double relative_error(std::span<const T> a, std::span<const T> b) {
    double diff = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (double(a[i]) - double(b[i])) * (double(a[i]) - double(b[i]));
        na += double(a[i]) * double(a[i]);
        nb += double(b[i]) * double(b[i]);
    }
    const double denom = std::sqrt(std::max(na, nb));
    return denom == 0 ? 0.0 : std::sqrt(diff) / denom;
}

}  // namespace nrdm
