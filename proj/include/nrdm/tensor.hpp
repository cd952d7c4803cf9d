#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nrdm {

using Shape = std::vector<std::size_t>;

/// Raised for any operand whose extents do not fit the operation.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a computation leaves the finite range (NaN loss, divergence).
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

/// Dense row-major n-dimensional array. Rank 0 holds one scalar.
template <std::floating_point T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
        check_extents();
        data_.assign(numel(shape_), fill);
    }

    BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        if (data_.size() != numel(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + nrdm::to_string(shape_));
    }

    static BasicTensor scalar(T value) { return BasicTensor(Shape{}, std::vector<T>{value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const {
        if (axis >= shape_.size())
            throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                             nrdm::to_string(shape_));
        return shape_[axis];
    }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    T* raw() noexcept { return data_.data(); }
    const T* raw() const noexcept { return data_.data(); }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    /// Element of a rank-4 NCHW tensor.
    T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    T item() const {
        if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + nrdm::to_string(shape_));
        return data_[0];
    }

    BasicTensor reshaped(Shape shape) const {
        if (numel(shape) != data_.size())
            throw ShapeError("cannot reshape " + nrdm::to_string(shape_) + " to " + nrdm::to_string(shape));
        return BasicTensor(std::move(shape), data_);
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    template <std::floating_point U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return BasicTensor<U>(shape_, std::move(out));
    }

    /// Rows [first, first+count) along axis 0.
    BasicTensor slice(std::size_t first, std::size_t count) const {
        if (shape_.empty() || first + count > shape_[0])
            throw ShapeError("slice out of range for shape " + nrdm::to_string(shape_));
        const std::size_t stride = shape_[0] == 0 ? 0 : data_.size() / shape_[0];
        Shape out_shape = shape_;
        out_shape[0] = count;
        std::vector<T> out(data_.begin() + static_cast<std::ptrdiff_t>(first * stride),
                           data_.begin() + static_cast<std::ptrdiff_t>((first + count) * stride));
        return BasicTensor(std::move(out_shape), std::move(out));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

private:
    void check_extents() const {
        for (std::size_t extent : shape_)
            if (extent == 0) throw ShapeError("zero extent in shape " + nrdm::to_string(shape_));
    }

    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

/// Gathers rows `indices` along axis 0.
template <std::floating_point T>
BasicTensor<T> gather_rows(const BasicTensor<T>& t, std::span<const std::size_t> indices) {
    if (t.rank() == 0) throw ShapeError("gather_rows on scalar");
    const std::size_t stride = t.size() / t.dim(0);
    Shape shape = t.shape();
    shape[0] = indices.size();
    std::vector<T> out(indices.size() * stride);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= t.dim(0)) throw ShapeError("gather_rows index out of range");
        std::copy_n(t.raw() + indices[i] * stride, stride, out.data() + i * stride);
    }
    return BasicTensor<T>(std::move(shape), std::move(out));
}

}  // namespace nrdm
