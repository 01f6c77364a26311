// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors and the handful of numeric kernels the model and
// the test oracles share.
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "eoe/errors.hpp"

namespace eoe {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

// Dense tensor over float or double. The default-constructed tensor is a
// rank-0 scalar holding 0.
template <class T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() : data_(1, T{0}) {}

    explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
        check_shape(shape_);
        data_.assign(shape_size(shape_), fill);
    }

    BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape(shape_);
        if (shape_size(shape_) != data_.size()) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_to_string(shape_));
        }
    }

    BasicTensor(std::initializer_list<std::size_t> shape, std::initializer_list<T> data)
        : BasicTensor(Shape(shape), std::vector<T>(data)) {}

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    // 2-D element access (row, col); no bounds checks.
    T& at(std::size_t r, std::size_t c) noexcept { return data_[r * shape_.back() + c]; }
    const T& at(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_.back() + c]; }

    void fill(T value) noexcept { std::fill(data_.begin(), data_.end(), value); }

    bool all_finite() const noexcept;

    template <class U>
    BasicTensor<U> cast() const {
        BasicTensor<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) {
            out[i] = static_cast<U>(data_[i]);
        }
        return out;
    }

private:
    static void check_shape(const Shape& shape) {
        for (std::size_t d : shape) {
            if (d == 0) {
                throw DimensionError("tensor dimensions must be positive, got " + shape_to_string(shape));
            }
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// Same shape and identical bit patterns.
template <class T>
bool bitwise_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) noexcept {
    return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

// Deterministic mode fixes every reduction to sequential order. It is read
// from EOE_DETERMINISTIC on first use and may be overridden programmatically.
bool deterministic_mode();
void set_deterministic_mode(bool enabled);

// Inner product. Deterministic mode accumulates strictly left to right;
// performance mode uses eight interleaved partial sums.
template <class T>
T dot(const T* a, const T* b, std::size_t n) noexcept;

// c[i][j] = sum_t a[i][t] * b[t][j]; each sum accumulated in ascending t.
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Central differences: (f(x + h e_j) - f(x - h e_j)) / (2h) for every j.
TensorD finite_diff_grad(const std::function<double(const TensorD&)>& f, TensorD x, double h);

}  // namespace eoe
