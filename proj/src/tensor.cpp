// SPDX-License-Identifier: Apache-2.0
#include "eoe/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <string_view>

namespace eoe {

namespace {

// -1 = not yet resolved from the environment.
std::atomic<int> g_deterministic{-1};

}  // namespace

std::string shape_to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i != 0) {
            s += "x";
        }
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

template <class T>
bool BasicTensor<T>::all_finite() const noexcept {
    for (T v : data_) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

bool deterministic_mode() {
    int mode = g_deterministic.load(std::memory_order_relaxed);
    if (mode < 0) {
        const char* env = std::getenv("EOE_DETERMINISTIC");
        mode = (env != nullptr && std::string_view(env) == "1") ? 1 : 0;
        g_deterministic.store(mode, std::memory_order_relaxed);
    }
    return mode == 1;
}

void set_deterministic_mode(bool enabled) {
    g_deterministic.store(enabled ? 1 : 0, std::memory_order_relaxed);
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) noexcept {
    if (deterministic_mode()) {
        T acc{0};
        for (std::size_t i = 0; i < n; ++i) {
            acc += a[i] * b[i];
        }
        return acc;
    }
    T lanes[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (std::size_t l = 0; l < 8; ++l) {
            lanes[l] += a[i + l] * b[i + l];
        }
    }
    for (; i < n; ++i) {
        lanes[i % 8] += a[i] * b[i];
    }
    return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
}

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul shape mismatch: " + shape_to_string(a.shape()) + " x " +
                             shape_to_string(b.shape()));
    }
    const std::size_t m = a.dim(0);
    const std::size_t k = a.dim(1);
    const std::size_t n = b.dim(1);
    BasicTensor<T> c({m, n});
    // i-t-j order: every c[i][j] still sums over t in ascending order.
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c.data() + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            const T av = a[i * k + t];
            const T* brow = b.data() + t * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
    return c;
}

TensorD finite_diff_grad(const std::function<double(const TensorD&)>& f, TensorD x, double h) {
    if (!(h > 0.0)) {
        throw DomainError("finite difference step must be positive");
    }
    TensorD grad(x.shape());
    for (std::size_t j = 0; j < x.size(); ++j) {
        const double orig = x[j];
        x[j] = orig + h;
        const double fp = f(x);
        x[j] = orig - h;
        const double fm = f(x);
        x[j] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("non-finite function value at element " + std::to_string(j));
        }
        grad[j] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template float dot<float>(const float*, const float*, std::size_t) noexcept;
template double dot<double>(const double*, const double*, std::size_t) noexcept;
template Tensor matmul<float>(const Tensor&, const Tensor&);
template TensorD matmul<double>(const TensorD&, const TensorD&);

}  // namespace eoe
