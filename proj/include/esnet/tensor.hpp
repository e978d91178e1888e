#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace esnet {

/// Raised when tensor or parameter dimensions do not line up.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when an operation precondition (other than a shape mismatch) fails.
class PreconditionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct Shape4 {
    std::size_t n = 0;
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    std::size_t numel() const noexcept { return n * c * h * w; }
    std::size_t plane() const noexcept { return h * w; }
    bool operator==(const Shape4&) const = default;
};

std::string to_string(const Shape4& s);

/// Dense NCHW array. Owns its storage; copies are deep.
template <typename T>
class Tensor4 {
public:
    using value_type = T;

    Tensor4() = default;
    explicit Tensor4(Shape4 shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}
    Tensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, T fill = T(0))
        : Tensor4(Shape4{n, c, h, w}, fill) {}
    Tensor4(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (data_.size() != shape_.numel()) {
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match dims " + to_string(shape_));
        }
    }

    const Shape4& shape() const noexcept { return shape_; }
    std::size_t n() const noexcept { return shape_.n; }
    std::size_t c() const noexcept { return shape_.c; }
    std::size_t h() const noexcept { return shape_.h; }
    std::size_t w() const noexcept { return shape_.w; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    const std::vector<T>& vec() const noexcept { return data_; }

    std::size_t offset(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
        return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }
    T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
        return data_[offset(n, c, h, w)];
    }
    T operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
        return data_[offset(n, c, h, w)];
    }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    T operator[](std::size_t i) const noexcept { return data_[i]; }

    /// Pointer to the start of the (n, c) plane.
    T* plane(std::size_t n, std::size_t c) noexcept { return data_.data() + offset(n, c, 0, 0); }
    const T* plane(std::size_t n, std::size_t c) const noexcept {
        return data_.data() + offset(n, c, 0, 0);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const noexcept {
        for (T v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    template <typename U>
    Tensor4<U> cast() const {
        return Tensor4<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    bool operator==(const Tensor4&) const = default;

private:
    Shape4 shape_{};
    std::vector<T> data_;
};

using Tensor4d = Tensor4<double>;
using Tensor4f = Tensor4<float>;

/// Per-pixel integer labels, N x H x W.
struct LabelMap {
    std::size_t n = 0;
    std::size_t h = 0;
    std::size_t w = 0;
    std::vector<int> data;

    LabelMap() = default;
    LabelMap(std::size_t n_, std::size_t h_, std::size_t w_, int fill = 0)
        : n(n_), h(h_), w(w_), data(n_ * h_ * w_, fill) {}

    int& operator()(std::size_t i, std::size_t y, std::size_t x) { return data[(i * h + y) * w + x]; }
    int operator()(std::size_t i, std::size_t y, std::size_t x) const { return data[(i * h + y) * w + x]; }
    bool operator==(const LabelMap&) const = default;
};

}  // namespace esnet
