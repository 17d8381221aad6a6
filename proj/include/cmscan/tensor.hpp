#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cmscan/errors.hpp"

namespace cmscan {

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major n-d array. Scalar type is the dtype: float for compute,
// double for gradient checks and oracles.
template <typename T>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        data.assign(checked_numel(shape), T(0));
    }

    Tensor(std::vector<std::size_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (checked_numel(shape) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    static std::size_t checked_numel(const std::vector<std::size_t>& s) {
        if (s.empty()) throw ShapeError("tensor shape must have at least one dimension");
        std::size_t n = 1;
        for (std::size_t d : s) {
            if (d == 0) throw ShapeError("tensor shape entries must be >= 1, got " + shape_str(s));
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<std::size_t> s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor ones(std::vector<std::size_t> s) { return full(std::move(s), T(1)); }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }
    void zero() { fill(T(0)); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    template <typename... I>
    T& operator()(I... idx) {
        return data[offset(idx...)];
    }

    template <typename... I>
    const T& operator()(I... idx) const {
        return data[offset(idx...)];
    }

    template <typename... I>
    std::size_t offset(I... idx) const {
        constexpr std::size_t k = sizeof...(I);
        const std::size_t ind[k] = {static_cast<std::size_t>(idx)...};
        std::size_t off = 0;
        for (std::size_t i = 0; i < k; ++i) off = off * shape[i] + ind[i];
        return off;
    }

    Tensor reshaped(std::vector<std::size_t> s) const {
        if (checked_numel(s) != numel())
            throw ShapeError("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
        Tensor t;
        t.shape = std::move(s);
        t.data = data;
        return t;
    }

    Tensor& operator+=(const Tensor& o) {
        require_same_shape(o, "+=");
        for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
        return *this;
    }

    Tensor& operator*=(T s) {
        for (auto& v : data) v *= s;
        return *this;
    }

    void require_same_shape(const Tensor& o, const char* what) const {
        if (!same_shape(o))
            throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(shape) + " vs " +
                             shape_str(o.shape));
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> t;
        t.shape = shape;
        t.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) t.data[i] = static_cast<U>(data[i]);
        return t;
    }
};

// Per-pixel class ids, 255 = ignore.
struct LabelMap {
    std::size_t h = 0, w = 0;
    std::vector<std::uint8_t> v;

    LabelMap() = default;
    LabelMap(std::size_t h_, std::size_t w_, std::uint8_t fill = 0) : h(h_), w(w_), v(h_ * w_, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return v[y * w + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return v[y * w + x]; }
    std::size_t numel() const { return v.size(); }

    bool operator==(const LabelMap& o) const { return h == o.h && w == o.w && v == o.v; }
};

inline constexpr std::uint8_t kIgnoreLabel = 255;

}  // namespace cmscan
