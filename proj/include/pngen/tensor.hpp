#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "pngen/errors.hpp"

namespace pngen {

// Dense row-major tensor. Shapes are small vectors of ints; data is owned
// contiguously. This is deliberately minimal: layout is always NHWC for
// image-like data and (rows, cols) for matrices.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape)) {}
    Tensor(std::vector<int> s, T fill) : shape(std::move(s)), data(count(shape), fill) {}

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            check_contract(d >= 0, "tensor dims must be non-negative");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s), T(0)); }
    static Tensor full(std::vector<int> s, T v) { return Tensor(std::move(s), v); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int last_dim() const { return shape.empty() ? 1 : shape.back(); }
    int64_t rows() const { return last_dim() == 0 ? 0 : numel() / last_dim(); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    T& at(int a, int b) { return data[static_cast<size_t>(a) * shape[1] + b]; }
    const T& at(int a, int b) const { return data[static_cast<size_t>(a) * shape[1] + b]; }
    T& at(int a, int b, int c) {
        return data[(static_cast<size_t>(a) * shape[1] + b) * shape[2] + c];
    }
    const T& at(int a, int b, int c) const {
        return data[(static_cast<size_t>(a) * shape[1] + b) * shape[2] + c];
    }
    T& at(int a, int b, int c, int d) {
        return data[((static_cast<size_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d];
    }
    const T& at(int a, int b, int c, int d) const {
        return data[((static_cast<size_t>(a) * shape[1] + b) * shape[2] + c) * shape[3] + d];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor reshaped(std::vector<int> s) const {
        check_contract(count(s) == numel(), "reshape element count mismatch");
        Tensor out;
        out.shape = std::move(s);
        out.data = data;
        return out;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

template <typename T>
std::string shape_str(const std::vector<int>& s) = delete;

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(s[i]);
        if (i + 1 < s.size()) out += ",";
    }
    return out + ")";
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const std::string& where) {
    check_contract(a.shape == b.shape,
                   where + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

}  // namespace pngen
