#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "rf/errors.hpp"

namespace rf {

// Dense row-major tensor of doubles. Shapes are small (desk scale), so we keep
// this deliberately simple: a shape vector plus a flat buffer.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        data.assign(n, 0.0);
    }
    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

    std::size_t numel() const { return data.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 0 : shape[1]; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    // 2-D access (row-major).
    double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    std::span<double> row(std::size_t i) { return {data.data() + i * shape[1], shape[1]}; }
    std::span<const double> row(std::size_t i) const { return {data.data() + i * shape[1], shape[1]}; }
};

// Depth-token field: values indexed by (layer slice, token position, channel).
// Layer slice 0 is the embedding output; slice L is the output of block L.
struct Field3 {
    std::size_t layers = 0, tokens = 0, dim = 0;
    std::vector<double> v;

    Field3() = default;
    Field3(std::size_t l, std::size_t t, std::size_t d)
        : layers(l), tokens(t), dim(d), v(l * t * d, 0.0) {}

    double& at(std::size_t l, std::size_t x, std::size_t i) { return v[(l * tokens + x) * dim + i]; }
    double at(std::size_t l, std::size_t x, std::size_t i) const { return v[(l * tokens + x) * dim + i]; }

    std::span<double> row(std::size_t l, std::size_t x) { return {v.data() + (l * tokens + x) * dim, dim}; }
    std::span<const double> row(std::size_t l, std::size_t x) const {
        return {v.data() + (l * tokens + x) * dim, dim};
    }
    std::span<double> layer(std::size_t l) { return {v.data() + l * tokens * dim, tokens * dim}; }
    std::span<const double> layer(std::size_t l) const { return {v.data() + l * tokens * dim, tokens * dim}; }
};

// A point on the depth-token grid: layer slice and token position.
struct Site {
    int layer = 0;
    int token = 0;
    bool operator==(const Site&) const = default;
};

// The residual stream recorded at every layer slice of a forward pass.
struct ResidualField : Field3 {
    using Field3::Field3;
};
// a(l, x) = dy/dR_l(x): the adjoint/sensitivity field of a scalar observable.
struct SensitivityField : Field3 {
    using Field3::Field3;
};
// Forward-mode tangent dR_l(x) seeded at one site.
struct TangentField : Field3 {
    using Field3::Field3;
};
// deltaR(l, x) between a patched and a clean run.
struct ResponseField : Field3 {
    using Field3::Field3;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline void check_finite(std::span<const double> a, const std::string& what) {
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!std::isfinite(a[i])) {
            throw numeric_error("non-finite value in " + what + " at index " + std::to_string(i));
        }
    }
}

} // namespace rf
