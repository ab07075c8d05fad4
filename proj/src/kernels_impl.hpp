#pragma once

// Shared per-row kernel bodies. Both the OpenMP front-line kernels and the
// serial reference call these, so the two variants execute the same floating
// point operations in the same order on every row.

#include <cmath>
#include <cstddef>

#include "rf/errors.hpp"

namespace rf::kernels::detail {

inline void matmul_nt_row(const double* a, std::size_t k, const double* B,
                          std::size_t m, double* c) {
    for (std::size_t j = 0; j < m; ++j) {
        const double* b = B + j * k;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += a[p] * b[p];
        c[j] = s;
    }
}

inline void matmul_nn_row(const double* a, std::size_t k, const double* B,
                          std::size_t m, double* c) {
    for (std::size_t j = 0; j < m; ++j) c[j] = 0.0;
    for (std::size_t p = 0; p < k; ++p) {
        const double ap = a[p];
        const double* b = B + p * m;
        for (std::size_t j = 0; j < m; ++j) c[j] += ap * b[j];
    }
}

// Output row o of C[m x k] = A[n x m]^T * B[n x k].
inline void matmul_tn_row(const double* A, std::size_t n, std::size_t m,
                          const double* B, std::size_t k, std::size_t o, double* c) {
    for (std::size_t j = 0; j < k; ++j) c[j] = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double aio = A[i * m + o];
        const double* b = B + i * k;
        for (std::size_t j = 0; j < k; ++j) c[j] += aio * b[j];
    }
}

inline void layer_norm_row(const double* x, std::size_t d, const double* gain,
                           const double* bias, double eps, double* y,
                           double* mean_out, double* invstd_out) {
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += x[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double c = x[i] - mu;
        var += c * c;
    }
    var /= static_cast<double>(d);
    const double s = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) y[i] = gain[i] * ((x[i] - mu) * s) + bias[i];
    if (mean_out) *mean_out = mu;
    if (invstd_out) *invstd_out = s;
}

// Causal softmax of row i (columns 0..i inclusive); columns beyond i zeroed.
inline void softmax_causal_row(double* row, std::size_t n, std::size_t i) {
    double mx = row[0];
    for (std::size_t j = 0; j <= i; ++j) {
        if (!std::isfinite(row[j])) {
            throw numeric_error("non-finite attention score at row " + std::to_string(i) +
                                " col " + std::to_string(j));
        }
        if (row[j] > mx) mx = row[j];
    }
    double z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
    }
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j <= i; ++j) row[j] *= inv;
    for (std::size_t j = i + 1; j < n; ++j) row[j] = 0.0;
}

inline double gelu_scalar(double x) {
    // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    const double c = 0.7978845608028654; // sqrt(2/pi)
    const double u = c * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad_scalar(double x) {
    const double c = 0.7978845608028654;
    const double u = c * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline void gelu_row(const double* x, std::size_t d, double* y) {
    for (std::size_t i = 0; i < d; ++i) y[i] = gelu_scalar(x[i]);
}

} // namespace rf::kernels::detail
