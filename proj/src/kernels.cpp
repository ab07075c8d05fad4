#include "rf/kernels.hpp"

#include <cmath>

#include "kernels_impl.hpp"
#include "rf/errors.hpp"

namespace rf::kernels {

void matmul_nt(const double* A, std::size_t n, std::size_t k,
               const double* B, std::size_t m, double* C) {
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
        detail::matmul_nt_row(A + i * k, k, B, m, C + i * m);
    }
}

void matmul_nn(const double* A, std::size_t n, std::size_t k,
               const double* B, std::size_t m, double* C) {
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
        detail::matmul_nn_row(A + i * k, k, B, m, C + i * m);
    }
}

void matmul_tn(const double* A, std::size_t n, std::size_t m,
               const double* B, std::size_t k, double* C) {
#pragma omp parallel for schedule(static)
    for (long long o = 0; o < static_cast<long long>(m); ++o) {
        detail::matmul_tn_row(A, n, m, B, k, static_cast<std::size_t>(o), C + o * k);
    }
}

void add_bias(double* X, std::size_t n, std::size_t d, const double* b) {
    for (std::size_t i = 0; i < n; ++i) {
        double* row = X + i * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += b[j];
    }
}

void layer_norm_rows(const double* X, std::size_t n, std::size_t d,
                     const double* gain, const double* bias, double eps,
                     double* Y, double* mean_out, double* invstd_out) {
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
        detail::layer_norm_row(X + i * d, d, gain, bias, eps, Y + i * d,
                               mean_out ? mean_out + i : nullptr,
                               invstd_out ? invstd_out + i : nullptr);
    }
}

void softmax_causal_rows(double* S, std::size_t n) {
    // Exceptions must not escape an OpenMP region; run the finite checks
    // inside each row body but capture and rethrow after the loop.
    std::exception_ptr err = nullptr;
#pragma omp parallel for schedule(static) shared(err)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
        try {
            detail::softmax_causal_row(S + i * n, n, static_cast<std::size_t>(i));
        } catch (...) {
#pragma omp critical
            if (!err) err = std::current_exception();
        }
    }
    if (err) std::rethrow_exception(err);
}

double gelu(double x) { return detail::gelu_scalar(x); }
double gelu_grad(double x) { return detail::gelu_grad_scalar(x); }

void gelu_rows(const double* X, std::size_t n, std::size_t d, double* Y) {
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
        detail::gelu_row(X + i * d, d, Y + i * d);
    }
}

namespace serial {

void matmul_nt(const double* A, std::size_t n, std::size_t k,
               const double* B, std::size_t m, double* C) {
    for (std::size_t i = 0; i < n; ++i) detail::matmul_nt_row(A + i * k, k, B, m, C + i * m);
}

void matmul_nn(const double* A, std::size_t n, std::size_t k,
               const double* B, std::size_t m, double* C) {
    for (std::size_t i = 0; i < n; ++i) detail::matmul_nn_row(A + i * k, k, B, m, C + i * m);
}

void matmul_tn(const double* A, std::size_t n, std::size_t m,
               const double* B, std::size_t k, double* C) {
    for (std::size_t o = 0; o < m; ++o) detail::matmul_tn_row(A, n, m, B, k, o, C + o * k);
}

void layer_norm_rows(const double* X, std::size_t n, std::size_t d,
                     const double* gain, const double* bias, double eps,
                     double* Y, double* mean_out, double* invstd_out) {
    for (std::size_t i = 0; i < n; ++i) {
        detail::layer_norm_row(X + i * d, d, gain, bias, eps, Y + i * d,
                               mean_out ? mean_out + i : nullptr,
                               invstd_out ? invstd_out + i : nullptr);
    }
}

void softmax_causal_rows(double* S, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) detail::softmax_causal_row(S + i * n, n, i);
}

void gelu_rows(const double* X, std::size_t n, std::size_t d, double* Y) {
    for (std::size_t i = 0; i < n; ++i) detail::gelu_row(X + i * d, d, Y + i * d);
}

} // namespace serial
} // namespace rf::kernels

namespace rf {

void stable_softmax(std::span<const double> in, std::span<double> out) {
    if (in.size() != out.size() || in.empty()) {
        throw config_error("stable_softmax: empty input or size mismatch");
    }
    double mx = in[0];
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (!std::isfinite(in[i])) {
            throw numeric_error("stable_softmax: non-finite input at index " + std::to_string(i));
        }
        if (in[i] > mx) mx = in[i];
    }
    double z = 0.0;
    for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = std::exp(in[i] - mx);
        z += out[i];
    }
    const double inv = 1.0 / z;
    for (std::size_t i = 0; i < in.size(); ++i) out[i] *= inv;
}

} // namespace rf
