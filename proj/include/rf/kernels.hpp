#pragma once

#include <cstddef>
#include <span>

namespace rf::kernels {

// All kernels are deterministic: parallelism is only over independent output
// rows and every reduction runs in a fixed serial order, so the OpenMP
// versions below and the serial reference in rf::kernels::serial produce
// bit-identical results (this is tested).

// C[n x m] = A[n x k] * B[m x k]^T      (rows of A dotted with rows of B)
void matmul_nt(const double* A, std::size_t n, std::size_t k,
               const double* B, std::size_t m, double* C);

// C[n x m] = A[n x k] * B[k x m]
void matmul_nn(const double* A, std::size_t n, std::size_t k,
               const double* B, std::size_t m, double* C);

// C[m x k] = A[n x m]^T * B[n x k]
void matmul_tn(const double* A, std::size_t n, std::size_t m,
               const double* B, std::size_t k, double* C);

// X[n x d] += b (broadcast over rows)
void add_bias(double* X, std::size_t n, std::size_t d, const double* b);

// Row-wise layer norm: Y = gain * (x - mean) * invstd + bias, with
// invstd = 1/sqrt(var + eps) and population variance. Saves per-row mean and
// invstd when the out pointers are non-null (backward/JVP need them).
void layer_norm_rows(const double* X, std::size_t n, std::size_t d,
                     const double* gain, const double* bias, double eps,
                     double* Y, double* mean_out, double* invstd_out);

// Causal softmax over rows of the square score matrix S[n x n]: row i is
// normalized over columns j <= i; columns j > i are set to exactly 0.
// Throws rf::numeric_error if a used score is non-finite.
void softmax_causal_rows(double* S, std::size_t n);

// tanh-approximation GELU and its derivative.
double gelu(double x);
double gelu_grad(double x);
void gelu_rows(const double* X, std::size_t n, std::size_t d, double* Y);

namespace serial {
void matmul_nt(const double* A, std::size_t n, std::size_t k,
               const double* B, std::size_t m, double* C);
void matmul_nn(const double* A, std::size_t n, std::size_t k,
               const double* B, std::size_t m, double* C);
void matmul_tn(const double* A, std::size_t n, std::size_t m,
               const double* B, std::size_t k, double* C);
void layer_norm_rows(const double* X, std::size_t n, std::size_t d,
                     const double* gain, const double* bias, double eps,
                     double* Y, double* mean_out, double* invstd_out);
void softmax_causal_rows(double* S, std::size_t n);
void gelu_rows(const double* X, std::size_t n, std::size_t d, double* Y);
} // namespace serial

} // namespace rf::kernels

namespace rf {

// Numerically stable softmax of a full vector (max subtraction).
// Throws rf::numeric_error on non-finite input.
void stable_softmax(std::span<const double> in, std::span<double> out);

} // namespace rf
