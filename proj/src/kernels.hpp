#pragma once

// Dense primitives shared by training and decoding. Every output element is
// accumulated in a fixed order that does not depend on how many rows are
// processed together, so a row's value is the same in any batch.

#include <cstddef>

namespace coupondt::adt::kernels {

/// out[M x N] = in[M x K] * w[K x N] + bias[N] (bias may be null).
void matmul(const double* in, const double* w, const double* bias, double* out, int M, int K, int N);

/// d_in[M x K] += d_out * w^T (skipped when d_in is null);
/// d_w[K x N] += in^T * d_out; d_bias[N] += column sums of d_out (when non-null).
void matmul_backward(const double* in, const double* w, const double* d_out, double* d_in, double* d_w,
                     double* d_bias, int M, int K, int N);

/// Row-wise layer norm with epsilon 1e-5. mean/rstd may be null.
void layernorm(const double* in, const double* gamma, const double* beta, double* out, double* mean,
               double* rstd, int M, int D);
void layernorm_backward(const double* in, const double* gamma, const double* mean, const double* rstd,
                        const double* d_out, double* d_in, double* d_gamma, double* d_beta, int M, int D);

/// Tanh-approximated GELU, element-wise.
/// `tanh_out`, when given, receives the inner tanh for the backward pass.
void gelu(const double* in, double* out, std::size_t n, double* tanh_out = nullptr);
void gelu_backward(const double* in, const double* tanh_in, const double* d_out, double* d_in, std::size_t n);

/// Causal multi-head attention for one query row against keys/values at rows
/// 0..n_keys-1. qkv rows are laid out [q | k | v], each D wide; `probs`
/// receives H x n_keys weights when non-null.
void attend_row(const double* q, const double* keys, const double* values, int key_stride, int n_keys,
                int D, int H, double* out, double* probs);

}  // namespace coupondt::adt::kernels
