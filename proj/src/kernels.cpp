#include "kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#if defined(__AVX__) && defined(__FMA__)
#include <immintrin.h>
#endif

namespace coupondt::adt::kernels {

namespace {
constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
}  // namespace

namespace {

constexpr int kRowTile = 6;
constexpr int kColTile = 16;

// out[r][j] = init[j] + sum_k a[r][k] * b[k][j] for a kRowTile x kColTile
// block, accumulated in k-ascending order. `rows`/`cols` may be smaller than
// the tile at the edges.
template <int R, int C>
inline void tile(const double* a, int lda, const double* b, int ldb, int K, double acc[R][C]) {
#if defined(__AVX__) && defined(__FMA__)
  static_assert(C % 4 == 0);
  constexpr int V = C / 4;
  __m256d reg[R][V];
  for (int r = 0; r < R; ++r)
    for (int v = 0; v < V; ++v) reg[r][v] = _mm256_loadu_pd(&acc[r][4 * v]);
  for (int k = 0; k < K; ++k) {
    const double* bk = b + static_cast<std::size_t>(k) * ldb;
    __m256d bv[V];
    for (int v = 0; v < V; ++v) bv[v] = _mm256_loadu_pd(bk + 4 * v);
    for (int r = 0; r < R; ++r) {
      const __m256d x = _mm256_set1_pd(a[static_cast<std::size_t>(r) * lda + k]);
      for (int v = 0; v < V; ++v) reg[r][v] = _mm256_fmadd_pd(x, bv[v], reg[r][v]);
    }
  }
  for (int r = 0; r < R; ++r)
    for (int v = 0; v < V; ++v) _mm256_storeu_pd(&acc[r][4 * v], reg[r][v]);
#else
  for (int k = 0; k < K; ++k) {
    const double* bk = b + static_cast<std::size_t>(k) * ldb;
    for (int r = 0; r < R; ++r) {
      const double x = a[static_cast<std::size_t>(r) * lda + k];
      for (int c = 0; c < C; ++c) acc[r][c] = std::fma(x, bk[c], acc[r][c]);
    }
  }
#endif
}

// C[M x N] (+)= A[M x K] * B[K x N] with optional per-column init vector.
// Every element is a k-ascending fma chain, so a row's result does not depend
// on which other rows are in the call.
void gemm(const double* A, const double* B, const double* init, double* C, int M, int K, int N, bool accumulate) {
  for (int i0 = 0; i0 < M; i0 += kRowTile) {
    const int rows = std::min(kRowTile, M - i0);
    for (int j0 = 0; j0 < N; j0 += kColTile) {
      const int cols = std::min(kColTile, N - j0);
      double acc[kRowTile][kColTile];
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
          const double base = init ? init[j0 + c] : 0.0;
          acc[r][c] = accumulate ? C[static_cast<std::size_t>(i0 + r) * N + j0 + c] : base;
        }
      const double* a = A + static_cast<std::size_t>(i0) * K;
      if (rows == kRowTile && cols == kColTile) {
        tile<kRowTile, kColTile>(a, K, B + j0, N, K, acc);
      } else {
        for (int k = 0; k < K; ++k) {
          const double* bk = B + static_cast<std::size_t>(k) * N + j0;
          for (int r = 0; r < rows; ++r) {
            const double x = a[static_cast<std::size_t>(r) * K + k];
            for (int c = 0; c < cols; ++c) acc[r][c] = std::fma(x, bk[c], acc[r][c]);
          }
        }
      }
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) C[static_cast<std::size_t>(i0 + r) * N + j0 + c] = acc[r][c];
    }
  }
}

}  // namespace

void matmul(const double* in, const double* w, const double* bias, double* out, int M, int K, int N) {
  gemm(in, w, bias, out, M, K, N, false);
}

void matmul_backward(const double* in, const double* w, const double* d_out, double* d_in, double* d_w,
                     double* d_bias, int M, int K, int N) {
  if (d_in) {
    // d_in (+)= d_out * w^T
    std::vector<double> wt(static_cast<std::size_t>(K) * N);
    for (int k = 0; k < K; ++k)
      for (int j = 0; j < N; ++j) wt[static_cast<std::size_t>(j) * K + k] = w[static_cast<std::size_t>(k) * N + j];
    gemm(d_out, wt.data(), nullptr, d_in, M, N, K, true);
  }
  // d_w (+)= in^T * d_out
  std::vector<double> in_t(static_cast<std::size_t>(K) * M);
  for (int i = 0; i < M; ++i)
    for (int k = 0; k < K; ++k) in_t[static_cast<std::size_t>(k) * M + i] = in[static_cast<std::size_t>(i) * K + k];
  gemm(in_t.data(), d_out, nullptr, d_w, K, M, N, true);
  if (d_bias) {
    for (int r = 0; r < M; ++r) {
      const double* g = d_out + static_cast<std::size_t>(r) * N;
      for (int j = 0; j < N; ++j) d_bias[j] += g[j];
    }
  }
}

void layernorm(const double* in, const double* gamma, const double* beta, double* out, double* mean,
               double* rstd, int M, int D) {
  for (int i = 0; i < M; ++i) {
    const double* x = in + static_cast<std::size_t>(i) * D;
    double* y = out + static_cast<std::size_t>(i) * D;
    double m = 0.0;
    for (int j = 0; j < D; ++j) m += x[j];
    m /= D;
    double v = 0.0;
    for (int j = 0; j < D; ++j) v += (x[j] - m) * (x[j] - m);
    v /= D;
    const double r = 1.0 / std::sqrt(v + kLayerNormEps);
    for (int j = 0; j < D; ++j) y[j] = (x[j] - m) * r * gamma[j] + beta[j];
    if (mean) mean[i] = m;
    if (rstd) rstd[i] = r;
  }
}

void layernorm_backward(const double* in, const double* gamma, const double* mean, const double* rstd,
                        const double* d_out, double* d_in, double* d_gamma, double* d_beta, int M, int D) {
  std::vector<double> xhat(static_cast<std::size_t>(D));
  std::vector<double> dxhat(static_cast<std::size_t>(D));
  for (int i = 0; i < M; ++i) {
    const double* x = in + static_cast<std::size_t>(i) * D;
    const double* g = d_out + static_cast<std::size_t>(i) * D;
    double* dx = d_in + static_cast<std::size_t>(i) * D;
    const double m = mean[i];
    const double r = rstd[i];
    double sum_dxhat = 0.0;
    double sum_dxhat_xhat = 0.0;
    for (int j = 0; j < D; ++j) {
      xhat[j] = (x[j] - m) * r;
      dxhat[j] = g[j] * gamma[j];
      d_gamma[j] += g[j] * xhat[j];
      d_beta[j] += g[j];
      sum_dxhat += dxhat[j];
      sum_dxhat_xhat += dxhat[j] * xhat[j];
    }
    sum_dxhat /= D;
    sum_dxhat_xhat /= D;
    for (int j = 0; j < D; ++j) dx[j] += r * (dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
  }
}

void gelu(const double* in, double* out, std::size_t n, double* tanh_out) {
  for (std::size_t i = 0; i < n; ++i) {
    const double x = in[i];
    const double th = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
    out[i] = 0.5 * x * (1.0 + th);
    if (tanh_out) tanh_out[i] = th;
  }
}

void gelu_backward(const double* in, const double* tanh_in, const double* d_out, double* d_in, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double x = in[i];
    const double th = tanh_in[i];
    const double sech2 = 1.0 - th * th;
    const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
    d_in[i] += d_out[i] * (0.5 * (1.0 + th) + 0.5 * x * sech2 * du);
  }
}

void attend_row(const double* q, const double* keys, const double* values, int key_stride, int n_keys,
                int D, int H, double* out, double* probs) {
  const int dh = D / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  double local[512];
  std::vector<double> heap;
  double* p = probs;
  if (!p) {
    if (n_keys <= 512) {
      p = local;
    } else {
      heap.resize(static_cast<std::size_t>(n_keys));
      p = heap.data();
    }
  }
  for (int h = 0; h < H; ++h) {
    double* ph = probs ? p + static_cast<std::size_t>(h) * n_keys : p;
    const double* qh = q + h * dh;
    double mx = -INFINITY;
    for (int j = 0; j < n_keys; ++j) {
      const double* kj = keys + static_cast<std::size_t>(j) * key_stride + h * dh;
      double s = 0.0;
      for (int c = 0; c < dh; ++c) s = std::fma(qh[c], kj[c], s);
      s *= scale;
      ph[j] = s;
      mx = std::max(mx, s);
    }
    double z = 0.0;
    for (int j = 0; j < n_keys; ++j) {
      ph[j] = std::exp(ph[j] - mx);
      z += ph[j];
    }
    const double inv = 1.0 / z;
    double* oh = out + h * dh;
    for (int c = 0; c < dh; ++c) oh[c] = 0.0;
    for (int j = 0; j < n_keys; ++j) {
      ph[j] *= inv;
      const double* vj = values + static_cast<std::size_t>(j) * key_stride + h * dh;
      for (int c = 0; c < dh; ++c) oh[c] = std::fma(ph[j], vj[c], oh[c]);
    }
  }
}

}  // namespace coupondt::adt::kernels
