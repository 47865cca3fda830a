#include "demosynth/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>

namespace demosynth::kernels {

namespace {

// C tile of R rows x J columns held in registers while k runs in ascending
// order. a(i, k) = A[i * a_rs + k * a_ks]. Every element sees the same
// sequence of operations as the plain i-k-j loop, including the zero skip.
template <class T, int R, int J>
inline void tile(int i0, int j0, int K, const T* A, std::size_t a_rs, std::size_t a_ks,
                 const T* B, int ldb, T* C, int ldc, bool accumulate) {
  T acc[R][J];
  for (int r = 0; r < R; ++r)
    for (int j = 0; j < J; ++j)
      acc[r][j] = accumulate ? C[static_cast<std::size_t>(i0 + r) * ldc + j0 + j] : T(0);
  for (int k = 0; k < K; ++k) {
    const T* b = B + static_cast<std::size_t>(k) * ldb + j0;
    for (int r = 0; r < R; ++r) {
      const T s = A[static_cast<std::size_t>(i0 + r) * a_rs + static_cast<std::size_t>(k) * a_ks];
      if (s == T(0)) continue;
      for (int j = 0; j < J; ++j) acc[r][j] += s * b[j];
    }
  }
  for (int r = 0; r < R; ++r)
    for (int j = 0; j < J; ++j) C[static_cast<std::size_t>(i0 + r) * ldc + j0 + j] = acc[r][j];
}

template <class T>
void edge(int i0, int i1, int j0, int j1, int K, const T* A, std::size_t a_rs, std::size_t a_ks,
          const T* B, int ldb, T* C, int ldc, bool accumulate) {
  for (int i = i0; i < i1; ++i) {
    T* c = C + static_cast<std::size_t>(i) * ldc;
    if (!accumulate) std::fill(c + j0, c + j1, T(0));
    for (int k = 0; k < K; ++k) {
      const T s = A[static_cast<std::size_t>(i) * a_rs + static_cast<std::size_t>(k) * a_ks];
      if (s == T(0)) continue;
      const T* b = B + static_cast<std::size_t>(k) * ldb;
      for (int j = j0; j < j1; ++j) c[j] += s * b[j];
    }
  }
}

template <class T>
void gemm_strided(int M, int N, int K, const T* A, std::size_t a_rs, std::size_t a_ks,
                  const T* B, int ldb, T* C, int ldc, bool accumulate) {
  constexpr int R = 4;
  constexpr int J = 16;
  const int m_full = M - M % R;
  const int n_full = N - N % J;
  for (int i = 0; i < m_full; i += R)
    for (int j = 0; j < n_full; j += J)
      tile<T, R, J>(i, j, K, A, a_rs, a_ks, B, ldb, C, ldc, accumulate);
  if (n_full < N) edge(0, m_full, n_full, N, K, A, a_rs, a_ks, B, ldb, C, ldc, accumulate);
  if (m_full < M) edge(m_full, M, 0, N, K, A, a_rs, a_ks, B, ldb, C, ldc, accumulate);
}

}  // namespace

template <class T>
void gemm_nn(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc,
             bool accumulate) {
  gemm_strided(M, N, K, A, static_cast<std::size_t>(lda), 1, B, ldb, C, ldc, accumulate);
}

template <class T>
void gemm_tn(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc,
             bool accumulate) {
  gemm_strided(M, N, K, A, 1, static_cast<std::size_t>(lda), B, ldb, C, ldc, accumulate);
}

template <class T>
void gemm_nt(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc,
             bool accumulate, std::vector<T>& scratch) {
  scratch.resize(static_cast<std::size_t>(K) * N);
  for (int n = 0; n < N; ++n) {
    const T* b = B + static_cast<std::size_t>(n) * ldb;
    for (int k = 0; k < K; ++k) scratch[static_cast<std::size_t>(k) * N + n] = b[k];
  }
  gemm_nn(M, N, K, A, lda, scratch.data(), N, C, ldc, accumulate);
}

namespace {

// exp for float arguments <= 0: Cody-Waite range reduction and a degree-6
// polynomial, pure arithmetic so it vectorizes. Relative error below 2e-7;
// flushes to zero below -87.
inline float exp_nonpositive(float in) {
  const float x = in < -87.0f ? -87.0f : in;
  const float n = std::floor(x * 1.44269504088896341f + 0.5f);
  float r = x - n * 0.693359375f;
  r = r - n * -2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  const std::int32_t bits = (static_cast<std::int32_t>(n) + 127) << 23;
  float scale;
  std::memcpy(&scale, &bits, sizeof scale);
  return in < -87.0f ? 0.0f : p * scale;
}

inline float exp_shifted(float x) { return exp_nonpositive(x); }
inline double exp_shifted(double x) { return std::exp(x); }

}  // namespace

template <class T>
void softmax_rows(Mat<T>& m, const int* valid) {
  for (int i = 0; i < m.rows; ++i) {
    T* r = m.row(i);
    const int n = valid ? valid[i] : m.cols;
    T mx = r[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, r[j]);
    for (int j = 0; j < n; ++j) r[j] = exp_shifted(r[j] - mx);
    T sum = 0;
    for (int j = 0; j < n; ++j) sum += r[j];
    const T inv = T(1) / sum;
    for (int j = 0; j < n; ++j) r[j] *= inv;
    for (int j = n; j < m.cols; ++j) r[j] = T(0);
  }
}

#define DEMOSYNTH_INSTANTIATE(T)                                                              \
  template void gemm_nn<T>(int, int, int, const T*, int, const T*, int, T*, int, bool);       \
  template void gemm_tn<T>(int, int, int, const T*, int, const T*, int, T*, int, bool);       \
  template void gemm_nt<T>(int, int, int, const T*, int, const T*, int, T*, int, bool,        \
                           std::vector<T>&);                                                  \
  template void softmax_rows<T>(Mat<T>&, const int*);

DEMOSYNTH_INSTANTIATE(float)
DEMOSYNTH_INSTANTIATE(double)

#undef DEMOSYNTH_INSTANTIATE

}  // namespace demosynth::kernels
