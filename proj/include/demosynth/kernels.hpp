#pragma once

// Dense row-major kernels. Every output element is accumulated over the inner
// dimension in ascending order, independent of the other dimensions, so a row
// computed alone is bit-identical to the same row computed inside a larger
// matrix.

#include <cstddef>
#include <vector>

namespace demosynth::kernels {

template <class T>
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, T(0)) {}

  T* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const T* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }
  T& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  T at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  void zero() { std::fill(data.begin(), data.end(), T(0)); }
  void resize(int r, int c) {
    rows = r;
    cols = c;
    data.assign(static_cast<std::size_t>(r) * c, T(0));
  }
};

// C[M,N] (+)= A[M,K] * B[K,N]; leading dimensions are row strides.
template <class T>
void gemm_nn(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc,
             bool accumulate);

// C[M,N] (+)= A[K,M]^T * B[K,N].
template <class T>
void gemm_tn(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc,
             bool accumulate);

// C[M,N] (+)= A[M,K] * B[N,K]^T. Uses `scratch` for the transpose of B.
template <class T>
void gemm_nt(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc,
             bool accumulate, std::vector<T>& scratch);

// Row-wise softmax over the first `valid[i]` entries of row i (the rest are
// set to zero). With valid == nullptr every row uses all columns.
template <class T>
void softmax_rows(Mat<T>& m, const int* valid);

}  // namespace demosynth::kernels
