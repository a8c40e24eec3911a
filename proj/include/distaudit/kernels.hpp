#pragma once

#include <cstddef>
#include <vector>

namespace distaudit::kernels {

// C[M x N] += A[M x K] * B[K x N], all row-major. The ikj loop order keeps
// the inner loop a contiguous axpy over B and C rows, which vectorizes well;
// stepping k eight at a time amortizes the C-row traffic over eight fused
// multiply-adds, which matters most when rows are short. The adds stay in
// k order, so results match the unblocked loop bit for bit.
template <typename Real>
void mm_nn(const Real* A, const Real* B, Real* C, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    const Real* a = A + static_cast<std::size_t>(i) * K;
    Real* c = C + static_cast<std::size_t>(i) * N;
    int k = 0;
    for (; k + 8 <= K; k += 8) {
      const Real a0 = a[k], a1 = a[k + 1], a2 = a[k + 2], a3 = a[k + 3];
      const Real a4 = a[k + 4], a5 = a[k + 5], a6 = a[k + 6], a7 = a[k + 7];
      const Real* b0 = B + static_cast<std::size_t>(k) * N;
      const Real* b1 = b0 + N;
      const Real* b2 = b1 + N;
      const Real* b3 = b2 + N;
      const Real* b4 = b3 + N;
      const Real* b5 = b4 + N;
      const Real* b6 = b5 + N;
      const Real* b7 = b6 + N;
      for (int j = 0; j < N; ++j) {
        Real s = c[j];
        s += a0 * b0[j];
        s += a1 * b1[j];
        s += a2 * b2[j];
        s += a3 * b3[j];
        s += a4 * b4[j];
        s += a5 * b5[j];
        s += a6 * b6[j];
        s += a7 * b7[j];
        c[j] = s;
      }
    }
    for (; k + 4 <= K; k += 4) {
      const Real a0 = a[k], a1 = a[k + 1], a2 = a[k + 2], a3 = a[k + 3];
      const Real* b0 = B + static_cast<std::size_t>(k) * N;
      const Real* b1 = b0 + N;
      const Real* b2 = b1 + N;
      const Real* b3 = b2 + N;
      for (int j = 0; j < N; ++j) {
        Real s = c[j];
        s += a0 * b0[j];
        s += a1 * b1[j];
        s += a2 * b2[j];
        s += a3 * b3[j];
        c[j] = s;
      }
    }
    for (; k < K; ++k) {
      const Real av = a[k];
      const Real* b = B + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[K x N] += A^T * G, with A[M x K] and G[M x N] row-major. Same axpy
// structure as mm_nn with the reduction over rows of A; blocking i by four
// keeps four G rows hot while each C row is loaded once per block.
template <typename Real>
void mm_tn(const Real* A, const Real* G, Real* C, int M, int K, int N) {
  int i = 0;
  for (; i + 4 <= M; i += 4) {
    const Real* a0 = A + static_cast<std::size_t>(i) * K;
    const Real* a1 = a0 + K;
    const Real* a2 = a1 + K;
    const Real* a3 = a2 + K;
    const Real* g0 = G + static_cast<std::size_t>(i) * N;
    const Real* g1 = g0 + N;
    const Real* g2 = g1 + N;
    const Real* g3 = g2 + N;
    for (int k = 0; k < K; ++k) {
      const Real v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
      Real* c = C + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) {
        Real s = c[j];
        s += v0 * g0[j];
        s += v1 * g1[j];
        s += v2 * g2[j];
        s += v3 * g3[j];
        c[j] = s;
      }
    }
  }
  for (; i < M; ++i) {
    const Real* a = A + static_cast<std::size_t>(i) * K;
    const Real* g = G + static_cast<std::size_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      const Real av = a[k];
      Real* c = C + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * g[j];
    }
  }
}

// Out[C x R] = transpose of In[R x C]. Used to reduce the A * B^T case to
// mm_nn; the dot-product formulation is several times slower here because
// the compiler will not vectorize the horizontal reductions.
template <typename Real>
void transpose(const Real* in, Real* out, int R, int C) {
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      out[static_cast<std::size_t>(c) * R + r] = in[static_cast<std::size_t>(r) * C + c];
}

// C[M x N] += A[M x K] * B^T where B is [N x K] row-major. The transpose
// scratch only grows, since shrinking re-fills on the next enlargement and
// the call pattern alternates between small and large shapes.
template <typename Real>
void mm_nt(const Real* A, const Real* B, Real* C, int M, int K, int N) {
  thread_local std::vector<Real> bt;
  const std::size_t need = static_cast<std::size_t>(K) * N;
  if (bt.size() < need) bt.resize(need);
  transpose(B, bt.data(), N, K);
  mm_nn(A, bt.data(), C, M, K, N);
}

}  // namespace distaudit::kernels
