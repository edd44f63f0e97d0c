#pragma once

#include <cstddef>

namespace circuitbox {

// Dense double-precision kernels used by every tensor primitive.
//
// All kernels accumulate each output element with a k-ascending serial
// reduction, so results are bitwise identical regardless of thread count
// and regardless of how the M/N extents are sliced. Analysis passes that
// recompute a few rows of a larger product rely on this.

// C[M,N] (+)= A[M,K] * B[K,N]
void gemm(const double* a, const double* b, double* c,
          std::size_t m, std::size_t k, std::size_t n, bool accumulate);

// C[M,N] (+)= A^T[K,M] * B[K,N]   (A stored K x M)
void gemm_at(const double* a, const double* b, double* c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);

// C[M,N] (+)= A[M,K] * B^T[N,K]   (B stored N x K)
void gemm_bt(const double* a, const double* b, double* c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate);

}  // namespace circuitbox
