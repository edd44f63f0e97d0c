#include "circuitbox/gemm.hpp"

#include <cstring>
#include <vector>

namespace circuitbox {

namespace {
constexpr std::size_t kRowBlock = 4;
}

// i-blocked ikj loop. Inner j loop vectorizes; the k reduction for each
// C[i,j] stays scalar-serial, which keeps results independent of M/N
// slicing and of the OpenMP schedule.
void gemm(const double* a, const double* b, double* c,
          std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    if (!accumulate) std::memset(c, 0, m * n * sizeof(double));
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ib = 0; ib < static_cast<std::ptrdiff_t>((m + kRowBlock - 1) / kRowBlock); ++ib) {
        const std::size_t i0 = static_cast<std::size_t>(ib) * kRowBlock;
        const std::size_t i1 = i0 + kRowBlock < m ? i0 + kRowBlock : m;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double* brow = b + kk * n;
            for (std::size_t i = i0; i < i1; ++i) {
                const double av = a[i * k + kk];
                double* crow = c + i * n;
#pragma omp simd
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

void gemm_at(const double* a, const double* b, double* c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    if (!accumulate) std::memset(c, 0, m * n * sizeof(double));
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ib = 0; ib < static_cast<std::ptrdiff_t>((m + kRowBlock - 1) / kRowBlock); ++ib) {
        const std::size_t i0 = static_cast<std::size_t>(ib) * kRowBlock;
        const std::size_t i1 = i0 + kRowBlock < m ? i0 + kRowBlock : m;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double* brow = b + kk * n;
            for (std::size_t i = i0; i < i1; ++i) {
                const double av = a[kk * m + i];
                double* crow = c + i * n;
#pragma omp simd
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
}

void gemm_bt(const double* a, const double* b, double* c,
             std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ip = 0; ip < static_cast<std::ptrdiff_t>(m); ++ip) {
        const std::size_t i = static_cast<std::size_t>(ip);
        const double* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
#pragma omp simd reduction(+ : acc)
            for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            if (accumulate)
                c[i * n + j] += acc;
            else
                c[i * n + j] = acc;
        }
    }
}

}  // namespace circuitbox
