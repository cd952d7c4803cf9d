#pragma once

#include <cblas.h>

#include <concepts>
#include <cstddef>

namespace nrdm::blas {

/// Row-major C = alpha * op(A) * op(B) + beta * C.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha,
                 const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
                 std::size_t ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, static_cast<int>(lda), b,
                static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

/// Double precision is only used for gradient checks, so a plain loop is
/// enough. It also sidesteps OpenBLAS 0.3.20, whose Cooperlake dgemm kernel
/// returns wrong products for some shapes.
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
                 const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta, double* c,
                 std::size_t ldc) {
    for (std::size_t i = 0; i < m; ++i) {
        double* row = c + i * ldc;
        for (std::size_t j = 0; j < n; ++j) row[j] = beta == 0.0 ? 0.0 : beta * row[j];
        for (std::size_t p = 0; p < k; ++p) {
            const double av = alpha * (trans_a ? a[p * lda + i] : a[i * lda + p]);
            if (trans_b)
                for (std::size_t j = 0; j < n; ++j) row[j] += av * b[j * ldb + p];
            else
                for (std::size_t j = 0; j < n; ++j) row[j] += av * b[p * ldb + j];
        }
    }
}

/// Pins the BLAS backend to one thread. Multi-threaded reductions change
/// summation order between runs, which breaks bitwise reproducibility.
inline void use_single_thread() { openblas_set_num_threads(1); }

}  // namespace nrdm::blas
