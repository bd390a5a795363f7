// Compiled with -mavx2 -mfma; only reached after a CPUID check.
#include "decomp/kernels.hpp"

#include <immintrin.h>

#include <algorithm>
#include <vector>

namespace decomp::kernels::detail {
namespace {

// 4x8 register block of C: four rows, two ymm accumulators per row.
// b rows are ldb apart; c rows are n apart.
inline void block_4x8(std::size_t n, std::size_t k, const double* a, const double* b, std::size_t ldb, double* c) {
    __m256d c00 = _mm256_loadu_pd(c);
    __m256d c01 = _mm256_loadu_pd(c + 4);
    __m256d c10 = _mm256_loadu_pd(c + n);
    __m256d c11 = _mm256_loadu_pd(c + n + 4);
    __m256d c20 = _mm256_loadu_pd(c + 2 * n);
    __m256d c21 = _mm256_loadu_pd(c + 2 * n + 4);
    __m256d c30 = _mm256_loadu_pd(c + 3 * n);
    __m256d c31 = _mm256_loadu_pd(c + 3 * n + 4);
    for (std::size_t p = 0; p < k; ++p) {
        const double* brow = b + p * ldb;
        const __m256d b0 = _mm256_loadu_pd(brow);
        const __m256d b1 = _mm256_loadu_pd(brow + 4);
        __m256d av = _mm256_broadcast_sd(a + p);
        c00 = _mm256_fmadd_pd(av, b0, c00);
        c01 = _mm256_fmadd_pd(av, b1, c01);
        av = _mm256_broadcast_sd(a + k + p);
        c10 = _mm256_fmadd_pd(av, b0, c10);
        c11 = _mm256_fmadd_pd(av, b1, c11);
        av = _mm256_broadcast_sd(a + 2 * k + p);
        c20 = _mm256_fmadd_pd(av, b0, c20);
        c21 = _mm256_fmadd_pd(av, b1, c21);
        av = _mm256_broadcast_sd(a + 3 * k + p);
        c30 = _mm256_fmadd_pd(av, b0, c30);
        c31 = _mm256_fmadd_pd(av, b1, c31);
    }
    _mm256_storeu_pd(c, c00);
    _mm256_storeu_pd(c + 4, c01);
    _mm256_storeu_pd(c + n, c10);
    _mm256_storeu_pd(c + n + 4, c11);
    _mm256_storeu_pd(c + 2 * n, c20);
    _mm256_storeu_pd(c + 2 * n + 4, c21);
    _mm256_storeu_pd(c + 3 * n, c30);
    _mm256_storeu_pd(c + 3 * n + 4, c31);
}

inline void block_1x8(std::size_t k, const double* a, const double* b, std::size_t ldb, double* c) {
    __m256d c0 = _mm256_loadu_pd(c);
    __m256d c1 = _mm256_loadu_pd(c + 4);
    for (std::size_t p = 0; p < k; ++p) {
        const __m256d av = _mm256_broadcast_sd(a + p);
        c0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b + p * ldb), c0);
        c1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b + p * ldb + 4), c1);
    }
    _mm256_storeu_pd(c, c0);
    _mm256_storeu_pd(c + 4, c1);
}

inline void column_tail(std::size_t n, std::size_t k, std::size_t j0, const double* a, const double* b,
                        double* crow) {
    for (std::size_t j = j0; j < n; ++j) {
        double acc = crow[j];
        for (std::size_t p = 0; p < k; ++p) {
            acc += a[p] * b[p * n + j];
        }
        crow[j] = acc;
    }
}

}  // namespace

void gemm_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
               bool accumulate) {
    if (!accumulate) {
        std::fill(c, c + m * n, 0.0);
    }
    const std::size_t n8 = n - n % 8;
    // Each 8-column panel of b is packed contiguously and reused by every row block.
    thread_local std::vector<double> panel;
    if (panel.size() < k * 8) panel.resize(k * 8);
    for (std::size_t j = 0; j < n8; j += 8) {
        for (std::size_t p = 0; p < k; ++p) std::copy(b + p * n + j, b + p * n + j + 8, panel.data() + p * 8);
        std::size_t i = 0;
        for (; i + 4 <= m; i += 4) block_4x8(n, k, a + i * k, panel.data(), 8, c + i * n + j);
        for (; i < m; ++i) block_1x8(k, a + i * k, panel.data(), 8, c + i * n + j);
    }
    if (n8 < n) {
        for (std::size_t i = 0; i < m; ++i) column_tail(n, k, n8, a + i * k, b, c + i * n);
    }
}

void axpy_avx2(std::size_t n, double alpha, const double* x, double* y) {
    const __m256d av = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    }
    for (; i < n; ++i) {
        y[i] += alpha * x[i];
    }
}

void add_avx2(std::size_t n, const double* x, const double* y, double* out) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    }
    for (; i < n; ++i) {
        out[i] = x[i] + y[i];
    }
}

void mul_avx2(std::size_t n, const double* x, const double* y, double* out) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    }
    for (; i < n; ++i) {
        out[i] = x[i] * y[i];
    }
}

double dot_avx2(std::size_t n, const double* x, const double* y) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
    }
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, _mm256_add_pd(acc0, acc1));
    double acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (; i < n; ++i) {
        acc += x[i] * y[i];
    }
    return acc;
}

}  // namespace decomp::kernels::detail
