#include "decomp/kernels.hpp"

#include <algorithm>

namespace decomp::kernels {
namespace {

void gemm_scalar(std::size_t m, std::size_t n, std::size_t k, const double* a,
                 const double* b, double* c, bool accumulate) {
    if (!accumulate) {
        std::fill(c, c + m * n, 0.0);
    }
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += aip * brow[j];
            }
        }
    }
}

void axpy_scalar(std::size_t n, double alpha, const double* x, double* y) {
    for (std::size_t i = 0; i < n; ++i) {
        y[i] += alpha * x[i];
    }
}

void add_scalar(std::size_t n, const double* x, const double* y, double* out) {
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = x[i] + y[i];
    }
}

void mul_scalar(std::size_t n, const double* x, const double* y, double* out) {
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = x[i] * y[i];
    }
}

double dot_scalar(std::size_t n, const double* x, const double* y) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        acc += x[i] * y[i];
    }
    return acc;
}

constexpr KernelTable kScalar{Isa::scalar, gemm_scalar, axpy_scalar, add_scalar, mul_scalar, dot_scalar};

}  // namespace

const KernelTable& scalar_table() noexcept { return kScalar; }

}  // namespace decomp::kernels
