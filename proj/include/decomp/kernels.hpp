#pragma once

// Dense double-precision inner loops used by the autograd substrate.
//
// Every kernel has a portable scalar reference implementation and, on x86-64,
// an AVX2/FMA variant. The active table is chosen once at startup from CPUID
// and can be overridden (tests pin both paths and compare them).

#include <cstddef>
#include <string_view>

namespace decomp::kernels {

enum class Isa { scalar, avx2 };

struct KernelTable {
    Isa isa;
    // C[M,N] = A[M,K] * B[K,N] (row-major). When accumulate is set the product
    // is added to the existing contents of C.
    void (*gemm)(std::size_t m, std::size_t n, std::size_t k, const double* a,
                 const double* b, double* c, bool accumulate);
    // y += alpha * x
    void (*axpy)(std::size_t n, double alpha, const double* x, double* y);
    // out = x + y
    void (*add)(std::size_t n, const double* x, const double* y, double* out);
    // out = x * y
    void (*mul)(std::size_t n, const double* x, const double* y, double* out);
    double (*dot)(std::size_t n, const double* x, const double* y);
};

const KernelTable& scalar_table() noexcept;
// Returns nullptr when the variant is not compiled in or not supported by the CPU.
const KernelTable* avx2_table() noexcept;

// Table used by the graph operations.
const KernelTable& active() noexcept;
// Pins the active table. Returns false (and leaves the selection unchanged)
// when the requested ISA is unavailable.
bool set_active(Isa isa) noexcept;
Isa best_available() noexcept;

std::string_view isa_name(Isa isa) noexcept;

}  // namespace decomp::kernels
