#include "decomp/kernels.hpp"

#include <atomic>
#include <cstddef>

namespace decomp::kernels {

#if defined(DECOMP_HAVE_AVX2)
namespace detail {
void gemm_avx2(std::size_t, std::size_t, std::size_t, const double*, const double*, double*, bool);
void axpy_avx2(std::size_t, double, const double*, double*);
void add_avx2(std::size_t, const double*, const double*, double*);
void mul_avx2(std::size_t, const double*, const double*, double*);
double dot_avx2(std::size_t, const double*, const double*);
}  // namespace detail
#endif

namespace {

bool cpu_has_avx2() noexcept {
#if defined(DECOMP_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

std::atomic<const KernelTable*>& slot() {
    static std::atomic<const KernelTable*> table{nullptr};
    return table;
}

}  // namespace

const KernelTable* avx2_table() noexcept {
#if defined(DECOMP_HAVE_AVX2)
    static const KernelTable table{Isa::avx2, detail::gemm_avx2, detail::axpy_avx2, detail::add_avx2,
                                   detail::mul_avx2, detail::dot_avx2};
    static const bool supported = cpu_has_avx2();
    return supported ? &table : nullptr;
#else
    return nullptr;
#endif
}

Isa best_available() noexcept { return avx2_table() != nullptr ? Isa::avx2 : Isa::scalar; }

const KernelTable& active() noexcept {
    const KernelTable* t = slot().load(std::memory_order_acquire);
    if (t == nullptr) {
        const KernelTable* best = avx2_table();
        t = best != nullptr ? best : &scalar_table();
        slot().store(t, std::memory_order_release);
    }
    return *t;
}

bool set_active(Isa isa) noexcept {
    const KernelTable* t = isa == Isa::avx2 ? avx2_table() : &scalar_table();
    if (t == nullptr) {
        return false;
    }
    slot().store(t, std::memory_order_release);
    return true;
}

std::string_view isa_name(Isa isa) noexcept {
    switch (isa) {
        case Isa::scalar:
            return "scalar";
        case Isa::avx2:
            return "avx2";
    }
    return "unknown";
}

}  // namespace decomp::kernels
