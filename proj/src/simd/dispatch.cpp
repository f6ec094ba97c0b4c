// SPDX-License-Identifier: Apache-2.0
#include <atomic>
#include <cstdlib>
#include <string>

#include "obidiff/simd/kernels.hpp"

namespace obidiff::simd {
namespace {

bool cpu_has_avx2_fma() {
#if defined(__x86_64__) || defined(__i386__)
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

const KernelTable* detect() {
    if (const char* env = std::getenv("OBIDIFF_SIMD"); env && std::string(env) == "scalar")
        return &scalar_kernels();
    if (const KernelTable* t = avx2_kernels(); t && cpu_has_avx2_fma()) return t;
    return &scalar_kernels();
}

std::atomic<const KernelTable*>& slot() {
    static std::atomic<const KernelTable*> current{detect()};
    return current;
}

}  // namespace

const KernelTable& active() { return *slot().load(std::memory_order_acquire); }

void force(Isa isa) {
    if (isa == Isa::Avx2) {
        const KernelTable* t = avx2_kernels();
        if (t && cpu_has_avx2_fma()) {
            slot().store(t, std::memory_order_release);
            return;
        }
    }
    slot().store(&scalar_kernels(), std::memory_order_release);
}

std::string_view isa_name(Isa isa) { return isa == Isa::Avx2 ? "avx2" : "scalar"; }

template <>
void gemm<float>(const GemmArgs<float>& args) {
    active().sgemm(args);
}

template <>
void gemm<double>(const GemmArgs<double>& args) {
    active().dgemm(args);
}

}  // namespace obidiff::simd
