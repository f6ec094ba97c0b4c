// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string_view>

namespace obidiff::simd {

enum class Isa { Scalar, Avx2 };

/// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C.
/// op(A) is M x K, op(B) is K x N. lda/ldb/ldc are row strides of the stored matrices.
template <typename T>
struct GemmArgs {
    bool trans_a = false;
    bool trans_b = false;
    std::size_t m = 0, n = 0, k = 0;
    T alpha = T(1);
    const T* a = nullptr;
    std::size_t lda = 0;
    const T* b = nullptr;
    std::size_t ldb = 0;
    T beta = T(0);
    T* c = nullptr;
    std::size_t ldc = 0;
};

/// One table per ISA. Every entry has identical semantics across tables;
/// the scalar table is the reference the vector variants are tested against.
struct KernelTable {
    Isa isa;
    void (*sgemm)(const GemmArgs<float>&);
    void (*dgemm)(const GemmArgs<double>&);
    // y += a * x
    void (*saxpy)(std::size_t n, float a, const float* x, float* y);
    float (*sdot)(std::size_t n, const float* x, const float* y);
    // Double-accumulated reductions used by the image metrics.
    double (*sum_abs_diff)(std::size_t n, const float* x, const float* y);
    double (*sum_sq_diff)(std::size_t n, const float* x, const float* y);
    // Fused AdamW step over a contiguous parameter block.
    void (*adamw_step)(std::size_t n, float* param, const float* grad, float* m, float* v,
                       float lr, float beta1, float beta2, float eps, float weight_decay,
                       float bias_corr1, float bias_corr2);
};

const KernelTable& scalar_kernels();
/// nullptr when the translation unit was built without AVX2 support.
const KernelTable* avx2_kernels();

/// Kernels selected for this process: AVX2+FMA when the CPU reports both,
/// scalar otherwise or when OBIDIFF_SIMD=scalar is set.
const KernelTable& active();

/// Overrides the runtime selection (tests use this to compare variants).
void force(Isa isa);
std::string_view isa_name(Isa isa);

template <typename T>
void gemm(const GemmArgs<T>& args);

}  // namespace obidiff::simd
