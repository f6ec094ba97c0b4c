// SPDX-License-Identifier: Apache-2.0
// AVX2 + FMA variants. This translation unit is compiled with -mavx2 -mfma and
// only entered after a runtime CPU check.
#include "obidiff/simd/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <vector>

namespace obidiff::simd {
namespace {

constexpr std::size_t kMr = 6;
constexpr std::size_t kNr = 16;
constexpr std::size_t kKc = 256;
constexpr std::size_t kMc = 96;
constexpr std::size_t kNc = 2048;

inline float elem_a(const GemmArgs<float>& g, std::size_t i, std::size_t p) {
    return g.trans_a ? g.a[p * g.lda + i] : g.a[i * g.lda + p];
}

// Packs an mc x kc block of op(A) into row panels of kMr, zero padded, alpha folded in.
void pack_a(const GemmArgs<float>& g, std::size_t i0, std::size_t mc, std::size_t p0,
            std::size_t kc, float* dst) {
    for (std::size_t ir = 0; ir < mc; ir += kMr) {
        const std::size_t mr = std::min(kMr, mc - ir);
        for (std::size_t p = 0; p < kc; ++p) {
            std::size_t r = 0;
            for (; r < mr; ++r) dst[r] = g.alpha * elem_a(g, i0 + ir + r, p0 + p);
            for (; r < kMr; ++r) dst[r] = 0.0f;
            dst += kMr;
        }
    }
}

// Packs a kc x nc block of op(B) into column panels of kNr, zero padded.
void pack_b(const GemmArgs<float>& g, std::size_t p0, std::size_t kc, std::size_t j0,
            std::size_t nc, float* dst) {
    for (std::size_t jr = 0; jr < nc; jr += kNr) {
        const std::size_t nr = std::min(kNr, nc - jr);
        for (std::size_t p = 0; p < kc; ++p) {
            if (!g.trans_b && nr == kNr) {
                const float* src = g.b + (p0 + p) * g.ldb + j0 + jr;
                _mm256_storeu_ps(dst, _mm256_loadu_ps(src));
                _mm256_storeu_ps(dst + 8, _mm256_loadu_ps(src + 8));
            } else {
                std::size_t c = 0;
                for (; c < nr; ++c) {
                    const std::size_t j = j0 + jr + c;
                    dst[c] = g.trans_b ? g.b[j * g.ldb + p0 + p] : g.b[(p0 + p) * g.ldb + j];
                }
                for (; c < kNr; ++c) dst[c] = 0.0f;
            }
            dst += kNr;
        }
    }
}

// C[mr x nr] += Ap * Bp over kc.
void micro_kernel(std::size_t kc, const float* ap, const float* bp, float* c, std::size_t ldc,
                  std::size_t mr, std::size_t nr) {
    __m256 c00 = _mm256_setzero_ps(), c01 = _mm256_setzero_ps();
    __m256 c10 = _mm256_setzero_ps(), c11 = _mm256_setzero_ps();
    __m256 c20 = _mm256_setzero_ps(), c21 = _mm256_setzero_ps();
    __m256 c30 = _mm256_setzero_ps(), c31 = _mm256_setzero_ps();
    __m256 c40 = _mm256_setzero_ps(), c41 = _mm256_setzero_ps();
    __m256 c50 = _mm256_setzero_ps(), c51 = _mm256_setzero_ps();
    for (std::size_t p = 0; p < kc; ++p) {
        const __m256 b0 = _mm256_loadu_ps(bp);
        const __m256 b1 = _mm256_loadu_ps(bp + 8);
        __m256 a = _mm256_broadcast_ss(ap + 0);
        c00 = _mm256_fmadd_ps(a, b0, c00);
        c01 = _mm256_fmadd_ps(a, b1, c01);
        a = _mm256_broadcast_ss(ap + 1);
        c10 = _mm256_fmadd_ps(a, b0, c10);
        c11 = _mm256_fmadd_ps(a, b1, c11);
        a = _mm256_broadcast_ss(ap + 2);
        c20 = _mm256_fmadd_ps(a, b0, c20);
        c21 = _mm256_fmadd_ps(a, b1, c21);
        a = _mm256_broadcast_ss(ap + 3);
        c30 = _mm256_fmadd_ps(a, b0, c30);
        c31 = _mm256_fmadd_ps(a, b1, c31);
        a = _mm256_broadcast_ss(ap + 4);
        c40 = _mm256_fmadd_ps(a, b0, c40);
        c41 = _mm256_fmadd_ps(a, b1, c41);
        a = _mm256_broadcast_ss(ap + 5);
        c50 = _mm256_fmadd_ps(a, b0, c50);
        c51 = _mm256_fmadd_ps(a, b1, c51);
        ap += kMr;
        bp += kNr;
    }
    alignas(32) float tile[kMr][kNr];
    _mm256_store_ps(tile[0], c00);
    _mm256_store_ps(tile[0] + 8, c01);
    _mm256_store_ps(tile[1], c10);
    _mm256_store_ps(tile[1] + 8, c11);
    _mm256_store_ps(tile[2], c20);
    _mm256_store_ps(tile[2] + 8, c21);
    _mm256_store_ps(tile[3], c30);
    _mm256_store_ps(tile[3] + 8, c31);
    _mm256_store_ps(tile[4], c40);
    _mm256_store_ps(tile[4] + 8, c41);
    _mm256_store_ps(tile[5], c50);
    _mm256_store_ps(tile[5] + 8, c51);
    if (nr == kNr) {
        for (std::size_t r = 0; r < mr; ++r) {
            float* crow = c + r * ldc;
            _mm256_storeu_ps(crow, _mm256_add_ps(_mm256_loadu_ps(crow), _mm256_load_ps(tile[r])));
            _mm256_storeu_ps(crow + 8,
                             _mm256_add_ps(_mm256_loadu_ps(crow + 8), _mm256_load_ps(tile[r] + 8)));
        }
    } else {
        for (std::size_t r = 0; r < mr; ++r)
            for (std::size_t col = 0; col < nr; ++col) c[r * ldc + col] += tile[r][col];
    }
}

void sgemm(const GemmArgs<float>& g) {
    for (std::size_t i = 0; i < g.m; ++i) {
        float* row = g.c + i * g.ldc;
        if (g.beta == 0.0f) {
            std::fill(row, row + g.n, 0.0f);
        } else if (g.beta != 1.0f) {
            for (std::size_t j = 0; j < g.n; ++j) row[j] *= g.beta;
        }
    }
    if (g.m == 0 || g.n == 0 || g.k == 0 || g.alpha == 0.0f) return;

    thread_local std::vector<float> abuf;
    thread_local std::vector<float> bbuf;
    abuf.resize(((kMc + kMr - 1) / kMr) * kMr * kKc);
    bbuf.resize(((kNc + kNr - 1) / kNr) * kNr * kKc);

    for (std::size_t jc = 0; jc < g.n; jc += kNc) {
        const std::size_t nc = std::min(kNc, g.n - jc);
        for (std::size_t pc = 0; pc < g.k; pc += kKc) {
            const std::size_t kc = std::min(kKc, g.k - pc);
            pack_b(g, pc, kc, jc, nc, bbuf.data());
            for (std::size_t ic = 0; ic < g.m; ic += kMc) {
                const std::size_t mc = std::min(kMc, g.m - ic);
                pack_a(g, ic, mc, pc, kc, abuf.data());
                for (std::size_t jr = 0; jr < nc; jr += kNr) {
                    const std::size_t nr = std::min(kNr, nc - jr);
                    const float* bp = bbuf.data() + (jr / kNr) * kNr * kc;
                    for (std::size_t ir = 0; ir < mc; ir += kMr) {
                        const std::size_t mr = std::min(kMr, mc - ir);
                        const float* ap = abuf.data() + (ir / kMr) * kMr * kc;
                        micro_kernel(kc, ap, bp, g.c + (ic + ir) * g.ldc + jc + jr, g.ldc, mr, nr);
                    }
                }
            }
        }
    }
}

inline float hsum(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    lo = _mm_hadd_ps(lo, lo);
    lo = _mm_hadd_ps(lo, lo);
    return _mm_cvtss_f32(lo);
}

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
}

void saxpy(std::size_t n, float a, const float* x, float* y) {
    const __m256 va = _mm256_set1_ps(a);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
    for (; i < n; ++i) y[i] += a * x[i];
}

float sdot(std::size_t n, const float* x, const float* y) {
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) acc = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc);
    float s = hsum(acc);
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

double sum_abs_diff(std::size_t n, const float* x, const float* y) {
    const __m256d sign = _mm256_set1_pd(-0.0);
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d d = _mm256_sub_pd(_mm256_cvtps_pd(_mm_loadu_ps(x + i)),
                                        _mm256_cvtps_pd(_mm_loadu_ps(y + i)));
        acc = _mm256_add_pd(acc, _mm256_andnot_pd(sign, d));
    }
    double s = hsum(acc);
    for (; i < n; ++i) s += std::fabs(double(x[i]) - double(y[i]));
    return s;
}

double sum_sq_diff(std::size_t n, const float* x, const float* y) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d d = _mm256_sub_pd(_mm256_cvtps_pd(_mm_loadu_ps(x + i)),
                                        _mm256_cvtps_pd(_mm_loadu_ps(y + i)));
        acc = _mm256_fmadd_pd(d, d, acc);
    }
    double s = hsum(acc);
    for (; i < n; ++i) {
        const double d = double(x[i]) - double(y[i]);
        s += d * d;
    }
    return s;
}

void adamw_step(std::size_t n, float* param, const float* grad, float* m, float* v, float lr,
                float beta1, float beta2, float eps, float weight_decay, float bias_corr1,
                float bias_corr2) {
    const __m256 vb1 = _mm256_set1_ps(beta1), vb1c = _mm256_set1_ps(1.0f - beta1);
    const __m256 vb2 = _mm256_set1_ps(beta2), vb2c = _mm256_set1_ps(1.0f - beta2);
    const __m256 inv_bc1 = _mm256_set1_ps(1.0f / bias_corr1);
    const __m256 inv_bc2 = _mm256_set1_ps(1.0f / bias_corr2);
    const __m256 veps = _mm256_set1_ps(eps), vlr = _mm256_set1_ps(lr);
    const __m256 decay = _mm256_set1_ps(1.0f - lr * weight_decay);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 g = _mm256_loadu_ps(grad + i);
        const __m256 mi = _mm256_fmadd_ps(vb1, _mm256_loadu_ps(m + i), _mm256_mul_ps(vb1c, g));
        const __m256 vi =
            _mm256_fmadd_ps(vb2, _mm256_loadu_ps(v + i), _mm256_mul_ps(vb2c, _mm256_mul_ps(g, g)));
        _mm256_storeu_ps(m + i, mi);
        _mm256_storeu_ps(v + i, vi);
        const __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(_mm256_mul_ps(vi, inv_bc2)), veps);
        const __m256 step = _mm256_div_ps(_mm256_mul_ps(mi, inv_bc1), denom);
        __m256 p = _mm256_mul_ps(_mm256_loadu_ps(param + i), decay);
        p = _mm256_fnmadd_ps(vlr, step, p);
        _mm256_storeu_ps(param + i, p);
    }
    for (; i < n; ++i) {
        const float g = grad[i];
        m[i] = beta1 * m[i] + (1.0f - beta1) * g;
        v[i] = beta2 * v[i] + (1.0f - beta2) * g * g;
        param[i] -= lr * weight_decay * param[i];
        param[i] -= lr * (m[i] / bias_corr1) / (std::sqrt(v[i] / bias_corr2) + eps);
    }
}

}  // namespace

const KernelTable* avx2_kernels() {
    // Double GEMM only backs gradient checks; it shares the reference loop.
    static const KernelTable table{Isa::Avx2,     &sgemm,       scalar_kernels().dgemm,
                                   &saxpy,        &sdot,        &sum_abs_diff,
                                   &sum_sq_diff,  &adamw_step};
    return &table;
}

}  // namespace obidiff::simd

#else

namespace obidiff::simd {
const KernelTable* avx2_kernels() { return nullptr; }
}  // namespace obidiff::simd

#endif
