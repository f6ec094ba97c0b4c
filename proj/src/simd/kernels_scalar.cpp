// SPDX-License-Identifier: Apache-2.0
// Reference kernels. Plain loops, no intrinsics; the vector variants must agree
// with these up to floating-point reassociation.
#include "obidiff/simd/kernels.hpp"

#include <cmath>

namespace obidiff::simd {
namespace {

template <typename T>
void scale_c(const GemmArgs<T>& g) {
    for (std::size_t i = 0; i < g.m; ++i) {
        T* row = g.c + i * g.ldc;
        if (g.beta == T(0)) {
            for (std::size_t j = 0; j < g.n; ++j) row[j] = T(0);
        } else if (g.beta != T(1)) {
            for (std::size_t j = 0; j < g.n; ++j) row[j] *= g.beta;
        }
    }
}

template <typename T>
void gemm_ref(const GemmArgs<T>& g) {
    scale_c(g);
    if (g.m == 0 || g.n == 0 || g.k == 0 || g.alpha == T(0)) return;
    if (!g.trans_a && !g.trans_b) {
        for (std::size_t i = 0; i < g.m; ++i) {
            T* crow = g.c + i * g.ldc;
            const T* arow = g.a + i * g.lda;
            for (std::size_t p = 0; p < g.k; ++p) {
                const T aip = g.alpha * arow[p];
                if (aip == T(0)) continue;
                const T* brow = g.b + p * g.ldb;
                for (std::size_t j = 0; j < g.n; ++j) crow[j] += aip * brow[j];
            }
        }
    } else if (!g.trans_a && g.trans_b) {
        for (std::size_t i = 0; i < g.m; ++i) {
            const T* arow = g.a + i * g.lda;
            T* crow = g.c + i * g.ldc;
            for (std::size_t j = 0; j < g.n; ++j) {
                const T* bcol = g.b + j * g.ldb;
                T acc = T(0);
                for (std::size_t p = 0; p < g.k; ++p) acc += arow[p] * bcol[p];
                crow[j] += g.alpha * acc;
            }
        }
    } else if (g.trans_a && !g.trans_b) {
        for (std::size_t p = 0; p < g.k; ++p) {
            const T* acol = g.a + p * g.lda;
            const T* brow = g.b + p * g.ldb;
            for (std::size_t i = 0; i < g.m; ++i) {
                const T aip = g.alpha * acol[i];
                if (aip == T(0)) continue;
                T* crow = g.c + i * g.ldc;
                for (std::size_t j = 0; j < g.n; ++j) crow[j] += aip * brow[j];
            }
        }
    } else {
        for (std::size_t i = 0; i < g.m; ++i) {
            T* crow = g.c + i * g.ldc;
            for (std::size_t j = 0; j < g.n; ++j) {
                T acc = T(0);
                for (std::size_t p = 0; p < g.k; ++p) acc += g.a[p * g.lda + i] * g.b[j * g.ldb + p];
                crow[j] += g.alpha * acc;
            }
        }
    }
}

void sgemm(const GemmArgs<float>& g) { gemm_ref(g); }
void dgemm(const GemmArgs<double>& g) { gemm_ref(g); }

void saxpy(std::size_t n, float a, const float* x, float* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

float sdot(std::size_t n, const float* x, const float* y) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

double sum_abs_diff(std::size_t n, const float* x, const float* y) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += std::fabs(double(x[i]) - double(y[i]));
    return acc;
}

double sum_sq_diff(std::size_t n, const float* x, const float* y) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = double(x[i]) - double(y[i]);
        acc += d * d;
    }
    return acc;
}

void adamw_step(std::size_t n, float* param, const float* grad, float* m, float* v, float lr,
                float beta1, float beta2, float eps, float weight_decay, float bias_corr1,
                float bias_corr2) {
    for (std::size_t i = 0; i < n; ++i) {
        const float g = grad[i];
        m[i] = beta1 * m[i] + (1.0f - beta1) * g;
        v[i] = beta2 * v[i] + (1.0f - beta2) * g * g;
        const float mhat = m[i] / bias_corr1;
        const float vhat = v[i] / bias_corr2;
        param[i] -= lr * weight_decay * param[i];
        param[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

}  // namespace

const KernelTable& scalar_kernels() {
    static const KernelTable table{Isa::Scalar, &sgemm,        &dgemm,        &saxpy,
                                   &sdot,       &sum_abs_diff, &sum_sq_diff,  &adamw_step};
    return table;
}

}  // namespace obidiff::simd
