// SPDX-License-Identifier: Apache-2.0
#include "obidiff/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "obidiff/simd/kernels.hpp"

namespace obidiff::nn {
namespace {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

void require(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument(what);
}

template <typename T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
    require(a.defined() && b.defined(), std::string(op) + ": undefined operand");
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                                        " vs " + to_string(b.shape()));
}

template <typename T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* a,
          std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
    simd::GemmArgs<T> g;
    g.trans_a = ta;
    g.trans_b = tb;
    g.m = m;
    g.n = n;
    g.k = k;
    g.alpha = T(1);
    g.a = a;
    g.lda = lda;
    g.b = b;
    g.ldb = ldb;
    g.beta = beta;
    g.c = c;
    g.ldc = ldc;
    simd::gemm<T>(g);
}

template <typename T>
struct ConvGeom {
    std::size_t c, h, w, k, stride, pad, oh, ow;
    std::size_t rows() const { return c * k * k; }
    std::size_t cols() const { return oh * ow; }
    bool direct() const { return k == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const ConvGeom<T>& g, const T* x, T* col) {
    const std::size_t ocols = g.cols();
    for (std::size_t c = 0; c < g.c; ++c) {
        const T* xc = x + c * g.h * g.w;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                T* row = col + ((c * g.k + ky) * g.k + kx) * ocols;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = long(oy * g.stride + ky) - long(g.pad);
                    T* dst = row + oy * g.ow;
                    if (iy < 0 || iy >= long(g.h)) {
                        std::fill(dst, dst + g.ow, T(0));
                        continue;
                    }
                    const T* src = xc + std::size_t(iy) * g.w;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const long ix = long(ox * g.stride + kx) - long(g.pad);
                        dst[ox] = (ix < 0 || ix >= long(g.w)) ? T(0) : src[ix];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const ConvGeom<T>& g, const T* col, T* dx) {
    const std::size_t ocols = g.cols();
    for (std::size_t c = 0; c < g.c; ++c) {
        T* xc = dx + c * g.h * g.w;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const T* row = col + ((c * g.k + ky) * g.k + kx) * ocols;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = long(oy * g.stride + ky) - long(g.pad);
                    if (iy < 0 || iy >= long(g.h)) continue;
                    T* dst = xc + std::size_t(iy) * g.w;
                    const T* src = row + oy * g.ow;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const long ix = long(ox * g.stride + kx) - long(g.pad);
                        if (ix >= 0 && ix < long(g.w)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

template <typename T>
T sigmoid_scalar(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same(a, b, "add");
    auto out = make_result<T>(a.shape(), {a.node(), b.node()});
    auto& o = out.raw()->value;
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* an = a.raw();
        Node<T>* bn = b.raw();
        on->backward = [on, an, bn]() {
            for (Node<T>* p : {an, bn}) {
                if (!p->requires_grad) continue;
                T* g = p->grad_buffer();
                for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i];
            }
        };
    }
    return out;
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same(a, b, "sub");
    auto out = make_result<T>(a.shape(), {a.node(), b.node()});
    auto& o = out.raw()->value;
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] - bv[i];
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* an = a.raw();
        Node<T>* bn = b.raw();
        on->backward = [on, an, bn]() {
            if (an->requires_grad) {
                T* g = an->grad_buffer();
                for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                T* g = bn->grad_buffer();
                for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] -= on->grad[i];
            }
        };
    }
    return out;
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same(a, b, "mul");
    auto out = make_result<T>(a.shape(), {a.node(), b.node()});
    auto& o = out.raw()->value;
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* an = a.raw();
        Node<T>* bn = b.raw();
        on->backward = [on, an, bn]() {
            if (an->requires_grad) {
                T* g = an->grad_buffer();
                for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                T* g = bn->grad_buffer();
                for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i] * an->value[i];
            }
        };
    }
    return out;
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    auto out = make_result<T>(a.shape(), {a.node()});
    auto& o = out.raw()->value;
    const auto av = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * s;
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* an = a.raw();
        on->backward = [on, an, s]() {
            T* g = an->grad_buffer();
            for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i] * s;
        };
    }
    return out;
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    require(numel(shape) == a.size(), "reshape: element count mismatch " + to_string(a.shape()) +
                                          " -> " + to_string(shape));
    auto out = make_result<T>(std::move(shape), {a.node()});
    std::copy(a.data().begin(), a.data().end(), out.raw()->value.begin());
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* an = a.raw();
        on->backward = [on, an]() {
            T* g = an->grad_buffer();
            for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i];
        };
    }
    return out;
}

template <typename T>
Var<T> add_broadcast(const Var<T>& x, const Var<T>& p) {
    require(x.shape().size() == p.shape().size() + 1, "add_broadcast: rank mismatch");
    require(Shape(x.shape().begin() + 1, x.shape().end()) == p.shape(),
            "add_broadcast: trailing shape mismatch");
    auto out = make_result<T>(x.shape(), {x.node(), p.node()});
    const std::size_t n = x.dim(0);
    const std::size_t inner = p.size();
    auto& o = out.raw()->value;
    const auto xv = x.data();
    const auto pv = p.data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < inner; ++i) o[b * inner + i] = xv[b * inner + i] + pv[i];
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* xn = x.raw();
        Node<T>* pn = p.raw();
        on->backward = [on, xn, pn, n, inner]() {
            if (xn->requires_grad) {
                T* g = xn->grad_buffer();
                for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i];
            }
            if (pn->requires_grad) {
                T* g = pn->grad_buffer();
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t i = 0; i < inner; ++i) g[i] += on->grad[b * inner + i];
            }
        };
    }
    return out;
}

template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& b) {
    require(x.shape().size() == 4 && b.shape().size() == 2, "add_channel_bias: expects NCHW + NC");
    require(x.dim(0) == b.dim(0) && x.dim(1) == b.dim(1), "add_channel_bias: N/C mismatch");
    auto out = make_result<T>(x.shape(), {x.node(), b.node()});
    const std::size_t nc = x.dim(0) * x.dim(1);
    const std::size_t hw = x.dim(2) * x.dim(3);
    auto& o = out.raw()->value;
    const auto xv = x.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < nc; ++i)
        for (std::size_t j = 0; j < hw; ++j) o[i * hw + j] = xv[i * hw + j] + bv[i];
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* xn = x.raw();
        Node<T>* bn = b.raw();
        on->backward = [on, xn, bn, nc, hw]() {
            if (xn->requires_grad) {
                T* g = xn->grad_buffer();
                for (std::size_t i = 0; i < on->grad.size(); ++i) g[i] += on->grad[i];
            }
            if (bn->requires_grad) {
                T* g = bn->grad_buffer();
                for (std::size_t i = 0; i < nc; ++i) {
                    T s = T(0);
                    for (std::size_t j = 0; j < hw; ++j) s += on->grad[i * hw + j];
                    g[i] += s;
                }
            }
        };
    }
    return out;
}

template <typename T>
Var<T> silu(const Var<T>& x) {
    auto out = make_result<T>(x.shape(), {x.node()});
    auto& o = out.raw()->value;
    const auto xv = x.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * sigmoid_scalar(xv[i]);
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* xn = x.raw();
        on->backward = [on, xn]() {
            T* g = xn->grad_buffer();
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                const T v = xn->value[i];
                const T s = sigmoid_scalar(v);
                g[i] += on->grad[i] * s * (T(1) + v * (T(1) - s));
            }
        };
    }
    return out;
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    auto out = make_result<T>(x.shape(), {x.node()});
    auto& o = out.raw()->value;
    const auto xv = x.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > T(0) ? xv[i] : T(0);
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* xn = x.raw();
        on->backward = [on, xn]() {
            T* g = xn->grad_buffer();
            for (std::size_t i = 0; i < on->grad.size(); ++i)
                if (xn->value[i] > T(0)) g[i] += on->grad[i];
        };
    }
    return out;
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    auto out = make_result<T>(x.shape(), {x.node()});
    auto& o = out.raw()->value;
    const auto xv = x.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = sigmoid_scalar(xv[i]);
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* xn = x.raw();
        on->backward = [on, xn]() {
            T* g = xn->grad_buffer();
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                const T s = on->value[i];
                g[i] += on->grad[i] * s * (T(1) - s);
            }
        };
    }
    return out;
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, std::size_t stride,
              std::size_t pad) {
    require(x.shape().size() == 4, "conv2d: input must be NCHW, got " + to_string(x.shape()));
    require(w.shape().size() == 4 && w.dim(2) == w.dim(3), "conv2d: weight must be [O,C,k,k]");
    require(w.dim(1) == x.dim(1), "conv2d: channel mismatch " + to_string(x.shape()) + " vs " +
                                      to_string(w.shape()));
    require(stride >= 1, "conv2d: stride must be >= 1");
    const std::size_t n = x.dim(0), o = w.dim(0), k = w.dim(2);
    require(x.dim(2) + 2 * pad >= k && x.dim(3) + 2 * pad >= k, "conv2d: kernel larger than input");
    ConvGeom<T> geom{x.dim(1), x.dim(2), x.dim(3), k, stride, pad,
                     (x.dim(2) + 2 * pad - k) / stride + 1, (x.dim(3) + 2 * pad - k) / stride + 1};
    const bool has_bias = bias.defined();
    if (has_bias) require(bias.size() == o, "conv2d: bias length mismatch");

    auto out = make_result<T>({n, o, geom.oh, geom.ow},
                              {x.node(), w.node(), has_bias ? bias.node() : NodePtr<T>{}});
    const std::size_t in_stride = geom.c * geom.h * geom.w;
    const std::size_t out_stride = o * geom.cols();
    std::vector<T> col(geom.direct() ? 0 : geom.rows() * geom.cols());
    auto& ov = out.raw()->value;
    for (std::size_t b = 0; b < n; ++b) {
        const T* xb = x.data().data() + b * in_stride;
        const T* src = xb;
        if (!geom.direct()) {
            im2col(geom, xb, col.data());
            src = col.data();
        }
        T* ob = ov.data() + b * out_stride;
        gemm<T>(false, false, o, geom.cols(), geom.rows(), w.data().data(), geom.rows(), src,
                geom.cols(), T(0), ob, geom.cols());
        if (has_bias) {
            const auto bv = bias.data();
            for (std::size_t oc = 0; oc < o; ++oc)
                for (std::size_t j = 0; j < geom.cols(); ++j) ob[oc * geom.cols() + j] += bv[oc];
        }
    }

    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* xn = x.raw();
        Node<T>* wn = w.raw();
        Node<T>* bn = has_bias ? bias.raw() : nullptr;
        on->backward = [on, xn, wn, bn, geom, n, o, in_stride, out_stride]() {
            std::vector<T> colbuf(geom.direct() ? 0 : geom.rows() * geom.cols());
            std::vector<T> dcol(geom.direct() ? 0 : geom.rows() * geom.cols());
            T* gw = wn->requires_grad ? wn->grad_buffer() : nullptr;
            T* gx = xn->requires_grad ? xn->grad_buffer() : nullptr;
            for (std::size_t b = 0; b < n; ++b) {
                const T* dout = on->grad.data() + b * out_stride;
                const T* xb = xn->value.data() + b * in_stride;
                if (gw) {
                    const T* src = xb;
                    if (!geom.direct()) {
                        im2col(geom, xb, colbuf.data());
                        src = colbuf.data();
                    }
                    gemm<T>(false, true, o, geom.rows(), geom.cols(), dout, geom.cols(), src,
                            geom.cols(), T(1), gw, geom.rows());
                }
                if (gx) {
                    if (geom.direct()) {
                        gemm<T>(true, false, geom.rows(), geom.cols(), o, wn->value.data(),
                                geom.rows(), dout, geom.cols(), T(1), gx + b * in_stride,
                                geom.cols());
                    } else {
                        gemm<T>(true, false, geom.rows(), geom.cols(), o, wn->value.data(),
                                geom.rows(), dout, geom.cols(), T(0), dcol.data(), geom.cols());
                        col2im(geom, dcol.data(), gx + b * in_stride);
                    }
                }
                if (bn && bn->requires_grad) {
                    T* gb = bn->grad_buffer();
                    for (std::size_t oc = 0; oc < o; ++oc) {
                        T s = T(0);
                        for (std::size_t j = 0; j < geom.cols(); ++j) s += dout[oc * geom.cols() + j];
                        gb[oc] += s;
                    }
                }
            }
        };
    }
    return out;
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
    require(w.shape().size() == 2, "linear: weight must be [O,F]");
    require(!x.shape().empty() && x.shape().back() == w.dim(1),
            "linear: feature mismatch " + to_string(x.shape()) + " vs " + to_string(w.shape()));
    const std::size_t f = w.dim(1), o = w.dim(0), rows = x.size() / f;
    const bool has_bias = bias.defined();
    if (has_bias) require(bias.size() == o, "linear: bias length mismatch");
    Shape shape = x.shape();
    shape.back() = o;
    auto out = make_result<T>(shape, {x.node(), w.node(), has_bias ? bias.node() : NodePtr<T>{}});
    auto& ov = out.raw()->value;
    gemm<T>(false, true, rows, o, f, x.data().data(), f, w.data().data(), f, T(0), ov.data(), o);
    if (has_bias) {
        const auto bv = bias.data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < o; ++j) ov[r * o + j] += bv[j];
    }
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* xn = x.raw();
        Node<T>* wn = w.raw();
        Node<T>* bn = has_bias ? bias.raw() : nullptr;
        on->backward = [on, xn, wn, bn, rows, f, o]() {
            const T* dout = on->grad.data();
            if (xn->requires_grad)
                gemm<T>(false, false, rows, f, o, dout, o, wn->value.data(), f, T(1),
                        xn->grad_buffer(), f);
            if (wn->requires_grad)
                gemm<T>(true, false, o, f, rows, dout, o, xn->value.data(), f, T(1),
                        wn->grad_buffer(), f);
            if (bn && bn->requires_grad) {
                T* gb = bn->grad_buffer();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < o; ++j) gb[j] += dout[r * o + j];
            }
        };
    }
    return out;
}

template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t groups,
                  T eps) {
    require(x.shape().size() == 4, "group_norm: input must be NCHW");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    require(groups > 0 && c % groups == 0, "group_norm: channels not divisible by groups");
    require(gamma.size() == c && beta.size() == c, "group_norm: affine length mismatch");
    const std::size_t cpg = c / groups, span = cpg * hw;
    auto out = make_result<T>(x.shape(), {x.node(), gamma.node(), beta.node()});
    std::vector<T> mean_v(n * groups), rstd_v(n * groups);
    const auto xv = x.data();
    const auto gv = gamma.data();
    const auto bv = beta.data();
    auto& ov = out.raw()->value;
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t base = (b * c + g * cpg) * hw;
            T s = T(0);
            for (std::size_t i = 0; i < span; ++i) s += xv[base + i];
            const T mu = s / T(span);
            T var = T(0);
            for (std::size_t i = 0; i < span; ++i) {
                const T d = xv[base + i] - mu;
                var += d * d;
            }
            var /= T(span);
            const T rstd = T(1) / std::sqrt(var + eps);
            mean_v[b * groups + g] = mu;
            rstd_v[b * groups + g] = rstd;
            for (std::size_t ci = 0; ci < cpg; ++ci) {
                const std::size_t ch = g * cpg + ci;
                const std::size_t off = base + ci * hw;
                for (std::size_t j = 0; j < hw; ++j)
                    ov[off + j] = (xv[off + j] - mu) * rstd * gv[ch] + bv[ch];
            }
        }
    }
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* xn = x.raw();
        Node<T>* gn = gamma.raw();
        Node<T>* bn = beta.raw();
        on->backward = [on, xn, gn, bn, n, c, hw, groups, cpg, span, mean_v = std::move(mean_v),
                        rstd_v = std::move(rstd_v)]() {
            T* gx = xn->requires_grad ? xn->grad_buffer() : nullptr;
            T* gg = gn->requires_grad ? gn->grad_buffer() : nullptr;
            T* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
            const T* dy = on->grad.data();
            const T* xv = xn->value.data();
            for (std::size_t b = 0; b < n; ++b) {
                for (std::size_t g = 0; g < groups; ++g) {
                    const std::size_t base = (b * c + g * cpg) * hw;
                    const T mu = mean_v[b * groups + g];
                    const T rstd = rstd_v[b * groups + g];
                    T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
                    for (std::size_t ci = 0; ci < cpg; ++ci) {
                        const std::size_t ch = g * cpg + ci;
                        const std::size_t off = base + ci * hw;
                        for (std::size_t j = 0; j < hw; ++j) {
                            const T xhat = (xv[off + j] - mu) * rstd;
                            const T dxhat = dy[off + j] * gn->value[ch];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            if (gg) gg[ch] += dy[off + j] * xhat;
                            if (gb) gb[ch] += dy[off + j];
                        }
                    }
                    if (!gx) continue;
                    const T m1 = sum_dxhat / T(span);
                    const T m2 = sum_dxhat_xhat / T(span);
                    for (std::size_t ci = 0; ci < cpg; ++ci) {
                        const std::size_t ch = g * cpg + ci;
                        const std::size_t off = base + ci * hw;
                        for (std::size_t j = 0; j < hw; ++j) {
                            const T xhat = (xv[off + j] - mu) * rstd;
                            const T dxhat = dy[off + j] * gn->value[ch];
                            gx[off + j] += rstd * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
            }
        };
    }
    return out;
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
    require(x.shape().size() == 4, "upsample: input must be NCHW");
    const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    auto out = make_result<T>({x.dim(0), x.dim(1), 2 * h, 2 * w}, {x.node()});
    auto& ov = out.raw()->value;
    const auto xv = x.data();
    for (std::size_t i = 0; i < nc; ++i)
        for (std::size_t y = 0; y < 2 * h; ++y)
            for (std::size_t xx = 0; xx < 2 * w; ++xx)
                ov[(i * 2 * h + y) * 2 * w + xx] = xv[(i * h + y / 2) * w + xx / 2];
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* xn = x.raw();
        on->backward = [on, xn, nc, h, w]() {
            T* g = xn->grad_buffer();
            for (std::size_t i = 0; i < nc; ++i)
                for (std::size_t y = 0; y < 2 * h; ++y)
                    for (std::size_t xx = 0; xx < 2 * w; ++xx)
                        g[(i * h + y / 2) * w + xx / 2] += on->grad[(i * 2 * h + y) * 2 * w + xx];
        };
    }
    return out;
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    require(a.shape().size() == 4 && b.shape().size() == 4, "concat: inputs must be NCHW");
    require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
            "concat: N/H/W mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    const std::size_t n = a.dim(0), hw = a.dim(2) * a.dim(3);
    const std::size_t sa = a.dim(1) * hw, sb = b.dim(1) * hw;
    auto out = make_result<T>({n, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)}, {a.node(), b.node()});
    auto& ov = out.raw()->value;
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.data().data() + i * sa, sa, ov.data() + i * (sa + sb));
        std::copy_n(b.data().data() + i * sb, sb, ov.data() + i * (sa + sb) + sa);
    }
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* an = a.raw();
        Node<T>* bn = b.raw();
        on->backward = [on, an, bn, n, sa, sb]() {
            T* ga = an->requires_grad ? an->grad_buffer() : nullptr;
            T* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
            for (std::size_t i = 0; i < n; ++i) {
                const T* src = on->grad.data() + i * (sa + sb);
                if (ga)
                    for (std::size_t j = 0; j < sa; ++j) ga[i * sa + j] += src[j];
                if (gb)
                    for (std::size_t j = 0; j < sb; ++j) gb[i * sb + j] += src[sa + j];
            }
        };
    }
    return out;
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    require(x.shape().size() == 4, "global_avg_pool: input must be NCHW");
    const std::size_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
    auto out = make_result<T>({x.dim(0), x.dim(1)}, {x.node()});
    auto& ov = out.raw()->value;
    const auto xv = x.data();
    for (std::size_t i = 0; i < nc; ++i) {
        T s = T(0);
        for (std::size_t j = 0; j < hw; ++j) s += xv[i * hw + j];
        ov[i] = s / T(hw);
    }
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* xn = x.raw();
        on->backward = [on, xn, nc, hw]() {
            T* g = xn->grad_buffer();
            for (std::size_t i = 0; i < nc; ++i) {
                const T d = on->grad[i] / T(hw);
                for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += d;
            }
        };
    }
    return out;
}

template <typename T>
Var<T> nchw_to_tokens(const Var<T>& x) {
    require(x.shape().size() == 4, "nchw_to_tokens: input must be NCHW");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    auto out = make_result<T>({n, hw, c}, {x.node()});
    auto& ov = out.raw()->value;
    const auto xv = x.data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) ov[(b * hw + p) * c + ch] = xv[(b * c + ch) * hw + p];
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* xn = x.raw();
        on->backward = [on, xn, n, c, hw]() {
            T* g = xn->grad_buffer();
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t p = 0; p < hw; ++p)
                        g[(b * c + ch) * hw + p] += on->grad[(b * hw + p) * c + ch];
        };
    }
    return out;
}

template <typename T>
Var<T> tokens_to_nchw(const Var<T>& x, std::size_t h, std::size_t w) {
    require(x.shape().size() == 3 && x.dim(1) == h * w, "tokens_to_nchw: token count mismatch");
    const std::size_t n = x.dim(0), c = x.dim(2), hw = h * w;
    auto out = make_result<T>({n, c, h, w}, {x.node()});
    auto& ov = out.raw()->value;
    const auto xv = x.data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) ov[(b * c + ch) * hw + p] = xv[(b * hw + p) * c + ch];
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* xn = x.raw();
        on->backward = [on, xn, n, c, hw]() {
            T* g = xn->grad_buffer();
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t p = 0; p < hw; ++p)
                        g[(b * hw + p) * c + ch] += on->grad[(b * c + ch) * hw + p];
        };
    }
    return out;
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v) {
    require(q.shape().size() == 3 && k.shape().size() == 3 && v.shape().size() == 3,
            "attention: expects rank-3 tensors");
    require(q.dim(0) == k.dim(0) && k.dim(0) == v.dim(0), "attention: batch mismatch");
    require(q.dim(2) == k.dim(2), "attention: query/key width mismatch");
    require(k.dim(1) == v.dim(1), "attention: key/value length mismatch");
    const std::size_t n = q.dim(0), l = q.dim(1), s = k.dim(1), d = q.dim(2), dv = v.dim(2);
    const T sc = T(1) / std::sqrt(T(d));
    auto out = make_result<T>({n, l, dv}, {q.node(), k.node(), v.node()});
    std::vector<T> probs(n * l * s);
    auto& ov = out.raw()->value;
    for (std::size_t b = 0; b < n; ++b) {
        T* pb = probs.data() + b * l * s;
        gemm<T>(false, true, l, s, d, q.data().data() + b * l * d, d, k.data().data() + b * s * d, d,
                T(0), pb, s);
        for (std::size_t i = 0; i < l; ++i) {
            T* row = pb + i * s;
            T mx = row[0] * sc;
            for (std::size_t j = 0; j < s; ++j) mx = std::max(mx, row[j] * sc);
            T z = T(0);
            for (std::size_t j = 0; j < s; ++j) {
                row[j] = std::exp(row[j] * sc - mx);
                z += row[j];
            }
            for (std::size_t j = 0; j < s; ++j) row[j] /= z;
        }
        gemm<T>(false, false, l, dv, s, pb, s, v.data().data() + b * s * dv, dv, T(0),
                ov.data() + b * l * dv, dv);
    }
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* qn = q.raw();
        Node<T>* kn = k.raw();
        Node<T>* vn = v.raw();
        on->backward = [on, qn, kn, vn, n, l, s, d, dv, sc, probs = std::move(probs)]() {
            std::vector<T> dp(l * s);
            for (std::size_t b = 0; b < n; ++b) {
                const T* pb = probs.data() + b * l * s;
                const T* dout = on->grad.data() + b * l * dv;
                if (vn->requires_grad)
                    gemm<T>(true, false, s, dv, l, pb, s, dout, dv, T(1),
                            vn->grad_buffer() + b * s * dv, dv);
                if (!qn->requires_grad && !kn->requires_grad) continue;
                gemm<T>(false, true, l, s, dv, dout, dv, vn->value.data() + b * s * dv, dv, T(0),
                        dp.data(), s);
                for (std::size_t i = 0; i < l; ++i) {
                    T dot = T(0);
                    for (std::size_t j = 0; j < s; ++j) dot += dp[i * s + j] * pb[i * s + j];
                    for (std::size_t j = 0; j < s; ++j)
                        dp[i * s + j] = pb[i * s + j] * (dp[i * s + j] - dot) * sc;
                }
                if (qn->requires_grad)
                    gemm<T>(false, false, l, d, s, dp.data(), s, kn->value.data() + b * s * d, d,
                            T(1), qn->grad_buffer() + b * l * d, d);
                if (kn->requires_grad)
                    gemm<T>(true, false, s, d, l, dp.data(), s, qn->value.data() + b * l * d, d,
                            T(1), kn->grad_buffer() + b * s * d, d);
            }
        };
    }
    return out;
}

template <typename T>
Var<T> mean(const Var<T>& x) {
    auto out = make_result<T>({1}, {x.node()});
    T s = T(0);
    for (T v : x.data()) s += v;
    const std::size_t cnt = x.size();
    out.raw()->value[0] = s / T(cnt);
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* xn = x.raw();
        on->backward = [on, xn, cnt]() {
            T* g = xn->grad_buffer();
            const T d = on->grad[0] / T(cnt);
            for (std::size_t i = 0; i < cnt; ++i) g[i] += d;
        };
    }
    return out;
}

template <typename T>
Var<T> mse_loss(const Var<T>& pred, const Var<T>& target) {
    require_same(pred, target, "mse_loss");
    auto out = make_result<T>({1}, {pred.node(), target.node()});
    const auto pv = pred.data();
    const auto tv = target.data();
    T s = T(0);
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const T d = pv[i] - tv[i];
        s += d * d;
    }
    const std::size_t cnt = pv.size();
    out.raw()->value[0] = s / T(cnt);
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* pn = pred.raw();
        Node<T>* tn = target.raw();
        on->backward = [on, pn, tn, cnt]() {
            const T k = T(2) * on->grad[0] / T(cnt);
            T* gp = pn->requires_grad ? pn->grad_buffer() : nullptr;
            T* gt = tn->requires_grad ? tn->grad_buffer() : nullptr;
            for (std::size_t i = 0; i < cnt; ++i) {
                const T d = k * (pn->value[i] - tn->value[i]);
                if (gp) gp[i] += d;
                if (gt) gt[i] -= d;
            }
        };
    }
    return out;
}

template <typename T>
Var<T> l1_loss(const Var<T>& pred, const Var<T>& target) {
    require_same(pred, target, "l1_loss");
    auto out = make_result<T>({1}, {pred.node(), target.node()});
    const auto pv = pred.data();
    const auto tv = target.data();
    T s = T(0);
    for (std::size_t i = 0; i < pv.size(); ++i) s += std::abs(pv[i] - tv[i]);
    const std::size_t cnt = pv.size();
    out.raw()->value[0] = s / T(cnt);
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* pn = pred.raw();
        Node<T>* tn = target.raw();
        on->backward = [on, pn, tn, cnt]() {
            const T k = on->grad[0] / T(cnt);
            T* gp = pn->requires_grad ? pn->grad_buffer() : nullptr;
            T* gt = tn->requires_grad ? tn->grad_buffer() : nullptr;
            for (std::size_t i = 0; i < cnt; ++i) {
                const T diff = pn->value[i] - tn->value[i];
                const T sgn = diff > T(0) ? k : (diff < T(0) ? -k : T(0));
                if (gp) gp[i] += sgn;
                if (gt) gt[i] -= sgn;
            }
        };
    }
    return out;
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
    require(logits.shape().size() == 2, "cross_entropy: logits must be [N,K]");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    require(labels.size() == n, "cross_entropy: label count mismatch");
    for (int lbl : labels) require(lbl >= 0 && std::size_t(lbl) < k, "cross_entropy: label out of range");
    auto out = make_result<T>({1}, {logits.node()});
    std::vector<T> probs(n * k);
    const auto lv = logits.data();
    T total = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        T mx = lv[i * k];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, lv[i * k + j]);
        T z = T(0);
        for (std::size_t j = 0; j < k; ++j) {
            probs[i * k + j] = std::exp(lv[i * k + j] - mx);
            z += probs[i * k + j];
        }
        for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= z;
        total += -(lv[i * k + std::size_t(labels[i])] - mx - std::log(z));
    }
    out.raw()->value[0] = total / T(n);
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* ln = logits.raw();
        on->backward = [on, ln, n, k, labels, probs = std::move(probs)]() {
            T* g = ln->grad_buffer();
            const T sc = on->grad[0] / T(n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < k; ++j) {
                    const T onehot = (int(j) == labels[i]) ? T(1) : T(0);
                    g[i * k + j] += sc * (probs[i * k + j] - onehot);
                }
        };
    }
    return out;
}

namespace {

// out[i] = in[perm[i]]; gradients scatter back through the same map.
template <typename T>
Var<T> gather_permutation(const Var<T>& x, Shape shape, std::vector<std::size_t> perm) {
    auto out = make_result<T>(std::move(shape), {x.node()});
    auto& ov = out.raw()->value;
    const auto xv = x.data();
    for (std::size_t i = 0; i < perm.size(); ++i) ov[i] = xv[perm[i]];
    if (out.requires_grad()) {
        Node<T>* on = out.raw();
        Node<T>* xn = x.raw();
        on->backward = [on, xn, perm = std::move(perm)]() {
            T* g = xn->grad_buffer();
            for (std::size_t i = 0; i < perm.size(); ++i) g[perm[i]] += on->grad[i];
        };
    }
    return out;
}

}  // namespace

template <typename T>
Var<T> pixel_unshuffle(const Var<T>& x, std::size_t f) {
    require(x.shape().size() == 4, "pixel_unshuffle: input must be NCHW");
    require(f >= 1 && x.dim(2) % f == 0 && x.dim(3) % f == 0,
            "pixel_unshuffle: spatial dims not divisible by factor");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2) / f, w = x.dim(3) / f;
    std::vector<std::size_t> perm(x.size());
    std::size_t i = 0;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t dy = 0; dy < f; ++dy)
                for (std::size_t dx = 0; dx < f; ++dx)
                    for (std::size_t y = 0; y < h; ++y)
                        for (std::size_t xx = 0; xx < w; ++xx)
                            perm[i++] = ((b * c + ch) * h * f + y * f + dy) * w * f + xx * f + dx;
    return gather_permutation(x, {n, c * f * f, h, w}, std::move(perm));
}

template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, std::size_t f) {
    require(x.shape().size() == 4, "pixel_shuffle: input must be NCHW");
    require(f >= 1 && x.dim(1) % (f * f) == 0, "pixel_shuffle: channels not divisible by factor^2");
    const std::size_t n = x.dim(0), c = x.dim(1) / (f * f), h = x.dim(2), w = x.dim(3);
    std::vector<std::size_t> perm(x.size());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h * f; ++y)
                for (std::size_t xx = 0; xx < w * f; ++xx) {
                    const std::size_t src_c = ch * f * f + (y % f) * f + xx % f;
                    perm[((b * c + ch) * h * f + y) * w * f + xx] = ((b * c * f * f + src_c) * h + y / f) * w + xx / f;
                }
    return gather_permutation(x, {n, c, h * f, w * f}, std::move(perm));
}

#define OBIDIFF_INSTANTIATE_OPS(T)                                                              \
    template Var<T> add(const Var<T>&, const Var<T>&);                                          \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                          \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                          \
    template Var<T> scale(const Var<T>&, T);                                                    \
    template Var<T> reshape(const Var<T>&, Shape);                                              \
    template Var<T> add_broadcast(const Var<T>&, const Var<T>&);                                \
    template Var<T> add_channel_bias(const Var<T>&, const Var<T>&);                             \
    template Var<T> silu(const Var<T>&);                                                        \
    template Var<T> relu(const Var<T>&);                                                        \
    template Var<T> sigmoid(const Var<T>&);                                                     \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t,            \
                           std::size_t);                                                        \
    template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                        \
    template Var<T> group_norm(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, T);    \
    template Var<T> upsample_nearest2x(const Var<T>&);                                          \
    template Var<T> pixel_unshuffle(const Var<T>&, std::size_t);                                \
    template Var<T> pixel_shuffle(const Var<T>&, std::size_t);                                  \
    template Var<T> concat_channels(const Var<T>&, const Var<T>&);                              \
    template Var<T> global_avg_pool(const Var<T>&);                                             \
    template Var<T> nchw_to_tokens(const Var<T>&);                                              \
    template Var<T> tokens_to_nchw(const Var<T>&, std::size_t, std::size_t);                    \
    template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&);                     \
    template Var<T> mean(const Var<T>&);                                                        \
    template Var<T> mse_loss(const Var<T>&, const Var<T>&);                                     \
    template Var<T> l1_loss(const Var<T>&, const Var<T>&);                                      \
    template Var<T> cross_entropy(const Var<T>&, const std::vector<int>&);

OBIDIFF_INSTANTIATE_OPS(float)
OBIDIFF_INSTANTIATE_OPS(double)

}  // namespace obidiff::nn
