// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "obidiff/nn/tensor.hpp"

// Differentiable ops over NCHW / token tensors. Every op validates shapes and
// throws std::invalid_argument on mismatch.
namespace obidiff::nn {

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);

/// x[N, ...] + p[...] broadcast over the leading batch dimension.
template <typename T> Var<T> add_broadcast(const Var<T>& x, const Var<T>& p);
/// x[N,C,H,W] + b[N,C] broadcast over the spatial dimensions.
template <typename T> Var<T> add_channel_bias(const Var<T>& x, const Var<T>& b);

template <typename T> Var<T> silu(const Var<T>& x);
template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);

/// x[N,C,H,W], w[O,C,k,k], bias[O] (may be undefined). Zero padding.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, std::size_t stride,
              std::size_t pad);

/// x[..., F] @ w[O, F]^T + bias[O] over all leading dims.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias);

template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t groups,
                  T eps = T(1e-5));

template <typename T> Var<T> upsample_nearest2x(const Var<T>& x);
/// Space-to-depth: [N,C,H,W] -> [N,C*f*f,H/f,W/f]; pixel_shuffle is its inverse.
template <typename T> Var<T> pixel_unshuffle(const Var<T>& x, std::size_t f);
template <typename T> Var<T> pixel_shuffle(const Var<T>& x, std::size_t f);
template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
/// [N,C,H,W] -> [N,C]
template <typename T> Var<T> global_avg_pool(const Var<T>& x);

/// [N,C,H,W] -> [N,H*W,C] and back.
template <typename T> Var<T> nchw_to_tokens(const Var<T>& x);
template <typename T> Var<T> tokens_to_nchw(const Var<T>& x, std::size_t h, std::size_t w);

/// Scaled dot-product attention: q[N,L,D], k[N,S,D], v[N,S,Dv] -> [N,L,Dv].
template <typename T> Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v);

template <typename T> Var<T> mean(const Var<T>& x);
template <typename T> Var<T> mse_loss(const Var<T>& pred, const Var<T>& target);
template <typename T> Var<T> l1_loss(const Var<T>& pred, const Var<T>& target);
/// Mean softmax cross-entropy of logits[N,K] against integer labels.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels);

}  // namespace obidiff::nn
