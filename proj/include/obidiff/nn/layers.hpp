// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "obidiff/nn/ops.hpp"
#include "obidiff/nn/tensor.hpp"

namespace obidiff::nn {

template <typename T>
struct NamedParam {
    std::string name;
    Var<T> var;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

using Rng = std::mt19937_64;

/// Uniform(-bound, bound) with bound = scale / sqrt(fan_in).
template <typename T>
std::vector<T> fan_in_uniform(std::size_t count, std::size_t fan_in, T scale, Rng& rng);

template <typename T>
struct Conv2d {
    Var<T> weight;
    Var<T> bias;
    std::size_t stride = 1;
    std::size_t pad = 0;

    Conv2d() = default;
    Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, Rng& rng,
           T init_scale = T(1));
    Var<T> operator()(const Var<T>& x) const { return conv2d(x, weight, bias, stride, pad); }
    void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
struct Linear {
    Var<T> weight;
    Var<T> bias;

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng, T init_scale = T(1));
    Var<T> operator()(const Var<T>& x) const { return linear(x, weight, bias); }
    void collect(const std::string& prefix, ParamList<T>& out) const;
};

template <typename T>
struct GroupNorm {
    Var<T> gamma;
    Var<T> beta;
    std::size_t groups = 1;

    GroupNorm() = default;
    explicit GroupNorm(std::size_t channels, std::size_t max_groups = 8);
    Var<T> operator()(const Var<T>& x) const { return group_norm(x, gamma, beta, groups); }
    void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// GroupNorm-SiLU-Conv twice with an optional per-channel embedding injection
/// and a 1x1 projection on the skip path when widths differ.
template <typename T>
struct ResBlock {
    GroupNorm<T> norm1, norm2;
    Conv2d<T> conv1, conv2;
    Linear<T> emb_proj;
    Conv2d<T> skip;
    bool has_emb = false;
    bool has_skip = false;

    ResBlock() = default;
    ResBlock(std::size_t in, std::size_t out, std::size_t emb_dim, Rng& rng);
    Var<T> operator()(const Var<T>& x, const Var<T>& emb) const;
    void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Residual cross-attention over a spatial feature map. Queries carry a learned
/// positional table so attention can route context tokens to locations.
template <typename T>
struct CrossAttention {
    GroupNorm<T> norm;
    Var<T> query_pos;  // [H*W, C]
    Linear<T> to_q, to_k, to_v, to_out;
    std::size_t height = 0, width = 0;

    CrossAttention() = default;
    CrossAttention(std::size_t channels, std::size_t context_dim, std::size_t height,
                   std::size_t width, Rng& rng);
    /// x[N,C,H,W], context[N,S,D]
    Var<T> operator()(const Var<T>& x, const Var<T>& context) const;
    void collect(const std::string& prefix, ParamList<T>& out) const;
};

/// Sinusoidal embedding of integer timesteps -> [N, dim].
template <typename T>
Var<T> timestep_embedding(const std::vector<int>& timesteps, std::size_t dim);

}  // namespace obidiff::nn
