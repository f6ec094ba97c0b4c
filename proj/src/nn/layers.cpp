// SPDX-License-Identifier: Apache-2.0
#include "obidiff/nn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace obidiff::nn {

template <typename T>
std::vector<T> fan_in_uniform(std::size_t count, std::size_t fan_in, T scale, Rng& rng) {
    const double bound = double(scale) / std::sqrt(double(std::max<std::size_t>(fan_in, 1)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> out(count);
    for (auto& v : out) v = T(dist(rng));
    return out;
}

template <typename T>
Conv2d<T>::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_,
                  Rng& rng, T init_scale)
    : stride(stride_), pad(kernel / 2) {
    const std::size_t fan_in = in * kernel * kernel;
    weight = Var<T>::parameter({out, in, kernel, kernel},
                               fan_in_uniform<T>(out * fan_in, fan_in, init_scale, rng));
    bias = Var<T>::parameter({out}, std::vector<T>(out, T(0)));
}

template <typename T>
void Conv2d<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
}

template <typename T>
Linear<T>::Linear(std::size_t in, std::size_t out, Rng& rng, T init_scale) {
    weight = Var<T>::parameter({out, in}, fan_in_uniform<T>(out * in, in, init_scale, rng));
    bias = Var<T>::parameter({out}, std::vector<T>(out, T(0)));
}

template <typename T>
void Linear<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
}

template <typename T>
GroupNorm<T>::GroupNorm(std::size_t channels, std::size_t max_groups) {
    groups = std::min(max_groups, channels);
    while (channels % groups != 0) --groups;
    gamma = Var<T>::parameter({channels}, std::vector<T>(channels, T(1)));
    beta = Var<T>::parameter({channels}, std::vector<T>(channels, T(0)));
}

template <typename T>
void GroupNorm<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
}

template <typename T>
ResBlock<T>::ResBlock(std::size_t in, std::size_t out, std::size_t emb_dim, Rng& rng)
    : norm1(in), norm2(out), conv1(in, out, 3, 1, rng), conv2(out, out, 3, 1, rng) {
    if (emb_dim > 0) {
        emb_proj = Linear<T>(emb_dim, out, rng);
        has_emb = true;
    }
    if (in != out) {
        skip = Conv2d<T>(in, out, 1, 1, rng);
        has_skip = true;
    }
}

template <typename T>
Var<T> ResBlock<T>::operator()(const Var<T>& x, const Var<T>& emb) const {
    Var<T> h = conv1(silu(norm1(x)));
    if (has_emb) {
        if (!emb.defined()) throw std::invalid_argument("ResBlock: embedding required");
        h = add_channel_bias(h, emb_proj(silu(emb)));
    }
    h = conv2(silu(norm2(h)));
    return add(h, has_skip ? skip(x) : x);
}

template <typename T>
void ResBlock<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    norm1.collect(prefix + ".norm1", out);
    conv1.collect(prefix + ".conv1", out);
    if (has_emb) emb_proj.collect(prefix + ".emb", out);
    norm2.collect(prefix + ".norm2", out);
    conv2.collect(prefix + ".conv2", out);
    if (has_skip) skip.collect(prefix + ".skip", out);
}

template <typename T>
CrossAttention<T>::CrossAttention(std::size_t channels, std::size_t context_dim, std::size_t h,
                                  std::size_t w, Rng& rng)
    : norm(channels),
      to_q(channels, channels, rng),
      to_k(context_dim, channels, rng),
      to_v(context_dim, channels, rng),
      to_out(channels, channels, rng),
      height(h),
      width(w) {
    std::normal_distribution<double> dist(0.0, 0.5);
    std::vector<T> pos(h * w * channels);
    for (auto& v : pos) v = T(dist(rng));
    query_pos = Var<T>::parameter({h * w, channels}, std::move(pos));
}

template <typename T>
Var<T> CrossAttention<T>::operator()(const Var<T>& x, const Var<T>& context) const {
    if (x.shape().size() != 4 || x.dim(2) != height || x.dim(3) != width)
        throw std::invalid_argument("CrossAttention: unexpected feature map " + to_string(x.shape()));
    Var<T> tokens = add_broadcast(nchw_to_tokens(norm(x)), query_pos);
    Var<T> attended = attention(to_q(tokens), to_k(context), to_v(context));
    return add(x, tokens_to_nchw(to_out(attended), height, width));
}

template <typename T>
void CrossAttention<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    norm.collect(prefix + ".norm", out);
    out.push_back({prefix + ".query_pos", query_pos});
    to_q.collect(prefix + ".q", out);
    to_k.collect(prefix + ".k", out);
    to_v.collect(prefix + ".v", out);
    to_out.collect(prefix + ".out", out);
}

template <typename T>
Var<T> timestep_embedding(const std::vector<int>& timesteps, std::size_t dim) {
    if (dim % 2 != 0) throw std::invalid_argument("timestep_embedding: dim must be even");
    const std::size_t half = dim / 2;
    std::vector<T> out(timesteps.size() * dim);
    for (std::size_t i = 0; i < timesteps.size(); ++i) {
        for (std::size_t j = 0; j < half; ++j) {
            const double freq = std::exp(-std::log(10000.0) * double(j) / double(half));
            const double arg = double(timesteps[i]) * freq;
            out[i * dim + j] = T(std::cos(arg));
            out[i * dim + half + j] = T(std::sin(arg));
        }
    }
    return Var<T>::constant({timesteps.size(), dim}, std::move(out));
}

template std::vector<float> fan_in_uniform(std::size_t, std::size_t, float, Rng&);
template std::vector<double> fan_in_uniform(std::size_t, std::size_t, double, Rng&);
template struct Conv2d<float>;
template struct Conv2d<double>;
template struct Linear<float>;
template struct Linear<double>;
template struct GroupNorm<float>;
template struct GroupNorm<double>;
template struct ResBlock<float>;
template struct ResBlock<double>;
template struct CrossAttention<float>;
template struct CrossAttention<double>;
template Var<float> timestep_embedding(const std::vector<int>&, std::size_t);
template Var<double> timestep_embedding(const std::vector<int>&, std::size_t);

}  // namespace obidiff::nn
