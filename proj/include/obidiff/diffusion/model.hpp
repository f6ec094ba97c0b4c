// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "json.hpp"
#include "obidiff/data/image.hpp"
#include "obidiff/nn/layers.hpp"

namespace obidiff::diffusion {

using nn::Var;

/// Tables are indexed by timestep t in [1, T]; slot 0 holds the t = 0 identity
/// (beta 0, alpha_bar 1) so reverse steps can read alpha_bar(t_prev) uniformly.
struct NoiseSchedule {
    int T = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    double beta(int t) const { return betas.at(std::size_t(t)); }
    double alpha_bar(int t) const { return alpha_bars.at(std::size_t(t)); }
};

NoiseSchedule make_schedule(int T = 1000, double beta_start = 1e-4, double beta_end = 0.02);

/// sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps with one timestep per batch item.
template <typename T>
Var<T> q_sample(const Var<T>& x0, const std::vector<int>& t, const Var<T>& eps, const NoiseSchedule& sched);

struct ModelConfig {
    std::size_t resolution = 64;
    // Space-to-depth factor between pixels and the backbone's working grid.
    std::size_t patch = 2;
    std::vector<std::size_t> widths{32, 64, 96};
    std::size_t glyph_channels = 8;
    std::size_t glyph_hidden = 16;
    std::size_t style_grid = 4;  // style tokens = style_grid^2
    std::size_t style_hidden = 32;
    std::size_t context_dim = 128;
    std::size_t time_dim = 64;
    // Cross-attention runs at every backbone level with index >= this.
    std::size_t attention_from_level = 1;
    // Scale of the glyph encoder's output projection at initialization.
    double glyph_out_init = 1e-3;

    std::size_t style_tokens() const { return style_grid * style_grid; }
    bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Noise predictor with glyph and style conditioning. Images enter as
/// [N,1,R,R] tensors scaled to [-1,1].
template <typename T>
class ConditionedDenoiser {
public:
    ConditionedDenoiser(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }

    /// [N,1,R,R] -> [N,C_g,R,R]
    Var<T> glyph_encode(const Var<T>& glyph) const;
    /// [N,1,R,R] -> [N,N_s,D_ctx]
    Var<T> style_encode(const Var<T>& style_masked) const;
    /// Output has the shape of x_t.
    Var<T> predict_noise(const Var<T>& x_t, const std::vector<int>& t, const Var<T>& tau_g,
                         const Var<T>& tau_s) const;

    nn::ParamList<T> parameters() const;
    nn::ParamList<T> glyph_encoder_parameters() const;
    /// Excludes the glyph encoder from gradient updates.
    void set_glyph_encoder_trainable(bool on);

    /// Optimizer steps applied so far; zero means untrained.
    std::int64_t trained_steps = 0;

private:
    struct Level {
        nn::ResBlock<T> down_block;
        nn::Conv2d<T> downsample;  // absent on the deepest level
        nn::ResBlock<T> up_block;
        nn::Conv2d<T> upsample;  // absent on the top level
        bool has_attention = false;
        nn::CrossAttention<T> down_attn, up_attn;
    };

    ModelConfig config_;
    // glyph encoder
    nn::Conv2d<T> g_conv1, g_conv2, g_out;
    // style encoder (conv embedding + per-token linear projection)
    std::vector<nn::Conv2d<T>> s_convs;
    nn::Linear<T> s_proj;
    Var<T> s_token_pos;
    // backbone
    nn::Linear<T> t_fc1, t_fc2;
    nn::Conv2d<T> in_conv;
    std::vector<Level> levels_;
    nn::ResBlock<T> mid1, mid2;
    nn::CrossAttention<T> mid_attn;
    nn::GroupNorm<T> out_norm;
    nn::Conv2d<T> out_conv;

    void check_image(const Var<T>& x, const char* what) const;
};

/// Noise predictor signature; lets stub predictors stand in for the model.
template <typename T>
using NoisePredictor =
    std::function<Var<T>(const Var<T>& x_t, const std::vector<int>& t, const Var<T>& tau_g, const Var<T>& tau_s)>;

/// Mean squared error between eps and the prediction on q_sample(x0, t, eps).
template <typename T>
Var<T> training_loss(const ConditionedDenoiser<T>& model, const Var<T>& x0, const Var<T>& glyph,
                     const Var<T>& style_masked, const std::vector<int>& t, const Var<T>& eps,
                     const NoiseSchedule& sched);
template <typename T>
Var<T> training_loss(const NoisePredictor<T>& predictor, const Var<T>& x0, const Var<T>& tau_g,
                     const Var<T>& tau_s, const std::vector<int>& t, const Var<T>& eps,
                     const NoiseSchedule& sched);

/// [0,1] image -> [1,1,R,R] tensor in [-1,1], and the reverse with clamping.
template <typename T>
Var<T> to_model_space(const std::vector<data::GrayImage>& images);
template <typename T>
Var<T> to_model_space(const data::GrayImage& image);
data::GrayImage from_model_space(std::span<const float> values, std::size_t width, std::size_t height);

/// Throws ModelStateError if any parameter is non-finite or the model is untrained.
template <typename T>
void require_usable(const ConditionedDenoiser<T>& model);

}  // namespace obidiff::diffusion
