// SPDX-License-Identifier: Apache-2.0
#include "obidiff/diffusion/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "obidiff/common/errors.hpp"

namespace obidiff::diffusion {

using nlohmann::json;

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 10) throw std::invalid_argument("schedule needs T >= 10");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw std::invalid_argument("schedule needs 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.betas.assign(std::size_t(T) + 1, 0.0);
    s.alphas.assign(std::size_t(T) + 1, 1.0);
    s.alpha_bars.assign(std::size_t(T) + 1, 1.0);
    for (int t = 1; t <= T; ++t) {
        const double beta = beta_start + (beta_end - beta_start) * double(t - 1) / double(T - 1);
        s.betas[std::size_t(t)] = beta;
        s.alphas[std::size_t(t)] = 1.0 - beta;
        s.alpha_bars[std::size_t(t)] = s.alpha_bars[std::size_t(t) - 1] * (1.0 - beta);
    }
    return s;
}

template <typename T>
Var<T> q_sample(const Var<T>& x0, const std::vector<int>& t, const Var<T>& eps, const NoiseSchedule& sched) {
    if (x0.shape() != eps.shape()) throw std::invalid_argument("q_sample: x0 and eps shapes differ");
    if (x0.shape().empty() || t.size() != x0.dim(0))
        throw std::invalid_argument("q_sample: need one timestep per batch item");
    std::vector<T> a(t.size()), b(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] < 1 || t[i] > sched.T)
            throw std::invalid_argument("q_sample: timestep " + std::to_string(t[i]) + " outside [1, T]");
        a[i] = T(std::sqrt(sched.alpha_bar(t[i])));
        b[i] = T(std::sqrt(1.0 - sched.alpha_bar(t[i])));
    }
    const std::size_t per = x0.size() / t.size();
    auto out = nn::make_result<T>(x0.shape(), {x0.node(), eps.node()});
    auto& ov = out.raw()->value;
    const auto xv = x0.data();
    const auto ev = eps.data();
    for (std::size_t i = 0; i < t.size(); ++i)
        for (std::size_t j = 0; j < per; ++j) ov[i * per + j] = a[i] * xv[i * per + j] + b[i] * ev[i * per + j];
    if (out.requires_grad()) {
        auto* on = out.raw();
        auto* xn = x0.raw();
        auto* en = eps.raw();
        on->backward = [on, xn, en, a, b, per]() {
            const bool gx = xn->requires_grad, ge = en->requires_grad;
            T* dx = gx ? xn->grad_buffer() : nullptr;
            T* de = ge ? en->grad_buffer() : nullptr;
            for (std::size_t i = 0; i < a.size(); ++i)
                for (std::size_t j = 0; j < per; ++j) {
                    const T g = on->grad[i * per + j];
                    if (dx) dx[i * per + j] += a[i] * g;
                    if (de) de[i * per + j] += b[i] * g;
                }
        };
    }
    return out;
}

json to_json(const ModelConfig& c) {
    return {{"resolution", c.resolution},       {"patch", c.patch},
            {"widths", c.widths},               {"glyph_channels", c.glyph_channels},
            {"glyph_hidden", c.glyph_hidden},   {"style_grid", c.style_grid},
            {"style_hidden", c.style_hidden},   {"context_dim", c.context_dim},
            {"time_dim", c.time_dim},           {"attention_from_level", c.attention_from_level},
            {"glyph_out_init", c.glyph_out_init}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    const auto get = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(field);
        } catch (const json::exception& e) {
            throw SchemaError(std::string("/") + key, e.what());
        }
    };
    get("resolution", c.resolution);
    get("patch", c.patch);
    get("widths", c.widths);
    get("glyph_channels", c.glyph_channels);
    get("glyph_hidden", c.glyph_hidden);
    get("style_grid", c.style_grid);
    get("style_hidden", c.style_hidden);
    get("context_dim", c.context_dim);
    get("time_dim", c.time_dim);
    get("attention_from_level", c.attention_from_level);
    get("glyph_out_init", c.glyph_out_init);
    return c;
}

namespace {

void validate_config(const ModelConfig& c) {
    if (c.widths.empty()) throw std::invalid_argument("model config: widths must be non-empty");
    if (c.patch == 0 || c.resolution % c.patch != 0)
        throw std::invalid_argument("model config: resolution must be divisible by patch");
    const std::size_t grid = c.resolution / c.patch;
    if (grid % (std::size_t(1) << (c.widths.size() - 1)) != 0)
        throw std::invalid_argument("model config: working grid not divisible by 2^(levels-1)");
    if (c.style_grid == 0 || c.resolution % c.style_grid != 0)
        throw std::invalid_argument("model config: resolution must be divisible by style_grid");
    const std::size_t ratio = c.resolution / c.style_grid;
    if (ratio == 0 || (ratio & (ratio - 1)) != 0)
        throw std::invalid_argument("model config: resolution / style_grid must be a power of two");
    if (c.time_dim % 2 != 0) throw std::invalid_argument("model config: time_dim must be even");
}

}  // namespace

template <typename T>
ConditionedDenoiser<T>::ConditionedDenoiser(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    validate_config(config_);
    nn::Rng rng(seed);
    const auto& c = config_;

    g_conv1 = nn::Conv2d<T>(1, c.glyph_hidden, 3, 1, rng);
    g_conv2 = nn::Conv2d<T>(c.glyph_hidden, c.glyph_hidden, 3, 1, rng);
    g_out = nn::Conv2d<T>(c.glyph_hidden, c.glyph_channels, 3, 1, rng, T(c.glyph_out_init));

    std::size_t in_ch = 1, width = std::max<std::size_t>(c.style_hidden / 2, 1);
    for (std::size_t r = c.resolution; r > c.style_grid; r /= 2) {
        s_convs.emplace_back(in_ch, width, 3, 2, rng);
        in_ch = width;
        width = std::min(width * 2, c.style_hidden * 2);
    }
    if (s_convs.empty()) s_convs.emplace_back(1, width, 3, 1, rng);
    s_proj = nn::Linear<T>(in_ch, c.context_dim, rng);
    {
        std::normal_distribution<double> dist(0.0, 0.1);
        std::vector<T> pos(c.style_tokens() * c.context_dim);
        for (auto& v : pos) v = T(dist(rng));
        s_token_pos = Var<T>::parameter({c.style_tokens(), c.context_dim}, std::move(pos));
    }

    const std::size_t emb = 2 * c.time_dim;
    t_fc1 = nn::Linear<T>(c.time_dim, emb, rng);
    t_fc2 = nn::Linear<T>(emb, emb, rng);

    const std::size_t f2 = c.patch * c.patch;
    const std::size_t grid = c.resolution / c.patch;
    in_conv = nn::Conv2d<T>((1 + c.glyph_channels) * f2, c.widths[0], 3, 1, rng);
    const std::size_t L = c.widths.size();
    levels_.resize(L);
    std::size_t prev = c.widths[0];
    for (std::size_t l = 0; l < L; ++l) {
        auto& lv = levels_[l];
        const std::size_t w = c.widths[l];
        const std::size_t side = grid >> l;
        lv.down_block = nn::ResBlock<T>(prev, w, emb, rng);
        lv.has_attention = l >= c.attention_from_level;
        if (lv.has_attention) lv.down_attn = nn::CrossAttention<T>(w, c.context_dim, side, side, rng);
        if (l + 1 < L) lv.downsample = nn::Conv2d<T>(w, w, 3, 2, rng);
        prev = w;
    }
    const std::size_t deep = c.widths.back();
    const std::size_t deep_side = grid >> (L - 1);
    mid1 = nn::ResBlock<T>(deep, deep, emb, rng);
    mid_attn = nn::CrossAttention<T>(deep, c.context_dim, deep_side, deep_side, rng);
    mid2 = nn::ResBlock<T>(deep, deep, emb, rng);
    for (std::size_t l = L; l-- > 0;) {
        auto& lv = levels_[l];
        const std::size_t w = c.widths[l];
        const std::size_t side = grid >> l;
        lv.up_block = nn::ResBlock<T>(w + w, w, emb, rng);
        if (lv.has_attention) lv.up_attn = nn::CrossAttention<T>(w, c.context_dim, side, side, rng);
        if (l > 0) lv.upsample = nn::Conv2d<T>(w, c.widths[l - 1], 3, 1, rng);
    }
    out_norm = nn::GroupNorm<T>(c.widths[0]);
    out_conv = nn::Conv2d<T>(c.widths[0], f2, 3, 1, rng, T(0.1));
}

template <typename T>
void ConditionedDenoiser<T>::check_image(const Var<T>& x, const char* what) const {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != 1 || s[2] != config_.resolution || s[3] != config_.resolution)
        throw std::invalid_argument(std::string(what) + ": expected [N,1," + std::to_string(config_.resolution) + "," +
                                    std::to_string(config_.resolution) + "], got " + nn::to_string(s));
}

template <typename T>
Var<T> ConditionedDenoiser<T>::glyph_encode(const Var<T>& glyph) const {
    check_image(glyph, "glyph_encode");
    return g_out(nn::silu(g_conv2(nn::silu(g_conv1(glyph)))));
}

template <typename T>
Var<T> ConditionedDenoiser<T>::style_encode(const Var<T>& style) const {
    check_image(style, "style_encode");
    Var<T> h = style;
    for (const auto& conv : s_convs) h = nn::silu(conv(h));
    return nn::add_broadcast(s_proj(nn::nchw_to_tokens(h)), s_token_pos);
}

template <typename T>
Var<T> ConditionedDenoiser<T>::predict_noise(const Var<T>& x_t, const std::vector<int>& t, const Var<T>& tau_g,
                                             const Var<T>& tau_s) const {
    check_image(x_t, "predict_noise");
    const std::size_t n = x_t.dim(0);
    if (t.size() != n) throw std::invalid_argument("predict_noise: need one timestep per batch item");
    const auto& gs = tau_g.shape();
    if (gs.size() != 4 || gs[0] != n || gs[1] != config_.glyph_channels || gs[2] != x_t.dim(2) || gs[3] != x_t.dim(3))
        throw std::invalid_argument("predict_noise: glyph condition shape " + nn::to_string(gs));
    const auto& ss = tau_s.shape();
    if (ss.size() != 3 || ss[0] != n || ss[1] != config_.style_tokens() || ss[2] != config_.context_dim)
        throw std::invalid_argument("predict_noise: style condition shape " + nn::to_string(ss));

    const Var<T> emb = t_fc2(nn::silu(t_fc1(nn::timestep_embedding<T>(t, config_.time_dim))));
    Var<T> h = in_conv(nn::pixel_unshuffle(nn::concat_channels(x_t, tau_g), config_.patch));
    std::vector<Var<T>> skips;
    for (const auto& lv : levels_) {
        h = lv.down_block(h, emb);
        if (lv.has_attention) h = lv.down_attn(h, tau_s);
        skips.push_back(h);
        if (lv.downsample.weight.defined()) h = lv.downsample(h);
    }
    h = mid2(mid_attn(mid1(h, emb), tau_s), emb);
    for (std::size_t l = levels_.size(); l-- > 0;) {
        const auto& lv = levels_[l];
        h = lv.up_block(nn::concat_channels(h, skips[l]), emb);
        if (lv.has_attention) h = lv.up_attn(h, tau_s);
        if (lv.upsample.weight.defined()) h = lv.upsample(nn::upsample_nearest2x(h));
    }
    return nn::pixel_shuffle(out_conv(nn::silu(out_norm(h))), config_.patch);
}

template <typename T>
nn::ParamList<T> ConditionedDenoiser<T>::glyph_encoder_parameters() const {
    nn::ParamList<T> out;
    g_conv1.collect("glyph.conv1", out);
    g_conv2.collect("glyph.conv2", out);
    g_out.collect("glyph.out", out);
    return out;
}

template <typename T>
nn::ParamList<T> ConditionedDenoiser<T>::parameters() const {
    nn::ParamList<T> out = glyph_encoder_parameters();
    for (std::size_t i = 0; i < s_convs.size(); ++i) s_convs[i].collect("style.conv" + std::to_string(i), out);
    s_proj.collect("style.proj", out);
    out.push_back({"style.token_pos", s_token_pos});
    t_fc1.collect("time.fc1", out);
    t_fc2.collect("time.fc2", out);
    in_conv.collect("unet.in", out);
    for (std::size_t l = 0; l < levels_.size(); ++l) {
        const auto& lv = levels_[l];
        const std::string p = "unet.level" + std::to_string(l);
        lv.down_block.collect(p + ".down", out);
        if (lv.has_attention) lv.down_attn.collect(p + ".down_attn", out);
        if (lv.downsample.weight.defined()) lv.downsample.collect(p + ".downsample", out);
        lv.up_block.collect(p + ".up", out);
        if (lv.has_attention) lv.up_attn.collect(p + ".up_attn", out);
        if (lv.upsample.weight.defined()) lv.upsample.collect(p + ".upsample", out);
    }
    mid1.collect("unet.mid1", out);
    mid_attn.collect("unet.mid_attn", out);
    mid2.collect("unet.mid2", out);
    out_norm.collect("unet.out_norm", out);
    out_conv.collect("unet.out", out);
    return out;
}

template <typename T>
void ConditionedDenoiser<T>::set_glyph_encoder_trainable(bool on) {
    for (auto& p : glyph_encoder_parameters()) {
        p.var.set_requires_grad(on);
        p.var.zero_grad();
    }
}

template <typename T>
Var<T> training_loss(const NoisePredictor<T>& predictor, const Var<T>& x0, const Var<T>& tau_g, const Var<T>& tau_s,
                     const std::vector<int>& t, const Var<T>& eps, const NoiseSchedule& sched) {
    const Var<T> x_t = q_sample(x0, t, eps, sched);
    return nn::mse_loss(predictor(x_t, t, tau_g, tau_s), eps);
}

template <typename T>
Var<T> training_loss(const ConditionedDenoiser<T>& model, const Var<T>& x0, const Var<T>& glyph,
                     const Var<T>& style_masked, const std::vector<int>& t, const Var<T>& eps,
                     const NoiseSchedule& sched) {
    const NoisePredictor<T> predictor = [&model](const Var<T>& x_t, const std::vector<int>& ts, const Var<T>& g,
                                                 const Var<T>& s) { return model.predict_noise(x_t, ts, g, s); };
    return training_loss(predictor, x0, model.glyph_encode(glyph), model.style_encode(style_masked), t, eps, sched);
}

template <typename T>
Var<T> to_model_space(const std::vector<data::GrayImage>& images) {
    if (images.empty()) throw std::invalid_argument("to_model_space: empty batch");
    const std::size_t w = images[0].width, h = images[0].height;
    std::vector<T> values;
    values.reserve(images.size() * w * h);
    for (const auto& img : images) {
        if (img.width != w || img.height != h) throw std::invalid_argument("to_model_space: mixed image sizes");
        for (float v : img.pixels) values.push_back(T(2) * T(v) - T(1));
    }
    return Var<T>::constant({images.size(), 1, h, w}, std::move(values));
}

template <typename T>
Var<T> to_model_space(const data::GrayImage& image) {
    return to_model_space<T>(std::vector<data::GrayImage>{image});
}

data::GrayImage from_model_space(std::span<const float> values, std::size_t width, std::size_t height) {
    if (values.size() != width * height) throw std::invalid_argument("from_model_space: size mismatch");
    data::GrayImage img(width, height);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const float v = 0.5f * (values[i] + 1.0f);
        img.pixels[i] = std::isfinite(v) ? std::clamp(v, 0.0f, 1.0f) : 0.0f;
    }
    return img;
}

template <typename T>
void require_usable(const ConditionedDenoiser<T>& model) {
    if (model.trained_steps <= 0) throw ModelStateError("model has not been trained");
    for (const auto& p : model.parameters())
        for (T v : p.var.data())
            if (!std::isfinite(double(v))) throw ModelStateError("non-finite value in parameter " + p.name);
}

#define OBIDIFF_INSTANTIATE_DIFFUSION(T)                                                                     \
    template Var<T> q_sample(const Var<T>&, const std::vector<int>&, const Var<T>&, const NoiseSchedule&);   \
    template class ConditionedDenoiser<T>;                                                                   \
    template Var<T> training_loss(const ConditionedDenoiser<T>&, const Var<T>&, const Var<T>&, const Var<T>&, \
                                  const std::vector<int>&, const Var<T>&, const NoiseSchedule&);             \
    template Var<T> training_loss(const NoisePredictor<T>&, const Var<T>&, const Var<T>&, const Var<T>&,     \
                                  const std::vector<int>&, const Var<T>&, const NoiseSchedule&);             \
    template Var<T> to_model_space(const std::vector<data::GrayImage>&);                                     \
    template Var<T> to_model_space(const data::GrayImage&);                                                  \
    template void require_usable(const ConditionedDenoiser<T>&);

OBIDIFF_INSTANTIATE_DIFFUSION(float)
OBIDIFF_INSTANTIATE_DIFFUSION(double)

}  // namespace obidiff::diffusion
