// SPDX-License-Identifier: Apache-2.0
#include "obidiff/denoiser/denoiser.hpp"

#include <numeric>
#include <random>
#include <stdexcept>

#include "obidiff/common/errors.hpp"
#include "obidiff/data/tensor.hpp"

namespace obidiff::denoiser {

using nlohmann::json;

json to_json(const DenoiserConfig& c) {
    return {{"resolution", c.resolution}, {"patch", c.patch}, {"widths", c.widths}};
}

DenoiserConfig denoiser_config_from_json(const json& j) {
    DenoiserConfig c;
    try {
        if (j.contains("resolution")) j["resolution"].get_to(c.resolution);
        if (j.contains("patch")) j["patch"].get_to(c.patch);
        if (j.contains("widths")) j["widths"].get_to(c.widths);
    } catch (const json::exception& e) {
        throw SchemaError("/denoiser", e.what());
    }
    return c;
}

json to_json(const DenoiserTrainConfig& c) {
    return {{"epochs", c.epochs}, {"batch", c.batch}, {"lr", c.optim.lr},
            {"weight_decay", c.optim.weight_decay}, {"seed", c.seed}};
}

DenoiserTrainConfig denoiser_train_config_from_json(const json& j) {
    DenoiserTrainConfig c;
    try {
        if (j.contains("epochs")) j["epochs"].get_to(c.epochs);
        if (j.contains("batch")) j["batch"].get_to(c.batch);
        if (j.contains("lr")) j["lr"].get_to(c.optim.lr);
        if (j.contains("weight_decay")) j["weight_decay"].get_to(c.optim.weight_decay);
        if (j.contains("seed")) j["seed"].get_to(c.seed);
    } catch (const json::exception& e) {
        throw SchemaError("/denoiser_train", e.what());
    }
    return c;
}

template <typename T>
DenoiserNet<T>::DenoiserNet(const DenoiserConfig& config, std::uint64_t seed) : config_(config) {
    const auto& c = config_;
    if (c.widths.empty() || c.patch == 0 || c.resolution % c.patch != 0 ||
        (c.resolution / c.patch) % (std::size_t(1) << (c.widths.size() - 1)) != 0)
        throw std::invalid_argument("denoiser config: incompatible resolution, patch and depth");
    nn::Rng rng(seed);
    const std::size_t f2 = c.patch * c.patch;
    in_conv_ = nn::Conv2d<T>(f2, c.widths[0], 3, 1, rng);
    std::size_t prev = c.widths[0];
    for (std::size_t l = 0; l < c.widths.size(); ++l) {
        down_.emplace_back(prev, c.widths[l], 0, rng);
        if (l + 1 < c.widths.size()) downsample_.emplace_back(c.widths[l], c.widths[l], 3, 2, rng);
        prev = c.widths[l];
    }
    mid_ = nn::ResBlock<T>(prev, prev, 0, rng);
    up_.resize(c.widths.size());
    upsample_.resize(c.widths.size());
    for (std::size_t l = c.widths.size(); l-- > 0;) {
        up_[l] = nn::ResBlock<T>(2 * c.widths[l], c.widths[l], 0, rng);
        if (l > 0) upsample_[l] = nn::Conv2d<T>(c.widths[l], c.widths[l - 1], 3, 1, rng);
    }
    out_norm_ = nn::GroupNorm<T>(c.widths[0]);
    out_conv_ = nn::Conv2d<T>(c.widths[0], f2, 3, 1, rng);
}

template <typename T>
Var<T> DenoiserNet<T>::forward(const Var<T>& x) const {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != 1 || s[2] != config_.resolution || s[3] != config_.resolution)
        throw std::invalid_argument("denoiser: expected [N,1," + std::to_string(config_.resolution) + "," +
                                    std::to_string(config_.resolution) + "], got " + nn::to_string(s));
    const Var<T> none;
    Var<T> h = in_conv_(nn::pixel_unshuffle(x, config_.patch));
    std::vector<Var<T>> skips;
    for (std::size_t l = 0; l < down_.size(); ++l) {
        h = down_[l](h, none);
        skips.push_back(h);
        if (l < downsample_.size()) h = downsample_[l](h);
    }
    h = mid_(h, none);
    for (std::size_t l = up_.size(); l-- > 0;) {
        h = up_[l](nn::concat_channels(h, skips[l]), none);
        if (l > 0) h = upsample_[l](nn::upsample_nearest2x(h));
    }
    return nn::sigmoid(nn::pixel_shuffle(out_conv_(nn::silu(out_norm_(h))), config_.patch));
}

template <typename T>
nn::ParamList<T> DenoiserNet<T>::parameters() const {
    nn::ParamList<T> out;
    in_conv_.collect("in", out);
    for (std::size_t l = 0; l < down_.size(); ++l) {
        down_[l].collect("down" + std::to_string(l), out);
        if (l < downsample_.size()) downsample_[l].collect("downsample" + std::to_string(l), out);
    }
    mid_.collect("mid", out);
    for (std::size_t l = 0; l < up_.size(); ++l) {
        up_[l].collect("up" + std::to_string(l), out);
        if (l > 0) upsample_[l].collect("upsample" + std::to_string(l), out);
    }
    out_norm_.collect("out_norm", out);
    out_conv_.collect("out", out);
    return out;
}

template class DenoiserNet<float>;
template class DenoiserNet<double>;

std::vector<ImagePair> load_image_pairs(const data::DatasetManifest& m, const std::string& split) {
    std::vector<ImagePair> out;
    for (const auto& rec : m.split(split)) {
        auto p = data::load_pair(m, rec);
        out.push_back({std::move(p.style), std::move(p.glyph)});
    }
    return out;
}

DenoiserResult train_denoiser(const std::vector<ImagePair>& pairs, const DenoiserConfig& cfg,
                              const DenoiserTrainConfig& train) {
    if (pairs.empty()) throw std::invalid_argument("train_denoiser: empty training split");
    if (train.batch == 0) throw std::invalid_argument("train_denoiser: batch must be positive");
    DenoiserResult result{DenoiserNet<float>(cfg, train.seed ^ 0xD3A015EULL), {}};
    auto& model = result.model;
    const auto params = model.parameters();
    nn::AdamW<float> opt(params, train.optim);
    std::mt19937_64 rng(train.seed);
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (int epoch = 0; epoch < train.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += train.batch) {
            std::vector<data::GrayImage> in, target;
            for (std::size_t i = start; i < std::min(order.size(), start + train.batch); ++i) {
                in.push_back(pairs[order[i]].input);
                target.push_back(pairs[order[i]].target);
            }
            opt.zero_grad();
            const auto loss =
                nn::l1_loss(model.forward(data::images_to_tensor<float>(in)), data::images_to_tensor<float>(target));
            nn::backward(loss);
            nn::clip_grad_norm(params, 1.0);
            opt.step();
            ++model.trained_steps;
            sum += double(loss.item());
            ++batches;
        }
        result.epoch_losses.push_back(sum / double(batches));
    }
    return result;
}

DenoiserResult train_denoiser(const data::DatasetManifest& m, const DenoiserConfig& cfg,
                              const DenoiserTrainConfig& train) {
    return train_denoiser(load_image_pairs(m, "train"), cfg, train);
}

std::vector<data::GrayImage> denoise_batch(const DenoiserNet<float>& model, const std::vector<data::GrayImage>& images) {
    if (model.trained_steps <= 0) throw ModelStateError("denoiser has not been trained");
    nn::NoGradGuard no_grad;
    std::vector<data::GrayImage> out;
    constexpr std::size_t kChunk = 32;
    for (std::size_t start = 0; start < images.size(); start += kChunk) {
        const std::vector<data::GrayImage> chunk(images.begin() + std::ptrdiff_t(start),
                                                 images.begin() + std::ptrdiff_t(std::min(images.size(), start + kChunk)));
        for (auto& img : data::tensor_to_images(model.forward(data::images_to_tensor<float>(chunk))))
            out.push_back(std::move(img));
    }
    return out;
}

data::GrayImage denoise(const DenoiserNet<float>& model, const data::GrayImage& image) {
    return denoise_batch(model, {image}).front();
}

double evaluate_l1(const DenoiserNet<float>& model, const std::vector<ImagePair>& pairs) {
    if (pairs.empty()) throw std::invalid_argument("evaluate_l1: no pairs");
    std::vector<data::GrayImage> in;
    for (const auto& p : pairs) in.push_back(p.input);
    const auto out = denoise_batch(model, in);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i)
        for (std::size_t j = 0; j < out[i].size(); ++j) {
            sum += std::abs(double(out[i].pixels[j]) - double(pairs[i].target.pixels[j]));
            ++n;
        }
    return sum / double(n);
}

void save_denoiser(const std::filesystem::path& dir, const DenoiserNet<float>& model, std::uint64_t seed, double loss,
                   const json& train_config) {
    CheckpointMeta meta;
    meta.kind = "denoiser";
    meta.step = model.trained_steps;
    meta.seed = seed;
    meta.loss_ema = loss;
    meta.config = {{"model", to_json(model.config())}};
    if (!train_config.is_null()) meta.config["train"] = train_config;
    save_checkpoint(dir, model.parameters(), meta);
}

DenoiserNet<float> load_denoiser(const std::filesystem::path& dir) {
    const auto meta = read_checkpoint_meta(dir, "denoiser");
    DenoiserNet<float> model(denoiser_config_from_json(meta.config.value("model", json::object())), 0);
    auto params = model.parameters();
    load_checkpoint_params(dir, params);
    model.trained_steps = meta.step;
    return model;
}

}  // namespace obidiff::denoiser
