// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "json.hpp"
#include "obidiff/common/checkpoint.hpp"
#include "obidiff/data/manifest.hpp"
#include "obidiff/nn/optim.hpp"

namespace obidiff::denoiser {

using nn::Var;

struct DenoiserConfig {
    std::size_t resolution = 64;
    std::size_t patch = 2;
    std::vector<std::size_t> widths{32, 64};
};

nlohmann::json to_json(const DenoiserConfig& c);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j);

/// Encoder-decoder with skip connections mapping a style image to its glyph.
/// Input and output are [N,1,R,R] in [0,1]; the output passes through a sigmoid.
template <typename T>
class DenoiserNet {
public:
    DenoiserNet(const DenoiserConfig& config, std::uint64_t seed);
    Var<T> forward(const Var<T>& x) const;
    nn::ParamList<T> parameters() const;
    const DenoiserConfig& config() const { return config_; }
    std::int64_t trained_steps = 0;

private:
    DenoiserConfig config_;
    nn::Conv2d<T> in_conv_, out_conv_;
    std::vector<nn::ResBlock<T>> down_, up_;
    std::vector<nn::Conv2d<T>> downsample_, upsample_;
    nn::ResBlock<T> mid_;
    nn::GroupNorm<T> out_norm_;
};

struct DenoiserTrainConfig {
    int epochs = 50;
    std::size_t batch = 8;
    nn::AdamWConfig optim{.lr = 2e-3};
    std::uint64_t seed = 0;
};

nlohmann::json to_json(const DenoiserTrainConfig& c);
DenoiserTrainConfig denoiser_train_config_from_json(const nlohmann::json& j);

struct ImagePair {
    data::GrayImage input;   // noisy style image
    data::GrayImage target;  // clean glyph
};

std::vector<ImagePair> load_image_pairs(const data::DatasetManifest& m, const std::string& split);

struct DenoiserResult {
    DenoiserNet<float> model;
    std::vector<double> epoch_losses;
};

/// Minimizes mean |model(style) - glyph|. Deterministic given the seed.
DenoiserResult train_denoiser(const std::vector<ImagePair>& pairs, const DenoiserConfig& cfg,
                              const DenoiserTrainConfig& train);
DenoiserResult train_denoiser(const data::DatasetManifest& m, const DenoiserConfig& cfg,
                              const DenoiserTrainConfig& train);

std::vector<data::GrayImage> denoise_batch(const DenoiserNet<float>& model, const std::vector<data::GrayImage>& images);
data::GrayImage denoise(const DenoiserNet<float>& model, const data::GrayImage& image);

/// Mean L1 between model output and target over `pairs`.
double evaluate_l1(const DenoiserNet<float>& model, const std::vector<ImagePair>& pairs);

void save_denoiser(const std::filesystem::path& dir, const DenoiserNet<float>& model, std::uint64_t seed,
                   double loss, const nlohmann::json& train_config = nlohmann::json());
DenoiserNet<float> load_denoiser(const std::filesystem::path& dir);

}  // namespace obidiff::denoiser
