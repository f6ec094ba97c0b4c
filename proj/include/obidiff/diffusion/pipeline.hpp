// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "obidiff/common/checkpoint.hpp"
#include "obidiff/data/manifest.hpp"
#include "obidiff/diffusion/model.hpp"
#include "obidiff/nn/optim.hpp"

namespace obidiff::diffusion {

struct TrainConfig {
    int steps = 2000;
    std::size_t batch = 8;
    nn::AdamWConfig optim{.lr = 1e-3};
    int warmup_steps = 100;
    double grad_clip = 1.0;  // global L2 norm; <= 0 disables
    std::uint64_t seed = 0;
    // Blank the glyph's box in the style input; off reproduces the unmasked control.
    bool masking = true;
    bool freeze_glyph_encoder = false;
    double ema_decay = 0.0;  // 0 disables parameter averaging
    int checkpoint_every = 0;
    std::filesystem::path checkpoint_dir;
    std::string split = "train";
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// One (x0, x_g, x_s) training triple, images in [0,1].
struct Example {
    data::GrayImage x0;
    data::GrayImage glyph;
    data::GrayImage style_input;
    int class_id = 0;
    data::NoiseType noise_type = data::NoiseType::StrokeBroken;
    std::string pair_id;
};

/// x0 = style image, x_g = glyph, x_s = style with the glyph box blanked when `masking`.
std::vector<Example> load_examples(const data::DatasetManifest& m, const std::string& split, bool masking);

struct TrainResult {
    ConditionedDenoiser<float> model;
    std::vector<double> losses;  // per step
    double loss_ema = 0.0;
};

using StepCallback = std::function<void(int step, double loss)>;

/// Deterministic given (examples, configs): epoch order, timesteps and noise all
/// derive from `train.seed`.
TrainResult train(const std::vector<Example>& examples, const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const NoiseSchedule& sched, const StepCallback& on_step = {});
TrainResult train(const data::DatasetManifest& m, const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const NoiseSchedule& sched, const StepCallback& on_step = {});

/// Mean eps-MSE over `draws` seeded (t, eps) draws per example.
double validation_eps_mse(const ConditionedDenoiser<float>& model, const std::vector<Example>& examples,
                          const NoiseSchedule& sched, std::uint64_t seed, int draws = 4);

/// `steps` timesteps uniformly strided over [1, T], descending, ending at the smallest.
std::vector<int> respaced_timesteps(int T, int steps);

/// Ancestral sampling over the respaced chain. Every item draws its noise from
/// its own seed, so results do not depend on batch composition.
std::vector<data::GrayImage> sample_batch(const ConditionedDenoiser<float>& model,
                                          const std::vector<data::GrayImage>& glyphs,
                                          const std::vector<data::GrayImage>& styles_masked,
                                          const NoiseSchedule& sched, int steps,
                                          const std::vector<std::uint64_t>& seeds);
data::GrayImage sample(const ConditionedDenoiser<float>& model, const data::GrayImage& glyph,
                       const data::GrayImage& style_masked, const NoiseSchedule& sched, int steps,
                       std::uint64_t seed);

/// Masks `style_raw` against `glyph` (and its own box when `dual`) then samples.
data::GrayImage generate_personalized(const ConditionedDenoiser<float>& model, const data::GrayImage& glyph,
                                      const data::GrayImage& style_raw, bool dual, const NoiseSchedule& sched,
                                      int steps, std::uint64_t seed);

/// Maps (glyphs, raw styles, per-item seeds) to generated images, index-aligned.
using BatchGenerator = std::function<std::vector<data::GrayImage>(const std::vector<data::GrayImage>& glyphs,
                                                                  const std::vector<data::GrayImage>& styles_raw,
                                                                  const std::vector<std::uint64_t>& seeds)>;

/// Masks each style against its glyph and samples. Throws ModelStateError up front
/// for an unusable model. The model must outlive the generator.
BatchGenerator make_generator(const ConditionedDenoiser<float>& model, const NoiseSchedule& sched, int steps,
                              bool dual_mask);

/// Returns each raw style unchanged; the control that isolates the generator's contribution.
BatchGenerator copy_style_generator();

struct GenerationRequest {
    std::string glyph_path;
    std::string style_path;
    std::string out_path;
    std::uint64_t seed = 0;
    bool dual_mask = true;
};

/// One JSON object per non-blank line; SchemaError pointers are "/<line>/<field>".
std::vector<GenerationRequest> parse_generation_requests(std::istream& in);

struct LoadedDiffusion {
    ConditionedDenoiser<float> model;
    NoiseSchedule schedule;
    CheckpointMeta meta;
};

void save_diffusion(const std::filesystem::path& dir, const ConditionedDenoiser<float>& model,
                    const NoiseSchedule& sched, std::uint64_t seed, double loss_ema,
                    const nlohmann::json& train_config = nlohmann::json());
LoadedDiffusion load_diffusion(const std::filesystem::path& dir);

}  // namespace obidiff::diffusion
