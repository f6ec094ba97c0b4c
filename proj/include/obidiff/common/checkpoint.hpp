// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "obidiff/nn/layers.hpp"

namespace obidiff {

/// JSON sidecar stored next to the parameter blob.
struct CheckpointMeta {
    std::string kind;  // "diffusion", "denoiser", "classifier"
    std::int64_t step = 0;
    std::uint64_t seed = 0;
    double loss_ema = 0.0;
    nlohmann::json config = nlohmann::json::object();
    // Present for diffusion checkpoints: {"T","beta_start","beta_end"}.
    nlohmann::json schedule;
};

inline constexpr const char* kParamsFile = "params.bin";
inline constexpr const char* kSidecarFile = "checkpoint.json";

/// Writes `dir/params.bin` then `dir/checkpoint.json`; the sidecar marks completeness.
void save_checkpoint(const std::filesystem::path& dir, const nn::ParamList<float>& params, const CheckpointMeta& meta);
/// Throws ModelStateError when the checkpoint is missing or of another kind.
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& dir, const std::string& expected_kind);
void load_checkpoint_params(const std::filesystem::path& dir, nn::ParamList<float>& params);

}  // namespace obidiff
