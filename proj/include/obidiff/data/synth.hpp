// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "obidiff/data/image.hpp"

namespace obidiff::data {

enum class NoiseType { StrokeBroken, BoneCracked, Edges, DenseWhiteRegions };

inline constexpr int kNoiseTypeCount = 4;

std::string_view to_string(NoiseType t);
/// Accepts the snake_case names written to manifests.
std::optional<NoiseType> parse_noise_type(std::string_view name);

/// Renders the procedural stroke template of `class_id` with a per-seed affine
/// and point jitter. White (1.0) monoline strokes on black (0.0).
GrayImage synth_glyph(int class_id, std::uint64_t seed, std::size_t resolution);

/// Degrades a clean glyph into a rubbing-like style image of the given noise type.
GrayImage synth_noise(const GrayImage& glyph, NoiseType type, std::uint64_t seed);

}  // namespace obidiff::data
