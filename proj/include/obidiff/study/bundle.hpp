// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "obidiff/data/manifest.hpp"
#include "obidiff/diffusion/pipeline.hpp"
#include "obidiff/eval/study.hpp"

namespace obidiff::study {

struct BundleConfig {
    std::size_t n_real = 50;
    std::size_t n_generated = 50;
    std::uint64_t seed = 0;
    std::string split = "val";
};

/// Writes images/<item_id>.png and items.json under `out_dir`. Item ids are
/// assigned after the seeded shuffle so they carry no hint of the truth label.
/// Generated items pair one split glyph with another split item's style.
std::vector<eval::StudyItem> build_bundle(const data::DatasetManifest& m, const diffusion::BatchGenerator& generator,
                                          const BundleConfig& cfg, const std::filesystem::path& out_dir);

std::vector<eval::StudyItem> load_bundle_items(const std::filesystem::path& bundle_dir);

/// Offline scorer over a server session log; bytes match the server's report.
std::string score_session_log(const std::filesystem::path& bundle_dir, const std::filesystem::path& log);

}  // namespace obidiff::study
