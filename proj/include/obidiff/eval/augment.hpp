// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "obidiff/data/manifest.hpp"
#include "obidiff/diffusion/pipeline.hpp"
#include "obidiff/eval/classifier.hpp"

namespace obidiff::eval {

struct AugmentConfig {
    std::vector<int> scales{1, 5};
    // Classes treated as rare; empty selects the upper half of the training classes.
    std::vector<int> rare_classes;
    // Training items kept per rare class before augmentation.
    std::size_t rare_keep = 6;
    ClassifierConfig classifier;
    ClassifierTrainConfig train;
    std::uint64_t seed = 0;
    std::string train_split = "train";
    std::string eval_split = "val";
};

nlohmann::json to_json(const AugmentConfig& c);
AugmentConfig augment_config_from_json(const nlohmann::json& j);

struct AugmentRow {
    int scale = 0;
    std::string arm;  // none | duplicate | generated
    AccAtK acc;
};

struct AugmentResult {
    std::vector<int> rare_classes;
    std::size_t rare_items = 0;
    std::vector<AugmentRow> rows;
};

/// Pseudo image j of rare item r uses r's glyph with r's own style for j = 0 and a
/// seeded choice of another training style for j > 0. Scale s takes the first s
/// pseudo images, so a copy-style generator at scale 1 reproduces the duplicate arm.
/// Both arms append extras in the same order, making that equivalence exact.
AugmentResult augmentation_experiment(const data::DatasetManifest& m, const diffusion::BatchGenerator& generator,
                                      const AugmentConfig& cfg);

void write_augment_csv(std::ostream& out, const AugmentResult& r);

}  // namespace obidiff::eval
