// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "json.hpp"
#include "obidiff/common/checkpoint.hpp"
#include "obidiff/data/image.hpp"
#include "obidiff/nn/optim.hpp"

namespace obidiff::eval {

using nn::Var;

struct ClassifierConfig {
    std::size_t resolution = 64;
    std::vector<int> labels;  // class ids; logit i scores labels[i]
    std::vector<std::size_t> widths{16, 32, 64};

    std::size_t num_classes() const { return labels.size(); }
    std::size_t feature_dim() const { return widths.back(); }
};

nlohmann::json to_json(const ClassifierConfig& c);
ClassifierConfig classifier_config_from_json(const nlohmann::json& j);

/// Small residual network: strided stem, one residual block per stage with
/// stride-2 transitions, global average pooling (the feature tap) and a linear head.
template <typename T>
class Classifier {
public:
    Classifier(const ClassifierConfig& config, std::uint64_t seed);

    struct Output {
        Var<T> features;  // [N, feature_dim]
        Var<T> logits;    // [N, num_classes]
    };
    Output forward(const Var<T>& x) const;
    nn::ParamList<T> parameters() const;
    const ClassifierConfig& config() const { return config_; }
    /// Index of `class_id` in the label table; throws for unknown classes.
    std::size_t label_index(int class_id) const;
    std::int64_t trained_steps = 0;

private:
    ClassifierConfig config_;
    nn::Conv2d<T> stem_;
    std::vector<nn::ResBlock<T>> blocks_;
    std::vector<nn::Conv2d<T>> transitions_;
    nn::GroupNorm<T> head_norm_;
    nn::Linear<T> head_;
};

struct LabeledImage {
    data::GrayImage image;
    int class_id = 0;
};

struct ClassifierTrainConfig {
    int epochs = 30;
    std::size_t batch = 16;
    nn::AdamWConfig optim{.lr = 2e-3};
    std::uint64_t seed = 0;
    bool augment = true;
    double max_rotation_deg = 10.0;
    bool hflip = true;
};

nlohmann::json to_json(const ClassifierTrainConfig& c);
ClassifierTrainConfig classifier_train_config_from_json(const nlohmann::json& j);

/// Labels are the sorted distinct class ids of `train`. Deterministic given the seed.
Classifier<float> train_classifier(const std::vector<LabeledImage>& train, const ClassifierConfig& cfg,
                                   const ClassifierTrainConfig& tcfg);

/// Rotation about the image center (bilinear, edge-clamped) and optional mirror.
data::GrayImage augment_image(const data::GrayImage& img, double angle_deg, bool mirror);

std::vector<std::vector<float>> predict_logits(const Classifier<float>& clf, const std::vector<data::GrayImage>& images);
std::vector<std::vector<double>> extract_features(const Classifier<float>& clf,
                                                  const std::vector<data::GrayImage>& images);

/// Fraction of rows whose true index ranks within the top k. Ranking is by
/// descending logit with ties broken by ascending class index.
double acc_at_k(const std::vector<std::vector<float>>& logits, const std::vector<std::size_t>& truth, std::size_t k);

struct AccAtK {
    double acc1 = 0.0, acc3 = 0.0, acc5 = 0.0;
};

/// Acc@{1,3,5}; k is capped at the class count.
AccAtK evaluate_accuracy(const Classifier<float>& clf, const std::vector<LabeledImage>& set);

/// Frechet distance between classifier features of two image sets.
double fid_proxy(const std::vector<data::GrayImage>& a, const std::vector<data::GrayImage>& b,
                 const Classifier<float>& extractor);

void save_classifier(const std::filesystem::path& dir, const Classifier<float>& clf, std::uint64_t seed,
                     const nlohmann::json& train_config = nlohmann::json());
Classifier<float> load_classifier(const std::filesystem::path& dir);

}  // namespace obidiff::eval
