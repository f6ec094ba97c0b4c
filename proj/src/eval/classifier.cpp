// SPDX-License-Identifier: Apache-2.0
#include "obidiff/eval/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "obidiff/common/errors.hpp"
#include "obidiff/data/tensor.hpp"
#include "obidiff/eval/metrics.hpp"

namespace obidiff::eval {

using nlohmann::json;

json to_json(const ClassifierConfig& c) {
    return {{"resolution", c.resolution}, {"labels", c.labels}, {"widths", c.widths}};
}

ClassifierConfig classifier_config_from_json(const json& j) {
    ClassifierConfig c;
    try {
        if (j.contains("resolution")) j["resolution"].get_to(c.resolution);
        if (j.contains("labels")) j["labels"].get_to(c.labels);
        if (j.contains("widths")) j["widths"].get_to(c.widths);
    } catch (const json::exception& e) {
        throw SchemaError("/classifier", e.what());
    }
    return c;
}

json to_json(const ClassifierTrainConfig& c) {
    return {{"epochs", c.epochs},       {"batch", c.batch},   {"lr", c.optim.lr},
            {"weight_decay", c.optim.weight_decay}, {"seed", c.seed}, {"augment", c.augment},
            {"max_rotation_deg", c.max_rotation_deg}, {"hflip", c.hflip}};
}

ClassifierTrainConfig classifier_train_config_from_json(const json& j) {
    ClassifierTrainConfig c;
    try {
        if (j.contains("epochs")) j["epochs"].get_to(c.epochs);
        if (j.contains("batch")) j["batch"].get_to(c.batch);
        if (j.contains("lr")) j["lr"].get_to(c.optim.lr);
        if (j.contains("weight_decay")) j["weight_decay"].get_to(c.optim.weight_decay);
        if (j.contains("seed")) j["seed"].get_to(c.seed);
        if (j.contains("augment")) j["augment"].get_to(c.augment);
        if (j.contains("max_rotation_deg")) j["max_rotation_deg"].get_to(c.max_rotation_deg);
        if (j.contains("hflip")) j["hflip"].get_to(c.hflip);
    } catch (const json::exception& e) {
        throw SchemaError("/classifier_train", e.what());
    }
    return c;
}

template <typename T>
Classifier<T>::Classifier(const ClassifierConfig& config, std::uint64_t seed) : config_(config) {
    if (config_.labels.empty()) throw std::invalid_argument("classifier: no class labels");
    if (config_.widths.empty()) throw std::invalid_argument("classifier: widths must be non-empty");
    nn::Rng rng(seed);
    stem_ = nn::Conv2d<T>(1, config_.widths[0], 3, 2, rng);
    std::size_t prev = config_.widths[0];
    for (std::size_t i = 0; i < config_.widths.size(); ++i) {
        blocks_.emplace_back(prev, config_.widths[i], 0, rng);
        if (i + 1 < config_.widths.size()) transitions_.emplace_back(config_.widths[i], config_.widths[i], 3, 2, rng);
        prev = config_.widths[i];
    }
    head_norm_ = nn::GroupNorm<T>(prev);
    head_ = nn::Linear<T>(prev, config_.num_classes(), rng);
}

template <typename T>
typename Classifier<T>::Output Classifier<T>::forward(const Var<T>& x) const {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != 1 || s[2] != config_.resolution || s[3] != config_.resolution)
        throw std::invalid_argument("classifier: unexpected input shape " + nn::to_string(s));
    const Var<T> none;
    Var<T> h = stem_(x);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        h = blocks_[i](h, none);
        if (i < transitions_.size()) h = nn::silu(transitions_[i](h));
    }
    Var<T> features = nn::global_avg_pool(nn::silu(head_norm_(h)));
    Var<T> logits = head_(features);
    return {features, logits};
}

template <typename T>
nn::ParamList<T> Classifier<T>::parameters() const {
    nn::ParamList<T> out;
    stem_.collect("stem", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        blocks_[i].collect("block" + std::to_string(i), out);
        if (i < transitions_.size()) transitions_[i].collect("transition" + std::to_string(i), out);
    }
    head_norm_.collect("head_norm", out);
    head_.collect("head", out);
    return out;
}

template <typename T>
std::size_t Classifier<T>::label_index(int class_id) const {
    const auto it = std::find(config_.labels.begin(), config_.labels.end(), class_id);
    if (it == config_.labels.end()) throw std::invalid_argument("classifier: unknown class " + std::to_string(class_id));
    return std::size_t(it - config_.labels.begin());
}

template class Classifier<float>;
template class Classifier<double>;

data::GrayImage augment_image(const data::GrayImage& img, double angle_deg, bool mirror) {
    data::GrayImage out(img.width, img.height);
    const double th = angle_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(th), sn = std::sin(th);
    const double cx = 0.5 * double(img.width - 1), cy = 0.5 * double(img.height - 1);
    for (std::size_t r = 0; r < img.height; ++r)
        for (std::size_t c = 0; c < img.width; ++c) {
            const double dx = (mirror ? double(img.width - 1 - c) : double(c)) - cx, dy = double(r) - cy;
            const double sx = std::clamp(cx + cs * dx + sn * dy, 0.0, double(img.width - 1));
            const double sy = std::clamp(cy - sn * dx + cs * dy, 0.0, double(img.height - 1));
            const auto x0 = std::size_t(sx), y0 = std::size_t(sy);
            const std::size_t x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
            const double fx = sx - double(x0), fy = sy - double(y0);
            const double v = (1 - fy) * ((1 - fx) * img.at(y0, x0) + fx * img.at(y0, x1)) +
                             fy * ((1 - fx) * img.at(y1, x0) + fx * img.at(y1, x1));
            out.at(r, c) = float(std::clamp(v, 0.0, 1.0));
        }
    return out;
}

Classifier<float> train_classifier(const std::vector<LabeledImage>& train, const ClassifierConfig& cfg,
                                   const ClassifierTrainConfig& tcfg) {
    if (train.empty()) throw std::invalid_argument("train_classifier: empty training set");
    if (tcfg.batch == 0) throw std::invalid_argument("train_classifier: batch must be positive");
    ClassifierConfig c = cfg;
    std::set<int> labels;
    for (const auto& item : train) labels.insert(item.class_id);
    c.labels.assign(labels.begin(), labels.end());
    Classifier<float> clf(c, tcfg.seed ^ 0xC1A551F1ULL);
    const auto params = clf.parameters();
    nn::AdamW<float> opt(params, tcfg.optim);
    std::mt19937_64 rng(tcfg.seed);
    std::uniform_real_distribution<double> angle(-tcfg.max_rotation_deg, tcfg.max_rotation_deg);
    std::bernoulli_distribution flip(0.5);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const long total_steps = long(tcfg.epochs) * long((train.size() + tcfg.batch - 1) / tcfg.batch);
    long step = 0;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += tcfg.batch) {
            std::vector<data::GrayImage> batch;
            std::vector<int> labels_idx;
            for (std::size_t i = start; i < std::min(order.size(), start + tcfg.batch); ++i) {
                const auto& item = train[order[i]];
                if (tcfg.augment) {
                    const double a = angle(rng);
                    const bool m = tcfg.hflip && flip(rng);
                    batch.push_back(augment_image(item.image, a, m));
                } else {
                    batch.push_back(item.image);
                }
                labels_idx.push_back(int(clf.label_index(item.class_id)));
            }
            // Cosine decay keeps late epochs from oscillating.
            const double progress = double(step) / double(std::max(total_steps, 1L));
            opt.set_lr(tcfg.optim.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
            opt.zero_grad();
            const auto loss = nn::cross_entropy(clf.forward(data::images_to_tensor<float>(batch)).logits, labels_idx);
            nn::backward(loss);
            nn::clip_grad_norm(params, 5.0);
            opt.step();
            ++clf.trained_steps;
            ++step;
        }
    }
    return clf;
}

namespace {

template <typename F>
void for_chunks(const Classifier<float>& clf, const std::vector<data::GrayImage>& images, F&& fn) {
    if (clf.trained_steps <= 0) throw ModelStateError("classifier has not been trained");
    nn::NoGradGuard no_grad;
    constexpr std::size_t kChunk = 64;
    for (std::size_t start = 0; start < images.size(); start += kChunk) {
        const std::vector<data::GrayImage> chunk(images.begin() + std::ptrdiff_t(start),
                                                 images.begin() + std::ptrdiff_t(std::min(images.size(), start + kChunk)));
        fn(clf.forward(data::images_to_tensor<float>(chunk)));
    }
}

}  // namespace

std::vector<std::vector<float>> predict_logits(const Classifier<float>& clf, const std::vector<data::GrayImage>& images) {
    std::vector<std::vector<float>> out;
    const std::size_t k = clf.config().num_classes();
    for_chunks(clf, images, [&](const Classifier<float>::Output& o) {
        const auto v = o.logits.data();
        for (std::size_t i = 0; i < o.logits.dim(0); ++i) out.emplace_back(v.begin() + long(i * k), v.begin() + long((i + 1) * k));
    });
    return out;
}

std::vector<std::vector<double>> extract_features(const Classifier<float>& clf,
                                                  const std::vector<data::GrayImage>& images) {
    std::vector<std::vector<double>> out;
    const std::size_t d = clf.config().feature_dim();
    for_chunks(clf, images, [&](const Classifier<float>::Output& o) {
        const auto v = o.features.data();
        for (std::size_t i = 0; i < o.features.dim(0); ++i)
            out.emplace_back(v.begin() + long(i * d), v.begin() + long((i + 1) * d));
    });
    return out;
}

double acc_at_k(const std::vector<std::vector<float>>& logits, const std::vector<std::size_t>& truth, std::size_t k) {
    if (logits.size() != truth.size()) throw std::invalid_argument("acc_at_k: logits and labels differ in length");
    if (logits.empty()) throw std::invalid_argument("acc_at_k: empty evaluation set");
    const std::size_t classes = logits[0].size();
    if (k < 1 || k > classes) throw std::invalid_argument("acc_at_k: k must lie in [1, class count]");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const auto& row = logits[i];
        if (row.size() != classes || truth[i] >= classes) throw std::invalid_argument("acc_at_k: malformed row");
        const float target = row[truth[i]];
        std::size_t rank = 0;
        for (std::size_t j = 0; j < classes; ++j)
            if (row[j] > target || (row[j] == target && j < truth[i])) ++rank;
        if (rank < k) ++hits;
    }
    return double(hits) / double(logits.size());
}

AccAtK evaluate_accuracy(const Classifier<float>& clf, const std::vector<LabeledImage>& set) {
    std::vector<data::GrayImage> images;
    std::vector<std::size_t> truth;
    for (const auto& item : set) {
        images.push_back(item.image);
        truth.push_back(clf.label_index(item.class_id));
    }
    const auto logits = predict_logits(clf, images);
    const std::size_t classes = clf.config().num_classes();
    return {acc_at_k(logits, truth, std::min<std::size_t>(1, classes)),
            acc_at_k(logits, truth, std::min<std::size_t>(3, classes)),
            acc_at_k(logits, truth, std::min<std::size_t>(5, classes))};
}

double fid_proxy(const std::vector<data::GrayImage>& a, const std::vector<data::GrayImage>& b,
                 const Classifier<float>& extractor) {
    if (a.empty() || b.empty()) throw std::invalid_argument("fid_proxy: empty image set");
    return frechet_distance(extract_features(extractor, a), extract_features(extractor, b));
}

void save_classifier(const std::filesystem::path& dir, const Classifier<float>& clf, std::uint64_t seed,
                     const json& train_config) {
    CheckpointMeta meta;
    meta.kind = "classifier";
    meta.step = clf.trained_steps;
    meta.seed = seed;
    meta.config = {{"model", to_json(clf.config())}};
    if (!train_config.is_null()) meta.config["train"] = train_config;
    save_checkpoint(dir, clf.parameters(), meta);
}

Classifier<float> load_classifier(const std::filesystem::path& dir) {
    const auto meta = read_checkpoint_meta(dir, "classifier");
    Classifier<float> clf(classifier_config_from_json(meta.config.value("model", json::object())), 0);
    auto params = clf.parameters();
    load_checkpoint_params(dir, params);
    clf.trained_steps = meta.step;
    return clf;
}

}  // namespace obidiff::eval
