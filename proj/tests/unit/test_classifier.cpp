// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "obidiff/common/errors.hpp"
#include "obidiff/data/synth.hpp"
#include "obidiff/eval/classifier.hpp"
#include "obidiff/nn/ops.hpp"
#include "support.hpp"

using namespace obidiff;
using namespace obidiff::eval;

namespace {

// Position of `truth` after sorting classes by (logit desc, index asc).
std::size_t brute_rank(const std::vector<float>& row, std::size_t truth) {
    std::vector<std::size_t> order(row.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    return std::size_t(std::find(order.begin(), order.end(), truth) - order.begin());
}

std::vector<LabeledImage> glyph_set(std::size_t per_class, int classes, std::uint64_t seed, std::size_t res) {
    std::vector<LabeledImage> out;
    for (int c = 0; c < classes; ++c)
        for (std::size_t i = 0; i < per_class; ++i)
            out.push_back({data::synth_glyph(c, seed + std::uint64_t(c) * 1000 + i, res), c + 10});
    return out;
}

}  // namespace

TEST_CASE("acc_at_k fixture") {
    const std::vector<std::vector<float>> logits{{0.1f, 0.7f, 0.2f}};
    CHECK(acc_at_k(logits, {2}, 1) == 0.0);
    CHECK(acc_at_k(logits, {2}, 2) == 1.0);
    CHECK(acc_at_k(logits, {1}, 1) == 1.0);
    CHECK(acc_at_k(logits, {0}, 2) == 0.0);
    CHECK(acc_at_k(logits, {0}, 3) == 1.0);
    // Ties go to the lower class index.
    CHECK(acc_at_k({{0.5f, 0.5f}}, {0}, 1) == 1.0);
    CHECK(acc_at_k({{0.5f, 0.5f}}, {1}, 1) == 0.0);
    CHECK_THROWS_AS(acc_at_k(logits, {2}, 0), std::invalid_argument);
    CHECK_THROWS_AS(acc_at_k(logits, {2}, 4), std::invalid_argument);
    CHECK_THROWS_AS(acc_at_k(logits, {3}, 1), std::invalid_argument);
    CHECK_THROWS_AS(acc_at_k({}, {}, 1), std::invalid_argument);
}

TEST_CASE("acc_at_k agrees with a sort-based ranking and is monotone in k") {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<int> coarse(0, 4);  // frequent ties
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t classes = 2 + std::size_t(trial % 7), rows = 1 + std::size_t(trial) * 3;
        std::vector<std::vector<float>> logits(rows, std::vector<float>(classes));
        std::vector<std::size_t> truth(rows);
        for (std::size_t i = 0; i < rows; ++i) {
            for (auto& v : logits[i]) v = float(coarse(rng)) * 0.25f;
            truth[i] = std::size_t(rng() % classes);
        }
        double prev = 0.0;
        for (std::size_t k = 1; k <= classes; ++k) {
            std::size_t hits = 0;
            for (std::size_t i = 0; i < rows; ++i) hits += brute_rank(logits[i], truth[i]) < k;
            const double acc = acc_at_k(logits, truth, k);
            CHECK(acc == doctest::Approx(double(hits) / double(rows)));
            CHECK(acc >= prev);
            prev = acc;
        }
        CHECK(prev == 1.0);
    }
}

TEST_CASE("classifier shapes and label mapping") {
    ClassifierConfig cfg;
    cfg.resolution = 16;
    cfg.labels = {3, 7, 11};
    cfg.widths = {4, 8};
    Classifier<double> clf(cfg, 2);
    std::mt19937_64 rng(1);
    const auto x = nn::Var<double>::constant({2, 1, 16, 16}, testing::random_values<double>(512, rng, 0.0, 1.0));
    const auto out = clf.forward(x);
    CHECK(out.features.shape() == nn::Shape{2, 8});
    CHECK(out.logits.shape() == nn::Shape{2, 3});
    CHECK(clf.label_index(7) == 1);
    CHECK_THROWS_AS(clf.label_index(4), std::invalid_argument);
    CHECK_THROWS_AS(clf.forward(nn::Var<double>::zeros({1, 1, 8, 8})), std::invalid_argument);

    std::vector<nn::Var<double>> vars;
    for (const auto& p : clf.parameters()) vars.push_back(p.var);
    CHECK(testing::gradcheck([&] { return nn::cross_entropy(clf.forward(x).logits, {2, 0}); }, vars, 1e-6, 10) <= 1e-3);
}

TEST_CASE("augmentation geometry") {
    std::mt19937_64 rng(4);
    const auto img = testing::random_image(12, 12, rng);
    CHECK(augment_image(img, 0.0, false) == img);
    const auto mirrored = augment_image(img, 0.0, true);
    for (std::size_t r = 0; r < 12; ++r)
        for (std::size_t c = 0; c < 12; ++c) CHECK(mirrored.at(r, c) == img.at(r, 11 - c));
    const auto quarter = augment_image(img, 90.0, false);
    double agree = 0.0;
    for (std::size_t r = 0; r < 12; ++r)
        for (std::size_t c = 0; c < 12; ++c)
            agree += std::abs(quarter.at(r, c) - img.at(c, 11 - r)) < 1e-4 || std::abs(quarter.at(r, c) - img.at(11 - c, r)) < 1e-4;
    CHECK(agree == 144.0);
}

TEST_CASE("trained classifier separates glyph classes") {
    const auto train = glyph_set(12, 4, 1, 32);
    const auto val = glyph_set(6, 4, 50000, 32);
    ClassifierConfig cfg;
    cfg.resolution = 32;
    cfg.widths = {8, 16};
    ClassifierTrainConfig tc;
    tc.epochs = 8;
    tc.batch = 8;
    tc.seed = 3;
    const auto clf = train_classifier(train, cfg, tc);
    CHECK(clf.config().labels == std::vector<int>{10, 11, 12, 13});
    const auto acc = evaluate_accuracy(clf, val);
    CHECK(acc.acc1 >= 0.5);
    CHECK(acc.acc3 >= acc.acc1);
    CHECK(acc.acc5 == 1.0);  // capped at 4 classes

    const auto again = train_classifier(train, cfg, tc);
    std::vector<data::GrayImage> imgs;
    for (const auto& v : val) imgs.push_back(v.image);
    CHECK(predict_logits(clf, imgs) == predict_logits(again, imgs));

    const auto feats = extract_features(clf, imgs);
    CHECK(feats.size() == imgs.size());
    CHECK(feats[0].size() == 16);
    CHECK(fid_proxy(imgs, imgs, clf) == doctest::Approx(0.0).epsilon(1e-6));

    testing::TempDir dir("clf");
    save_classifier(dir.path(), clf, 3);
    CHECK(predict_logits(load_classifier(dir.path()), imgs) == predict_logits(clf, imgs));

    ClassifierConfig fresh_cfg = cfg;
    fresh_cfg.labels = {1, 2};
    CHECK_THROWS_AS(predict_logits(Classifier<float>(fresh_cfg, 0), imgs), ModelStateError);
}
