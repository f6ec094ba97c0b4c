// SPDX-License-Identifier: Apache-2.0
#include "obidiff/eval/augment.hpp"

#include <algorithm>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <stdexcept>

#include "obidiff/common/errors.hpp"

namespace obidiff::eval {

using nlohmann::json;

json to_json(const AugmentConfig& c) {
    return {{"scales", c.scales},           {"rare_classes", c.rare_classes}, {"rare_keep", c.rare_keep},
            {"classifier", to_json(c.classifier)}, {"train", to_json(c.train)},     {"seed", c.seed},
            {"train_split", c.train_split}, {"eval_split", c.eval_split}};
}

AugmentConfig augment_config_from_json(const json& j) {
    AugmentConfig c;
    try {
        if (j.contains("scales")) j["scales"].get_to(c.scales);
        if (j.contains("rare_classes")) j["rare_classes"].get_to(c.rare_classes);
        if (j.contains("rare_keep")) j["rare_keep"].get_to(c.rare_keep);
        if (j.contains("seed")) j["seed"].get_to(c.seed);
        if (j.contains("train_split")) j["train_split"].get_to(c.train_split);
        if (j.contains("eval_split")) j["eval_split"].get_to(c.eval_split);
    } catch (const json::exception& e) {
        throw SchemaError("/augment", e.what());
    }
    if (j.contains("classifier")) c.classifier = classifier_config_from_json(j["classifier"]);
    if (j.contains("train")) c.train = classifier_train_config_from_json(j["train"]);
    return c;
}

namespace {

struct Item {
    data::GrayImage glyph, style;
    int class_id;
};

std::vector<Item> load_items(const data::DatasetManifest& m, const std::string& split) {
    std::vector<Item> out;
    for (const auto& p : m.split(split)) {
        auto loaded = data::load_pair(m, p);
        out.push_back({std::move(loaded.glyph), std::move(loaded.style), p.class_id});
    }
    return out;
}

}  // namespace

AugmentResult augmentation_experiment(const data::DatasetManifest& m, const diffusion::BatchGenerator& generator,
                                      const AugmentConfig& cfg) {
    if (cfg.scales.empty()) throw std::invalid_argument("augmentation_experiment: no scales");
    for (int s : cfg.scales)
        if (s < 1) throw std::invalid_argument("augmentation_experiment: scales must be positive");
    if (!generator) throw ModelStateError("augmentation_experiment: no generator");
    const auto train_items = load_items(m, cfg.train_split);
    const auto eval_items = load_items(m, cfg.eval_split);
    if (train_items.empty()) throw std::invalid_argument("augmentation_experiment: empty split " + cfg.train_split);
    if (eval_items.empty()) throw std::invalid_argument("augmentation_experiment: empty split " + cfg.eval_split);

    std::set<int> classes;
    for (const auto& it : train_items) classes.insert(it.class_id);
    std::set<int> rare(cfg.rare_classes.begin(), cfg.rare_classes.end());
    if (rare.empty()) {
        const std::vector<int> sorted(classes.begin(), classes.end());
        rare.insert(sorted.begin() + std::ptrdiff_t(sorted.size() / 2), sorted.end());
    }
    for (int c : rare)
        if (!classes.count(c)) throw std::invalid_argument("rare class " + std::to_string(c) + " has no training items");

    // Base set: frequent classes whole, rare classes truncated to rare_keep in split order.
    std::vector<LabeledImage> base;
    std::vector<std::size_t> rare_idx;
    std::map<int, std::size_t> kept;
    for (std::size_t i = 0; i < train_items.size(); ++i) {
        const auto& it = train_items[i];
        if (rare.count(it.class_id)) {
            if (kept[it.class_id] >= cfg.rare_keep) continue;
            ++kept[it.class_id];
            rare_idx.push_back(i);
        }
        base.push_back({it.style, it.class_id});
    }

    const int max_scale = *std::max_element(cfg.scales.begin(), cfg.scales.end());
    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<std::size_t> pick(0, train_items.size() - 1);
    std::vector<data::GrayImage> glyphs, styles;
    std::vector<std::uint64_t> seeds;
    for (std::size_t r = 0; r < rare_idx.size(); ++r) {
        for (int j = 0; j < max_scale; ++j) {
            std::size_t src = rare_idx[r];
            if (j > 0 && train_items.size() > 1)
                do src = pick(rng);
                while (src == rare_idx[r]);
            glyphs.push_back(train_items[rare_idx[r]].glyph);
            styles.push_back(train_items[src].style);
            seeds.push_back(cfg.seed * 0x9E3779B97F4A7C15ULL + r * 1009 + std::uint64_t(j));
        }
    }
    const auto pseudo = generator(glyphs, styles, seeds);
    if (pseudo.size() != glyphs.size()) throw std::runtime_error("generator returned a wrong image count");

    AugmentResult result;
    result.rare_classes.assign(rare.begin(), rare.end());
    result.rare_items = rare_idx.size();
    std::vector<LabeledImage> eval_set;
    for (const auto& it : eval_items) eval_set.push_back({it.style, it.class_id});
    auto run = [&](const std::vector<LabeledImage>& train, int scale, const char* arm) {
        const auto clf = train_classifier(train, cfg.classifier, cfg.train);
        result.rows.push_back({scale, arm, evaluate_accuracy(clf, eval_set)});
    };

    run(base, 0, "none");
    for (int s : cfg.scales) {
        auto dup = base, gen = base;
        for (std::size_t r = 0; r < rare_idx.size(); ++r) {
            const auto& it = train_items[rare_idx[r]];
            for (int j = 0; j < s; ++j) {
                dup.push_back({it.style, it.class_id});
                gen.push_back({pseudo[r * std::size_t(max_scale) + std::size_t(j)], it.class_id});
            }
        }
        run(dup, s, "duplicate");
        run(gen, s, "generated");
    }
    return result;
}

void write_augment_csv(std::ostream& out, const AugmentResult& r) {
    out << "scale,arm,acc1,acc3,acc5\n";
    const auto flags = out.flags();
    const auto prec = out.precision(6);
    out << std::fixed;
    for (const auto& row : r.rows)
        out << row.scale << ',' << row.arm << ',' << row.acc.acc1 << ',' << row.acc.acc3 << ',' << row.acc.acc5 << '\n';
    out.flags(flags);
    out.precision(prec);
}

}  // namespace obidiff::eval
