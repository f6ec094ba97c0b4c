// SPDX-License-Identifier: Apache-2.0
#include "obidiff/study/bundle.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>
#include <stdexcept>

#include "json.hpp"
#include "obidiff/common/errors.hpp"

namespace obidiff::study {

using nlohmann::json;

std::vector<eval::StudyItem> build_bundle(const data::DatasetManifest& m, const diffusion::BatchGenerator& generator,
                                          const BundleConfig& cfg, const std::filesystem::path& out_dir) {
    if (cfg.n_real + cfg.n_generated == 0) throw std::invalid_argument("study bundle needs at least one item");
    if (cfg.n_generated && !generator) throw ModelStateError("study bundle: no generator");
    auto pairs = m.split(cfg.split);
    if (pairs.size() < 2) throw std::invalid_argument("study bundle: split '" + cfg.split + "' has fewer than 2 pairs");
    std::mt19937_64 rng(cfg.seed);
    std::shuffle(pairs.begin(), pairs.end(), rng);

    struct Pending {
        data::GrayImage image;
        eval::Choice truth;
    };
    std::vector<Pending> pending;
    // Real rubbings cycle through the shuffled split; reuse only when it is smaller than n_real.
    for (std::size_t i = 0; i < cfg.n_real; ++i)
        pending.push_back({data::load_pair(m, pairs[i % pairs.size()]).style, eval::Choice::Real});
    if (cfg.n_generated) {
        std::vector<data::GrayImage> glyphs, styles;
        std::vector<std::uint64_t> seeds;
        for (std::size_t i = 0; i < cfg.n_generated; ++i) {
            const auto& g = pairs[(cfg.n_real + i) % pairs.size()];
            const auto& s = pairs[(cfg.n_real + i + 1) % pairs.size()];
            glyphs.push_back(data::load_pair(m, g).glyph);
            styles.push_back(data::load_pair(m, s).style);
            seeds.push_back(cfg.seed ^ (0xB0D1E5ULL + i * 0x9E3779B97F4A7C15ULL));
        }
        auto images = generator(glyphs, styles, seeds);
        if (images.size() != glyphs.size()) throw std::runtime_error("generator returned a wrong image count");
        for (auto& img : images) pending.push_back({std::move(img), eval::Choice::Generated});
    }
    std::shuffle(pending.begin(), pending.end(), rng);

    std::filesystem::create_directories(out_dir / "images");
    std::vector<eval::StudyItem> items;
    json doc_items = json::array();
    for (std::size_t i = 0; i < pending.size(); ++i) {
        char id[16];
        std::snprintf(id, sizeof id, "i%03zu", i + 1);
        eval::StudyItem item{id, std::string("images/") + id + ".png", pending[i].truth};
        data::save_png(out_dir / item.image_path, pending[i].image);
        doc_items.push_back({{"item_id", item.item_id}, {"image_path", item.image_path}, {"truth", eval::to_string(item.truth)}});
        items.push_back(std::move(item));
    }
    const json doc = {{"version", 1},
                      {"seed", cfg.seed},
                      {"n_real", cfg.n_real},
                      {"n_generated", cfg.n_generated},
                      {"items", doc_items}};
    data::write_file_atomic(out_dir / "items.json", doc.dump(2) + "\n");
    return items;
}

std::vector<eval::StudyItem> load_bundle_items(const std::filesystem::path& bundle_dir) {
    const auto path = bundle_dir / "items.json";
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw SchemaError("", std::string("invalid JSON: ") + e.what());
    }
    if (!doc.contains("items") || !doc["items"].is_array()) throw SchemaError("/items", "expected array");
    std::vector<eval::StudyItem> items;
    for (std::size_t i = 0; i < doc["items"].size(); ++i) {
        const auto& rec = doc["items"][i];
        const std::string ptr = "/items/" + std::to_string(i);
        try {
            eval::StudyItem item;
            item.item_id = rec.at("item_id").get<std::string>();
            item.image_path = rec.at("image_path").get<std::string>();
            const auto truth = eval::parse_choice(rec.at("truth").get<std::string>());
            if (!truth) throw SchemaError(ptr + "/truth", "expected real or generated");
            item.truth = *truth;
            items.push_back(std::move(item));
        } catch (const json::exception& e) {
            throw SchemaError(ptr, e.what());
        }
    }
    return items;
}

std::string score_session_log(const std::filesystem::path& bundle_dir, const std::filesystem::path& log) {
    return eval::report_to_json(eval::score_study(eval::read_session_log(log, load_bundle_items(bundle_dir))));
}

}  // namespace obidiff::study
