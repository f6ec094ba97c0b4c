// SPDX-License-Identifier: Apache-2.0
#include "obidiff/data/manifest.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unistd.h>

#include "obidiff/common/errors.hpp"

namespace obidiff::data {

using nlohmann::json;

const PairRecord& DatasetManifest::find(const std::string& pair_id) const {
    for (const auto& p : pairs)
        if (p.pair_id == pair_id) return p;
    throw std::invalid_argument("unknown pair id: " + pair_id);
}

std::vector<PairRecord> DatasetManifest::split(const std::string& name) const {
    std::vector<PairRecord> out;
    const auto it = splits.find(name);
    if (it == splits.end()) return out;
    std::map<std::string, const PairRecord*> index;
    for (const auto& p : pairs) index.emplace(p.pair_id, &p);
    for (const auto& id : it->second) {
        const auto hit = index.find(id);
        if (hit == index.end()) throw std::invalid_argument("split '" + name + "' references unknown pair " + id);
        out.push_back(*hit->second);
    }
    return out;
}

json to_json(const DatasetManifest& m) {
    json pairs = json::array();
    for (const auto& p : m.pairs) {
        pairs.push_back({{"pair_id", p.pair_id},
                         {"class_id", p.class_id},
                         {"glyph_path", p.glyph_path},
                         {"style_path", p.style_path},
                         {"noise_type", std::string(to_string(p.noise_type))},
                         {"iou", p.iou ? json(*p.iou) : json(nullptr)}});
    }
    const auto stats = compute_stats(m);
    json per_class = json::object();
    for (const auto& [cls, n] : stats.per_class) per_class[std::to_string(cls)] = n;
    json doc = {{"version", m.version},
                {"resolution", m.resolution},
                {"seed", m.seed},
                {"mask_threshold", m.mask_threshold},
                {"iou_gate", m.iou_gate},
                {"pairs", std::move(pairs)},
                {"splits", m.splits},
                {"stats",
                 {{"per_class", per_class},
                  {"scored", stats.scored},
                  {"mean_iou", stats.mean_iou ? json(*stats.mean_iou) : json(nullptr)}}}};
    if (m.glyph_black_on_white) doc["glyph_polarity"] = "black_on_white";
    return doc;
}

namespace {

const json& require(const json& obj, const std::string& key, const std::string& ptr) {
    if (!obj.is_object()) throw SchemaError(ptr, "expected object");
    const auto it = obj.find(key);
    if (it == obj.end()) throw SchemaError(ptr + "/" + key, "missing required field");
    return *it;
}

std::string as_string(const json& v, const std::string& ptr) {
    if (!v.is_string()) throw SchemaError(ptr, "expected string");
    return v.get<std::string>();
}

std::int64_t as_int(const json& v, const std::string& ptr) {
    if (!v.is_number_integer()) throw SchemaError(ptr, "expected integer");
    return v.get<std::int64_t>();
}

double as_ratio(const json& v, const std::string& ptr) {
    if (!v.is_number()) throw SchemaError(ptr, "expected number");
    const double d = v.get<double>();
    if (!(d >= 0.0 && d <= 1.0)) throw SchemaError(ptr, "expected value in [0,1]");
    return d;
}

}  // namespace

DatasetManifest manifest_from_json(const json& doc, const std::filesystem::path& root) {
    DatasetManifest m;
    m.root = root;
    if (!doc.is_object()) throw SchemaError("", "manifest must be a JSON object");
    m.version = int(as_int(require(doc, "version", ""), "/version"));
    if (m.version != 1) throw SchemaError("/version", "unsupported version " + std::to_string(m.version));
    const auto res = as_int(require(doc, "resolution", ""), "/resolution");
    if (res < std::int64_t(kMinImageSide)) throw SchemaError("/resolution", "resolution below 8");
    m.resolution = std::size_t(res);
    const json& seed = require(doc, "seed", "");
    if (!seed.is_number_integer()) throw SchemaError("/seed", "expected integer");
    m.seed = seed.get<std::uint64_t>();
    if (doc.contains("mask_threshold")) {
        m.mask_threshold = as_ratio(doc["mask_threshold"], "/mask_threshold");
        if (m.mask_threshold <= 0.0 || m.mask_threshold >= 1.0)
            throw SchemaError("/mask_threshold", "expected value in (0,1)");
    }
    if (doc.contains("iou_gate")) m.iou_gate = as_ratio(doc["iou_gate"], "/iou_gate");
    if (doc.contains("glyph_polarity")) {
        const auto pol = as_string(doc["glyph_polarity"], "/glyph_polarity");
        if (pol == "black_on_white")
            m.glyph_black_on_white = true;
        else if (pol != "white_on_black")
            throw SchemaError("/glyph_polarity", "expected white_on_black or black_on_white");
    }

    const json& pairs = require(doc, "pairs", "");
    if (!pairs.is_array()) throw SchemaError("/pairs", "expected array");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const std::string ptr = "/pairs/" + std::to_string(i);
        const json& p = pairs[i];
        PairRecord r;
        r.pair_id = as_string(require(p, "pair_id", ptr), ptr + "/pair_id");
        if (r.pair_id.empty()) throw SchemaError(ptr + "/pair_id", "empty pair id");
        if (!ids.insert(r.pair_id).second) throw SchemaError(ptr + "/pair_id", "duplicate pair id " + r.pair_id);
        r.class_id = int(as_int(require(p, "class_id", ptr), ptr + "/class_id"));
        r.glyph_path = as_string(require(p, "glyph_path", ptr), ptr + "/glyph_path");
        r.style_path = as_string(require(p, "style_path", ptr), ptr + "/style_path");
        const auto noise = as_string(require(p, "noise_type", ptr), ptr + "/noise_type");
        const auto parsed = parse_noise_type(noise);
        if (!parsed) throw SchemaError(ptr + "/noise_type", "unknown noise type '" + noise + "'");
        r.noise_type = *parsed;
        if (p.contains("iou") && !p["iou"].is_null()) r.iou = as_ratio(p["iou"], ptr + "/iou");
        m.pairs.push_back(std::move(r));
    }

    if (doc.contains("splits")) {
        const json& splits = doc["splits"];
        if (!splits.is_object()) throw SchemaError("/splits", "expected object");
        std::set<std::string> seen;
        for (const auto& [name, list] : splits.items()) {
            const std::string ptr = "/splits/" + name;
            if (!list.is_array()) throw SchemaError(ptr, "expected array");
            auto& dst = m.splits[name];
            for (std::size_t i = 0; i < list.size(); ++i) {
                const auto id = as_string(list[i], ptr + "/" + std::to_string(i));
                if (!ids.count(id)) throw SchemaError(ptr + "/" + std::to_string(i), "unknown pair id " + id);
                if (!seen.insert(id).second)
                    throw SchemaError(ptr + "/" + std::to_string(i), "pair " + id + " appears in two splits");
                dst.push_back(id);
            }
        }
    }
    return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw SchemaError("", std::string("invalid JSON: ") + e.what());
    }
    return manifest_from_json(doc, path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << contents;
        out.flush();
        if (!out) throw IoError("short write " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw IoError("rename to " + path.string() + " failed: " + ec.message());
    }
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    write_file_atomic(path, to_json(m).dump(2) + "\n");
}

ManifestStats compute_stats(const DatasetManifest& m) {
    ManifestStats s;
    double sum = 0.0;
    for (const auto& p : m.pairs) {
        ++s.per_class[p.class_id];
        if (p.iou) {
            ++s.scored;
            sum += *p.iou;
        }
    }
    if (s.scored) s.mean_iou = sum / double(s.scored);
    return s;
}

LoadedPair load_pair(const DatasetManifest& m, const PairRecord& p) {
    LoadedPair out{load_png(m.resolve(p.glyph_path)), load_png(m.resolve(p.style_path))};
    if (m.glyph_black_on_white) out.glyph = invert_glyph(out.glyph);
    if (!out.glyph.same_dims(out.style))
        throw std::invalid_argument("pair " + p.pair_id + ": glyph and style dimensions differ");
    return out;
}

GateResult quality_gate(const GrayImage& glyph, const GrayImage& style, double threshold, double mask_threshold) {
    const double v = iou(glyph_mask(glyph, mask_threshold), glyph_mask(style, mask_threshold));
    return {v >= threshold, v};
}

GateResult quality_gate(PairRecord& pair, const DatasetManifest& m) {
    const auto images = load_pair(m, pair);
    const auto r = quality_gate(images.glyph, images.style, m.iou_gate, m.mask_threshold);
    pair.iou = r.iou;
    return r;
}

QcSummary run_quality_gate(DatasetManifest& m, std::ostream& csv) {
    QcSummary s;
    double sum = 0.0;
    csv << "pair_id,class_id,iou,decision\n";
    for (auto& p : m.pairs) {
        const auto r = quality_gate(p, m);
        std::ostringstream v;
        v << std::setprecision(6) << std::fixed << r.iou;
        csv << p.pair_id << ',' << p.class_id << ',' << v.str() << ',' << (r.accepted ? "accept" : "reject") << '\n';
        if (r.accepted) {
            ++s.accepted;
            sum += r.iou;
        } else {
            ++s.rejected;
        }
    }
    if (s.accepted) s.mean_iou_accepted = sum / double(s.accepted);
    return s;
}

namespace {

std::uint64_t class_stream(std::uint64_t seed, int class_id) {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(class_id), 0x5b1fu};
    std::uint64_t out = 0;
    std::array<std::uint32_t, 2> words{};
    seq.generate(words.begin(), words.end());
    out = (std::uint64_t(words[0]) << 32) | words[1];
    return out;
}

}  // namespace

DatasetManifest split_dataset(const DatasetManifest& m, double train_ratio, std::uint64_t seed,
                              const std::vector<int>& test_classes) {
    if (!(train_ratio > 0.0 && train_ratio < 1.0)) throw std::invalid_argument("train_ratio must lie in (0,1)");
    const std::set<int> held_out(test_classes.begin(), test_classes.end());
    std::map<int, std::vector<std::string>> by_class;
    for (const auto& p : m.pairs)
        if (!m.rejected(p)) by_class[p.class_id].push_back(p.pair_id);

    DatasetManifest out = m;
    out.splits.clear();
    auto& train = out.splits["train"];
    auto& val = out.splits["val"];
    if (!held_out.empty()) out.splits["test"];
    for (auto& [cls, ids] : by_class) {
        std::sort(ids.begin(), ids.end());
        if (held_out.count(cls)) {
            auto& test = out.splits["test"];
            test.insert(test.end(), ids.begin(), ids.end());
            continue;
        }
        if (ids.size() < kMinPairsPerClass)
            throw std::invalid_argument("class " + std::to_string(cls) + " has " + std::to_string(ids.size()) +
                                        " eligible pairs; at least " + std::to_string(kMinPairsPerClass) +
                                        " required");
        std::mt19937_64 rng(class_stream(seed, cls));
        std::shuffle(ids.begin(), ids.end(), rng);
        const auto n_train = std::size_t(std::floor(double(ids.size()) * train_ratio + 1e-9));
        train.insert(train.end(), ids.begin(), ids.begin() + std::ptrdiff_t(n_train));
        val.insert(val.end(), ids.begin() + std::ptrdiff_t(n_train), ids.end());
    }
    out.seed = seed;
    return out;
}

std::string synth_pair_id(int class_id, int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "c%03d_%04d", class_id, index);
    return buf;
}

DatasetManifest build_synthetic_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    if (cfg.classes <= 0 || cfg.per_class <= 0) throw std::invalid_argument("synthetic dataset needs classes and pairs");
    DatasetManifest m;
    m.resolution = cfg.resolution;
    m.seed = cfg.seed;
    m.root = out_dir;
    std::filesystem::create_directories(out_dir / "glyphs");
    std::filesystem::create_directories(out_dir / "styles");
    for (int c = cfg.first_class; c < cfg.first_class + cfg.classes; ++c) {
        for (int i = 0; i < cfg.per_class; ++i) {
            PairRecord r;
            r.pair_id = synth_pair_id(c, i);
            r.class_id = c;
            r.noise_type = NoiseType(i % kNoiseTypeCount);
            r.glyph_path = "glyphs/" + r.pair_id + ".png";
            r.style_path = "styles/" + r.pair_id + ".png";
            const std::uint64_t item = cfg.seed * 1000003ULL + std::uint64_t(c) * 10007ULL + std::uint64_t(i);
            const auto glyph = synth_glyph(c, item, cfg.resolution);
            const auto style = synth_noise(glyph, r.noise_type, item ^ 0x9E3779B97F4A7C15ULL);
            save_png(m.resolve(r.glyph_path), glyph);
            save_png(m.resolve(r.style_path), style);
            m.pairs.push_back(std::move(r));
        }
    }
    save_manifest(m, out_dir / "manifest.json");
    return m;
}

}  // namespace obidiff::data
