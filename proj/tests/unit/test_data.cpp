// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "obidiff/common/errors.hpp"
#include "obidiff/data/manifest.hpp"
#include "obidiff/data/synth.hpp"
#include "support.hpp"

using namespace obidiff;
using namespace obidiff::data;

namespace {

GrayImage from_rows(std::size_t w, std::size_t h, std::vector<float> px) {
    GrayImage img(w, h);
    img.pixels = std::move(px);
    return img;
}

BinaryMask block(std::size_t n, std::size_t r0, std::size_t c0, std::size_t size) {
    BinaryMask m(n, n);
    for (std::size_t r = r0; r < r0 + size; ++r)
        for (std::size_t c = c0; c < c0 + size; ++c) m.set(r, c);
    return m;
}

double brute_iou(const BinaryMask& a, const BinaryMask& b) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.bits.size(); ++i) {
        inter += a.bits[i] && b.bits[i];
        uni += a.bits[i] || b.bits[i];
    }
    return uni ? double(inter) / double(uni) : 1.0;
}

std::size_t white_fraction_count(const GrayImage& img) {
    std::size_t n = 0;
    for (float p : img.pixels) n += p > 0.5f;
    return n;
}

}  // namespace

TEST_CASE("invert_glyph is the pixelwise complement and an involution") {
    std::mt19937_64 rng(1);
    const auto img = testing::random_image(9, 8, rng);
    const auto inv = invert_glyph(img);
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(inv.pixels[i] == 1.0f - img.pixels[i]);
    const auto twice = invert_glyph(inv);
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(twice.pixels[i] == doctest::Approx(img.pixels[i]).epsilon(1e-6));
    CHECK(invert_glyph(GrayImage(8, 8, 0.0f)) == GrayImage(8, 8, 1.0f));
    CHECK(invert_glyph(GrayImage(8, 8, 0.25f)).pixels[0] == 0.75f);
}

TEST_CASE("glyph_mask thresholds strictly above") {
    const auto m = glyph_mask(from_rows(2, 2, {0.2f, 0.9f, 0.5f, 0.51f}), 0.5);
    CHECK(m.bits == std::vector<std::uint8_t>{0, 1, 0, 1});
    CHECK(glyph_mask(GrayImage(8, 8, 0.0f)).count() == 0);
    CHECK(glyph_mask(GrayImage(8, 8, 0.6f)).count() == 64);
    CHECK_THROWS_AS(glyph_mask(GrayImage(8, 8), 1.0), std::invalid_argument);
    CHECK_THROWS_AS(glyph_mask(GrayImage(8, 8), 0.0), std::invalid_argument);
}

TEST_CASE("iou fixtures and properties") {
    CHECK(iou(block(3, 0, 0, 2), block(3, 1, 1, 2)) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
    CHECK(iou(block(6, 0, 0, 2), block(6, 0, 0, 2)) == 1.0);
    CHECK(iou(block(6, 0, 0, 2), block(6, 3, 3, 2)) == 0.0);
    CHECK(iou(BinaryMask(4, 4), BinaryMask(4, 4)) == 1.0);
    CHECK_THROWS_AS(iou(BinaryMask(4, 4), BinaryMask(4, 5)), std::invalid_argument);

    std::mt19937_64 rng(2);
    std::bernoulli_distribution bit(0.3);
    for (int trial = 0; trial < 200; ++trial) {
        BinaryMask a(16, 16), b(16, 16);
        for (auto& x : a.bits) x = bit(rng);
        for (auto& x : b.bits) x = bit(rng);
        const double v = iou(a, b);
        CHECK(v == brute_iou(a, b));
        CHECK(v == iou(b, a));
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK((v == 1.0) == (a == b));
    }
}

TEST_CASE("bounding_box") {
    GrayImage img(12, 12);
    img.at(5, 9) = 1.0f;
    CHECK(bounding_box(img) == BBox{5, 9, 5, 9});
    GrayImage three(12, 12);
    three.at(2, 3) = three.at(7, 1) = three.at(4, 10) = 1.0f;
    CHECK(bounding_box(three) == BBox{2, 1, 7, 10});
    CHECK_THROWS_AS(bounding_box(GrayImage(12, 12)), EmptyGlyphError);
}

TEST_CASE("mask_style blanks the glyph box, and with dual the style box") {
    GrayImage glyph(10, 10), style(10, 10, 0.3f);
    for (std::size_t r = 2; r <= 5; ++r)
        for (std::size_t c = 2; c <= 5; ++c) glyph.at(r, c) = 1.0f;
    for (std::size_t r = 4; r <= 8; ++r)
        for (std::size_t c = 4; c <= 8; ++c) style.at(r, c) = 0.9f;

    const auto dual = mask_style(style, glyph, true);
    std::size_t zeroed = 0;
    for (std::size_t r = 0; r < 10; ++r)
        for (std::size_t c = 0; c < 10; ++c) {
            const bool in_box = (r >= 2 && r <= 5 && c >= 2 && c <= 5) || (r >= 4 && r <= 8 && c >= 4 && c <= 8);
            if (in_box) {
                CHECK(dual.at(r, c) == 0.0f);
                ++zeroed;
            } else {
                CHECK(dual.at(r, c) == style.at(r, c));
            }
        }
    CHECK(zeroed == 37);

    const auto single = mask_style(style, glyph, false);
    CHECK(single.at(7, 7) == 0.9f);
    CHECK(single.at(3, 3) == 0.0f);

    GrayImage full(8, 8, 1.0f);
    CHECK(mask_style(GrayImage(8, 8, 0.4f), full, false) == GrayImage(8, 8, 0.0f));
    CHECK_THROWS_AS(mask_style(style, GrayImage(10, 10), false), EmptyGlyphError);
    CHECK_THROWS_AS(mask_style(GrayImage(9, 10), glyph, false), std::invalid_argument);
}

TEST_CASE("dual and single masking coincide when the boxes coincide") {
    GrayImage glyph(10, 10), style(10, 10, 0.2f);
    for (std::size_t r = 3; r <= 6; ++r)
        for (std::size_t c = 3; c <= 6; ++c) {
            glyph.at(r, c) = 1.0f;
            style.at(r, c) = 0.8f;
        }
    CHECK(mask_style(style, glyph, true) == mask_style(style, glyph, false));
}

TEST_CASE("png round trip quantizes to 8 bits with half-up rounding") {
    testing::TempDir dir("png");
    std::mt19937_64 rng(3);
    const auto img = testing::random_image(13, 9, rng);
    save_png(dir / "a.png", img);
    const auto back = load_png(dir / "a.png");
    CHECK(back.width == 13);
    CHECK(back.height == 9);
    CHECK(back == quantized(img));
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(back.pixels[i] - img.pixels[i]) <= 0.5f / 255.0f + 1e-6f);
    CHECK(quantize(0.5f / 255.0f) == 1);
    CHECK(quantize(1.0f) == 255);
    CHECK(quantize(0.0f) == 0);
    CHECK_THROWS_AS(load_png(dir / "missing.png"), IoError);
}

TEST_CASE("validate enforces dimensions and range") {
    CHECK_NOTHROW(validate(GrayImage(8, 8, 0.5f)));
    CHECK_THROWS_AS(validate(GrayImage(7, 8)), std::invalid_argument);
    GrayImage bad(8, 8);
    bad.pixels[3] = 1.5f;
    CHECK_THROWS_AS(validate(bad), std::invalid_argument);
}

TEST_CASE("synth_glyph contract") {
    CHECK(synth_glyph(0, 7, 128) == synth_glyph(0, 7, 128));
    CHECK(iou(glyph_mask(synth_glyph(0, 7, 128)), glyph_mask(synth_glyph(1, 7, 128))) < 0.5);
    CHECK_THROWS_AS(synth_glyph(0, 1, 16), std::invalid_argument);
    for (int c = 0; c < 8; ++c)
        for (std::uint64_t s = 0; s < 5; ++s)
            for (std::size_t res : {64u, 128u}) {
                const auto g = synth_glyph(c, s, res);
                const double frac = double(white_fraction_count(g)) / double(g.size());
                CHECK(frac >= 0.02);
                CHECK(frac <= 0.20);
                for (float p : g.pixels) CHECK((p == 0.0f || p == 1.0f));
            }
    // Same class shares topology across seeds far more than different classes do.
    for (int c = 0; c < 8; ++c)
        for (int d = c + 1; d < 8; ++d) {
            const double same = iou(glyph_mask(synth_glyph(c, 1, 64)), glyph_mask(synth_glyph(c, 2, 64)));
            const double cross = iou(glyph_mask(synth_glyph(c, 1, 64)), glyph_mask(synth_glyph(d, 1, 64)));
            CHECK(cross < 0.5);
            CHECK(same > cross);
        }
}

TEST_CASE("synth_noise contract") {
    const auto g = synth_glyph(3, 11, 64);
    const auto gm = glyph_mask(g);
    for (int t = 0; t < kNoiseTypeCount; ++t) {
        for (std::uint64_t s = 0; s < 6; ++s) {
            const auto type = NoiseType(t);
            const auto out = synth_noise(g, type, s);
            CHECK(out == synth_noise(g, type, s));
            CHECK_NOTHROW(validate(out));
            if (type != NoiseType::StrokeBroken) CHECK(iou(glyph_mask(out), gm) >= 0.5);
            if (type == NoiseType::StrokeBroken) {
                std::size_t in_support = 0, orig = 0;
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (gm.bits[i]) {
                        ++orig;
                        in_support += out.pixels[i] > 0.5f;
                    }
                CHECK(in_support < orig);
            }
        }
    }
    const auto dense = synth_noise(g, NoiseType::DenseWhiteRegions, 3);
    std::size_t differ = 0;
    for (std::size_t i = 0; i < g.size(); ++i) differ += dense.pixels[i] != g.pixels[i];
    CHECK(double(differ) / double(g.size()) >= 0.05);
}

TEST_CASE("noise type names round trip") {
    for (int t = 0; t < kNoiseTypeCount; ++t) CHECK(parse_noise_type(to_string(NoiseType(t))) == NoiseType(t));
    CHECK(to_string(NoiseType::DenseWhiteRegions) == "dense_white_regions");
    CHECK_FALSE(parse_noise_type("speckle"));
}

TEST_CASE("quality gate semantics") {
    const auto g = synth_glyph(0, 1, 64);
    const auto self = quality_gate(g, g);
    CHECK(self.accepted);
    CHECK(self.iou == 1.0);

    // Build masks with a known IoU: 100 glyph pixels, style covers 81 of them.
    GrayImage a(20, 20), b81(20, 20), b79(20, 20);
    for (std::size_t i = 0; i < 100; ++i) a.pixels[i] = 1.0f;
    for (std::size_t i = 0; i < 81; ++i) b81.pixels[i] = 1.0f;
    for (std::size_t i = 0; i < 79; ++i) b79.pixels[i] = 1.0f;
    const auto hi = quality_gate(a, b81);
    CHECK(hi.iou == doctest::Approx(0.81));
    CHECK(hi.accepted);
    const auto lo = quality_gate(a, b79);
    CHECK(lo.iou == doctest::Approx(0.79));
    CHECK_FALSE(lo.accepted);
}

TEST_CASE("manifest schema errors carry JSON pointers") {
    using nlohmann::json;
    const json good = {{"version", 1},
                       {"resolution", 64},
                       {"seed", 3},
                       {"pairs", {{{"pair_id", "a"}, {"class_id", 0}, {"glyph_path", "g.png"}, {"style_path", "s.png"},
                                   {"noise_type", "edges"}, {"iou", nullptr}}}},
                       {"splits", {{"train", {"a"}}}}};
    const auto m = manifest_from_json(good, ".");
    CHECK(m.pairs.size() == 1);
    CHECK(m.pairs[0].noise_type == NoiseType::Edges);
    CHECK_FALSE(m.pairs[0].iou);

    auto expect_pointer = [](const json& doc, const std::string& ptr) {
        try {
            manifest_from_json(doc, ".");
            FAIL("expected SchemaError at " << ptr);
        } catch (const SchemaError& e) {
            CHECK(e.pointer() == ptr);
        }
    };
    auto bad = good;
    bad["pairs"][0].erase("class_id");
    expect_pointer(bad, "/pairs/0/class_id");
    bad = good;
    bad["pairs"][0]["noise_type"] = "speckle";
    expect_pointer(bad, "/pairs/0/noise_type");
    bad = good;
    bad["splits"]["val"] = {"a"};
    expect_pointer(bad, "/splits/val/0");
    bad = good;
    bad["splits"]["train"] = {"zz"};
    expect_pointer(bad, "/splits/train/0");
    bad = good;
    bad["pairs"].push_back(good["pairs"][0]);
    expect_pointer(bad, "/pairs/1/pair_id");
    bad = good;
    bad["version"] = 2;
    expect_pointer(bad, "/version");
    bad = good;
    bad["pairs"][0]["iou"] = 1.5;
    expect_pointer(bad, "/pairs/0/iou");
    bad = good;
    bad.erase("seed");
    expect_pointer(bad, "/seed");
}

TEST_CASE("manifest round trip through disk") {
    testing::TempDir dir("manifest");
    SynthConfig cfg;
    cfg.classes = 2;
    cfg.per_class = 6;
    cfg.seed = 4;
    const auto m = build_synthetic_dataset(cfg, dir.path());
    CHECK(m.pairs.size() == 12);
    const auto loaded = load_manifest(dir / "manifest.json");
    CHECK(loaded.pairs == m.pairs);
    CHECK(loaded.resolution == 64);
    CHECK(loaded.root == dir.path());
    for (const auto& p : loaded.pairs) {
        const auto images = load_pair(loaded, p);
        CHECK(images.glyph.same_dims(images.style));
    }
    // Rebuilding with the same seed reproduces identical bytes.
    testing::TempDir again("manifest2");
    build_synthetic_dataset(cfg, again.path());
    for (const auto& p : m.pairs) CHECK(load_png(m.resolve(p.style_path)) == load_png(again / p.style_path));
    std::ifstream a(dir / "manifest.json"), b(again / "manifest.json");
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    CHECK(sa.str() == sb.str());
}

TEST_CASE("black-on-white glyph files are inverted on load") {
    testing::TempDir dir("polarity");
    const auto g = synth_glyph(2, 5, 64);
    save_png(dir / "g.png", invert_glyph(g));
    save_png(dir / "s.png", g);
    DatasetManifest m;
    m.resolution = 64;
    m.root = dir.path();
    m.glyph_black_on_white = true;
    m.pairs.push_back({"p", 2, "g.png", "s.png", NoiseType::Edges, std::nullopt});
    CHECK(load_pair(m, m.pairs[0]).glyph == g);
    save_manifest(m, dir / "manifest.json");
    CHECK(load_manifest(dir / "manifest.json").glyph_black_on_white);
}

TEST_CASE("run_quality_gate writes the QC CSV and splits respect rejections") {
    testing::TempDir dir("qc");
    SynthConfig cfg;
    cfg.classes = 3;
    cfg.per_class = 20;
    cfg.seed = 1;
    auto m = build_synthetic_dataset(cfg, dir.path());
    std::ostringstream csv;
    const auto s = run_quality_gate(m, csv);
    CHECK(s.accepted + s.rejected == 60);
    std::istringstream lines(csv.str());
    std::string line;
    std::getline(lines, line);
    CHECK(line == "pair_id,class_id,iou,decision");
    std::size_t rows = 0;
    while (std::getline(lines, line)) ++rows;
    CHECK(rows == 60);
    for (const auto& p : m.pairs) {
        REQUIRE(p.iou);
        CHECK(m.rejected(p) == (*p.iou < 0.8));
    }
    if (s.accepted) CHECK(s.mean_iou_accepted >= 0.8);
    const auto split = split_dataset(m, 0.8, 7);
    for (const auto& [name, ids] : split.splits)
        for (const auto& id : ids) CHECK_FALSE(m.rejected(m.find(id)));
}

TEST_CASE("split_dataset is stratified, disjoint and deterministic") {
    DatasetManifest m;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 60; ++i) m.pairs.push_back({synth_pair_id(c, i), c, "g", "s", NoiseType::Edges, std::nullopt});
    m.pairs.push_back({synth_pair_id(9, 0), 9, "g", "s", NoiseType::Edges, std::nullopt});

    CHECK_THROWS_WITH_AS(split_dataset(m, 0.8, 1), doctest::Contains("class 9"), std::invalid_argument);
    const auto a = split_dataset(m, 0.8, 1, {9});
    const auto b = split_dataset(m, 0.8, 1, {9});
    CHECK(a.splits == b.splits);
    CHECK(a.splits.at("train").size() == 3 * 48);
    CHECK(a.splits.at("val").size() == 3 * 12);
    CHECK(a.splits.at("test") == std::vector<std::string>{synth_pair_id(9, 0)});

    std::set<std::string> seen;
    for (const auto& [name, ids] : a.splits)
        for (const auto& id : ids) CHECK(seen.insert(id).second);
    CHECK(seen.size() == m.pairs.size());

    const auto c = split_dataset(m, 0.8, 2, {9});
    CHECK(c.splits.at("train") != a.splits.at("train"));
    for (int cls = 0; cls < 3; ++cls) {
        std::size_t n = 0;
        for (const auto& id : c.splits.at("train")) n += m.find(id).class_id == cls;
        CHECK(n == 48);
    }
    CHECK_THROWS_AS(split_dataset(m, 1.0, 1), std::invalid_argument);
}

TEST_CASE("manifest stats") {
    DatasetManifest m;
    m.pairs.push_back({"a", 0, "g", "s", NoiseType::Edges, 0.9});
    m.pairs.push_back({"b", 0, "g", "s", NoiseType::Edges, 0.7});
    m.pairs.push_back({"c", 1, "g", "s", NoiseType::Edges, std::nullopt});
    const auto s = compute_stats(m);
    CHECK(s.per_class.at(0) == 2);
    CHECK(s.per_class.at(1) == 1);
    CHECK(s.scored == 2);
    CHECK(*s.mean_iou == doctest::Approx(0.8));
    const auto doc = to_json(m);
    CHECK(doc["stats"]["scored"] == 2);
}
