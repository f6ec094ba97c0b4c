// SPDX-License-Identifier: Apache-2.0
#include "obidiff/data/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

namespace obidiff::data {
namespace {

using Rng = std::mt19937_64;

struct Point {
    double x, y;  // normalized, x = column, y = row
};

using Polyline = std::vector<Point>;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over a simple combination
    std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

double uniform(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

double polyline_length(const Polyline& p) {
    double len = 0.0;
    for (std::size_t i = 1; i < p.size(); ++i) len += std::hypot(p[i].x - p[i - 1].x, p[i].y - p[i - 1].y);
    return len;
}

Polyline random_stroke(Rng& rng) {
    constexpr double lo = 0.16, hi = 0.84;
    const double pick = uniform(rng, 0.0, 1.0);
    Polyline s;
    if (pick < 0.35) {
        Point a, b;
        do {
            a = {uniform(rng, lo, hi), uniform(rng, lo, hi)};
            b = {uniform(rng, lo, hi), uniform(rng, lo, hi)};
        } while (std::hypot(a.x - b.x, a.y - b.y) < 0.3);
        s = {a, b};
    } else if (pick < 0.65) {
        Point a{uniform(rng, lo, hi), uniform(rng, lo, hi)};
        for (int i = 0; i < 2; ++i) {
            Point b;
            do {
                b = {uniform(rng, lo, hi), uniform(rng, lo, hi)};
            } while (std::hypot(a.x - b.x, a.y - b.y) < 0.18);
            s.push_back(a);
            a = b;
        }
        s.push_back(a);
    } else if (pick < 0.85) {
        const double r = uniform(rng, 0.1, 0.22);
        const Point c{uniform(rng, lo + r * 0.5, hi - r * 0.5), uniform(rng, lo + r * 0.5, hi - r * 0.5)};
        const double a0 = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        const double span = uniform(rng, 0.5, 1.4) * std::numbers::pi;
        for (int i = 0; i <= 10; ++i) {
            const double a = a0 + span * i / 10.0;
            s.push_back({std::clamp(c.x + r * std::cos(a), lo, hi), std::clamp(c.y + r * std::sin(a), lo, hi)});
        }
    } else {
        const double w = uniform(rng, 0.14, 0.3), h = uniform(rng, 0.14, 0.3);
        const Point o{uniform(rng, lo, hi - w), uniform(rng, lo, hi - h)};
        s = {o, {o.x + w, o.y}, {o.x + w, o.y + h}, {o.x, o.y + h}, o};
    }
    return s;
}

// Total normalized stroke length bounds keep the rendered white fraction well
// inside [0.02, 0.20] for every seed variation.
constexpr double kMinTemplateLength = 1.3;
constexpr double kMaxTemplateLength = 2.3;

std::vector<Polyline> class_template(int class_id) {
    Rng rng(mix(0xC1A55ULL, std::uint64_t(std::int64_t(class_id))));
    for (;;) {
        std::vector<Polyline> strokes;
        const int count = uniform_int(rng, 3, 5);
        double total = 0.0;
        for (int i = 0; i < count; ++i) {
            strokes.push_back(random_stroke(rng));
            total += polyline_length(strokes.back());
        }
        if (total >= kMinTemplateLength && total <= kMaxTemplateLength) return strokes;
    }
}

double segment_distance(double px, double py, const Point& a, const Point& b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((px - a.x) * dx + (py - a.y) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return std::hypot(px - (a.x + t * dx), py - (a.y + t * dy));
}

// Distance in pixels from every pixel center to the nearest polyline.
std::vector<double> distance_field(const std::vector<Polyline>& lines, std::size_t w, std::size_t h) {
    std::vector<double> dist(w * h, 1e9);
    for (const auto& line : lines) {
        for (std::size_t i = 1; i < line.size(); ++i) {
            const Point a{line[i - 1].x * double(w), line[i - 1].y * double(h)};
            const Point b{line[i].x * double(w), line[i].y * double(h)};
            for (std::size_t r = 0; r < h; ++r)
                for (std::size_t c = 0; c < w; ++c) {
                    const double d = segment_distance(double(c) + 0.5, double(r) + 0.5, a, b);
                    double& cur = dist[r * w + c];
                    cur = std::min(cur, d);
                }
        }
    }
    return dist;
}

// Smooth noise in [0,1] from bilinear interpolation of a random lattice.
std::vector<double> value_noise(std::size_t w, std::size_t h, std::size_t cells, Rng& rng) {
    std::vector<double> lattice((cells + 1) * (cells + 1));
    for (auto& v : lattice) v = uniform(rng, 0.0, 1.0);
    std::vector<double> out(w * h);
    for (std::size_t r = 0; r < h; ++r) {
        const double fy = double(r) / double(h) * double(cells);
        const std::size_t y0 = std::min(std::size_t(fy), cells - 1);
        const double ty = fy - double(y0);
        for (std::size_t c = 0; c < w; ++c) {
            const double fx = double(c) / double(w) * double(cells);
            const std::size_t x0 = std::min(std::size_t(fx), cells - 1);
            const double tx = fx - double(x0);
            const auto at = [&](std::size_t yy, std::size_t xx) { return lattice[yy * (cells + 1) + xx]; };
            const double top = at(y0, x0) * (1 - tx) + at(y0, x0 + 1) * tx;
            const double bot = at(y0 + 1, x0) * (1 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[r * w + c] = top * (1 - ty) + bot * ty;
        }
    }
    return out;
}

void add_crack_overlay(std::vector<double>& overlay, std::size_t w, std::size_t h, Rng& rng) {
    const double unit = double(w) / 64.0;
    const int cracks = uniform_int(rng, 1, 3);
    for (int k = 0; k < cracks; ++k) {
        const bool horizontal = uniform(rng, 0.0, 1.0) < 0.5;
        Polyline line;
        const double start = uniform(rng, 0.1, 0.9), end = uniform(rng, 0.1, 0.9);
        constexpr int kPts = 7;
        for (int i = 0; i < kPts; ++i) {
            const double t = double(i) / (kPts - 1);
            const double along = -0.02 + 1.04 * t;
            const double across = std::clamp(start + (end - start) * t + uniform(rng, -0.06, 0.06), 0.0, 1.0);
            line.push_back(horizontal ? Point{along, across} : Point{across, along});
        }
        const double half_width = uniform(rng, 0.55, 0.95) * unit;
        std::vector<double> shade = value_noise(w, h, 4, rng);
        const auto dist = distance_field({line}, w, h);
        for (std::size_t i = 0; i < overlay.size(); ++i) {
            if (dist[i] > half_width) continue;
            const double v = 0.3 + 0.36 * shade[i];
            overlay[i] = std::max(overlay[i], v);
        }
    }
}

void add_edge_overlay(std::vector<double>& overlay, std::size_t w, std::size_t h, Rng& rng) {
    const double area = uniform(rng, 0.10, 0.30);
    const int sides = uniform(rng, 0.0, 1.0) < 0.7 ? 1 : 2;
    const int first = uniform_int(rng, 0, 3);
    for (int s = 0; s < sides; ++s) {
        const int side = (first + s) % 4;  // 0 top, 1 right, 2 bottom, 3 left
        const double depth = area / sides;
        const double freq = uniform(rng, 1.0, 3.0), phase = uniform(rng, 0.0, 6.3);
        for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t c = 0; c < w; ++c) {
                const double y = (double(r) + 0.5) / double(h), x = (double(c) + 0.5) / double(w);
                const double along = (side % 2 == 0) ? x : y;
                const double inward = side == 0 ? y : side == 1 ? 1.0 - x : side == 2 ? 1.0 - y : x;
                const double local = depth * (1.0 + 0.35 * std::sin(2.0 * std::numbers::pi * freq * along + phase));
                if (inward > local) continue;
                const double closeness = 1.0 - inward / local;
                const double v = 0.22 + 0.24 * closeness + uniform(rng, 0.0, 0.08);
                overlay[r * w + c] = std::max(overlay[r * w + c], v);
            }
        }
    }
}

void add_blob_overlay(std::vector<double>& overlay, const BinaryMask& strokes, std::size_t w,
                      std::size_t h, Rng& rng) {
    const double unit = double(w) / 64.0;
    const double target = uniform(rng, 0.05, 0.25);
    const std::size_t background = strokes.bits.size() - strokes.count();
    std::vector<std::uint8_t> covered(w * h, 0);
    std::size_t covered_bg = 0;
    for (int guard = 0; guard < 400 && double(covered_bg) < target * double(background); ++guard) {
        const double cy = uniform(rng, 0.0, double(h)), cx = uniform(rng, 0.0, double(w));
        const double radius = uniform(rng, 2.5, 6.5) * unit;
        const double wobble = uniform(rng, 0.1, 0.3), phase = uniform(rng, 0.0, 6.3);
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) {
                const double dy = double(r) + 0.5 - cy, dx = double(c) + 0.5 - cx;
                const double ang = std::atan2(dy, dx);
                if (std::hypot(dx, dy) > radius * (1.0 + wobble * std::sin(3.0 * ang + phase))) continue;
                const std::size_t i = r * w + c;
                if (!covered[i]) {
                    covered[i] = 1;
                    if (!strokes.bits[i]) ++covered_bg;
                }
            }
    }
    for (std::size_t i = 0; i < overlay.size(); ++i) {
        if (!covered[i]) continue;
        const double v = uniform(rng, 0.0, 1.0) < 0.35 ? uniform(rng, 0.32, 0.75) : uniform(rng, 0.2, 0.34);
        overlay[i] = std::max(overlay[i], v);
    }
}

std::vector<double> stroke_broken_base(const GrayImage& glyph, const BinaryMask& strokes,
                                       std::vector<double> base, const std::vector<double>& background,
                                       Rng& rng) {
    std::vector<std::size_t> support;
    for (std::size_t i = 0; i < strokes.bits.size(); ++i)
        if (strokes.bits[i]) support.push_back(i);
    if (support.empty()) return base;
    const double u = uniform(rng, 0.0, 1.0);
    const double fraction = 0.10 + 0.30 * u * u;
    const auto target = std::size_t(std::ceil(fraction * double(support.size())));
    const double unit = double(glyph.width) / 64.0;
    std::vector<std::uint8_t> erased(strokes.bits.size(), 0);
    std::size_t count = 0;
    while (count < target) {
        const std::size_t seed_px = support[std::size_t(uniform_int(rng, 0, int(support.size()) - 1))];
        const double radius = uniform(rng, 1.5, 3.5) * unit;
        const long r0 = long(seed_px / glyph.width), c0 = long(seed_px % glyph.width);
        const long span = long(std::ceil(radius));
        for (long dr = -span; dr <= span && count < target; ++dr)
            for (long dc = -span; dc <= span && count < target; ++dc) {
                const long r = r0 + dr, c = c0 + dc;
                if (r < 0 || c < 0 || r >= long(glyph.height) || c >= long(glyph.width)) continue;
                if (std::hypot(double(dr), double(dc)) > radius) continue;
                const std::size_t i = std::size_t(r) * glyph.width + std::size_t(c);
                if (!strokes.bits[i] || erased[i]) continue;
                erased[i] = 1;
                base[i] = background[i];
                ++count;
            }
    }
    return base;
}

}  // namespace

std::string_view to_string(NoiseType t) {
    switch (t) {
        case NoiseType::StrokeBroken: return "stroke_broken";
        case NoiseType::BoneCracked: return "bone_cracked";
        case NoiseType::Edges: return "edges";
        case NoiseType::DenseWhiteRegions: return "dense_white_regions";
    }
    return "unknown";
}

std::optional<NoiseType> parse_noise_type(std::string_view name) {
    for (int i = 0; i < kNoiseTypeCount; ++i)
        if (to_string(NoiseType(i)) == name) return NoiseType(i);
    return std::nullopt;
}

GrayImage synth_glyph(int class_id, std::uint64_t seed, std::size_t resolution) {
    if (resolution < 32) throw std::invalid_argument("synth_glyph: resolution must be >= 32");
    Rng rng(mix(std::uint64_t(std::int64_t(class_id)) * 7919ULL + 17ULL, seed));
    const double scale = uniform(rng, 0.95, 1.05);
    const double theta = uniform(rng, -4.0, 4.0) * std::numbers::pi / 180.0;
    const double tx = uniform(rng, -0.02, 0.02), ty = uniform(rng, -0.02, 0.02);
    auto strokes = class_template(class_id);
    for (auto& line : strokes) {
        for (auto& p : line) {
            const double x = p.x - 0.5 + uniform(rng, -0.01, 0.01);
            const double y = p.y - 0.5 + uniform(rng, -0.01, 0.01);
            p.x = std::clamp(0.5 + tx + scale * (x * std::cos(theta) - y * std::sin(theta)), 0.06, 0.94);
            p.y = std::clamp(0.5 + ty + scale * (x * std::sin(theta) + y * std::cos(theta)), 0.06, 0.94);
        }
    }
    // Monoline brush: 7 px wide at 128 px, scaled with resolution.
    const double half_width = 0.5 * 7.0 * double(resolution) / 128.0;
    const auto dist = distance_field(strokes, resolution, resolution);
    GrayImage img(resolution, resolution, 0.0f);
    for (std::size_t i = 0; i < dist.size(); ++i) img.pixels[i] = dist[i] <= half_width ? 1.0f : 0.0f;
    return img;
}

GrayImage synth_noise(const GrayImage& glyph, NoiseType type, std::uint64_t seed) {
    validate(glyph);
    const std::size_t w = glyph.width, h = glyph.height;
    Rng rng(mix(seed, 0xA0 + std::uint64_t(type)));
    const BinaryMask strokes = glyph_mask(glyph);

    const auto texture = value_noise(w, h, 6, rng);
    const auto jitter = value_noise(w, h, 5, rng);
    std::vector<double> background(w * h), base(w * h);
    for (std::size_t i = 0; i < base.size(); ++i) {
        background[i] = 0.04 + 0.14 * texture[i] + uniform(rng, 0.0, 0.05);
        base[i] = strokes.bits[i] ? 1.0 : background[i];
    }
    std::vector<double> overlay(w * h, 0.0);
    switch (type) {
        case NoiseType::StrokeBroken:
            base = stroke_broken_base(glyph, strokes, std::move(base), background, rng);
            break;
        case NoiseType::BoneCracked: add_crack_overlay(overlay, w, h, rng); break;
        case NoiseType::Edges: add_edge_overlay(overlay, w, h, rng); break;
        case NoiseType::DenseWhiteRegions: add_blob_overlay(overlay, strokes, w, h, rng); break;
    }

    const auto compose = [&](double gain) {
        GrayImage out(w, h);
        for (std::size_t i = 0; i < base.size(); ++i) {
            const double j = 0.1 * (2.0 * jitter[i] - 1.0);
            const double v = std::max(base[i], gain * overlay[i]) + j;
            out.pixels[i] = float(std::clamp(v, 0.0, 1.0));
        }
        return out;
    };

    // Additive noise types must keep the glyph recognizable: attenuate the
    // overlay until the mask IoU against the clean glyph is at least 0.5.
    GrayImage out = compose(1.0);
    if (type != NoiseType::StrokeBroken) {
        double gain = 1.0;
        while (iou(glyph_mask(out), strokes) < 0.5 && gain > 0.05) {
            gain *= 0.9;
            out = compose(gain);
        }
    }
    return out;
}

}  // namespace obidiff::data
