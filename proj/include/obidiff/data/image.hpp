// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace obidiff::data {

inline constexpr double kDefaultMaskThreshold = 0.5;
inline constexpr double kDefaultIouGate = 0.8;
inline constexpr std::size_t kMinImageSide = 8;

/// Single-channel image, row-major, intensities in [0,1].
struct GrayImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<float> pixels;

    GrayImage() = default;
    GrayImage(std::size_t w, std::size_t h, float fill = 0.0f)
        : width(w), height(h), pixels(w * h, fill) {}

    float& at(std::size_t row, std::size_t col) { return pixels[row * width + col]; }
    float at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
    std::size_t size() const { return pixels.size(); }
    bool same_dims(const GrayImage& o) const { return width == o.width && height == o.height; }

    bool operator==(const GrayImage&) const = default;
};

/// Throws std::invalid_argument unless dims >= 8 and every value is in [0,1].
void validate(const GrayImage& img);

struct BinaryMask {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> bits;

    BinaryMask() = default;
    BinaryMask(std::size_t w, std::size_t h) : width(w), height(h), bits(w * h, 0) {}
    bool at(std::size_t row, std::size_t col) const { return bits[row * width + col] != 0; }
    void set(std::size_t row, std::size_t col, bool v = true) { bits[row * width + col] = v ? 1 : 0; }
    std::size_t count() const;

    bool operator==(const BinaryMask&) const = default;
};

/// Inclusive pixel box.
struct BBox {
    std::size_t row_min = 0, col_min = 0, row_max = 0, col_max = 0;

    std::size_t area() const { return (row_max - row_min + 1) * (col_max - col_min + 1); }
    bool contains(std::size_t r, std::size_t c) const {
        return r >= row_min && r <= row_max && c >= col_min && c <= col_max;
    }
    bool operator==(const BBox&) const = default;
};

GrayImage invert_glyph(const GrayImage& img);

/// Bit set iff pixel > threshold. Threshold must lie in (0,1).
BinaryMask glyph_mask(const GrayImage& img, double threshold = kDefaultMaskThreshold);

/// |a & b| / |a | b|; two empty masks give 1.0.
double iou(const BinaryMask& a, const BinaryMask& b);

/// Tightest box over above-threshold pixels; EmptyGlyphError when there are none.
BBox bounding_box(const GrayImage& glyph, double threshold = kDefaultMaskThreshold);

/// Blanks the glyph's bounding box in the style image (fill 0). With `dual`, the
/// style's own box is blanked too when it has above-threshold pixels.
GrayImage mask_style(const GrayImage& style, const GrayImage& glyph, bool dual,
                     double threshold = kDefaultMaskThreshold);

/// 8-bit grayscale PNG. Loading divides by 255; saving rounds half-up.
GrayImage load_png(const std::filesystem::path& path);
void save_png(const std::filesystem::path& path, const GrayImage& img);
std::vector<std::uint8_t> encode_png(const GrayImage& img);
std::uint8_t quantize(float v);
/// Round-trips through 8-bit storage without touching disk.
GrayImage quantized(const GrayImage& img);

}  // namespace obidiff::data
