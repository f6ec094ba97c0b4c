// SPDX-License-Identifier: Apache-2.0
#include "obidiff/data/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

#include "obidiff/common/errors.hpp"

namespace obidiff::data {

void validate(const GrayImage& img) {
    if (img.width < kMinImageSide || img.height < kMinImageSide)
        throw std::invalid_argument("image smaller than 8x8: " + std::to_string(img.width) + "x" +
                                    std::to_string(img.height));
    if (img.pixels.size() != img.width * img.height)
        throw std::invalid_argument("image pixel count does not match dimensions");
    for (float v : img.pixels)
        if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("image value outside [0,1]");
}

std::size_t BinaryMask::count() const {
    return std::size_t(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

GrayImage invert_glyph(const GrayImage& img) {
    GrayImage out = img;
    for (float& v : out.pixels) v = 1.0f - v;
    return out;
}

BinaryMask glyph_mask(const GrayImage& img, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw std::invalid_argument("mask threshold must lie in (0,1)");
    BinaryMask m(img.width, img.height);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) m.bits[i] = double(img.pixels[i]) > threshold;
    return m;
}

double iou(const BinaryMask& a, const BinaryMask& b) {
    if (a.width != b.width || a.height != b.height)
        throw std::invalid_argument("iou: mask dimensions differ");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.bits.size(); ++i) {
        inter += (a.bits[i] & b.bits[i]);
        uni += (a.bits[i] | b.bits[i]);
    }
    return uni == 0 ? 1.0 : double(inter) / double(uni);
}

BBox bounding_box(const GrayImage& glyph, double threshold) {
    bool found = false;
    BBox box{glyph.height, glyph.width, 0, 0};
    for (std::size_t r = 0; r < glyph.height; ++r) {
        for (std::size_t c = 0; c < glyph.width; ++c) {
            if (double(glyph.at(r, c)) <= threshold) continue;
            found = true;
            box.row_min = std::min(box.row_min, r);
            box.col_min = std::min(box.col_min, c);
            box.row_max = std::max(box.row_max, r);
            box.col_max = std::max(box.col_max, c);
        }
    }
    if (!found) throw EmptyGlyphError("glyph has no pixel above threshold");
    return box;
}

GrayImage mask_style(const GrayImage& style, const GrayImage& glyph, bool dual, double threshold) {
    if (!style.same_dims(glyph)) throw std::invalid_argument("mask_style: dimension mismatch");
    const BBox gbox = bounding_box(glyph, threshold);
    std::optional<BBox> sbox;
    if (dual) {
        try {
            sbox = bounding_box(style, threshold);
        } catch (const EmptyGlyphError&) {
        }
    }
    GrayImage out = style;
    for (std::size_t r = 0; r < out.height; ++r)
        for (std::size_t c = 0; c < out.width; ++c)
            if (gbox.contains(r, c) || (sbox && sbox->contains(r, c))) out.at(r, c) = 0.0f;
    return out;
}

std::uint8_t quantize(float v) {
    const double scaled = std::floor(double(std::clamp(v, 0.0f, 1.0f)) * 255.0 + 0.5);
    return std::uint8_t(std::clamp(scaled, 0.0, 255.0));
}

GrayImage quantized(const GrayImage& img) {
    GrayImage out = img;
    for (float& v : out.pixels) v = float(quantize(v)) / 255.0f;
    return out;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};

void write_rows(png_structp png, png_infop info, const GrayImage& img) {
    png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(img.width);
    for (std::size_t r = 0; r < img.height; ++r) {
        for (std::size_t c = 0; c < img.width; ++c) row[c] = quantize(img.at(r, c));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
}

void append_to_vector(png_structp png, png_bytep data, png_size_t len) {
    auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
    out->insert(out->end(), data, data + len);
}

}  // namespace

GrayImage load_png(const std::filesystem::path& path) {
    std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open image " + path.string());
    png_byte sig[8];
    if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw IoError("not a PNG file: " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng init failed");
    }
    GrayImage img;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("corrupt PNG: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
        color == PNG_COLOR_TYPE_PALETTE)
        png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_read_update_info(png, info);
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.pixels.resize(img.width * img.height);
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    for (std::size_t r = 0; r < img.height; ++r) {
        png_read_row(png, row.data(), nullptr);
        for (std::size_t c = 0; c < img.width; ++c) img.at(r, c) = float(row[c]) / 255.0f;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void save_png(const std::filesystem::path& path, const GrayImage& img) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto bytes = encode_png(img);
    std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot write image " + path.string());
    if (std::fwrite(bytes.data(), 1, bytes.size(), fp.get()) != bytes.size())
        throw IoError("short write: " + path.string());
}

std::vector<std::uint8_t> encode_png(const GrayImage& img) {
    std::vector<std::uint8_t> out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG encode failed");
    }
    png_set_write_fn(png, &out, append_to_vector, nullptr);
    write_rows(png, info, img);
    png_destroy_write_struct(&png, &info);
    return out;
}

}  // namespace obidiff::data
