// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "obidiff/data/image.hpp"
#include "obidiff/nn/tensor.hpp"

namespace obidiff::data {

/// Stacks equally sized images into a constant [N,1,H,W] tensor, values unchanged.
template <typename T>
nn::Var<T> images_to_tensor(const std::vector<GrayImage>& images) {
    if (images.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
    const std::size_t w = images[0].width, h = images[0].height;
    std::vector<T> values;
    values.reserve(images.size() * w * h);
    for (const auto& img : images) {
        if (img.width != w || img.height != h) throw std::invalid_argument("images_to_tensor: mixed image sizes");
        for (float v : img.pixels) values.push_back(T(v));
    }
    return nn::Var<T>::constant({images.size(), 1, h, w}, std::move(values));
}

/// Splits a [N,1,H,W] tensor into images, clamping to [0,1] (non-finite -> 0).
inline std::vector<GrayImage> tensor_to_images(const nn::Var<float>& x) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != 1) throw std::invalid_argument("tensor_to_images: expected [N,1,H,W]");
    std::vector<GrayImage> out;
    const std::size_t per = s[2] * s[3];
    const auto v = x.data();
    for (std::size_t i = 0; i < s[0]; ++i) {
        GrayImage img(s[3], s[2]);
        for (std::size_t j = 0; j < per; ++j) {
            const float p = v[i * per + j];
            img.pixels[j] = std::isfinite(p) ? std::clamp(p, 0.0f, 1.0f) : 0.0f;
        }
        out.push_back(std::move(img));
    }
    return out;
}

}  // namespace obidiff::data
