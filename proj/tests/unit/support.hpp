// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <unistd.h>

#include "obidiff/data/image.hpp"
#include "obidiff/nn/layers.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("obidiff_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

private:
    static int& counter() {
        static int n = 0;
        return n;
    }
    std::filesystem::path path_;
};

inline obidiff::data::GrayImage random_image(std::size_t w, std::size_t h, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    obidiff::data::GrayImage img(w, h);
    for (auto& p : img.pixels) p = u(rng);
    return img;
}

template <typename T>
std::vector<T> random_values(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<T> v(n);
    for (auto& x : v) x = T(u(rng));
    return v;
}

/// Largest relative error between analytic and central-difference gradients
/// over every element of `params` (or `max_probes` evenly spaced elements per tensor).
inline double gradcheck(const std::function<obidiff::nn::Var<double>()>& loss,
                        const std::vector<obidiff::nn::Var<double>>& params, double h = 1e-6,
                        std::size_t max_probes = 0) {
    for (auto p : params) p.zero_grad();
    auto l = loss();
    obidiff::nn::backward(l);
    std::vector<std::vector<double>> analytic;
    for (const auto& p : params) {
        auto g = p.grad();
        analytic.emplace_back(g.begin(), g.end());
        analytic.back().resize(p.size(), 0.0);
    }
    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto p = params[pi];
        const std::size_t n = p.size();
        const std::size_t stride = max_probes && n > max_probes ? n / max_probes : 1;
        for (std::size_t i = 0; i < n; i += stride) {
            auto v = p.mutable_data();
            const double orig = v[i];
            v[i] = orig + h;
            const double up = loss().item();
            v[i] = orig - h;
            const double down = loss().item();
            v[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            const double denom = std::max({std::abs(numeric), std::abs(analytic[pi][i]), 1e-6});
            worst = std::max(worst, std::abs(numeric - analytic[pi][i]) / denom);
        }
    }
    return worst;
}

}  // namespace testing
