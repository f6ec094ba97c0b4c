// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "obidiff/data/image.hpp"

namespace obidiff::eval {

struct PairMetrics {
    double l1 = 0.0;
    double rmse = 0.0;
    double psnr = 0.0;  // +infinity for identical images
    double ssim = 0.0;
};

/// Images must share dimensions; intensities are on the [0,1] scale (MAX = 1).
PairMetrics pair_metrics(const data::GrayImage& a, const data::GrayImage& b);
double psnr(const data::GrayImage& a, const data::GrayImage& b);
/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03.
/// Near the border the window is truncated to the image and renormalized.
double ssim(const data::GrayImage& a, const data::GrayImage& b);

/// Frechet distance between Gaussian fits of two feature sets (rows = samples).
/// Uses diagonal covariances when either set has fewer than 2 * dim rows.
double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);

struct FeatureStats {
    double brightness = 0.0;  // mean intensity
    double contrast = 0.0;    // population std of intensity
    double sharpness = 0.0;   // variance of the 3x3 Laplacian over interior pixels
    double si = 0.0;          // std of Sobel gradient magnitude over interior pixels
};

FeatureStats feature_stats(const data::GrayImage& img);

/// Gaussian KDE with Silverman bandwidth per series, evaluated on a shared grid
/// spanning all values. Columns: series,x,density.
void write_kde_csv(std::ostream& out, const std::map<std::string, std::vector<double>>& series,
                   std::size_t grid_points = 128);

}  // namespace obidiff::eval
