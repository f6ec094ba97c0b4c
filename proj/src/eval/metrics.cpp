// SPDX-License-Identifier: Apache-2.0
#include "obidiff/eval/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>
#include <stdexcept>

#include "obidiff/simd/kernels.hpp"

namespace obidiff::eval {

namespace {

void require_same_dims(const data::GrayImage& a, const data::GrayImage& b) {
    if (!a.same_dims(b) || a.pixels.size() != a.width * a.height || b.pixels.size() != b.width * b.height)
        throw std::invalid_argument("pair metrics: image dimensions differ");
    if (a.pixels.empty()) throw std::invalid_argument("pair metrics: empty image");
}

constexpr int kSsimRadius = 5;
constexpr double kSsimSigma = 1.5;

// Separable weighted window sums with per-pixel renormalization over the part
// of the window that lies inside the image.
std::vector<double> window_mean(const std::vector<double>& v, std::size_t w, std::size_t h) {
    std::array<double, 2 * kSsimRadius + 1> g{};
    for (int i = -kSsimRadius; i <= kSsimRadius; ++i)
        g[std::size_t(i + kSsimRadius)] = std::exp(-double(i * i) / (2.0 * kSsimSigma * kSsimSigma));
    std::vector<double> tmp(v.size()), out(v.size());
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            double s = 0.0, norm = 0.0;
            for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
                const long cc = long(c) + d;
                if (cc < 0 || cc >= long(w)) continue;
                s += g[std::size_t(d + kSsimRadius)] * v[r * w + std::size_t(cc)];
                norm += g[std::size_t(d + kSsimRadius)];
            }
            tmp[r * w + c] = s / norm;
        }
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            double s = 0.0, norm = 0.0;
            for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
                const long rr = long(r) + d;
                if (rr < 0 || rr >= long(h)) continue;
                s += g[std::size_t(d + kSsimRadius)] * tmp[std::size_t(rr) * w + c];
                norm += g[std::size_t(d + kSsimRadius)];
            }
            out[r * w + c] = s / norm;
        }
    return out;
}

}  // namespace

double psnr(const data::GrayImage& a, const data::GrayImage& b) {
    require_same_dims(a, b);
    const double mse = simd::active().sum_sq_diff(a.pixels.size(), a.pixels.data(), b.pixels.data()) /
                       double(a.pixels.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

double ssim(const data::GrayImage& a, const data::GrayImage& b) {
    require_same_dims(a, b);
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const std::size_t w = a.width, h = a.height, n = a.pixels.size();
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = a.pixels[i];
        y[i] = b.pixels[i];
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto mx = window_mean(x, w, h), my = window_mean(y, w, h);
    const auto mxx = window_mean(xx, w, h), myy = window_mean(yy, w, h), mxy = window_mean(xy, w, h);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double vx = mxx[i] - mx[i] * mx[i], vy = myy[i] - my[i] * my[i], cxy = mxy[i] - mx[i] * my[i];
        total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) /
                 ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    return total / double(n);
}

PairMetrics pair_metrics(const data::GrayImage& a, const data::GrayImage& b) {
    require_same_dims(a, b);
    const auto& k = simd::active();
    const double n = double(a.pixels.size());
    PairMetrics m;
    m.l1 = k.sum_abs_diff(a.pixels.size(), a.pixels.data(), b.pixels.data()) / n;
    const double mse = k.sum_sq_diff(a.pixels.size(), a.pixels.data(), b.pixels.data()) / n;
    m.rmse = std::sqrt(mse);
    m.psnr = mse == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / mse);
    m.ssim = ssim(a, b);
    return m;
}

double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
    if (a.empty() || b.empty()) throw std::invalid_argument("frechet_distance: empty feature set");
    const std::size_t d = a[0].size();
    if (d == 0) throw std::invalid_argument("frechet_distance: zero-dimensional features");
    const auto to_matrix = [d](const std::vector<std::vector<double>>& rows) {
        Eigen::MatrixXd m(Eigen::Index(rows.size()), Eigen::Index(d));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != d) throw std::invalid_argument("frechet_distance: ragged feature rows");
            for (std::size_t j = 0; j < d; ++j) m(Eigen::Index(i), Eigen::Index(j)) = rows[i][j];
        }
        return m;
    };
    const Eigen::MatrixXd A = to_matrix(a), B = to_matrix(b);
    const Eigen::RowVectorXd mu_a = A.colwise().mean(), mu_b = B.colwise().mean();
    const Eigen::MatrixXd ca = A.rowwise() - mu_a, cb = B.rowwise() - mu_b;
    const double na = std::max<double>(double(a.size()) - 1.0, 1.0), nb = std::max<double>(double(b.size()) - 1.0, 1.0);
    const double mean_term = (mu_a - mu_b).squaredNorm();

    if (a.size() < 2 * d || b.size() < 2 * d) {
        const Eigen::VectorXd va = ca.array().square().colwise().sum().transpose() / na;
        const Eigen::VectorXd vb = cb.array().square().colwise().sum().transpose() / nb;
        const double trace = (va + vb - 2.0 * (va.array() * vb.array()).sqrt().matrix()).sum();
        return std::max(0.0, mean_term + trace);
    }
    const Eigen::MatrixXd sa = (ca.transpose() * ca) / na, sb = (cb.transpose() * cb) / nb;
    // Tr sqrt(Sa Sb) = Tr sqrt(Sa^1/2 Sb Sa^1/2), the inner matrix being symmetric PSD.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(sa);
    const Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Eigen::MatrixXd root_a = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();
    const Eigen::MatrixXd inner = root_a * sb * root_a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
    const double tr_sqrt = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    return std::max(0.0, mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt);
}

FeatureStats feature_stats(const data::GrayImage& img) {
    data::validate(img);
    const std::size_t w = img.width, h = img.height, n = img.pixels.size();
    const auto px = [&](std::size_t r, std::size_t c) { return double(img.at(r, c)); };
    const auto pop_std = [](const std::vector<double>& v) {
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= double(v.size());
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        return std::pair{mean, var / double(v.size())};
    };
    FeatureStats s;
    std::vector<double> all(img.pixels.begin(), img.pixels.end());
    const auto [mean, var] = pop_std(all);
    s.brightness = mean;
    s.contrast = std::sqrt(var);
    std::vector<double> lap, sobel;
    lap.reserve(n);
    sobel.reserve(n);
    for (std::size_t r = 1; r + 1 < h; ++r)
        for (std::size_t c = 1; c + 1 < w; ++c) {
            lap.push_back(px(r - 1, c) + px(r + 1, c) + px(r, c - 1) + px(r, c + 1) - 4.0 * px(r, c));
            const double gx = (px(r - 1, c + 1) + 2.0 * px(r, c + 1) + px(r + 1, c + 1)) -
                              (px(r - 1, c - 1) + 2.0 * px(r, c - 1) + px(r + 1, c - 1));
            const double gy = (px(r + 1, c - 1) + 2.0 * px(r + 1, c) + px(r + 1, c + 1)) -
                              (px(r - 1, c - 1) + 2.0 * px(r - 1, c) + px(r - 1, c + 1));
            sobel.push_back(std::hypot(gx, gy));
        }
    s.sharpness = pop_std(lap).second;
    s.si = std::sqrt(pop_std(sobel).second);
    return s;
}

void write_kde_csv(std::ostream& out, const std::map<std::string, std::vector<double>>& series,
                   std::size_t grid_points) {
    if (grid_points < 2) throw std::invalid_argument("write_kde_csv: need at least two grid points");
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& [name, v] : series)
        for (double x : v) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
    out << "series,x,density\n";
    if (!std::isfinite(lo)) return;
    if (hi <= lo) hi = lo + 1.0;
    const double pad = 0.1 * (hi - lo);
    lo -= pad;
    hi += pad;
    for (const auto& [name, v] : series) {
        if (v.empty()) continue;
        std::vector<double> sorted = v;
        std::sort(sorted.begin(), sorted.end());
        const double n = double(sorted.size());
        double mean = 0.0, var = 0.0;
        for (double x : sorted) mean += x;
        mean /= n;
        for (double x : sorted) var += (x - mean) * (x - mean);
        const double sd = std::sqrt(var / std::max(n - 1.0, 1.0));
        const auto quantile = [&](double q) {
            const double pos = q * (n - 1.0);
            const auto i = std::size_t(pos);
            const double frac = pos - double(i);
            return i + 1 < sorted.size() ? sorted[i] * (1 - frac) + sorted[i + 1] * frac : sorted[i];
        };
        const double iqr = quantile(0.75) - quantile(0.25);
        double spread = sd;
        if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
        double bw = 0.9 * spread * std::pow(n, -0.2);
        if (!(bw > 0.0)) bw = 1e-3 * (hi - lo);
        for (std::size_t g = 0; g < grid_points; ++g) {
            const double x = lo + (hi - lo) * double(g) / double(grid_points - 1);
            double dens = 0.0;
            for (double s : sorted) {
                const double z = (x - s) / bw;
                dens += std::exp(-0.5 * z * z);
            }
            dens /= n * bw * std::sqrt(2.0 * std::numbers::pi);
            out << name << ',' << x << ',' << dens << '\n';
        }
    }
}

}  // namespace obidiff::eval
