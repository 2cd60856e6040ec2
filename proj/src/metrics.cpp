// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmir/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace cmir::metrics {

namespace {

std::vector<double> gaussian_window() {
    std::vector<double> g(kSsimWindow);
    double total = 0.0;
    const int r = kSsimWindow / 2;
    for (int i = 0; i < kSsimWindow; ++i) {
        g[i] = std::exp(-static_cast<double>((i - r) * (i - r)) / (2.0 * kSsimSigma * kSsimSigma));
        total += g[i];
    }
    for (double& v : g) v /= total;
    return g;
}

// Separable 'valid' filtering of one plane.
std::vector<double> filter_valid(const double* src, std::size_t h, std::size_t w, const std::vector<double>& g) {
    const std::size_t k = g.size(), oh = h - k + 1, ow = w - k + 1;
    std::vector<double> tmp(h * ow), out(oh * ow);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) acc += g[j] * src[y * w + x + j];
            tmp[y * ow + x] = acc;
        }
    }
    for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (std::size_t i = 0; i < k; ++i) acc += g[i] * tmp[(y + i) * ow + x];
            out[y * ow + x] = acc;
        }
    }
    return out;
}

double ssim_plane(const double* a, const double* b, std::size_t h, std::size_t w, double data_range) {
    const auto g = gaussian_window();
    std::vector<double> aa(h * w), bb(h * w), ab(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const auto mu_a = filter_valid(a, h, w, g), mu_b = filter_valid(b, h, w, g);
    const auto s_aa = filter_valid(aa.data(), h, w, g), s_bb = filter_valid(bb.data(), h, w, g);
    const auto s_ab = filter_valid(ab.data(), h, w, g);
    const double c1 = (kSsimK1 * data_range) * (kSsimK1 * data_range);
    const double c2 = (kSsimK2 * data_range) * (kSsimK2 * data_range);
    double total = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        const double ma = mu_a[i], mb = mu_b[i];
        const double va = s_aa[i] - ma * ma, vb = s_bb[i] - mb * mb, cov = s_ab[i] - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    return total / static_cast<double>(mu_a.size());
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b, double max_val) {
    require_same_shape(a, b, "psnr");
    if (!(max_val > 0.0)) throw std::invalid_argument("psnr: max_val must be positive");
    if (a.empty()) throw std::invalid_argument("psnr: empty input");
    long double se = 0.0L;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const long double d = static_cast<long double>(a[i]) - b[i];
        se += d * d;
    }
    const double mse = static_cast<double>(se / a.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(max_val * max_val / mse);
}

double ssim(const Tensor& a, const Tensor& b, double data_range) {
    require_same_shape(a, b, "ssim");
    std::size_t c = 1, h = 0, w = 0;
    if (a.rank() == 2) {
        h = a.dim(0);
        w = a.dim(1);
    } else if (a.rank() == 3) {
        c = a.dim(0);
        h = a.dim(1);
        w = a.dim(2);
    } else {
        throw std::invalid_argument("ssim: expected (H, W) or (C, H, W), got " + shape_to_string(a.shape()));
    }
    if (h < static_cast<std::size_t>(kSsimWindow) || w < static_cast<std::size_t>(kSsimWindow)) {
        throw std::invalid_argument("ssim: image " + std::to_string(h) + "x" + std::to_string(w) +
                                    " is smaller than the " + std::to_string(kSsimWindow) + "x" +
                                    std::to_string(kSsimWindow) + " window");
    }
    double total = 0.0;
    for (std::size_t k = 0; k < c; ++k) total += ssim_plane(a.ptr() + k * h * w, b.ptr() + k * h * w, h, w, data_range);
    return total / static_cast<double>(c);
}

Tensor rgb_to_y(const Tensor& rgb) {
    if (rgb.rank() != 3 || rgb.dim(0) != 3) {
        throw std::invalid_argument("rgb_to_y: expected (3, H, W), got " + shape_to_string(rgb.shape()));
    }
    const std::size_t h = rgb.dim(1), w = rgb.dim(2), plane = h * w;
    Tensor y({1, h, w});
    for (std::size_t i = 0; i < plane; ++i) {
        y[i] = (65.481 * rgb[i] + 128.553 * rgb[plane + i] + 24.966 * rgb[2 * plane + i] + 16.0) / 255.0;
    }
    return y;
}

std::string to_string(ChannelMode mode) { return mode == ChannelMode::rgb ? "rgb" : "y"; }

ChannelMode parse_channel_mode(const std::string& name) {
    if (name == "rgb") return ChannelMode::rgb;
    if (name == "y") return ChannelMode::y;
    throw std::invalid_argument("unknown channel mode '" + name + "' (expected rgb or y)");
}

ImageScore score_pair(const std::string& name, const Tensor& restored, const Tensor& reference, ChannelMode mode) {
    require_same_shape(restored, reference, "score_pair");
    if (mode == ChannelMode::y) {
        const Tensor a = rgb_to_y(restored), b = rgb_to_y(reference);
        return {name, psnr(a, b), ssim(a, b)};
    }
    return {name, psnr(restored, reference), ssim(restored, reference)};
}

void finalize(MetricReport& report) {
    double p = 0.0, s = 0.0;
    for (const auto& img : report.images) {
        p += img.psnr_db;
        s += img.ssim;
    }
    const double n = static_cast<double>(std::max<std::size_t>(1, report.images.size()));
    report.mean_psnr = p / n;
    report.mean_ssim = s / n;
}

std::string MetricReport::to_csv() const {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "filename,psnr,ssim\n";
    for (const auto& img : images) os << img.name << ',' << img.psnr_db << ',' << img.ssim << '\n';
    os << "mean," << mean_psnr << ',' << mean_ssim << '\n';
    return os.str();
}

}  // namespace cmir::metrics
