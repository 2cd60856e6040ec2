// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmir/degradation.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "cmir/image.hpp"

namespace cmir::degrade {

namespace {

double radians(double deg) { return deg * std::numbers::pi / 180.0; }

// Adds w at fractional position (x, y) of a row-major grid, bilinearly.
void splat(std::vector<double>& grid, std::size_t h, std::size_t w, double x, double y, double weight) {
    const double fx = std::floor(x), fy = std::floor(y);
    const double ax = x - fx, ay = y - fy;
    const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
    const double wts[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
    const long xs[4] = {x0, x0 + 1, x0, x0 + 1}, ys[4] = {y0, y0, y0 + 1, y0 + 1};
    for (int i = 0; i < 4; ++i) {
        if (wts[i] == 0.0 || xs[i] < 0 || ys[i] < 0 || xs[i] >= static_cast<long>(w) || ys[i] >= static_cast<long>(h)) {
            continue;
        }
        grid[ys[i] * w + xs[i]] += weight * wts[i];
    }
}

}  // namespace

std::string to_string(DegradationKind kind) {
    switch (kind) {
        case DegradationKind::gaussian_noise: return "gaussian_noise";
        case DegradationKind::motion_blur: return "motion_blur";
        case DegradationKind::rain_streaks: return "rain_streaks";
    }
    throw std::invalid_argument("unknown degradation kind");
}

DegradationKind parse_kind(const std::string& name) {
    if (name == "gaussian_noise" || name == "gaussian") return DegradationKind::gaussian_noise;
    if (name == "motion_blur" || name == "blur") return DegradationKind::motion_blur;
    if (name == "rain_streaks" || name == "rain") return DegradationKind::rain_streaks;
    throw std::invalid_argument("unknown degradation kind '" + name + "'");
}

nlohmann::json to_json(const DegradationSpec& s) {
    nlohmann::json j;
    j["kind"] = to_string(s.kind);
    switch (s.kind) {
        case DegradationKind::gaussian_noise: j["sigma"] = s.sigma; break;
        case DegradationKind::motion_blur:
            j["kernel_length"] = s.kernel_length;
            j["angle_degrees"] = s.angle_degrees;
            break;
        case DegradationKind::rain_streaks:
            j["streak_count"] = s.streak_count;
            j["streak_length"] = s.streak_length;
            j["streak_angle_degrees"] = s.streak_angle_degrees;
            j["streak_intensity"] = s.streak_intensity;
            break;
    }
    j["seed"] = s.seed;
    return j;
}

DegradationSpec spec_from_json(const nlohmann::json& j) {
    DegradationSpec s;
    s.kind = parse_kind(j.at("kind").get<std::string>());
    s.sigma = j.value("sigma", s.sigma);
    s.kernel_length = j.value("kernel_length", s.kernel_length);
    s.angle_degrees = j.value("angle_degrees", s.angle_degrees);
    s.streak_count = j.value("streak_count", s.streak_count);
    s.streak_length = j.value("streak_length", s.streak_length);
    s.streak_angle_degrees = j.value("streak_angle_degrees", s.streak_angle_degrees);
    s.streak_intensity = j.value("streak_intensity", s.streak_intensity);
    s.seed = j.value("seed", s.seed);
    return s;
}

Tensor add_gaussian_noise(const Tensor& img, double sigma, Rng& rng) {
    if (!(sigma > 0.0)) throw std::invalid_argument("add_gaussian_noise: sigma must be positive");
    const double sd = sigma / 255.0;
    Tensor out = img;
    for (double& v : out.values()) v = std::clamp(v + sd * rng.normal(), 0.0, 1.0);
    return out;
}

std::vector<double> motion_blur_kernel(int length, double angle_degrees) {
    if (length < 1 || length % 2 == 0) {
        throw std::invalid_argument("motion blur: kernel length must be a positive odd number, got " +
                                    std::to_string(length));
    }
    const std::size_t n = static_cast<std::size_t>(length);
    const double centre = (length - 1) / 2.0;
    const double dx = std::cos(radians(angle_degrees)), dy = -std::sin(radians(angle_degrees));
    std::vector<double> k(n * n, 0.0);
    const int r = (length - 1) / 2;
    for (int j = -r; j <= r; ++j) splat(k, n, n, centre + j * dx, centre + j * dy, 1.0);
    double total = 0.0;
    for (double v : k) total += v;
    for (double& v : k) v /= total;
    return k;
}

Tensor apply_motion_blur(const Tensor& img, int length, double angle_degrees) {
    image::require_image(img, "apply_motion_blur");
    const std::vector<double> k = motion_blur_kernel(length, angle_degrees);
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    const long r = (length - 1) / 2;
    Tensor out({c, h, w});
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* src = img.ptr() + ch * h * w;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                double acc = 0.0;
                for (long i = -r; i <= r; ++i) {
                    const std::size_t sy = image::reflect_index(static_cast<long>(y) + i, h);
                    for (long j = -r; j <= r; ++j) {
                        const double kv = k[(i + r) * length + (j + r)];
                        if (kv == 0.0) continue;
                        acc += kv * src[sy * w + image::reflect_index(static_cast<long>(x) + j, w)];
                    }
                }
                out[(ch * h + y) * w + x] = std::clamp(acc, 0.0, 1.0);
            }
        }
    }
    return out;
}

Tensor apply_rain_streaks(const Tensor& img, const DegradationSpec& spec, Rng& rng) {
    image::require_image(img, "apply_rain_streaks");
    if (spec.streak_count < 0) throw std::invalid_argument("rain streaks: streak count must be non-negative");
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    std::vector<double> cover(h * w, 0.0);
    const double dx = std::cos(radians(spec.streak_angle_degrees)), dy = -std::sin(radians(spec.streak_angle_degrees));
    const int samples = std::max(1, 2 * spec.streak_length);
    for (int s = 0; s < spec.streak_count; ++s) {
        const double x0 = rng.uniform() * w, y0 = rng.uniform() * h;
        std::vector<double> layer(h * w, 0.0);
        for (int i = 0; i <= samples; ++i) {
            const double t = spec.streak_length * static_cast<double>(i) / samples;
            splat(layer, h, w, x0 + t * dx, y0 + t * dy, 0.5);
        }
        for (std::size_t p = 0; p < h * w; ++p) cover[p] = std::max(cover[p], std::min(1.0, layer[p]));
    }
    Tensor out = img;
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t p = 0; p < h * w; ++p) {
            double& v = out[ch * h * w + p];
            v = std::clamp(v + (1.0 - v) * spec.streak_intensity * cover[p], 0.0, 1.0);
        }
    }
    return out;
}

RestorationPair make_pair(const Tensor& hq, const DegradationSpec& spec, Rng& rng) {
    image::require_image(hq, "make_pair");
    RestorationPair pair{hq, Tensor(), spec};
    switch (spec.kind) {
        case DegradationKind::gaussian_noise: pair.lq = add_gaussian_noise(hq, spec.sigma, rng); break;
        case DegradationKind::motion_blur: pair.lq = apply_motion_blur(hq, spec.kernel_length, spec.angle_degrees); break;
        case DegradationKind::rain_streaks: pair.lq = apply_rain_streaks(hq, spec, rng); break;
        default: throw std::invalid_argument("make_pair: unknown degradation kind");
    }
    return pair;
}

RestorationPair make_pair(const Tensor& hq, const DegradationSpec& spec) {
    Rng rng(spec.seed);
    return make_pair(hq, spec, rng);
}

}  // namespace cmir::degrade
