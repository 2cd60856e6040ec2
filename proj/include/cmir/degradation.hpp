// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmir/rng.hpp"
#include "cmir/tensor.hpp"

namespace cmir::degrade {

enum class DegradationKind { gaussian_noise, motion_blur, rain_streaks };

std::string to_string(DegradationKind kind);
/// Accepts "gaussian_noise" / "gaussian", "motion_blur" / "blur", "rain_streaks" / "rain".
DegradationKind parse_kind(const std::string& name);

/// Recipe for one synthetic degradation. Only the fields of `kind` are used.
struct DegradationSpec {
    DegradationKind kind = DegradationKind::gaussian_noise;
    double sigma = 25.0;  ///< noise std on the 0-255 scale
    int kernel_length = 9;  ///< odd
    double angle_degrees = 0.0;  ///< blur direction, counter-clockwise from +x
    int streak_count = 200;
    int streak_length = 15;
    double streak_angle_degrees = 70.0;
    double streak_intensity = 0.6;
    std::uint64_t seed = 0;
};

nlohmann::json to_json(const DegradationSpec& spec);
DegradationSpec spec_from_json(const nlohmann::json& j);

struct RestorationPair {
    Tensor hq;
    Tensor lq;
    DegradationSpec spec;
};

/// clip(img + (sigma / 255) z, 0, 1). Throws for sigma <= 0.
Tensor add_gaussian_noise(const Tensor& img, double sigma, Rng& rng);

/// Normalized length x length line kernel through the centre at `angle`;
/// taps at unit spacing along the line, bilinearly splatted. Row-major.
std::vector<double> motion_blur_kernel(int length, double angle_degrees);

/// Convolution with motion_blur_kernel under reflect padding. Throws for
/// even or non-positive lengths.
Tensor apply_motion_blur(const Tensor& img, int length, double angle_degrees);

/// Screen-blends anti-aliased white line segments:
/// out = 1 - (1 - img)(1 - intensity * coverage), clipped to [0, 1].
Tensor apply_rain_streaks(const Tensor& img, const DegradationSpec& spec, Rng& rng);

/// Dispatches on spec.kind.
RestorationPair make_pair(const Tensor& hq, const DegradationSpec& spec, Rng& rng);
/// Same, drawing from Rng(spec.seed).
RestorationPair make_pair(const Tensor& hq, const DegradationSpec& spec);

}  // namespace cmir::degrade
