// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "cmir/tensor.hpp"

namespace cmir::metrics {

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// 10 log10(max_val^2 / MSE); +infinity when the inputs are identical.
double psnr(const Tensor& a, const Tensor& b, double max_val = 1.0);

/// Mean SSIM over all fully contained 11x11 Gaussian windows. Inputs are
/// (H, W), (1, H, W) or (C, H, W); multi-channel scores are the mean of
/// the per-channel scores.
double ssim(const Tensor& a, const Tensor& b, double data_range = 1.0);

/// Limited-range luma: (65.481 R + 128.553 G + 24.966 B + 16) / 255.
/// (3, H, W) -> (1, H, W).
Tensor rgb_to_y(const Tensor& rgb);

enum class ChannelMode { rgb, y };

std::string to_string(ChannelMode mode);
ChannelMode parse_channel_mode(const std::string& name);

struct ImageScore {
    std::string name;
    double psnr_db = 0.0;
    double ssim = 0.0;
};

struct MetricReport {
    ChannelMode channel_mode = ChannelMode::rgb;
    std::vector<ImageScore> images;
    double mean_psnr = 0.0;  ///< +inf if any image is identical to its reference
    double mean_ssim = 0.0;

    /// "filename,psnr,ssim" rows plus a trailing "mean" row.
    std::string to_csv() const;
};

ImageScore score_pair(const std::string& name, const Tensor& restored, const Tensor& reference, ChannelMode mode);

/// Fills mean_psnr and mean_ssim from the per-image scores.
void finalize(MetricReport& report);

}  // namespace cmir::metrics
