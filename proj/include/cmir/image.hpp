// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>

#include "cmir/tensor.hpp"

namespace cmir::image {

/// Images are (C, H, W) tensors with values in [0, 1].
inline std::size_t channels(const Tensor& img) { return img.dim(0); }
inline std::size_t height(const Tensor& img) { return img.dim(1); }
inline std::size_t width(const Tensor& img) { return img.dim(2); }

/// Throws std::invalid_argument unless `img` is (C, H, W) with C >= 1.
void require_image(const Tensor& img, const char* what);

/// Reads an 8-bit PNG as RGB (grey is replicated, alpha dropped).
Tensor read_png(const std::filesystem::path& path);

/// Writes 8-bit RGB (or grey for one channel); values are clipped and rounded.
void write_png(const std::filesystem::path& path, const Tensor& img);

/// Rounds to the 8-bit grid, as a PNG round trip would.
Tensor quantize(const Tensor& img);

/// Reflect padding (edge pixel not repeated) on the bottom and right.
Tensor reflect_pad(const Tensor& img, std::size_t pad_bottom, std::size_t pad_right);

/// Top-left crop to (h, w).
Tensor crop(const Tensor& img, std::size_t top, std::size_t left, std::size_t h, std::size_t w);

/// Index into [0, n) under repeated reflection without edge duplication.
std::size_t reflect_index(long i, std::size_t n);

/// (C, H, W) in [0, 1] -> (1, C, H, W) in [-1, 1], and back.
Tensor to_model_space(const Tensor& img);
Tensor from_model_space(const Tensor& batch_item);

}  // namespace cmir::image
