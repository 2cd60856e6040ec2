// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmir/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace cmir::image {

void require_image(const Tensor& img, const char* what) {
    if (img.rank() != 3 || img.dim(0) == 0) {
        throw std::invalid_argument(std::string(what) + ": expected a (C, H, W) image, got " +
                                    shape_to_string(img.shape()));
    }
}

Tensor read_png(const std::filesystem::path& path) {
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
        throw std::runtime_error("cannot read image '" + path.string() + "': " + png.message);
    }
    png.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
        const std::string msg = png.message;
        png_image_free(&png);
        throw std::runtime_error("cannot decode image '" + path.string() + "': " + msg);
    }
    const std::size_t h = png.height, w = png.width;
    Tensor img({3, h, w});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) img[(c * h + y) * w + x] = buf[(y * w + x) * 3 + c] / 255.0;
        }
    }
    return img;
}

void write_png(const std::filesystem::path& path, const Tensor& img) {
    require_image(img, "write_png");
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    if (c != 1 && c != 3) throw std::invalid_argument("write_png: need 1 or 3 channels");
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(w);
    png.height = static_cast<png_uint_32>(h);
    png.format = c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    std::vector<std::uint8_t> buf(h * w * c);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t k = 0; k < c; ++k) {
                const double v = std::clamp(img[(k * h + y) * w + x], 0.0, 1.0);
                buf[(y * w + x) * c + k] = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
        }
    }
    if (!png_image_write_to_file(&png, path.string().c_str(), 0, buf.data(), 0, nullptr)) {
        throw std::runtime_error("cannot write image '" + path.string() + "': " + png.message);
    }
}

Tensor quantize(const Tensor& img) {
    Tensor out = img;
    for (double& v : out.values()) v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
    return out;
}

std::size_t reflect_index(long i, std::size_t n) {
    if (n == 1) return 0;
    const long period = 2 * static_cast<long>(n) - 2;
    long m = i % period;
    if (m < 0) m += period;
    return static_cast<std::size_t>(m < static_cast<long>(n) ? m : period - m);
}

Tensor reflect_pad(const Tensor& img, std::size_t pad_bottom, std::size_t pad_right) {
    require_image(img, "reflect_pad");
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    const std::size_t ho = h + pad_bottom, wo = w + pad_right;
    Tensor out({c, ho, wo});
    for (std::size_t k = 0; k < c; ++k) {
        for (std::size_t y = 0; y < ho; ++y) {
            const std::size_t sy = reflect_index(static_cast<long>(y), h);
            for (std::size_t x = 0; x < wo; ++x) {
                out[(k * ho + y) * wo + x] = img[(k * h + sy) * w + reflect_index(static_cast<long>(x), w)];
            }
        }
    }
    return out;
}

Tensor crop(const Tensor& img, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
    require_image(img, "crop");
    const std::size_t c = img.dim(0), ih = img.dim(1), iw = img.dim(2);
    if (top + h > ih || left + w > iw) {
        throw std::invalid_argument("crop: window " + std::to_string(h) + "x" + std::to_string(w) + " at (" +
                                    std::to_string(top) + ", " + std::to_string(left) + ") exceeds " +
                                    std::to_string(ih) + "x" + std::to_string(iw));
    }
    Tensor out({c, h, w});
    for (std::size_t k = 0; k < c; ++k) {
        for (std::size_t y = 0; y < h; ++y) {
            const double* src = img.ptr() + (k * ih + top + y) * iw + left;
            std::copy(src, src + w, out.ptr() + (k * h + y) * w);
        }
    }
    return out;
}

Tensor to_model_space(const Tensor& img) {
    require_image(img, "to_model_space");
    Shape s{1};
    s.insert(s.end(), img.shape().begin(), img.shape().end());
    Tensor out(s);
    for (std::size_t i = 0; i < img.size(); ++i) out[i] = 2.0 * img[i] - 1.0;
    return out;
}

Tensor from_model_space(const Tensor& batch_item) {
    Shape s = batch_item.shape();
    if (s.size() == 4) {
        if (s[0] != 1) throw std::invalid_argument("from_model_space: expected a single batch item");
        s.erase(s.begin());
    }
    Tensor out(s);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(0.5 * (batch_item[i] + 1.0), 0.0, 1.0);
    return out;
}

}  // namespace cmir::image
