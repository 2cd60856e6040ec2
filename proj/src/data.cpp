// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmir/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "cmir/image.hpp"

namespace cmir::data {

namespace fs = std::filesystem;

PairedFolder::PairedFolder(fs::path hq_dir, fs::path lq_dir, std::vector<std::string> names)
    : m_hq_dir(std::move(hq_dir)), m_lq_dir(std::move(lq_dir)), m_names(std::move(names)) {}

degrade::RestorationPair PairedFolder::load(std::size_t i) const {
    if (i >= m_names.size()) throw std::out_of_range("paired folder index " + std::to_string(i) + " out of range");
    auto it = m_cache.find(i);
    if (it != m_cache.end()) return it->second;
    degrade::RestorationPair pair;
    pair.hq = image::read_png(m_hq_dir / m_names[i]);
    pair.lq = image::read_png(m_lq_dir / m_names[i]);
    if (pair.hq.shape() != pair.lq.shape()) {
        throw std::runtime_error("pair '" + m_names[i] + "' has mismatched sizes: hq " +
                                 shape_to_string(pair.hq.shape()) + " vs lq " + shape_to_string(pair.lq.shape()));
    }
    m_cache.emplace(i, pair);
    return pair;
}

std::vector<std::string> list_png(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
        if (ext == ".png") names.push_back(entry.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    return names;
}

PairedFolder load_paired_folder(const fs::path& hq_dir, const fs::path& lq_dir) {
    const auto hq = list_png(hq_dir), lq = list_png(lq_dir);
    const std::set<std::string> hq_set(hq.begin(), hq.end()), lq_set(lq.begin(), lq.end());
    std::vector<std::string> orphans;
    for (const auto& n : hq) {
        if (!lq_set.count(n)) orphans.push_back((hq_dir / n).string());
    }
    for (const auto& n : lq) {
        if (!hq_set.count(n)) orphans.push_back((lq_dir / n).string());
    }
    if (!orphans.empty()) {
        std::ostringstream os;
        os << "unpaired files (" << orphans.size() << "):";
        for (const auto& o : orphans) os << ' ' << o;
        throw std::runtime_error(os.str());
    }
    if (hq.empty()) throw std::runtime_error("no PNG files in " + hq_dir.string());
    return PairedFolder(hq_dir, lq_dir, hq);
}

Dataset Dataset::from_pairs(std::vector<degrade::RestorationPair> pairs) {
    if (pairs.empty()) throw std::invalid_argument("dataset: no pairs");
    Dataset d;
    d.m_pairs = std::make_shared<const std::vector<degrade::RestorationPair>>(std::move(pairs));
    return d;
}

Dataset Dataset::from_folder(PairedFolder folder) {
    Dataset d;
    d.m_folder = std::make_shared<const PairedFolder>(std::move(folder));
    return d;
}

std::size_t Dataset::size() const {
    if (m_pairs) return m_pairs->size();
    if (m_folder) return m_folder->size();
    return 0;
}

degrade::RestorationPair Dataset::get(std::size_t i) const {
    if (m_pairs) return m_pairs->at(i);
    if (m_folder) return m_folder->load(i);
    throw std::logic_error("dataset: empty");
}

Tensor synthetic_image(std::size_t height, std::size_t width, Rng& rng) {
    constexpr double kPi = std::numbers::pi;
    Tensor img({3, height, width});
    double base[3], gx[3], gy[3], tex_amp[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = 0.25 + 0.5 * rng.uniform();
        gx[c] = 0.3 * (rng.uniform() - 0.5);
        gy[c] = 0.3 * (rng.uniform() - 0.5);
        tex_amp[c] = 0.08 * rng.uniform();
    }
    const double fx = 2.0 * kPi * (1.0 + 3.0 * rng.uniform()) / static_cast<double>(width);
    const double fy = 2.0 * kPi * (1.0 + 3.0 * rng.uniform()) / static_cast<double>(height);
    const double phase = 2.0 * kPi * rng.uniform();
    const std::size_t plane = height * width;
    for (std::size_t y = 0; y < height; ++y) {
        const double v = static_cast<double>(y) / static_cast<double>(std::max<std::size_t>(1, height - 1)) - 0.5;
        for (std::size_t x = 0; x < width; ++x) {
            const double u = static_cast<double>(x) / static_cast<double>(std::max<std::size_t>(1, width - 1)) - 0.5;
            const double tex = std::sin(fx * x + phase) * std::cos(fy * y);
            for (int c = 0; c < 3; ++c) img[c * plane + y * width + x] = base[c] + gx[c] * u + gy[c] * v + tex_amp[c] * tex;
        }
    }
    const int shapes = static_cast<int>(rng.uniform_int(2, 4));
    for (int s = 0; s < shapes; ++s) {
        const bool disc = rng.uniform() < 0.5;
        const double cx = rng.uniform() * width, cy = rng.uniform() * height;
        const double rx = (0.1 + 0.25 * rng.uniform()) * width, ry = (0.1 + 0.25 * rng.uniform()) * height;
        double colour[3];
        for (double& c : colour) c = 0.1 + 0.8 * rng.uniform();
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
                const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
                const bool inside = disc ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
                if (!inside) continue;
                for (int c = 0; c < 3; ++c) img[c * plane + y * width + x] = colour[c];
            }
        }
    }
    for (double& v : img.values()) v = std::clamp(v, 0.05, 0.95);
    return img;
}

std::vector<degrade::RestorationPair> synthetic_pairs(std::size_t count, std::size_t size,
                                                      const degrade::DegradationSpec& spec, std::uint64_t seed) {
    if (count == 0 || size == 0) throw std::invalid_argument("synthetic_pairs: count and size must be positive");
    Rng rng(seed);
    std::vector<degrade::RestorationPair> pairs;
    pairs.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const Tensor hq = synthetic_image(size, size, rng);
        degrade::DegradationSpec item = spec;
        item.seed = spec.seed + i;
        pairs.push_back(degrade::make_pair(hq, item));
    }
    return pairs;
}

PatchPair sample_patch(const degrade::RestorationPair& pair, std::size_t size, Rng& rng) {
    require_same_shape(pair.hq, pair.lq, "sample_patch");
    image::require_image(pair.hq, "sample_patch");
    const std::size_t h = image::height(pair.hq), w = image::width(pair.hq);
    if (size == 0 || size > h || size > w) {
        throw std::invalid_argument("sample_patch: patch " + std::to_string(size) + " does not fit image " +
                                    std::to_string(h) + "x" + std::to_string(w));
    }
    const auto top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(h - size)));
    const auto left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w - size)));
    return {image::crop(pair.hq, top, left, size, size), image::crop(pair.lq, top, left, size, size)};
}

Tensor dihedral(const Tensor& img, int k) {
    image::require_image(img, "dihedral");
    if (k < 0 || k >= kDihedralCount) throw std::invalid_argument("dihedral: index must be in [0, 8)");
    const std::size_t c = image::channels(img), h = image::height(img), w = image::width(img);
    if (k % 4 != 0 && h != w) throw std::invalid_argument("dihedral: rotations need a square image");
    const bool flip = k >= 4;
    const int turns = k % 4;
    Tensor out({c, h, w});
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* src = img.ptr() + ch * h * w;
        double* dst = out.ptr() + ch * h * w;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                // output (y, x) pulls from the source by undoing the quarter turns, then the flip
                std::size_t sy = y, sx = x;
                for (int t = 0; t < turns; ++t) {
                    const std::size_t ny = sx, nx = w - 1 - sy;
                    sy = ny;
                    sx = nx;
                }
                if (flip) sx = w - 1 - sx;
                dst[y * w + x] = src[sy * w + sx];
            }
        }
    }
    return out;
}

int dihedral_inverse(int k) {
    if (k < 0 || k >= kDihedralCount) throw std::invalid_argument("dihedral_inverse: index must be in [0, 8)");
    return k >= 4 ? k : (4 - k) % 4;
}

PatchPair augment(const PatchPair& patch, Rng& rng, int* chosen) {
    const int k = static_cast<int>(rng.uniform_int(0, kDihedralCount - 1));
    if (chosen) *chosen = k;
    return {dihedral(patch.hq, k), dihedral(patch.lq, k)};
}

}  // namespace cmir::data
