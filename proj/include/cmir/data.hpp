// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cmir/degradation.hpp"
#include "cmir/rng.hpp"
#include "cmir/tensor.hpp"

namespace cmir::data {

/// Lazily loaded HQ/LQ image folders matched by file name.
class PairedFolder {
public:
    PairedFolder(std::filesystem::path hq_dir, std::filesystem::path lq_dir, std::vector<std::string> names);

    std::size_t size() const { return m_names.size(); }
    const std::vector<std::string>& names() const { return m_names; }
    /// Reads (and caches) pair i.
    degrade::RestorationPair load(std::size_t i) const;

private:
    std::filesystem::path m_hq_dir, m_lq_dir;
    std::vector<std::string> m_names;
    mutable std::map<std::size_t, degrade::RestorationPair> m_cache;
};

/// Indexes the PNG files of both folders, sorted by name. Throws
/// std::runtime_error listing every file without a counterpart.
PairedFolder load_paired_folder(const std::filesystem::path& hq_dir, const std::filesystem::path& lq_dir);

/// Sorted names of the .png files in a directory.
std::vector<std::string> list_png(const std::filesystem::path& dir);

/// Either an in-memory list of pairs or a paired folder.
class Dataset {
public:
    static Dataset from_pairs(std::vector<degrade::RestorationPair> pairs);
    static Dataset from_folder(PairedFolder folder);

    std::size_t size() const;
    degrade::RestorationPair get(std::size_t i) const;

private:
    std::shared_ptr<const std::vector<degrade::RestorationPair>> m_pairs;
    std::shared_ptr<const PairedFolder> m_folder;
};

/// Procedural clean image in [0.05, 0.95]: smooth colour gradient, a few
/// flat shapes and a sinusoidal texture.
Tensor synthetic_image(std::size_t height, std::size_t width, Rng& rng);

/// `count` synthetic images degraded by `spec`; the degradation of image i
/// is seeded with spec.seed + i.
std::vector<degrade::RestorationPair> synthetic_pairs(std::size_t count, std::size_t size,
                                                      const degrade::DegradationSpec& spec, std::uint64_t seed);

struct PatchPair {
    Tensor hq;
    Tensor lq;
};

/// Random aligned size x size window from both images.
PatchPair sample_patch(const degrade::RestorationPair& pair, std::size_t size, Rng& rng);

inline constexpr int kDihedralCount = 8;

/// Element k of the dihedral group on square images: k % 4 quarter turns
/// counter-clockwise, preceded by a horizontal flip when k >= 4.
Tensor dihedral(const Tensor& img, int k);
/// Index of the inverse transform.
int dihedral_inverse(int k);

/// Applies one uniformly drawn dihedral transform to both patches.
/// `chosen` receives the drawn index.
PatchPair augment(const PatchPair& patch, Rng& rng, int* chosen = nullptr);

}  // namespace cmir::data
