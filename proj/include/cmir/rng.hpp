// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>

namespace cmir {

/// Seeded random stream whose complete state (engine plus the cached
/// normal deviate) can be saved and restored, so resumed runs continue
/// bit-identically.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : m_engine(seed) {}

    double normal() { return m_normal(m_engine); }
    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(m_engine); }
    /// Uniform integer in [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(m_engine);
    }
    std::uint64_t next_u64() { return m_engine(); }

    void fill_normal(std::span<double> out) {
        for (double& v : out) v = normal();
    }

    std::string state() const;
    void set_state(const std::string& state);

private:
    std::mt19937_64 m_engine;
    std::normal_distribution<double> m_normal;
};

}  // namespace cmir
