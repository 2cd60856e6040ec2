// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>

#include "cmir/rng.hpp"
#include "cmir/tensor.hpp"

namespace cmir::init {

/// Normal weights with variance gain^2 / fan_in.
inline Tensor variance_scaling(Shape shape, std::size_t fan_in, Rng& rng, double gain = 1.0) {
    Tensor t(std::move(shape));
    const double stddev = gain / std::sqrt(static_cast<double>(fan_in));
    for (double& v : t.values()) v = stddev * rng.normal();
    return t;
}

}  // namespace cmir::init
