// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>

#include "cmir/autograd.hpp"
#include "cmir/rng.hpp"

namespace cmir::ssm {

inline constexpr std::size_t kMambaExpand = 2;
inline constexpr std::size_t kMambaConvWidth = 4;

/// Differentiable selective scan.
///   u, delta: (Nb, L, E)   a: (E, N)   b, c: (Nb, L, N)   d: (E)
/// Returns y: (Nb, L, E). Per-token ZOH, sequential recurrence.
nn::Var selective_scan_op(const nn::Var& u, const nn::Var& delta, const nn::Var& a, const nn::Var& b,
                          const nn::Var& c, const nn::Var& d);

/// Gated selective-SSM block weights. E = kMambaExpand * d_model.
struct MambaBlockWeights {
    nn::Var in_proj;   ///< (2E, d_model), no bias
    nn::Var conv_w;    ///< (E, kMambaConvWidth)
    nn::Var conv_b;    ///< (E)
    nn::Var delta_w;   ///< (E, E)
    nn::Var delta_b;   ///< (E)
    nn::Var b_proj;    ///< (N, E)
    nn::Var c_proj;    ///< (N, E)
    nn::Var a;         ///< (E, N), S4D-real init -(n+1)
    nn::Var d_skip;    ///< (E)
    nn::Var out_proj;  ///< (d_model, E), no bias

    std::size_t d_model() const { return out_proj.dim(0); }
    std::size_t inner() const { return out_proj.dim(1); }
    std::size_t state_size() const { return a.dim(1); }

    static MambaBlockWeights create(nn::ParamStore& store, const std::string& prefix, std::size_t d_model,
                                    std::size_t state_size, Rng& rng);
};

/// x: (Nb, L, d_model) -> (Nb, L, d_model).
/// in_proj -> [x | z]; x -> causal depthwise conv -> SiLU -> selective scan;
/// y * SiLU(z) -> out_proj.
nn::Var mamba_block(const nn::Var& x, const MambaBlockWeights& w);

}  // namespace cmir::ssm
