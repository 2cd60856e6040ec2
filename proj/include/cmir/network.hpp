// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "cmir/autograd.hpp"
#include "cmir/mamba.hpp"
#include "cmir/rng.hpp"

namespace cmir::net {

inline constexpr std::size_t kStages = 4;
inline constexpr std::size_t kSpatialMultiple = 16;

struct NetConfig {
    std::size_t base_channels = 32;
    std::array<std::size_t, kStages> stage_depths{2, 2, 2, 2};
    std::size_t state_size = 16;
    std::size_t time_dim = 128;
    std::size_t input_channels = 3;

    /// Throws std::invalid_argument on zero sizes or an odd time_dim.
    void validate() const;
    /// Width of pyramid level i: C for i = 0, i * C for i = 1..4.
    std::size_t level_width(std::size_t level) const;
};

/// GroupNorm group count: 8, or fewer when the channel count is not a
/// multiple of 8 (largest divisor not above 8).
int group_count(std::size_t channels);

/// Throws unless height and width are positive multiples of 16.
void require_divisible(std::size_t height, std::size_t width);

// ---- weights ---------------------------------------------------------------------------

struct TimeEncoderWeights {
    nn::Var fc1_w, fc1_b, fc2_w, fc2_b;
};

/// Timestep-conditioned scale/shift block with residual projection.
struct TsfiWeights {
    nn::Var time_w, time_b;  ///< (2C, d_t), (2C): [gamma - 1 | beta]
    nn::Var proj_w, proj_b;  ///< 3x3 conv C -> C
    nn::Var norm_gamma, norm_beta;
    nn::Var out_w, out_b;  ///< 1x1 conv C -> C

    std::size_t channels() const { return out_w.dim(0); }
};

struct MambaLayerWeights {
    nn::Var norm_gamma, norm_beta;
    ssm::MambaBlockWeights block;
};

/// VSS (encoder side) and MSVSS (decoder side) share this structure.
struct VssWeights {
    TsfiWeights tsfi1, tsfi2;
    MambaLayerWeights mamba;
};

/// Encoder and ControlNet branches have identical layout.
struct BranchWeights {
    nn::Var stem_w, stem_b;  ///< 7x7 conv in -> C
    std::array<std::vector<VssWeights>, kStages> stages;
    std::array<nn::Var, kStages> down_w, down_b;  ///< stride-2 3x3 conv
};

struct DecoderWeights {
    nn::Var bottom_w, bottom_b;                   ///< 1x1 conv 2 * w_4 -> w_4
    std::array<nn::Var, kStages> up_w, up_b;      ///< 3x3 conv w_i -> w_{i-1} after nearest 2x
    std::array<nn::Var, kStages> fuse_w, fuse_b;  ///< 1x1 conv 3 * w_{i-1} -> w_{i-1}
    std::array<std::vector<VssWeights>, kStages> stages;
    nn::Var head_w, head_b;  ///< 1x1 conv C -> input_channels, zero init
};

/// {f_0, f_1, f_2, f_3, f_4}; f_i is (N, w_i, H / 2^i, W / 2^i).
struct FeaturePyramid {
    std::array<nn::Var, kStages + 1> levels;
};

// ---- operations ------------------------------------------------------------------------

/// Sinusoidal features for one timestep: [cos(t w_k) | sin(t w_k)] with
/// w_k = 10000^(-k / (dim/2)).
std::vector<double> sinusoidal_embedding(int t, std::size_t dim);

/// (N, d_t) time features: sinusoidal embedding followed by Linear-SiLU-Linear.
nn::Var time_encode(const std::vector<int>& timesteps, const TimeEncoderWeights& w);

/// m + Conv1x1(SiLU(GroupNorm(Conv3x3(gamma_t * m + beta_t)))), gamma_t = 1 + scale.
nn::Var tsfi_forward(const nn::Var& m, const nn::Var& f_t, const TsfiWeights& w);

/// Residual-free part of the Mamba layer: row-major tokens, LayerNorm,
/// the block applied forward and on the reversed sequence, summed.
nn::Var mamba_layer_branch(const nn::Var& f, const MambaLayerWeights& w);

/// f + mamba_layer_branch(f).
nn::Var mamba_layer_forward(const nn::Var& f, const MambaLayerWeights& w);

/// r = TSFI2(TSFI1(f)) + f;  f_next = f + mamba_layer_branch(r).
nn::Var msvss_forward(const nn::Var& f, const nn::Var& f_t, const VssWeights& w);

/// Stem conv, then per stage: VSS blocks at the incoming width and a
/// stride-2 downsample to the next width. Also used for the ControlNet.
FeaturePyramid encoder_forward(const nn::Var& image, const nn::Var& f_t, const BranchWeights& w);
FeaturePyramid controlnet_forward(const nn::Var& condition, const nn::Var& f_t, const BranchWeights& w);

/// Starts from f_4^d = Conv1x1(f_4^e ++ f_4^c). Stage i upsamples f_i^d to
/// w_{i-1} channels, concatenates the same-resolution f_{i-1}^e and
/// f_{i-1}^c, fuses back to w_{i-1} channels and runs the MSVSS blocks.
/// `decoder_levels`, when given, receives {f_0^d .. f_4^d}.
nn::Var decoder_forward(const FeaturePyramid& enc, const FeaturePyramid& ctrl, const nn::Var& f_t,
                        const DecoderWeights& w, FeaturePyramid* decoder_levels = nullptr);

/// Full denoiser: all parameters plus the forward pass. Move-only, as
/// copies would alias the same weight storage.
class Model {
public:
    Model(const NetConfig& config, std::uint64_t seed);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;

    const NetConfig& config() const { return m_config; }
    nn::ParamStore& params() { return m_params; }
    const nn::ParamStore& params() const { return m_params; }

    const TimeEncoderWeights& time_encoder() const { return m_time; }
    const BranchWeights& encoder() const { return m_encoder; }
    const BranchWeights& controlnet() const { return m_control; }
    const DecoderWeights& decoder() const { return m_decoder; }

    /// z_t, c_f: (N, 3, H, W); one timestep per batch item.
    nn::Var forward(const nn::Var& z_t, const std::vector<int>& timesteps, const nn::Var& c_f) const;

    /// Inference convenience without graph recording; every item uses t.
    Tensor predict(const Tensor& z_t, int t, const Tensor& c_f) const;

    /// Intermediate features of one forward pass, for inspection.
    struct Trace {
        nn::Var f_t;
        FeaturePyramid encoder, controlnet, decoder;
        nn::Var output;
    };
    Trace trace(const nn::Var& z_t, const std::vector<int>& timesteps, const nn::Var& c_f) const;

private:
    NetConfig m_config;
    nn::ParamStore m_params;
    TimeEncoderWeights m_time;
    BranchWeights m_encoder, m_control;
    DecoderWeights m_decoder;
};

// ---- cost accounting -------------------------------------------------------------------

struct LayerMacs {
    std::string name;
    std::uint64_t macs = 0;
};

struct MacReport {
    std::vector<LayerMacs> layers;
    std::uint64_t total = 0;
};

/// Multiply-accumulates of one forward pass for a single image. Counts
/// convolutions, linear maps, the depthwise causal conv and the scan
/// recurrences (three per state element and token, plus the D skip).
/// Normalization and activations are not counted.
MacReport count_macs(const NetConfig& config, std::size_t height, std::size_t width);

std::uint64_t conv_macs(std::size_t out_h, std::size_t out_w, std::size_t kernel, std::size_t in_c, std::size_t out_c);

}  // namespace cmir::net
