// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace cmir::ssm {

/// Continuous single-input single-output SSM with diagonal state matrix:
///   h'(t) = A h(t) + B x(t),  y(t) = C h(t) + D x(t).
struct SSMParams {
    std::vector<double> a;  ///< diagonal of A, N entries
    std::vector<double> b;  ///< N x 1
    std::vector<double> c;  ///< 1 x N
    double d = 0.0;
    double delta = 1.0;  ///< step size, must be > 0

    std::size_t state_size() const { return a.size(); }
    /// True when every diagonal entry has non-positive real part. Reported, not enforced.
    bool is_stable() const;
};

/// Zero-order-hold discretization of SSMParams.
struct DiscreteSSM {
    std::vector<double> a_bar;  ///< diagonal of exp(delta A)
    std::vector<double> b_bar;
    std::vector<double> c;
    double d = 0.0;

    std::size_t state_size() const { return a_bar.size(); }
};

/// Below this |delta * a| the discretized input uses its series expansion.
inline constexpr double kZohSeriesThreshold = 1e-8;

/// (exp(delta a) - 1) / a, i.e. the per-entry ZOH input gain, computed
/// stably; tends to delta as a -> 0.
double zoh_input_gain(double a, double delta);

/// Partial derivatives of zoh_input_gain with respect to a and delta.
struct ZohGainGrad {
    double d_a;
    double d_delta;
};
ZohGainGrad zoh_input_gain_grad(double a, double delta);
/// Same, reusing exp(delta a) and the gain when the caller already has them.
ZohGainGrad zoh_input_gain_grad(double a, double delta, double a_bar, double gain);

/// Throws std::invalid_argument if delta <= 0 or shapes disagree.
DiscreteSSM zoh_discretize(const SSMParams& params);

struct ScanResult {
    std::vector<double> y;
    std::vector<double> final_state;
};

/// h_k = a_bar h_{k-1} + b_bar x_k, y_k = C h_k + D x_k.
/// `h0` may be empty (zero initial state).
ScanResult ssm_scan_sequential(std::span<const double> x, const DiscreteSSM& d, std::span<const double> h0 = {});

/// (C b_bar, C a_bar b_bar, ..., C a_bar^{L-1} b_bar). Throws on length 0.
std::vector<double> ssm_kernel(const DiscreteSSM& d, std::size_t length);

/// Causal convolution of x with ssm_kernel plus the D feedthrough. Zero
/// initial state; time-invariant parameters only.
std::vector<double> ssm_scan_convolutional(std::span<const double> x, const DiscreteSSM& d);

// ---- selective (input-dependent) variant -----------------------------------------

/// Per-token parameters of a selective scan over L tokens of width E
/// with state size N. Layouts: delta (L, E), b and c (L, N), a (E, N),
/// d (E). Every channel has its own diagonal A row; B_k and C_k are
/// shared across channels.
struct SelectiveParams {
    std::size_t length = 0;
    std::size_t channels = 0;
    std::size_t state_size = 0;
    std::vector<double> delta;
    std::vector<double> a;
    std::vector<double> b;
    std::vector<double> c;
    std::vector<double> d;

    void validate() const;
};

/// Learned maps producing SelectiveParams from tokens:
///   delta_k = softplus(W_delta x_k + b_delta),  B_k = W_B x_k,  C_k = W_C x_k.
/// Weight layouts are row-major (out, in).
struct SelectiveMaps {
    std::size_t channels = 0;
    std::size_t state_size = 0;
    std::vector<double> w_delta;  ///< (E, E), full rank
    std::vector<double> b_delta;  ///< (E)
    std::vector<double> w_b;      ///< (N, E)
    std::vector<double> w_c;      ///< (N, E)
    std::vector<double> a;        ///< (E, N)
    std::vector<double> d;        ///< (E)

    /// A initialized to -(n+1) per channel, D to 1, all maps zero.
    static SelectiveMaps s4d_real(std::size_t channels, std::size_t state_size);
};

/// x is (L, E) row-major.
SelectiveParams selective_params(std::span<const double> x, std::size_t length, const SelectiveMaps& maps);

enum class ScanMode { sequential, parallel };

/// Scan with per-token ZOH: h_k = exp(delta_k A) h_{k-1} + gain_k B_k x_k,
/// y_k = C_k h_k + D x_k. x is (L, E); returns y as (L, E). The parallel
/// mode runs a blocked associative scan over (a_bar, b_bar x) pairs.
std::vector<double> selective_scan(std::span<const double> x, const SelectiveParams& params,
                                   ScanMode mode = ScanMode::sequential, std::size_t block_size = 64);

/// Element of the linear-recurrence monoid: h -> a h + b.
struct AffinePair {
    double a = 1.0;
    double b = 0.0;
};

/// (later o earlier): apply `earlier` first, then `later`.
inline AffinePair combine(const AffinePair& later, const AffinePair& earlier) {
    return {later.a * earlier.a, later.a * earlier.b + later.b};
}

/// Inclusive scan of affine pairs using independent blocks plus a carry
/// pass. Result[k].b is h_k for zero initial state.
std::vector<AffinePair> blocked_affine_scan(std::span<const AffinePair> pairs, std::size_t block_size);

}  // namespace cmir::ssm
