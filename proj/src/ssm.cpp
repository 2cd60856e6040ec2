// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmir/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <thread>

namespace cmir::ssm {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

// Runs fn(i) for i in [0, count), spreading work over hardware threads.
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
    const std::size_t workers = std::min<std::size_t>(std::max(1u, std::thread::hardware_concurrency()), count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < count; i += workers) fn(i);
        });
    }
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

bool SSMParams::is_stable() const {
    return std::all_of(a.begin(), a.end(), [](double v) { return v <= 0.0; });
}

double zoh_input_gain(double a, double delta) {
    const double z = delta * a;
    if (std::abs(z) < kZohSeriesThreshold) return delta * (1.0 + 0.5 * z);
    return std::expm1(z) / a;
}

ZohGainGrad zoh_input_gain_grad(double a, double delta) {
    // gain = delta * phi(z), phi(z) = expm1(z)/z, z = delta * a
    const double z = delta * a;
    const double d_delta = std::exp(z);
    double phi_prime;
    if (std::abs(z) < 1e-3) {
        phi_prime = 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0;
    } else {
        phi_prime = (z * std::exp(z) - std::expm1(z)) / (z * z);
    }
    return {delta * delta * phi_prime, d_delta};
}

ZohGainGrad zoh_input_gain_grad(double a, double delta, double a_bar, double gain) {
    const double z = delta * a;
    double phi_prime;
    if (std::abs(z) < 1e-3) {
        phi_prime = 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0;
    } else {
        phi_prime = (z * a_bar - gain * a) / (z * z);
    }
    return {delta * delta * phi_prime, a_bar};
}

DiscreteSSM zoh_discretize(const SSMParams& params) {
    require(params.delta > 0.0, "zoh_discretize: step size must be positive, got " + std::to_string(params.delta));
    const std::size_t n = params.a.size();
    require(params.b.size() == n && params.c.size() == n,
            "zoh_discretize: A, B, C must share state size " + std::to_string(n));
    DiscreteSSM out;
    out.a_bar.resize(n);
    out.b_bar.resize(n);
    out.c = params.c;
    out.d = params.d;
    for (std::size_t i = 0; i < n; ++i) {
        out.a_bar[i] = std::exp(params.delta * params.a[i]);
        out.b_bar[i] = zoh_input_gain(params.a[i], params.delta) * params.b[i];
    }
    return out;
}

ScanResult ssm_scan_sequential(std::span<const double> x, const DiscreteSSM& d, std::span<const double> h0) {
    const std::size_t n = d.state_size();
    require(d.b_bar.size() == n && d.c.size() == n, "ssm_scan_sequential: inconsistent state size");
    require(h0.empty() || h0.size() == n, "ssm_scan_sequential: initial state has " + std::to_string(h0.size()) +
                                              " entries, expected " + std::to_string(n));
    std::vector<long double> h(n, 0.0L);
    if (!h0.empty()) std::copy(h0.begin(), h0.end(), h.begin());

    ScanResult out;
    out.y.resize(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) {
        long double yk = static_cast<long double>(d.d) * x[k];
        for (std::size_t i = 0; i < n; ++i) {
            h[i] = d.a_bar[i] * h[i] + static_cast<long double>(d.b_bar[i]) * x[k];
            yk += d.c[i] * h[i];
        }
        out.y[k] = static_cast<double>(yk);
    }
    out.final_state.assign(h.begin(), h.end());
    return out;
}

std::vector<double> ssm_kernel(const DiscreteSSM& d, std::size_t length) {
    require(length >= 1, "ssm_kernel: kernel length must be at least 1");
    const std::size_t n = d.state_size();
    std::vector<long double> power(d.b_bar.begin(), d.b_bar.end());  // a_bar^k b_bar
    std::vector<double> kernel(length);
    for (std::size_t k = 0; k < length; ++k) {
        long double v = 0.0L;
        for (std::size_t i = 0; i < n; ++i) v += d.c[i] * power[i];
        kernel[k] = static_cast<double>(v);
        for (std::size_t i = 0; i < n; ++i) power[i] *= d.a_bar[i];
    }
    return kernel;
}

std::vector<double> ssm_scan_convolutional(std::span<const double> x, const DiscreteSSM& d) {
    if (x.empty()) return {};
    const std::vector<double> kernel = ssm_kernel(d, x.size());
    std::vector<double> y(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) {
        long double acc = static_cast<long double>(d.d) * x[k];
        for (std::size_t j = 0; j <= k; ++j) acc += static_cast<long double>(kernel[j]) * x[k - j];
        y[k] = static_cast<double>(acc);
    }
    return y;
}

// ---- selective -------------------------------------------------------------------------

void SelectiveParams::validate() const {
    require(delta.size() == length * channels, "selective params: delta must be (L, E)");
    require(a.size() == channels * state_size, "selective params: A must be (E, N)");
    require(b.size() == length * state_size && c.size() == length * state_size,
            "selective params: B and C must be (L, N)");
    require(d.size() == channels, "selective params: D must be (E)");
    for (double v : delta) require(v > 0.0, "selective params: every step size must be positive");
}

SelectiveMaps SelectiveMaps::s4d_real(std::size_t channels, std::size_t state_size) {
    SelectiveMaps m;
    m.channels = channels;
    m.state_size = state_size;
    m.w_delta.assign(channels * channels, 0.0);
    m.b_delta.assign(channels, 0.0);
    m.w_b.assign(state_size * channels, 0.0);
    m.w_c.assign(state_size * channels, 0.0);
    m.a.resize(channels * state_size);
    for (std::size_t e = 0; e < channels; ++e) {
        for (std::size_t n = 0; n < state_size; ++n) m.a[e * state_size + n] = -static_cast<double>(n + 1);
    }
    m.d.assign(channels, 1.0);
    return m;
}

SelectiveParams selective_params(std::span<const double> x, std::size_t length, const SelectiveMaps& maps) {
    const std::size_t e_n = maps.channels, s_n = maps.state_size;
    require(x.size() == length * e_n, "selective_params: tokens must be (L, E)");
    SelectiveParams p;
    p.length = length;
    p.channels = e_n;
    p.state_size = s_n;
    p.a = maps.a;
    p.d = maps.d;
    p.delta.resize(length * e_n);
    p.b.resize(length * s_n);
    p.c.resize(length * s_n);
    for (std::size_t k = 0; k < length; ++k) {
        const double* xk = x.data() + k * e_n;
        for (std::size_t o = 0; o < e_n; ++o) {
            double acc = maps.b_delta[o];
            for (std::size_t i = 0; i < e_n; ++i) acc += maps.w_delta[o * e_n + i] * xk[i];
            p.delta[k * e_n + o] = softplus(acc);
        }
        for (std::size_t o = 0; o < s_n; ++o) {
            double ab = 0.0, ac = 0.0;
            for (std::size_t i = 0; i < e_n; ++i) {
                ab += maps.w_b[o * e_n + i] * xk[i];
                ac += maps.w_c[o * e_n + i] * xk[i];
            }
            p.b[k * s_n + o] = ab;
            p.c[k * s_n + o] = ac;
        }
    }
    return p;
}

std::vector<AffinePair> blocked_affine_scan(std::span<const AffinePair> pairs, std::size_t block_size) {
    require(block_size >= 1, "blocked_affine_scan: block size must be positive");
    const std::size_t len = pairs.size();
    std::vector<AffinePair> out(pairs.begin(), pairs.end());
    const std::size_t blocks = (len + block_size - 1) / block_size;

    // 1. independent inclusive scans inside each block
    parallel_for(blocks, [&](std::size_t blk) {
        const std::size_t lo = blk * block_size, hi = std::min(len, lo + block_size);
        for (std::size_t k = lo + 1; k < hi; ++k) out[k] = combine(out[k], out[k - 1]);
    });
    // 2. exclusive carries across block totals
    std::vector<AffinePair> carry(blocks);
    for (std::size_t blk = 1; blk < blocks; ++blk) {
        const std::size_t prev_end = std::min(len, blk * block_size) - 1;
        carry[blk] = combine(out[prev_end], carry[blk - 1]);
    }
    // 3. apply each block's incoming carry
    parallel_for(blocks, [&](std::size_t blk) {
        if (blk == 0) return;
        const std::size_t lo = blk * block_size, hi = std::min(len, lo + block_size);
        for (std::size_t k = lo; k < hi; ++k) out[k] = combine(out[k], carry[blk]);
    });
    return out;
}

std::vector<double> selective_scan(std::span<const double> x, const SelectiveParams& p, ScanMode mode,
                                   std::size_t block_size) {
    p.validate();
    const std::size_t len = p.length, e_n = p.channels, s_n = p.state_size;
    require(x.size() == len * e_n, "selective_scan: tokens must be (L, E)");
    std::vector<double> y(len * e_n);
    for (std::size_t k = 0; k < len; ++k) {
        for (std::size_t e = 0; e < e_n; ++e) y[k * e_n + e] = p.d[e] * x[k * e_n + e];
    }

    if (mode == ScanMode::sequential) {
        std::vector<double> h(e_n * s_n, 0.0);
        for (std::size_t k = 0; k < len; ++k) {
            for (std::size_t e = 0; e < e_n; ++e) {
                const double dt = p.delta[k * e_n + e];
                const double xk = x[k * e_n + e];
                double acc = 0.0;
                for (std::size_t n = 0; n < s_n; ++n) {
                    const double a = p.a[e * s_n + n];
                    double& hn = h[e * s_n + n];
                    hn = std::exp(dt * a) * hn + zoh_input_gain(a, dt) * p.b[k * s_n + n] * xk;
                    acc += p.c[k * s_n + n] * hn;
                }
                y[k * e_n + e] += acc;
            }
        }
        return y;
    }

    std::vector<AffinePair> pairs(len);
    for (std::size_t e = 0; e < e_n; ++e) {
        for (std::size_t n = 0; n < s_n; ++n) {
            const double a = p.a[e * s_n + n];
            for (std::size_t k = 0; k < len; ++k) {
                const double dt = p.delta[k * e_n + e];
                pairs[k] = {std::exp(dt * a), zoh_input_gain(a, dt) * p.b[k * s_n + n] * x[k * e_n + e]};
            }
            const std::vector<AffinePair> h = blocked_affine_scan(pairs, block_size);
            for (std::size_t k = 0; k < len; ++k) y[k * e_n + e] += p.c[k * s_n + n] * h[k].b;
        }
    }
    return y;
}

}  // namespace cmir::ssm
