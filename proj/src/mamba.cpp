// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmir/mamba.hpp"

#include <cmath>
#include <stdexcept>

#include "cmir/init.hpp"
#include "cmir/ssm.hpp"

namespace cmir::ssm {

using nn::Var;

namespace {

constexpr double kGainCancelThreshold = 1e-2;

}  // namespace

Var selective_scan_op(const Var& u, const Var& delta, const Var& a, const Var& b, const Var& c, const Var& d) {
    if (u.value().rank() != 3) throw std::invalid_argument("selective_scan_op: u must be (Nb, L, E)");
    const std::size_t nb = u.dim(0), len = u.dim(1), e_n = u.dim(2);
    if (a.value().rank() != 2 || a.dim(0) != e_n) throw std::invalid_argument("selective_scan_op: A must be (E, N)");
    const std::size_t s_n = a.dim(1);
    if (delta.shape() != u.shape()) throw std::invalid_argument("selective_scan_op: delta must match u");
    const Shape bc_shape{nb, len, s_n};
    if (b.shape() != bc_shape || c.shape() != bc_shape) {
        throw std::invalid_argument("selective_scan_op: B and C must be " + shape_to_string(bc_shape));
    }
    if (d.size() != e_n) throw std::invalid_argument("selective_scan_op: D must have E entries");

    Tensor y(u.shape());
    // state history, exp(delta A) and input gain per (Nb, L, E, N), reused by the reverse pass
    std::vector<double> hist(nb * len * e_n * s_n), abar_c(hist.size()), gain_c(hist.size());
    const double* pu = u.value().ptr();
    const double* pdt = delta.value().ptr();
    const double* pa = a.value().ptr();
    const double* pb = b.value().ptr();
    const double* pc = c.value().ptr();
    const double* pd = d.value().ptr();
    for (std::size_t bi = 0; bi < nb; ++bi) {
        for (std::size_t k = 0; k < len; ++k) {
            const std::size_t tok = bi * len + k;
            double* hk = hist.data() + tok * e_n * s_n;
            const double* hprev = k ? hk - e_n * s_n : nullptr;
            for (std::size_t e = 0; e < e_n; ++e) {
                const double dt = pdt[tok * e_n + e];
                const double x = pu[tok * e_n + e];
                double acc = pd[e] * x;
                for (std::size_t n = 0; n < s_n; ++n) {
                    const double av = pa[e * s_n + n];
                    const double prev = hprev ? hprev[e * s_n + n] : 0.0;
                    const std::size_t idx = (tok * e_n + e) * s_n + n;
                    const double abar = std::exp(dt * av);
                    // abar - 1 costs at most about eps / |dt a| relative accuracy here
                    const double gain = std::abs(dt * av) > kGainCancelThreshold ? (abar - 1.0) / av
                                                                                  : zoh_input_gain(av, dt);
                    abar_c[idx] = abar;
                    gain_c[idx] = gain;
                    const double h = abar * prev + gain * pb[tok * s_n + n] * x;
                    hk[e * s_n + n] = h;
                    acc += pc[tok * s_n + n] * h;
                }
                y[tok * e_n + e] = acc;
            }
        }
    }

    return nn::make_op(std::move(y), {u, delta, a, b, c, d},
                   [u, delta, a, b, c, d, hist = std::move(hist), abar_c = std::move(abar_c), gain_c = std::move(gain_c), nb,
                    len, e_n, s_n](const Tensor& g) {
                       const double* pu = u.value().ptr();
                       const double* pdt = delta.value().ptr();
                       const double* pa = a.value().ptr();
                       const double* pb = b.value().ptr();
                       const double* pc = c.value().ptr();
                       const double* pd = d.value().ptr();
                       Tensor du(u.shape()), ddt(u.shape()), da(a.shape()), db(b.shape()), dc(c.shape()),
                           dd(d.shape());
                       std::vector<double> dh(e_n * s_n);
                       for (std::size_t bi = 0; bi < nb; ++bi) {
                           std::fill(dh.begin(), dh.end(), 0.0);
                           for (std::size_t k = len; k-- > 0;) {
                               const std::size_t tok = bi * len + k;
                               const double* hk = hist.data() + tok * e_n * s_n;
                               const double* hprev = k ? hk - e_n * s_n : nullptr;
                               for (std::size_t e = 0; e < e_n; ++e) {
                                   const double gy = g[tok * e_n + e];
                                   const double x = pu[tok * e_n + e];
                                   const double dt = pdt[tok * e_n + e];
                                   du[tok * e_n + e] += gy * pd[e];
                                   dd[e] += gy * x;
                                   double dx = 0.0, ddelta = 0.0;
                                   for (std::size_t n = 0; n < s_n; ++n) {
                                       const std::size_t en = e * s_n + n;
                                       dc[tok * s_n + n] += gy * hk[en];
                                       const double gh = dh[en] + gy * pc[tok * s_n + n];
                                       const double av = pa[en];
                                       const std::size_t idx = tok * e_n * s_n + en;
                                       const double abar = abar_c[idx];
                                       const double gain = gain_c[idx];
                                       const ZohGainGrad gg = zoh_input_gain_grad(av, dt, abar, gain);
                                       const double bn = pb[tok * s_n + n];
                                       const double prev = hprev ? hprev[en] : 0.0;
                                       const double d_abar = gh * prev;
                                       const double d_gain = gh * bn * x;
                                       ddelta += d_abar * av * abar + d_gain * gg.d_delta;
                                       da[en] += d_abar * dt * abar + d_gain * gg.d_a;
                                       db[tok * s_n + n] += gh * gain * x;
                                       dx += gh * gain * bn;
                                       dh[en] = gh * abar;
                                   }
                                   du[tok * e_n + e] += dx;
                                   ddt[tok * e_n + e] += ddelta;
                               }
                           }
                       }
                       const std::pair<const Var*, const Tensor*> outs[] = {{&u, &du}, {&delta, &ddt}, {&a, &da},
                                                                            {&b, &db}, {&c, &dc}, {&d, &dd}};
                       for (const auto& [v, grad] : outs) {
                           if (!v->requires_grad()) continue;
                           Tensor& acc = v->grad_buffer();
                           for (std::size_t i = 0; i < grad->size(); ++i) acc[i] += (*grad)[i];
                       }
                   });
}

MambaBlockWeights MambaBlockWeights::create(nn::ParamStore& store, const std::string& prefix, std::size_t d_model,
                                            std::size_t state_size, Rng& rng) {
    const std::size_t inner = kMambaExpand * d_model;
    MambaBlockWeights w;
    w.in_proj = store.add(prefix + ".in_proj", init::variance_scaling({2 * inner, d_model}, d_model, rng));
    w.conv_w = store.add(prefix + ".conv.weight", init::variance_scaling({inner, kMambaConvWidth}, kMambaConvWidth, rng));
    w.conv_b = store.add(prefix + ".conv.bias", Tensor({inner}));
    w.delta_w = store.add(prefix + ".delta.weight", init::variance_scaling({inner, inner}, inner, rng, 0.1));
    // softplus(bias) log-uniform in [1e-3, 1e-1]
    Tensor delta_b({inner});
    for (std::size_t i = 0; i < inner; ++i) {
        const double dt = std::exp(std::log(1e-3) + rng.uniform() * (std::log(1e-1) - std::log(1e-3)));
        delta_b[i] = std::log(std::expm1(dt));
    }
    w.delta_b = store.add(prefix + ".delta.bias", std::move(delta_b));
    w.b_proj = store.add(prefix + ".b_proj", init::variance_scaling({state_size, inner}, inner, rng));
    w.c_proj = store.add(prefix + ".c_proj", init::variance_scaling({state_size, inner}, inner, rng));
    Tensor a({inner, state_size});
    for (std::size_t e = 0; e < inner; ++e) {
        for (std::size_t n = 0; n < state_size; ++n) a[e * state_size + n] = -static_cast<double>(n + 1);
    }
    w.a = store.add(prefix + ".a", std::move(a));
    w.d_skip = store.add(prefix + ".d", Tensor({inner}, 1.0));
    w.out_proj = store.add(prefix + ".out_proj", init::variance_scaling({d_model, inner}, inner, rng));
    return w;
}

Var mamba_block(const Var& x, const MambaBlockWeights& w) {
    if (x.value().rank() != 3 || x.dim(2) != w.d_model()) {
        throw std::invalid_argument("mamba_block: expected tokens (Nb, L, " + std::to_string(w.d_model()) + "), got " +
                                    shape_to_string(x.shape()));
    }
    const std::size_t inner = w.inner();
    const Var xz = nn::linear(x, w.in_proj, Var());
    const Var xs = nn::silu(nn::causal_depthwise_conv1d(nn::slice_last(xz, 0, inner), w.conv_w, w.conv_b));
    const Var gate = nn::silu(nn::slice_last(xz, inner, inner));
    const Var delta = nn::softplus(nn::linear(xs, w.delta_w, w.delta_b));
    const Var bm = nn::linear(xs, w.b_proj, Var());
    const Var cm = nn::linear(xs, w.c_proj, Var());
    const Var y = selective_scan_op(xs, delta, w.a, bm, cm, w.d_skip);
    return nn::linear(nn::mul(y, gate), w.out_proj, Var());
}

}  // namespace cmir::ssm
