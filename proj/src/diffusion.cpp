// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmir/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cmir::diffusion {

namespace {

void check_timestep(int t, const NoiseSchedule& schedule, const char* op) {
    if (t < 1 || t > schedule.steps()) {
        throw std::out_of_range(std::string(op) + ": timestep " + std::to_string(t) + " outside [1, " +
                                std::to_string(schedule.steps()) + "]");
    }
}

// a * x + b * y
Tensor axpby(double a, const Tensor& x, double b, const Tensor& y) {
    require_same_shape(x, y, "diffusion");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x[i] + b * y[i];
    return out;
}

}  // namespace

NoiseSchedule NoiseSchedule::cosine(int steps) {
    if (steps < 1) throw std::invalid_argument("cosine schedule: need at least one timestep");
    const double s = kCosineOffset;
    auto f = [&](int t) {
        const double c = std::cos(((static_cast<double>(t) / steps + s) / (1.0 + s)) * std::numbers::pi / 2.0);
        return c * c;
    };
    NoiseSchedule sched;
    sched.m_beta.assign(steps + 1, 0.0);
    sched.m_alpha_bar.assign(steps + 1, 1.0);
    const double f0 = f(0);
    for (int t = 1; t <= steps; ++t) {
        const double beta = 1.0 - (f(t) / f0) / (f(t - 1) / f0);
        sched.m_beta[t] = std::min(beta, kMaxBeta);
    }
    for (int t = 1; t <= steps; ++t) sched.m_alpha_bar[t] = sched.m_alpha_bar[t - 1] * (1.0 - sched.m_beta[t]);
    return sched;
}

double NoiseSchedule::beta(int t) const {
    if (t < 1 || t > steps()) throw std::out_of_range("schedule: beta index " + std::to_string(t) + " out of range");
    return m_beta[t];
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t < 0 || t > steps()) {
        throw std::out_of_range("schedule: alpha_bar index " + std::to_string(t) + " out of range");
    }
    return m_alpha_bar[t];
}

std::string NoiseSchedule::descriptor() const { return "cosine:" + std::to_string(steps()); }

std::string to_string(PredictionTarget target) {
    switch (target) {
        case PredictionTarget::noise: return "noise";
        case PredictionTarget::image_start: return "image_start";
        case PredictionTarget::v_parameterization: return "v_parameterization";
    }
    throw std::invalid_argument("unknown prediction target");
}

PredictionTarget parse_prediction_target(const std::string& name) {
    if (name == "noise" || name == "eps") return PredictionTarget::noise;
    if (name == "image_start" || name == "x0") return PredictionTarget::image_start;
    if (name == "v" || name == "v_parameterization") return PredictionTarget::v_parameterization;
    throw std::invalid_argument("unknown prediction target '" + name + "'");
}

std::string to_string(SamplerMode mode) {
    return mode == SamplerMode::ancestral ? "ancestral" : "deterministic";
}

SamplerMode parse_sampler_mode(const std::string& name) {
    if (name == "ancestral") return SamplerMode::ancestral;
    if (name == "deterministic") return SamplerMode::deterministic;
    throw std::invalid_argument("unknown sampler mode '" + name + "'");
}

DiffusionSample make_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
    return {x0, t, eps, q_sample(x0, t, eps, schedule), velocity(x0, eps, t, schedule)};
}

Tensor q_step(const Tensor& x_prev, int t, const NoiseSchedule& schedule, Rng& rng) {
    check_timestep(t, schedule, "q_step");
    const double beta = schedule.beta(t);
    const double keep = std::sqrt(1.0 - beta), noise = std::sqrt(beta);
    Tensor out(x_prev.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep * x_prev[i] + noise * rng.normal();
    return out;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
    check_timestep(t, schedule, "q_sample");
    const double ab = schedule.alpha_bar(t);
    return axpby(std::sqrt(ab), x0, std::sqrt(1.0 - ab), eps);
}

Tensor velocity(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& schedule) {
    check_timestep(t, schedule, "velocity");
    const double ab = schedule.alpha_bar(t);
    return axpby(std::sqrt(ab), eps, -std::sqrt(1.0 - ab), x0);
}

Tensor training_target(PredictionTarget target, const Tensor& x0, const Tensor& eps, int t,
                       const NoiseSchedule& schedule) {
    switch (target) {
        case PredictionTarget::noise: return eps;
        case PredictionTarget::image_start: return x0;
        case PredictionTarget::v_parameterization: return velocity(x0, eps, t, schedule);
    }
    throw std::invalid_argument("unknown prediction target");
}

Estimate convert_prediction(const Tensor& pred, PredictionTarget target, const Tensor& x_t, int t,
                            const NoiseSchedule& schedule, bool clamp) {
    check_timestep(t, schedule, "convert_prediction");
    const double ab = schedule.alpha_bar(t);
    const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
    Estimate est;
    switch (target) {
        case PredictionTarget::noise:
            est.eps = pred;
            est.x0 = axpby(1.0 / sa, x_t, -sn / sa, pred);
            break;
        case PredictionTarget::image_start:
            est.x0 = pred;
            est.eps = axpby(1.0 / sn, x_t, -sa / sn, pred);
            break;
        case PredictionTarget::v_parameterization:
            est.x0 = axpby(sa, x_t, -sn, pred);
            est.eps = axpby(sa, pred, sn, x_t);
            break;
        default: throw std::invalid_argument("unknown prediction target");
    }
    if (clamp) {
        bool clipped = false;
        for (double& v : est.x0.values()) {
            const double c = std::clamp(v, -1.0, 1.0);
            clipped |= (c != v);
            v = c;
        }
        if (clipped) est.eps = axpby(1.0 / sn, x_t, -sa / sn, est.x0);
    }
    return est;
}

double posterior_variance(int t, int prev_t, const NoiseSchedule& schedule) {
    const double ab_t = schedule.alpha_bar(t), ab_s = schedule.alpha_bar(prev_t);
    return (1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s);
}

Tensor posterior_step(const Tensor& x_t, int t, const Estimate& estimate, const NoiseSchedule& schedule, Rng& rng,
                      SamplerMode mode, int prev_t) {
    check_timestep(t, schedule, "posterior_step");
    if (prev_t < 0) prev_t = t - 1;
    if (prev_t >= t) throw std::invalid_argument("posterior_step: previous timestep must precede t");
    const double ab_t = schedule.alpha_bar(t), ab_s = schedule.alpha_bar(prev_t);

    if (mode == SamplerMode::deterministic) {
        return axpby(std::sqrt(ab_s), estimate.x0, std::sqrt(1.0 - ab_s), estimate.eps);
    }
    const double alpha_ts = ab_t / ab_s;
    const double coef_x0 = std::sqrt(ab_s) * (1.0 - alpha_ts) / (1.0 - ab_t);
    const double coef_xt = std::sqrt(alpha_ts) * (1.0 - ab_s) / (1.0 - ab_t);
    Tensor out = axpby(coef_x0, estimate.x0, coef_xt, x_t);
    const double var = posterior_variance(t, prev_t, schedule);
    if (var > 0.0) {
        const double sd = std::sqrt(var);
        for (double& v : out.values()) v += sd * rng.normal();
    }
    return out;
}

std::vector<int> timestep_sequence(int total_steps, int n_steps) {
    if (n_steps < 1 || n_steps > total_steps) {
        throw std::invalid_argument("timestep_sequence: step count " + std::to_string(n_steps) + " outside [1, " +
                                    std::to_string(total_steps) + "]");
    }
    std::vector<int> seq(n_steps);
    if (n_steps == 1) {
        seq[0] = total_steps;
        return seq;
    }
    const double stride = static_cast<double>(total_steps - 1) / (n_steps - 1);
    for (int i = 0; i < n_steps; ++i) seq[i] = total_steps - static_cast<int>(std::lround(i * stride));
    return seq;
}

Tensor sample_loop(const Denoiser& model, const Tensor& cond, const NoiseSchedule& schedule, Rng& rng,
                   const SampleOptions& options) {
    if (options.steps > kDefaultStepBudget && !options.allow_over_budget) {
        throw BudgetError("sample_loop: " + std::to_string(options.steps) + " steps exceed the budget of " +
                          std::to_string(kDefaultStepBudget) + " (pass an explicit override)");
    }
    const std::vector<int> seq = timestep_sequence(schedule.steps(), options.steps);

    Tensor x(cond.shape());
    rng.fill_normal(x.values());
    Tensor x0_hat;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const int t = seq[i];
        const int prev = i + 1 < seq.size() ? seq[i + 1] : 0;
        const Tensor pred = model(x, t, cond);
        const Estimate est = convert_prediction(pred, options.target, x, t, schedule, true);
        x = posterior_step(x, t, est, schedule, rng, options.mode, prev);
        x0_hat = est.x0;
        if (options.on_step) options.on_step(prev, x);
    }
    for (double& v : x0_hat.values()) v = std::clamp(0.5 * (v + 1.0), 0.0, 1.0);
    return x0_hat;
}

}  // namespace cmir::diffusion
