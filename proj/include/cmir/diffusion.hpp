// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmir/rng.hpp"
#include "cmir/tensor.hpp"

namespace cmir::diffusion {

inline constexpr double kCosineOffset = 0.008;
inline constexpr double kMaxBeta = 0.999;
inline constexpr int kDefaultStepBudget = 100;

/// beta_t for t = 1..T and alpha_bar_t for t = 0..T with alpha_bar_0 = 1.
/// alpha_bar is the running product of (1 - beta) after clipping.
class NoiseSchedule {
public:
    /// Cosine schedule: alpha_bar(t) = f(t)/f(0),
    /// f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2), s = 0.008, beta <= 0.999.
    static NoiseSchedule cosine(int steps);

    int steps() const { return static_cast<int>(m_beta.size()) - 1; }
    double beta(int t) const;
    double alpha_bar(int t) const;
    std::span<const double> betas() const { return std::span<const double>(m_beta).subspan(1); }
    std::span<const double> alpha_bars() const { return m_alpha_bar; }

    /// Short identifier used in checkpoints, e.g. "cosine:1000".
    std::string descriptor() const;

private:
    std::vector<double> m_beta;       // index 0 unused
    std::vector<double> m_alpha_bar;  // index 0 == 1
};

enum class PredictionTarget { noise, image_start, v_parameterization };

std::string to_string(PredictionTarget target);
/// Accepts "noise", "image_start", "v" / "v_parameterization".
PredictionTarget parse_prediction_target(const std::string& name);

/// (x0, t, eps) together with the noised image and velocity target.
struct DiffusionSample {
    Tensor x0;
    int t = 0;
    Tensor eps;
    Tensor xt;
    Tensor v;
};

DiffusionSample make_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule);

/// One forward transition: sqrt(1 - beta_t) x_prev + sqrt(beta_t) z.
Tensor q_step(const Tensor& x_prev, int t, const NoiseSchedule& schedule, Rng& rng);

/// Closed-form marginal: sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule);

/// sqrt(alpha_bar_t) eps - sqrt(1 - alpha_bar_t) x0.
Tensor velocity(const Tensor& x0, const Tensor& eps, int t, const NoiseSchedule& schedule);

/// What the network should output for the given target.
Tensor training_target(PredictionTarget target, const Tensor& x0, const Tensor& eps, int t,
                       const NoiseSchedule& schedule);

struct Estimate {
    Tensor eps;
    Tensor x0;
};

/// Recovers (eps_hat, x0_hat) from a raw network output. With `clamp`,
/// x0_hat is clipped to [-1, 1] and eps_hat re-derived from the clipped
/// value so the pair stays consistent with x_t.
Estimate convert_prediction(const Tensor& pred, PredictionTarget target, const Tensor& x_t, int t,
                            const NoiseSchedule& schedule, bool clamp = true);

enum class SamplerMode { ancestral, deterministic };

std::string to_string(SamplerMode mode);
SamplerMode parse_sampler_mode(const std::string& name);

/// Moves x_t to x_prev (default t - 1). Ancestral mode samples the Gaussian
/// posterior q(x_prev | x_t, x0_hat); deterministic mode is the eta = 0
/// implicit update sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev) eps_hat.
Tensor posterior_step(const Tensor& x_t, int t, const Estimate& estimate, const NoiseSchedule& schedule, Rng& rng,
                      SamplerMode mode, int prev_t = -1);

/// Posterior variance for the t -> prev_t transition (zero when prev_t == 0).
double posterior_variance(int t, int prev_t, const NoiseSchedule& schedule);

/// Descending timesteps with uniform stride from T to 1, both included.
std::vector<int> timestep_sequence(int total_steps, int n_steps);

class BudgetError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// model(x_t, t, cond) -> raw prediction for the configured target.
using Denoiser = std::function<Tensor(const Tensor& x_t, int t, const Tensor& cond)>;

struct SampleOptions {
    int steps = kDefaultStepBudget;
    SamplerMode mode = SamplerMode::deterministic;
    PredictionTarget target = PredictionTarget::noise;
    /// Permit more than kDefaultStepBudget steps.
    bool allow_over_budget = false;
    /// Called after every update with the new timestep and state.
    std::function<void(int t, const Tensor& state)> on_step;
};

/// Reverse-time sampling from x_T ~ N(0, I) shaped like `cond`. Returns the
/// final x0 estimate mapped from [-1, 1] to [0, 1].
Tensor sample_loop(const Denoiser& model, const Tensor& cond, const NoiseSchedule& schedule, Rng& rng,
                   const SampleOptions& options = {});

}  // namespace cmir::diffusion
