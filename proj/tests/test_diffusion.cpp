// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cmir/diffusion.hpp"
#include "test_support.hpp"

using namespace cmir;
using namespace cmir::diffusion;
using testutil::random_tensor;

namespace {

// Direct evaluation of the cosine closed form, without clipping.
double cosine_alpha_bar(int t, int steps) {
    auto f = [&](double tt) {
        const double c = std::cos(((tt / steps + 0.008) / 1.008) * std::numbers::pi / 2.0);
        return c * c;
    };
    return f(t) / f(0);
}

Tensor random_image(Shape shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = 2.0 * rng.uniform() - 1.0;
    return t;
}

}  // namespace

TEST(Schedule, LengthAndEndpoints) {
    const NoiseSchedule s = NoiseSchedule::cosine(1000);
    EXPECT_EQ(s.steps(), 1000);
    EXPECT_EQ(s.betas().size(), 1000u);
    EXPECT_EQ(s.alpha_bars().size(), 1001u);
    EXPECT_EQ(s.alpha_bar(0), 1.0);
    EXPECT_LT(s.alpha_bar(1000), 1e-3);
    EXPECT_EQ(s.descriptor(), "cosine:1000");
}

TEST(Schedule, MonotoneAndClipped) {
    for (int steps : {1, 10, 100, 1000}) {
        const NoiseSchedule s = NoiseSchedule::cosine(steps);
        for (int t = 1; t <= steps; ++t) {
            EXPECT_GT(s.beta(t), 0.0);
            EXPECT_LE(s.beta(t), kMaxBeta);
            EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
        }
    }
}

TEST(Schedule, CumulativeProductRelation) {
    const NoiseSchedule s = NoiseSchedule::cosine(1000);
    long double prod = 1.0L;
    for (int t = 1; t <= 1000; ++t) {
        prod *= 1.0L - s.beta(t);
        ASSERT_NEAR(s.alpha_bar(t), static_cast<double>(prod), 1e-10);
    }
}

TEST(Schedule, FollowsClosedFormBeforeClipping) {
    const NoiseSchedule s = NoiseSchedule::cosine(1000);
    for (int t : {1, 10, 250, 500, 900}) EXPECT_NEAR(s.alpha_bar(t), cosine_alpha_bar(t, 1000), 1e-10);
    EXPECT_EQ(s.beta(1000), kMaxBeta);
}

TEST(Schedule, RejectsBadInput) {
    EXPECT_THROW(NoiseSchedule::cosine(0), std::invalid_argument);
    const NoiseSchedule s = NoiseSchedule::cosine(10);
    EXPECT_THROW(s.beta(0), std::out_of_range);
    EXPECT_THROW(s.alpha_bar(11), std::out_of_range);
}

TEST(ForwardProcess, QStepVarianceFromZero) {
    const NoiseSchedule s = NoiseSchedule::cosine(100);
    Rng rng(1);
    const int t = 60;
    const Tensor x = q_step(Tensor({100000}), t, s, rng);
    double sq = 0.0;
    for (double v : x.values()) sq += v * v;
    EXPECT_NEAR(sq / x.size(), s.beta(t), 0.02 * s.beta(t));
}

TEST(ForwardProcess, QStepIsReproducible) {
    const NoiseSchedule s = NoiseSchedule::cosine(100);
    Rng a(5), b(5);
    const Tensor x({16}, 0.3);
    EXPECT_EQ(q_step(x, 10, s, a).storage(), q_step(x, 10, s, b).storage());
    EXPECT_THROW(q_step(x, 0, s, a), std::out_of_range);
    EXPECT_THROW(q_step(x, 101, s, a), std::out_of_range);
}

TEST(ForwardProcess, QSampleAlgebra) {
    const NoiseSchedule s = NoiseSchedule::cosine(1000);
    Rng rng(2);
    const Tensor x0 = random_image({3, 4}, rng), eps = random_tensor({3, 4}, rng);
    const Tensor xt = q_sample(Tensor({3, 4}), 500, eps, s);
    for (std::size_t i = 0; i < xt.size(); ++i) {
        EXPECT_NEAR(xt[i], std::sqrt(1.0 - s.alpha_bar(500)) * eps[i], 1e-15);
    }
    const Tensor near_clean = q_sample(x0, 1, eps, s);
    EXPECT_LT(max_abs_diff(near_clean.values(), x0.values()), 0.05);
    EXPECT_THROW(q_sample(x0, 0, eps, s), std::out_of_range);
    EXPECT_THROW(q_sample(x0, 3, Tensor({4, 3}), s), std::invalid_argument);
}

TEST(ForwardProcess, MarginalMatchesIteratedSteps) {
    const NoiseSchedule s = NoiseSchedule::cosine(100);
    Rng rng(3);
    const std::size_t n = 10000;
    const double x0 = 0.6;
    Tensor x({n}, x0);
    for (int t = 1; t <= 50; ++t) x = q_step(x, t, s, rng);
    double mean = 0.0, var = 0.0;
    for (double v : x.values()) mean += v;
    mean /= n;
    for (double v : x.values()) var += (v - mean) * (v - mean);
    var /= n - 1;
    const double ab = s.alpha_bar(50);
    const double ref_mean = std::sqrt(ab) * x0, ref_var = 1.0 - ab;
    EXPECT_NEAR(mean, ref_mean, 0.03 * std::sqrt(ref_mean * ref_mean + ref_var));
    EXPECT_NEAR(var, ref_var, 0.03 * ref_var);
}

TEST(Targets, ParseAndName) {
    EXPECT_EQ(parse_prediction_target("noise"), PredictionTarget::noise);
    EXPECT_EQ(parse_prediction_target("image_start"), PredictionTarget::image_start);
    EXPECT_EQ(parse_prediction_target("v"), PredictionTarget::v_parameterization);
    EXPECT_EQ(to_string(PredictionTarget::v_parameterization), "v_parameterization");
    EXPECT_THROW(parse_prediction_target("score"), std::invalid_argument);
}

TEST(Targets, RoundTripAllKinds) {
    const NoiseSchedule s = NoiseSchedule::cosine(1000);
    Rng rng(4);
    for (int trial = 0; trial < 200; ++trial) {
        const int t = static_cast<int>(rng.uniform_int(1, 1000));
        const Tensor x0 = random_image({8}, rng), eps = random_tensor({8}, rng);
        const Tensor xt = q_sample(x0, t, eps, s);
        for (auto kind : {PredictionTarget::noise, PredictionTarget::image_start, PredictionTarget::v_parameterization}) {
            const Estimate e = convert_prediction(training_target(kind, x0, eps, t, s), kind, xt, t, s, false);
            ASSERT_LT(max_abs_diff(e.eps.values(), eps.values()), 1e-6) << to_string(kind) << " t=" << t;
            ASSERT_LT(max_abs_diff(e.x0.values(), x0.values()), 1e-6) << to_string(kind) << " t=" << t;
        }
    }
}

TEST(Targets, NoisePredictionRecoversCleanImage) {
    const NoiseSchedule s = NoiseSchedule::cosine(1000);
    Rng rng(5);
    const Tensor x0 = random_image({32}, rng), eps = random_tensor({32}, rng);
    const Tensor xt = q_sample(x0, 321, eps, s);
    const Estimate e = convert_prediction(eps, PredictionTarget::noise, xt, 321, s);
    EXPECT_LT(max_abs_diff(e.x0.values(), x0.values()), 1e-13);
}

TEST(Targets, VelocityDefinition) {
    const NoiseSchedule s = NoiseSchedule::cosine(50);
    Rng rng(6);
    const Tensor x0 = random_image({5}, rng), eps = random_tensor({5}, rng);
    const DiffusionSample smp = make_sample(x0, 20, eps, s);
    const double ab = s.alpha_bar(20);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_NEAR(smp.v[i], std::sqrt(ab) * eps[i] - std::sqrt(1.0 - ab) * x0[i], 1e-15);
        EXPECT_NEAR(smp.xt[i], std::sqrt(ab) * x0[i] + std::sqrt(1.0 - ab) * eps[i], 1e-15);
    }
}

TEST(Targets, ClampKeepsPairConsistent) {
    const NoiseSchedule s = NoiseSchedule::cosine(100);
    const Tensor xt({2}, {3.0, -0.2});
    const Estimate e = convert_prediction(Tensor({2}, {5.0, 0.1}), PredictionTarget::image_start, xt, 40, s);
    EXPECT_EQ(e.x0[0], 1.0);
    EXPECT_EQ(e.x0[1], 0.1);
    const double ab = s.alpha_bar(40);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_NEAR(std::sqrt(ab) * e.x0[i] + std::sqrt(1.0 - ab) * e.eps[i], xt[i], 1e-12);
    }
}

TEST(Posterior, FirstStepAddsNoNoise) {
    const NoiseSchedule s = NoiseSchedule::cosine(100);
    Rng rng(7);
    const Tensor x0 = random_image({6}, rng), eps = random_tensor({6}, rng);
    const Tensor x1 = q_sample(x0, 1, eps, s);
    EXPECT_EQ(posterior_variance(1, 0, s), 0.0);
    const Tensor out = posterior_step(x1, 1, {eps, x0}, s, rng, SamplerMode::ancestral);
    EXPECT_LT(max_abs_diff(out.values(), x0.values()), 1e-12);
}

TEST(Posterior, DeterministicWithTrueNoiseFollowsMarginal) {
    const NoiseSchedule s = NoiseSchedule::cosine(1000);
    Rng rng(8);
    for (int t : {2, 10, 500, 1000}) {
        const Tensor x0 = random_image({16}, rng), eps = random_tensor({16}, rng);
        const Tensor xt = q_sample(x0, t, eps, s);
        const Tensor prev = posterior_step(xt, t, {eps, x0}, s, rng, SamplerMode::deterministic);
        EXPECT_LT(max_abs_diff(prev.values(), q_sample(x0, t - 1, eps, s).values()), 1e-12) << "t=" << t;
    }
}

TEST(Posterior, AncestralMeanMatchesGaussianPosterior) {
    // Posterior mean oracle written as the precision-weighted combination
    // of q(x_t | x_{t-1}) and q(x_{t-1} | x_0).
    const NoiseSchedule s = NoiseSchedule::cosine(100);
    const int t = 37;
    const double beta = s.beta(t), ab_prev = s.alpha_bar(t - 1);
    const double x0 = 0.4, xt = -0.3;
    const double prec = (1.0 - beta) / beta + 1.0 / (1.0 - ab_prev);
    const double mean = ((std::sqrt(1.0 - beta) / beta) * xt + (std::sqrt(ab_prev) / (1.0 - ab_prev)) * x0) / prec;
    EXPECT_NEAR(posterior_variance(t, t - 1, s), 1.0 / prec, 1e-12);

    Rng rng(9);
    const std::size_t n = 200000;
    const Tensor out = posterior_step(Tensor({n}, xt), t, {Tensor({n}), Tensor({n}, x0)}, s, rng, SamplerMode::ancestral);
    double m = 0.0;
    for (double v : out.values()) m += v;
    EXPECT_NEAR(m / n, mean, 4.0 * std::sqrt(1.0 / prec / n));
}

TEST(Posterior, AncestralIsReproducible) {
    const NoiseSchedule s = NoiseSchedule::cosine(100);
    Rng a(10), b(10);
    const Tensor xt({8}, 0.1), e({8}, 0.2), x0({8}, -0.1);
    EXPECT_EQ(posterior_step(xt, 50, {e, x0}, s, a, SamplerMode::ancestral).storage(),
              posterior_step(xt, 50, {e, x0}, s, b, SamplerMode::ancestral).storage());
}

TEST(Posterior, EquivalentTargetsDriveIdenticalStep) {
    const NoiseSchedule s = NoiseSchedule::cosine(1000);
    Rng rng(11);
    const int t = 700;
    const Tensor x0 = random_image({10}, rng), eps = random_tensor({10}, rng);
    const Tensor xt = q_sample(x0, t, eps, s);
    std::vector<Tensor> results;
    for (auto kind : {PredictionTarget::noise, PredictionTarget::image_start, PredictionTarget::v_parameterization}) {
        const Estimate e = convert_prediction(training_target(kind, x0, eps, t, s), kind, xt, t, s);
        results.push_back(posterior_step(xt, t, e, s, rng, SamplerMode::deterministic, 650));
    }
    EXPECT_LT(max_abs_diff(results[0].values(), results[1].values()), 1e-10);
    EXPECT_LT(max_abs_diff(results[0].values(), results[2].values()), 1e-10);
}

TEST(Sampling, TimestepSequence) {
    EXPECT_EQ(timestep_sequence(10, 10), (std::vector<int>{10, 9, 8, 7, 6, 5, 4, 3, 2, 1}));
    EXPECT_EQ(timestep_sequence(1000, 1), (std::vector<int>{1000}));
    const auto seq = timestep_sequence(1000, 100);
    EXPECT_EQ(seq.size(), 100u);
    EXPECT_EQ(seq.front(), 1000);
    EXPECT_EQ(seq.back(), 1);
    for (std::size_t i = 1; i < seq.size(); ++i) EXPECT_LT(seq[i], seq[i - 1]);
    EXPECT_THROW(timestep_sequence(10, 11), std::invalid_argument);
    EXPECT_THROW(timestep_sequence(10, 0), std::invalid_argument);
}

TEST(Sampling, HundredStepsInvokeModelHundredTimes) {
    const NoiseSchedule s = NoiseSchedule::cosine(1000);
    Rng rng(12);
    int calls = 0;
    Denoiser model = [&](const Tensor& x, int, const Tensor&) {
        ++calls;
        return Tensor(x.shape());
    };
    sample_loop(model, Tensor({1, 3, 4, 4}), s, rng, {});
    EXPECT_EQ(calls, 100);
}

TEST(Sampling, BudgetIsEnforced) {
    const NoiseSchedule s = NoiseSchedule::cosine(1000);
    Rng rng(13);
    Denoiser model = [](const Tensor& x, int, const Tensor&) { return Tensor(x.shape()); };
    SampleOptions opts;
    opts.steps = 101;
    EXPECT_THROW(sample_loop(model, Tensor({1, 1, 2, 2}), s, rng, opts), BudgetError);
    opts.allow_over_budget = true;
    opts.steps = 1000;
    std::vector<int> seen;
    opts.on_step = [&](int t, const Tensor&) { seen.push_back(t); };
    opts.mode = SamplerMode::ancestral;
    EXPECT_NO_THROW(sample_loop(model, Tensor({1, 1, 2, 2}), s, rng, opts));
    ASSERT_EQ(seen.size(), 1000u);
    for (int i = 0; i < 1000; ++i) EXPECT_EQ(seen[i], 999 - i);
}

TEST(Sampling, OracleModelRecoversCleanImage) {
    const NoiseSchedule s = NoiseSchedule::cosine(100);
    Rng data_rng(14);
    const Tensor x0 = random_image({2, 3, 8, 8}, data_rng);
    Denoiser oracle = [&](const Tensor& xt, int t, const Tensor&) {
        // the noise that maps x0 to xt at this timestep
        const double ab = s.alpha_bar(t);
        Tensor eps(xt.shape());
        for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = (xt[i] - std::sqrt(ab) * x0[i]) / std::sqrt(1.0 - ab);
        return eps;
    };
    Rng rng(15);
    SampleOptions opts;
    opts.steps = 100;
    const Tensor out = sample_loop(oracle, x0, s, rng, opts);
    for (std::size_t i = 0; i < out.size(); ++i) ASSERT_NEAR(out[i], 0.5 * (x0[i] + 1.0), 1e-3);
}

TEST(Sampling, DeterministicModeIsBitIdentical) {
    const NoiseSchedule s = NoiseSchedule::cosine(1000);
    Denoiser model = [](const Tensor& x, int t, const Tensor& c) {
        Tensor out(x.shape());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * x[i] + 1e-3 * t * c[i];
        return out;
    };
    Rng data(16);
    const Tensor cond = random_image({1, 3, 4, 4}, data);
    Rng a(17), b(17);
    SampleOptions opts;
    opts.steps = 20;
    EXPECT_EQ(sample_loop(model, cond, s, a, opts).storage(), sample_loop(model, cond, s, b, opts).storage());
}
