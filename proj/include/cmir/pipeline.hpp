// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmir/data.hpp"
#include "cmir/degradation.hpp"
#include "cmir/diffusion.hpp"
#include "cmir/network.hpp"
#include "cmir/rng.hpp"

namespace cmir::pipeline {

/// Training recipe. Data comes from paired folders when hq_dir is set,
/// otherwise from synthetic images degraded by `degradation`.
struct TrainConfig {
    std::size_t patch_size = 128;
    std::size_t batch_size = 64;
    double lr_start = 3e-4;
    double lr_end = 1e-6;
    std::uint64_t total_iters = 500000;
    int timesteps = 1000;
    diffusion::PredictionTarget prediction_target = diffusion::PredictionTarget::noise;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    net::NetConfig net;

    degrade::DegradationSpec degradation;
    std::string hq_dir;
    std::string lq_dir;
    std::size_t synthetic_count = 64;
    std::size_t synthetic_size = 128;

    bool augment = true;
    /// Global gradient-norm clip; 0 disables.
    double grad_clip = 0.0;
    /// Weight EMA decay; 0 disables.
    double ema_decay = 0.0;
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    std::uint64_t checkpoint_every = 0;

    /// Throws std::invalid_argument naming the offending field.
    void validate() const;
    bool uses_folder() const { return !hq_dir.empty(); }
};

/// Small CPU-friendly recipe: overfits 8 synthetic 32x32 patches with
/// sigma = 25 noise in 2000 iterations (lr 2e-3, no augmentation).
TrainConfig desk_preset();
/// Full-scale recipe with the published hyper-parameters.
TrainConfig full_preset();
/// "desk" or "full".
TrainConfig preset(const std::string& name);

nlohmann::json to_json(const TrainConfig& config);
/// Overlays the keys of `j` on `base`. Unknown keys are rejected.
TrainConfig config_from_json(const nlohmann::json& j, const TrainConfig& base = {});
TrainConfig load_config(const std::filesystem::path& path, const TrainConfig& base = {});

/// Cosine annealing from lr_start (step 0) to lr_end (step total_iters).
double lr_at(std::uint64_t step, const TrainConfig& config);

struct AdamState {
    std::uint64_t step = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;
};

/// One bias-corrected Adam update of every parameter from its gradient.
void adam_update(const nn::ParamStore& params, AdamState& state, double lr, double beta1, double beta2, double eps);

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(const nn::ParamStore& params, double max_norm);

/// Everything needed to continue training bit-identically.
struct TrainState {
    TrainConfig config;
    net::Model model;
    AdamState adam;
    Rng rng;
    std::uint64_t iteration = 0;
    std::vector<Tensor> ema;
};

/// Fresh model and optimizer for `config`.
TrainState init_state(const TrainConfig& config);

/// Training data source described by `config`.
data::Dataset make_dataset(const TrainConfig& config);

/// batch_size random patches, augmented when the config says so.
std::vector<data::PatchPair> draw_batch(const data::Dataset& dataset, const TrainConfig& config, Rng& rng);

struct StepResult {
    double loss = 0.0;
    std::vector<int> timesteps;
};

/// One optimization step on patches in [0, 1]: per-item t ~ U{1..T},
/// noising, L1 loss against the configured target and an Adam update.
/// Throws std::runtime_error on a non-finite loss.
StepResult train_step(const std::vector<data::PatchPair>& batch, TrainState& state,
                      const diffusion::NoiseSchedule& schedule, double lr);

// ---- checkpoints -------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
/// Loads a checkpoint, building the model from its stored config.
TrainState load_checkpoint(const std::filesystem::path& path);
/// Loads a checkpoint into a model built from `net`; every stored shape
/// must match.
TrainState load_checkpoint(const std::filesystem::path& path, const net::NetConfig& net);

/// Copies the EMA weights, when present, into the model.
void use_ema_weights(TrainState& state);

// ---- training loop -----------------------------------------------------------------------

struct FitOptions {
    /// Receives config.json, metrics.csv and ckpt_<iter>.cmir; empty writes nothing.
    std::filesystem::path run_dir;
    /// Continue from this checkpoint instead of initializing.
    std::optional<std::filesystem::path> resume;
    /// Stop early after this iteration and checkpoint there; the lr schedule
    /// still follows total_iters.
    std::optional<std::uint64_t> stop_at;
    std::function<void(std::uint64_t iteration, double loss, double lr)> on_step;
};

struct FitResult {
    TrainState state;
    /// Loss of each iteration run by this call.
    std::vector<double> losses;
};

FitResult fit(const TrainConfig& config, const FitOptions& options = {});

std::filesystem::path checkpoint_path(const std::filesystem::path& run_dir, std::uint64_t iteration);

// ---- inference ---------------------------------------------------------------------------

struct RestoreOptions {
    diffusion::SampleOptions sampling;
    /// Called once per model evaluation.
    std::function<void(int t)> on_model_call;
};

/// Restores one (3, H, W) image in [0, 1]. Sizes that are not multiples of
/// 16 are reflect-padded and the result is cropped back.
Tensor restore(const net::Model& model, const Tensor& lq, const diffusion::NoiseSchedule& schedule, Rng& rng,
               const RestoreOptions& options = {});

/// Restores a batch (N, 3, H, W) of LQ images in [0, 1] with H, W multiples of 16.
Tensor restore_batch(const net::Model& model, const Tensor& lq, const diffusion::NoiseSchedule& schedule, Rng& rng,
                     const RestoreOptions& options = {});

}  // namespace cmir::pipeline
