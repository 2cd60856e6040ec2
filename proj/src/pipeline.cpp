// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmir/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "cmir/image.hpp"

namespace cmir::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void require(bool ok, const std::string& message) {
    if (!ok) throw std::invalid_argument("train config: " + message);
}

json net_to_json(const net::NetConfig& n) {
    return json{{"base_channels", n.base_channels},
                {"stage_depths", n.stage_depths},
                {"state_size", n.state_size},
                {"time_dim", n.time_dim}};
}

net::NetConfig net_from_json(const json& j, net::NetConfig n) {
    static const std::set<std::string> keys{"base_channels", "stage_depths", "state_size", "time_dim"};
    for (const auto& [key, _] : j.items()) {
        if (!keys.count(key)) throw std::invalid_argument("train config: unknown key 'net." + key + "'");
    }
    if (j.contains("base_channels")) n.base_channels = j.at("base_channels").get<std::size_t>();
    if (j.contains("stage_depths")) {
        const auto depths = j.at("stage_depths").get<std::vector<std::size_t>>();
        if (depths.size() != net::kStages) {
            throw std::invalid_argument("train config: net.stage_depths needs " + std::to_string(net::kStages) +
                                        " entries");
        }
        std::copy(depths.begin(), depths.end(), n.stage_depths.begin());
    }
    if (j.contains("state_size")) n.state_size = j.at("state_size").get<std::size_t>();
    if (j.contains("time_dim")) n.time_dim = j.at("time_dim").get<std::size_t>();
    return n;
}

Tensor batch_tensor(const std::vector<data::PatchPair>& batch, bool hq) {
    const Tensor& first = hq ? batch.front().hq : batch.front().lq;
    const std::size_t item = first.size();
    Shape shape{batch.size()};
    shape.insert(shape.end(), first.shape().begin(), first.shape().end());
    Tensor out(shape);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const Tensor& src = hq ? batch[b].hq : batch[b].lq;
        if (src.shape() != first.shape()) throw std::invalid_argument("train_step: patches differ in shape");
        for (std::size_t i = 0; i < item; ++i) out[b * item + i] = 2.0 * src[i] - 1.0;
    }
    return out;
}

// Copies item b of a batch tensor into its own (1, ...) tensor and back.
Tensor item_of(const Tensor& batch, std::size_t b) {
    Shape shape = batch.shape();
    shape[0] = 1;
    const std::size_t n = batch.size() / batch.dim(0);
    Tensor out(shape);
    std::copy(batch.ptr() + b * n, batch.ptr() + (b + 1) * n, out.ptr());
    return out;
}

void set_item(Tensor& batch, std::size_t b, const Tensor& item) {
    std::copy(item.ptr(), item.ptr() + item.size(), batch.ptr() + b * item.size());
}

}  // namespace

void TrainConfig::validate() const {
    require(patch_size > 0 && patch_size % net::kSpatialMultiple == 0,
            "patch_size must be a positive multiple of " + std::to_string(net::kSpatialMultiple));
    require(batch_size > 0, "batch_size must be positive");
    require(lr_end > 0.0 && lr_start > lr_end, "need lr_start > lr_end > 0");
    require(timesteps > 0, "T must be positive");
    require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1 must be in [0, 1)");
    require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2 must be in [0, 1)");
    require(adam_eps > 0.0, "adam_eps must be positive");
    require(grad_clip >= 0.0, "grad_clip must be non-negative");
    require(ema_decay >= 0.0 && ema_decay < 1.0, "ema_decay must be in [0, 1)");
    if (uses_folder()) {
        require(!lq_dir.empty(), "lq_dir is required with hq_dir");
    } else {
        require(synthetic_count > 0, "synthetic_count must be positive");
        require(synthetic_size >= patch_size, "synthetic_size must be at least patch_size");
    }
    net.validate();
}

TrainConfig desk_preset() {
    TrainConfig c;
    c.patch_size = 32;
    c.batch_size = 8;
    c.lr_start = 2e-3;
    c.total_iters = 2000;
    c.augment = false;
    c.net.base_channels = 8;
    c.net.stage_depths = {1, 1, 1, 1};
    c.net.state_size = 4;
    c.net.time_dim = 32;
    c.synthetic_count = 8;
    c.synthetic_size = 32;
    c.degradation.kind = degrade::DegradationKind::gaussian_noise;
    c.degradation.sigma = 25.0;
    c.checkpoint_every = 500;
    return c;
}

TrainConfig full_preset() { return TrainConfig{}; }

TrainConfig preset(const std::string& name) {
    if (name == "desk") return desk_preset();
    if (name == "full") return full_preset();
    throw std::invalid_argument("unknown preset '" + name + "' (expected desk or full)");
}

json to_json(const TrainConfig& c) {
    return json{{"patch_size", c.patch_size},
                {"batch_size", c.batch_size},
                {"lr_start", c.lr_start},
                {"lr_end", c.lr_end},
                {"total_iters", c.total_iters},
                {"T", c.timesteps},
                {"prediction_target", diffusion::to_string(c.prediction_target)},
                {"adam_beta1", c.adam_beta1},
                {"adam_beta2", c.adam_beta2},
                {"adam_eps", c.adam_eps},
                {"seed", c.seed},
                {"net", net_to_json(c.net)},
                {"degradation", degrade::to_json(c.degradation)},
                {"hq_dir", c.hq_dir},
                {"lq_dir", c.lq_dir},
                {"synthetic_count", c.synthetic_count},
                {"synthetic_size", c.synthetic_size},
                {"augment", c.augment},
                {"grad_clip", c.grad_clip},
                {"ema_decay", c.ema_decay},
                {"checkpoint_every", c.checkpoint_every}};
}

TrainConfig config_from_json(const json& j, const TrainConfig& base) {
    if (!j.is_object()) throw std::invalid_argument("train config: expected a JSON object");
    const json known = to_json(base);
    for (const auto& [key, _] : j.items()) {
        if (!known.contains(key)) throw std::invalid_argument("train config: unknown key '" + key + "'");
    }
    TrainConfig c = base;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    try {
        get("patch_size", c.patch_size);
        get("batch_size", c.batch_size);
        get("lr_start", c.lr_start);
        get("lr_end", c.lr_end);
        get("total_iters", c.total_iters);
        get("T", c.timesteps);
        if (j.contains("prediction_target")) {
            c.prediction_target = diffusion::parse_prediction_target(j.at("prediction_target").get<std::string>());
        }
        get("adam_beta1", c.adam_beta1);
        get("adam_beta2", c.adam_beta2);
        get("adam_eps", c.adam_eps);
        get("seed", c.seed);
        if (j.contains("net")) c.net = net_from_json(j.at("net"), c.net);
        if (j.contains("degradation")) {
            json merged = degrade::to_json(c.degradation);
            merged.update(j.at("degradation"));
            c.degradation = degrade::spec_from_json(merged);
        }
        get("hq_dir", c.hq_dir);
        get("lq_dir", c.lq_dir);
        get("synthetic_count", c.synthetic_count);
        get("synthetic_size", c.synthetic_size);
        get("augment", c.augment);
        get("grad_clip", c.grad_clip);
        get("ema_decay", c.ema_decay);
        get("checkpoint_every", c.checkpoint_every);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("train config: ") + e.what());
    }
    return c;
}

TrainConfig load_config(const fs::path& path, const TrainConfig& base) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("cannot parse config file " + path.string() + ": " + e.what());
    }
    return config_from_json(j, base);
}

double lr_at(std::uint64_t step, const TrainConfig& config) {
    if (step > config.total_iters) {
        throw std::out_of_range("lr_at: step " + std::to_string(step) + " exceeds total_iters " +
                                std::to_string(config.total_iters));
    }
    if (config.total_iters == 0) return config.lr_start;
    const double progress = static_cast<double>(step) / static_cast<double>(config.total_iters);
    return config.lr_end + 0.5 * (config.lr_start - config.lr_end) * (1.0 + std::cos(std::numbers::pi * progress));
}

void adam_update(const nn::ParamStore& params, AdamState& state, double lr, double beta1, double beta2, double eps) {
    const auto& entries = params.entries();
    if (state.m.empty()) {
        for (const auto& [_, var] : entries) {
            state.m.emplace_back(var.shape());
            state.v.emplace_back(var.shape());
        }
    }
    if (state.m.size() != entries.size()) throw std::logic_error("adam_update: optimizer state does not match params");
    ++state.step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (std::size_t p = 0; p < entries.size(); ++p) {
        const nn::Var& var = entries[p].second;
        const Tensor& g = var.grad();
        if (g.empty()) continue;
        Tensor& w = var.mutable_value();
        Tensor& m = state.m[p];
        Tensor& v = state.v[p];
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
}

double clip_grad_norm(const nn::ParamStore& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [_, var] : params.entries()) {
        for (double g : var.grad().values()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (const auto& [_, var] : params.entries()) {
            if (var.grad().empty()) continue;
            for (double& g : var.grad_buffer().values()) g *= s;
        }
    }
    return norm;
}

TrainState init_state(const TrainConfig& config) {
    config.validate();
    TrainState state{config, net::Model(config.net, config.seed), AdamState{}, Rng(config.seed + 2), 0, {}};
    if (config.ema_decay > 0.0) {
        for (const auto& [_, var] : state.model.params().entries()) state.ema.push_back(var.value());
    }
    return state;
}

data::Dataset make_dataset(const TrainConfig& config) {
    if (config.uses_folder()) return data::Dataset::from_folder(data::load_paired_folder(config.hq_dir, config.lq_dir));
    return data::Dataset::from_pairs(
        data::synthetic_pairs(config.synthetic_count, config.synthetic_size, config.degradation, config.seed + 1));
}

std::vector<data::PatchPair> draw_batch(const data::Dataset& dataset, const TrainConfig& config, Rng& rng) {
    std::vector<data::PatchPair> batch;
    batch.reserve(config.batch_size);
    for (std::size_t b = 0; b < config.batch_size; ++b) {
        const auto index = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(dataset.size()) - 1));
        data::PatchPair patch = data::sample_patch(dataset.get(index), config.patch_size, rng);
        if (config.augment) patch = data::augment(patch, rng);
        batch.push_back(std::move(patch));
    }
    return batch;
}

StepResult train_step(const std::vector<data::PatchPair>& batch, TrainState& state,
                      const diffusion::NoiseSchedule& schedule, double lr) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    const TrainConfig& cfg = state.config;
    const Tensor x0 = batch_tensor(batch, true);
    const Tensor cond = batch_tensor(batch, false);
    Tensor z_t(x0.shape()), target(x0.shape());
    StepResult result;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const int t = static_cast<int>(state.rng.uniform_int(1, schedule.steps()));
        const Tensor x0_b = item_of(x0, b);
        Tensor eps(x0_b.shape());
        state.rng.fill_normal(eps.values());
        set_item(z_t, b, diffusion::q_sample(x0_b, t, eps, schedule));
        set_item(target, b, diffusion::training_target(cfg.prediction_target, x0_b, eps, t, schedule));
        result.timesteps.push_back(t);
    }

    const nn::ParamStore& params = state.model.params();
    params.zero_grad();
    const nn::Var pred = state.model.forward(nn::Var(z_t), result.timesteps, nn::Var(cond));
    const nn::Var loss = nn::mean_abs_error(pred, target);
    result.loss = loss.value()[0];
    if (!std::isfinite(result.loss)) {
        std::ostringstream os;
        os << "non-finite loss " << result.loss << " at iteration " << state.iteration << " (timesteps";
        for (int t : result.timesteps) os << ' ' << t;
        os << ", lr " << lr << ")";
        throw std::runtime_error(os.str());
    }
    nn::backward(loss);
    if (cfg.grad_clip > 0.0) clip_grad_norm(params, cfg.grad_clip);
    adam_update(params, state.adam, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    if (!state.ema.empty()) {
        const auto& entries = params.entries();
        for (std::size_t p = 0; p < entries.size(); ++p) {
            const Tensor& w = entries[p].second.value();
            Tensor& e = state.ema[p];
            for (std::size_t i = 0; i < w.size(); ++i) e[i] = cfg.ema_decay * e[i] + (1.0 - cfg.ema_decay) * w[i];
        }
    }
    return result;
}

void use_ema_weights(TrainState& state) {
    const auto& entries = state.model.params().entries();
    if (state.ema.size() != entries.size()) return;
    for (std::size_t p = 0; p < entries.size(); ++p) entries[p].second.mutable_value() = state.ema[p];
}

fs::path checkpoint_path(const fs::path& run_dir, std::uint64_t iteration) {
    return run_dir / ("ckpt_" + std::to_string(iteration) + ".cmir");
}

FitResult fit(const TrainConfig& config, const FitOptions& options) {
    config.validate();
    TrainState state = options.resume ? load_checkpoint(*options.resume, config.net) : init_state(config);
    if (options.resume) {
        // The loop length, logging and checkpoint cadence may change on resume.
        state.config.total_iters = config.total_iters;
        state.config.checkpoint_every = config.checkpoint_every;
        if (state.iteration > config.total_iters) {
            throw std::invalid_argument("resume: checkpoint iteration " + std::to_string(state.iteration) +
                                        " is past total_iters " + std::to_string(config.total_iters));
        }
    }
    const TrainConfig& cfg = state.config;
    const diffusion::NoiseSchedule schedule = diffusion::NoiseSchedule::cosine(cfg.timesteps);
    const data::Dataset dataset = make_dataset(cfg);

    std::ofstream metrics;
    if (!options.run_dir.empty()) {
        fs::create_directories(options.run_dir);
        std::ofstream cfg_out(options.run_dir / "config.json");
        cfg_out << to_json(cfg).dump(2) << '\n';
        if (!cfg_out) throw std::runtime_error("cannot write " + (options.run_dir / "config.json").string());
        const fs::path metrics_path = options.run_dir / "metrics.csv";
        std::vector<std::string> kept{"iteration,loss,lr"};
        if (options.resume && fs::exists(metrics_path)) {
            // keep the rows up to the resumed iteration so the log stays consistent
            std::ifstream old(metrics_path);
            std::string line;
            std::getline(old, line);
            while (std::getline(old, line)) {
                if (!line.empty() && std::stoull(line.substr(0, line.find(','))) <= state.iteration) kept.push_back(line);
            }
        }
        metrics.open(metrics_path, std::ios::trunc);
        if (!metrics) throw std::runtime_error("cannot write " + metrics_path.string());
        for (const auto& line : kept) metrics << line << '\n';
        if (cfg.total_iters == state.iteration) save_checkpoint(state, checkpoint_path(options.run_dir, state.iteration));
    }

    const std::uint64_t end = std::min(cfg.total_iters, options.stop_at.value_or(cfg.total_iters));
    FitResult result{std::move(state), {}};
    TrainState& s = result.state;
    while (s.iteration < end) {
        const double lr = lr_at(s.iteration, cfg);
        const auto batch = draw_batch(dataset, cfg, s.rng);
        const StepResult step = train_step(batch, s, schedule, lr);
        ++s.iteration;
        result.losses.push_back(step.loss);
        if (options.on_step) options.on_step(s.iteration, step.loss, lr);
        if (metrics.is_open()) {
            metrics << s.iteration << ',' << std::setprecision(17) << step.loss << ',' << lr << '\n';
            if (!metrics) throw std::runtime_error("metrics.csv: write failed");
        }
        const bool periodic = cfg.checkpoint_every > 0 && s.iteration % cfg.checkpoint_every == 0;
        if (!options.run_dir.empty() && (periodic || s.iteration == end)) {
            metrics.flush();
            save_checkpoint(s, checkpoint_path(options.run_dir, s.iteration));
        }
    }
    return result;
}

Tensor restore_batch(const net::Model& model, const Tensor& lq, const diffusion::NoiseSchedule& schedule, Rng& rng,
                     const RestoreOptions& options) {
    if (lq.rank() != 4) throw std::invalid_argument("restore_batch: expected (N, C, H, W), got " + shape_to_string(lq.shape()));
    net::require_divisible(lq.dim(2), lq.dim(3));
    Tensor cond = lq;
    for (double& v : cond.values()) v = 2.0 * v - 1.0;
    const diffusion::Denoiser denoiser = [&](const Tensor& x_t, int t, const Tensor& c) {
        if (options.on_model_call) options.on_model_call(t);
        return model.predict(x_t, t, c);
    };
    return diffusion::sample_loop(denoiser, cond, schedule, rng, options.sampling);
}

Tensor restore(const net::Model& model, const Tensor& lq, const diffusion::NoiseSchedule& schedule, Rng& rng,
               const RestoreOptions& options) {
    image::require_image(lq, "restore");
    const std::size_t h = image::height(lq), w = image::width(lq), m = net::kSpatialMultiple;
    const std::size_t ph = (m - h % m) % m, pw = (m - w % m) % m;
    const Tensor padded = (ph || pw) ? image::reflect_pad(lq, ph, pw) : lq;
    const Tensor out = restore_batch(model, padded.reshaped({1, padded.dim(0), padded.dim(1), padded.dim(2)}),
                                     schedule, rng, options);
    const Tensor item = out.reshaped({out.dim(1), out.dim(2), out.dim(3)});
    return (ph || pw) ? image::crop(item, 0, 0, h, w) : item;
}

}  // namespace cmir::pipeline
