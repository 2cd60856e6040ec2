// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include <json.hpp>

#include "cmir/data.hpp"
#include "cmir/degradation.hpp"
#include "cmir/image.hpp"
#include "cmir/metrics.hpp"
#include "cmir/network.hpp"
#include "cmir/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cmir;

namespace {

// Published MAC count at 128x128 with the default network width.
constexpr const char* kReferenceMacs = "37G";

void echo(const std::string& command, const json& resolved) {
    std::cout << "[" << command << "] resolved config:\n" << resolved.dump(2) << std::endl;
}

pipeline::TrainConfig resolve_config(const std::string& preset, const std::string& config_path) {
    pipeline::TrainConfig cfg = pipeline::preset(preset);
    if (!config_path.empty()) cfg = pipeline::load_config(config_path, cfg);
    cfg.validate();
    return cfg;
}

struct TrainArgs {
    std::string config;
    std::string preset = "desk";
    std::string resume;
    std::string run_dir = "runs/train";
    std::uint64_t log_every = 50;
};

int cmd_train(const TrainArgs& a) {
    const pipeline::TrainConfig cfg = resolve_config(a.preset, a.config);
    echo("train", {{"preset", a.preset},
                   {"config_file", a.config},
                   {"resume", a.resume},
                   {"run_dir", a.run_dir},
                   {"log_every", a.log_every},
                   {"train", pipeline::to_json(cfg)}});
    pipeline::FitOptions opts;
    opts.run_dir = a.run_dir;
    if (!a.resume.empty()) opts.resume = fs::path(a.resume);
    opts.on_step = [&](std::uint64_t it, double loss, double lr) {
        if (a.log_every > 0 && (it % a.log_every == 0 || it == cfg.total_iters)) {
            std::cout << "iter " << it << "  loss " << std::setprecision(6) << loss << "  lr " << lr << std::endl;
        }
    };
    const pipeline::FitResult result = pipeline::fit(cfg, opts);
    std::cout << "finished at iteration " << result.state.iteration << "; checkpoint "
              << pipeline::checkpoint_path(a.run_dir, result.state.iteration).string() << std::endl;
    return 0;
}

struct RestoreArgs {
    std::string ckpt;
    std::string input;
    std::string output;
    int steps = diffusion::kDefaultStepBudget;
    std::uint64_t seed = 0;
    std::string mode = "deterministic";
    bool save_trajectory = false;
    int trajectory_every = 10;
    bool allow_over_budget = false;
};

std::vector<fs::path> input_images(const fs::path& input) {
    if (fs::is_regular_file(input)) return {input};
    std::vector<fs::path> files;
    for (const auto& name : data::list_png(input)) files.push_back(input / name);
    if (files.empty()) throw std::runtime_error("no PNG files in " + input.string());
    return files;
}

Tensor trajectory_frame(const Tensor& state, std::size_t h, std::size_t w) {
    Tensor item = state.reshaped({state.dim(1), state.dim(2), state.dim(3)});
    for (double& v : item.values()) v = std::clamp(0.5 * (v + 1.0), 0.0, 1.0);
    return image::crop(item, 0, 0, h, w);
}

int cmd_restore(const RestoreArgs& a) {
    const auto mode = diffusion::parse_sampler_mode(a.mode);
    pipeline::TrainState state = pipeline::load_checkpoint(a.ckpt);
    pipeline::use_ema_weights(state);
    echo("restore", {{"ckpt", a.ckpt},
                     {"input", a.input},
                     {"output", a.output},
                     {"steps", a.steps},
                     {"seed", a.seed},
                     {"mode", diffusion::to_string(mode)},
                     {"save_trajectory", a.save_trajectory},
                     {"trajectory_every", a.trajectory_every},
                     {"allow_over_budget", a.allow_over_budget},
                     {"checkpoint_iteration", state.iteration},
                     {"prediction_target", diffusion::to_string(state.config.prediction_target)},
                     {"T", state.config.timesteps}});
    const auto schedule = diffusion::NoiseSchedule::cosine(state.config.timesteps);
    fs::create_directories(a.output);
    for (const auto& path : input_images(a.input)) {
        const Tensor lq = image::read_png(path);
        const std::size_t h = image::height(lq), w = image::width(lq);
        if (h % net::kSpatialMultiple || w % net::kSpatialMultiple) {
            const std::size_t m = net::kSpatialMultiple;
            std::cout << path.filename().string() << ": " << h << "x" << w << " reflect-padded to "
                      << (h + m - 1) / m * m << "x" << (w + m - 1) / m * m << ", cropped back after restoration"
                      << std::endl;
        }
        Rng rng(a.seed);
        pipeline::RestoreOptions opts;
        opts.sampling.steps = a.steps;
        opts.sampling.mode = mode;
        opts.sampling.target = state.config.prediction_target;
        opts.sampling.allow_over_budget = a.allow_over_budget;
        int calls = 0;
        opts.on_model_call = [&](int) { ++calls; };
        const fs::path stem = fs::path(a.output) / path.stem();
        if (a.save_trajectory) {
            fs::create_directories(stem.string() + "_trajectory");
            int index = 0;
            opts.sampling.on_step = [&](int t, const Tensor& x) {
                ++index;
                if (index % std::max(1, a.trajectory_every) != 0 && t != 0) return;
                char name[32];
                std::snprintf(name, sizeof(name), "step%03d_t%04d.png", index, t);
                image::write_png(fs::path(stem.string() + "_trajectory") / name, trajectory_frame(x, h, w));
            };
        }
        const Tensor restored = pipeline::restore(state.model, lq, schedule, rng, opts);
        const fs::path out = fs::path(a.output) / path.filename();
        image::write_png(out, restored);
        std::cout << path.filename().string() << ": " << calls << " model calls -> " << out.string() << std::endl;
    }
    return 0;
}

struct DegradeArgs {
    std::string input;
    std::string output;
    std::string kind = "gaussian";
    double sigma = 25.0;
    int blur_length = 9;
    double blur_angle = 0.0;
    int rain_count = 200;
    int rain_length = 15;
    double rain_angle = 70.0;
    double rain_intensity = 0.6;
    std::uint64_t seed = 0;
};

int cmd_degrade(const DegradeArgs& a) {
    degrade::DegradationSpec spec;
    spec.kind = degrade::parse_kind(a.kind);
    spec.sigma = a.sigma;
    spec.kernel_length = a.blur_length;
    spec.angle_degrees = a.blur_angle;
    spec.streak_count = a.rain_count;
    spec.streak_length = a.rain_length;
    spec.streak_angle_degrees = a.rain_angle;
    spec.streak_intensity = a.rain_intensity;
    spec.seed = a.seed;
    echo("degrade", {{"input", a.input}, {"output", a.output}, {"spec", degrade::to_json(spec)}});
    if (fs::weakly_canonical(a.input) == fs::weakly_canonical(a.output)) {
        throw std::invalid_argument("degrade: output directory must differ from the input");
    }
    fs::create_directories(a.output);
    json manifest{{"images", json::array()}};
    const auto names = data::list_png(a.input);
    if (names.empty()) throw std::runtime_error("no PNG files in " + a.input);
    for (std::size_t i = 0; i < names.size(); ++i) {
        degrade::DegradationSpec item = spec;
        item.seed = spec.seed + i;
        const auto pair = degrade::make_pair(image::read_png(fs::path(a.input) / names[i]), item);
        image::write_png(fs::path(a.output) / names[i], pair.lq);
        manifest["images"].push_back({{"file", names[i]}, {"spec", degrade::to_json(item)}});
    }
    std::ofstream out(fs::path(a.output) / "manifest.json");
    out << manifest.dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write manifest.json");
    std::cout << "wrote " << names.size() << " images and manifest.json to " << a.output << std::endl;
    return 0;
}

struct EvalArgs {
    std::string restored;
    std::string reference;
    std::string channel = "rgb";
    std::string csv;
};

int cmd_eval(const EvalArgs& a) {
    const auto mode = metrics::parse_channel_mode(a.channel);
    echo("eval", {{"restored", a.restored}, {"reference", a.reference}, {"channel", a.channel}, {"csv", a.csv}});
    const auto folder = data::load_paired_folder(a.reference, a.restored);
    metrics::MetricReport report;
    report.channel_mode = mode;
    for (std::size_t i = 0; i < folder.size(); ++i) {
        const auto pair = folder.load(i);
        report.images.push_back(metrics::score_pair(folder.names()[i], pair.lq, pair.hq, mode));
    }
    metrics::finalize(report);
    const std::string csv = report.to_csv();
    std::cout << csv;
    if (!a.csv.empty()) {
        std::ofstream out(a.csv);
        out << csv;
        if (!out) throw std::runtime_error("cannot write " + a.csv);
    }
    return 0;
}

struct MacsArgs {
    std::string config;
    std::string preset = "full";
    std::size_t height = 128;
    std::size_t width = 128;
};

int cmd_macs(const MacsArgs& a) {
    const pipeline::TrainConfig cfg = resolve_config(a.preset, a.config);
    echo("macs", {{"preset", a.preset},
                  {"config_file", a.config},
                  {"height", a.height},
                  {"width", a.width},
                  {"net", pipeline::to_json(cfg).at("net")}});
    const net::MacReport report = net::count_macs(cfg.net, a.height, a.width);
    for (const auto& layer : report.layers) std::cout << std::left << std::setw(48) << layer.name << layer.macs << '\n';
    std::cout << "total " << report.total << " MACs (" << std::fixed << std::setprecision(2)
              << static_cast<double>(report.total) / 1e9 << "G)\n";
    std::cout << "published reference at 128x128 with the default width: " << kReferenceMacs << std::endl;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Diffusion-based image restoration with a Mamba backbone"};
    app.require_subcommand(1);

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train a model");
    t->add_option("--config", train.config, "JSON config overlaid on the preset")->check(CLI::ExistingFile);
    t->add_option("--preset", train.preset, "Base recipe")->check(CLI::IsMember({"desk", "full"}));
    t->add_option("--resume", train.resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
    t->add_option("--run-dir", train.run_dir, "Output directory");
    t->add_option("--log-every", train.log_every, "Print the loss every N iterations");

    RestoreArgs restore;
    auto* r = app.add_subcommand("restore", "Restore images with a trained checkpoint");
    r->add_option("--ckpt", restore.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
    r->add_option("--input", restore.input, "PNG file or directory")->required()->check(CLI::ExistingPath);
    r->add_option("--output", restore.output, "Output directory")->required();
    r->add_option("--steps", restore.steps, "Sampling steps");
    r->add_option("--seed", restore.seed, "Sampler seed");
    r->add_option("--mode", restore.mode, "Sampler")->check(CLI::IsMember({"ancestral", "deterministic"}));
    r->add_flag("--save-trajectory", restore.save_trajectory, "Write intermediate x_t frames");
    r->add_option("--trajectory-every", restore.trajectory_every, "Frame period for --save-trajectory");
    r->add_flag("--allow-over-budget", restore.allow_over_budget, "Permit more than 100 steps");

    DegradeArgs degrade;
    auto* d = app.add_subcommand("degrade", "Synthesize degraded images");
    d->add_option("--input", degrade.input, "Directory of clean PNGs")->required()->check(CLI::ExistingDirectory);
    d->add_option("--output", degrade.output, "Output directory")->required();
    d->add_option("--kind", degrade.kind, "gaussian, blur or rain")->check(CLI::IsMember({"gaussian", "blur", "rain"}));
    d->add_option("--sigma", degrade.sigma, "Noise level on the 8-bit scale");
    d->add_option("--blur-length", degrade.blur_length, "Motion kernel length (odd)");
    d->add_option("--blur-angle", degrade.blur_angle, "Motion angle in degrees");
    d->add_option("--rain-count", degrade.rain_count, "Number of streaks");
    d->add_option("--rain-length", degrade.rain_length, "Streak length in pixels");
    d->add_option("--rain-angle", degrade.rain_angle, "Streak angle in degrees");
    d->add_option("--rain-intensity", degrade.rain_intensity, "Streak brightness in [0, 1]");
    d->add_option("--seed", degrade.seed, "Base seed; image i uses seed + i");

    EvalArgs eval;
    auto* e = app.add_subcommand("eval", "Score restorations against references");
    e->add_option("--restored", eval.restored, "Directory of restored PNGs")->required()->check(CLI::ExistingDirectory);
    e->add_option("--reference", eval.reference, "Directory of reference PNGs")->required()->check(CLI::ExistingDirectory);
    e->add_option("--channel", eval.channel, "rgb or y")->check(CLI::IsMember({"rgb", "y"}));
    e->add_option("--csv", eval.csv, "Also write the report here");

    MacsArgs macs;
    auto* m = app.add_subcommand("macs", "Count multiply-accumulates");
    m->add_option("--config", macs.config, "JSON config overlaid on the preset")->check(CLI::ExistingFile);
    m->add_option("--preset", macs.preset, "Base recipe")->check(CLI::IsMember({"desk", "full"}));
    m->add_option("--height", macs.height, "Input height");
    m->add_option("--width", macs.width, "Input width");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*t) return cmd_train(train);
        if (*r) return cmd_restore(restore);
        if (*d) return cmd_degrade(degrade);
        if (*e) return cmd_eval(eval);
        if (*m) return cmd_macs(macs);
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << std::endl;
        return 1;
    }
    return 1;
}
