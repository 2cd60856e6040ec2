// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>

#include "cmir/image.hpp"
#include "cmir/pipeline.hpp"

using namespace cmir;
using namespace cmir::pipeline;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_train_config() {
    TrainConfig c = desk_preset();
    c.patch_size = 16;
    c.batch_size = 2;
    c.total_iters = 4;
    c.net.base_channels = 4;
    c.net.stage_depths = {1, 1, 1, 1};
    c.net.state_size = 2;
    c.net.time_dim = 8;
    c.synthetic_count = 2;
    c.synthetic_size = 24;
    c.checkpoint_every = 0;
    c.seed = 7;
    c.augment = true;
    return c;
}

// Fresh scratch directory removed at scope exit.
struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("cmir_test_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Rewrites the JSON manifest of a checkpoint, keeping the payload.
void edit_manifest(const fs::path& p, const std::function<void(nlohmann::json&)>& edit) {
    const std::string bytes = slurp(p);
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    nlohmann::json manifest = nlohmann::json::parse(bytes.substr(16, len));
    edit(manifest);
    const std::string text = manifest.dump();
    std::string out = bytes.substr(0, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((text.size() >> (8 * i)) & 0xff));
    out += text;
    out += bytes.substr(16 + len);
    spit(p, out);
}

Tensor coded_image(std::size_t h, std::size_t w, double offset = 0.0) {
    Tensor img({3, h, w});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = offset + static_cast<double>(i) / img.size();
    return img;
}

bool same_weights(const net::Model& a, const net::Model& b) {
    const auto& ea = a.params().entries();
    const auto& eb = b.params().entries();
    if (ea.size() != eb.size()) return false;
    for (std::size_t i = 0; i < ea.size(); ++i) {
        if (ea[i].first != eb[i].first || ea[i].second.value().storage() != eb[i].second.value().storage()) return false;
    }
    return true;
}

}  // namespace

// ---- data ------------------------------------------------------------------------------

TEST(PairedFolder, MatchesSortedNames) {
    TempDir dir("paired");
    fs::create_directories(dir.path / "hq");
    fs::create_directories(dir.path / "lq");
    for (const char* name : {"b.png", "a.png"}) {
        image::write_png(dir.path / "hq" / name, Tensor({3, 4, 4}, 0.25));
        image::write_png(dir.path / "lq" / name, Tensor({3, 4, 4}, 0.75));
    }
    const auto folder = data::load_paired_folder(dir.path / "hq", dir.path / "lq");
    ASSERT_EQ(folder.size(), 2u);
    EXPECT_EQ(folder.names(), (std::vector<std::string>{"a.png", "b.png"}));
    const auto pair = folder.load(1);
    EXPECT_NEAR(pair.hq[0], 64.0 / 255.0, 1e-12);
    EXPECT_NEAR(pair.lq[0], 191.0 / 255.0, 1e-12);
}

TEST(PairedFolder, OrphanIsListed) {
    TempDir dir("orphan");
    fs::create_directories(dir.path / "hq");
    fs::create_directories(dir.path / "lq");
    image::write_png(dir.path / "hq" / "a.png", Tensor({3, 4, 4}));
    image::write_png(dir.path / "lq" / "a.png", Tensor({3, 4, 4}));
    image::write_png(dir.path / "lq" / "stray.png", Tensor({3, 4, 4}));
    try {
        data::load_paired_folder(dir.path / "hq", dir.path / "lq");
        FAIL() << "expected an error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("stray.png"), std::string::npos) << e.what();
    }
}

TEST(SamplePatch, FullSizeIsIdentity) {
    Rng rng(1);
    const degrade::RestorationPair pair{coded_image(16, 16), coded_image(16, 16, 1.0), {}};
    const auto patch = data::sample_patch(pair, 16, rng);
    EXPECT_EQ(patch.hq.storage(), pair.hq.storage());
    EXPECT_EQ(patch.lq.storage(), pair.lq.storage());
}

TEST(SamplePatch, WindowsStayAligned) {
    Rng rng(2);
    const degrade::RestorationPair pair{coded_image(20, 30), coded_image(20, 30, 1.0), {}};
    for (int trial = 0; trial < 20; ++trial) {
        const auto patch = data::sample_patch(pair, 8, rng);
        for (std::size_t i = 0; i < patch.hq.size(); ++i) EXPECT_DOUBLE_EQ(patch.lq[i] - patch.hq[i], 1.0);
        // each coded value identifies its source pixel; rows of the crop are contiguous
        const double step = 1.0 / pair.hq.size();
        EXPECT_NEAR(patch.hq[1] - patch.hq[0], step, 1e-15);
        EXPECT_NEAR(patch.hq[8] - patch.hq[0], 30 * step, 1e-15);
    }
}

TEST(SamplePatch, SeededAndValidated) {
    const degrade::RestorationPair pair{coded_image(20, 20), coded_image(20, 20), {}};
    Rng a(3), b(3);
    EXPECT_EQ(data::sample_patch(pair, 8, a).hq.storage(), data::sample_patch(pair, 8, b).hq.storage());
    EXPECT_THROW(data::sample_patch(pair, 21, a), std::invalid_argument);
}

TEST(Dihedral, QuarterTurnIsCounterClockwise) {
    const Tensor img({1, 2, 2}, {1, 2, 3, 4});
    EXPECT_EQ(data::dihedral(img, 0).storage(), img.storage());
    EXPECT_EQ(data::dihedral(img, 1).storage(), (std::vector<double>{2, 4, 1, 3}));
    EXPECT_EQ(data::dihedral(img, 2).storage(), (std::vector<double>{4, 3, 2, 1}));
    EXPECT_EQ(data::dihedral(img, 4).storage(), (std::vector<double>{2, 1, 4, 3}));
}

TEST(Dihedral, InverseRestoresAndElementsAreDistinct) {
    const Tensor img = coded_image(5, 5);
    std::set<std::vector<double>> seen;
    for (int k = 0; k < data::kDihedralCount; ++k) {
        const Tensor t = data::dihedral(img, k);
        EXPECT_EQ(data::dihedral(t, data::dihedral_inverse(k)).storage(), img.storage()) << "k=" << k;
        seen.insert(t.storage());
    }
    EXPECT_EQ(seen.size(), 8u);
    EXPECT_THROW(data::dihedral(coded_image(4, 6), 1), std::invalid_argument);
    EXPECT_NO_THROW(data::dihedral(coded_image(4, 6), 0));
}

TEST(Augment, SameTransformOnBothAndUniform) {
    Rng rng(4);
    const data::PatchPair patch{coded_image(6, 6), coded_image(6, 6, 1.0)};
    std::array<int, 8> counts{};
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        int k = -1;
        const auto out = data::augment(patch, rng, &k);
        ++counts.at(k);
        if (i < 50) {
            EXPECT_EQ(out.hq.storage(), data::dihedral(patch.hq, k).storage());
            for (std::size_t j = 0; j < out.hq.size(); ++j) EXPECT_DOUBLE_EQ(out.lq[j] - out.hq[j], 1.0);
        }
    }
    for (int c : counts) EXPECT_NEAR(static_cast<double>(c) / draws, 0.125, 0.02);
}

TEST(Synthetic, DeterministicAndInRange) {
    degrade::DegradationSpec spec;
    const auto a = data::synthetic_pairs(3, 16, spec, 5), b = data::synthetic_pairs(3, 16, spec, 5);
    ASSERT_EQ(a.size(), 3u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].hq.storage(), b[i].hq.storage());
        EXPECT_EQ(a[i].lq.storage(), b[i].lq.storage());
        for (double v : a[i].hq.values()) {
            EXPECT_GE(v, 0.05);
            EXPECT_LE(v, 0.95);
        }
    }
    EXPECT_NE(a[0].hq.storage(), a[1].hq.storage());
}

// ---- config and schedule -------------------------------------------------------------------

TEST(TrainConfigTest, PresetsAndValidation) {
    const TrainConfig full = full_preset();
    EXPECT_EQ(full.patch_size, 128u);
    EXPECT_EQ(full.batch_size, 64u);
    EXPECT_EQ(full.total_iters, 500000u);
    EXPECT_EQ(full.timesteps, 1000);
    EXPECT_NO_THROW(full.validate());
    const TrainConfig desk = desk_preset();
    EXPECT_EQ(desk.patch_size, 32u);
    EXPECT_EQ(desk.synthetic_count, 8u);
    EXPECT_EQ(desk.degradation.sigma, 25.0);
    EXPECT_NO_THROW(desk.validate());
    EXPECT_THROW(preset("huge"), std::invalid_argument);

    TrainConfig bad = desk;
    bad.patch_size = 24;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = desk;
    bad.lr_end = bad.lr_start;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = desk;
    bad.lr_end = 0.0;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(TrainConfigTest, JsonRoundTripAndUnknownKeys) {
    TrainConfig c = tiny_train_config();
    c.prediction_target = diffusion::PredictionTarget::v_parameterization;
    c.degradation.kind = degrade::DegradationKind::rain_streaks;
    c.grad_clip = 1.5;
    const TrainConfig back = config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    EXPECT_THROW(config_from_json(nlohmann::json{{"patch_sizes", 32}}), std::invalid_argument);
    EXPECT_THROW(config_from_json(nlohmann::json{{"net", {{"width", 3}}}}), std::invalid_argument);
    const TrainConfig overlay = config_from_json(nlohmann::json{{"batch_size", 3}}, c);
    EXPECT_EQ(overlay.batch_size, 3u);
    EXPECT_EQ(overlay.patch_size, c.patch_size);
    EXPECT_THROW(load_config("/nonexistent/cmir.json"), std::runtime_error);
}

TEST(LrSchedule, EndpointsAndMidpoint) {
    TrainConfig c;
    c.total_iters = 1000;
    EXPECT_DOUBLE_EQ(lr_at(0, c), 3e-4);
    EXPECT_NEAR(lr_at(1000, c), 1e-6, 1e-18);
    EXPECT_NEAR(lr_at(500, c), (3e-4 + 1e-6) / 2.0, 1e-18);
    EXPECT_GT(lr_at(250, c), lr_at(251, c));
    EXPECT_THROW(lr_at(1001, c), std::out_of_range);
}

// ---- optimizer -----------------------------------------------------------------------------

TEST(Adam, MatchesScalarReference) {
    nn::ParamStore store;
    const nn::Var w = store.add("w", Tensor({2}, {0.5, -1.0}));
    AdamState state;
    const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double ref[2] = {0.5, -1.0}, m[2] = {0, 0}, v[2] = {0, 0};
    for (int step = 1; step <= 5; ++step) {
        store.zero_grad();
        // loss = sum(w^3) so the gradient changes every step
        const double g[2] = {3 * ref[0] * ref[0], 3 * ref[1] * ref[1]};
        nn::backward(nn::dot(nn::mul(nn::mul(w, w), w), Tensor({2}, 1.0)));
        adam_update(store, state, lr, b1, b2, eps);
        for (int i = 0; i < 2; ++i) {
            m[i] = b1 * m[i] + (1 - b1) * g[i];
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
            const double mh = m[i] / (1 - std::pow(b1, step)), vh = v[i] / (1 - std::pow(b2, step));
            ref[i] -= lr * mh / (std::sqrt(vh) + eps);
            EXPECT_NEAR(w.value()[i], ref[i], 1e-14) << "step " << step;
        }
    }
    EXPECT_EQ(state.step, 5u);
}

TEST(Adam, FirstStepMovesByLr) {
    nn::ParamStore store;
    const nn::Var w = store.add("w", Tensor({1}, {2.0}));
    AdamState state;
    nn::backward(nn::dot(w, Tensor({1}, {-4.0})));
    adam_update(store, state, 0.1, 0.9, 0.999, 0.0);
    EXPECT_NEAR(w.value()[0], 2.1, 1e-15);
}

TEST(GradClip, ScalesToMaxNorm) {
    nn::ParamStore store;
    const nn::Var w = store.add("w", Tensor({2}, {1.0, 1.0}));
    nn::backward(nn::dot(w, Tensor({2}, {3.0, 4.0})));
    EXPECT_DOUBLE_EQ(clip_grad_norm(store, 1.0), 5.0);
    EXPECT_NEAR(w.grad()[0], 0.6, 1e-15);
    EXPECT_NEAR(w.grad()[1], 0.8, 1e-15);
    EXPECT_NEAR(clip_grad_norm(store, 10.0), 1.0, 1e-15);
    EXPECT_NEAR(w.grad()[1], 0.8, 1e-15);
}

// ---- training step ---------------------------------------------------------------------------

TEST(TrainStep, InitialNoiseLossIsHalfNormalMean) {
    TrainConfig c = desk_preset();
    TrainState state = init_state(c);
    const auto schedule = diffusion::NoiseSchedule::cosine(c.timesteps);
    const auto dataset = make_dataset(c);
    const auto batch = draw_batch(dataset, c, state.rng);
    const StepResult r = train_step(batch, state, schedule, lr_at(0, c));
    EXPECT_EQ(r.timesteps.size(), c.batch_size);
    for (int t : r.timesteps) {
        EXPECT_GE(t, 1);
        EXPECT_LE(t, c.timesteps);
    }
    EXPECT_NEAR(r.loss, std::sqrt(2.0 / std::numbers::pi), 0.02 * std::sqrt(2.0 / std::numbers::pi));
}

TEST(TrainStep, InitialImageLossIsMeanAbsImage) {
    // with a zero head the x0 prediction is 0, so the loss is mean |2 hq - 1|
    TrainConfig c = tiny_train_config();
    c.prediction_target = diffusion::PredictionTarget::image_start;
    TrainState state = init_state(c);
    const auto schedule = diffusion::NoiseSchedule::cosine(c.timesteps);
    const auto batch = draw_batch(make_dataset(c), c, state.rng);
    double expected = 0.0;
    std::size_t count = 0;
    for (const auto& p : batch) {
        for (double v : p.hq.values()) {
            expected += std::abs(2.0 * v - 1.0);
            ++count;
        }
    }
    EXPECT_NEAR(train_step(batch, state, schedule, 1e-3).loss, expected / count, 1e-12);
}

TEST(TrainStep, ZeroLrLeavesWeights) {
    const TrainConfig c = tiny_train_config();
    TrainState state = init_state(c);
    const net::Model reference(c.net, c.seed);
    const auto schedule = diffusion::NoiseSchedule::cosine(c.timesteps);
    const auto dataset = make_dataset(c);
    for (int i = 0; i < 2; ++i) train_step(draw_batch(dataset, c, state.rng), state, schedule, 0.0);
    EXPECT_TRUE(same_weights(state.model, reference));
    train_step(draw_batch(dataset, c, state.rng), state, schedule, 1e-3);
    EXPECT_FALSE(same_weights(state.model, reference));
}

TEST(TrainStep, NonFiniteLossAborts) {
    const TrainConfig c = tiny_train_config();
    TrainState state = init_state(c);
    state.model.params().get("decoder.head.bias").mutable_value()[0] = std::nan("");
    const auto schedule = diffusion::NoiseSchedule::cosine(c.timesteps);
    const auto batch = draw_batch(make_dataset(c), c, state.rng);
    try {
        train_step(batch, state, schedule, 1e-3);
        FAIL() << "expected an error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("non-finite loss"), std::string::npos);
    }
}

TEST(TrainStep, EmaTracksWeights) {
    TrainConfig c = tiny_train_config();
    c.ema_decay = 0.9;
    TrainState state = init_state(c);
    const std::vector<Tensor> before = state.ema;
    const auto schedule = diffusion::NoiseSchedule::cosine(c.timesteps);
    train_step(draw_batch(make_dataset(c), c, state.rng), state, schedule, 1e-2);
    const auto& entries = state.model.params().entries();
    for (std::size_t p = 0; p < entries.size(); p += 7) {
        for (std::size_t i = 0; i < before[p].size(); ++i) {
            EXPECT_DOUBLE_EQ(state.ema[p][i], 0.9 * before[p][i] + 0.1 * entries[p].second.value()[i]);
        }
    }
}

// ---- fit and checkpoints ---------------------------------------------------------------------

TEST(Fit, SameSeedSameLosses) {
    const TrainConfig c = tiny_train_config();
    const auto a = fit(c), b = fit(c);
    ASSERT_EQ(a.losses.size(), c.total_iters);
    EXPECT_EQ(a.losses, b.losses);
    EXPECT_TRUE(same_weights(a.state.model, b.state.model));
    TrainConfig other = c;
    other.seed = c.seed + 1;
    EXPECT_NE(fit(other).losses, a.losses);
}

TEST(Fit, ZeroItersWritesInitialCheckpoint) {
    TempDir dir("fit0");
    TrainConfig c = tiny_train_config();
    c.total_iters = 0;
    const auto result = fit(c, {dir.path, std::nullopt, std::nullopt, nullptr});
    EXPECT_TRUE(result.losses.empty());
    EXPECT_EQ(result.state.iteration, 0u);
    ASSERT_TRUE(fs::exists(checkpoint_path(dir.path, 0)));
    EXPECT_TRUE(fs::exists(dir.path / "config.json"));
    const TrainState loaded = load_checkpoint(checkpoint_path(dir.path, 0));
    EXPECT_TRUE(same_weights(loaded.model, net::Model(c.net, c.seed)));
}

TEST(Fit, ResumeEqualsUninterrupted) {
    TempDir dir("resume");
    TrainConfig c = tiny_train_config();
    c.total_iters = 6;
    c.checkpoint_every = 3;
    const auto straight = fit(c);

    const auto part1 = fit(c, {dir.path, std::nullopt, 3, nullptr});
    const auto part2 = fit(c, {dir.path, checkpoint_path(dir.path, 3), std::nullopt, nullptr});
    std::vector<double> joined = part1.losses;
    joined.insert(joined.end(), part2.losses.begin(), part2.losses.end());
    EXPECT_EQ(joined, straight.losses);
    EXPECT_TRUE(same_weights(part2.state.model, straight.state.model));

    std::ifstream csv(dir.path / "metrics.csv");
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "iteration,loss,lr");
    int rows = 0;
    while (std::getline(csv, line)) ++rows;
    EXPECT_EQ(rows, 6);
    EXPECT_TRUE(fs::exists(checkpoint_path(dir.path, 6)));
}

TEST(Checkpoint, RoundTripIsBitExact) {
    TempDir dir("ckpt");
    TrainConfig c = tiny_train_config();
    c.total_iters = 2;
    c.ema_decay = 0.5;
    const auto result = fit(c);
    const fs::path a = dir.path / "a.cmir", b = dir.path / "b.cmir";
    save_checkpoint(result.state, a);
    const TrainState loaded = load_checkpoint(a);
    EXPECT_TRUE(same_weights(loaded.model, result.state.model));
    EXPECT_EQ(loaded.iteration, 2u);
    EXPECT_EQ(loaded.adam.step, result.state.adam.step);
    EXPECT_EQ(loaded.rng.state(), result.state.rng.state());
    ASSERT_EQ(loaded.ema.size(), result.state.ema.size());
    EXPECT_EQ(loaded.ema.back().storage(), result.state.ema.back().storage());
    save_checkpoint(loaded, b);
    EXPECT_EQ(slurp(a), slurp(b));
}

TEST(Checkpoint, EditedShapeNamesTheWeight) {
    TempDir dir("ckpt_shape");
    const fs::path p = dir.path / "c.cmir";
    save_checkpoint(init_state(tiny_train_config()), p);
    edit_manifest(p, [](nlohmann::json& m) {
        for (auto& t : m["tensors"]) {
            if (t["name"] == "param/decoder.head.weight") t["shape"] = {3, 5, 1, 1};
        }
    });
    try {
        load_checkpoint(p);
        FAIL() << "expected an error";
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("shape mismatch"), std::string::npos) << msg;
        EXPECT_NE(msg.find("decoder.head.weight"), std::string::npos) << msg;
    }
}

TEST(Checkpoint, FutureVersionRejected) {
    TempDir dir("ckpt_version");
    const fs::path p = dir.path / "c.cmir";
    save_checkpoint(init_state(tiny_train_config()), p);
    edit_manifest(p, [](nlohmann::json& m) { m["format_version"] = kCheckpointVersion + 1; });
    try {
        load_checkpoint(p);
        FAIL() << "expected an error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("unsupported format_version"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, TruncationAndMismatchedNetwork) {
    TempDir dir("ckpt_trunc");
    const fs::path p = dir.path / "c.cmir";
    const TrainConfig c = tiny_train_config();
    save_checkpoint(init_state(c), p);
    net::NetConfig wider = c.net;
    wider.base_channels = 8;
    EXPECT_THROW(load_checkpoint(p, wider), std::runtime_error);
    const std::string bytes = slurp(p);
    spit(p, bytes.substr(0, bytes.size() - 8));
    EXPECT_THROW(load_checkpoint(p), std::runtime_error);
    spit(p, bytes.substr(0, 20));
    EXPECT_THROW(load_checkpoint(p), std::runtime_error);
    spit(p, "not a checkpoint at all");
    EXPECT_THROW(load_checkpoint(p), std::runtime_error);
}

// ---- inference -------------------------------------------------------------------------------

TEST(Restore, PadsCropsAndCountsCalls) {
    const TrainConfig c = tiny_train_config();
    const net::Model model(c.net, c.seed);
    const auto schedule = diffusion::NoiseSchedule::cosine(c.timesteps);
    Rng rng(1);
    const Tensor lq = coded_image(20, 27);
    RestoreOptions opts;
    opts.sampling.steps = 5;
    int calls = 0;
    opts.on_model_call = [&](int) { ++calls; };
    const Tensor out = restore(model, lq, schedule, rng, opts);
    EXPECT_EQ(out.shape(), lq.shape());
    EXPECT_EQ(calls, 5);
    for (double v : out.values()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    Rng again(1);
    EXPECT_EQ(restore(model, lq, schedule, again, opts).storage(), out.storage());
}
