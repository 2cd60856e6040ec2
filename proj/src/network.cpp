// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmir/network.hpp"

#include <cmath>
#include <stdexcept>

#include "cmir/init.hpp"

namespace cmir::net {

using nn::Var;

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

struct Builder {
    nn::ParamStore& store;
    Rng& rng;

    Var conv(const std::string& name, std::size_t in_c, std::size_t out_c, std::size_t k) {
        return store.add(name + ".weight", init::variance_scaling({out_c, in_c, k, k}, in_c * k * k, rng));
    }
    Var zeros(const std::string& name, Shape shape) { return store.add(name, Tensor(std::move(shape))); }
    Var ones(const std::string& name, Shape shape) { return store.add(name, Tensor(std::move(shape), 1.0)); }
    Var linear(const std::string& name, std::size_t in, std::size_t out) {
        return store.add(name + ".weight", init::variance_scaling({out, in}, in, rng));
    }

    TsfiWeights tsfi(const std::string& p, std::size_t c, std::size_t d_t) {
        TsfiWeights w;
        w.time_w = linear(p + ".time", d_t, 2 * c);
        w.time_b = zeros(p + ".time.bias", {2 * c});
        w.proj_w = conv(p + ".proj", c, c, 3);
        w.proj_b = zeros(p + ".proj.bias", {c});
        w.norm_gamma = ones(p + ".norm.gamma", {c});
        w.norm_beta = zeros(p + ".norm.beta", {c});
        w.out_w = conv(p + ".out", c, c, 1);
        w.out_b = zeros(p + ".out.bias", {c});
        return w;
    }

    VssWeights vss(const std::string& p, std::size_t c, const NetConfig& cfg) {
        VssWeights w;
        w.tsfi1 = tsfi(p + ".tsfi1", c, cfg.time_dim);
        w.tsfi2 = tsfi(p + ".tsfi2", c, cfg.time_dim);
        w.mamba.norm_gamma = ones(p + ".mamba.norm.gamma", {c});
        w.mamba.norm_beta = zeros(p + ".mamba.norm.beta", {c});
        w.mamba.block = ssm::MambaBlockWeights::create(store, p + ".mamba.block", c, cfg.state_size, rng);
        return w;
    }

    BranchWeights branch(const std::string& p, const NetConfig& cfg) {
        BranchWeights w;
        w.stem_w = conv(p + ".stem", cfg.input_channels, cfg.base_channels, 7);
        w.stem_b = zeros(p + ".stem.bias", {cfg.base_channels});
        for (std::size_t s = 0; s < kStages; ++s) {
            const std::size_t in_c = cfg.level_width(s), out_c = cfg.level_width(s + 1);
            const std::string sp = p + ".stage" + std::to_string(s + 1);
            for (std::size_t b = 0; b < cfg.stage_depths[s]; ++b) {
                w.stages[s].push_back(vss(sp + ".block" + std::to_string(b), in_c, cfg));
            }
            w.down_w[s] = conv(sp + ".down", in_c, out_c, 3);
            w.down_b[s] = zeros(sp + ".down.bias", {out_c});
        }
        return w;
    }
};

Var conv_bias(const Var& x, const Var& w, const Var& b, int stride) {
    const int k = static_cast<int>(w.dim(2));
    return nn::conv2d(x, w, b, stride, k / 2);
}

void check_feature(const Var& f, std::size_t channels, const char* op) {
    require(f.value().rank() == 4, std::string(op) + ": expected (N, C, H, W), got " + shape_to_string(f.shape()));
    require(f.dim(1) == channels, std::string(op) + ": expected " + std::to_string(channels) + " channels, got " +
                                      std::to_string(f.dim(1)));
}

FeaturePyramid branch_forward(const Var& image, const Var& f_t, const BranchWeights& w, const char* op) {
    require(image.value().rank() == 4, std::string(op) + ": image must be (N, C, H, W)");
    check_feature(image, w.stem_w.dim(1), op);
    require_divisible(image.dim(2), image.dim(3));
    FeaturePyramid out;
    Var f = conv_bias(image, w.stem_w, w.stem_b, 1);
    out.levels[0] = f;
    for (std::size_t s = 0; s < kStages; ++s) {
        for (const auto& blk : w.stages[s]) f = msvss_forward(f, f_t, blk);
        f = conv_bias(f, w.down_w[s], w.down_b[s], 2);
        out.levels[s + 1] = f;
    }
    return out;
}

}  // namespace

void NetConfig::validate() const {
    require(base_channels >= 1, "net config: base_channels must be at least 1");
    for (std::size_t d : stage_depths) require(d >= 1, "net config: every stage depth must be at least 1");
    require(state_size >= 1, "net config: state_size must be at least 1");
    require(time_dim >= 2 && time_dim % 2 == 0, "net config: time_dim must be a positive even number");
    require(input_channels >= 1, "net config: input_channels must be at least 1");
}

std::size_t NetConfig::level_width(std::size_t level) const {
    require(level <= kStages, "net config: pyramid level out of range");
    return level == 0 ? base_channels : level * base_channels;
}

int group_count(std::size_t channels) {
    for (int g = 8; g > 1; --g) {
        if (channels % static_cast<std::size_t>(g) == 0) return g;
    }
    return 1;
}

void require_divisible(std::size_t height, std::size_t width) {
    if (height == 0 || width == 0 || height % kSpatialMultiple || width % kSpatialMultiple) {
        throw std::invalid_argument("spatial size " + std::to_string(height) + "x" + std::to_string(width) +
                                    " is not a positive multiple of " + std::to_string(kSpatialMultiple));
    }
}

std::vector<double> sinusoidal_embedding(int t, std::size_t dim) {
    require(dim % 2 == 0, "sinusoidal_embedding: dimension must be even");
    const std::size_t half = dim / 2;
    std::vector<double> out(dim);
    for (std::size_t k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
        out[k] = std::cos(t * freq);
        out[half + k] = std::sin(t * freq);
    }
    return out;
}

Var time_encode(const std::vector<int>& timesteps, const TimeEncoderWeights& w) {
    require(!timesteps.empty(), "time_encode: no timesteps");
    const std::size_t dim = w.fc1_w.dim(1);
    Tensor emb({timesteps.size(), dim});
    for (std::size_t i = 0; i < timesteps.size(); ++i) {
        require(timesteps[i] >= 0, "time_encode: negative timestep");
        const auto row = sinusoidal_embedding(timesteps[i], dim);
        std::copy(row.begin(), row.end(), emb.ptr() + i * dim);
    }
    const Var h = nn::silu(nn::linear(Var(std::move(emb)), w.fc1_w, w.fc1_b));
    return nn::linear(h, w.fc2_w, w.fc2_b);
}

Var tsfi_forward(const Var& m, const Var& f_t, const TsfiWeights& w) {
    const std::size_t c = w.channels();
    check_feature(m, c, "tsfi_forward");
    require(f_t.value().rank() == 2 && f_t.dim(0) == m.dim(0), "tsfi_forward: time features must be (N, d_t)");
    const Var mod = nn::modulate(m, nn::linear(f_t, w.time_w, w.time_b));
    Var h = conv_bias(mod, w.proj_w, w.proj_b, 1);
    h = nn::silu(nn::group_norm(h, group_count(c), w.norm_gamma, w.norm_beta));
    return nn::add(m, conv_bias(h, w.out_w, w.out_b, 1));
}

Var mamba_layer_branch(const Var& f, const MambaLayerWeights& w) {
    check_feature(f, w.block.d_model(), "mamba_layer_forward");
    const std::size_t h = f.dim(2), wd = f.dim(3);
    const Var tokens = nn::layer_norm(nn::to_tokens(f), w.norm_gamma, w.norm_beta);
    const Var fwd = ssm::mamba_block(tokens, w.block);
    const Var bwd = nn::flip_sequence(ssm::mamba_block(nn::flip_sequence(tokens), w.block));
    return nn::from_tokens(nn::add(fwd, bwd), h, wd);
}

Var mamba_layer_forward(const Var& f, const MambaLayerWeights& w) { return nn::add(f, mamba_layer_branch(f, w)); }

Var msvss_forward(const Var& f, const Var& f_t, const VssWeights& w) {
    const Var res1 = nn::add(tsfi_forward(tsfi_forward(f, f_t, w.tsfi1), f_t, w.tsfi2), f);
    return nn::add(f, mamba_layer_branch(res1, w.mamba));
}

FeaturePyramid encoder_forward(const Var& image, const Var& f_t, const BranchWeights& w) {
    return branch_forward(image, f_t, w, "encoder_forward");
}

FeaturePyramid controlnet_forward(const Var& condition, const Var& f_t, const BranchWeights& w) {
    return branch_forward(condition, f_t, w, "controlnet_forward");
}

Var decoder_forward(const FeaturePyramid& enc, const FeaturePyramid& ctrl, const Var& f_t, const DecoderWeights& w,
                    FeaturePyramid* decoder_levels) {
    for (std::size_t i = 0; i <= kStages; ++i) {
        require(enc.levels[i].shape() == ctrl.levels[i].shape(),
                "decoder_forward: encoder and controlnet level " + std::to_string(i) + " differ: " +
                    shape_to_string(enc.levels[i].shape()) + " vs " + shape_to_string(ctrl.levels[i].shape()));
    }
    Var f = conv_bias(nn::concat_channels({enc.levels[kStages], ctrl.levels[kStages]}), w.bottom_w, w.bottom_b, 1);
    if (decoder_levels) decoder_levels->levels[kStages] = f;
    for (std::size_t i = kStages; i >= 1; --i) {
        const std::size_t s = i - 1;
        const Var up = conv_bias(nn::upsample_nearest2x(f), w.up_w[s], w.up_b[s], 1);
        f = conv_bias(nn::concat_channels({up, enc.levels[s], ctrl.levels[s]}), w.fuse_w[s], w.fuse_b[s], 1);
        for (const auto& blk : w.stages[s]) f = msvss_forward(f, f_t, blk);
        if (decoder_levels) decoder_levels->levels[s] = f;
    }
    return conv_bias(f, w.head_w, w.head_b, 1);
}

Model::Model(const NetConfig& config, std::uint64_t seed) : m_config(config) {
    m_config.validate();
    Rng rng(seed);
    Builder b{m_params, rng};
    const std::size_t d_t = m_config.time_dim;
    m_time.fc1_w = b.linear("time.fc1", d_t, d_t);
    m_time.fc1_b = b.zeros("time.fc1.bias", {d_t});
    m_time.fc2_w = b.linear("time.fc2", d_t, d_t);
    m_time.fc2_b = b.zeros("time.fc2.bias", {d_t});
    m_encoder = b.branch("encoder", m_config);
    m_control = b.branch("controlnet", m_config);
    const std::size_t w4 = m_config.level_width(kStages);
    m_decoder.bottom_w = b.conv("decoder.bottom", 2 * w4, w4, 1);
    m_decoder.bottom_b = b.zeros("decoder.bottom.bias", {w4});
    for (std::size_t i = kStages; i >= 1; --i) {
        const std::size_t s = i - 1;
        const std::size_t in_c = m_config.level_width(i), out_c = m_config.level_width(i - 1);
        const std::string p = "decoder.stage" + std::to_string(i);
        m_decoder.up_w[s] = b.conv(p + ".up", in_c, out_c, 3);
        m_decoder.up_b[s] = b.zeros(p + ".up.bias", {out_c});
        m_decoder.fuse_w[s] = b.conv(p + ".fuse", 3 * out_c, out_c, 1);
        m_decoder.fuse_b[s] = b.zeros(p + ".fuse.bias", {out_c});
        for (std::size_t k = 0; k < m_config.stage_depths[s]; ++k) {
            m_decoder.stages[s].push_back(b.vss(p + ".block" + std::to_string(k), out_c, m_config));
        }
    }
    m_decoder.head_w = b.zeros("decoder.head.weight", {m_config.input_channels, m_config.base_channels, 1, 1});
    m_decoder.head_b = b.zeros("decoder.head.bias", {m_config.input_channels});
}

Model::Trace Model::trace(const Var& z_t, const std::vector<int>& timesteps, const Var& c_f) const {
    require(z_t.shape() == c_f.shape(), "model_forward: z_t " + shape_to_string(z_t.shape()) +
                                            " and condition " + shape_to_string(c_f.shape()) + " differ");
    require(z_t.value().rank() == 4 && timesteps.size() == z_t.dim(0),
            "model_forward: need one timestep per batch item");
    Trace tr;
    tr.f_t = time_encode(timesteps, m_time);
    tr.encoder = encoder_forward(z_t, tr.f_t, m_encoder);
    tr.controlnet = controlnet_forward(c_f, tr.f_t, m_control);
    tr.output = decoder_forward(tr.encoder, tr.controlnet, tr.f_t, m_decoder, &tr.decoder);
    return tr;
}

Var Model::forward(const Var& z_t, const std::vector<int>& timesteps, const Var& c_f) const {
    return trace(z_t, timesteps, c_f).output;
}

Tensor Model::predict(const Tensor& z_t, int t, const Tensor& c_f) const {
    nn::NoGradGuard guard;
    const std::vector<int> ts(z_t.rank() ? z_t.dim(0) : 0, t);
    return forward(Var(z_t), ts, Var(c_f)).value();
}

// ---- MACs --------------------------------------------------------------------------------

std::uint64_t conv_macs(std::size_t out_h, std::size_t out_w, std::size_t kernel, std::size_t in_c,
                        std::size_t out_c) {
    return static_cast<std::uint64_t>(out_h) * out_w * kernel * kernel * in_c * out_c;
}

namespace {

struct MacCounter {
    const NetConfig& cfg;
    MacReport report;

    void add(std::string name, std::uint64_t macs) {
        report.total += macs;
        report.layers.push_back({std::move(name), macs});
    }

    void tsfi(const std::string& p, std::size_t c, std::size_t h, std::size_t w) {
        add(p + ".time", static_cast<std::uint64_t>(cfg.time_dim) * 2 * c);
        add(p + ".proj", conv_macs(h, w, 3, c, c));
        add(p + ".out", conv_macs(h, w, 1, c, c));
    }

    void vss(const std::string& p, std::size_t c, std::size_t h, std::size_t w) {
        tsfi(p + ".tsfi1", c, h, w);
        tsfi(p + ".tsfi2", c, h, w);
        const std::uint64_t len = static_cast<std::uint64_t>(h) * w;
        const std::uint64_t e = ssm::kMambaExpand * c, n = cfg.state_size;
        // both scan directions run the full block
        const std::uint64_t dirs = 2;
        add(p + ".mamba.in_proj", dirs * len * c * 2 * e);
        add(p + ".mamba.conv", dirs * len * e * ssm::kMambaConvWidth);
        add(p + ".mamba.delta", dirs * len * e * e);
        add(p + ".mamba.bc_proj", dirs * len * e * 2 * n);
        add(p + ".mamba.scan", dirs * len * e * (3 * n + 1));
        add(p + ".mamba.out_proj", dirs * len * e * c);
    }

    void branch(const std::string& p, std::size_t h, std::size_t w) {
        add(p + ".stem", conv_macs(h, w, 7, cfg.input_channels, cfg.base_channels));
        for (std::size_t s = 0; s < kStages; ++s) {
            const std::size_t c = cfg.level_width(s);
            const std::size_t sh = h >> s, sw = w >> s;
            const std::string sp = p + ".stage" + std::to_string(s + 1);
            for (std::size_t b = 0; b < cfg.stage_depths[s]; ++b) vss(sp + ".block" + std::to_string(b), c, sh, sw);
            add(sp + ".down", conv_macs(sh / 2, sw / 2, 3, c, cfg.level_width(s + 1)));
        }
    }
};

}  // namespace

MacReport count_macs(const NetConfig& config, std::size_t height, std::size_t width) {
    config.validate();
    require_divisible(height, width);
    MacCounter mc{config, {}};
    const std::uint64_t d_t = config.time_dim;
    mc.add("time.fc1", d_t * d_t);
    mc.add("time.fc2", d_t * d_t);
    mc.branch("encoder", height, width);
    mc.branch("controlnet", height, width);
    const std::size_t w4 = config.level_width(kStages);
    mc.add("decoder.bottom", conv_macs(height >> kStages, width >> kStages, 1, 2 * w4, w4));
    for (std::size_t i = kStages; i >= 1; --i) {
        const std::size_t s = i - 1;
        const std::size_t in_h = height >> i, in_w = width >> i;
        const std::size_t out_c = config.level_width(s);
        const std::string p = "decoder.stage" + std::to_string(i);
        mc.add(p + ".up", conv_macs(2 * in_h, 2 * in_w, 3, config.level_width(i), out_c));
        mc.add(p + ".fuse", conv_macs(2 * in_h, 2 * in_w, 1, 3 * out_c, out_c));
        for (std::size_t k = 0; k < config.stage_depths[s]; ++k) {
            mc.vss(p + ".block" + std::to_string(k), out_c, 2 * in_h, 2 * in_w);
        }
    }
    mc.add("decoder.head", conv_macs(height, width, 1, config.base_channels, config.input_channels));
    return mc.report;
}

}  // namespace cmir::net
