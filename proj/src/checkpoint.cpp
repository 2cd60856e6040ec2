// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

// Container layout: the 8-byte magic "CMIRCKPT", the manifest length as a
// little-endian uint64, the JSON manifest, then the raw little-endian
// float64 buffers at the offsets the manifest lists.

#include "cmir/pipeline.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>

namespace cmir::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'C', 'M', 'I', 'R', 'C', 'K', 'P', 'T'};
constexpr const char* kDtype = "float64_le";

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    return v;
}

void put_doubles(std::string& out, const Tensor& t) {
    for (double d : t.values()) {
        const auto bits = std::bit_cast<std::uint64_t>(d);
        put_u64(out, bits);
    }
}

struct Entry {
    std::string name;
    const Tensor* tensor;
};

[[noreturn]] void fail(const fs::path& path, const std::string& message) {
    throw std::runtime_error("checkpoint " + path.string() + ": " + message);
}

}  // namespace

void save_checkpoint(const TrainState& state, const fs::path& path) {
    std::vector<Entry> entries;
    const auto& params = state.model.params().entries();
    for (const auto& [name, var] : params) entries.push_back({"param/" + name, &var.value()});
    for (std::size_t p = 0; p < state.adam.m.size(); ++p) entries.push_back({"adam.m/" + params[p].first, &state.adam.m[p]});
    for (std::size_t p = 0; p < state.adam.v.size(); ++p) entries.push_back({"adam.v/" + params[p].first, &state.adam.v[p]});
    for (std::size_t p = 0; p < state.ema.size(); ++p) entries.push_back({"ema/" + params[p].first, &state.ema[p]});

    json tensors = json::array();
    std::string payload;
    for (const auto& e : entries) {
        tensors.push_back({{"name", e.name},
                           {"shape", e.tensor->shape()},
                           {"dtype", kDtype},
                           {"offset", payload.size()},
                           {"bytes", e.tensor->size() * sizeof(double)}});
        put_doubles(payload, *e.tensor);
    }
    const json manifest{{"format_version", kCheckpointVersion},
                        {"iteration", state.iteration},
                        {"schedule", diffusion::NoiseSchedule::cosine(state.config.timesteps).descriptor()},
                        {"config", to_json(state.config)},
                        {"rng_state", state.rng.state()},
                        {"adam_step", state.adam.step},
                        {"tensors", tensors}};
    const std::string text = manifest.dump();

    std::string bytes(kMagic, sizeof(kMagic));
    put_u64(bytes, text.size());
    bytes += text;
    bytes += payload;

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) fail(path, "write failed");
    }
    fs::rename(tmp, path);
}

namespace {

struct Container {
    std::string bytes;
    json manifest;
    std::size_t payload_offset = 0;
};

Container read_container(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(path, "cannot open");
    Container c;
    c.bytes.assign(std::istreambuf_iterator<char>(in), {});
    if (c.bytes.size() < 16 || c.bytes.compare(0, 8, kMagic, 8) != 0) fail(path, "not a cmir checkpoint (bad magic)");
    const std::uint64_t len = get_u64(c.bytes, 8);
    if (c.bytes.size() - 16 < len) fail(path, "truncated manifest");
    try {
        c.manifest = json::parse(c.bytes.substr(16, len));
    } catch (const json::exception& e) {
        fail(path, std::string("malformed manifest: ") + e.what());
    }
    c.payload_offset = 16 + len;
    return c;
}

TrainState load_container(const fs::path& path, const Container& c, const net::NetConfig* net) {
    const std::string& bytes = c.bytes;
    const json& manifest = c.manifest;
    const std::size_t base = c.payload_offset;

    try {
        const auto version = manifest.at("format_version").get<std::uint32_t>();
        if (version != kCheckpointVersion) {
            fail(path, "unsupported format_version " + std::to_string(version) + " (this build reads version " +
                           std::to_string(kCheckpointVersion) + ")");
        }
        TrainConfig config = config_from_json(manifest.at("config"));
        if (net) config.net = *net;
        const std::string schedule = manifest.at("schedule").get<std::string>();
        if (schedule != diffusion::NoiseSchedule::cosine(config.timesteps).descriptor()) {
            fail(path, "schedule '" + schedule + "' does not match T = " + std::to_string(config.timesteps));
        }

        std::map<std::string, json> tensors;
        for (const auto& t : manifest.at("tensors")) tensors[t.at("name").get<std::string>()] = t;

        auto read = [&](const std::string& name, const Shape& expected, Tensor& dst) {
            const auto it = tensors.find(name);
            if (it == tensors.end()) fail(path, "missing tensor '" + name + "'");
            const json& t = it->second;
            const auto shape = t.at("shape").get<Shape>();
            if (shape != expected) {
                fail(path, "shape mismatch for weight '" + name + "': checkpoint " + shape_to_string(shape) +
                               " vs model " + shape_to_string(expected));
            }
            if (t.at("dtype").get<std::string>() != kDtype) fail(path, "unsupported dtype for '" + name + "'");
            const auto offset = t.at("offset").get<std::uint64_t>();
            const auto nbytes = t.at("bytes").get<std::uint64_t>();
            if (nbytes != shape_numel(shape) * sizeof(double)) fail(path, "byte count mismatch for '" + name + "'");
            if (base + offset + nbytes > bytes.size()) fail(path, "truncated payload at '" + name + "'");
            dst = Tensor(shape);
            for (std::size_t i = 0; i < dst.size(); ++i) {
                dst[i] = std::bit_cast<double>(get_u64(bytes, base + offset + i * sizeof(double)));
            }
            tensors.erase(it);
        };

        TrainState state = init_state(config);
        state.ema.clear();
        const auto& params = state.model.params().entries();
        for (const auto& [name, var] : params) read("param/" + name, var.shape(), var.mutable_value());
        state.adam.step = manifest.at("adam_step").get<std::uint64_t>();
        if (tensors.count("adam.m/" + params.front().first)) {
            state.adam.m.resize(params.size());
            state.adam.v.resize(params.size());
            for (std::size_t p = 0; p < params.size(); ++p) {
                read("adam.m/" + params[p].first, params[p].second.shape(), state.adam.m[p]);
                read("adam.v/" + params[p].first, params[p].second.shape(), state.adam.v[p]);
            }
        }
        if (tensors.count("ema/" + params.front().first)) {
            state.ema.resize(params.size());
            for (std::size_t p = 0; p < params.size(); ++p) {
                read("ema/" + params[p].first, params[p].second.shape(), state.ema[p]);
            }
        }
        if (!tensors.empty()) fail(path, "unexpected tensor '" + tensors.begin()->first + "'");
        state.iteration = manifest.at("iteration").get<std::uint64_t>();
        state.rng.set_state(manifest.at("rng_state").get<std::string>());
        return state;
    } catch (const json::exception& e) {
        fail(path, std::string("malformed manifest: ") + e.what());
    }
}

}  // namespace

TrainState load_checkpoint(const fs::path& path) { return load_container(path, read_container(path), nullptr); }

TrainState load_checkpoint(const fs::path& path, const net::NetConfig& net) {
    return load_container(path, read_container(path), &net);
}

}  // namespace cmir::pipeline
