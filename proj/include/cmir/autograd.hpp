// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cmir/tensor.hpp"

namespace cmir::nn {

struct Node;

/// Handle to a value in the reverse-mode graph. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(m_node); }
    const Tensor& value() const;
    /// Writable access to the shared value (the handle itself stays const).
    Tensor& mutable_value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t dim(std::size_t i) const { return value().dim(i); }
    std::size_t size() const { return value().size(); }

    bool requires_grad() const;
    /// Gradient accumulated by backward(); zero-sized until first touched.
    const Tensor& grad() const;
    /// Lazily allocated zero gradient buffer, used by op backward closures.
    Tensor& grad_buffer() const;
    void zero_grad() const;

    const std::shared_ptr<Node>& node() const { return m_node; }

private:
    explicit Var(std::shared_ptr<Node> node) : m_node(std::move(node)) {}
    friend Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(const Tensor&)> backward);

    std::shared_ptr<Node> m_node;
};

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Tensor&)> backward;
};

/// Creates the result of an op. `backward` receives the output gradient
/// and accumulates into the inputs' grad_buffer(). When no input needs a
/// gradient, or grad mode is off, no graph edge is recorded.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(const Tensor&)> backward);

/// Runs reverse accumulation from a scalar output.
void backward(const Var& loss);

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool m_previous;
};

/// Named trainable tensors in registration order.
class ParamStore {
public:
    Var add(const std::string& name, Tensor init);
    const Var& get(const std::string& name) const;
    bool contains(const std::string& name) const;

    const std::vector<std::pair<std::string, Var>>& entries() const { return m_entries; }
    std::size_t count() const;
    void zero_grad() const;

private:
    std::vector<std::pair<std::string, Var>> m_entries;
};

// ---- ops -------------------------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var silu(const Var& x);
Var softplus(const Var& x);

/// x: (..., in), weight: (out, in), bias: (out) or undefined.
Var linear(const Var& x, const Var& weight, const Var& bias);

/// x: (N, Ci, H, W), weight: (Co, Ci, k, k), zero padding.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding);

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps = 1e-5);

/// Normalizes over the last axis.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

/// x: (N, C, H, W), scale_shift: (N, 2C). y = x * (1 + scale) + shift.
Var modulate(const Var& x, const Var& scale_shift);

Var concat_channels(const std::vector<Var>& parts);
Var upsample_nearest2x(const Var& x);

/// (N, C, H, W) -> (N, H*W, C), row-major spatial order.
Var to_tokens(const Var& x);
/// (N, H*W, C) -> (N, C, H, W).
Var from_tokens(const Var& tokens, std::size_t height, std::size_t width);
/// Reverses the sequence axis of (N, L, D).
Var flip_sequence(const Var& x);
/// Slice [start, start+len) of the last axis.
Var slice_last(const Var& x, std::size_t start, std::size_t len);

/// Causal depthwise 1-D convolution over (N, L, D); weight (D, K), bias (D).
Var causal_depthwise_conv1d(const Var& x, const Var& weight, const Var& bias);

Var sum(const Var& x);
Var mean_abs_error(const Var& pred, const Tensor& target);
/// sum(x * probe) for a fixed probe tensor; handy for gradient checks.
Var dot(const Var& x, const Tensor& probe);

}  // namespace cmir::nn
