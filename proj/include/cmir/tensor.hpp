// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace cmir {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array of doubles. Feature maps use NCHW, token
/// sequences use (batch, length, channels).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    const Shape& shape() const { return m_shape; }
    std::size_t rank() const { return m_shape.size(); }
    std::size_t dim(std::size_t i) const { return m_shape.at(i); }
    std::size_t size() const { return m_values.size(); }
    bool empty() const { return m_values.empty(); }

    double* ptr() { return m_values.data(); }
    const double* ptr() const { return m_values.data(); }
    std::span<double> values() { return m_values; }
    std::span<const double> values() const { return m_values; }
    std::vector<double>& storage() { return m_values; }
    const std::vector<double>& storage() const { return m_values; }

    double& operator[](std::size_t i) { return m_values[i]; }
    double operator[](std::size_t i) const { return m_values[i]; }

    /// Same values, new shape. Element count must match.
    Tensor reshaped(Shape shape) const;

    void fill(double value);

private:
    Shape m_shape;
    std::vector<double> m_values;
};

/// Throws std::invalid_argument naming `what` when shapes differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

double max_abs_diff(std::span<const double> a, std::span<const double> b);

/// max|a-b| / max(max|b|, floor); `b` is the reference.
double max_rel_error(std::span<const double> a, std::span<const double> b, double floor = 1e-30);

}  // namespace cmir
