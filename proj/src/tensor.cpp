// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmir/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>

namespace cmir {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_to_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

Tensor::Tensor(Shape shape, double fill)
    : m_shape(std::move(shape)), m_values(shape_numel(m_shape), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : m_shape(std::move(shape)), m_values(std::move(values)) {
    if (m_values.size() != shape_numel(m_shape)) {
        throw std::invalid_argument("tensor: " + std::to_string(m_values.size()) +
                                    " values do not fill shape " + shape_to_string(m_shape));
    }
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != m_values.size()) {
        throw std::invalid_argument("tensor: cannot reshape " + shape_to_string(m_shape) + " to " +
                                    shape_to_string(shape));
    }
    return Tensor(std::move(shape), m_values);
}

void Tensor::fill(double value) { std::fill(m_values.begin(), m_values.end(), value); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_to_string(a.shape()) +
                                    " vs " + shape_to_string(b.shape()));
    }
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("max_abs_diff: length mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double max_rel_error(std::span<const double> a, std::span<const double> b, double floor) {
    double scale = floor;
    for (double v : b) scale = std::max(scale, std::abs(v));
    return max_abs_diff(a, b) / scale;
}

}  // namespace cmir
