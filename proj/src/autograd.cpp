// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#include "cmir/autograd.hpp"

// Small products otherwise take a coefficient-wise path whose vectorized
// reductions depend on heap alignment, which breaks run-to-run reproducibility.
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace cmir::nn {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

thread_local bool g_grad_enabled = true;

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::invalid_argument(msg);
}

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus_value(double x) {
    // log(1 + e^x) without overflow
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Column buffer for one sample: rows = Ci*k*k, cols = Ho*Wo.
void im2col(const double* x, std::size_t ci_n, std::size_t h, std::size_t w, int k, int stride, int pad,
            std::size_t ho, std::size_t wo, double* col) {
    const std::size_t plane = ho * wo;
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
        const double* xc = x + ci * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* row = col + ((ci * k + ky) * k + kx) * plane;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long iy = static_cast<long>(oy) * stride - pad + ky;
                    double* out = row + oy * wo;
                    if (iy < 0 || iy >= static_cast<long>(h)) {
                        std::fill(out, out + wo, 0.0);
                        continue;
                    }
                    const double* xrow = xc + iy * w;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const long ix = static_cast<long>(ox) * stride - pad + kx;
                        out[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? 0.0 : xrow[ix];
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, std::size_t ci_n, std::size_t h, std::size_t w, int k, int stride, int pad,
                std::size_t ho, std::size_t wo, double* dx) {
    const std::size_t plane = ho * wo;
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
        double* dxc = dx + ci * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* row = col + ((ci * k + ky) * k + kx) * plane;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long iy = static_cast<long>(oy) * stride - pad + ky;
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    double* dxrow = dxc + iy * w;
                    const double* in = row + oy * wo;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const long ix = static_cast<long>(ox) * stride - pad + kx;
                        if (ix >= 0 && ix < static_cast<long>(w)) dxrow[ix] += in[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

// ---- Var / graph ------------------------------------------------------------

Var::Var(Tensor value, bool requires_grad) : m_node(std::make_shared<Node>()) {
    m_node->value = std::move(value);
    m_node->requires_grad = requires_grad;
}

const Tensor& Var::value() const {
    if (!m_node) throw std::logic_error("var: undefined");
    return m_node->value;
}

Tensor& Var::mutable_value() const {
    if (!m_node) throw std::logic_error("var: undefined");
    return m_node->value;
}

bool Var::requires_grad() const { return m_node && m_node->requires_grad; }

const Tensor& Var::grad() const { return m_node->grad; }

Tensor& Var::grad_buffer() const {
    if (m_node->grad.size() != m_node->value.size()) m_node->grad = Tensor(m_node->value.shape());
    return m_node->grad;
}

void Var::zero_grad() const {
    if (m_node) m_node->grad = Tensor();
}

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(const Tensor&)> backward) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (g_grad_enabled) {
        for (const Var& in : inputs) {
            if (in.requires_grad()) {
                node->requires_grad = true;
                break;
            }
        }
    }
    if (node->requires_grad) {
        node->parents.reserve(inputs.size());
        for (const Var& in : inputs) {
            if (in.requires_grad()) node->parents.push_back(in.node());
        }
        node->backward = std::move(backward);
    }
    return Var(std::move(node));
}

void backward(const Var& loss) {
    require(loss.size() == 1, "backward: loss must be a scalar");
    if (!loss.requires_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS; graphs here are deep (hundreds of ops).
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (!node->backward || node->grad.size() == 0) continue;
        node->backward(node->grad);
    }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : m_previous(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = m_previous; }

// ---- ParamStore ---------------------------------------------------------------

Var ParamStore::add(const std::string& name, Tensor init) {
    require(!contains(name), "param store: duplicate parameter '" + name + "'");
    Var v(std::move(init), true);
    m_entries.emplace_back(name, v);
    return v;
}

const Var& ParamStore::get(const std::string& name) const {
    for (const auto& [n, v] : m_entries) {
        if (n == name) return v;
    }
    throw std::out_of_range("param store: no parameter '" + name + "'");
}

bool ParamStore::contains(const std::string& name) const {
    return std::any_of(m_entries.begin(), m_entries.end(), [&](const auto& e) { return e.first == name; });
}

std::size_t ParamStore::count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : m_entries) n += v.size();
    return n;
}

void ParamStore::zero_grad() const {
    for (const auto& [name, v] : m_entries) v.zero_grad();
}

// ---- elementwise ---------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    const double* pb = b.value().ptr();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
    return make_op(std::move(out), {a, b}, [a, b](const Tensor& g) {
        for (const Var* v : {&a, &b}) {
            if (!v->requires_grad()) continue;
            Tensor& d = v->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
        }
    });
}

Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }

Var mul(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    const double* pb = b.value().ptr();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
    return make_op(std::move(out), {a, b}, [a, b](const Tensor& g) {
        if (a.requires_grad()) {
            Tensor& d = a.grad_buffer();
            const double* pb = b.value().ptr();
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * pb[i];
        }
        if (b.requires_grad()) {
            Tensor& d = b.grad_buffer();
            const double* pa = a.value().ptr();
            for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * pa[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (double& v : out.values()) v *= s;
    return make_op(std::move(out), {a}, [a, s](const Tensor& g) {
        Tensor& d = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += s * g[i];
    });
}

Var silu(const Var& x) {
    Tensor out = x.value();
    for (double& v : out.values()) v = v * sigmoid(v);
    return make_op(std::move(out), {x}, [x](const Tensor& g) {
        Tensor& d = x.grad_buffer();
        const double* px = x.value().ptr();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = sigmoid(px[i]);
            d[i] += g[i] * s * (1.0 + px[i] * (1.0 - s));
        }
    });
}

Var softplus(const Var& x) {
    Tensor out = x.value();
    for (double& v : out.values()) v = softplus_value(v);
    return make_op(std::move(out), {x}, [x](const Tensor& g) {
        Tensor& d = x.grad_buffer();
        const double* px = x.value().ptr();
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * sigmoid(px[i]);
    });
}

// ---- linear / conv --------------------------------------------------------------

Var linear(const Var& x, const Var& weight, const Var& bias) {
    const Shape& xs = x.shape();
    require(xs.size() >= 1 && weight.value().rank() == 2, "linear: bad ranks");
    const std::size_t in = xs.back();
    const std::size_t out_f = weight.dim(0);
    require(weight.dim(1) == in, "linear: weight expects " + std::to_string(weight.dim(1)) + " inputs, got " +
                                     std::to_string(in));
    if (bias.defined()) require(bias.size() == out_f, "linear: bias size mismatch");
    const std::size_t rows = x.size() / in;

    Shape os = xs;
    os.back() = out_f;
    Tensor out(os);
    MapR y(out.ptr(), rows, out_f);
    y.noalias() = CMapR(x.value().ptr(), rows, in) * CMapR(weight.value().ptr(), out_f, in).transpose();
    if (bias.defined()) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().ptr(), out_f);

    return make_op(std::move(out), {x, weight, bias}, [x, weight, bias, rows, in, out_f](const Tensor& g) {
        CMapR gy(g.ptr(), rows, out_f);
        if (x.requires_grad()) {
            MapR(x.grad_buffer().ptr(), rows, in).noalias() += gy * CMapR(weight.value().ptr(), out_f, in);
        }
        if (weight.requires_grad()) {
            MapR(weight.grad_buffer().ptr(), out_f, in).noalias() += gy.transpose() * CMapR(x.value().ptr(), rows, in);
        }
        if (bias.defined() && bias.requires_grad()) {
            double* gb = bias.grad_buffer().ptr();
            for (Eigen::Index r = 0; r < gy.rows(); ++r) {
                for (Eigen::Index c = 0; c < gy.cols(); ++c) gb[c] += gy(r, c);
            }
        }
    });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding) {
    require(x.value().rank() == 4 && weight.value().rank() == 4, "conv2d: expects NCHW input and OIHW weight");
    const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t co = weight.dim(0);
    const int k = static_cast<int>(weight.dim(2));
    require(weight.dim(1) == ci, "conv2d: weight expects " + std::to_string(weight.dim(1)) + " input channels, got " +
                                     std::to_string(ci));
    require(weight.dim(3) == static_cast<std::size_t>(k), "conv2d: square kernels only");
    require(static_cast<long>(h) + 2 * padding >= k && static_cast<long>(w) + 2 * padding >= k,
            "conv2d: input smaller than kernel");
    if (bias.defined()) require(bias.size() == co, "conv2d: bias size mismatch");
    const std::size_t ho = (h + 2 * padding - k) / stride + 1;
    const std::size_t wo = (w + 2 * padding - k) / stride + 1;
    const std::size_t kk = ci * k * k;
    const std::size_t plane = ho * wo;
    const bool pointwise = (k == 1 && stride == 1 && padding == 0);

    Tensor out({n, co, ho, wo});
    std::vector<double> col(pointwise ? 0 : kk * plane);
    CMapR wm(weight.value().ptr(), co, kk);
    for (std::size_t b = 0; b < n; ++b) {
        const double* xb = x.value().ptr() + b * ci * h * w;
        const double* src = xb;
        if (!pointwise) {
            im2col(xb, ci, h, w, k, stride, padding, ho, wo, col.data());
            src = col.data();
        }
        MapR y(out.ptr() + b * co * plane, co, plane);
        y.noalias() = wm * CMapR(src, kk, plane);
        if (bias.defined()) y.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.value().ptr(), co);
    }

    return make_op(std::move(out), {x, weight, bias},
                   [=](const Tensor& g) {
                       std::vector<double> colb(pointwise ? 0 : kk * plane);
                       std::vector<double> dcol(pointwise ? 0 : kk * plane);
                       CMapR wm(weight.value().ptr(), co, kk);
                       for (std::size_t b = 0; b < n; ++b) {
                           CMapR gy(g.ptr() + b * co * plane, co, plane);
                           const double* xb = x.value().ptr() + b * ci * h * w;
                           if (weight.requires_grad()) {
                               const double* src = xb;
                               if (!pointwise) {
                                   im2col(xb, ci, h, w, k, stride, padding, ho, wo, colb.data());
                                   src = colb.data();
                               }
                               MapR(weight.grad_buffer().ptr(), co, kk).noalias() +=
                                   gy * CMapR(src, kk, plane).transpose();
                           }
                           if (bias.defined() && bias.requires_grad()) {
                               double* gb = bias.grad_buffer().ptr();
                               for (Eigen::Index r = 0; r < gy.rows(); ++r) {
                                   double acc = 0.0;
                                   for (Eigen::Index c = 0; c < gy.cols(); ++c) acc += gy(r, c);
                                   gb[r] += acc;
                               }
                           }
                           if (x.requires_grad()) {
                               double* dxb = x.grad_buffer().ptr() + b * ci * h * w;
                               if (pointwise) {
                                   MapR(dxb, ci, plane).noalias() += wm.transpose() * gy;
                               } else {
                                   MapR(dcol.data(), kk, plane).noalias() = wm.transpose() * gy;
                                   col2im_add(dcol.data(), ci, h, w, k, stride, padding, ho, wo, dxb);
                               }
                           }
                       }
                   });
}

// ---- normalization ------------------------------------------------------------------

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps) {
    require(x.value().rank() == 4, "group_norm: expects NCHW");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    require(groups > 0 && c % groups == 0, "group_norm: " + std::to_string(c) + " channels not divisible into " +
                                               std::to_string(groups) + " groups");
    require(gamma.size() == c && beta.size() == c, "group_norm: affine size mismatch");
    const std::size_t cg = c / groups;
    const std::size_t count = cg * hw;

    Tensor out(x.shape());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(n * groups);
    const double* px = x.value().ptr();
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t gi = 0; gi < static_cast<std::size_t>(groups); ++gi) {
            const std::size_t off = (b * c + gi * cg) * hw;
            double mean = 0.0;
            for (std::size_t i = 0; i < count; ++i) mean += px[off + i];
            mean /= static_cast<double>(count);
            double var = 0.0;
            for (std::size_t i = 0; i < count; ++i) var += (px[off + i] - mean) * (px[off + i] - mean);
            var /= static_cast<double>(count);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[b * groups + gi] = is;
            for (std::size_t cc = 0; cc < cg; ++cc) {
                const std::size_t ch = gi * cg + cc;
                const double ga = gamma.value()[ch], be = beta.value()[ch];
                for (std::size_t i = 0; i < hw; ++i) {
                    const std::size_t idx = off + cc * hw + i;
                    xhat[idx] = (px[idx] - mean) * is;
                    out[idx] = xhat[idx] * ga + be;
                }
            }
        }
    }

    return make_op(std::move(out), {x, gamma, beta},
                   [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw, cg, count,
                    groups](const Tensor& g) {
                       for (std::size_t b = 0; b < n; ++b) {
                           for (std::size_t gi = 0; gi < static_cast<std::size_t>(groups); ++gi) {
                               const std::size_t off = (b * c + gi * cg) * hw;
                               double sum_d = 0.0, sum_dx = 0.0;
                               for (std::size_t cc = 0; cc < cg; ++cc) {
                                   const std::size_t ch = gi * cg + cc;
                                   const double ga = gamma.value()[ch];
                                   double dg = 0.0, db = 0.0;
                                   for (std::size_t i = 0; i < hw; ++i) {
                                       const std::size_t idx = off + cc * hw + i;
                                       const double d = g[idx] * ga;
                                       sum_d += d;
                                       sum_dx += d * xhat[idx];
                                       dg += g[idx] * xhat[idx];
                                       db += g[idx];
                                   }
                                   if (gamma.requires_grad()) gamma.grad_buffer()[ch] += dg;
                                   if (beta.requires_grad()) beta.grad_buffer()[ch] += db;
                               }
                               if (!x.requires_grad()) continue;
                               const double is = inv_std[b * groups + gi];
                               const double md = sum_d / static_cast<double>(count);
                               const double mdx = sum_dx / static_cast<double>(count);
                               Tensor& dx = x.grad_buffer();
                               for (std::size_t cc = 0; cc < cg; ++cc) {
                                   const double ga = gamma.value()[gi * cg + cc];
                                   for (std::size_t i = 0; i < hw; ++i) {
                                       const std::size_t idx = off + cc * hw + i;
                                       dx[idx] += is * (g[idx] * ga - md - xhat[idx] * mdx);
                                   }
                               }
                           }
                       }
                   });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const std::size_t c = x.shape().back();
    require(gamma.size() == c && beta.size() == c, "layer_norm: affine size mismatch");
    const std::size_t rows = x.size() / c;
    Tensor out(x.shape());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(rows);
    const double* px = x.value().ptr();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = px + r * c;
        double mean = 0.0;
        for (std::size_t i = 0; i < c; ++i) mean += row[i];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t i = 0; i < c; ++i) var += (row[i] - mean) * (row[i] - mean);
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t i = 0; i < c; ++i) {
            xhat[r * c + i] = (row[i] - mean) * is;
            out[r * c + i] = xhat[r * c + i] * gamma.value()[i] + beta.value()[i];
        }
    }
    return make_op(std::move(out), {x, gamma, beta},
                   [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, c](const Tensor& g) {
                       for (std::size_t r = 0; r < rows; ++r) {
                           double sum_d = 0.0, sum_dx = 0.0;
                           for (std::size_t i = 0; i < c; ++i) {
                               const std::size_t idx = r * c + i;
                               const double d = g[idx] * gamma.value()[i];
                               sum_d += d;
                               sum_dx += d * xhat[idx];
                               if (gamma.requires_grad()) gamma.grad_buffer()[i] += g[idx] * xhat[idx];
                               if (beta.requires_grad()) beta.grad_buffer()[i] += g[idx];
                           }
                           if (!x.requires_grad()) continue;
                           const double md = sum_d / static_cast<double>(c);
                           const double mdx = sum_dx / static_cast<double>(c);
                           Tensor& dx = x.grad_buffer();
                           for (std::size_t i = 0; i < c; ++i) {
                               const std::size_t idx = r * c + i;
                               dx[idx] += inv_std[r] * (g[idx] * gamma.value()[i] - md - xhat[idx] * mdx);
                           }
                       }
                   });
}

Var modulate(const Var& x, const Var& scale_shift) {
    require(x.value().rank() == 4, "modulate: expects NCHW");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    require(scale_shift.value().rank() == 2 && scale_shift.dim(0) == n && scale_shift.dim(1) == 2 * c,
            "modulate: scale/shift must be (N, 2C) with C=" + std::to_string(c));
    Tensor out(x.shape());
    const double* px = x.value().ptr();
    const double* ss = scale_shift.value().ptr();
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double gm = 1.0 + ss[b * 2 * c + ch];
            const double bt = ss[b * 2 * c + c + ch];
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) out[off + i] = gm * px[off + i] + bt;
        }
    }
    return make_op(std::move(out), {x, scale_shift}, [x, scale_shift, n, c, hw](const Tensor& g) {
        const double* px = x.value().ptr();
        const double* ss = scale_shift.value().ptr();
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t off = (b * c + ch) * hw;
                if (x.requires_grad()) {
                    const double gm = 1.0 + ss[b * 2 * c + ch];
                    double* dx = x.grad_buffer().ptr() + off;
                    for (std::size_t i = 0; i < hw; ++i) dx[i] += gm * g[off + i];
                }
                if (scale_shift.requires_grad()) {
                    double dgm = 0.0, dbt = 0.0;
                    for (std::size_t i = 0; i < hw; ++i) {
                        dgm += g[off + i] * px[off + i];
                        dbt += g[off + i];
                    }
                    Tensor& dss = scale_shift.grad_buffer();
                    dss[b * 2 * c + ch] += dgm;
                    dss[b * 2 * c + c + ch] += dbt;
                }
            }
        }
    });
}

// ---- layout ------------------------------------------------------------------------

Var concat_channels(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_channels: no inputs");
    const Shape& s0 = parts.front().shape();
    require(s0.size() == 4, "concat_channels: expects NCHW");
    std::size_t total = 0;
    for (const Var& p : parts) {
        const Shape& s = p.shape();
        require(s.size() == 4 && s[0] == s0[0] && s[2] == s0[2] && s[3] == s0[3],
                "concat_channels: incompatible shapes " + shape_to_string(s0) + " and " + shape_to_string(s));
        total += s[1];
    }
    const std::size_t n = s0[0], hw = s0[2] * s0[3];
    Tensor out({n, total, s0[2], s0[3]});
    std::size_t offset = 0;
    for (const Var& p : parts) {
        const std::size_t c = p.dim(1);
        for (std::size_t b = 0; b < n; ++b) {
            std::copy_n(p.value().ptr() + b * c * hw, c * hw, out.ptr() + (b * total + offset) * hw);
        }
        offset += c;
    }
    return make_op(std::move(out), parts, [parts, n, hw, total](const Tensor& g) {
        std::size_t offset = 0;
        for (const Var& p : parts) {
            const std::size_t c = p.dim(1);
            if (p.requires_grad()) {
                double* d = p.grad_buffer().ptr();
                for (std::size_t b = 0; b < n; ++b) {
                    const double* src = g.ptr() + (b * total + offset) * hw;
                    for (std::size_t i = 0; i < c * hw; ++i) d[b * c * hw + i] += src[i];
                }
            }
            offset += c;
        }
    });
}

Var upsample_nearest2x(const Var& x) {
    require(x.value().rank() == 4, "upsample: expects NCHW");
    const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor out({x.dim(0), x.dim(1), 2 * h, 2 * w});
    for (std::size_t p = 0; p < nc; ++p) {
        const double* src = x.value().ptr() + p * h * w;
        double* dst = out.ptr() + p * 4 * h * w;
        for (std::size_t y = 0; y < 2 * h; ++y) {
            for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
        }
    }
    return make_op(std::move(out), {x}, [x, nc, h, w](const Tensor& g) {
        double* d = x.grad_buffer().ptr();
        for (std::size_t p = 0; p < nc; ++p) {
            const double* src = g.ptr() + p * 4 * h * w;
            double* dst = d + p * h * w;
            for (std::size_t y = 0; y < 2 * h; ++y) {
                for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
        }
    });
}

Var to_tokens(const Var& x) {
    require(x.value().rank() == 4, "to_tokens: expects NCHW");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out({n, hw, c});
    for (std::size_t b = 0; b < n; ++b) {
        CMapR src(x.value().ptr() + b * c * hw, c, hw);
        MapR(out.ptr() + b * hw * c, hw, c) = src.transpose();
    }
    return make_op(std::move(out), {x}, [x, n, c, hw](const Tensor& g) {
        for (std::size_t b = 0; b < n; ++b) {
            MapR(x.grad_buffer().ptr() + b * c * hw, c, hw) += CMapR(g.ptr() + b * hw * c, hw, c).transpose();
        }
    });
}

Var from_tokens(const Var& tokens, std::size_t height, std::size_t width) {
    require(tokens.value().rank() == 3 && tokens.dim(1) == height * width, "from_tokens: length mismatch");
    const std::size_t n = tokens.dim(0), c = tokens.dim(2), hw = height * width;
    Tensor out({n, c, height, width});
    for (std::size_t b = 0; b < n; ++b) {
        MapR(out.ptr() + b * c * hw, c, hw) = CMapR(tokens.value().ptr() + b * hw * c, hw, c).transpose();
    }
    return make_op(std::move(out), {tokens}, [tokens, n, c, hw](const Tensor& g) {
        for (std::size_t b = 0; b < n; ++b) {
            MapR(tokens.grad_buffer().ptr() + b * hw * c, hw, c) += CMapR(g.ptr() + b * c * hw, c, hw).transpose();
        }
    });
}

Var flip_sequence(const Var& x) {
    require(x.value().rank() == 3, "flip_sequence: expects (N, L, D)");
    const std::size_t n = x.dim(0), len = x.dim(1), d = x.dim(2);
    Tensor out(x.shape());
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t l = 0; l < len; ++l) {
            std::copy_n(x.value().ptr() + (b * len + l) * d, d, out.ptr() + (b * len + (len - 1 - l)) * d);
        }
    }
    return make_op(std::move(out), {x}, [x, n, len, d](const Tensor& g) {
        double* dx = x.grad_buffer().ptr();
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t l = 0; l < len; ++l) {
                const double* src = g.ptr() + (b * len + (len - 1 - l)) * d;
                double* dst = dx + (b * len + l) * d;
                for (std::size_t i = 0; i < d; ++i) dst[i] += src[i];
            }
        }
    });
}

Var slice_last(const Var& x, std::size_t start, std::size_t len) {
    const std::size_t d = x.shape().back();
    require(start + len <= d, "slice_last: range out of bounds");
    const std::size_t rows = x.size() / d;
    Shape os = x.shape();
    os.back() = len;
    Tensor out(os);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.value().ptr() + r * d + start, len, out.ptr() + r * len);
    return make_op(std::move(out), {x}, [x, start, len, d, rows](const Tensor& g) {
        double* dx = x.grad_buffer().ptr();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < len; ++i) dx[r * d + start + i] += g[r * len + i];
        }
    });
}

Var causal_depthwise_conv1d(const Var& x, const Var& weight, const Var& bias) {
    require(x.value().rank() == 3, "causal_depthwise_conv1d: expects (N, L, D)");
    const std::size_t n = x.dim(0), len = x.dim(1), d = x.dim(2);
    require(weight.value().rank() == 2 && weight.dim(0) == d && bias.size() == d,
            "causal_depthwise_conv1d: weight must be (D, K) and bias (D)");
    const std::size_t k = weight.dim(1);
    Tensor out(x.shape());
    const double* px = x.value().ptr();
    const double* pw = weight.value().ptr();
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t l = 0; l < len; ++l) {
            double* o = out.ptr() + (b * len + l) * d;
            for (std::size_t c = 0; c < d; ++c) o[c] = bias.value()[c];
            for (std::size_t j = 0; j < k; ++j) {
                // tap j sees x[l - (k-1) + j]
                if (l + j + 1 < k) continue;
                const double* xi = px + (b * len + l + j + 1 - k) * d;
                for (std::size_t c = 0; c < d; ++c) o[c] += pw[c * k + j] * xi[c];
            }
        }
    }
    return make_op(std::move(out), {x, weight, bias}, [x, weight, bias, n, len, d, k](const Tensor& g) {
        const double* px = x.value().ptr();
        const double* pw = weight.value().ptr();
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t l = 0; l < len; ++l) {
                const double* go = g.ptr() + (b * len + l) * d;
                if (bias.requires_grad()) {
                    for (std::size_t c = 0; c < d; ++c) bias.grad_buffer()[c] += go[c];
                }
                for (std::size_t j = 0; j < k; ++j) {
                    if (l + j + 1 < k) continue;
                    const std::size_t src = (b * len + l + j + 1 - k) * d;
                    if (weight.requires_grad()) {
                        double* dw = weight.grad_buffer().ptr();
                        for (std::size_t c = 0; c < d; ++c) dw[c * k + j] += go[c] * px[src + c];
                    }
                    if (x.requires_grad()) {
                        double* dx = x.grad_buffer().ptr() + src;
                        for (std::size_t c = 0; c < d; ++c) dx[c] += go[c] * pw[c * k + j];
                    }
                }
            }
        }
    });
}

// ---- reductions -------------------------------------------------------------------

Var sum(const Var& x) {
    double s = 0.0;
    for (double v : x.value().values()) s += v;
    return make_op(Tensor({1}, s), {x}, [x](const Tensor& g) {
        Tensor& d = x.grad_buffer();
        for (double& v : d.values()) v += g[0];
    });
}

Var mean_abs_error(const Var& pred, const Tensor& target) {
    require_same_shape(pred.value(), target, "mean_abs_error");
    const double inv_n = 1.0 / static_cast<double>(pred.size());
    double s = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) s += std::abs(pred.value()[i] - target[i]);
    return make_op(Tensor({1}, s * inv_n), {pred}, [pred, target, inv_n](const Tensor& g) {
        Tensor& d = pred.grad_buffer();
        for (std::size_t i = 0; i < target.size(); ++i) {
            const double diff = pred.value()[i] - target[i];
            const double sgn = (diff > 0) - (diff < 0);
            d[i] += g[0] * sgn * inv_n;
        }
    });
}

Var dot(const Var& x, const Tensor& probe) {
    require(x.size() == probe.size(), "dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) s += x.value()[i] * probe[i];
    return make_op(Tensor({1}, s), {x}, [x, probe](const Tensor& g) {
        Tensor& d = x.grad_buffer();
        for (std::size_t i = 0; i < probe.size(); ++i) d[i] += g[0] * probe[i];
    });
}

}  // namespace cmir::nn
