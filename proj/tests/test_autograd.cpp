// Copyright (C) 2026 The cmir Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "cmir/autograd.hpp"
#include "test_support.hpp"

using namespace cmir;
using namespace cmir::nn;
using testutil::all_coordinates;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

Var param(Shape shape, Rng& rng, double scale = 1.0) { return Var(random_tensor(std::move(shape), rng, scale), true); }

}  // namespace

TEST(Autograd, ElementwiseOps) {
    Rng rng(1);
    Var a = param({2, 3}, rng), b = param({2, 3}, rng);
    const Tensor probe = random_tensor({2, 3}, rng);
    auto loss = [&] { return dot(mul(silu(add(a, b)), softplus(sub(scale(a, 0.5), b))), probe); };
    EXPECT_LT(grad_check(loss, all_coordinates({a, b})).max_rel, 1e-6);
}

TEST(Autograd, SharedInputAccumulates) {
    Var a(Tensor({1}, 3.0), true);
    backward(sum(mul(a, a)));
    EXPECT_DOUBLE_EQ(a.grad()[0], 6.0);
}

TEST(Autograd, NoGradGuardSkipsGraph) {
    Var a(Tensor({1}, 2.0), true);
    {
        NoGradGuard guard;
        const Var y = mul(a, a);
        EXPECT_FALSE(y.requires_grad());
    }
    EXPECT_TRUE(grad_enabled());
}

TEST(Autograd, Linear) {
    Rng rng(2);
    Var x = param({2, 3, 4}, rng), w = param({5, 4}, rng), b = param({5}, rng);
    const Tensor probe = random_tensor({2, 3, 5}, rng);
    EXPECT_LT(grad_check([&] { return dot(linear(x, w, b), probe); }, all_coordinates({x, w, b})).max_rel, 1e-6);
}

TEST(Autograd, LinearMatchesHandComputation) {
    const Var x(Tensor({1, 2}, {1.0, 2.0}));
    const Var w(Tensor({2, 2}, {1.0, -1.0, 0.5, 3.0}));
    const Var b(Tensor({2}, {0.25, 0.0}));
    const Tensor y = linear(x, w, b).value();
    EXPECT_DOUBLE_EQ(y[0], 1.0 - 2.0 + 0.25);
    EXPECT_DOUBLE_EQ(y[1], 0.5 + 6.0);
}

TEST(Autograd, Conv2dMatchesDirectLoop) {
    Rng rng(3);
    const Tensor x = random_tensor({2, 3, 5, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
    for (int stride : {1, 2}) {
        const Tensor y = conv2d(Var(x), Var(w), Var(b), stride, 1).value();
        const std::size_t ho = y.dim(2), wo = y.dim(3);
        for (std::size_t n = 0; n < 2; ++n) {
            for (std::size_t o = 0; o < 4; ++o) {
                for (std::size_t i = 0; i < ho; ++i) {
                    for (std::size_t j = 0; j < wo; ++j) {
                        double acc = b[o];
                        for (std::size_t c = 0; c < 3; ++c) {
                            for (int ki = 0; ki < 3; ++ki) {
                                for (int kj = 0; kj < 3; ++kj) {
                                    const long r = static_cast<long>(i) * stride + ki - 1;
                                    const long s = static_cast<long>(j) * stride + kj - 1;
                                    if (r < 0 || s < 0 || r >= 5 || s >= 6) continue;
                                    acc += w[((o * 3 + c) * 3 + ki) * 3 + kj] * x[((n * 3 + c) * 5 + r) * 6 + s];
                                }
                            }
                        }
                        ASSERT_NEAR(y[((n * 4 + o) * ho + i) * wo + j], acc, 1e-12);
                    }
                }
            }
        }
    }
}

TEST(Autograd, Conv2dGradients) {
    Rng rng(4);
    Var x = param({1, 2, 5, 4}, rng), w = param({3, 2, 3, 3}, rng), b = param({3}, rng);
    for (int stride : {1, 2}) {
        const Tensor probe = conv2d(x, w, b, stride, 1).value();
        EXPECT_LT(grad_check([&] { return dot(conv2d(x, w, b, stride, 1), probe); }, all_coordinates({x, w, b})).max_rel,
                  1e-6);
    }
    Var w1 = param({3, 2, 1, 1}, rng);
    const Tensor probe = random_tensor({1, 3, 5, 4}, rng);
    EXPECT_LT(grad_check([&] { return dot(conv2d(x, w1, Var(), 1, 0), probe); }, all_coordinates({x, w1})).max_rel,
              1e-6);
}

TEST(Autograd, GroupNorm) {
    Rng rng(5);
    Var x = param({2, 6, 3, 3}, rng), g = param({6}, rng), b = param({6}, rng);
    const Tensor probe = random_tensor({2, 6, 3, 3}, rng);
    EXPECT_LT(grad_check([&] { return dot(group_norm(x, 3, g, b), probe); }, all_coordinates({x, g, b})).max_rel,
              1e-5);

    const Tensor y = group_norm(x, 3, Var(Tensor({6}, 1.0)), Var(Tensor({6}))).value();
    double mean = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < 18; ++i) mean += y[i];
    mean /= 18;
    for (std::size_t i = 0; i < 18; ++i) sq += (y[i] - mean) * (y[i] - mean);
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(sq / 18, 1.0, 1e-3);
}

TEST(Autograd, LayerNorm) {
    Rng rng(6);
    Var x = param({2, 3, 5}, rng), g = param({5}, rng), b = param({5}, rng);
    const Tensor probe = random_tensor({2, 3, 5}, rng);
    EXPECT_LT(grad_check([&] { return dot(layer_norm(x, g, b), probe); }, all_coordinates({x, g, b})).max_rel, 1e-5);
}

TEST(Autograd, ModulateAndConcat) {
    Rng rng(7);
    Var x = param({2, 3, 2, 2}, rng), ss = param({2, 6}, rng), z = param({2, 1, 2, 2}, rng);
    const Tensor probe = random_tensor({2, 4, 2, 2}, rng);
    auto loss = [&] { return dot(concat_channels({modulate(x, ss), z}), probe); };
    EXPECT_LT(grad_check(loss, all_coordinates({x, ss, z})).max_rel, 1e-6);
}

TEST(Autograd, UpsampleAndTokens) {
    Rng rng(8);
    Var x = param({1, 2, 2, 3}, rng);
    const Tensor probe = random_tensor({1, 24, 2}, rng);
    auto loss = [&] { return dot(flip_sequence(to_tokens(upsample_nearest2x(x))), probe); };
    EXPECT_LT(grad_check(loss, all_coordinates({x})).max_rel, 1e-6);

    const Tensor up = upsample_nearest2x(Var(x.value())).value();
    EXPECT_EQ(up[0], x.value()[0]);
    EXPECT_EQ(up[1], x.value()[0]);
    EXPECT_EQ(up[6], x.value()[0]);
    EXPECT_EQ(up[7], x.value()[0]);
}

TEST(Autograd, TokenRoundTripIsRowMajor) {
    Tensor x({1, 2, 2, 2}, {0, 1, 2, 3, 10, 11, 12, 13});
    const Tensor tok = to_tokens(Var(x)).value();
    EXPECT_EQ(tok.shape(), (Shape{1, 4, 2}));
    EXPECT_EQ(tok[2], 1.0);
    EXPECT_EQ(tok[3], 11.0);
    EXPECT_EQ(from_tokens(Var(tok), 2, 2).value().storage(), x.storage());
}

TEST(Autograd, CausalDepthwiseConv) {
    Rng rng(9);
    Var x = param({2, 5, 3}, rng), w = param({3, 4}, rng), b = param({3}, rng);
    const Tensor probe = random_tensor({2, 5, 3}, rng);
    EXPECT_LT(grad_check([&] { return dot(causal_depthwise_conv1d(x, w, b), probe); }, all_coordinates({x, w, b}))
                  .max_rel,
              1e-6);
    // first output sees only the first token through the last tap
    const Tensor y = causal_depthwise_conv1d(x, w, b).value();
    EXPECT_NEAR(y[0], w.value()[3] * x.value()[0] + b.value()[0], 1e-14);
}

TEST(Autograd, SliceAndMeanAbsError) {
    Rng rng(10);
    Var x = param({2, 3, 6}, rng);
    const Tensor target = random_tensor({2, 3, 2}, rng);
    EXPECT_LT(grad_check([&] { return mean_abs_error(slice_last(x, 3, 2), target); }, all_coordinates({x})).max_rel,
              1e-6);
    const Tensor zero({2, 2});
    const Tensor ones({2, 2}, 1.0);
    EXPECT_DOUBLE_EQ(mean_abs_error(Var(ones), zero).value()[0], 1.0);
}

TEST(Autograd, ShapeErrors) {
    EXPECT_THROW(add(Var(Tensor({2})), Var(Tensor({3}))), std::invalid_argument);
    EXPECT_THROW(linear(Var(Tensor({2, 3})), Var(Tensor({4, 2})), Var()), std::invalid_argument);
    EXPECT_THROW(conv2d(Var(Tensor({1, 2, 4, 4})), Var(Tensor({3, 1, 3, 3})), Var(), 1, 1), std::invalid_argument);
}

TEST(ParamStore, RegistrationOrderAndLookup) {
    ParamStore store;
    store.add("b", Tensor({1}));
    store.add("a", Tensor({2}));
    EXPECT_EQ(store.entries()[0].first, "b");
    EXPECT_TRUE(store.contains("a"));
    EXPECT_EQ(store.get("a").size(), 2u);
    EXPECT_THROW(store.add("a", Tensor({1})), std::invalid_argument);
    EXPECT_THROW(store.get("zz"), std::out_of_range);
}
