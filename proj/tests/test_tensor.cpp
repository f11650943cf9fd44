#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ternq/ops.hpp"
#include "ternq/rng.hpp"
#include "ternq/tensor.hpp"

using namespace ternq;

namespace {

Tensor random_tensor(Rng& rng, Shape shape) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<float>(rng.normal());
    return t;
}

// independent reference: the plain seven-loop convolution
Tensor naive_conv3d(const Tensor& x, const Tensor& k, const Tensor* bias, int64_t stride,
                    int64_t pad) {
    const int64_t N = x.dim(0), CI = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
    const int64_t CO = k.dim(0), K = k.dim(2);
    const int64_t OD = (D + 2 * pad - K) / stride + 1;
    const int64_t OH = (H + 2 * pad - K) / stride + 1;
    const int64_t OW = (W + 2 * pad - K) / stride + 1;
    Tensor out(Shape{N, CO, OD, OH, OW});
    auto xv = x.values();
    auto kv = k.values();
    auto ov = out.values();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < CO; ++co)
            for (int64_t od = 0; od < OD; ++od)
                for (int64_t oh = 0; oh < OH; ++oh)
                    for (int64_t ow = 0; ow < OW; ++ow) {
                        float acc = bias ? bias->values()[static_cast<size_t>(co)] : 0.0f;
                        for (int64_t ci = 0; ci < CI; ++ci)
                            for (int64_t kd = 0; kd < K; ++kd)
                                for (int64_t kh = 0; kh < K; ++kh)
                                    for (int64_t kw = 0; kw < K; ++kw) {
                                        const int64_t id = od * stride - pad + kd;
                                        const int64_t ih = oh * stride - pad + kh;
                                        const int64_t iw = ow * stride - pad + kw;
                                        if (id < 0 || id >= D || ih < 0 || ih >= H || iw < 0 ||
                                            iw >= W)
                                            continue;
                                        acc += xv[(((n * CI + ci) * D + id) * H + ih) * W + iw] *
                                               kv[(((co * CI + ci) * K + kd) * K + kh) * K + kw];
                                    }
                        ov[(((n * CO + co) * OD + od) * OH + oh) * OW + ow] = acc;
                    }
    return out;
}

}  // namespace

TEST_CASE("tensor construction enforces the shape/data invariants") {
    CHECK_THROWS_AS(Tensor(Shape{2, 0, 3}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor(Shape{-1}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor(Shape{}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor(Shape{3}, {1.0f, 2.0f}), std::invalid_argument);

    Tensor t(Shape{2, 3});
    CHECK(t.numel() == 6);
    CHECK_FALSE(t.requires_grad());
    CHECK_FALSE(t.has_grad());

    Tensor c = t.clone();
    c.values()[0] = 5.0f;
    CHECK(t.values()[0] == 0.0f);  // deep copy

    Tensor shared = t;
    shared.values()[0] = 7.0f;
    CHECK(t.values()[0] == 7.0f);  // handle copy shares storage
}

TEST_CASE("conv3d shape arithmetic and validation") {
    Rng rng(1);
    Tensor x = random_tensor(rng, {1, 1, 8, 8, 8});
    Tensor k = random_tensor(rng, {4, 1, 3, 3, 3});
    Tensor out = ops::conv3d(x, k, nullptr, 1, 1);
    CHECK(out.shape() == Shape{1, 4, 8, 8, 8});

    Tensor k2 = random_tensor(rng, {4, 2, 3, 3, 3});
    CHECK_THROWS_WITH_AS(ops::conv3d(x, k2, nullptr, 1, 1),
                         doctest::Contains("input channels"), std::invalid_argument);

    Tensor keven = random_tensor(rng, {4, 1, 2, 2, 2});
    CHECK_THROWS_AS(ops::conv3d(x, keven, nullptr, 1, 0), std::invalid_argument);

    Tensor tiny = random_tensor(rng, {1, 1, 2, 2, 2});
    Tensor kbig = random_tensor(rng, {1, 1, 3, 3, 3});
    CHECK_THROWS_AS(ops::conv3d(tiny, kbig, nullptr, 1, 0), std::invalid_argument);

    // stride-2 downsampling halves even dims with k=3, pad=1
    Tensor x16 = random_tensor(rng, {1, 1, 16, 16, 16});
    Tensor k3 = random_tensor(rng, {2, 1, 3, 3, 3});
    CHECK(ops::conv3d(x16, k3, nullptr, 2, 1).shape() == Shape{1, 2, 8, 8, 8});
}

TEST_CASE("1x1x1 unit kernel is the identity") {
    Rng rng(2);
    Tensor x = random_tensor(rng, {1, 1, 5, 5, 5});
    Tensor k(Shape{1, 1, 1, 1, 1}, {1.0f});
    Tensor out = ops::conv3d(x, k, nullptr, 1, 0);
    REQUIRE(out.shape() == x.shape());
    for (size_t i = 0; i < x.vec().size(); ++i) CHECK(out.values()[i] == x.values()[i]);
}

TEST_CASE("conv3d matches the naive seven-loop reference") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const int64_t cin = 1 + static_cast<int64_t>(rng.below(3));
        const int64_t cout = 1 + static_cast<int64_t>(rng.below(3));
        const int64_t stride = 1 + static_cast<int64_t>(rng.below(2));
        const int64_t pad = static_cast<int64_t>(rng.below(2));
        Tensor x = random_tensor(rng, {2, cin, 8, 8, 8});
        Tensor k = random_tensor(rng, {cout, cin, 3, 3, 3});
        Tensor b = random_tensor(rng, {cout});
        Tensor fast = ops::conv3d(x, k, &b, stride, pad);
        Tensor ref = naive_conv3d(x, k, &b, stride, pad);
        REQUIRE(fast.shape() == ref.shape());
        for (size_t i = 0; i < ref.vec().size(); ++i)
            CHECK(std::abs(fast.values()[i] - ref.values()[i]) < 1e-5f);
    }
}

TEST_CASE("forward results are bit-identical across runs") {
    Rng rng(4);
    Tensor x = random_tensor(rng, {1, 2, 8, 8, 8});
    Tensor k = random_tensor(rng, {3, 2, 3, 3, 3});
    Tensor a = ops::conv3d(x, k, nullptr, 1, 1);
    Tensor b = ops::conv3d(x, k, nullptr, 1, 1);
    for (size_t i = 0; i < a.vec().size(); ++i) REQUIRE(a.values()[i] == b.values()[i]);
}

TEST_CASE("upsample_nearest repeats values and multiplies dims") {
    Rng rng(5);
    Tensor x = random_tensor(rng, {1, 2, 4, 4, 4});
    Tensor out = ops::upsample_nearest(x, 2);
    CHECK(out.shape() == Shape{1, 2, 8, 8, 8});

    Tensor c = Tensor::full({1, 1, 2, 2, 2}, 3.5f);
    Tensor cu = ops::upsample_nearest(c, 3);
    CHECK(cu.shape() == Shape{1, 1, 6, 6, 6});
    for (float v : cu.values()) CHECK(v == 3.5f);

    CHECK_THROWS_AS(ops::upsample_nearest(x, 1), std::invalid_argument);
}

TEST_CASE("upsample gradient of a summed output is factor^3 per input") {
    Tensor x = Tensor::full({1, 1, 2, 2, 2}, 1.0f);
    Tape tape;
    tape.watch(x);
    Tensor loss = ops::sum(ops::upsample_nearest(x, 2));
    tape.backward(loss);
    for (float g : x.grad()) CHECK(g == 8.0f);
}

TEST_CASE("conv3d_transpose multiplies spatial dims by the factor") {
    Rng rng(6);
    Tensor x = random_tensor(rng, {1, 2, 4, 4, 4});
    Tensor k = random_tensor(rng, {2, 3, 2, 2, 2});
    Tensor out = ops::conv3d_transpose(x, k, 2);
    CHECK(out.shape() == Shape{1, 3, 8, 8, 8});
    CHECK_THROWS_AS(ops::conv3d_transpose(x, k, 3), std::invalid_argument);
}

TEST_CASE("relu, softmax and concat behave on the channel axis") {
    Tensor r(Shape{3}, {-1.0f, 0.0f, 2.0f});
    Tensor rr = ops::relu(r);
    CHECK(rr.values()[0] == 0.0f);
    CHECK(rr.values()[1] == 0.0f);
    CHECK(rr.values()[2] == 2.0f);

    // equal logits split the probability mass equally
    Tensor z = Tensor::full({1, 2, 2, 2, 2}, 0.7f);
    Tensor p = ops::softmax_channels(z);
    for (float v : p.values()) CHECK(v == doctest::Approx(0.5));

    Rng rng(7);
    Tensor logits = random_tensor(rng, {2, 4, 3, 3, 3});
    Tensor probs = ops::softmax_channels(logits);
    const int64_t spatial = 27;
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t v = 0; v < spatial; ++v) {
            float s = 0;
            for (int64_t c = 0; c < 4; ++c)
                s += probs.values()[(n * 4 + c) * spatial + v];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
        }

    Tensor a = random_tensor(rng, {1, 2, 4, 4, 4});
    Tensor b = random_tensor(rng, {1, 3, 4, 4, 4});
    Tensor cat = ops::concat_channels(a, b);
    CHECK(cat.shape() == Shape{1, 5, 4, 4, 4});
    CHECK(cat.values()[0] == a.values()[0]);
    CHECK(cat.values()[2 * 64] == b.values()[0]);

    Tensor bad = random_tensor(rng, {1, 3, 4, 4, 2});
    CHECK_THROWS_AS(ops::concat_channels(a, bad), std::invalid_argument);
}

TEST_CASE("batchnorm3d normalizes per channel in training mode") {
    Rng rng(8);
    const int64_t c = 3;
    Tensor x = random_tensor(rng, {2, c, 4, 4, 4});
    for (auto& v : x.values()) v = v * 2.0f + 1.0f;
    Tensor gamma = Tensor::full({c}, 1.0f);
    Tensor beta(Shape{c});
    std::vector<float> rm(c, 0.0f), rv(c, 1.0f);
    Tensor out = ops::batchnorm3d(x, gamma, beta, rm, rv, true);

    const int64_t spatial = 64;
    for (int64_t ch = 0; ch < c; ++ch) {
        double mean = 0, var = 0;
        for (int64_t n = 0; n < 2; ++n)
            for (int64_t v = 0; v < spatial; ++v)
                mean += out.values()[(n * c + ch) * spatial + v];
        mean /= 128.0;
        for (int64_t n = 0; n < 2; ++n)
            for (int64_t v = 0; v < spatial; ++v) {
                const double d = out.values()[(n * c + ch) * spatial + v] - mean;
                var += d * d;
            }
        var /= 128.0;
        CHECK(std::abs(mean) < 1e-5);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
        // running stats moved toward the batch statistics
        CHECK(rm[static_cast<size_t>(ch)] != 0.0f);
        CHECK(rv[static_cast<size_t>(ch)] != 1.0f);
    }
}

TEST_CASE("custom_op realizes pass-through and straight-through hooks") {
    SUBCASE("identity forward, identity backward") {
        Tensor x(Shape{3}, {1.0f, -2.0f, 3.0f});
        Tape tape;
        tape.watch(x);
        Tensor y = ops::custom_op<float>(
            {x},
            [](const std::vector<Tensor>& ins) { return ins[0].clone(); },
            [](std::span<const float> g, const std::vector<Tensor>&) {
                return std::vector<std::vector<float>>{{g.begin(), g.end()}};
            });
        tape.backward(ops::sum(y));
        for (float g : x.grad()) CHECK(g == 1.0f);
    }
    SUBCASE("round forward with pass-through backward") {
        Tensor x(Shape{4}, {0.2f, 0.7f, -1.4f, 2.5f});
        Tape tape;
        tape.watch(x);
        Tensor y = ops::custom_op<float>(
            {x},
            [](const std::vector<Tensor>& ins) {
                Tensor out(ins[0].shape());
                for (size_t i = 0; i < out.vec().size(); ++i)
                    out.values()[i] = std::round(ins[0].values()[i]);
                return out;
            },
            [](std::span<const float> g, const std::vector<Tensor>&) {
                return std::vector<std::vector<float>>{{g.begin(), g.end()}};
            });
        CHECK(y.values()[0] == 0.0f);
        CHECK(y.values()[1] == 1.0f);
        tape.backward(ops::sum(y));
        for (float g : x.grad()) CHECK(g == 1.0f);  // straight-through
    }
    SUBCASE("wrong-shape gradients are rejected at reverse time") {
        Tensor x(Shape{3}, {1.0f, 2.0f, 3.0f});
        Tape tape;
        tape.watch(x);
        Tensor y = ops::custom_op<float>(
            {x},
            [](const std::vector<Tensor>& ins) { return ins[0].clone(); },
            [](std::span<const float>, const std::vector<Tensor>&) {
                return std::vector<std::vector<float>>{{1.0f}};  // too short
            });
        CHECK_THROWS_AS(tape.backward(ops::sum(y)), std::logic_error);
    }
}

TEST_CASE("tape guards its invariants") {
    Tensor x(Shape{2}, {1.0f, 2.0f});
    Tape tape;
    tape.watch(x);
    Tensor y = ops::relu(x);
    CHECK_THROWS_AS(tape.backward(y), std::logic_error);  // non-scalar root

    Tape other;
    Tensor z(Shape{2}, {1.0f, 1.0f});
    other.watch(z);
    CHECK_THROWS_AS(ops::add(x, z), std::logic_error);  // mixed tapes

    // grads accumulate across backward calls until cleared
    Tensor loss = ops::sum(x);
    tape.backward(loss);
    tape.backward(loss);
    CHECK(x.grad()[0] == 2.0f);
    x.zero_grad();
    CHECK_FALSE(x.has_grad());
}
