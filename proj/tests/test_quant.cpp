#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ternq/quant.hpp"
#include "ternq/rng.hpp"

using namespace ternq;

namespace {

Tensor make1d(std::vector<float> v) {
    const int64_t n = static_cast<int64_t>(v.size());
    return Tensor(Shape{n}, std::move(v));
}

// independent per-element reference: literal branch evaluation, no shared
// code with the production path
std::vector<float> brute_force_quant(const std::vector<float>& w, int64_t channels, float t,
                                     float gp, float gn, QuantScheme scheme) {
    const int64_t block = static_cast<int64_t>(w.size()) / channels;
    float mx = 0.0f;
    for (float x : w) mx = std::max(mx, std::abs(x));
    const float delta = t * mx;
    std::vector<float> out(w.size());
    for (int64_t c = 0; c < channels; ++c) {
        // alpha: mean |w| over non-zero-bin elements of this channel
        float acc = 0.0f;
        int64_t cnt = 0;
        for (int64_t i = c * block; i < (c + 1) * block; ++i) {
            const float x = w[static_cast<size_t>(i)];
            bool nonzero;
            if (scheme == QuantScheme::BTQ) nonzero = true;
            else nonzero = x > delta || x < -delta;
            if (nonzero) {
                acc += std::abs(x);
                cnt++;
            }
        }
        float alpha = cnt > 0 ? acc / static_cast<float>(cnt) : 1.0f;
        if (scheme != QuantScheme::TDQ3) alpha = 1.0f;
        for (int64_t i = c * block; i < (c + 1) * block; ++i) {
            const float x = w[static_cast<size_t>(i)];
            float y;
            if (scheme == QuantScheme::BTQ) {
                y = x >= 0.0f ? gp * alpha : -(gn * alpha);
            } else {
                if (x > delta) y = gp * alpha;
                else if (x < -delta) y = -(gn * alpha);
                else y = 0.0f;
            }
            out[static_cast<size_t>(i)] = y;
        }
    }
    return out;
}

}  // namespace

TEST_CASE("compute_delta follows t * max|W|") {
    Tensor w = make1d({0.2f, -1.0f, 0.5f});
    CHECK(quant::compute_delta<float>(w.values(), 0.05f) == doctest::Approx(0.05).epsilon(1e-7));

    Tensor zeros = make1d({0.0f, 0.0f, 0.0f});
    CHECK(quant::compute_delta<float>(zeros.values(), 0.05f) == 0.0f);
    CHECK(quant::compute_delta<float>(w.values(), 0.0f) == 0.0f);

    CHECK_THROWS_AS(quant::compute_delta<float>(std::span<const float>{}, 0.05f),
                    std::invalid_argument);
    CHECK_THROWS_AS(quant::compute_delta<float>(w.values(), 1.0f), std::invalid_argument);
    CHECK_THROWS_AS(quant::compute_delta<float>(w.values(), -0.1f), std::invalid_argument);
}

TEST_CASE("ternarize assigns the three bins with |w| = delta in the zero bin") {
    Tensor w = make1d({0.3f, -0.02f, -0.7f});
    TernaryTensor t = quant::ternarize(w, 0.05f);
    CHECK(t.value(0) == 1);
    CHECK(t.value(1) == 0);
    CHECK(t.value(2) == -1);

    // delta >= max|w| -> all zeros
    TernaryTensor z = quant::ternarize(w, 0.7f);
    for (size_t i = 0; i < 3; ++i) CHECK(z.value(i) == 0);

    // exact ties land in the zero bin
    Tensor ties = make1d({0.05f, -0.05f});
    TernaryTensor tt = quant::ternarize(ties, 0.05f);
    CHECK(tt.value(0) == 0);
    CHECK(tt.value(1) == 0);
}

TEST_CASE("compute_alpha averages |w| over non-zero bins per channel") {
    Tensor w = make1d({0.3f, -0.02f, -0.7f});
    TernaryTensor t = quant::ternarize(w, 0.05f);
    auto alpha = quant::compute_alpha(w, t, false);
    REQUIRE(alpha.size() == 1);
    CHECK(alpha[0] == doctest::Approx(0.5).epsilon(1e-6));

    // all-zero codes -> neutral 1.0
    TernaryTensor zero(w.shape());
    auto a0 = quant::compute_alpha(w, zero, false);
    CHECK(a0[0] == 1.0f);

    // two channels: ch0 W=[0.4,0.6] T=[+1,+1], ch1 W=[0.9,-0.1] T=[+1,0]
    Tensor w2(Shape{2, 2}, {0.4f, 0.6f, 0.9f, -0.1f});
    TernaryTensor t2(w2.shape());
    t2.set(0, 1);
    t2.set(1, 1);
    t2.set(2, 1);
    auto a2 = quant::compute_alpha(w2, t2, true);
    REQUIRE(a2.size() == 2);
    CHECK(a2[0] == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(a2[1] == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("quantize_forward applies learned scales per bin") {
    Tensor w = make1d({0.3f, -0.02f, -0.7f});
    QuantState st;
    st.scheme = QuantScheme::TDQ3;
    st.per_channel_alpha = false;
    st.delta = 0.05f;
    st.gamma_pos = 1.2f;
    st.gamma_neg = 0.8f;
    st.alpha = {0.5f};
    Tensor q = quant::quantize_forward(w, st);
    CHECK(q.values()[0] == doctest::Approx(0.6).epsilon(1e-6));
    CHECK(q.values()[1] == 0.0f);
    CHECK(q.values()[2] == doctest::Approx(-0.4).epsilon(1e-6));

    // unit scales reproduce the raw ternary pattern
    st.gamma_pos = 1.0f;
    st.gamma_neg = 1.0f;
    st.alpha = {1.0f};
    Tensor q1 = quant::quantize_forward(w, st);
    CHECK(q1.values()[0] == 1.0f);
    CHECK(q1.values()[1] == 0.0f);
    CHECK(q1.values()[2] == -1.0f);

    // FULL is the identity, bit-exactly
    QuantState full;
    full.scheme = QuantScheme::FULL;
    Tensor qf = quant::quantize_forward(w, full);
    for (size_t i = 0; i < 3; ++i) CHECK(qf.values()[i] == w.values()[i]);

    st.gamma_pos = std::nanf("");
    CHECK_THROWS_AS(quant::quantize_forward(w, st), std::invalid_argument);
}

TEST_CASE("quantize_backward routes straight-through and gamma gradients") {
    Tensor w = make1d({0.3f, -0.02f, -0.7f});
    QuantState st;
    st.scheme = QuantScheme::TDQ3;
    st.per_channel_alpha = false;
    st.delta = 0.05f;
    st.gamma_pos = 1.2f;
    st.gamma_neg = 0.8f;
    st.alpha = {0.5f};

    std::vector<float> ones{1.0f, 1.0f, 1.0f};
    auto g1 = quant::quantize_backward<float>(ones, w, st);
    CHECK(g1.grad_gamma_pos == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(g1.grad_gamma_neg == doctest::Approx(-0.5).epsilon(1e-6));

    std::vector<float> zeros{0.0f, 0.0f, 0.0f};
    auto g0 = quant::quantize_backward<float>(zeros, w, st);
    CHECK(g0.grad_gamma_pos == 0.0f);
    CHECK(g0.grad_gamma_neg == 0.0f);
    for (float v : g0.grad_weights) CHECK(v == 0.0f);

    std::vector<float> g{2.0f, 3.0f, 5.0f};
    auto g2 = quant::quantize_backward<float>(g, w, st);
    CHECK(g2.grad_weights[0] == doctest::Approx(1.2f * 0.5f * 2.0f).epsilon(1e-6));
    CHECK(g2.grad_weights[1] == doctest::Approx(3.0f).epsilon(1e-6));
    CHECK(g2.grad_weights[2] == doctest::Approx(0.8f * 0.5f * 5.0f).epsilon(1e-6));
}

TEST_CASE("refresh recomputes delta and alpha, leaves gamma") {
    Rng rng(77);
    Tensor w(Shape{4, 8});
    for (auto& v : w.values()) v = static_cast<float>(rng.normal());
    QuantState st;
    st.scheme = QuantScheme::TDQ3;
    st.gamma_pos = 1.3f;
    st.gamma_neg = 0.9f;
    quant::refresh(st, w);
    CHECK(st.gamma_pos == 1.3f);
    CHECK(st.gamma_neg == 0.9f);
    CHECK(st.delta == quant::compute_delta<float>(w.values(), st.t));
    // composition oracle: refresh == compute_delta then compute_alpha
    auto tern = quant::ternarize(w, st.delta);
    auto alpha = quant::compute_alpha(w, tern, true);
    REQUIRE(st.alpha.size() == alpha.size());
    for (size_t i = 0; i < alpha.size(); ++i) CHECK(st.alpha[i] == alpha[i]);

    // idempotent on unchanged weights
    QuantState st2 = st;
    quant::refresh(st2, w);
    CHECK(st2.delta == st.delta);
    CHECK(st2.alpha == st.alpha);

    // delta scales with max|W|
    Tensor w2 = w.clone();
    for (auto& v : w2.values()) v *= 3.0f;
    QuantState st3 = st;
    quant::refresh(st3, w2);
    CHECK(st3.delta == doctest::Approx(3.0f * st.delta).epsilon(1e-6));
}

TEST_CASE("vectorized quantize_forward equals brute-force branch evaluation") {
    Rng rng(1234);
    for (int trial = 0; trial < 1000; ++trial) {
        const int64_t channels = 1 + static_cast<int64_t>(rng.below(4));
        const int64_t block = 1 + static_cast<int64_t>(rng.below(16));
        Tensor w(Shape{channels, block});
        for (auto& v : w.values()) v = static_cast<float>(rng.normal());
        const auto schemes = {QuantScheme::TDQ3, QuantScheme::TTQ, QuantScheme::BTQ};
        for (QuantScheme scheme : schemes) {
            QuantState st;
            st.scheme = scheme;
            st.t = 0.05f;
            st.gamma_pos = 0.5f + static_cast<float>(rng.uniform());
            st.gamma_neg = 0.5f + static_cast<float>(rng.uniform());
            quant::refresh(st, w);
            Tensor q = quant::quantize_forward(w, st);
            auto ref = brute_force_quant(std::vector<float>(w.values().begin(), w.values().end()),
                                         channels, st.t, st.gamma_pos, st.gamma_neg, scheme);
            for (size_t i = 0; i < ref.size(); ++i) {
                REQUIRE(q.values()[i] == ref[i]);  // exact equality
            }
        }
    }
}

TEST_CASE("zero fraction is non-decreasing in t") {
    Rng rng(99);
    const float ts[] = {0.0f, 0.01f, 0.05f, 0.1f, 0.3f};
    for (int trial = 0; trial < 100; ++trial) {
        Tensor w(Shape{1 + static_cast<int64_t>(rng.below(64))});
        for (auto& v : w.values()) v = static_cast<float>(rng.normal());
        double prev = -1.0;
        for (float t : ts) {
            const float delta = quant::compute_delta<float>(w.values(), t);
            const double zf = zero_fraction(quant::ternarize(w, delta));
            CHECK(zf >= prev);
            prev = zf;
        }
    }
}

TEST_CASE("ternary pattern is invariant to positive rescaling of W") {
    Rng rng(2024);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor w(Shape{32});
        for (auto& v : w.values()) v = static_cast<float>(rng.normal());
        const float c = 0.25f + 4.0f * static_cast<float>(rng.uniform());
        Tensor w2 = w.clone();
        for (auto& v : w2.values()) v *= c;
        const float d1 = quant::compute_delta<float>(w.values(), 0.05f);
        const float d2 = quant::compute_delta<float>(w2.values(), 0.05f);
        TernaryTensor t1 = quant::ternarize(w, d1);
        TernaryTensor t2 = quant::ternarize(w2, d2);
        for (size_t i = 0; i < t1.pos_mask.size(); ++i) CHECK(t1.value(i) == t2.value(i));
    }
}

TEST_CASE("BTQ produces no zero-valued weights") {
    Rng rng(5);
    Tensor w(Shape{8, 16});
    for (auto& v : w.values()) v = static_cast<float>(rng.normal());
    QuantState st;
    st.scheme = QuantScheme::BTQ;
    st.gamma_pos = 1.1f;
    st.gamma_neg = 0.9f;
    quant::refresh(st, w);
    Tensor q = quant::quantize_forward(w, st);
    for (float v : q.values()) CHECK(v != 0.0f);
}

TEST_CASE("quantize op reproduces the hand-computed gradients through the tape") {
    Tensor w = make1d({0.3f, -0.02f, -0.7f});
    Tensor gp = Tensor::scalar(1.2f);
    Tensor gn = Tensor::scalar(0.8f);
    QuantState st;
    st.scheme = QuantScheme::TDQ3;
    st.per_channel_alpha = false;
    st.delta = 0.05f;
    st.alpha = {0.5f};

    Tape tape;
    tape.watch(w);
    tape.watch(gp);
    tape.watch(gn);
    Tensor q = quant::quantize(w, gp, gn, st);
    // loss = 2*q0 + 3*q1 + 5*q2
    Tensor coef = make1d({2.0f, 3.0f, 5.0f});
    Tensor loss = ops::sum(ops::mul(q, coef));
    tape.backward(loss);

    CHECK(w.grad()[0] == doctest::Approx(1.2f * 0.5f * 2.0f));
    CHECK(w.grad()[1] == doctest::Approx(3.0f));
    CHECK(w.grad()[2] == doctest::Approx(0.8f * 0.5f * 5.0f));
    CHECK(gp.grad()[0] == doctest::Approx(2.0f * 0.5f));
    CHECK(gn.grad()[0] == doctest::Approx(-5.0f * 0.5f));
}
