#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "ternq/gradcheck.hpp"
#include "ternq/loss.hpp"
#include "ternq/ops.hpp"
#include "ternq/rng.hpp"

using namespace ternq;

namespace {

using DTensor = TensorT<double>;
using DTape = TapeT<double>;

DTensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    DTensor t(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("elementwise op gradients match finite differences") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const Shape shape{2, 3, 2};
        DTensor a = random_tensor(rng, shape);
        DTensor b = random_tensor(rng, shape);
        // keep relu inputs away from the kink
        for (auto& v : a.values())
            if (std::abs(v) < 0.05) v += 0.1;
        DTensor coef = random_tensor(rng, shape);

        DTape tape;
        tape.watch(a);
        tape.watch(b);
        DTensor expr = ops::mul(ops::relu(a), b);
        expr = ops::add(expr, ops::scale(a, 0.5));
        tape.backward(ops::sum(ops::mul(expr, coef)));

        auto av = to_vec(a.values());
        auto bv = to_vec(b.values());
        auto loss = [&]() {
            DTensor aa(shape, av);
            DTensor bb(shape, bv);
            DTensor e = ops::mul(ops::relu(aa), bb);
            e = ops::add(e, ops::scale(aa, 0.5));
            double acc = 0;
            for (size_t i = 0; i < e.vec().size(); ++i) acc += e.vec()[i] * coef.vec()[i];
            return acc;
        };
        CHECK(gradcheck::max_rel_err(a.grad(), gradcheck::central_diff(loss, av)) < 1e-3);
        CHECK(gradcheck::max_rel_err(b.grad(), gradcheck::central_diff(loss, bv)) < 1e-3);
    }
}

TEST_CASE("concat gradients split the upstream gradient") {
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        DTensor a = random_tensor(rng, {1, 2, 2, 2, 2});
        DTensor b = random_tensor(rng, {1, 1, 2, 2, 2});
        DTensor probe = ops::concat_channels(a, b);
        DTensor coef = random_tensor(rng, probe.shape());

        DTape tape;
        tape.watch(a);
        tape.watch(b);
        tape.backward(ops::sum(ops::mul(ops::concat_channels(a, b), coef)));

        auto av = to_vec(a.values());
        auto bv = to_vec(b.values());
        auto loss = [&]() {
            DTensor aa(a.shape(), av);
            DTensor bb(b.shape(), bv);
            DTensor e = ops::concat_channels(aa, bb);
            double acc = 0;
            for (size_t i = 0; i < e.vec().size(); ++i) acc += e.vec()[i] * coef.vec()[i];
            return acc;
        };
        CHECK(gradcheck::max_rel_err(a.grad(), gradcheck::central_diff(loss, av)) < 1e-3);
        CHECK(gradcheck::max_rel_err(b.grad(), gradcheck::central_diff(loss, bv)) < 1e-3);
    }
}

TEST_CASE("the full double-precision gradient suite passes") {
    GradSuiteResult r = run_gradient_suite(2026, /*verbose=*/false);
    for (const auto& line : r.lines) {
        INFO(line.op, " max rel err ", line.max_rel_err);
        CHECK(line.ok);
    }
    CHECK(r.ok);
}
