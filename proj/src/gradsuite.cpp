#include "ternq/gradcheck.hpp"

#include <cstdio>

#include "ternq/loss.hpp"
#include "ternq/ops.hpp"
#include "ternq/quant.hpp"
#include "ternq/rng.hpp"

namespace ternq {

namespace {

using DTensor = TensorT<double>;
using DTape = TapeT<double>;

DTensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    DTensor t(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

// dot with fixed coefficients turns any tensor output into a scalar loss
DTensor dot_loss(const DTensor& x, const DTensor& coef) {
    return ops::sum(ops::mul(x, coef));
}

struct OpCheck {
    double worst = 0.0;
    void merge(double e) { worst = std::max(worst, e); }
};

double check_conv3d(Rng& rng) {
    OpCheck chk;
    for (int inst = 0; inst < 20; ++inst) {
        const int64_t n = 1 + static_cast<int64_t>(rng.below(2));
        const int64_t cin = 1 + static_cast<int64_t>(rng.below(2));
        const int64_t cout = 1 + static_cast<int64_t>(rng.below(2));
        const int64_t k = 3;
        const int64_t sp = 5;
        const int64_t stride = 1 + static_cast<int64_t>(rng.below(2));
        const int64_t pad = static_cast<int64_t>(rng.below(2));

        DTensor x = random_tensor(rng, {n, cin, sp, sp, sp});
        DTensor kern = random_tensor(rng, {cout, cin, k, k, k});
        DTensor bias = random_tensor(rng, {cout});

        DTensor probe = ops::conv3d(x, kern, &bias, stride, pad);
        DTensor coef = random_tensor(rng, probe.shape());

        DTape tape;
        tape.watch(x);
        tape.watch(kern);
        tape.watch(bias);
        tape.backward(dot_loss(ops::conv3d(x, kern, &bias, stride, pad), coef));

        auto xv = to_vec(x.values());
        auto kv = to_vec(kern.values());
        auto bv = to_vec(bias.values());
        auto loss_from = [&](std::vector<double>& xs, std::vector<double>& ks,
                             std::vector<double>& bs) {
            DTensor xx(x.shape(), xs);
            DTensor kk(kern.shape(), ks);
            DTensor bb(bias.shape(), bs);
            DTensor out = ops::conv3d(xx, kk, &bb, stride, pad);
            double acc = 0;
            for (size_t i = 0; i < out.vec().size(); ++i) acc += out.vec()[i] * coef.vec()[i];
            return acc;
        };
        auto fx = gradcheck::central_diff([&] { return loss_from(xv, kv, bv); }, xv);
        auto fk = gradcheck::central_diff([&] { return loss_from(xv, kv, bv); }, kv);
        auto fb = gradcheck::central_diff([&] { return loss_from(xv, kv, bv); }, bv);
        chk.merge(gradcheck::max_rel_err(x.grad(), fx));
        chk.merge(gradcheck::max_rel_err(kern.grad(), fk));
        chk.merge(gradcheck::max_rel_err(bias.grad(), fb));
    }
    return chk.worst;
}

double check_softmax(Rng& rng) {
    OpCheck chk;
    for (int inst = 0; inst < 20; ++inst) {
        const int64_t n = 1 + static_cast<int64_t>(rng.below(2));
        const int64_t c = 2 + static_cast<int64_t>(rng.below(3));
        DTensor x = random_tensor(rng, {n, c, 2, 2, 2}, -2.0, 2.0);
        DTensor probe = ops::softmax_channels(x);
        DTensor coef = random_tensor(rng, probe.shape());

        DTape tape;
        tape.watch(x);
        tape.backward(dot_loss(ops::softmax_channels(x), coef));

        auto xv = to_vec(x.values());
        auto fd = gradcheck::central_diff(
            [&] {
                DTensor xx(x.shape(), xv);
                DTensor out = ops::softmax_channels(xx);
                double acc = 0;
                for (size_t i = 0; i < out.vec().size(); ++i)
                    acc += out.vec()[i] * coef.vec()[i];
                return acc;
            },
            xv);
        chk.merge(gradcheck::max_rel_err(x.grad(), fd));
    }
    return chk.worst;
}

double check_dice(Rng& rng) {
    OpCheck chk;
    for (int inst = 0; inst < 20; ++inst) {
        const int64_t n = 1;
        const int64_t c = 2 + static_cast<int64_t>(rng.below(2));
        const Shape shape{n, c, 3, 3, 3};
        DTensor probs = random_tensor(rng, shape, 0.05, 1.0);
        IntTensor labels(Shape{n, 3, 3, 3});
        for (auto& y : labels.values) y = static_cast<int32_t>(rng.below(static_cast<uint64_t>(c)));
        DTensor target = onehot<double>(labels, c);

        DTape tape;
        tape.watch(probs);
        tape.backward(dice_loss(probs, target));

        auto pv = to_vec(probs.values());
        auto fd = gradcheck::central_diff(
            [&] {
                DTensor pp(shape, pv);
                return dice_loss(pp, target).item();
            },
            pv);
        chk.merge(gradcheck::max_rel_err(probs.grad(), fd));
    }
    return chk.worst;
}

double check_wce(Rng& rng) {
    OpCheck chk;
    for (int inst = 0; inst < 20; ++inst) {
        const int64_t n = 1 + static_cast<int64_t>(rng.below(2));
        const int64_t c = 2 + static_cast<int64_t>(rng.below(3));
        const Shape shape{n, c, 2, 2, 2};
        DTensor logits = random_tensor(rng, shape, -2.0, 2.0);
        IntTensor labels(Shape{n, 2, 2, 2});
        for (auto& y : labels.values) y = static_cast<int32_t>(rng.below(static_cast<uint64_t>(c)));
        std::vector<double> weights(static_cast<size_t>(c));
        for (auto& w : weights) w = rng.uniform(0.2, 3.0);

        DTape tape;
        tape.watch(logits);
        tape.backward(weighted_cross_entropy(logits, labels, weights));

        auto zv = to_vec(logits.values());
        auto fd = gradcheck::central_diff(
            [&] {
                DTensor zz(shape, zv);
                return weighted_cross_entropy(zz, labels, weights).item();
            },
            zv);
        chk.merge(gradcheck::max_rel_err(logits.grad(), fd));
    }
    return chk.worst;
}

double check_batchnorm(Rng& rng) {
    OpCheck chk;
    for (int inst = 0; inst < 20; ++inst) {
        const int64_t n = 2, c = 2;
        const Shape shape{n, c, 3, 3, 3};
        DTensor x = random_tensor(rng, shape, -1.5, 1.5);
        DTensor gamma = random_tensor(rng, {c}, 0.5, 1.5);
        DTensor beta = random_tensor(rng, {c}, -0.5, 0.5);
        DTensor coef = random_tensor(rng, shape);

        auto run = [&](const DTensor& xx, const DTensor& gg, const DTensor& bb) {
            std::vector<double> rm(static_cast<size_t>(c), 0.0);
            std::vector<double> rv(static_cast<size_t>(c), 1.0);
            return ops::batchnorm3d(xx, gg, bb, rm, rv, true);
        };

        DTape tape;
        tape.watch(x);
        tape.watch(gamma);
        tape.watch(beta);
        tape.backward(dot_loss(run(x, gamma, beta), coef));

        auto xv = to_vec(x.values());
        auto gv = to_vec(gamma.values());
        auto bv = to_vec(beta.values());
        auto loss_from = [&]() {
            DTensor xx(shape, xv);
            DTensor gg(Shape{c}, gv);
            DTensor bb(Shape{c}, bv);
            DTensor out = run(xx, gg, bb);
            double acc = 0;
            for (size_t i = 0; i < out.vec().size(); ++i) acc += out.vec()[i] * coef.vec()[i];
            return acc;
        };
        chk.merge(gradcheck::max_rel_err(x.grad(), gradcheck::central_diff(loss_from, xv)));
        chk.merge(gradcheck::max_rel_err(gamma.grad(), gradcheck::central_diff(loss_from, gv)));
        chk.merge(gradcheck::max_rel_err(beta.grad(), gradcheck::central_diff(loss_from, bv)));
    }
    return chk.worst;
}

double check_upsample_and_transpose(Rng& rng) {
    OpCheck chk;
    for (int inst = 0; inst < 20; ++inst) {
        DTensor x = random_tensor(rng, {1, 2, 2, 2, 2});
        {
            DTensor probe = ops::upsample_nearest(x, 2);
            DTensor coef = random_tensor(rng, probe.shape());
            DTape tape;
            tape.watch(x);
            tape.backward(dot_loss(ops::upsample_nearest(x, 2), coef));
            auto xv = to_vec(x.values());
            auto fd = gradcheck::central_diff(
                [&] {
                    DTensor xx(x.shape(), xv);
                    DTensor out = ops::upsample_nearest(xx, 2);
                    double acc = 0;
                    for (size_t i = 0; i < out.vec().size(); ++i)
                        acc += out.vec()[i] * coef.vec()[i];
                    return acc;
                },
                xv);
            chk.merge(gradcheck::max_rel_err(x.grad(), fd));
        }
        {
            DTensor x2 = random_tensor(rng, {1, 2, 2, 2, 2});
            DTensor kern = random_tensor(rng, {2, 2, 2, 2, 2});
            DTensor probe = ops::conv3d_transpose(x2, kern, 2);
            DTensor coef = random_tensor(rng, probe.shape());
            DTape tape;
            tape.watch(x2);
            tape.watch(kern);
            tape.backward(dot_loss(ops::conv3d_transpose(x2, kern, 2), coef));
            auto xv = to_vec(x2.values());
            auto kv = to_vec(kern.values());
            auto loss_from = [&]() {
                DTensor xx(x2.shape(), xv);
                DTensor kk(kern.shape(), kv);
                DTensor out = ops::conv3d_transpose(xx, kk, 2);
                double acc = 0;
                for (size_t i = 0; i < out.vec().size(); ++i) acc += out.vec()[i] * coef.vec()[i];
                return acc;
            };
            chk.merge(gradcheck::max_rel_err(x2.grad(), gradcheck::central_diff(loss_from, xv)));
            chk.merge(gradcheck::max_rel_err(kern.grad(), gradcheck::central_diff(loss_from, kv)));
        }
    }
    return chk.worst;
}

// gamma gradients with perturbation 1e-6; the ternary pattern must not
// change between the two FD evaluations (it cannot: bins depend only on the
// weights and delta), asserted anyway.
double check_gamma(Rng& rng) {
    OpCheck chk;
    for (int inst = 0; inst < 20; ++inst) {
        const int64_t cout = 1 + static_cast<int64_t>(rng.below(3));
        const int64_t block = 4 + static_cast<int64_t>(rng.below(12));
        DTensor w = random_tensor(rng, {cout, block});
        QuantStateT<double> st;
        st.scheme = inst % 2 == 0 ? QuantScheme::TDQ3 : QuantScheme::TTQ;
        quant::refresh(st, w);
        const TernaryTensor bins_before = quant::quantize_codes(w, st);

        DTensor gp = DTensor::scalar(rng.uniform(0.5, 1.5));
        DTensor gn = DTensor::scalar(rng.uniform(0.5, 1.5));
        DTensor probe = quant::quantize_forward(w, st);
        DTensor coef = random_tensor(rng, probe.shape());

        DTape tape;
        tape.watch(gp);
        tape.watch(gn);
        tape.backward(dot_loss(quant::quantize(w, gp, gn, st), coef));

        std::vector<double> gammas{gp.item(), gn.item()};
        auto fd = gradcheck::central_diff(
            [&] {
                QuantStateT<double> s2 = st;
                s2.gamma_pos = gammas[0];
                s2.gamma_neg = gammas[1];
                DTensor out = quant::quantize_forward(w, s2);
                const TernaryTensor bins_now = quant::quantize_codes(w, s2);
                for (size_t i = 0; i < bins_now.pos_mask.size(); ++i)
                    if (bins_now.value(i) != bins_before.value(i))
                        throw std::logic_error("gamma perturbation crossed a bin");
                double acc = 0;
                for (size_t i = 0; i < out.vec().size(); ++i) acc += out.vec()[i] * coef.vec()[i];
                return acc;
            },
            gammas, 1e-6);
        const double analytic[2] = {gp.grad()[0], gn.grad()[0]};
        chk.merge(gradcheck::max_rel_err(analytic, fd));
    }
    return chk.worst;
}

}  // namespace

GradSuiteResult run_gradient_suite(uint64_t seed, bool verbose) {
    Rng rng(seed);
    GradSuiteResult result;
    auto push = [&](const std::string& op, double err, double tol) {
        GradCheckLine line{op, err, tol, err < tol};
        if (verbose)
            std::printf("%-18s max rel err %.3e (tol %.0e) %s\n", op.c_str(), err, tol,
                        line.ok ? "ok" : "FAIL");
        result.ok = result.ok && line.ok;
        result.lines.push_back(std::move(line));
    };
    push("conv3d", check_conv3d(rng), 1e-3);
    push("softmax", check_softmax(rng), 1e-3);
    push("dice_loss", check_dice(rng), 1e-3);
    push("cross_entropy", check_wce(rng), 1e-3);
    push("batchnorm3d", check_batchnorm(rng), 1e-3);
    push("upsample/deconv", check_upsample_and_transpose(rng), 1e-3);
    push("quant_gamma", check_gamma(rng), 1e-4);
    return result;
}

}  // namespace ternq
