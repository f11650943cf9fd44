#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ternq/tensor.hpp"

namespace ternq::gradcheck {

// Central finite differences of a scalar function with respect to a flat
// parameter vector. `loss` must recompute the forward pass from the current
// contents of `params` on every call; this keeps the oracle independent of
// any recorded backward rule.
template <class LossFn>
std::vector<double> central_diff(LossFn&& loss, std::vector<double>& params,
                                 double step = 1e-4) {
    std::vector<double> grad(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        const double orig = params[i];
        params[i] = orig + step;
        const double up = loss();
        params[i] = orig - step;
        const double down = loss();
        params[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    return grad;
}

inline double max_rel_err(std::span<const double> analytic, std::span<const double> numeric,
                          double abs_floor = 1e-6) {
    double worst = 0.0;
    for (size_t i = 0; i < analytic.size(); ++i) {
        const double denom =
            std::max({std::abs(analytic[i]), std::abs(numeric[i]), abs_floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

}  // namespace ternq::gradcheck

namespace ternq {

struct GradCheckLine {
    std::string op;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool ok = false;
};

struct GradSuiteResult {
    std::vector<GradCheckLine> lines;
    bool ok = true;
};

// Double-precision finite-difference verification of every differentiable
// operation (20 random small instances each) and of the quantizer's
// gamma gradients. Prints one line per check when `verbose`.
GradSuiteResult run_gradient_suite(uint64_t seed, bool verbose);

}  // namespace ternq
