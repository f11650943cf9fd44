#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "ternq/tensor.hpp"

namespace ternq {

// Adam with bias correction. Parameters are identified by their position in
// the span, which must be stable across steps. A parameter without a
// gradient buffer is treated as having a zero gradient.
class Adam {
public:
    explicit Adam(float lr, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::span<Tensor> params) {
        if (slots_.empty()) {
            slots_.resize(params.size());
            for (size_t i = 0; i < params.size(); ++i) {
                slots_[i].m.assign(static_cast<size_t>(params[i].numel()), 0.0f);
                slots_[i].v.assign(static_cast<size_t>(params[i].numel()), 0.0f);
            }
        }
        if (slots_.size() != params.size())
            throw std::logic_error("Adam: parameter list changed size between steps");
        ++t_;
        const float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
        const float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& slot = slots_[i];
            auto vals = params[i].values();
            if (slot.m.size() != vals.size())
                throw std::logic_error("Adam: parameter shape changed between steps");
            std::span<const float> g;
            if (params[i].has_grad()) g = params[i].grad();
            for (size_t j = 0; j < vals.size(); ++j) {
                const float gj = g.empty() ? 0.0f : g[j];
                slot.m[j] = beta1_ * slot.m[j] + (1.0f - beta1_) * gj;
                slot.v[j] = beta2_ * slot.v[j] + (1.0f - beta2_) * gj * gj;
                const float mhat = slot.m[j] / bc1;
                const float vhat = slot.v[j] / bc2;
                vals[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    int64_t steps_taken() const { return t_; }

private:
    struct Slot {
        std::vector<float> m, v;
    };
    std::vector<Slot> slots_;
    int64_t t_ = 0;
    float lr_, beta1_, beta2_, eps_;
};

}  // namespace ternq
