#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ternq/ops.hpp"
#include "ternq/tensor.hpp"

namespace ternq {

enum class QuantScheme : uint8_t { FULL = 0, TDQ3 = 1, TTQ = 2, BTQ = 3 };

inline const char* scheme_name(QuantScheme s) {
    switch (s) {
        case QuantScheme::FULL: return "full";
        case QuantScheme::TDQ3: return "3dq";
        case QuantScheme::TTQ: return "ttq";
        case QuantScheme::BTQ: return "btq";
    }
    return "?";
}

inline QuantScheme parse_scheme(const std::string& s) {
    if (s == "full") return QuantScheme::FULL;
    if (s == "3dq") return QuantScheme::TDQ3;
    if (s == "ttq") return QuantScheme::TTQ;
    if (s == "btq") return QuantScheme::BTQ;
    throw std::invalid_argument("unknown quantization scheme '" + s +
                                "' (expected full, 3dq, ttq or btq)");
}

// Quantized weights as a shape plus one bit per element in each of two masks.
// An element is +1 if its pos bit is set, -1 if its neg bit is set, else 0.
struct TernaryTensor {
    Shape shape;
    std::vector<bool> pos_mask, neg_mask;

    TernaryTensor() = default;
    explicit TernaryTensor(Shape s) {
        const int64_t n = numel_of(s);
        shape = std::move(s);
        pos_mask.assign(static_cast<size_t>(n), false);
        neg_mask.assign(static_cast<size_t>(n), false);
    }
    int64_t numel() const { return static_cast<int64_t>(pos_mask.size()); }
    int value(size_t i) const { return pos_mask[i] ? 1 : (neg_mask[i] ? -1 : 0); }
    void set(size_t i, int v) {
        pos_mask[i] = v > 0;
        neg_mask[i] = v < 0;
    }
    void validate() const {
        if (pos_mask.size() != neg_mask.size())
            throw std::logic_error("ternary masks differ in length");
        for (size_t i = 0; i < pos_mask.size(); ++i)
            if (pos_mask[i] && neg_mask[i])
                throw std::logic_error("ternary element marked both positive and negative");
    }
};

inline double zero_fraction(const TernaryTensor& t) {
    int64_t zeros = 0;
    for (size_t i = 0; i < t.pos_mask.size(); ++i)
        if (!t.pos_mask[i] && !t.neg_mask[i]) zeros++;
    return t.numel() == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(t.numel());
}

// Per-layer quantization record: threshold factor, derived threshold, the
// learned bin scales and the per-channel magnitude statistic.
template <class T>
struct QuantStateT {
    T t = T(0.05);
    T delta = T(0);
    T gamma_pos = T(1);
    T gamma_neg = T(1);
    std::vector<T> alpha;  // one entry per output channel, or one entry total
    QuantScheme scheme = QuantScheme::TDQ3;
    bool per_channel_alpha = true;
};

using QuantState = QuantStateT<float>;

namespace quant {

template <class T>
T compute_delta(std::span<const T> weights, T t) {
    if (weights.empty()) throw std::invalid_argument("compute_delta: empty weight tensor");
    if (!(t >= T(0) && t < T(1)))
        throw std::invalid_argument("compute_delta: threshold factor must be in [0, 1)");
    T mx = 0;
    for (T w : weights) mx = std::max(mx, std::abs(w));
    return t * mx;
}

// +1 if w > delta, 0 if |w| <= delta, -1 if w < -delta
template <class T>
TernaryTensor ternarize(const TensorT<T>& weights, T delta) {
    if (delta < T(0)) throw std::invalid_argument("ternarize: delta must be >= 0");
    TernaryTensor out(weights.shape());
    auto wv = weights.values();
    for (size_t i = 0; i < wv.size(); ++i) {
        if (wv[i] > delta) out.pos_mask[i] = true;
        else if (wv[i] < -delta) out.neg_mask[i] = true;
    }
    return out;
}

// two-bin sign split; w = 0 lands in the positive bin
template <class T>
TernaryTensor binarize(const TensorT<T>& weights) {
    TernaryTensor out(weights.shape());
    auto wv = weights.values();
    for (size_t i = 0; i < wv.size(); ++i) {
        if (wv[i] >= T(0)) out.pos_mask[i] = true;
        else out.neg_mask[i] = true;
    }
    return out;
}

template <class T>
TernaryTensor quantize_codes(const TensorT<T>& weights, const QuantStateT<T>& state) {
    if (state.scheme == QuantScheme::BTQ) return binarize(weights);
    return ternarize(weights, state.delta);
}

// Mean |w| over the non-zero bins of each output channel (axis 0 of the
// kernel shape); channels whose bins are empty get the neutral value 1.
template <class T>
std::vector<T> compute_alpha(const TensorT<T>& weights, const TernaryTensor& tern,
                             bool per_channel) {
    if (weights.shape() != tern.shape)
        throw std::invalid_argument("compute_alpha: weight/ternary shape mismatch");
    const int64_t channels = per_channel ? weights.dim(0) : 1;
    const int64_t block = weights.numel() / channels;
    std::vector<T> alpha(static_cast<size_t>(channels));
    auto wv = weights.values();
    for (int64_t c = 0; c < channels; ++c) {
        T acc = 0;
        int64_t count = 0;
        for (int64_t i = c * block; i < (c + 1) * block; ++i) {
            if (tern.value(static_cast<size_t>(i)) != 0) {
                acc += std::abs(wv[static_cast<size_t>(i)]);
                count++;
            }
        }
        alpha[static_cast<size_t>(c)] = count > 0 ? acc / static_cast<T>(count) : T(1);
    }
    return alpha;
}

template <class T>
void check_gamma_finite(const QuantStateT<T>& state) {
    if (!std::isfinite(state.gamma_pos) || !std::isfinite(state.gamma_neg))
        throw std::invalid_argument("quantize: non-finite scaling factor");
}

// Recomputes delta and alpha from the current weights; the learned scales
// are left untouched. FULL is a no-op.
template <class T>
void refresh(QuantStateT<T>& state, const TensorT<T>& weights) {
    if (state.scheme == QuantScheme::FULL) return;
    state.delta = compute_delta(weights.values(), state.t);
    const int64_t channels = state.per_channel_alpha ? weights.dim(0) : 1;
    if (state.scheme == QuantScheme::TDQ3) {
        state.alpha = compute_alpha(weights, quantize_codes(weights, state),
                                    state.per_channel_alpha);
    } else {
        state.alpha.assign(static_cast<size_t>(channels), T(1));
    }
}

template <class T>
TensorT<T> quantize_forward(const TensorT<T>& weights, const QuantStateT<T>& state) {
    if (state.scheme == QuantScheme::FULL) return weights.clone();
    check_gamma_finite(state);
    const int64_t channels = static_cast<int64_t>(state.alpha.size());
    if (channels == 0) throw std::logic_error("quantize_forward: state not refreshed");
    if (state.per_channel_alpha && channels != weights.dim(0))
        throw std::invalid_argument("quantize_forward: alpha count does not match output channels");
    const int64_t block = weights.numel() / channels;

    const TernaryTensor tern = quantize_codes(weights, state);
    TensorT<T> out(weights.shape());
    auto ov = out.values();
    for (int64_t c = 0; c < channels; ++c) {
        const T up = state.gamma_pos * state.alpha[static_cast<size_t>(c)];
        const T dn = -(state.gamma_neg * state.alpha[static_cast<size_t>(c)]);
        for (int64_t i = c * block; i < (c + 1) * block; ++i) {
            const int v = tern.value(static_cast<size_t>(i));
            ov[static_cast<size_t>(i)] = v > 0 ? up : (v < 0 ? dn : T(0));
        }
    }
    return out;
}

template <class T>
struct QuantGrads {
    std::vector<T> grad_weights;
    T grad_gamma_pos = 0;
    T grad_gamma_neg = 0;
};

// Straight-through rule. Bin scales route the upstream gradient times the
// bin coefficient into the latent weights; the zero bin passes it through
// unchanged. Alpha and delta are constants of the step.
template <class T>
QuantGrads<T> quantize_backward(std::span<const T> upstream, const TensorT<T>& weights,
                                const QuantStateT<T>& state) {
    QuantGrads<T> out;
    if (static_cast<int64_t>(upstream.size()) != weights.numel())
        throw std::invalid_argument("quantize_backward: upstream gradient shape mismatch");
    if (state.scheme == QuantScheme::FULL) {
        out.grad_weights.assign(upstream.begin(), upstream.end());
        return out;
    }
    const int64_t channels = static_cast<int64_t>(state.alpha.size());
    const int64_t block = weights.numel() / channels;
    const TernaryTensor tern = quantize_codes(weights, state);
    out.grad_weights.resize(upstream.size());
    for (int64_t c = 0; c < channels; ++c) {
        const T a = state.alpha[static_cast<size_t>(c)];
        for (int64_t i = c * block; i < (c + 1) * block; ++i) {
            const size_t idx = static_cast<size_t>(i);
            const int v = tern.value(idx);
            if (v > 0) {
                out.grad_weights[idx] = state.gamma_pos * a * upstream[idx];
                out.grad_gamma_pos += upstream[idx] * a;
            } else if (v < 0) {
                out.grad_weights[idx] = state.gamma_neg * a * upstream[idx];
                out.grad_gamma_neg -= upstream[idx] * a;
            } else {
                out.grad_weights[idx] = upstream[idx];
            }
        }
    }
    return out;
}

// Differentiable quantization. The gamma tensors are the learned scalars
// (their current values override the snapshot in `state`); delta/alpha must
// be refreshed beforehand. Built on the custom-gradient hook so the reverse
// pass applies quantize_backward verbatim.
template <class T>
TensorT<T> quantize(const TensorT<T>& weights, const TensorT<T>& gamma_pos,
                    const TensorT<T>& gamma_neg, QuantStateT<T> state) {
    if (state.scheme == QuantScheme::FULL)
        throw std::logic_error("quantize: FULL scheme has no quantization op");
    state.gamma_pos = gamma_pos.item();
    state.gamma_neg = gamma_neg.item();
    return ops::custom_op<T>(
        {weights, gamma_pos, gamma_neg},
        [state](const std::vector<TensorT<T>>& ins) {
            return quantize_forward(ins[0], state);
        },
        [state](std::span<const T> upstream, const std::vector<TensorT<T>>& ins) {
            QuantGrads<T> qg = quantize_backward(upstream, ins[0], state);
            std::vector<std::vector<T>> grads(3);
            grads[0] = std::move(qg.grad_weights);
            grads[1] = {qg.grad_gamma_pos};
            grads[2] = {qg.grad_gamma_neg};
            return grads;
        });
}

}  // namespace quant
}  // namespace ternq
