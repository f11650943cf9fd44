#pragma once

#include <algorithm>
#include <cmath>

#include "ternq/tensor.hpp"

namespace ternq {

// one-hot encoding of labels [N, ...spatial] -> [N, C, ...spatial]
template <class T>
TensorT<T> onehot(const IntTensor& labels, int64_t num_classes) {
    if (labels.shape.empty()) throw std::invalid_argument("onehot: empty labels");
    Shape os;
    os.push_back(labels.shape[0]);
    os.push_back(num_classes);
    int64_t spatial = 1;
    for (size_t i = 1; i < labels.shape.size(); ++i) {
        os.push_back(labels.shape[i]);
        spatial *= labels.shape[i];
    }
    TensorT<T> out(os);
    auto ov = out.values();
    const int64_t n = labels.shape[0];
    for (int64_t i = 0; i < n; ++i)
        for (int64_t v = 0; v < spatial; ++v) {
            const int32_t y = labels.values[static_cast<size_t>(i * spatial + v)];
            if (y < 0 || y >= num_classes)
                throw std::invalid_argument("onehot: label " + std::to_string(y) + " out of range");
            ov[(i * num_classes + y) * spatial + v] = T(1);
        }
    return out;
}

// Soft Dice loss over class-probability maps:
//   1 - mean_c (2*sum(p_c*g_c) + eps) / (sum(p_c) + sum(g_c) + eps)
// Sums pool the batch and all voxels.
template <class T>
TensorT<T> dice_loss(const TensorT<T>& probs, const TensorT<T>& target_onehot, T eps = T(1e-6)) {
    if (probs.shape() != target_onehot.shape())
        throw std::invalid_argument("dice_loss: probs/target shape mismatch");
    if (probs.ndim() < 2) throw std::invalid_argument("dice_loss: rank >= 2 required");
    const int64_t n = probs.dim(0), c = probs.dim(1);
    int64_t spatial = 1;
    for (size_t i = 2; i < probs.ndim(); ++i) spatial *= probs.dim(i);

    const T* pv = probs.values().data();
    const T* gv = target_onehot.values().data();
    std::vector<T> inter(c, T(0)), denom(c, T(0));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            const int64_t base = (i * c + ch) * spatial;
            T it = 0, dn = 0;
            for (int64_t v = 0; v < spatial; ++v) {
                it += pv[base + v] * gv[base + v];
                dn += pv[base + v] + gv[base + v];
            }
            inter[ch] += it;
            denom[ch] += dn;
        }
    T dice_sum = 0;
    for (int64_t ch = 0; ch < c; ++ch)
        dice_sum += (T(2) * inter[ch] + eps) / (denom[ch] + eps);
    TensorT<T> out = TensorT<T>::scalar(T(1) - dice_sum / static_cast<T>(c));

    if (auto* tape = probs.tape()) {
        auto gp = target_onehot.payload_ptr();
        auto inter_sh = std::make_shared<std::vector<T>>(std::move(inter));
        auto denom_sh = std::make_shared<std::vector<T>>(std::move(denom));
        size_t id = tape->record({probs.node()}, 1,
            [gp, inter_sh, denom_sh, n, c, spatial, eps](std::span<const T> g,
                                                         const typename TapeT<T>::GradSinks& sinks) {
                auto& gx = *sinks[0];
                const T gout = g[0];
                for (int64_t ch = 0; ch < c; ++ch) {
                    const T s = (*denom_sh)[ch] + eps;
                    const T num = T(2) * (*inter_sh)[ch] + eps;
                    // d(dice_c)/dp_i = (2*g_i*s - num) / s^2; loss contributes -1/c of it
                    const T inv_s2 = T(1) / (s * s);
                    for (int64_t i = 0; i < n; ++i) {
                        const int64_t base = (i * c + ch) * spatial;
                        for (int64_t v = 0; v < spatial; ++v) {
                            const T dd = (T(2) * gp->values[base + v] * s - num) * inv_s2;
                            gx[base + v] += gout * (-dd / static_cast<T>(c));
                        }
                    }
                }
            });
        out.attach(tape, id);
    }
    return out;
}

// Class-weighted cross entropy on logits, mean over voxels:
//   (1/V) * sum_v w[y_v] * (-log softmax(logits)_{y_v})
template <class T>
TensorT<T> weighted_cross_entropy(const TensorT<T>& logits, const IntTensor& labels,
                                  const std::vector<T>& class_weights) {
    if (logits.ndim() < 2) throw std::invalid_argument("weighted_cross_entropy: rank >= 2 required");
    const int64_t n = logits.dim(0), c = logits.dim(1);
    int64_t spatial = 1;
    for (size_t i = 2; i < logits.ndim(); ++i) spatial *= logits.dim(i);
    if (static_cast<int64_t>(class_weights.size()) != c)
        throw std::invalid_argument("weighted_cross_entropy: weights length must equal class count");
    if (labels.numel() != n * spatial)
        throw std::invalid_argument("weighted_cross_entropy: labels shape mismatch");

    const T* zv = logits.values().data();
    const int64_t vox = n * spatial;
    // softmax probabilities kept for the backward rule
    auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(logits.numel()));
    T loss = 0;
    for (int64_t i = 0; i < n; ++i) {
        const int64_t base = i * c * spatial;
        for (int64_t v = 0; v < spatial; ++v) {
            T mx = zv[base + v];
            for (int64_t ch = 1; ch < c; ++ch) mx = std::max(mx, zv[base + ch * spatial + v]);
            T denom = 0;
            for (int64_t ch = 0; ch < c; ++ch)
                denom += std::exp(zv[base + ch * spatial + v] - mx);
            const T logdenom = std::log(denom);
            for (int64_t ch = 0; ch < c; ++ch) {
                const size_t idx = base + ch * spatial + v;
                (*probs)[idx] = std::exp(zv[idx] - mx - logdenom);
            }
            const int32_t y = labels.values[static_cast<size_t>(i * spatial + v)];
            if (y < 0 || y >= c)
                throw std::invalid_argument("weighted_cross_entropy: label out of range");
            const T logp = zv[base + y * spatial + v] - mx - logdenom;
            loss += class_weights[static_cast<size_t>(y)] * (-logp);
        }
    }
    loss /= static_cast<T>(vox);
    TensorT<T> out = TensorT<T>::scalar(loss);

    if (auto* tape = logits.tape()) {
        auto labels_sh = std::make_shared<std::vector<int32_t>>(labels.values);
        auto weights_sh = std::make_shared<std::vector<T>>(class_weights);
        size_t id = tape->record({logits.node()}, 1,
            [probs, labels_sh, weights_sh, n, c, spatial, vox](
                std::span<const T> g, const typename TapeT<T>::GradSinks& sinks) {
                auto& gx = *sinks[0];
                const T gout = g[0] / static_cast<T>(vox);
                for (int64_t i = 0; i < n; ++i) {
                    const int64_t base = i * c * spatial;
                    for (int64_t v = 0; v < spatial; ++v) {
                        const int32_t y = (*labels_sh)[static_cast<size_t>(i * spatial + v)];
                        const T wy = (*weights_sh)[static_cast<size_t>(y)];
                        for (int64_t ch = 0; ch < c; ++ch) {
                            const size_t idx = base + ch * spatial + v;
                            const T ind = ch == y ? T(1) : T(0);
                            gx[idx] += gout * wy * ((*probs)[idx] - ind);
                        }
                    }
                }
            });
        out.attach(tape, id);
    }
    return out;
}

// Median frequency balancing: weight_c = median(freq over present classes) / freq_c.
// Classes absent from the volume get weight 0.
inline std::vector<float> median_frequency_weights(const IntTensor& labels, int64_t num_classes) {
    std::vector<int64_t> counts(static_cast<size_t>(num_classes), 0);
    for (int32_t y : labels.values) {
        if (y < 0 || y >= num_classes)
            throw std::invalid_argument("median_frequency_weights: label out of range");
        counts[static_cast<size_t>(y)]++;
    }
    const double total = static_cast<double>(labels.numel());
    std::vector<double> present;
    for (int64_t c = 0; c < num_classes; ++c)
        if (counts[static_cast<size_t>(c)] > 0)
            present.push_back(static_cast<double>(counts[static_cast<size_t>(c)]) / total);
    if (present.empty()) throw std::invalid_argument("median_frequency_weights: no labels present");
    std::sort(present.begin(), present.end());
    const size_t mid = present.size() / 2;
    const double median = present.size() % 2 == 1
                              ? present[mid]
                              : 0.5 * (present[mid - 1] + present[mid]);
    std::vector<float> weights(static_cast<size_t>(num_classes), 0.0f);
    for (int64_t c = 0; c < num_classes; ++c) {
        const int64_t cnt = counts[static_cast<size_t>(c)];
        if (cnt > 0)
            weights[static_cast<size_t>(c)] =
                static_cast<float>(median / (static_cast<double>(cnt) / total));
    }
    return weights;
}

// Hard Dice on argmax predictions: 2|P∩G| / (|P|+|G|) per class, counts pooled
// over everything passed in. Returns 1.0 for classes empty in both.
struct DiceScores {
    std::vector<double> per_class;
    double mean_foreground = 0.0;
};

inline DiceScores dice_scores(const IntTensor& pred, const IntTensor& truth, int64_t num_classes) {
    if (pred.numel() != truth.numel())
        throw std::invalid_argument("dice_scores: prediction/truth size mismatch");
    std::vector<int64_t> p(static_cast<size_t>(num_classes), 0);
    std::vector<int64_t> g(static_cast<size_t>(num_classes), 0);
    std::vector<int64_t> pg(static_cast<size_t>(num_classes), 0);
    for (size_t i = 0; i < pred.values.size(); ++i) {
        const int32_t a = pred.values[i], b = truth.values[i];
        if (a < 0 || a >= num_classes || b < 0 || b >= num_classes)
            throw std::invalid_argument("dice_scores: label out of range");
        p[static_cast<size_t>(a)]++;
        g[static_cast<size_t>(b)]++;
        if (a == b) pg[static_cast<size_t>(a)]++;
    }
    DiceScores out;
    out.per_class.resize(static_cast<size_t>(num_classes));
    double fg_sum = 0;
    for (int64_t c = 0; c < num_classes; ++c) {
        const int64_t den = p[static_cast<size_t>(c)] + g[static_cast<size_t>(c)];
        out.per_class[static_cast<size_t>(c)] =
            den == 0 ? 1.0 : 2.0 * static_cast<double>(pg[static_cast<size_t>(c)]) / static_cast<double>(den);
        if (c > 0) fg_sum += out.per_class[static_cast<size_t>(c)];
    }
    out.mean_foreground = num_classes > 1 ? fg_sum / static_cast<double>(num_classes - 1) : 0.0;
    return out;
}

// argmax over the channel axis of [N,C,...spatial] -> [N,...spatial]
template <class T>
IntTensor argmax_channels(const TensorT<T>& x) {
    if (x.ndim() < 2) throw std::invalid_argument("argmax_channels: rank >= 2 required");
    const int64_t n = x.dim(0), c = x.dim(1);
    int64_t spatial = 1;
    Shape os{n};
    for (size_t i = 2; i < x.ndim(); ++i) {
        os.push_back(x.dim(i));
        spatial *= x.dim(i);
    }
    if (os.size() == 1) os.push_back(1);
    IntTensor out(os);
    const T* xv = x.values().data();
    for (int64_t i = 0; i < n; ++i) {
        const int64_t base = i * c * spatial;
        for (int64_t v = 0; v < spatial; ++v) {
            int32_t best = 0;
            T bestv = xv[base + v];
            for (int64_t ch = 1; ch < c; ++ch) {
                const T cv = xv[base + ch * spatial + v];
                if (cv > bestv) {
                    bestv = cv;
                    best = static_cast<int32_t>(ch);
                }
            }
            out.values[static_cast<size_t>(i * spatial + v)] = best;
        }
    }
    return out;
}

}  // namespace ternq
