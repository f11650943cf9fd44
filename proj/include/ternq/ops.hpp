#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <type_traits>

#include "ternq/tensor.hpp"

namespace ternq::ops {

template <class T>
TapeT<T>* find_tape(std::initializer_list<const TensorT<T>*> ins) {
    TapeT<T>* tape = nullptr;
    for (const TensorT<T>* t : ins) {
        if (!t || !t->defined() || t->tape() == nullptr) continue;
        if (tape == nullptr) tape = t->tape();
        else if (tape != t->tape())
            throw std::logic_error("operation mixes tensors from different tapes");
    }
    return tape;
}

// ---------------------------------------------------------------------------
// elementwise + reductions
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
    TensorT<T> out(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    for (size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
    if (auto* tape = find_tape<T>({&x})) {
        auto xp = x.payload_ptr();
        size_t id = tape->record({x.node()}, out.numel(),
            [xp](std::span<const T> g, const typename TapeT<T>::GradSinks& sinks) {
                auto& gx = *sinks[0];
                for (size_t i = 0; i < g.size(); ++i)
                    if (xp->values[i] > T(0)) gx[i] += g[i];
            });
        out.attach(tape, id);
    }
    debug_check_finite(out, "relu");
    return out;
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    TensorT<T> out(a.shape());
    auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + bv[i];
    if (auto* tape = find_tape<T>({&a, &b})) {
        bool da = a.tape() != nullptr, db = b.tape() != nullptr;
        std::vector<size_t> ins;
        if (da) ins.push_back(a.node());
        if (db) ins.push_back(b.node());
        size_t id = tape->record(std::move(ins), out.numel(),
            [da, db](std::span<const T> g, const typename TapeT<T>::GradSinks& sinks) {
                size_t s = 0;
                if (da) {
                    auto& ga = *sinks[s++];
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (db) {
                    auto& gb = *sinks[s++];
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                }
            });
        out.attach(tape, id);
    }
    return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("mul: shape mismatch");
    TensorT<T> out(a.shape());
    auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * bv[i];
    if (auto* tape = find_tape<T>({&a, &b})) {
        bool da = a.tape() != nullptr, db = b.tape() != nullptr;
        auto ap = a.payload_ptr();
        auto bp = b.payload_ptr();
        std::vector<size_t> ins;
        if (da) ins.push_back(a.node());
        if (db) ins.push_back(b.node());
        size_t id = tape->record(std::move(ins), out.numel(),
            [da, db, ap, bp](std::span<const T> g, const typename TapeT<T>::GradSinks& sinks) {
                size_t s = 0;
                if (da) {
                    auto& ga = *sinks[s++];
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bp->values[i];
                }
                if (db) {
                    auto& gb = *sinks[s++];
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ap->values[i];
                }
            });
        out.attach(tape, id);
    }
    return out;
}

template <class T>
TensorT<T> scale(const TensorT<T>& x, T c) {
    TensorT<T> out(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    for (size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] * c;
    if (auto* tape = find_tape<T>({&x})) {
        size_t id = tape->record({x.node()}, out.numel(),
            [c](std::span<const T> g, const typename TapeT<T>::GradSinks& sinks) {
                auto& gx = *sinks[0];
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
            });
        out.attach(tape, id);
    }
    return out;
}

template <class T>
TensorT<T> sum(const TensorT<T>& x) {
    T acc = 0;
    for (T v : x.values()) acc += v;
    TensorT<T> out = TensorT<T>::scalar(acc);
    if (auto* tape = find_tape<T>({&x})) {
        int64_t n = x.numel();
        size_t id = tape->record({x.node()}, 1,
            [n](std::span<const T> g, const typename TapeT<T>::GradSinks& sinks) {
                auto& gx = *sinks[0];
                for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += g[0];
            });
        out.attach(tape, id);
    }
    return out;
}

// ---------------------------------------------------------------------------
// channel-axis ops: layout [N, C, ...spatial]
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.ndim() != b.ndim() || a.ndim() < 2)
        throw std::invalid_argument("concat: tensors must have matching rank >= 2");
    for (size_t i = 0; i < a.ndim(); ++i) {
        if (i == 1) continue;
        if (a.dim(i) != b.dim(i))
            throw std::invalid_argument("concat: non-channel dims differ, " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
    }
    Shape os = a.shape();
    os[1] = a.dim(1) + b.dim(1);
    TensorT<T> out(os);

    int64_t n = a.dim(0);
    int64_t spatial = 1;
    for (size_t i = 2; i < a.ndim(); ++i) spatial *= a.dim(i);
    const int64_t ca = a.dim(1) * spatial, cb = b.dim(1) * spatial;
    auto av = a.values(), bv = b.values();
    auto ov = out.values();
    for (int64_t i = 0; i < n; ++i) {
        std::copy_n(av.data() + i * ca, ca, ov.data() + i * (ca + cb));
        std::copy_n(bv.data() + i * cb, cb, ov.data() + i * (ca + cb) + ca);
    }
    if (auto* tape = find_tape<T>({&a, &b})) {
        bool da = a.tape() != nullptr, db = b.tape() != nullptr;
        std::vector<size_t> ins;
        if (da) ins.push_back(a.node());
        if (db) ins.push_back(b.node());
        size_t id = tape->record(std::move(ins), out.numel(),
            [da, db, n, ca, cb](std::span<const T> g, const typename TapeT<T>::GradSinks& sinks) {
                size_t s = 0;
                if (da) {
                    auto& ga = *sinks[s++];
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < ca; ++j) ga[i * ca + j] += g[i * (ca + cb) + j];
                }
                if (db) {
                    auto& gb = *sinks[s++];
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < cb; ++j) gb[i * cb + j] += g[i * (ca + cb) + ca + j];
                }
            });
        out.attach(tape, id);
    }
    return out;
}

template <class T>
TensorT<T> softmax_channels(const TensorT<T>& x) {
    if (x.ndim() < 2) throw std::invalid_argument("softmax: rank >= 2 required");
    const int64_t n = x.dim(0), c = x.dim(1);
    int64_t spatial = 1;
    for (size_t i = 2; i < x.ndim(); ++i) spatial *= x.dim(i);

    TensorT<T> out(x.shape());
    auto xv = x.values();
    auto ov = out.values();
    for (int64_t i = 0; i < n; ++i) {
        const int64_t base = i * c * spatial;
        for (int64_t v = 0; v < spatial; ++v) {
            T mx = xv[base + v];
            for (int64_t ch = 1; ch < c; ++ch) mx = std::max(mx, xv[base + ch * spatial + v]);
            T denom = 0;
            for (int64_t ch = 0; ch < c; ++ch) {
                T e = std::exp(xv[base + ch * spatial + v] - mx);
                ov[base + ch * spatial + v] = e;
                denom += e;
            }
            for (int64_t ch = 0; ch < c; ++ch) ov[base + ch * spatial + v] /= denom;
        }
    }
    if (auto* tape = find_tape<T>({&x})) {
        auto op = out.payload_ptr();
        size_t id = tape->record({x.node()}, out.numel(),
            [op, n, c, spatial](std::span<const T> g, const typename TapeT<T>::GradSinks& sinks) {
                auto& gx = *sinks[0];
                const auto& p = op->values;
                for (int64_t i = 0; i < n; ++i) {
                    const int64_t base = i * c * spatial;
                    for (int64_t v = 0; v < spatial; ++v) {
                        T dot = 0;
                        for (int64_t ch = 0; ch < c; ++ch) {
                            const size_t idx = base + ch * spatial + v;
                            dot += g[idx] * p[idx];
                        }
                        for (int64_t ch = 0; ch < c; ++ch) {
                            const size_t idx = base + ch * spatial + v;
                            gx[idx] += p[idx] * (g[idx] - dot);
                        }
                    }
                }
            });
        out.attach(tape, id);
    }
    debug_check_finite(out, "softmax");
    return out;
}

// ---------------------------------------------------------------------------
// 3D convolution, input [N,Cin,D,H,W], kernel [Cout,Cin,k,k,k]
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
    int64_t n, cin, d, h, w;
    int64_t cout, k;
    int64_t od, oh, ow;
    int64_t stride, pad;
};

inline ConvDims conv_dims(const Shape& xs, const Shape& ks, int64_t stride, int64_t pad) {
    if (xs.size() != 5) throw std::invalid_argument("conv3d: input must be 5-D [N,Cin,D,H,W]");
    if (ks.size() != 5) throw std::invalid_argument("conv3d: kernel must be 5-D [Cout,Cin,k,k,k]");
    if (ks[2] != ks[3] || ks[3] != ks[4])
        throw std::invalid_argument("conv3d: kernel must be cubic");
    ConvDims dm{};
    dm.n = xs[0];
    dm.cin = xs[1];
    dm.d = xs[2];
    dm.h = xs[3];
    dm.w = xs[4];
    dm.cout = ks[0];
    dm.k = ks[2];
    dm.stride = stride;
    dm.pad = pad;
    if (ks[1] != dm.cin)
        throw std::invalid_argument("conv3d: kernel expects " + std::to_string(ks[1]) +
                                    " input channels but input has " + std::to_string(dm.cin));
    if (dm.k % 2 == 0) throw std::invalid_argument("conv3d: kernel size must be odd");
    if (stride < 1) throw std::invalid_argument("conv3d: stride must be >= 1");
    if (pad < 0) throw std::invalid_argument("conv3d: padding must be >= 0");
    if (dm.d + 2 * pad < dm.k || dm.h + 2 * pad < dm.k || dm.w + 2 * pad < dm.k)
        throw std::invalid_argument("conv3d: spatial dims after padding are smaller than kernel");
    dm.od = (dm.d + 2 * pad - dm.k) / stride + 1;
    dm.oh = (dm.h + 2 * pad - dm.k) / stride + 1;
    dm.ow = (dm.w + 2 * pad - dm.k) / stride + 1;
    return dm;
}

// range of output indices o with 0 <= o*stride - pad + koff < limit
inline void out_range(int64_t koff, int64_t limit, int64_t stride, int64_t pad, int64_t omax,
                      int64_t& lo, int64_t& hi) {
    int64_t a = pad - koff;  // o*stride >= a
    lo = a <= 0 ? 0 : (a + stride - 1) / stride;
    int64_t b = limit - 1 + pad - koff;  // o*stride <= b
    hi = b < 0 ? -1 : std::min(omax - 1, b / stride);
}

// --- fast paths for the k=3, stride=1, pad=1 convolutions that dominate ---
// the U-Net. A zero-padded copy of each channel removes all range clipping,
// so the inner loops run full rows with the nine (kh,kw) taps fused.

template <class T>
struct PaddedVolume {
    std::vector<T> buf;  // [channels][D+2][H+2][W+2], border stays zero
    int64_t ph, pw, plane;

    PaddedVolume(int64_t channels, int64_t d, int64_t h, int64_t w)
        : buf(static_cast<size_t>(channels * (d + 2) * (h + 2) * (w + 2)), T(0)),
          ph(h + 2),
          pw(w + 2),
          plane((d + 2) * (h + 2) * (w + 2)) {}

    void load(const T* src, int64_t channels, int64_t d, int64_t h, int64_t w) {
        for (int64_t c = 0; c < channels; ++c)
            for (int64_t z = 0; z < d; ++z)
                for (int64_t y = 0; y < h; ++y)
                    std::copy_n(src + ((c * d + z) * h + y) * w, w,
                                buf.data() + c * plane + ((z + 1) * ph + y + 1) * pw + 1);
    }
    const T* channel(int64_t c) const { return buf.data() + c * plane; }
};

template <class T>
void conv3d_forward_k3(const T* __restrict x, const T* __restrict k, const T* __restrict bias,
                       T* __restrict out, const ConvDims& dm) {
    const int64_t D = dm.d, H = dm.h, W = dm.w;
    const int64_t in_c = D * H * W, out_c = in_c;
    PaddedVolume<T> xp(dm.cin, D, H, W);
    for (int64_t n = 0; n < dm.n; ++n) {
        xp.load(x + n * dm.cin * in_c, dm.cin, D, H, W);
        for (int64_t co = 0; co < dm.cout; ++co) {
            T* __restrict oc = out + (n * dm.cout + co) * out_c;
            const T b = bias ? bias[co] : T(0);
            for (int64_t i = 0; i < out_c; ++i) oc[i] = b;
            for (int64_t ci = 0; ci < dm.cin; ++ci) {
                const T* __restrict kc = k + (co * dm.cin + ci) * 27;
                const T* __restrict xpc = xp.channel(ci);
                for (int64_t od = 0; od < D; ++od)
                    for (int64_t kd = 0; kd < 3; ++kd) {
                        const T* __restrict plane = xpc + (od + kd) * xp.ph * xp.pw;
                        const T k0 = kc[kd * 9 + 0], k1 = kc[kd * 9 + 1], k2 = kc[kd * 9 + 2];
                        const T k3 = kc[kd * 9 + 3], k4 = kc[kd * 9 + 4], k5 = kc[kd * 9 + 5];
                        const T k6 = kc[kd * 9 + 6], k7 = kc[kd * 9 + 7], k8 = kc[kd * 9 + 8];
                        for (int64_t oh = 0; oh < H; ++oh) {
                            const T* __restrict r0 = plane + (oh + 0) * xp.pw;
                            const T* __restrict r1 = plane + (oh + 1) * xp.pw;
                            const T* __restrict r2 = plane + (oh + 2) * xp.pw;
                            T* __restrict orow = oc + (od * H + oh) * W;
                            for (int64_t ow = 0; ow < W; ++ow)
                                orow[ow] += k0 * r0[ow] + k1 * r0[ow + 1] + k2 * r0[ow + 2] +
                                            k3 * r1[ow] + k4 * r1[ow + 1] + k5 * r1[ow + 2] +
                                            k6 * r2[ow] + k7 * r2[ow + 1] + k8 * r2[ow + 2];
                        }
                    }
            }
        }
    }
}

// gradient w.r.t. the input as a correlation of the padded upstream gradient
// with the flipped kernel (flipping all three axes reverses the linear index)
template <class T>
void conv3d_backward_input_k3(const T* __restrict g, const T* __restrict k, T* __restrict gx,
                              const ConvDims& dm) {
    const int64_t D = dm.d, H = dm.h, W = dm.w;
    const int64_t plane_c = D * H * W;
    PaddedVolume<T> gp(dm.cout, D, H, W);
    for (int64_t n = 0; n < dm.n; ++n) {
        gp.load(g + n * dm.cout * plane_c, dm.cout, D, H, W);
        for (int64_t ci = 0; ci < dm.cin; ++ci) {
            T* __restrict gxc = gx + (n * dm.cin + ci) * plane_c;
            for (int64_t co = 0; co < dm.cout; ++co) {
                const T* __restrict kc = k + (co * dm.cin + ci) * 27;
                const T* __restrict gpc = gp.channel(co);
                for (int64_t id = 0; id < D; ++id)
                    for (int64_t fd = 0; fd < 3; ++fd) {
                        const T* __restrict plane = gpc + (id + fd) * gp.ph * gp.pw;
                        const T k0 = kc[26 - (fd * 9 + 0)], k1 = kc[26 - (fd * 9 + 1)];
                        const T k2 = kc[26 - (fd * 9 + 2)], k3 = kc[26 - (fd * 9 + 3)];
                        const T k4 = kc[26 - (fd * 9 + 4)], k5 = kc[26 - (fd * 9 + 5)];
                        const T k6 = kc[26 - (fd * 9 + 6)], k7 = kc[26 - (fd * 9 + 7)];
                        const T k8 = kc[26 - (fd * 9 + 8)];
                        for (int64_t ih = 0; ih < H; ++ih) {
                            const T* __restrict r0 = plane + (ih + 0) * gp.pw;
                            const T* __restrict r1 = plane + (ih + 1) * gp.pw;
                            const T* __restrict r2 = plane + (ih + 2) * gp.pw;
                            T* __restrict grow = gxc + (id * H + ih) * W;
                            for (int64_t iw = 0; iw < W; ++iw)
                                grow[iw] += k0 * r0[iw] + k1 * r0[iw + 1] + k2 * r0[iw + 2] +
                                            k3 * r1[iw] + k4 * r1[iw + 1] + k5 * r1[iw + 2] +
                                            k6 * r2[iw] + k7 * r2[iw + 1] + k8 * r2[iw + 2];
                        }
                    }
            }
        }
    }
}

template <class T>
void conv3d_backward_kernel_k3(const T* __restrict g, const T* __restrict x, T* __restrict gk,
                               const ConvDims& dm) {
    const int64_t D = dm.d, H = dm.h, W = dm.w;
    const int64_t plane_c = D * H * W;
    PaddedVolume<T> xp(dm.cin, D, H, W);
    for (int64_t n = 0; n < dm.n; ++n) {
        xp.load(x + n * dm.cin * plane_c, dm.cin, D, H, W);
        for (int64_t co = 0; co < dm.cout; ++co) {
            const T* __restrict gc = g + (n * dm.cout + co) * plane_c;
            for (int64_t ci = 0; ci < dm.cin; ++ci) {
                const T* __restrict xpc = xp.channel(ci);
                T* __restrict gkc = gk + (co * dm.cin + ci) * 27;
                for (int64_t kd = 0; kd < 3; ++kd) {
                    T a0 = 0, a1 = 0, a2 = 0, a3 = 0, a4 = 0, a5 = 0, a6 = 0, a7 = 0, a8 = 0;
                    for (int64_t od = 0; od < D; ++od) {
                        const T* __restrict plane = xpc + (od + kd) * xp.ph * xp.pw;
                        for (int64_t oh = 0; oh < H; ++oh) {
                            const T* __restrict r0 = plane + (oh + 0) * xp.pw;
                            const T* __restrict r1 = plane + (oh + 1) * xp.pw;
                            const T* __restrict r2 = plane + (oh + 2) * xp.pw;
                            const T* __restrict grow = gc + (od * H + oh) * W;
                            for (int64_t ow = 0; ow < W; ++ow) {
                                const T gv = grow[ow];
                                a0 += gv * r0[ow];
                                a1 += gv * r0[ow + 1];
                                a2 += gv * r0[ow + 2];
                                a3 += gv * r1[ow];
                                a4 += gv * r1[ow + 1];
                                a5 += gv * r1[ow + 2];
                                a6 += gv * r2[ow];
                                a7 += gv * r2[ow + 1];
                                a8 += gv * r2[ow + 2];
                            }
                        }
                    }
                    gkc[kd * 9 + 0] += a0;
                    gkc[kd * 9 + 1] += a1;
                    gkc[kd * 9 + 2] += a2;
                    gkc[kd * 9 + 3] += a3;
                    gkc[kd * 9 + 4] += a4;
                    gkc[kd * 9 + 5] += a5;
                    gkc[kd * 9 + 6] += a6;
                    gkc[kd * 9 + 7] += a7;
                    gkc[kd * 9 + 8] += a8;
                }
            }
        }
    }
}

inline bool is_k3_fast_path(const ConvDims& dm) {
    return dm.k == 3 && dm.stride == 1 && dm.pad == 1;
}

template <class T>
void conv3d_forward(const T* __restrict x, const T* __restrict k, const T* __restrict bias,
                    T* __restrict out, const ConvDims& dm) {
    if (is_k3_fast_path(dm)) {
        conv3d_forward_k3(x, k, bias, out, dm);
        return;
    }
    const int64_t in_c = dm.d * dm.h * dm.w;
    const int64_t out_c = dm.od * dm.oh * dm.ow;
    const int64_t ksz = dm.k * dm.k * dm.k;
    for (int64_t n = 0; n < dm.n; ++n) {
        for (int64_t co = 0; co < dm.cout; ++co) {
            T* oc = out + (n * dm.cout + co) * out_c;
            const T b = bias ? bias[co] : T(0);
            for (int64_t i = 0; i < out_c; ++i) oc[i] = b;
            for (int64_t ci = 0; ci < dm.cin; ++ci) {
                const T* xc = x + (n * dm.cin + ci) * in_c;
                const T* kc = k + (co * dm.cin + ci) * ksz;
                for (int64_t kd = 0; kd < dm.k; ++kd) {
                    int64_t dlo, dhi;
                    out_range(kd, dm.d, dm.stride, dm.pad, dm.od, dlo, dhi);
                    for (int64_t kh = 0; kh < dm.k; ++kh) {
                        int64_t hlo, hhi;
                        out_range(kh, dm.h, dm.stride, dm.pad, dm.oh, hlo, hhi);
                        for (int64_t kw = 0; kw < dm.k; ++kw) {
                            int64_t wlo, whi;
                            out_range(kw, dm.w, dm.stride, dm.pad, dm.ow, wlo, whi);
                            if (wlo > whi) continue;
                            const T wv = kc[(kd * dm.k + kh) * dm.k + kw];
                            for (int64_t od = dlo; od <= dhi; ++od) {
                                const int64_t id = od * dm.stride - dm.pad + kd;
                                for (int64_t oh = hlo; oh <= hhi; ++oh) {
                                    const int64_t ih = oh * dm.stride - dm.pad + kh;
                                    T* orow = oc + (od * dm.oh + oh) * dm.ow;
                                    const T* xrow = xc + (id * dm.h + ih) * dm.w;
                                    if (dm.stride == 1) {
                                        const int64_t off = kw - dm.pad;
                                        for (int64_t ow = wlo; ow <= whi; ++ow)
                                            orow[ow] += wv * xrow[ow + off];
                                    } else {
                                        for (int64_t ow = wlo; ow <= whi; ++ow)
                                            orow[ow] += wv * xrow[ow * dm.stride - dm.pad + kw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void conv3d_backward_input(const T* __restrict g, const T* __restrict k, T* __restrict gx,
                           const ConvDims& dm) {
    if (is_k3_fast_path(dm)) {
        conv3d_backward_input_k3(g, k, gx, dm);
        return;
    }
    const int64_t in_c = dm.d * dm.h * dm.w;
    const int64_t out_c = dm.od * dm.oh * dm.ow;
    const int64_t ksz = dm.k * dm.k * dm.k;
    for (int64_t n = 0; n < dm.n; ++n) {
        for (int64_t co = 0; co < dm.cout; ++co) {
            const T* gc = g + (n * dm.cout + co) * out_c;
            for (int64_t ci = 0; ci < dm.cin; ++ci) {
                T* gxc = gx + (n * dm.cin + ci) * in_c;
                const T* kc = k + (co * dm.cin + ci) * ksz;
                for (int64_t kd = 0; kd < dm.k; ++kd) {
                    int64_t dlo, dhi;
                    out_range(kd, dm.d, dm.stride, dm.pad, dm.od, dlo, dhi);
                    for (int64_t kh = 0; kh < dm.k; ++kh) {
                        int64_t hlo, hhi;
                        out_range(kh, dm.h, dm.stride, dm.pad, dm.oh, hlo, hhi);
                        for (int64_t kw = 0; kw < dm.k; ++kw) {
                            int64_t wlo, whi;
                            out_range(kw, dm.w, dm.stride, dm.pad, dm.ow, wlo, whi);
                            if (wlo > whi) continue;
                            const T wv = kc[(kd * dm.k + kh) * dm.k + kw];
                            for (int64_t od = dlo; od <= dhi; ++od) {
                                const int64_t id = od * dm.stride - dm.pad + kd;
                                for (int64_t oh = hlo; oh <= hhi; ++oh) {
                                    const int64_t ih = oh * dm.stride - dm.pad + kh;
                                    const T* grow = gc + (od * dm.oh + oh) * dm.ow;
                                    T* gxrow = gxc + (id * dm.h + ih) * dm.w;
                                    if (dm.stride == 1) {
                                        const int64_t off = kw - dm.pad;
                                        for (int64_t ow = wlo; ow <= whi; ++ow)
                                            gxrow[ow + off] += wv * grow[ow];
                                    } else {
                                        for (int64_t ow = wlo; ow <= whi; ++ow)
                                            gxrow[ow * dm.stride - dm.pad + kw] += wv * grow[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void conv3d_backward_kernel(const T* __restrict g, const T* __restrict x, T* __restrict gk,
                            const ConvDims& dm) {
    if (is_k3_fast_path(dm)) {
        conv3d_backward_kernel_k3(g, x, gk, dm);
        return;
    }
    const int64_t in_c = dm.d * dm.h * dm.w;
    const int64_t out_c = dm.od * dm.oh * dm.ow;
    const int64_t ksz = dm.k * dm.k * dm.k;
    for (int64_t co = 0; co < dm.cout; ++co) {
        for (int64_t ci = 0; ci < dm.cin; ++ci) {
            T* gkc = gk + (co * dm.cin + ci) * ksz;
            for (int64_t kd = 0; kd < dm.k; ++kd) {
                int64_t dlo, dhi;
                out_range(kd, dm.d, dm.stride, dm.pad, dm.od, dlo, dhi);
                for (int64_t kh = 0; kh < dm.k; ++kh) {
                    int64_t hlo, hhi;
                    out_range(kh, dm.h, dm.stride, dm.pad, dm.oh, hlo, hhi);
                    for (int64_t kw = 0; kw < dm.k; ++kw) {
                        int64_t wlo, whi;
                        out_range(kw, dm.w, dm.stride, dm.pad, dm.ow, wlo, whi);
                        if (wlo > whi) continue;
                        T acc = 0;
                        for (int64_t n = 0; n < dm.n; ++n) {
                            const T* gc = g + (n * dm.cout + co) * out_c;
                            const T* xc = x + (n * dm.cin + ci) * in_c;
                            for (int64_t od = dlo; od <= dhi; ++od) {
                                const int64_t id = od * dm.stride - dm.pad + kd;
                                for (int64_t oh = hlo; oh <= hhi; ++oh) {
                                    const int64_t ih = oh * dm.stride - dm.pad + kh;
                                    const T* grow = gc + (od * dm.oh + oh) * dm.ow;
                                    const T* xrow = xc + (id * dm.h + ih) * dm.w;
                                    if (dm.stride == 1) {
                                        const int64_t off = kw - dm.pad;
                                        for (int64_t ow = wlo; ow <= whi; ++ow)
                                            acc += grow[ow] * xrow[ow + off];
                                    } else {
                                        for (int64_t ow = wlo; ow <= whi; ++ow)
                                            acc += grow[ow] * xrow[ow * dm.stride - dm.pad + kw];
                                    }
                                }
                            }
                        }
                        gkc[(kd * dm.k + kh) * dm.k + kw] += acc;
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <class T>
TensorT<T> conv3d(const TensorT<T>& input, const TensorT<T>& kernel,
                  std::type_identity_t<const TensorT<T>>* bias, int64_t stride, int64_t padding) {
    const auto dm = detail::conv_dims(input.shape(), kernel.shape(), stride, padding);
    if (bias && bias->defined()) {
        if (bias->ndim() != 1 || bias->dim(0) != dm.cout)
            throw std::invalid_argument("conv3d: bias must have shape [Cout]");
    } else {
        bias = nullptr;
    }
    TensorT<T> out(Shape{dm.n, dm.cout, dm.od, dm.oh, dm.ow});
    detail::conv3d_forward(input.values().data(), kernel.values().data(),
                           bias ? bias->values().data() : nullptr, out.values().data(), dm);

    if (auto* tape = find_tape<T>({&input, &kernel, bias})) {
        const bool dx = input.tape() != nullptr;
        const bool dk = kernel.tape() != nullptr;
        const bool db = bias != nullptr && bias->tape() != nullptr;
        auto xp = input.payload_ptr();
        auto kp = kernel.payload_ptr();
        std::vector<size_t> ins;
        if (dx) ins.push_back(input.node());
        if (dk) ins.push_back(kernel.node());
        if (db) ins.push_back(bias->node());
        size_t id = tape->record(std::move(ins), out.numel(),
            [dx, dk, db, xp, kp, dm](std::span<const T> g, const typename TapeT<T>::GradSinks& sinks) {
                size_t s = 0;
                if (dx) detail::conv3d_backward_input(g.data(), kp->values.data(), sinks[s++]->data(), dm);
                if (dk) detail::conv3d_backward_kernel(g.data(), xp->values.data(), sinks[s++]->data(), dm);
                if (db) {
                    auto& gb = *sinks[s++];
                    const int64_t out_c = dm.od * dm.oh * dm.ow;
                    for (int64_t n = 0; n < dm.n; ++n)
                        for (int64_t co = 0; co < dm.cout; ++co) {
                            T acc = 0;
                            const T* gc = g.data() + (n * dm.cout + co) * out_c;
                            for (int64_t i = 0; i < out_c; ++i) acc += gc[i];
                            gb[static_cast<size_t>(co)] += acc;
                        }
                }
            });
        out.attach(tape, id);
    }
    debug_check_finite(out, "conv3d");
    return out;
}

// Transposed convolution used as a learnable upsampler: kernel
// [Cin,Cout,f,f,f] with stride f, so each spatial dim is multiplied by f
// and scatter windows never overlap.
template <class T>
TensorT<T> conv3d_transpose(const TensorT<T>& input, const TensorT<T>& kernel, int64_t factor) {
    if (input.ndim() != 5) throw std::invalid_argument("conv3d_transpose: input must be 5-D");
    if (kernel.ndim() != 5) throw std::invalid_argument("conv3d_transpose: kernel must be 5-D");
    if (factor < 2) throw std::invalid_argument("conv3d_transpose: factor must be >= 2");
    const int64_t n = input.dim(0), cin = input.dim(1);
    const int64_t d = input.dim(2), h = input.dim(3), w = input.dim(4);
    if (kernel.dim(0) != cin)
        throw std::invalid_argument("conv3d_transpose: kernel expects Cin = " +
                                    std::to_string(kernel.dim(0)));
    if (kernel.dim(2) != factor || kernel.dim(3) != factor || kernel.dim(4) != factor)
        throw std::invalid_argument("conv3d_transpose: kernel size must equal the factor");
    const int64_t cout = kernel.dim(1);
    const int64_t f = factor;
    TensorT<T> out(Shape{n, cout, d * f, h * f, w * f});

    const int64_t in_c = d * h * w, out_c = in_c * f * f * f, ksz = f * f * f;
    const T* x = input.values().data();
    const T* k = kernel.values().data();
    T* o = out.values().data();
    const int64_t oh_len = h * f, ow_len = w * f;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ci = 0; ci < cin; ++ci)
            for (int64_t co = 0; co < cout; ++co) {
                const T* xc = x + (i * cin + ci) * in_c;
                const T* kc = k + (ci * cout + co) * ksz;
                T* oc = o + (i * cout + co) * out_c;
                for (int64_t zd = 0; zd < d; ++zd)
                    for (int64_t zh = 0; zh < h; ++zh)
                        for (int64_t zw = 0; zw < w; ++zw) {
                            const T xv = xc[(zd * h + zh) * w + zw];
                            for (int64_t kd = 0; kd < f; ++kd)
                                for (int64_t kh = 0; kh < f; ++kh)
                                    for (int64_t kw = 0; kw < f; ++kw)
                                        oc[((zd * f + kd) * oh_len + zh * f + kh) * ow_len +
                                           zw * f + kw] += xv * kc[(kd * f + kh) * f + kw];
                        }
            }

    if (auto* tape = find_tape<T>({&input, &kernel})) {
        const bool dx = input.tape() != nullptr;
        const bool dk = kernel.tape() != nullptr;
        auto xp = input.payload_ptr();
        auto kp = kernel.payload_ptr();
        std::vector<size_t> ins;
        if (dx) ins.push_back(input.node());
        if (dk) ins.push_back(kernel.node());
        size_t id = tape->record(std::move(ins), out.numel(),
            [dx, dk, xp, kp, n, cin, cout, d, h, w, f, in_c, out_c, ksz, oh_len, ow_len](
                std::span<const T> g, const typename TapeT<T>::GradSinks& sinks) {
                size_t s = 0;
                if (dx) {
                    auto& gx = *sinks[s++];
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t ci = 0; ci < cin; ++ci)
                            for (int64_t co = 0; co < cout; ++co) {
                                T* gxc = gx.data() + (i * cin + ci) * in_c;
                                const T* kc = kp->values.data() + (ci * cout + co) * ksz;
                                const T* gc = g.data() + (i * cout + co) * out_c;
                                for (int64_t zd = 0; zd < d; ++zd)
                                    for (int64_t zh = 0; zh < h; ++zh)
                                        for (int64_t zw = 0; zw < w; ++zw) {
                                            T acc = 0;
                                            for (int64_t kd = 0; kd < f; ++kd)
                                                for (int64_t kh = 0; kh < f; ++kh)
                                                    for (int64_t kw = 0; kw < f; ++kw)
                                                        acc += kc[(kd * f + kh) * f + kw] *
                                                               gc[((zd * f + kd) * oh_len + zh * f + kh) * ow_len + zw * f + kw];
                                            gxc[(zd * h + zh) * w + zw] += acc;
                                        }
                            }
                }
                if (dk) {
                    auto& gk = *sinks[s++];
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t ci = 0; ci < cin; ++ci)
                            for (int64_t co = 0; co < cout; ++co) {
                                const T* xc = xp->values.data() + (i * cin + ci) * in_c;
                                T* gkc = gk.data() + (ci * cout + co) * ksz;
                                const T* gc = g.data() + (i * cout + co) * out_c;
                                for (int64_t zd = 0; zd < d; ++zd)
                                    for (int64_t zh = 0; zh < h; ++zh)
                                        for (int64_t zw = 0; zw < w; ++zw) {
                                            const T xv = xc[(zd * h + zh) * w + zw];
                                            for (int64_t kd = 0; kd < f; ++kd)
                                                for (int64_t kh = 0; kh < f; ++kh)
                                                    for (int64_t kw = 0; kw < f; ++kw)
                                                        gkc[(kd * f + kh) * f + kw] +=
                                                            xv * gc[((zd * f + kd) * oh_len + zh * f + kh) * ow_len + zw * f + kw];
                                        }
                            }
                }
            });
        out.attach(tape, id);
    }
    return out;
}

template <class T>
TensorT<T> upsample_nearest(const TensorT<T>& x, int64_t factor) {
    if (x.ndim() != 5) throw std::invalid_argument("upsample_nearest: input must be 5-D");
    if (factor < 2) throw std::invalid_argument("upsample_nearest: factor must be >= 2");
    const int64_t n = x.dim(0), c = x.dim(1), d = x.dim(2), h = x.dim(3), w = x.dim(4);
    const int64_t f = factor;
    TensorT<T> out(Shape{n, c, d * f, h * f, w * f});
    const T* xv = x.values().data();
    T* ov = out.values().data();
    const int64_t oh_len = h * f, ow_len = w * f;
    for (int64_t nc = 0; nc < n * c; ++nc) {
        const T* xc = xv + nc * d * h * w;
        T* oc = ov + nc * d * h * w * f * f * f;
        for (int64_t od = 0; od < d * f; ++od)
            for (int64_t oh = 0; oh < oh_len; ++oh) {
                const T* xrow = xc + ((od / f) * h + oh / f) * w;
                T* orow = oc + (od * oh_len + oh) * ow_len;
                for (int64_t ow = 0; ow < ow_len; ++ow) orow[ow] = xrow[ow / f];
            }
    }
    if (auto* tape = find_tape<T>({&x})) {
        size_t id = tape->record({x.node()}, out.numel(),
            [n, c, d, h, w, f, oh_len, ow_len](std::span<const T> g,
                                               const typename TapeT<T>::GradSinks& sinks) {
                auto& gx = *sinks[0];
                for (int64_t nc = 0; nc < n * c; ++nc) {
                    T* gxc = gx.data() + nc * d * h * w;
                    const T* gc = g.data() + nc * d * h * w * f * f * f;
                    for (int64_t od = 0; od < d * f; ++od)
                        for (int64_t oh = 0; oh < oh_len; ++oh) {
                            T* gxrow = gxc + ((od / f) * h + oh / f) * w;
                            const T* grow = gc + (od * oh_len + oh) * ow_len;
                            for (int64_t ow = 0; ow < ow_len; ++ow) gxrow[ow / f] += grow[ow];
                        }
                }
            });
        out.attach(tape, id);
    }
    return out;
}

// ---------------------------------------------------------------------------
// per-channel batch normalization with running statistics
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> batchnorm3d(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                       std::vector<T>& running_mean, std::vector<T>& running_var, bool training,
                       T momentum = T(0.9), T eps = T(1e-5)) {
    if (x.ndim() < 2) throw std::invalid_argument("batchnorm3d: rank >= 2 required");
    const int64_t n = x.dim(0), c = x.dim(1);
    int64_t spatial = 1;
    for (size_t i = 2; i < x.ndim(); ++i) spatial *= x.dim(i);
    if (gamma.numel() != c || beta.numel() != c)
        throw std::invalid_argument("batchnorm3d: gamma/beta must have one entry per channel");
    if (static_cast<int64_t>(running_mean.size()) != c ||
        static_cast<int64_t>(running_var.size()) != c)
        throw std::invalid_argument("batchnorm3d: running stats must have one entry per channel");

    TensorT<T> out(x.shape());
    const T* xv = x.values().data();
    T* ov = out.values().data();
    const T* gv = gamma.values().data();
    const T* bv = beta.values().data();
    const int64_t m = n * spatial;  // elements per channel

    std::vector<T> mean(c), invstd(c);
    auto xhat = std::make_shared<std::vector<T>>();
    if (training) {
        for (int64_t ch = 0; ch < c; ++ch) {
            T mu = 0;
            for (int64_t i = 0; i < n; ++i) {
                const T* row = xv + (i * c + ch) * spatial;
                for (int64_t v = 0; v < spatial; ++v) mu += row[v];
            }
            mu /= static_cast<T>(m);
            T var = 0;
            for (int64_t i = 0; i < n; ++i) {
                const T* row = xv + (i * c + ch) * spatial;
                for (int64_t v = 0; v < spatial; ++v) {
                    const T dlt = row[v] - mu;
                    var += dlt * dlt;
                }
            }
            var /= static_cast<T>(m);
            mean[ch] = mu;
            invstd[ch] = T(1) / std::sqrt(var + eps);
            const T var_unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
            running_mean[ch] = momentum * running_mean[ch] + (T(1) - momentum) * mu;
            running_var[ch] = momentum * running_var[ch] + (T(1) - momentum) * var_unbiased;
        }
        xhat->resize(static_cast<size_t>(x.numel()));
        for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch) {
                const T* row = xv + (i * c + ch) * spatial;
                T* hrow = xhat->data() + (i * c + ch) * spatial;
                T* orow = ov + (i * c + ch) * spatial;
                const T mu = mean[ch], is = invstd[ch], ga = gv[ch], be = bv[ch];
                for (int64_t v = 0; v < spatial; ++v) {
                    const T xh = (row[v] - mu) * is;
                    hrow[v] = xh;
                    orow[v] = ga * xh + be;
                }
            }
    } else {
        for (int64_t ch = 0; ch < c; ++ch) {
            mean[ch] = running_mean[ch];
            invstd[ch] = T(1) / std::sqrt(running_var[ch] + eps);
        }
        for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch) {
                const T* row = xv + (i * c + ch) * spatial;
                T* orow = ov + (i * c + ch) * spatial;
                const T mu = mean[ch], is = invstd[ch], ga = gv[ch], be = bv[ch];
                for (int64_t v = 0; v < spatial; ++v) orow[v] = ga * (row[v] - mu) * is + be;
            }
    }

    if (auto* tape = find_tape<T>({&x, &gamma, &beta})) {
        const bool dx = x.tape() != nullptr;
        const bool dg = gamma.tape() != nullptr;
        const bool db = beta.tape() != nullptr;
        auto gp = gamma.payload_ptr();
        auto xp = x.payload_ptr();
        auto meansh = std::make_shared<std::vector<T>>(mean);
        auto invstdsh = std::make_shared<std::vector<T>>(invstd);
        std::vector<size_t> ins;
        if (dx) ins.push_back(x.node());
        if (dg) ins.push_back(gamma.node());
        if (db) ins.push_back(beta.node());
        size_t id = tape->record(std::move(ins), out.numel(),
            [dx, dg, db, gp, xp, xhat, meansh, invstdsh, n, c, spatial, m, training](
                std::span<const T> g, const typename TapeT<T>::GradSinks& sinks) {
                size_t s = 0;
                auto* gxs = dx ? sinks[s++] : nullptr;
                auto* ggs = dg ? sinks[s++] : nullptr;
                auto* gbs = db ? sinks[s++] : nullptr;
                for (int64_t ch = 0; ch < c; ++ch) {
                    const T is = (*invstdsh)[ch];
                    const T ga = gp->values[static_cast<size_t>(ch)];
                    T sum_g = 0, sum_gx = 0;
                    for (int64_t i = 0; i < n; ++i) {
                        const size_t base = (i * c + ch) * spatial;
                        for (int64_t v = 0; v < spatial; ++v) {
                            const T gi = g[base + v];
                            sum_g += gi;
                            if (training) sum_gx += gi * (*xhat)[base + v];
                            else sum_gx += gi * (xp->values[base + v] - (*meansh)[ch]) * is;
                        }
                    }
                    if (gbs) (*gbs)[static_cast<size_t>(ch)] += sum_g;
                    if (ggs) (*ggs)[static_cast<size_t>(ch)] += sum_gx;
                    if (gxs) {
                        if (training) {
                            const T mg = sum_g / static_cast<T>(m);
                            const T mgx = sum_gx / static_cast<T>(m);
                            for (int64_t i = 0; i < n; ++i) {
                                const size_t base = (i * c + ch) * spatial;
                                for (int64_t v = 0; v < spatial; ++v)
                                    (*gxs)[base + v] +=
                                        ga * is * (g[base + v] - mg - (*xhat)[base + v] * mgx);
                            }
                        } else {
                            for (int64_t i = 0; i < n; ++i) {
                                const size_t base = (i * c + ch) * spatial;
                                for (int64_t v = 0; v < spatial; ++v)
                                    (*gxs)[base + v] += ga * is * g[base + v];
                            }
                        }
                    }
                }
            });
        out.attach(tape, id);
    }
    debug_check_finite(out, "batchnorm3d");
    return out;
}

// ---------------------------------------------------------------------------
// custom-gradient hook
// ---------------------------------------------------------------------------

template <class T>
using CustomForward = std::function<TensorT<T>(const std::vector<TensorT<T>>&)>;

// Returns one gradient vector per input; an empty vector means "no gradient".
template <class T>
using CustomBackward =
    std::function<std::vector<std::vector<T>>(std::span<const T> upstream,
                                              const std::vector<TensorT<T>>& inputs)>;

// Records an operation whose backward rule is supplied verbatim by the
// caller; the reverse pass invokes it with the upstream gradient and routes
// the returned per-input gradients onto the tape. Gradients of the wrong
// length are rejected at reverse time.
template <class T>
TensorT<T> custom_op(const std::vector<TensorT<T>>& inputs, CustomForward<T> forward,
                     CustomBackward<T> backward) {
    TensorT<T> out = forward(inputs);
    TapeT<T>* tape = nullptr;
    for (const auto& in : inputs) {
        if (!in.defined() || in.tape() == nullptr) continue;
        if (tape == nullptr) tape = in.tape();
        else if (tape != in.tape())
            throw std::logic_error("custom_op mixes tensors from different tapes");
    }
    if (tape == nullptr) return out;

    std::vector<size_t> ins;
    std::vector<size_t> attached;  // input index -> sink slot order
    for (size_t i = 0; i < inputs.size(); ++i) {
        if (inputs[i].defined() && inputs[i].tape() != nullptr) {
            ins.push_back(inputs[i].node());
            attached.push_back(i);
        }
    }
    auto inputs_copy = std::make_shared<std::vector<TensorT<T>>>(inputs);
    size_t id = tape->record(std::move(ins), out.numel(),
        [inputs_copy, attached, backward](std::span<const T> g,
                                          const typename TapeT<T>::GradSinks& sinks) {
            std::vector<std::vector<T>> grads = backward(g, *inputs_copy);
            if (grads.size() != inputs_copy->size())
                throw std::logic_error("custom_op backward returned " + std::to_string(grads.size()) +
                                       " gradients for " + std::to_string(inputs_copy->size()) +
                                       " inputs");
            for (size_t slot = 0; slot < attached.size(); ++slot) {
                const size_t i = attached[slot];
                const auto& gi = grads[i];
                if (gi.empty()) continue;
                if (static_cast<int64_t>(gi.size()) != (*inputs_copy)[i].numel())
                    throw std::logic_error("custom_op backward produced a gradient of wrong shape for input " +
                                           std::to_string(i));
                auto& dst = *sinks[slot];
                for (size_t j = 0; j < gi.size(); ++j) dst[j] += gi[j];
            }
        });
    out.attach(tape, id);
    return out;
}

}  // namespace ternq::ops
