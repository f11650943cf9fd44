#include "ternq/unet.hpp"

#include "ternq/ops.hpp"
#include "ternq/rng.hpp"

namespace ternq {

Tensor ConvLayer::forward(Tape* tape, const Tensor& x) {
    Tensor w;
    if (!quantized) {
        w = kernel;
    } else {
        quant::refresh(qstate, kernel);
        if (tape != nullptr) {
            w = quant::quantize(kernel, gamma_pos, gamma_neg, qstate);
        } else {
            QuantState st = qstate;
            st.gamma_pos = gamma_pos.item();
            st.gamma_neg = gamma_neg.item();
            w = quant::quantize_forward(kernel, st);
        }
    }
    return ops::conv3d(x, w, bias.defined() ? &bias : nullptr, stride, padding);
}

Tensor ConvLayer::effective_kernel() {
    if (!quantized) return kernel;
    quant::refresh(qstate, kernel);
    QuantState st = qstate;
    st.gamma_pos = gamma_pos.item();
    st.gamma_neg = gamma_neg.item();
    return quant::quantize_forward(kernel, st);
}

Tensor NormLayer::forward(Tape* tape, const Tensor& x, bool training) {
    (void)tape;  // gamma/beta carry the tape linkage when watched
    return ops::batchnorm3d(x, gamma, beta, running_mean, running_var, training);
}

namespace {

Tensor kaiming_kernel(Rng& rng, Shape shape) {
    int64_t fan_in = 1;
    for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    const float std = std::sqrt(2.0f / static_cast<float>(fan_in));
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<float>(rng.normal()) * std;
    return t;
}

}  // namespace

UNet3D::UNet3D(NetConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);

    auto channels = [&](int64_t level) { return cfg_.base_channels << level; };

    int conv_seq = 0;
    auto add_conv = [&](const std::string& name, int64_t cin, int64_t cout, int64_t k,
                        int64_t stride, bool with_bias, bool is_first, bool is_last) {
        ConvLayer layer;
        layer.name = name;
        Rng lr = rng.fork(static_cast<uint64_t>(conv_seq++));
        layer.kernel = kaiming_kernel(lr, {cout, cin, k, k, k});
        if (with_bias) layer.bias = Tensor(Shape{cout});
        layer.stride = stride;
        layer.padding = k / 2;
        const bool edge = is_first || is_last;
        if (cfg_.scheme != QuantScheme::FULL && (!edge || cfg_.quantize_first_last)) {
            layer.quantized = true;
            layer.qstate.scheme = cfg_.scheme;
            layer.qstate.t = cfg_.threshold_factor;
            layer.qstate.per_channel_alpha = cfg_.per_channel_alpha;
            layer.gamma_pos = Tensor::scalar(1.0f);
            layer.gamma_neg = Tensor::scalar(1.0f);
        }
        convs_.push_back(std::move(layer));
        return static_cast<int>(convs_.size() - 1);
    };
    auto add_norm = [&](const std::string& name, int64_t c) {
        NormLayer n;
        n.name = name;
        n.gamma = Tensor::full({c}, 1.0f);
        n.beta = Tensor(Shape{c});
        n.running_mean.assign(static_cast<size_t>(c), 0.0f);
        n.running_var.assign(static_cast<size_t>(c), 1.0f);
        norms_.push_back(std::move(n));
        return static_cast<int>(norms_.size() - 1);
    };

    stages_.resize(static_cast<size_t>(cfg_.levels));
    for (int64_t i = 0; i < cfg_.levels; ++i) {
        auto& st = stages_[static_cast<size_t>(i)];
        const std::string tag = "enc" + std::to_string(i);
        const int64_t cin_first = i == 0 ? cfg_.in_channels : channels(i - 1);
        if (i > 0) {
            st.down = add_conv("down" + std::to_string(i), channels(i - 1), channels(i - 1), 3, 2,
                               false, false, false);
            st.down_bn = add_norm("down" + std::to_string(i) + ".bn", channels(i - 1));
        }
        st.enc_a = add_conv(tag + "a", cin_first, channels(i), 3, 1, false, i == 0, false);
        st.enc_a_bn = add_norm(tag + "a.bn", channels(i));
        st.enc_b = add_conv(tag + "b", channels(i), channels(i), 3, 1, false, false, false);
        st.enc_b_bn = add_norm(tag + "b.bn", channels(i));
    }
    for (int64_t i = cfg_.levels - 2; i >= 0; --i) {
        auto& st = stages_[static_cast<size_t>(i)];
        const std::string tag = "dec" + std::to_string(i);
        st.dec_a = add_conv(tag + "a", channels(i + 1) + channels(i), channels(i), 3, 1, false,
                            false, false);
        st.dec_a_bn = add_norm(tag + "a.bn", channels(i));
        st.dec_b = add_conv(tag + "b", channels(i), channels(i), 3, 1, false, false, false);
        st.dec_b_bn = add_norm(tag + "b.bn", channels(i));
    }
    final_conv_ = add_conv("final", channels(0), cfg_.num_classes, 1, 1, true, false, true);
}

void UNet3D::detach_all() {
    auto reset = [](Tensor& t) {
        if (t.defined()) t.attach(nullptr, SIZE_MAX);
    };
    for (auto& c : convs_) {
        reset(c.kernel);
        reset(c.bias);
        reset(c.gamma_pos);
        reset(c.gamma_neg);
    }
    for (auto& n : norms_) {
        reset(n.gamma);
        reset(n.beta);
    }
}

void UNet3D::watch_all(Tape& tape) {
    for (auto& c : convs_) {
        tape.watch(c.kernel);
        if (c.bias.defined()) tape.watch(c.bias);
        if (c.quantized) {
            tape.watch(c.gamma_pos);
            tape.watch(c.gamma_neg);
        }
    }
    for (auto& n : norms_) {
        tape.watch(n.gamma);
        tape.watch(n.beta);
    }
}

Tensor UNet3D::forward(Tape* tape, const Tensor& x, bool training) {
    if (x.ndim() != 5)
        throw std::invalid_argument("unet: input must be [N,C,D,H,W]");
    if (x.dim(1) != cfg_.in_channels)
        throw std::invalid_argument("unet: input has " + std::to_string(x.dim(1)) +
                                    " channels, expected " + std::to_string(cfg_.in_channels));
    const int64_t div = int64_t(1) << (cfg_.levels - 1);
    for (size_t i = 2; i < 5; ++i) {
        if (x.dim(i) % div != 0 || x.dim(i) < 2 * div)
            throw std::invalid_argument(
                "unet: spatial dims must be multiples of " + std::to_string(div) +
                " and at least " + std::to_string(2 * div) + " for " +
                std::to_string(cfg_.levels) + " levels; got " + shape_str(x.shape()));
    }
    detach_all();
    if (tape != nullptr) watch_all(*tape);

    auto block = [&](Tensor h, int conv, int bn) {
        h = convs_[static_cast<size_t>(conv)].forward(tape, h);
        h = norms_[static_cast<size_t>(bn)].forward(tape, h, training);
        return ops::relu(h);
    };

    std::vector<Tensor> skips(static_cast<size_t>(cfg_.levels));
    Tensor h = x;
    for (int64_t i = 0; i < cfg_.levels; ++i) {
        const auto& st = stages_[static_cast<size_t>(i)];
        if (st.down >= 0) h = block(h, st.down, st.down_bn);
        h = block(h, st.enc_a, st.enc_a_bn);
        h = block(h, st.enc_b, st.enc_b_bn);
        skips[static_cast<size_t>(i)] = h;
    }
    for (int64_t i = cfg_.levels - 2; i >= 0; --i) {
        const auto& st = stages_[static_cast<size_t>(i)];
        h = ops::upsample_nearest(h, 2);
        h = ops::concat_channels(h, skips[static_cast<size_t>(i)]);
        h = block(h, st.dec_a, st.dec_a_bn);
        h = block(h, st.dec_b, st.dec_b_bn);
    }
    auto& fin = convs_[static_cast<size_t>(final_conv_)];
    return fin.forward(tape, h);
}

std::vector<Tensor> UNet3D::parameters() {
    std::vector<Tensor> out;
    for (auto& c : convs_) {
        out.push_back(c.kernel);
        if (c.bias.defined()) out.push_back(c.bias);
        if (c.quantized) {
            out.push_back(c.gamma_pos);
            out.push_back(c.gamma_neg);
        }
    }
    for (auto& n : norms_) {
        out.push_back(n.gamma);
        out.push_back(n.beta);
    }
    return out;
}

std::vector<std::string> UNet3D::parameter_names() {
    std::vector<std::string> out;
    for (auto& c : convs_) {
        out.push_back(c.name + ".kernel");
        if (c.bias.defined()) out.push_back(c.name + ".bias");
        if (c.quantized) {
            out.push_back(c.name + ".gamma_pos");
            out.push_back(c.name + ".gamma_neg");
        }
    }
    for (auto& n : norms_) {
        out.push_back(n.name + ".gamma");
        out.push_back(n.name + ".beta");
    }
    return out;
}

int64_t UNet3D::parameter_count() {
    int64_t n = 0;
    for (auto& p : parameters()) n += p.numel();
    return n;
}

void UNet3D::zero_grads() {
    for (auto& p : parameters()) p.zero_grad();
}

std::vector<codec::LayerExport> UNet3D::kernel_exports() {
    if (cfg_.scheme == QuantScheme::FULL)
        throw std::logic_error("kernel_exports: FULL models have no quantized form");
    if (materialized_)
        throw std::logic_error("kernel_exports: model was already materialized");
    std::vector<codec::LayerExport> out;
    for (auto& c : convs_) {
        if (!c.quantized) continue;
        quant::refresh(c.qstate, c.kernel);
        codec::LayerExport e;
        e.name = c.name;
        e.shape = c.kernel.shape();
        e.state = c.qstate;
        e.state.gamma_pos = c.gamma_pos.item();
        e.state.gamma_neg = c.gamma_neg.item();
        e.tern = quant::quantize_codes(c.kernel, c.qstate);
        out.push_back(std::move(e));
    }
    return out;
}

void UNet3D::materialize_quantized() {
    for (auto& c : convs_) {
        if (!c.quantized) continue;
        c.kernel = c.effective_kernel();
        c.quantized = false;
        c.gamma_pos = Tensor();
        c.gamma_neg = Tensor();
    }
    materialized_ = true;
}

}  // namespace ternq
