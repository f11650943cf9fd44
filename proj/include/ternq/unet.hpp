#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ternq/codec.hpp"
#include "ternq/quant.hpp"
#include "ternq/tensor.hpp"

namespace ternq {

struct NetConfig {
    int64_t levels = 3;
    int64_t base_channels = 8;
    int64_t num_classes = 3;
    int64_t in_channels = 1;
    QuantScheme scheme = QuantScheme::FULL;
    bool quantize_first_last = true;
    float threshold_factor = 0.05f;
    bool per_channel_alpha = true;

    void validate() const {
        if (levels < 1) throw std::invalid_argument("net.levels must be >= 1");
        if (base_channels < 1) throw std::invalid_argument("net.base_channels must be >= 1");
        if (num_classes < 2) throw std::invalid_argument("net.num_classes must be >= 2");
        if (in_channels < 1) throw std::invalid_argument("net.in_channels must be >= 1");
    }
};

struct ConvLayer {
    std::string name;
    Tensor kernel;  // latent weights while training quantized schemes
    Tensor bias;    // undefined when the layer has no bias
    int64_t stride = 1;
    int64_t padding = 1;
    bool quantized = false;
    QuantState qstate;
    Tensor gamma_pos, gamma_neg;

    Tensor forward(Tape* tape, const Tensor& x);
    // weights as used at inference time (quantized layers get W~)
    Tensor effective_kernel();
};

struct NormLayer {
    std::string name;
    Tensor gamma, beta;
    std::vector<float> running_mean, running_var;

    Tensor forward(Tape* tape, const Tensor& x, bool training);
};

// Small 3D U-Net: `levels` encoder stages with channel doubling, stride-2
// convolutions for downsampling, nearest-neighbour upsampling plus
// convolution in the decoder, skip concatenations, and a 1x1x1 classifier.
// Every convolution kernel carries a QuantState when the scheme is not FULL
// (the first and last layers only if quantize_first_last).
class UNet3D {
public:
    explicit UNet3D(NetConfig cfg, uint64_t seed);

    const NetConfig& config() const { return cfg_; }

    Tensor forward(Tape* tape, const Tensor& x, bool training);

    // stable-order trainable parameters (shared handles)
    std::vector<Tensor> parameters();
    std::vector<std::string> parameter_names();
    int64_t parameter_count();

    void zero_grads();

    std::vector<ConvLayer>& conv_layers() { return convs_; }
    std::vector<NormLayer>& norm_layers() { return norms_; }
    const std::vector<ConvLayer>& conv_layers() const { return convs_; }
    const std::vector<NormLayer>& norm_layers() const { return norms_; }

    // per-layer codec records; refreshes each QuantState from the current
    // latent weights first
    std::vector<codec::LayerExport> kernel_exports();

    // replaces latent kernels with their quantized effective weights and
    // drops the quantization states (inference-only form)
    void materialize_quantized();
    bool materialized() const { return materialized_; }

private:
    void detach_all();
    void watch_all(Tape& tape);

    NetConfig cfg_;
    std::vector<ConvLayer> convs_;
    std::vector<NormLayer> norms_;
    // graph wiring: index into convs_/norms_ by role
    struct Stage {
        int enc_a, enc_a_bn, enc_b, enc_b_bn;
        int down = -1, down_bn = -1;    // entering this stage (absent for 0)
        int dec_a = -1, dec_a_bn = -1;  // decoder side (absent for bottom)
        int dec_b = -1, dec_b_bn = -1;
    };
    std::vector<Stage> stages_;
    int final_conv_ = -1;
    bool materialized_ = false;
};

}  // namespace ternq
