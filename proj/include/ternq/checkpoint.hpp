#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ternq/unet.hpp"

namespace ternq {

// `.tqck` raw checkpoint: the runnable form of a trained model. FULL models
// store every parameter tensor. Quantized models store the non-kernel
// tensors plus one quant record per convolution (ternary codes and scales);
// the latent full-precision kernels are discarded at export. Packing to
// `.3dqp` consumes only the quant records.

struct CheckpointTensor {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

struct CheckpointQuant {
    std::string name;
    Shape shape;
    float gamma_pos = 1.0f;
    float gamma_neg = 1.0f;
    std::vector<float> alpha;
    std::vector<int8_t> codes;  // -1 / 0 / +1 per element, row-major
};

struct Checkpoint {
    NetConfig net;
    std::vector<CheckpointTensor> tensors;
    std::vector<CheckpointQuant> quant;
};

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

Checkpoint checkpoint_from_model(UNet3D& model);

// Strict load: every expected tensor must be present with a matching shape
// and nothing extra may remain. Quantized checkpoints leave the model
// materialized (kernels hold the reconstructed effective weights).
void apply_checkpoint(UNet3D& model, const Checkpoint& ck);

std::vector<uint8_t> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::span<const uint8_t> bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// conversions to/from the packed `.3dqp` form
std::vector<codec::LayerExport> layer_exports_from_checkpoint(const Checkpoint& ck);
std::vector<uint8_t> pack_checkpoint(const Checkpoint& ck);
Checkpoint unpack_model(std::span<const uint8_t> packed_bytes);

std::vector<uint8_t> read_binary_file(const std::string& path);
void write_binary_file(const std::string& path, std::span<const uint8_t> bytes);

}  // namespace ternq
