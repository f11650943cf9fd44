#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ternq/quant.hpp"
#include "ternq/tensor.hpp"

namespace ternq::codec {

// `.3dqp` packed model format, little-endian throughout:
//   magic "3DQP" | version u8 (=1) | scheme u8 (0 ternary, 1 binary) | layer_count u32
//   per layer:
//     name_len u16, name bytes
//     ndims u8, dims u32 each
//     gamma_pos f32, gamma_neg f32
//     channel_count u32, alpha f32 x channel_count
//     pos mask, neg mask (ternary)  -- or a single sign mask (binary)
//   trailer: CRC32 (IEEE) of every byte after the magic, u32
// Masks store 8 weights per byte, MSB-first, in row-major element order;
// the final partial byte is zero-padded.

enum class ErrorKind {
    BadMagic,
    BadVersion,
    Truncated,
    CrcMismatch,
    MaskOverlap,
    PaddingBits,
    Malformed,
};

class CodecError : public std::runtime_error {
public:
    CodecError(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

uint32_t crc32_ieee(std::span<const uint8_t> data);

std::pair<std::vector<uint8_t>, std::vector<uint8_t>> pack_masks(const TernaryTensor& tern);
std::vector<uint8_t> pack_sign_mask(const TernaryTensor& tern);

TernaryTensor unpack_masks(std::span<const uint8_t> pos_bytes, std::span<const uint8_t> neg_bytes,
                           int64_t element_count);
TernaryTensor unpack_sign_mask(std::span<const uint8_t> bytes, int64_t element_count);

struct LayerExport {
    std::string name;
    Shape shape;
    QuantState state;
    TernaryTensor tern;
};

std::vector<uint8_t> serialize_model(std::span<const LayerExport> layers, bool binary);

struct RestoredLayer {
    std::string name;
    Shape shape;
    float gamma_pos = 1.0f;
    float gamma_neg = 1.0f;
    std::vector<float> alpha;
    TernaryTensor tern;
    Tensor weights;  // reconstructed effective weights
};

struct RestoredModel {
    uint8_t version = 1;
    bool binary = false;
    std::vector<RestoredLayer> layers;
};

RestoredModel deserialize_model(std::span<const uint8_t> bytes);

// Effective weights from codes and scales; float arithmetic matches
// quant::quantize_forward exactly, so restored models are bit-identical.
Tensor restore_weights(const TernaryTensor& tern, const Shape& shape, float gamma_pos,
                       float gamma_neg, std::span<const float> alpha);

struct CompressionRow {
    std::string name;
    int64_t weights = 0;
    uint64_t full_bytes = 0;
    uint64_t packed_bytes = 0;  // this layer's record size in the stream
};

struct CompressionReport {
    uint64_t full_bytes = 0;
    uint64_t packed_bytes = 0;
    double ratio = 1.0;
    std::vector<CompressionRow> rows;
};

CompressionReport compression_report(std::span<const LayerExport> layers, bool binary);

}  // namespace ternq::codec
