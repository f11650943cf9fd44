#include "ternq/codec.hpp"

#include <zlib.h>

#include <cstring>

namespace ternq::codec {

uint32_t crc32_ieee(std::span<const uint8_t> data) {
    return static_cast<uint32_t>(
        ::crc32(0L, data.data(), static_cast<uInt>(data.size())));
}

namespace {

constexpr char kMagic[4] = {'3', 'D', 'Q', 'P'};
constexpr uint8_t kVersion = 1;

void put_u8(std::vector<uint8_t>& out, uint8_t v) { out.push_back(v); }

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<uint8_t>& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    std::span<const uint8_t> data;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > data.size())
            throw CodecError(ErrorKind::Truncated, "packed stream ends unexpectedly");
    }
    uint8_t u8() {
        need(1);
        return data[pos++];
    }
    uint16_t u16() {
        need(2);
        uint16_t v = static_cast<uint16_t>(data[pos] | (data[pos + 1] << 8));
        pos += 2;
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::span<const uint8_t> bytes(size_t n) {
        need(n);
        auto s = data.subspan(pos, n);
        pos += n;
        return s;
    }
};

size_t mask_bytes(int64_t n) { return static_cast<size_t>((n + 7) / 8); }

std::vector<uint8_t> pack_bits(const std::vector<bool>& bits) {
    std::vector<uint8_t> out(mask_bytes(static_cast<int64_t>(bits.size())), 0);
    for (size_t i = 0; i < bits.size(); ++i)
        if (bits[i]) out[i / 8] |= static_cast<uint8_t>(0x80u >> (i % 8));
    return out;
}

// validates zero padding in the final partial byte
std::vector<bool> unpack_bits(std::span<const uint8_t> bytes, int64_t n, const char* what) {
    if (bytes.size() != mask_bytes(n))
        throw CodecError(ErrorKind::Malformed,
                         std::string(what) + " mask has wrong byte length");
    std::vector<bool> bits(static_cast<size_t>(n), false);
    for (int64_t i = 0; i < n; ++i)
        bits[static_cast<size_t>(i)] =
            (bytes[static_cast<size_t>(i / 8)] >> (7 - (i % 8))) & 1;
    const int64_t pad = static_cast<int64_t>(bytes.size()) * 8 - n;
    if (pad > 0) {
        const uint8_t last = bytes.back();
        if ((last & ((1u << pad) - 1u)) != 0)
            throw CodecError(ErrorKind::PaddingBits,
                             std::string(what) + " mask has nonzero padding bits");
    }
    return bits;
}

struct RawLayer {
    std::string name;
    Shape shape;
    float gamma_pos, gamma_neg;
    std::vector<float> alpha;
    std::vector<uint8_t> pos_bytes, neg_bytes;  // neg empty for binary
};

void append_layer(std::vector<uint8_t>& out, const LayerExport& layer, bool binary) {
    if (layer.name.size() > 0xffff)
        throw std::invalid_argument("serialize_model: layer name exceeds 65535 bytes");
    const int64_t n = numel_of(layer.shape);
    if (n != layer.tern.numel())
        throw std::invalid_argument("serialize_model: ternary mask length does not match shape");
    if (layer.state.alpha.empty())
        throw std::invalid_argument("serialize_model: layer has no alpha values (state not refreshed?)");
    if (static_cast<int64_t>(layer.state.alpha.size()) != 1 &&
        static_cast<int64_t>(layer.state.alpha.size()) != layer.shape[0])
        throw std::invalid_argument("serialize_model: alpha count must be 1 or the channel count");
    layer.tern.validate();

    put_u16(out, static_cast<uint16_t>(layer.name.size()));
    out.insert(out.end(), layer.name.begin(), layer.name.end());
    put_u8(out, static_cast<uint8_t>(layer.shape.size()));
    for (int64_t d : layer.shape) put_u32(out, static_cast<uint32_t>(d));
    put_f32(out, layer.state.gamma_pos);
    put_f32(out, layer.state.gamma_neg);
    put_u32(out, static_cast<uint32_t>(layer.state.alpha.size()));
    for (float a : layer.state.alpha) put_f32(out, a);
    if (binary) {
        for (int64_t i = 0; i < n; ++i)
            if (layer.tern.value(static_cast<size_t>(i)) == 0)
                throw std::invalid_argument(
                    "serialize_model: binary scheme cannot store zero-valued weights");
        auto sign = pack_bits(layer.tern.pos_mask);
        out.insert(out.end(), sign.begin(), sign.end());
    } else {
        auto [pos, neg] = pack_masks(layer.tern);
        out.insert(out.end(), pos.begin(), pos.end());
        out.insert(out.end(), neg.begin(), neg.end());
    }
}

}  // namespace

std::pair<std::vector<uint8_t>, std::vector<uint8_t>> pack_masks(const TernaryTensor& tern) {
    tern.validate();
    return {pack_bits(tern.pos_mask), pack_bits(tern.neg_mask)};
}

std::vector<uint8_t> pack_sign_mask(const TernaryTensor& tern) {
    tern.validate();
    return pack_bits(tern.pos_mask);
}

TernaryTensor unpack_masks(std::span<const uint8_t> pos_bytes, std::span<const uint8_t> neg_bytes,
                           int64_t element_count) {
    TernaryTensor out(Shape{element_count});
    out.pos_mask = unpack_bits(pos_bytes, element_count, "positive");
    out.neg_mask = unpack_bits(neg_bytes, element_count, "negative");
    for (int64_t i = 0; i < element_count; ++i)
        if (out.pos_mask[static_cast<size_t>(i)] && out.neg_mask[static_cast<size_t>(i)])
            throw CodecError(ErrorKind::MaskOverlap,
                             "element " + std::to_string(i) + " set in both masks");
    return out;
}

TernaryTensor unpack_sign_mask(std::span<const uint8_t> bytes, int64_t element_count) {
    TernaryTensor out(Shape{element_count});
    out.pos_mask = unpack_bits(bytes, element_count, "sign");
    for (int64_t i = 0; i < element_count; ++i)
        out.neg_mask[static_cast<size_t>(i)] = !out.pos_mask[static_cast<size_t>(i)];
    return out;
}

std::vector<uint8_t> serialize_model(std::span<const LayerExport> layers, bool binary) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u8(out, kVersion);
    put_u8(out, binary ? 1 : 0);
    put_u32(out, static_cast<uint32_t>(layers.size()));
    for (const LayerExport& layer : layers) append_layer(out, layer, binary);
    const uint32_t crc = crc32_ieee(std::span<const uint8_t>(out).subspan(4));
    put_u32(out, crc);
    return out;
}

Tensor restore_weights(const TernaryTensor& tern, const Shape& shape, float gamma_pos,
                       float gamma_neg, std::span<const float> alpha) {
    const int64_t n = numel_of(shape);
    const int64_t channels = static_cast<int64_t>(alpha.size());
    const int64_t block = n / channels;
    Tensor out(shape);
    auto ov = out.values();
    for (int64_t c = 0; c < channels; ++c) {
        const float up = gamma_pos * alpha[static_cast<size_t>(c)];
        const float dn = -(gamma_neg * alpha[static_cast<size_t>(c)]);
        for (int64_t i = c * block; i < (c + 1) * block; ++i) {
            const int v = tern.value(static_cast<size_t>(i));
            ov[static_cast<size_t>(i)] = v > 0 ? up : (v < 0 ? dn : 0.0f);
        }
    }
    return out;
}

RestoredModel deserialize_model(std::span<const uint8_t> bytes) {
    if (bytes.size() < 14)
        throw CodecError(ErrorKind::Truncated, "stream shorter than an empty model");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw CodecError(ErrorKind::BadMagic, "bad magic (not a .3dqp stream)");

    Reader r{bytes, 4};
    RestoredModel model;
    model.version = r.u8();
    if (model.version != kVersion)
        throw CodecError(ErrorKind::BadVersion,
                         "unsupported version " + std::to_string(model.version));
    const uint8_t scheme = r.u8();
    if (scheme > 1)
        throw CodecError(ErrorKind::Malformed, "unknown scheme byte " + std::to_string(scheme));
    model.binary = scheme == 1;
    const uint32_t layer_count = r.u32();

    struct Raw {
        std::string name;
        Shape shape;
        float gp, gn;
        std::vector<float> alpha;
        std::span<const uint8_t> pos, neg;
        int64_t n;
    };
    std::vector<Raw> raws;
    raws.reserve(layer_count);
    for (uint32_t li = 0; li < layer_count; ++li) {
        Raw raw;
        const uint16_t name_len = r.u16();
        auto nb = r.bytes(name_len);
        raw.name.assign(nb.begin(), nb.end());
        const uint8_t ndims = r.u8();
        if (ndims == 0) throw CodecError(ErrorKind::Malformed, "layer with zero dimensions");
        raw.shape.resize(ndims);
        for (uint8_t d = 0; d < ndims; ++d) {
            raw.shape[d] = r.u32();
            if (raw.shape[d] <= 0)
                throw CodecError(ErrorKind::Malformed, "layer dimension of zero");
        }
        raw.n = 1;
        for (int64_t d : raw.shape) raw.n *= d;
        raw.gp = r.f32();
        raw.gn = r.f32();
        const uint32_t channels = r.u32();
        if (channels != 1 && static_cast<int64_t>(channels) != raw.shape[0])
            throw CodecError(ErrorKind::Malformed,
                             "alpha count must be 1 or match the channel dimension");
        raw.alpha.resize(channels);
        for (uint32_t c = 0; c < channels; ++c) raw.alpha[c] = r.f32();
        const size_t mb = static_cast<size_t>((raw.n + 7) / 8);
        raw.pos = r.bytes(mb);
        if (!model.binary) raw.neg = r.bytes(mb);
        raws.push_back(std::move(raw));
    }
    if (bytes.size() - r.pos < 4)
        throw CodecError(ErrorKind::Truncated, "stream ends before the CRC trailer");
    if (bytes.size() - r.pos > 4)
        throw CodecError(ErrorKind::Malformed, "trailing bytes after the CRC trailer");
    const uint32_t stored_crc = r.u32();
    const uint32_t actual_crc = crc32_ieee(bytes.subspan(4, bytes.size() - 8));
    if (stored_crc != actual_crc)
        throw CodecError(ErrorKind::CrcMismatch, "payload CRC32 mismatch");

    for (Raw& raw : raws) {
        RestoredLayer layer;
        layer.name = std::move(raw.name);
        layer.shape = std::move(raw.shape);
        layer.gamma_pos = raw.gp;
        layer.gamma_neg = raw.gn;
        layer.alpha = std::move(raw.alpha);
        layer.tern = model.binary ? unpack_sign_mask(raw.pos, raw.n)
                                  : unpack_masks(raw.pos, raw.neg, raw.n);
        layer.tern.shape = layer.shape;
        layer.weights =
            restore_weights(layer.tern, layer.shape, layer.gamma_pos, layer.gamma_neg, layer.alpha);
        model.layers.push_back(std::move(layer));
    }
    return model;
}

CompressionReport compression_report(std::span<const LayerExport> layers, bool binary) {
    CompressionReport rep;
    int64_t total_weights = 0;
    for (const LayerExport& layer : layers) {
        CompressionRow row;
        row.name = layer.name;
        row.weights = numel_of(layer.shape);
        total_weights += row.weights;
        // full precision: 4 bytes per weight plus the scaling factors
        row.full_bytes = 4ull * static_cast<uint64_t>(row.weights) +
                         4ull * (2 + layer.state.alpha.size());
        const uint64_t mb = static_cast<uint64_t>((row.weights + 7) / 8);
        const uint64_t meta = 2 + layer.name.size() + 1 + 4 * layer.shape.size() + 8 + 4 +
                              4 * layer.state.alpha.size();
        row.packed_bytes = meta + (binary ? mb : 2 * mb);
        rep.rows.push_back(row);
        rep.full_bytes += row.full_bytes;
    }
    rep.packed_bytes = serialize_model(layers, binary).size();
    rep.ratio = total_weights == 0
                    ? 1.0
                    : static_cast<double>(rep.full_bytes) / static_cast<double>(rep.packed_bytes);
    return rep;
}

}  // namespace ternq::codec
