#include "ternq/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "ternq/codec.hpp"

namespace ternq {

namespace {

constexpr char kMagic[4] = {'T', 'Q', 'C', 'K'};
constexpr uint8_t kVersion = 1;

void put_u8(std::vector<uint8_t>& out, uint8_t v) { out.push_back(v); }
void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>(v >> 8));
}
void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}
void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}
void put_f32(std::vector<uint8_t>& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}
void put_str(std::vector<uint8_t>& out, const std::string& s) {
    if (s.size() > 0xffff) throw CheckpointError("name exceeds 65535 bytes: " + s.substr(0, 32));
    put_u16(out, static_cast<uint16_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

struct Reader {
    std::span<const uint8_t> data;
    size_t pos = 0;
    void need(size_t n) const {
        if (pos + n > data.size()) throw CheckpointError("checkpoint stream ends unexpectedly");
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
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(data[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string str() {
        const uint16_t n = u16();
        need(n);
        std::string s(reinterpret_cast<const char*>(data.data() + pos), n);
        pos += n;
        return s;
    }
    Shape shape() {
        const uint8_t nd = u8();
        if (nd == 0) throw CheckpointError("checkpoint tensor with zero dimensions");
        Shape s(nd);
        for (uint8_t i = 0; i < nd; ++i) {
            s[i] = u32();
            if (s[i] <= 0) throw CheckpointError("checkpoint tensor dimension of zero");
        }
        return s;
    }
};

TernaryTensor tern_from_codes(const Shape& shape, std::span<const int8_t> codes) {
    TernaryTensor t(shape);
    if (static_cast<int64_t>(codes.size()) != t.numel())
        throw CheckpointError("quant record code count does not match its shape");
    for (size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] < -1 || codes[i] > 1)
            throw CheckpointError("quant record contains a code outside {-1,0,+1}");
        t.set(i, codes[i]);
    }
    return t;
}

std::vector<int8_t> codes_from_tern(const TernaryTensor& t) {
    std::vector<int8_t> codes(static_cast<size_t>(t.numel()));
    for (size_t i = 0; i < codes.size(); ++i) codes[i] = static_cast<int8_t>(t.value(i));
    return codes;
}

// tensors every model stores regardless of scheme
void collect_common(UNet3D& model, std::vector<CheckpointTensor>& out) {
    for (auto& c : model.conv_layers()) {
        if (c.bias.defined())
            out.push_back({c.name + ".bias", c.bias.shape(),
                           std::vector<float>(c.bias.values().begin(), c.bias.values().end())});
    }
    for (auto& n : model.norm_layers()) {
        out.push_back({n.name + ".gamma", n.gamma.shape(),
                       std::vector<float>(n.gamma.values().begin(), n.gamma.values().end())});
        out.push_back({n.name + ".beta", n.beta.shape(),
                       std::vector<float>(n.beta.values().begin(), n.beta.values().end())});
        out.push_back({n.name + ".running_mean",
                       Shape{static_cast<int64_t>(n.running_mean.size())}, n.running_mean});
        out.push_back({n.name + ".running_var",
                       Shape{static_cast<int64_t>(n.running_var.size())}, n.running_var});
    }
}

}  // namespace

Checkpoint checkpoint_from_model(UNet3D& model) {
    if (model.materialized())
        throw CheckpointError("cannot checkpoint a materialized model");
    Checkpoint ck;
    ck.net = model.config();
    if (ck.net.scheme == QuantScheme::FULL) {
        for (auto& c : model.conv_layers())
            ck.tensors.push_back(
                {c.name + ".kernel", c.kernel.shape(),
                 std::vector<float>(c.kernel.values().begin(), c.kernel.values().end())});
        collect_common(model, ck.tensors);
        return ck;
    }
    // quantized: kernels leave as codes + scales; the latent weights are dropped
    for (auto& e : model.kernel_exports()) {
        CheckpointQuant q;
        q.name = e.name;
        q.shape = e.shape;
        q.gamma_pos = e.state.gamma_pos;
        q.gamma_neg = e.state.gamma_neg;
        q.alpha = e.state.alpha;
        q.codes = codes_from_tern(e.tern);
        ck.quant.push_back(std::move(q));
    }
    for (auto& c : model.conv_layers()) {
        if (!c.quantized)
            ck.tensors.push_back(
                {c.name + ".kernel", c.kernel.shape(),
                 std::vector<float>(c.kernel.values().begin(), c.kernel.values().end())});
    }
    collect_common(model, ck.tensors);
    return ck;
}

void apply_checkpoint(UNet3D& model, const Checkpoint& ck) {
    const NetConfig& a = model.config();
    const NetConfig& b = ck.net;
    if (a.num_classes != b.num_classes)
        throw CheckpointError("class count mismatch: model has " + std::to_string(a.num_classes) +
                              " classes, checkpoint has " + std::to_string(b.num_classes));
    if (a.levels != b.levels || a.base_channels != b.base_channels ||
        a.in_channels != b.in_channels || a.scheme != b.scheme ||
        a.quantize_first_last != b.quantize_first_last)
        throw CheckpointError("network configuration mismatch between model and checkpoint");

    std::map<std::string, const CheckpointTensor*> tensors;
    for (const auto& t : ck.tensors) tensors[t.name] = &t;
    std::map<std::string, const CheckpointQuant*> quants;
    for (const auto& q : ck.quant) quants[q.name] = &q;

    auto take_tensor = [&](const std::string& name, const Shape& shape) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
        if (it->second->shape != shape)
            throw CheckpointError("checkpoint tensor '" + name + "' has shape " +
                                  shape_str(it->second->shape) + ", expected " + shape_str(shape));
        const CheckpointTensor* t = it->second;
        tensors.erase(it);
        return t;
    };

    for (auto& c : model.conv_layers()) {
        if (c.quantized) {
            auto it = quants.find(c.name);
            if (it == quants.end())
                throw CheckpointError("checkpoint is missing quant record '" + c.name + "'");
            const CheckpointQuant* q = it->second;
            if (q->shape != c.kernel.shape())
                throw CheckpointError("quant record '" + c.name + "' has mismatched kernel shape");
            TernaryTensor tern = tern_from_codes(q->shape, q->codes);
            c.kernel = codec::restore_weights(tern, q->shape, q->gamma_pos, q->gamma_neg, q->alpha);
            c.quantized = false;
            c.gamma_pos = Tensor();
            c.gamma_neg = Tensor();
            quants.erase(it);
        } else {
            const auto* t = take_tensor(c.name + ".kernel", c.kernel.shape());
            std::copy(t->data.begin(), t->data.end(), c.kernel.values().begin());
        }
        if (c.bias.defined()) {
            const auto* t = take_tensor(c.name + ".bias", c.bias.shape());
            std::copy(t->data.begin(), t->data.end(), c.bias.values().begin());
        }
    }
    for (auto& n : model.norm_layers()) {
        const auto* g = take_tensor(n.name + ".gamma", n.gamma.shape());
        std::copy(g->data.begin(), g->data.end(), n.gamma.values().begin());
        const auto* be = take_tensor(n.name + ".beta", n.beta.shape());
        std::copy(be->data.begin(), be->data.end(), n.beta.values().begin());
        const auto* rm =
            take_tensor(n.name + ".running_mean", Shape{static_cast<int64_t>(n.running_mean.size())});
        n.running_mean = rm->data;
        const auto* rv =
            take_tensor(n.name + ".running_var", Shape{static_cast<int64_t>(n.running_var.size())});
        n.running_var = rv->data;
    }
    if (!tensors.empty())
        throw CheckpointError("checkpoint has unexpected tensor '" + tensors.begin()->first + "'");
    if (!quants.empty())
        throw CheckpointError("checkpoint has unexpected quant record '" +
                              quants.begin()->first + "'");
    if (ck.net.scheme != QuantScheme::FULL) model.materialize_quantized();
}

std::vector<uint8_t> encode_checkpoint(const Checkpoint& ck) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u8(out, kVersion);
    put_u8(out, static_cast<uint8_t>(ck.net.scheme));
    put_u32(out, static_cast<uint32_t>(ck.net.levels));
    put_u32(out, static_cast<uint32_t>(ck.net.base_channels));
    put_u32(out, static_cast<uint32_t>(ck.net.num_classes));
    put_u32(out, static_cast<uint32_t>(ck.net.in_channels));
    put_u8(out, ck.net.quantize_first_last ? 1 : 0);
    put_f32(out, ck.net.threshold_factor);
    put_u8(out, ck.net.per_channel_alpha ? 1 : 0);

    put_u32(out, static_cast<uint32_t>(ck.tensors.size()));
    for (const auto& t : ck.tensors) {
        put_str(out, t.name);
        put_u8(out, static_cast<uint8_t>(t.shape.size()));
        for (int64_t d : t.shape) put_u32(out, static_cast<uint32_t>(d));
        if (t.data.size() != static_cast<size_t>(numel_of(t.shape)))
            throw CheckpointError("tensor '" + t.name + "' data does not match its shape");
        for (float v : t.data) put_f32(out, v);
    }
    put_u32(out, static_cast<uint32_t>(ck.quant.size()));
    for (const auto& q : ck.quant) {
        put_str(out, q.name);
        put_u8(out, static_cast<uint8_t>(q.shape.size()));
        for (int64_t d : q.shape) put_u32(out, static_cast<uint32_t>(d));
        put_f32(out, q.gamma_pos);
        put_f32(out, q.gamma_neg);
        put_u32(out, static_cast<uint32_t>(q.alpha.size()));
        for (float a : q.alpha) put_f32(out, a);
        put_u64(out, q.codes.size());
        for (int8_t c : q.codes) out.push_back(static_cast<uint8_t>(c));
    }
    const uint32_t crc = codec::crc32_ieee(std::span<const uint8_t>(out).subspan(4));
    put_u32(out, crc);
    return out;
}

Checkpoint decode_checkpoint(std::span<const uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw CheckpointError("not a .tqck checkpoint (bad magic)");
    if (bytes.size() < 8) throw CheckpointError("checkpoint stream ends unexpectedly");
    const uint32_t stored_crc = [&] {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
        return v;
    }();
    const uint32_t actual_crc = codec::crc32_ieee(bytes.subspan(4, bytes.size() - 8));
    if (stored_crc != actual_crc) throw CheckpointError("checkpoint CRC32 mismatch");

    Reader r{bytes.subspan(0, bytes.size() - 4), 4};
    Checkpoint ck;
    const uint8_t version = r.u8();
    if (version != kVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    const uint8_t scheme = r.u8();
    if (scheme > 3) throw CheckpointError("unknown scheme byte in checkpoint");
    ck.net.scheme = static_cast<QuantScheme>(scheme);
    ck.net.levels = r.u32();
    ck.net.base_channels = r.u32();
    ck.net.num_classes = r.u32();
    ck.net.in_channels = r.u32();
    ck.net.quantize_first_last = r.u8() != 0;
    ck.net.threshold_factor = r.f32();
    ck.net.per_channel_alpha = r.u8() != 0;

    const uint32_t nt = r.u32();
    for (uint32_t i = 0; i < nt; ++i) {
        CheckpointTensor t;
        t.name = r.str();
        t.shape = r.shape();
        const int64_t n = numel_of(t.shape);
        t.data.resize(static_cast<size_t>(n));
        for (int64_t j = 0; j < n; ++j) t.data[static_cast<size_t>(j)] = r.f32();
        ck.tensors.push_back(std::move(t));
    }
    const uint32_t nq = r.u32();
    for (uint32_t i = 0; i < nq; ++i) {
        CheckpointQuant q;
        q.name = r.str();
        q.shape = r.shape();
        q.gamma_pos = r.f32();
        q.gamma_neg = r.f32();
        const uint32_t na = r.u32();
        q.alpha.resize(na);
        for (uint32_t j = 0; j < na; ++j) q.alpha[j] = r.f32();
        const uint64_t nc = r.u64();
        q.codes.resize(nc);
        r.need(nc);
        std::memcpy(q.codes.data(), r.data.data() + r.pos, nc);
        r.pos += nc;
        ck.quant.push_back(std::move(q));
    }
    if (r.pos != r.data.size()) throw CheckpointError("trailing bytes in checkpoint");
    return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    write_binary_file(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::string& path) {
    return decode_checkpoint(read_binary_file(path));
}

std::vector<codec::LayerExport> layer_exports_from_checkpoint(const Checkpoint& ck) {
    std::vector<codec::LayerExport> layers;
    for (const auto& q : ck.quant) {
        codec::LayerExport e;
        e.name = q.name;
        e.shape = q.shape;
        e.state.scheme = ck.net.scheme;
        e.state.gamma_pos = q.gamma_pos;
        e.state.gamma_neg = q.gamma_neg;
        e.state.alpha = q.alpha;
        e.tern = tern_from_codes(q.shape, q.codes);
        layers.push_back(std::move(e));
    }
    return layers;
}

std::vector<uint8_t> pack_checkpoint(const Checkpoint& ck) {
    if (ck.quant.empty())
        throw CheckpointError("checkpoint has no quantized kernels to pack");
    return codec::serialize_model(layer_exports_from_checkpoint(ck),
                                  ck.net.scheme == QuantScheme::BTQ);
}

Checkpoint unpack_model(std::span<const uint8_t> packed_bytes) {
    const codec::RestoredModel model = codec::deserialize_model(packed_bytes);
    Checkpoint ck;
    ck.net.scheme = model.binary ? QuantScheme::BTQ : QuantScheme::TDQ3;
    for (const auto& layer : model.layers) {
        CheckpointQuant q;
        q.name = layer.name;
        q.shape = layer.shape;
        q.gamma_pos = layer.gamma_pos;
        q.gamma_neg = layer.gamma_neg;
        q.alpha = layer.alpha;
        q.codes = codes_from_tern(layer.tern);
        ck.quant.push_back(std::move(q));
    }
    return ck;
}

std::vector<uint8_t> read_binary_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file: " + path);
    return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
}

void write_binary_file(const std::string& path, std::span<const uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to file: " + path);
}

}  // namespace ternq
