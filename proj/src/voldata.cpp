#include "ternq/voldata.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <future>
#include <thread>

#include <json.hpp>

#include "ternq/rng.hpp"

namespace ternq {

namespace {

struct Ellipsoid {
    double cx, cy, cz;
    double rx, ry, rz;
};

bool inside(const Ellipsoid& e, int64_t z, int64_t y, int64_t x) {
    const double dz = (static_cast<double>(z) - e.cz) / e.rz;
    const double dy = (static_cast<double>(y) - e.cy) / e.ry;
    const double dx = (static_cast<double>(x) - e.cx) / e.rx;
    return dz * dz + dy * dy + dx * dx <= 1.0;
}

constexpr float kBackgroundIntensity = 0.15f;

float class_intensity(int64_t cls, int64_t num_classes) {
    // foreground bands spread over [0.55, 0.95]
    if (num_classes == 2) return 0.75f;
    return 0.55f + 0.4f * static_cast<float>(cls - 1) / static_cast<float>(num_classes - 2);
}

}  // namespace

VolumeSample generate_volume(uint64_t seed, int64_t size, int64_t num_classes,
                             float noise_sigma) {
    if (size < 8) throw std::invalid_argument("generate_volume: size must be >= 8");
    if (num_classes < 2) throw std::invalid_argument("generate_volume: need >= 2 classes");
    if (noise_sigma < 0) throw std::invalid_argument("generate_volume: negative noise");

    Rng rng(seed);
    const int max_attempts = 25;
    for (int attempt = 0; attempt < max_attempts; ++attempt) {
        VolumeSample s;
        s.labels = IntTensor(Shape{size, size, size});
        s.image = Tensor(Shape{1, size, size, size});

        const double s_d = static_cast<double>(size);
        for (int64_t cls = 1; cls < num_classes; ++cls) {
            Ellipsoid e;
            e.cx = rng.uniform(0.25 * s_d, 0.75 * s_d);
            e.cy = rng.uniform(0.25 * s_d, 0.75 * s_d);
            e.cz = rng.uniform(0.25 * s_d, 0.75 * s_d);
            e.rx = rng.uniform(0.12 * s_d, 0.28 * s_d);
            e.ry = rng.uniform(0.12 * s_d, 0.28 * s_d);
            e.rz = rng.uniform(0.12 * s_d, 0.28 * s_d);
            for (int64_t z = 0; z < size; ++z)
                for (int64_t y = 0; y < size; ++y)
                    for (int64_t x = 0; x < size; ++x)
                        if (inside(e, z, y, x))
                            s.labels.values[static_cast<size_t>((z * size + y) * size + x)] =
                                static_cast<int32_t>(cls);
        }

        std::vector<int64_t> counts(static_cast<size_t>(num_classes), 0);
        for (int32_t y : s.labels.values) counts[static_cast<size_t>(y)]++;
        bool all_present = true;
        for (int64_t cls = 1; cls < num_classes; ++cls)
            all_present = all_present && counts[static_cast<size_t>(cls)] > 0;
        if (!all_present) continue;  // a later blob swallowed an earlier one

        auto img = s.image.values();
        for (size_t i = 0; i < s.labels.values.size(); ++i) {
            const int32_t y = s.labels.values[i];
            float v = y == 0 ? kBackgroundIntensity : class_intensity(y, num_classes);
            if (noise_sigma > 0) v += noise_sigma * static_cast<float>(rng.normal());
            img[i] = std::clamp(v, 0.0f, 1.0f);
        }
        return s;
    }
    throw std::runtime_error("generate_volume: could not place all classes after " +
                             std::to_string(max_attempts) + " attempts");
}

int data_gen_threads() {
    if (const char* env = std::getenv("TERNQ_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

std::vector<VolumeSample> generate_dataset(uint64_t seed, int64_t count, int64_t size,
                                           int64_t num_classes, float noise_sigma, int threads) {
    if (count < 1) throw std::invalid_argument("generate_dataset: count must be >= 1");
    if (threads <= 0) threads = data_gen_threads();
    threads = static_cast<int>(std::min<int64_t>(threads, count));

    std::vector<VolumeSample> out(static_cast<size_t>(count));
    Rng root(seed);
    std::vector<uint64_t> seeds(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) seeds[static_cast<size_t>(i)] = root.fork(static_cast<uint64_t>(i)).next();

    if (threads <= 1) {
        for (int64_t i = 0; i < count; ++i)
            out[static_cast<size_t>(i)] =
                generate_volume(seeds[static_cast<size_t>(i)], size, num_classes, noise_sigma);
        return out;
    }
    std::vector<std::future<void>> jobs;
    std::atomic<int64_t> next{0};
    for (int t = 0; t < threads; ++t) {
        jobs.push_back(std::async(std::launch::async, [&]() {
            for (;;) {
                const int64_t i = next.fetch_add(1);
                if (i >= count) return;
                out[static_cast<size_t>(i)] =
                    generate_volume(seeds[static_cast<size_t>(i)], size, num_classes, noise_sigma);
            }
        }));
    }
    for (auto& j : jobs) j.get();
    return out;
}

VolumeSample crop_patch(const VolumeSample& volume, int64_t d0, int64_t h0, int64_t w0,
                        int64_t patch_size) {
    const int64_t D = volume.labels.shape[0], H = volume.labels.shape[1],
                  W = volume.labels.shape[2];
    if (d0 < 0 || h0 < 0 || w0 < 0 || d0 + patch_size > D || h0 + patch_size > H ||
        w0 + patch_size > W)
        throw std::invalid_argument("crop_patch: window out of bounds");
    VolumeSample p;
    p.image = Tensor(Shape{1, patch_size, patch_size, patch_size});
    p.labels = IntTensor(Shape{patch_size, patch_size, patch_size});
    auto src = volume.image.values();
    auto dst = p.image.values();
    for (int64_t z = 0; z < patch_size; ++z)
        for (int64_t y = 0; y < patch_size; ++y)
            for (int64_t x = 0; x < patch_size; ++x) {
                const size_t si = static_cast<size_t>(((z + d0) * H + (y + h0)) * W + (x + w0));
                const size_t di = static_cast<size_t>((z * patch_size + y) * patch_size + x);
                dst[di] = src[si];
                p.labels.values[di] = volume.labels.values[si];
            }
    return p;
}

std::vector<VolumeSample> sample_patches(const VolumeSample& volume, int64_t patch_size,
                                         int64_t count, uint64_t seed) {
    const int64_t D = volume.labels.shape[0], H = volume.labels.shape[1],
                  W = volume.labels.shape[2];
    if (patch_size > D || patch_size > H || patch_size > W)
        throw std::invalid_argument("sample_patches: patch larger than volume");
    Rng rng(seed);
    std::vector<VolumeSample> out;
    out.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        const int64_t d0 = static_cast<int64_t>(rng.below(static_cast<uint64_t>(D - patch_size + 1)));
        const int64_t h0 = static_cast<int64_t>(rng.below(static_cast<uint64_t>(H - patch_size + 1)));
        const int64_t w0 = static_cast<int64_t>(rng.below(static_cast<uint64_t>(W - patch_size + 1)));
        out.push_back(crop_patch(volume, d0, h0, w0, patch_size));
    }
    return out;
}

std::pair<std::vector<VolumeSample>, std::vector<VolumeSample>> split_dataset(
    const std::vector<VolumeSample>& volumes, double train_fraction, uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw std::invalid_argument("split_dataset: fraction must be in (0, 1)");
    std::vector<size_t> idx(volumes.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    for (size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.below(i)]);
    const size_t k = static_cast<size_t>(
        std::llround(train_fraction * static_cast<double>(volumes.size())));
    std::pair<std::vector<VolumeSample>, std::vector<VolumeSample>> out;
    for (size_t i = 0; i < idx.size(); ++i)
        (i < k ? out.first : out.second).push_back(volumes[idx[i]]);
    return out;
}

void export_volume(const VolumeSample& volume, const std::string& base_path) {
    {
        std::ofstream img(base_path + ".img.f32", std::ios::binary);
        if (!img) throw std::runtime_error("export_volume: cannot write " + base_path + ".img.f32");
        img.write(reinterpret_cast<const char*>(volume.image.values().data()),
                  static_cast<std::streamsize>(volume.image.numel() * sizeof(float)));
    }
    {
        std::ofstream lbl(base_path + ".lbl.i32", std::ios::binary);
        if (!lbl) throw std::runtime_error("export_volume: cannot write " + base_path + ".lbl.i32");
        lbl.write(reinterpret_cast<const char*>(volume.labels.values.data()),
                  static_cast<std::streamsize>(volume.labels.numel() * sizeof(int32_t)));
    }
    nlohmann::json j;
    j["image"] = {{"file", base_path + ".img.f32"},
                  {"shape", volume.image.shape()},
                  {"dtype", "float32-le"}};
    j["labels"] = {{"file", base_path + ".lbl.i32"},
                   {"shape", volume.labels.shape},
                   {"dtype", "int32-le"}};
    std::ofstream js(base_path + ".json");
    if (!js) throw std::runtime_error("export_volume: cannot write " + base_path + ".json");
    js << j.dump(2) << "\n";
}

}  // namespace ternq
