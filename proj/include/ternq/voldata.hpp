#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ternq/tensor.hpp"

namespace ternq {

// One synthetic labelled volume: image [1,D,H,W] with intensities in [0,1],
// labels [D,H,W] in [0, num_classes).
struct VolumeSample {
    Tensor image;
    IntTensor labels;
};

// Deterministic labelled blob volume: num_classes-1 random ellipsoids with
// class-specific intensity bands over a dark background, plus Gaussian
// noise. Retries placement until every foreground class keeps at least one
// voxel; throws after bounded retries.
VolumeSample generate_volume(uint64_t seed, int64_t size, int64_t num_classes,
                             float noise_sigma);

// Volumes are generated from per-index seeds, so the result is independent
// of the number of worker threads. `threads` <= 0 picks the TERNQ_THREADS
// environment cap (default: hardware concurrency).
std::vector<VolumeSample> generate_dataset(uint64_t seed, int64_t count, int64_t size,
                                           int64_t num_classes, float noise_sigma,
                                           int threads = 0);

std::vector<VolumeSample> sample_patches(const VolumeSample& volume, int64_t patch_size,
                                         int64_t count, uint64_t seed);

// deterministic disjoint, exhaustive sample-level split
std::pair<std::vector<VolumeSample>, std::vector<VolumeSample>> split_dataset(
    const std::vector<VolumeSample>& volumes, double train_fraction, uint64_t seed);

// crop helper shared by patch sampling and the training loop
VolumeSample crop_patch(const VolumeSample& volume, int64_t d0, int64_t h0, int64_t w0,
                        int64_t patch_size);

// Writes <base>.img.f32 and <base>.lbl.i32 (flat little-endian) plus
// <base>.json describing shapes and dtypes.
void export_volume(const VolumeSample& volume, const std::string& base_path);

int data_gen_threads();

}  // namespace ternq
