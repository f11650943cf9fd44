#pragma once

#include <string>
#include <vector>

#include "ternq/loss.hpp"
#include "ternq/unet.hpp"
#include "ternq/voldata.hpp"

namespace ternq {

struct TrainConfig {
    float learning_rate = 1e-4f;
    int64_t iterations = 200;
    int64_t patch_size = 16;
    int64_t batch_size = 4;
    uint64_t seed = 1;
    float loss_mix = 0.5f;  // loss = mix*dice + (1-mix)*weighted CE

    void validate(int64_t levels) const {
        if (iterations < 0) throw std::invalid_argument("train.iterations must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
        if (!(loss_mix >= 0.0f && loss_mix <= 1.0f))
            throw std::invalid_argument("train.loss_mix must be in [0, 1]");
        if (learning_rate <= 0.0f) throw std::invalid_argument("train.learning_rate must be > 0");
        if (patch_size < 2 || (patch_size & (patch_size - 1)) != 0)
            throw std::invalid_argument("train.patch_size must be a power of two");
        if (patch_size < (int64_t(1) << levels))
            throw std::invalid_argument("train.patch_size too small for " +
                                        std::to_string(levels) + " levels");
    }
};

struct StepLog {
    int64_t step;
    float total_loss, dice, ce, mean_dice;
};

struct TrainResult {
    std::vector<StepLog> log;
    std::vector<float> class_weights;
};

// Raised when the composite loss stops being finite.
struct TrainingAborted : std::runtime_error {
    explicit TrainingAborted(const std::string& msg) : std::runtime_error(msg) {}
};

// Quantization-aware training loop: per step, refresh each layer's
// delta/alpha from the latent weights, run the quantized forward pass,
// apply the composite loss, backpropagate straight-through, and update the
// latent weights and gamma scales with Adam. Class weights come from median
// frequency balancing over the whole training set.
TrainResult train(UNet3D& model, const std::vector<VolumeSample>& train_volumes,
                  const TrainConfig& cfg);

struct EvalResult {
    std::vector<double> per_class;
    double mean_foreground = 0.0;
};

// Hard Dice on argmax predictions, voxel counts pooled across volumes.
EvalResult evaluate(UNet3D& model, const std::vector<VolumeSample>& volumes);

void write_metrics_csv(const std::string& path, const std::vector<StepLog>& log);

std::vector<float> dataset_class_weights(const std::vector<VolumeSample>& volumes,
                                         int64_t num_classes);

}  // namespace ternq
