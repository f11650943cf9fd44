#pragma once

#include <string>

#include "ternq/train.hpp"
#include "ternq/unet.hpp"

namespace ternq {

struct DataConfig {
    int64_t volumes = 10;
    int64_t volume_size = 24;
    float noise_sigma = 0.1f;
    double train_fraction = 0.8;
    uint64_t seed = 7;

    void validate() const {
        if (volumes < 2) throw std::invalid_argument("data.volumes must be >= 2");
        if (volume_size < 8) throw std::invalid_argument("data.volume_size must be >= 8");
        if (noise_sigma < 0) throw std::invalid_argument("data.noise_sigma must be >= 0");
        if (!(train_fraction > 0.0 && train_fraction < 1.0))
            throw std::invalid_argument("data.train_fraction must be in (0, 1)");
    }
};

struct OutputConfig {
    std::string checkpoint = "model";  // extensionless base path
    std::string metrics = "metrics.csv";
};

struct RunConfig {
    NetConfig net;
    TrainConfig train;
    DataConfig data;
    OutputConfig output;
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Strict parse: unknown keys and wrong types are rejected with the full key
// path in the message. All keys are optional and fall back to the defaults
// above.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

}  // namespace ternq
