#include "ternq/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

namespace ternq {

namespace {

using nlohmann::json;

class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
    }

    ~Section() = default;

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key()))
                throw ConfigError("config: unknown key '" + join(it.key()) + "'");
        }
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key);
    }

    const json& at(const std::string& key) const { return j_.at(key); }

    template <class T>
    void read_int(const std::string& key, T& out) {
        if (!has(key)) return;
        const json& v = at(key);
        if (!v.is_number_integer() && !v.is_number_unsigned())
            throw ConfigError("config: '" + join(key) + "' must be an integer");
        out = v.get<T>();
    }

    void read_float(const std::string& key, float& out) {
        if (!has(key)) return;
        const json& v = at(key);
        if (!v.is_number()) throw ConfigError("config: '" + join(key) + "' must be a number");
        out = v.get<float>();
    }

    void read_double(const std::string& key, double& out) {
        if (!has(key)) return;
        const json& v = at(key);
        if (!v.is_number()) throw ConfigError("config: '" + join(key) + "' must be a number");
        out = v.get<double>();
    }

    void read_bool(const std::string& key, bool& out) {
        if (!has(key)) return;
        const json& v = at(key);
        if (!v.is_boolean()) throw ConfigError("config: '" + join(key) + "' must be a boolean");
        out = v.get<bool>();
    }

    void read_string(const std::string& key, std::string& out) {
        if (!has(key)) return;
        const json& v = at(key);
        if (!v.is_string()) throw ConfigError("config: '" + join(key) + "' must be a string");
        out = v.get<std::string>();
    }

    std::string join(const std::string& key) const {
        return path_.empty() ? key : path_ + "." + key;
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    RunConfig cfg;
    Section top(root, "");
    if (top.has("net")) {
        Section net(top.at("net"), "net");
        net.read_int("levels", cfg.net.levels);
        net.read_int("base_channels", cfg.net.base_channels);
        net.read_int("num_classes", cfg.net.num_classes);
        net.read_int("in_channels", cfg.net.in_channels);
        if (net.has("scheme")) {
            const auto& v = net.at("scheme");
            if (!v.is_string()) throw ConfigError("config: 'net.scheme' must be a string");
            cfg.net.scheme = parse_scheme(v.get<std::string>());
        }
        net.read_bool("quantize_first_last", cfg.net.quantize_first_last);
        net.finish();
    }
    if (top.has("quant")) {
        Section q(top.at("quant"), "quant");
        q.read_float("t", cfg.net.threshold_factor);
        q.read_bool("per_channel_alpha", cfg.net.per_channel_alpha);
        q.finish();
    }
    if (top.has("train")) {
        Section tr(top.at("train"), "train");
        tr.read_float("learning_rate", cfg.train.learning_rate);
        tr.read_int("iterations", cfg.train.iterations);
        tr.read_int("patch_size", cfg.train.patch_size);
        tr.read_int("batch_size", cfg.train.batch_size);
        tr.read_int("seed", cfg.train.seed);
        tr.read_float("loss_mix", cfg.train.loss_mix);
        tr.finish();
    }
    if (top.has("data")) {
        Section d(top.at("data"), "data");
        d.read_int("volumes", cfg.data.volumes);
        d.read_int("volume_size", cfg.data.volume_size);
        d.read_float("noise_sigma", cfg.data.noise_sigma);
        d.read_double("train_fraction", cfg.data.train_fraction);
        d.read_int("seed", cfg.data.seed);
        d.finish();
    }
    if (top.has("output")) {
        Section o(top.at("output"), "output");
        o.read_string("checkpoint", cfg.output.checkpoint);
        o.read_string("metrics", cfg.output.metrics);
        o.finish();
    }
    top.finish();

    cfg.net.validate();
    cfg.data.validate();
    cfg.train.validate(cfg.net.levels);
    if (!(cfg.net.threshold_factor >= 0.0f && cfg.net.threshold_factor < 1.0f))
        throw ConfigError("config: 'quant.t' must be in [0, 1)");
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_run_config(text);
}

}  // namespace ternq
