#include <CLI11.hpp>

#include <cstdio>
#include <string>

#include "ternq/checkpoint.hpp"
#include "ternq/codec.hpp"
#include "ternq/config.hpp"
#include "ternq/gradcheck.hpp"
#include "ternq/rng.hpp"
#include "ternq/train.hpp"
#include "ternq/voldata.hpp"

namespace {

using namespace ternq;

constexpr int kExitOk = 0;
constexpr int kExitError = 1;    // usage, config or data errors
constexpr int kExitFormat = 2;   // corrupt or mismatched model files
constexpr int kExitNanAbort = 3; // training aborted on non-finite loss

uint64_t split_seed(const DataConfig& data) { return Rng(data.seed).fork(1).next(); }

struct LoadedData {
    std::vector<VolumeSample> train, val;
};

LoadedData build_dataset(const RunConfig& cfg) {
    auto volumes = generate_dataset(cfg.data.seed, cfg.data.volumes, cfg.data.volume_size,
                                    cfg.net.num_classes, cfg.data.noise_sigma);
    auto [train_vols, val_vols] = split_dataset(volumes, cfg.data.train_fraction,
                                                split_seed(cfg.data));
    return {std::move(train_vols), std::move(val_vols)};
}

int cmd_train(const std::string& config_path, const std::string& out_override,
              bool have_seed, uint64_t seed_override) {
    RunConfig cfg = load_run_config(config_path);
    if (have_seed) cfg.train.seed = seed_override;
    if (!out_override.empty()) cfg.output.checkpoint = out_override;

    LoadedData data = build_dataset(cfg);
    if (data.train.empty() || data.val.empty())
        throw std::invalid_argument("dataset split produced an empty train or validation set");

    UNet3D model(cfg.net, cfg.train.seed);
    std::printf("training scheme=%s levels=%lld base=%lld classes=%lld params=%lld\n",
                scheme_name(cfg.net.scheme), static_cast<long long>(cfg.net.levels),
                static_cast<long long>(cfg.net.base_channels),
                static_cast<long long>(cfg.net.num_classes),
                static_cast<long long>(model.parameter_count()));

    TrainResult result = train(model, data.train, cfg.train);
    write_metrics_csv(cfg.output.metrics, result.log);

    EvalResult ev = evaluate(model, data.val);
    std::printf("validation mean foreground dice: %.4f\n", ev.mean_foreground);

    Checkpoint ck = checkpoint_from_model(model);
    const std::string raw_path = cfg.output.checkpoint + ".tqck";
    save_checkpoint(raw_path, ck);
    std::printf("wrote %s\n", raw_path.c_str());
    if (cfg.net.scheme != QuantScheme::FULL) {
        const auto packed = pack_checkpoint(ck);
        const std::string packed_path = cfg.output.checkpoint + ".3dqp";
        write_binary_file(packed_path, packed);
        std::printf("wrote %s (%zu bytes)\n", packed_path.c_str(), packed.size());
    }
    std::printf("wrote %s\n", cfg.output.metrics.c_str());
    return kExitOk;
}

int cmd_eval(const std::string& model_path, const std::string& config_path,
             const std::string& csv_path) {
    RunConfig cfg = load_run_config(config_path);
    Checkpoint ck = load_checkpoint(model_path);
    if (ck.net.num_classes != cfg.net.num_classes)
        throw CheckpointError("class count mismatch: checkpoint has " +
                              std::to_string(ck.net.num_classes) + " classes, config has " +
                              std::to_string(cfg.net.num_classes));

    UNet3D model(ck.net, /*seed=*/0);
    apply_checkpoint(model, ck);

    LoadedData data = build_dataset(cfg);
    if (data.val.empty()) throw std::invalid_argument("validation split is empty");
    EvalResult ev = evaluate(model, data.val);

    for (size_t c = 0; c < ev.per_class.size(); ++c)
        std::printf("class %zu dice: %.6f\n", c, ev.per_class[c]);
    std::printf("mean foreground dice: %.6f\n", ev.mean_foreground);
    if (!csv_path.empty()) {
        std::FILE* f = std::fopen(csv_path.c_str(), "w");
        if (!f) throw std::runtime_error("cannot write CSV: " + csv_path);
        std::fprintf(f, "class,dice\n");
        for (size_t c = 0; c < ev.per_class.size(); ++c)
            std::fprintf(f, "%zu,%.9g\n", c, ev.per_class[c]);
        std::fprintf(f, "mean_foreground,%.9g\n", ev.mean_foreground);
        std::fclose(f);
    }
    return kExitOk;
}

int cmd_pack(const std::string& model_path, const std::string& out_path) {
    Checkpoint ck = load_checkpoint(model_path);
    const auto packed = pack_checkpoint(ck);
    write_binary_file(out_path, packed);
    std::printf("packed %zu layers into %s (%zu bytes)\n", ck.quant.size(), out_path.c_str(),
                packed.size());
    return kExitOk;
}

int cmd_unpack(const std::string& model_path, const std::string& out_path) {
    const auto bytes = read_binary_file(model_path);
    Checkpoint ck = unpack_model(bytes);
    save_checkpoint(out_path, ck);
    std::printf("unpacked %zu layers into %s\n", ck.quant.size(), out_path.c_str());
    return kExitOk;
}

int cmd_report(const std::string& model_path, const std::string& csv_path) {
    const auto bytes = read_binary_file(model_path);
    codec::CompressionReport rep;
    if (bytes.size() >= 4 && bytes[0] == '3' && bytes[1] == 'D' && bytes[2] == 'Q' &&
        bytes[3] == 'P') {
        Checkpoint ck = unpack_model(bytes);
        rep = codec::compression_report(layer_exports_from_checkpoint(ck),
                                        ck.net.scheme == QuantScheme::BTQ);
    } else {
        Checkpoint ck = decode_checkpoint(bytes);
        if (ck.net.scheme == QuantScheme::FULL) {
            uint64_t full = 0;
            for (const auto& t : ck.tensors) {
                codec::CompressionRow row;
                row.name = t.name;
                row.weights = static_cast<int64_t>(t.data.size());
                row.full_bytes = 4ull * t.data.size();
                row.packed_bytes = row.full_bytes;
                full += row.full_bytes;
                rep.rows.push_back(std::move(row));
            }
            rep.full_bytes = full;
            rep.packed_bytes = full;
            rep.ratio = 1.0;
        } else {
            rep = codec::compression_report(layer_exports_from_checkpoint(ck),
                                            ck.net.scheme == QuantScheme::BTQ);
        }
    }

    std::printf("%-12s %12s %14s %14s\n", "layer", "weights", "full_bytes", "packed_bytes");
    for (const auto& row : rep.rows)
        std::printf("%-12s %12lld %14llu %14llu\n", row.name.c_str(),
                    static_cast<long long>(row.weights),
                    static_cast<unsigned long long>(row.full_bytes),
                    static_cast<unsigned long long>(row.packed_bytes));
    std::printf("total full bytes:   %llu\n", static_cast<unsigned long long>(rep.full_bytes));
    std::printf("total packed bytes: %llu\n", static_cast<unsigned long long>(rep.packed_bytes));
    std::printf("compression ratio:  %.3f\n", rep.ratio);

    if (!csv_path.empty()) {
        std::FILE* f = std::fopen(csv_path.c_str(), "w");
        if (!f) throw std::runtime_error("cannot write CSV: " + csv_path);
        std::fprintf(f, "layer,weights,full_bytes,packed_bytes\n");
        for (const auto& row : rep.rows)
            std::fprintf(f, "%s,%lld,%llu,%llu\n", row.name.c_str(),
                         static_cast<long long>(row.weights),
                         static_cast<unsigned long long>(row.full_bytes),
                         static_cast<unsigned long long>(row.packed_bytes));
        std::fprintf(f, "total,,%llu,%llu\n", static_cast<unsigned long long>(rep.full_bytes),
                     static_cast<unsigned long long>(rep.packed_bytes));
        std::fprintf(f, "ratio,,,%.6f\n", rep.ratio);
        std::fclose(f);
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"3DQ ternary quantization-aware training and packed weight storage"};
    app.require_subcommand(0, 1);

    bool check_grads = false;
    app.add_flag("--double-check-grads", check_grads,
                 "run the double-precision gradient verification suite and exit");

    std::string train_config, train_out;
    uint64_t train_seed = 0;
    auto* train_cmd = app.add_subcommand("train", "train a model from a JSON config");
    train_cmd->add_option("--config", train_config, "JSON run configuration")->required();
    auto* seed_opt = train_cmd->add_option("--seed", train_seed, "override train.seed");
    train_cmd->add_option("--out", train_out, "override output.checkpoint base path");

    std::string eval_model, eval_config, eval_out = "eval.csv";
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
    eval_cmd->add_option("--model", eval_model, ".tqck checkpoint")->required();
    eval_cmd->add_option("--config", eval_config, "JSON run configuration")->required();
    eval_cmd->add_option("--out", eval_out, "per-class Dice CSV (empty to skip)");

    std::string pack_model, pack_out;
    auto* pack_cmd = app.add_subcommand("pack", "pack a quantized checkpoint into .3dqp");
    pack_cmd->add_option("--model", pack_model, ".tqck checkpoint")->required();
    pack_cmd->add_option("--out", pack_out, "output .3dqp path")->required();

    std::string unpack_model_path, unpack_out;
    auto* unpack_cmd = app.add_subcommand("unpack", "unpack a .3dqp file into a checkpoint");
    unpack_cmd->add_option("--model", unpack_model_path, ".3dqp file")->required();
    unpack_cmd->add_option("--out", unpack_out, "output .tqck path")->required();

    std::string report_model, report_out;
    auto* report_cmd = app.add_subcommand("report", "print the compression table for a model");
    report_cmd->add_option("--model", report_model, ".3dqp or .tqck file")->required();
    report_cmd->add_option("--out", report_out, "optional CSV output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (check_grads) {
            GradSuiteResult r = run_gradient_suite(7, /*verbose=*/true);
            std::printf("gradient suite: %s\n", r.ok ? "PASS" : "FAIL");
            return r.ok ? kExitOk : kExitError;
        }
        if (train_cmd->parsed())
            return cmd_train(train_config, train_out, seed_opt->count() > 0, train_seed);
        if (eval_cmd->parsed()) return cmd_eval(eval_model, eval_config, eval_out);
        if (pack_cmd->parsed()) return cmd_pack(pack_model, pack_out);
        if (unpack_cmd->parsed()) return cmd_unpack(unpack_model_path, unpack_out);
        if (report_cmd->parsed()) return cmd_report(report_model, report_out);
        std::fprintf(stderr, "%s\n", app.help().c_str());
        return kExitError;
    } catch (const TrainingAborted& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNanAbort;
    } catch (const codec::CodecError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitFormat;
    } catch (const CheckpointError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitFormat;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitError;
    }
}
