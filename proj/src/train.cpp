#include "ternq/train.hpp"

#include <cmath>
#include <cstdio>

#include "ternq/ops.hpp"
#include "ternq/optim.hpp"
#include "ternq/rng.hpp"

namespace ternq {

std::vector<float> dataset_class_weights(const std::vector<VolumeSample>& volumes,
                                         int64_t num_classes) {
    if (volumes.empty()) throw std::invalid_argument("class weights need at least one volume");
    IntTensor pooled;
    int64_t total = 0;
    for (const auto& v : volumes) total += v.labels.numel();
    pooled.shape = {total};
    pooled.values.reserve(static_cast<size_t>(total));
    for (const auto& v : volumes)
        pooled.values.insert(pooled.values.end(), v.labels.values.begin(), v.labels.values.end());
    return median_frequency_weights(pooled, num_classes);
}

namespace {

struct Batch {
    Tensor images;
    IntTensor labels;
};

Batch make_batch(const std::vector<VolumeSample>& volumes, int64_t patch, int64_t batch_size,
                 Rng& rng) {
    Batch b;
    b.images = Tensor(Shape{batch_size, 1, patch, patch, patch});
    b.labels = IntTensor(Shape{batch_size, patch, patch, patch});
    const int64_t vox = patch * patch * patch;
    for (int64_t i = 0; i < batch_size; ++i) {
        const auto& vol = volumes[rng.below(volumes.size())];
        const int64_t D = vol.labels.shape[0], H = vol.labels.shape[1], W = vol.labels.shape[2];
        const int64_t d0 = static_cast<int64_t>(rng.below(static_cast<uint64_t>(D - patch + 1)));
        const int64_t h0 = static_cast<int64_t>(rng.below(static_cast<uint64_t>(H - patch + 1)));
        const int64_t w0 = static_cast<int64_t>(rng.below(static_cast<uint64_t>(W - patch + 1)));
        VolumeSample p = crop_patch(vol, d0, h0, w0, patch);
        std::copy_n(p.image.values().data(), vox, b.images.values().data() + i * vox);
        std::copy_n(p.labels.values.data(), vox, b.labels.values.data() + i * vox);
    }
    return b;
}

}  // namespace

TrainResult train(UNet3D& model, const std::vector<VolumeSample>& train_volumes,
                  const TrainConfig& cfg) {
    cfg.validate(model.config().levels);
    if (train_volumes.empty()) throw std::invalid_argument("train: no training volumes");
    for (const auto& v : train_volumes) {
        for (size_t i = 0; i < 3; ++i)
            if (v.labels.shape[i] < cfg.patch_size)
                throw std::invalid_argument("train: volume smaller than the patch size");
    }

    TrainResult result;
    result.class_weights = dataset_class_weights(train_volumes, model.config().num_classes);

    auto params = model.parameters();
    Adam adam(cfg.learning_rate);
    Rng patch_rng = Rng(cfg.seed).fork(0x70617463);

    const int64_t classes = model.config().num_classes;
    for (int64_t step = 0; step < cfg.iterations; ++step) {
        Batch batch = make_batch(train_volumes, cfg.patch_size, cfg.batch_size, patch_rng);

        model.zero_grads();
        Tape tape;
        Tensor logits = model.forward(&tape, batch.images, /*training=*/true);
        Tensor probs = ops::softmax_channels(logits);
        Tensor target = onehot<float>(batch.labels, classes);
        Tensor dice = dice_loss(probs, target);
        Tensor ce = weighted_cross_entropy(logits, batch.labels, result.class_weights);
        Tensor total = ops::add(ops::scale(dice, cfg.loss_mix),
                                ops::scale(ce, 1.0f - cfg.loss_mix));
        if (!std::isfinite(total.item()))
            throw TrainingAborted("training aborted: loss became non-finite at step " +
                                  std::to_string(step));
        tape.backward(total);

        auto param_span = std::span<Tensor>(params);
        adam.step(param_span);

        const DiceScores batch_dice =
            dice_scores(argmax_channels(probs), batch.labels, classes);
        result.log.push_back(StepLog{step, total.item(), dice.item(), ce.item(),
                                     static_cast<float>(batch_dice.mean_foreground)});
    }
    return result;
}

EvalResult evaluate(UNet3D& model, const std::vector<VolumeSample>& volumes) {
    if (volumes.empty()) throw std::invalid_argument("evaluate: no volumes");
    const int64_t classes = model.config().num_classes;
    IntTensor all_pred, all_truth;
    int64_t total = 0;
    for (const auto& v : volumes) total += v.labels.numel();
    all_pred.shape = {total};
    all_truth.shape = {total};
    all_pred.values.reserve(static_cast<size_t>(total));
    all_truth.values.reserve(static_cast<size_t>(total));
    for (const auto& v : volumes) {
        Tensor batched(Shape{1, 1, v.labels.shape[0], v.labels.shape[1], v.labels.shape[2]},
                       std::vector<float>(v.image.values().begin(), v.image.values().end()));
        Tensor logits = model.forward(nullptr, batched, /*training=*/false);
        IntTensor pred = argmax_channels(logits);
        all_pred.values.insert(all_pred.values.end(), pred.values.begin(), pred.values.end());
        all_truth.values.insert(all_truth.values.end(), v.labels.values.begin(),
                                v.labels.values.end());
    }
    const DiceScores scores = dice_scores(all_pred, all_truth, classes);
    return EvalResult{scores.per_class, scores.mean_foreground};
}

void write_metrics_csv(const std::string& path, const std::vector<StepLog>& log) {
    std::FILE* f = std::fopen(path.c_str(), "w");
    if (!f) throw std::runtime_error("cannot write metrics CSV: " + path);
    std::fprintf(f, "step,total_loss,dice_loss,ce_loss,mean_dice\n");
    for (const auto& row : log)
        std::fprintf(f, "%lld,%.9g,%.9g,%.9g,%.9g\n", static_cast<long long>(row.step),
                     row.total_loss, row.dice, row.ce, row.mean_dice);
    std::fclose(f);
}

}  // namespace ternq
