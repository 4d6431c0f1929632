#pragma once

#include <cmath>
#include <map>

#include "ftlab/pretrain.hpp"

namespace ftlab::detail {

/// Shared epoch/batch loop. `step(indices, rng, lr)` runs one optimization step and returns
/// its loss; `snapshot()` captures the current encoder as a checkpoint.
template <typename Step, typename Snapshot>
PretrainResult run_pretraining(const Dataset& data, const PretrainConfig& cfg, std::int64_t min_batch, Step&& step,
                               Snapshot&& snapshot, const EpochCallback& on_epoch) {
    cfg.validate();
    const std::int64_t n = data.size();
    if (n == 0) throw InputError("pre-training dataset is empty");
    if (n < min_batch)
        throw InputError("pre-training needs at least " + std::to_string(min_batch) + " images, got " +
                         std::to_string(n));
    const std::int64_t bs = std::min<std::int64_t>(cfg.batch_size, n);
    const std::int64_t steps_per_epoch = n / bs;  // the ragged tail of each shuffle is dropped
    CosineSchedule sched{cfg.learning_rate, cfg.warmup_epochs * steps_per_epoch, cfg.epochs * steps_per_epoch,
                         cfg.min_learning_rate};
    const int window = selection_window(cfg.epochs, cfg.window_fraction);

    Rng rng(cfg.seed);
    Rng order_rng = rng.fork(1), aug_rng = rng.fork(2);
    PretrainResult result;
    std::map<int, Checkpoint> kept;
    std::int64_t global = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto perm = order_rng.permutation(n);
        double total = 0.0;
        for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
            std::vector<std::int64_t> idx(perm.begin() + s * bs, perm.begin() + (s + 1) * bs);
            const double loss = step(idx, aug_rng, sched.at(global++));
            if (!std::isfinite(loss)) throw std::runtime_error("pre-training loss diverged at epoch " + std::to_string(epoch));
            total += loss;
        }
        const double mean = total / static_cast<double>(steps_per_epoch);
        result.loss_history.push_back(mean);
        if (on_epoch) on_epoch(epoch, mean);
        if (epoch > cfg.epochs - window) kept.emplace(epoch, snapshot());
    }
    result.selected_epoch = select_pretrain_checkpoint(result.loss_history, cfg.window_fraction);
    result.checkpoint = std::move(kept.at(result.selected_epoch));
    auto& md = result.checkpoint.params.metadata;
    md["pretrain_epochs"] = std::to_string(cfg.epochs);
    md["selected_epoch"] = std::to_string(result.selected_epoch);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", result.loss_history[result.selected_epoch - 1]);
    md["selected_loss"] = buf;
    md["rng_seed"] = std::to_string(cfg.seed);
    return result;
}

}  // namespace ftlab::detail
