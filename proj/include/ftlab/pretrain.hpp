#pragma once

// Settings and results shared by the self-supervised pre-training loops.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ftlab/checkpoint.hpp"
#include "ftlab/data.hpp"
#include "ftlab/optim.hpp"

namespace ftlab {

struct PretrainConfig {
    int epochs = 100;
    int batch_size = 64;
    double learning_rate = 1.5e-3;
    double min_learning_rate = 0.0;
    int warmup_epochs = 5;
    double weight_decay = 0.05;
    double window_fraction = 0.05;
    AugmentationPolicy augmentation;
    std::uint64_t seed = 0;

    void validate() const;
};

struct PretrainResult {
    std::vector<double> loss_history;  // mean training loss per epoch
    int selected_epoch = 0;            // 1-based, chosen by select_pretrain_checkpoint
    Checkpoint checkpoint;
};

/// Called after every epoch with the 1-based epoch number and its mean loss.
using EpochCallback = std::function<void(int epoch, double loss)>;

/// Records normalization statistics in checkpoint metadata and reads them back.
void store_stats(std::map<std::string, std::string>& metadata, const NormalizationStats& stats);
std::optional<NormalizationStats> stored_stats(const std::map<std::string, std::string>& metadata);

}  // namespace ftlab
