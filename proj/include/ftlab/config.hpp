#pragma once

// Experiment configuration files.
//
// INI syntax with one section per module config type:
//
//   [model]     image_size patch_size depth embed_dim num_heads mlp_ratio in_channels
//               use_class_token pooling
//   [data]      dir n_train n_val n_test class_prob noise seed
//   [pretrain]  epochs batch_size learning_rate min_learning_rate warmup_epochs weight_decay
//               window_fraction hflip_prob rotation_range crop_scale_min
//   [moco]      temperature momentum hidden_dim proj_dim pred_dim proj_layers pred_layers batch_size
//   [mae]       mask_ratio decoder_depth decoder_dim decoder_heads decoder_mlp_ratio
//   [finetune]  task seg_channels learning_rate min_learning_rate weight_decay batch_size max_epochs
//               warmup_epochs patience normalization_source pooling augment hflip_prob
//               rotation_range crop_scale_min eval_batch_size
//   [fusion]    preset truncate_moco
//   [sweep]     methods policies sizes seeds mae_checkpoint moco_checkpoint store parallelism
//
// Lists are comma-separated. Unknown sections or keys are errors. Omitted keys keep
// their defaults; augmentation crop sizes always follow model.image_size.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftlab/data.hpp"
#include "ftlab/finetune.hpp"
#include "ftlab/mae.hpp"
#include "ftlab/moco.hpp"
#include "ftlab/pretrain.hpp"

namespace ftlab {

struct SweepGrid {
    std::vector<std::string> methods{"moco", "mae"};  // "random" is accepted as a baseline
    std::vector<std::string> policies{"e2e"};         // policy labels or fusion preset names
    std::vector<std::int64_t> sizes{100};
    std::vector<std::uint64_t> seeds{0, 1, 2};

    /// Throws ConfigError for empty axes, repeated seeds, unknown methods or policies.
    void validate() const;
};

struct ExperimentConfig {
    ViTConfig model;
    std::filesystem::path data_dir;  // empty: generate the synthetic data in memory
    SyntheticConfig synthetic;
    PretrainConfig pretrain;
    MoCoConfig moco;
    MAEConfig mae;
    TaskSpec task;
    FinetuneConfig finetune;
    std::string fusion_preset = "e2e12+12";
    bool fusion_truncate_moco = false;
    SweepGrid grid;
    std::filesystem::path mae_checkpoint, moco_checkpoint;
    std::filesystem::path store = "results.jsonl";
    int parallelism = 1;

    /// Every field in a stable order; the basis of run fingerprints.
    nlohmann::json to_json() const;
    void validate() const;
};

/// Throws ConfigError naming the section and key for unknown keys or unparsable values.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

bool is_fusion_preset(const std::string& name);

}  // namespace ftlab
