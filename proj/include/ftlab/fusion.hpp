#pragma once

// Two-branch fusion: a restorative and a contrastive encoder, each truncated and
// masked by its own fine-tuning policy, feeding one linear classifier over the
// concatenation of their pooled features.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "ftlab/checkpoint.hpp"
#include "ftlab/finetune.hpp"

namespace ftlab {

struct BranchSpec {
    std::filesystem::path checkpoint;  // used by the path-based build_fusion overload
    std::optional<int> truncate_to;
    FinetunePolicy policy;

    /// Depth after truncation; Shallow(N) implies N.
    int effective_depth(int L) const;
    /// Throws InputError when truncation and policy disagree or do not fit depth L.
    void validate(int L) const;
};

struct FusionBranch {
    ParamSet encoder;     // truncated, no head
    TrainableMask mask;   // over encoder groups only
    std::string checksum; // SHA-256 of the source checkpoint, or of the parameters
};

struct FusionModel {
    FusionBranch a, b;
    ParamGroup<float> head;  // weight [dim_a + dim_b, classes], bias [classes]
    int num_classes = 0;

    std::int64_t trainable_param_count() const;
};

/// Named presets. Branch a is the restorative (MAE) encoder, branch b the contrastive one.
///   "e2e12+12"             both end-to-end at full depth
///   "shallow9+9"           Shallow(9) on both
///   "surgical_mae9_moco6"  MAE truncated to 9 with 7-9 tuned; MoCo with 4-6 tuned, kept at
///                          full depth unless `truncate_moco` (then truncated to 6)
/// Presets require depth-12 encoders.
std::pair<BranchSpec, BranchSpec> fusion_preset(const std::string& name, bool truncate_moco = false);

/// ConfigError when the encoders disagree on image size, patch size or channels.
FusionModel build_fusion(const ParamSet& encoder_a, const BranchSpec& spec_a, const ParamSet& encoder_b,
                         const BranchSpec& spec_b, int num_classes, std::uint64_t seed);
FusionModel build_fusion(const BranchSpec& spec_a, const BranchSpec& spec_b, int num_classes, std::uint64_t seed);

/// logits = pool_a W_a + pool_b W_b + bias, with W_a, W_b the row blocks of the head weight.
ag::Var<float> fusion_logits(const Binding<float>& a, const Binding<float>& b, const Binding<float>& head,
                             const FusionModel& model, const Tensor<float>& images);
Tensor<float> fusion_forward(const FusionModel& model, const Tensor<float>& images);

struct FusionResult {
    RunRecord record;  // tags carry both branch checksums
    FusionModel best;
};

FusionResult finetune_fusion(const FusionModel& model, const Dataset& train, const Dataset& val, const Dataset& test,
                             const FinetuneConfig& config);

}  // namespace ftlab
