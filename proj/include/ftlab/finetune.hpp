#pragma once

// Supervised fine-tuning: policies compiled into per-group trainable masks, task
// heads (linear classifier, UNETR-style segmentation decoder), the training loop
// with early stopping, and the run record it produces.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftlab/data.hpp"
#include "ftlab/optim.hpp"
#include "ftlab/params.hpp"
#include "ftlab/vit.hpp"

namespace ftlab {

struct FinetunePolicy {
    enum class Kind { surgical, shallow, end_to_end };

    Kind kind = Kind::end_to_end;
    LayerRange range;  // surgical
    int depth = 0;     // shallow

    static FinetunePolicy surgical(int lo, int hi) { return {Kind::surgical, {lo, hi}, 0}; }
    static FinetunePolicy shallow(int n) { return {Kind::shallow, {}, n}; }
    static FinetunePolicy end_to_end() { return {}; }

    /// Throws InputError when the policy does not fit a network of depth L.
    void validate(int L) const;
    /// Depth of the network that is actually trained.
    int effective_depth(int L) const { return kind == Kind::shallow ? depth : L; }

    /// "e2e", "shallow:9", "surgical:4-6".
    std::string label() const;
    static FinetunePolicy parse(const std::string& s);

    friend bool operator==(const FinetunePolicy&, const FinetunePolicy&) = default;
};

/// Group id -> trainable.
using TrainableMask = std::map<std::string, bool>;

/// Mask over the groups of the model the policy trains (the truncated one for Shallow),
/// with a trailing head group.
TrainableMask build_trainable_mask(const FinetunePolicy& policy, int L);

/// Throws InputError unless the mask names every group of `model` exactly once.
template <typename T>
void check_mask(const BasicParamSet<T>& model, const TrainableMask& mask);

template <typename T>
std::int64_t trainable_param_count(const BasicParamSet<T>& model, const TrainableMask& mask);

struct TaskSpec {
    enum class Kind { classification, segmentation };

    Kind kind = Kind::classification;
    int num_classes = 1;
    int seg_channels = 16;  // decoder width

    static TaskSpec classification(int classes) { return {Kind::classification, classes, 16}; }
    static TaskSpec segmentation(int channels = 16) { return {Kind::segmentation, 1, channels}; }

    void validate() const;
    void store(std::map<std::string, std::string>& metadata) const;
    /// Throws InputError when the metadata describes no task head.
    static TaskSpec from_metadata(const std::map<std::string, std::string>& metadata);
};

/// Encoder depths read by the segmentation decoder: {L/4, L/2, 3L/4, L}.
std::set<int> segmentation_taps(int L);

ArrayLayout head_layout(const ViTConfig& config, const TaskSpec& task);

/// Copy of `encoder` (any previous head dropped) with a freshly initialized head group.
/// Segmentation needs depth >= 4 and a power-of-two patch size (ConfigError otherwise).
template <typename T>
BasicParamSet<T> attach_head(const BasicParamSet<T>& encoder, const TaskSpec& task, std::uint64_t seed);

/// Truncates for Shallow policies, then attaches the head.
template <typename T>
BasicParamSet<T> prepare_model(const BasicParamSet<T>& encoder, const FinetunePolicy& policy, const TaskSpec& task,
                               std::uint64_t seed);

/// Logits: [B, classes] for classification, [B, 1, H, W] for segmentation.
template <typename T>
ag::Var<T> model_forward(const Binding<T>& params, const ViTConfig& config, const TaskSpec& task,
                         const Tensor<T>& images);

template <typename T>
Tensor<T> predict(const BasicParamSet<T>& model, const Tensor<T>& images);

enum class NormalizationSource { finetune_dataset, pretrain_dataset };
std::string to_string(NormalizationSource s);
NormalizationSource normalization_source_from_string(const std::string& s);

struct FinetuneConfig {
    double learning_rate = 1e-3;
    double min_learning_rate = 0.0;
    double weight_decay = 0.05;
    int batch_size = 32;
    int max_epochs = 50;
    int warmup_epochs = 2;
    int early_stop_patience = 10;
    std::uint64_t seed = 0;
    NormalizationSource normalization_source = NormalizationSource::finetune_dataset;
    std::optional<Pooling> pooling;  // overrides the model's pooling when set
    std::optional<AugmentationPolicy> augmentation = AugmentationPolicy{64, 0.5, 0.0, 1.0};
    int eval_batch_size = 128;

    void validate() const;
    nlohmann::json to_json() const;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_metric = 0.0;
    friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct RunRecord {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    double best_metric = 0.0;
    double test_metric = 0.0;
    int convergence_epoch = 0;
    std::int64_t trainable_param_count = 0;
    std::string fingerprint;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> tags;

    nlohmann::json to_json() const;
    static RunRecord from_json(const nlohmann::json& j);
    friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

/// Patience rule: a run stops once `patience` epochs pass without a strict improvement.
class EarlyStopping {
public:
    explicit EarlyStopping(int patience) : patience_(patience) {}
    /// Records the metric of `epoch` (1-based); returns true when training should stop.
    bool update(int epoch, double metric) {
        if (best_epoch_ == 0 || metric > best_) best_ = metric, best_epoch_ = epoch;
        return epoch - best_epoch_ >= patience_;
    }
    int best_epoch() const { return best_epoch_; }
    double best() const { return best_; }

private:
    int patience_;
    int best_epoch_ = 0;
    double best_ = 0.0;
};

/// Best validation epoch: the earliest epoch reaching the maximum validation metric.
int convergence_epoch(const RunRecord& record);

struct FinetuneResult {
    RunRecord record;
    ParamSet best;  // parameters at best_epoch
    ParamSet last;  // parameters after the final epoch
};

/// Mean AUC (classification) or mean per-image Dice at threshold 0.5 (segmentation).
double evaluate_model(const ParamSet& model, const Dataset& data, const NormalizationStats& stats,
                      int batch_size = 128);

/// Trains the groups marked trainable (frozen groups are never touched, nor given
/// optimizer state) with AdamW under a warmup-cosine schedule. BCE on logits for
/// classification, Dice loss for segmentation. Stops after `early_stop_patience`
/// epochs without a strict improvement of the validation metric.
FinetuneResult finetune(const ParamSet& model, const TrainableMask& mask, const Dataset& train, const Dataset& val,
                        const Dataset& test, const FinetuneConfig& config);

}  // namespace ftlab
