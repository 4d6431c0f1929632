#pragma once

// AdamW with decoupled weight decay, a warmup-cosine learning-rate schedule, and
// the pre-training checkpoint selection rule.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ftlab/params.hpp"

namespace ftlab {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

/// Linear warmup from 0 to base_lr over `warmup_steps`, then cosine decay to min_lr at total_steps.
struct CosineSchedule {
    double base_lr = 1e-3;
    std::int64_t warmup_steps = 0;
    std::int64_t total_steps = 1;
    double min_lr = 0.0;

    double at(std::int64_t step) const;
};

/// Keeps moment estimates only for arrays it has been asked to update, so frozen groups
/// never acquire optimizer state. Weight decay applies to matrices and kernels only.
template <typename T>
class AdamW {
public:
    explicit AdamW(AdamWConfig config = {}) : config_(config) {}

    /// Starts a new optimization step; must precede the update() calls of that step.
    void begin_step() { ++t_; }

    /// Updates every array of `group` from the gradients recorded in `binding`.
    /// Arrays without a gradient only receive weight decay.
    void update(ParamGroup<T>& group, const Binding<T>& binding, double lr);

    std::int64_t steps() const { return t_; }
    bool has_state(const std::string& group_id) const;
    std::size_t state_arrays() const { return m_.size(); }

private:
    AdamWConfig config_;
    std::int64_t t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

/// 1-based epoch with the lowest loss among the final ceil(window_fraction * E) epochs;
/// ties go to the latest epoch. Throws InputError for an empty history.
int select_pretrain_checkpoint(const std::vector<double>& loss_history, double window_fraction = 0.05);

/// Number of trailing epochs considered by select_pretrain_checkpoint.
int selection_window(int epochs, double window_fraction = 0.05);

}  // namespace ftlab
