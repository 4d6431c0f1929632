#pragma once

#include <functional>
#include <map>
#include <string>

#include "ftlab/finetune.hpp"

namespace ftlab::detail {

/// One optimization step on a normalized batch at learning rate `lr`; returns the loss.
using StepFn = std::function<double(const Batch&, double lr)>;
/// Validation metric of the current parameters.
using EvalFn = std::function<double(const Dataset&)>;

/// Epoch loop shared by single-model and fusion fine-tuning: shuffled minibatches (the
/// last one may be short), warmup-cosine schedule, early stopping. `keep_best` runs
/// whenever an epoch sets a new best validation metric. Fills epochs and best fields.
RunRecord run_finetuning(const Dataset& train, const Dataset& val, const NormalizationStats& stats,
                         const FinetuneConfig& cfg, const StepFn& step, const EvalFn& evaluate,
                         const std::function<void()>& keep_best);

double evaluate_with(const Dataset& d, const NormalizationStats& stats, int batch_size, const TaskSpec& task,
                     const std::function<Tensor<float>(const Tensor<float>&)>& forward);

void check_splits(const Dataset& train, const Dataset& val, const Dataset& test, const TaskSpec& task);

NormalizationStats finetune_stats(const FinetuneConfig& cfg, const Dataset& train,
                                  const std::map<std::string, std::string>& metadata);

/// SHA-256 over every group/array name and its raw bytes.
std::string params_digest(const ParamSet& m);

}  // namespace ftlab::detail
