#pragma once

// Evaluation metrics: per-class ROC AUC, mean AUC, Dice, and exact k-NN
// embedding analysis. All functions are pure.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "ftlab/tensor.hpp"

namespace ftlab {

struct EvaluationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Row-major [n, classes] scores with matching binary labels.
struct PredictionSet {
    std::int64_t n = 0;
    std::int64_t classes = 0;
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;

    void validate() const;
};

/// P(score of random positive > score of random negative), ties counted 1/2.
/// nullopt when the column has no positives or no negatives.
std::optional<double> roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Per-class AUCs of a prediction set (nullopt for undefined classes).
std::vector<std::optional<double>> roc_auc_per_class(const PredictionSet& pred);

/// Unweighted mean over classes with a defined AUC. Throws EvaluationError if none.
double mean_auc(const PredictionSet& pred);

/// 2|A and B| / (|A| + |B|); 1.0 when both masks are empty.
double dice(std::span<const std::uint8_t> pred_mask, std::span<const std::uint8_t> gt_mask);

struct NeighborReport {
    std::int64_t k = 0;
    /// [queries][k] indices into the reference set, nearest first.
    std::vector<std::vector<std::int64_t>> indices;
    std::vector<std::vector<double>> distances;
    /// Mean AUC of the nearest neighbor's label vector used as the prediction; empty when
    /// no class of the test labels has both positives and negatives.
    std::optional<double> nn_label_mauc;
};

/// Exact Euclidean k-NN of every test row among the train rows. Features are [n, d]
/// tensors, labels [n, classes] binary. Ties in distance resolve to the lower index.
NeighborReport nn_analysis(const Tensor<double>& train_features, const std::vector<std::uint8_t>& train_labels,
                           const Tensor<double>& test_features, const std::vector<std::uint8_t>& test_labels,
                           std::int64_t classes, std::int64_t k = 5);

}  // namespace ftlab
