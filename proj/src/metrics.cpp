#include "ftlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ftlab {

void PredictionSet::validate() const {
    const auto cells = static_cast<std::size_t>(n * classes);
    if (scores.size() != cells || labels.size() != cells)
        throw InputError("prediction set: scores/labels do not match [" + std::to_string(n) + ", " +
                         std::to_string(classes) + "]");
    for (auto l : labels)
        if (l > 1) throw InputError("prediction set: labels must be 0 or 1");
}

std::optional<double> roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) throw InputError("roc_auc: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Mann-Whitney U with midranks for ties.
    double pos_rank_sum = 0.0;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
        for (std::size_t t = i; t < j; ++t)
            if (labels[order[t]]) {
                pos_rank_sum += midrank;
                ++pos;
            }
        i = j;
    }
    const std::size_t neg = n - pos;
    if (pos == 0 || neg == 0) return std::nullopt;
    const double u = pos_rank_sum - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1);
    return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

std::vector<std::optional<double>> roc_auc_per_class(const PredictionSet& pred) {
    pred.validate();
    std::vector<std::optional<double>> out;
    std::vector<double> s(static_cast<std::size_t>(pred.n));
    std::vector<std::uint8_t> l(static_cast<std::size_t>(pred.n));
    for (std::int64_t c = 0; c < pred.classes; ++c) {
        for (std::int64_t i = 0; i < pred.n; ++i) {
            s[i] = pred.scores[i * pred.classes + c];
            l[i] = pred.labels[i * pred.classes + c];
        }
        out.push_back(roc_auc(s, l));
    }
    return out;
}

double mean_auc(const PredictionSet& pred) {
    double total = 0.0;
    int defined = 0;
    for (const auto& a : roc_auc_per_class(pred))
        if (a) {
            total += *a;
            ++defined;
        }
    if (defined == 0) throw EvaluationError("mean AUC undefined: no class has both positives and negatives");
    return total / defined;
}

double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
    if (a.size() != b.size()) throw InputError("dice: mask sizes differ");
    std::int64_t inter = 0, sa = 0, sb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a[i] != 0, y = b[i] != 0;
        inter += x && y;
        sa += x;
        sb += y;
    }
    if (sa + sb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

NeighborReport nn_analysis(const Tensor<double>& train, const std::vector<std::uint8_t>& train_labels,
                           const Tensor<double>& test, const std::vector<std::uint8_t>& test_labels,
                           std::int64_t classes, std::int64_t k) {
    if (train.rank() != 2 || test.rank() != 2 || train.dim(1) != test.dim(1))
        throw InputError("nn_analysis: feature dimensions differ");
    const std::int64_t nt = train.dim(0), nq = test.dim(0), d = train.dim(1);
    if (k < 1 || k > nt) throw InputError("nn_analysis: k=" + std::to_string(k) + " exceeds reference set size " + std::to_string(nt));
    if (static_cast<std::int64_t>(train_labels.size()) != nt * classes ||
        static_cast<std::int64_t>(test_labels.size()) != nq * classes)
        throw InputError("nn_analysis: label arrays do not match feature rows");

    NeighborReport rep;
    rep.k = k;
    PredictionSet pred{nq, classes, std::vector<double>(static_cast<std::size_t>(nq * classes)), test_labels};
    std::vector<std::pair<double, std::int64_t>> dist(static_cast<std::size_t>(nt));
    for (std::int64_t q = 0; q < nq; ++q) {
        for (std::int64_t i = 0; i < nt; ++i) {
            double s = 0.0;
            for (std::int64_t c = 0; c < d; ++c) {
                const double e = test[q * d + c] - train[i * d + c];
                s += e * e;
            }
            dist[i] = {s, i};
        }
        std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
        std::vector<std::int64_t> idx;
        std::vector<double> dd;
        for (std::int64_t j = 0; j < k; ++j) {
            idx.push_back(dist[j].second);
            dd.push_back(std::sqrt(dist[j].first));
        }
        for (std::int64_t c = 0; c < classes; ++c) pred.scores[q * classes + c] = train_labels[idx[0] * classes + c];
        rep.indices.push_back(std::move(idx));
        rep.distances.push_back(std::move(dd));
    }
    try {
        rep.nn_label_mauc = mean_auc(pred);
    } catch (const EvaluationError&) {
        rep.nn_label_mauc.reset();
    }
    return rep;
}

}  // namespace ftlab
