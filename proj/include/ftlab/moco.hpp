#pragma once

// Momentum-contrast pre-training: an online encoder with projection and prediction
// heads, a momentum encoder with a projection head, and a symmetrized in-batch
// InfoNCE objective. The momentum branch never receives gradients.

#include <cstdint>
#include <vector>

#include "ftlab/autograd.hpp"
#include "ftlab/params.hpp"
#include "ftlab/vit.hpp"
#include "ftlab/pretrain.hpp"

namespace ftlab {

inline const std::string kMocoProj = "moco_proj";
inline const std::string kMocoPred = "moco_pred";

struct MoCoConfig {
    double temperature = 0.2;
    double momentum = 0.99;
    int hidden_dim = 64;  // width of the hidden layers of both heads
    int proj_dim = 32;    // embedding dimension compared by the loss
    int pred_dim = 64;    // hidden width of the prediction head
    int proj_layers = 2;  // linear layers in the projection head
    int pred_layers = 2;  // linear layers in the prediction head
    int batch_size = 64;

    void validate() const;
};

/// Linear layers fc1..fcN with GELU between them; hidden widths `hidden`.
ArrayLayout mlp_head_layout(std::int64_t in, std::int64_t hidden, std::int64_t out, int layers);

template <typename T>
ag::Var<T> mlp_head(const Binding<T>& params, const std::string& id, int layers, const ag::Var<T>& x);

template <typename T>
struct MoCoModel {
    BasicParamSet<T> online;
    ParamGroup<T> proj;  // online projection head
    ParamGroup<T> pred;  // prediction head (online only)
    BasicParamSet<T> momentum;
    ParamGroup<T> momentum_proj;
};

/// Online and momentum branches start identical.
template <typename T>
MoCoModel<T> init_moco(const ViTConfig& vit, const MoCoConfig& config, std::uint64_t seed);

/// Query/positive/negative embeddings, every row unit-norm.
template <typename T>
struct ContrastiveBatch {
    Tensor<T> q;      // [B, d]
    Tensor<T> k_pos;  // [B, d]
    Tensor<T> k_neg;  // [N, d]

    void validate() const;
};

/// Mean over queries of -log(exp(q.k+/tau) / (exp(q.k+/tau) + sum_i exp(q.k_i/tau))).
template <typename T>
double infonce_loss(const ContrastiveBatch<T>& batch, double tau);

/// g <- m g + (1 - m) f for every array. Throws InputError on structure mismatch.
template <typename T>
void momentum_update(ParamGroup<T>& g, const ParamGroup<T>& f, double m);
template <typename T>
void momentum_update(BasicParamSet<T>& g, const BasicParamSet<T>& f, double m);

template <typename T>
struct MoCoForward {
    ag::Var<T> loss;
    ag::Var<T> q1, q2;  // online predictions, unit-norm
    Tensor<T> k1, k2;   // momentum projections, unit-norm
};

/// Symmetrized loss 0.5 [l(q1, k2) + l(q2, k1)] where the negatives of each query are the
/// other keys of the same key view. `online` binds the online backbone and both heads;
/// `momentum` binds the momentum backbone and projection head (as constants).
template <typename T>
MoCoForward<T> moco_forward(const Binding<T>& online, const Binding<T>& momentum, const ViTConfig& vit,
                            const MoCoConfig& config, const Tensor<T>& view1, const Tensor<T>& view2);

/// One optimization step on two views: backpropagates through the online branch only,
/// applies AdamW with learning rate `lr`, then the momentum update. Returns the loss.
template <typename T>
double moco_pretrain_step(MoCoModel<T>& model, AdamW<T>& optimizer, const Tensor<T>& view1, const Tensor<T>& view2,
                          const MoCoConfig& config, double lr);

/// Full pre-training run over `data` (labels ignored). The returned checkpoint holds the
/// online backbone of the selected epoch plus its heads as extras.
PretrainResult moco_pretrain(const Dataset& data, const ViTConfig& vit, const MoCoConfig& config,
                             const PretrainConfig& train, const EpochCallback& on_epoch = nullptr);

}  // namespace ftlab
