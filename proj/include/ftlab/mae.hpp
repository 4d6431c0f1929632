#pragma once

// Masked-autoencoder pre-training: uniform random patch masking, visible-only encoding,
// a lightweight transformer decoder fed with mask tokens, and a reconstruction loss
// computed on masked patches only.

#include <cstdint>
#include <vector>

#include "ftlab/autograd.hpp"
#include "ftlab/params.hpp"
#include "ftlab/pretrain.hpp"
#include "ftlab/vit.hpp"

namespace ftlab {

inline const std::string kMaeDecoderEmbed = "mae_decoder_embed";
inline const std::string kMaeDecoderNorm = "mae_decoder_norm";
inline const std::string kMaeDecoderPred = "mae_decoder_pred";
inline std::string mae_decoder_block_id(int i) { return "mae_decoder_block_" + std::to_string(i); }

struct MAEConfig {
    double mask_ratio = 0.75;
    int decoder_depth = 1;
    int decoder_dim = 32;
    int decoder_heads = 4;
    double decoder_mlp_ratio = 2.0;

    /// Masked count for `patches` patches; throws ConfigError unless 1 <= count <= patches - 1.
    std::int64_t masked_count(std::int64_t patches) const;
    void validate(std::int64_t patches) const;
};

struct MaskSpec {
    std::int64_t patches = 0;
    std::vector<std::uint8_t> mask;                     // [B * P], 1 = masked
    std::vector<std::vector<std::int64_t>> permutation;  // per sample; the first masked_count are masked

    std::int64_t batch() const { return static_cast<std::int64_t>(permutation.size()); }
    /// Visible patch indices per sample in ascending order.
    std::vector<std::vector<std::int64_t>> visible() const;
};

/// Independent uniform masks with exactly round(ratio * P) masked patches per sample.
MaskSpec sample_mask(std::int64_t patches, double mask_ratio, Rng& rng, std::int64_t batch);

template <typename T>
using GroupList = std::vector<ParamGroup<T>>;

template <typename T>
GroupList<T> init_mae_decoder(const ViTConfig& vit, const MAEConfig& config, std::uint64_t seed);

/// Post-norm encoder output over the class token (if any) and the visible patches.
template <typename T>
ag::Var<T> encode_visible(const Binding<T>& encoder, const ViTConfig& vit, const Tensor<T>& images,
                          const MaskSpec& mask);

/// Reassembles the full sequence with the mask token at masked positions and predicts
/// per-patch pixels [B, P, C * p * p].
template <typename T>
ag::Var<T> decode_with_mask_tokens(const Binding<T>& decoder, const ViTConfig& vit, const MAEConfig& config,
                                   const ag::Var<T>& visible_embeddings, const MaskSpec& mask);

/// Masked-patch mean squared error against the patchified images.
template <typename T>
ag::Var<T> mae_loss(const ag::Var<T>& pred, const Tensor<T>& images, const MaskSpec& mask, int patch_size);
template <typename T>
double mae_loss(const Tensor<T>& pred, const Tensor<T>& images, const MaskSpec& mask, int patch_size);

template <typename T>
struct MAEModel {
    BasicParamSet<T> encoder;
    GroupList<T> decoder;
};

template <typename T>
MAEModel<T> init_mae(const ViTConfig& vit, const MAEConfig& config, std::uint64_t seed);

/// Full graph: encode visible patches, decode, masked loss.
template <typename T>
ag::Var<T> mae_forward(const Binding<T>& params, const ViTConfig& vit, const MAEConfig& config,
                       const Tensor<T>& images, const MaskSpec& mask);

template <typename T>
double mae_pretrain_step(MAEModel<T>& model, AdamW<T>& optimizer, const Tensor<T>& images, const MaskSpec& mask,
                         const MAEConfig& config, double lr);

/// The returned checkpoint holds the encoder of the selected epoch; the decoder is kept as extras.
PretrainResult mae_pretrain(const Dataset& data, const ViTConfig& vit, const MAEConfig& config,
                            const PretrainConfig& train, const EpochCallback& on_epoch = nullptr);

}  // namespace ftlab
