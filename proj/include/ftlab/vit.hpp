#pragma once

// Vision-transformer encoder with explicit per-layer parameter groups.
//
// Group layout for depth L:
//   embedding   patch_proj.weight [patch_dim, D], patch_proj.bias [D],
//               cls_token [D] (when enabled), pos_embed [tokens, D]
//   block_i     norm1.{weight,bias}, attn.qkv.{weight,bias}, attn.proj.{weight,bias},
//               norm2.{weight,bias}, mlp.fc1.{weight,bias}, mlp.fc2.{weight,bias}
//   final_norm  weight, bias
// Blocks are pre-norm with GELU MLPs and full softmax attention.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ftlab/params.hpp"
#include "ftlab/rng.hpp"

namespace ftlab {

/// Inclusive, 1-indexed range of transformer blocks.
struct LayerRange {
    int lo = 1;
    int hi = 1;
    void validate(int depth) const;
    int size() const { return hi - lo + 1; }
    friend bool operator==(const LayerRange&, const LayerRange&) = default;
};

using ArrayLayout = std::vector<std::pair<std::string, Shape>>;

/// Shapes every backbone group must have for `config`, in canonical order.
std::vector<std::pair<std::string, ArrayLayout>> backbone_layout(const ViTConfig& config);

/// Throws InputError describing the first array whose shape disagrees with the config.
template <typename T>
void audit_shapes(const BasicParamSet<T>& params);

/// Arrays of one pre-norm transformer block (shared by the encoder and SSL decoders).
ArrayLayout transformer_block_layout(std::int64_t dim, std::int64_t hidden);

/// Initializes arrays by name and rank: Xavier-uniform matrices and conv kernels, N(0, 0.02)
/// tokens and positional tables, ones for norm weights, zeros otherwise.
template <typename T>
ParamGroup<T> init_group(const std::string& id, const ArrayLayout& layout, Rng& rng);

/// x + attn(norm1(x)), then + mlp(norm2(.)), with arrays from group `id`.
template <typename T>
ag::Var<T> transformer_block(const Binding<T>& params, const std::string& id, int heads, const ag::Var<T>& x);

template <typename T>
BasicParamSet<T> init_vit(const ViTConfig& config, std::uint64_t seed);

/// [B, C, H, W] -> [B, P, C*p*p], patches in row-major grid order, pixels (c, y, x) within a patch.
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, int patch_size);

struct EncodeOptions {
    /// Number of blocks to run; 0 means all.
    int upto_layer = 0;
    /// Block indices whose (pre-norm) outputs are recorded.
    std::set<int> taps;
    /// Per-sample patch indices to keep; empty means every patch.
    std::vector<std::vector<std::int64_t>> visible;
};

template <typename T>
struct Encoded {
    ag::Var<T> pre_norm;  // output of the last block that ran
    ag::Var<T> output;    // pre_norm passed through final_norm
    std::map<int, ag::Var<T>> taps;
};

/// Graph-building encoder. `images` is [B, C, H, W].
template <typename T>
Encoded<T> encode(const Binding<T>& params, const ViTConfig& config, const Tensor<T>& images,
                  const EncodeOptions& options = {});

template <typename T>
ag::Var<T> apply_final_norm(const Binding<T>& params, const ag::Var<T>& x);

/// Post-norm tokens [B, tokens, D] after blocks 1..upto_layer (default: all).
template <typename T>
Tensor<T> forward_features(const BasicParamSet<T>& params, const Tensor<T>& images,
                           std::optional<int> upto_layer = std::nullopt);

/// Block outputs for each requested depth from a single pass. With `post_norm`, each
/// entry is passed through final_norm.
template <typename T>
std::map<int, Tensor<T>> extract_intermediate(const BasicParamSet<T>& params, const Tensor<T>& images,
                                              const std::set<int>& layers, bool post_norm = false);

/// First `n` blocks plus embedding and the source's final norm. Any head is dropped.
template <typename T>
BasicParamSet<T> truncate(const BasicParamSet<T>& params, int n);

/// [B, tokens, D] -> [B, D].
template <typename T>
ag::Var<T> pool(const ag::Var<T>& tokens, Pooling mode, bool has_class_token);
template <typename T>
Tensor<T> pool(const Tensor<T>& tokens, Pooling mode, bool has_class_token);

}  // namespace ftlab
