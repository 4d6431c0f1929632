#pragma once

// Parameter containers shared by every module: the ViT configuration, named
// parameter groups, and the binding of a ParamSet into an autograd graph.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ftlab/autograd.hpp"
#include "ftlab/tensor.hpp"

namespace ftlab {

enum class Pooling { class_token, mean_patch };

std::string to_string(Pooling p);
Pooling pooling_from_string(const std::string& s);

struct ViTConfig {
    int image_size = 64;
    int patch_size = 16;
    int depth = 4;
    int embed_dim = 32;
    int num_heads = 4;
    double mlp_ratio = 2.0;
    int in_channels = 1;
    bool use_class_token = true;
    Pooling pooling = Pooling::class_token;

    /// Throws ConfigError naming the first violated constraint.
    void validate() const;

    int grid() const { return image_size / patch_size; }
    int num_patches() const { return grid() * grid(); }
    int num_tokens() const { return num_patches() + (use_class_token ? 1 : 0); }
    int patch_dim() const { return patch_size * patch_size * in_channels; }
    int mlp_hidden() const;

    friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

/// Canonical group ids.
inline const std::string kEmbedding = "embedding";
inline const std::string kFinalNorm = "final_norm";
inline const std::string kHead = "head";
inline std::string block_id(int layer) { return "block_" + std::to_string(layer); }

template <typename T>
struct NamedArray {
    std::string name;
    Tensor<T> value;
};

template <typename T>
struct ParamGroup {
    std::string id;
    std::vector<NamedArray<T>> arrays;

    Tensor<T>& at(const std::string& name);
    const Tensor<T>& at(const std::string& name) const;
    bool contains(const std::string& name) const;
    std::int64_t numel() const;
};

template <typename T>
struct BasicParamSet {
    ViTConfig config;
    /// Canonical order: embedding, block_1..block_L, final_norm, [head].
    std::vector<ParamGroup<T>> groups;
    std::map<std::string, std::string> metadata;

    bool has_group(const std::string& id) const;
    ParamGroup<T>& group(const std::string& id);
    const ParamGroup<T>& group(const std::string& id) const;
    std::int64_t numel() const;
    std::vector<std::string> group_ids() const;
};

using ParamSet = BasicParamSet<float>;
using ParamSet64 = BasicParamSet<double>;

template <typename U, typename T>
BasicParamSet<U> cast_params(const BasicParamSet<T>& src) {
    BasicParamSet<U> out;
    out.config = src.config;
    out.metadata = src.metadata;
    for (const auto& g : src.groups) {
        ParamGroup<U> ng{g.id, {}};
        for (const auto& a : g.arrays) ng.arrays.push_back({a.name, a.value.template cast<U>()});
        out.groups.push_back(std::move(ng));
    }
    return out;
}

template <typename U, typename T>
ParamGroup<U> cast_group(const ParamGroup<T>& g) {
    ParamGroup<U> ng{g.id, {}};
    for (const auto& a : g.arrays) ng.arrays.push_back({a.name, a.value.template cast<U>()});
    return ng;
}

/// True when both hold the same group/array layout and bit-identical values.
template <typename T>
bool bit_identical(const ParamGroup<T>& a, const ParamGroup<T>& b);
template <typename T>
bool bit_identical(const BasicParamSet<T>& a, const BasicParamSet<T>& b);

/// Exposes the arrays of one or more parameter groups as autograd leaves that alias
/// the underlying storage. Groups for which `trainable` is false become constants.
template <typename T>
class Binding {
public:
    void bind(const ParamGroup<T>& group, bool trainable);
    void bind_all(const BasicParamSet<T>& ps, const std::function<bool(const std::string&)>& trainable);

    const ag::Var<T>& get(const std::string& group, const std::string& name) const;
    bool contains(const std::string& group, const std::string& name) const;
    /// Gradient of a bound array after backward(); nullptr if it received none.
    const Tensor<T>* grad(const std::string& group, const std::string& name) const;

private:
    std::map<std::pair<std::string, std::string>, ag::Var<T>> vars_;
};

}  // namespace ftlab
