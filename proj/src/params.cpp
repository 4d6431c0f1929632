#include "ftlab/params.hpp"

#include <cstring>

namespace ftlab {

std::string to_string(Pooling p) { return p == Pooling::class_token ? "class_token" : "mean_patch"; }

Pooling pooling_from_string(const std::string& s) {
    if (s == "class_token") return Pooling::class_token;
    if (s == "mean_patch") return Pooling::mean_patch;
    throw ConfigError("unknown pooling mode '" + s + "' (expected class_token or mean_patch)");
}

void ViTConfig::validate() const {
    if (patch_size <= 0 || image_size <= 0) throw ConfigError("image_size and patch_size must be positive");
    if (image_size % patch_size != 0) throw ConfigError("image_size mod patch_size must be 0");
    if (depth < 1) throw ConfigError("depth must be >= 1");
    if (embed_dim <= 0 || num_heads <= 0) throw ConfigError("embed_dim and num_heads must be positive");
    if (embed_dim % num_heads != 0) throw ConfigError("embed_dim mod num_heads must be 0");
    if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
    if (!(mlp_ratio > 0.0)) throw ConfigError("mlp_ratio must be positive");
    if (pooling == Pooling::class_token && !use_class_token)
        throw ConfigError("class_token pooling requires use_class_token");
}

int ViTConfig::mlp_hidden() const {
    const int h = static_cast<int>(embed_dim * mlp_ratio + 0.5);
    return h < 1 ? 1 : h;
}

template <typename T>
Tensor<T>& ParamGroup<T>::at(const std::string& name) {
    for (auto& a : arrays)
        if (a.name == name) return a.value;
    throw InputError("group '" + id + "' has no array '" + name + "'");
}

template <typename T>
const Tensor<T>& ParamGroup<T>::at(const std::string& name) const {
    return const_cast<ParamGroup*>(this)->at(name);
}

template <typename T>
bool ParamGroup<T>::contains(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return true;
    return false;
}

template <typename T>
std::int64_t ParamGroup<T>::numel() const {
    std::int64_t n = 0;
    for (const auto& a : arrays) n += a.value.numel();
    return n;
}

template <typename T>
bool BasicParamSet<T>::has_group(const std::string& id) const {
    for (const auto& g : groups)
        if (g.id == id) return true;
    return false;
}

template <typename T>
ParamGroup<T>& BasicParamSet<T>::group(const std::string& id) {
    for (auto& g : groups)
        if (g.id == id) return g;
    throw InputError("parameter set has no group '" + id + "'");
}

template <typename T>
const ParamGroup<T>& BasicParamSet<T>::group(const std::string& id) const {
    return const_cast<BasicParamSet*>(this)->group(id);
}

template <typename T>
std::int64_t BasicParamSet<T>::numel() const {
    std::int64_t n = 0;
    for (const auto& g : groups) n += g.numel();
    return n;
}

template <typename T>
std::vector<std::string> BasicParamSet<T>::group_ids() const {
    std::vector<std::string> ids;
    for (const auto& g : groups) ids.push_back(g.id);
    return ids;
}

template <typename T>
bool bit_identical(const ParamGroup<T>& a, const ParamGroup<T>& b) {
    if (a.id != b.id || a.arrays.size() != b.arrays.size()) return false;
    for (std::size_t i = 0; i < a.arrays.size(); ++i) {
        const auto& x = a.arrays[i];
        const auto& y = b.arrays[i];
        if (x.name != y.name || x.value.shape() != y.value.shape()) return false;
        if (std::memcmp(x.value.data(), y.value.data(), sizeof(T) * static_cast<std::size_t>(x.value.numel())) != 0)
            return false;
    }
    return true;
}

template <typename T>
bool bit_identical(const BasicParamSet<T>& a, const BasicParamSet<T>& b) {
    if (!(a.config == b.config) || a.groups.size() != b.groups.size()) return false;
    for (std::size_t i = 0; i < a.groups.size(); ++i)
        if (!bit_identical(a.groups[i], b.groups[i])) return false;
    return true;
}

template <typename T>
void Binding<T>::bind(const ParamGroup<T>& group, bool trainable) {
    for (const auto& a : group.arrays) vars_[{group.id, a.name}] = ag::Var<T>::alias(a.value, trainable);
}

template <typename T>
void Binding<T>::bind_all(const BasicParamSet<T>& ps, const std::function<bool(const std::string&)>& trainable) {
    for (const auto& g : ps.groups) bind(g, trainable ? trainable(g.id) : false);
}

template <typename T>
const ag::Var<T>& Binding<T>::get(const std::string& group, const std::string& name) const {
    auto it = vars_.find({group, name});
    if (it == vars_.end()) throw InputError("unbound parameter " + group + "/" + name);
    return it->second;
}

template <typename T>
bool Binding<T>::contains(const std::string& group, const std::string& name) const {
    return vars_.count({group, name}) != 0;
}

template <typename T>
const Tensor<T>* Binding<T>::grad(const std::string& group, const std::string& name) const {
    return get(group, name).grad();
}

template struct ParamGroup<float>;
template struct ParamGroup<double>;
template struct BasicParamSet<float>;
template struct BasicParamSet<double>;
template class Binding<float>;
template class Binding<double>;
template bool bit_identical(const ParamGroup<float>&, const ParamGroup<float>&);
template bool bit_identical(const ParamGroup<double>&, const ParamGroup<double>&);
template bool bit_identical(const BasicParamSet<float>&, const BasicParamSet<float>&);
template bool bit_identical(const BasicParamSet<double>&, const BasicParamSet<double>&);

}  // namespace ftlab
