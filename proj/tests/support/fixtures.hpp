#pragma once

#include "ftlab/params.hpp"
#include "ftlab/rng.hpp"

namespace ftlab::testkit {

/// L=2, D=8, 8x8 images with 4px patches (P=4).
inline ViTConfig tiny_config() {
    ViTConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.depth = 2;
    c.embed_dim = 8;
    c.num_heads = 2;
    c.mlp_ratio = 2.0;
    c.in_channels = 1;
    return c;
}

template <typename T>
Tensor<T> random_images(const ViTConfig& c, std::int64_t batch, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<T> t(Shape{batch, c.in_channels, c.image_size, c.image_size});
    for (auto& v : t.vec()) v = static_cast<T>(rng.uniform());
    return t;
}

/// Adds Gaussian noise to every array so norms, biases and tokens are all non-trivial.
template <typename T>
BasicParamSet<T> perturbed(BasicParamSet<T> ps, std::uint64_t seed, double scale = 0.3) {
    Rng rng(seed);
    for (auto& g : ps.groups)
        for (auto& a : g.arrays)
            for (auto& v : a.value.vec()) v += static_cast<T>(rng.normal() * scale);
    return ps;
}

template <typename T>
void perturb_group(ParamGroup<T>& g, std::uint64_t seed, double scale = 0.3) {
    Rng rng(seed);
    for (auto& a : g.arrays)
        for (auto& v : a.value.vec()) v += static_cast<T>(rng.normal() * scale);
}

}  // namespace ftlab::testkit
