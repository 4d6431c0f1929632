#include "ftlab/vit.hpp"

#include <cmath>

#include "ftlab/rng.hpp"

namespace ftlab {

void LayerRange::validate(int depth) const {
    if (lo < 1 || hi < lo || hi > depth)
        throw InputError("layer range " + std::to_string(lo) + "-" + std::to_string(hi) + " is not within [1, " +
                         std::to_string(depth) + "]");
}

std::vector<std::pair<std::string, ArrayLayout>> backbone_layout(const ViTConfig& c) {
    c.validate();
    const std::int64_t D = c.embed_dim, H = c.mlp_hidden();
    std::vector<std::pair<std::string, ArrayLayout>> out;
    ArrayLayout emb{{"patch_proj.weight", {c.patch_dim(), D}}, {"patch_proj.bias", {D}}};
    if (c.use_class_token) emb.push_back({"cls_token", {D}});
    emb.push_back({"pos_embed", {c.num_tokens(), D}});
    out.emplace_back(kEmbedding, std::move(emb));
    for (int i = 1; i <= c.depth; ++i) out.emplace_back(block_id(i), transformer_block_layout(D, H));
    out.emplace_back(kFinalNorm, ArrayLayout{{"weight", {D}}, {"bias", {D}}});
    return out;
}

template <typename T>
void audit_shapes(const BasicParamSet<T>& params) {
    const auto layout = backbone_layout(params.config);
    std::size_t expected_groups = layout.size() + (params.has_group(kHead) ? 1 : 0);
    if (params.groups.size() != expected_groups)
        throw InputError("parameter set has " + std::to_string(params.groups.size()) + " groups, expected " +
                         std::to_string(expected_groups));
    for (std::size_t gi = 0; gi < layout.size(); ++gi) {
        const auto& [id, arrays] = layout[gi];
        const auto& g = params.groups[gi];
        if (g.id != id) throw InputError("group " + std::to_string(gi) + " is '" + g.id + "', expected '" + id + "'");
        if (g.arrays.size() != arrays.size()) throw InputError("group '" + id + "' has wrong array count");
        for (std::size_t ai = 0; ai < arrays.size(); ++ai) {
            if (g.arrays[ai].name != arrays[ai].first)
                throw InputError("group '" + id + "' array '" + g.arrays[ai].name + "', expected '" +
                                 arrays[ai].first + "'");
            if (g.arrays[ai].value.shape() != arrays[ai].second)
                throw InputError(id + "/" + arrays[ai].first + " has shape " + shape_str(g.arrays[ai].value.shape()) +
                                 ", expected " + shape_str(arrays[ai].second));
        }
    }
}

namespace {

template <typename T>
Tensor<T> xavier(Rng& rng, Shape shape, std::int64_t fan_in, std::int64_t fan_out) {
    Tensor<T> t(std::move(shape));
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(-a, a));
    return t;
}

template <typename T>
Tensor<T> gaussian(Rng& rng, Shape s, double stddev) {
    Tensor<T> t(std::move(s));
    for (auto& v : t.vec()) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
}

}  // namespace

ArrayLayout transformer_block_layout(std::int64_t dim, std::int64_t hidden) {
    return {{"norm1.weight", {dim}},
            {"norm1.bias", {dim}},
            {"attn.qkv.weight", {dim, 3 * dim}},
            {"attn.qkv.bias", {3 * dim}},
            {"attn.proj.weight", {dim, dim}},
            {"attn.proj.bias", {dim}},
            {"norm2.weight", {dim}},
            {"norm2.bias", {dim}},
            {"mlp.fc1.weight", {dim, hidden}},
            {"mlp.fc1.bias", {hidden}},
            {"mlp.fc2.weight", {hidden, dim}},
            {"mlp.fc2.bias", {dim}}};
}

template <typename T>
ParamGroup<T> init_group(const std::string& id, const ArrayLayout& layout, Rng& rng) {
    ParamGroup<T> g{id, {}};
    for (const auto& [name, shape] : layout) {
        Tensor<T> value;
        if (name == "cls_token" || name == "pos_embed" || name == "mask_token") {
            value = gaussian<T>(rng, shape, 0.02);
        } else if (shape.size() == 2) {
            value = xavier<T>(rng, shape, shape[0], shape[1]);
        } else if (shape.size() == 4) {
            const std::int64_t rf = shape[2] * shape[3];
            value = xavier<T>(rng, shape, shape[1] * rf, shape[0] * rf);
        } else if (name.ends_with("weight")) {
            value = Tensor<T>(shape, T(1));
        } else {
            value = Tensor<T>(shape, T(0));
        }
        g.arrays.push_back({name, std::move(value)});
    }
    return g;
}

template <typename T>
BasicParamSet<T> init_vit(const ViTConfig& config, std::uint64_t seed) {
    BasicParamSet<T> ps;
    ps.config = config;
    Rng rng(seed);
    for (const auto& [id, arrays] : backbone_layout(config)) ps.groups.push_back(init_group<T>(id, arrays, rng));
    ps.metadata["rng_seed"] = std::to_string(seed);
    return ps;
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& images, int p) {
    if (images.rank() != 4 || images.dim(2) % p != 0 || images.dim(3) % p != 0)
        throw InputError("patchify: images " + shape_str(images.shape()) + " not divisible into " +
                         std::to_string(p) + "px patches");
    const std::int64_t B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    const std::int64_t gh = H / p, gw = W / p, P = gh * gw, pd = C * p * p;
    Tensor<T> out(Shape{B, P, pd});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t gy = 0; gy < gh; ++gy)
            for (std::int64_t gx = 0; gx < gw; ++gx) {
                T* dst = out.data() + (b * P + gy * gw + gx) * pd;
                for (std::int64_t c = 0; c < C; ++c)
                    for (std::int64_t y = 0; y < p; ++y)
                        for (std::int64_t x = 0; x < p; ++x)
                            *dst++ = images[((b * C + c) * H + gy * p + y) * W + gx * p + x];
            }
    return out;
}

template <typename T>
ag::Var<T> transformer_block(const Binding<T>& pb, const std::string& id, int heads, const ag::Var<T>& x) {
    const T eps = T(1e-6);
    auto P = [&](const char* name) -> const ag::Var<T>& { return pb.get(id, name); };
    auto h = ag::layer_norm(x, P("norm1.weight"), P("norm1.bias"), eps);
    auto qkv = ag::linear(h, P("attn.qkv.weight"), P("attn.qkv.bias"));
    auto a = ag::linear(ag::attention(qkv, heads), P("attn.proj.weight"), P("attn.proj.bias"));
    auto y = ag::add(x, a);
    h = ag::layer_norm(y, P("norm2.weight"), P("norm2.bias"), eps);
    auto m = ag::linear(ag::gelu(ag::linear(h, P("mlp.fc1.weight"), P("mlp.fc1.bias"))), P("mlp.fc2.weight"),
                        P("mlp.fc2.bias"));
    return ag::add(y, m);
}

namespace {

template <typename T>
void check_images(const ViTConfig& c, const Tensor<T>& images) {
    if (images.rank() != 4 || images.dim(1) != c.in_channels || images.dim(2) != c.image_size ||
        images.dim(3) != c.image_size)
        throw InputError("images " + shape_str(images.shape()) + " do not match config (C=" +
                         std::to_string(c.in_channels) + ", size=" + std::to_string(c.image_size) + ")");
}

}  // namespace

template <typename T>
ag::Var<T> apply_final_norm(const Binding<T>& pb, const ag::Var<T>& x) {
    return ag::layer_norm(x, pb.get(kFinalNorm, "weight"), pb.get(kFinalNorm, "bias"), T(1e-6));
}

template <typename T>
Encoded<T> encode(const Binding<T>& pb, const ViTConfig& c, const Tensor<T>& images, const EncodeOptions& opt) {
    check_images(c, images);
    const int upto = opt.upto_layer == 0 ? c.depth : opt.upto_layer;
    if (upto < 1 || upto > c.depth)
        throw InputError("upto_layer " + std::to_string(upto) + " outside [1, " + std::to_string(c.depth) + "]");
    for (int t : opt.taps)
        if (t < 1 || t > upto) throw InputError("tap depth " + std::to_string(t) + " outside [1, " + std::to_string(upto) + "]");

    const std::int64_t B = images.dim(0), P = c.num_patches(), D = c.embed_dim;
    const std::int64_t first = c.use_class_token ? 1 : 0;
    auto patches = ag::Var<T>::constant(patchify(images, c.patch_size));
    auto x = ag::linear(patches, pb.get(kEmbedding, "patch_proj.weight"), pb.get(kEmbedding, "patch_proj.bias"));
    const auto& pos = pb.get(kEmbedding, "pos_embed");
    auto pos3 = ag::reshape(pos, Shape{1, c.num_tokens(), D});
    auto pos_patches = ag::reshape(ag::slice_tokens(pos3, first, P), Shape{P, D});
    x = ag::add_broadcast(x, pos_patches);
    if (!opt.visible.empty()) {
        if (static_cast<std::int64_t>(opt.visible.size()) != B) throw InputError("visible index batch mismatch");
        x = ag::gather_tokens(x, opt.visible);
    }
    if (c.use_class_token) {
        auto pos0 = ag::reshape(ag::slice_tokens(pos3, 0, 1), Shape{D});
        x = ag::prepend_token(x, ag::add(pb.get(kEmbedding, "cls_token"), pos0));
    }
    Encoded<T> out;
    for (int i = 1; i <= upto; ++i) {
        x = transformer_block(pb, block_id(i), c.num_heads, x);
        if (opt.taps.count(i)) out.taps[i] = x;
    }
    out.pre_norm = x;
    out.output = apply_final_norm(pb, x);
    return out;
}

template <typename T>
Tensor<T> forward_features(const BasicParamSet<T>& params, const Tensor<T>& images, std::optional<int> upto) {
    Binding<T> b;
    b.bind_all(params, nullptr);
    EncodeOptions opt;
    opt.upto_layer = upto.value_or(params.config.depth);
    return encode(b, params.config, images, opt).output.value();
}

template <typename T>
std::map<int, Tensor<T>> extract_intermediate(const BasicParamSet<T>& params, const Tensor<T>& images,
                                              const std::set<int>& layers, bool post_norm) {
    if (layers.empty()) return {};
    for (int l : layers)
        if (l < 1 || l > params.config.depth)
            throw InputError("layer " + std::to_string(l) + " outside [1, " + std::to_string(params.config.depth) + "]");
    Binding<T> b;
    b.bind_all(params, nullptr);
    EncodeOptions opt;
    opt.upto_layer = *layers.rbegin();
    opt.taps = layers;
    auto enc = encode(b, params.config, images, opt);
    std::map<int, Tensor<T>> out;
    for (auto& [l, v] : enc.taps) out[l] = post_norm ? apply_final_norm(b, v).value() : v.value();
    return out;
}

template <typename T>
BasicParamSet<T> truncate(const BasicParamSet<T>& params, int n) {
    const int L = params.config.depth;
    if (n < 1 || n > L) throw InputError("truncation depth " + std::to_string(n) + " outside [1, " + std::to_string(L) + "]");
    BasicParamSet<T> out;
    out.config = params.config;
    out.config.depth = n;
    out.metadata = params.metadata;
    out.groups.push_back(params.group(kEmbedding));
    for (int i = 1; i <= n; ++i) out.groups.push_back(params.group(block_id(i)));
    out.groups.push_back(params.group(kFinalNorm));
    auto src_depth = params.metadata.find("source_depth");
    out.metadata["source_depth"] = src_depth != params.metadata.end() ? src_depth->second : std::to_string(L);
    out.metadata["truncated_to"] = std::to_string(n);
    return out;
}

template <typename T>
ag::Var<T> pool(const ag::Var<T>& tokens, Pooling mode, bool has_cls) {
    if (mode == Pooling::class_token) {
        if (!has_cls) throw ConfigError("class_token pooling requested but the encoder has no class token");
        return ag::reshape(ag::slice_tokens(tokens, 0, 1), Shape{tokens.dim(0), tokens.dim(2)});
    }
    return ag::mean_tokens(tokens, has_cls ? 1 : 0);
}

template <typename T>
Tensor<T> pool(const Tensor<T>& tokens, Pooling mode, bool has_cls) {
    return pool(ag::Var<T>::constant(tokens), mode, has_cls).value();
}

#define FTLAB_INSTANTIATE(T)                                                                                       \
    template void audit_shapes<T>(const BasicParamSet<T>&);                                                        \
    template BasicParamSet<T> init_vit<T>(const ViTConfig&, std::uint64_t);                                        \
    template ParamGroup<T> init_group<T>(const std::string&, const ArrayLayout&, Rng&);                           \
    template ag::Var<T> transformer_block<T>(const Binding<T>&, const std::string&, int, const ag::Var<T>&);       \
    template Tensor<T> patchify<T>(const Tensor<T>&, int);                                                         \
    template Encoded<T> encode<T>(const Binding<T>&, const ViTConfig&, const Tensor<T>&, const EncodeOptions&);   \
    template ag::Var<T> apply_final_norm<T>(const Binding<T>&, const ag::Var<T>&);                                 \
    template Tensor<T> forward_features<T>(const BasicParamSet<T>&, const Tensor<T>&, std::optional<int>);         \
    template std::map<int, Tensor<T>> extract_intermediate<T>(const BasicParamSet<T>&, const Tensor<T>&,           \
                                                              const std::set<int>&, bool);                         \
    template BasicParamSet<T> truncate<T>(const BasicParamSet<T>&, int);                                           \
    template ag::Var<T> pool<T>(const ag::Var<T>&, Pooling, bool);                                                 \
    template Tensor<T> pool<T>(const Tensor<T>&, Pooling, bool);

FTLAB_INSTANTIATE(float)
FTLAB_INSTANTIATE(double)

#undef FTLAB_INSTANTIATE

}  // namespace ftlab
