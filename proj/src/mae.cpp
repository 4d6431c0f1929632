#include "ftlab/mae.hpp"

#include <algorithm>
#include <cmath>

#include "pretrain_loop.hpp"

namespace ftlab {

std::int64_t MAEConfig::masked_count(std::int64_t patches) const {
    if (!(mask_ratio > 0) || !(mask_ratio < 1)) throw ConfigError("mask_ratio must lie in (0, 1)");
    const auto k = static_cast<std::int64_t>(std::llround(mask_ratio * static_cast<double>(patches)));
    if (k < 1 || k > patches - 1)
        throw ConfigError("mask_ratio " + std::to_string(mask_ratio) + " masks " + std::to_string(k) + " of " +
                          std::to_string(patches) + " patches; need between 1 and P-1");
    return k;
}

void MAEConfig::validate(std::int64_t patches) const {
    masked_count(patches);
    if (decoder_depth < 1) throw ConfigError("decoder_depth must be >= 1");
    if (decoder_dim < 1 || decoder_heads < 1 || decoder_dim % decoder_heads != 0)
        throw ConfigError("decoder_dim must be a positive multiple of decoder_heads");
    if (!(decoder_mlp_ratio > 0)) throw ConfigError("decoder_mlp_ratio must be positive");
}

std::vector<std::vector<std::int64_t>> MaskSpec::visible() const {
    std::vector<std::vector<std::int64_t>> out;
    for (std::int64_t b = 0; b < batch(); ++b) {
        std::vector<std::int64_t> v;
        for (std::int64_t p = 0; p < patches; ++p)
            if (!mask[b * patches + p]) v.push_back(p);
        out.push_back(std::move(v));
    }
    return out;
}

MaskSpec sample_mask(std::int64_t patches, double ratio, Rng& rng, std::int64_t batch) {
    MAEConfig probe;
    probe.mask_ratio = ratio;
    const std::int64_t k = probe.masked_count(patches);
    if (batch < 1) throw InputError("sample_mask: batch must be >= 1");
    MaskSpec m;
    m.patches = patches;
    m.mask.assign(static_cast<std::size_t>(batch * patches), 0);
    for (std::int64_t b = 0; b < batch; ++b) {
        auto perm = rng.permutation(patches);
        for (std::int64_t i = 0; i < k; ++i) m.mask[b * patches + perm[i]] = 1;
        m.permutation.push_back(std::move(perm));
    }
    return m;
}

template <typename T>
GroupList<T> init_mae_decoder(const ViTConfig& vit, const MAEConfig& c, std::uint64_t seed) {
    vit.validate();
    c.validate(vit.num_patches());
    Rng rng = Rng(seed).fork(0x6d6165);
    const std::int64_t D = vit.embed_dim, Dd = c.decoder_dim;
    const auto hidden = std::max<std::int64_t>(1, std::llround(c.decoder_mlp_ratio * static_cast<double>(Dd)));
    GroupList<T> groups;
    groups.push_back(init_group<T>(kMaeDecoderEmbed,
                                   {{"proj.weight", {D, Dd}},
                                    {"proj.bias", {Dd}},
                                    {"mask_token", {Dd}},
                                    {"pos_embed", {vit.num_tokens(), Dd}}},
                                   rng));
    for (int i = 1; i <= c.decoder_depth; ++i)
        groups.push_back(init_group<T>(mae_decoder_block_id(i), transformer_block_layout(Dd, hidden), rng));
    groups.push_back(init_group<T>(kMaeDecoderNorm, {{"weight", {Dd}}, {"bias", {Dd}}}, rng));
    groups.push_back(init_group<T>(kMaeDecoderPred, {{"weight", {Dd, vit.patch_dim()}}, {"bias", {vit.patch_dim()}}}, rng));
    return groups;
}

namespace {

void check_mask(const ViTConfig& vit, const MaskSpec& mask, std::int64_t batch) {
    if (mask.patches != vit.num_patches() || mask.batch() != batch ||
        static_cast<std::int64_t>(mask.mask.size()) != batch * mask.patches)
        throw InputError("mask covers " + std::to_string(mask.batch()) + "x" + std::to_string(mask.patches) +
                         " patches, model expects " + std::to_string(batch) + "x" + std::to_string(vit.num_patches()));
}

}  // namespace

template <typename T>
ag::Var<T> encode_visible(const Binding<T>& encoder, const ViTConfig& vit, const Tensor<T>& images,
                          const MaskSpec& mask) {
    if (images.rank() != 4) throw InputError("encode_visible expects [B, C, H, W] images");
    check_mask(vit, mask, images.dim(0));
    EncodeOptions opt;
    opt.visible = mask.visible();
    const auto n = opt.visible.front().size();
    for (const auto& v : opt.visible)
        if (v.size() != n) throw InputError("encode_visible: samples have different visible counts");
    return encode(encoder, vit, images, opt).output;
}

template <typename T>
ag::Var<T> decode_with_mask_tokens(const Binding<T>& dec, const ViTConfig& vit, const MAEConfig& c,
                                   const ag::Var<T>& visible_embeddings, const MaskSpec& mask) {
    c.validate(vit.num_patches());
    const auto& x_in = visible_embeddings;
    if (x_in.value().rank() != 3 || x_in.dim(2) != vit.embed_dim)
        throw ConfigError("decoder expects [B, tokens, " + std::to_string(vit.embed_dim) + "] embeddings, got " +
                          shape_str(x_in.shape()));
    const auto& proj_w = dec.get(kMaeDecoderEmbed, "proj.weight");
    if (proj_w.dim(0) != vit.embed_dim || proj_w.dim(1) != c.decoder_dim)
        throw ConfigError("decoder projection is " + shape_str(proj_w.shape()) + ", expected (" +
                          std::to_string(vit.embed_dim) + "," + std::to_string(c.decoder_dim) + ")");
    const std::int64_t B = x_in.dim(0), P = vit.num_patches(), first = vit.use_class_token ? 1 : 0;
    check_mask(vit, mask, B);
    const auto visible = mask.visible();
    if (x_in.dim(1) != first + static_cast<std::int64_t>(visible.front().size()))
        throw InputError("decoder input has " + std::to_string(x_in.dim(1)) + " tokens, mask leaves " +
                         std::to_string(visible.front().size()) + " visible");

    auto x = ag::linear(x_in, proj_w, dec.get(kMaeDecoderEmbed, "proj.bias"));
    auto patches = ag::slice_tokens(x, first, x.dim(1) - first);
    auto full = ag::scatter_tokens(patches, dec.get(kMaeDecoderEmbed, "mask_token"), visible, P);
    if (first) full = ag::concat_tokens(ag::slice_tokens(x, 0, 1), full);
    full = ag::add_broadcast(full, dec.get(kMaeDecoderEmbed, "pos_embed"));
    for (int i = 1; i <= c.decoder_depth; ++i) full = transformer_block(dec, mae_decoder_block_id(i), c.decoder_heads, full);
    full = ag::layer_norm(full, dec.get(kMaeDecoderNorm, "weight"), dec.get(kMaeDecoderNorm, "bias"), T(1e-6));
    auto pred = ag::linear(full, dec.get(kMaeDecoderPred, "weight"), dec.get(kMaeDecoderPred, "bias"));
    return first ? ag::slice_tokens(pred, 1, P) : pred;
}

template <typename T>
ag::Var<T> mae_loss(const ag::Var<T>& pred, const Tensor<T>& images, const MaskSpec& mask, int patch_size) {
    auto target = patchify(images, patch_size);
    if (pred.shape() != target.shape())
        throw InputError("mae_loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
    if (mask.patches != target.dim(1) || mask.batch() != target.dim(0))
        throw InputError("mae_loss: mask does not match the target patches");
    return ag::masked_mse(pred, target, mask.mask);
}

template <typename T>
double mae_loss(const Tensor<T>& pred, const Tensor<T>& images, const MaskSpec& mask, int patch_size) {
    return static_cast<double>(mae_loss(ag::Var<T>::constant(pred), images, mask, patch_size).item());
}

template <typename T>
MAEModel<T> init_mae(const ViTConfig& vit, const MAEConfig& c, std::uint64_t seed) {
    return {init_vit<T>(vit, seed), init_mae_decoder<T>(vit, c, seed)};
}

template <typename T>
ag::Var<T> mae_forward(const Binding<T>& pb, const ViTConfig& vit, const MAEConfig& c, const Tensor<T>& images,
                       const MaskSpec& mask) {
    auto z = encode_visible(pb, vit, images, mask);
    auto pred = decode_with_mask_tokens(pb, vit, c, z, mask);
    return mae_loss(pred, images, mask, vit.patch_size);
}

template <typename T>
double mae_pretrain_step(MAEModel<T>& m, AdamW<T>& opt, const Tensor<T>& images, const MaskSpec& mask,
                         const MAEConfig& c, double lr) {
    Binding<T> pb;
    pb.bind_all(m.encoder, [](const std::string&) { return true; });
    for (const auto& g : m.decoder) pb.bind(g, true);
    auto loss = mae_forward(pb, m.encoder.config, c, images, mask);
    ag::backward(loss);
    opt.begin_step();
    for (auto& g : m.encoder.groups) opt.update(g, pb, lr);
    for (auto& g : m.decoder) opt.update(g, pb, lr);
    return static_cast<double>(loss.item());
}

PretrainResult mae_pretrain(const Dataset& data, const ViTConfig& vit, const MAEConfig& config,
                            const PretrainConfig& train, const EpochCallback& on_epoch) {
    vit.validate();
    config.validate(vit.num_patches());
    if (train.augmentation.crop_size != vit.image_size)
        throw ConfigError("augmentation crop_size must equal the model image_size");
    if (data.size() == 0) throw InputError("pre-training dataset is empty");
    const auto stats = compute_stats(data);
    auto model = init_mae<float>(vit, config, train.seed);
    AdamW<float> opt({0.9, 0.95, 1e-8, train.weight_decay});
    auto step = [&](const std::vector<std::int64_t>& idx, Rng& rng, double lr) {
        const auto batch = load_batch(data, idx, stats, train.augmentation, rng);
        const auto mask = sample_mask(vit.num_patches(), config.mask_ratio, rng, static_cast<std::int64_t>(idx.size()));
        return mae_pretrain_step(model, opt, batch.images, mask, config, lr);
    };
    auto snapshot = [&] {
        Checkpoint ck;
        ck.params = model.encoder;
        ck.params.metadata["ssl_method"] = "mae";
        store_stats(ck.params.metadata, stats);
        ck.extras = model.decoder;
        return ck;
    };
    return detail::run_pretraining(data, train, 1, step, snapshot, on_epoch);
}

#define FTLAB_INSTANTIATE(T)                                                                                       \
    template GroupList<T> init_mae_decoder<T>(const ViTConfig&, const MAEConfig&, std::uint64_t);                  \
    template ag::Var<T> encode_visible<T>(const Binding<T>&, const ViTConfig&, const Tensor<T>&, const MaskSpec&); \
    template ag::Var<T> decode_with_mask_tokens<T>(const Binding<T>&, const ViTConfig&, const MAEConfig&,          \
                                                   const ag::Var<T>&, const MaskSpec&);                            \
    template ag::Var<T> mae_loss<T>(const ag::Var<T>&, const Tensor<T>&, const MaskSpec&, int);                    \
    template double mae_loss<T>(const Tensor<T>&, const Tensor<T>&, const MaskSpec&, int);                         \
    template MAEModel<T> init_mae<T>(const ViTConfig&, const MAEConfig&, std::uint64_t);                           \
    template ag::Var<T> mae_forward<T>(const Binding<T>&, const ViTConfig&, const MAEConfig&, const Tensor<T>&,    \
                                       const MaskSpec&);                                                           \
    template double mae_pretrain_step<T>(MAEModel<T>&, AdamW<T>&, const Tensor<T>&, const MaskSpec&,               \
                                         const MAEConfig&, double);

FTLAB_INSTANTIATE(float)
FTLAB_INSTANTIATE(double)

#undef FTLAB_INSTANTIATE

}  // namespace ftlab
