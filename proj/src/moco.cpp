#include "ftlab/moco.hpp"

#include <cmath>

#include "ftlab/vit.hpp"
#include "pretrain_loop.hpp"

namespace ftlab {

void MoCoConfig::validate() const {
    if (!(temperature > 0)) throw ConfigError("moco temperature must be positive");
    if (momentum < 0 || momentum > 1) throw ConfigError("moco momentum must lie in [0, 1]");
    if (hidden_dim < 1 || proj_dim < 1 || pred_dim < 1) throw ConfigError("moco head widths must be >= 1");
    if (proj_layers < 1 || pred_layers < 1) throw ConfigError("moco heads need at least one layer");
    if (batch_size < 2) throw ConfigError("moco batch_size must be >= 2 so every query has a negative");
}

ArrayLayout mlp_head_layout(std::int64_t in, std::int64_t hidden, std::int64_t out, int layers) {
    ArrayLayout l;
    for (int i = 1; i <= layers; ++i) {
        const std::int64_t a = i == 1 ? in : hidden, b = i == layers ? out : hidden;
        const std::string fc = "fc" + std::to_string(i);
        l.push_back({fc + ".weight", {a, b}});
        l.push_back({fc + ".bias", {b}});
    }
    return l;
}

template <typename T>
ag::Var<T> mlp_head(const Binding<T>& pb, const std::string& id, int layers, const ag::Var<T>& x) {
    ag::Var<T> h = x;
    for (int i = 1; i <= layers; ++i) {
        const std::string fc = "fc" + std::to_string(i);
        h = ag::linear(h, pb.get(id, fc + ".weight"), pb.get(id, fc + ".bias"));
        if (i < layers) h = ag::gelu(h);
    }
    return h;
}

template <typename T>
MoCoModel<T> init_moco(const ViTConfig& vit, const MoCoConfig& c, std::uint64_t seed) {
    c.validate();
    MoCoModel<T> m;
    m.online = init_vit<T>(vit, seed);
    Rng rng = Rng(seed).fork(0x6d6f636f);
    m.proj = init_group<T>(kMocoProj, mlp_head_layout(vit.embed_dim, c.hidden_dim, c.proj_dim, c.proj_layers), rng);
    m.pred = init_group<T>(kMocoPred, mlp_head_layout(c.proj_dim, c.pred_dim, c.proj_dim, c.pred_layers), rng);
    m.momentum = m.online;
    m.momentum_proj = m.proj;
    return m;
}

template <typename T>
void ContrastiveBatch<T>::validate() const {
    if (q.rank() != 2 || k_pos.rank() != 2 || k_neg.rank() != 2 || q.shape() != k_pos.shape() ||
        k_neg.dim(1) != q.dim(1))
        throw InputError("contrastive batch: q, k_pos must be [B, d] and k_neg [N, d]");
    if (k_neg.dim(0) < 1) throw InputError("contrastive batch needs at least one negative");
    for (const Tensor<T>* t : {&q, &k_pos, &k_neg}) {
        const std::int64_t d = t->dim(1);
        for (std::int64_t r = 0; r < t->dim(0); ++r) {
            double s = 0.0;
            for (std::int64_t j = 0; j < d; ++j) s += double((*t)[r * d + j]) * double((*t)[r * d + j]);
            if (std::abs(std::sqrt(s) - 1.0) > 1e-5) throw InputError("contrastive batch rows must be unit-norm");
        }
    }
}

template <typename T>
double infonce_loss(const ContrastiveBatch<T>& b, double tau) {
    if (!(tau > 0)) throw ConfigError("InfoNCE temperature must be positive");
    b.validate();
    auto c = [](const Tensor<T>& t) { return ag::Var<double>::constant(t.template cast<double>()); };
    return ag::infonce(c(b.q), c(b.k_pos), c(b.k_neg), tau).item();
}

template <typename T>
void momentum_update(ParamGroup<T>& g, const ParamGroup<T>& f, double m) {
    if (m < 0 || m > 1) throw ConfigError("momentum must lie in [0, 1]");
    if (g.id != f.id || g.arrays.size() != f.arrays.size())
        throw InputError("momentum update: group '" + g.id + "' does not match '" + f.id + "'");
    for (std::size_t i = 0; i < g.arrays.size(); ++i) {
        auto& ga = g.arrays[i];
        const auto& fa = f.arrays[i];
        if (ga.name != fa.name || ga.value.shape() != fa.value.shape())
            throw InputError("momentum update: array " + g.id + "/" + ga.name + " does not match");
        if (m == 1.0) continue;
        for (std::int64_t j = 0; j < ga.value.numel(); ++j)
            ga.value[j] = m == 0.0 ? fa.value[j]
                                   : static_cast<T>(m * double(ga.value[j]) + (1.0 - m) * double(fa.value[j]));
    }
}

template <typename T>
void momentum_update(BasicParamSet<T>& g, const BasicParamSet<T>& f, double m) {
    if (g.groups.size() != f.groups.size() || !(g.config == f.config))
        throw InputError("momentum update: parameter sets differ in structure");
    for (std::size_t i = 0; i < g.groups.size(); ++i) momentum_update(g.groups[i], f.groups[i], m);
}

namespace {

template <typename T>
ag::Var<T> embed(const Binding<T>& pb, const ViTConfig& vit, const Tensor<T>& images) {
    const auto enc = encode(pb, vit, images);
    return pool(enc.output, vit.pooling, vit.use_class_token);
}

}  // namespace

template <typename T>
MoCoForward<T> moco_forward(const Binding<T>& online, const Binding<T>& momentum, const ViTConfig& vit,
                            const MoCoConfig& c, const Tensor<T>& v1, const Tensor<T>& v2) {
    c.validate();
    if (v1.shape() != v2.shape()) throw InputError("moco: the two views differ in shape");
    if (v1.dim(0) < 2) throw ConfigError("moco needs a batch of at least 2 images");
    const T eps = T(1e-12);
    auto query = [&](const Tensor<T>& v) {
        auto z = mlp_head(online, kMocoProj, c.proj_layers, embed(online, vit, v));
        return ag::l2_normalize(mlp_head(online, kMocoPred, c.pred_layers, z), eps);
    };
    auto key = [&](const Tensor<T>& v) {
        auto z = mlp_head(momentum, kMocoProj, c.proj_layers, embed(momentum, vit, v));
        return ag::l2_normalize(z, eps).value();
    };
    MoCoForward<T> out;
    out.q1 = query(v1);
    out.q2 = query(v2);
    out.k1 = key(v1);
    out.k2 = key(v2);
    const T tau = static_cast<T>(c.temperature);
    auto l12 = ag::infonce_in_batch(out.q1, ag::Var<T>::constant(out.k2), tau);
    auto l21 = ag::infonce_in_batch(out.q2, ag::Var<T>::constant(out.k1), tau);
    out.loss = ag::scale(ag::add(l12, l21), T(0.5));
    return out;
}

template <typename T>
double moco_pretrain_step(MoCoModel<T>& m, AdamW<T>& opt, const Tensor<T>& v1, const Tensor<T>& v2,
                          const MoCoConfig& c, double lr) {
    Binding<T> f, g;
    f.bind_all(m.online, [](const std::string&) { return true; });
    f.bind(m.proj, true);
    f.bind(m.pred, true);
    g.bind_all(m.momentum, nullptr);
    g.bind(m.momentum_proj, false);
    const auto fw = moco_forward(f, g, m.online.config, c, v1, v2);
    ag::backward(fw.loss);
    const double loss = static_cast<double>(fw.loss.item());
    opt.begin_step();
    for (auto& grp : m.online.groups) opt.update(grp, f, lr);
    opt.update(m.proj, f, lr);
    opt.update(m.pred, f, lr);
    momentum_update(m.momentum, m.online, c.momentum);
    momentum_update(m.momentum_proj, m.proj, c.momentum);
    return loss;
}

PretrainResult moco_pretrain(const Dataset& data, const ViTConfig& vit, const MoCoConfig& config,
                             const PretrainConfig& train, const EpochCallback& on_epoch) {
    config.validate();
    vit.validate();
    if (train.augmentation.crop_size != vit.image_size)
        throw ConfigError("augmentation crop_size must equal the model image_size");
    if (data.size() == 0) throw InputError("pre-training dataset is empty");
    const auto stats = compute_stats(data);
    auto model = init_moco<float>(vit, config, train.seed);
    AdamW<float> opt({0.9, 0.999, 1e-8, train.weight_decay});
    PretrainConfig cfg = train;
    cfg.batch_size = config.batch_size;
    auto step = [&](const std::vector<std::int64_t>& idx, Rng& rng, double lr) {
        const auto a = load_batch(data, idx, stats, train.augmentation, rng);
        const auto b = load_batch(data, idx, stats, train.augmentation, rng);
        return moco_pretrain_step(model, opt, a.images, b.images, config, lr);
    };
    auto snapshot = [&] {
        Checkpoint ck;
        ck.params = model.online;
        ck.params.metadata["ssl_method"] = "moco";
        store_stats(ck.params.metadata, stats);
        ck.extras = {model.proj, model.pred};
        return ck;
    };
    return detail::run_pretraining(data, cfg, 2, step, snapshot, on_epoch);
}

#define FTLAB_INSTANTIATE(T)                                                                                       \
    template ag::Var<T> mlp_head<T>(const Binding<T>&, const std::string&, int, const ag::Var<T>&);                \
    template MoCoModel<T> init_moco<T>(const ViTConfig&, const MoCoConfig&, std::uint64_t);                        \
    template struct ContrastiveBatch<T>;                                                                           \
    template double infonce_loss<T>(const ContrastiveBatch<T>&, double);                                           \
    template void momentum_update<T>(ParamGroup<T>&, const ParamGroup<T>&, double);                                \
    template void momentum_update<T>(BasicParamSet<T>&, const BasicParamSet<T>&, double);                          \
    template MoCoForward<T> moco_forward<T>(const Binding<T>&, const Binding<T>&, const ViTConfig&,                \
                                            const MoCoConfig&, const Tensor<T>&, const Tensor<T>&);                \
    template double moco_pretrain_step<T>(MoCoModel<T>&, AdamW<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                          const MoCoConfig&, double);

FTLAB_INSTANTIATE(float)
FTLAB_INSTANTIATE(double)

#undef FTLAB_INSTANTIATE

}  // namespace ftlab
