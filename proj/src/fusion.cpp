#include "ftlab/fusion.hpp"

#include <algorithm>

#include "finetune_loop.hpp"

namespace ftlab {

int BranchSpec::effective_depth(int L) const {
    if (policy.kind == FinetunePolicy::Kind::shallow) return policy.depth;
    return truncate_to.value_or(L);
}

void BranchSpec::validate(int L) const {
    if (truncate_to && (*truncate_to < 1 || *truncate_to > L))
        throw InputError("branch truncation " + std::to_string(*truncate_to) + " outside [1, " + std::to_string(L) + "]");
    if (policy.kind == FinetunePolicy::Kind::shallow && truncate_to && *truncate_to != policy.depth)
        throw InputError("shallow(" + std::to_string(policy.depth) + ") branch cannot be truncated to " +
                         std::to_string(*truncate_to));
    policy.validate(policy.kind == FinetunePolicy::Kind::shallow ? L : effective_depth(L));
}

std::int64_t FusionModel::trainable_param_count() const {
    return ftlab::trainable_param_count(a.encoder, a.mask) + ftlab::trainable_param_count(b.encoder, b.mask) +
           head.numel();
}

std::pair<BranchSpec, BranchSpec> fusion_preset(const std::string& name, bool truncate_moco) {
    if (name == "e2e12+12") return {{{}, std::nullopt, FinetunePolicy::end_to_end()}, {{}, std::nullopt, FinetunePolicy::end_to_end()}};
    if (name == "shallow9+9") return {{{}, 9, FinetunePolicy::shallow(9)}, {{}, 9, FinetunePolicy::shallow(9)}};
    if (name == "surgical_mae9_moco6")
        return {{{}, 9, FinetunePolicy::surgical(7, 9)},
                {{}, truncate_moco ? std::optional<int>(6) : std::nullopt, FinetunePolicy::surgical(4, 6)}};
    throw ConfigError("unknown fusion preset '" + name + "' (expected e2e12+12, shallow9+9, surgical_mae9_moco6)");
}

namespace {

FusionBranch make_branch(const ParamSet& encoder, const BranchSpec& spec, std::string checksum) {
    const int L = encoder.config.depth;
    spec.validate(L);
    const int depth = spec.effective_depth(L);
    FusionBranch br;
    br.encoder = depth < L ? truncate(encoder, depth) : encoder;
    br.encoder.groups.erase(std::remove_if(br.encoder.groups.begin(), br.encoder.groups.end(),
                                           [](const auto& g) { return g.id == kHead; }),
                            br.encoder.groups.end());
    const auto policy = spec.policy.kind == FinetunePolicy::Kind::shallow ? FinetunePolicy::end_to_end() : spec.policy;
    br.mask = build_trainable_mask(policy, depth);
    br.mask.erase(kHead);
    check_mask(br.encoder, br.mask);
    br.checksum = std::move(checksum);
    return br;
}

void check_compatible(const ViTConfig& a, const ViTConfig& b) {
    if (a.image_size != b.image_size || a.patch_size != b.patch_size || a.in_channels != b.in_channels)
        throw ConfigError("fusion branches disagree on input geometry (image, patch or channels)");
}

FusionModel assemble(const ParamSet& encoder_a, const BranchSpec& spec_a, std::string sum_a, const ParamSet& encoder_b,
                     const BranchSpec& spec_b, std::string sum_b, int num_classes, std::uint64_t seed) {
    if (num_classes < 1) throw ConfigError("fusion needs >= 1 class");
    encoder_a.config.validate();
    encoder_b.config.validate();
    check_compatible(encoder_a.config, encoder_b.config);
    FusionModel m;
    m.a = make_branch(encoder_a, spec_a, std::move(sum_a));
    m.b = make_branch(encoder_b, spec_b, std::move(sum_b));
    m.num_classes = num_classes;
    Rng rng = Rng(seed).fork(0x667573696f6e);
    const std::int64_t in = encoder_a.config.embed_dim + encoder_b.config.embed_dim;
    m.head = init_group<float>(kHead, {{"weight", {in, num_classes}}, {"bias", {num_classes}}}, rng);
    return m;
}

}  // namespace

FusionModel build_fusion(const ParamSet& encoder_a, const BranchSpec& spec_a, const ParamSet& encoder_b,
                         const BranchSpec& spec_b, int num_classes, std::uint64_t seed) {
    return assemble(encoder_a, spec_a, detail::params_digest(encoder_a), encoder_b, spec_b,
                    detail::params_digest(encoder_b), num_classes, seed);
}

FusionModel build_fusion(const BranchSpec& spec_a, const BranchSpec& spec_b, int num_classes, std::uint64_t seed) {
    const auto ca = load_checkpoint<float>(spec_a.checkpoint), cb = load_checkpoint<float>(spec_b.checkpoint);
    return assemble(ca.params, spec_a, file_sha256(spec_a.checkpoint), cb.params, spec_b,
                    file_sha256(spec_b.checkpoint), num_classes, seed);
}

ag::Var<float> fusion_logits(const Binding<float>& a, const Binding<float>& b, const Binding<float>& head,
                             const FusionModel& m, const Tensor<float>& images) {
    const auto& ca = m.a.encoder.config;
    const auto& cb = m.b.encoder.config;
    const std::int64_t da = ca.embed_dim, db = cb.embed_dim, C = m.num_classes;
    const auto pa = pool(encode(a, ca, images).output, ca.pooling, ca.use_class_token);
    const auto pb = pool(encode(b, cb, images).output, cb.pooling, cb.use_class_token);
    const auto w = ag::reshape(head.get(kHead, "weight"), Shape{1, da + db, C});
    const auto wa = ag::reshape(ag::slice_tokens(w, 0, da), Shape{da, C});
    const auto wb = ag::reshape(ag::slice_tokens(w, da, db), Shape{db, C});
    return ag::add(ag::linear(pa, wa, head.get(kHead, "bias")), ag::linear(pb, wb, ag::Var<float>()));
}

Tensor<float> fusion_forward(const FusionModel& m, const Tensor<float>& images) {
    Binding<float> a, b, h;
    a.bind_all(m.a.encoder, nullptr);
    b.bind_all(m.b.encoder, nullptr);
    h.bind(m.head, false);
    return fusion_logits(a, b, h, m, images).value();
}

FusionResult finetune_fusion(const FusionModel& start, const Dataset& train, const Dataset& val, const Dataset& test,
                             const FinetuneConfig& cfg) {
    cfg.validate();
    if (cfg.normalization_source != NormalizationSource::finetune_dataset)
        throw ConfigError("fusion branches share the fine-tuning dataset normalization");
    const auto task = TaskSpec::classification(start.num_classes);
    detail::check_splits(train, val, test, task);
    if (cfg.augmentation && cfg.augmentation->crop_size != start.a.encoder.config.image_size)
        throw ConfigError("augmentation crop_size must equal the model image_size");
    check_mask(start.a.encoder, start.a.mask);
    check_mask(start.b.encoder, start.b.mask);

    FusionModel model = start;
    if (cfg.pooling) model.a.encoder.config.pooling = model.b.encoder.config.pooling = *cfg.pooling;
    const auto stats = compute_stats(train);

    const AdamWConfig oc{0.9, 0.999, 1e-8, cfg.weight_decay};
    AdamW<float> opt_a(oc), opt_b(oc), opt_h(oc);
    auto step = [&](const Batch& batch, double lr) {
        Binding<float> a, b, h;
        a.bind_all(model.a.encoder, [&](const std::string& id) { return model.a.mask.at(id); });
        b.bind_all(model.b.encoder, [&](const std::string& id) { return model.b.mask.at(id); });
        h.bind(model.head, true);
        const auto loss = ag::bce_with_logits(fusion_logits(a, b, h, model, batch.images), batch.labels);
        ag::backward(loss);
        for (auto* o : {&opt_a, &opt_b, &opt_h}) o->begin_step();
        for (auto& g : model.a.encoder.groups)
            if (model.a.mask.at(g.id)) opt_a.update(g, a, lr);
        for (auto& g : model.b.encoder.groups)
            if (model.b.mask.at(g.id)) opt_b.update(g, b, lr);
        opt_h.update(model.head, h, lr);
        return static_cast<double>(loss.item());
    };
    auto evaluate = [&](const FusionModel& m, const Dataset& d) {
        return detail::evaluate_with(d, stats, cfg.eval_batch_size, task,
                                     [&](const Tensor<float>& x) { return fusion_forward(m, x); });
    };
    FusionModel best = model;
    auto rec = detail::run_finetuning(
        train, val, stats, cfg, step, [&](const Dataset& d) { return evaluate(model, d); }, [&] { best = model; });

    rec.trainable_param_count = model.trainable_param_count();
    rec.tags["branch_a_sha256"] = start.a.checksum;
    rec.tags["branch_b_sha256"] = start.b.checksum;
    nlohmann::json fp{{"config", cfg.to_json()},
                      {"a", {start.a.checksum, config_to_json(model.a.encoder.config), start.a.mask}},
                      {"b", {start.b.checksum, config_to_json(model.b.encoder.config), start.b.mask}},
                      {"head", detail::params_digest(ParamSet{{}, {start.head}, {}})},
                      {"train", {train.id, train.size()}},
                      {"val", {val.id, val.size()}},
                      {"test", {test.id, test.size()}}};
    rec.fingerprint = sha256_hex(fp.dump());
    rec.test_metric = evaluate(best, test);
    return {std::move(rec), std::move(best)};
}

}  // namespace ftlab
