#include "ftlab/finetune.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include "ftlab/checkpoint.hpp"
#include "ftlab/metrics.hpp"
#include "ftlab/pretrain.hpp"
#include "finetune_loop.hpp"

namespace ftlab {

void FinetunePolicy::validate(int L) const {
    switch (kind) {
        case Kind::surgical:
            if (range.lo < 1 || range.hi > L || range.lo > range.hi)
                throw InputError("surgical range " + std::to_string(range.lo) + "-" + std::to_string(range.hi) +
                                 " does not fit depth " + std::to_string(L));
            break;
        case Kind::shallow:
            if (depth < 1 || depth > L)
                throw InputError("shallow depth " + std::to_string(depth) + " outside [1, " + std::to_string(L) + "]");
            break;
        case Kind::end_to_end:
            break;
    }
}

std::string FinetunePolicy::label() const {
    switch (kind) {
        case Kind::surgical: return "surgical:" + std::to_string(range.lo) + "-" + std::to_string(range.hi);
        case Kind::shallow: return "shallow:" + std::to_string(depth);
        case Kind::end_to_end: break;
    }
    return "e2e";
}

FinetunePolicy FinetunePolicy::parse(const std::string& s) {
    auto num = [&](const std::string& t) {
        std::size_t used = 0;
        int v = 0;
        try {
            v = std::stoi(t, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != t.size()) throw ConfigError("bad policy '" + s + "'");
        return v;
    };
    if (s == "e2e" || s == "end_to_end") return end_to_end();
    if (s.rfind("shallow:", 0) == 0) {
        const int n = num(s.substr(8));
        if (n < 1) throw ConfigError("bad policy '" + s + "': depth must be >= 1");
        return shallow(n);
    }
    if (s.rfind("surgical:", 0) == 0) {
        const auto body = s.substr(9);
        const auto dash = body.find('-');
        if (dash == std::string::npos) throw ConfigError("bad policy '" + s + "'");
        const int lo = num(body.substr(0, dash)), hi = num(body.substr(dash + 1));
        if (lo < 1 || lo > hi) throw ConfigError("bad policy '" + s + "': need 1 <= lo <= hi");
        return surgical(lo, hi);
    }
    throw ConfigError("unknown policy '" + s + "' (expected e2e, shallow:N or surgical:LO-HI)");
}

TrainableMask build_trainable_mask(const FinetunePolicy& p, int L) {
    p.validate(L);
    const int depth = p.effective_depth(L);
    const bool surgical = p.kind == FinetunePolicy::Kind::surgical;
    TrainableMask m;
    m[kEmbedding] = !surgical || p.range.lo == 1;
    for (int i = 1; i <= depth; ++i) m[block_id(i)] = !surgical || (i >= p.range.lo && i <= p.range.hi);
    m[kFinalNorm] = !surgical || p.range.hi == L;
    m[kHead] = true;
    return m;
}

template <typename T>
void check_mask(const BasicParamSet<T>& model, const TrainableMask& mask) {
    for (const auto& g : model.groups)
        if (!mask.count(g.id)) throw InputError("trainable mask has no entry for group '" + g.id + "'");
    for (const auto& [id, _] : mask)
        if (!model.has_group(id)) throw InputError("trainable mask names unknown group '" + id + "'");
}

template <typename T>
std::int64_t trainable_param_count(const BasicParamSet<T>& model, const TrainableMask& mask) {
    check_mask(model, mask);
    std::int64_t n = 0;
    for (const auto& g : model.groups)
        if (mask.at(g.id)) n += g.numel();
    return n;
}

void TaskSpec::validate() const {
    if (kind == Kind::classification && num_classes < 1) throw ConfigError("classification needs >= 1 class");
    if (kind == Kind::segmentation && seg_channels < 1) throw ConfigError("segmentation decoder width must be >= 1");
}

void TaskSpec::store(std::map<std::string, std::string>& md) const {
    md["task"] = kind == Kind::classification ? "classification" : "segmentation";
    md["num_classes"] = std::to_string(num_classes);
    md["seg_channels"] = std::to_string(seg_channels);
}

TaskSpec TaskSpec::from_metadata(const std::map<std::string, std::string>& md) {
    auto it = md.find("task");
    if (it == md.end()) throw InputError("model carries no task head");
    TaskSpec t;
    if (it->second == "classification")
        t.kind = Kind::classification;
    else if (it->second == "segmentation")
        t.kind = Kind::segmentation;
    else
        throw InputError("unknown task '" + it->second + "'");
    t.num_classes = std::stoi(md.at("num_classes"));
    t.seg_channels = std::stoi(md.at("seg_channels"));
    return t;
}

std::set<int> segmentation_taps(int L) {
    if (L < 4) throw ConfigError("segmentation decoder needs depth >= 4, got " + std::to_string(L));
    return {L / 4, L / 2, 3 * L / 4, L};
}

namespace {

int upsample_steps(int patch) {
    if (!std::has_single_bit(static_cast<unsigned>(patch)))
        throw ConfigError("segmentation decoder needs a power-of-two patch size, got " + std::to_string(patch));
    return std::countr_zero(static_cast<unsigned>(patch));
}

}  // namespace

ArrayLayout head_layout(const ViTConfig& c, const TaskSpec& task) {
    task.validate();
    if (task.kind == TaskSpec::Kind::classification)
        return {{"weight", {c.embed_dim, task.num_classes}}, {"bias", {task.num_classes}}};
    segmentation_taps(c.depth);
    const std::int64_t C = task.seg_channels, D = c.embed_dim;
    ArrayLayout l{{"fuse.weight", {C, 4 * D, 3, 3}}, {"fuse.bias", {C}}};
    for (int i = 1; i <= upsample_steps(c.patch_size); ++i) {
        const std::string up = "up" + std::to_string(i);
        l.push_back({up + ".weight", {C, C, 3, 3}});
        l.push_back({up + ".bias", {C}});
    }
    l.push_back({"out.weight", {1, C + c.in_channels, 3, 3}});
    l.push_back({"out.bias", {1}});
    return l;
}

template <typename T>
BasicParamSet<T> attach_head(const BasicParamSet<T>& encoder, const TaskSpec& task, std::uint64_t seed) {
    encoder.config.validate();
    BasicParamSet<T> m;
    m.config = encoder.config;
    m.metadata = encoder.metadata;
    for (const auto& g : encoder.groups)
        if (g.id != kHead) m.groups.push_back(g);
    Rng rng = Rng(seed).fork(0x68656164);
    m.groups.push_back(init_group<T>(kHead, head_layout(m.config, task), rng));
    task.store(m.metadata);
    return m;
}

template <typename T>
BasicParamSet<T> prepare_model(const BasicParamSet<T>& encoder, const FinetunePolicy& policy, const TaskSpec& task,
                               std::uint64_t seed) {
    const int L = encoder.config.depth;
    policy.validate(L);
    if (policy.kind == FinetunePolicy::Kind::shallow && policy.depth < L)
        return attach_head(truncate(encoder, policy.depth), task, seed);
    return attach_head(encoder, task, seed);
}

template <typename T>
ag::Var<T> model_forward(const Binding<T>& pb, const ViTConfig& c, const TaskSpec& task, const Tensor<T>& images) {
    if (task.kind == TaskSpec::Kind::classification) {
        const auto enc = encode(pb, c, images);
        const auto feat = pool(enc.output, c.pooling, c.use_class_token);
        return ag::linear(feat, pb.get(kHead, "weight"), pb.get(kHead, "bias"));
    }
    const auto taps = segmentation_taps(c.depth);
    EncodeOptions opt;
    opt.taps = taps;
    const auto enc = encode(pb, c, images, opt);
    const std::int64_t first = c.use_class_token ? 1 : 0;
    ag::Var<T> x;
    for (int t : taps) {
        const auto& v = t == c.depth ? enc.output : enc.taps.at(t);
        auto g = ag::tokens_to_grid(ag::slice_tokens(v, first, c.num_patches()), c.grid());
        x = x.valid() ? ag::concat_channels(x, g) : g;
    }
    auto conv = [&](const ag::Var<T>& in, const std::string& name) {
        return ag::conv2d(in, pb.get(kHead, name + ".weight"), pb.get(kHead, name + ".bias"));
    };
    x = ag::gelu(conv(x, "fuse"));
    const int steps = upsample_steps(c.patch_size);
    for (int i = 1; i <= steps; ++i) x = ag::gelu(conv(ag::upsample2x(x), "up" + std::to_string(i)));
    return conv(ag::concat_channels(x, ag::Var<T>::constant(images)), "out");
}

template <typename T>
Tensor<T> predict(const BasicParamSet<T>& model, const Tensor<T>& images) {
    Binding<T> b;
    b.bind_all(model, nullptr);
    return model_forward(b, model.config, TaskSpec::from_metadata(model.metadata), images).value();
}

std::string to_string(NormalizationSource s) {
    return s == NormalizationSource::finetune_dataset ? "finetune_dataset" : "pretrain_dataset";
}

NormalizationSource normalization_source_from_string(const std::string& s) {
    if (s == "finetune_dataset") return NormalizationSource::finetune_dataset;
    if (s == "pretrain_dataset") return NormalizationSource::pretrain_dataset;
    throw ConfigError("unknown normalization source '" + s + "'");
}

void FinetuneConfig::validate() const {
    if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
    if (min_learning_rate < 0 || min_learning_rate > learning_rate)
        throw ConfigError("min_learning_rate must lie in [0, learning_rate]");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (batch_size < 1 || eval_batch_size < 1) throw ConfigError("batch sizes must be >= 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
    if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be >= 1");
    if (augmentation) augmentation->validate();
}

nlohmann::json FinetuneConfig::to_json() const {
    nlohmann::json j{{"learning_rate", learning_rate},
                     {"min_learning_rate", min_learning_rate},
                     {"weight_decay", weight_decay},
                     {"batch_size", batch_size},
                     {"max_epochs", max_epochs},
                     {"warmup_epochs", warmup_epochs},
                     {"early_stop_patience", early_stop_patience},
                     {"seed", seed},
                     {"normalization_source", to_string(normalization_source)},
                     {"pooling", pooling ? to_string(*pooling) : "model"}};
    if (augmentation)
        j["augmentation"] = {{"crop_size", augmentation->crop_size},
                             {"hflip_prob", augmentation->hflip_prob},
                             {"rotation_range", augmentation->rotation_range},
                             {"crop_scale_min", augmentation->crop_scale_min}};
    else
        j["augmentation"] = nullptr;
    return j;
}

nlohmann::json RunRecord::to_json() const {
    nlohmann::json ep = nlohmann::json::array();
    for (const auto& e : epochs) ep.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_metric", e.val_metric}});
    return {{"epochs", ep},
            {"best_epoch", best_epoch},
            {"best_metric", best_metric},
            {"test_metric", test_metric},
            {"convergence_epoch", convergence_epoch},
            {"trainable_param_count", trainable_param_count},
            {"fingerprint", fingerprint},
            {"seed", seed},
            {"tags", tags}};
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
    RunRecord r;
    try {
        for (const auto& e : j.at("epochs"))
            r.epochs.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(), e.at("val_metric").get<double>()});
        r.best_epoch = j.at("best_epoch").get<int>();
        r.best_metric = j.at("best_metric").get<double>();
        r.test_metric = j.at("test_metric").get<double>();
        r.convergence_epoch = j.at("convergence_epoch").get<int>();
        r.trainable_param_count = j.at("trainable_param_count").get<std::int64_t>();
        r.fingerprint = j.at("fingerprint").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("tags")) r.tags = j.at("tags").get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed run record: ") + e.what());
    }
    return r;
}

int convergence_epoch(const RunRecord& r) {
    if (r.epochs.empty()) throw InputError("run record has no epochs");
    int best = r.epochs.front().epoch;
    double m = r.epochs.front().val_metric;
    for (const auto& e : r.epochs)
        if (e.val_metric > m) m = e.val_metric, best = e.epoch;
    return best;
}

namespace {

std::vector<std::int64_t> iota(std::int64_t lo, std::int64_t hi) {
    std::vector<std::int64_t> v;
    for (std::int64_t i = lo; i < hi; ++i) v.push_back(i);
    return v;
}

void check_data(const Dataset& d, const TaskSpec& task, const std::string& name) {
    if (d.size() == 0) throw InputError(name + " split is empty");
    if (task.kind == TaskSpec::Kind::classification && d.classes != task.num_classes)
        throw InputError(name + " split has " + std::to_string(d.classes) + " classes, the head predicts " +
                         std::to_string(task.num_classes));
    if (task.kind == TaskSpec::Kind::segmentation && !d.has_masks())
        throw InputError(name + " split has no segmentation masks");
}

}  // namespace

std::string detail::params_digest(const ParamSet& m) {
    std::string bytes;
    for (const auto& g : m.groups)
        for (const auto& a : g.arrays) {
            bytes += g.id + "/" + a.name;
            bytes.append(reinterpret_cast<const char*>(a.value.data()), a.value.numel() * sizeof(float));
        }
    return sha256_hex(bytes);
}

namespace detail {

double evaluate_with(const Dataset& d, const NormalizationStats& stats, int batch_size, const TaskSpec& task,
                     const std::function<Tensor<float>(const Tensor<float>&)>& forward) {
    check_data(d, task, "evaluation");
    Rng unused(0);
    PredictionSet pred;
    double dice_sum = 0.0;
    for (std::int64_t s = 0; s < d.size(); s += batch_size) {
        const auto idx = iota(s, std::min<std::int64_t>(s + batch_size, d.size()));
        const auto b = load_batch(d, idx, stats, std::nullopt, unused);
        const auto out = forward(b.images);
        if (task.kind == TaskSpec::Kind::classification) {
            pred.scores.insert(pred.scores.end(), out.vec().begin(), out.vec().end());
            for (float v : b.labels.vec()) pred.labels.push_back(v > 0.5f ? 1 : 0);
        } else {
            const std::int64_t hw = out.numel() / out.dim(0);
            for (std::int64_t i = 0; i < out.dim(0); ++i) {
                std::vector<std::uint8_t> p(static_cast<std::size_t>(hw)), g(static_cast<std::size_t>(hw));
                for (std::int64_t j = 0; j < hw; ++j) {
                    p[j] = out[i * hw + j] > 0.0f ? 1 : 0;
                    g[j] = b.masks[i * hw + j] > 0.5f ? 1 : 0;
                }
                dice_sum += dice(p, g);
            }
        }
    }
    if (task.kind == TaskSpec::Kind::segmentation) return dice_sum / static_cast<double>(d.size());
    pred.n = d.size();
    pred.classes = task.num_classes;
    return mean_auc(pred);
}

void check_splits(const Dataset& train, const Dataset& val, const Dataset& test, const TaskSpec& task) {
    check_data(train, task, "train");
    check_data(val, task, "validation");
    check_data(test, task, "test");
}

NormalizationStats finetune_stats(const FinetuneConfig& cfg, const Dataset& train,
                                  const std::map<std::string, std::string>& metadata) {
    if (cfg.normalization_source == NormalizationSource::finetune_dataset) return compute_stats(train);
    auto s = stored_stats(metadata);
    if (!s) throw ConfigError("normalization_source=pretrain_dataset but the checkpoint stores no statistics");
    return *s;
}

RunRecord run_finetuning(const Dataset& train, const Dataset& val, const NormalizationStats& stats,
                         const FinetuneConfig& cfg, const StepFn& step, const EvalFn& evaluate,
                         const std::function<void()>& keep_best) {
    const std::int64_t n = train.size();
    const std::int64_t bs = std::min<std::int64_t>(cfg.batch_size, n);
    const std::int64_t steps_per_epoch = (n + bs - 1) / bs;
    const CosineSchedule sched{cfg.learning_rate, cfg.warmup_epochs * steps_per_epoch, cfg.max_epochs * steps_per_epoch,
                               cfg.min_learning_rate};
    Rng rng(cfg.seed);
    Rng order_rng = rng.fork(1), aug_rng = rng.fork(2);

    RunRecord rec;
    rec.seed = cfg.seed;
    EarlyStopping stop(cfg.early_stop_patience);
    std::int64_t global = 0;
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto perm = order_rng.permutation(n);
        double total = 0.0;
        for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
            std::vector<std::int64_t> idx(perm.begin() + s * bs, perm.begin() + std::min(n, (s + 1) * bs));
            const auto b = load_batch(train, idx, stats, cfg.augmentation, aug_rng);
            const double l = step(b, sched.at(global++));
            if (!std::isfinite(l)) throw std::runtime_error("fine-tuning loss diverged at epoch " + std::to_string(epoch));
            total += l * static_cast<double>(idx.size());
        }
        const double metric = evaluate(val);
        rec.epochs.push_back({epoch, total / static_cast<double>(n), metric});
        const bool done = stop.update(epoch, metric);
        if (stop.best_epoch() == epoch) keep_best();
        if (done) break;
    }
    rec.best_epoch = stop.best_epoch();
    rec.best_metric = stop.best();
    rec.convergence_epoch = convergence_epoch(rec);
    return rec;
}

}  // namespace detail

double evaluate_model(const ParamSet& model, const Dataset& d, const NormalizationStats& stats, int batch_size) {
    return detail::evaluate_with(d, stats, batch_size, TaskSpec::from_metadata(model.metadata),
                                 [&](const Tensor<float>& x) { return predict(model, x); });
}

FinetuneResult finetune(const ParamSet& start, const TrainableMask& mask, const Dataset& train, const Dataset& val,
                        const Dataset& test, const FinetuneConfig& cfg) {
    cfg.validate();
    check_mask(start, mask);
    const auto task = TaskSpec::from_metadata(start.metadata);
    detail::check_splits(train, val, test, task);
    if (cfg.augmentation && cfg.augmentation->crop_size != start.config.image_size)
        throw ConfigError("augmentation crop_size must equal the model image_size");

    ParamSet model = start;
    if (cfg.pooling) model.config.pooling = *cfg.pooling;
    model.config.validate();
    const auto stats = detail::finetune_stats(cfg, train, start.metadata);
    store_stats(model.metadata, stats);

    AdamW<float> opt({0.9, 0.999, 1e-8, cfg.weight_decay});
    auto trainable = [&](const std::string& id) { return mask.at(id); };
    auto step = [&](const Batch& b, double lr) {
        Binding<float> pb;
        pb.bind_all(model, trainable);
        const auto logits = model_forward(pb, model.config, task, b.images);
        const auto loss = task.kind == TaskSpec::Kind::classification ? ag::bce_with_logits(logits, b.labels)
                                                                      : ag::dice_loss(logits, b.masks, 1.0f);
        ag::backward(loss);
        opt.begin_step();
        for (auto& g : model.groups)
            if (mask.at(g.id)) opt.update(g, pb, lr);
        return static_cast<double>(loss.item());
    };
    ParamSet best = model;
    auto rec = detail::run_finetuning(
        train, val, stats, cfg, step, [&](const Dataset& d) { return evaluate_model(model, d, stats, cfg.eval_batch_size); },
        [&] { best = model; });

    rec.trainable_param_count = trainable_param_count(model, mask);
    nlohmann::json fp{{"config", cfg.to_json()},
                      {"model", config_to_json(model.config)},
                      {"params", detail::params_digest(start)},
                      {"mask", mask},
                      {"train", {train.id, train.size()}},
                      {"val", {val.id, val.size()}},
                      {"test", {test.id, test.size()}}};
    rec.fingerprint = sha256_hex(fp.dump());
    rec.test_metric = evaluate_model(best, test, stats, cfg.eval_batch_size);
    return {std::move(rec), std::move(best), std::move(model)};
}

#define FTLAB_INSTANTIATE(T)                                                                                      \
    template void check_mask<T>(const BasicParamSet<T>&, const TrainableMask&);                                   \
    template std::int64_t trainable_param_count<T>(const BasicParamSet<T>&, const TrainableMask&);                \
    template BasicParamSet<T> attach_head<T>(const BasicParamSet<T>&, const TaskSpec&, std::uint64_t);            \
    template BasicParamSet<T> prepare_model<T>(const BasicParamSet<T>&, const FinetunePolicy&, const TaskSpec&,   \
                                               std::uint64_t);                                                    \
    template ag::Var<T> model_forward<T>(const Binding<T>&, const ViTConfig&, const TaskSpec&, const Tensor<T>&); \
    template Tensor<T> predict<T>(const BasicParamSet<T>&, const Tensor<T>&);

FTLAB_INSTANTIATE(float)
FTLAB_INSTANTIATE(double)

#undef FTLAB_INSTANTIATE

}  // namespace ftlab
