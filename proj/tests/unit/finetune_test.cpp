#include <gtest/gtest.h>

#include <cmath>

#include "ftlab/finetune.hpp"
#include "ftlab/pretrain.hpp"
#include "support/fixtures.hpp"
#include "support/model_gradcheck.hpp"

namespace ftlab {
namespace {

ViTConfig deep_config(int depth = 12) {
    ViTConfig c;
    c.image_size = 16;
    c.patch_size = 4;
    c.depth = depth;
    c.embed_dim = 8;
    c.num_heads = 2;
    return c;
}

Dataset random_dataset(const ViTConfig& c, std::int64_t n, std::int64_t classes, std::uint64_t seed,
                       bool masks = false) {
    Rng rng(seed);
    Dataset d;
    d.id = "random:" + std::to_string(seed);
    d.images = Tensor<float>(Shape{n, 1, c.image_size, c.image_size});
    for (auto& v : d.images.vec()) v = static_cast<float>(rng.uniform());
    d.classes = classes;
    for (std::int64_t i = 0; i < n * classes; ++i) d.labels.push_back(rng.bernoulli(0.5) ? 1 : 0);
    if (masks)
        for (std::int64_t i = 0; i < n * c.image_size * c.image_size; ++i) d.masks.push_back(rng.bernoulli(0.3) ? 1 : 0);
    return d;
}

FinetuneConfig quick_config(int epochs = 1) {
    FinetuneConfig f;
    f.batch_size = 8;
    f.max_epochs = epochs;
    f.warmup_epochs = 0;
    f.augmentation = std::nullopt;
    return f;
}

std::set<std::string> trainable_ids(const TrainableMask& m) {
    std::set<std::string> s;
    for (const auto& [id, on] : m)
        if (on) s.insert(id);
    return s;
}

TEST(TrainableMask, SurgicalMiddleQuarter) {
    const auto m = build_trainable_mask(FinetunePolicy::surgical(4, 6), 12);
    EXPECT_EQ(trainable_ids(m), (std::set<std::string>{"block_4", "block_5", "block_6", kHead}));
    EXPECT_EQ(m.size(), 15u);
}

TEST(TrainableMask, SurgicalEndpointsOwnEmbeddingAndNorm) {
    EXPECT_EQ(trainable_ids(build_trainable_mask(FinetunePolicy::surgical(10, 12), 12)),
              (std::set<std::string>{"block_10", "block_11", "block_12", kFinalNorm, kHead}));
    EXPECT_EQ(trainable_ids(build_trainable_mask(FinetunePolicy::surgical(1, 3), 12)),
              (std::set<std::string>{kEmbedding, "block_1", "block_2", "block_3", kHead}));
}

TEST(TrainableMask, ShallowFullDepthEqualsEndToEnd) {
    EXPECT_EQ(build_trainable_mask(FinetunePolicy::shallow(12), 12),
              build_trainable_mask(FinetunePolicy::end_to_end(), 12));
    const auto m = build_trainable_mask(FinetunePolicy::shallow(3), 12);
    EXPECT_EQ(m.size(), 6u);
    for (const auto& [id, on] : m) EXPECT_TRUE(on) << id;
}

TEST(TrainableMask, QuartersPartitionBlocks) {
    std::map<std::string, int> hits;
    for (int q = 0; q < 4; ++q)
        for (const auto& id : trainable_ids(build_trainable_mask(FinetunePolicy::surgical(3 * q + 1, 3 * q + 3), 12)))
            ++hits[id];
    for (int i = 1; i <= 12; ++i) EXPECT_EQ(hits[block_id(i)], 1);
}

TEST(TrainableMask, RangeErrors) {
    EXPECT_THROW(build_trainable_mask(FinetunePolicy::surgical(10, 13), 12), InputError);
    EXPECT_THROW(build_trainable_mask(FinetunePolicy::surgical(0, 2), 12), InputError);
    EXPECT_THROW(build_trainable_mask(FinetunePolicy::surgical(5, 4), 12), InputError);
    EXPECT_THROW(build_trainable_mask(FinetunePolicy::shallow(13), 12), InputError);
    EXPECT_THROW(build_trainable_mask(FinetunePolicy::shallow(0), 12), InputError);
}

TEST(FinetunePolicy, LabelRoundTrip) {
    for (const auto& p : {FinetunePolicy::end_to_end(), FinetunePolicy::shallow(9), FinetunePolicy::surgical(4, 6)})
        EXPECT_EQ(FinetunePolicy::parse(p.label()), p);
    EXPECT_THROW(FinetunePolicy::parse("surgical:4"), ConfigError);
    EXPECT_THROW(FinetunePolicy::parse("shallow:x"), ConfigError);
    EXPECT_THROW(FinetunePolicy::parse("deep"), ConfigError);
}

TEST(TrainableCount, Accounting) {
    const auto c = deep_config();
    const auto enc = init_vit<float>(c, 0);
    const auto task = TaskSpec::classification(3);
    const auto full = attach_head(enc, task, 1);
    const std::int64_t block = enc.group(block_id(2)).numel(), head = full.group(kHead).numel();

    std::int64_t prev = -1;
    for (int q : {2, 3}) {  // interior quarters own neither embedding nor final norm
        const auto m = build_trainable_mask(FinetunePolicy::surgical(3 * q - 2, 3 * q), 12);
        const auto n = trainable_param_count(full, m);
        EXPECT_EQ(n, 3 * block + head);
        if (prev >= 0) EXPECT_EQ(n, prev);
        prev = n;
        EXPECT_LE(n, trainable_param_count(full, build_trainable_mask(FinetunePolicy::end_to_end(), 12)));
    }
    EXPECT_EQ(trainable_param_count(full, build_trainable_mask(FinetunePolicy::end_to_end(), 12)), full.numel());

    std::int64_t last = 0;
    for (int n = 1; n <= 12; ++n) {
        const auto p = FinetunePolicy::shallow(n);
        const auto model = prepare_model(enc, p, task, 1);
        const auto count = trainable_param_count(model, build_trainable_mask(p, 12));
        EXPECT_GT(count, last);
        EXPECT_EQ(count, model.numel());
        last = count;
    }
}

TEST(TrainableCount, MaskMismatch) {
    const auto model = attach_head(init_vit<float>(deep_config(4), 0), TaskSpec::classification(2), 0);
    EXPECT_THROW(trainable_param_count(model, build_trainable_mask(FinetunePolicy::end_to_end(), 12)), InputError);
    auto m = build_trainable_mask(FinetunePolicy::end_to_end(), 4);
    m.erase(kHead);
    EXPECT_THROW(check_mask(model, m), InputError);
}

TEST(AttachHead, ShapesAndIsolation) {
    const auto c = deep_config(4);
    const auto enc = init_vit<float>(c, 3);
    const auto images = testkit::random_images<float>(c, 5, 1);

    const auto a = attach_head(enc, TaskSpec::classification(3), 1);
    const auto b = attach_head(enc, TaskSpec::classification(3), 2);
    EXPECT_EQ(predict(a, images).shape(), (Shape{5, 3}));
    EXPECT_FALSE(bit_identical(a.group(kHead), b.group(kHead)));
    for (const auto& g : enc.groups) EXPECT_TRUE(bit_identical(a.group(g.id), b.group(g.id)));

    const auto s = attach_head(enc, TaskSpec::segmentation(4), 1);
    EXPECT_EQ(predict(s, images).shape(), (Shape{5, 1, 16, 16}));
    EXPECT_EQ(segmentation_taps(12), (std::set<int>{3, 6, 9, 12}));
    EXPECT_EQ(segmentation_taps(4), (std::set<int>{1, 2, 3, 4}));
}

TEST(AttachHead, SegmentationErrors) {
    EXPECT_THROW(attach_head(init_vit<float>(deep_config(3), 0), TaskSpec::segmentation(), 0), ConfigError);
    auto c = deep_config(4);
    c.image_size = 12;
    c.patch_size = 3;
    EXPECT_THROW(attach_head(init_vit<float>(c, 0), TaskSpec::segmentation(), 0), ConfigError);
}

TEST(AttachHead, ReplacesExistingHead) {
    const auto enc = init_vit<float>(deep_config(4), 0);
    const auto twice = attach_head(attach_head(enc, TaskSpec::classification(2), 0), TaskSpec::classification(5), 0);
    EXPECT_EQ(twice.groups.size(), enc.groups.size() + 1);
    EXPECT_EQ(twice.group(kHead).at("bias").numel(), 5);
}

TEST(ModelForward, GradientsMatchFiniteDifferences) {
    for (auto task : {TaskSpec::classification(2), TaskSpec::segmentation(2)}) {
        auto c = testkit::tiny_config();
        c.depth = 4;
        auto model = testkit::perturbed(attach_head(init_vit<double>(c, 0), task, 1), 2);
        const auto images = testkit::random_images<double>(c, 2, 3);
        std::vector<ParamGroup<double>*> groups;
        for (auto& g : model.groups) groups.push_back(&g);
        const auto r = testkit::check_group_gradients(groups, [&](const Binding<double>& b) {
            auto out = model_forward(b, c, task, images);
            Tensor<double> w(out.shape());
            Rng rng(9);
            for (auto& v : w.vec()) v = rng.normal() / std::sqrt(double(w.numel()));
            return ag::sum(ag::mul(out, ag::Var<double>::constant(w)));
        });
        EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
    }
}

TEST(EarlyStopping, TracesPatienceRule) {
    EarlyStopping s(10);
    int stopped = 0;
    for (int e = 1; e <= 100; ++e) {
        const double m = e <= 7 ? e : 7.0 - 0.1 * (e - 7);
        if (s.update(e, m)) {
            stopped = e;
            break;
        }
    }
    EXPECT_EQ(s.best_epoch(), 7);
    EXPECT_EQ(stopped, 17);

    EarlyStopping t(1);
    EXPECT_FALSE(t.update(1, 0.5));
    EXPECT_TRUE(t.update(2, 0.5));  // equal is not an improvement
    EXPECT_EQ(t.best_epoch(), 1);
}

TEST(ConvergenceEpoch, Examples) {
    RunRecord r;
    for (int e = 1; e <= 50; ++e) r.epochs.push_back({e, 1.0 / e, 0.5 + e * 0.001});
    EXPECT_EQ(convergence_epoch(r), 50);
    r.epochs.resize(1);
    EXPECT_EQ(convergence_epoch(r), 1);
    r.epochs.clear();
    EXPECT_THROW(convergence_epoch(r), InputError);
}

TEST(RunRecord, JsonRoundTripIsExact) {
    RunRecord r;
    r.epochs = {{1, 0.1 + 0.2, 1.0 / 3.0}, {2, std::nextafter(0.25, 1.0), 0.7}};
    r.best_epoch = r.convergence_epoch = 2;
    r.best_metric = 0.7;
    r.test_metric = 2.0 / 3.0;
    r.trainable_param_count = 1234;
    r.fingerprint = "ab";
    r.seed = 7;
    r.tags = {{"policy", "e2e"}};
    EXPECT_EQ(RunRecord::from_json(nlohmann::json::parse(r.to_json().dump())), r);
    EXPECT_THROW(RunRecord::from_json(nlohmann::json{{"epochs", 3}}), InputError);
}

TEST(Finetune, FrozenGroupsAreBitIdentical) {
    const auto c = deep_config();
    const auto start = attach_head(testkit::perturbed(init_vit<float>(c, 0), 1, 0.05), TaskSpec::classification(2), 2);
    const auto train = random_dataset(c, 40, 2, 1), val = random_dataset(c, 16, 2, 2);
    auto cfg = quick_config(1);
    const auto mask = build_trainable_mask(FinetunePolicy::surgical(4, 6), 12);
    const auto res = finetune(start, mask, train, val, val, cfg);
    EXPECT_EQ(res.record.best_epoch, 1);
    for (const auto& g : start.groups) {
        if (mask.at(g.id))
            EXPECT_FALSE(bit_identical(g, res.best.group(g.id))) << g.id;
        else
            EXPECT_TRUE(bit_identical(g, res.best.group(g.id))) << g.id;
    }
}

TEST(Finetune, ZeroLearningRateChangesNothing) {
    const auto c = deep_config(4);
    const auto start = attach_head(init_vit<float>(c, 0), TaskSpec::classification(2), 2);
    const auto train = random_dataset(c, 24, 2, 1), val = random_dataset(c, 16, 2, 2);
    auto cfg = quick_config(4);
    cfg.learning_rate = 0.0;
    const auto res = finetune(start, build_trainable_mask(FinetunePolicy::end_to_end(), 4), train, val, val, cfg);
    EXPECT_TRUE(bit_identical(res.best, start));
    ASSERT_EQ(res.record.epochs.size(), 4u);
    for (const auto& e : res.record.epochs) EXPECT_EQ(e.val_metric, res.record.epochs[0].val_metric);
    EXPECT_EQ(res.record.best_epoch, 1);
}

TEST(Finetune, ShallowFullDepthReproducesEndToEnd) {
    const auto c = deep_config(4);
    const auto enc = testkit::perturbed(init_vit<float>(c, 0), 1, 0.05);
    const auto task = TaskSpec::classification(2);
    const auto train = random_dataset(c, 24, 2, 1), val = random_dataset(c, 16, 2, 2);
    auto cfg = quick_config(3);
    cfg.augmentation = AugmentationPolicy{16, 0.5, 5.0, 0.8};
    auto run = [&](const FinetunePolicy& p) {
        return finetune(prepare_model(enc, p, task, 5), build_trainable_mask(p, 4), train, val, val, cfg);
    };
    const auto a = run(FinetunePolicy::shallow(4)), b = run(FinetunePolicy::end_to_end());
    EXPECT_EQ(a.record, b.record);
    EXPECT_TRUE(bit_identical(a.best, b.best));
    EXPECT_NE(a.record.fingerprint, run(FinetunePolicy::shallow(3)).record.fingerprint);
}

TEST(Finetune, DeterministicAndPatienceBounded) {
    const auto c = deep_config(4);
    const auto start = attach_head(init_vit<float>(c, 0), TaskSpec::classification(2), 2);
    const auto train = random_dataset(c, 24, 2, 1), val = random_dataset(c, 16, 2, 2);
    auto cfg = quick_config(30);
    cfg.early_stop_patience = 2;
    const auto mask = build_trainable_mask(FinetunePolicy::end_to_end(), 4);
    const auto a = finetune(start, mask, train, val, val, cfg), b = finetune(start, mask, train, val, val, cfg);
    EXPECT_EQ(a.record, b.record);
    const auto& r = a.record;
    EXPECT_LE(static_cast<int>(r.epochs.size()), r.best_epoch + 2);
    EXPECT_EQ(r.convergence_epoch, r.best_epoch);
    double mx = 0;
    for (const auto& e : r.epochs) mx = std::max(mx, e.val_metric);
    EXPECT_EQ(r.best_metric, mx);
    EXPECT_DOUBLE_EQ(r.test_metric, evaluate_model(a.best, val, compute_stats(train)));
}

TEST(Finetune, SegmentationTrainsWithDice) {
    const auto c = deep_config(4);
    const auto start = attach_head(init_vit<float>(c, 0), TaskSpec::segmentation(4), 2);
    const auto train = random_dataset(c, 16, 2, 1, true), val = random_dataset(c, 8, 2, 2, true);
    const auto res = finetune(start, build_trainable_mask(FinetunePolicy::surgical(2, 3), 4), train, val, val,
                              quick_config(2));
    for (const auto& e : res.record.epochs) {
        EXPECT_GE(e.val_metric, 0.0);
        EXPECT_LE(e.val_metric, 1.0);
        EXPECT_GT(e.train_loss, 0.0);
        EXPECT_LT(e.train_loss, 1.0);
    }
}

TEST(Finetune, NormalizationSource) {
    const auto c = deep_config(4);
    auto start = attach_head(init_vit<float>(c, 0), TaskSpec::classification(2), 2);
    const auto train = random_dataset(c, 24, 2, 1), val = random_dataset(c, 16, 2, 2);
    auto cfg = quick_config(1);
    cfg.normalization_source = NormalizationSource::pretrain_dataset;
    const auto mask = build_trainable_mask(FinetunePolicy::end_to_end(), 4);
    EXPECT_THROW(finetune(start, mask, train, val, val, cfg), ConfigError);
    NormalizationStats s{{0.25}, {2.0}, "elsewhere"};
    store_stats(start.metadata, s);
    const auto res = finetune(start, mask, train, val, val, cfg);
    EXPECT_DOUBLE_EQ(res.record.test_metric, evaluate_model(res.best, val, s));
}

TEST(Finetune, InputErrors) {
    const auto c = deep_config(4);
    const auto start = attach_head(init_vit<float>(c, 0), TaskSpec::classification(2), 2);
    const auto train = random_dataset(c, 24, 2, 1), val = random_dataset(c, 16, 2, 2);
    const auto mask = build_trainable_mask(FinetunePolicy::end_to_end(), 4);
    const auto cfg = quick_config(1);
    EXPECT_THROW(finetune(start, mask, train.subset({}), val, val, cfg), InputError);
    EXPECT_THROW(finetune(start, mask, train, val.subset({}), val, cfg), InputError);
    EXPECT_THROW(finetune(start, build_trainable_mask(FinetunePolicy::end_to_end(), 12), train, val, val, cfg),
                 InputError);
    EXPECT_THROW(finetune(start, mask, random_dataset(c, 24, 3, 1), val, val, cfg), InputError);
    const auto seg = attach_head(init_vit<float>(c, 0), TaskSpec::segmentation(), 2);
    EXPECT_THROW(finetune(seg, mask, train, val, val, cfg), InputError);
    EXPECT_THROW(finetune(init_vit<float>(c, 0), mask, train, val, val, cfg), InputError);
    auto bad = cfg;
    bad.early_stop_patience = 0;
    EXPECT_THROW(finetune(start, mask, train, val, val, bad), ConfigError);
}

}  // namespace
}  // namespace ftlab
