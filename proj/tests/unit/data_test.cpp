#include "ftlab/data.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <set>

#include "ftlab/metrics.hpp"
#include "support/tempdir.hpp"

using namespace ftlab;

namespace {

SyntheticConfig small_config(std::uint64_t seed = 0) {
    SyntheticConfig c;
    c.n_train = 60;
    c.n_val = 10;
    c.n_test = 20;
    c.seed = seed;
    return c;
}

}  // namespace

TEST(Split, ExactFractionsAndPartition) {
    const auto s = split_indices(100, SplitSpec{});
    EXPECT_EQ(s.train.size(), 70u);
    EXPECT_EQ(s.val.size(), 10u);
    EXPECT_EQ(s.test.size(), 20u);
    std::set<std::int64_t> all(s.train.begin(), s.train.end());
    all.insert(s.val.begin(), s.val.end());
    all.insert(s.test.begin(), s.test.end());
    EXPECT_EQ(all.size(), 100u);
    EXPECT_EQ(*all.begin(), 0);
    EXPECT_EQ(*all.rbegin(), 99);
}

TEST(Split, DeterministicPerSeedAndRoundsSizes) {
    EXPECT_EQ(split_indices(57, {0.7, 0.1, 0.2, 4}).train, split_indices(57, {0.7, 0.1, 0.2, 4}).train);
    EXPECT_NE(split_indices(57, {0.7, 0.1, 0.2, 4}).train, split_indices(57, {0.7, 0.1, 0.2, 5}).train);
    for (std::int64_t n = 10; n < 80; ++n) {
        const auto s = split_indices(n, SplitSpec{});
        EXPECT_LE(std::abs(double(s.train.size()) - 0.7 * n), 0.5 + 1e-9);
        EXPECT_LE(std::abs(double(s.val.size()) - 0.1 * n), 0.5 + 1e-9);
        EXPECT_LE(std::abs(double(s.test.size()) - 0.2 * n), 1.0 + 1e-9);
        EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), std::size_t(n));
    }
}

TEST(Split, RejectsSmallManifestsAndBadFractions) {
    EXPECT_THROW(split_indices(9, SplitSpec{}), InputError);
    EXPECT_THROW(split_indices(100, {0.5, 0.1, 0.1, 0}), ConfigError);
}

TEST(Split, ManifestEntriesFollowIndices) {
    ClassificationManifest m;
    m.class_names = {"a"};
    for (int i = 0; i < 20; ++i) m.entries.push_back({"img" + std::to_string(i) + ".png", {std::uint8_t(i % 2)}});
    const auto parts = split(m, SplitSpec{});
    const auto idx = split_indices(20, SplitSpec{});
    ASSERT_EQ(parts.train.entries.size(), idx.train.size());
    for (std::size_t i = 0; i < idx.train.size(); ++i) EXPECT_EQ(parts.train.entries[i], m.entries[idx.train[i]]);
    EXPECT_EQ(parts.test.class_names, m.class_names);
}

TEST(Subsample, SizesIdentityAndDeterminism) {
    const auto full = subsample_indices(50, 50, 3);
    for (std::int64_t i = 0; i < 50; ++i) EXPECT_EQ(full[i], i);
    EXPECT_EQ(subsample_indices(50, 80, 3).size(), 50u);
    const auto a = subsample_indices(2000, 100, 7);
    EXPECT_EQ(a.size(), 100u);
    EXPECT_EQ(std::set<std::int64_t>(a.begin(), a.end()).size(), 100u);
    EXPECT_EQ(a, subsample_indices(2000, 100, 7));
    EXPECT_NE(a, subsample_indices(2000, 100, 8));
    EXPECT_THROW(subsample_indices(10, 0, 0), InputError);
}

TEST(Subsample, UniformInclusion) {
    // Every index should be drawn with probability n/size.
    std::vector<int> hits(40, 0);
    const int trials = 4000;
    for (int t = 0; t < trials; ++t)
        for (auto i : subsample_indices(40, 10, static_cast<std::uint64_t>(t))) ++hits[i];
    for (int h : hits) EXPECT_NEAR(h / double(trials), 0.25, 0.035);
}

TEST(Stats, ClosedFormOracle) {
    Dataset d;
    d.images = Tensor<float>(Shape{2, 1, 1, 2}, {0.0f, 0.5f, 0.25f, 1.0f});
    const auto s = compute_stats(d);
    const double mean = (0.0 + 0.5 + 0.25 + 1.0) / 4.0;
    const double var = (std::pow(0.0 - mean, 2) + std::pow(0.5 - mean, 2) + std::pow(0.25 - mean, 2) +
                        std::pow(1.0 - mean, 2)) / 4.0;
    EXPECT_DOUBLE_EQ(s.mean[0], mean);
    EXPECT_NEAR(s.std[0], std::sqrt(var), 1e-12);

    Dataset p;
    p.images = Tensor<float>(Shape{2, 1, 1, 2}, {0.25f, 1.0f, 0.0f, 0.5f});
    const auto sp = compute_stats(p);
    EXPECT_DOUBLE_EQ(sp.mean[0], s.mean[0]);
    EXPECT_NEAR(sp.std[0], s.std[0], 1e-15);
}

TEST(Stats, RejectsConstantAndEmpty) {
    Dataset d;
    d.images = Tensor<float>(Shape{3, 1, 4, 4}, 0.5f);
    EXPECT_THROW(compute_stats(d), InputError);
    EXPECT_THROW(compute_stats(Dataset{}), InputError);
}

TEST(Synthetic, DeterministicAndMaskIffLesion) {
    const auto a = synth_generate(small_config(1));
    const auto b = synth_generate(small_config(1));
    EXPECT_EQ(a.train.images, b.train.images);
    EXPECT_EQ(a.train.masks, b.train.masks);
    EXPECT_EQ(a.class_names.size(), 4u);
    for (const Dataset* d : {&a.train, &a.val, &a.test}) {
        for (std::int64_t i = 0; i < d->size(); ++i) {
            bool any_label = false, any_mask = false;
            for (std::int64_t c = 0; c < 4; ++c) any_label |= d->labels[i * 4 + c] != 0;
            for (std::int64_t p = 0; p < 64 * 64; ++p) any_mask |= d->masks[i * 64 * 64 + p] != 0;
            EXPECT_EQ(any_label, any_mask) << "sample " << i;
        }
    }
    const auto c = synth_generate(small_config(2));
    EXPECT_NE(a.train.images, c.train.images);
}

TEST(Synthetic, NoiselessMasksCoverExactlyTheBrightening) {
    auto cfg = small_config(3);
    cfg.noise = 0.0;
    cfg.classes.resize(1);
    cfg.class_prob = 0.9;
    const auto data = synth_generate(cfg);
    // Without noise each image is a smooth background plus lesion intensity; a lesion pixel
    // stands out against its unmasked neighbours by at least the minimum intensity.
    const auto& d = data.train;
    int checked = 0;
    for (std::int64_t i = 0; i < d.size(); ++i)
        for (int y = 1; y < 63; ++y)
            for (int x = 1; x < 63; ++x) {
                const auto at = [&](int yy, int xx) { return d.images[(i * 64 + yy) * 64 + xx]; };
                const auto m = [&](int yy, int xx) { return d.masks[(i * 64 + yy) * 64 + xx]; };
                if (m(y, x) && !m(y, x + 1)) {
                    EXPECT_GT(at(y, x) - at(y, x + 1), cfg.classes[0].min_intensity - 0.02);
                    ++checked;
                }
            }
    EXPECT_GT(checked, 100);
}

TEST(Synthetic, LabelMarginalsAgreeAcrossSeeds) {
    auto cfg = small_config(10);
    cfg.n_train = 1500;
    cfg.n_val = cfg.n_test = 0;
    const auto a = synth_generate(cfg);
    cfg.seed = 11;
    const auto b = synth_generate(cfg);
    for (int c = 0; c < 4; ++c) {
        double fa = 0, fb = 0;
        for (std::int64_t i = 0; i < 1500; ++i) {
            fa += a.train.labels[i * 4 + c];
            fb += b.train.labels[i * 4 + c];
        }
        fa /= 1500;
        fb /= 1500;
        // Each frequency has standard error sqrt(0.3*0.7/1500) ~ 0.012.
        EXPECT_NEAR(fa, 0.3, 0.05);
        EXPECT_NEAR(fa - fb, 0.0, 0.06);
    }
}

TEST(Synthetic, RejectsContradictoryGrammar) {
    SyntheticConfig c;
    c.classes[1].shape = Primitive::disk;  // same primitive and size range as class 0
    EXPECT_THROW(c.validate(), ConfigError);
    c.classes[1].min_size = 6.0;
    c.classes[1].max_size = 8.0;
    EXPECT_NO_THROW(c.validate());
    c.class_prob = 1.5;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_THROW(primitive_from_string("blob"), ConfigError);
}

TEST(Synthetic, WriteAndReloadRoundTrip) {
    testkit::TempDir dir;
    const auto data = synth_generate(small_config(4));
    synth_write(data, dir.path());
    const auto back = load_splits(dir.path());
    EXPECT_EQ(back.class_names, data.class_names);
    EXPECT_EQ(back.train.images, data.train.images);
    EXPECT_EQ(back.train.labels, data.train.labels);
    EXPECT_EQ(back.test.masks, data.test.masks);

    const auto seg = read_segmentation_manifest(dir.path() / "seg_val.tsv");
    EXPECT_EQ(seg.entries.size(), 10u);
    EXPECT_EQ(load_dataset(seg).masks, data.val.masks);
}

TEST(Manifest, TextFormatIsExact) {
    testkit::TempDir dir;
    ClassificationManifest m;
    m.class_names = {"x", "y"};
    m.entries = {{"a/1.png", {0, 1}}, {"a/2.png", {1, 1}}};
    write_manifest(dir.path() / "c.tsv", m);
    std::ifstream is(dir.path() / "c.tsv");
    const std::string text((std::istreambuf_iterator<char>(is)), {});
    EXPECT_EQ(text, "#classification\tx,y\na/1.png\t0,1\na/2.png\t1,1\n");
    EXPECT_EQ(read_classification_manifest(dir.path() / "c.tsv").entries, m.entries);

    std::ofstream(dir.path() / "bad.tsv") << "#classification\tx,y\na.png\t0,2\n";
    EXPECT_THROW(read_classification_manifest(dir.path() / "bad.tsv"), InputError);
    std::ofstream(dir.path() / "short.tsv") << "#classification\tx,y\na.png\t0\n";
    EXPECT_THROW(read_classification_manifest(dir.path() / "short.tsv"), InputError);
}

TEST(Manifest, MaskDimensionMismatchRejected) {
    testkit::TempDir dir;
    std::vector<std::uint8_t> img(16 * 16, 100), msk(8 * 8, 255);
    write_gray_png(dir.path() / "i.png", img.data(), 16, 16);
    write_gray_png(dir.path() / "m.png", msk.data(), 8, 8);
    SegmentationManifest m{{{"i.png", "m.png"}}, dir.path()};
    EXPECT_THROW(load_dataset(m), InputError);
}

TEST(Augment, DegeneratePolicyIsIdentity) {
    const auto data = synth_generate(small_config(5));
    Tensor<float> img(Shape{1, 64, 64}, std::vector<float>(data.train.images.data(), data.train.images.data() + 4096));
    Rng rng(0);
    const AugmentationPolicy p{64, 0.0, 0.0, 1.0};
    EXPECT_EQ(augment(img, p, rng), img);
}

TEST(Augment, FlipFrequencyMatchesProbability) {
    // An image whose left half is dark and right half bright: a flip swaps the halves.
    Tensor<float> img(Shape{1, 16, 16});
    for (int y = 0; y < 16; ++y)
        for (int x = 8; x < 16; ++x) img[y * 16 + x] = 1.0f;
    Rng rng(1);
    for (double prob : {0.3, 0.5}) {
        const AugmentationPolicy p{16, prob, 0.0, 1.0};
        int flips = 0;
        const int n = 10000;
        for (int t = 0; t < n; ++t) flips += augment(img, p, rng)[0] > 0.5f;
        // Binomial standard error at most 0.005.
        EXPECT_NEAR(flips / double(n), prob, 0.02);
    }
}

TEST(Augment, PairViewsDifferAndSizeChecked) {
    Tensor<float> img(Shape{1, 32, 32});
    Rng fill(2);
    for (auto& v : img.vec()) v = static_cast<float>(fill.uniform());
    Rng rng(3);
    const auto [a, b] = augment_pair(img, AugmentationPolicy{24, 0.5, 7.0, 0.6}, rng);
    EXPECT_EQ(a.shape(), (Shape{1, 24, 24}));
    EXPECT_NE(a, b);
    EXPECT_THROW(augment(img, AugmentationPolicy{40, 0.5, 7.0, 0.6}, rng), InputError);
    EXPECT_THROW(augment(img, AugmentationPolicy{24, 1.5, 7.0, 0.6}, rng), ConfigError);
}

TEST(LoadBatch, IdentityStatsAndEvalDeterminism) {
    const auto data = synth_generate(small_config(6));
    Rng rng(0);
    const NormalizationStats unit{{0.0}, {1.0}, "unit"};
    const auto b = load_batch(data.train, {3, 1}, unit, std::nullopt, rng);
    for (std::int64_t p = 0; p < 4096; ++p) EXPECT_EQ(b.images[p], data.train.images[3 * 4096 + p]);
    EXPECT_EQ(b.labels.shape(), (Shape{2, 4}));
    EXPECT_EQ(b.masks.shape(), (Shape{2, 1, 64, 64}));
    Rng other(99);
    EXPECT_EQ(load_batch(data.train, {3, 1}, unit, std::nullopt, other).images, b.images);
    EXPECT_THROW(load_batch(data.train, {}, unit, std::nullopt, rng), InputError);
}

TEST(LoadBatch, OwnStatsGiveZeroMeanUnitStd) {
    const auto data = synth_generate(small_config(7));
    const auto stats = compute_stats(data.train);
    std::vector<std::int64_t> all(static_cast<std::size_t>(data.train.size()));
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<std::int64_t>(i);
    Rng rng(0);
    const auto b = load_batch(data.train, all, stats, std::nullopt, rng);
    double s = 0, ss = 0;
    for (float v : b.images.vec()) s += v;
    const double mean = s / b.images.numel();
    for (float v : b.images.vec()) ss += (v - mean) * (v - mean);
    EXPECT_NEAR(mean, 0.0, 1e-3);
    EXPECT_NEAR(std::sqrt(ss / b.images.numel()), 1.0, 1e-3);
}

TEST(LoadBatch, MasksFollowAugmentedGeometry) {
    // The image equals its mask, so augmentation must move both the same way.
    Dataset d;
    d.images = Tensor<float>(Shape{1, 1, 32, 32});
    d.masks.assign(32 * 32, 0);
    for (int y = 6; y < 20; ++y)
        for (int x = 4; x < 14; ++x) {
            d.images[y * 32 + x] = 1.0f;
            d.masks[y * 32 + x] = 1;
        }
    Rng rng(5);
    const NormalizationStats unit{{0.0}, {1.0}, "unit"};
    for (int t = 0; t < 20; ++t) {
        const auto b = load_batch(d, {0}, unit, AugmentationPolicy{32, 0.5, 10.0, 0.5}, rng);
        // Away from mask edges the thresholded image and the mask agree exactly.
        const auto mk = [&](int y, int x) { return b.masks[y * 32 + x] > 0.5f; };
        for (int y = 1; y < 31; ++y)
            for (int x = 1; x < 31; ++x) {
                bool edge = false;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) edge |= mk(y + dy, x + dx) != mk(y, x);
                if (!edge) EXPECT_EQ(b.images[y * 32 + x] > 0.5f, mk(y, x)) << y << "," << x;
            }
    }
}

TEST(Synthetic, LinearProbeCalibrationWindow) {
    // Ridge regression on standardized raw pixels, solved in dual form, one output per class.
    SyntheticConfig cfg;
    const auto data = synth_generate(cfg);
    const auto& tr = data.train;
    const auto& te = data.test;
    const Eigen::Index n = tr.size(), m = te.size(), d = 64 * 64, c = 4;
    using RowMajorF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::MatrixXd x = Eigen::Map<const RowMajorF>(tr.images.data(), n, d).cast<double>();
    Eigen::MatrixXd xt = Eigen::Map<const RowMajorF>(te.images.data(), m, d).cast<double>();
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const Eigen::RowVectorXd sd =
        ((x.rowwise() - mu).array().square().colwise().mean()).sqrt().max(1e-6).matrix();
    x = ((x.rowwise() - mu).array().rowwise() / sd.array()).matrix();
    xt = ((xt.rowwise() - mu).array().rowwise() / sd.array()).matrix();
    Eigen::MatrixXd y(n, c);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index k = 0; k < c; ++k) y(i, k) = tr.labels[i * c + k];
    const Eigen::RowVectorXd ymean = y.colwise().mean();
    y = y.rowwise() - ymean;

    const double lambda = 1e4;
    Eigen::MatrixXd gram = x * x.transpose();
    gram.diagonal().array() += lambda;
    const Eigen::MatrixXd alpha = gram.llt().solve(y);
    const Eigen::MatrixXd scores = xt * (x.transpose() * alpha);
    PredictionSet pred{m, c, std::vector<double>(std::size_t(m * c)), te.labels};
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index k = 0; k < c; ++k) pred.scores[i * c + k] = scores(i, k);
    const double auc = mean_auc(pred);
    RecordProperty("linear_probe_mauc", std::to_string(auc));
    EXPECT_GT(auc, 0.6);
    EXPECT_LT(auc, 0.95);
}
