#include <gtest/gtest.h>

#include <fstream>
#include <map>

#include "ftlab/checkpoint.hpp"
#include "ftlab/sweep.hpp"
#include "support/tempdir.hpp"

namespace ftlab {
namespace {

RunRecord record(const std::string& fp, std::uint64_t seed, double metric = 0.5) {
    RunRecord r;
    r.fingerprint = fp;
    r.seed = seed;
    r.test_metric = metric;
    r.best_metric = metric;
    r.epochs = {{1, 0.7, metric}};
    r.best_epoch = r.convergence_epoch = 1;
    return r;
}

ExperimentConfig tiny(const testkit::TempDir& dir) {
    auto c = parse_config(R"(
[model]
image_size = 32
patch_size = 8
depth = 2
embed_dim = 16
num_heads = 2
[data]
n_train = 40
n_val = 16
n_test = 16
[finetune]
max_epochs = 2
batch_size = 16
[sweep]
methods = mae,random
policies = e2e,shallow:1
sizes = 12
seeds = 0,1
)");
    c.mae_checkpoint = dir.path() / "mae.ckpt";
    c.store = dir.path() / "results.jsonl";
    save_checkpoint(c.mae_checkpoint, Checkpoint{init_vit<float>(c.model, 42), {}});
    return c;
}

TEST(ResultStore, AppendDedupAndReload) {
    testkit::TempDir dir;
    ResultStore store(dir.path() / "nested" / "r.jsonl");
    EXPECT_TRUE(store.load().empty());
    EXPECT_TRUE(store.append(record("a", 0)));
    EXPECT_TRUE(store.append(record("a", 1)));
    EXPECT_FALSE(store.append(record("a", 0, 0.9)));
    EXPECT_TRUE(store.append(record("b", 0)));
    const auto rs = store.load();
    ASSERT_EQ(rs.size(), 3u);
    EXPECT_EQ(rs[0], record("a", 0));
    EXPECT_EQ(store.fingerprints().size(), 3u);
}

TEST(ResultStore, TornTailIsIgnoredAndRepaired) {
    testkit::TempDir dir;
    const auto path = dir.path() / "r.jsonl";
    ResultStore store(path);
    store.append(record("a", 0));
    std::ofstream(path, std::ios::app) << R"({"fingerprint":"b","se)";
    EXPECT_EQ(store.load().size(), 1u);
    EXPECT_TRUE(store.append(record("b", 0)));
    const auto rs = store.load();
    ASSERT_EQ(rs.size(), 2u);
    EXPECT_EQ(rs[1].fingerprint, "b");
}

TEST(ResultStore, MalformedLineNamesItsNumber) {
    testkit::TempDir dir;
    const auto path = dir.path() / "r.jsonl";
    ResultStore store(path);
    store.append(record("a", 0));
    std::ofstream(path, std::ios::app) << "{not json}\n";
    try {
        store.load();
        FAIL();
    } catch (const InputError& e) {
        EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
    }
}

TEST(PlanCells, FullGridAndFusionExpansion) {
    SweepGrid g;
    g.methods = {"moco", "mae"};
    g.policies = {"e2e", "shallow:3", "surgical:4-6", "surgical:10-12"};
    g.sizes = {100};
    g.seeds = {0, 1, 2};
    const auto cells = plan_cells(g);
    EXPECT_EQ(cells.size(), 24u);
    std::set<std::string> labels;
    for (const auto& c : cells) labels.insert(c.label());
    EXPECT_EQ(labels.size(), 24u);

    g.policies = {"e2e", "shallow9+9"};
    g.sizes = {10, 100};
    const auto mixed = plan_cells(g);
    EXPECT_EQ(mixed.size(), 2u * 2 * 3 + 2 * 3);
    EXPECT_EQ(mixed.back().method, "fusion");
    g.policies = {"late_fusion"};
    EXPECT_THROW(plan_cells(g), ConfigError);
}

TEST(CellFingerprint, DependsOnAxesConfigAndCheckpoint) {
    testkit::TempDir dir;
    auto c = tiny(dir);
    const SweepCell cell{"mae", "e2e", 12, 0};
    const auto fp = cell_fingerprint(c, cell);
    EXPECT_EQ(fp, cell_fingerprint(c, cell));
    EXPECT_NE(fp, cell_fingerprint(c, {"mae", "e2e", 12, 1}));
    EXPECT_NE(fp, cell_fingerprint(c, {"mae", "e2e", 13, 0}));
    EXPECT_NE(fp, cell_fingerprint(c, {"random", "e2e", 12, 0}));
    auto c2 = c;
    c2.finetune.learning_rate *= 2;
    EXPECT_NE(fp, cell_fingerprint(c2, cell));
    save_checkpoint(c.mae_checkpoint, Checkpoint{init_vit<float>(c.model, 43), {}});
    EXPECT_NE(fp, cell_fingerprint(c, cell));
}

TEST(Sweep, RerunIsIdempotentAndParallelMatchesSerial) {
    testkit::TempDir dir;
    const auto c = tiny(dir);
    const ResultStore serial(c.store), parallel(dir.path() / "par.jsonl");

    const auto first = run_sweep(c, serial, {});
    EXPECT_EQ(first.total, 8u);
    EXPECT_EQ(first.executed, 8u);
    EXPECT_TRUE(first.failed.empty());
    const auto again = run_sweep(c, serial, {});
    EXPECT_EQ(again.skipped, 8u);
    EXPECT_EQ(again.executed, 0u);
    EXPECT_EQ(serial.load().size(), 8u);

    SweepOptions opt;
    opt.parallelism = 3;
    EXPECT_EQ(run_sweep(c, parallel, opt).executed, 8u);
    std::map<std::string, RunRecord> a, b;
    for (const auto& r : serial.load()) a[r.fingerprint] = r;
    for (const auto& r : parallel.load()) b[r.fingerprint] = r;
    EXPECT_EQ(a, b);
    for (const auto& [fp, r] : a) {
        EXPECT_EQ(r.epochs.size(), 2u);
        EXPECT_TRUE(r.tags.count("method") && r.tags.count("policy") && r.tags.count("run_fingerprint"));
        EXPECT_EQ(r.tags.at("size"), "12");
    }
}

TEST(Sweep, DryRunListsStatus) {
    testkit::TempDir dir;
    const auto c = tiny(dir);
    const ResultStore store(c.store);
    store.append(run_cell(c, {"mae", "e2e", 12, 0}, experiment_data(c)));
    SweepOptions opt;
    opt.dry_run = true;
    std::map<std::string, std::string> seen;
    opt.on_cell = [&](const SweepCell& cell, const std::string& s) { seen[cell.label()] = s; };
    const auto s = run_sweep(c, store, opt);
    EXPECT_EQ(s.skipped, 1u);
    EXPECT_EQ(s.executed, 0u);
    EXPECT_EQ(seen.size(), 8u);
    EXPECT_EQ(seen.at("mae/e2e/n=12/seed=0"), "done");
    EXPECT_EQ(seen.at("random/e2e/n=12/seed=0"), "pending");
    EXPECT_EQ(store.load().size(), 1u);
}

TEST(Sweep, MissingCheckpointFailsFast) {
    testkit::TempDir dir;
    auto c = tiny(dir);
    c.mae_checkpoint = dir.path() / "absent.ckpt";
    const ResultStore store(c.store);
    try {
        run_sweep(c, store, {});
        FAIL();
    } catch (const InputError& e) {
        EXPECT_NE(std::string(e.what()).find("absent.ckpt"), std::string::npos);
    }
    EXPECT_FALSE(std::filesystem::exists(c.store));
}

}  // namespace
}  // namespace ftlab
