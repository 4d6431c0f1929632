#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "ftlab/checkpoint.hpp"
#include "ftlab/sweep.hpp"
#include "support/tempdir.hpp"

namespace ftlab {
namespace {

struct Run {
    int code = -1;
    std::string out;
};

Run ftlab_cli(const std::string& args) {
    const std::string cmd = std::string(FTLAB_CLI) + " " + args + " 2>&1";
    Run r;
    FILE* p = ::popen(cmd.c_str(), "r");
    char buf[4096];
    for (std::size_t n; (n = std::fread(buf, 1, sizeof buf, p)) > 0;) r.out.append(buf, n);
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

void write_tiny_config(const std::filesystem::path& path) {
    std::ofstream(path) << "[model]\nimage_size = 32\npatch_size = 8\ndepth = 3\nembed_dim = 16\nnum_heads = 2\n"
                           "[data]\nn_train = 12\nn_val = 4\nn_test = 4\n";
}

TEST(Cli, GenDataIsDeterministicPerSeed) {
    testkit::TempDir dir;
    const auto cfg = dir.path() / "c.ini";
    write_tiny_config(cfg);
    const auto base = "gen-data --config " + cfg.string();
    ASSERT_EQ(ftlab_cli(base + " --seed 3 --out " + (dir.path() / "a").string()).code, 0);
    ASSERT_EQ(ftlab_cli(base + " --seed 3 --out " + (dir.path() / "b").string()).code, 0);
    ASSERT_EQ(ftlab_cli(base + " --seed 4 --out " + (dir.path() / "c").string()).code, 0);
    const auto manifest = std::filesystem::path("cls_train.tsv");
    EXPECT_EQ(slurp(dir.path() / "a" / manifest), slurp(dir.path() / "b" / manifest));
    std::size_t files = 0;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir.path() / "a")) {
        if (!e.is_regular_file()) continue;
        ++files;
        const auto rel = std::filesystem::relative(e.path(), dir.path() / "a");
        EXPECT_EQ(slurp(e.path()), slurp(dir.path() / "b" / rel)) << rel;
    }
    EXPECT_GT(files, 20u);
    EXPECT_NE(slurp(dir.path() / "a" / manifest), slurp(dir.path() / "c" / manifest));
}

TEST(Cli, TruncateWritesShallowerCheckpoint) {
    testkit::TempDir dir;
    ViTConfig c;
    c.image_size = 32;
    c.patch_size = 8;
    c.depth = 4;
    c.embed_dim = 16;
    c.num_heads = 2;
    const auto src = dir.path() / "full.ckpt", dst = dir.path() / "t.ckpt";
    const auto params = init_vit<float>(c, 1);
    save_checkpoint(src, Checkpoint{params, {}});
    const auto r = ftlab_cli("truncate --checkpoint " + src.string() + " --depth 2 --out " + dst.string());
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(nlohmann::json::parse(r.out).at("depth"), 2);
    EXPECT_TRUE(bit_identical(load_checkpoint<float>(dst).params, truncate(params, 2)));

    const auto bad = ftlab_cli("truncate --checkpoint " + src.string() + " --depth 7 --out " + dst.string());
    EXPECT_EQ(bad.code, 3);
    EXPECT_EQ(nlohmann::json::parse(bad.out).at("error"), "input_error");
}

TEST(Cli, ConfigErrorsAreSingleLineJson) {
    testkit::TempDir dir;
    const auto cfg = dir.path() / "c.ini";
    std::ofstream(cfg) << "[finetune]\nlearning_rat = 0.1\n";
    const auto r = ftlab_cli("gen-data --config " + cfg.string() + " --out " + (dir.path() / "x").string());
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 1);
    const auto j = nlohmann::json::parse(r.out);
    EXPECT_EQ(j.at("error"), "config_error");
    EXPECT_NE(j.at("message").get<std::string>().find("learning_rat"), std::string::npos);
    EXPECT_EQ(ftlab_cli("aggregate --store " + (dir.path() / "none.jsonl").string()).code, 3);
}

TEST(Cli, AggregateReadsStore) {
    testkit::TempDir dir;
    const ResultStore store(dir.path() / "r.jsonl");
    for (std::uint64_t s = 0; s < 3; ++s) {
        RunRecord r;
        r.fingerprint = "cell" + std::to_string(s);
        r.seed = s;
        r.test_metric = 0.5 + 0.1 * static_cast<double>(s);
        r.tags = {{"method", "mae"}, {"policy", "e2e"}, {"size", "10"}};
        store.append(r);
    }
    const auto r = ftlab_cli("aggregate --format csv --group-by method --store " + store.path().string());
    ASSERT_EQ(r.code, 0) << r.out;
    ASSERT_EQ(r.out.rfind("method,n,mean,std\nmae,3,", 0), 0u) << r.out;
    const auto tail = r.out.substr(r.out.find("mae,3,") + 6);
    EXPECT_NEAR(std::stod(tail), 0.6, 1e-12);
    EXPECT_NEAR(std::stod(tail.substr(tail.find(',') + 1)), 0.1, 1e-12);
}

}  // namespace
}  // namespace ftlab
