#include "ftlab/checkpoint.hpp"

#include <gtest/gtest.h>

#include <fstream>

#include "ftlab/vit.hpp"
#include "support/fixtures.hpp"
#include "support/tempdir.hpp"

using namespace ftlab;

TEST(Checkpoint, BitExactRoundTripWithExtras) {
    testkit::TempDir dir;
    Checkpoint ck;
    ck.params = init_vit<float>(testkit::tiny_config(), 3);
    ck.params.metadata["ssl_method"] = "mae";
    ck.params.metadata["pretrain_loss"] = "0.125";
    ck.extras.push_back({"mae_decoder", {{"mask_token", Tensor<float>(Shape{4}, {1.5f, -0.0f, 3e-38f, 7.f})}}});
    const auto path = dir.path() / "a.ckpt";
    save_checkpoint(path, ck);
    auto back = load_checkpoint(path);
    EXPECT_TRUE(bit_identical(back.params, ck.params));
    EXPECT_EQ(back.params.metadata, ck.params.metadata);
    ASSERT_NE(back.extra("mae_decoder"), nullptr);
    EXPECT_TRUE(bit_identical(*back.extra("mae_decoder"), ck.extras[0]));

    // Re-saving the loaded checkpoint reproduces the file byte for byte.
    const auto path2 = dir.path() / "b.ckpt";
    save_checkpoint(path2, back);
    EXPECT_EQ(file_sha256(path), file_sha256(path2));
}

TEST(Checkpoint, ManifestDescribesLayout) {
    testkit::TempDir dir;
    Checkpoint ck;
    ck.params = init_vit<float>(testkit::tiny_config(), 0);
    save_checkpoint(dir.path() / "m.ckpt", ck);
    auto m = read_checkpoint_manifest(dir.path() / "m.ckpt");
    EXPECT_EQ(m["config"]["depth"], 2);
    EXPECT_EQ(m["groups"].size(), 4u);
    EXPECT_EQ(m["groups"][0]["id"], "embedding");
    EXPECT_EQ(m["groups"][0]["arrays"][0]["dtype"], "f32");
    EXPECT_EQ(m["groups"][0]["arrays"][0]["offset"], 0);
}

TEST(Checkpoint, DoublePrecisionAndDtypeMismatch) {
    testkit::TempDir dir;
    BasicCheckpoint<double> ck;
    ck.params = init_vit<double>(testkit::tiny_config(), 1);
    save_checkpoint(dir.path() / "d.ckpt", ck);
    EXPECT_TRUE(bit_identical(load_checkpoint<double>(dir.path() / "d.ckpt").params, ck.params));
    EXPECT_THROW(load_checkpoint<float>(dir.path() / "d.ckpt"), InputError);
}

TEST(Checkpoint, RejectsCorruptFiles) {
    testkit::TempDir dir;
    {
        std::ofstream os(dir.path() / "junk.ckpt");
        os << "not a checkpoint";
    }
    EXPECT_THROW(load_checkpoint(dir.path() / "junk.ckpt"), InputError);
    EXPECT_THROW(load_checkpoint(dir.path() / "missing.ckpt"), InputError);

    Checkpoint ck;
    ck.params = init_vit<float>(testkit::tiny_config(), 0);
    save_checkpoint(dir.path() / "t.ckpt", ck);
    std::filesystem::resize_file(dir.path() / "t.ckpt", std::filesystem::file_size(dir.path() / "t.ckpt") - 8);
    EXPECT_THROW(load_checkpoint(dir.path() / "t.ckpt"), InputError);
}
