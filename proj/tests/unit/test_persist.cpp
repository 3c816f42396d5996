#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "layton/checkpoint.hpp"
#include "layton/config.hpp"

using namespace layton;

namespace {

std::string tmp(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "layton_persist";
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

ParamStoreT<float> demo_store(uint64_t seed) {
    Rng rng = Rng::seeded(seed);
    ParamStoreT<float> ps;
    ps.add("m.w", Tensor::randn({4, 3}, rng));
    ps.add("m.b", Tensor::randn({3}, rng));
    ps.add("m.frozen", Tensor::randn({2, 2, 2, 2}, rng), false);
    return ps;
}

}  // namespace

TEST_CASE("checkpoint round trip is bitwise") {
    auto ps = demo_store(1);
    CheckpointMeta meta;
    meta.stage = "train-vq";
    meta.step = 123;
    meta.config_hash = "cafe";
    meta.extra["latent_scale"] = 0.75;
    CheckpointPayload pay;
    pay.add_store(ps);
    auto path = tmp("round.ckpt");
    save_checkpoint(path, meta, pay);

    auto ck = load_checkpoint(path);
    CHECK(ck.meta.stage == "train-vq");
    CHECK(ck.meta.step == 123);
    CHECK(ck.meta.config_hash == "cafe");
    CHECK(ck.meta.extra.at("latent_scale").get<double>() == 0.75);

    auto ps2 = demo_store(99);  // same shapes, different values
    apply_to_store(ck, ps2);
    for (int i = 0; i < ps.size(); ++i)
        for (int64_t j = 0; j < ps.at(i).value.size(); ++j)
            REQUIRE(ps2.at(i).value[j] == ps.at(i).value[j]);
}

TEST_CASE("truncated and corrupted files are integrity errors, nothing applied") {
    auto ps = demo_store(2);
    CheckpointMeta meta;
    meta.stage = "train-ldm";
    CheckpointPayload pay;
    pay.add_store(ps);
    auto path = tmp("trunc.ckpt");
    save_checkpoint(path, meta, pay);

    auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size / 2);
    CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);

    save_checkpoint(path, meta, pay);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(long(size / 2));
        char b = 0x5a;
        f.write(&b, 1);
    }
    CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);
}

TEST_CASE("wrong stage fails fast; mismatched shapes name the parameters") {
    auto ps = demo_store(3);
    CheckpointMeta meta;
    meta.stage = "train-vq";
    CheckpointPayload pay;
    pay.add_store(ps);
    auto path = tmp("stage.ckpt");
    save_checkpoint(path, meta, pay);
    auto ck = load_checkpoint(path);
    CHECK_THROWS_AS(expect_stage(ck, "train-ladd"), StageOrderError);

    ParamStoreT<float> other;
    Rng rng = Rng::seeded(4);
    other.add("m.w", Tensor::randn({4, 4}, rng));  // wrong shape
    other.add("m.extra", Tensor::randn({2}, rng)); // missing from file
    try {
        apply_to_store(ck, other);
        FAIL("expected IntegrityError");
    } catch (const IntegrityError& e) {
        std::string msg = e.what();
        CHECK(msg.find("m.w") != std::string::npos);
        CHECK(msg.find("m.extra") != std::string::npos);
    }
}

TEST_CASE("format version mismatches are refused") {
    auto ps = demo_store(5);
    CheckpointMeta meta;
    meta.stage = "x";
    meta.format_version = 999;
    CheckpointPayload pay;
    pay.add_store(ps);
    auto path = tmp("ver.ckpt");
    save_checkpoint(path, meta, pay);
    CHECK_THROWS_AS(load_checkpoint(path), IntegrityError);
}

TEST_CASE("config: file parsing, comments, unknown keys, env overrides, hash") {
    auto path = tmp("run.cfg");
    {
        std::ofstream f(path);
        f << "# comment line\n";
        f << "vq_iters = 77\n";
        f << "cond_sizes = 12, 16, 20\n";
        f << "stage2_mode = two_step\n";
    }
    RunConfig cfg;
    cfg.load_file(path);
    CHECK(cfg.get_int("vq_iters") == 77);
    CHECK(cfg.get_int_list("cond_sizes") == std::vector<int>{12, 16, 20});
    CHECK(cfg.get_str("stage2_mode") == "two_step");
    CHECK(cfg.get_real("vq_beta_commit") == 0.25);  // untouched default

    {
        std::ofstream f(path);
        f << "vq_iters = 10\nnot_a_key = 3\n";
    }
    RunConfig bad;
    try {
        bad.load_file(path);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        std::string msg = e.what();
        CHECK(msg.find("not_a_key") != std::string::npos);
        CHECK(msg.find(":2") != std::string::npos);  // line number
    }

    {
        std::ofstream f(path);
        f << "vq_iters = banana\n";
    }
    RunConfig bad2;
    CHECK_THROWS_AS(bad2.load_file(path), ConfigError);

    RunConfig a, b;
    CHECK(a.hash() == b.hash());
    b.set("vq_iters", "78");
    CHECK(a.hash() != b.hash());

    setenv("LAYTON_VQ_ITERS", "55", 1);
    RunConfig env_cfg;
    env_cfg.apply_env_overrides();
    CHECK(env_cfg.get_int("vq_iters") == 55);
    unsetenv("LAYTON_VQ_ITERS");

    CHECK(cfg.get_real_list("eval_cfg_scales") == std::vector<double>{1.5, 2, 3, 7});
}
