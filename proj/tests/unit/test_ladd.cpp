#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "micro_pipeline.hpp"

using namespace layton;

TEST_CASE("build_ladd requires a trained base") {
    LdmConfig lc;
    lc.unet.base = 8;
    LatentDmT<float> untrained(lc, 7);
    CHECK_THROWS_AS(build_ladd(untrained, 8), StageOrderError);
}

TEST_CASE("construction: copies bitwise equal, zero convs exactly zero") {
    auto& fx = micro::fixture();
    auto ladd = build_ladd(fx.ldm, fx.vq.cfg.code_dim, 11);

    // every cloned parameter equals its source bitwise
    int compared = 0;
    for (int i = 0; i < ladd.params.size(); ++i) {
        const auto& p = ladd.params.at(i);
        if (p.name.rfind("ladd.zc_", 0) == 0 || p.name.rfind("ladd.cond_adapter", 0) == 0) continue;
        std::string rest = p.name.substr(std::string("ladd.").size());
        int si = fx.ldm.unet.params.find("unet." + rest);
        REQUIRE(si >= 0);
        const auto& sp = fx.ldm.unet.params.at(si);
        REQUIRE(sp.value.size() == p.value.size());
        for (int64_t j = 0; j < p.value.size(); ++j) REQUIRE(p.value[j] == sp.value[j]);
        ++compared;
    }
    CHECK(compared > 10);

    // zero convs: all weights and biases exactly zero, output exactly zero
    for (const char* zc : {"ladd.zc_e1", "ladd.zc_e2", "ladd.zc_m"}) {
        for (const char* suffix : {".w", ".b"}) {
            int pi = ladd.params.find(std::string(zc) + suffix);
            REQUIRE(pi >= 0);
            for (auto v : ladd.params.at(pi).value.data) CHECK(v == 0.0f);
        }
    }
    Rng rng = Rng::seeded(3);
    TapeT<float> tape;
    auto bp = bind(tape, ladd.params, false);
    auto x = input(tape, Tensor::randn({1, 12, 4, 4}, rng), false);
    auto out = ladd.zc_e1.forward(bp, x);
    for (int64_t i = 0; i < out.val().size(); ++i) CHECK(out.val()[i] == 0.0f);
}

TEST_CASE("trainable parameter count matches the architecture") {
    auto& fx = micro::fixture();
    auto ladd = build_ladd(fx.ldm, fx.vq.cfg.code_dim, 13);
    int b = fx.ldm.unet.cfg.base;       // 12
    int td = fx.ldm.unet.cfg.tdim;      // 32
    int in_ch = fx.ldm.unet.cfg.in_ch;  // 4
    int d = fx.vq.cfg.code_dim;         // 8

    auto conv_count = [](int ci, int co, int k) { return int64_t(co) * ci * k * k + co; };
    auto lin_count = [](int ci, int co) { return int64_t(ci) * co + co; };
    auto res_count = [&](int ci, int co) {
        int64_t n = 2 * ci;                     // n1 gamma+beta
        n += conv_count(ci, co, 3);             // conv1
        n += lin_count(td, co);                 // tproj
        n += 2 * co;                            // n2
        n += conv_count(co, co, 3);             // conv2
        if (ci != co) n += conv_count(ci, co, 1);
        return n;
    };
    int64_t expected = 0;
    expected += lin_count(td, td) * 2;          // cloned time mlp
    expected += conv_count(in_ch, b, 3);        // conv_in copy
    expected += res_count(b, b);                // enc1 copy
    expected += conv_count(b, 2 * b, 3);        // down copy
    expected += res_count(2 * b, 2 * b) * 2;    // enc2 + mid copies
    expected += conv_count(b, b, 1);            // zc_e1
    expected += conv_count(2 * b, 2 * b, 1) * 2;  // zc_e2, zc_m
    expected += conv_count(d, b, 1);            // cond adapter

    CHECK(ladd.params.trainable_count() == expected);
    // frozen base params are not part of the trainable set
    for (const auto& p : fx.ldm.unet.params) CHECK(!p.trainable);
}

TEST_CASE("init equivalence: fresh LADD forward equals base forward") {
    auto& fx = micro::fixture();
    auto ladd = build_ladd(fx.ldm, fx.vq.cfg.code_dim, 17);
    Rng rng = Rng::seeded(19);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor z = Tensor::randn({1, 4, 4, 4}, rng);
        int t = rng.uniform_int(0, fx.ldm.schedule.t_max);
        int cs = micro::micro_cond_sizes()[size_t(trial % 3)];
        Tensor img = fx.images[size_t(trial % fx.images.size())];
        Tensor cond = make_condition(fx.vq, stack_images<float>({img}), cs);

        Tensor ladd_out = ladd_denoise(ladd, z, cond, t, fx.ldm.schedule.t_max);
        Tensor base_out = fx.ldm.unet.denoise(z, t, fx.ldm.schedule.t_max);
        double max_abs = 0;
        for (int64_t i = 0; i < ladd_out.size(); ++i)
            max_abs = std::max(max_abs, std::abs(double(ladd_out[i]) - double(base_out[i])));
        CHECK(max_abs <= 1e-6);
    }
}

TEST_CASE("zero injections reproduce the frozen forward exactly") {
    auto& fx = micro::fixture();
    Rng rng = Rng::seeded(23);
    Tensor z = Tensor::randn({2, 4, 4, 4}, rng);
    std::vector<int> ts = {10, 50};

    TapeT<float> tape;
    auto bp = bind(tape, fx.ldm.unet.params, false);
    auto zv = input(tape, z, false);
    auto temb = constant(tape, timestep_embedding<float>(ts, fx.ldm.unet.cfg.tdim, fx.ldm.schedule.t_max));
    int b = fx.ldm.unet.cfg.base;
    UNetT<float>::Injections inj;
    inj.e1 = constant(tape, Tensor::zeros({2, b, 4, 4}));
    inj.e2 = constant(tape, Tensor::zeros({2, 2 * b, 2, 2}));
    inj.m = constant(tape, Tensor::zeros({2, 2 * b, 2, 2}));
    auto with_inj = fx.ldm.unet.forward(bp, zv, temb, &inj);
    auto plain = fx.ldm.unet.forward(bp, zv, temb);
    for (int64_t i = 0; i < with_inj.val().size(); ++i) CHECK(with_inj.val()[i] == plain.val()[i]);
}

TEST_CASE("bad condition shape is a contract violation") {
    auto& fx = micro::fixture();
    auto ladd = build_ladd(fx.ldm, fx.vq.cfg.code_dim, 29);
    Rng rng = Rng::seeded(31);
    Tensor z = Tensor::randn({1, 4, 4, 4}, rng);
    Tensor bad_cond = Tensor::randn({1, fx.vq.cfg.code_dim + 1, 4, 4}, rng);
    CHECK_THROWS_AS(ladd_denoise(ladd, z, bad_cond, 10, fx.ldm.schedule.t_max), ContractViolation);
}

TEST_CASE("stage-1 training: loss falls, frozen parts bitwise stable, condition matters") {
    auto& fx = micro::fixture();
    auto ladd = build_ladd(fx.ldm, fx.vq.cfg.code_dim, 37);

    uint64_t base_sum = fx.ldm.unet.params.checksum();
    uint64_t vq_sum = fx.vq.params.checksum();
    uint64_t vae_sum = fx.ldm.vae.params.checksum();

    LaddTrainConfig tc;
    tc.iters_lowres = 500;
    tc.iters_highres = 0;
    tc.batch = 4;
    tc.lr = 1.5e-3;
    tc.cond_sizes = micro::micro_cond_sizes();
    tc.log_every = 0;
    train_stage1(ladd, fx.vq, fx.ldm, fx.images, {}, tc);

    CHECK(fx.ldm.unet.params.checksum() == base_sum);
    CHECK(fx.vq.params.checksum() == vq_sum);
    CHECK(fx.ldm.vae.params.checksum() == vae_sum);

    // paired eval: conditional loss beats the unconditional base on the same
    // (z0, t, eps) triples
    Rng erng = Rng::seeded(97);
    double cond_loss = 0, base_loss = 0;
    int triples = 32;
    for (int i = 0; i < triples; ++i) {
        Tensor img = fx.images[size_t(i % fx.images.size())];
        Tensor batch = stack_images<float>({img});
        Tensor cond = make_condition(fx.vq, batch, 16);
        Tensor z0 = fx.ldm.vae_encode(batch);
        int t = 1 + (i * fx.ldm.schedule.t_max) / triples;
        t = std::min(t, fx.ldm.schedule.t_max);
        Tensor eps = Tensor::randn(z0.shape, erng);
        Tensor zt = diffuse(fx.ldm.schedule, z0, t, eps);
        base_loss += mse_tensor(fx.ldm.unet.denoise(zt, t, fx.ldm.schedule.t_max), eps);
        cond_loss += mse_tensor(ladd_denoise(ladd, zt, cond, t, fx.ldm.schedule.t_max), eps);
    }
    CHECK(cond_loss < base_loss);

    // after training, different conditions change the output
    Rng rng = Rng::seeded(41);
    Tensor z = Tensor::randn({1, 4, 4, 4}, rng);
    Tensor cond_a = make_condition(fx.vq, stack_images<float>({fx.images[0]}), 16);
    Tensor cond_b = make_condition(fx.vq, stack_images<float>({fx.images[1]}), 16);
    Tensor out_a = ladd_denoise(ladd, z, cond_a, 60, fx.ldm.schedule.t_max);
    Tensor out_b = ladd_denoise(ladd, z, cond_b, 60, fx.ldm.schedule.t_max);
    CHECK(mse_tensor(out_a, out_b) > 0.0);
}
