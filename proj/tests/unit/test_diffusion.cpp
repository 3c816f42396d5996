#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "layton/dataset.hpp"
#include "layton/latentdm.hpp"

using namespace layton;

TEST_CASE("schedule invariants for both kinds") {
    for (auto kind : {ScheduleKind::Cosine, ScheduleKind::Linear}) {
        auto s = make_schedule<float>(1000, kind);
        CHECK(s.alpha[0] == 1.0f);
        CHECK(s.beta[0] == 0.0f);
        CHECK(s.alpha[1000] <= 0.05f);
        for (int t = 0; t <= 1000; ++t) {
            double a = s.alpha[size_t(t)], b = s.beta[size_t(t)];
            CHECK(std::abs(a * a + b * b - 1.0) < 1e-6);
            CHECK(b >= 0.0);
            if (t > 0) CHECK(a < double(s.alpha[size_t(t) - 1]));
        }
    }
    CHECK_THROWS_AS(make_schedule<float>(0), ContractViolation);
}

TEST_CASE("cosine schedule matches its closed form at T=1000, t=500") {
    auto s = make_schedule<float>(1000, ScheduleKind::Cosine);
    double expected = std::cos(0.5 * std::acos(kScheduleAlphaEnd));  // independent evaluation
    CHECK(double(s.alpha[500]) == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("diffuse is exact and linear") {
    Rng rng = Rng::seeded(1);
    auto s = make_schedule<float>(100);
    Tensor z0 = Tensor::randn({2, 4, 3, 3}, rng);
    Tensor eps = Tensor::randn({2, 4, 3, 3}, rng);

    // t = 0 -> identity, bitwise
    Tensor d0 = diffuse(s, z0, 0, eps);
    for (int64_t i = 0; i < z0.size(); ++i) CHECK(d0[i] == z0[i]);

    // zero signal at t = T
    Tensor zero = Tensor::zeros(z0.shape);
    Tensor dT = diffuse(s, zero, 100, eps);
    for (int64_t i = 0; i < eps.size(); ++i) CHECK(dT[i] == s.beta[100] * eps[i]);

    // mid-t matches the formula computed independently
    int t = 37;
    Tensor dm = diffuse(s, z0, t, eps);
    for (int64_t i = 0; i < z0.size(); ++i)
        CHECK(dm[i] == doctest::Approx(s.alpha[size_t(t)] * z0[i] + s.beta[size_t(t)] * eps[i]));

    // linearity in z0 and eps separately
    Tensor z0b = Tensor::randn(z0.shape, rng);
    Tensor sum_in(z0.shape);
    for (int64_t i = 0; i < z0.size(); ++i) sum_in[i] = z0[i] + z0b[i];
    Tensor lhs = diffuse(s, sum_in, t, zero);
    Tensor r1 = diffuse(s, z0, t, zero), r2 = diffuse(s, z0b, t, zero);
    for (int64_t i = 0; i < z0.size(); ++i) CHECK(lhs[i] == doctest::Approx(r1[i] + r2[i]));

    CHECK_THROWS_AS(diffuse(s, z0, 101, eps), ContractViolation);
    CHECK_THROWS_AS(diffuse(s, z0, -1, eps), ContractViolation);
}

TEST_CASE("analytic-oracle DDIM inverts the forward diffusion") {
    Rng rng = Rng::seeded(2);
    int t_max = 64;
    auto s = make_schedule<float>(t_max);
    Tensor z0 = Tensor::randn({1, 4, 4, 4}, rng);
    Tensor eps_star = Tensor::randn(z0.shape, rng);
    // on the trajectory z_t = a z0 + b eps*, the true eps is recoverable
    auto oracle = [&](const Tensor& z, int t) {
        Tensor out(z.shape);
        float a = s.alpha[size_t(t)], b = s.beta[size_t(t)];
        for (int64_t i = 0; i < z.size(); ++i) out[i] = (z[i] - a * z0[i]) / b;
        return out;
    };
    for (int steps : {t_max, 8}) {
        Tensor zT = diffuse(s, z0, t_max, eps_star);
        Tensor rec = ddim_sample_from(oracle, s, zT, steps);
        double max_abs = 0;
        for (int64_t i = 0; i < z0.size(); ++i) max_abs = std::max(max_abs, std::abs(double(rec[i] - z0[i])));
        CHECK(max_abs < 1e-4);
    }
}

TEST_CASE("one-step DDIM reduces to the closed-form x0 estimate") {
    Rng rng = Rng::seeded(3);
    int t_max = 50;
    auto s = make_schedule<float>(t_max);
    Tensor zT = Tensor::randn({1, 2, 3, 3}, rng);
    Tensor eps_hat = Tensor::randn(zT.shape, rng);
    auto model = [&](const Tensor&, int) { return eps_hat; };
    Tensor out = ddim_sample_from(model, s, zT, 1);
    for (int64_t i = 0; i < zT.size(); ++i)
        CHECK(out[i] == doctest::Approx((zT[i] - s.beta[size_t(t_max)] * eps_hat[i]) / s.alpha[size_t(t_max)]));
    CHECK_THROWS_AS(ddim_timesteps(t_max, t_max + 1), ContractViolation);
}

TEST_CASE("ddim sampling is deterministic under seed") {
    auto s = make_schedule<float>(40);
    auto model = [&](const Tensor& z, int) {
        Tensor out = z;
        for (auto& v : out.data) v *= 0.5f;
        return out;
    };
    Rng r1 = Rng::seeded(7), r2 = Rng::seeded(7);
    Tensor a = ddim_sample(model, s, {1, 2, 4, 4}, 10, r1);
    Tensor b = ddim_sample(model, s, {1, 2, 4, 4}, 10, r2);
    for (int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("diffusion loss: perfect predictor, zero predictor, permutation invariance") {
    Rng rng = Rng::seeded(4);
    auto s = make_schedule<float>(100);
    Tensor z0 = Tensor::randn({1, 4, 64, 64}, rng);  // 16384 elements
    Tensor eps = Tensor::randn(z0.shape, rng);

    auto perfect = [&](const Tensor&, int) { return eps; };
    CHECK(diffusion_loss_value(perfect, s, z0, 42, eps) == 0.0);

    auto zero_model = [&](const Tensor& z, int) { return Tensor::zeros(z.shape); };
    double l = diffusion_loss_value(zero_model, s, z0, 42, eps);
    CHECK(std::abs(l - 1.0) < 0.05);  // E[eps^2] = 1 per element

    // permuting batch order leaves the mean unchanged
    Tensor batch = Tensor::randn({4, 2, 3, 3}, rng);
    Tensor eps_b = Tensor::randn(batch.shape, rng);
    Tensor perm(batch.shape), eps_p(batch.shape);
    int64_t item = batch.size() / 4;
    int order[4] = {2, 0, 3, 1};
    for (int i = 0; i < 4; ++i) {
        std::copy(batch.ptr() + order[i] * item, batch.ptr() + (order[i] + 1) * item, perm.ptr() + i * item);
        std::copy(eps_b.ptr() + order[i] * item, eps_b.ptr() + (order[i] + 1) * item, eps_p.ptr() + i * item);
    }
    auto zero2 = [&](const Tensor& z, int) { return Tensor::zeros(z.shape); };
    CHECK(diffusion_loss_value(zero2, s, batch, 10, eps_b) ==
          doctest::Approx(diffusion_loss_value(zero2, s, perm, 10, eps_p)).epsilon(1e-6));
}

TEST_CASE("vae shapes, round trip after training, and determinism") {
    auto samples = gen_dataset(6, 16, 5);
    std::vector<Tensor> imgs;
    for (auto& s : samples) imgs.push_back(s.image);
    // add a constant image to pin the constant-image example
    imgs.push_back(Tensor::full({3, 16, 16}, 0.35f));

    VaeConfig vc;
    vc.base_ch = 12;
    VaeT<float> vae(vc, 21);
    Tensor z = vae.posterior_mean(stack_images<float>({imgs[0]}));
    CHECK(z.shape == std::vector<int>{1, 4, 4, 4});

    VaeTrainConfig tc;
    tc.iters = 700;
    tc.batch = 4;
    tc.lr = 3e-3;
    tc.target_psnr = 25.0;
    tc.log_every = 0;
    auto stats = train_vae(vae, imgs, imgs, tc);
    CHECK(stats.final_metric >= 25.0);

    Tensor cimg = Tensor::full({3, 16, 16}, 0.35f);
    Tensor crec = vae.decode_pixels(vae.posterior_mean(stack_images<float>({cimg})));
    CHECK(psnr(batch_item(crec, 0), cimg) >= 30.0);

    // decode(encode(x)) deterministic
    Tensor za = vae.posterior_mean(stack_images<float>({imgs[0]}));
    Tensor zb = vae.posterior_mean(stack_images<float>({imgs[0]}));
    for (int64_t i = 0; i < za.size(); ++i) CHECK(za[i] == zb[i]);
    Tensor ra = vae.decode_pixels(za), rb = vae.decode_pixels(zb);
    for (int64_t i = 0; i < ra.size(); ++i) CHECK(ra[i] == rb[i]);
}

TEST_CASE("ldm overfits a single image and ddim recovers its latent") {
    auto samples = gen_dataset(1, 16, 6);
    std::vector<Tensor> imgs = {samples[0].image};

    LdmConfig lc;
    lc.vae.base_ch = 12;
    lc.unet.base = 16;
    lc.unet.tdim = 64;
    lc.t_max = 200;
    LatentDmT<float> ldm(lc, 31);

    // stage ordering: eps training before VAE must fail
    LdmTrainConfig bad;
    bad.iters = 1;
    CHECK_THROWS_AS(train_stage0_ldm(ldm, imgs, bad), StageOrderError);

    VaeTrainConfig vt;
    vt.iters = 500;
    vt.batch = 2;
    vt.lr = 3e-3;
    vt.log_every = 0;
    train_vae(ldm.vae, imgs, imgs, vt);

    LdmTrainConfig tc;
    tc.iters = 5000;
    tc.batch = 4;
    tc.lr = 2e-3;
    tc.log_every = 0;
    train_stage0_ldm(ldm, imgs, tc);

    Tensor z0 = ldm.vae_encode(stack_images<float>({imgs[0]}));
    auto model = [&](const Tensor& z, int t) { return ldm.unet.denoise(z, t, ldm.schedule.t_max); };
    Rng rng = Rng::seeded(8);
    Tensor zhat = ddim_sample(model, ldm.schedule, z0.shape, 25, rng);
    CHECK(mse_tensor(zhat, z0) < 0.01);
}
