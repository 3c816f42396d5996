#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "layton/pipeline.hpp"
#include "micro_pipeline.hpp"

using namespace layton;

namespace {

namespace fs = std::filesystem;

std::string fresh_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / "layton_pipe" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

RunConfig tiny_cfg() {
    RunConfig cfg;
    auto set = [&](const char* k, const char* v) { cfg.set(k, v, "tiny"); };
    set("seed", "3");
    set("resolution", "16");
    set("hires_resolution", "0");
    set("cond_sizes", "12,16,20");
    set("data_count", "48");
    set("data_holdout", "12");
    set("vq_code_dim", "8");
    set("vq_codes", "64");
    set("vq_base_ch", "8");
    set("vq_iters", "150");
    set("vq_batch", "4");
    set("vq_lr", "0.003");
    set("vq_target_psnr", "10.0");
    set("vae_base_ch", "8");
    set("vae_iters", "200");
    set("vae_batch", "4");
    set("vae_lr", "0.003");
    set("vae_target_psnr", "12.0");
    set("unet_base", "8");
    set("unet_tdim", "16");
    set("t_max", "100");
    set("ldm_iters", "150");
    set("ldm_batch", "4");
    set("ldm_lr", "0.002");
    set("ladd_iters_lowres", "80");
    set("ladd_iters_highres", "0");
    set("ladd_batch", "2");
    set("cm_ode_substeps", "10");
    set("distill_iters", "50");
    set("distill_batch", "2");
    set("stage2_iters", "20");
    set("stage2_batch", "1");
    set("ar_width", "32");
    set("ar_heads", "2");
    set("ar_blocks", "1");
    set("ar_cond_dim", "16");
    set("ar_iters", "60");
    set("ar_batch", "4");
    set("eval_count", "8");
    set("eval_seeds", "1");
    set("eval_cond_size", "16");
    return cfg;
}

// one fully trained tiny run shared across the pipeline-contract cases
const std::string& tiny_run() {
    static std::string dir = [] {
        std::string d = fresh_dir("tinyrun");
        Pipeline pipe(tiny_cfg(), d);
        pipe.gen_data();
        pipe.train_vq_stage();
        pipe.train_ldm_stage();
        auto vq = pipe.load_vq("x");
        auto ldm = pipe.load_ldm("x");
        pipe.train_ladd_stage(vq, ldm);
        pipe.distill_stage(vq, ldm);
        pipe.train_pixel_stage(vq, ldm);
        pipe.train_argen_stage(vq);
        return d;
    }();
    return dir;
}

}  // namespace

TEST_CASE("stage DAG: train-pixel before distill-cm names the missing stage") {
    std::string dir = fresh_dir("dag");
    Pipeline pipe(tiny_cfg(), dir);
    pipe.gen_data();
    pipe.train_vq_stage();
    pipe.train_ldm_stage();
    auto vq = pipe.load_vq("x");
    auto ldm = pipe.load_ldm("x");
    try {
        pipe.train_pixel_stage(vq, ldm);
        FAIL("expected StageOrderError");
    } catch (const StageOrderError& e) {
        CHECK(std::string(e.what()).find("distill-cm") != std::string::npos);
    }
    // wrong-stage checkpoint load fails fast
    auto ck = load_checkpoint(pipe.paths().ckpt("train-vq"));
    CHECK_THROWS_AS(expect_stage(ck, "train-ladd"), StageOrderError);
}

TEST_CASE("reconstruct: a directory of 10 PNGs yields 10 outputs and 10 CSV rows") {
    Pipeline pipe(tiny_cfg(), tiny_run());
    std::string in_dir = fresh_dir("recon_in");
    auto samples = gen_dataset(10, 16, 5151);
    for (int i = 0; i < 10; ++i)
        save_image(in_dir + "/img_" + std::to_string(i) + ".png", samples[size_t(i)].image);
    pipe.reconstruct_cmd(in_dir);
    int pngs = 0;
    for (auto& e : fs::directory_iterator(pipe.paths().recon_dir()))
        if (e.path().extension() == ".png") ++pngs;
    CHECK(pngs == 10);
    std::ifstream csv(pipe.paths().reports_dir() + "/reconstruct.csv");
    std::string line;
    int rows = -1;  // header
    while (std::getline(csv, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 10);
}

TEST_CASE("sweep reports: 3 token budgets, exactly the four cfg scales, plot output") {
    Pipeline pipe(tiny_cfg(), tiny_run());
    auto tok = pipe.sweep_tokens_cmd();
    REQUIRE(tok.at("rows").size() == 3);
    for (const auto& row : tok.at("rows"))
        for (const char* k : {"psnr", "ssim", "proxy", "mse"}) CHECK(std::isfinite(row.at(k).get<double>()));
    CHECK(fs::exists(pipe.paths().reports_dir() + "/sweep_tokens.png"));
    CHECK(fs::exists(pipe.paths().reports_dir() + "/sweep_tokens.csv"));

    auto cfg_rows = pipe.sweep_cfg_cmd();
    REQUIRE(cfg_rows.at("rows").size() == 4);
    std::vector<double> scales;
    for (const auto& row : cfg_rows.at("rows")) {
        scales.push_back(row.at("scale").get<double>());
        for (const char* k : {"psnr", "ssim", "proxy", "mse"}) CHECK(std::isfinite(row.at(k).get<double>()));
    }
    CHECK(scales == std::vector<double>{1.5, 2, 3, 7});

    pipe.plot_cmd(pipe.paths().reports_dir() + "/sweep_cfg.json", pipe.paths().reports_dir() + "/replot.png");
    CHECK(fs::exists(pipe.paths().reports_dir() + "/replot.png"));
}

TEST_CASE("training curves and run lock") {
    Pipeline pipe(tiny_cfg(), tiny_run());
    for (const char* c : {"train-vq.csv", "train-ldm.csv", "train-ladd.csv", "train-argen.csv"})
        CHECK(fs::exists(pipe.paths().curves_dir() + std::string("/") + c));
    // ladd curve carries a resolution column
    std::ifstream f(pipe.paths().curves_dir() + "/train-ladd.csv");
    std::string header;
    std::getline(f, header);
    CHECK(header == "step,loss,resolution");

    {
        RunLock lock(pipe.paths());
        CHECK_THROWS_AS(RunLock{pipe.paths()}, IntegrityError);
    }
    RunLock relock(pipe.paths());  // released cleanly
}

TEST_CASE("resume warm-starts from a checkpoint with optimizer state") {
    std::string dir = tiny_run();
    Pipeline pipe(tiny_cfg(), dir);
    auto before = load_checkpoint(pipe.paths().ckpt("train-vq"));
    CHECK(before.meta.extra.at("adam_step").get<int64_t>() > 0);
    // moments were persisted alongside weights
    bool has_moments = false;
    for (auto& [name, t] : before.arrays) has_moments = has_moments || name.rfind("adam.m.", 0) == 0;
    CHECK(has_moments);
    pipe.train_vq_stage(pipe.paths().ckpt("train-vq"));
    auto after = load_checkpoint(pipe.paths().ckpt("train-vq"));
    CHECK(after.meta.step == before.meta.step + tiny_cfg().get_int("vq_iters"));
}

TEST_CASE("trained LDM: ddim samples close a >=50% fid gap over the untrained model") {
    auto& fx = micro::fixture();
    PerceptualProxyT<float> proxy;
    std::vector<Tensor> reference(fx.images.begin(), fx.images.end());
    while (reference.size() < 32) reference.push_back(reference[reference.size() % fx.images.size()]);

    LdmConfig lc;
    lc.vae.base_ch = 10;
    lc.unet.base = 12;
    lc.unet.tdim = 32;
    lc.t_max = 120;
    LatentDmT<float> untrained(lc, 72);
    untrained.vae = fx.ldm.vae;  // same decoder; only the denoiser differs
    untrained.latent_scale = fx.ldm.latent_scale;
    untrained.unet_trained = true;

    auto sample_set = [&](const LatentDmT<float>& ldm) {
        std::vector<Tensor> out;
        for (int i = 0; i < 32; ++i) {
            Rng rng = Rng::seeded(uint64_t(4000 + i));
            auto model = [&](const Tensor& z, int t) { return ldm.unet.denoise(z, t, ldm.schedule.t_max); };
            Tensor z = ddim_sample(model, ldm.schedule, {1, 4, 4, 4}, 25, rng);
            out.push_back(batch_item(ldm.vae_decode(z), 0));
        }
        return out;
    };
    double fid_untrained = fid_proxy(sample_set(untrained), reference, proxy);
    double fid_trained = fid_proxy(sample_set(fx.ldm), reference, proxy);
    CHECK(fid_trained <= 0.5 * fid_untrained);
}

TEST_CASE("ldm training loss decreases over smoothed epoch averages") {
    auto& fx = micro::fixture();
    std::vector<Tensor> imgs = fx.images;
    LdmConfig lc;
    lc.vae.base_ch = 10;
    lc.unet.base = 12;
    lc.unet.tdim = 32;
    lc.t_max = 120;
    LatentDmT<float> ldm(lc, 99);
    VaeTrainConfig vc;
    vc.iters = 300;
    vc.batch = 4;
    vc.lr = 3e-3;
    vc.log_every = 0;
    train_vae(ldm.vae, imgs, imgs, vc);
    LdmTrainConfig tc;
    tc.iters = 600;
    tc.batch = 4;
    tc.lr = 2e-3;
    tc.log_every = 0;
    auto stats = train_stage0_ldm(ldm, imgs, tc);

    // epoch averages of 100 steps, 3-epoch smoothing
    std::vector<double> epochs;
    for (size_t start = 0; start + 100 <= stats.loss_curve.size(); start += 100) {
        double acc = 0;
        for (size_t i = start; i < start + 100; ++i) acc += stats.loss_curve[i];
        epochs.push_back(acc / 100);
    }
    std::vector<double> smoothed;
    for (size_t i = 0; i + 3 <= epochs.size(); ++i)
        smoothed.push_back((epochs[i] + epochs[i + 1] + epochs[i + 2]) / 3);
    REQUIRE(smoothed.size() >= 3);
    for (size_t i = 1; i < smoothed.size(); ++i) CHECK(smoothed[i] <= smoothed[i - 1]);
}

TEST_CASE("stage-1 + stage-2 integration: VQ-LADD baseline, color error, AR end to end") {
    auto& fx = micro::fixture();
    auto ladd = build_ladd(fx.ldm, fx.vq.cfg.code_dim, 301);
    LaddTrainConfig tc;
    tc.iters_lowres = 300;
    tc.iters_highres = 0;
    tc.batch = 4;
    tc.lr = 1.5e-3;
    tc.cond_sizes = micro::micro_cond_sizes();
    tc.log_every = 0;
    train_stage1(ladd, fx.vq, fx.ldm, fx.images, {}, tc);

    // VQ-LADD row: conditional 25-step DDIM reconstruction beats seed-matched
    // unconditional DDIM samples on pixel MSE
    double cond_mse = 0, uncond_mse = 0;
    for (int i = 0; i < 8; ++i) {
        const Tensor& img = fx.images[size_t(i)];
        Tensor cond = make_condition(fx.vq, stack_images<float>({img}), 16);
        auto cond_model = [&](const Tensor& z, int t) {
            return ladd_denoise(ladd, z, cond, t, fx.ldm.schedule.t_max);
        };
        auto base_model = [&](const Tensor& z, int t) {
            return fx.ldm.unet.denoise(z, t, fx.ldm.schedule.t_max);
        };
        Rng r1 = Rng::seeded(uint64_t(500 + i)), r2 = Rng::seeded(uint64_t(500 + i));
        Tensor zc = ddim_sample(cond_model, fx.ldm.schedule, {1, 4, 4, 4}, 25, r1);
        Tensor zu = ddim_sample(base_model, fx.ldm.schedule, {1, 4, 4, 4}, 25, r2);
        cond_mse += mse_tensor(batch_item(fx.ldm.vae_decode(zc), 0), img);
        uncond_mse += mse_tensor(batch_item(fx.ldm.vae_decode(zu), 0), img);
    }
    CHECK(cond_mse < uncond_mse);

    // distill + stage-2, then check the color-error direction
    CmConfig cm;
    cm.ode_substeps = 12;
    DistillConfig dc;
    dc.iters = 300;
    dc.batch = 4;
    dc.lr = 1e-3;
    dc.cond_sizes = micro::micro_cond_sizes();
    dc.log_every = 0;
    auto dec = distill(ladd, fx.vq, fx.ldm, fx.images, cm, dc);
    PerceptualProxyT<float> proxy;
    Stage2Config sc;
    sc.iters = 120;
    sc.batch = 2;
    sc.lr = 3e-4;
    sc.cond_sizes = micro::micro_cond_sizes();
    sc.log_every = 0;
    train_stage2(dec, fx.vq, fx.ldm, proxy, fx.images, sc);

    auto color_err = [&](const Tensor& rec, const Tensor& img) {
        int64_t plane = int64_t(img.dim(1)) * img.dim(2);
        double err = 0;
        for (int c = 0; c < 3; ++c) {
            double dm = 0;
            for (int64_t i = 0; i < plane; ++i) dm += double(rec[c * plane + i]) - double(img[c * plane + i]);
            err += std::abs(dm / double(plane));
        }
        return err / 3;
    };
    double color_s1 = 0, color_s2 = 0, mse_s1 = 0, mse_s2 = 0;
    for (int i = 0; i < 8; ++i) {
        const Tensor& img = fx.images[size_t(i)];
        Tensor cond = make_condition(fx.vq, stack_images<float>({img}), 16);
        auto cond_model = [&](const Tensor& z, int t) {
            return ladd_denoise(ladd, z, cond, t, fx.ldm.schedule.t_max);
        };
        Rng r1 = Rng::seeded(uint64_t(600 + i));
        Tensor z1 = ddim_sample(cond_model, fx.ldm.schedule, {1, 4, 4, 4}, 25, r1);
        Tensor rec1 = batch_item(fx.ldm.vae_decode(z1), 0);
        Tensor z2 = decode_one_step(dec, cond, {1, 4, 4, 4}, uint64_t(600 + i));
        Tensor rec2 = batch_item(fx.ldm.vae_decode(z2), 0);
        color_s1 += color_err(rec1, img);
        color_s2 += color_err(rec2, img);
        mse_s1 += mse_tensor(rec1, img);
        mse_s2 += mse_tensor(rec2, img);
    }
    CHECK(color_s2 < color_s1);
    CHECK(mse_s2 < mse_s1);

}

TEST_CASE("progressive resolution phase runs and is recorded") {
    auto& fx = micro::fixture();
    auto ladd = build_ladd(fx.ldm, fx.vq.cfg.code_dim, 401);
    std::vector<Tensor> hi;
    auto samples = gen_dataset(6, 32, 402);  // doubled resolution renders
    for (auto& s : samples) hi.push_back(s.image);
    LaddTrainConfig tc;
    tc.iters_lowres = 6;
    tc.iters_highres = 4;
    tc.batch = 2;
    tc.lr = 1e-3;
    tc.cond_sizes = micro::micro_cond_sizes();
    tc.log_every = 0;
    auto stats = train_stage1(ladd, fx.vq, fx.ldm, fx.images, hi, tc);
    REQUIRE(stats.res_curve.size() == 10);
    for (int i = 0; i < 6; ++i) CHECK(stats.res_curve[size_t(i)] == 16);
    for (int i = 6; i < 10; ++i) CHECK(stats.res_curve[size_t(i)] == 32);
}
