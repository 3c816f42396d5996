#pragma once

// Staged experiment driver: run-directory layout, the stage DAG
// (gen-data -> train-vq -> train-ldm -> train-ladd -> distill-cm ->
// train-pixel -> train-argen -> evaluation), checkpoint wiring, and the
// evaluation/sweep commands built on top of the trained stack.

#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <memory>
#include <optional>

#include "layton/argen.hpp"
#include "layton/checkpoint.hpp"
#include "layton/config.hpp"
#include "layton/consistency.hpp"
#include "layton/eval.hpp"

namespace layton {

struct RunPaths {
    std::string root;

    std::string data_dir() const { return root + "/data"; }
    std::string data_hi_dir() const { return root + "/data_hi"; }
    std::string ckpt(const std::string& stage) const { return root + "/checkpoints/" + stage + ".ckpt"; }
    std::string curves_dir() const { return root + "/curves"; }
    std::string reports_dir() const { return root + "/reports"; }
    std::string recon_dir() const { return root + "/recon"; }
    std::string gen_dir() const { return root + "/gen"; }
    std::string tokens_file() const { return root + "/tokens.bin"; }
    std::string lock_file() const { return root + "/.lock"; }

    void ensure_tree() const {
        namespace fs = std::filesystem;
        fs::create_directories(root);
        fs::create_directories(root + "/checkpoints");
        fs::create_directories(curves_dir());
        fs::create_directories(reports_dir());
        fs::create_directories(recon_dir());
        fs::create_directories(gen_dir());
    }
};

// One command per run directory at a time.
class RunLock {
public:
    explicit RunLock(const RunPaths& paths) : path_(paths.lock_file()) {
        paths.ensure_tree();
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw IntegrityError("run directory is locked (" + path_ +
                                 " exists); another command may be running");
    }
    ~RunLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            ::unlink(path_.c_str());
        }
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::string path_;
    int fd_ = -1;
};

struct Corpus {
    std::vector<Tensor> train, holdout;
    std::vector<std::vector<int>> train_caption_ids, holdout_caption_ids;
    std::vector<std::string> holdout_captions;
};

class Pipeline {
public:
    Pipeline(RunConfig cfg, std::string run_dir) : cfg_(std::move(cfg)), paths_{std::move(run_dir)} {
        paths_.ensure_tree();
    }

    // every command records the fully resolved configuration it ran under
    void log_resolved_config() const {
        std::ofstream f(paths_.root + "/config_resolved.cfg");
        f << "# config_hash = " << cfg_.hash() << "\n" << cfg_.resolved_text();
        std::fprintf(stderr, "[info] config hash %s\n", cfg_.hash().c_str());
    }

    const RunConfig& cfg() const { return cfg_; }
    const RunPaths& paths() const { return paths_; }

    // ---- model geometry from config -------------------------------------

    VqConfig vq_config() const {
        VqConfig c;
        c.code_dim = cfg_.get_int("vq_code_dim");
        c.n_codes = cfg_.get_int("vq_codes");
        c.base_ch = cfg_.get_int("vq_base_ch");
        c.beta_commit = cfg_.get_real("vq_beta_commit");
        return c;
    }

    LdmConfig ldm_config() const {
        LdmConfig c;
        c.vae.base_ch = cfg_.get_int("vae_base_ch");
        c.vae.lat_ch = cfg_.get_int("vae_lat_ch");
        c.vae.kl_weight = cfg_.get_real("vae_kl_weight");
        c.unet.in_ch = c.vae.lat_ch;
        c.unet.base = cfg_.get_int("unet_base");
        c.unet.tdim = cfg_.get_int("unet_tdim");
        c.t_max = cfg_.get_int("t_max");
        c.schedule = cfg_.get_str("schedule_kind");
        return c;
    }

    CmConfig cm_config() const {
        CmConfig c;
        c.boundary_t = cfg_.get_int("cm_boundary_t");
        c.ema_decay = cfg_.get_real("cm_ema_decay");
        c.ode_substeps = cfg_.get_int("cm_ode_substeps");
        c.t_mid_div = cfg_.get_int("cm_t_mid_div");
        return c;
    }

    int token_grid_side() const { return cfg_.get_int("eval_cond_size") / 4; }

    ArConfig ar_config() const {
        ArConfig c;
        c.n_tokens = cfg_.get_int("vq_codes");
        c.width = cfg_.get_int("ar_width");
        c.heads = cfg_.get_int("ar_heads");
        c.blocks = cfg_.get_int("ar_blocks");
        c.cond_dim = cfg_.get_int("ar_cond_dim");
        c.drop_prob = cfg_.get_real("ar_drop_prob");
        c.seq_len = token_grid_side() * token_grid_side();
        return c;
    }

    uint64_t seed(uint64_t salt) const { return uint64_t(cfg_.get_int("seed")) * 1000003ULL + salt; }

    // ---- stage DAG -------------------------------------------------------

    void require_data(const std::string& cmd) const {
        if (!std::filesystem::exists(paths_.data_dir() + "/manifest.tsv"))
            throw StageOrderError(cmd + " requires the synthetic corpus; run gen-data first");
    }

    void require_ckpt(const std::string& cmd, const std::string& stage) const {
        if (!std::filesystem::exists(paths_.ckpt(stage)))
            throw StageOrderError(cmd + " requires the '" + stage + "' checkpoint; run " + stage + " first");
    }

    // ---- corpus ----------------------------------------------------------

    Corpus load_corpus(bool hires = false) const {
        require_data("this command");
        auto records = read_manifest(paths_.data_dir());
        const std::string dir = hires ? paths_.data_hi_dir() : paths_.data_dir();
        int holdout = std::min<int>(cfg_.get_int("data_holdout"), int(records.size()) / 2);
        Corpus corpus;
        for (size_t i = 0; i < records.size(); ++i) {
            Tensor img = load_image(dir + "/" + records[i].filename);
            bool is_holdout = int(i) >= int(records.size()) - holdout;
            auto ids = tokenize_caption(records[i].caption);
            if (is_holdout) {
                corpus.holdout.push_back(std::move(img));
                corpus.holdout_caption_ids.push_back(std::move(ids));
                corpus.holdout_captions.push_back(records[i].caption);
            } else {
                corpus.train.push_back(std::move(img));
                corpus.train_caption_ids.push_back(std::move(ids));
            }
        }
        return corpus;
    }

    // ---- stages ----------------------------------------------------------

    void gen_data() const {
        int count = cfg_.get_int("data_count");
        int res = cfg_.get_int("resolution");
        auto samples = gen_dataset(count, res, seed(11));
        double thr = cfg_.get_real("data_filter_threshold");
        auto kept = filter(samples, [](const SyntheticSample& s) { return s.score; }, thr);
        std::fprintf(stderr, "[info] gen-data: %zu/%d samples pass the quality filter\n", kept.size(), count);
        LAYTON_CHECK(!kept.empty(), "gen-data: quality filter removed every sample");
        write_corpus(paths_.data_dir(), kept);
        int hires = cfg_.get_int("hires_resolution");
        if (hires > 0) {
            std::vector<SyntheticSample> hi = kept;
            for (auto& s : hi) s.image = render_scene(s.scene, hires);
            write_corpus(paths_.data_hi_dir(), hi);
        }
    }

    VqModelT<float> make_vq() const { return VqModelT<float>(vq_config(), seed(21)); }

    void train_vq_stage(const std::string& resume = "") const {
        require_data("train-vq");
        Corpus corpus = load_corpus();
        VqModelT<float> vq = make_vq();
        AdamT<float> opt;
        int64_t prev_steps = 0;
        if (!resume.empty()) {
            auto ck = load_checkpoint(resume);
            expect_stage(ck, "train-vq");
            apply_to_store(ck, vq.params);
            load_adam(ck, opt, vq.params, "adam", ck.meta.extra.value("adam_step", int64_t(0)));
            prev_steps = ck.meta.step;
        }
        VqTrainConfig tc;
        tc.iters = cfg_.get_int("vq_iters");
        tc.batch = cfg_.get_int("vq_batch");
        tc.lr = cfg_.get_real("vq_lr");
        tc.target_psnr = cfg_.get_real("vq_target_psnr");
        tc.seed = seed(22);
        auto stats = train_stage0_vq(vq, corpus.train, corpus.holdout, tc, &opt);
        write_curve("train-vq", stats.loss_curve);
        CheckpointMeta meta;
        meta.stage = "train-vq";
        meta.step = prev_steps + tc.iters;
        meta.config_hash = cfg_.hash();
        meta.extra["holdout_psnr"] = stats.final_metric;
        meta.extra["adam_step"] = opt.step_count;
        CheckpointPayload pay;
        pay.add_store(vq.params);
        add_adam_to_payload(pay, opt, vq.params, "adam");
        save_checkpoint(paths_.ckpt("train-vq"), meta, pay);
        if (!stats.reached_target)
            throw TrainingDivergence("train-vq missed its PSNR target: " +
                                     std::to_string(stats.final_metric) + " dB < " +
                                     std::to_string(tc.target_psnr) + " dB (checkpoint kept)");
    }

    VqModelT<float> load_vq(const std::string& cmd) const {
        require_ckpt(cmd, "train-vq");
        auto ck = load_checkpoint(paths_.ckpt("train-vq"));
        expect_stage(ck, "train-vq");
        VqModelT<float> vq = make_vq();
        apply_to_store(ck, vq.params);
        vq.freeze();
        return vq;
    }

    void train_ldm_stage(const std::string& resume = "") const {
        require_ckpt("train-ldm", "train-vq");
        Corpus corpus = load_corpus();
        LatentDmT<float> ldm(ldm_config(), seed(31));
        AdamT<float> vae_opt, unet_opt;
        int64_t prev_steps = 0;
        if (!resume.empty()) {
            auto ck = load_checkpoint(resume);
            expect_stage(ck, "train-ldm");
            apply_to_store(ck, ldm.vae.params);
            apply_to_store(ck, ldm.unet.params);
            load_adam(ck, vae_opt, ldm.vae.params, "adam_vae", ck.meta.extra.value("adam_vae_step", int64_t(0)));
            load_adam(ck, unet_opt, ldm.unet.params, "adam_unet",
                      ck.meta.extra.value("adam_unet_step", int64_t(0)));
            ldm.vae.trained = true;
            prev_steps = ck.meta.step;
        }
        VaeTrainConfig vt;
        vt.iters = cfg_.get_int("vae_iters");
        vt.batch = cfg_.get_int("vae_batch");
        vt.lr = cfg_.get_real("vae_lr");
        vt.target_psnr = cfg_.get_real("vae_target_psnr");
        vt.seed = seed(32);
        auto vstats = train_vae(ldm.vae, corpus.train, corpus.holdout, vt, &vae_opt);
        write_curve("train-vae", vstats.loss_curve);

        LdmTrainConfig lt;
        lt.iters = cfg_.get_int("ldm_iters");
        lt.batch = cfg_.get_int("ldm_batch");
        lt.lr = cfg_.get_real("ldm_lr");
        lt.seed = seed(33);
        auto lstats = train_stage0_ldm(ldm, corpus.train, lt, &unet_opt);
        write_curve("train-ldm", lstats.loss_curve);

        CheckpointMeta meta;
        meta.stage = "train-ldm";
        meta.step = prev_steps + lt.iters;
        meta.config_hash = cfg_.hash();
        meta.parent_hash = checkpoint_hash(paths_.ckpt("train-vq"));
        meta.extra["latent_scale"] = ldm.latent_scale;
        meta.extra["vae_holdout_psnr"] = vstats.final_metric;
        meta.extra["adam_vae_step"] = vae_opt.step_count;
        meta.extra["adam_unet_step"] = unet_opt.step_count;
        CheckpointPayload pay;
        pay.add_store(ldm.vae.params);
        pay.add_store(ldm.unet.params);
        add_adam_to_payload(pay, vae_opt, ldm.vae.params, "adam_vae");
        add_adam_to_payload(pay, unet_opt, ldm.unet.params, "adam_unet");
        save_checkpoint(paths_.ckpt("train-ldm"), meta, pay);
        if (!vstats.reached_target)
            throw TrainingDivergence("train-ldm VAE missed its PSNR target: " +
                                     std::to_string(vstats.final_metric) + " dB (checkpoint kept)");
    }

    LatentDmT<float> load_ldm(const std::string& cmd) const {
        require_ckpt(cmd, "train-ldm");
        auto ck = load_checkpoint(paths_.ckpt("train-ldm"));
        expect_stage(ck, "train-ldm");
        LatentDmT<float> ldm(ldm_config(), seed(31));
        apply_to_store(ck, ldm.vae.params);
        apply_to_store(ck, ldm.unet.params);
        ldm.latent_scale = ck.meta.extra.at("latent_scale").get<double>();
        ldm.vae.trained = true;
        ldm.unet_trained = true;
        ldm.vae.params.freeze_all();
        ldm.unet.params.freeze_all();
        return ldm;
    }

    void train_ladd_stage(VqModelT<float>& vq, LatentDmT<float>& ldm, const std::string& resume = "") const {
        require_ckpt("train-ladd", "train-vq");
        require_ckpt("train-ladd", "train-ldm");
        Corpus lo = load_corpus();
        std::vector<Tensor> images_hi;
        if (cfg_.get_int("hires_resolution") > 0 &&
            std::filesystem::exists(paths_.data_hi_dir() + "/manifest.tsv"))
            images_hi = load_corpus(true).train;

        LaddT<float> ladd = build_ladd(ldm, vq.cfg.code_dim, seed(41));
        AdamT<float> opt;
        int64_t prev_steps = 0;
        if (!resume.empty()) {
            auto ck = load_checkpoint(resume);
            expect_stage(ck, "train-ladd");
            apply_to_store(ck, ladd.params);
            load_adam(ck, opt, ladd.params, "adam", ck.meta.extra.value("adam_step", int64_t(0)));
            prev_steps = ck.meta.step;
        }
        LaddTrainConfig tc;
        tc.iters_lowres = cfg_.get_int("ladd_iters_lowres");
        tc.iters_highres = cfg_.get_int("ladd_iters_highres");
        tc.batch = cfg_.get_int("ladd_batch");
        tc.lr = cfg_.get_real("ladd_lr");
        tc.cond_sizes = cfg_.get_int_list("cond_sizes");
        tc.seed = seed(42);
        auto stats = train_stage1(ladd, vq, ldm, lo.train, images_hi, tc, &opt);
        write_ladd_curve(stats);

        CheckpointMeta meta;
        meta.stage = "train-ladd";
        meta.step = prev_steps + int64_t(stats.loss_curve.size());
        meta.config_hash = cfg_.hash();
        meta.parent_hash = checkpoint_hash(paths_.ckpt("train-ldm"));
        meta.extra["adam_step"] = opt.step_count;
        CheckpointPayload pay;
        pay.add_store(ladd.params);
        add_adam_to_payload(pay, opt, ladd.params, "adam");
        save_checkpoint(paths_.ckpt("train-ladd"), meta, pay);
    }

    LaddT<float> load_ladd(const std::string& cmd, LatentDmT<float>& ldm) const {
        require_ckpt(cmd, "train-ladd");
        auto ck = load_checkpoint(paths_.ckpt("train-ladd"));
        expect_stage(ck, "train-ladd");
        LaddT<float> ladd = build_ladd(ldm, cfg_.get_int("vq_code_dim"), seed(41));
        apply_to_store(ck, ladd.params);
        return ladd;
    }

    std::vector<Tensor> hires_train_images() const {
        if (cfg_.get_int("hires_resolution") > 0 &&
            std::filesystem::exists(paths_.data_hi_dir() + "/manifest.tsv"))
            return load_corpus(true).train;
        return {};
    }

    void distill_stage(VqModelT<float>& vq, LatentDmT<float>& ldm) const {
        require_ckpt("distill-cm", "train-ladd");
        LaddT<float> ladd = load_ladd("distill-cm", ldm);
        Corpus corpus = load_corpus();
        std::vector<Tensor> hi = hires_train_images();
        DistillConfig dc;
        dc.iters = cfg_.get_int("distill_iters");
        dc.batch = cfg_.get_int("distill_batch");
        dc.lr = cfg_.get_real("distill_lr");
        dc.cond_sizes = cfg_.get_int_list("cond_sizes");
        dc.seed = seed(51);
        TrainStats stats;
        AdamT<float> opt_base, opt_ctrl;
        auto dec = distill(ladd, vq, ldm, corpus.train, cm_config(), dc, &stats, &opt_base, &opt_ctrl,
                           hi.empty() ? nullptr : &hi);
        write_curve("distill-cm", stats.loss_curve);
        save_decoder("distill-cm", dec, checkpoint_hash(paths_.ckpt("train-ladd")),
                     int64_t(stats.loss_curve.size()), &opt_base, &opt_ctrl);
    }

    void save_decoder(const std::string& stage, const ConsistencyDecoderT<float>& dec,
                      const std::string& parent, int64_t step, const AdamT<float>* opt_base = nullptr,
                      const AdamT<float>* opt_ctrl = nullptr) const {
        CheckpointMeta meta;
        meta.stage = stage;
        meta.step = step;
        meta.config_hash = cfg_.hash();
        meta.parent_hash = parent;
        CheckpointPayload pay;
        pay.add_store(dec.net.owned_base->params);
        pay.add_store(dec.net.params);
        if (opt_base) {
            add_adam_to_payload(pay, *opt_base, dec.net.owned_base->params, "adam_base");
            meta.extra["adam_base_step"] = opt_base->step_count;
        }
        if (opt_ctrl) {
            add_adam_to_payload(pay, *opt_ctrl, dec.net.params, "adam_ctrl");
            meta.extra["adam_ctrl_step"] = opt_ctrl->step_count;
        }
        save_checkpoint(paths_.ckpt(stage), meta, pay);
    }

    ConsistencyDecoderT<float> load_decoder(const std::string& cmd, const std::string& stage,
                                            const LatentDmT<float>& ldm) const {
        require_ckpt(cmd, stage);
        auto ck = load_checkpoint(paths_.ckpt(stage));
        expect_stage(ck, stage);
        ConsistencyDecoderT<float> dec;
        dec.cfg = cm_config();
        dec.schedule = ldm.schedule;
        dec.net.ucfg = ldm.unet.cfg;
        dec.net.cond_dim = cfg_.get_int("vq_code_dim");
        dec.net.owned_base = std::make_unique<UNetT<float>>(ldm.unet.cfg, seed(52), "cm.base");
        dec.net.init_control("cm.ctrl", seed(53));
        apply_to_store(ck, dec.net.owned_base->params);
        apply_to_store(ck, dec.net.params);
        dec.distilled = true;
        return dec;
    }

    void train_pixel_stage(VqModelT<float>& vq, LatentDmT<float>& ldm) const {
        require_ckpt("train-pixel", "distill-cm");
        auto dec = load_decoder("train-pixel", "distill-cm", ldm);
        Corpus corpus = load_corpus();
        PerceptualProxyT<float> proxy(uint64_t(cfg_.get_int("proxy_seed")));
        Stage2Config sc;
        sc.iters = cfg_.get_int("stage2_iters");
        sc.batch = cfg_.get_int("stage2_batch");
        sc.lr = cfg_.get_real("stage2_lr");
        sc.cond_sizes = cfg_.get_int_list("cond_sizes");
        sc.mode = decode_mode_from(cfg_.get_str("stage2_mode"));
        sc.pixel.w_perceptual = cfg_.get_real("stage2_w_perceptual");
        sc.pixel.w_mse = cfg_.get_real("stage2_w_mse");
        sc.keep_diffusion_loss = cfg_.get_bool("stage2_keep_diffusion_loss");
        sc.diffusion_loss_weight = cfg_.get_real("stage2_diffusion_loss_weight");
        sc.seed = seed(61);
        std::vector<Tensor> hi = hires_train_images();
        AdamT<float> opt_base, opt_ctrl;
        auto stats = train_stage2(dec, vq, ldm, proxy, corpus.train, sc, &opt_base, &opt_ctrl,
                                  hi.empty() ? nullptr : &hi);
        write_curve("train-pixel", stats.loss_curve);
        save_decoder("train-pixel", dec, checkpoint_hash(paths_.ckpt("distill-cm")),
                     int64_t(stats.loss_curve.size()), &opt_base, &opt_ctrl);
    }

    void train_argen_stage(VqModelT<float>& vq, const std::string& resume = "") const {
        require_ckpt("train-argen", "train-pixel");
        Corpus corpus = load_corpus();
        int side = token_grid_side();
        int cond_size = cfg_.get_int("eval_cond_size");

        // offline tokenization of the training corpus
        std::vector<TokenizedSeq> dataset;
        for (size_t i = 0; i < corpus.train.size(); ++i) {
            TensorT<float> cond_img =
                resize_batch_bilinear(stack_images<float>({corpus.train[i]}), cond_size, cond_size);
            auto qr = vq.tokenize(cond_img);
            TokenizedSeq s;
            s.tokens = qr.tokens;
            s.caption_ids = corpus.train_caption_ids[i];
            dataset.push_back(std::move(s));
        }
        write_token_dataset(paths_.tokens_file(), vq.cfg.n_codes, side * side, dataset);

        ArModelT<float> model(ar_config(), seed(71));
        AdamT<float> opt;
        int64_t prev_steps = 0;
        if (!resume.empty()) {
            auto ck = load_checkpoint(resume);
            expect_stage(ck, "train-argen");
            apply_to_store(ck, model.params);
            load_adam(ck, opt, model.params, "adam", ck.meta.extra.value("adam_step", int64_t(0)));
            prev_steps = ck.meta.step;
        }
        ArTrainConfig tc;
        tc.iters = cfg_.get_int("ar_iters");
        tc.batch = cfg_.get_int("ar_batch");
        tc.lr = cfg_.get_real("ar_lr");
        tc.drop_prob = cfg_.get_real("ar_drop_prob");
        tc.seed = seed(72);
        auto stats = train_argen(model, dataset, tc, &opt);
        write_curve("train-argen", stats.loss_curve);

        CheckpointMeta meta;
        meta.stage = "train-argen";
        meta.step = prev_steps + tc.iters;
        meta.config_hash = cfg_.hash();
        meta.parent_hash = checkpoint_hash(paths_.ckpt("train-pixel"));
        meta.extra["adam_step"] = opt.step_count;
        CheckpointPayload pay;
        pay.add_store(model.params);
        add_adam_to_payload(pay, opt, model.params, "adam");
        save_checkpoint(paths_.ckpt("train-argen"), meta, pay);
    }

    ArModelT<float> load_argen(const std::string& cmd) const {
        require_ckpt(cmd, "train-argen");
        auto ck = load_checkpoint(paths_.ckpt("train-argen"));
        expect_stage(ck, "train-argen");
        ArModelT<float> model(ar_config(), seed(71));
        apply_to_store(ck, model.params);
        model.trained = true;
        return model;
    }

    // ---- inference building blocks ---------------------------------------

    // reconstruct one image through tokenize -> few-step decode -> VAE
    Tensor reconstruct_image(const VqModelT<float>& vq, const LatentDmT<float>& ldm,
                             const ConsistencyDecoderT<float>& dec, const Tensor& image, int cond_size,
                             uint64_t decode_seed) const {
        TensorT<float> batch = stack_images<float>({image});
        TensorT<float> cond = make_condition(vq, batch, cond_size);
        std::vector<int> latent_shape = {1, ldm.vae.cfg.lat_ch, image.dim(1) / ldm.vae.cfg.factor,
                                         image.dim(2) / ldm.vae.cfg.factor};
        DecodeMode mode = decode_mode_from(cfg_.get_str("stage2_mode"));
        TensorT<float> z0_hat = mode == DecodeMode::OneStep
                                    ? decode_one_step(dec, cond, latent_shape, decode_seed)
                                    : decode_two_step(dec, cond, latent_shape, decode_seed);
        return batch_item(ldm.vae_decode(z0_hat), 0);
    }

    // generated tokens -> quantized condition grid -> image
    Tensor tokens_to_image(const VqModelT<float>& vq, const LatentDmT<float>& ldm,
                           const ConsistencyDecoderT<float>& dec, const std::vector<int>& tokens,
                           uint64_t decode_seed) const {
        int side = token_grid_side();
        int res = cfg_.get_int("resolution");
        TensorT<float> cond = tokens_to_grid(tokens, vq.codes(), 1, side, side);
        std::vector<int> latent_shape = {1, ldm.vae.cfg.lat_ch, res / ldm.vae.cfg.factor,
                                         res / ldm.vae.cfg.factor};
        DecodeMode mode = decode_mode_from(cfg_.get_str("stage2_mode"));
        TensorT<float> z0_hat = mode == DecodeMode::OneStep
                                    ? decode_one_step(dec, cond, latent_shape, decode_seed)
                                    : decode_two_step(dec, cond, latent_shape, decode_seed);
        return batch_item(ldm.vae_decode(z0_hat), 0);
    }

    // ---- commands on top of the trained stack ----------------------------

    void reconstruct_cmd(const std::string& input_dir) const {
        auto vq = load_vq("reconstruct");
        auto ldm = load_ldm("reconstruct");
        auto dec = load_decoder("reconstruct", "train-pixel", ldm);

        std::vector<std::string> files;
        std::vector<Tensor> images;
        if (!input_dir.empty()) {
            for (const auto& e : std::filesystem::directory_iterator(input_dir))
                if (e.path().extension() == ".png") files.push_back(e.path().string());
            std::sort(files.begin(), files.end());
            for (const auto& f : files) images.push_back(load_image(f));
        } else {
            Corpus corpus = load_corpus();
            images = corpus.holdout;
            for (size_t i = 0; i < images.size(); ++i) files.push_back("holdout_" + std::to_string(i));
        }
        LAYTON_CHECK(!images.empty(), "reconstruct: no input images");

        int cond_size = cfg_.get_int("eval_cond_size");
        uint64_t s0 = uint64_t(cfg_.get_int_list("eval_seeds")[0]);
        std::vector<PerImageRow> rows;
        PerceptualProxyT<float> proxy(uint64_t(cfg_.get_int("proxy_seed")));
        for (size_t i = 0; i < images.size(); ++i) {
            Tensor rec = reconstruct_image(vq, ldm, dec, images[i], cond_size, s0 + i);
            std::string out = paths_.recon_dir() + "/recon_" + std::to_string(i) + ".png";
            save_image(out, rec);
            PerImageRow row;
            row.index = int(i);
            row.psnr = psnr(rec, images[i]);
            row.ssim = ssim(rec, images[i]);
            row.proxy = proxy.distance(rec, images[i]);
            row.mse = mse_tensor(rec, images[i]);
            rows.push_back(row);
        }
        write_per_image_csv(paths_.reports_dir() + "/reconstruct.csv", rows);
        std::fprintf(stderr, "[info] reconstruct: %zu images -> %s\n", images.size(),
                     paths_.recon_dir().c_str());
    }

    void generate_cmd(const std::string& caption, double scale, int count) const {
        auto vq = load_vq("generate");
        auto ldm = load_ldm("generate");
        auto dec = load_decoder("generate", "train-pixel", ldm);
        auto ar = load_argen("generate");

        std::vector<std::pair<std::string, std::vector<int>>> prompts;
        if (!caption.empty()) {
            for (int i = 0; i < count; ++i) prompts.push_back({caption, tokenize_caption(caption)});
        } else {
            Corpus corpus = load_corpus();
            for (int i = 0; i < count && i < int(corpus.holdout_captions.size()); ++i)
                prompts.push_back({corpus.holdout_captions[size_t(i)],
                                   corpus.holdout_caption_ids[size_t(i)]});
        }
        GenerateConfig gc;
        gc.cfg_scale = scale;
        gc.sampling = Sampling::TopK;
        gc.top_k = cfg_.get_int("ar_top_k");
        gc.temperature = cfg_.get_real("ar_temperature");
        uint64_t s0 = uint64_t(cfg_.get_int_list("eval_seeds")[0]);
        std::ofstream manifest(paths_.gen_dir() + "/manifest.tsv");
        for (size_t i = 0; i < prompts.size(); ++i) {
            auto tokens = generate(ar, prompts[i].second, ar.cfg.seq_len, gc, s0 + i);
            Tensor img = tokens_to_image(vq, ldm, dec, tokens, s0 + 1000 + i);
            std::string out = paths_.gen_dir() + "/gen_" + std::to_string(i) + ".png";
            save_image(out, img);
            manifest << "gen_" << i << ".png\t" << prompts[i].first << "\n";
        }
        std::fprintf(stderr, "[info] generate: %zu images -> %s\n", prompts.size(), paths_.gen_dir().c_str());
    }

    // stage-1 route: conditional DDIM reconstruction from noise
    Tensor reconstruct_image_ddim(const VqModelT<float>& vq, const LatentDmT<float>& ldm,
                                  const LaddT<float>& ladd, const Tensor& image, int cond_size, int steps,
                                  uint64_t decode_seed) const {
        TensorT<float> batch = stack_images<float>({image});
        TensorT<float> cond = make_condition(vq, batch, cond_size);
        auto denoise = [&](const Tensor& z, int t) {
            return ladd_denoise(ladd, z, cond, t, ldm.schedule.t_max);
        };
        Rng rng = Rng::seeded(decode_seed);
        std::vector<int> latent_shape = {1, ldm.vae.cfg.lat_ch, image.dim(1) / ldm.vae.cfg.factor,
                                         image.dim(2) / ldm.vae.cfg.factor};
        TensorT<float> z0_hat = ddim_sample(denoise, ldm.schedule, latent_shape, steps, rng);
        return batch_item(ldm.vae_decode(z0_hat), 0);
    }

    EvalReport eval_cmd() const {
        auto vq = load_vq("eval");
        auto ldm = load_ldm("eval");
        Corpus corpus = load_corpus();
        PerceptualProxyT<float> proxy(uint64_t(cfg_.get_int("proxy_seed")));
        int cond_size = cfg_.get_int("eval_cond_size");
        int count = std::min<int>(cfg_.get_int("eval_count"), int(corpus.holdout.size()));
        std::vector<Tensor> images(corpus.holdout.begin(), corpus.holdout.begin() + count);
        uint64_t s0 = uint64_t(cfg_.get_int_list("eval_seeds")[0]);
        std::string mode = cfg_.get_str("eval_recon_mode");

        std::vector<PerImageRow> rows;
        EvalReport rep;
        if (mode == "ddim") {
            auto ladd = load_ladd("eval", ldm);
            int steps = cfg_.get_int("eval_ddim_steps");
            rep = eval_reconstruction<float>(
                [&](const Tensor& img, int i) {
                    return reconstruct_image_ddim(vq, ldm, ladd, img, cond_size, steps, s0 + uint64_t(i));
                },
                images, proxy, "reconstruction-ddim", &rows);
        } else {
            auto dec = load_decoder("eval", "train-pixel", ldm);
            rep = eval_reconstruction<float>(
                [&](const Tensor& img, int i) {
                    return reconstruct_image(vq, ldm, dec, img, cond_size, s0 + uint64_t(i));
                },
                images, proxy, "reconstruction", &rows);
        }
        rep.config_hash = cfg_.hash();
        rep.seeds = {s0};
        rep.save(paths_.reports_dir() + "/recon_eval.json");
        write_per_image_csv(paths_.reports_dir() + "/recon_eval.csv", rows);

        // generation eval when an AR checkpoint exists
        if (std::filesystem::exists(paths_.ckpt("train-argen"))) {
            auto dec = load_decoder("eval", "train-pixel", ldm);
            auto ar = load_argen("eval");
            double scale = cfg_.get_real_list("eval_cfg_scales")[0];
            auto gen_rep = run_generation_eval(vq, ldm, dec, ar, proxy, corpus, count, scale, s0);
            gen_rep.save(paths_.reports_dir() + "/gen_eval.json");
        }
        return rep;
    }

    EvalReport run_generation_eval(const VqModelT<float>& vq, const LatentDmT<float>& ldm,
                                   const ConsistencyDecoderT<float>& dec, const ArModelT<float>& ar,
                                   const PerceptualProxyT<float>& proxy, const Corpus& corpus, int count,
                                   double scale, uint64_t s0) const {
        GenerateConfig gc;
        gc.cfg_scale = scale;
        gc.sampling = Sampling::TopK;
        gc.top_k = cfg_.get_int("ar_top_k");
        gc.temperature = cfg_.get_real("ar_temperature");
        std::vector<Tensor> gen_imgs, refs;
        nlohmann::json outputs = nlohmann::json::array();
        for (int i = 0; i < count && i < int(corpus.holdout.size()); ++i) {
            auto tokens = generate(ar, corpus.holdout_caption_ids[size_t(i)], ar.cfg.seq_len, gc, s0 + i);
            gen_imgs.push_back(tokens_to_image(vq, ldm, dec, tokens, s0 + 2000 + i));
            refs.push_back(corpus.holdout[size_t(i)]);
            outputs.push_back({{"caption", corpus.holdout_captions[size_t(i)]},
                               {"first_tokens", std::vector<int>(tokens.begin(),
                                                                 tokens.begin() + std::min<size_t>(8, tokens.size()))}});
        }
        auto rep = eval_generation(gen_imgs, refs, proxy, scale, "generation");
        rep.config_hash = cfg_.hash();
        rep.seeds = {s0};
        rep.extra["outputs"] = outputs;
        return rep;
    }

    // token-budget sweep: mean reconstruction metrics per condition size,
    // averaged over the configured seeds
    nlohmann::json sweep_tokens_cmd() const {
        auto vq = load_vq("sweep-tokens");
        auto ldm = load_ldm("sweep-tokens");
        auto dec = load_decoder("sweep-tokens", "train-pixel", ldm);
        Corpus corpus = load_corpus();
        PerceptualProxyT<float> proxy(uint64_t(cfg_.get_int("proxy_seed")));
        int count = std::min<int>(cfg_.get_int("eval_count"), int(corpus.holdout.size()));
        std::vector<Tensor> images(corpus.holdout.begin(), corpus.holdout.begin() + count);
        auto seeds = cfg_.get_int_list("eval_seeds");
        auto sizes = cfg_.get_int_list("cond_sizes");

        nlohmann::json rows = nlohmann::json::array();
        std::vector<double> budgets, mses, proxies;
        std::ofstream csv(paths_.reports_dir() + "/sweep_tokens.csv");
        csv << "cond_size,tokens,psnr,ssim,proxy,mse\n";
        for (int size : sizes) {
            double psnr_acc = 0, ssim_acc = 0, proxy_acc = 0, mse_acc = 0;
            for (int sd : seeds) {
                auto rep = eval_reconstruction<float>(
                    [&](const Tensor& img, int i) {
                        return reconstruct_image(vq, ldm, dec, img, size,
                                                 uint64_t(sd) * 7919 + uint64_t(i));
                    },
                    images, proxy, "sweep");
                psnr_acc += rep.metrics.at("psnr");
                ssim_acc += rep.metrics.at("ssim");
                proxy_acc += rep.metrics.at("proxy");
                mse_acc += rep.metrics.at("mse");
            }
            double n = double(seeds.size());
            int tokens = (size / 4) * (size / 4);
            rows.push_back({{"cond_size", size},
                            {"tokens", tokens},
                            {"psnr", psnr_acc / n},
                            {"ssim", ssim_acc / n},
                            {"proxy", proxy_acc / n},
                            {"mse", mse_acc / n}});
            char buf[200];
            std::snprintf(buf, sizeof(buf), "%d,%d,%.6f,%.6f,%.8f,%.8f\n", size, tokens, psnr_acc / n,
                          ssim_acc / n, proxy_acc / n, mse_acc / n);
            csv << buf;
            budgets.push_back(tokens);
            mses.push_back(mse_acc / n);
            proxies.push_back(proxy_acc / n);
        }
        nlohmann::json out = {{"sweep", "tokens"}, {"config_hash", cfg_.hash()}, {"rows", rows}};
        std::ofstream(paths_.reports_dir() + "/sweep_tokens.json") << out.dump(2) << "\n";
        chart::line_chart(paths_.reports_dir() + "/sweep_tokens.png", budgets,
                          {{"mse", mses}, {"proxy", proxies}});
        return out;
    }

    nlohmann::json sweep_cfg_cmd() const {
        auto vq = load_vq("sweep-cfg");
        auto ldm = load_ldm("sweep-cfg");
        auto dec = load_decoder("sweep-cfg", "train-pixel", ldm);
        auto ar = load_argen("sweep-cfg");
        Corpus corpus = load_corpus();
        PerceptualProxyT<float> proxy(uint64_t(cfg_.get_int("proxy_seed")));
        int count = std::min<int>(cfg_.get_int("eval_count"), int(corpus.holdout.size()));
        uint64_t s0 = uint64_t(cfg_.get_int_list("eval_seeds")[0]);
        auto scales = cfg_.get_real_list("eval_cfg_scales");

        nlohmann::json rows = nlohmann::json::array();
        std::vector<double> xs, mses, proxies;
        std::ofstream csv(paths_.reports_dir() + "/sweep_cfg.csv");
        csv << "scale,psnr,ssim,proxy,mse\n";
        for (double s : scales) {
            auto rep = run_generation_eval(vq, ldm, dec, ar, proxy, corpus, count, s, s0);
            rows.push_back({{"scale", s},
                            {"psnr", rep.metrics.at("psnr")},
                            {"ssim", rep.metrics.at("ssim")},
                            {"proxy", rep.metrics.at("proxy")},
                            {"mse", rep.metrics.at("mse")}});
            char buf[200];
            std::snprintf(buf, sizeof(buf), "%.3f,%.6f,%.6f,%.8f,%.8f\n", s, rep.metrics.at("psnr"),
                          rep.metrics.at("ssim"), rep.metrics.at("proxy"), rep.metrics.at("mse"));
            csv << buf;
            xs.push_back(s);
            mses.push_back(rep.metrics.at("mse"));
            proxies.push_back(rep.metrics.at("proxy"));
        }
        nlohmann::json out = {{"sweep", "cfg"}, {"config_hash", cfg_.hash()}, {"rows", rows}};
        std::ofstream(paths_.reports_dir() + "/sweep_cfg.json") << out.dump(2) << "\n";
        chart::line_chart(paths_.reports_dir() + "/sweep_cfg.png", xs, {{"mse", mses}, {"proxy", proxies}});
        return out;
    }

    // render curves from a saved sweep report
    void plot_cmd(const std::string& report_path, const std::string& out_path) const {
        std::ifstream f(report_path);
        if (!f) throw IntegrityError("plot: cannot open report " + report_path);
        nlohmann::json j = nlohmann::json::parse(f);
        LAYTON_CHECK(j.contains("rows"), "plot: report has no rows");
        std::vector<double> xs;
        std::vector<double> mses, proxies, psnrs;
        for (const auto& row : j.at("rows")) {
            xs.push_back(row.contains("tokens") ? row.at("tokens").get<double>()
                                                : row.at("scale").get<double>());
            mses.push_back(row.at("mse").get<double>());
            proxies.push_back(row.at("proxy").get<double>());
            psnrs.push_back(row.at("psnr").get<double>());
        }
        chart::line_chart(out_path, xs, {{"mse", mses}, {"proxy", proxies}});
        std::fprintf(stderr, "[info] plot: %s -> %s\n", report_path.c_str(), out_path.c_str());
    }

private:
    void write_curve(const std::string& stage, const std::vector<double>& losses) const {
        std::ofstream f(paths_.curves_dir() + "/" + stage + ".csv");
        f << "step,loss\n";
        for (size_t i = 0; i < losses.size(); ++i) f << i << "," << losses[i] << "\n";
    }

    void write_ladd_curve(const LaddTrainStats& stats) const {
        std::ofstream f(paths_.curves_dir() + "/train-ladd.csv");
        f << "step,loss,resolution\n";
        for (size_t i = 0; i < stats.loss_curve.size(); ++i)
            f << i << "," << stats.loss_curve[i] << "," << stats.res_curve[i] << "\n";
    }

    RunConfig cfg_;
    RunPaths paths_;
};

}  // namespace layton
