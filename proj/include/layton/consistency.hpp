#pragma once

// Consistency distillation of the stage-1 conditional denoiser into a 1-2
// step decoder, plus the stage-2 pixel reconstruction objective trained
// end-to-end through the few-step decode.

#include "layton/ladd.hpp"
#include "layton/metrics.hpp"

namespace layton {

struct CmConfig {
    int boundary_t = 0;       // timesteps <= boundary_t are identity
    double sigma_data = 0.5;  // skip/out parameterization scale
    double skip_k = 5.0;
    double ema_decay = 0.995;
    int ode_substeps = 32;    // teacher DDIM stride = T / ode_substeps
    int t_mid_div = 2;        // two-step midpoint = T / t_mid_div
};

enum class DecodeMode { OneStep, TwoStep };

inline DecodeMode decode_mode_from(const std::string& s) {
    if (s == "one_step") return DecodeMode::OneStep;
    if (s == "two_step") return DecodeMode::TwoStep;
    throw ConfigError("unknown decode mode: " + s);
}

template <class R>
struct ConsistencyDecoderT {
    CmConfig cfg;
    LaddT<R> net;   // fully trainable student (owns its base copy)
    LaddT<R> ema;   // EMA shadow of net
    NoiseScheduleT<R> schedule;
    bool distilled = false;

    // c_skip -> 1 and c_out -> 0 at the boundary
    void skip_out(int t, double& c_skip, double& c_out) const {
        double span = double(schedule.t_max - cfg.boundary_t);
        double u = std::max(0.0, double(t - cfg.boundary_t)) / span;
        double s2 = cfg.sigma_data * cfg.sigma_data;
        double uk = u * cfg.skip_k;
        c_skip = s2 / (uk * uk + s2);
        c_out = uk / std::sqrt(uk * uk + s2);
    }
};

// Shared prefix of every name in a store ("unet." for the base LDM,
// "cm.base." for a student copy, ...).
template <class R>
inline std::string store_prefix(const ParamStoreT<R>& ps) {
    LAYTON_CHECK(ps.size() > 0, "store_prefix: empty store");
    std::string first = ps.at(0).name;
    size_t cut = first.size();
    for (int i = 1; i < ps.size(); ++i) {
        const std::string& n = ps.at(i).name;
        size_t k = 0;
        while (k < cut && k < n.size() && n[k] == first[k]) ++k;
        cut = k;
    }
    size_t dot = first.rfind('.', cut ? cut - 1 : 0);
    LAYTON_CHECK(dot != std::string::npos, "store_prefix: no common dotted prefix");
    return first.substr(0, dot + 1);
}

// Fully trainable structural copy of a LADD, value-initialized from it.
template <class R>
inline LaddT<R> clone_ladd_student(const LaddT<R>& teacher, const std::string& prefix, uint64_t seed) {
    LaddT<R> s;
    s.ucfg = teacher.ucfg;
    s.cond_dim = teacher.cond_dim;
    s.owned_base = std::make_unique<UNetT<R>>(teacher.ucfg, seed, prefix + ".base");
    copy_params(teacher.base_net().params, store_prefix(teacher.base_net().params), s.owned_base->params,
                prefix + ".base.");
    s.init_control(prefix + ".ctrl", seed + 1);
    copy_params(teacher.params, store_prefix(teacher.params), s.params, prefix + ".ctrl.");
    return s;
}

// f(z, C, t) = c_skip z + c_out net(z, C, t); the network output is read as
// a direct x0 estimate, and the boundary is an identity by construction.
// Routing the x0 estimate through the eps form ((z - beta eps_hat)/alpha)
// would force the net to reproduce its own input to 1/alpha_T precision,
// which dominates the error budget at terminal timesteps.
template <class R>
inline VarT<R> consistency_apply(const ConsistencyDecoderT<R>& dec, const LaddT<R>& net, TapeT<R>& tape,
                                 LaddPassT<R>& pass, VarT<R> z, const TensorT<R>& cond, int t) {
    if (t <= dec.cfg.boundary_t) return z;
    std::vector<int> ts(size_t(z.val().dim(0)), t);
    auto x0_raw = ladd_forward(net, pass, z, cond, ts, dec.schedule.t_max);
    double c_skip = 0, c_out = 0;
    dec.skip_out(t, c_skip, c_out);
    return scale(z, c_skip) + scale(x0_raw, c_out);
}

// No-tape application.
template <class R>
inline TensorT<R> consistency_value(const ConsistencyDecoderT<R>& dec, const LaddT<R>& net,
                                    const TensorT<R>& z, const TensorT<R>& cond, int t) {
    if (t <= dec.cfg.boundary_t) return z;
    TapeT<R> tape;
    auto pass = ladd_begin(tape, net, false);
    auto zv = input(tape, z, false);
    return consistency_apply(dec, net, tape, pass, zv, cond, t).val();
}

// ---------------------------------------------------------------------------
// Few-step decoding
// ---------------------------------------------------------------------------

template <class R>
inline TensorT<R> decode_one_step(const ConsistencyDecoderT<R>& dec, const TensorT<R>& cond,
                                  const std::vector<int>& latent_shape, uint64_t seed) {
    if (!dec.distilled) throw StageOrderError("decode_one_step requires a distilled decoder (run distill-cm)");
    Rng rng = Rng::seeded(seed);
    TensorT<R> eps = TensorT<R>::randn(latent_shape, rng);
    return consistency_value(dec, dec.net, eps, cond, dec.schedule.t_max);
}

template <class R>
inline TensorT<R> decode_two_step(const ConsistencyDecoderT<R>& dec, const TensorT<R>& cond,
                                  const std::vector<int>& latent_shape, uint64_t seed) {
    if (!dec.distilled) throw StageOrderError("decode_two_step requires a distilled decoder (run distill-cm)");
    Rng rng = Rng::seeded(seed);
    TensorT<R> eps = TensorT<R>::randn(latent_shape, rng);
    TensorT<R> z_mid = consistency_value(dec, dec.net, eps, cond, dec.schedule.t_max);
    int t_mid = dec.schedule.t_max / dec.cfg.t_mid_div;
    TensorT<R> eps2 = TensorT<R>::randn(latent_shape, rng);
    TensorT<R> z_renoised = diffuse(dec.schedule, z_mid, t_mid, eps2);
    return consistency_value(dec, dec.net, z_renoised, cond, t_mid);
}

// In-tape few-step decode used by the pixel loss. The two-step path applies
// stop_gradient to the first application, so gradients flow only through the
// second one.
template <class R>
inline VarT<R> decode_var(const ConsistencyDecoderT<R>& dec, TapeT<R>& tape, LaddPassT<R>& pass,
                          const TensorT<R>& cond, const std::vector<int>& latent_shape, uint64_t seed,
                          DecodeMode mode) {
    Rng rng = Rng::seeded(seed);
    TensorT<R> eps = TensorT<R>::randn(latent_shape, rng);
    auto z = input(tape, eps, false);
    auto z1 = consistency_apply(dec, dec.net, tape, pass, z, cond, dec.schedule.t_max);
    if (mode == DecodeMode::OneStep) return z1;
    auto z_mid = stop_gradient(z1);
    int t_mid = dec.schedule.t_max / dec.cfg.t_mid_div;
    TensorT<R> eps2 = TensorT<R>::randn(latent_shape, rng);
    R a = dec.schedule.alpha_at(t_mid), b = dec.schedule.beta_at(t_mid);
    auto renoised = scale(z_mid, double(a)) + constant(tape, [&] {
                        TensorT<R> scaled(eps2.shape);
                        for (int64_t i = 0; i < eps2.size(); ++i) scaled[i] = b * eps2[i];
                        return scaled;
                    }());
    return consistency_apply(dec, dec.net, tape, pass, renoised, cond, t_mid);
}

// ---------------------------------------------------------------------------
// Distillation (stage: distill-cm)
// ---------------------------------------------------------------------------

struct DistillConfig {
    int iters = 400;
    int batch = 4;
    double lr = 5e-4;
    double lr_final_frac = 0.1;
    double warmup_frac = 0.3;  // initial x0-regression phase re-targeting the eps-init head
    std::vector<int> cond_sizes = {28, 32, 36};
    uint64_t seed = 5;
    int log_every = 100;
};

template <class R>
inline void ema_update(ParamStoreT<R>& ema, const ParamStoreT<R>& online, double decay) {
    LAYTON_CHECK(ema.size() == online.size(), "ema_update: store size mismatch");
    for (int i = 0; i < ema.size(); ++i) {
        auto& e = ema.at(i).value;
        const auto& o = online.at(i).value;
        for (int64_t j = 0; j < e.size(); ++j)
            e[j] = R(decay * double(e[j]) + (1.0 - decay) * double(o[j]));
    }
}

// Mean self-consistency residual ||f(z_t) - f(z_t')||^2 over teacher ODE
// pairs; used before/after distillation.
template <class R>
inline double self_consistency_residual(const ConsistencyDecoderT<R>& dec, const LaddT<R>& teacher,
                                        const VqModelT<R>& vq, LatentDmT<R>& ldm,
                                        const std::vector<TensorT<R>>& images, int cond_size, uint64_t seed) {
    Rng rng = Rng::seeded(seed);
    double acc = 0;
    int count = 0;
    int stride = std::max(1, ldm.schedule.t_max / dec.cfg.ode_substeps);
    for (const auto& img : images) {
        TensorT<R> batch = stack_images<R>({img});
        TensorT<R> cond = make_condition(vq, batch, cond_size);
        TensorT<R> z0 = ldm.vae_encode(batch);
        int n = rng.uniform_int(2, dec.cfg.ode_substeps);
        int t_n = n * stride, t_m = t_n - stride;
        TensorT<R> eps = TensorT<R>::randn(z0.shape, rng);
        TensorT<R> z_tn = diffuse(ldm.schedule, z0, t_n, eps);
        TensorT<R> eps_teacher = ladd_denoise(teacher, z_tn, cond, t_n, ldm.schedule.t_max);
        TensorT<R> z_tm = ddim_update(ldm.schedule, z_tn, eps_teacher, t_n, t_m);
        TensorT<R> f_n = consistency_value(dec, dec.net, z_tn, cond, t_n);
        TensorT<R> f_m = consistency_value(dec, dec.net, z_tm, cond, t_m);
        acc += mse_tensor(f_n, f_m);
        ++count;
    }
    return acc / std::max(1, count);
}

template <class R>
inline ConsistencyDecoderT<R> distill(const LaddT<R>& teacher, const VqModelT<R>& vq, LatentDmT<R>& ldm,
                                      const std::vector<TensorT<R>>& images, const CmConfig& cm,
                                      const DistillConfig& cfg, TrainStats* stats_out = nullptr,
                                      AdamT<R>* ext_base = nullptr, AdamT<R>* ext_ctrl = nullptr,
                                      const std::vector<TensorT<R>>* images_hi = nullptr) {
    LAYTON_CHECK(!images.empty(), "distill: empty dataset");
    ldm.require_trained("distill");

    ConsistencyDecoderT<R> dec;
    dec.cfg = cm;
    dec.schedule = ldm.schedule;
    dec.net = clone_ladd_student(teacher, "cm", cfg.seed + 100);
    dec.ema = clone_ladd_student(teacher, "cme", cfg.seed + 200);

    Rng rng = Rng::seeded(cfg.seed);
    AdamT<R> local_base, local_ctrl;
    AdamT<R>& opt_base = ext_base ? *ext_base : local_base;
    AdamT<R>& opt_ctrl = ext_ctrl ? *ext_ctrl : local_ctrl;
    opt_base.lr = cfg.lr;
    opt_ctrl.lr = cfg.lr;
    TrainStats stats;
    int stride = std::max(1, ldm.schedule.t_max / cm.ode_substeps);

    for (int it = 0; it < cfg.iters; ++it) {
        double lr = cosine_lr(cfg.lr, cfg.lr_final_frac, it, cfg.iters);
        opt_base.lr = lr;
        opt_ctrl.lr = lr;
        const auto& pool = (images_hi && !images_hi->empty() && rng.uniform() < 0.5) ? *images_hi : images;
        std::vector<TensorT<R>> batch_imgs;
        for (int i = 0; i < cfg.batch; ++i)
            batch_imgs.push_back(pool[size_t(rng.uniform_int(0, int(pool.size()) - 1))]);
        TensorT<R> batch = stack_images(batch_imgs);
        int cond_size = cfg.cond_sizes[size_t(rng.uniform_int(0, int(cfg.cond_sizes.size()) - 1))];
        TensorT<R> cond = make_condition(vq, batch, cond_size);
        TensorT<R> z0 = ldm.vae_encode(batch);

        int n = rng.uniform_int(1, cm.ode_substeps);
        int t_n = n * stride;
        int t_m = t_n - stride;
        TensorT<R> eps = TensorT<R>::randn(z0.shape, rng);
        TensorT<R> z_tn = diffuse(ldm.schedule, z0, t_n, eps);

        TapeT<R> tape;
        auto pass = ladd_begin(tape, dec.net, true, true);
        auto zv = input(tape, z_tn, false);
        VarT<R> loss;
        if (it < int(cfg.warmup_frac * cfg.iters)) {
            // head re-targeting: regress the raw network output onto z0
            std::vector<int> ts(size_t(cfg.batch), t_n);
            auto raw = ladd_forward(dec.net, pass, zv, cond, ts, ldm.schedule.t_max);
            loss = mse(raw, input(tape, z0, false));
        } else {
            // one teacher ODE (DDIM) step toward 0
            TensorT<R> eps_teacher = ladd_denoise(teacher, z_tn, cond, t_n, ldm.schedule.t_max);
            TensorT<R> z_tm = ddim_update(ldm.schedule, z_tn, eps_teacher, t_n, t_m);
            // EMA target (stop-gradient by construction: plain tensor)
            TensorT<R> target = consistency_value(dec, dec.ema, z_tm, cond, t_m);
            auto online = consistency_apply(dec, dec.net, tape, pass, zv, cond, t_n);
            loss = mse(online, input(tape, target, false));
        }
        tape.backward(loss.id);
        opt_base.step(dec.net.owned_base->params, collect_grads(pass.base_bp));
        opt_ctrl.step(dec.net.params, collect_grads(pass.ctrl_bp));

        ema_update(dec.ema.owned_base->params, dec.net.owned_base->params, cm.ema_decay);
        ema_update(dec.ema.params, dec.net.params, cm.ema_decay);

        stats.loss_curve.push_back(double(loss.val()[0]));
        if (cfg.log_every > 0 && (it + 1) % cfg.log_every == 0)
            std::fprintf(stderr, "[info] distill iter %d loss %.5f\n", it + 1, stats.loss_curve.back());
    }
    dec.distilled = true;
    stats.final_metric = stats.loss_curve.empty() ? 0.0 : stats.loss_curve.back();
    stats.reached_target = true;
    if (stats_out) *stats_out = stats;
    return dec;
}

// ---------------------------------------------------------------------------
// Stage-2: pixel reconstruction loss through the few-step decode
// ---------------------------------------------------------------------------

struct PixelLossConfig {
    double w_perceptual = 1.0;
    double w_mse = 0.5;
};

// L_PR = w_p * proxy(Dec(z0_hat), x0) + w_m * MSE(Dec(z0_hat), x0)
template <class R>
inline VarT<R> pixel_recon_loss(const ConsistencyDecoderT<R>& dec, TapeT<R>& tape, LaddPassT<R>& pass,
                                const VaeT<R>& vae, const BoundT<R>& vae_bp,
                                const PerceptualProxyT<R>& proxy, const BoundT<R>& proxy_bp,
                                const TensorT<R>& cond, const TensorT<R>& x0_batch, double latent_scale,
                                uint64_t seed, DecodeMode mode, const PixelLossConfig& plc = {}) {
    std::vector<int> latent_shape = {x0_batch.dim(0), vae.cfg.lat_ch, x0_batch.dim(2) / vae.cfg.factor,
                                     x0_batch.dim(3) / vae.cfg.factor};
    auto z0_hat = decode_var(dec, tape, pass, cond, latent_shape, seed, mode);
    auto decoded = vae.decode(vae_bp, scale(z0_hat, latent_scale));
    auto x0 = input(tape, x0_batch, false);
    auto perceptual = proxy.distance_var(tape, proxy_bp, decoded, x0);
    auto pix = mse(decoded, x0);
    return scale(perceptual, plc.w_perceptual) + scale(pix, plc.w_mse);
}

struct Stage2Config {
    int iters = 300;
    int batch = 2;
    double lr = 2e-4;
    double lr_final_frac = 0.1;
    std::vector<int> cond_sizes = {28, 32, 36};
    DecodeMode mode = DecodeMode::OneStep;
    PixelLossConfig pixel;
    bool keep_diffusion_loss = false;  // optionally mix L_DF into phase 2
    double diffusion_loss_weight = 0.1;
    uint64_t seed = 6;
    int log_every = 100;
    int checkpoint_every = 50;  // last-good snapshot cadence
};

template <class R>
inline TrainStats train_stage2(ConsistencyDecoderT<R>& dec, const VqModelT<R>& vq, LatentDmT<R>& ldm,
                               const PerceptualProxyT<R>& proxy, const std::vector<TensorT<R>>& images,
                               const Stage2Config& cfg, AdamT<R>* ext_base = nullptr,
                               AdamT<R>* ext_ctrl = nullptr,
                               const std::vector<TensorT<R>>* images_hi = nullptr) {
    LAYTON_CHECK(!images.empty(), "train_stage2: empty dataset");
    if (!dec.distilled) throw StageOrderError("train_stage2 requires a distilled decoder (run distill-cm)");
    uint64_t vq_sum = vq.params.checksum();
    uint64_t vae_sum = ldm.vae.params.checksum();

    Rng rng = Rng::seeded(cfg.seed);
    AdamT<R> local_base, local_ctrl;
    AdamT<R>& opt_base = ext_base ? *ext_base : local_base;
    AdamT<R>& opt_ctrl = ext_ctrl ? *ext_ctrl : local_ctrl;
    opt_base.lr = cfg.lr;
    opt_ctrl.lr = cfg.lr;
    TrainStats stats;

    // last-good snapshot for divergence recovery
    auto snap_base = dec.net.owned_base->params;
    auto snap_ctrl = dec.net.params;

    for (int it = 0; it < cfg.iters; ++it) {
        double lr = cosine_lr(cfg.lr, cfg.lr_final_frac, it, cfg.iters);
        opt_base.lr = lr;
        opt_ctrl.lr = lr;
        const auto& pool = (images_hi && !images_hi->empty() && rng.uniform() < 0.5) ? *images_hi : images;
        std::vector<TensorT<R>> batch_imgs;
        for (int i = 0; i < cfg.batch; ++i)
            batch_imgs.push_back(pool[size_t(rng.uniform_int(0, int(pool.size()) - 1))]);
        TensorT<R> batch = stack_images(batch_imgs);
        int cond_size = cfg.cond_sizes[size_t(rng.uniform_int(0, int(cfg.cond_sizes.size()) - 1))];
        TensorT<R> cond = make_condition(vq, batch, cond_size);

        try {
            TapeT<R> tape;
            auto pass = ladd_begin(tape, dec.net, true, true);
            BoundT<R> vae_bp = bind(tape, ldm.vae.params, false);
            BoundT<R> proxy_bp = bind(tape, proxy.params, false);
            auto loss = pixel_recon_loss(dec, tape, pass, ldm.vae, vae_bp, proxy, proxy_bp, cond, batch,
                                         ldm.latent_scale, rng.next_u64(), cfg.mode, cfg.pixel);
            if (cfg.keep_diffusion_loss) {
                TensorT<R> z0 = ldm.vae_encode(batch);
                int t = rng.uniform_int(1, ldm.schedule.t_max);
                TensorT<R> eps = TensorT<R>::randn(z0.shape, rng);
                auto zt = input(tape, diffuse(ldm.schedule, z0, t, eps), false);
                std::vector<int> ts(size_t(batch.dim(0)), t);
                auto pred = ladd_forward(dec.net, pass, zt, cond, ts, ldm.schedule.t_max);
                loss = loss + scale(mse(pred, input(tape, eps, false)), cfg.diffusion_loss_weight);
            }
            tape.backward(loss.id);
            opt_base.step(dec.net.owned_base->params, collect_grads(pass.base_bp));
            opt_ctrl.step(dec.net.params, collect_grads(pass.ctrl_bp));
            stats.loss_curve.push_back(double(loss.val()[0]));
        } catch (const TrainingDivergence&) {
            dec.net.owned_base->params = snap_base;
            dec.net.params = snap_ctrl;
            throw TrainingDivergence("stage-2 diverged at iter " + std::to_string(it) +
                                     "; last-good parameters restored");
        }

        if ((it + 1) % std::max(1, cfg.checkpoint_every) == 0) {
            snap_base = dec.net.owned_base->params;
            snap_ctrl = dec.net.params;
        }
        if (cfg.log_every > 0 && (it + 1) % cfg.log_every == 0)
            std::fprintf(stderr, "[info] stage2 iter %d loss %.5f\n", it + 1, stats.loss_curve.back());
    }

    if (vq.params.checksum() != vq_sum || ldm.vae.params.checksum() != vae_sum)
        throw ContractViolation("train_stage2: a frozen parameter changed");
    stats.final_metric = stats.loss_curve.empty() ? 0.0 : stats.loss_curve.back();
    stats.reached_target = true;
    return stats;
}

}  // namespace layton
