#pragma once

// Latent diffusion decoder: the frozen base denoiser plus a trainable clone
// of its encoder half. The clone ingests the quantized condition grid through
// a 1x1 adapter; zero-initialized 1x1 convolutions feed the clone's features
// back into the base decoder inputs, so a freshly built model reproduces the
// base forward exactly.

#include <memory>

#include "layton/latentdm.hpp"
#include "layton/vq.hpp"

namespace layton {

template <class R>
inline TensorT<R> resize_batch_bilinear(const TensorT<R>& batch, int out_h, int out_w) {
    LAYTON_CHECK(batch.rank() == 4, "resize_batch: [B,C,H,W] required");
    int b = batch.dim(0), c = batch.dim(1);
    TensorT<R> out({b, c, out_h, out_w});
    for (int bi = 0; bi < b; ++bi) {
        TensorT<R> item = batch_item(batch, bi);
        TensorT<R> r = resize_bilinear(item, out_h, out_w);
        std::copy(r.data.begin(), r.data.end(), out.ptr() + int64_t(bi) * c * out_h * out_w);
    }
    return out;
}

// Copy values for every dst parameter named dst_prefix+rest from the source
// parameter src_prefix+rest. Shapes must match.
template <class R>
inline void copy_params(const ParamStoreT<R>& src, const std::string& src_prefix, ParamStoreT<R>& dst,
                        const std::string& dst_prefix) {
    for (int i = 0; i < dst.size(); ++i) {
        auto& p = dst.at(i);
        if (p.name.rfind(dst_prefix, 0) != 0) continue;
        std::string rest = p.name.substr(dst_prefix.size());
        int si = src.find(src_prefix + rest);
        if (si < 0) continue;
        const auto& sp = src.at(si);
        LAYTON_CHECK(sp.value.same_shape(p.value), "copy_params: shape mismatch for " + p.name);
        p.value = sp.value;
    }
}

template <class R>
struct LaddT {
    const UNetT<R>* base = nullptr;          // frozen reference (stage 1)
    std::unique_ptr<UNetT<R>> owned_base;    // trainable copy (consistency student)
    ParamStoreT<R> params;                   // control branch parameters
    LinearT<R> tmlp1_c, tmlp2_c;
    Conv2dT<R> conv_in_c, down_c;
    ResBlockT<R> enc1_c, enc2_c, mid_c;
    Conv2dT<R> zc_e1, zc_e2, zc_m;           // zero convolutions
    Conv2dT<R> cond_adapter;                 // 1x1 projection of the condition
    int cond_dim = 32;
    UNetConfig ucfg;

    const UNetT<R>& base_net() const { return owned_base ? *owned_base : *base; }

    void init_control(const std::string& prefix, uint64_t seed) {
        Rng rng = Rng::seeded(seed);
        int b = ucfg.base;
        tmlp1_c.init(params, prefix + ".tmlp1", ucfg.tdim, ucfg.tdim, rng);
        tmlp2_c.init(params, prefix + ".tmlp2", ucfg.tdim, ucfg.tdim, rng);
        conv_in_c.init(params, prefix + ".conv_in", ucfg.in_ch, b, 3, 1, 1, rng);
        enc1_c.init(params, prefix + ".enc1", b, b, ucfg.tdim, rng);
        down_c.init(params, prefix + ".down", b, 2 * b, 3, 2, 1, rng);
        enc2_c.init(params, prefix + ".enc2", 2 * b, 2 * b, ucfg.tdim, rng);
        mid_c.init(params, prefix + ".mid", 2 * b, 2 * b, ucfg.tdim, rng);
        zc_e1.init(params, prefix + ".zc_e1", b, b, 1, 1, 0, rng, /*zero_init=*/true);
        zc_e2.init(params, prefix + ".zc_e2", 2 * b, 2 * b, 1, 1, 0, rng, /*zero_init=*/true);
        zc_m.init(params, prefix + ".zc_m", 2 * b, 2 * b, 1, 1, 0, rng, /*zero_init=*/true);
        cond_adapter.init(params, prefix + ".cond_adapter", cond_dim, b, 1, 1, 0, rng);
    }
};

// Clone the encoder half of a trained base denoiser. The copies start
// value-identical to their source blocks; zero convs start at exactly zero.
template <class R>
inline LaddT<R> build_ladd(const LatentDmT<R>& ldm, int cond_dim, uint64_t seed = 505) {
    if (!ldm.unet_trained) throw StageOrderError("build_ladd requires a trained base LDM (run train-ldm)");
    LaddT<R> m;
    m.base = &ldm.unet;
    m.ucfg = ldm.unet.cfg;
    m.cond_dim = cond_dim;
    m.init_control("ladd", seed);
    copy_params(ldm.unet.params, "unet.", m.params, "ladd.");
    return m;
}

template <class R>
struct LaddPassT {
    TapeT<R>* tape = nullptr;
    BoundT<R> base_bp, ctrl_bp;
};

template <class R>
inline LaddPassT<R> ladd_begin(TapeT<R>& tape, const LaddT<R>& m, bool train_ctrl, bool train_base = false) {
    LaddPassT<R> pass;
    pass.tape = &tape;
    pass.base_bp = bind(tape, m.base_net().params, train_base);
    pass.ctrl_bp = bind(tape, m.params, train_ctrl);
    return pass;
}

// O = base(z_t, t) with ZC(ctrl(z_t, C, t)) added at the decoder inputs.
// cond: quantized grid [B,D,hc,wc]; resized to the latent resolution before
// the adapter, so any token budget fits.
template <class R>
inline VarT<R> ladd_forward(const LaddT<R>& m, LaddPassT<R>& pass, VarT<R> z, const TensorT<R>& cond,
                            const std::vector<int>& ts, int t_max) {
    LAYTON_CHECK(cond.rank() == 4 && cond.dim(1) == m.cond_dim,
                 "ladd_forward: condition grid incompatible with adapter");
    LAYTON_CHECK(cond.dim(0) == z.val().dim(0), "ladd_forward: condition batch mismatch");
    TapeT<R>& tape = *pass.tape;
    const BoundT<R>& cb = pass.ctrl_bp;

    int h = z.val().dim(2), w = z.val().dim(3);
    auto cond_resized = constant(tape, resize_batch_bilinear(cond, h, w));

    auto temb = constant(tape, timestep_embedding<R>(ts, m.ucfg.tdim, t_max));
    auto tvec = m.tmlp2_c.forward(cb, silu(m.tmlp1_c.forward(cb, temb)));

    auto h0 = m.conv_in_c.forward(cb, z);
    h0 = h0 + m.cond_adapter.forward(cb, cond_resized);
    auto e1 = m.enc1_c.forward(cb, h0, tvec);
    auto e2 = m.enc2_c.forward(cb, m.down_c.forward(cb, e1), tvec);
    auto mid = m.mid_c.forward(cb, e2, tvec);

    typename UNetT<R>::Injections inj;
    inj.e1 = m.zc_e1.forward(cb, e1);
    inj.e2 = m.zc_e2.forward(cb, e2);
    inj.m = m.zc_m.forward(cb, mid);

    return m.base_net().forward(pass.base_bp, z, temb, &inj);
}

// No-tape eps prediction given tokens-derived condition.
template <class R>
inline TensorT<R> ladd_denoise(const LaddT<R>& m, const TensorT<R>& z, const TensorT<R>& cond, int t,
                               int t_max) {
    TapeT<R> tape;
    auto pass = ladd_begin(tape, m, false);
    auto zv = input(tape, z, false);
    std::vector<int> ts(size_t(z.dim(0)), t);
    return ladd_forward(m, pass, zv, cond, ts, t_max).val();
}

// ---------------------------------------------------------------------------
// Stage-1 training: conditional diffusion loss, progressive resolution.
// ---------------------------------------------------------------------------

struct LaddTrainConfig {
    int iters_lowres = 600;
    int iters_highres = 200;   // second sub-phase at doubled resolution; 0 disables
    int batch = 4;
    double lr = 1e-3;
    double lr_final_frac = 0.05;
    std::vector<int> cond_sizes = {28, 32, 36};
    uint64_t seed = 4;
    int log_every = 200;
};

struct LaddTrainStats : TrainStats {
    std::vector<int> res_curve;  // resolution per step, aligned with loss_curve
};

// Build the condition grid for a batch of images at one of the condition
// sizes (frozen tokenizer path).
template <class R>
inline TensorT<R> make_condition(const VqModelT<R>& vq, const TensorT<R>& images, int cond_size) {
    TensorT<R> cond_imgs = resize_batch_bilinear(images, cond_size, cond_size);
    TensorT<R> quantized;
    vq.tokenize(cond_imgs, &quantized);
    return quantized;
}

template <class R>
inline LaddTrainStats train_stage1(LaddT<R>& ladd, const VqModelT<R>& vq, LatentDmT<R>& ldm,
                                   const std::vector<TensorT<R>>& images_lo,
                                   const std::vector<TensorT<R>>& images_hi, const LaddTrainConfig& cfg,
                                   AdamT<R>* external_opt = nullptr) {
    LAYTON_CHECK(!images_lo.empty(), "train_stage1: empty dataset");
    ldm.require_trained("train_stage1");
    uint64_t base_sum = ldm.unet.params.checksum();
    uint64_t vq_sum = vq.params.checksum();
    uint64_t vae_sum = ldm.vae.params.checksum();

    Rng rng = Rng::seeded(cfg.seed);
    AdamT<R> local_opt;
    AdamT<R>& opt = external_opt ? *external_opt : local_opt;
    opt.lr = cfg.lr;
    LaddTrainStats stats;
    int total = cfg.iters_lowres + (images_hi.empty() ? 0 : cfg.iters_highres);

    for (int it = 0; it < total; ++it) {
        opt.lr = cosine_lr(cfg.lr, cfg.lr_final_frac, it, total);
        bool hi = it >= cfg.iters_lowres;
        const auto& pool = hi ? images_hi : images_lo;
        std::vector<TensorT<R>> batch_imgs;
        for (int i = 0; i < cfg.batch; ++i)
            batch_imgs.push_back(pool[size_t(rng.uniform_int(0, int(pool.size()) - 1))]);
        TensorT<R> batch = stack_images(batch_imgs);
        int cond_size = cfg.cond_sizes[size_t(rng.uniform_int(0, int(cfg.cond_sizes.size()) - 1))];
        TensorT<R> cond = make_condition(vq, batch, cond_size);

        TensorT<R> z0 = ldm.vae_encode(batch);
        int t = rng.uniform_int(1, ldm.schedule.t_max);
        TensorT<R> eps = TensorT<R>::randn(z0.shape, rng);
        TensorT<R> zt = diffuse(ldm.schedule, z0, t, eps);

        TapeT<R> tape;
        auto pass = ladd_begin(tape, ladd, true);
        auto zv = input(tape, zt, false);
        std::vector<int> ts(size_t(cfg.batch), t);
        auto pred = ladd_forward(ladd, pass, zv, cond, ts, ldm.schedule.t_max);
        auto loss = mse(pred, input(tape, eps, false));
        tape.backward(loss.id);
        opt.step(ladd.params, collect_grads(pass.ctrl_bp));

        stats.loss_curve.push_back(double(loss.val()[0]));
        stats.res_curve.push_back(batch.dim(2));
        if (cfg.log_every > 0 && (it + 1) % cfg.log_every == 0)
            std::fprintf(stderr, "[info] ladd iter %d res %d loss %.5f\n", it + 1, batch.dim(2),
                         stats.loss_curve.back());
    }

    if (ldm.unet.params.checksum() != base_sum || vq.params.checksum() != vq_sum ||
        ldm.vae.params.checksum() != vae_sum)
        throw ContractViolation("train_stage1: a frozen parameter changed");
    stats.final_metric = stats.loss_curve.empty() ? 0.0 : stats.loss_curve.back();
    stats.reached_target = true;
    return stats;
}

}  // namespace layton
