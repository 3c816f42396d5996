#pragma once

// Toy latent diffusion stand-in: a small VAE (4x spatial compression, 4
// latent channels), an eps-prediction UNet with timestep conditioning, and
// DDIM sampling. Trained once in stage 0 and frozen afterwards.

#include <cstdio>
#include <functional>
#include <vector>

#include "layton/adam.hpp"
#include "layton/image.hpp"
#include "layton/metrics.hpp"
#include "layton/nn.hpp"
#include "layton/schedule.hpp"

namespace layton {

// largest divisor of ch not exceeding 8
inline int gn_groups(int ch) {
    for (int g = std::min(8, ch); g >= 1; --g)
        if (ch % g == 0) return g;
    return 1;
}

// ---------------------------------------------------------------------------
// VAE
// ---------------------------------------------------------------------------

struct VaeConfig {
    int base_ch = 16;
    int lat_ch = 4;   // C_lat
    int factor = 4;   // f_vae
    double kl_weight = 1e-6;
};

template <class R>
struct VaeT {
    VaeConfig cfg;
    ParamStoreT<R> params;
    Conv2dT<R> enc_in, enc_d1, enc_d2, enc_moments;
    Conv2dT<R> dec_in, dec_u1, dec_u2, dec_out;
    bool trained = false;

    explicit VaeT(const VaeConfig& c = {}, uint64_t seed = 202) : cfg(c) {
        Rng rng = Rng::seeded(seed);
        int ch = cfg.base_ch;
        enc_in.init(params, "vae.enc_in", 3, ch, 3, 1, 1, rng);
        enc_d1.init(params, "vae.enc_d1", ch, 2 * ch, 3, 2, 1, rng);
        enc_d2.init(params, "vae.enc_d2", 2 * ch, 2 * ch, 3, 2, 1, rng);
        enc_moments.init(params, "vae.enc_moments", 2 * ch, 2 * cfg.lat_ch, 1, 1, 0, rng);
        dec_in.init(params, "vae.dec_in", cfg.lat_ch, 2 * ch, 3, 1, 1, rng);
        dec_u1.init(params, "vae.dec_u1", 2 * ch, 2 * ch, 3, 1, 1, rng);
        dec_u2.init(params, "vae.dec_u2", 2 * ch, ch, 3, 1, 1, rng);
        dec_out.init(params, "vae.dec_out", ch, 3, 3, 1, 1, rng);
    }

    // x: [B,3,H,W] -> moments [B, 2*lat, H/f, W/f] (mu then logvar)
    VarT<R> encode_moments(const BoundT<R>& bp, VarT<R> x) const {
        LAYTON_CHECK(x.val().dim(2) % cfg.factor == 0 && x.val().dim(3) % cfg.factor == 0,
                     "vae encode: image dims must be divisible by f_vae");
        auto h = silu(enc_in.forward(bp, x));
        h = silu(enc_d1.forward(bp, h));
        h = silu(enc_d2.forward(bp, h));
        return enc_moments.forward(bp, h);
    }

    VarT<R> decode(const BoundT<R>& bp, VarT<R> z) const {
        auto h = silu(dec_in.forward(bp, z));
        h = silu(dec_u1.forward(bp, upsample_nearest2(h)));
        h = silu(dec_u2.forward(bp, upsample_nearest2(h)));
        return dec_out.forward(bp, h);
    }

    // Posterior mean, no tape (deterministic inference path).
    TensorT<R> posterior_mean(const TensorT<R>& image_batch) const {
        TapeT<R> tape;
        BoundT<R> bp = bind(tape, params, false);
        auto x = input(tape, image_batch, false);
        auto mom = encode_moments(bp, x);
        return slice_channels(mom, 0, cfg.lat_ch).val();
    }

    // Latents -> [0,1] pixels.
    TensorT<R> decode_pixels(const TensorT<R>& z_batch) const {
        TapeT<R> tape;
        BoundT<R> bp = bind(tape, params, false);
        auto z = input(tape, z_batch, false);
        return clamp01(decode(bp, z).val());
    }
};

struct VaeTrainConfig {
    int iters = 2500;
    int batch = 8;
    double lr = 2e-3;
    double lr_final_frac = 0.05;
    double target_psnr = 26.0;
    uint64_t seed = 2;
    int log_every = 500;
};

template <class R>
inline double vae_eval_psnr(const VaeT<R>& vae, const std::vector<TensorT<R>>& images) {
    double acc = 0;
    for (const auto& img : images) {
        TensorT<R> batch = stack_images<R>({img});
        TensorT<R> recon = vae.decode_pixels(vae.posterior_mean(batch));
        acc += psnr(batch_item(recon, 0), img);
    }
    return acc / double(images.size());
}

template <class R>
inline TrainStats train_vae(VaeT<R>& vae, const std::vector<TensorT<R>>& train_images,
                            const std::vector<TensorT<R>>& eval_images, const VaeTrainConfig& cfg,
                            AdamT<R>* external_opt = nullptr) {
    LAYTON_CHECK(!train_images.empty(), "train_vae: empty dataset");
    Rng rng = Rng::seeded(cfg.seed);
    AdamT<R> local_opt;
    AdamT<R>& opt = external_opt ? *external_opt : local_opt;
    opt.lr = cfg.lr;
    TrainStats stats;
    for (int it = 0; it < cfg.iters; ++it) {
        opt.lr = cosine_lr(cfg.lr, cfg.lr_final_frac, it, cfg.iters);
        TapeT<R> tape;
        BoundT<R> bp = bind(tape, vae.params);
        std::vector<TensorT<R>> batch_imgs;
        for (int i = 0; i < cfg.batch; ++i)
            batch_imgs.push_back(train_images[size_t(rng.uniform_int(0, int(train_images.size()) - 1))]);
        TensorT<R> batch = stack_images(batch_imgs);
        auto x = input(tape, batch, false);
        auto mom = vae.encode_moments(bp, x);
        auto mu = slice_channels(mom, 0, vae.cfg.lat_ch);
        auto logvar = slice_channels(mom, vae.cfg.lat_ch, 2 * vae.cfg.lat_ch);
        auto eps = constant(tape, TensorT<R>::randn(mu.val().shape, rng));
        auto z = mu + exp_op(scale(logvar, 0.5)) * eps;
        auto recon = vae.decode(bp, z);
        auto rec_loss = mse(recon, x);
        // KL(q || N(0,1)) = -0.5 mean(1 + logvar - mu^2 - exp(logvar))
        auto kl = scale(mean_all(add_scalar(logvar - square(mu) - exp_op(logvar), 1.0)), -0.5);
        auto loss = rec_loss + scale(kl, vae.cfg.kl_weight);
        tape.backward(loss.id);
        opt.step(vae.params, collect_grads(bp));
        stats.loss_curve.push_back(double(loss.val()[0]));
        if (cfg.log_every > 0 && (it + 1) % cfg.log_every == 0)
            std::fprintf(stderr, "[info] vae iter %d loss %.5f\n", it + 1, stats.loss_curve.back());
    }
    stats.final_metric = vae_eval_psnr(vae, eval_images.empty() ? train_images : eval_images);
    stats.reached_target = stats.final_metric >= cfg.target_psnr;
    vae.trained = true;
    if (!stats.reached_target)
        std::fprintf(stderr, "[warn] vae training missed PSNR target: %.2f dB < %.2f dB\n",
                     stats.final_metric, cfg.target_psnr);
    return stats;
}

// ---------------------------------------------------------------------------
// Eps-prediction UNet
// ---------------------------------------------------------------------------

template <class R>
struct ResBlockT {
    GroupNormT<R> n1, n2;
    Conv2dT<R> conv1, conv2, skip;
    LinearT<R> tproj;
    bool has_skip = false;

    void init(ParamStoreT<R>& ps, const std::string& name, int ch_in, int ch_out, int tdim, Rng& rng) {
        n1.init(ps, name + ".n1", ch_in, gn_groups(ch_in));
        conv1.init(ps, name + ".conv1", ch_in, ch_out, 3, 1, 1, rng);
        tproj.init(ps, name + ".tproj", tdim, ch_out, rng);
        n2.init(ps, name + ".n2", ch_out, gn_groups(ch_out));
        conv2.init(ps, name + ".conv2", ch_out, ch_out, 3, 1, 1, rng);
        has_skip = ch_in != ch_out;
        if (has_skip) skip.init(ps, name + ".skip", ch_in, ch_out, 1, 1, 0, rng);
    }

    VarT<R> forward(const BoundT<R>& bp, VarT<R> x, VarT<R> tvec) const {
        auto h = conv1.forward(bp, silu(n1.forward(bp, x)));
        h = add_bias_bc(h, tproj.forward(bp, tvec));
        h = conv2.forward(bp, silu(n2.forward(bp, h)));
        return has_skip ? h + skip.forward(bp, x) : h + x;
    }
};

struct UNetConfig {
    int in_ch = 4;
    int base = 24;
    int tdim = 48;
};

template <class R>
struct UNetT {
    UNetConfig cfg;
    ParamStoreT<R> params;
    LinearT<R> tmlp1, tmlp2;
    Conv2dT<R> conv_in, down, upconv, conv_out;
    ResBlockT<R> enc1, enc2, mid, dec2, dec1;

    explicit UNetT(const UNetConfig& c = {}, uint64_t seed = 303, const std::string& prefix = "unet") : cfg(c) {
        Rng rng = Rng::seeded(seed);
        int b = cfg.base;
        tmlp1.init(params, prefix + ".tmlp1", cfg.tdim, cfg.tdim, rng);
        tmlp2.init(params, prefix + ".tmlp2", cfg.tdim, cfg.tdim, rng);
        conv_in.init(params, prefix + ".conv_in", cfg.in_ch, b, 3, 1, 1, rng);
        enc1.init(params, prefix + ".enc1", b, b, cfg.tdim, rng);
        down.init(params, prefix + ".down", b, 2 * b, 3, 2, 1, rng);
        enc2.init(params, prefix + ".enc2", 2 * b, 2 * b, cfg.tdim, rng);
        mid.init(params, prefix + ".mid", 2 * b, 2 * b, cfg.tdim, rng);
        dec2.init(params, prefix + ".dec2", 4 * b, 2 * b, cfg.tdim, rng);
        upconv.init(params, prefix + ".upconv", 2 * b, b, 3, 1, 1, rng);
        dec1.init(params, prefix + ".dec1", 2 * b, b, cfg.tdim, rng);
        conv_out.init(params, prefix + ".conv_out", b, cfg.in_ch, 3, 1, 1, rng);
    }

    // Additions to the features the decoder half consumes (ControlNet-style
    // injection points).
    struct Injections {
        VarT<R> e1, e2, m;
    };

    VarT<R> time_vec(const BoundT<R>& bp, VarT<R> temb_raw) const {
        return tmlp2.forward(bp, silu(tmlp1.forward(bp, temb_raw)));
    }

    // z: [B,in_ch,h,w] with h,w even; temb_raw: [B,tdim] sinusoidal features.
    VarT<R> forward(const BoundT<R>& bp, VarT<R> z, VarT<R> temb_raw, const Injections* inj = nullptr) const {
        auto tvec = time_vec(bp, temb_raw);
        auto h0 = conv_in.forward(bp, z);
        auto e1 = enc1.forward(bp, h0, tvec);
        auto e2 = enc2.forward(bp, down.forward(bp, e1), tvec);
        auto m = mid.forward(bp, e2, tvec);
        auto e1_dec = inj ? e1 + inj->e1 : e1;
        auto e2_dec = inj ? e2 + inj->e2 : e2;
        auto m_dec = inj ? m + inj->m : m;
        auto d2 = dec2.forward(bp, concat_channels(m_dec, e2_dec), tvec);
        auto u = upconv.forward(bp, upsample_nearest2(d2));
        auto d1 = dec1.forward(bp, concat_channels(u, e1_dec), tvec);
        return conv_out.forward(bp, d1);
    }

    // No-tape eps prediction for sampling loops.
    TensorT<R> denoise(const TensorT<R>& z, int t, int t_max) const {
        TapeT<R> tape;
        BoundT<R> bp = bind(tape, params, false);
        auto zv = input(tape, z, false);
        std::vector<int> ts(size_t(z.dim(0)), t);
        auto temb = constant(tape, timestep_embedding<R>(ts, cfg.tdim, t_max));
        return forward(bp, zv, temb).val();
    }
};

// ---------------------------------------------------------------------------
// Bundle: VAE + schedule + eps net + latent scaling
// ---------------------------------------------------------------------------

struct LdmConfig {
    VaeConfig vae;
    UNetConfig unet;
    int t_max = 1000;
    std::string schedule = "cosine";
};

template <class R>
struct LatentDmT {
    LdmConfig cfg;
    VaeT<R> vae;
    UNetT<R> unet;
    NoiseScheduleT<R> schedule;
    double latent_scale = 1.0;
    bool unet_trained = false;

    explicit LatentDmT(const LdmConfig& c = {}, uint64_t seed = 404)
        : cfg(c),
          vae(c.vae, seed),
          unet(c.unet, seed + 1),
          schedule(make_schedule<R>(c.t_max, schedule_kind_from(c.schedule))) {}

    void require_trained(const char* who) const {
        if (!vae.trained) throw StageOrderError(std::string(who) + " requires a trained VAE (run train-ldm)");
        if (!unet_trained) throw StageOrderError(std::string(who) + " requires a trained LDM (run train-ldm)");
    }

    // image batch -> scaled latents
    TensorT<R> vae_encode(const TensorT<R>& images) const {
        if (!vae.trained) throw StageOrderError("vae_encode called before VAE training");
        TensorT<R> z = vae.posterior_mean(images);
        for (auto& v : z.data) v = R(double(v) / latent_scale);
        return z;
    }

    TensorT<R> vae_decode(const TensorT<R>& z) const {
        if (!vae.trained) throw StageOrderError("vae_decode called before VAE training");
        TensorT<R> zs = z;
        for (auto& v : zs.data) v = R(double(v) * latent_scale);
        return vae.decode_pixels(zs);
    }
};

struct LdmTrainConfig {
    int iters = 4000;
    int batch = 8;
    double lr = 1e-3;
    double lr_final_frac = 0.05;  // cosine decay floor as a fraction of lr
    uint64_t seed = 3;
    int log_every = 500;
};

// Mean squared eps-prediction error on one (z0, t, eps) triple; eval only.
template <class R, class DenoiseFn>
inline double diffusion_loss_value(DenoiseFn&& model, const NoiseScheduleT<R>& sched, const TensorT<R>& z0,
                                   int t, const TensorT<R>& eps) {
    TensorT<R> zt = diffuse(sched, z0, t, eps);
    TensorT<R> pred = model(zt, t);
    return mse_tensor(pred, eps);
}

template <class R>
inline TrainStats train_stage0_ldm(LatentDmT<R>& ldm, const std::vector<TensorT<R>>& train_images,
                                   const LdmTrainConfig& cfg, AdamT<R>* external_opt = nullptr) {
    LAYTON_CHECK(!train_images.empty(), "train_stage0_ldm: empty dataset");
    if (!ldm.vae.trained) throw StageOrderError("train_stage0_ldm requires a trained VAE");
    Rng rng = Rng::seeded(cfg.seed);

    // latent normalization from a sample of the dataset
    {
        int probe = std::min<int>(64, int(train_images.size()));
        double acc = 0;
        int64_t count = 0;
        for (int i = 0; i < probe; ++i) {
            TensorT<R> z = ldm.vae.posterior_mean(stack_images<R>({train_images[size_t(i)]}));
            for (auto v : z.data) acc += double(v) * double(v);
            count += z.size();
        }
        ldm.latent_scale = std::max(1e-3, std::sqrt(acc / double(count)));
        std::fprintf(stderr, "[info] ldm latent scale %.4f\n", ldm.latent_scale);
    }

    AdamT<R> local_opt;
    AdamT<R>& opt = external_opt ? *external_opt : local_opt;
    opt.lr = cfg.lr;
    TrainStats stats;
    for (int it = 0; it < cfg.iters; ++it) {
        opt.lr = cosine_lr(cfg.lr, cfg.lr_final_frac, it, cfg.iters);
        std::vector<TensorT<R>> batch_imgs;
        for (int i = 0; i < cfg.batch; ++i)
            batch_imgs.push_back(train_images[size_t(rng.uniform_int(0, int(train_images.size()) - 1))]);
        TensorT<R> z0 = ldm.vae_encode(stack_images(batch_imgs));
        int t = rng.uniform_int(1, ldm.schedule.t_max);
        TensorT<R> eps = TensorT<R>::randn(z0.shape, rng);
        TensorT<R> zt = diffuse(ldm.schedule, z0, t, eps);

        TapeT<R> tape;
        BoundT<R> bp = bind(tape, ldm.unet.params);
        auto zv = input(tape, zt, false);
        std::vector<int> ts(size_t(cfg.batch), t);
        auto temb = constant(tape, timestep_embedding<R>(ts, ldm.unet.cfg.tdim, ldm.schedule.t_max));
        auto pred = ldm.unet.forward(bp, zv, temb);
        auto loss = mse(pred, input(tape, eps, false));
        tape.backward(loss.id);
        opt.step(ldm.unet.params, collect_grads(bp));
        stats.loss_curve.push_back(double(loss.val()[0]));
        if (cfg.log_every > 0 && (it + 1) % cfg.log_every == 0)
            std::fprintf(stderr, "[info] ldm iter %d loss %.5f\n", it + 1, stats.loss_curve.back());
    }
    ldm.unet_trained = true;
    stats.final_metric = stats.loss_curve.empty() ? 0.0 : stats.loss_curve.back();
    stats.reached_target = true;
    return stats;
}

}  // namespace layton
