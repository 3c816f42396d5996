#pragma once

// Visual tokenizer: conv encoder, codebook with nearest-code quantization,
// straight-through training, and the pixel decoder used to pretrain it.
// After stage 0 the encoder and codebook are frozen for the whole pipeline.

#include <cstdio>
#include <vector>

#include "layton/adam.hpp"
#include "layton/autograd.hpp"
#include "layton/image.hpp"
#include "layton/metrics.hpp"
#include "layton/nn.hpp"

namespace layton {

struct QuantizeResult {
    std::vector<int> tokens;  // raster order, length B*h*w
    int grid_h = 0, grid_w = 0, batch = 0;
};

// Nearest code per cell, squared L2, ties to the lowest index.
// features: [B,D,h,w], codes: [N,D]. Returns tokens and the quantized grid.
template <class R>
inline QuantizeResult quantize(const TensorT<R>& features, const TensorT<R>& codes,
                               TensorT<R>* quantized_out = nullptr,
                               std::vector<int64_t>* usage = nullptr) {
    LAYTON_CHECK(features.rank() == 4, "quantize: features [B,D,h,w] required");
    LAYTON_CHECK(codes.rank() == 2 && codes.dim(0) >= 1, "quantize: empty codebook");
    int b = features.dim(0), d = features.dim(1), h = features.dim(2), w = features.dim(3);
    int n = codes.dim(0);
    LAYTON_CHECK(codes.dim(1) == d, "quantize: embedding dim mismatch");
    QuantizeResult res;
    res.grid_h = h;
    res.grid_w = w;
    res.batch = b;
    res.tokens.resize(size_t(b) * h * w);
    if (quantized_out) *quantized_out = TensorT<R>(features.shape);
    int64_t plane = int64_t(h) * w;
    for (int bi = 0; bi < b; ++bi) {
        for (int64_t cell = 0; cell < plane; ++cell) {
            int best = 0;
            double best_dist = 0;
            for (int j = 0; j < n; ++j) {
                double dist = 0;
                for (int di = 0; di < d; ++di) {
                    double diff = double(features[(int64_t(bi) * d + di) * plane + cell]) -
                                  double(codes[int64_t(j) * d + di]);
                    dist += diff * diff;
                }
                if (j == 0 || dist < best_dist) {
                    best_dist = dist;
                    best = j;
                }
            }
            res.tokens[size_t(bi) * size_t(plane) + size_t(cell)] = best;
            if (usage) (*usage)[size_t(best)] += 1;
            if (quantized_out)
                for (int di = 0; di < d; ++di)
                    (*quantized_out)[(int64_t(bi) * d + di) * plane + cell] = codes[int64_t(best) * d + di];
        }
    }
    return res;
}

// Forward value equals `quantized` bitwise; gradient passes through to
// `features` unchanged.
template <class R>
inline VarT<R> straight_through(VarT<R> features, const TensorT<R>& quantized) {
    auto* tp = features.tape;
    LAYTON_CHECK(features.val().same_shape(quantized), "straight_through: shape mismatch");
    bool ng = features.needs_grad();
    int id = tp->push(quantized, ng);
    if (ng) {
        int fid = features.id;
        tp->nodes[size_t(id)].back = [tp, id, fid]() {
            detail::axpy(tp->grad_buf(fid), tp->nodes[size_t(id)].grad);
        };
    }
    return VarT<R>{tp, id};
}

// Rebuild a quantized grid [B,D,h,w] from raster tokens.
template <class R>
inline TensorT<R> tokens_to_grid(const std::vector<int>& tokens, const TensorT<R>& codes, int b, int h, int w) {
    int d = codes.dim(1);
    TensorT<R> out({b, d, h, w});
    int64_t plane = int64_t(h) * w;
    for (int bi = 0; bi < b; ++bi)
        for (int64_t cell = 0; cell < plane; ++cell) {
            int tok = tokens[size_t(bi) * size_t(plane) + size_t(cell)];
            LAYTON_CHECK(tok >= 0 && tok < codes.dim(0), "tokens_to_grid: token out of range");
            for (int di = 0; di < d; ++di)
                out[(int64_t(bi) * d + di) * plane + cell] = codes[int64_t(tok) * d + di];
        }
    return out;
}

// ---------------------------------------------------------------------------
// Tokenizer model (encoder + codebook + pixel decoder)
// ---------------------------------------------------------------------------

struct VqConfig {
    int code_dim = 32;    // D
    int n_codes = 512;    // N
    int base_ch = 24;
    int factor = 4;       // f (two stride-2 stages)
    double beta_commit = 0.25;
};

template <class R>
struct VqModelT {
    VqConfig cfg;
    ParamStoreT<R> params;
    Conv2dT<R> enc_in, enc_d1, enc_d2, enc_out;
    Conv2dT<R> dec_in, dec_u1, dec_u2, dec_out;
    int codebook = -1;  // param id, [N,D]
    std::vector<int64_t> usage;

    explicit VqModelT(const VqConfig& c = {}, uint64_t seed = 101) : cfg(c) {
        Rng rng = Rng::seeded(seed);
        int ch = cfg.base_ch;
        enc_in.init(params, "vq.enc_in", 3, ch, 3, 1, 1, rng);
        enc_d1.init(params, "vq.enc_d1", ch, 2 * ch, 3, 2, 1, rng);
        enc_d2.init(params, "vq.enc_d2", 2 * ch, 2 * ch, 3, 2, 1, rng);
        enc_out.init(params, "vq.enc_out", 2 * ch, cfg.code_dim, 1, 1, 0, rng);
        dec_in.init(params, "vq.dec_in", cfg.code_dim, 2 * ch, 3, 1, 1, rng);
        dec_u1.init(params, "vq.dec_u1", 2 * ch, 2 * ch, 3, 1, 1, rng);
        dec_u2.init(params, "vq.dec_u2", 2 * ch, ch, 3, 1, 1, rng);
        dec_out.init(params, "vq.dec_out", ch, 3, 3, 1, 1, rng);
        codebook = params.add("vq.codebook",
                              TensorT<R>::uniform({cfg.n_codes, cfg.code_dim}, rng, R(-0.5), R(0.5)));
        usage.assign(size_t(cfg.n_codes), 0);
    }

    // x: [B,3,H,W], H and W divisible by factor -> [B,D,H/f,W/f]
    VarT<R> encode(const BoundT<R>& bp, VarT<R> x) const {
        LAYTON_CHECK(x.val().dim(2) % cfg.factor == 0 && x.val().dim(3) % cfg.factor == 0,
                     "encode: image dims must be divisible by the downsample factor");
        auto h = silu(enc_in.forward(bp, x));
        h = silu(enc_d1.forward(bp, h));
        h = silu(enc_d2.forward(bp, h));
        return enc_out.forward(bp, h);
    }

    // quantized grid [B,D,h,w] -> pixels [B,3,H,W] (linear output)
    VarT<R> decode_pixels(const BoundT<R>& bp, VarT<R> q) const {
        auto h = silu(dec_in.forward(bp, q));
        h = silu(dec_u1.forward(bp, upsample_nearest2(h)));
        h = silu(dec_u2.forward(bp, upsample_nearest2(h)));
        return dec_out.forward(bp, h);
    }

    const TensorT<R>& codes() const { return params.at(codebook).value; }

    // Non-tape convenience: image -> tokens (+ optional quantized grid).
    QuantizeResult tokenize(const TensorT<R>& image_batch, TensorT<R>* quantized = nullptr) const {
        TapeT<R> tape;
        BoundT<R> bp = bind(tape, params, false);
        auto x = input(tape, image_batch, false);
        auto feats = encode(bp, x);
        return quantize(feats.val(), codes(), quantized);
    }

    // Tokens -> pixel reconstruction through the stage-0 decoder.
    TensorT<R> decode_tokens(const std::vector<int>& tokens, int b, int h, int w) const {
        TapeT<R> tape;
        BoundT<R> bp = bind(tape, params, false);
        TensorT<R> grid = tokens_to_grid(tokens, codes(), b, h, w);
        auto q = input(tape, grid, false);
        return clamp01(decode_pixels(bp, q).val());
    }

    void freeze() { params.freeze_all(); }
};

using VqModel = VqModelT<float>;

// L_rec + ||sg(g) - c||^2 + beta ||g - sg(c)||^2, each term averaged over
// its elements. g are encoder features, c the selected codes.
template <class R>
inline VarT<R> vq_losses(TapeT<R>& tape, VarT<R> features, VarT<R> code_rows, VarT<R> recon, VarT<R> image,
                         double beta_commit) {
    // features -> per-cell rows [cells, D]
    int b = features.val().dim(0), d = features.val().dim(1);
    int h = features.val().dim(2), w = features.val().dim(3);
    auto rows = reshape(permute4(features, {0, 2, 3, 1}), {b * h * w, d});
    auto g_detached = constant(tape, rows.val());
    auto c_detached = constant(tape, code_rows.val());
    auto rec = mse(recon, image);
    auto codebook_term = mse(g_detached, code_rows);
    auto commit_term = mse(rows, c_detached);
    return rec + codebook_term + scale(commit_term, beta_commit);
}

// ---------------------------------------------------------------------------
// Stage-0 training
// ---------------------------------------------------------------------------

struct VqTrainConfig {
    int iters = 3000;
    int batch = 8;
    double lr = 2e-3;
    double lr_final_frac = 0.05;
    double target_psnr = 20.0;
    uint64_t seed = 1;
    int log_every = 200;
    bool reseed_dead_codes = true;
    int epoch_iters = 250;  // dead-code sweep cadence
};

template <class R>
inline double vq_eval_psnr(const VqModelT<R>& model, const std::vector<TensorT<R>>& images) {
    double acc = 0;
    for (const auto& img : images) {
        TensorT<R> batch = stack_images<R>({img});
        TensorT<R> quantized;
        auto qr = model.tokenize(batch, &quantized);
        TapeT<R> tape;
        BoundT<R> bp = bind(tape, model.params, false);
        auto q = input(tape, quantized, false);
        auto recon = clamp01(model.decode_pixels(bp, q).val());
        acc += psnr(batch_item(recon, 0), img);
    }
    return acc / double(images.size());
}

template <class R>
inline TrainStats train_stage0_vq(VqModelT<R>& model, const std::vector<TensorT<R>>& train_images,
                                  const std::vector<TensorT<R>>& eval_images, const VqTrainConfig& cfg,
                                  AdamT<R>* external_opt = nullptr) {
    LAYTON_CHECK(!train_images.empty(), "train_stage0_vq: empty dataset");
    Rng rng = Rng::seeded(cfg.seed);
    AdamT<R> local_opt;
    AdamT<R>& opt = external_opt ? *external_opt : local_opt;
    opt.lr = cfg.lr;
    TrainStats stats;
    // recent encoder outputs, reseeding pool for dead codes
    std::vector<std::vector<R>> recent_rows;

    for (int it = 0; it < cfg.iters; ++it) {
        opt.lr = cosine_lr(cfg.lr, cfg.lr_final_frac, it, cfg.iters);
        TapeT<R> tape;
        BoundT<R> bp = bind(tape, model.params);
        std::vector<TensorT<R>> batch_imgs;
        for (int i = 0; i < cfg.batch; ++i)
            batch_imgs.push_back(train_images[size_t(rng.uniform_int(0, int(train_images.size()) - 1))]);
        TensorT<R> batch = stack_images(batch_imgs);
        auto x = input(tape, batch, false);
        auto feats = model.encode(bp, x);

        TensorT<R> quantized;
        auto qr = quantize(feats.val(), model.codes(), &quantized, &model.usage);
        auto st = straight_through(feats, quantized);
        auto recon = model.decode_pixels(bp, st);
        auto code_rows = gather_rows(bp[model.codebook], qr.tokens);
        auto loss = vq_losses(tape, feats, code_rows, recon, x, model.cfg.beta_commit);

        tape.backward(loss.id);
        opt.step(model.params, collect_grads(bp));
        stats.loss_curve.push_back(double(loss.val()[0]));

        // stash a few rows for dead-code reseeding
        if (recent_rows.size() < 1024) {
            int64_t plane = int64_t(qr.grid_h) * qr.grid_w;
            int d = model.cfg.code_dim;
            for (int cell = 0; cell < std::min<int64_t>(4, plane); ++cell) {
                std::vector<R> row(static_cast<size_t>(d));
                for (int di = 0; di < d; ++di) row[size_t(di)] = feats.val()[int64_t(di) * plane + cell];
                recent_rows.push_back(std::move(row));
            }
        }

        if (cfg.reseed_dead_codes && (it + 1) % cfg.epoch_iters == 0) {
            int reseeded = 0;
            auto& codes = model.params.at(model.codebook).value;
            for (int j = 0; j < model.cfg.n_codes; ++j) {
                if (model.usage[size_t(j)] > 0 || recent_rows.empty()) continue;
                const auto& row = recent_rows[size_t(rng.uniform_int(0, int(recent_rows.size()) - 1))];
                for (int di = 0; di < model.cfg.code_dim; ++di)
                    codes[int64_t(j) * model.cfg.code_dim + di] = row[size_t(di)];
                ++reseeded;
            }
            if (reseeded > 0)
                std::fprintf(stderr, "[info] vq: reseeded %d dead codes at iter %d\n", reseeded, it + 1);
            std::fill(model.usage.begin(), model.usage.end(), 0);
        }
        if (cfg.log_every > 0 && (it + 1) % cfg.log_every == 0)
            std::fprintf(stderr, "[info] vq iter %d loss %.5f\n", it + 1, stats.loss_curve.back());
    }

    stats.final_metric = vq_eval_psnr(model, eval_images.empty() ? train_images : eval_images);
    stats.reached_target = stats.final_metric >= cfg.target_psnr;
    if (!stats.reached_target)
        std::fprintf(stderr, "[warn] vq training missed PSNR target: %.2f dB < %.2f dB\n", stats.final_metric,
                     cfg.target_psnr);
    return stats;
}

}  // namespace layton
