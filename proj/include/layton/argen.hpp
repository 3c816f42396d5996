#pragma once

// Decoder-only autoregressive model over token sequences with caption
// conditioning injected as a prefix embedding, conditioning dropout for CFG
// training, and classifier-free-guided sampling.

#include <fstream>

#include "layton/adam.hpp"
#include "layton/autograd.hpp"
#include "layton/dataset.hpp"
#include "layton/nn.hpp"

namespace layton {

struct ArConfig {
    int n_tokens = 512;  // codebook size N; output head width
    int width = 128;
    int heads = 4;
    int blocks = 4;
    int seq_len = 64;    // L, tokens per image
    int cond_dim = 64;   // caption embedding width before the projector MLP
    double drop_prob = 0.1;
};

template <class R>
struct ArBlockT {
    LayerNormT<R> ln1, ln2;
    LinearT<R> q, k, v, attn_out, mlp1, mlp2;

    void init(ParamStoreT<R>& ps, const std::string& name, int width, Rng& rng) {
        ln1.init(ps, name + ".ln1", width);
        q.init(ps, name + ".q", width, width, rng);
        k.init(ps, name + ".k", width, width, rng);
        v.init(ps, name + ".v", width, width, rng);
        attn_out.init(ps, name + ".attn_out", width, width, rng);
        ln2.init(ps, name + ".ln2", width);
        mlp1.init(ps, name + ".mlp1", width, 4 * width, rng);
        mlp2.init(ps, name + ".mlp2", 4 * width, width, rng);
    }

    // x: [B*P, W] rows grouped per sequence of P positions
    VarT<R> forward(const BoundT<R>& bp, VarT<R> x, int batch, int positions, int heads) const {
        int width = x.val().dim(1);
        int hd = width / heads;
        auto h = ln1.forward(bp, x);
        auto qm = q.forward(bp, h), km = k.forward(bp, h), vm = v.forward(bp, h);
        // [B*P, W] -> [B, P, H, hd] -> [B, H, P, hd] -> [B*H, P, hd]
        auto split = [&](VarT<R> m) {
            auto r = reshape(m, {batch, positions, heads, hd});
            auto p = permute4(r, {0, 2, 1, 3});
            return reshape(p, {batch * heads, positions, hd});
        };
        auto qh = split(qm), kh = split(km), vh = split(vm);
        auto scores = scale(bmm(qh, kh, /*transpose_b=*/true), 1.0 / std::sqrt(double(hd)));
        auto probs = causal_softmax(scores);
        auto ctx = bmm(probs, vh, false);
        auto merged = reshape(permute4(reshape(ctx, {batch, heads, positions, hd}), {0, 2, 1, 3}),
                              {batch * positions, width});
        auto x1 = x + attn_out.forward(bp, merged);
        auto m = mlp2.forward(bp, silu(mlp1.forward(bp, ln2.forward(bp, x1))));
        return x1 + m;
    }
};

template <class R>
struct ArModelT {
    ArConfig cfg;
    ParamStoreT<R> params;
    int tok_embed = -1;    // [N+1, W], last row is start-of-sequence
    int pos_embed = -1;    // [L+1, W]
    int word_embed = -1;   // [vocab, cond_dim] caption word embeddings
    int null_embed = -1;   // [1, cond_dim] learned unconditional embedding
    LinearT<R> cond_mlp1, cond_mlp2;
    std::vector<ArBlockT<R>> blocks;
    LayerNormT<R> ln_final;
    LinearT<R> head;
    bool trained = false;

    explicit ArModelT(const ArConfig& c = {}, uint64_t seed = 606) : cfg(c) {
        Rng rng = Rng::seeded(seed);
        int w = cfg.width;
        tok_embed = params.add("ar.tok_embed", TensorT<R>::randn({cfg.n_tokens + 1, w}, rng, R(0.02)));
        pos_embed = params.add("ar.pos_embed", TensorT<R>::randn({cfg.seq_len + 1, w}, rng, R(0.02)));
        word_embed = params.add("ar.word_embed",
                                TensorT<R>::randn({int(caption_vocab().size()), cfg.cond_dim}, rng, R(0.1)));
        null_embed = params.add("ar.null_embed", TensorT<R>::randn({1, cfg.cond_dim}, rng, R(0.1)));
        cond_mlp1.init(params, "ar.cond_mlp1", cfg.cond_dim, w, rng);
        cond_mlp2.init(params, "ar.cond_mlp2", w, w, rng);
        blocks.resize(size_t(cfg.blocks));
        for (int i = 0; i < cfg.blocks; ++i)
            blocks[size_t(i)].init(params, "ar.block" + std::to_string(i), w, rng);
        ln_final.init(params, "ar.ln_final", w);
        head.init(params, "ar.head", w, cfg.n_tokens, rng);
    }

    int sos_id() const { return cfg.n_tokens; }

    // Bag-of-words caption embedding (mean of word vectors), no tape.
    TensorT<R> text_condition(const std::vector<int>& caption_ids) const {
        const auto& table = params.at(word_embed).value;
        int vocab = table.dim(0);
        LAYTON_CHECK(!caption_ids.empty(), "text_condition: empty caption");
        for (int id : caption_ids)
            LAYTON_CHECK(id >= 0 && id < vocab, "text_condition: unknown caption token");
        TensorT<R> out({cfg.cond_dim});
        for (int id : caption_ids)
            for (int d = 0; d < cfg.cond_dim; ++d) out[d] += table[int64_t(id) * cfg.cond_dim + d];
        for (auto& v : out.data) v /= R(caption_ids.size());
        return out;
    }

    TensorT<R> null_condition() const {
        TensorT<R> out({cfg.cond_dim});
        const auto& n = params.at(null_embed).value;
        std::copy(n.data.begin(), n.data.end(), out.data.begin());
        return out;
    }

    // Logits for a batch of (possibly partial) sequences.
    // tokens: per sequence, the already-known tokens (prefix; may be empty).
    // conds: per-sequence condition embedding rows [B, cond_dim] (tape const).
    // Returns [B*P, N] with P = prefix_len + 1 positions.
    VarT<R> forward_logits(TapeT<R>& tape, const BoundT<R>& bp, const std::vector<std::vector<int>>& tokens,
                           VarT<R> conds) const {
        int b = int(tokens.size());
        int prefix = int(tokens[0].size());
        for (const auto& t : tokens) LAYTON_CHECK(int(t.size()) == prefix, "forward_logits: ragged batch");
        LAYTON_CHECK(prefix < cfg.seq_len, "forward_logits: prefix too long for the position table");
        // token rows per sequence: sos then the prefix tokens
        std::vector<int> flat_ids;
        flat_ids.reserve(size_t(b) * size_t(prefix + 1));
        for (int bi = 0; bi < b; ++bi) {
            flat_ids.push_back(sos_id());
            for (int p = 0; p < prefix; ++p) {
                int tok = tokens[size_t(bi)][size_t(p)];
                LAYTON_CHECK(tok >= 0 && tok < cfg.n_tokens, "forward_logits: token out of range");
                flat_ids.push_back(tok);
            }
        }
        auto tok_rows = gather_rows(bp[tok_embed], flat_ids);  // [B*(prefix+1), W]

        // condition prefix through the projector MLP
        auto cond_rows = cond_mlp2.forward(bp, silu(cond_mlp1.forward(bp, conds)));  // [B, W]

        // sequence layout per item: [cond, sos, tok_0, ..., tok_{prefix-1}]
        int w = cfg.width;
        auto tok_grid = reshape(tok_rows, {b, prefix + 1, 1, w});
        auto cond_grid = reshape(cond_rows, {b, 1, 1, w});
        auto full = concat_channels(cond_grid, tok_grid);  // [B, prefix+2, 1, W]
        auto x = reshape(full, {b * positions_total(prefix), w});

        // positional encoding rows 0..positions_total-1 for every sequence
        std::vector<int> pos_ids;
        pos_ids.reserve(size_t(b) * size_t(positions_total(prefix)));
        for (int bi = 0; bi < b; ++bi)
            for (int p = 0; p < positions_total(prefix); ++p) pos_ids.push_back(p);
        auto pos_rows = gather_rows(bp[pos_embed], pos_ids);
        x = x + pos_rows;

        for (const auto& blk : blocks) x = blk.forward(bp, x, b, positions_total(prefix), cfg.heads);
        x = ln_final.forward(bp, x);
        return head.forward(bp, x);  // [B*P_total, N]
    }

    static int positions_total(int prefix) { return prefix + 2; }  // cond + sos + prefix tokens
};

// l_g = l_u + s (l_c - l_u); exact collapse at s = 0 and s = 1.
template <class R>
inline TensorT<R> cfg_logits(const TensorT<R>& logits_c, const TensorT<R>& logits_u, double s) {
    LAYTON_CHECK(logits_c.same_shape(logits_u), "cfg_logits: shape mismatch");
    if (s == 0.0) return logits_u;
    if (s == 1.0) return logits_c;
    TensorT<R> out(logits_c.shape);
    R rs = R(s);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = logits_u[i] + rs * (logits_c[i] - logits_u[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct ArBatch {
    std::vector<std::vector<int>> tokens;       // [B][L]
    std::vector<std::vector<int>> caption_ids;  // [B][*]
};

// Mean next-token cross entropy under causal masking. With probability
// drop_prob (per sequence) the condition embedding is replaced by the null
// embedding. Instrumentation hook reports how many sequences were dropped.
template <class R>
inline VarT<R> ar_loss(ArModelT<R>& model, TapeT<R>& tape, const BoundT<R>& bp, const ArBatch& batch,
                       double drop_prob, Rng& rng, int* dropped_out = nullptr) {
    LAYTON_CHECK(drop_prob >= 0.0 && drop_prob <= 1.0, "ar_loss: drop_prob out of range");
    int b = int(batch.tokens.size());
    int l = int(batch.tokens[0].size());
    LAYTON_CHECK(l == model.cfg.seq_len, "ar_loss: sequence length mismatch");

    // condition rows with dropout: gather either the caption words mean or
    // the null row, built as constants except the null/word rows themselves
    int dropped = 0;
    std::vector<VarT<R>> cond_rows;
    cond_rows.reserve(size_t(b));
    for (int bi = 0; bi < b; ++bi) {
        bool drop = rng.uniform() < drop_prob;
        if (drop) ++dropped;
        if (drop) {
            cond_rows.push_back(gather_rows(bp[model.null_embed], {0}));
        } else {
            auto rows = gather_rows(bp[model.word_embed], batch.caption_ids[size_t(bi)]);
            // mean over caption words: sum rows via matmul with a 1/n row
            int nw = int(batch.caption_ids[size_t(bi)].size());
            TensorT<R> avg({1, nw});
            avg.fill(R(1.0 / nw));
            cond_rows.push_back(matmul(input(tape, avg, false), rows));
        }
    }
    if (dropped_out) *dropped_out = dropped;
    // stack cond rows [B, cond_dim] via concat on a [1, b*cond] reshape
    VarT<R> conds = cond_rows[0];
    if (b > 1) {
        auto as4 = [&](VarT<R> v) { return reshape(v, {1, 1, 1, model.cfg.cond_dim}); };
        auto acc = as4(cond_rows[0]);
        for (int bi = 1; bi < b; ++bi) acc = concat_channels(acc, as4(cond_rows[size_t(bi)]));
        conds = reshape(acc, {b, model.cfg.cond_dim});
    } else {
        conds = reshape(conds, {1, model.cfg.cond_dim});
    }

    // model consumes tokens[0..L-1] as input positions; predictions cover all L
    std::vector<std::vector<int>> inputs(static_cast<size_t>(b));
    for (int bi = 0; bi < b; ++bi)
        inputs[size_t(bi)].assign(batch.tokens[size_t(bi)].begin(), batch.tokens[size_t(bi)].end() - 1);
    auto logits = model.forward_logits(tape, bp, inputs, conds);  // [B*(L+1), N]

    // rows predicting tok_1..tok_L sit at positions 1..L of each sequence
    int positions = ArModelT<R>::positions_total(l - 1);
    std::vector<int> pick;
    std::vector<int> targets;
    pick.reserve(size_t(b) * size_t(l));
    for (int bi = 0; bi < b; ++bi)
        for (int p = 1; p <= l; ++p) {
            pick.push_back(bi * positions + p);
            targets.push_back(batch.tokens[size_t(bi)][size_t(p - 1)]);
        }
    auto picked = gather_rows(logits, pick);
    return cross_entropy_logits(picked, targets);
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

enum class Sampling { Greedy, TopK };

struct GenerateConfig {
    double cfg_scale = 1.5;  // s
    Sampling sampling = Sampling::Greedy;
    int top_k = 64;
    double temperature = 1.0;
};

template <class R>
inline TensorT<R> ar_logits_last(const ArModelT<R>& model, const std::vector<int>& prefix,
                                 const TensorT<R>& cond_embedding) {
    TapeT<R> tape;
    BoundT<R> bp = bind(tape, model.params, false);
    TensorT<R> cond2d({1, model.cfg.cond_dim});
    std::copy(cond_embedding.data.begin(), cond_embedding.data.end(), cond2d.data.begin());
    auto logits = model.forward_logits(tape, bp, {prefix}, input(tape, cond2d, false));
    int positions = ArModelT<R>::positions_total(int(prefix.size()));
    TensorT<R> last({model.cfg.n_tokens});
    const R* row = logits.val().ptr() + int64_t(positions - 1) * model.cfg.n_tokens;
    std::copy(row, row + model.cfg.n_tokens, last.ptr());
    return last;
}

// Autoregressive CFG sampling: two model passes per position (conditional and
// null), combined with cfg_logits, then greedy or top-k sampling.
template <class R>
inline std::vector<int> generate(const ArModelT<R>& model, const std::vector<int>& caption_ids, int length,
                                 const GenerateConfig& gc, uint64_t seed) {
    LAYTON_CHECK(length <= model.cfg.seq_len, "generate: length exceeds model capacity");
    LAYTON_CHECK(gc.cfg_scale >= 0.0, "generate: cfg scale must be >= 0");
    Rng rng = Rng::seeded(seed);
    TensorT<R> cond = model.text_condition(caption_ids);
    TensorT<R> null_cond = model.null_condition();
    std::vector<int> out;
    out.reserve(size_t(length));
    for (int p = 0; p < length; ++p) {
        TensorT<R> lc = ar_logits_last(model, out, cond);
        TensorT<R> lu = ar_logits_last(model, out, null_cond);
        TensorT<R> lg = cfg_logits(lc, lu, gc.cfg_scale);
        int tok;
        if (gc.sampling == Sampling::Greedy) {
            tok = 0;
            for (int j = 1; j < model.cfg.n_tokens; ++j)
                if (lg[j] > lg[tok]) tok = j;
        } else {
            // top-k softmax sampling at the configured temperature
            int k = std::min(gc.top_k, model.cfg.n_tokens);
            std::vector<int> idx(static_cast<size_t>(model.cfg.n_tokens));
            for (int j = 0; j < model.cfg.n_tokens; ++j) idx[size_t(j)] = j;
            std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                              [&](int a, int b2) { return lg[a] > lg[b2]; });
            double mx = double(lg[idx[0]]);
            std::vector<double> probs(static_cast<size_t>(k));
            double denom = 0;
            for (int j = 0; j < k; ++j) {
                probs[size_t(j)] = std::exp((double(lg[idx[size_t(j)]]) - mx) / gc.temperature);
                denom += probs[size_t(j)];
            }
            double u = rng.uniform() * denom;
            double acc = 0;
            tok = idx[size_t(k - 1)];
            for (int j = 0; j < k; ++j) {
                acc += probs[size_t(j)];
                if (u <= acc) {
                    tok = idx[size_t(j)];
                    break;
                }
            }
        }
        out.push_back(tok);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct ArTrainConfig {
    int iters = 1500;
    int batch = 8;
    double lr = 1e-3;
    double lr_final_frac = 0.05;
    double drop_prob = 0.1;
    uint64_t seed = 8;
    int log_every = 200;
};

struct TokenizedSeq {
    std::vector<int> tokens;
    std::vector<int> caption_ids;
};

template <class R>
inline TrainStats train_argen(ArModelT<R>& model, const std::vector<TokenizedSeq>& dataset,
                              const ArTrainConfig& cfg, AdamT<R>* external_opt = nullptr) {
    LAYTON_CHECK(!dataset.empty(), "train_argen: empty dataset");
    Rng rng = Rng::seeded(cfg.seed);
    AdamT<R> local_opt;
    AdamT<R>& opt = external_opt ? *external_opt : local_opt;
    opt.lr = cfg.lr;
    TrainStats stats;
    for (int it = 0; it < cfg.iters; ++it) {
        opt.lr = cosine_lr(cfg.lr, cfg.lr_final_frac, it, cfg.iters);
        ArBatch batch;
        for (int i = 0; i < cfg.batch; ++i) {
            const auto& s = dataset[size_t(rng.uniform_int(0, int(dataset.size()) - 1))];
            batch.tokens.push_back(s.tokens);
            batch.caption_ids.push_back(s.caption_ids);
        }
        TapeT<R> tape;
        BoundT<R> bp = bind(tape, model.params);
        auto loss = ar_loss(model, tape, bp, batch, cfg.drop_prob, rng);
        tape.backward(loss.id);
        opt.step(model.params, collect_grads(bp));
        stats.loss_curve.push_back(double(loss.val()[0]));
        if (cfg.log_every > 0 && (it + 1) % cfg.log_every == 0)
            std::fprintf(stderr, "[info] argen iter %d loss %.5f\n", it + 1, stats.loss_curve.back());
    }
    model.trained = true;
    stats.final_metric = stats.loss_curve.empty() ? 0.0 : stats.loss_curve.back();
    stats.reached_target = true;
    return stats;
}

// ---------------------------------------------------------------------------
// Tokenized-dataset file: "LTOK" magic, u32 N, u32 L, u32 count, then per
// record u16 caption length + caption ids + L u16 tokens. Little-endian.
// ---------------------------------------------------------------------------

inline void write_u32(std::ofstream& f, uint32_t v) {
    unsigned char b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16), uint8_t(v >> 24)};
    f.write(reinterpret_cast<char*>(b), 4);
}

inline uint32_t read_u32(std::ifstream& f) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    if (!f) throw IntegrityError("token dataset: truncated header");
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

inline void write_token_dataset(const std::string& path, int n_codes, int seq_len,
                                const std::vector<TokenizedSeq>& data) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("cannot write token dataset " + path);
    f.write("LTOK", 4);
    write_u32(f, uint32_t(n_codes));
    write_u32(f, uint32_t(seq_len));
    write_u32(f, uint32_t(data.size()));
    auto put_u16 = [&](int v) {
        unsigned char b[2] = {uint8_t(v), uint8_t(v >> 8)};
        f.write(reinterpret_cast<char*>(b), 2);
    };
    for (const auto& s : data) {
        LAYTON_CHECK(int(s.tokens.size()) == seq_len, "token dataset: bad sequence length");
        put_u16(int(s.caption_ids.size()));
        for (int id : s.caption_ids) put_u16(id);
        for (int tok : s.tokens) {
            LAYTON_CHECK(tok >= 0 && tok < n_codes, "token dataset: token out of range");
            put_u16(tok);
        }
    }
}

struct TokenDataset {
    int n_codes = 0;
    int seq_len = 0;
    std::vector<TokenizedSeq> records;
};

inline TokenDataset read_token_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("cannot open token dataset " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string(magic, 4) != "LTOK") throw IntegrityError("token dataset: bad magic in " + path);
    TokenDataset ds;
    ds.n_codes = int(read_u32(f));
    ds.seq_len = int(read_u32(f));
    uint32_t count = read_u32(f);
    auto get_u16 = [&]() {
        unsigned char b[2];
        f.read(reinterpret_cast<char*>(b), 2);
        if (!f) throw IntegrityError("token dataset: truncated record in " + path);
        return int(uint32_t(b[0]) | (uint32_t(b[1]) << 8));
    };
    for (uint32_t i = 0; i < count; ++i) {
        TokenizedSeq s;
        int nw = get_u16();
        for (int j = 0; j < nw; ++j) s.caption_ids.push_back(get_u16());
        for (int j = 0; j < ds.seq_len; ++j) s.tokens.push_back(get_u16());
        ds.records.push_back(std::move(s));
    }
    return ds;
}

}  // namespace layton
