#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "layton/argen.hpp"

using namespace layton;

namespace {

ArConfig micro_cfg() {
    ArConfig c;
    c.n_tokens = 64;
    c.width = 64;
    c.heads = 4;
    c.blocks = 2;
    c.seq_len = 16;
    c.cond_dim = 16;
    return c;
}

// deterministic toy corpus: class-structured sequences with distinct captions
std::vector<TokenizedSeq> toy_corpus(int count, const ArConfig& cfg, uint64_t seed) {
    Rng rng = Rng::seeded(seed);
    std::vector<TokenizedSeq> out;
    for (int i = 0; i < count; ++i) {
        TokenizedSeq s;
        // caption words cycle through the vocabulary
        s.caption_ids = {int(i % 6) + 6, 12 + (i / 6) % 3};  // unique color+shape pair per sequence
        Rng child = rng.child(uint64_t(i));
        for (int j = 0; j < cfg.seq_len; ++j) s.tokens.push_back(child.uniform_int(0, cfg.n_tokens - 1));
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

TEST_CASE("cfg_logits: collapses, formula agreement, linearity, argmax at s=1") {
    Rng rng = Rng::seeded(1);
    Tensor lc = Tensor::randn({512}, rng, 2.0f);
    Tensor lu = Tensor::randn({512}, rng, 2.0f);

    Tensor s0 = cfg_logits(lc, lu, 0.0);
    Tensor s1 = cfg_logits(lc, lu, 1.0);
    for (int64_t i = 0; i < 512; ++i) {
        CHECK(s0[i] == lu[i]);
        CHECK(s1[i] == lc[i]);
    }

    for (double s : {1.5, 2.0, 3.0, 7.0}) {
        Tensor lg = cfg_logits(lc, lu, s);
        for (int64_t i = 0; i < 512; ++i) {
            float expected = lu[i] + float(s) * (lc[i] - lu[i]);  // independent evaluation
            CHECK(lg[i] == expected);
        }
    }

    // linear in s: lg(2) - lg(1.5) == lg(3) - lg(2.5) within fp tolerance
    Tensor a = cfg_logits(lc, lu, 2.0), b = cfg_logits(lc, lu, 1.5);
    Tensor c = cfg_logits(lc, lu, 3.0), d = cfg_logits(lc, lu, 2.5);
    for (int64_t i = 0; i < 512; ++i)
        CHECK(double(a[i]) - double(b[i]) == doctest::Approx(double(c[i]) - double(d[i])).epsilon(1e-4));

    // s = 1 argmax equals conditional argmax
    for (int trial = 0; trial < 200; ++trial) {
        Tensor tc = Tensor::randn({64}, rng);
        Tensor tu = Tensor::randn({64}, rng);
        Tensor tg = cfg_logits(tc, tu, 1.0);
        int am_c = 0, am_g = 0;
        for (int j = 1; j < 64; ++j) {
            if (tc[j] > tc[am_c]) am_c = j;
            if (tg[j] > tg[am_g]) am_g = j;
        }
        CHECK(am_c == am_g);
    }
}

TEST_CASE("uniform-logits model scores ln(N) nats per token") {
    ArConfig cfg = micro_cfg();
    cfg.n_tokens = 512;
    ArModelT<float> model(cfg, 3);
    // zero the output head -> logits identical across tokens
    for (const char* n : {"ar.head.w", "ar.head.b"}) {
        int pi = model.params.find(n);
        REQUIRE(pi >= 0);
        model.params.at(pi).value.zero();
    }
    auto corpus = toy_corpus(4, cfg, 9);
    TapeT<float> tape;
    BoundT<float> bp = bind(tape, model.params, false);
    ArBatch batch;
    for (const auto& s : corpus) {
        batch.tokens.push_back(s.tokens);
        batch.caption_ids.push_back(s.caption_ids);
    }
    Rng rng = Rng::seeded(5);
    auto loss = ar_loss(model, tape, bp, batch, 0.0, rng);
    CHECK(double(loss.val()[0]) == doctest::Approx(std::log(512.0)).epsilon(1e-5));
}

TEST_CASE("conditioning dropout: exact at the boundaries, 3-sigma at 0.1") {
    ArConfig cfg = micro_cfg();
    cfg.width = 16;
    cfg.heads = 2;
    cfg.blocks = 1;
    cfg.seq_len = 4;
    cfg.n_tokens = 8;
    ArModelT<float> model(cfg, 7);
    auto corpus = toy_corpus(8, cfg, 11);

    auto run_draws = [&](double drop_prob, int calls, int batch_size) {
        Rng rng = Rng::seeded(13);
        int dropped_total = 0;
        for (int i = 0; i < calls; ++i) {
            TapeT<float> tape;
            BoundT<float> bp = bind(tape, model.params, false);
            ArBatch batch;
            for (int j = 0; j < batch_size; ++j) {
                const auto& s = corpus[size_t((i + j) % corpus.size())];
                batch.tokens.push_back(s.tokens);
                batch.caption_ids.push_back(s.caption_ids);
            }
            int dropped = 0;
            ar_loss(model, tape, bp, batch, drop_prob, rng, &dropped);
            dropped_total += dropped;
        }
        return dropped_total;
    };

    // 10^4 sequence draws at p = 0 -> never replaced
    CHECK(run_draws(0.0, 313, 32) == 0);
    // p = 1 -> always replaced
    CHECK(run_draws(1.0, 10, 32) == 320);
    // p = 0.1 within binomial 3 sigma over 10^4 draws
    int n = 313 * 32;
    int dropped = run_draws(0.1, 313, 32);
    double sigma = std::sqrt(n * 0.1 * 0.9);
    CHECK(std::abs(dropped - n * 0.1) < 3 * sigma);
}

TEST_CASE("causality: logits at position i ignore later tokens") {
    ArConfig cfg = micro_cfg();
    ArModelT<float> model(cfg, 17);
    auto corpus = toy_corpus(1, cfg, 19);
    Tensor cond2d({1, cfg.cond_dim});
    Tensor ce = model.text_condition(corpus[0].caption_ids);
    std::copy(ce.data.begin(), ce.data.end(), cond2d.data.begin());

    auto logits_at = [&](const std::vector<int>& toks) {
        TapeT<float> tape;
        BoundT<float> bp = bind(tape, model.params, false);
        return model.forward_logits(tape, bp, {toks}, input(tape, cond2d, false)).val();
    };
    std::vector<int> toks(corpus[0].tokens.begin(), corpus[0].tokens.end() - 1);
    Tensor base = logits_at(toks);
    std::vector<int> perturbed = toks;
    perturbed[10] = (perturbed[10] + 13) % cfg.n_tokens;  // position 10 embeds at row 12
    Tensor pert = logits_at(perturbed);
    // rows 0..11 consume only tokens before index 10 -> identical bitwise
    for (int row = 0; row < 12; ++row)
        for (int j = 0; j < cfg.n_tokens; ++j)
            REQUIRE(base[int64_t(row) * cfg.n_tokens + j] == pert[int64_t(row) * cfg.n_tokens + j]);
    // some later row must differ
    bool differs = false;
    for (int64_t i = 12 * cfg.n_tokens; i < base.size() && !differs; ++i) differs = base[i] != pert[i];
    CHECK(differs);
}

TEST_CASE("memorization: tiny corpus converges and greedy CFG-1 reproduces it") {
    ArConfig cfg = micro_cfg();
    ArModelT<float> model(cfg, 23);
    auto corpus = toy_corpus(16, cfg, 29);
    ArTrainConfig tc;
    tc.iters = 1200;
    tc.batch = 8;
    tc.lr = 2e-3;
    tc.drop_prob = 0.1;
    tc.log_every = 0;
    auto stats = train_argen(model, corpus, tc);

    // converged conditional loss (measured without dropout)
    TapeT<float> tape;
    BoundT<float> bp = bind(tape, model.params, false);
    ArBatch batch;
    for (const auto& s : corpus) {
        batch.tokens.push_back(s.tokens);
        batch.caption_ids.push_back(s.caption_ids);
    }
    Rng rng = Rng::seeded(31);
    auto eval_loss = ar_loss(model, tape, bp, batch, 0.0, rng);
    CHECK(double(eval_loss.val()[0]) < 0.1);

    // greedy s=1 generation reproduces >= 90% of token positions
    GenerateConfig gc;
    gc.cfg_scale = 1.0;
    gc.sampling = Sampling::Greedy;
    int match = 0, total = 0;
    for (const auto& s : corpus) {
        auto gen = generate(model, s.caption_ids, cfg.seq_len, gc, 1);
        for (int j = 0; j < cfg.seq_len; ++j) {
            match += gen[size_t(j)] == s.tokens[size_t(j)] ? 1 : 0;
            ++total;
        }
    }
    CHECK(double(match) / total >= 0.9);

    // captions differing in one attribute word map to different embeddings
    Tensor e1 = model.text_condition({6, 12});
    Tensor e2 = model.text_condition({7, 12});
    double dist = 0;
    for (int64_t i = 0; i < e1.size(); ++i) dist += std::abs(double(e1[i]) - double(e2[i]));
    CHECK(dist > 0.0);

    // identical captions -> identical embeddings; null is caption-independent
    Tensor e3 = model.text_condition({6, 12});
    for (int64_t i = 0; i < e1.size(); ++i) CHECK(e1[i] == e3[i]);
    Tensor n1 = model.null_condition(), n2 = model.null_condition();
    for (int64_t i = 0; i < n1.size(); ++i) CHECK(n1[i] == n2[i]);
}

TEST_CASE("generation determinism and s=0 condition independence") {
    ArConfig cfg = micro_cfg();
    ArModelT<float> model(cfg, 37);
    GenerateConfig gc;
    gc.cfg_scale = 0.0;
    gc.sampling = Sampling::Greedy;
    auto a = generate(model, {6, 12}, 8, gc, 42);
    auto b = generate(model, {7, 13}, 8, gc, 42);
    CHECK(a == b);  // null path alone determines logits at s = 0

    gc.cfg_scale = 1.5;
    gc.sampling = Sampling::TopK;
    auto c1 = generate(model, {6, 12}, 8, gc, 43);
    auto c2 = generate(model, {6, 12}, 8, gc, 43);
    CHECK(c1 == c2);

    CHECK_THROWS_AS(model.text_condition({9999}), ContractViolation);
}

TEST_CASE("token dataset file round trip") {
    ArConfig cfg = micro_cfg();
    auto corpus = toy_corpus(5, cfg, 41);
    auto path = (std::filesystem::temp_directory_path() / "layton_tokens.bin").string();
    write_token_dataset(path, cfg.n_tokens, cfg.seq_len, corpus);
    auto ds = read_token_dataset(path);
    CHECK(ds.n_codes == cfg.n_tokens);
    CHECK(ds.seq_len == cfg.seq_len);
    REQUIRE(ds.records.size() == corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
        CHECK(ds.records[i].tokens == corpus[i].tokens);
        CHECK(ds.records[i].caption_ids == corpus[i].caption_ids);
    }
    // truncated file is an integrity error
    std::filesystem::resize_file(path, 10);
    CHECK_THROWS_AS(read_token_dataset(path), IntegrityError);
}

TEST_CASE("dropout-1.0 training converges to the unconditional corpus entropy") {
    // 4 distinct sequences with distinct captions and distinct first tokens:
    // the unconditional optimum is ln(4)/L nats per token, the conditional
    // optimum is 0.
    ArConfig cfg = micro_cfg();
    cfg.n_tokens = 16;
    cfg.seq_len = 8;
    cfg.width = 48;
    cfg.blocks = 2;
    std::vector<TokenizedSeq> corpus;
    Rng rng = Rng::seeded(77);
    for (int i = 0; i < 4; ++i) {
        TokenizedSeq s;
        s.caption_ids = {6 + i, 12};
        s.tokens.push_back(i);  // unique first token
        for (int j = 1; j < cfg.seq_len; ++j) s.tokens.push_back(rng.uniform_int(0, cfg.n_tokens - 1));
        corpus.push_back(std::move(s));
    }
    auto converged_loss = [&](double drop_prob, uint64_t seed) {
        ArModelT<float> model(cfg, seed);
        ArTrainConfig tc;
        tc.iters = 900;
        tc.batch = 4;
        tc.lr = 2e-3;
        tc.drop_prob = drop_prob;
        tc.log_every = 0;
        tc.seed = seed;
        train_argen(model, corpus, tc);
        TapeT<float> tape;
        BoundT<float> bp = bind(tape, model.params, false);
        ArBatch batch;
        for (const auto& s : corpus) {
            batch.tokens.push_back(s.tokens);
            batch.caption_ids.push_back(s.caption_ids);
        }
        Rng r2 = Rng::seeded(5);
        // evaluate with the same conditioning regime the model was trained for
        return double(ar_loss(model, tape, bp, batch, drop_prob >= 1.0 ? 1.0 : 0.0, r2).val()[0]);
    };
    double uncond = converged_loss(1.0, 81);
    double cond = converged_loss(0.0, 82);
    double entropy = std::log(4.0) / cfg.seq_len;  // nats per token
    CHECK(cond < uncond);
    CHECK(std::abs(uncond - entropy) < 0.6 * entropy);
}
