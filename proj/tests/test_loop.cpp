#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "looplab/diagnostics.hpp"
#include "looplab/loop.hpp"
#include "oracles.hpp"

using namespace looplab;

namespace {

BackboneConfig loop_tiny_config(int64_t d, int64_t layers, int64_t h_q, int64_t h_kv,
                                int64_t seq, AttnType at = AttnType::full,
                                const std::string& pattern = "L") {
    BackboneConfig c;
    c.depth = int(layers);
    c.d_model = d;
    c.n_q_heads = h_q;
    c.n_kv_heads = h_kv;
    c.head_dim = d / h_q;
    c.n_layers = layers;
    c.vocab_size_raw = 50;
    c.vocab_size = 64;
    c.seq_len = seq;
    c.attn_type = at;
    c.mla_rank = 8;
    c.window_pattern = pattern;
    validate_config(c);
    return c;
}

// weights with non-trivial output projections so loops actually mix state
ModelWeights<double> warmed_weights(const BackboneConfig& cfg, uint64_t seed) {
    auto w = init_weights<double>(cfg, seed);
    Rng rng(seed + 991);
    for (auto& lw : w.layers) {
        for (auto& x : lw.wo->v) x = rng.normal() * 0.25;
        for (auto& x : lw.ffn_proj->v) x = rng.normal() * 0.25;
    }
    return w;
}

TokenBatch random_tokens(Rng& rng, int64_t b, int64_t t, int64_t vocab) {
    TokenBatch tb;
    tb.batch = b;
    tb.time = t;
    for (int64_t i = 0; i < b * t; ++i) tb.ids.push_back(int32_t(rng.below(uint64_t(vocab))));
    return tb;
}

}  // namespace

TEST_CASE("K=1 makes all variants bitwise identical") {
    auto cfg = loop_tiny_config(16, 2, 2, 2, 6);
    auto w = warmed_weights(cfg, 51);
    Rng rng(52);
    auto tb = random_tokens(rng, 2, 6, cfg.vocab_size_raw);

    std::vector<std::vector<double>> logit_sets;
    for (auto v : all_variants()) {
        Graph<double> g(false);
        auto out = loop_forward(g, w, tb, 1, v);
        logit_sets.push_back(out.logits->v);
        CHECK(out.trace.size() == 1);
    }
    for (size_t i = 1; i < logit_sets.size(); ++i) CHECK(logit_sets[i] == logit_sets[0]);
}

TEST_CASE("LT with K=2 equals composing the stack twice") {
    auto cfg = loop_tiny_config(16, 2, 2, 2, 5);
    auto w = warmed_weights(cfg, 53);
    Rng rng(54);
    auto tb = random_tokens(rng, 1, 5, cfg.vocab_size_raw);

    Graph<double> g(false);
    auto looped = loop_forward(g, w, tb, 2, LoopVariant::LT);

    // unrolled composition by hand, straight block calls
    std::vector<int64_t> pos = {0, 1, 2, 3, 4};
    auto h = embed(g, w.wte, tb);
    for (int rep = 0; rep < 2; ++rep)
        for (int l = 0; l < 2; ++l) {
            auto mask = build_mask(5, l, cfg);
            h = block_forward(g, w, l, h, mask, pos).h;
        }
    auto want = lm_logits(g, w, h);
    REQUIRE(looped.logits->v.size() == want->v.size());
    for (size_t i = 0; i < want->v.size(); ++i)
        CHECK(std::abs(looped.logits->v[i] - want->v[i]) < 1e-6);
}

TEST_CASE("trace length equals K") {
    auto cfg = loop_tiny_config(8, 1, 1, 1, 4);
    auto w = warmed_weights(cfg, 55);
    Rng rng(56);
    auto tb = random_tokens(rng, 1, 4, cfg.vocab_size_raw);
    for (int k : {3, 6, 9, 12}) {
        Graph<double> g(false);
        auto out = loop_forward(g, w, tb, k, LoopVariant::FLT);
        CHECK(int(out.trace.size()) == k);
    }
    Graph<double> g(false);
    CHECK_THROWS_AS(loop_forward(g, w, tb, 0, LoopVariant::FLT), ContractError);
}

TEST_CASE("variants produce distinct wirings for K>=2") {
    auto cfg = loop_tiny_config(16, 2, 2, 2, 6);
    auto w = warmed_weights(cfg, 57);
    Rng rng(58);
    auto tb = random_tokens(rng, 1, 6, cfg.vocab_size_raw);
    std::vector<std::vector<double>> outs;
    for (auto v : all_variants()) {
        Graph<double> g(false);
        outs.push_back(loop_forward(g, w, tb, 3, v).logits->v);
    }
    for (size_t i = 0; i < outs.size(); ++i)
        for (size_t j = i + 1; j < outs.size(); ++j) CHECK(outs[i] != outs[j]);
}

TEST_CASE("attention_injection: position 0 ignores h_prev, output in value hull") {
    auto cfg = loop_tiny_config(8, 1, 1, 1, 4);
    auto w = warmed_weights(cfg, 59);
    Rng rng(60);

    auto z = oracles::random_tensor(rng, {1, 4, 8});
    auto mask = build_mask(4, 0, cfg);
    std::vector<int64_t> pos = {0, 1, 2, 3};

    Graph<double> g(false);
    auto h_prev_a = oracles::random_tensor(rng, {1, 4, 8});
    auto h_prev_b = oracles::random_tensor(rng, {1, 4, 8});
    auto out_a = attention_injection(g, w, 0, h_prev_a, z, mask, pos);
    auto out_b = attention_injection(g, w, 0, h_prev_b, z, mask, pos);
    // row 0 attends only to itself; softmax over one entry is 1 regardless of the query
    for (int64_t j = 0; j < 8; ++j)
        CHECK(out_a->at({0, 0, j}) == doctest::Approx(out_b->at({0, 0, j})).epsilon(1e-12));

    // pre-W_O rows stay inside the convex hull of value rows
    AttnProbe probe;
    attention_injection(g, w, 0, h_prev_a, z, mask, pos, &probe);
    CHECK(probe.max_mixed_row_norm <= probe.max_value_row_norm + 1e-6);

    CHECK_THROWS_AS(attention_injection(g, w, 0, TensorPtr<double>(), z, mask, pos), StateError);
}

TEST_CASE("attention_injection matches brute-force cross-attention oracle") {
    auto cfg = loop_tiny_config(12, 1, 2, 2, 4);
    auto w = warmed_weights(cfg, 61);
    Rng rng(62);
    auto h_prev = oracles::random_tensor(rng, {1, 4, 12});
    auto z = oracles::random_tensor(rng, {1, 4, 12});
    auto mask = build_mask(4, 0, cfg);
    std::vector<int64_t> pos = {0, 1, 2, 3};

    Graph<double> g(false);
    auto out = attention_injection(g, w, 0, h_prev, z, mask, pos);
    auto ref = oracles::reference_attention(w, 0, h_prev->v, z->v, 1, 4, 4,
                                            [](int64_t i, int64_t j) { return j <= i; });
    for (size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(out->v[i] - ref[i]) < 1e-6);
}

TEST_CASE("flt wiring: layer 0 uses the embedding as kv source") {
    auto cfg = loop_tiny_config(8, 1, 1, 1, 4);
    auto w = warmed_weights(cfg, 63);
    Rng rng(64);
    auto tb = random_tokens(rng, 1, 4, cfg.vocab_size_raw);

    Graph<double> g(false);
    auto out = loop_forward(g, w, tb, 2, LoopVariant::FLT);

    // replicate by hand: t=1 self-attention stack, then one injected layer
    std::vector<int64_t> pos = {0, 1, 2, 3};
    auto mask = build_mask(4, 0, cfg);
    auto x = embed(g, w.wte, tb);
    auto h1 = block_forward(g, w, 0, x, mask, pos).h;
    BlockAttnInputs<double> in{AttnKind::injected, h1, x};
    auto h2 = block_forward(g, w, 0, h1, mask, pos, in).h;
    auto want = lm_logits(g, w, h2);
    for (size_t i = 0; i < want->v.size(); ++i)
        CHECK(out.logits->v[i] == doctest::Approx(want->v[i]).epsilon(1e-12));
}

TEST_CASE("lt_i adds the embedding at the start of iterations t>=2") {
    auto cfg = loop_tiny_config(8, 1, 1, 1, 4);
    auto w = warmed_weights(cfg, 65);
    Rng rng(66);
    auto tb = random_tokens(rng, 1, 4, cfg.vocab_size_raw);

    Graph<double> g(false);
    auto out = loop_forward(g, w, tb, 2, LoopVariant::LT_I);

    std::vector<int64_t> pos = {0, 1, 2, 3};
    auto mask = build_mask(4, 0, cfg);
    auto x = embed(g, w.wte, tb);
    auto h1 = block_forward(g, w, 0, x, mask, pos).h;
    auto h2 = block_forward(g, w, 0, add(g, h1, x), mask, pos).h;
    auto want = lm_logits(g, w, h2);
    for (size_t i = 0; i < want->v.size(); ++i)
        CHECK(out.logits->v[i] == doctest::Approx(want->v[i]).epsilon(1e-12));
}

TEST_CASE("flt_res adds h_prev before every layer of iterations t>=2") {
    auto cfg = loop_tiny_config(8, 2, 1, 1, 4);
    auto w = warmed_weights(cfg, 67);
    Rng rng(68);
    auto tb = random_tokens(rng, 1, 4, cfg.vocab_size_raw);

    Graph<double> g(false);
    auto out = loop_forward(g, w, tb, 2, LoopVariant::FLT_RES);

    std::vector<int64_t> pos = {0, 1, 2, 3};
    auto m0 = build_mask(4, 0, cfg), m1 = build_mask(4, 1, cfg);
    auto x = embed(g, w.wte, tb);
    auto h = block_forward(g, w, 1, block_forward(g, w, 0, x, m0, pos).h, m1, pos).h;
    auto h_prev = h;
    h = block_forward(g, w, 0, add(g, h, h_prev), m0, pos).h;
    h = block_forward(g, w, 1, add(g, h, h_prev), m1, pos).h;
    auto want = lm_logits(g, w, h);
    for (size_t i = 0; i < want->v.size(); ++i)
        CHECK(out.logits->v[i] == doctest::Approx(want->v[i]).epsilon(1e-12));
}

TEST_CASE("last_step_loss values and composition") {
    auto cfg = loop_tiny_config(8, 1, 1, 1, 4);
    Graph<double> g;

    // uniform logits, vocab 64 -> ln 64
    auto logits = make_tensor<double>({1, 3, 64}, std::vector<double>(3 * 64, 0.1));
    TokenBatch tb{{1, 2, 3}, 1, 3};
    auto l = last_step_loss(g, logits, tb);
    CHECK(l.loss->v[0] == doctest::Approx(std::log(64.0)).epsilon(1e-12));
    CHECK(l.valid == std::vector<uint8_t>{1, 1, 0});

    // perfect one-hot predictions -> ~0
    auto hot = make_tensor<double>({1, 3, 64}, std::vector<double>(3 * 64, 0.0));
    hot->at({0, 0, 2}) = 1000.0;
    hot->at({0, 1, 3}) = 1000.0;
    auto l2 = last_step_loss(g, hot, tb);
    CHECK(l2.loss->v[0] == doctest::Approx(0.0).epsilon(1e-9));

    // matches cross_entropy_rowwise on explicitly shifted targets
    Rng rng(69);
    auto rl = oracles::random_tensor(rng, {2, 4, 64});
    auto tb2 = random_tokens(rng, 2, 4, 64);
    auto l3 = last_step_loss(g, rl, tb2);
    std::vector<int32_t> shifted;
    std::vector<double> rows;
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t i = 0; i + 1 < 4; ++i) {
            shifted.push_back(tb2.at(b, i + 1));
            const double* src = rl->v.data() + (b * 4 + i) * 64;
            rows.insert(rows.end(), src, src + 64);
        }
    auto packed = make_tensor<double>({6, 64}, std::move(rows));
    auto ce = cross_entropy_rowwise(g, packed, shifted);
    CHECK(l3.loss->v[0] == doctest::Approx(ce.mean_loss->v[0]).epsilon(1e-12));

    TokenBatch too_short{{5}, 1, 1};
    auto one = make_tensor<double>({1, 1, 64});
    CHECK_THROWS_AS(last_step_loss(g, one, too_short), ContractError);
}

TEST_CASE("loop gradients match finite differences (depth-2, d=64, K=3, all variants)") {
    BackboneConfig cfg = loop_tiny_config(64, 2, 1, 1, 6);
    Rng rng(70);
    auto tb = random_tokens(rng, 1, 6, cfg.vocab_size_raw);

    for (auto variant : all_variants()) {
        auto w = warmed_weights(cfg, 71);
        std::vector<TensorPtr<double>> leaves;
        for (auto& np : w.named_params()) leaves.push_back(np.tensor);

        Graph<double> g;
        auto out = loop_forward(g, w, tb, 3, variant);
        auto sl = last_step_loss(g, out.logits, tb);
        g.backward(sl.loss);
        std::vector<std::vector<double>> analytic;
        for (auto& l : leaves) analytic.push_back(l->g);

        auto eval = [&]() {
            Graph<double> ge(false);
            auto o = loop_forward(ge, w, tb, 3, variant);
            return last_step_loss(ge, o.logits, tb).loss->v[0];
        };
        auto rep = oracles::fd_check(eval, leaves, analytic, 1e-3, 6, 72);
        INFO("variant ", variant_name(variant), " max_rel ", rep.max_rel);
        CHECK(rep.failed == 0);
    }
}

TEST_CASE("weight sharing: parameter count independent of K") {
    auto cfg = loop_tiny_config(16, 2, 2, 2, 4);
    auto w = warmed_weights(cfg, 73);
    Rng rng(74);
    auto tb = random_tokens(rng, 1, 4, cfg.vocab_size_raw);
    const int64_t before = w.total_param_elems();
    Graph<double> g(false);
    loop_forward(g, w, tb, 2, LoopVariant::FLT);
    loop_forward(g, w, tb, 9, LoopVariant::FLT);
    CHECK(w.total_param_elems() == before);
    CHECK(int64_t(w.named_params().size()) == int64_t(2 + 6 * cfg.n_layers));
}

TEST_CASE("injection boundedness holds on random forward passes") {
    auto cfg = loop_tiny_config(16, 2, 2, 2, 5);
    Rng rng(75);
    for (int trial = 0; trial < 25; ++trial) {
        auto w = warmed_weights(cfg, 200 + uint64_t(trial));
        auto tb = random_tokens(rng, 2, 5, cfg.vocab_size_raw);
        Graph<double> g(false);
        std::vector<AttnProbe> probes;
        loop_forward(g, w, tb, 3, LoopVariant::FLT, &probes);
        CHECK(probes.size() == 2 * 2);  // (K-1) iterations x L layers
        for (const auto& p : probes)
            CHECK(p.max_mixed_row_norm <= p.max_value_row_norm + 1e-6);
    }
}

TEST_CASE("loop_forward determinism") {
    auto cfg = loop_tiny_config(16, 2, 2, 2, 5);
    auto run = [&](std::vector<double>* logits, std::vector<double>* res) {
        auto w = warmed_weights(cfg, 76);
        Rng rng(77);
        auto tb = random_tokens(rng, 2, 5, cfg.vocab_size_raw);
        Graph<double> g(false);
        auto out = loop_forward(g, w, tb, 4, LoopVariant::FLT);
        *logits = out.logits->v;
        *res = residual_norms(out.trace);
    };
    std::vector<double> l1, l2, r1, r2;
    run(&l1, &r1);
    run(&l2, &r2);
    CHECK(l1 == l2);
    CHECK(r1 == r2);
}

TEST_CASE("incremental decoding equals full recompute (all variants)") {
    auto cfg = loop_tiny_config(16, 2, 2, 2, 64);
    Rng rng(78);
    std::vector<int32_t> prompt;
    for (int i = 0; i < 5; ++i) prompt.push_back(int32_t(rng.below(50)));

    for (auto variant : all_variants()) {
        auto w = warmed_weights(cfg, 79);
        const int n_new = 16;
        auto inc = incremental_decode(w, prompt, 3, variant, n_new);

        // oracle: full forward recompute at every step
        std::vector<int32_t> seq = prompt;
        std::vector<int32_t> full;
        for (int s = 0; s < n_new; ++s) {
            TokenBatch tb{seq, 1, int64_t(seq.size())};
            Graph<double> g(false);
            auto out = loop_forward(g, w, tb, 3, variant);
            const int64_t V = cfg.vocab_size;
            std::vector<double> last(out.logits->v.end() - V, out.logits->v.end());
            const int32_t next = argmax_lowest(last);
            full.push_back(next);
            seq.push_back(next);
        }
        INFO("variant ", variant_name(variant));
        CHECK(inc == full);
    }
}

TEST_CASE("incremental decoding with sliding windows and mla") {
    Rng rng(80);
    std::vector<int32_t> prompt;
    for (int i = 0; i < 4; ++i) prompt.push_back(int32_t(rng.below(50)));

    for (auto cfg : {loop_tiny_config(16, 2, 2, 2, 16, AttnType::full, "SL"),
                     loop_tiny_config(16, 2, 2, 1, 64, AttnType::mla)}) {
        auto w = warmed_weights(cfg, 81);
        auto inc = incremental_decode(w, prompt, 2, LoopVariant::FLT, 12);
        std::vector<int32_t> seq = prompt;
        std::vector<int32_t> full;
        for (int s = 0; s < 12; ++s) {
            TokenBatch tb{seq, 1, int64_t(seq.size())};
            Graph<double> g(false);
            auto out = loop_forward(g, w, tb, 2, LoopVariant::FLT);
            std::vector<double> last(out.logits->v.end() - cfg.vocab_size, out.logits->v.end());
            const int32_t next = argmax_lowest(last);
            full.push_back(next);
            seq.push_back(next);
        }
        CHECK(inc == full);
    }
}

TEST_CASE("decode cache grows by one entry per token") {
    auto cfg = loop_tiny_config(8, 2, 1, 1, 64);
    auto w = warmed_weights(cfg, 82);
    LoopState<double> st(w, 3, LoopVariant::FLT);
    std::vector<int32_t> prompt = {1, 2, 3};
    for (auto t : prompt) st.feed(t);
    for (int t = 0; t < 3; ++t)
        for (int l = 0; l < 2; ++l) CHECK(st.cache_entries(t, l) == 3);
    st.feed(7);
    for (int t = 0; t < 3; ++t)
        for (int l = 0; l < 2; ++l) CHECK(st.cache_entries(t, l) == 4);

    // n_new = 0 produces an empty continuation
    CHECK(incremental_decode(w, prompt, 2, LoopVariant::LT, 0).empty());
    CHECK_THROWS_AS(incremental_decode(w, std::vector<int32_t>{}, 2, LoopVariant::LT, 1),
                    ContractError);
}

TEST_CASE("mla kv cache footprint is smaller than mha by at least H_kv*d_h/R") {
    auto mha_cfg = loop_tiny_config(32, 1, 1, 1, 64, AttnType::full);
    auto mla_cfg = loop_tiny_config(32, 1, 1, 1, 64, AttnType::mla);  // rank 8
    auto w_mha = warmed_weights(mha_cfg, 83);
    auto w_mla = warmed_weights(mla_cfg, 84);

    LoopState<double> st_mha(w_mha, 1, LoopVariant::LT);
    LoopState<double> st_mla(w_mla, 1, LoopVariant::LT);
    for (int32_t t : {1, 2, 3, 4}) {
        st_mha.feed(t);
        st_mla.feed(t);
    }
    const auto& c_mha = st_mha.kv_cache[0][0];
    const auto& c_mla = st_mla.kv_cache[0][0];
    const int64_t mha_elems = int64_t(c_mha.k.size() + c_mha.v.size()) / c_mha.rows;
    const int64_t mla_elems = int64_t(c_mla.k.size() + c_mla.v.size()) / c_mla.rows;
    CHECK(mha_elems == kv_cache_elems_per_token_per_layer(mha_cfg));
    CHECK(mla_elems == kv_cache_elems_per_token_per_layer(mla_cfg));
    const double claimed = double(mla_cfg.n_kv_heads * mla_cfg.head_dim) / double(mla_cfg.mla_rank);
    CHECK(double(mha_elems) / double(mla_elems) >= claimed);
}
