#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "looplab/backbone.hpp"
#include "oracles.hpp"

using namespace looplab;

namespace {

// small hand-constructed config (not derive_dims) for compact tests
BackboneConfig tiny_config(int64_t d, int64_t layers, int64_t h_q, int64_t h_kv, int64_t seq,
                           AttnType at = AttnType::full, const std::string& pattern = "L") {
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

}  // namespace

TEST_CASE("derive_dims paper sizes and vocab padding") {
    auto c6 = derive_dims(6, 50000);
    CHECK(c6.d_model == 384);
    CHECK(c6.n_q_heads == 3);
    CHECK(c6.n_layers == 6);
    CHECK(c6.head_dim == 128);

    auto c12 = derive_dims(12, 50000);
    CHECK(c12.d_model == 768);
    CHECK(c12.n_q_heads == 6);
    CHECK(c12.n_layers == 12);

    auto cv = derive_dims(2, 100);
    CHECK(cv.vocab_size == 128);
    CHECK(derive_dims(2, 64).vocab_size == 64);
}

TEST_CASE("derive_dims config errors") {
    DeriveOptions bad_kv;
    bad_kv.h_kv = 2;  // does not divide H_q = 3
    CHECK_THROWS_AS(derive_dims(6, 1000, bad_kv), ConfigError);
    CHECK_THROWS_AS(derive_dims(5, 1000), ConfigError);  // 320/3 is not integral
    CHECK_THROWS_AS(derive_dims(0, 1000), ConfigError);
    DeriveOptions bad_pattern;
    bad_pattern.window_pattern = "LX";
    CHECK_THROWS_AS(derive_dims(2, 1000, bad_pattern), ConfigError);
}

TEST_CASE("init_weights distributions and determinism") {
    auto cfg = derive_dims(6, 100, {/*seq_len=*/64});
    auto w = init_weights<double>(cfg, 42);

    for (const auto& lw : w.layers) {
        for (double x : lw.wo->v) CHECK(x == 0.0);
        for (double x : lw.ffn_proj->v) CHECK(x == 0.0);
    }

    // sample std of uniform(-s, s) entries should be close to sqrt(1/d)
    double sq = 0.0;
    int64_t n = 0;
    const double bound = std::sqrt(3.0 / 384.0);
    for (double x : w.layers[0].ffn_fc->v) {
        CHECK(std::abs(x) <= bound);
        sq += x * x;
        ++n;
    }
    const double sd = std::sqrt(sq / double(n));
    CHECK(sd == doctest::Approx(std::sqrt(1.0 / 384.0)).epsilon(0.05));

    // head init is tiny, embedding is unit scale, and they are untied
    double head_sq = 0.0;
    for (double x : w.lm_head->v) head_sq += x * x;
    CHECK(std::sqrt(head_sq / double(w.lm_head->numel())) ==
          doctest::Approx(0.001).epsilon(0.05));
    CHECK(w.wte.get() != w.lm_head.get());

    auto w2 = init_weights<double>(cfg, 42);
    CHECK(w.wte->v == w2.wte->v);
    CHECK(w.layers[3].ffn_fc->v == w2.layers[3].ffn_fc->v);
    auto w3 = init_weights<double>(cfg, 43);
    CHECK(w.wte->v != w3.wte->v);
}

TEST_CASE("count_params formulas equal exact enumeration") {
    {
        // V=256, d=64, L=1, MHA: 2*256*64 + 12*4096 = 81920
        auto cfg = tiny_config(64, 1, 1, 1, 8);
        cfg.vocab_size_raw = 256;
        cfg.vocab_size = 256;
        auto pc = count_params(cfg);
        CHECK(pc.total == 81920);
        auto w = init_weights<double>(cfg, 1);
        CHECK(pc.total == w.total_param_elems());
        CHECK(pc.excl_embedding == pc.total - 256 * 64);
    }

    // r = 1 reduces the GQA formula to 12 d^2
    {
        auto cfg = tiny_config(128, 2, 2, 2, 8);
        auto pc = count_params(cfg);
        CHECK(pc.per_block == 12 * 128 * 128);
    }

    // formula == enumeration across MHA / GQA / MLA configurations
    struct Case {
        int64_t d, L, hq, hkv;
        AttnType at;
    };
    const Case cases[] = {
        {64, 1, 1, 1, AttnType::full},   {128, 2, 2, 1, AttnType::full},
        {128, 3, 4, 2, AttnType::full},  {64, 2, 1, 1, AttnType::mla},
        {128, 2, 2, 2, AttnType::mla},   {192, 2, 2, 1, AttnType::mla},
    };
    for (const auto& cs : cases) {
        auto cfg = tiny_config(cs.d, cs.L, cs.hq, cs.hkv, 8, cs.at);
        auto w = init_weights<double>(cfg, 7);
        auto pc = count_params(cfg);
        CHECK(pc.total == w.total_param_elems());
        // GQA closed form (10 + 2r) d^2 with r = H_kv/H_q
        if (cs.at == AttnType::full) {
            const double r = double(cs.hkv) / double(cs.hq);
            CHECK(double(pc.per_block) == doctest::Approx((10.0 + 2.0 * r) * cs.d * cs.d));
        } else {
            const int64_t R = cfg.mla_rank;
            CHECK(pc.per_block == cs.d * cs.d + cs.d * R +
                                      2 * R * cfg.n_kv_heads * cfg.head_dim + cs.d * cs.d +
                                      8 * cs.d * cs.d);
        }
    }

    // padded-vocab derive_dims case
    auto cfg = derive_dims(6, 100, {/*seq_len=*/16});
    auto w = init_weights<double>(cfg, 3);
    CHECK(count_params(cfg).total == w.total_param_elems());
}

TEST_CASE("rope position zero is identity and rotations preserve norm") {
    Rng rng(21);
    Graph<double> g;
    auto x = oracles::random_tensor(rng, {2, 3, 4, 8});  // [B, H, T, dh]
    auto y0 = rope_apply(g, x, {0, 0, 0, 0});
    CHECK(y0->v == x->v);

    auto y = rope_apply(g, x, {0, 5, 11, 999});
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t h = 0; h < 3; ++h)
            for (int64_t t = 0; t < 4; ++t) {
                double n_in = 0, n_out = 0;
                for (int64_t j = 0; j < 8; ++j) {
                    n_in += x->at({b, h, t, j}) * x->at({b, h, t, j});
                    n_out += y->at({b, h, t, j}) * y->at({b, h, t, j});
                }
                CHECK(std::abs(std::sqrt(n_in) - std::sqrt(n_out)) < 1e-6);
            }

    auto odd = make_tensor<double>({1, 2, 3});
    CHECK_THROWS_AS(rope_apply(g, odd, {0, 0}), ConfigError);
}

TEST_CASE("rope matches rotation-matrix oracle and shifts compose") {
    Rng rng(22);
    Graph<double> g;
    const int64_t dh = 8;
    auto v = oracles::random_tensor(rng, {1, 1, dh});
    auto w = oracles::random_tensor(rng, {1, 1, dh});

    for (int64_t p : {0, 3, 17}) {
        auto rv = rope_apply(g, v, {p});
        const auto rot = oracles::rope_rotation_matrix(dh, p, 10000.0);
        const auto want = oracles::matvec(rot, v->v);
        for (int64_t j = 0; j < dh; ++j) CHECK(std::abs(rv->v[size_t(j)] - want[size_t(j)]) < 1e-6);
    }

    // dot(rope(v,p), rope(w,p+delta)) depends only on delta
    const int64_t delta = 4;
    double dots[2];
    int i = 0;
    for (int64_t p : {2, 9}) {
        auto rv = rope_apply(g, v, {p});
        auto rw = rope_apply(g, w, {p + delta});
        double dot = 0;
        for (int64_t j = 0; j < dh; ++j) dot += rv->v[size_t(j)] * rw->v[size_t(j)];
        dots[i++] = dot;
    }
    CHECK(std::abs(dots[0] - dots[1]) < 1e-6);
}

TEST_CASE("rope gradient") {
    Rng rng(23);
    auto x = oracles::random_tensor(rng, {2, 3, 6}, true);
    auto w = oracles::random_tensor(rng, {2, 3, 6});
    std::vector<int64_t> pos = {1, 4, 7};
    Graph<double> g;
    auto loss = sum(g, mul(g, rope_apply(g, x, pos), w));
    g.backward(loss);
    auto eval = [&]() {
        Graph<double> ge(false);
        return sum(ge, mul(ge, rope_apply(ge, x, pos), w))->v[0];
    };
    auto rep = oracles::fd_check(eval, {x}, {x->g}, 1e-5);
    CHECK(rep.failed == 0);
}

TEST_CASE("qk_norm normalizes per head and composes with rms_normalize") {
    Rng rng(24);
    Graph<double> g;
    auto q = oracles::random_tensor(rng, {1, 2, 3, 8}, false, 4.0);
    auto k = oracles::random_tensor(rng, {1, 2, 3, 8}, false, 0.3);
    auto [qn, kn] = qk_norm(g, q, k);
    for (int64_t h = 0; h < 2; ++h)
        for (int64_t t = 0; t < 3; ++t) {
            double ms = 0;
            for (int64_t j = 0; j < 8; ++j) ms += qn->at({0, h, t, j}) * qn->at({0, h, t, j});
            CHECK(std::sqrt(ms / 8.0) == doctest::Approx(1.0).epsilon(1e-5));
        }
    auto ref = rms_normalize(g, k);
    CHECK(kn->v == ref->v);
}

TEST_CASE("attention weights are invariant to rescaling W_Q") {
    auto cfg = tiny_config(16, 1, 2, 2, 4);
    auto w = init_weights<double>(cfg, 31);
    // nonzero output projection so differences would be visible
    Rng rng(32);
    for (auto& x : w.layers[0].wo->v) x = rng.normal() * 0.2;

    Graph<double> g;
    auto src = oracles::random_tensor(rng, {1, 4, 16});
    auto mask = build_mask(4, 0, cfg);
    std::vector<int64_t> pos = {0, 1, 2, 3};
    auto out1 = attention(g, w, 0, src, src, mask, pos, pos);
    for (auto& x : w.layers[0].wq->v) x *= 10.0;  // QK-Norm absorbs the scale
    auto out2 = attention(g, w, 0, src, src, mask, pos, pos);
    for (size_t i = 0; i < out1->v.size(); ++i) CHECK(std::abs(out1->v[i] - out2->v[i]) < 1e-6);
}

TEST_CASE("build_mask patterns") {
    auto cfg_l = tiny_config(16, 3, 2, 2, 8, AttnType::full, "L");
    auto m = build_mask(8, 1, cfg_l);
    for (int64_t i = 0; i < 8; ++i)
        for (int64_t j = 0; j < 8; ++j) CHECK(int(m.allow[i * 8 + j]) == int(j <= i));

    // L=6, pattern LS, T=1024: windows [full, 256, full, 256, full, full]
    auto cfg = tiny_config(16, 6, 2, 2, 1024, AttnType::full, "LS");
    const int64_t T = 1024;
    const bool expect_full[6] = {true, false, true, false, true, true};
    for (int l = 0; l < 6; ++l) {
        auto ml = build_mask(T, l, cfg);
        // row far enough from 0 to distinguish full from 256-window
        const int64_t i = 700;
        int64_t allowed = 0;
        for (int64_t j = 0; j < T; ++j) allowed += ml.allow[i * T + j];
        if (expect_full[l]) {
            CHECK(allowed == i + 1);
        } else {
            CHECK(allowed == 256);
            CHECK(ml.allow[i * T + (i - 255)] == 1);
            CHECK(ml.allow[i * T + (i - 256)] == 0);
        }
    }

    // row 0 allows exactly {0} for every layer and pattern
    for (int l = 0; l < 6; ++l) {
        auto ml = build_mask(16, l, cfg);
        CHECK(ml.allow[0] == 1);
        for (int64_t j = 1; j < 16; ++j) CHECK(ml.allow[j] == 0);
    }
}

TEST_CASE("masks never allow future positions") {
    Rng rng(33);
    for (const char* pattern : {"L", "S", "LS", "SSL"}) {
        auto cfg = tiny_config(16, 4, 2, 2, 32, AttnType::full, pattern);
        for (int l = 0; l < 4; ++l) {
            auto m = build_mask(32, l, cfg);
            for (int64_t i = 0; i < 32; ++i)
                for (int64_t j = i + 1; j < 32; ++j) CHECK(m.allow[i * 32 + j] == 0);
        }
    }
}

TEST_CASE("attention single position reduces to W_O * v0") {
    auto cfg = tiny_config(8, 1, 1, 1, 1);
    auto w = init_weights<double>(cfg, 5);
    Rng rng(34);
    for (auto& x : w.layers[0].wo->v) x = rng.normal();

    Graph<double> g;
    auto src = oracles::random_tensor(rng, {1, 1, 8});
    auto mask = build_mask(1, 0, cfg);
    auto out = attention(g, w, 0, src, src, mask, {0}, {0});

    // softmax over one entry is 1, so the pre-projection output is v0
    auto z = src;
    auto v0 = matmul(g, z, w.layers[0].wv);
    auto want = matmul(g, v0, w.layers[0].wo);
    for (size_t i = 0; i < out->v.size(); ++i)
        CHECK(out->v[i] == doctest::Approx(want->v[i]).epsilon(1e-9));
}

TEST_CASE("attention matches brute-force oracle (MHA, GQA, MLA)") {
    Rng rng(35);
    struct Case {
        int64_t d, hq, hkv;
        AttnType at;
    };
    for (const auto& cs : {Case{12, 2, 2, AttnType::full}, Case{16, 4, 2, AttnType::full},
                           Case{12, 2, 1, AttnType::mla}}) {
        auto cfg = tiny_config(cs.d, 1, cs.hq, cs.hkv, 3, cs.at);
        auto w = init_weights<double>(cfg, 1000 + cs.d + cs.hq);
        for (auto& x : w.layers[0].wo->v) x = rng.normal() * 0.3;

        Graph<double> g;
        auto src = oracles::random_tensor(rng, {2, 3, cs.d});
        auto mask = build_mask(3, 0, cfg);
        std::vector<int64_t> pos = {0, 1, 2};
        auto out = attention(g, w, 0, src, src, mask, pos, pos);

        auto ref = oracles::reference_attention(w, 0, src->v, src->v, 2, 3,
                                                3, [](int64_t i, int64_t j) { return j <= i; });
        REQUIRE(out->v.size() == ref.size());
        for (size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(out->v[i] - ref[i]) < 1e-6);
    }
}

TEST_CASE("gqa with h_kv == h_q equals the mha code path bitwise") {
    auto cfg = tiny_config(16, 1, 4, 4, 5);
    auto w = init_weights<double>(cfg, 8);
    Rng rng(36);
    for (auto& x : w.layers[0].wo->v) x = rng.normal() * 0.3;
    Graph<double> g;
    auto src = oracles::random_tensor(rng, {1, 5, 16});
    auto mask = build_mask(5, 0, cfg);
    std::vector<int64_t> pos = {0, 1, 2, 3, 4};
    auto a1 = attention(g, w, 0, src, src, mask, pos, pos);
    auto a2 = attention(g, w, 0, src, src, mask, pos, pos);
    CHECK(a1->v == a2->v);  // broadcast factor 1 is the identity, runs are bitwise equal
}

TEST_CASE("ffn zero projection and clamped inputs give zero, else matches composition") {
    auto cfg = tiny_config(8, 1, 1, 1, 2);
    auto w = init_weights<double>(cfg, 9);
    Rng rng(37);
    Graph<double> g;
    auto x = oracles::random_tensor(rng, {1, 2, 8});

    auto y0 = ffn(g, w, 0, x);  // freshly initialized: ffn_proj == 0
    for (double v : y0->v) CHECK(v == 0.0);

    for (auto& p : w.layers[0].ffn_proj->v) p = rng.normal();
    // all-negative pre-activations clamp to zero
    for (auto& fc : w.layers[0].ffn_fc->v) fc = -std::abs(fc);
    auto xp = make_tensor<double>({1, 1, 8}, std::vector<double>(8, 1.0));
    auto y1 = ffn(g, w, 0, xp);
    for (double v : y1->v) CHECK(v == 0.0);

    // random case against explicit composition
    auto wf = init_weights<double>(cfg, 10);
    for (auto& p : wf.layers[0].ffn_proj->v) p = rng.normal() * 0.2;
    auto y2 = ffn(g, wf, 0, x);
    auto want = matmul(g, relu_squared(g, matmul(g, x, wf.layers[0].ffn_fc)),
                       wf.layers[0].ffn_proj);
    for (size_t i = 0; i < y2->v.size(); ++i) CHECK(std::abs(y2->v[i] - want->v[i]) < 1e-6);
}

TEST_CASE("block_forward is the identity at init") {
    auto cfg = tiny_config(16, 2, 2, 2, 6);
    auto w = init_weights<double>(cfg, 11);
    Rng rng(38);
    Graph<double> g;
    auto h = oracles::random_tensor(rng, {2, 6, 16});
    auto mask = build_mask(6, 0, cfg);
    std::vector<int64_t> pos = {0, 1, 2, 3, 4, 5};
    auto blk = block_forward(g, w, 0, h, mask, pos);
    CHECK(blk.h->v == h->v);  // zero output projections leave the residual exact
}

TEST_CASE("block_forward gradients match finite differences") {
    auto cfg = tiny_config(8, 1, 1, 1, 3);
    auto w = init_weights<double>(cfg, 12);
    Rng rng(39);
    for (auto& x : w.layers[0].wo->v) x = rng.normal() * 0.3;
    for (auto& x : w.layers[0].ffn_proj->v) x = rng.normal() * 0.3;

    auto h = oracles::random_tensor(rng, {1, 3, 8}, true);
    auto mask = build_mask(3, 0, cfg);
    std::vector<int64_t> pos = {0, 1, 2};

    Graph<double> g;
    auto blk = block_forward(g, w, 0, h, mask, pos);
    auto loss = sum(g, mul(g, blk.h, blk.h));
    g.backward(loss);

    std::vector<TensorPtr<double>> leaves = {h, w.layers[0].wq, w.layers[0].wk,
                                             w.layers[0].wv, w.layers[0].wo,
                                             w.layers[0].ffn_fc, w.layers[0].ffn_proj};
    std::vector<std::vector<double>> analytic;
    for (auto& l : leaves) analytic.push_back(l->g);
    auto eval = [&]() {
        Graph<double> ge(false);
        auto b = block_forward(ge, w, 0, h, mask, pos);
        return sum(ge, mul(ge, b.h, b.h))->v[0];
    };
    auto rep = oracles::fd_check(eval, leaves, analytic, 1e-4, 24);
    CHECK(rep.failed == 0);
    CHECK(rep.max_rel < 1e-4);
}

TEST_CASE("lm_logits values and soft cap") {
    auto cfg = tiny_config(8, 1, 1, 1, 2);
    auto w = init_weights<double>(cfg, 13);
    Rng rng(40);
    Graph<double> g;
    auto h = oracles::random_tensor(rng, {1, 2, 8}, false, 5.0);
    auto out = lm_logits(g, w, h);
    CHECK(out->shape == Shape{1, 2, cfg.vocab_size});
    for (double v : out->v) CHECK(std::abs(v) <= 15.0);

    // raw logit 15 -> 15*tanh(1); raw logit 0 -> 0 (checked at the op level,
    // composed here against an explicit reimplementation)
    auto want = tanh_softcap(g, matmul(g, rms_normalize(g, h), w.lm_head), 15.0);
    CHECK(out->v == want->v);
    CHECK(15.0 * std::tanh(1.0) == doctest::Approx(11.4239123).epsilon(1e-6));
}

TEST_CASE("backbone at init predicts near-uniform over the raw vocab") {
    auto cfg = derive_dims(2, 258, {/*seq_len=*/16});
    auto w = init_weights<double>(cfg, 21);
    Rng rng(41);
    TokenBatch tb;
    tb.batch = 2;
    tb.time = 16;
    for (int i = 0; i < 32; ++i) tb.ids.push_back(int32_t(rng.below(258)));

    Graph<double> g;
    auto x = embed(g, w.wte, tb);
    TensorPtr<double> h = x;
    std::vector<int64_t> pos(16);
    for (int i = 0; i < 16; ++i) pos[size_t(i)] = i;
    for (int l = 0; l < int(cfg.n_layers); ++l) {
        auto mask = build_mask(16, l, cfg);
        h = block_forward(g, w, l, h, mask, pos).h;
    }
    auto logits = lm_logits(g, w, h);
    std::vector<int32_t> targets;
    for (int i = 0; i < 32; ++i) targets.push_back(int32_t(rng.below(258)));
    auto ce = cross_entropy_rowwise(g, logits, targets);
    CHECK(ce.mean_loss->v[0] ==
          doctest::Approx(std::log(double(cfg.vocab_size_raw))).epsilon(0.05));
}

