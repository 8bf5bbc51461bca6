#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "looplab/backbone.hpp"
#include "looplab/tensor.hpp"

namespace looplab {

// The five recurrent wirings over the shared block stack.
//   LT      vanilla looping: h_L^(t-1) feeds layer 1 of iteration t
//   LT_I    LT plus the input embedding added at the start of each iteration
//   LT_AI   LT with attention injection at the first layer only
//   FLT     attention injection at every layer (fully looped architecture)
//   FLT_RES fully looped architecture via direct residual addition
enum class LoopVariant { LT, LT_I, LT_AI, FLT, FLT_RES };

inline LoopVariant parse_variant(const std::string& s) {
    if (s == "lt") return LoopVariant::LT;
    if (s == "lt_i") return LoopVariant::LT_I;
    if (s == "lt_ai") return LoopVariant::LT_AI;
    if (s == "flt") return LoopVariant::FLT;
    if (s == "flt_res") return LoopVariant::FLT_RES;
    throw ConfigError("variant must be one of lt, lt_i, lt_ai, flt, flt_res; got \"" + s + "\"");
}

inline std::string variant_name(LoopVariant v) {
    switch (v) {
        case LoopVariant::LT: return "lt";
        case LoopVariant::LT_I: return "lt_i";
        case LoopVariant::LT_AI: return "lt_ai";
        case LoopVariant::FLT: return "flt";
        case LoopVariant::FLT_RES: return "flt_res";
    }
    throw ContractError("unknown loop variant");
}

inline const std::vector<LoopVariant>& all_variants() {
    static const std::vector<LoopVariant> v = {LoopVariant::LT, LoopVariant::LT_I,
                                               LoopVariant::LT_AI, LoopVariant::FLT,
                                               LoopVariant::FLT_RES};
    return v;
}

// Cross-attention reuse of a layer's self-attention projections: the query is
// routed from the previous loop output, keys and values from the current
// activation (the input embedding at the first layer). No new parameters.
template <class Real>
TensorPtr<Real> attention_injection(Graph<Real>& g, const ModelWeights<Real>& w, int layer,
                                    const TensorPtr<Real>& h_prev, const TensorPtr<Real>& z_src,
                                    const BoolMask& mask, const std::vector<int64_t>& positions,
                                    AttnProbe* probe = nullptr) {
    if (!h_prev) throw StateError("attention_injection: previous loop state is required");
    return attention(g, w, layer, h_prev, z_src, mask, positions, positions, probe);
}

template <class Real>
struct LoopResult {
    TensorPtr<Real> logits;                // from the final iteration only
    std::vector<TensorPtr<Real>> trace;    // h_L^(t) for t = 1..K
};

// Runs K iterations of the shared L-layer stack over embedded tokens.
// Iteration 1 is standard self-attention for every variant; the recurrent
// wiring activates from iteration 2 on. When probes is non-null, one entry is
// appended per injected attention call (FLT / LT_AI only).
template <class Real>
LoopResult<Real> loop_forward(Graph<Real>& g, const ModelWeights<Real>& w,
                              const TokenBatch& tokens, int k_loops, LoopVariant variant,
                              std::vector<AttnProbe>* probes = nullptr) {
    if (k_loops < 1) throw ContractError("loop_forward: K must be >= 1");
    const auto& cfg = w.cfg;
    const int64_t T = tokens.time;
    const int L = int(cfg.n_layers);

    std::vector<int64_t> positions(size_t(T), 0);
    for (int64_t i = 0; i < T; ++i) positions[size_t(i)] = i;
    std::vector<BoolMask> masks;
    masks.reserve(size_t(L));
    for (int l = 0; l < L; ++l) masks.push_back(build_mask(T, l, cfg));

    auto x = embed(g, w.wte, tokens);
    TensorPtr<Real> h = x;
    LoopResult<Real> res;
    res.trace.reserve(size_t(k_loops));

    for (int t = 1; t <= k_loops; ++t) {
        TensorPtr<Real> h_prev;
        if (t >= 2) {
            h_prev = h;  // h_L^(t-1)
            if (variant == LoopVariant::LT_I) h = add(g, h, x);
        }
        for (int l = 0; l < L; ++l) {
            TensorPtr<Real> h_in = h;
            BlockAttnInputs<Real> attn_in;
            bool probed = false;
            if (t >= 2) {
                switch (variant) {
                    case LoopVariant::LT:
                    case LoopVariant::LT_I:
                        break;
                    case LoopVariant::LT_AI:
                        if (l == 0) {
                            attn_in = {AttnKind::injected, h_prev, x};
                            probed = true;
                        }
                        break;
                    case LoopVariant::FLT:
                        attn_in = {AttnKind::injected, h_prev, l == 0 ? x : nullptr};
                        probed = true;
                        break;
                    case LoopVariant::FLT_RES:
                        h_in = add(g, h, h_prev);
                        break;
                }
            }
            AttnProbe probe;
            auto blk = block_forward(g, w, l, h_in, masks[size_t(l)], positions, attn_in,
                                     probes && probed ? &probe : nullptr);
            if (probes && probed) probes->push_back(probe);
            h = blk.h;
        }
        res.trace.push_back(h);
    }
    res.logits = lm_logits(g, w, h);
    return res;
}

template <class Real>
struct SequenceLoss {
    TensorPtr<Real> loss;          // scalar mean over supervised positions
    std::vector<double> per_token; // [B*T]; entry (b, i) is the loss of predicting token i+1
    std::vector<uint8_t> valid;    // 0 for the final position of each row and ignored targets
};

// Next-token cross-entropy over the final iteration's logits (shift-by-one).
// Intermediate loop outputs receive no loss.
template <class Real>
SequenceLoss<Real> last_step_loss(Graph<Real>& g, const TensorPtr<Real>& logits,
                                  const TokenBatch& tokens, int32_t ignore_index = -1) {
    if (tokens.time < 2) throw ContractError("last_step_loss: sequence length must be >= 2");
    if (logits->ndim() != 3 || logits->shape[0] != tokens.batch || logits->shape[1] != tokens.time)
        throw DimensionError("last_step_loss: logits " + shape_str(logits->shape) +
                             " do not match tokens [" + std::to_string(tokens.batch) + "x" +
                             std::to_string(tokens.time) + "]");
    const int64_t B = tokens.batch, T = tokens.time;
    std::vector<int32_t> shifted(size_t(B * T), ignore_index);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i + 1 < T; ++i) shifted[size_t(b * T + i)] = tokens.at(b, i + 1);

    auto ce = cross_entropy_rowwise(g, logits, shifted, ignore_index);
    return {ce.mean_loss, std::move(ce.per_row), std::move(ce.valid)};
}

// ---------------------------------------------------------------------------
// Incremental greedy decoding with per-(loop, layer) KV caches. Only keys and
// values are cached; the Q-routed injection query is always local to the
// position being processed, so no extra cache entries are needed. For MLA the
// cache holds the low-rank latent and keys/values are re-expanded on demand.
// ---------------------------------------------------------------------------
template <class Real>
struct LoopState {
    const ModelWeights<Real>* weights = nullptr;
    int k_loops = 0;
    LoopVariant variant = LoopVariant::LT;
    int64_t positions_fed = 0;

    struct LayerCache {
        // full attention: k/v rows of width H_kv*d_h, position-major, with k
        // stored post-RoPE/QK-Norm. MLA: k holds latent rows of width R.
        std::vector<Real> k, v;
        int64_t rows = 0;
    };
    std::vector<std::vector<LayerCache>> kv_cache;   // [K][L]
    std::vector<std::vector<Real>> trace;            // h_L^(t) of the last fed position

    LoopState(const ModelWeights<Real>& w, int k, LoopVariant var)
        : weights(&w), k_loops(k), variant(var) {
        if (k < 1) throw ContractError("LoopState: K must be >= 1");
        kv_cache.assign(size_t(k), std::vector<LayerCache>(size_t(w.cfg.n_layers)));
        trace.assign(size_t(k), {});
    }

    int64_t cache_entries(int t, int l) const { return kv_cache[size_t(t)][size_t(l)].rows; }

    // Feeds one token at the next position; returns that position's logits.
    std::vector<Real> feed(int32_t token) {
        const auto& w = *weights;
        const auto& cfg = w.cfg;
        const int64_t d = cfg.d_model;
        const int64_t kv_width = cfg.n_kv_heads * cfg.head_dim;
        const int64_t pos = positions_fed;
        const int64_t total = pos + 1;
        Graph<Real> g(false);

        TokenBatch one{{token}, 1, 1};
        auto x = embed(g, w.wte, one);
        auto h = x;

        const std::vector<int64_t> qpos = {pos};
        for (int t = 1; t <= k_loops; ++t) {
            TensorPtr<Real> h_prev;
            if (t >= 2) {
                h_prev = h;
                if (variant == LoopVariant::LT_I) h = add(g, h, x);
            }
            for (int l = 0; l < int(cfg.n_layers); ++l) {
                TensorPtr<Real> h_in = h;
                bool inject = false;
                TensorPtr<Real> kv_override;
                if (t >= 2) {
                    switch (variant) {
                        case LoopVariant::LT:
                        case LoopVariant::LT_I:
                            break;
                        case LoopVariant::LT_AI:
                            if (l == 0) {
                                inject = true;
                                kv_override = x;
                            }
                            break;
                        case LoopVariant::FLT:
                            inject = true;
                            if (l == 0) kv_override = x;
                            break;
                        case LoopVariant::FLT_RES:
                            h_in = add(g, h, h_prev);
                            break;
                    }
                }
                auto z = rms_normalize(g, h_in);
                auto q_src = inject ? h_prev : z;
                auto kv_src = inject ? (kv_override ? kv_override : z) : z;

                auto& cache = kv_cache[size_t(t - 1)][size_t(l)];
                TensorPtr<Real> k_all, v_all;  // [1, H_kv, total, d_h]
                if (cfg.attn_type == AttnType::full) {
                    auto k_new = rms_normalize(
                        g, rope_apply(g,
                                      split_heads(g, matmul(g, kv_src, w.layers[size_t(l)].wk),
                                                  cfg.n_kv_heads),
                                      qpos, cfg.rope_base));
                    auto v_new = split_heads(g, matmul(g, kv_src, w.layers[size_t(l)].wv),
                                             cfg.n_kv_heads);
                    append_row(cache.k, k_new, kv_width);
                    append_row(cache.v, v_new, kv_width);
                    cache.rows += 1;
                    k_all = assemble_heads(g, cache.k, total, cfg.n_kv_heads, cfg.head_dim);
                    v_all = assemble_heads(g, cache.v, total, cfg.n_kv_heads, cfg.head_dim);
                } else {
                    auto c_new = rms_normalize(g, matmul(g, kv_src, w.layers[size_t(l)].w_down));
                    cache.k.insert(cache.k.end(), c_new->v.begin(), c_new->v.end());
                    cache.rows += 1;
                    auto lat = make_tensor<Real>({1, total, cfg.mla_rank},
                                                 std::vector<Real>(cache.k));
                    std::vector<int64_t> all_pos(size_t(total), 0);
                    for (int64_t i = 0; i < total; ++i) all_pos[size_t(i)] = i;
                    k_all = rms_normalize(
                        g, rope_apply(g,
                                      split_heads(g, matmul(g, lat, w.layers[size_t(l)].w_k_up),
                                                  cfg.n_kv_heads),
                                      all_pos, cfg.rope_base));
                    v_all = split_heads(g, matmul(g, lat, w.layers[size_t(l)].w_v_up),
                                        cfg.n_kv_heads);
                }

                auto q = rms_normalize(
                    g, rope_apply(g,
                                  split_heads(g, matmul(g, q_src, w.layers[size_t(l)].wq),
                                              cfg.n_q_heads),
                                  qpos, cfg.rope_base));

                const int64_t group = cfg.n_q_heads / cfg.n_kv_heads;
                auto kq = repeat_kv_heads(g, k_all, group);
                auto vq = repeat_kv_heads(g, v_all, group);

                BoolMask row_mask;
                row_mask.shape = {total};
                row_mask.allow.assign(size_t(total), 0);
                for (int64_t j = 0; j < total; ++j)
                    row_mask.allow[size_t(j)] = mask_allows(cfg, l, pos, j) ? 1 : 0;

                auto scores = scale(g, bmm_nt(g, q, kq),
                                    static_cast<Real>(1.0 / std::sqrt(double(cfg.head_dim))));
                auto probs = softmax_rows(g, scores, &row_mask);
                auto mixed = bmm(g, probs, vq);
                auto a = matmul(g, merge_heads(g, mixed), w.layers[size_t(l)].wo);

                auto h_mid = add(g, h_in, a);
                h = add(g, h_mid, ffn(g, w, l, rms_normalize(g, h_mid)));
            }
            trace[size_t(t - 1)] = h->v;
        }
        positions_fed += 1;
        auto logits = lm_logits(g, w, h);
        return logits->v;
    }

  private:
    static void append_row(std::vector<Real>& dst, const TensorPtr<Real>& heads, int64_t width) {
        // heads is [1, H_kv, 1, d_h]; contiguous equals the position row
        dst.insert(dst.end(), heads->v.begin(), heads->v.begin() + width);
    }

    // cached rows are position-major [total, H_kv*d_h]; reshape to
    // [1, H_kv, total, d_h]
    static TensorPtr<Real> assemble_heads(Graph<Real>& g, const std::vector<Real>& rows,
                                          int64_t total, int64_t n_heads, int64_t dh) {
        auto flat = make_tensor<Real>({1, total, n_heads * dh},
                                      std::vector<Real>(rows.begin(), rows.end()));
        return split_heads(g, flat, n_heads);
    }
};

template <class Real>
int32_t argmax_lowest(const std::vector<Real>& v) {
    int32_t best = 0;
    for (size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = int32_t(i);
    return best;
}

// Greedy autoregressive decoding; produces the same tokens as recomputing the
// full forward pass at every step.
template <class Real>
std::vector<int32_t> incremental_decode(const ModelWeights<Real>& w,
                                        const std::vector<int32_t>& prompt, int k_loops,
                                        LoopVariant variant, int n_new) {
    if (prompt.empty()) throw ContractError("incremental_decode: prompt must be nonempty");
    if (n_new < 0) throw ContractError("incremental_decode: n_new must be >= 0");
    LoopState<Real> state(w, k_loops, variant);
    std::vector<Real> logits;
    for (int32_t tok : prompt) logits = state.feed(tok);
    std::vector<int32_t> out;
    out.reserve(size_t(n_new));
    for (int i = 0; i < n_new; ++i) {
        const int32_t next = argmax_lowest(logits);
        out.push_back(next);
        logits = state.feed(next);
    }
    return out;
}

// Cached elements per token per layer (per loop iteration): MLA stores the
// rank-R latent instead of expanded keys and values.
inline int64_t kv_cache_elems_per_token_per_layer(const BackboneConfig& cfg) {
    if (cfg.attn_type == AttnType::mla) return cfg.mla_rank;
    return 2 * cfg.n_kv_heads * cfg.head_dim;
}

}  // namespace looplab
