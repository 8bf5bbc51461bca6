#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "looplab/rng.hpp"
#include "looplab/tensor.hpp"

namespace looplab {

enum class AttnType { full, mla };

inline AttnType parse_attn_type(const std::string& s) {
    if (s == "full") return AttnType::full;
    if (s == "mla") return AttnType::mla;
    throw ConfigError("attn_type must be \"full\" or \"mla\", got \"" + s + "\"");
}

inline std::string attn_type_name(AttnType a) { return a == AttnType::full ? "full" : "mla"; }

struct BackboneConfig {
    int depth = 0;
    int64_t d_model = 0;
    int64_t n_q_heads = 0;
    int64_t n_kv_heads = 0;
    int64_t head_dim = 0;
    int64_t n_layers = 0;
    int64_t vocab_size_raw = 0;
    int64_t vocab_size = 0;  // padded up to a multiple of 64
    int64_t seq_len = 0;
    double rope_base = 10000.0;
    AttnType attn_type = AttnType::full;
    int64_t mla_rank = 128;
    std::string window_pattern = "L";
    double softcap_scale = 15.0;
    int64_t ffn_expansion = 4;
};

inline void validate_config(const BackboneConfig& c) {
    if (c.n_layers < 1 || c.d_model < 1 || c.seq_len < 1)
        throw ConfigError("layers, d_model and seq_len must be positive");
    if (c.n_q_heads < 1 || c.n_kv_heads < 1) throw ConfigError("head counts must be positive");
    if (c.n_q_heads % c.n_kv_heads != 0)
        throw ConfigError("n_kv_heads=" + std::to_string(c.n_kv_heads) +
                          " must divide n_q_heads=" + std::to_string(c.n_q_heads));
    if (c.head_dim * c.n_q_heads != c.d_model)
        throw ConfigError("head_dim * n_q_heads must equal d_model");
    if (c.head_dim % 2 != 0) throw ConfigError("head_dim must be even for rotary embeddings");
    if (c.vocab_size % 64 != 0 || c.vocab_size < c.vocab_size_raw)
        throw ConfigError("vocab_size must be a multiple of 64 and >= vocab_size_raw");
    if (c.window_pattern.empty()) throw ConfigError("window_pattern must be nonempty");
    for (char ch : c.window_pattern)
        if (ch != 'L' && ch != 'S')
            throw ConfigError("window_pattern may contain only L and S, got \"" +
                              c.window_pattern + "\"");
    if (c.attn_type == AttnType::mla && c.mla_rank < 1)
        throw ConfigError("mla_rank must be positive");
    if (c.ffn_expansion < 1) throw ConfigError("ffn_expansion must be positive");
}

struct DeriveOptions {
    int64_t seq_len = 1024;
    int64_t h_kv = 0;  // 0 selects h_kv = n_q_heads (standard MHA)
    AttnType attn_type = AttnType::full;
    int64_t mla_rank = 128;
    std::string window_pattern = "L";
};

// Single-knob sizing: d_model = 64*depth, H_q = ceil(d_model/128), L = depth.
inline BackboneConfig derive_dims(int depth, int64_t vocab_size_raw,
                                  const DeriveOptions& opt = {}) {
    if (depth < 1) throw ConfigError("depth must be >= 1");
    if (vocab_size_raw < 1) throw ConfigError("vocab_size_raw must be >= 1");
    BackboneConfig c;
    c.depth = depth;
    c.d_model = 64 * int64_t(depth);
    c.n_q_heads = (c.d_model + 127) / 128;
    if (c.d_model % c.n_q_heads != 0)
        throw ConfigError("depth " + std::to_string(depth) +
                          " gives non-integral per-head width " + std::to_string(c.d_model) + "/" +
                          std::to_string(c.n_q_heads));
    c.head_dim = c.d_model / c.n_q_heads;
    c.n_kv_heads = opt.h_kv == 0 ? c.n_q_heads : opt.h_kv;
    c.n_layers = depth;
    c.vocab_size_raw = vocab_size_raw;
    c.vocab_size = (vocab_size_raw + 63) / 64 * 64;
    c.seq_len = opt.seq_len;
    c.attn_type = opt.attn_type;
    c.mla_rank = opt.mla_rank;
    c.window_pattern = opt.window_pattern;
    validate_config(c);
    return c;
}

enum class ParamClass { muon_block, adamw_embed, adamw_head };

template <class Real>
struct NamedParam {
    std::string name;
    TensorPtr<Real> tensor;
    ParamClass cls;
};

template <class Real>
struct LayerWeights {
    TensorPtr<Real> wq, wk, wv, wo;              // wk/wv used for attn_type=full
    TensorPtr<Real> w_down, w_k_up, w_v_up;      // used for attn_type=mla
    TensorPtr<Real> ffn_fc, ffn_proj;
};

template <class Real>
struct ModelWeights {
    BackboneConfig cfg;
    TensorPtr<Real> wte;      // [V, d]
    TensorPtr<Real> lm_head;  // [d, V], untied from wte
    std::vector<LayerWeights<Real>> layers;

    std::vector<NamedParam<Real>> named_params() const {
        std::vector<NamedParam<Real>> out;
        out.push_back({"wte", wte, ParamClass::adamw_embed});
        out.push_back({"lm_head", lm_head, ParamClass::adamw_head});
        for (size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            const auto& lw = layers[l];
            out.push_back({p + "attn.wq", lw.wq, ParamClass::muon_block});
            if (cfg.attn_type == AttnType::full) {
                out.push_back({p + "attn.wk", lw.wk, ParamClass::muon_block});
                out.push_back({p + "attn.wv", lw.wv, ParamClass::muon_block});
            } else {
                out.push_back({p + "attn.w_down", lw.w_down, ParamClass::muon_block});
                out.push_back({p + "attn.w_k_up", lw.w_k_up, ParamClass::muon_block});
                out.push_back({p + "attn.w_v_up", lw.w_v_up, ParamClass::muon_block});
            }
            out.push_back({p + "attn.wo", lw.wo, ParamClass::muon_block});
            out.push_back({p + "ffn.fc", lw.ffn_fc, ParamClass::muon_block});
            out.push_back({p + "ffn.proj", lw.ffn_proj, ParamClass::muon_block});
        }
        return out;
    }

    int64_t total_param_elems() const {
        int64_t n = 0;
        for (const auto& p : named_params()) n += p.tensor->numel();
        return n;
    }
};

namespace detail {

template <class Real>
TensorPtr<Real> init_uniform(Rng& rng, Shape shape, double s) {
    auto t = make_tensor<Real>(std::move(shape), true);
    for (auto& x : t->v) x = static_cast<Real>(rng.uniform(-s, s));
    return t;
}

template <class Real>
TensorPtr<Real> init_normal(Rng& rng, Shape shape, double sigma) {
    auto t = make_tensor<Real>(std::move(shape), true);
    for (auto& x : t->v) x = static_cast<Real>(rng.normal() * sigma);
    return t;
}

}  // namespace detail

// wte ~ N(0,1); lm_head ~ N(0, 0.001^2); input projections ~ U(-s, s) with
// s = sqrt(3/d_model); output projections (wo, ffn_proj) start at exactly 0 so
// every block is the identity on the residual stream at initialization.
template <class Real>
ModelWeights<Real> init_weights(const BackboneConfig& cfg, uint64_t seed) {
    validate_config(cfg);
    ModelWeights<Real> w;
    w.cfg = cfg;
    Rng rng(seed);
    const double s = std::sqrt(3.0 / double(cfg.d_model));
    const int64_t d = cfg.d_model;
    const int64_t kv_width = cfg.n_kv_heads * cfg.head_dim;

    w.wte = detail::init_normal<Real>(rng, {cfg.vocab_size, d}, 1.0);
    w.lm_head = detail::init_normal<Real>(rng, {d, cfg.vocab_size}, 0.001);
    w.layers.resize(cfg.n_layers);
    for (auto& lw : w.layers) {
        lw.wq = detail::init_uniform<Real>(rng, {d, cfg.n_q_heads * cfg.head_dim}, s);
        if (cfg.attn_type == AttnType::full) {
            lw.wk = detail::init_uniform<Real>(rng, {d, kv_width}, s);
            lw.wv = detail::init_uniform<Real>(rng, {d, kv_width}, s);
        } else {
            lw.w_down = detail::init_uniform<Real>(rng, {d, cfg.mla_rank}, s);
            lw.w_k_up = detail::init_uniform<Real>(rng, {cfg.mla_rank, kv_width}, s);
            lw.w_v_up = detail::init_uniform<Real>(rng, {cfg.mla_rank, kv_width}, s);
        }
        lw.wo = make_tensor<Real>({d, d}, true);
        lw.ffn_fc = detail::init_uniform<Real>(rng, {d, cfg.ffn_expansion * d}, s);
        lw.ffn_proj = make_tensor<Real>({cfg.ffn_expansion * d, d}, true);
    }
    return w;
}

struct ParamCounts {
    int64_t total = 0;
    int64_t excl_embedding = 0;  // total minus the token embedding
    int64_t per_block = 0;
};

// Closed-form counts; must agree exactly with enumeration of ModelWeights.
inline ParamCounts count_params(const BackboneConfig& cfg) {
    const int64_t d = cfg.d_model;
    const int64_t kv_width = cfg.n_kv_heads * cfg.head_dim;
    int64_t attn;
    if (cfg.attn_type == AttnType::full) {
        attn = d * d + 2 * d * kv_width + d * d;  // (2 + 2r) d^2 with r = H_kv/H_q
    } else {
        attn = d * d + d * cfg.mla_rank + 2 * cfg.mla_rank * kv_width + d * d;
    }
    ParamCounts pc;
    pc.per_block = attn + 2 * cfg.ffn_expansion * d * d;
    pc.total = 2 * cfg.vocab_size * d + cfg.n_layers * pc.per_block;
    pc.excl_embedding = pc.total - cfg.vocab_size * d;
    return pc;
}

// ---------------------------------------------------------------------------
// Rotary positional embedding: rotate adjacent pairs (2i, 2i+1) of each
// head vector by angle pos * base^(-2i/d_h). Position 0 is the identity and
// every rotation preserves the vector norm.
// ---------------------------------------------------------------------------
template <class Real>
TensorPtr<Real> rope_apply(Graph<Real>& g, const TensorPtr<Real>& x,
                           const std::vector<int64_t>& positions, double base = 10000.0) {
    if (x->ndim() < 2) throw DimensionError("rope_apply: need [..., T, d_h]");
    const int64_t dh = x->dim(-1);
    const int64_t T = x->dim(-2);
    if (dh % 2 != 0) throw ConfigError("rope_apply: head width must be even");
    if (static_cast<int64_t>(positions.size()) != T)
        throw DimensionError("rope_apply: positions length must equal T");

    const int64_t half = dh / 2;
    auto cs = std::make_shared<std::vector<Real>>(2 * T * half);
    for (int64_t t = 0; t < T; ++t)
        for (int64_t i = 0; i < half; ++i) {
            const double theta =
                double(positions[t]) * std::pow(base, -2.0 * double(i) / double(dh));
            (*cs)[(t * half + i) * 2] = static_cast<Real>(std::cos(theta));
            (*cs)[(t * half + i) * 2 + 1] = static_cast<Real>(std::sin(theta));
        }

    const int64_t groups = x->numel() / (T * dh);
    auto out = detail::op_output(g, x->shape, x->requires_grad);
    for (int64_t gi = 0; gi < groups; ++gi)
        for (int64_t t = 0; t < T; ++t) {
            const Real* xr = x->v.data() + (gi * T + t) * dh;
            Real* yr = out->v.data() + (gi * T + t) * dh;
            for (int64_t i = 0; i < half; ++i) {
                const Real c = (*cs)[(t * half + i) * 2];
                const Real s = (*cs)[(t * half + i) * 2 + 1];
                yr[2 * i] = xr[2 * i] * c - xr[2 * i + 1] * s;
                yr[2 * i + 1] = xr[2 * i] * s + xr[2 * i + 1] * c;
            }
        }
    if (out->requires_grad) {
        g.record([x, out, cs, groups, T, dh, half] {
            for (int64_t gi = 0; gi < groups; ++gi)
                for (int64_t t = 0; t < T; ++t) {
                    Real* dx = x->g.data() + (gi * T + t) * dh;
                    const Real* dy = out->g.data() + (gi * T + t) * dh;
                    for (int64_t i = 0; i < half; ++i) {
                        const Real c = (*cs)[(t * half + i) * 2];
                        const Real s = (*cs)[(t * half + i) * 2 + 1];
                        dx[2 * i] += dy[2 * i] * c + dy[2 * i + 1] * s;
                        dx[2 * i + 1] += -dy[2 * i] * s + dy[2 * i + 1] * c;
                    }
                }
        });
    }
    return out;
}

// Parameter-free RMS normalization of each per-head query/key vector,
// applied after RoPE.
template <class Real>
std::pair<TensorPtr<Real>, TensorPtr<Real>> qk_norm(Graph<Real>& g, const TensorPtr<Real>& q_heads,
                                                    const TensorPtr<Real>& k_heads) {
    return {rms_normalize(g, q_heads), rms_normalize(g, k_heads)};
}

inline char window_pattern_char(const BackboneConfig& cfg, int layer) {
    return cfg.window_pattern[size_t(layer) % cfg.window_pattern.size()];
}

// A layer attends with full causal context when its tiled pattern character
// is L, or always for the last layer.
inline bool layer_is_full_context(const BackboneConfig& cfg, int layer) {
    return window_pattern_char(cfg, layer) == 'L' || layer == int(cfg.n_layers) - 1;
}

// floor(seq_len/4), clamped so a position can always attend to itself. The
// window derives from the configured context length, not the instantaneous
// sequence length, so cached incremental decoding sees the same geometry as a
// full recompute.
inline int64_t sliding_window_size(const BackboneConfig& cfg) {
    return std::max<int64_t>(1, cfg.seq_len / 4);
}

inline bool mask_allows(const BackboneConfig& cfg, int layer, int64_t i, int64_t j) {
    if (j > i) return false;
    if (layer_is_full_context(cfg, layer)) return true;
    return i - j < sliding_window_size(cfg);
}

// Boolean [T, T] attention mask for one layer; entry (i, j) allows query
// position i to attend to key position j.
inline BoolMask build_mask(int64_t T, int layer, const BackboneConfig& cfg) {
    BoolMask m;
    m.shape = {T, T};
    m.allow.assign(size_t(T * T), 0);
    for (int64_t i = 0; i < T; ++i)
        for (int64_t j = 0; j <= i; ++j)
            m.allow[i * T + j] = mask_allows(cfg, layer, i, j) ? 1 : 0;
    return m;
}

// Row norms over the last dim; used for the injection-boundedness probe.
template <class Real>
double max_row_norm(const TensorPtr<Real>& x) {
    const int64_t d = x->dim(-1);
    const int64_t rows = x->numel() / d;
    double best = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        const Real* xr = x->v.data() + r * d;
        double s = 0.0;
        for (int64_t j = 0; j < d; ++j) s += double(xr[j]) * xr[j];
        best = std::max(best, std::sqrt(s));
    }
    return best;
}

struct AttnProbe {
    double max_value_row_norm = 0.0;  // over per-head value rows of the kv source
    double max_mixed_row_norm = 0.0;  // over per-head pre-W_O output rows
};

// ---------------------------------------------------------------------------
// Scaled dot-product attention with RoPE, QK-Norm, GQA broadcast and the
// optional MLA low-rank KV path. Queries come from q_src, keys/values from
// kv_src; self-attention passes the same tensor for both.
// ---------------------------------------------------------------------------
template <class Real>
TensorPtr<Real> attention(Graph<Real>& g, const ModelWeights<Real>& w, int layer,
                          const TensorPtr<Real>& q_src, const TensorPtr<Real>& kv_src,
                          const BoolMask& mask, const std::vector<int64_t>& q_positions,
                          const std::vector<int64_t>& kv_positions, AttnProbe* probe = nullptr) {
    const auto& cfg = w.cfg;
    const auto& lw = w.layers[size_t(layer)];
    if (q_src->ndim() != 3 || kv_src->ndim() != 3 || q_src->dim(-1) != cfg.d_model ||
        kv_src->dim(-1) != cfg.d_model || q_src->shape[0] != kv_src->shape[0])
        throw DimensionError("attention: need [B, T, d] query and kv sources");

    auto q = split_heads(g, matmul(g, q_src, lw.wq), cfg.n_q_heads);
    TensorPtr<Real> k, v;
    if (cfg.attn_type == AttnType::full) {
        k = split_heads(g, matmul(g, kv_src, lw.wk), cfg.n_kv_heads);
        v = split_heads(g, matmul(g, kv_src, lw.wv), cfg.n_kv_heads);
    } else {
        // latent bottleneck: the RMSNorm on c_kv decouples down/up projections
        auto c_kv = rms_normalize(g, matmul(g, kv_src, lw.w_down));
        k = split_heads(g, matmul(g, c_kv, lw.w_k_up), cfg.n_kv_heads);
        v = split_heads(g, matmul(g, c_kv, lw.w_v_up), cfg.n_kv_heads);
    }

    q = rope_apply(g, q, q_positions, cfg.rope_base);
    k = rope_apply(g, k, kv_positions, cfg.rope_base);
    std::tie(q, k) = qk_norm(g, q, k);

    const int64_t group = cfg.n_q_heads / cfg.n_kv_heads;
    auto kq = repeat_kv_heads(g, k, group);
    auto vq = repeat_kv_heads(g, v, group);

    auto scores = scale(g, bmm_nt(g, q, kq), static_cast<Real>(1.0 / std::sqrt(double(cfg.head_dim))));
    auto probs = softmax_rows(g, scores, &mask);
    auto mixed = bmm(g, probs, vq);

    if (probe) {
        probe->max_value_row_norm = std::max(probe->max_value_row_norm, max_row_norm(vq));
        probe->max_mixed_row_norm = std::max(probe->max_mixed_row_norm, max_row_norm(mixed));
    }
    return matmul(g, merge_heads(g, mixed), lw.wo);
}

template <class Real>
TensorPtr<Real> ffn(Graph<Real>& g, const ModelWeights<Real>& w, int layer,
                    const TensorPtr<Real>& x) {
    const auto& lw = w.layers[size_t(layer)];
    return matmul(g, relu_squared(g, matmul(g, x, lw.ffn_fc)), lw.ffn_proj);
}

template <class Real>
struct BlockResult {
    TensorPtr<Real> h;  // block output
    TensorPtr<Real> z;  // normalized pre-attention activation
    TensorPtr<Real> a;  // attention branch output
};

enum class AttnKind { self_attention, injected };

template <class Real>
struct BlockAttnInputs {
    AttnKind kind = AttnKind::self_attention;
    TensorPtr<Real> h_prev;       // injected: query source (previous loop output)
    TensorPtr<Real> kv_override;  // injected: kv source override (input embedding at layer 0)
};

// Pre-norm residual block: z = norm(h); h_mid = h + attn; out = h_mid +
// ffn(norm(h_mid)). With injected attention the query comes from h_prev and
// the keys/values from kv_override (if set) or z.
template <class Real>
BlockResult<Real> block_forward(Graph<Real>& g, const ModelWeights<Real>& w, int layer,
                                const TensorPtr<Real>& h_in, const BoolMask& mask,
                                const std::vector<int64_t>& positions,
                                const BlockAttnInputs<Real>& attn_in = {},
                                AttnProbe* probe = nullptr) {
    if (layer < 0 || layer >= int(w.cfg.n_layers))
        throw IndexError("block_forward: layer " + std::to_string(layer) + " out of range");
    auto z = rms_normalize(g, h_in);
    TensorPtr<Real> q_src = z, kv_src = z;
    if (attn_in.kind == AttnKind::injected) {
        if (!attn_in.h_prev)
            throw StateError("block_forward: injected attention requires the previous loop state");
        q_src = attn_in.h_prev;
        if (attn_in.kv_override) kv_src = attn_in.kv_override;
    }
    auto a = attention(g, w, layer, q_src, kv_src, mask, positions, positions, probe);
    auto h_mid = add(g, h_in, a);
    auto h_out = add(g, h_mid, ffn(g, w, layer, rms_normalize(g, h_mid)));
    return {h_out, z, a};
}

// Final normalization, untied head, and 15*tanh(l/15) soft cap.
template <class Real>
TensorPtr<Real> lm_logits(Graph<Real>& g, const ModelWeights<Real>& w,
                          const TensorPtr<Real>& h_final) {
    auto raw = matmul(g, rms_normalize(g, h_final), w.lm_head);
    return tanh_softcap(g, raw, static_cast<Real>(w.cfg.softcap_scale));
}

}  // namespace looplab
