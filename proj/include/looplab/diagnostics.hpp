#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "looplab/backbone.hpp"
#include "looplab/tensor.hpp"

namespace looplab {

// Mean over batch and positions of the per-token hidden-vector L2 norm for
// loop iteration t (1-based), i.e. (1/BT) * sum_{b,i} ||h^(t)_{L,b,i}||_2.
template <class Real>
double residual_norm(const std::vector<TensorPtr<Real>>& trace, int t) {
    if (t < 1 || t > int(trace.size()))
        throw IndexError("residual_norm: loop index " + std::to_string(t) + " outside [1, " +
                         std::to_string(trace.size()) + "]");
    const auto& h = trace[size_t(t - 1)];
    const int64_t d = h->dim(-1);
    const int64_t rows = h->numel() / d;
    double acc = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        const Real* hr = h->v.data() + r * d;
        double sq = 0.0;
        for (int64_t j = 0; j < d; ++j) sq += double(hr[j]) * hr[j];
        acc += std::sqrt(sq);
    }
    return acc / double(rows);
}

template <class Real>
std::vector<double> residual_norms(const std::vector<TensorPtr<Real>>& trace) {
    std::vector<double> out(trace.size());
    for (size_t t = 0; t < trace.size(); ++t) out[t] = residual_norm(trace, int(t) + 1);
    return out;
}

// Named parameter groups whose gradient norms can be monitored.
template <class Real>
std::map<std::string, std::vector<TensorPtr<Real>>> named_blocks(const ModelWeights<Real>& w) {
    std::map<std::string, std::vector<TensorPtr<Real>>> blocks;
    blocks["wte"] = {w.wte};
    blocks["lm_head"] = {w.lm_head};
    for (size_t l = 0; l < w.layers.size(); ++l) {
        const auto& lw = w.layers[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        blocks[p + "ffn"] = {lw.ffn_fc, lw.ffn_proj};
        if (w.cfg.attn_type == AttnType::full) {
            blocks[p + "attn"] = {lw.wq, lw.wk, lw.wv, lw.wo};
        } else {
            blocks[p + "attn"] = {lw.wq, lw.w_down, lw.w_k_up, lw.w_v_up, lw.wo};
        }
    }
    return blocks;
}

// L2 norm over all gradients of one named block: (sum ||grad||^2)^(1/2).
// Must be read before global clipping mutates the gradients.
template <class Real>
double block_grad_norm(const ModelWeights<Real>& w, const std::string& block) {
    const auto blocks = named_blocks(w);
    const auto it = blocks.find(block);
    if (it == blocks.end()) throw LookupError("unknown block \"" + block + "\"");
    double sq = 0.0;
    for (const auto& p : it->second)
        for (auto gv : p->g) sq += double(gv) * double(gv);
    return std::sqrt(sq);
}

// First FFN (the main-text diagnostic), last FFN, last attention, LM head.
// Single-layer models collapse first and last FFN into one entry.
inline std::vector<std::string> default_monitored_blocks(int64_t n_layers) {
    const std::string last = "layer" + std::to_string(n_layers - 1);
    std::vector<std::string> out = {"layer0.ffn"};
    if (n_layers > 1) out.push_back(last + ".ffn");
    out.push_back(last + ".attn");
    out.push_back("lm_head");
    return out;
}

// ---------------------------------------------------------------------------
// Collapse detection over the recorded loss history. Rules are checked in
// the order diverged > oscillating > plateau; plateau and oscillation need a
// full window of history.
// ---------------------------------------------------------------------------
enum class CollapseStatus { healthy, plateau, oscillating, diverged };

inline std::string collapse_status_name(CollapseStatus s) {
    switch (s) {
        case CollapseStatus::healthy: return "healthy";
        case CollapseStatus::plateau: return "plateau";
        case CollapseStatus::oscillating: return "oscillating";
        case CollapseStatus::diverged: return "diverged";
    }
    throw ContractError("unknown collapse status");
}

struct CollapseCriteria {
    int64_t window = 200;          // W steps
    double plateau_eps = 0.01;     // nats of required windowed improvement
    double sigma_max = 0.5;        // nats of tolerated windowed fluctuation
    double loss_max_factor = 2.0;  // divergence ceiling, relative to the initial loss
    double plateau_floor_factor = 0.75;  // a flat curve below this floor is convergence
};

inline void validate_criteria(const CollapseCriteria& c) {
    if (c.window < 2) throw ConfigError("collapse window must be >= 2");
    if (c.plateau_eps <= 0 || c.sigma_max <= 0 || c.loss_max_factor <= 0 ||
        c.plateau_floor_factor <= 0)
        throw ConfigError("collapse thresholds must be positive");
}

inline CollapseStatus detect_collapse(const std::vector<double>& history,
                                      const CollapseCriteria& c = {}) {
    validate_criteria(c);
    if (history.empty()) return CollapseStatus::healthy;
    const double init = history.front();

    for (double x : history)
        if (!std::isfinite(x)) return CollapseStatus::diverged;
    if (history.back() > c.loss_max_factor * init) return CollapseStatus::diverged;

    const int64_t n = int64_t(history.size());
    if (n < c.window) return CollapseStatus::healthy;

    const double* w = history.data() + (n - c.window);
    double mean = 0.0;
    for (int64_t i = 0; i < c.window; ++i) mean += w[i];
    mean /= double(c.window);
    double var = 0.0;
    for (int64_t i = 0; i < c.window; ++i) var += (w[i] - mean) * (w[i] - mean);
    var /= double(c.window);
    if (std::sqrt(var) > c.sigma_max) return CollapseStatus::oscillating;

    const int64_t half = c.window / 2;
    double first = 0.0, second = 0.0;
    for (int64_t i = 0; i < half; ++i) first += w[i];
    for (int64_t i = half; i < c.window; ++i) second += w[i];
    first /= double(half);
    second /= double(c.window - half);
    const double improvement = first - second;
    if (improvement < c.plateau_eps && mean > c.plateau_floor_factor * init)
        return CollapseStatus::plateau;

    return CollapseStatus::healthy;
}

// One training-step row of the metrics log.
struct MetricsRecord {
    int64_t step = 0;
    double train_loss = 0.0;
    double lr_factor = 0.0;
    double pre_clip_grad_norm = 0.0;
    std::vector<double> resnorm;                    // per loop index, length K
    std::map<std::string, double> block_grad_norms; // recorded before clipping
    int64_t tokens_seen = 0;
    bool has_val_bpb = false;
    double val_bpb = 0.0;
};

}  // namespace looplab
