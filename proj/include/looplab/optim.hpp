#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "looplab/backbone.hpp"
#include "looplab/tensor.hpp"

namespace looplab {

// ---------------------------------------------------------------------------
// Newton-Schulz orthogonalization: X <- aX + b(XX^T)X + c(XX^T)^2 X, run for
// exactly 5 iterations after Frobenius pre-normalization. Maps the input
// toward the nearest semi-orthogonal matrix; singular values land in a band
// near 1. Tall inputs are transposed so the Gram matrix stays small (the
// iteration commutes with transposition).
// ---------------------------------------------------------------------------
struct NewtonSchulzCoeffs {
    double a = 3.4445;
    double b = -4.7750;
    double c = 2.0315;
    double eps = 1e-7;  // pre-normalization guard; all-zero input maps to zero
    int iters = 5;
};

template <class Real>
void newton_schulz5(const Real* in, Real* out, int64_t m, int64_t n,
                    const NewtonSchulzCoeffs& co = {}) {
    using Mat = detail::EMat<Real>;
    const bool transposed = m > n;
    const int64_t p = transposed ? n : m;
    const int64_t q = transposed ? m : n;

    Mat x(p, q);
    if (transposed) {
        x = detail::CMatMap<Real>(in, m, n).transpose();
    } else {
        x = detail::CMatMap<Real>(in, m, n);
    }
    const double fro = std::sqrt(double(x.squaredNorm()));
    x *= static_cast<Real>(1.0 / (fro + co.eps));

    Mat gram(p, p), poly(p, p);
    for (int it = 0; it < co.iters; ++it) {
        gram.noalias() = x * x.transpose();
        poly.noalias() = static_cast<Real>(co.b) * gram;
        poly.noalias() += static_cast<Real>(co.c) * gram * gram;
        Mat next = static_cast<Real>(co.a) * x;
        next.noalias() += poly * x;
        x.swap(next);
    }

    detail::MatMap<Real> o(out, m, n);
    if (transposed) {
        o = x.transpose();
    } else {
        o = x;
    }
}

template <class Real>
TensorPtr<Real> newton_schulz5(const TensorPtr<Real>& grad, const NewtonSchulzCoeffs& co = {}) {
    if (grad->ndim() != 2) throw ContractError("newton_schulz5: input must be 2-D");
    auto out = make_tensor<Real>(grad->shape);
    newton_schulz5(grad->v.data(), out->v.data(), grad->shape[0], grad->shape[1], co);
    return out;
}

// ---------------------------------------------------------------------------
// Muon: SGD with momentum, with each 2-D update orthogonalized by
// newton_schulz5 before being applied. Momentum is warmed up linearly from
// 0.85 to 0.95 over the first 300 steps.
// ---------------------------------------------------------------------------
struct MuonConfig {
    double lr = 0.02;
    double momentum_start = 0.85;
    double momentum_target = 0.95;
    int64_t momentum_warmup_steps = 300;
    NewtonSchulzCoeffs ns;
};

inline double muon_momentum(int64_t step, const MuonConfig& c = {}) {
    const double f =
        c.momentum_warmup_steps <= 0
            ? 1.0
            : std::min(1.0, double(step) / double(c.momentum_warmup_steps));
    return c.momentum_start + (c.momentum_target - c.momentum_start) * f;
}

template <class Real>
class MuonOptimizer {
  public:
    explicit MuonOptimizer(std::vector<TensorPtr<Real>> params, MuonConfig cfg = {})
        : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            if (p->ndim() != 2)
                throw ContractError("muon: parameters must be 2-D, got " + shape_str(p->shape));
            p->ensure_grad();
        }
        momentum_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i)
            momentum_[i].assign(params_[i]->v.size(), Real(0));
        scratch_.resize(params_.size());
    }

    // buffer <- mu(step)*buffer + grad; param <- param - lr*lr_factor*NS5(buffer)
    void step(int64_t step_index, double lr_factor) {
        const Real mu = static_cast<Real>(muon_momentum(step_index, cfg_));
        const Real eta = static_cast<Real>(cfg_.lr * lr_factor);
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            auto& buf = momentum_[i];
            for (size_t j = 0; j < buf.size(); ++j) buf[j] = mu * buf[j] + p.g[j];
            auto& upd = scratch_[i];
            upd.resize(buf.size());
            newton_schulz5(buf.data(), upd.data(), p.shape[0], p.shape[1], cfg_.ns);
            for (size_t j = 0; j < buf.size(); ++j) p.v[j] -= eta * upd[j];
        }
    }

    const MuonConfig& config() const { return cfg_; }
    const std::vector<TensorPtr<Real>>& params() const { return params_; }
    std::vector<std::vector<Real>>& buffers() { return momentum_; }
    const std::vector<std::vector<Real>>& buffers() const { return momentum_; }

  private:
    std::vector<TensorPtr<Real>> params_;
    MuonConfig cfg_;
    std::vector<std::vector<Real>> momentum_;
    std::vector<std::vector<Real>> scratch_;
};

// ---------------------------------------------------------------------------
// AdamW for the embedding and LM head, no weight decay, with the muP-style
// sqrt(768/d_model) learning-rate scaling.
// ---------------------------------------------------------------------------
struct AdamWConfig {
    double beta1 = 0.8;
    double beta2 = 0.95;
    double eps = 1e-10;
    double lr_embed = 0.2;
    double lr_head = 0.004;
};

inline double adamw_dim_scale(int64_t d_model) { return std::sqrt(768.0 / double(d_model)); }

template <class Real>
class AdamWOptimizer {
  public:
    struct Slot {
        TensorPtr<Real> param;
        double base_lr;
        std::vector<Real> m, v;
    };

    AdamWOptimizer(std::vector<std::pair<TensorPtr<Real>, double>> params_with_lr,
                   int64_t d_model, AdamWConfig cfg = {})
        : cfg_(cfg), dim_scale_(adamw_dim_scale(d_model)) {
        for (auto& [p, lr] : params_with_lr) {
            p->ensure_grad();
            Slot s;
            s.param = p;
            s.base_lr = lr;
            s.m.assign(p->v.size(), Real(0));
            s.v.assign(p->v.size(), Real(0));
            slots_.push_back(std::move(s));
        }
    }

    // Standard bias-corrected update; step_index is 0-based.
    void step(int64_t step_index, double lr_factor) {
        const double t = double(step_index + 1);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
        for (auto& s : slots_) {
            const double lr = s.base_lr * dim_scale_ * lr_factor;
            auto& p = *s.param;
            for (size_t j = 0; j < p.v.size(); ++j) {
                const double gj = double(p.g[j]);
                const double mj = cfg_.beta1 * double(s.m[j]) + (1.0 - cfg_.beta1) * gj;
                const double vj = cfg_.beta2 * double(s.v[j]) + (1.0 - cfg_.beta2) * gj * gj;
                s.m[j] = static_cast<Real>(mj);
                s.v[j] = static_cast<Real>(vj);
                const double mhat = mj / bc1;
                const double vhat = vj / bc2;
                p.v[j] -= static_cast<Real>(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
        }
    }

    const AdamWConfig& config() const { return cfg_; }
    double dim_scale() const { return dim_scale_; }
    std::vector<Slot>& slots() { return slots_; }

  private:
    AdamWConfig cfg_;
    double dim_scale_;
    std::vector<Slot> slots_;
};

// ---------------------------------------------------------------------------
// Trapezoidal schedule without warmup: constant for the first 80% of
// training, then linear to zero at the final step.
// ---------------------------------------------------------------------------
struct ScheduleConfig {
    double flat_fraction = 0.8;
    double decay_fraction = 0.2;
    double clip_norm = 1.0;
};

inline double trapezoid_lr(int64_t step, int64_t total_steps, const ScheduleConfig& sc = {}) {
    if (total_steps <= 0) throw ContractError("trapezoid_lr: total_steps must be positive");
    if (step < 0 || step > total_steps)
        throw ContractError("trapezoid_lr: step outside [0, total_steps]");
    const double flat_end = sc.flat_fraction * double(total_steps);
    if (double(step) <= flat_end) return 1.0;
    const double decay = sc.decay_fraction * double(total_steps);
    return (double(total_steps) - double(step)) / decay;
}

// Scales all gradients by max_norm/norm when the global L2 norm exceeds
// max_norm; returns the pre-clip norm (diagnostics read it before updates).
template <class Real>
double clip_global_norm(const std::vector<TensorPtr<Real>>& params, double max_norm = 1.0) {
    double sq = 0.0;
    for (const auto& p : params)
        for (Real gv : p->g) sq += double(gv) * double(gv);
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw TrainingFault("non-finite gradient norm");
    if (norm > max_norm) {
        const Real s = static_cast<Real>(max_norm / norm);
        for (const auto& p : params)
            for (auto& gv : p->g) gv *= s;
    }
    return norm;
}

// Chinchilla-style budget arithmetic: total tokens = 20*N (N excludes the
// token embedding), steps and gradient-accumulation micro-steps by ceiling
// division.
struct TokenBudget {
    int64_t total_tokens = 0;
    int64_t total_steps = 0;
    int64_t micro_steps = 0;
};

inline TokenBudget token_budget(int64_t params_excl_embedding, int64_t batch_tokens,
                                int64_t device_batch, int64_t seq_len, int64_t n_workers = 1) {
    if (params_excl_embedding <= 0 || batch_tokens <= 0 || device_batch <= 0 || seq_len <= 0 ||
        n_workers <= 0)
        throw ContractError("token_budget: all inputs must be positive");
    TokenBudget b;
    b.total_tokens = 20 * params_excl_embedding;
    b.total_steps = (b.total_tokens + batch_tokens - 1) / batch_tokens;
    const int64_t per_micro = device_batch * seq_len * n_workers;
    b.micro_steps = (batch_tokens + per_micro - 1) / per_micro;
    return b;
}

// Routing partition: 2-D transformer-block linears go to Muon, the token
// embedding and LM head go to AdamW. Every parameter is owned by exactly one
// optimizer.
template <class Real>
struct ParamRouting {
    std::vector<TensorPtr<Real>> muon_params;
    std::vector<std::pair<TensorPtr<Real>, double>> adamw_params;  // with base lr
    std::vector<TensorPtr<Real>> all_params;
};

template <class Real>
ParamRouting<Real> route_params(const ModelWeights<Real>& w, const AdamWConfig& acfg = {}) {
    ParamRouting<Real> r;
    for (const auto& np : w.named_params()) {
        r.all_params.push_back(np.tensor);
        switch (np.cls) {
            case ParamClass::muon_block: r.muon_params.push_back(np.tensor); break;
            case ParamClass::adamw_embed: r.adamw_params.push_back({np.tensor, acfg.lr_embed}); break;
            case ParamClass::adamw_head: r.adamw_params.push_back({np.tensor, acfg.lr_head}); break;
        }
    }
    return r;
}

}  // namespace looplab
