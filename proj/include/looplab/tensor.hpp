#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "looplab/errors.hpp"

namespace looplab {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor. Values are immutable once produced by an op; only
// the grad slot is written afterwards (by the backward pass or an optimizer).
template <class Real>
struct Tensor {
    Shape shape;
    std::vector<Real> v;  // row-major elements
    std::vector<Real> g;  // same-length gradient, allocated iff requires_grad
    bool requires_grad = false;

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int64_t ndim() const { return static_cast<int64_t>(shape.size()); }
    int64_t dim(int i) const { return shape[i < 0 ? shape.size() + i : static_cast<size_t>(i)]; }

    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), Real(0));
    }
    void zero_grad() { std::fill(g.begin(), g.end(), Real(0)); }

    bool all_finite() const {
        for (Real x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    Real& at(std::initializer_list<int64_t> idx) {
        int64_t flat = 0;
        size_t k = 0;
        for (int64_t i : idx) flat = flat * shape[k++] + i;
        return v[flat];
    }
    Real at(std::initializer_list<int64_t> idx) const {
        return const_cast<Tensor*>(this)->at(idx);
    }
};

template <class Real>
using TensorPtr = std::shared_ptr<Tensor<Real>>;

template <class Real>
TensorPtr<Real> make_tensor(Shape shape, bool requires_grad = false) {
    for (int64_t d : shape)
        if (d <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    auto t = std::make_shared<Tensor<Real>>();
    t->shape = std::move(shape);
    t->v.assign(static_cast<size_t>(shape_numel(t->shape)), Real(0));
    t->requires_grad = requires_grad;
    if (requires_grad) t->ensure_grad();
    return t;
}

template <class Real>
TensorPtr<Real> make_tensor(Shape shape, std::vector<Real> values, bool requires_grad = false) {
    auto t = make_tensor<Real>(std::move(shape), requires_grad);
    if (static_cast<int64_t>(values.size()) != t->numel())
        throw DimensionError("value count does not match shape " + shape_str(t->shape));
    t->v = std::move(values);
    return t;
}

template <class Real>
TensorPtr<Real> make_scalar(Real value, bool requires_grad = false) {
    return make_tensor<Real>({1}, {value}, requires_grad);
}

// Boolean mask, plain data (not differentiable). allow[i] != 0 means "keep".
struct BoolMask {
    Shape shape;
    std::vector<uint8_t> allow;

    int64_t numel() const { return static_cast<int64_t>(allow.size()); }
    static BoolMask make(Shape shape) {
        BoolMask m;
        m.shape = std::move(shape);
        m.allow.assign(static_cast<size_t>(shape_numel(m.shape)), 1);
        return m;
    }
};

// Tape of executed operations. Append order is execution order, which is a
// valid topological order, so the backward sweep is a single reverse pass
// visiting every recorded op exactly once.
template <class Real>
class Graph {
  public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    void record(std::function<void()> backward_fn) {
        if (recording_) nodes_.push_back(std::move(backward_fn));
    }

    // Populates grad slots of every requires_grad tensor reachable from root
    // with d(root)/d(tensor). root must be a scalar produced on this graph.
    void backward(const TensorPtr<Real>& root) {
        if (!root || root->numel() != 1)
            throw ContractError("backward: root must be a scalar tensor");
        if (!root->requires_grad)
            throw ContractError("backward: root does not require grad");
        root->ensure_grad();
        root->g[0] = Real(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    void clear() { nodes_.clear(); }
    size_t node_count() const { return nodes_.size(); }

  private:
    bool recording_;
    std::vector<std::function<void()>> nodes_;
};

namespace detail {

template <class Real>
using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using MatMap = Eigen::Map<EMat<Real>>;
template <class Real>
using CMatMap = Eigen::Map<const EMat<Real>>;

template <class Real>
TensorPtr<Real> op_output(Graph<Real>& g, Shape shape, bool inputs_need_grad) {
    return make_tensor<Real>(std::move(shape), inputs_need_grad && g.recording());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul: a[..., m, k] * b[k, n] -> [..., m, n]. Leading dims of a are
// collapsed into rows; b is strictly 2-D (the weight-matrix case).
// ---------------------------------------------------------------------------
template <class Real>
TensorPtr<Real> matmul(Graph<Real>& g, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    if (a->ndim() < 1 || b->ndim() != 2)
        throw DimensionError("matmul: need a[..., m, k] and b[k, n], got " + shape_str(a->shape) +
                             " and " + shape_str(b->shape));
    const int64_t k = a->dim(-1);
    if (k != b->shape[0])
        throw DimensionError("matmul: inner extents mismatch, " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    const int64_t m = a->numel() / k;
    const int64_t n = b->shape[1];
    Shape out_shape(a->shape.begin(), a->shape.end() - 1);
    out_shape.push_back(n);

    auto out = detail::op_output(g, std::move(out_shape), a->requires_grad || b->requires_grad);
    detail::CMatMap<Real> A(a->v.data(), m, k);
    detail::CMatMap<Real> B(b->v.data(), k, n);
    detail::MatMap<Real> C(out->v.data(), m, n);
    C.noalias() = A * B;

    if (out->requires_grad) {
        g.record([a, b, out, m, k, n] {
            detail::CMatMap<Real> dC(out->g.data(), m, n);
            if (a->requires_grad) {
                detail::MatMap<Real> dA(a->g.data(), m, k);
                detail::CMatMap<Real> B2(b->v.data(), k, n);
                dA.noalias() += dC * B2.transpose();
            }
            if (b->requires_grad) {
                detail::MatMap<Real> dB(b->g.data(), k, n);
                detail::CMatMap<Real> A2(a->v.data(), m, k);
                dB.noalias() += A2.transpose() * dC;
            }
        });
    }
    return out;
}

namespace detail {

template <class Real>
void check_bmm_shapes(const TensorPtr<Real>& a, const TensorPtr<Real>& b, bool b_transposed) {
    if (a->ndim() < 2 || a->ndim() != b->ndim())
        throw DimensionError("bmm: rank mismatch " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    for (int i = 0; i + 2 < a->ndim(); ++i)
        if (a->shape[i] != b->shape[i])
            throw DimensionError("bmm: leading dims differ, " + shape_str(a->shape) + " vs " +
                                 shape_str(b->shape));
    const int64_t ka = a->dim(-1);
    const int64_t kb = b_transposed ? b->dim(-1) : b->dim(-2);
    if (ka != kb)
        throw DimensionError("bmm: inner extents mismatch, " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
}

}  // namespace detail

// Batched matmul over matching leading dims: a[D..., m, k] * b[D..., k, n].
template <class Real>
TensorPtr<Real> bmm(Graph<Real>& g, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    detail::check_bmm_shapes(a, b, false);
    const int64_t m = a->dim(-2), k = a->dim(-1), n = b->dim(-1);
    const int64_t nb = a->numel() / (m * k);
    Shape out_shape = a->shape;
    out_shape.back() = n;
    auto out = detail::op_output(g, std::move(out_shape), a->requires_grad || b->requires_grad);

    for (int64_t i = 0; i < nb; ++i) {
        detail::CMatMap<Real> A(a->v.data() + i * m * k, m, k);
        detail::CMatMap<Real> B(b->v.data() + i * k * n, k, n);
        detail::MatMap<Real> C(out->v.data() + i * m * n, m, n);
        C.noalias() = A * B;
    }
    if (out->requires_grad) {
        g.record([a, b, out, m, k, n, nb] {
            for (int64_t i = 0; i < nb; ++i) {
                detail::CMatMap<Real> dC(out->g.data() + i * m * n, m, n);
                if (a->requires_grad) {
                    detail::MatMap<Real> dA(a->g.data() + i * m * k, m, k);
                    detail::CMatMap<Real> B2(b->v.data() + i * k * n, k, n);
                    dA.noalias() += dC * B2.transpose();
                }
                if (b->requires_grad) {
                    detail::MatMap<Real> dB(b->g.data() + i * k * n, k, n);
                    detail::CMatMap<Real> A2(a->v.data() + i * m * k, m, k);
                    dB.noalias() += A2.transpose() * dC;
                }
            }
        });
    }
    return out;
}

// a[D..., m, k] * b[D..., n, k]^T -> [D..., m, n]  (the Q.K^T pattern)
template <class Real>
TensorPtr<Real> bmm_nt(Graph<Real>& g, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    detail::check_bmm_shapes(a, b, true);
    const int64_t m = a->dim(-2), k = a->dim(-1), n = b->dim(-2);
    const int64_t nb = a->numel() / (m * k);
    Shape out_shape = a->shape;
    out_shape.back() = n;
    auto out = detail::op_output(g, std::move(out_shape), a->requires_grad || b->requires_grad);

    for (int64_t i = 0; i < nb; ++i) {
        detail::CMatMap<Real> A(a->v.data() + i * m * k, m, k);
        detail::CMatMap<Real> B(b->v.data() + i * n * k, n, k);
        detail::MatMap<Real> C(out->v.data() + i * m * n, m, n);
        C.noalias() = A * B.transpose();
    }
    if (out->requires_grad) {
        g.record([a, b, out, m, k, n, nb] {
            for (int64_t i = 0; i < nb; ++i) {
                detail::CMatMap<Real> dC(out->g.data() + i * m * n, m, n);
                if (a->requires_grad) {
                    detail::MatMap<Real> dA(a->g.data() + i * m * k, m, k);
                    detail::CMatMap<Real> B2(b->v.data() + i * n * k, n, k);
                    dA.noalias() += dC * B2;
                }
                if (b->requires_grad) {
                    detail::MatMap<Real> dB(b->g.data() + i * n * k, n, k);
                    detail::CMatMap<Real> A2(a->v.data() + i * m * k, m, k);
                    dB.noalias() += dC.transpose() * A2;
                }
            }
        });
    }
    return out;
}

template <class Real>
TensorPtr<Real> add(Graph<Real>& g, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    if (a->shape != b->shape)
        throw DimensionError("add: shape mismatch " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    auto out = detail::op_output(g, a->shape, a->requires_grad || b->requires_grad);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->v[i] = a->v[i] + b->v[i];
    if (out->requires_grad) {
        g.record([a, b, out, n] {
            if (a->requires_grad)
                for (int64_t i = 0; i < n; ++i) a->g[i] += out->g[i];
            if (b->requires_grad)
                for (int64_t i = 0; i < n; ++i) b->g[i] += out->g[i];
        });
    }
    return out;
}

template <class Real>
TensorPtr<Real> mul(Graph<Real>& g, const TensorPtr<Real>& a, const TensorPtr<Real>& b) {
    if (a->shape != b->shape)
        throw DimensionError("mul: shape mismatch " + shape_str(a->shape) + " vs " +
                             shape_str(b->shape));
    auto out = detail::op_output(g, a->shape, a->requires_grad || b->requires_grad);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->v[i] = a->v[i] * b->v[i];
    if (out->requires_grad) {
        g.record([a, b, out, n] {
            if (a->requires_grad)
                for (int64_t i = 0; i < n; ++i) a->g[i] += out->g[i] * b->v[i];
            if (b->requires_grad)
                for (int64_t i = 0; i < n; ++i) b->g[i] += out->g[i] * a->v[i];
        });
    }
    return out;
}

template <class Real>
TensorPtr<Real> scale(Graph<Real>& g, const TensorPtr<Real>& a, Real c) {
    auto out = detail::op_output(g, a->shape, a->requires_grad);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->v[i] = a->v[i] * c;
    if (out->requires_grad) {
        g.record([a, out, c, n] {
            for (int64_t i = 0; i < n; ++i) a->g[i] += out->g[i] * c;
        });
    }
    return out;
}

template <class Real>
TensorPtr<Real> sum(Graph<Real>& g, const TensorPtr<Real>& a) {
    auto out = detail::op_output(g, Shape{1}, a->requires_grad);
    double acc = 0.0;
    for (Real x : a->v) acc += static_cast<double>(x);
    out->v[0] = static_cast<Real>(acc);
    if (out->requires_grad) {
        g.record([a, out] {
            const Real d = out->g[0];
            for (size_t i = 0; i < a->g.size(); ++i) a->g[i] += d;
        });
    }
    return out;
}

template <class Real>
TensorPtr<Real> reshape(Graph<Real>& g, const TensorPtr<Real>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a->numel())
        throw DimensionError("reshape: element count mismatch " + shape_str(a->shape) + " -> " +
                             shape_str(new_shape));
    auto out = detail::op_output(g, std::move(new_shape), a->requires_grad);
    out->v = a->v;
    if (out->requires_grad) {
        g.record([a, out] {
            for (size_t i = 0; i < a->g.size(); ++i) a->g[i] += out->g[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax over the last dim, numerically stabilized by max-subtraction.
// mask (optional) must match a trailing suffix of x's shape ending in the row
// width; it is broadcast over the remaining leading dims. Masked entries are
// exactly 0 in the output and receive exactly 0 gradient.
// ---------------------------------------------------------------------------
template <class Real>
TensorPtr<Real> softmax_rows(Graph<Real>& g, const TensorPtr<Real>& x,
                             const BoolMask* mask = nullptr) {
    const int64_t n = x->dim(-1);
    const int64_t rows = x->numel() / n;
    int64_t mask_rows = 0;
    if (mask) {
        if (mask->shape.empty() || mask->shape.back() != n)
            throw DimensionError("softmax_rows: mask row width must equal " + std::to_string(n));
        if (mask->shape.size() > x->shape.size())
            throw DimensionError("softmax_rows: mask rank exceeds input rank");
        for (size_t i = 0; i < mask->shape.size(); ++i) {
            const size_t xi = x->shape.size() - mask->shape.size() + i;
            if (mask->shape[i] != x->shape[xi])
                throw DimensionError("softmax_rows: mask " + shape_str(mask->shape) +
                                     " is not a trailing suffix of " + shape_str(x->shape));
        }
        mask_rows = mask->numel() / n;
    }

    auto out = detail::op_output(g, x->shape, x->requires_grad);
    for (int64_t r = 0; r < rows; ++r) {
        const Real* xr = x->v.data() + r * n;
        Real* yr = out->v.data() + r * n;
        const uint8_t* mr = mask ? mask->allow.data() + (r % mask_rows) * n : nullptr;

        Real mx = 0;
        bool any = false;
        for (int64_t j = 0; j < n; ++j) {
            if (mr && !mr[j]) continue;
            if (!any || xr[j] > mx) mx = xr[j];
            any = true;
        }
        if (!any) throw DegenerateInputError("softmax_rows: fully masked row " + std::to_string(r));

        double s = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            if (mr && !mr[j]) {
                yr[j] = Real(0);
            } else {
                yr[j] = std::exp(xr[j] - mx);
                s += static_cast<double>(yr[j]);
            }
        }
        const Real inv = static_cast<Real>(1.0 / s);
        for (int64_t j = 0; j < n; ++j) yr[j] *= (mr && !mr[j]) ? Real(0) : inv;
    }

    if (out->requires_grad) {
        // the closure owns a mask copy; caller masks need not outlive the graph
        auto m = mask ? std::make_shared<const BoolMask>(*mask) : nullptr;
        g.record([x, out, m, rows, n, mask_rows] {
            for (int64_t r = 0; r < rows; ++r) {
                const Real* yr = out->v.data() + r * n;
                const Real* dy = out->g.data() + r * n;
                Real* dx = x->g.data() + r * n;
                const uint8_t* mr = m ? m->allow.data() + (r % mask_rows) * n : nullptr;
                double dot = 0.0;
                for (int64_t j = 0; j < n; ++j) dot += static_cast<double>(dy[j]) * yr[j];
                for (int64_t j = 0; j < n; ++j) {
                    if (mr && !mr[j]) continue;
                    dx[j] += yr[j] * (dy[j] - static_cast<Real>(dot));
                }
            }
        });
    }
    return out;
}

template <class Real>
TensorPtr<Real> relu_squared(Graph<Real>& g, const TensorPtr<Real>& x) {
    auto out = detail::op_output(g, x->shape, x->requires_grad);
    const int64_t n = x->numel();
    for (int64_t i = 0; i < n; ++i) {
        const Real r = x->v[i] > Real(0) ? x->v[i] : Real(0);
        out->v[i] = r * r;
    }
    if (out->requires_grad) {
        g.record([x, out, n] {
            for (int64_t i = 0; i < n; ++i) {
                const Real r = x->v[i] > Real(0) ? x->v[i] : Real(0);
                x->g[i] += out->g[i] * Real(2) * r;
            }
        });
    }
    return out;
}

inline constexpr double kRmsEps = 1e-6;  // added under the square root

// Parameter-free RMS normalization of each length-d vector along the last dim.
template <class Real>
TensorPtr<Real> rms_normalize(Graph<Real>& g, const TensorPtr<Real>& x) {
    const int64_t d = x->dim(-1);
    const int64_t rows = x->numel() / d;
    auto out = detail::op_output(g, x->shape, x->requires_grad);
    for (int64_t r = 0; r < rows; ++r) {
        const Real* xr = x->v.data() + r * d;
        Real* yr = out->v.data() + r * d;
        double ms = 0.0;
        for (int64_t j = 0; j < d; ++j) ms += static_cast<double>(xr[j]) * xr[j];
        const Real inv = static_cast<Real>(1.0 / std::sqrt(ms / d + kRmsEps));
        for (int64_t j = 0; j < d; ++j) yr[j] = xr[j] * inv;
    }
    if (out->requires_grad) {
        g.record([x, out, rows, d] {
            for (int64_t r = 0; r < rows; ++r) {
                const Real* xr = x->v.data() + r * d;
                const Real* dy = out->g.data() + r * d;
                Real* dx = x->g.data() + r * d;
                double ms = 0.0, dot = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    ms += static_cast<double>(xr[j]) * xr[j];
                    dot += static_cast<double>(dy[j]) * xr[j];
                }
                const double rr = std::sqrt(ms / d + kRmsEps);
                const Real inv = static_cast<Real>(1.0 / rr);
                const Real c = static_cast<Real>(dot / (d * rr * rr * rr));
                for (int64_t j = 0; j < d; ++j) dx[j] += dy[j] * inv - xr[j] * c;
            }
        });
    }
    return out;
}

// y = cap * tanh(x / cap)
template <class Real>
TensorPtr<Real> tanh_softcap(Graph<Real>& g, const TensorPtr<Real>& x, Real cap) {
    auto out = detail::op_output(g, x->shape, x->requires_grad);
    const int64_t n = x->numel();
    for (int64_t i = 0; i < n; ++i) out->v[i] = cap * std::tanh(x->v[i] / cap);
    if (out->requires_grad) {
        g.record([x, out, cap, n] {
            for (int64_t i = 0; i < n; ++i) {
                const Real t = out->v[i] / cap;
                x->g[i] += out->g[i] * (Real(1) - t * t);
            }
        });
    }
    return out;
}

// Token index batch, row-major [batch, time].
struct TokenBatch {
    std::vector<int32_t> ids;
    int64_t batch = 0;
    int64_t time = 0;

    int32_t at(int64_t b, int64_t t) const { return ids[b * time + t]; }
};

// Row gather from the embedding table: tokens [B, T] -> [B, T, d].
template <class Real>
TensorPtr<Real> embed(Graph<Real>& g, const TensorPtr<Real>& wte, const TokenBatch& tokens) {
    if (wte->ndim() != 2) throw DimensionError("embed: wte must be 2-D");
    const int64_t vocab = wte->shape[0], d = wte->shape[1];
    if (static_cast<int64_t>(tokens.ids.size()) != tokens.batch * tokens.time)
        throw DimensionError("embed: token count does not match batch x time");
    for (int32_t id : tokens.ids)
        if (id < 0 || id >= vocab)
            throw IndexError("embed: token id " + std::to_string(id) + " outside vocab " +
                             std::to_string(vocab));
    auto out = detail::op_output(g, Shape{tokens.batch, tokens.time, d}, wte->requires_grad);
    const int64_t n_rows = tokens.batch * tokens.time;
    for (int64_t r = 0; r < n_rows; ++r)
        std::memcpy(out->v.data() + r * d, wte->v.data() + int64_t(tokens.ids[r]) * d,
                    sizeof(Real) * d);
    if (out->requires_grad) {
        auto ids = tokens.ids;
        g.record([wte, out, ids, d, n_rows] {
            for (int64_t r = 0; r < n_rows; ++r) {
                Real* dst = wte->g.data() + int64_t(ids[r]) * d;
                const Real* src = out->g.data() + r * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// [B, T, H*dh] -> [B, H, T, dh]
template <class Real>
TensorPtr<Real> split_heads(Graph<Real>& g, const TensorPtr<Real>& x, int64_t n_heads) {
    if (x->ndim() != 3 || x->dim(-1) % n_heads != 0)
        throw DimensionError("split_heads: need [B, T, H*dh] divisible by H=" +
                             std::to_string(n_heads) + ", got " + shape_str(x->shape));
    const int64_t B = x->shape[0], T = x->shape[1], dh = x->shape[2] / n_heads;
    auto out = detail::op_output(g, Shape{B, n_heads, T, dh}, x->requires_grad);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < T; ++t)
            for (int64_t h = 0; h < n_heads; ++h)
                std::memcpy(out->v.data() + (((b * n_heads + h) * T + t) * dh),
                            x->v.data() + ((b * T + t) * n_heads + h) * dh, sizeof(Real) * dh);
    if (out->requires_grad) {
        g.record([x, out, B, T, dh, n_heads] {
            for (int64_t b = 0; b < B; ++b)
                for (int64_t t = 0; t < T; ++t)
                    for (int64_t h = 0; h < n_heads; ++h) {
                        Real* dst = x->g.data() + ((b * T + t) * n_heads + h) * dh;
                        const Real* src = out->g.data() + (((b * n_heads + h) * T + t) * dh);
                        for (int64_t j = 0; j < dh; ++j) dst[j] += src[j];
                    }
        });
    }
    return out;
}

// [B, H, T, dh] -> [B, T, H*dh]
template <class Real>
TensorPtr<Real> merge_heads(Graph<Real>& g, const TensorPtr<Real>& x) {
    if (x->ndim() != 4) throw DimensionError("merge_heads: need [B, H, T, dh]");
    const int64_t B = x->shape[0], H = x->shape[1], T = x->shape[2], dh = x->shape[3];
    auto out = detail::op_output(g, Shape{B, T, H * dh}, x->requires_grad);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t t = 0; t < T; ++t)
                std::memcpy(out->v.data() + ((b * T + t) * H + h) * dh,
                            x->v.data() + (((b * H + h) * T + t) * dh), sizeof(Real) * dh);
    if (out->requires_grad) {
        g.record([x, out, B, H, T, dh] {
            for (int64_t b = 0; b < B; ++b)
                for (int64_t h = 0; h < H; ++h)
                    for (int64_t t = 0; t < T; ++t) {
                        Real* dst = x->g.data() + (((b * H + h) * T + t) * dh);
                        const Real* src = out->g.data() + ((b * T + t) * H + h) * dh;
                        for (int64_t j = 0; j < dh; ++j) dst[j] += src[j];
                    }
        });
    }
    return out;
}

// GQA broadcast: kv head h serves query heads [h*group, (h+1)*group).
// [B, H_kv, T, dh] -> [B, H_kv*group, T, dh]
template <class Real>
TensorPtr<Real> repeat_kv_heads(Graph<Real>& g, const TensorPtr<Real>& x, int64_t group) {
    if (x->ndim() != 4) throw DimensionError("repeat_kv_heads: need [B, H_kv, T, dh]");
    if (group < 1) throw ContractError("repeat_kv_heads: group must be >= 1");
    if (group == 1) return x;
    const int64_t B = x->shape[0], Hkv = x->shape[1], T = x->shape[2], dh = x->shape[3];
    const int64_t slab = T * dh;
    auto out = detail::op_output(g, Shape{B, Hkv * group, T, dh}, x->requires_grad);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < Hkv; ++h)
            for (int64_t r = 0; r < group; ++r)
                std::memcpy(out->v.data() + ((b * Hkv + h) * group + r) * slab,
                            x->v.data() + (b * Hkv + h) * slab, sizeof(Real) * slab);
    if (out->requires_grad) {
        g.record([x, out, B, Hkv, group, slab] {
            for (int64_t b = 0; b < B; ++b)
                for (int64_t h = 0; h < Hkv; ++h) {
                    Real* dst = x->g.data() + (b * Hkv + h) * slab;
                    for (int64_t r = 0; r < group; ++r) {
                        const Real* src = out->g.data() + ((b * Hkv + h) * group + r) * slab;
                        for (int64_t j = 0; j < slab; ++j) dst[j] += src[j];
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cross-entropy per row with log-sum-exp stabilization, losses in nats.
// Rows whose target equals ignore_index are excluded from the mean and
// reported invalid. per_row is in double for downstream metric math.
// ---------------------------------------------------------------------------
template <class Real>
struct CrossEntropyResult {
    TensorPtr<Real> mean_loss;     // scalar, on the graph
    std::vector<double> per_row;   // valid entries only are meaningful
    std::vector<uint8_t> valid;
};

template <class Real>
CrossEntropyResult<Real> cross_entropy_rowwise(Graph<Real>& g, const TensorPtr<Real>& logits,
                                               const std::vector<int32_t>& targets,
                                               int32_t ignore_index = -1) {
    if (logits->ndim() < 2) throw DimensionError("cross_entropy_rowwise: need [..., V]");
    const int64_t V = logits->dim(-1);
    const int64_t n = logits->numel() / V;
    if (static_cast<int64_t>(targets.size()) != n)
        throw DimensionError("cross_entropy_rowwise: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(n) + " rows");

    CrossEntropyResult<Real> res;
    res.per_row.assign(n, 0.0);
    res.valid.assign(n, 0);

    // probs saved for the backward pass
    auto probs = std::make_shared<std::vector<Real>>(logits->v.size());
    double total = 0.0;
    int64_t n_valid = 0;
    for (int64_t r = 0; r < n; ++r) {
        const Real* xr = logits->v.data() + r * V;
        Real* pr = probs->data() + r * V;
        Real mx = xr[0];
        for (int64_t j = 1; j < V; ++j) mx = std::max(mx, xr[j]);
        double s = 0.0;
        for (int64_t j = 0; j < V; ++j) {
            pr[j] = std::exp(xr[j] - mx);
            s += static_cast<double>(pr[j]);
        }
        const Real inv = static_cast<Real>(1.0 / s);
        for (int64_t j = 0; j < V; ++j) pr[j] *= inv;

        const int32_t t = targets[r];
        if (t == ignore_index) continue;
        if (t < 0 || t >= V)
            throw IndexError("cross_entropy_rowwise: target " + std::to_string(t) +
                             " outside [0, " + std::to_string(V) + ")");
        const double lse = static_cast<double>(mx) + std::log(s);
        const double loss = lse - static_cast<double>(xr[t]);
        res.per_row[r] = loss;
        res.valid[r] = 1;
        total += loss;
        ++n_valid;
    }
    if (n_valid == 0)
        throw DegenerateInputError("cross_entropy_rowwise: all rows ignored");

    res.mean_loss = detail::op_output(g, Shape{1}, logits->requires_grad);
    res.mean_loss->v[0] = static_cast<Real>(total / n_valid);

    if (res.mean_loss->requires_grad) {
        auto out = res.mean_loss;
        auto tgt = targets;
        g.record([logits, out, probs, tgt, V, n, n_valid, ignore_index] {
            const Real d = out->g[0] / static_cast<Real>(n_valid);
            for (int64_t r = 0; r < n; ++r) {
                const int32_t t = tgt[r];
                if (t == ignore_index) continue;
                const Real* pr = probs->data() + r * V;
                Real* dx = logits->g.data() + r * V;
                for (int64_t j = 0; j < V; ++j) dx[j] += d * pr[j];
                dx[t] -= d;
            }
        });
    }
    return res;
}

}  // namespace looplab
