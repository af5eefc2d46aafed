// SPDX-License-Identifier: Apache-2.0
//
// Multi-head self-attention with a per-head mechanism: full-context softmax,
// windowed softmax, or FAVOR positive random features. Forward passes return
// per-head traces (Q, K, V, A, Y) which the backward pass and the diversity
// losses consume.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "headdiv/matrix.hpp"
#include "headdiv/random.hpp"

namespace headdiv {

/// Raised when traces or gradients handed to a backward pass do not belong
/// to the parameters they are paired with.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

struct SoftmaxFull {
    bool operator==(const SoftmaxFull&) const = default;
};

/// Attend to s with t - left <= s <= t + right. A side >= T is unbounded.
struct SoftmaxWindow {
    std::size_t left = 0;
    std::size_t right = 0;
    bool operator==(const SoftmaxWindow&) const = default;
};

struct Favor {
    std::size_t num_features = 64;
    std::uint64_t feature_seed = 0;
    bool operator==(const Favor&) const = default;
};

using HeadMechanism = std::variant<SoftmaxFull, SoftmaxWindow, Favor>;

inline std::string describe(const HeadMechanism& m) {
    if (std::holds_alternative<SoftmaxFull>(m)) return "softmax";
    if (const auto* w = std::get_if<SoftmaxWindow>(&m))
        return "window(L=" + std::to_string(w->left) + ",R=" + std::to_string(w->right) + ")";
    const auto& f = std::get<Favor>(m);
    return "favor(r=" + std::to_string(f.num_features) + ",seed=" + std::to_string(f.feature_seed) + ")";
}

/// `paper` divides logits by H, `standard` by sqrt(H).
enum class ScaleMode { paper, standard };

inline double attention_scale(ScaleMode mode, std::size_t head_dim) {
    const double h = static_cast<double>(head_dim);
    return mode == ScaleMode::paper ? 1.0 / h : 1.0 / std::sqrt(h);
}

inline const char* to_string(ScaleMode m) { return m == ScaleMode::paper ? "paper" : "standard"; }

struct HeadParams {
    Matrix w_query;
    Matrix w_key;
    Matrix w_value;
};

struct AttentionHead {
    HeadParams weights;
    HeadMechanism mechanism = SoftmaxFull{};
    Matrix favor_omega;  // H x r, drawn from feature_seed, never trained; empty unless FAVOR
};

/// Random projection for a FAVOR head: H x r, i.i.d. standard normal.
inline Matrix favor_projection(std::size_t head_dim, const Favor& f) {
    if (f.num_features < 1) throw std::invalid_argument("FAVOR head needs at least one random feature");
    Rng rng(f.feature_seed);
    return normal_matrix(head_dim, f.num_features, rng);
}

inline AttentionHead make_head(HeadParams weights, HeadMechanism mechanism) {
    AttentionHead h{std::move(weights), mechanism, {}};
    if (const auto* f = std::get_if<Favor>(&mechanism))
        h.favor_omega = favor_projection(h.weights.w_query.cols(), *f);
    return h;
}

struct LayerParams {
    std::vector<AttentionHead> heads;
    Matrix w_out;  // NH x D

    std::size_t num_heads() const noexcept { return heads.size(); }
    std::size_t head_dim() const noexcept { return heads.empty() ? 0 : heads.front().weights.w_query.cols(); }
    std::size_t model_dim() const noexcept { return w_out.cols(); }

    void validate() const {
        if (heads.empty()) throw ShapeError("attention layer needs at least one head");
        const auto& ref = heads.front().weights.w_query;
        for (std::size_t n = 0; n < heads.size(); ++n) {
            const auto& w = heads[n].weights;
            if (!w.w_query.same_shape(ref) || !w.w_key.same_shape(ref) || !w.w_value.same_shape(ref))
                throw ShapeError("head " + std::to_string(n) + ": projection shapes differ from " + ref.shape());
            if (const auto* f = std::get_if<Favor>(&heads[n].mechanism)) {
                if (heads[n].favor_omega.rows() != ref.cols() || heads[n].favor_omega.cols() != f->num_features)
                    throw ShapeError("head " + std::to_string(n) + ": FAVOR projection is " +
                                     heads[n].favor_omega.shape());
            }
        }
        if (w_out.rows() != heads.size() * ref.cols() || w_out.cols() != ref.rows())
            throw ShapeError("w_out is " + w_out.shape() + ", expected " +
                             std::to_string(heads.size() * ref.cols()) + "x" + std::to_string(ref.rows()));
    }
};

/// Intermediates of a FAVOR head kept for the backward pass.
struct FavorCache {
    Matrix phi_q;                    // T x r
    Matrix phi_k;                    // T x r
    Matrix kv;                       // r x H, phi_kᵀ V
    std::vector<double> key_sum;     // r, phi_kᵀ 1
    std::vector<double> normalizer;  // T, phi_q · key_sum
};

struct HeadTrace {
    Matrix q;
    Matrix k;
    Matrix v;
    std::optional<Matrix> a;  // absent on the FAVOR fast path
    Matrix y;
    std::optional<FavorCache> favor;
};

inline Matrix build_context_mask(std::size_t t_len, std::size_t left, std::size_t right) {
    if (t_len < 1) throw std::invalid_argument("build_context_mask: empty sequence");
    Matrix mask(t_len, t_len);
    for (std::size_t t = 0; t < t_len; ++t)
        for (std::size_t s = 0; s < t_len; ++s) {
            const bool in_left = s >= t || t - s <= left;
            const bool in_right = s <= t || s - t <= right;
            mask(t, s) = (in_left && in_right) ? 1.0 : 0.0;
        }
    return mask;
}

inline Matrix mask_for(const HeadMechanism& mech, std::size_t t_len) {
    if (const auto* w = std::get_if<SoftmaxWindow>(&mech)) return build_context_mask(t_len, w->left, w->right);
    return Matrix(t_len, t_len, 1.0);
}

inline constexpr double kMaskedLogit = -1e30;

inline HeadTrace head_forward_softmax(const Matrix& x, const HeadParams& p, const Matrix& mask, double scale) {
    if (!(scale > 0.0)) throw std::invalid_argument("attention scale must be positive");
    HeadTrace tr;
    tr.q = matmul(x, p.w_query);
    tr.k = matmul(x, p.w_key);
    tr.v = matmul(x, p.w_value);
    Matrix logits = matmul_nt(tr.q, tr.k);
    logits.require_same(mask, "attention mask");
    auto ld = logits.data();
    auto md = mask.data();
    for (std::size_t i = 0; i < ld.size(); ++i) ld[i] = md[i] != 0.0 ? ld[i] * scale : kMaskedLogit;
    tr.a = row_softmax(logits);
    tr.y = matmul(*tr.a, tr.v);
    return tr;
}

/// phi(x)_j = r^(-1/2) exp(omega_jᵀ x - |x|²/2), row by row.
inline Matrix favor_feature_map(const Matrix& m, const Matrix& omega) {
    Matrix proj = matmul(m, omega);
    const double c = 1.0 / std::sqrt(static_cast<double>(omega.cols()));
    for (std::size_t t = 0; t < m.rows(); ++t) {
        auto xr = m.row(t);
        double half_sq = 0.0;
        for (double v : xr) half_sq += v * v;
        half_sq *= 0.5;
        for (double& v : proj.row(t)) v = c * std::exp(v - half_sq);
    }
    return proj;
}

/// VJP of favor_feature_map at input m with output phi: (g⊙phi)·omegaᵀ − m ⊙ rowsum(g⊙phi).
inline Matrix favor_feature_map_vjp(const Matrix& m, const Matrix& phi, const Matrix& g, const Matrix& omega) {
    Matrix gp = hadamard(g, phi);
    Matrix dx = matmul_nt(gp, omega);
    for (std::size_t t = 0; t < m.rows(); ++t) {
        double s = 0.0;
        for (double v : gp.row(t)) s += v;
        auto xr = m.row(t);
        auto dr = dx.row(t);
        for (std::size_t h = 0; h < xr.size(); ++h) dr[h] -= xr[h] * s;
    }
    return dx;
}

inline HeadTrace head_forward_favor(const Matrix& x, const HeadParams& p, const Matrix& omega, double scale,
                                    bool materialize_a) {
    if (!(scale > 0.0)) throw std::invalid_argument("attention scale must be positive");
    HeadTrace tr;
    tr.q = matmul(x, p.w_query);
    tr.k = matmul(x, p.w_key);
    tr.v = matmul(x, p.w_value);
    const double root = std::sqrt(scale);
    FavorCache fc;
    fc.phi_q = favor_feature_map(tr.q * root, omega);
    fc.phi_k = favor_feature_map(tr.k * root, omega);
    fc.kv = matmul_tn(fc.phi_k, tr.v);
    const std::size_t t_len = x.rows();
    const std::size_t r = omega.cols();
    fc.key_sum.assign(r, 0.0);
    for (std::size_t s = 0; s < t_len; ++s) {
        auto row = fc.phi_k.row(s);
        for (std::size_t j = 0; j < r; ++j) fc.key_sum[j] += row[j];
    }
    fc.normalizer.assign(t_len, 0.0);
    for (std::size_t t = 0; t < t_len; ++t) {
        auto row = fc.phi_q.row(t);
        double n = 0.0;
        for (std::size_t j = 0; j < r; ++j) n += row[j] * fc.key_sum[j];
        fc.normalizer[t] = n;
    }
    tr.y = matmul(fc.phi_q, fc.kv);
    for (std::size_t t = 0; t < t_len; ++t)
        for (double& v : tr.y.row(t)) v /= fc.normalizer[t];
    if (materialize_a) {
        Matrix a = matmul_nt(fc.phi_q, fc.phi_k);
        for (std::size_t t = 0; t < t_len; ++t)
            for (double& v : a.row(t)) v /= fc.normalizer[t];
        tr.a = std::move(a);
    }
    tr.favor = std::move(fc);
    return tr;
}

inline HeadTrace head_forward(const Matrix& x, const AttentionHead& head, double scale, bool materialize_a) {
    if (std::holds_alternative<Favor>(head.mechanism))
        return head_forward_favor(x, head.weights, head.favor_omega, scale, materialize_a);
    return head_forward_softmax(x, head.weights, mask_for(head.mechanism, x.rows()), scale);
}

struct LayerOutput {
    Matrix y;
    std::vector<HeadTrace> traces;
};

/// Concatenate per-head outputs along the feature axis (T x NH).
inline Matrix concat_heads(std::span<const HeadTrace> traces) {
    const std::size_t t_len = traces.front().y.rows();
    const std::size_t h = traces.front().y.cols();
    Matrix c(t_len, traces.size() * h);
    for (std::size_t n = 0; n < traces.size(); ++n)
        for (std::size_t t = 0; t < t_len; ++t)
            for (std::size_t j = 0; j < h; ++j) c(t, n * h + j) = traces[n].y(t, j);
    return c;
}

inline LayerOutput layer_forward(const Matrix& x, const LayerParams& params, ScaleMode scale_mode,
                                 bool materialize_favor_a = false) {
    params.validate();
    if (x.cols() != params.model_dim())
        throw ShapeError("layer_forward: input is " + x.shape() + ", model dim " +
                         std::to_string(params.model_dim()));
    const double scale = attention_scale(scale_mode, params.head_dim());
    LayerOutput out;
    out.traces.reserve(params.num_heads());
    for (const auto& head : params.heads) out.traces.push_back(head_forward(x, head, scale, materialize_favor_a));
    out.y = matmul(concat_heads(out.traces), params.w_out);
    return out;
}

/// Extra upstream gradients arriving directly at a head's cached tensors
/// (from the diversity loss). Empty matrices mean "no contribution".
struct TraceGrad {
    Matrix q;
    Matrix k;
    Matrix v;
    Matrix a;
    Matrix y;
};

struct LayerGrads {
    std::vector<HeadParams> heads;
    Matrix w_out;
};

struct LayerBackward {
    LayerGrads grads;
    Matrix d_x;
};

namespace detail {

inline void add_if(Matrix& acc, const Matrix& extra) {
    if (!extra.empty()) acc += extra;
}

struct QkvGrads {
    Matrix dq;
    Matrix dk;
    Matrix dv;
};

inline QkvGrads softmax_head_backward(const HeadTrace& tr, const Matrix& dy, const TraceGrad* extra, double scale) {
    const Matrix& a = *tr.a;
    Matrix da = matmul_nt(dy, tr.v);
    if (extra) add_if(da, extra->a);
    QkvGrads g;
    g.dv = matmul_tn(a, dy);
    Matrix ds = row_softmax_vjp(a, da);
    ds *= scale;
    g.dq = matmul(ds, tr.k);
    g.dk = matmul_tn(ds, tr.q);
    return g;
}

inline QkvGrads favor_head_backward(const HeadTrace& tr, const Matrix& dy, const TraceGrad* extra,
                                    const Matrix& omega, double scale) {
    const FavorCache& fc = *tr.favor;
    const std::size_t t_len = tr.q.rows();
    const std::size_t h = tr.v.cols();
    const std::size_t r = omega.cols();

    Matrix dnum(t_len, h);
    std::vector<double> dn(t_len, 0.0);
    for (std::size_t t = 0; t < t_len; ++t) {
        const double n = fc.normalizer[t];
        double acc = 0.0;
        for (std::size_t j = 0; j < h; ++j) {
            dnum(t, j) = dy(t, j) / n;
            acc += dy(t, j) * tr.y(t, j);
        }
        dn[t] = -acc / n;
    }

    Matrix dphi_q = matmul_nt(dnum, fc.kv);
    Matrix dkv = matmul_tn(fc.phi_q, dnum);
    std::vector<double> dkey_sum(r, 0.0);

    const bool has_da = extra && !extra->a.empty();
    Matrix dp;
    if (has_da) {
        if (!tr.a) throw ContractError("attention gradient supplied for a FAVOR head without materialized A");
        const Matrix& a = *tr.a;
        dp = Matrix(t_len, t_len);
        for (std::size_t t = 0; t < t_len; ++t) {
            const double n = fc.normalizer[t];
            double acc = 0.0;
            for (std::size_t s = 0; s < t_len; ++s) {
                dp(t, s) = extra->a(t, s) / n;
                acc += extra->a(t, s) * a(t, s);
            }
            dn[t] -= acc / n;
        }
        dphi_q += matmul(dp, fc.phi_k);
    }

    for (std::size_t t = 0; t < t_len; ++t) {
        auto row = dphi_q.row(t);
        for (std::size_t j = 0; j < r; ++j) row[j] += dn[t] * fc.key_sum[j];
        auto pq = fc.phi_q.row(t);
        for (std::size_t j = 0; j < r; ++j) dkey_sum[j] += pq[j] * dn[t];
    }

    Matrix dphi_k = matmul_nt(tr.v, dkv);
    for (std::size_t s = 0; s < t_len; ++s) {
        auto row = dphi_k.row(s);
        for (std::size_t j = 0; j < r; ++j) row[j] += dkey_sum[j];
    }
    if (has_da) dphi_k += matmul_tn(dp, fc.phi_q);

    const double root = std::sqrt(scale);
    QkvGrads g;
    g.dv = matmul(fc.phi_k, dkv);
    g.dq = favor_feature_map_vjp(tr.q * root, fc.phi_q, dphi_q, omega) * root;
    g.dk = favor_feature_map_vjp(tr.k * root, fc.phi_k, dphi_k, omega) * root;
    return g;
}

}  // namespace detail

/// Exact gradients of a scalar loss whose gradient w.r.t. the layer output is
/// `d_y`, plus optional direct gradients on the cached head tensors.
inline LayerBackward layer_backward(const Matrix& d_y, const Matrix& x, const LayerParams& params,
                                    std::span<const HeadTrace> traces, ScaleMode scale_mode,
                                    std::span<const TraceGrad> extra = {}) {
    params.validate();
    const std::size_t n_heads = params.num_heads();
    const std::size_t h = params.head_dim();
    if (traces.size() != n_heads)
        throw ContractError("layer_backward: " + std::to_string(traces.size()) + " traces for " +
                            std::to_string(n_heads) + " heads");
    if (!extra.empty() && extra.size() != n_heads)
        throw ContractError("layer_backward: extra gradients for " + std::to_string(extra.size()) + " of " +
                            std::to_string(n_heads) + " heads");
    for (std::size_t n = 0; n < n_heads; ++n) {
        const auto& tr = traces[n];
        const bool favor = std::holds_alternative<Favor>(params.heads[n].mechanism);
        if (tr.q.rows() != x.rows() || tr.q.cols() != h || tr.y.rows() != x.rows() ||
            favor != tr.favor.has_value() || (!favor && !tr.a))
            throw ContractError("layer_backward: trace " + std::to_string(n) + " does not match its head");
    }
    if (d_y.rows() != x.rows() || d_y.cols() != params.model_dim())
        throw ShapeError("layer_backward: upstream gradient is " + d_y.shape());

    const double scale = attention_scale(scale_mode, h);
    LayerBackward out;
    out.grads.w_out = matmul_tn(concat_heads(traces), d_y);
    Matrix d_concat = matmul_nt(d_y, params.w_out);
    out.d_x = Matrix(x.rows(), x.cols());
    out.grads.heads.reserve(n_heads);

    for (std::size_t n = 0; n < n_heads; ++n) {
        const auto& head = params.heads[n];
        const auto& tr = traces[n];
        const TraceGrad* ex = extra.empty() ? nullptr : &extra[n];
        Matrix dy_head(x.rows(), h);
        for (std::size_t t = 0; t < x.rows(); ++t)
            for (std::size_t j = 0; j < h; ++j) dy_head(t, j) = d_concat(t, n * h + j);
        if (ex) detail::add_if(dy_head, ex->y);

        detail::QkvGrads g = std::holds_alternative<Favor>(head.mechanism)
                                 ? detail::favor_head_backward(tr, dy_head, ex, head.favor_omega, scale)
                                 : detail::softmax_head_backward(tr, dy_head, ex, scale);
        if (ex) {
            detail::add_if(g.dq, ex->q);
            detail::add_if(g.dk, ex->k);
            detail::add_if(g.dv, ex->v);
        }
        out.grads.heads.push_back({matmul_tn(x, g.dq), matmul_tn(x, g.dk), matmul_tn(x, g.dv)});
        out.d_x += matmul_nt(g.dq, head.weights.w_query);
        out.d_x += matmul_nt(g.dk, head.weights.w_key);
        out.d_x += matmul_nt(g.dv, head.weights.w_value);
    }
    return out;
}

}  // namespace headdiv
