// SPDX-License-Identifier: Apache-2.0
//
// Inter-head correlation and the diversity penalty built on it:
//
//   d(m, n)  = (1/T) * sum(unit_rows(R_m) ⊙ unit_rows(R_n))
//   loss     = (1/N²) * Σ_m Σ_n (d(m, n) − I(m, n))²
//
// R is any of the per-head representations Y, A, Q, K, V. The same
// "squared distance from identity" reduction over cosine similarities of
// flattened parameter gradients gives the gradient-similarity measure.

#pragma once

#include <array>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "headdiv/attention.hpp"
#include "headdiv/matrix.hpp"

namespace headdiv {

enum class DiversityKind { context, attention, query, key, value };

inline constexpr std::array<DiversityKind, 5> kAllKinds = {
    DiversityKind::context, DiversityKind::attention, DiversityKind::query, DiversityKind::key,
    DiversityKind::value};

inline constexpr std::size_t index_of(DiversityKind k) noexcept { return static_cast<std::size_t>(k); }

inline const char* symbol(DiversityKind k) noexcept {
    switch (k) {
        case DiversityKind::context: return "Y";
        case DiversityKind::attention: return "A";
        case DiversityKind::query: return "Q";
        case DiversityKind::key: return "K";
        case DiversityKind::value: return "V";
    }
    return "?";
}

/// Accepts the one-letter symbol or the long name ("context", "attention", ...).
inline std::optional<DiversityKind> parse_kind(std::string_view s) {
    for (auto k : kAllKinds) {
        if (s == symbol(k)) return k;
    }
    if (s == "context") return DiversityKind::context;
    if (s == "attention") return DiversityKind::attention;
    if (s == "query") return DiversityKind::query;
    if (s == "key") return DiversityKind::key;
    if (s == "value") return DiversityKind::value;
    return std::nullopt;
}

class RepresentationUnavailable : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline double pairwise_correlation(const Matrix& rep_m, const Matrix& rep_n) {
    rep_m.require_same(rep_n, "pairwise_correlation");
    if (rep_m.rows() < 1) throw ShapeError("pairwise_correlation: empty representation");
    return dot(row_normalize(rep_m), row_normalize(rep_n)) / static_cast<double>(rep_m.rows());
}

struct DiversityLoss {
    double loss = 0.0;
    Matrix similarity;          // N x N, entries d(m, n)
    std::vector<Matrix> grads;  // d loss / d rep_n, empty unless requested
};

inline DiversityLoss diversity_loss(std::span<const Matrix> reps, bool with_grads = true) {
    if (reps.empty()) throw ShapeError("diversity_loss: no representations");
    const std::size_t n_heads = reps.size();
    for (const auto& r : reps) reps.front().require_same(r, "diversity_loss");
    const double inv_t = 1.0 / static_cast<double>(reps.front().rows());

    std::vector<Matrix> unit;
    unit.reserve(n_heads);
    for (const auto& r : reps) unit.push_back(row_normalize(r));

    DiversityLoss out;
    out.similarity = Matrix(n_heads, n_heads);
    for (std::size_t m = 0; m < n_heads; ++m)
        for (std::size_t n = m; n < n_heads; ++n) {
            const double d = dot(unit[m], unit[n]) * inv_t;
            out.similarity(m, n) = d;
            out.similarity(n, m) = d;
        }

    const double inv_n2 = 1.0 / static_cast<double>(n_heads * n_heads);
    double acc = 0.0;
    for (std::size_t m = 0; m < n_heads; ++m)
        for (std::size_t n = 0; n < n_heads; ++n) {
            const double e = out.similarity(m, n) - (m == n ? 1.0 : 0.0);
            acc += e * e;
        }
    out.loss = acc * inv_n2;

    if (with_grads) {
        out.grads.reserve(n_heads);
        for (std::size_t m = 0; m < n_heads; ++m) {
            Matrix du(reps[m].rows(), reps[m].cols());
            for (std::size_t n = 0; n < n_heads; ++n) {
                const double g = 2.0 * (out.similarity(m, n) - (m == n ? 1.0 : 0.0)) * inv_n2;
                du += unit[n] * (2.0 * g * inv_t);
            }
            out.grads.push_back(row_normalize_vjp(reps[m], du));
        }
    }
    return out;
}

inline const Matrix& representation(const HeadTrace& tr, DiversityKind kind, std::size_t head_index) {
    switch (kind) {
        case DiversityKind::context: return tr.y;
        case DiversityKind::query: return tr.q;
        case DiversityKind::key: return tr.k;
        case DiversityKind::value: return tr.v;
        case DiversityKind::attention:
            if (!tr.a)
                throw RepresentationUnavailable("attention probabilities of head " + std::to_string(head_index) +
                                                " were not materialized (FAVOR head outside analysis mode)");
            return *tr.a;
    }
    throw std::logic_error("unknown diversity kind");
}

inline DiversityLoss layer_diversity(std::span<const HeadTrace> traces, DiversityKind kind, bool with_grads = false) {
    std::vector<Matrix> reps;
    reps.reserve(traces.size());
    for (std::size_t n = 0; n < traces.size(); ++n) reps.push_back(representation(traces[n], kind, n));
    return diversity_loss(reps, with_grads);
}

/// Route per-head diversity gradients (times `weight`) to the trace slot
/// of the given kind, ready for layer_backward.
inline std::vector<TraceGrad> to_trace_grads(const std::vector<Matrix>& grads, DiversityKind kind, double weight) {
    std::vector<TraceGrad> out(grads.size());
    for (std::size_t n = 0; n < grads.size(); ++n) {
        Matrix g = grads[n] * weight;
        switch (kind) {
            case DiversityKind::context: out[n].y = std::move(g); break;
            case DiversityKind::attention: out[n].a = std::move(g); break;
            case DiversityKind::query: out[n].q = std::move(g); break;
            case DiversityKind::key: out[n].k = std::move(g); break;
            case DiversityKind::value: out[n].v = std::move(g); break;
        }
    }
    return out;
}

/// Cosine similarity of flattened matrices. Zero-norm vectors get 0 off the
/// diagonal and 1 on it.
inline Matrix cosine_similarity(std::span<const Matrix> mats) {
    const std::size_t n = mats.size();
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) norms[i] = std::sqrt(dot(mats[i], mats[i]));
    Matrix c(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        c(i, i) = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const double v = (norms[i] > 0.0 && norms[j] > 0.0) ? dot(mats[i], mats[j]) / (norms[i] * norms[j]) : 0.0;
            c(i, j) = v;
            c(j, i) = v;
        }
    }
    return c;
}

/// Mean over layers of mean((C − I)²) where C is the head-gradient cosine matrix.
inline double grad_similarity_loss(const std::vector<std::vector<Matrix>>& per_layer_grads) {
    if (per_layer_grads.empty()) throw ShapeError("grad_similarity_loss: no layers");
    double total = 0.0;
    for (const auto& layer : per_layer_grads) {
        if (layer.empty()) throw ShapeError("grad_similarity_loss: layer without heads");
        for (const auto& g : layer) layer.front().require_same(g, "grad_similarity_loss");
        const Matrix c = cosine_similarity(layer);
        const std::size_t n = layer.size();
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double e = c(i, j) - (i == j ? 1.0 : 0.0);
                acc += e * e;
            }
        total += acc / static_cast<double>(n * n);
    }
    return total / static_cast<double>(per_layer_grads.size());
}

struct LayerReport {
    std::array<double, 5> loss{};
    std::array<Matrix, 5> similarity;

    double& operator[](DiversityKind k) { return loss[index_of(k)]; }
    double operator[](DiversityKind k) const { return loss[index_of(k)]; }
};

/// Per-layer values; `total` sums over layers (report convention), `mean`
/// averages them (training-penalty convention).
struct DiversityReport {
    std::vector<LayerReport> per_layer;

    double total(DiversityKind k) const {
        double s = 0.0;
        for (const auto& l : per_layer) s += l[k];
        return s;
    }
    double mean(DiversityKind k) const {
        return per_layer.empty() ? 0.0 : total(k) / static_cast<double>(per_layer.size());
    }
};

}  // namespace headdiv
