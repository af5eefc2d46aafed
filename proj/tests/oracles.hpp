// SPDX-License-Identifier: Apache-2.0
//
// Independent reference computations for the tests. Nothing here calls the
// library's forward/backward code paths; only the Matrix container is shared.

#pragma once

#include <cmath>
#include <vector>

#include "headdiv/attention.hpp"
#include "headdiv/matrix.hpp"
#include "headdiv/random.hpp"

namespace oracle {

using headdiv::Matrix;

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            c(i, j) = s;
        }
    return c;
}

inline std::vector<double> project_row(const Matrix& x, std::size_t t, const Matrix& w) {
    std::vector<double> out(w.cols(), 0.0);
    for (std::size_t j = 0; j < w.cols(); ++j)
        for (std::size_t d = 0; d < x.cols(); ++d) out[j] += x(t, d) * w(d, j);
    return out;
}

/// Softmax attention one output row at a time, window by explicit index bounds.
inline Matrix naive_head(const Matrix& x, const headdiv::HeadParams& p, double scale, long left, long right) {
    const long t_len = static_cast<long>(x.rows());
    Matrix y(x.rows(), p.w_value.cols());
    for (long t = 0; t < t_len; ++t) {
        const auto q = project_row(x, t, p.w_query);
        std::vector<double> logits;
        std::vector<long> idx;
        for (long s = 0; s < t_len; ++s) {
            if (s < t - left || s > t + right) continue;
            const auto k = project_row(x, s, p.w_key);
            double dot = 0.0;
            for (std::size_t j = 0; j < q.size(); ++j) dot += q[j] * k[j];
            logits.push_back(dot * scale);
            idx.push_back(s);
        }
        double mx = logits[0];
        for (double l : logits) mx = std::max(mx, l);
        double z = 0.0;
        for (double& l : logits) z += (l = std::exp(l - mx));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto v = project_row(x, idx[i], p.w_value);
            for (std::size_t j = 0; j < v.size(); ++j) y(t, j) += logits[i] / z * v[j];
        }
    }
    return y;
}

/// Layer output by explicit block concatenation of head outputs.
inline Matrix naive_layer(const Matrix& x, const std::vector<Matrix>& head_outputs, const Matrix& w_out) {
    const std::size_t h = head_outputs.front().cols();
    Matrix concat(x.rows(), h * head_outputs.size());
    for (std::size_t n = 0; n < head_outputs.size(); ++n)
        for (std::size_t t = 0; t < x.rows(); ++t)
            for (std::size_t j = 0; j < h; ++j) concat(t, n * h + j) = head_outputs[n](t, j);
    return naive_matmul(concat, w_out);
}

/// Cosine of two rows, 0 when either is zero.
inline double row_cosine(const Matrix& a, const Matrix& b, std::size_t t) {
    double ab = 0.0;
    double aa = 0.0;
    double bb = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
        ab += a(t, j) * b(t, j);
        aa += a(t, j) * a(t, j);
        bb += b(t, j) * b(t, j);
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return ab / std::sqrt(aa * bb);
}

inline double naive_correlation(const Matrix& a, const Matrix& b) {
    double s = 0.0;
    for (std::size_t t = 0; t < a.rows(); ++t) s += row_cosine(a, b, t);
    return s / static_cast<double>(a.rows());
}

/// ‖D − I‖²_F / N² from an explicit similarity matrix.
inline double frobenius_diversity(const Matrix& d) {
    double s = 0.0;
    for (std::size_t i = 0; i < d.rows(); ++i)
        for (std::size_t j = 0; j < d.cols(); ++j) {
            const double e = d(i, j) - (i == j ? 1.0 : 0.0);
            s += e * e;
        }
    return s / static_cast<double>(d.rows() * d.cols());
}

inline Matrix random_matrix(std::size_t r, std::size_t c, headdiv::Rng& rng, double lo = -1.0, double hi = 1.0) {
    return headdiv::uniform_matrix(r, c, lo, hi, rng);
}

}  // namespace oracle
