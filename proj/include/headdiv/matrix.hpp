// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrix of doubles plus the handful of forward operations
// and vector-Jacobian products the attention model needs.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace headdiv {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw ShapeError("ragged matrix literal");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::string shape() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }
    bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    Matrix& operator+=(const Matrix& o) {
        require_same(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Matrix& operator-=(const Matrix& o) {
        require_same(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Matrix& operator*=(double s) noexcept {
        for (double& v : data_) v *= s;
        return *this;
    }

    friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
    friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
    friend Matrix operator*(Matrix a, double s) { return a *= s; }
    friend Matrix operator*(double s, Matrix a) { return a *= s; }

    bool operator==(const Matrix&) const = default;

    void require_same(const Matrix& o, const char* what) const {
        if (!same_shape(o))
            throw ShapeError(std::string(what) + ": shape mismatch " + shape() + " vs " + o.shape());
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: shape mismatch " + a.shape() + " x " + b.shape());
    Matrix c(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double* ci = c.row(i).data();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* bk = b.row(k).data();
            for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

/// aᵀ·b without forming the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows())
        throw ShapeError("matmul_tn: shape mismatch " + a.shape() + "^T x " + b.shape());
    Matrix c(a.cols(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const double* bk = b.row(k).data();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            double* ci = c.row(i).data();
            for (std::size_t j = 0; j < n; ++j) ci[j] += aki * bk[j];
        }
    }
    return c;
}

/// a·bᵀ without forming the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt: shape mismatch " + a.shape() + " x " + b.shape() + "^T");
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ai = a.row(i).data();
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const double* bj = b.row(j).data();
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += ai[k] * bj[k];
            c(i, j) = s;
        }
    }
    return c;
}

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
    return t;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    a.require_same(b, "hadamard");
    Matrix c = a;
    auto cd = c.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < cd.size(); ++i) cd[i] *= bd[i];
    return c;
}

inline double sum(const Matrix& m) noexcept {
    double s = 0.0;
    for (double v : m.data()) s += v;
    return s;
}

/// Sum of the entrywise product.
inline double dot(const Matrix& a, const Matrix& b) {
    a.require_same(b, "dot");
    double s = 0.0;
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < ad.size(); ++i) s += ad[i] * bd[i];
    return s;
}

inline bool all_finite(const Matrix& m) noexcept {
    return std::all_of(m.data().begin(), m.data().end(), [](double v) { return std::isfinite(v); });
}

struct MatmulGrads {
    Matrix da;
    Matrix db;
};

/// VJP of c = a·b for upstream g: (g·bᵀ, aᵀ·g).
inline MatmulGrads matmul_vjp(const Matrix& a, const Matrix& b, const Matrix& g) {
    return {matmul_nt(g, b), matmul_tn(a, g)};
}

inline Matrix row_softmax(const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto in = m.row(i);
        auto o = out.row(i);
        const double mx = *std::max_element(in.begin(), in.end());
        double z = 0.0;
        for (std::size_t j = 0; j < in.size(); ++j) {
            o[j] = std::exp(in[j] - mx);
            z += o[j];
        }
        for (double& v : o) v /= z;
    }
    return out;
}

/// VJP of row_softmax given its output p: p ⊙ (g − rowsum(g ⊙ p)).
inline Matrix row_softmax_vjp(const Matrix& p, const Matrix& g) {
    p.require_same(g, "row_softmax_vjp");
    Matrix d(p.rows(), p.cols());
    for (std::size_t i = 0; i < p.rows(); ++i) {
        auto pi = p.row(i);
        auto gi = g.row(i);
        double inner = 0.0;
        for (std::size_t j = 0; j < pi.size(); ++j) inner += pi[j] * gi[j];
        auto di = d.row(i);
        for (std::size_t j = 0; j < pi.size(); ++j) di[j] = pi[j] * (gi[j] - inner);
    }
    return d;
}

inline constexpr double kDefaultNormEps = 1e-12;

inline double row_norm(std::span<const double> r) noexcept {
    double s = 0.0;
    for (double v : r) s += v * v;
    return std::sqrt(s);
}

/// Rows scaled to unit Euclidean norm; rows with norm below eps become zero.
inline Matrix row_normalize(const Matrix& m, double eps = kDefaultNormEps) {
    Matrix out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const double n = row_norm(m.row(i));
        if (n < eps) continue;
        auto in = m.row(i);
        auto o = out.row(i);
        for (std::size_t j = 0; j < in.size(); ++j) o[j] = in[j] / n;
    }
    return out;
}

/// VJP of row_normalize at input m: (g − u(u·g)) / ‖m_i‖ per row, zero for guarded rows.
inline Matrix row_normalize_vjp(const Matrix& m, const Matrix& g, double eps = kDefaultNormEps) {
    m.require_same(g, "row_normalize_vjp");
    Matrix d(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto mi = m.row(i);
        const double n = row_norm(mi);
        if (n < eps) continue;
        auto gi = g.row(i);
        double ug = 0.0;
        for (std::size_t j = 0; j < mi.size(); ++j) ug += mi[j] * gi[j];
        ug /= n;
        auto di = d.row(i);
        for (std::size_t j = 0; j < mi.size(); ++j) di[j] = (gi[j] - (mi[j] / n) * ug) / n;
    }
    return d;
}

/// Central-difference gradient of a scalar function, one entry at a time.
inline Matrix fd_gradient(const std::function<double(const Matrix&)>& f, const Matrix& x, double h = 1e-6) {
    if (!(h > 0.0)) throw std::invalid_argument("fd_gradient: step must be positive");
    Matrix g(x.rows(), x.cols());
    Matrix probe = x;
    auto pd = probe.data();
    auto gd = g.data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
        const double orig = pd[i];
        pd[i] = orig + h;
        const double up = f(probe);
        pd[i] = orig - h;
        const double down = f(probe);
        pd[i] = orig;
        gd[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// max|a−b| / max(max|a|, max|b|, floor); the floor keeps all-zero gradients comparable.
inline double relative_error(const Matrix& a, const Matrix& b, double floor = 1e-8) {
    a.require_same(b, "relative_error");
    double diff = 0.0;
    double scale = floor;
    auto ad = a.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < ad.size(); ++i) {
        diff = std::max(diff, std::abs(ad[i] - bd[i]));
        scale = std::max({scale, std::abs(ad[i]), std::abs(bd[i])});
    }
    return diff / scale;
}

}  // namespace headdiv
