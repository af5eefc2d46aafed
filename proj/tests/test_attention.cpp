// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "headdiv/attention.hpp"
#include "oracles.hpp"

using namespace headdiv;

namespace {

HeadParams random_head(std::size_t d, std::size_t h, Rng& rng) {
    return {oracle::random_matrix(d, h, rng), oracle::random_matrix(d, h, rng), oracle::random_matrix(d, h, rng)};
}

LayerParams random_layer(std::size_t d, std::size_t h, const std::vector<HeadMechanism>& mechs, Rng& rng) {
    LayerParams p;
    for (const auto& m : mechs) p.heads.push_back(make_head(random_head(d, h, rng), m));
    p.w_out = oracle::random_matrix(mechs.size() * h, d, rng);
    return p;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mse(const Matrix& a, const Matrix& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::pow(a.data()[i] - b.data()[i], 2);
    return s / static_cast<double>(a.size());
}

}  // namespace

TEST(ContextMask, DiagonalWindowIsIdentity) {
    EXPECT_EQ(build_context_mask(3, 0, 0), Matrix::identity(3));
}

TEST(ContextMask, SentinelGivesFullContext) {
    EXPECT_EQ(build_context_mask(3, 3, 3), Matrix(3, 3, 1.0));
    EXPECT_EQ(build_context_mask(3, 100, 7), Matrix(3, 3, 1.0));
}

TEST(ContextMask, OneLeftStepIsLowerBidiagonal) {
    Matrix m = build_context_mask(4, 1, 0);
    for (long t = 0; t < 4; ++t)
        for (long s = 0; s < 4; ++s) EXPECT_EQ(m(t, s), (s == t || s == t - 1) ? 1.0 : 0.0) << t << "," << s;
}

TEST(ContextMask, MatchesInequalityForAllSmallWindows) {
    for (std::size_t t_len = 1; t_len <= 6; ++t_len)
        for (std::size_t l = 0; l <= 7; ++l)
            for (std::size_t r = 0; r <= 7; ++r) {
                Matrix m = build_context_mask(t_len, l, r);
                for (long t = 0; t < static_cast<long>(t_len); ++t)
                    for (long s = 0; s < static_cast<long>(t_len); ++s) {
                        const bool inside = t - static_cast<long>(l) <= s && s <= t + static_cast<long>(r);
                        ASSERT_EQ(m(t, s), inside ? 1.0 : 0.0);
                    }
            }
}

TEST(SoftmaxHead, IdentityMaskGivesIdentityAttention) {
    Rng rng(1);
    Matrix x = oracle::random_matrix(5, 3, rng);
    HeadParams p = random_head(3, 2, rng);
    HeadTrace tr = head_forward_softmax(x, p, build_context_mask(5, 0, 0), 0.5);
    EXPECT_EQ(*tr.a, Matrix::identity(5));
    EXPECT_EQ(tr.y, tr.v);
}

TEST(SoftmaxHead, SingleStepSequence) {
    Rng rng(2);
    Matrix x = oracle::random_matrix(1, 3, rng);
    HeadParams p = random_head(3, 2, rng);
    for (double scale : {0.01, 1.0, 100.0}) {
        HeadTrace tr = head_forward_softmax(x, p, Matrix(1, 1, 1.0), scale);
        EXPECT_EQ(*tr.a, (Matrix{{1.0}}));
        EXPECT_EQ(tr.y, tr.v);
    }
}

TEST(SoftmaxHead, MatchesNaivePerRowOracle) {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        Matrix x = oracle::random_matrix(4, 3, rng);
        HeadParams p = random_head(3, 2, rng);
        HeadTrace full = head_forward_softmax(x, p, build_context_mask(4, 4, 4), 0.5);
        EXPECT_LE(relative_error(full.y, oracle::naive_head(x, p, 0.5, 4, 4)), 1e-12);
        HeadTrace win = head_forward_softmax(x, p, build_context_mask(4, 1, 2), 0.5);
        EXPECT_LE(relative_error(win.y, oracle::naive_head(x, p, 0.5, 1, 2)), 1e-12);
    }
}

TEST(SoftmaxHead, MaskedEntriesAreExactlyZero) {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t t_len = 2 + trial % 6;
        const std::size_t l = trial % 3;
        const std::size_t r = (trial / 3) % 3;
        Matrix x = oracle::random_matrix(t_len, 3, rng, -3.0, 3.0);
        HeadTrace tr = head_forward_softmax(x, random_head(3, 2, rng), build_context_mask(t_len, l, r), 1.0);
        for (long t = 0; t < static_cast<long>(t_len); ++t) {
            double row = 0.0;
            for (long s = 0; s < static_cast<long>(t_len); ++s) {
                const double a = (*tr.a)(t, s);
                row += a;
                if (s < t - static_cast<long>(l) || s > t + static_cast<long>(r)) {
                    EXPECT_EQ(a, 0.0);
                } else {
                    EXPECT_GE(a, 0.0);
                }
            }
            EXPECT_NEAR(row, 1.0, 1e-9);
        }
    }
}

TEST(SoftmaxHead, FullContextIsPermutationEquivariant) {
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t t_len = 6;
        Matrix x = oracle::random_matrix(t_len, 4, rng);
        HeadParams p = random_head(4, 3, rng);
        std::vector<std::size_t> perm(t_len);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Matrix px(t_len, 4);
        for (std::size_t t = 0; t < t_len; ++t)
            for (std::size_t j = 0; j < 4; ++j) px(t, j) = x(perm[t], j);
        Matrix mask(t_len, t_len, 1.0);
        Matrix y = head_forward_softmax(x, p, mask, 1.0 / 3.0).y;
        Matrix py = head_forward_softmax(px, p, mask, 1.0 / 3.0).y;
        for (std::size_t t = 0; t < t_len; ++t)
            for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(py(t, j), y(perm[t], j), 1e-12);
    }
}

TEST(FavorFeatureMap, ZeroInputGivesConstantFeatures) {
    Rng rng(6);
    Matrix omega = normal_matrix(3, 16, rng);
    Matrix phi = favor_feature_map(Matrix(2, 3), omega);
    for (double v : phi.data()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(FavorFeatureMap, HandEvaluatedSingleFeature) {
    // exp(1 - 0.5) with r = 1
    Matrix phi = favor_feature_map(Matrix{{1.0, 0.0}}, Matrix{{1.0}, {0.0}});
    EXPECT_NEAR(phi(0, 0), std::exp(0.5), 1e-15);
}

TEST(FavorFeatureMap, KernelIsUnbiasedForExpDotProduct) {
    const Matrix q{{0.3, -0.2}};
    const Matrix k{{0.1, 0.4}};
    const double target = std::exp(0.3 * 0.1 - 0.2 * 0.4);
    double acc = 0.0;
    const int seeds = 10000;
    for (int s = 0; s < seeds; ++s) {
        Matrix omega = favor_projection(2, Favor{4, static_cast<std::uint64_t>(s)});
        acc += dot(favor_feature_map(q, omega), favor_feature_map(k, omega));
    }
    EXPECT_NEAR(acc / seeds, target, 0.05 * target);
}

TEST(FavorFeatureMap, VjpMatchesFiniteDifferences) {
    Rng rng(7);
    Matrix x = oracle::random_matrix(3, 2, rng);
    Matrix omega = normal_matrix(2, 5, rng);
    Matrix g = oracle::random_matrix(3, 5, rng);
    auto f = [&](const Matrix& m) { return dot(favor_feature_map(m, omega), g); };
    Matrix analytic = favor_feature_map_vjp(x, favor_feature_map(x, omega), g, omega);
    EXPECT_LE(relative_error(analytic, fd_gradient(f, x)), 1e-6);
}

TEST(FavorHead, MaterializedAttentionIsRowStochasticAndPositive) {
    Rng rng(8);
    Matrix x = oracle::random_matrix(5, 3, rng);
    HeadParams p = random_head(3, 2, rng);
    HeadTrace tr = head_forward_favor(x, p, favor_projection(2, Favor{32, 9}), 0.5, true);
    ASSERT_TRUE(tr.a.has_value());
    for (std::size_t t = 0; t < 5; ++t) {
        double s = 0.0;
        for (double v : tr.a->row(t)) {
            EXPECT_GT(v, 0.0);
            s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
    EXPECT_LE(relative_error(matmul(*tr.a, tr.v), tr.y), 1e-12);
    EXPECT_FALSE(head_forward_favor(x, p, favor_projection(2, Favor{32, 9}), 0.5, false).a.has_value());
}

TEST(FavorHead, ConstantValuesPassThrough) {
    // first input column is all ones and W_v copies it, so V is all ones
    Rng rng(9);
    HeadParams p = random_head(3, 2, rng);
    p.w_value = Matrix{{1, 1}, {0, 0}, {0, 0}};
    Matrix x{{1, 0.3, -0.2}, {1, -0.5, 0.1}, {1, 0.7, 0.4}, {1, 0.0, -0.6}};
    HeadTrace tr = head_forward_favor(x, p, favor_projection(2, Favor{8, 3}), 0.5, false);
    for (double v : tr.y.data()) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(FavorHead, ApproximationImprovesWithMoreFeatures) {
    Rng rng(10);
    Matrix x = oracle::random_matrix(3, 2, rng);
    HeadParams p = random_head(2, 2, rng);
    const double scale = 0.5;
    Matrix exact = head_forward_softmax(x, p, Matrix(3, 3, 1.0), scale).y;
    std::vector<double> small;
    std::vector<double> large;
    for (std::uint64_t s = 0; s < 20; ++s) {
        small.push_back(mse(head_forward_favor(x, p, favor_projection(2, Favor{2048, s}), scale, false).y, exact));
        large.push_back(mse(head_forward_favor(x, p, favor_projection(2, Favor{4096, s + 1000}), scale, false).y, exact));
    }
    EXPECT_LT(median(large), median(small));
}

TEST(Layer, SingleHeadWithIdentityProjection) {
    Rng rng(11);
    LayerParams lp = random_layer(3, 3, {SoftmaxFull{}}, rng);
    lp.w_out = Matrix::identity(3);
    Matrix x = oracle::random_matrix(4, 3, rng);
    LayerOutput out = layer_forward(x, lp, ScaleMode::paper);
    EXPECT_EQ(out.y, out.traces[0].y);
}

TEST(Layer, NullProjectionGivesZeroOutput) {
    Rng rng(12);
    LayerParams lp = random_layer(3, 2, {SoftmaxFull{}, SoftmaxWindow{1, 1}, Favor{16, 2}}, rng);
    lp.w_out = Matrix(6, 3);
    EXPECT_EQ(layer_forward(oracle::random_matrix(5, 3, rng), lp, ScaleMode::standard).y, Matrix(5, 3));
}

TEST(Layer, MatchesBlockConcatenationOracle) {
    Rng rng(13);
    LayerParams lp = random_layer(3, 2, {SoftmaxFull{}, SoftmaxWindow{1, 0}}, rng);
    Matrix x = oracle::random_matrix(4, 3, rng);
    const double scale = attention_scale(ScaleMode::paper, 2);
    std::vector<Matrix> heads = {oracle::naive_head(x, lp.heads[0].weights, scale, 4, 4),
                                 oracle::naive_head(x, lp.heads[1].weights, scale, 1, 0)};
    EXPECT_LE(relative_error(layer_forward(x, lp, ScaleMode::paper).y, oracle::naive_layer(x, heads, lp.w_out)), 1e-12);
}

TEST(Layer, ForwardIsBitDeterministic) {
    Rng rng(14);
    LayerParams lp = random_layer(4, 2, {SoftmaxFull{}, Favor{8, 5}}, rng);
    Matrix x = oracle::random_matrix(6, 4, rng);
    EXPECT_EQ(layer_forward(x, lp, ScaleMode::paper).y, layer_forward(x, lp, ScaleMode::paper).y);
}

TEST(Layer, ScaleModes) {
    EXPECT_DOUBLE_EQ(attention_scale(ScaleMode::paper, 8), 0.125);
    EXPECT_DOUBLE_EQ(attention_scale(ScaleMode::standard, 4), 0.5);
}

TEST(Layer, RejectsBadShapes) {
    Rng rng(15);
    LayerParams lp = random_layer(3, 2, {SoftmaxFull{}, SoftmaxFull{}}, rng);
    EXPECT_THROW(layer_forward(Matrix(4, 5), lp, ScaleMode::paper), ShapeError);
    lp.w_out = Matrix(3, 3);
    EXPECT_THROW(layer_forward(Matrix(4, 3), lp, ScaleMode::paper), ShapeError);
    EXPECT_THROW(layer_forward(Matrix(4, 3), LayerParams{}, ScaleMode::paper), ShapeError);
}

namespace {

// loss = sum(layer_forward(x) ⊙ G); checks every weight and the input.
void check_layer_gradients(const std::vector<HeadMechanism>& mechs, ScaleMode mode, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t t_len = 4;
    const std::size_t d = 3;
    const std::size_t h = 2;
    LayerParams lp = random_layer(d, h, mechs, rng);
    Matrix x = oracle::random_matrix(t_len, d, rng);
    Matrix g = oracle::random_matrix(t_len, d, rng);
    LayerOutput out = layer_forward(x, lp, mode);
    LayerBackward bw = layer_backward(g, x, lp, out.traces, mode);

    auto loss_with = [&](LayerParams p, const Matrix& xin) { return dot(layer_forward(xin, p, mode).y, g); };
    EXPECT_LE(relative_error(bw.d_x, fd_gradient([&](const Matrix& m) { return loss_with(lp, m); }, x)), 1e-4);
    EXPECT_LE(relative_error(bw.grads.w_out, fd_gradient([&](const Matrix& m) {
                                 LayerParams p = lp;
                                 p.w_out = m;
                                 return loss_with(p, x);
                             }, lp.w_out)),
              1e-4);
    for (std::size_t n = 0; n < mechs.size(); ++n) {
        for (int which = 0; which < 3; ++which) {
            auto pick = [&](HeadParams& hp) -> Matrix& {
                return which == 0 ? hp.w_query : which == 1 ? hp.w_key : hp.w_value;
            };
            const Matrix& analytic = which == 0   ? bw.grads.heads[n].w_query
                                     : which == 1 ? bw.grads.heads[n].w_key
                                                  : bw.grads.heads[n].w_value;
            Matrix numeric = fd_gradient([&](const Matrix& m) {
                LayerParams p = lp;
                pick(p.heads[n].weights) = m;
                return loss_with(p, x);
            }, pick(lp.heads[n].weights));
            EXPECT_LE(relative_error(analytic, numeric), 1e-4)
                << "head " << n << " (" << describe(mechs[n]) << ") weight " << which;
        }
    }
}

}  // namespace

TEST(LayerBackward, ZeroUpstreamGivesZeroGradients) {
    Rng rng(16);
    LayerParams lp = random_layer(3, 2, {SoftmaxFull{}, Favor{8, 1}}, rng);
    Matrix x = oracle::random_matrix(4, 3, rng);
    LayerOutput out = layer_forward(x, lp, ScaleMode::paper);
    LayerBackward bw = layer_backward(Matrix(4, 3), x, lp, out.traces, ScaleMode::paper);
    EXPECT_EQ(bw.d_x, Matrix(4, 3));
    EXPECT_EQ(bw.grads.w_out, Matrix(4, 3));
    for (const auto& h : bw.grads.heads) {
        EXPECT_EQ(h.w_query, Matrix(3, 2));
        EXPECT_EQ(h.w_key, Matrix(3, 2));
        EXPECT_EQ(h.w_value, Matrix(3, 2));
    }
}

TEST(LayerBackward, FullSoftmaxMatchesFiniteDifferences) {
    check_layer_gradients({SoftmaxFull{}, SoftmaxFull{}}, ScaleMode::paper, 17);
    check_layer_gradients({SoftmaxFull{}, SoftmaxFull{}}, ScaleMode::standard, 18);
}

TEST(LayerBackward, WindowedHeadMatchesFiniteDifferences) {
    check_layer_gradients({SoftmaxWindow{1, 0}, SoftmaxWindow{0, 1}}, ScaleMode::paper, 19);
}

TEST(LayerBackward, FavorAndMixedHeadsMatchFiniteDifferences) {
    check_layer_gradients({Favor{16, 3}, Favor{16, 4}}, ScaleMode::paper, 20);
    check_layer_gradients({SoftmaxFull{}, SoftmaxWindow{1, 1}, Favor{8, 5}}, ScaleMode::standard, 21);
}

TEST(LayerBackward, DirectTraceGradientsMatchFiniteDifferences) {
    // loss = sum(y ⊙ G) + Σ_n sum(A_n ⊙ R_n) + sum(Q_0 ⊙ S): exercises the extra-gradient routes.
    Rng rng(22);
    const ScaleMode mode = ScaleMode::paper;
    LayerParams lp = random_layer(3, 2, {SoftmaxWindow{1, 1}, Favor{16, 6}}, rng);
    Matrix x = oracle::random_matrix(4, 3, rng);
    Matrix g = oracle::random_matrix(4, 3, rng);
    std::vector<Matrix> r = {oracle::random_matrix(4, 4, rng), oracle::random_matrix(4, 4, rng)};
    Matrix s = oracle::random_matrix(4, 2, rng);
    Matrix yv = oracle::random_matrix(4, 2, rng);
    auto loss = [&](const Matrix& xin) {
        LayerOutput o = layer_forward(xin, lp, mode, true);
        return dot(o.y, g) + dot(*o.traces[0].a, r[0]) + dot(*o.traces[1].a, r[1]) + dot(o.traces[0].q, s) +
               dot(o.traces[1].y, yv);
    };
    LayerOutput out = layer_forward(x, lp, mode, true);
    std::vector<TraceGrad> extra(2);
    extra[0].a = r[0];
    extra[1].a = r[1];
    extra[0].q = s;
    extra[1].y = yv;
    LayerBackward bw = layer_backward(g, x, lp, out.traces, mode, extra);
    EXPECT_LE(relative_error(bw.d_x, fd_gradient(loss, x)), 1e-4);
}

TEST(LayerBackward, RejectsMismatchedTraces) {
    Rng rng(23);
    LayerParams lp = random_layer(3, 2, {SoftmaxFull{}, SoftmaxFull{}}, rng);
    Matrix x = oracle::random_matrix(4, 3, rng);
    LayerOutput out = layer_forward(x, lp, ScaleMode::paper);
    std::vector<HeadTrace> one(out.traces.begin(), out.traces.begin() + 1);
    EXPECT_THROW(layer_backward(Matrix(4, 3), x, lp, one, ScaleMode::paper), ContractError);
    EXPECT_THROW(layer_backward(Matrix(4, 3), oracle::random_matrix(5, 3, rng), lp, out.traces, ScaleMode::paper),
                 ContractError);
}
