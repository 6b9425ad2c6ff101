#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedproj/nn.hpp"
#include "oracle.hpp"
#include "test_util.hpp"

namespace {

using namespace fedproj;
using fedproj::testing::random_matrix;
using fedproj::testing::random_mlp;
using fedproj::testing::rows_of;
using fedproj::testing::to_vec;

TEST(MlpShape, RejectsDegenerateShapes) {
    EXPECT_THROW(MlpShape({3}), std::invalid_argument);
    EXPECT_THROW(MlpShape({2, 0, 3}), std::invalid_argument);
}

TEST(MlpShape, ParamCountFormula) {
    EXPECT_EQ((MlpShape{2, 4, 3}).param_count(), 2u * 4 + 4 + 4 * 3 + 3);
    EXPECT_EQ((MlpShape{2, 16, 16, 3}).param_count(), 2u * 16 + 16 + 16 * 16 + 16 + 16 * 3 + 3);
}

TEST(MlpInit, Deterministic) {
    EXPECT_EQ(mlp_init({2, 4, 3}, 7), mlp_init({2, 4, 3}, 7));
    EXPECT_FALSE(mlp_init({2, 4, 3}, 7) == mlp_init({2, 4, 3}, 8));
}

TEST(MlpInit, BiasesZeroWeightsWithinGlorotBound) {
    const MlpShape shape{2, 4, 3};
    const Mlp m = mlp_init(shape, 7);
    const std::vector<int> s = shape.sizes();
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        EXPECT_TRUE((m.biases[l].array() == 0.0).all());
        const double bound = std::sqrt(6.0 / (s[l] + s[l + 1]));
        EXPECT_LE(m.weights[l].cwiseAbs().maxCoeff(), bound);
        EXPECT_GT(m.weights[l].cwiseAbs().maxCoeff(), 0.0);
    }
}

TEST(Forward, ZeroNetGivesZeroLogits) {
    std::mt19937_64 rng(1);
    const auto z = forward(zero_mlp({3, 5, 4}), random_matrix(6, 3, rng));
    EXPECT_EQ(z.rows(), 6);
    EXPECT_EQ(z.cols(), 4);
    EXPECT_TRUE((z.array() == 0.0).all());
}

TEST(Forward, IdentityLayer) {
    Mlp m = zero_mlp({2, 2});
    m.weights[0] = Matrix::Identity(2, 2);
    Matrix x(1, 2);
    x << 3, -1;
    const auto z = forward(m, x);
    EXPECT_EQ(z(0, 0), 3.0);
    EXPECT_EQ(z(0, 1), -1.0);
}

TEST(Forward, MatchesNaiveLoops) {
    std::mt19937_64 rng(3);
    for (const MlpShape& shape : {MlpShape{2, 3, 3}, MlpShape{4, 8, 8, 3}}) {
        const Mlp m = random_mlp(shape, rng, 1.0);
        const Matrix x = random_matrix(5, shape.input_dim(), rng);
        const auto z = forward(m, x);
        const auto flat = to_vec(flatten(m));
        const auto xs = rows_of(x);
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const auto ref = oracle::naive_forward(shape.sizes(), flat, xs[i]);
            for (std::size_t c = 0; c < ref.size(); ++c) {
                EXPECT_NEAR(z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)), ref[c], 1e-12);
            }
        }
    }
}

TEST(Forward, RowPermutationPermutesLogits) {
    std::mt19937_64 rng(4);
    const Mlp m = random_mlp({3, 6, 2}, rng);
    const Matrix x = random_matrix(4, 3, rng);
    Matrix xp(4, 3);
    const int perm[] = {2, 0, 3, 1};
    for (int i = 0; i < 4; ++i) xp.row(i) = x.row(perm[i]);
    const auto z = forward(m, x);
    const auto zp = forward(m, xp);
    for (int i = 0; i < 4; ++i) EXPECT_TRUE((zp.row(i).array() == z.row(perm[i]).array()).all());
}

TEST(Forward, RejectsWrongInputWidth) {
    std::mt19937_64 rng(1);
    EXPECT_THROW(forward(zero_mlp({3, 2}), random_matrix(2, 4, rng)), DimensionError);
}

TEST(Softmax, UniformRow) {
    const auto p = softmax(Matrix::Zero(1, 3), 1.0);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(p(0, c), 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ShiftInvariant) {
    Matrix a(1, 3), b(1, 3);
    a << 0.0, 0.5, 1.0;
    b << 100.0, 100.5, 101.0;
    const auto pa = softmax(a, 1.0);
    const auto pb = softmax(b, 1.0);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(pa(0, c), pb(0, c), 1e-14);
}

TEST(Softmax, TemperatureMatchesScalarOracle) {
    Matrix z(1, 3);
    z << 1, 2, 3;
    const auto p = softmax(z, 3.0);
    const auto ref = oracle::naive_softmax({1, 2, 3}, 3.0);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(p(0, c), ref[static_cast<std::size_t>(c)], 1e-15);
}

TEST(Softmax, RowsSumToOneOnExtremeLogits) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-700.0, 700.0);
    Matrix z(200, 5);
    for (Eigen::Index i = 0; i < z.rows(); ++i)
        for (Eigen::Index j = 0; j < z.cols(); ++j) z(i, j) = u(rng);
    const auto p = softmax(z, 1.0);
    ASSERT_TRUE(p.allFinite());
    EXPECT_TRUE((p.array() >= 0.0).all());
    for (Eigen::Index i = 0; i < p.rows(); ++i) EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-12);
}

TEST(Softmax, RejectsNonPositiveTemperature) {
    EXPECT_THROW(softmax(Matrix::Zero(1, 3), 0.0), std::invalid_argument);
    EXPECT_THROW(softmax(Matrix::Zero(1, 3), -1.0), std::invalid_argument);
}

TEST(ArgmaxRows, TiesGoToLowestIndex) {
    Matrix z(2, 3);
    z << 1, 1, 0, 0, 2, 2;
    EXPECT_EQ(argmax_rows(z), (std::vector<int>{0, 1}));
}

TEST(CeLoss, ZeroNetIsLogClasses) {
    std::mt19937_64 rng(2);
    const std::vector<int> y{0, 1, 2, 1};
    const auto lg = ce_loss_grad(zero_mlp({2, 3}), random_matrix(4, 2, rng), y);
    EXPECT_NEAR(lg.loss, std::log(3.0), 1e-15);
}

TEST(CeLoss, MatchesNaiveLossAndFiniteDifferences) {
    std::mt19937_64 rng(21);
    const MlpShape shape{2, 4, 3};
    for (int trial = 0; trial < 5; ++trial) {
        const Mlp m = random_mlp(shape, rng);
        const Matrix x = random_matrix(6, 2, rng);
        const std::vector<int> y{0, 1, 2, 2, 1, 0};
        const auto lg = ce_loss_grad(m, x, y);
        const auto xs = rows_of(x);
        const auto f = [&](const oracle::Vec& p) { return oracle::naive_ce(shape.sizes(), p, xs, y); };
        EXPECT_NEAR(lg.loss, f(to_vec(flatten(m))), 1e-12);
        const auto fd = oracle::finite_diff_grad(f, to_vec(flatten(m)), 1e-5);
        EXPECT_LE(oracle::max_rel_error(to_vec(lg.grad), fd, 1e-4), 1e-5);
    }
}

TEST(CeLoss, DuplicatedBatchIsUnchanged) {
    std::mt19937_64 rng(8);
    const Mlp m = random_mlp({2, 5, 3}, rng);
    const Matrix x = random_matrix(3, 2, rng);
    Matrix xx(6, 2);
    xx << x, x;
    const std::vector<int> y{0, 2, 1};
    const std::vector<int> yy{0, 2, 1, 0, 2, 1};
    const auto a = ce_loss_grad(m, x, y);
    const auto b = ce_loss_grad(m, xx, yy);
    EXPECT_NEAR(a.loss, b.loss, 1e-14);
    EXPECT_LE((a.grad - b.grad).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(CeLoss, RejectsBadLabelsAndShapes) {
    std::mt19937_64 rng(1);
    const Mlp m = zero_mlp({2, 3});
    const Matrix x = random_matrix(2, 2, rng);
    const std::vector<int> bad{0, 3};
    const std::vector<int> neg{-1, 0};
    const std::vector<int> short_labels{0};
    EXPECT_THROW(ce_loss_grad(m, x, bad), std::out_of_range);
    EXPECT_THROW(ce_loss_grad(m, x, neg), std::out_of_range);
    EXPECT_THROW(ce_loss_grad(m, x, short_labels), DimensionError);
}

TEST(KlLoss, SelfTeacherIsZero) {
    std::mt19937_64 rng(6);
    const Mlp m = random_mlp({2, 4, 3}, rng);
    const Matrix x = random_matrix(5, 2, rng);
    const auto lg = kl_loss_grad(m, x, forward(m, x), 3.0);
    EXPECT_NEAR(lg.loss, 0.0, 1e-12);
    EXPECT_LE(lg.grad.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(KlLoss, PositiveWhenDistributionsDiffer) {
    std::mt19937_64 rng(6);
    const Mlp m = random_mlp({2, 4, 3}, rng);
    const Matrix x = random_matrix(5, 2, rng);
    const Matrix teacher = random_matrix(5, 3, rng, 2.0);
    EXPECT_GT(kl_loss_grad(m, x, teacher, 1.0).loss, 0.0);
    EXPECT_GT(kl_loss_grad(m, x, teacher, 3.0).loss, 0.0);
}

TEST(KlLoss, MatchesNaiveLossAndFiniteDifferences) {
    std::mt19937_64 rng(31);
    const MlpShape shape{2, 4, 3};
    for (double t : {1.0, 3.0}) {
        for (int trial = 0; trial < 5; ++trial) {
            const Mlp m = random_mlp(shape, rng);
            const Matrix x = random_matrix(6, 2, rng);
            const Matrix teacher = random_matrix(6, 3, rng, 2.0);
            const auto lg = kl_loss_grad(m, x, teacher, t);
            const auto xs = rows_of(x);
            const auto zs = rows_of(teacher);
            const auto f = [&](const oracle::Vec& p) { return oracle::naive_kl(shape.sizes(), p, xs, zs, t); };
            EXPECT_NEAR(lg.loss, f(to_vec(flatten(m))), 1e-12);
            const auto fd = oracle::finite_diff_grad(f, to_vec(flatten(m)), 1e-5);
            EXPECT_LE(oracle::max_rel_error(to_vec(lg.grad), fd, 1e-4), 1e-5);
        }
    }
}

TEST(KlLoss, RejectsMismatchedTeacher) {
    std::mt19937_64 rng(1);
    const Mlp m = zero_mlp({2, 3});
    const Matrix x = random_matrix(2, 2, rng);
    EXPECT_THROW(kl_loss_grad(m, x, Matrix::Zero(2, 4), 1.0), DimensionError);
    EXPECT_THROW(kl_loss_grad(m, x, Matrix::Zero(3, 3), 1.0), DimensionError);
    EXPECT_THROW(kl_loss_grad(m, x, Matrix::Zero(2, 3), 0.0), std::invalid_argument);
}

TEST(Flatten, RoundTripIsBitExact) {
    std::mt19937_64 rng(12);
    const MlpShape shape{3, 7, 5, 2};
    const Mlp m = random_mlp(shape, rng);
    EXPECT_EQ(unflatten(shape, flatten(m)), m);
    const auto v = flatten(m);
    EXPECT_TRUE((flatten(unflatten(shape, v)).array() == v.array()).all());
}

TEST(Flatten, ZeroModelAndLength) {
    const auto v = flatten(zero_mlp({2, 4, 3}));
    EXPECT_EQ(v.size(), 27);
    EXPECT_TRUE((v.array() == 0.0).all());
}

TEST(Flatten, LayoutIsWeightsRowMajorThenBiases) {
    Mlp m = zero_mlp({2, 2});
    m.weights[0] << 1, 2, 3, 4;
    m.biases[0] << 5, 6;
    const auto v = flatten(m);
    for (int i = 0; i < 6; ++i) EXPECT_EQ(v[i], i + 1.0);
}

TEST(Flatten, RejectsWrongLength) {
    EXPECT_THROW(unflatten({2, 4, 3}, ParamVector::Zero(26)), DimensionError);
}

TEST(Sgd, PlainStep) {
    ParamVector theta(2), g(2);
    theta << 1, 2;
    g << 0.5, -1;
    const auto r = sgd_step(theta, g, OptimizerState::zeros(2, 1.0, 0.0));
    EXPECT_EQ(r.params[0], 0.5);
    EXPECT_EQ(r.params[1], 3.0);
}

TEST(Sgd, ZeroGradientKeepsParams) {
    ParamVector theta(2);
    theta << 1, 2;
    const auto r = sgd_step(theta, ParamVector::Zero(2), OptimizerState::zeros(2, 0.1, 0.9));
    EXPECT_TRUE((r.params.array() == theta.array()).all());
}

TEST(Sgd, TwoMomentumStepsHandUnrolled) {
    ParamVector theta(1), g1(1), g2(1);
    theta << 1.0;
    g1 << 2.0;
    g2 << -1.0;
    auto r = sgd_step(theta, g1, OptimizerState::zeros(1, 0.1, 0.9));
    // v1 = 2, theta1 = 1 - 0.2 = 0.8
    EXPECT_NEAR(r.params[0], 0.8, 1e-15);
    r = sgd_step(r.params, g2, r.state);
    // v2 = 0.9 * 2 - 1 = 0.8, theta2 = 0.8 - 0.08 = 0.72
    EXPECT_NEAR(r.state.velocity[0], 0.8, 1e-15);
    EXPECT_NEAR(r.params[0], 0.72, 1e-15);
}

TEST(Sgd, RejectsBadStateAndLengths) {
    EXPECT_THROW(OptimizerState::zeros(2, 0.0, 0.5), std::invalid_argument);
    EXPECT_THROW(OptimizerState::zeros(2, 0.1, 1.0), std::invalid_argument);
    EXPECT_THROW(sgd_step(ParamVector::Zero(2), ParamVector::Zero(3), OptimizerState::zeros(2, 0.1, 0.0)),
                 DimensionError);
}

TEST(L2SqDist, Basics) {
    ParamVector a(2), b(2);
    a << 1, 2;
    b << 0, 0;
    EXPECT_EQ(l2_sq_dist(a, b), 5.0);
    EXPECT_EQ(l2_sq_dist(a, a), 0.0);
    EXPECT_EQ(l2_sq_dist(a, b), l2_sq_dist(b, a));
    EXPECT_THROW(l2_sq_dist(a, ParamVector::Zero(3)), DimensionError);
}

}  // namespace
