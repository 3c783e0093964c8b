#include <gtest/gtest.h>

#include <random>

#include "ebds/model.hpp"

using namespace ebds;

namespace {

Matrix col(double v) { return Matrix::Constant(1, 1, v); }

} // namespace

TEST(BuiltinSpec, ExampleConstants) {
    const auto ou = builtin_spec(ExampleId::LinearOU);
    EXPECT_EQ(ou.d, 1);
    EXPECT_EQ(ou.d_obs, 1);
    EXPECT_DOUBLE_EQ(ou.dt, 0.01);
    EXPECT_EQ(ou.horizon_steps, 100);
    EXPECT_DOUBLE_EQ(ou.drift(col(2.0))(0, 0), -2.0);
    EXPECT_DOUBLE_EQ(ou.prior_cov(0, 0), 1.0);

    EXPECT_EQ(builtin_spec(ExampleId::MeanRevertingCubic).horizon_steps, 100);
    const auto bi = builtin_spec(ExampleId::Bistable);
    EXPECT_EQ(bi.horizon_steps, 50);
    EXPECT_DOUBLE_EQ(bi.drift(col(0.0))(0, 0), 0.0);

    const auto sm = builtin_spec(ExampleId::SpringMass);
    EXPECT_EQ(sm.d, 20);
    EXPECT_EQ(sm.d_obs, 10);
    EXPECT_EQ(sm.horizon_steps, 50);
}

TEST(BuiltinSpec, SpringMassDriftBlocks) {
    const auto p = ModelParams::defaults(ExampleId::SpringMass);
    const Matrix A = spring_mass_drift_matrix(p);
    const int m = p.masses;
    const auto A21 = A.block(m, 0, m, m);
    const auto A22 = A.block(m, m, m, m);
    EXPECT_DOUBLE_EQ(A21(0, 0), -10.0);
    EXPECT_TRUE(A.block(0, 0, m, m).isZero());
    EXPECT_TRUE(A.block(0, m, m, m).isIdentity());
    for (int i = 0; i < m; ++i) {
        EXPECT_DOUBLE_EQ(A21(i, i), -10.0);
        EXPECT_DOUBLE_EQ(A22(i, i), -0.2);
        for (int j = 0; j < m; ++j) {
            if (i == j) continue;
            EXPECT_DOUBLE_EQ(A21(i, j), std::abs(i - j) == 1 ? 5.0 : 0.0);
            EXPECT_DOUBLE_EQ(A22(i, j), 0.0);
        }
    }
}

TEST(BuiltinSpec, SpringMassMeasurementPattern) {
    const Matrix H = spring_mass_measurement(10);
    ASSERT_EQ(H.rows(), 10);
    ASSERT_EQ(H.cols(), 20);
    EXPECT_DOUBLE_EQ(H.sum(), 10.0);
    // 1-based H(i, 2i-1) for i <= 5 and H(j, 2j) for j >= 6.
    for (int i = 1; i <= 5; ++i) EXPECT_DOUBLE_EQ(H(i - 1, 2 * i - 2), 1.0);
    for (int j = 6; j <= 10; ++j) EXPECT_DOUBLE_EQ(H(j - 1, 2 * j - 1), 1.0);
}

TEST(BuiltinSpec, ParseExample) {
    EXPECT_EQ(parse_example("bistable"), ExampleId::Bistable);
    EXPECT_THROW(parse_example("nope"), InvalidArgument);
}

TEST(BuiltinSpec, JacobianAndDivergenceMatchFiniteDifferences) {
    std::mt19937_64 gen(5);
    std::uniform_real_distribution<double> U(-5.0, 5.0);
    for (auto id : {ExampleId::LinearOU, ExampleId::MeanRevertingCubic, ExampleId::Bistable, ExampleId::SpringMass}) {
        const auto spec = builtin_spec(id);
        for (int t = 0; t < 100; ++t) {
            Vector x(spec.d);
            for (int k = 0; k < spec.d; ++k) x(k) = U(gen);
            const Matrix J = spec.drift_jacobian(x);
            Matrix fd(spec.d, spec.d);
            const double h = 1e-5;
            for (int k = 0; k < spec.d; ++k) {
                Vector a = x, b = x;
                a(k) += h;
                b(k) -= h;
                fd.col(k) = (spec.drift_at(a) - spec.drift_at(b)) / (2 * h);
            }
            EXPECT_LT((J - fd).norm(), 1e-6 * std::max(1.0, J.norm())) << to_string(id);
            EXPECT_NEAR(spec.drift_divergence_at(x), J.trace(), 1e-6 * std::max(1.0, std::abs(J.trace())));
        }
    }
}

TEST(ZakaiF, HandExpansions) {
    const auto ou = builtin_spec(ExampleId::LinearOU);
    EXPECT_DOUBLE_EQ(zakai_f(ou, Vector::Constant(1, 1.0), 1.0, Vector::Zero(1)), 1.0);
    const auto cubic = builtin_spec(ExampleId::MeanRevertingCubic);
    EXPECT_DOUBLE_EQ(zakai_f(cubic, Vector::Constant(1, 1.0), 1.0, Vector::Constant(1, 1.0)), 8.0);
    for (auto id : {ExampleId::LinearOU, ExampleId::Bistable, ExampleId::SpringMass}) {
        const auto s = builtin_spec(id);
        EXPECT_DOUBLE_EQ(zakai_f(s, Vector::Constant(s.d, 0.7), 0.0, Vector::Zero(s.d)), 0.0);
    }
}

TEST(ZakaiF, LinearInValueAndGradient) {
    std::mt19937_64 gen(9);
    std::normal_distribution<double> N01;
    for (auto id : {ExampleId::MeanRevertingCubic, ExampleId::Bistable, ExampleId::SpringMass}) {
        const auto s = builtin_spec(id);
        for (int t = 0; t < 20; ++t) {
            Vector x(s.d), v1(s.d), v2(s.d);
            for (int k = 0; k < s.d; ++k) {
                x(k) = N01(gen);
                v1(k) = N01(gen);
                v2(k) = N01(gen);
            }
            const double u1 = N01(gen), u2 = N01(gen), a = N01(gen), b = N01(gen);
            const double lhs = zakai_f(s, x, a * u1 + b * u2, a * v1 + b * v2);
            const double rhs = a * zakai_f(s, x, u1, v1) + b * zakai_f(s, x, u2, v2);
            EXPECT_NEAR(lhs, rhs, 1e-10 * (1.0 + std::abs(lhs)));
        }
    }
}

TEST(ZakaiF, RejectsNonFinite) {
    const auto ou = builtin_spec(ExampleId::LinearOU);
    EXPECT_THROW(zakai_f(ou, Vector::Constant(1, NAN), 1.0, Vector::Zero(1)), InvalidArgument);
    EXPECT_THROW(zakai_f(ou, Vector::Zero(1), INFINITY, Vector::Zero(1)), InvalidArgument);
}

TEST(ZakaiF, StateDependentDiffusionTerms) {
    // sigma(x) = x in 1-d: a = x^2, d/dx a = 2x, 1/2 d2/dx2 a = 1.
    auto s = builtin_spec(ExampleId::LinearOU);
    s.constant_diffusion.reset();
    s.diffusion = [](const Vector &x) -> Matrix { return Matrix::Constant(1, 1, x(0)); };
    s.diffusion_row_divergence = [](const Matrix &x) -> Matrix { return 2.0 * x; };
    s.diffusion_hessian_trace = [](const Matrix &x) -> RowVector { return RowVector::Ones(x.cols()); };
    // f = 2x v + u + u - 2(-x) v at x = 1, u = 1, v = 1: 2 + 1 + 1 + 2 = 6.
    EXPECT_DOUBLE_EQ(zakai_f(s, Vector::Constant(1, 1.0), 1.0, Vector::Constant(1, 1.0)), 6.0);
}

TEST(ZakaiB, Values) {
    const auto ou = builtin_spec(ExampleId::LinearOU);
    EXPECT_DOUBLE_EQ(zakai_b(ou, Vector::Constant(1, 3.0), 2.0)(0), 6.0);
    EXPECT_TRUE(zakai_b(ou, Vector::Constant(1, 3.0), 0.0).isZero());

    const auto sm = builtin_spec(ExampleId::SpringMass);
    const Vector b = zakai_b(sm, Vector::Unit(20, 0), 1.0);
    EXPECT_TRUE(b.isApprox(Vector::Unit(10, 0)));
}

TEST(ZakaiB, HomogeneousInValue) {
    const auto sm = builtin_spec(ExampleId::SpringMass);
    const Vector x = Vector::LinSpaced(20, -2.0, 3.0);
    EXPECT_TRUE(zakai_b(sm, x, -2.5).isApprox(-2.5 * zakai_b(sm, x, 1.0)));
}

TEST(ZakaiBPrime, ScalarOnly) {
    EXPECT_DOUBLE_EQ(zakai_b_prime(builtin_spec(ExampleId::LinearOU), 2.0), 2.0);
    EXPECT_DOUBLE_EQ(zakai_b_prime(builtin_spec(ExampleId::LinearOU), 0.0), 0.0);
    EXPECT_DOUBLE_EQ(zakai_b_prime(builtin_spec(ExampleId::Bistable), -1.5), -1.5);
    EXPECT_THROW(zakai_b_prime(builtin_spec(ExampleId::SpringMass), Matrix::Zero(20, 1)), UnsupportedOperation);
}

TEST(ModelSpec, ValidationAndHash) {
    auto s = builtin_spec(ExampleId::LinearOU);
    EXPECT_EQ(s.hash(), builtin_spec(ExampleId::LinearOU).hash());
    EXPECT_NE(s.hash(), builtin_spec(ExampleId::MeanRevertingCubic).hash());
    s.prior_cov(0, 0) = -1.0;
    EXPECT_THROW(s.validate(), InvalidArgument);
    auto p = ModelParams::defaults(ExampleId::LinearOU);
    p.dt = 0.0;
    EXPECT_THROW(make_spec(p), InvalidArgument);
}

TEST(ModelParams, JsonRoundTrip) {
    auto p = ModelParams::defaults(ExampleId::SpringMass);
    p.stiffness[3] = 7.0;
    io::json j = p;
    const auto q = j.get<ModelParams>();
    EXPECT_EQ(make_spec(p).hash(), make_spec(q).hash());
}
