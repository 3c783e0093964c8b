#include <gtest/gtest.h>

#include <cmath>

#include "ebds/normalize.hpp"

using namespace ebds;

namespace {

DensityFn gaussian_kernel(double shift) {
    return [shift](const Matrix &x) -> RowVector { return (-0.5 * (x.array() - shift).square()).exp().matrix(); };
}

EnergyTarget quadratic_target(int d) {
    EnergyTarget t;
    t.dim = d;
    t.energy = [](const Matrix &x) -> RowVector { return 0.5 * x.colwise().squaredNorm(); };
    t.grad = [](const Matrix &x, RowVector *e) -> Matrix {
        if (e) *e = 0.5 * x.colwise().squaredNorm();
        return x;
    };
    return t;
}

Vector v1(double a) { return Vector::Constant(1, a); }

} // namespace

TEST(Quadrature, StandardGaussianKernel) {
    const auto est = quadrature_normalize(gaussian_kernel(0.0), v1(-10.0), v1(10.0), 4001);
    EXPECT_NEAR(est.Z, std::sqrt(2.0 * M_PI), 1e-8);
    EXPECT_NEAR(est.mean(0), 0.0, 1e-12);
    EXPECT_NEAR(est.cov(0, 0), 1.0, 1e-8);
    EXPECT_NEAR(est.density(Matrix::Zero(1, 1))(0), 1.0 / std::sqrt(2.0 * M_PI), 1e-10);
}

TEST(Quadrature, ShiftedKernelMean) {
    const auto est = quadrature_normalize(gaussian_kernel(1.0), v1(-10.0), v1(10.0), 4001);
    EXPECT_NEAR(est.mean(0), 1.0, 1e-10);
}

TEST(Quadrature, ScaleEquivariant) {
    const DensityFn base = gaussian_kernel(0.4);
    const DensityFn scaled = [base](const Matrix &x) -> RowVector { return 7.5 * base(x); };
    const auto a = quadrature_normalize(base, v1(-9.0), v1(9.0), 1001);
    const auto b = quadrature_normalize(scaled, v1(-9.0), v1(9.0), 1001);
    EXPECT_NEAR(b.Z, 7.5 * a.Z, 1e-12 * b.Z);
    EXPECT_NEAR(b.mean(0), a.mean(0), 1e-12);
}

TEST(Quadrature, TwoDimensionalGaussian) {
    const DensityFn phi = [](const Matrix &x) -> RowVector {
        return (-0.5 * (x.row(0).array().square() + 4.0 * x.row(1).array().square())).exp().matrix();
    };
    Vector lo(2), hi(2);
    lo << -9, -5;
    hi << 9, 5;
    const auto est = quadrature_normalize(phi, lo, hi, 201);
    EXPECT_NEAR(est.Z, 2.0 * M_PI * 0.5, 1e-6);
    EXPECT_NEAR(est.cov(1, 1), 0.25, 1e-6);
}

TEST(Quadrature, LinearTailNetWithZeroCoefficients) {
    NetLayout l;
    l.history_len = 1;
    l.hidden = {4};
    EnergyNet net(l);
    net.parameters().setZero();
    net.gamma(0).setOnes();
    Vector raw(2);
    raw << 0.0, -60.0; // xi2 = softplus(-60) ~ 1e-26
    net.out_bias() = raw;
    const auto est = quadrature_normalize(net, Vector::Zero(1), v1(-10.0), v1(10.0), 2001);
    EXPECT_NEAR(est.Z, std::sqrt(M_PI), 1e-8);
}

TEST(Quadrature, RefinementFailureIsReported) {
    // Off-grid kink: the rule converges too slowly for the point budget.
    const DensityFn kink = [](const Matrix &x) -> RowVector { return (-(x.array() - 0.123456).abs()).exp().matrix(); };
    QuadratureOptions opts;
    opts.max_points = 2000;
    EXPECT_THROW(quadrature_normalize(kink, v1(-10.0), v1(10.0), 101, opts), GridTooCoarse);
}

TEST(Quadrature, AutoDomainWidensUntilDecay) {
    const auto [lo, hi] = auto_domain(gaussian_kernel(0.0), Vector::Zero(1), v1(2.0), 201);
    EXPECT_LT(lo(0), -7.0);
    EXPECT_GT(hi(0), 7.0);
}

TEST(Hmc, StandardGaussianMoments) {
    const int count = 100000;
    const auto r = hmc_sample(quadratic_target(1), Vector::Zero(1), HmcConfig{}, count, 1);
    ASSERT_EQ(r.samples.cols(), count);
    const double mean = r.samples.row(0).mean();
    const double var = (r.samples.row(0).array() - mean).square().sum() / (count - 1);
    EXPECT_LT(std::abs(mean), 3.0 / std::sqrt(count));
    EXPECT_NEAR(var, 1.0, 0.05);
    EXPECT_LT(r.rhat, 1.1);
    EXPECT_GT(r.acceptance, 0.9);
}

TEST(Hmc, SameSeedSameChain) {
    HmcConfig cfg;
    cfg.burn_in = 50;
    const auto a = hmc_sample(quadratic_target(2), Vector::Zero(2), cfg, 400, 5);
    const auto b = hmc_sample(quadratic_target(2), Vector::Zero(2), cfg, 400, 5);
    EXPECT_TRUE(a.samples == b.samples);
}

TEST(Hmc, LowAcceptanceWarns) {
    HmcConfig cfg;
    cfg.step_size = 3.9;
    cfg.trajectory_length = 7.8;
    cfg.burn_in = 20;
    cfg.require_convergence = false;
    std::string warning;
    hmc_sample(quadratic_target(1), Vector::Zero(1), cfg, 200, 3, [&](const std::string &m) { warning += m; });
    EXPECT_NE(warning.find("step size"), std::string::npos) << warning;
}

TEST(Hmc, GelmanRubinFlagsSeparatedChains) {
    Matrix a = Matrix::Random(1, 500), b = Matrix::Random(1, 500).array() + 5.0;
    EXPECT_GT(gelman_rubin({a, b})(0), 1.5);
    Matrix c = Matrix::Random(1, 500);
    EXPECT_LT(gelman_rubin({a, c})(0), 1.05);
}

TEST(Importance, StandardGaussianNormalizer) {
    ImportanceOptions opts;
    double ess = 0.0;
    const double Z = importance_normalizer(quadratic_target(1), Vector::Zero(1), Matrix::Identity(1, 1), opts, 2, &ess);
    EXPECT_NEAR(Z, std::sqrt(2.0 * M_PI), 0.02 * std::sqrt(2.0 * M_PI));
    EXPECT_GT(ess, 0.05 * opts.samples);
}

TEST(Importance, DegenerateProposalRejected) {
    ImportanceOptions opts;
    opts.samples = 2000;
    opts.inflation = 1.0;
    // Proposal far wider than the target.
    EXPECT_THROW(importance_normalizer(quadratic_target(1), v1(0.0), Matrix::Constant(1, 1, 1e6), opts, 2),
                 UnreliableEstimate);
}

TEST(HmcNormalize, GaussianEndToEnd) {
    HmcConfig cfg;
    cfg.burn_in = 200;
    ImportanceOptions is;
    is.samples = 20000;
    const auto est = hmc_normalize(quadratic_target(1), Vector::Zero(1), cfg, 20000, 4, is);
    EXPECT_NEAR(est.Z, std::sqrt(2.0 * M_PI), 0.02 * std::sqrt(2.0 * M_PI));
    EXPECT_NEAR(est.mean(0), 0.0, 0.05);
    EXPECT_NEAR(est.density(Matrix::Zero(1, 1))(0), 1.0 / std::sqrt(2.0 * M_PI), 0.01);
}

TEST(NormMethod, Parse) {
    EXPECT_EQ(parse_norm_method("hmc"), NormMethod::Hmc);
    EXPECT_EQ(parse_norm_method("quadrature"), NormMethod::Quadrature);
    EXPECT_THROW(parse_norm_method("simpson"), InvalidArgument);
}
