#include <gtest/gtest.h>

#include <filesystem>

#include "ebds/simulate.hpp"

using namespace ebds;

namespace {

std::filesystem::path scratch_dir(const std::string &name) {
    auto p = std::filesystem::temp_directory_path() / ("ebds_test_" + name);
    std::filesystem::remove_all(p);
    return p;
}

double sample_var(const Matrix &row) {
    const double m = row.mean();
    return (row.array() - m).square().sum() / (row.size() - 1);
}

} // namespace

TEST(Simulate, SameSeedSameBytes) {
    const auto spec = builtin_spec(ExampleId::MeanRevertingCubic);
    const auto grid = TimeGrid::of(spec);
    const auto a = sample_coupled(spec, grid, 300, 11);
    const auto b = sample_coupled(spec, grid, 300, 11);
    EXPECT_EQ(a.x, b.x);
    EXPECT_EQ(a.y, b.y);
    const auto c = sample_coupled(spec, grid, 300, 12);
    EXPECT_NE(a.x, c.x);
}

TEST(Simulate, PathsIndependentOfBatchSplit) {
    const auto spec = builtin_spec(ExampleId::LinearOU);
    const TimeGrid grid(spec.dt, 10);
    const auto whole = sample_coupled(spec, grid, 3000, 4);
    const auto tail = sample_coupled(spec, grid, 1000, 4, Stream::Coupled, 2000);
    EXPECT_DOUBLE_EQ(whole.x_at(2500, 10, 0), tail.x_at(500, 10, 0));
    EXPECT_DOUBLE_EQ(whole.y_at(2999, 7, 0), tail.y_at(999, 7, 0));
}

TEST(Simulate, ShapesAndInitialObservation) {
    const auto spec = builtin_spec(ExampleId::SpringMass);
    const TimeGrid grid(spec.dt, 5);
    const auto b = sample_coupled(spec, grid, 7, 1);
    EXPECT_EQ(b.x.size(), 7u * 6 * 20);
    EXPECT_EQ(b.y.size(), 7u * 6 * 10);
    EXPECT_TRUE(b.y_step(0).isZero());
    EXPECT_EQ(b.x_step(3).rows(), 20);
    EXPECT_EQ(b.y_history(3).rows(), 40);
    const auto l = sample_latent(spec, grid, 7, 1);
    EXPECT_TRUE(l.y.empty());
}

TEST(Simulate, ZeroCoefficientsKeepPathsConstant) {
    const Matrix zero = Matrix::Zero(1, 1);
    const auto spec = linear_gaussian_spec("still", zero, zero, zero, Vector::Constant(1, 2.0),
                                           Matrix::Identity(1, 1), 0.01, 20);
    const auto b = sample_coupled(spec, TimeGrid::of(spec), 50, 3);
    for (int p = 0; p < 50; ++p)
        for (int n = 0; n <= 20; ++n) EXPECT_EQ(b.x_at(p, n, 0), b.x_at(p, 0, 0));
    // y is driven by observation noise only.
    EXPECT_NEAR(sample_var(b.y_step(20)), 0.2, 0.1);
}

TEST(Simulate, OrnsteinUhlenbeckVarianceAtOne) {
    const auto spec = builtin_spec(ExampleId::LinearOU);
    const auto b = sample_latent(spec, TimeGrid::of(spec), 50000, 21);
    const double v = sample_var(b.x_step(100));
    EXPECT_NEAR(v, 0.5677, 0.02 * 0.5677);
}

TEST(Simulate, LatentIndependentOfCoupled) {
    const auto spec = builtin_spec(ExampleId::LinearOU);
    const auto ds = make_dataset(spec, TimeGrid::of(spec), 50000, 8);
    for (int n : {1, 50, 100}) {
        const Matrix a = ds.coupled.x_step(n), b = ds.latent.x_step(n);
        const double ma = a.mean(), mb = b.mean();
        const double cov = ((a.array() - ma) * (b.array() - mb)).sum() / (a.size() - 1);
        const double corr = cov / std::sqrt(sample_var(a) * sample_var(b));
        EXPECT_LT(std::abs(corr), 0.01) << "step " << n;
    }
}

TEST(Dataset, RoundTripWithManifest) {
    const auto spec = builtin_spec(ExampleId::LinearOU);
    const auto dir = scratch_dir("dataset_rt");
    const auto ds = build_dataset(spec, TimeGrid::of(spec), 10, 5, dir);
    const auto m = io::read_json(dir / "manifest.json");
    EXPECT_EQ(m.at("count").at("coupled").get<int>(), 10);
    EXPECT_EQ(m.at("N").get<int>(), 100);
    EXPECT_EQ(m.at("spec_hash").get<std::string>(), spec.hash());
    const auto back = load_dataset(dir);
    EXPECT_EQ(back.coupled.x, ds.coupled.x);
    EXPECT_EQ(back.coupled.y, ds.coupled.y);
    EXPECT_EQ(back.latent.x, ds.latent.x);
    EXPECT_EQ(back.size(), 10);
}

TEST(Dataset, CorruptFileRejected) {
    const auto spec = builtin_spec(ExampleId::LinearOU);
    const auto dir = scratch_dir("dataset_bad");
    build_dataset(spec, TimeGrid(spec.dt, 3), 4, 5, dir);
    auto v = io::read_doubles(dir / "latent_x.f64");
    v[2] += 1.0;
    io::write_doubles(dir / "latent_x.f64", v);
    EXPECT_THROW(load_dataset(dir), IoError);
}

TEST(Simulate, RejectsEmptyBatch) {
    const auto spec = builtin_spec(ExampleId::LinearOU);
    EXPECT_THROW(sample_coupled(spec, TimeGrid::of(spec), 0, 1), InvalidArgument);
}
