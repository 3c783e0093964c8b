#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "ebds/trainer.hpp"

using namespace ebds;

namespace {

std::filesystem::path scratch_dir(const std::string &name) {
    auto p = std::filesystem::temp_directory_path() / ("ebds_test_" + name);
    std::filesystem::remove_all(p);
    return p;
}

TrainSchedule tiny_schedule() {
    TrainSchedule s;
    s.batch_sizes = {256, 512};
    s.epochs_per_size = 2;
    s.hidden = {8, 8};
    s.adam.learning_rate = 1e-3;
    return s;
}

ModelSpec still_spec(int steps = 5) {
    const Matrix zero = Matrix::Zero(1, 1);
    return linear_gaussian_spec("still", zero, Matrix::Identity(1, 1), zero, Vector::Zero(1), Matrix::Identity(1, 1),
                                0.01, steps);
}

Vector v1(double a) { return Vector::Constant(1, a); }

} // namespace

TEST(StepTarget, OrnsteinUhlenbeckFirstStepHandValue) {
    const auto spec = builtin_spec(ExampleId::LinearOU);
    const auto prior = PreviousDensity::prior_of(spec);
    const double t = step_target(prior, spec, v1(0.0), v1(0.0), v1(0.1), 0.01, Scheme::Euler);
    const double u = 1.0 / std::sqrt(2.0 * M_PI);
    EXPECT_NEAR(t, u * 1.01, 1e-12);
    EXPECT_NEAR(t, 0.40293, 5e-6);
    // b = u h(0) = 0, so the Milstein correction vanishes here too.
    EXPECT_DOUBLE_EQ(step_target(prior, spec, v1(0.0), v1(0.0), v1(0.1), 0.01, Scheme::Milstein), t);
}

TEST(StepTarget, NoDriftNoObservationReturnsPrevious) {
    const auto spec = still_spec();
    const auto prior = PreviousDensity::prior_of(spec);
    for (double x : {-2.0, 0.0, 0.3, 1.7}) {
        const double u = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
        EXPECT_DOUBLE_EQ(step_target(prior, spec, v1(x), v1(0.0), v1(0.37), 0.01, Scheme::Euler), u);
    }
}

TEST(StepTarget, MilsteinMatchesEulerWhenIncrementSquaredIsDt) {
    const auto spec = builtin_spec(ExampleId::Bistable);
    const auto prior = PreviousDensity::prior_of(spec);
    for (double x : {-1.0, 0.4, 2.2}) {
        const double e = step_target(prior, spec, v1(x), v1(0.0), v1(0.1), 0.01, Scheme::Euler);
        const double m = step_target(prior, spec, v1(x), v1(0.0), v1(0.1), 0.01, Scheme::Milstein);
        EXPECT_NEAR(m, e, 1e-15);
    }
}

TEST(StepTarget, SchemeDifferenceBoundedByCorrection) {
    const auto spec = builtin_spec(ExampleId::MeanRevertingCubic);
    const auto prior = PreviousDensity::prior_of(spec);
    const Matrix x = Matrix(RowVector::LinSpaced(41, -3.0, 3.0));
    const Matrix y = Matrix::Zero(1, 41);
    Matrix dy(1, 41);
    for (int i = 0; i < 41; ++i) dy(0, i) = 0.3 * std::sin(i);
    const auto e = step_target(prior, spec, x, y, dy, 0.01, Scheme::Euler);
    const auto m = step_target(prior, spec, x, y, dy, 0.01, Scheme::Milstein);
    const RowVector b = zakai_b(spec, x, e.prev_value).row(0);
    const RowVector bp = zakai_b_prime(spec, x);
    const double C = 0.5 * b.cwiseProduct(bp).cwiseAbs().maxCoeff();
    for (int i = 0; i < 41; ++i)
        EXPECT_LE(std::abs(m.value(i) - e.value(i)), C * std::abs(dy(0, i) * dy(0, i) - 0.01) + 1e-15);
}

TEST(StepTarget, MilsteinNeedsScalarModel) {
    const auto spec = builtin_spec(ExampleId::SpringMass);
    const auto prior = PreviousDensity::prior_of(spec);
    EXPECT_THROW(step_target(prior, spec, Matrix(Matrix::Zero(20, 1)), Matrix(Matrix::Zero(10, 1)), Matrix(Matrix::Zero(10, 1)), 0.01,
                             Scheme::Milstein),
                 UnsupportedOperation);
    EXPECT_NO_THROW(step_target(prior, spec, Matrix(Matrix::Zero(20, 1)), Matrix(Matrix::Zero(10, 1)), Matrix(Matrix::Zero(10, 1)), 0.01,
                                Scheme::Euler));
}

TEST(StepTarget, AffineInPreviousValueAndGradient) {
    // Superposition: with u = a u1 + b u2 and grad = a g1 + b g2 the correction
    // (target - u) combines linearly, checked with two Gaussian previous densities.
    const auto spec = builtin_spec(ExampleId::MeanRevertingCubic);
    const GaussianDensity g1(v1(0.2), Matrix::Constant(1, 1, 0.5)), g2(v1(-1.0), Matrix::Constant(1, 1, 2.0));
    const Matrix x = Matrix(RowVector::LinSpaced(9, -2.0, 2.0)), y = Matrix::Zero(1, 9);
    const Matrix dy = Matrix::Constant(1, 9, 0.07);
    const auto t1 = step_target(PreviousDensity(g1), spec, x, y, dy, 0.01, Scheme::Milstein);
    const auto t2 = step_target(PreviousDensity(g2), spec, x, y, dy, 0.01, Scheme::Milstein);
    const double a = 0.3, b = -1.7;
    const RowVector u = a * t1.prev_value + b * t2.prev_value;
    const Matrix grad = a * g1.gradient(x, t1.prev_value) + b * g2.gradient(x, t2.prev_value);
    const RowVector direct = u + zakai_f(spec, x, u, grad) * 0.01 + zakai_b(spec, x, u).cwiseProduct(dy).colwise().sum() +
                             0.5 * zakai_b(spec, x, u).cwiseProduct(zakai_b_prime(spec, x)).cwiseProduct(
                                       (dy.array().square() - 0.01).matrix());
    const RowVector combined = a * t1.value + b * t2.value;
    EXPECT_LT((direct - combined).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(GaussianDensity, GradientMatchesFiniteDifference) {
    Matrix cov(2, 2);
    cov << 1.0, 0.3, 0.3, 0.5;
    const GaussianDensity g(Vector::Ones(2), cov);
    Matrix x(2, 1);
    x << 0.4, -0.2;
    const Matrix grad = g.gradient(x, g.value(x));
    for (int k = 0; k < 2; ++k) {
        Matrix a = x, b = x;
        a(k, 0) += 1e-6;
        b(k, 0) -= 1e-6;
        EXPECT_NEAR(grad(k, 0), (g.value(a)(0) - g.value(b)(0)) / 2e-6, 1e-8);
    }
}

TEST(StepBatch, PairsCandidateInputsWithNextStateTargets) {
    const auto spec = builtin_spec(ExampleId::LinearOU);
    const auto ds = make_dataset(spec, TimeGrid(spec.dt, 3), 20, 4);
    const auto prior = PreviousDensity::prior_of(spec);
    const auto b = make_step_batch(prior, spec, ds, 1, Scheme::Euler);
    ASSERT_EQ(b.inputs.rows(), 1 + 3);
    ASSERT_EQ(b.inputs.cols(), 20);
    for (int p : {0, 7, 19}) {
        EXPECT_DOUBLE_EQ(b.inputs(0, p), ds.latent.x_at(p, 1, 0));
        for (int k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(b.inputs(1 + k, p), ds.coupled.y_at(p, k, 0));
        const double expect = step_target(prior, spec, v1(ds.latent.x_at(p, 2, 0)),
                                          Vector(b.inputs.block(1, p, 2, 1)),
                                          v1(ds.coupled.y_at(p, 2, 0) - ds.coupled.y_at(p, 1, 0)), spec.dt,
                                          Scheme::Euler);
        EXPECT_DOUBLE_EQ(b.targets(p), expect);
    }
    EXPECT_THROW(make_step_batch(prior, spec, ds, 3, Scheme::Euler), ContractViolation);
}

TEST(LocalLoss, OrderAndDuplicationInvariant) {
    const auto spec = builtin_spec(ExampleId::LinearOU);
    const auto ds = make_dataset(spec, TimeGrid(spec.dt, 2), 64, 2);
    const auto prior = PreviousDensity::prior_of(spec);
    const auto b = make_step_batch(prior, spec, ds, 0, Scheme::Euler);
    NetLayout l;
    l.history_len = 2;
    l.hidden = {8, 8};
    const auto net = EnergyNet::init(l, 3);
    const double base = net.loss(b.inputs, b.targets, BatchNormMode::Eval);
    EXPECT_NEAR(local_loss(net, prior, spec, ds, 0, Scheme::Euler), base, 1e-15);

    Eigen::VectorXi perm(64);
    for (int i = 0; i < 64; ++i) perm(i) = (i * 37) % 64;
    EXPECT_NEAR(net.loss(b.inputs(Eigen::all, perm), b.targets(perm), BatchNormMode::Eval), base, 1e-14);

    Matrix in2(b.inputs.rows(), 128);
    in2 << b.inputs, b.inputs;
    RowVector t2(128);
    t2 << b.targets, b.targets;
    EXPECT_NEAR(net.loss(in2, t2, BatchNormMode::Eval), base, 1e-14);
    EXPECT_DOUBLE_EQ(net.loss(b.inputs, net.phi(b.inputs), BatchNormMode::Eval), 0.0);
}

TEST(ValidationSplitTest, DisjointDeterministic) {
    const auto a = ValidationSplit::make(1000, 0.05, 7), b = ValidationSplit::make(1000, 0.05, 7);
    EXPECT_EQ(a.validation.size(), 50u);
    EXPECT_EQ(a.train.size(), 950u);
    EXPECT_EQ(a.validation, b.validation);
    std::vector<int> all = a.train;
    all.insert(all.end(), a.validation.begin(), a.validation.end());
    std::sort(all.begin(), all.end());
    for (int i = 0; i < 1000; ++i) EXPECT_EQ(all[i], i);
}

TEST(Schedule, Validation) {
    TrainSchedule s;
    EXPECT_NO_THROW(s.validate());
    EXPECT_EQ(s.batch_sizes.front(), 512);
    EXPECT_EQ(s.batch_sizes.back(), 16384);
    EXPECT_EQ(s.patience, 5);
    s.batch_sizes = {1024, 512};
    EXPECT_THROW(s.validate(), InvalidArgument);
    s = TrainSchedule{};
    s.batch_sizes = {500};
    EXPECT_THROW(s.validate(), InvalidArgument);
    s = TrainSchedule{};
    s.patience = 0;
    EXPECT_THROW(s.validate(), InvalidArgument);
    io::json j = TrainSchedule{};
    EXPECT_EQ(io::hash_json(j), io::hash_json(io::json(j.get<TrainSchedule>())));
}

TEST(TrainStep, DeterministicAndBestValidation) {
    const auto spec = builtin_spec(ExampleId::LinearOU);
    const auto ds = make_dataset(spec, TimeGrid(spec.dt, 2), 3000, 5);
    const auto prior = PreviousDensity::prior_of(spec);
    const auto sched = tiny_schedule();
    const auto split = ValidationSplit::make(ds.size(), sched.validation_fraction, 1);
    const auto a = train_step(0, prior, spec, ds, split, sched, Scheme::Euler, 1);
    const auto b = train_step(0, prior, spec, ds, split, sched, Scheme::Euler, 1);
    EXPECT_TRUE(a.net.parameters() == b.net.parameters());
    EXPECT_EQ(a.net.mode(), BatchNormMode::Eval);
    ASSERT_FALSE(a.trace.empty());
    double best = std::numeric_limits<double>::infinity();
    for (const auto &r : a.trace) best = std::min(best, r.val_loss);
    EXPECT_LE(a.best_val_loss, best);
    if (a.best_epoch > 0) EXPECT_DOUBLE_EQ(a.trace[a.best_epoch - 1].val_loss, a.best_val_loss);
}

TEST(TrainStep, DivergenceReportsLastFiniteLoss) {
    const auto spec = builtin_spec(ExampleId::LinearOU);
    const auto ds = make_dataset(spec, TimeGrid(spec.dt, 2), 2000, 5);
    const auto prior = PreviousDensity::prior_of(spec);
    auto sched = tiny_schedule();
    sched.adam.learning_rate = 1e300;
    const auto split = ValidationSplit::make(ds.size(), sched.validation_fraction, 1);
    try {
        train_step(0, prior, spec, ds, split, sched, Scheme::Euler, 1);
        SUCCEED() << "huge steps saturated without producing NaN";
    } catch (const NumericFailure &e) {
        EXPECT_NE(std::string(e.what()).find("last finite loss"), std::string::npos) << e.what();
    }
}

TEST(TrainSequence, SingleStepEqualsTrainStep) {
    const auto spec = builtin_spec(ExampleId::LinearOU);
    const auto ds = make_dataset(spec, TimeGrid(spec.dt, 2), 2000, 6);
    const auto sched = tiny_schedule();
    const auto dir = scratch_dir("seq1");
    SequenceOptions opts;
    opts.steps = 1;
    const auto seq = train_sequence(spec, ds, sched, Scheme::Euler, 3, dir, opts);
    ASSERT_EQ(seq.size(), 1u);
    const auto split = ValidationSplit::make(ds.size(), sched.validation_fraction, 3);
    const auto one = train_step(0, PreviousDensity::prior_of(spec), spec, ds, split, sched, Scheme::Euler, 3);
    EXPECT_TRUE(seq[0].net.parameters() == one.net.parameters());
    EXPECT_TRUE(std::filesystem::exists(dir / "run.json"));
    EXPECT_TRUE(std::filesystem::exists(dir / "loss_trace.csv"));
    const auto c = load_checkpoint(dir, 1);
    EXPECT_TRUE(c.net.parameters() == one.net.parameters());
}

TEST(TrainSequence, ResumeReproducesUninterruptedRun) {
    const auto spec = builtin_spec(ExampleId::Bistable);
    const auto ds = make_dataset(spec, TimeGrid(spec.dt, 3), 1500, 8);
    const auto sched = tiny_schedule();
    const auto dir = scratch_dir("seq_resume");
    const auto full = train_sequence(spec, ds, sched, Scheme::Milstein, 4, dir);
    ASSERT_EQ(full.size(), 3u);
    std::filesystem::remove_all(step_directory(dir, 2));
    std::filesystem::remove_all(step_directory(dir, 3));
    const auto resumed = train_sequence(spec, ds, sched, Scheme::Milstein, 4, dir);
    for (int k = 0; k < 3; ++k) EXPECT_TRUE(full[k].net.parameters() == resumed[k].net.parameters()) << k;
    EXPECT_EQ(load_checkpoint(dir, 3).net.layout().history_len, 4);
}

TEST(TrainSequence, RetriesUseFreshAttempts) {
    const auto spec = builtin_spec(ExampleId::LinearOU);
    const auto ds = make_dataset(spec, TimeGrid(spec.dt, 1), 1000, 9);
    auto sched = tiny_schedule();
    sched.retries = 2;
    sched.retry_threshold = 0.0; // never satisfied
    const auto dir = scratch_dir("seq_retry");
    const auto r = train_sequence(spec, ds, sched, Scheme::Euler, 4, dir);
    EXPECT_EQ(r[0].attempt, 2);
    EXPECT_EQ(load_checkpoint(dir, 1).meta.at("attempt").get<int>(), 2);
}

TEST(TrainSequence, ResampleDrawsFreshPaths) {
    const auto spec = builtin_spec(ExampleId::LinearOU);
    const auto ds = make_dataset(spec, TimeGrid(spec.dt, 2), 1000, 9);
    const auto sched = tiny_schedule();
    SequenceOptions opts;
    opts.resample = true;
    const auto a = train_sequence(spec, ds, sched, Scheme::Euler, 4, scratch_dir("seq_rs"), opts);
    const auto b = train_sequence(spec, ds, sched, Scheme::Euler, 4, scratch_dir("seq_fixed"));
    ASSERT_EQ(a.size(), 2u);
    EXPECT_FALSE(a[0].net.parameters() == b[0].net.parameters());
}

TEST(TrainSequence, RejectsMilsteinForVectorModels) {
    const auto spec = builtin_spec(ExampleId::SpringMass);
    const auto ds = make_dataset(spec, TimeGrid(spec.dt, 1), 100, 1);
    EXPECT_THROW(train_sequence(spec, ds, tiny_schedule(), Scheme::Milstein, 1, scratch_dir("seq_sm")),
                 UnsupportedOperation);
}

TEST(Checkpoint, CorruptParametersRejected) {
    const auto spec = builtin_spec(ExampleId::LinearOU);
    const auto ds = make_dataset(spec, TimeGrid(spec.dt, 1), 600, 1);
    const auto dir = scratch_dir("ckpt_bad");
    train_sequence(spec, ds, tiny_schedule(), Scheme::Euler, 1, dir);
    auto blob = io::read_doubles(step_directory(dir, 1) / "params.f64");
    blob[0] += 1.0;
    io::write_doubles(step_directory(dir, 1) / "params.f64", blob);
    EXPECT_THROW(load_checkpoint(dir, 1), IoError);
    EXPECT_THROW(load_checkpoint(dir, 2), IoError);
}
