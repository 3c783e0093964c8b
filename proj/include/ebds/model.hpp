// Filtering problem definitions and the Zakai equation coefficients.
//
// A problem is the signal SDE dX = mu(X) dt + sigma(X) dW with prior X_0 ~ p0,
// observed through dY = h(X) dt + dV. Functions taking a matrix act column
// by column: each column is one state, which keeps the hot loops batched.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ebds/errors.hpp"
#include "ebds/io.hpp"

namespace ebds {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

enum class ExampleId { LinearOU, MeanRevertingCubic, Bistable, SpringMass };

inline std::string_view to_string(ExampleId id) {
    switch (id) {
    case ExampleId::LinearOU: return "linear_ou";
    case ExampleId::MeanRevertingCubic: return "mean_reverting_cubic";
    case ExampleId::Bistable: return "bistable";
    case ExampleId::SpringMass: return "spring_mass";
    }
    return "unknown";
}

inline ExampleId parse_example(std::string_view name) {
    for (auto id : {ExampleId::LinearOU, ExampleId::MeanRevertingCubic, ExampleId::Bistable,
                    ExampleId::SpringMass})
        if (name == to_string(id)) return id;
    throw InvalidArgument("unknown example id: " + std::string(name));
}

/// Serializable constants behind a built-in example.
struct ModelParams {
    ExampleId example = ExampleId::LinearOU;
    double dt = 0.01;
    int horizon_steps = 100;
    double beta = 1.0;       // h(x) = beta x in the scalar examples
    double sigma = 1.0;      // scalar diffusion
    double prior_mean = 0.0; // isotropic prior N(m, v I)
    double prior_var = 1.0;
    // spring-mass chain
    int masses = 10;
    std::vector<double> mass;      // size masses
    std::vector<double> stiffness; // size masses + 1
    std::vector<double> damping;   // size masses + 1
    double sigma_pos = 1.0;
    double sigma_vel = 1.0;

    static ModelParams defaults(ExampleId id);
};

inline void to_json(io::json &j, const ModelParams &p) {
    j = io::json{{"example", std::string(to_string(p.example))},
                 {"dt", p.dt},
                 {"horizon_steps", p.horizon_steps},
                 {"beta", p.beta},
                 {"sigma", p.sigma},
                 {"prior_mean", p.prior_mean},
                 {"prior_var", p.prior_var}};
    if (p.example == ExampleId::SpringMass) {
        j["masses"] = p.masses;
        j["mass"] = p.mass;
        j["stiffness"] = p.stiffness;
        j["damping"] = p.damping;
        j["sigma_pos"] = p.sigma_pos;
        j["sigma_vel"] = p.sigma_vel;
    }
}

inline void from_json(const io::json &j, ModelParams &p) {
    p = ModelParams::defaults(parse_example(j.at("example").get<std::string>()));
    p.dt = j.value("dt", p.dt);
    p.horizon_steps = j.value("horizon_steps", p.horizon_steps);
    p.beta = j.value("beta", p.beta);
    p.sigma = j.value("sigma", p.sigma);
    p.prior_mean = j.value("prior_mean", p.prior_mean);
    p.prior_var = j.value("prior_var", p.prior_var);
    if (p.example == ExampleId::SpringMass) {
        p.masses = j.value("masses", p.masses);
        p.mass = j.value("mass", p.mass);
        p.stiffness = j.value("stiffness", p.stiffness);
        p.damping = j.value("damping", p.damping);
        p.sigma_pos = j.value("sigma_pos", p.sigma_pos);
        p.sigma_vel = j.value("sigma_vel", p.sigma_vel);
    }
}

inline ModelParams ModelParams::defaults(ExampleId id) {
    ModelParams p;
    p.example = id;
    switch (id) {
    case ExampleId::LinearOU:
    case ExampleId::MeanRevertingCubic: p.horizon_steps = 100; break;
    case ExampleId::Bistable:
    case ExampleId::SpringMass: p.horizon_steps = 50; break;
    }
    if (id == ExampleId::SpringMass) {
        p.mass.assign(p.masses, 1.0);
        p.stiffness.assign(p.masses + 1, 5.0);
        p.damping.assign(p.masses + 1, 0.1);
    }
    return p;
}

/// The filtering problem. Immutable after construction.
struct ModelSpec {
    std::string name;
    int d = 1;
    int d_obs = 1;

    std::function<Matrix(const Matrix &)> drift;                // d x B -> d x B
    std::function<Matrix(const Vector &)> drift_jacobian;       // d x d
    std::function<RowVector(const Matrix &)> drift_divergence;  // d x B -> 1 x B
    std::function<Matrix(const Vector &)> diffusion;            // d x d
    std::optional<Matrix> constant_diffusion;                   // set when sigma is constant
    std::function<Matrix(const Matrix &)> measure;              // d x B -> d' x B
    std::function<Matrix(const Vector &)> measure_jacobian;     // d' x d

    // Derivatives of a = sigma sigma^T, only needed for state-dependent sigma.
    // row_divergence(x)_j = sum_i d a_ij / d x_i; hessian_trace = 1/2 sum_ij d^2 a_ij / dx_i dx_j.
    std::function<Matrix(const Matrix &)> diffusion_row_divergence;
    std::function<RowVector(const Matrix &)> diffusion_hessian_trace;

    std::optional<Matrix> linear_drift;   // A with mu(x) = A x
    std::optional<Matrix> linear_measure; // H with h(x) = H x

    Vector prior_mean;
    Matrix prior_cov;
    int horizon_steps = 1;
    double dt = 0.01;

    std::optional<ModelParams> params;

    Vector drift_at(const Vector &x) const { return drift(x); }
    Vector measure_at(const Vector &x) const { return measure(x); }
    double drift_divergence_at(const Vector &x) const { return drift_divergence(x)(0); }
    bool is_linear() const { return linear_drift.has_value() && linear_measure.has_value(); }
    bool has_constant_diffusion() const { return constant_diffusion.has_value(); }

    void validate() const {
        if (d < 1 || d_obs < 1) throw InvalidArgument("state and observation dimensions must be >= 1");
        if (!(dt > 0.0)) throw InvalidArgument("dt must be positive");
        if (horizon_steps < 1) throw InvalidArgument("horizon_steps must be >= 1");
        if (prior_mean.size() != d || prior_cov.rows() != d || prior_cov.cols() != d)
            throw InvalidArgument("prior shape does not match state dimension");
        if (!prior_cov.isApprox(prior_cov.transpose(), 1e-12))
            throw InvalidArgument("prior covariance must be symmetric");
        Eigen::LLT<Matrix> llt(prior_cov);
        if (llt.info() != Eigen::Success) throw InvalidArgument("prior covariance must be positive definite");
        if (!drift || !drift_divergence || !diffusion || !measure)
            throw InvalidArgument("model is missing drift, divergence, diffusion or measurement");
    }

    /// Canonical description used for hashing artifacts.
    io::json describe() const {
        io::json j{{"name", name}, {"d", d}, {"d_obs", d_obs}, {"dt", dt}, {"horizon_steps", horizon_steps}};
        j["prior_mean"] = std::vector<double>(prior_mean.data(), prior_mean.data() + prior_mean.size());
        j["prior_cov"] = std::vector<double>(prior_cov.data(), prior_cov.data() + prior_cov.size());
        if (params) j["params"] = *params;
        auto flat = [](const Matrix &m) { return std::vector<double>(m.data(), m.data() + m.size()); };
        if (linear_drift) j["linear_drift"] = flat(*linear_drift);
        if (linear_measure) j["linear_measure"] = flat(*linear_measure);
        if (constant_diffusion) j["constant_diffusion"] = flat(*constant_diffusion);
        return j;
    }

    std::string hash() const { return io::hash_json(describe()); }
};

/// Linear-Gaussian model mu(x) = A x, constant sigma, h(x) = H x.
inline ModelSpec linear_gaussian_spec(std::string name, const Matrix &A, const Matrix &sigma, const Matrix &H,
                                      const Vector &prior_mean, const Matrix &prior_cov, double dt, int steps) {
    ModelSpec s;
    s.name = std::move(name);
    s.d = static_cast<int>(A.rows());
    s.d_obs = static_cast<int>(H.rows());
    s.drift = [A](const Matrix &x) -> Matrix { return A * x; };
    s.drift_jacobian = [A](const Vector &) -> Matrix { return A; };
    const double trace = A.trace();
    s.drift_divergence = [trace](const Matrix &x) -> RowVector { return RowVector::Constant(x.cols(), trace); };
    s.diffusion = [sigma](const Vector &) -> Matrix { return sigma; };
    s.constant_diffusion = sigma;
    s.measure = [H](const Matrix &x) -> Matrix { return H * x; };
    s.measure_jacobian = [H](const Vector &) -> Matrix { return H; };
    s.linear_drift = A;
    s.linear_measure = H;
    s.prior_mean = prior_mean;
    s.prior_cov = prior_cov;
    s.dt = dt;
    s.horizon_steps = steps;
    return s;
}

namespace detail {

/// Scalar model with elementwise drift and h(x) = beta x.
template <class Drift, class Slope>
ModelSpec scalar_spec(const ModelParams &p, Drift mu, Slope dmu) {
    ModelSpec s;
    s.name = std::string(to_string(p.example));
    s.d = 1;
    s.d_obs = 1;
    s.drift = [mu](const Matrix &x) -> Matrix { return x.unaryExpr(mu); };
    s.drift_jacobian = [dmu](const Vector &x) -> Matrix { return Matrix::Constant(1, 1, dmu(x(0))); };
    s.drift_divergence = [dmu](const Matrix &x) -> RowVector { return x.row(0).unaryExpr(dmu); };
    Matrix sig = Matrix::Constant(1, 1, p.sigma);
    s.diffusion = [sig](const Vector &) -> Matrix { return sig; };
    s.constant_diffusion = sig;
    const double beta = p.beta;
    s.measure = [beta](const Matrix &x) -> Matrix { return beta * x; };
    s.measure_jacobian = [beta](const Vector &) -> Matrix { return Matrix::Constant(1, 1, beta); };
    s.linear_measure = Matrix::Constant(1, 1, beta);
    s.prior_mean = Vector::Constant(1, p.prior_mean);
    s.prior_cov = Matrix::Constant(1, 1, p.prior_var);
    s.dt = p.dt;
    s.horizon_steps = p.horizon_steps;
    s.params = p;
    return s;
}

} // namespace detail

/// Drift matrix of the mass chain: [[0, I], [A21, A22]].
inline Matrix spring_mass_drift_matrix(const ModelParams &p) {
    const int m = p.masses;
    if (static_cast<int>(p.mass.size()) != m || static_cast<int>(p.stiffness.size()) != m + 1 ||
        static_cast<int>(p.damping.size()) != m + 1)
        throw InvalidArgument("spring-mass constants must have sizes (M, M+1, M+1)");
    Matrix A = Matrix::Zero(2 * m, 2 * m);
    A.block(0, m, m, m).setIdentity();
    auto A21 = A.block(m, 0, m, m);
    auto A22 = A.block(m, m, m, m);
    const auto &k = p.stiffness;
    const auto &c = p.damping;
    for (int i = 0; i < m; ++i) {
        A21(i, i) = -(k[i] + k[i + 1]) / p.mass[i];
        if (i + 1 < m) {
            A21(i, i + 1) = k[i + 1] / p.mass[i];
            A21(i + 1, i) = k[i + 1] / p.mass[i + 1];
        }
        A22(i, i) = -(c[i] + c[i + 1]) / p.mass[i];
    }
    return A;
}

/// Observes positions 1,3,5,7,9 and velocities 2,4,6,8,10 (1-based):
/// H(i, 2i-1) = 1 for i = 1..5 and H(j, 2j) = 1 for j = 6..10.
inline Matrix spring_mass_measurement(int masses) {
    const int d = 2 * masses;
    const int d_obs = masses;
    Matrix H = Matrix::Zero(d_obs, d);
    const int half = d_obs / 2;
    for (int i = 1; i <= half; ++i) H(i - 1, 2 * i - 2) = 1.0;
    for (int j = half + 1; j <= d_obs; ++j) H(j - 1, 2 * j - 1) = 1.0;
    return H;
}

inline ModelSpec make_spec(const ModelParams &p) {
    ModelSpec s;
    switch (p.example) {
    case ExampleId::LinearOU:
        s = detail::scalar_spec(p, [](double x) { return -x; }, [](double) { return -1.0; });
        s.linear_drift = Matrix::Constant(1, 1, -1.0);
        break;
    case ExampleId::MeanRevertingCubic:
        s = detail::scalar_spec(
            p, [](double x) { return -x - x * x * x; }, [](double x) { return -1.0 - 3.0 * x * x; });
        break;
    case ExampleId::Bistable:
        s = detail::scalar_spec(
            p, [](double x) { return 0.4 * (5.0 * x - x * x * x); },
            [](double x) { return 0.4 * (5.0 - 3.0 * x * x); });
        break;
    case ExampleId::SpringMass: {
        const int m = p.masses;
        Matrix sigma = Matrix::Zero(2 * m, 2 * m);
        sigma.topLeftCorner(m, m).diagonal().setConstant(p.sigma_pos);
        sigma.bottomRightCorner(m, m).diagonal().setConstant(p.sigma_vel);
        s = linear_gaussian_spec(std::string(to_string(p.example)), spring_mass_drift_matrix(p), sigma,
                                 spring_mass_measurement(m), Vector::Constant(2 * m, p.prior_mean),
                                 p.prior_var * Matrix::Identity(2 * m, 2 * m), p.dt, p.horizon_steps);
        s.params = p;
        break;
    }
    }
    s.validate();
    return s;
}

inline ModelSpec builtin_spec(ExampleId id) { return make_spec(ModelParams::defaults(id)); }

namespace detail {

inline void require_finite(const Matrix &m, const char *what) {
    if (!m.allFinite()) throw InvalidArgument(std::string("non-finite ") + what);
}

} // namespace detail

/// f(x, u, v) of the Zakai equation written with leading operator A:
///   sum_ij d_i a_ij v_j + 1/2 sum_ij d_ij a_ij u - div(mu) u - 2 <mu, v>.
/// Batched: x, v are d x B, u is 1 x B.
inline RowVector zakai_f(const ModelSpec &spec, const Matrix &x, const RowVector &u, const Matrix &v) {
    detail::require_finite(x, "state in zakai_f");
    detail::require_finite(u, "value in zakai_f");
    detail::require_finite(v, "gradient in zakai_f");
    if (x.cols() != u.cols() || v.cols() != x.cols() || x.rows() != spec.d || v.rows() != spec.d)
        throw ContractViolation("zakai_f: shape mismatch");
    RowVector f = -spec.drift_divergence(x).cwiseProduct(u) - 2.0 * spec.drift(x).cwiseProduct(v).colwise().sum();
    if (!spec.has_constant_diffusion()) {
        if (spec.diffusion_row_divergence) f += spec.diffusion_row_divergence(x).cwiseProduct(v).colwise().sum();
        if (spec.diffusion_hessian_trace) f += spec.diffusion_hessian_trace(x).cwiseProduct(u);
    }
    return f;
}

inline double zakai_f(const ModelSpec &spec, const Vector &x, double u, const Vector &v) {
    return zakai_f(spec, Matrix(x), RowVector::Constant(1, u), Matrix(v))(0);
}

/// b(x, u) = u h(x)^T. Batched: returns d' x B.
inline Matrix zakai_b(const ModelSpec &spec, const Matrix &x, const RowVector &u) {
    detail::require_finite(x, "state in zakai_b");
    detail::require_finite(u, "value in zakai_b");
    if (x.cols() != u.cols()) throw ContractViolation("zakai_b: shape mismatch");
    Matrix hx = spec.measure(x);
    return (hx.array().rowwise() * u.array()).matrix();
}

inline Vector zakai_b(const ModelSpec &spec, const Vector &x, double u) {
    return zakai_b(spec, Matrix(x), RowVector::Constant(1, u)).col(0);
}

/// db/du = h(x); only defined for scalar state and observation.
inline RowVector zakai_b_prime(const ModelSpec &spec, const Matrix &x) {
    if (spec.d != 1 || spec.d_obs != 1)
        throw UnsupportedOperation("b' is only defined for d = d' = 1 (Milstein correction)");
    detail::require_finite(x, "state in zakai_b_prime");
    return spec.measure(x).row(0);
}

inline double zakai_b_prime(const ModelSpec &spec, double x) {
    return zakai_b_prime(spec, Matrix::Constant(1, 1, x))(0);
}

} // namespace ebds
