// Reference and comparison filters on the Euler-discretized model.
//
// Discrete observations are increments z_n = Y_{n+1} - Y_n, so
// z_n = h(x_{n+1}) dt + noise with covariance dt I.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ebds/errors.hpp"
#include "ebds/model.hpp"
#include "ebds/rng.hpp"

namespace ebds {

struct GaussianBelief {
    Vector mean;
    Matrix cov;

    GaussianBelief() = default;
    GaussianBelief(Vector m, Matrix c) : mean(std::move(m)), cov(std::move(c)) {}

    /// Symmetrize and lift eigenvalues below zero (tolerance 1e-10) to zero.
    void clamp_psd() {
        cov = 0.5 * (cov + cov.transpose());
        Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
        if (es.eigenvalues().minCoeff() < 0.0) {
            if (es.eigenvalues().minCoeff() < -1e-10) throw NumericFailure("covariance lost positive semidefiniteness", 0);
            cov = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).asDiagonal() * es.eigenvectors().transpose();
        }
    }

    RowVector log_density(const Matrix &x) const {
        Eigen::LLT<Matrix> llt(cov);
        if (llt.info() != Eigen::Success) throw NumericFailure("singular covariance in density evaluation", 0);
        const Matrix L = llt.matrixL();
        const Matrix z = L.triangularView<Eigen::Lower>().solve(x.colwise() - mean);
        const double log_det = 2.0 * L.diagonal().array().log().sum();
        return (-0.5 * z.colwise().squaredNorm()).array() - 0.5 * (mean.size() * std::log(2.0 * M_PI) + log_det);
    }

    RowVector density(const Matrix &x) const { return log_density(x).array().exp(); }

    Matrix sample(int count, GaussianSource &rng) const {
        Eigen::LLT<Matrix> llt(cov);
        if (llt.info() != Eigen::Success) throw NumericFailure("singular covariance in sampling", 0);
        Matrix z(mean.size(), count);
        for (int j = 0; j < count; ++j)
            for (Eigen::Index k = 0; k < mean.size(); ++k) z(k, j) = rng();
        return (Matrix(llt.matrixL()) * z).colwise() + mean;
    }
};

struct LinearSystem {
    Matrix F, Q, Hd, R;
};

/// F = I + A dt, Q = sigma sigma^T dt, Hd = H dt, R = dt I.
inline LinearSystem discretize_linear(const ModelSpec &spec, double dt) {
    if (!spec.linear_drift || !spec.linear_measure || !spec.constant_diffusion)
        throw UnsupportedOperation("discretize_linear needs a linear drift, linear measurement and constant diffusion");
    const Matrix &A = *spec.linear_drift;
    const Matrix &S = *spec.constant_diffusion;
    LinearSystem s;
    s.F = Matrix::Identity(spec.d, spec.d) + A * dt;
    s.Q = S * S.transpose() * dt;
    s.Hd = *spec.linear_measure * dt;
    s.R = dt * Matrix::Identity(spec.d_obs, spec.d_obs);
    return s;
}

namespace detail {

inline GaussianBelief kalman_update(const Vector &m_pred, const Matrix &P_pred, const Matrix &Hd, const Matrix &R,
                                    const Vector &innovation) {
    const Matrix S = Hd * P_pred * Hd.transpose() + R;
    Eigen::LDLT<Matrix> ldlt(S);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array().abs() > 1e-300).all())
        throw NumericFailure("singular innovation covariance", 0);
    const Matrix K = ldlt.solve(Hd * P_pred).transpose();
    const Matrix IKH = Matrix::Identity(P_pred.rows(), P_pred.cols()) - K * Hd;
    GaussianBelief b(m_pred + K * innovation, IKH * P_pred * IKH.transpose() + K * R * K.transpose());
    b.clamp_psd();
    return b;
}

} // namespace detail

/// Predict (F m, F P F^T + Q), then update with the Joseph-form covariance.
inline GaussianBelief kalman_step(const GaussianBelief &belief, const Matrix &F, const Matrix &Q, const Matrix &Hd,
                                  const Matrix &R, const Vector &z) {
    const Vector m = F * belief.mean;
    const Matrix P = F * belief.cov * F.transpose() + Q;
    return detail::kalman_update(m, P, Hd, R, z - Hd * m);
}

inline GaussianBelief kalman_step(const GaussianBelief &belief, const LinearSystem &s, const Vector &z) {
    return kalman_step(belief, s.F, s.Q, s.Hd, s.R, z);
}

/// One Euler step of the drift for the mean, Jacobians at the current and predicted means.
inline GaussianBelief ekf_step(const GaussianBelief &belief, const ModelSpec &spec, double dt, const Vector &z) {
    if (!spec.drift_jacobian || !spec.measure_jacobian) throw UnsupportedOperation("EKF needs model Jacobians");
    const int d = spec.d;
    const Matrix F = Matrix::Identity(d, d) + spec.drift_jacobian(belief.mean) * dt;
    const Matrix S = spec.diffusion(belief.mean);
    const Vector m = belief.mean + spec.drift_at(belief.mean) * dt;
    const Matrix P = F * belief.cov * F.transpose() + S * S.transpose() * dt;
    const Matrix Hd = spec.measure_jacobian(m) * dt;
    const Matrix R = dt * Matrix::Identity(spec.d_obs, spec.d_obs);
    return detail::kalman_update(m, P, Hd, R, z - spec.measure_at(m) * dt);
}

/// Time-t law of the LinearOU state with prior N(0, 1): N(0, (1 + e^{-2t}) / 2).
inline GaussianBelief ou_posterior_density(double t) {
    if (!(t >= 0.0)) throw InvalidArgument("t must be >= 0");
    return {Vector::Zero(1), Matrix::Constant(1, 1, 0.5 * (1.0 + std::exp(-2.0 * t)))};
}

// ---------------------------------------------------------------------------
// Bootstrap particle filter
// ---------------------------------------------------------------------------

struct ParticleEnsemble {
    Matrix particles; // d x P
    Vector weights;   // normalized
    int step = 0;
    double ess = 0.0;       // after weighting, before resampling
    bool resampled = false; // whether the last step resampled
    Vector mean;            // weighted mean after the last weighting

    int size() const { return static_cast<int>(particles.cols()); }
};

inline Vector weighted_mean(const Matrix &particles, const Vector &weights) { return particles * weights; }

inline double kish_ess(const Vector &weights) {
    const double s = weights.sum();
    return s * s / weights.squaredNorm();
}

/// P draws from the prior with uniform weights.
inline ParticleEnsemble pf_init(const ModelSpec &spec, int P, std::uint64_t seed) {
    if (P < 1) throw InvalidArgument("particle count must be >= 1");
    ParticleEnsemble e;
    auto rng = keyed_source(seed, Stream::ParticleFilter, 0, 0);
    const Matrix L = Eigen::LLT<Matrix>(spec.prior_cov).matrixL();
    Matrix z(spec.d, P);
    for (int j = 0; j < P; ++j)
        for (int k = 0; k < spec.d; ++k) z(k, j) = rng();
    e.particles = (L * z).colwise() + spec.prior_mean;
    e.weights = Vector::Constant(P, 1.0 / P);
    e.ess = P;
    e.mean = weighted_mean(e.particles, e.weights);
    return e;
}

/// Systematic resampling; returns the selected ancestor indices.
inline std::vector<int> systematic_resample(const Vector &weights, double u01) {
    const int P = static_cast<int>(weights.size());
    std::vector<int> idx(P);
    double cum = weights(0);
    int i = 0;
    for (int j = 0; j < P; ++j) {
        const double u = (u01 + j) / P;
        while (u > cum && i < P - 1) cum += weights(++i);
        idx[j] = i;
    }
    return idx;
}

/// Propagate by one Euler-Maruyama step, weight by N(z; h(x) dt, dt I), and
/// resample systematically when ESS < threshold * P.
inline ParticleEnsemble pf_step(const ParticleEnsemble &ens, const ModelSpec &spec, double dt, const Vector &z,
                                double resample_threshold, std::uint64_t seed) {
    const int P = ens.size(), d = spec.d;
    if (P < 1) throw InvalidArgument("empty particle ensemble");
    ParticleEnsemble out;
    out.step = ens.step + 1;
    const std::uint64_t key = static_cast<std::uint64_t>(out.step);
    constexpr int chunk = 4096;
    const int n_chunks = (P + chunk - 1) / chunk;
    Matrix X(d, P);
    const double sdt = std::sqrt(dt);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < n_chunks; ++c) {
        const int f = c * chunk, m = std::min(chunk, P - f);
        auto rng = keyed_source(seed, Stream::ParticleFilter, key, static_cast<std::uint64_t>(c) + 1);
        const Matrix x = ens.particles.middleCols(f, m);
        Matrix dW(d, m);
        for (int j = 0; j < m; ++j)
            for (int k = 0; k < d; ++k) dW(k, j) = sdt * rng();
        Matrix next = x + spec.drift(x) * dt;
        if (spec.constant_diffusion) next += *spec.constant_diffusion * dW;
        else
            for (int j = 0; j < m; ++j) next.col(j) += spec.diffusion(x.col(j)) * dW.col(j);
        X.middleCols(f, m) = next;
    }
    const Matrix hz = (spec.measure(X) * dt).colwise() - z;
    Vector logw = (-hz.colwise().squaredNorm() / (2.0 * dt)).transpose();
    for (int j = 0; j < P; ++j) logw(j) += std::log(ens.weights(j));
    const double mx = logw.maxCoeff();
    if (!std::isfinite(mx)) throw DegenerateEnsemble("all particle weights vanished at step " + std::to_string(out.step), 0);
    Vector w = (logw.array() - mx).exp();
    const double s = w.sum();
    if (!(s > 0.0) || !std::isfinite(s))
        throw DegenerateEnsemble("all particle weights vanished at step " + std::to_string(out.step), 0);
    w /= s;
    out.mean = weighted_mean(X, w);
    out.ess = kish_ess(w);
    if (out.ess < resample_threshold * P) {
        auto rng = keyed_source(seed, Stream::ParticleFilter, key, 0);
        const auto idx = systematic_resample(w, rng.uniform());
        out.particles = X(Eigen::all, idx);
        out.weights = Vector::Constant(P, 1.0 / P);
        out.resampled = true;
    } else {
        out.particles = std::move(X);
        out.weights = std::move(w);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Particle density estimate
// ---------------------------------------------------------------------------

/// Weighted Gaussian KDE with diagonal Silverman bandwidth, n = Kish ESS.
/// In one dimension with many particles the density is precomputed on a
/// fine grid (linear binning, bin width h/8, kernel cut at 5h).
class ParticleKde {
  public:
    ParticleKde() = default;

    ParticleKde(const Matrix &particles, const Vector &weights, int binned_above = 2000)
        : centers_(particles), weights_(weights / weights.sum()) {
        const int d = static_cast<int>(particles.rows());
        const double n = kish_ess(weights_);
        const Vector mu = particles * weights_;
        const Vector var = ((particles.colwise() - mu).array().square().matrix() * weights_);
        const double factor = std::pow(4.0 / ((d + 2.0) * n), 1.0 / (d + 4.0));
        h_ = (var.cwiseSqrt() * factor).cwiseMax(1e-8);
        if (d == 1 && particles.cols() > binned_above) build_grid();
    }

    const Vector &bandwidth() const { return h_; }

    RowVector operator()(const Matrix &x) const {
        if (!grid_.empty()) return eval_grid(x);
        return eval_direct(x);
    }

    RowVector eval_direct(const Matrix &x) const {
        const int d = static_cast<int>(centers_.rows());
        const double norm = std::pow(2.0 * M_PI, -0.5 * d) / h_.prod();
        RowVector out = RowVector::Zero(x.cols());
        const Vector inv_h = h_.cwiseInverse();
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const Matrix z = (centers_.colwise() - x.col(j)).array().colwise() * inv_h.array();
            out(j) = norm * ((-0.5 * z.colwise().squaredNorm()).array().exp().matrix() * weights_)(0);
        }
        return out;
    }

    /// Draws from the kernel mixture: pick a particle by weight, add kernel noise.
    Matrix sample(int count, GaussianSource &rng) const {
        const int d = static_cast<int>(centers_.rows());
        std::vector<double> cum(weights_.size());
        double c = 0.0;
        for (Eigen::Index i = 0; i < weights_.size(); ++i) cum[i] = (c += weights_(i));
        Matrix out(d, count);
        for (int j = 0; j < count; ++j) {
            const double u = rng.uniform() * c;
            const auto it = std::lower_bound(cum.begin(), cum.end(), u);
            const Eigen::Index i = std::min<Eigen::Index>(it - cum.begin(), weights_.size() - 1);
            for (int k = 0; k < d; ++k) out(k, j) = centers_(k, i) + h_(k) * rng();
        }
        return out;
    }

  private:
    void build_grid() {
        const double h = h_(0);
        step_ = h / 8.0;
        const double lo = centers_.row(0).minCoeff() - 5.0 * h;
        const double hi = centers_.row(0).maxCoeff() + 5.0 * h;
        const int n = static_cast<int>(std::ceil((hi - lo) / step_)) + 1;
        lo_ = lo;
        std::vector<double> bins(n, 0.0);
        for (Eigen::Index i = 0; i < centers_.cols(); ++i) {
            const double t = (centers_(0, i) - lo) / step_;
            const int b = std::clamp(static_cast<int>(std::floor(t)), 0, n - 2);
            const double frac = t - b;
            bins[b] += (1.0 - frac) * weights_(i);
            bins[b + 1] += frac * weights_(i);
        }
        const int half = 40; // 5h / (h/8)
        std::vector<double> kernel(2 * half + 1);
        const double norm = 1.0 / (std::sqrt(2.0 * M_PI) * h);
        for (int k = -half; k <= half; ++k) kernel[k + half] = norm * std::exp(-0.5 * std::pow(k * step_ / h, 2));
        grid_.assign(n, 0.0);
        for (int b = 0; b < n; ++b) {
            if (bins[b] == 0.0) continue;
            for (int k = -half; k <= half; ++k) {
                const int g = b + k;
                if (g >= 0 && g < n) grid_[g] += bins[b] * kernel[k + half];
            }
        }
    }

    RowVector eval_grid(const Matrix &x) const {
        RowVector out(x.cols());
        const int n = static_cast<int>(grid_.size());
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const double t = (x(0, j) - lo_) / step_;
            if (t < 0.0 || t > n - 1) {
                out(j) = 0.0;
                continue;
            }
            const int b = std::min(static_cast<int>(t), n - 2);
            const double frac = t - b;
            out(j) = (1.0 - frac) * grid_[b] + frac * grid_[b + 1];
        }
        return out;
    }

    Matrix centers_;
    Vector weights_;
    Vector h_;
    std::vector<double> grid_;
    double lo_ = 0.0, step_ = 0.0;
};

} // namespace ebds
