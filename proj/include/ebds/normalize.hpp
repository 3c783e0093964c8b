// Normalizing an unnormalized density Phi into a filter estimate.
//
// Low dimension (d <= 3): composite trapezoid rule on a tensor grid with
// refinement checking. Higher dimension: Hamiltonian Monte Carlo for the
// mean, plus importance sampling against a Gaussian fitted to the HMC
// output for the normalizing constant.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ebds/energynet.hpp"
#include "ebds/errors.hpp"
#include "ebds/model.hpp"
#include "ebds/rng.hpp"

namespace ebds {

/// Batched density: d x B states -> 1 x B values.
using DensityFn = std::function<RowVector(const Matrix &)>;

enum class NormMethod { Quadrature, Hmc };

inline std::string_view to_string(NormMethod m) { return m == NormMethod::Quadrature ? "quadrature" : "hmc"; }

inline NormMethod parse_norm_method(std::string_view s) {
    if (s == "quadrature") return NormMethod::Quadrature;
    if (s == "hmc") return NormMethod::Hmc;
    throw InvalidArgument("unknown normalization method: " + std::string(s));
}

struct FilterEstimate {
    int step = 0;
    Vector y_hist;
    double Z = 0.0;
    Vector mean;
    Matrix cov;
    NormMethod method = NormMethod::Quadrature;
    DensityFn density; // Phi / Z

    // quadrature diagnostics
    Vector lo, hi;
    int grid_points = 0; // per dimension, final grid
    double refinement_change = 0.0;
    // hmc diagnostics
    Matrix samples; // d x count
    double acceptance = 0.0;
    double rhat = 0.0;
    double ess = 0.0;
};

// ---------------------------------------------------------------------------
// Quadrature
// ---------------------------------------------------------------------------

struct QuadratureOptions {
    double rel_tol = 1e-6;       // allowed relative change of Z under 2x refinement
    int max_points = 1 << 16;    // per dimension
    long chunk = 8192;
};

namespace detail {

struct GridMoments {
    double Z = 0.0;
    Vector first;
    Matrix second;
    double peak = 0.0;
    double boundary = 0.0; // largest value on the domain boundary
};

/// Trapezoid integrals of phi, x phi, x x^T phi on an n^d tensor grid.
inline GridMoments grid_moments(const DensityFn &phi, const Vector &lo, const Vector &hi, int n, long chunk) {
    const int d = static_cast<int>(lo.size());
    long total = 1;
    for (int k = 0; k < d; ++k) total *= n;
    const Vector h = (hi - lo) / static_cast<double>(n - 1);
    GridMoments g;
    g.first = Vector::Zero(d);
    g.second = Matrix::Zero(d, d);
    for (long start = 0; start < total; start += chunk) {
        const long m = std::min(chunk, total - start);
        Matrix x(d, m);
        RowVector w(m);
        std::vector<char> on_boundary(m);
        for (long j = 0; j < m; ++j) {
            long r = start + j;
            double wt = 1.0;
            bool bnd = false;
            for (int k = 0; k < d; ++k) {
                const int i = static_cast<int>(r % n);
                r /= n;
                x(k, j) = lo(k) + h(k) * i;
                const bool end = (i == 0 || i == n - 1);
                wt *= end ? 0.5 * h(k) : h(k);
                bnd = bnd || end;
            }
            w(j) = wt;
            on_boundary[j] = bnd;
        }
        const RowVector v = phi(x);
        if (!v.allFinite()) throw NumericFailure("non-finite density value on the quadrature grid", 0);
        for (long j = 0; j < m; ++j) {
            const double wv = w(j) * v(j);
            g.Z += wv;
            g.first += wv * x.col(j);
            g.second += wv * x.col(j) * x.col(j).transpose();
            g.peak = std::max(g.peak, v(j));
            if (on_boundary[j]) g.boundary = std::max(g.boundary, v(j));
        }
    }
    return g;
}

} // namespace detail

/// Normalizes `phi` on the box [lo, hi] with `n_points` per dimension, doubling
/// the grid until Z changes by less than rel_tol. Throws GridTooCoarse otherwise.
inline FilterEstimate quadrature_normalize(const DensityFn &phi, const Vector &lo, const Vector &hi, int n_points,
                                           const QuadratureOptions &opts = {}) {
    const int d = static_cast<int>(lo.size());
    if (d < 1 || d > 3) throw UnsupportedOperation("quadrature normalization needs 1 <= d <= 3");
    if (hi.size() != d || !((hi - lo).array() > 0.0).all()) throw InvalidArgument("invalid quadrature box");
    if (n_points < 3) throw InvalidArgument("quadrature needs at least 3 points per dimension");
    int n = n_points;
    detail::GridMoments coarse = detail::grid_moments(phi, lo, hi, n, opts.chunk);
    for (;;) {
        const int n2 = 2 * n - 1;
        if (n2 > opts.max_points)
            throw GridTooCoarse("quadrature refinement did not converge below " + std::to_string(opts.max_points) +
                                    " points per dimension",
                                0);
        detail::GridMoments fine = detail::grid_moments(phi, lo, hi, n2, opts.chunk);
        if (!(fine.Z > 0.0)) throw NumericFailure("density integrates to zero on the grid", 0);
        const double change = std::abs(fine.Z - coarse.Z) / fine.Z;
        n = n2;
        coarse = std::move(fine);
        if (change < opts.rel_tol) {
            FilterEstimate est;
            est.method = NormMethod::Quadrature;
            est.Z = coarse.Z;
            est.mean = coarse.first / coarse.Z;
            est.cov = coarse.second / coarse.Z - est.mean * est.mean.transpose();
            est.lo = lo;
            est.hi = hi;
            est.grid_points = n;
            est.refinement_change = change;
            const double Z = est.Z;
            est.density = [phi, Z](const Matrix &x) -> RowVector { return phi(x) / Z; };
            return est;
        }
    }
}

/// Box centred at `center` with half-width `half` per dimension, widened by
/// 1.5x until the boundary value drops below `ratio` times the peak.
inline std::pair<Vector, Vector> auto_domain(const DensityFn &phi, const Vector &center, const Vector &half,
                                             int n_points, double ratio = 1e-12, int max_expansions = 12) {
    Vector w = half;
    for (int it = 0; it <= max_expansions; ++it) {
        const Vector lo = center - w, hi = center + w;
        const auto g = detail::grid_moments(phi, lo, hi, n_points, 8192);
        if (g.peak > 0.0 && g.boundary < ratio * g.peak) return {lo, hi};
        w *= 1.5;
    }
    throw GridTooCoarse("density does not decay inside the expanded quadrature domain", 0);
}

/// Unnormalized density of a network at a fixed observation history.
inline DensityFn network_phi(std::shared_ptr<const EnergyNet> net, const Vector &y_hist) {
    return [net, y_hist](const Matrix &x) -> RowVector { return net->phi(make_inputs(x, y_hist)); };
}

inline FilterEstimate quadrature_normalize(const EnergyNet &net, const Vector &y_hist, const Vector &lo,
                                           const Vector &hi, int n_points, const QuadratureOptions &opts = {}) {
    auto p = std::make_shared<const EnergyNet>(net);
    FilterEstimate est = quadrature_normalize(network_phi(p, y_hist), lo, hi, n_points, opts);
    est.y_hist = y_hist;
    est.step = net.layout().history_len - 1;
    return est;
}

/// Quadrature on the automatic domain prior_mean +- 8 max(1, prior sd).
inline FilterEstimate quadrature_normalize_auto(const EnergyNet &net, const Vector &y_hist, const ModelSpec &spec,
                                                int n_points = 2001, const QuadratureOptions &opts = {}) {
    auto p = std::make_shared<const EnergyNet>(net);
    const DensityFn phi = network_phi(p, y_hist);
    const Vector half = 8.0 * spec.prior_cov.diagonal().cwiseSqrt().cwiseMax(1.0);
    const auto [lo, hi] = auto_domain(phi, spec.prior_mean, half, std::max(201, n_points / 4));
    FilterEstimate est = quadrature_normalize(phi, lo, hi, n_points, opts);
    est.y_hist = y_hist;
    est.step = net.layout().history_len - 1;
    return est;
}

// ---------------------------------------------------------------------------
// Hamiltonian Monte Carlo
// ---------------------------------------------------------------------------

struct HmcConfig {
    double step_size = 0.1;
    double trajectory_length = 1.0;
    int chains = 4;
    int burn_in = 1000;
    double init_scale = 1.0;   // chains start at center + init_scale * N(0, I)
    double rhat_max = 1.1;
    double min_acceptance = 0.2;
    bool require_convergence = true;

    int leapfrog_steps() const { return std::max(1, static_cast<int>(std::lround(trajectory_length / step_size))); }

    void validate() const {
        if (!(step_size > 0.0)) throw InvalidArgument("HMC step size must be positive");
        if (trajectory_length < step_size) throw InvalidArgument("HMC trajectory length must be >= step size");
        if (chains < 2) throw InvalidArgument("HMC needs at least two chains for convergence checks");
        if (burn_in < 0) throw InvalidArgument("HMC burn-in must be >= 0");
    }
};

/// Target with energy E (density proportional to exp(-E)) and its gradient.
struct EnergyTarget {
    int dim = 1;
    std::function<RowVector(const Matrix &)> energy;
    std::function<Matrix(const Matrix &, RowVector *)> grad; // d x B, energies written to the pointer
};

inline EnergyTarget network_target(std::shared_ptr<const EnergyNet> net, const Vector &y_hist) {
    EnergyTarget t;
    t.dim = net->layout().state_dim;
    t.energy = [net, y_hist](const Matrix &x) -> RowVector { return net->energy(make_inputs(x, y_hist)); };
    t.grad = [net, y_hist](const Matrix &x, RowVector *e) -> Matrix {
        return net->grad_x_energy(make_inputs(x, y_hist), e);
    };
    return t;
}

struct HmcResult {
    Matrix samples; // d x count, chains interleaved
    double acceptance = 0.0;
    std::vector<double> chain_acceptance;
    double rhat = 1.0; // largest over dimensions
};

/// Gelman-Rubin statistic per dimension for chains stored as d x n matrices.
inline Vector gelman_rubin(const std::vector<Matrix> &chains) {
    const int m = static_cast<int>(chains.size());
    const int d = static_cast<int>(chains.front().rows());
    const double n = static_cast<double>(chains.front().cols());
    Matrix means(d, m);
    Vector W = Vector::Zero(d);
    for (int c = 0; c < m; ++c) {
        means.col(c) = chains[c].rowwise().mean();
        W += (chains[c].colwise() - means.col(c)).array().square().rowwise().sum().matrix() / (n - 1.0);
    }
    W /= m;
    const Vector grand = means.rowwise().mean();
    const Vector B = n * (means.colwise() - grand).array().square().rowwise().sum().matrix() / (m - 1.0);
    const Vector var_plus = (n - 1.0) / n * W + B / n;
    return (var_plus.array() / W.array()).sqrt();
}

/// Leapfrog HMC with unit mass; all chains advance together as one batch.
inline HmcResult hmc_sample(const EnergyTarget &target, const Vector &center, const HmcConfig &cfg, int count,
                            std::uint64_t seed, const Logger &log = {}) {
    cfg.validate();
    if (count < cfg.chains) throw InvalidArgument("HMC sample count must be at least the number of chains");
    const int d = target.dim, C = cfg.chains, L = cfg.leapfrog_steps();
    const double eps = cfg.step_size;
    const int per_chain = (count + C - 1) / C;
    std::vector<GaussianSource> rng;
    for (int c = 0; c < C; ++c) rng.push_back(keyed_source(seed, Stream::Hmc, static_cast<std::uint64_t>(c)));

    Matrix x(d, C);
    for (int c = 0; c < C; ++c)
        for (int k = 0; k < d; ++k) x(k, c) = center(k) + cfg.init_scale * rng[c]();
    RowVector e;
    Matrix g = target.grad(x, &e);

    std::vector<Matrix> kept(C, Matrix(d, per_chain));
    std::vector<long> accepted(C, 0);
    const int total = cfg.burn_in + per_chain;
    Matrix p(d, C);
    for (int it = 0; it < total; ++it) {
        for (int c = 0; c < C; ++c)
            for (int k = 0; k < d; ++k) p(k, c) = rng[c]();
        const RowVector h0 = e + 0.5 * p.colwise().squaredNorm();
        Matrix xn = x, pn = p, gn = g;
        RowVector en;
        pn -= 0.5 * eps * gn;
        for (int s = 0; s < L; ++s) {
            xn += eps * pn;
            gn = target.grad(xn, &en);
            if (s + 1 < L) pn -= eps * gn;
        }
        pn -= 0.5 * eps * gn;
        const RowVector h1 = en + 0.5 * pn.colwise().squaredNorm();
        for (int c = 0; c < C; ++c) {
            const double log_a = h0(c) - h1(c);
            const double u = rng[c].uniform();
            if (std::isfinite(log_a) && std::log(u) < log_a) {
                x.col(c) = xn.col(c);
                g.col(c) = gn.col(c);
                e(c) = en(c);
                if (it >= cfg.burn_in) ++accepted[c];
            }
            if (it >= cfg.burn_in) kept[c].col(it - cfg.burn_in) = x.col(c);
        }
    }

    HmcResult res;
    res.samples.resize(d, count);
    for (int j = 0; j < count; ++j) res.samples.col(j) = kept[j % C].col(j / C);
    long acc = 0;
    for (int c = 0; c < C; ++c) {
        res.chain_acceptance.push_back(static_cast<double>(accepted[c]) / per_chain);
        acc += accepted[c];
    }
    res.acceptance = static_cast<double>(acc) / (static_cast<double>(per_chain) * C);
    res.rhat = per_chain > 1 ? gelman_rubin(kept).maxCoeff() : 1.0;
    if (res.acceptance < cfg.min_acceptance && log)
        log("warning: HMC acceptance rate " + io::fmt_double(res.acceptance) + " below " +
            io::fmt_double(cfg.min_acceptance) + "; consider a smaller step size");
    if (cfg.require_convergence && !(res.rhat < cfg.rhat_max))
        throw UnreliableEstimate("HMC chains did not converge (R-hat " + io::fmt_double(res.rhat) + ")", 0);
    return res;
}

inline HmcResult hmc_sample(const EnergyNet &net, const Vector &y_hist, const Vector &center, const HmcConfig &cfg,
                            int count, std::uint64_t seed, const Logger &log = {}) {
    return hmc_sample(network_target(std::make_shared<const EnergyNet>(net), y_hist), center, cfg, count, seed, log);
}

struct ImportanceOptions {
    int samples = 100000;     // K
    double inflation = 1.5;   // proposal covariance = inflation * HMC sample covariance
    double min_ess_fraction = 0.05;
};

/// Z by importance sampling from N(mean, inflation * cov); ESS written to `ess`.
inline double importance_normalizer(const EnergyTarget &target, const Vector &mean, const Matrix &cov,
                                    const ImportanceOptions &opts, std::uint64_t seed, double *ess = nullptr) {
    const int d = target.dim, K = opts.samples;
    const Matrix qcov = opts.inflation * cov + 1e-12 * Matrix::Identity(d, d);
    Eigen::LLT<Matrix> llt(qcov);
    if (llt.info() != Eigen::Success) throw NumericFailure("importance proposal covariance is not positive definite", 0);
    const Matrix Lq = llt.matrixL();
    const double log_det = 2.0 * Lq.diagonal().array().log().sum();
    auto rng = keyed_source(seed, Stream::ImportanceSampling);
    Matrix z(d, K);
    for (int j = 0; j < K; ++j)
        for (int k = 0; k < d; ++k) z(k, j) = rng();
    const Matrix x = (Lq * z).colwise() + mean;
    const RowVector log_q =
        (-0.5 * z.colwise().squaredNorm()).array() - 0.5 * (d * std::log(2.0 * M_PI) + log_det);
    RowVector log_w(K);
    constexpr int chunk = 8192;
    for (int f = 0; f < K; f += chunk) {
        const int m = std::min(chunk, K - f);
        log_w.segment(f, m) = -target.energy(x.middleCols(f, m)) - log_q.segment(f, m);
    }
    if (!log_w.allFinite()) throw NumericFailure("non-finite importance weight", 0);
    const double mx = log_w.maxCoeff();
    const RowVector w = (log_w.array() - mx).exp();
    const double s = w.sum(), s2 = w.squaredNorm();
    const double e = s * s / s2;
    if (ess) *ess = e;
    if (e < opts.min_ess_fraction * K)
        throw UnreliableEstimate("importance sampling ESS " + io::fmt_double(e) + " below " +
                                     io::fmt_double(opts.min_ess_fraction * K),
                                 0);
    return std::exp(mx) * s / K;
}

/// Mean from HMC samples; Z from importance sampling against the fitted Gaussian.
inline FilterEstimate hmc_normalize(const EnergyTarget &target, const Vector &center, const HmcConfig &cfg, int count,
                                    std::uint64_t seed, const ImportanceOptions &is = {}, const Logger &log = {}) {
    HmcResult h = hmc_sample(target, center, cfg, count, seed, log);
    FilterEstimate est;
    est.method = NormMethod::Hmc;
    est.mean = h.samples.rowwise().mean();
    const Matrix c = h.samples.colwise() - est.mean;
    est.cov = c * c.transpose() / static_cast<double>(std::max<Eigen::Index>(1, h.samples.cols() - 1));
    est.Z = importance_normalizer(target, est.mean, est.cov, is, seed, &est.ess);
    est.samples = std::move(h.samples);
    est.acceptance = h.acceptance;
    est.rhat = h.rhat;
    const double Z = est.Z;
    const auto energy = target.energy;
    est.density = [energy, Z](const Matrix &x) -> RowVector {
        return (-energy(x)).array().exp().matrix() / Z;
    };
    return est;
}

inline FilterEstimate hmc_normalize(const EnergyNet &net, const Vector &y_hist, const Vector &center,
                                    const HmcConfig &cfg, int count, std::uint64_t seed,
                                    const ImportanceOptions &is = {}, const Logger &log = {}) {
    FilterEstimate est =
        hmc_normalize(network_target(std::make_shared<const EnergyNet>(net), y_hist), center, cfg, count, seed, is, log);
    est.y_hist = y_hist;
    est.step = net.layout().history_len - 1;
    return est;
}

} // namespace ebds
