// Euler-Maruyama path generation and the on-disk training dataset.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ebds/errors.hpp"
#include "ebds/io.hpp"
#include "ebds/model.hpp"
#include "ebds/rng.hpp"

namespace ebds {

/// Uniform partition t_n = n dt, n = 0..n_steps.
struct TimeGrid {
    double dt = 0.01;
    int n_steps = 1;

    TimeGrid() = default;
    TimeGrid(double step, int steps) : dt(step), n_steps(steps) {
        if (!(dt > 0.0) || n_steps < 1) throw InvalidArgument("time grid needs dt > 0 and n_steps >= 1");
    }
    static TimeGrid of(const ModelSpec &spec) { return {spec.dt, spec.horizon_steps}; }

    double time(int n) const { return n * dt; }
    std::vector<double> times() const {
        std::vector<double> t(n_steps + 1);
        for (int n = 0; n <= n_steps; ++n) t[n] = time(n);
        return t;
    }
};

enum class TrajectoryKind { Coupled, Latent };

/// Sampled paths stored row-major as [path][step][dim].
struct TrajectoryBatch {
    TrajectoryKind kind = TrajectoryKind::Coupled;
    int paths = 0;
    int n_steps = 0;
    int d = 1;
    int d_obs = 1;
    std::uint64_t seed = 0;
    std::vector<double> x;
    std::vector<double> y; // empty for latent batches

    double &x_at(int p, int n, int k) { return x[(static_cast<std::size_t>(p) * (n_steps + 1) + n) * d + k]; }
    double x_at(int p, int n, int k) const { return x[(static_cast<std::size_t>(p) * (n_steps + 1) + n) * d + k]; }
    double &y_at(int p, int n, int k) { return y[(static_cast<std::size_t>(p) * (n_steps + 1) + n) * d_obs + k]; }
    double y_at(int p, int n, int k) const {
        return y[(static_cast<std::size_t>(p) * (n_steps + 1) + n) * d_obs + k];
    }

    /// States at step n for paths [first, first + count), as d x count.
    Matrix x_step(int n, int first = 0, int count = -1) const {
        if (count < 0) count = paths - first;
        Matrix out(d, count);
        for (int p = 0; p < count; ++p)
            for (int k = 0; k < d; ++k) out(k, p) = x_at(first + p, n, k);
        return out;
    }

    Matrix y_step(int n, int first = 0, int count = -1) const {
        if (count < 0) count = paths - first;
        Matrix out(d_obs, count);
        for (int p = 0; p < count; ++p)
            for (int k = 0; k < d_obs; ++k) out(k, p) = y_at(first + p, n, k);
        return out;
    }

    /// Observation history Y_{0:last} flattened per column: (d'(last+1)) x count.
    Matrix y_history(int last, int first = 0, int count = -1) const {
        if (count < 0) count = paths - first;
        Matrix out(d_obs * (last + 1), count);
        for (int p = 0; p < count; ++p)
            for (int n = 0; n <= last; ++n)
                for (int k = 0; k < d_obs; ++k) out(n * d_obs + k, p) = y_at(first + p, n, k);
        return out;
    }
};

namespace detail {

inline void simulate_paths(const ModelSpec &spec, const TimeGrid &grid, int batch, std::uint64_t seed,
                           Stream stream, bool coupled, TrajectoryBatch &out, std::uint64_t index_offset) {
    if (batch < 1) throw InvalidArgument("batch must be >= 1");
    const int d = spec.d, dq = spec.d_obs, N = grid.n_steps;
    const double dt = grid.dt, sdt = std::sqrt(dt);
    out.kind = coupled ? TrajectoryKind::Coupled : TrajectoryKind::Latent;
    out.paths = batch;
    out.n_steps = N;
    out.d = d;
    out.d_obs = dq;
    out.seed = seed;
    out.x.assign(static_cast<std::size_t>(batch) * (N + 1) * d, 0.0);
    if (coupled) out.y.assign(static_cast<std::size_t>(batch) * (N + 1) * dq, 0.0);
    else out.y.clear();

    const Eigen::LLT<Matrix> prior_chol(spec.prior_cov);
    const Matrix L = prior_chol.matrixL();
    constexpr int chunk = 2048;
    const int n_chunks = (batch + chunk - 1) / chunk;

#pragma omp parallel for schedule(dynamic)
    for (int c = 0; c < n_chunks; ++c) {
        const int first = c * chunk;
        const int count = std::min(chunk, batch - first);
        std::vector<GaussianSource> noise;
        noise.reserve(count);
        for (int p = 0; p < count; ++p) noise.push_back(keyed_source(seed, stream, index_offset + first + p));

        Matrix X(d, count), dW(d, count), dV(dq, count), Y = Matrix::Zero(dq, count);
        for (int p = 0; p < count; ++p) {
            Vector xi(d);
            for (int k = 0; k < d; ++k) xi(k) = noise[p]();
            X.col(p) = spec.prior_mean + L * xi;
        }
        auto store = [&](int n) {
            for (int p = 0; p < count; ++p) {
                for (int k = 0; k < d; ++k) out.x_at(first + p, n, k) = X(k, p);
                if (coupled)
                    for (int k = 0; k < dq; ++k) out.y_at(first + p, n, k) = Y(k, p);
            }
        };
        store(0);
        for (int n = 0; n < N; ++n) {
            for (int p = 0; p < count; ++p) {
                for (int k = 0; k < d; ++k) dW(k, p) = sdt * noise[p]();
                if (coupled)
                    for (int k = 0; k < dq; ++k) dV(k, p) = sdt * noise[p]();
            }
            Matrix drift = spec.drift(X);
            if (spec.constant_diffusion) {
                X += drift * dt + (*spec.constant_diffusion) * dW;
            } else {
                Matrix next = X + drift * dt;
                for (int p = 0; p < count; ++p) next.col(p) += spec.diffusion(X.col(p)) * dW.col(p);
                X = std::move(next);
            }
            // Y uses h at the new state X_{n+1}.
            if (coupled) Y += spec.measure(X) * dt + dV;
            store(n + 1);
        }
    }
}

} // namespace detail

/// Coupled (X, Y) Euler-Maruyama paths with X_0 ~ p0 and Y_0 = 0.
inline TrajectoryBatch sample_coupled(const ModelSpec &spec, const TimeGrid &grid, int batch, std::uint64_t seed,
                                      Stream stream = Stream::Coupled, std::uint64_t index_offset = 0) {
    TrajectoryBatch out;
    detail::simulate_paths(spec, grid, batch, seed, stream, true, out, index_offset);
    return out;
}

/// Latent paths driven by noise independent of the coupled stream.
inline TrajectoryBatch sample_latent(const ModelSpec &spec, const TimeGrid &grid, int batch, std::uint64_t seed,
                                     Stream stream = Stream::Latent, std::uint64_t index_offset = 0) {
    TrajectoryBatch out;
    detail::simulate_paths(spec, grid, batch, seed, stream, false, out, index_offset);
    return out;
}

/// Coupled and latent batches of equal size; sample i pairs coupled path i with latent path i.
struct Dataset {
    TrajectoryBatch coupled;
    TrajectoryBatch latent;
    std::string spec_hash;
    std::uint64_t seed = 0;

    int size() const { return coupled.paths; }
    int n_steps() const { return coupled.n_steps; }
};

inline Dataset make_dataset(const ModelSpec &spec, const TimeGrid &grid, int count, std::uint64_t seed) {
    Dataset ds;
    ds.coupled = sample_coupled(spec, grid, count, seed);
    ds.latent = sample_latent(spec, grid, count, seed);
    ds.spec_hash = spec.hash();
    ds.seed = seed;
    return ds;
}

inline constexpr int kDefaultDatasetSize = 1'000'000;

/// Writes manifest.json plus coupled_x.f64, coupled_y.f64, latent_x.f64.
inline void write_dataset(const Dataset &ds, const ModelSpec &spec, const std::filesystem::path &dir) {
    try {
        io::ensure_directory(dir);
        io::write_doubles(dir / "coupled_x.f64", ds.coupled.x);
        io::write_doubles(dir / "coupled_y.f64", ds.coupled.y);
        io::write_doubles(dir / "latent_x.f64", ds.latent.x);
    } catch (const IoError &e) {
        throw IoError(std::string("dataset write failed: ") + e.what());
    }
    io::json m;
    m["format"] = "float64 little-endian, row-major [path][step][dim]";
    m["spec_hash"] = ds.spec_hash;
    m["spec"] = spec.describe();
    m["seed"] = ds.seed;
    m["count"] = {{"coupled", ds.coupled.paths}, {"latent", ds.latent.paths}};
    m["dims"] = {{"d", spec.d}, {"d_obs", spec.d_obs}};
    m["dt"] = spec.dt;
    m["N"] = ds.coupled.n_steps;
    m["streams"] = {{"coupled", static_cast<std::uint64_t>(Stream::Coupled)},
                    {"latent", static_cast<std::uint64_t>(Stream::Latent)}};
    m["files"] = {{"coupled_x.f64", io::hash_doubles(ds.coupled.x)},
                  {"coupled_y.f64", io::hash_doubles(ds.coupled.y)},
                  {"latent_x.f64", io::hash_doubles(ds.latent.x)}};
    io::write_json(dir / "manifest.json", m);
}

inline Dataset build_dataset(const ModelSpec &spec, const TimeGrid &grid, int count, std::uint64_t seed,
                             const std::filesystem::path &dir) {
    Dataset ds = make_dataset(spec, grid, count, seed);
    write_dataset(ds, spec, dir);
    return ds;
}

/// Reads a dataset directory and verifies every file checksum.
inline Dataset load_dataset(const std::filesystem::path &dir) {
    const io::json m = io::read_json(dir / "manifest.json");
    Dataset ds;
    ds.spec_hash = m.at("spec_hash").get<std::string>();
    ds.seed = m.at("seed").get<std::uint64_t>();
    const int d = m.at("dims").at("d"), dq = m.at("dims").at("d_obs"), N = m.at("N");
    auto load = [&](const char *name) {
        auto data = io::read_doubles(dir / name);
        if (io::hash_doubles(data) != m.at("files").at(name).get<std::string>())
            throw IoError(std::string("checksum mismatch for ") + name);
        return data;
    };
    auto fill = [&](TrajectoryBatch &b, TrajectoryKind kind, int paths) {
        b.kind = kind;
        b.paths = paths;
        b.n_steps = N;
        b.d = d;
        b.d_obs = dq;
        b.seed = ds.seed;
    };
    fill(ds.coupled, TrajectoryKind::Coupled, m.at("count").at("coupled"));
    fill(ds.latent, TrajectoryKind::Latent, m.at("count").at("latent"));
    ds.coupled.x = load("coupled_x.f64");
    ds.coupled.y = load("coupled_y.f64");
    ds.latent.x = load("latent_x.f64");
    const auto expect = [&](const std::vector<double> &v, int paths, int dim) {
        if (v.size() != static_cast<std::size_t>(paths) * (N + 1) * dim)
            throw IoError("dataset array size does not match manifest");
    };
    expect(ds.coupled.x, ds.coupled.paths, d);
    expect(ds.coupled.y, ds.coupled.paths, dq);
    expect(ds.latent.x, ds.latent.paths, d);
    return ds;
}

/// Drifting diagnostic X_t = X_0 + 10 t + W_t with X_0 ~ N(0, 1): histograms of
/// X_0, X_1 and X_dt on a common grid, as densities.
struct MismatchHistogram {
    std::vector<double> edges;
    std::vector<double> prior, end, first_step;
    double overlap_end = 0.0;   // integral of min(prior, end)
    double overlap_first = 0.0; // integral of min(prior, first_step)
};

inline MismatchHistogram mismatch_histogram(int count, std::uint64_t seed, int bins = 120, double dt = 0.01) {
    if (count < 1 || bins < 2) throw InvalidArgument("mismatch histogram needs count >= 1 and bins >= 2");
    const double lo = -5.0, hi = 15.0, w = (hi - lo) / bins;
    MismatchHistogram h;
    for (int b = 0; b <= bins; ++b) h.edges.push_back(lo + b * w);
    h.prior.assign(bins, 0.0);
    h.end.assign(bins, 0.0);
    h.first_step.assign(bins, 0.0);
    auto bump = [&](std::vector<double> &v, double x) {
        const int b = static_cast<int>(std::floor((x - lo) / w));
        if (b >= 0 && b < bins) v[b] += 1.0 / (count * w);
    };
    for (int p = 0; p < count; ++p) {
        auto rng = keyed_source(seed, Stream::Diagnostic, static_cast<std::uint64_t>(p));
        const double x0 = rng();
        bump(h.prior, x0);
        bump(h.end, x0 + 10.0 + rng());
        bump(h.first_step, x0 + 10.0 * dt + std::sqrt(dt) * rng());
    }
    for (int b = 0; b < bins; ++b) {
        h.overlap_end += std::min(h.prior[b], h.end[b]) * w;
        h.overlap_first += std::min(h.prior[b], h.first_step[b]) * w;
    }
    return h;
}

} // namespace ebds
