// Evaluation metrics (MAE, FME, KLD) and the evaluation pipeline that runs
// every filter over fresh coupled sequences.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ebds/baselines.hpp"
#include "ebds/energynet.hpp"
#include "ebds/errors.hpp"
#include "ebds/io.hpp"
#include "ebds/model.hpp"
#include "ebds/normalize.hpp"
#include "ebds/rng.hpp"
#include "ebds/simulate.hpp"

namespace ebds {

inline constexpr double kDensityFloor = 1e-300;

/// Per step n: (1/M) sum_m |ref_m - approx_m|, with means stored as d x M.
inline std::vector<double> fme(const std::vector<Matrix> &ref_means, const std::vector<Matrix> &approx_means) {
    if (ref_means.size() != approx_means.size()) throw ContractViolation("fme: step counts differ");
    std::vector<double> out;
    for (std::size_t n = 0; n < ref_means.size(); ++n) {
        if (ref_means[n].rows() != approx_means[n].rows() || ref_means[n].cols() != approx_means[n].cols())
            throw ContractViolation("fme: shape mismatch at step " + std::to_string(n));
        if (ref_means[n].cols() == 0) throw ContractViolation("fme: no sequences");
        out.push_back((ref_means[n] - approx_means[n]).colwise().norm().mean());
    }
    return out;
}

/// Per step n: (1/M) sum_m |X_m - mean_m|.
inline std::vector<double> mae(const std::vector<Matrix> &true_states, const std::vector<Matrix> &filter_means) {
    if (true_states.size() != filter_means.size()) throw ContractViolation("mae: step counts differ");
    std::vector<double> out;
    for (std::size_t n = 0; n < true_states.size(); ++n) {
        if (true_states[n].rows() != filter_means[n].rows() || true_states[n].cols() != filter_means[n].cols())
            throw ContractViolation("mae: shape mismatch at step " + std::to_string(n));
        if (true_states[n].cols() == 0) throw ContractViolation("mae: no sequences");
        out.push_back((true_states[n] - filter_means[n]).colwise().norm().mean());
    }
    return out;
}

/// Sum and spread of log(p / p_hat) over sampled points.
struct KldAccumulator {
    double sum = 0.0;
    double sum_sq = 0.0;
    long count = 0;
    long floor_hits = 0;

    void add(const RowVector &p, const RowVector &p_hat) {
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            double a = p(i), b = p_hat(i);
            if (!(a >= kDensityFloor)) {
                a = kDensityFloor;
                ++floor_hits;
            }
            if (!(b >= kDensityFloor)) {
                b = kDensityFloor;
                ++floor_hits;
            }
            const double r = a == b ? 0.0 : std::log(a) - std::log(b);
            sum += r;
            sum_sq += r * r;
            ++count;
        }
    }

    void merge(const KldAccumulator &o) {
        sum += o.sum;
        sum_sq += o.sum_sq;
        count += o.count;
        floor_hits += o.floor_hits;
    }

    double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }

    /// Monte Carlo standard error of the mean.
    double standard_error() const {
        if (count < 2) return 0.0;
        const double m = mean();
        const double var = (sum_sq - count * m * m) / static_cast<double>(count - 1);
        return std::sqrt(std::max(var, 0.0) / static_cast<double>(count));
    }
};

using SamplerFn = std::function<Matrix(int, GaussianSource &)>;

/// Forward KLD estimate for one pair of densities: K samples from the reference.
inline KldAccumulator kld_single(const SamplerFn &ref_sampler, const DensityFn &ref_eval, const DensityFn &approx_eval,
                                 int K, GaussianSource &rng) {
    const Matrix x = ref_sampler(K, rng);
    KldAccumulator acc;
    acc.add(ref_eval(x), approx_eval(x));
    return acc;
}

/// Per-step KLD over M sequences. Entry [n][m] holds the m-th sequence's
/// densities at step n. Returns one accumulator per step; the per-sample
/// average is acc.mean() and the raw double sum acc.sum.
inline std::vector<KldAccumulator> kld(const std::vector<std::vector<SamplerFn>> &ref_sampler,
                                       const std::vector<std::vector<DensityFn>> &ref_eval,
                                       const std::vector<std::vector<DensityFn>> &approx_eval, int K, int M,
                                       std::uint64_t seed) {
    const std::size_t N = ref_sampler.size();
    if (ref_eval.size() != N || approx_eval.size() != N) throw ContractViolation("kld: step counts differ");
    std::vector<KldAccumulator> out(N);
    for (std::size_t n = 0; n < N; ++n) {
        if (static_cast<int>(ref_sampler[n].size()) != M || static_cast<int>(ref_eval[n].size()) != M ||
            static_cast<int>(approx_eval[n].size()) != M)
            throw ContractViolation("kld: sequence counts differ from M");
        for (int m = 0; m < M; ++m) {
            auto rng = keyed_source(seed, Stream::KldSampling, static_cast<std::uint64_t>(m), n);
            out[n].merge(kld_single(ref_sampler[n][m], ref_eval[n][m], approx_eval[n][m], K, rng));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation pipeline
// ---------------------------------------------------------------------------

struct EvalConfig {
    int M = 100;
    int K = 1000;
    std::uint64_t seed = 0;
    int steps = -1;                               // -1: every available step
    int pf_reference_particles = 100000;          // reference for nonlinear models
    std::vector<int> pf_baseline_particles{1000, 100};
    bool include_ebds = true;
    bool include_ekf = true;
    int quadrature_points = 1001;
    int quadrature_max_dim = 1;                   // HMC above this dimension
    HmcConfig hmc{};
    int hmc_samples = 10000;
    ImportanceOptions importance{10000, 1.5, 0.05};
    double resample_threshold = 0.5;
};

inline void to_json(io::json &j, const EvalConfig &c) {
    j = io::json{{"M", c.M},
                 {"K", c.K},
                 {"seed", c.seed},
                 {"steps", c.steps},
                 {"pf_reference_particles", c.pf_reference_particles},
                 {"pf_baseline_particles", c.pf_baseline_particles},
                 {"include_ebds", c.include_ebds},
                 {"include_ekf", c.include_ekf},
                 {"quadrature_points", c.quadrature_points},
                 {"quadrature_max_dim", c.quadrature_max_dim},
                 {"hmc_step_size", c.hmc.step_size},
                 {"hmc_trajectory_length", c.hmc.trajectory_length},
                 {"hmc_chains", c.hmc.chains},
                 {"hmc_burn_in", c.hmc.burn_in},
                 {"hmc_samples", c.hmc_samples},
                 {"is_samples", c.importance.samples},
                 {"is_inflation", c.importance.inflation},
                 {"resample_threshold", c.resample_threshold}};
}

struct MetricRow {
    int step = 0;
    double time = 0.0;
    std::string filter;
    std::string metric;
    double value = 0.0;
};

struct MetricSeries {
    std::vector<MetricRow> rows;
    int M = 0;
    int K = 0;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string reference;
    std::vector<std::string> filters;
    long floor_hits = 0;

    /// Values of one (filter, metric) pair ordered by step.
    std::vector<double> series(const std::string &filter, const std::string &metric) const {
        std::vector<double> out;
        for (const auto &r : rows)
            if (r.filter == filter && r.metric == metric) out.push_back(r.value);
        return out;
    }
};

inline void write_metrics_csv(const std::filesystem::path &path, const MetricSeries &s) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "# config_hash=" << s.config_hash << " reference=" << s.reference << " floor_hits=" << s.floor_hits << '\n';
    out << "step,time,filter,metric,value,M,K,seed\n";
    for (const auto &r : s.rows)
        out << r.step << ',' << io::fmt_double(r.time) << ',' << r.filter << ',' << r.metric << ','
            << io::fmt_double(r.value) << ',' << s.M << ',' << s.K << ',' << s.seed << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

/// One filter's output at a step: mean, density and (for references) a sampler.
struct StepOutput {
    Vector mean;
    DensityFn density;
    SamplerFn sampler;
};

namespace detail {

class FilterRunner {
  public:
    virtual ~FilterRunner() = default;
    /// Advance to step n (1-based) with increment z = Y_n - Y_{n-1}; y_hist is Y_{0:n} flattened.
    virtual StepOutput advance(int n, const Vector &z, const Vector &y_hist) = 0;
};

inline StepOutput gaussian_output(const GaussianBelief &b) {
    auto belief = std::make_shared<GaussianBelief>(b);
    StepOutput o;
    o.mean = b.mean;
    o.density = [belief](const Matrix &x) -> RowVector { return belief->density(x); };
    o.sampler = [belief](int k, GaussianSource &rng) -> Matrix { return belief->sample(k, rng); };
    return o;
}

class KalmanRunner : public FilterRunner {
  public:
    explicit KalmanRunner(const ModelSpec &spec) : sys_(discretize_linear(spec, spec.dt)), belief_(spec.prior_mean, spec.prior_cov) {}
    StepOutput advance(int, const Vector &z, const Vector &) override {
        belief_ = kalman_step(belief_, sys_, z);
        return gaussian_output(belief_);
    }

  private:
    LinearSystem sys_;
    GaussianBelief belief_;
};

class EkfRunner : public FilterRunner {
  public:
    explicit EkfRunner(const ModelSpec &spec) : spec_(spec), belief_(spec.prior_mean, spec.prior_cov) {}
    StepOutput advance(int, const Vector &z, const Vector &) override {
        belief_ = ekf_step(belief_, spec_, spec_.dt, z);
        return gaussian_output(belief_);
    }

  private:
    const ModelSpec &spec_;
    GaussianBelief belief_;
};

class ParticleRunner : public FilterRunner {
  public:
    ParticleRunner(const ModelSpec &spec, int P, std::uint64_t seed, double threshold)
        : spec_(spec), seed_(seed), threshold_(threshold), ens_(pf_init(spec, P, seed)) {}
    StepOutput advance(int, const Vector &z, const Vector &) override {
        ens_ = pf_step(ens_, spec_, spec_.dt, z, threshold_, seed_);
        // The KDE uses the pre-resampling weights when resampling did not happen;
        // after resampling the equally weighted survivors carry the same law.
        auto kde = std::make_shared<ParticleKde>(ens_.particles, ens_.weights);
        StepOutput o;
        o.mean = ens_.mean;
        o.density = [kde](const Matrix &x) -> RowVector { return (*kde)(x); };
        o.sampler = [kde](int k, GaussianSource &rng) -> Matrix { return kde->sample(k, rng); };
        return o;
    }

  private:
    const ModelSpec &spec_;
    std::uint64_t seed_;
    double threshold_;
    ParticleEnsemble ens_;
};

class EbdsRunner : public FilterRunner {
  public:
    EbdsRunner(const ModelSpec &spec, const std::vector<std::shared_ptr<const EnergyNet>> &nets, const EvalConfig &cfg,
               std::uint64_t seed)
        : spec_(spec), nets_(nets), cfg_(cfg), seed_(seed) {}

    StepOutput advance(int n, const Vector &, const Vector &y_hist) override {
        const auto &net = nets_.at(n - 1);
        FilterEstimate est;
        if (spec_.d <= cfg_.quadrature_max_dim) {
            const DensityFn phi = network_phi(net, y_hist);
            const Vector half = 8.0 * spec_.prior_cov.diagonal().cwiseSqrt().cwiseMax(1.0);
            const auto [lo, hi] = auto_domain(phi, spec_.prior_mean, half, std::max(201, cfg_.quadrature_points / 4));
            est = quadrature_normalize(phi, lo, hi, cfg_.quadrature_points);
        } else {
            est = hmc_normalize(network_target(net, y_hist), spec_.prior_mean, cfg_.hmc, cfg_.hmc_samples,
                                derive_seed(seed_, Stream::Hmc, static_cast<std::uint64_t>(n)), cfg_.importance);
        }
        StepOutput o;
        o.mean = est.mean;
        o.density = est.density;
        return o;
    }

  private:
    const ModelSpec &spec_;
    const std::vector<std::shared_ptr<const EnergyNet>> &nets_;
    const EvalConfig &cfg_;
    std::uint64_t seed_;
};

struct SequenceStats {
    // [step][filter]
    std::vector<std::vector<double>> abs_err;
    std::vector<std::vector<double>> mean_err;
    std::vector<std::vector<KldAccumulator>> kld;
};

} // namespace detail

/// Runs the reference, the baselines and (optionally) EBDS over M fresh coupled
/// sequences and aggregates MAE, FME and KLD per step. `nets[k-1]` is the
/// step-k network.
inline MetricSeries evaluate_run(const std::vector<EnergyNet> &nets, const ModelSpec &spec, const EvalConfig &cfg,
                                 const Logger &log = {}) {
    if (cfg.M < 1 || cfg.K < 1) throw InvalidArgument("M and K must be >= 1");
    const bool with_ebds = cfg.include_ebds;
    int N = cfg.steps < 0 ? (with_ebds ? static_cast<int>(nets.size()) : spec.horizon_steps) : cfg.steps;
    if (N < 1) throw InvalidArgument("nothing to evaluate");
    if (with_ebds && static_cast<int>(nets.size()) < N)
        throw IoError("missing checkpoint for step " + std::to_string(nets.size() + 1));
    std::vector<std::shared_ptr<const EnergyNet>> shared;
    if (with_ebds)
        for (int k = 0; k < N; ++k) {
            if (nets[k].layout().history_len != k + 2)
                throw ContractViolation("checkpoint " + std::to_string(k + 1) + " has an unexpected input width");
            shared.push_back(std::make_shared<const EnergyNet>(nets[k]));
        }

    const bool linear = spec.is_linear() && spec.constant_diffusion.has_value();
    std::vector<std::string> names;
    names.push_back(linear ? "kf" : "pf" + std::to_string(cfg.pf_reference_particles));
    const std::string reference = names.front();
    if (with_ebds) names.push_back("ebds");
    if (!linear && cfg.include_ekf) names.push_back("ekf");
    if (linear) {
        for (int P : cfg.pf_baseline_particles) names.push_back("pf" + std::to_string(P));
    } else {
        for (int P : cfg.pf_baseline_particles)
            if (P != cfg.pf_reference_particles) names.push_back("pf" + std::to_string(P));
    }
    const int F = static_cast<int>(names.size());
    const TimeGrid grid(spec.dt, N);

    std::vector<detail::SequenceStats> per_seq(cfg.M);
    std::vector<std::string> errors(cfg.M);
#pragma omp parallel for schedule(dynamic)
    for (int m = 0; m < cfg.M; ++m) {
        try {
            const TrajectoryBatch path = sample_coupled(spec, grid, 1, cfg.seed, Stream::Evaluation, static_cast<std::uint64_t>(m));
            std::vector<std::unique_ptr<detail::FilterRunner>> runners;
            for (const auto &name : names) {
                if (name == "kf") runners.push_back(std::make_unique<detail::KalmanRunner>(spec));
                else if (name == "ekf") runners.push_back(std::make_unique<detail::EkfRunner>(spec));
                else if (name == "ebds")
                    runners.push_back(std::make_unique<detail::EbdsRunner>(spec, shared, cfg, derive_seed(cfg.seed, Stream::Hmc, m)));
                else {
                    const int P = std::stoi(name.substr(2));
                    runners.push_back(std::make_unique<detail::ParticleRunner>(
                        spec, P, derive_seed(cfg.seed, Stream::ParticleFilter, static_cast<std::uint64_t>(m), P),
                        cfg.resample_threshold));
                }
            }
            auto &st = per_seq[m];
            st.abs_err.assign(N, std::vector<double>(F));
            st.mean_err.assign(N, std::vector<double>(F));
            st.kld.assign(N, std::vector<KldAccumulator>(F));
            for (int n = 1; n <= N; ++n) {
                const Vector z = path.y_step(n).col(0) - path.y_step(n - 1).col(0);
                const Vector y_hist = path.y_history(n).col(0);
                const Vector x_true = path.x_step(n).col(0);
                std::vector<StepOutput> outs;
                for (auto &r : runners) outs.push_back(r->advance(n, z, y_hist));
                auto rng = keyed_source(cfg.seed, Stream::KldSampling, static_cast<std::uint64_t>(m), n);
                const Matrix xs = outs[0].sampler(cfg.K, rng);
                const RowVector p_ref = outs[0].density(xs);
                for (int f = 0; f < F; ++f) {
                    st.abs_err[n - 1][f] = (x_true - outs[f].mean).norm();
                    st.mean_err[n - 1][f] = (outs[0].mean - outs[f].mean).norm();
                    st.kld[n - 1][f].add(p_ref, f == 0 ? p_ref : outs[f].density(xs));
                }
            }
            if (log) log("sequence=" + std::to_string(m) + " done");
        } catch (const std::exception &e) {
            errors[m] = e.what();
        }
    }
    for (int m = 0; m < cfg.M; ++m)
        if (!errors[m].empty()) throw NumericFailure("evaluation sequence " + std::to_string(m) + ": " + errors[m], 0);

    MetricSeries s;
    s.M = cfg.M;
    s.K = cfg.K;
    s.seed = cfg.seed;
    s.reference = reference;
    s.filters = names;
    for (int n = 1; n <= N; ++n) {
        for (int f = 0; f < F; ++f) {
            double a = 0.0, b = 0.0;
            KldAccumulator k;
            for (int m = 0; m < cfg.M; ++m) {
                a += per_seq[m].abs_err[n - 1][f];
                b += per_seq[m].mean_err[n - 1][f];
                k.merge(per_seq[m].kld[n - 1][f]);
            }
            s.floor_hits += k.floor_hits;
            const double t = grid.time(n);
            s.rows.push_back({n, t, names[f], "mae", a / cfg.M});
            s.rows.push_back({n, t, names[f], "fme", b / cfg.M});
            s.rows.push_back({n, t, names[f], "kld", k.mean()});
            s.rows.push_back({n, t, names[f], "kld_sum", k.sum});
            s.rows.push_back({n, t, names[f], "kld_se", k.standard_error()});
        }
    }
    return s;
}

/// Least-squares slope of values against 1, 2, ..., n.
inline double trend_slope(const std::vector<double> &v) {
    const int n = static_cast<int>(v.size());
    if (n < 2) throw InvalidArgument("trend needs at least two points");
    double mx = 0.0, my = 0.0;
    for (int i = 0; i < n; ++i) {
        mx += i + 1;
        my += v[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0;
    for (int i = 0; i < n; ++i) {
        sxy += (i + 1 - mx) * (v[i] - my);
        sxx += (i + 1 - mx) * (i + 1 - mx);
    }
    return sxy / sxx;
}

/// Writes (x, density) rows for a 1-d estimate on [lo, hi] with n points.
inline void write_density_csv(const std::filesystem::path &path, const DensityFn &density, double lo, double hi, int n,
                              const std::string &config_hash) {
    if (n < 2 || !(hi > lo)) throw InvalidArgument("invalid density grid");
    Matrix x(1, n);
    for (int i = 0; i < n; ++i) x(0, i) = lo + (hi - lo) * i / (n - 1);
    const RowVector p = density(x);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "# config_hash=" << config_hash << '\n' << "x,density\n";
    for (int i = 0; i < n; ++i) out << io::fmt_double(x(0, i)) << ',' << io::fmt_double(p(i)) << '\n';
    if (!out) throw IoError("write failed: " + path.string());
}

/// Per-dimension marginal densities from samples (weighted KDE) on [lo, hi].
inline void write_marginals_csv(const std::filesystem::path &path, const Matrix &samples, double lo, double hi, int n,
                                const std::string &config_hash) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "# config_hash=" << config_hash << '\n' << "dim,x,density\n";
    const Vector w = Vector::Ones(samples.cols());
    for (Eigen::Index k = 0; k < samples.rows(); ++k) {
        const ParticleKde kde(samples.row(k), w);
        Matrix x(1, n);
        for (int i = 0; i < n; ++i) x(0, i) = lo + (hi - lo) * i / (n - 1);
        const RowVector p = kde(x);
        for (int i = 0; i < n; ++i) out << k << ',' << io::fmt_double(x(0, i)) << ',' << io::fmt_double(p(i)) << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

} // namespace ebds
