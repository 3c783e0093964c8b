// Command-line front end: simulate, train, evaluate, density-dump, baseline
// and observe subcommands.
//
// Exit status: 0 success, 1 runtime or numeric failure, 2 usage error.
// Logs go to stderr; data goes to files only.
#pragma once

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "ebds/baselines.hpp"
#include "ebds/errors.hpp"
#include "ebds/io.hpp"
#include "ebds/metrics.hpp"
#include "ebds/model.hpp"
#include "ebds/normalize.hpp"
#include "ebds/simulate.hpp"
#include "ebds/trainer.hpp"

namespace ebds {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Signals an invalid flag combination detected after parsing.
class UsageError : public Error {
  public:
    using Error::Error;
};

/// Resolved settings of one invocation; hashed into every artifact.
struct RunConfig {
    std::string command;
    ExampleId example = ExampleId::LinearOU;
    Scheme scheme = Scheme::Euler;
    std::string dataset;
    std::string checkpoint;
    std::string out;
    long count = kDefaultDatasetSize;
    int steps = -1;
    std::uint64_t data_seed = 0;
    std::uint64_t train_seed = 0;
    std::uint64_t eval_seed = 0;
    TrainSchedule schedule{};
    NormMethod method = NormMethod::Quadrature;
    int M = 100;
    int K = 1000;
    int threads = 0;

    ModelSpec spec() const { return builtin_spec(example); }

    void validate() const {
        const ModelSpec s = spec();
        if (scheme == Scheme::Milstein && (s.d != 1 || s.d_obs != 1))
            throw UsageError("--scheme milstein needs a scalar model (d = d' = 1); " + std::string(to_string(example)) +
                             " has d = " + std::to_string(s.d));
        if (count < 1) throw UsageError("--count must be >= 1");
        if (M < 1 || K < 1) throw UsageError("--M and --K must be >= 1");
        try {
            schedule.validate();
        } catch (const InvalidArgument &e) {
            throw UsageError(e.what());
        }
    }

    /// Settings that determine results (paths and thread count excluded).
    io::json resolved() const {
        return io::json{{"command", command},
                        {"example", std::string(to_string(example))},
                        {"scheme", std::string(to_string(scheme))},
                        {"count", count},
                        {"steps", steps},
                        {"data_seed", data_seed},
                        {"train_seed", train_seed},
                        {"eval_seed", eval_seed},
                        {"schedule", schedule},
                        {"method", std::string(to_string(method))},
                        {"M", M},
                        {"K", K},
                        {"spec_hash", spec().hash()}};
    }

    std::string hash() const { return io::hash_json(resolved()); }
};

/// Writes config.json (resolved settings plus hash) into `dir`.
inline void write_config_snapshot(const std::filesystem::path &dir, const RunConfig &cfg, const io::json &extra = {}) {
    io::ensure_directory(dir);
    io::json j = cfg.resolved();
    j["config_hash"] = cfg.hash();
    j["paths"] = {{"dataset", cfg.dataset}, {"checkpoint", cfg.checkpoint}, {"out", cfg.out}};
    if (!extra.is_null()) j["extra"] = extra;
    io::write_json(dir / "config.json", j);
}

// ---------------------------------------------------------------------------
// Observation files: step,time,x0..x{d-1},y0..y{d'-1}
// ---------------------------------------------------------------------------

struct ObservationSequence {
    std::vector<int> step;
    std::vector<double> time;
    Matrix x; // d x (N+1), empty when the file has no state columns
    Matrix y; // d' x (N+1)
};

inline void write_observations(const std::filesystem::path &path, const TrajectoryBatch &b, int path_index,
                               double dt, const std::string &config_hash) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "# config_hash=" << config_hash << '\n' << "step,time";
    for (int k = 0; k < b.d; ++k) out << ",x" << k;
    for (int k = 0; k < b.d_obs; ++k) out << ",y" << k;
    out << '\n';
    for (int n = 0; n <= b.n_steps; ++n) {
        out << n << ',' << io::fmt_double(n * dt);
        for (int k = 0; k < b.d; ++k) out << ',' << io::fmt_double(b.x_at(path_index, n, k));
        for (int k = 0; k < b.d_obs; ++k) out << ',' << io::fmt_double(b.y_at(path_index, n, k));
        out << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

inline ObservationSequence read_observations(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path.string());
    std::string line;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::string col;
        while (std::getline(ss, col, ',')) header.push_back(col);
        break;
    }
    if (header.size() < 3 || header[0] != "step" || header[1] != "time")
        throw IoError("observation file needs a step,time,... header: " + path.string());
    std::vector<int> xcols, ycols;
    for (std::size_t c = 2; c < header.size(); ++c) {
        if (header[c].rfind('x', 0) == 0) xcols.push_back(static_cast<int>(c));
        else if (header[c].rfind('y', 0) == 0) ycols.push_back(static_cast<int>(c));
        else throw IoError("unexpected column '" + header[c] + "' in " + path.string());
    }
    if (ycols.empty()) throw IoError("observation file has no y columns: " + path.string());
    ObservationSequence obs;
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> r;
        while (std::getline(ss, cell, ',')) {
            try {
                r.push_back(std::stod(cell));
            } catch (const std::exception &) {
                throw IoError("malformed number '" + cell + "' in " + path.string());
            }
        }
        if (r.size() != header.size()) throw IoError("ragged row in " + path.string());
        rows.push_back(std::move(r));
    }
    const int T = static_cast<int>(rows.size());
    obs.x.resize(static_cast<Eigen::Index>(xcols.size()), T);
    obs.y.resize(static_cast<Eigen::Index>(ycols.size()), T);
    for (int t = 0; t < T; ++t) {
        obs.step.push_back(static_cast<int>(rows[t][0]));
        obs.time.push_back(rows[t][1]);
        for (std::size_t k = 0; k < xcols.size(); ++k) obs.x(static_cast<Eigen::Index>(k), t) = rows[t][xcols[k]];
        for (std::size_t k = 0; k < ycols.size(); ++k) obs.y(static_cast<Eigen::Index>(k), t) = rows[t][ycols[k]];
    }
    for (int t = 0; t < T; ++t)
        if (obs.step[t] != t) throw IoError("observation steps must run 0, 1, 2, ... in " + path.string());
    return obs;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

namespace detail {

inline Logger stderr_logger() {
    return [](const std::string &s) { std::cerr << s << '\n'; };
}

inline std::filesystem::path default_out(const std::string &name) {
    const char *root = std::getenv("EBDS_OUTPUT_ROOT");
    return std::filesystem::path(root ? root : "ebds_out") / name;
}

/// Loads run.json plus checkpoints 1..steps, verifying model hashes.
inline std::vector<EnergyNet> load_run(const std::filesystem::path &run_dir, const ModelSpec &spec, int steps,
                                       io::json *run_out = nullptr) {
    const io::json run = io::read_json(run_dir / "run.json");
    if (run.at("spec_hash").get<std::string>() != spec.hash())
        throw UsageError("checkpoint directory " + run_dir.string() + " was trained for a different model (spec hash " +
                         run.at("spec_hash").get<std::string>() + ", expected " + spec.hash() + ")");
    const int available = run.at("steps");
    if (steps < 0) steps = available;
    std::vector<EnergyNet> nets;
    for (int k = 1; k <= steps; ++k) {
        Checkpoint c = load_checkpoint(run_dir, k);
        if (c.meta.at("spec_hash").get<std::string>() != spec.hash())
            throw UsageError("checkpoint step " + std::to_string(k) + " has a mismatched spec hash");
        nets.push_back(std::move(c.net));
    }
    if (run_out) *run_out = run;
    return nets;
}

inline ExampleId example_of_run(const std::filesystem::path &run_dir) {
    const io::json run = io::read_json(run_dir / "run.json");
    return parse_example(run.at("spec").at("params").at("example").get<std::string>());
}

} // namespace detail

inline int parse_and_dispatch(int argc, const char *const *argv) {
    CLI::App app{"Energy-based deep splitting filter"};
    app.set_config("--config", "", "TOML-like configuration file; sections name subcommands");
    app.require_subcommand(1);
    RunConfig cfg;
    int threads = 0;
    app.add_option("--threads", threads, "Worker threads (0: runtime default)")->check(CLI::NonNegativeNumber);

    std::string example = "linear_ou", scheme = "euler", method = "quadrature";
    const auto add_example = [&](CLI::App *s) {
        s->add_option("--example", example, "linear_ou | mean_reverting_cubic | bistable | spring_mass")
            ->check(CLI::IsMember({"linear_ou", "mean_reverting_cubic", "bistable", "spring_mass"}));
    };

    auto *sim = app.add_subcommand("simulate", "Generate the coupled and latent training dataset");
    add_example(sim);
    sim->add_option("--count", cfg.count, "Paths of each kind")->capture_default_str();
    sim->add_option("--seed", cfg.data_seed, "Master seed");
    sim->add_option("--out", cfg.out, "Dataset directory");

    auto *train = app.add_subcommand("train", "Train the per-step networks");
    add_example(train);
    train->add_option("--scheme", scheme, "euler | milstein")->check(CLI::IsMember({"euler", "milstein"}));
    train->add_option("--dataset", cfg.dataset, "Dataset directory")->required();
    train->add_option("--out", cfg.out, "Checkpoint directory");
    train->add_option("--seed", cfg.train_seed, "Training seed");
    train->add_option("--retries", cfg.schedule.retries, "Retrain a step up to R times above --retry-threshold");
    train->add_option("--retry-threshold", cfg.schedule.retry_threshold, "Validation loss triggering a retry");
    train->add_option("--steps", cfg.steps, "Train only the first n steps");
    train->add_option("--lr", cfg.schedule.adam.learning_rate, "ADAM learning rate")->capture_default_str();
    train->add_option("--epochs-per-size", cfg.schedule.epochs_per_size)->capture_default_str();
    train->add_option("--patience", cfg.schedule.patience)->capture_default_str();
    train->add_option("--rotations", cfg.schedule.max_rotations, "Passes over the batch-size rotation")
        ->capture_default_str();
    train->add_option("--first-step-rotations", cfg.schedule.first_step_rotations)->capture_default_str();
    train->add_option("--batch-sizes", cfg.schedule.batch_sizes)->delimiter(',');
    train->add_option("--hidden", cfg.schedule.hidden, "Hidden layer widths")->delimiter(',');
    train->add_option("--validation-fraction", cfg.schedule.validation_fraction)->capture_default_str();
    bool cold_start = false;
    train->add_flag("--cold-start", cold_start, "Initialize every step from scratch instead of the previous step");
    bool no_resume = false;
    train->add_flag("--no-resume", no_resume, "Ignore checkpoints already present in --out");
    bool resample = false;
    train->add_flag("--resample", resample, "Draw fresh paths for every step instead of reusing the dataset");

    auto *eval = app.add_subcommand("evaluate", "Compute MAE, FME and KLD over fresh sequences");
    eval->add_option("--checkpoint", cfg.checkpoint, "Checkpoint directory from train")->required();
    eval->add_option("--M", cfg.M, "Evaluation sequences")->capture_default_str();
    eval->add_option("--K", cfg.K, "KLD samples per sequence and step")->capture_default_str();
    eval->add_option("--seed", cfg.eval_seed, "Evaluation seed");
    eval->add_option("--steps", cfg.steps, "Evaluate only the first n steps");
    eval->add_option("--method", method, "quadrature | hmc")->check(CLI::IsMember({"quadrature", "hmc"}));
    std::vector<int> pf_particles{1000, 100};
    int pf_reference = 100000;
    eval->add_option("--pf-particles", pf_particles, "Particle-filter baselines")->delimiter(',');
    eval->add_option("--pf-reference", pf_reference, "Particles of the nonlinear reference filter");
    eval->add_option("--out", cfg.out, "Metrics CSV");

    auto *dump = app.add_subcommand("density-dump", "Write the normalized step-n density on a grid");
    dump->add_option("--checkpoint", cfg.checkpoint)->required();
    int dump_step = 1;
    dump->add_option("--step", dump_step)->required();
    std::string obs_path, grid_spec = "-5:5:1001";
    dump->add_option("--obs", obs_path, "Observation CSV")->required();
    dump->add_option("--grid", grid_spec, "lo:hi:npts");
    dump->add_option("--out", cfg.out, "Density CSV")->required();
    dump->add_option("--seed", cfg.eval_seed, "Seed for HMC in high dimension");

    auto *base = app.add_subcommand("baseline", "Run KF, EKF or a particle filter on an observation file");
    add_example(base);
    std::string filter = "kf";
    int particles = 1000;
    base->add_option("--filter", filter)->check(CLI::IsMember({"kf", "ekf", "pf"}))->required();
    base->add_option("--particles", particles)->check(CLI::PositiveNumber);
    std::string base_obs;
    base->add_option("--obs", base_obs)->required();
    base->add_option("--out", cfg.out)->required();
    base->add_option("--seed", cfg.eval_seed);

    auto *obs = app.add_subcommand("observe", "Simulate one coupled sequence into an observation CSV");
    add_example(obs);
    obs->add_option("--seed", cfg.eval_seed);
    std::uint64_t obs_index = 0;
    obs->add_option("--index", obs_index, "Sequence index within the evaluation stream");
    obs->add_option("--out", cfg.out)->required();

    auto *mis = app.add_subcommand("mismatch-histogram", "Diagnostic histograms of the drifting toy model");
    mis->add_option("--count", cfg.count, "Samples")->capture_default_str();
    mis->add_option("--seed", cfg.data_seed);
    int mis_bins = 120;
    mis->add_option("--bins", mis_bins)->check(CLI::Range(2, 100000));
    mis->add_option("--out", cfg.out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    const Logger log = detail::stderr_logger();
    try {
#ifdef _OPENMP
        if (threads > 0) omp_set_num_threads(threads);
#endif
        cfg.threads = threads;
        cfg.example = parse_example(example);
        cfg.scheme = parse_scheme(scheme);
        cfg.method = parse_norm_method(method);
        cfg.schedule.warm_start = !cold_start;

        if (sim->parsed()) {
            cfg.command = "simulate";
            cfg.validate();
            if (cfg.count > std::numeric_limits<int>::max()) throw UsageError("--count too large");
            if (cfg.out.empty()) cfg.out = detail::default_out("dataset-" + example).string();
            const ModelSpec spec = cfg.spec();
            const TimeGrid grid = TimeGrid::of(spec);
            build_dataset(spec, grid, static_cast<int>(cfg.count), cfg.data_seed, cfg.out);
            write_config_snapshot(cfg.out, cfg);
            log("simulate example=" + example + " count=" + std::to_string(cfg.count) + " out=" + cfg.out +
                " config_hash=" + cfg.hash());
            return kExitOk;
        }

        if (train->parsed()) {
            cfg.command = "train";
            cfg.validate();
            if (cfg.out.empty()) cfg.out = detail::default_out("run-" + example).string();
            const ModelSpec spec = cfg.spec();
            const Dataset ds = load_dataset(cfg.dataset);
            if (ds.spec_hash != spec.hash())
                throw UsageError("dataset " + cfg.dataset + " was generated for a different model than --example " + example);
            cfg.count = ds.size();
            cfg.data_seed = ds.seed;
            SequenceOptions opts;
            opts.steps = cfg.steps;
            opts.resume = !no_resume;
            opts.resample = resample;
            opts.config_hash = cfg.hash();
            opts.log = log;
            write_config_snapshot(cfg.out, cfg);
            train_sequence(spec, ds, cfg.schedule, cfg.scheme, cfg.train_seed, cfg.out, opts);
            log("train done out=" + cfg.out + " config_hash=" + cfg.hash());
            return kExitOk;
        }

        if (eval->parsed()) {
            cfg.command = "evaluate";
            cfg.example = detail::example_of_run(cfg.checkpoint);
            cfg.validate();
            const ModelSpec spec = cfg.spec();
            const auto nets = detail::load_run(cfg.checkpoint, spec, cfg.steps);
            EvalConfig ec;
            ec.M = cfg.M;
            ec.K = cfg.K;
            ec.seed = cfg.eval_seed;
            ec.steps = static_cast<int>(nets.size());
            ec.pf_baseline_particles = pf_particles;
            ec.pf_reference_particles = pf_reference;
            ec.quadrature_max_dim = cfg.method == NormMethod::Quadrature ? 3 : 0;
            if (spec.d > 3) ec.quadrature_max_dim = 0;
            MetricSeries s = evaluate_run(nets, spec, ec, log);
            s.config_hash = cfg.hash();
            if (cfg.out.empty()) cfg.out = (std::filesystem::path(cfg.checkpoint) / "metrics.csv").string();
            write_metrics_csv(cfg.out, s);
            io::json snap = ec;
            write_config_snapshot(std::filesystem::path(cfg.out).parent_path().empty()
                                      ? std::filesystem::path(".")
                                      : std::filesystem::path(cfg.out).parent_path(),
                                  cfg, snap);
            if (s.floor_hits > 0) log("warning: density floor hit " + std::to_string(s.floor_hits) + " times");
            log("evaluate done out=" + cfg.out + " config_hash=" + cfg.hash());
            return kExitOk;
        }

        if (dump->parsed()) {
            cfg.command = "density-dump";
            cfg.example = detail::example_of_run(cfg.checkpoint);
            const ModelSpec spec = cfg.spec();
            const auto nets = detail::load_run(cfg.checkpoint, spec, dump_step);
            const ObservationSequence seq = read_observations(obs_path);
            if (seq.y.rows() != spec.d_obs) throw UsageError("observation dimension does not match the model");
            if (dump_step < 1 || dump_step >= seq.y.cols())
                throw UsageError("--step outside the observation file");
            double lo = 0.0, hi = 0.0;
            int npts = 0;
            {
                std::stringstream ss(grid_spec);
                std::string a, b, c;
                if (!std::getline(ss, a, ':') || !std::getline(ss, b, ':') || !std::getline(ss, c))
                    throw UsageError("--grid must be lo:hi:npts");
                try {
                    lo = std::stod(a);
                    hi = std::stod(b);
                    npts = std::stoi(c);
                } catch (const std::exception &) {
                    throw UsageError("--grid must be lo:hi:npts");
                }
                if (!(hi > lo) || npts < 2) throw UsageError("--grid needs lo < hi and npts >= 2");
            }
            const Matrix yh = seq.y.leftCols(dump_step + 1);
            const Vector y_hist = Eigen::Map<const Vector>(yh.data(), yh.size());
            const EnergyNet &net = nets.back();
            if (spec.d == 1) {
                const FilterEstimate est = quadrature_normalize_auto(net, y_hist, spec);
                write_density_csv(cfg.out, est.density, lo, hi, npts, cfg.hash());
                log("density-dump step=" + std::to_string(dump_step) + " Z=" + io::fmt_double(est.Z) +
                    " mean=" + io::fmt_double(est.mean(0)));
            } else {
                const FilterEstimate est =
                    hmc_normalize(net, y_hist, spec.prior_mean, HmcConfig{}, 10000, cfg.eval_seed, {}, log);
                write_marginals_csv(cfg.out, est.samples, lo, hi, npts, cfg.hash());
                log("density-dump step=" + std::to_string(dump_step) + " Z=" + io::fmt_double(est.Z) +
                    " acceptance=" + io::fmt_double(est.acceptance));
            }
            return kExitOk;
        }

        if (base->parsed()) {
            cfg.command = "baseline";
            const ModelSpec spec = cfg.spec();
            const ObservationSequence seq = read_observations(base_obs);
            if (seq.y.rows() != spec.d_obs) throw UsageError("observation dimension does not match the model");
            if (filter == "kf" && !spec.is_linear()) throw UsageError("--filter kf needs a linear model");
            std::ofstream out(cfg.out, std::ios::trunc);
            if (!out) throw IoError("cannot open for writing: " + cfg.out);
            out << "# config_hash=" << cfg.hash() << " filter=" << filter << '\n' << "step,time";
            for (int k = 0; k < spec.d; ++k) out << ",mean" << k;
            for (int k = 0; k < spec.d; ++k) out << ",spread" << k;
            out << '\n';
            GaussianBelief b(spec.prior_mean, spec.prior_cov);
            std::optional<LinearSystem> sys;
            if (filter == "kf") sys = discretize_linear(spec, spec.dt);
            ParticleEnsemble ens;
            if (filter == "pf") ens = pf_init(spec, particles, derive_seed(cfg.eval_seed, Stream::ParticleFilter));
            for (Eigen::Index n = 1; n < seq.y.cols(); ++n) {
                const Vector z = seq.y.col(n) - seq.y.col(n - 1);
                Vector mean, spread;
                if (filter == "kf") {
                    b = kalman_step(b, *sys, z);
                    mean = b.mean;
                    spread = b.cov.diagonal().cwiseSqrt();
                } else if (filter == "ekf") {
                    b = ekf_step(b, spec, spec.dt, z);
                    mean = b.mean;
                    spread = b.cov.diagonal().cwiseSqrt();
                } else {
                    ens = pf_step(ens, spec, spec.dt, z, 0.5, derive_seed(cfg.eval_seed, Stream::ParticleFilter));
                    mean = ens.mean;
                    spread = ParticleKde(ens.particles, ens.weights).bandwidth(); // KDE bandwidth summary
                }
                out << n << ',' << io::fmt_double(n * spec.dt);
                for (int k = 0; k < spec.d; ++k) out << ',' << io::fmt_double(mean(k));
                for (int k = 0; k < spec.d; ++k) out << ',' << io::fmt_double(spread(k));
                out << '\n';
            }
            log("baseline filter=" + filter + " steps=" + std::to_string(seq.y.cols() - 1) + " out=" + cfg.out);
            return kExitOk;
        }

        if (obs->parsed()) {
            cfg.command = "observe";
            const ModelSpec spec = cfg.spec();
            const TrajectoryBatch b =
                sample_coupled(spec, TimeGrid::of(spec), 1, cfg.eval_seed, Stream::Evaluation, obs_index);
            write_observations(cfg.out, b, 0, spec.dt, cfg.hash());
            log("observe example=" + example + " out=" + cfg.out);
            return kExitOk;
        }
        if (mis->parsed()) {
            cfg.command = "mismatch-histogram";
            if (cfg.count < 1 || cfg.count > std::numeric_limits<int>::max()) throw UsageError("--count out of range");
            const auto h = mismatch_histogram(static_cast<int>(cfg.count), cfg.data_seed, mis_bins);
            std::ofstream out(cfg.out, std::ios::trunc);
            if (!out) throw IoError("cannot open for writing: " + cfg.out);
            out << "# config_hash=" << cfg.hash() << '\n' << "bin_lo,bin_hi,prior,end,first_step\n";
            for (std::size_t b = 0; b < h.prior.size(); ++b)
                out << io::fmt_double(h.edges[b]) << ',' << io::fmt_double(h.edges[b + 1]) << ','
                    << io::fmt_double(h.prior[b]) << ',' << io::fmt_double(h.end[b]) << ','
                    << io::fmt_double(h.first_step[b]) << '\n';
            log("mismatch-histogram overlap_end=" + io::fmt_double(h.overlap_end) +
                " overlap_first_step=" + io::fmt_double(h.overlap_first) + " out=" + cfg.out);
            return kExitOk;
        }
    } catch (const UsageError &e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const UnsupportedOperation &e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitUsage;
}

} // namespace ebds
