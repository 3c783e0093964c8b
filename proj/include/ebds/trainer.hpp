// Recursive per-step regression and the checkpoint sequence.
//
// Step n -> n+1 fits Phi_{n+1}(X~_n, Y_{0:n+1}) to
//   p_n(X~_{n+1}) + f(X~_{n+1}, p_n, grad p_n) dt + <b(X~_{n+1}, p_n), dY_n>
//   [+ 1/2 b b' (dY_n^2 - dt)]   (Milstein, d = d' = 1)
// where p_n is the frozen previous network (the prior for n = 0).
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "ebds/energynet.hpp"
#include "ebds/errors.hpp"
#include "ebds/io.hpp"
#include "ebds/model.hpp"
#include "ebds/rng.hpp"
#include "ebds/simulate.hpp"

namespace ebds {

enum class Scheme { Euler, Milstein };

inline std::string_view to_string(Scheme s) { return s == Scheme::Euler ? "euler" : "milstein"; }

inline Scheme parse_scheme(std::string_view s) {
    if (s == "euler") return Scheme::Euler;
    if (s == "milstein") return Scheme::Milstein;
    throw InvalidArgument("unknown scheme: " + std::string(s));
}

// ---------------------------------------------------------------------------
// Previous-step density
// ---------------------------------------------------------------------------

/// Gaussian prior density with its analytic gradient.
struct GaussianDensity {
    Vector mean;
    Matrix cov;

    GaussianDensity() = default;
    GaussianDensity(Vector m, Matrix c) : mean(std::move(m)), cov(std::move(c)) {
        Eigen::LLT<Matrix> llt(cov);
        if (llt.info() != Eigen::Success) throw InvalidArgument("covariance must be positive definite");
        precision_ = llt.solve(Matrix::Identity(cov.rows(), cov.cols()));
        const double logdet = 2.0 * Matrix(llt.matrixL()).diagonal().array().log().sum();
        log_norm_ = -0.5 * (static_cast<double>(mean.size()) * std::log(2.0 * M_PI) + logdet);
    }

    RowVector log_density(const Matrix &x) const {
        const Matrix c = x.colwise() - mean;
        return log_norm_ - 0.5 * (c.array() * (precision_ * c).array()).colwise().sum();
    }

    RowVector value(const Matrix &x) const { return log_density(x).array().exp(); }

    /// Gradient of the density, d x B.
    Matrix gradient(const Matrix &x, const RowVector &values) const {
        const Matrix c = x.colwise() - mean;
        return -((precision_ * c).array().rowwise() * values.array()).matrix();
    }

  private:
    Matrix precision_;
    double log_norm_ = 0.0;
};

/// Either the prior (n = 0) or a frozen network evaluated in eval mode.
class PreviousDensity {
  public:
    explicit PreviousDensity(GaussianDensity prior) : source_(std::move(prior)) {}
    explicit PreviousDensity(const EnergyNet &net) : source_(&net) {}

    static PreviousDensity prior_of(const ModelSpec &spec) { return PreviousDensity(GaussianDensity(spec.prior_mean, spec.prior_cov)); }

    bool is_prior() const { return std::holds_alternative<GaussianDensity>(source_); }

    /// Value (1 x B) and state gradient (d x B) at states x with histories y_hist.
    RowVector evaluate(const Matrix &x, const Matrix &y_hist, Matrix &grad) const {
        if (const auto *g = std::get_if<GaussianDensity>(&source_)) {
            RowVector v = g->value(x);
            grad = g->gradient(x, v);
            return v;
        }
        const EnergyNet &net = *std::get<const EnergyNet *>(source_);
        RowVector v;
        grad = net.grad_x_phi(make_inputs(x, y_hist), &v);
        return v;
    }

  private:
    std::variant<GaussianDensity, const EnergyNet *> source_;
};

// ---------------------------------------------------------------------------
// Regression targets
// ---------------------------------------------------------------------------

struct StepTargets {
    RowVector value;
    RowVector prev_value;
    RowVector drift_term;    // f dt
    RowVector obs_term;      // <b, dY>
    RowVector milstein_term; // zero under Euler
};

/// Batched target: x_next is d x B, y_hist d'(n+1) x B, dy d' x B.
inline StepTargets step_target(const PreviousDensity &prev, const ModelSpec &spec, const Matrix &x_next,
                               const Matrix &y_hist, const Matrix &dy, double dt, Scheme scheme) {
    if (x_next.cols() != dy.cols() || x_next.cols() != y_hist.cols())
        throw ContractViolation("step_target: batch sizes differ");
    if (dy.rows() != spec.d_obs) throw ContractViolation("step_target: dy has wrong dimension");
    if (scheme == Scheme::Milstein && (spec.d != 1 || spec.d_obs != 1))
        throw UnsupportedOperation("the Milstein scheme requires d = d' = 1");
    StepTargets t;
    Matrix grad;
    t.prev_value = prev.evaluate(x_next, y_hist, grad);
    t.drift_term = zakai_f(spec, x_next, t.prev_value, grad) * dt;
    const Matrix b = zakai_b(spec, x_next, t.prev_value);
    t.obs_term = b.cwiseProduct(dy).colwise().sum();
    t.milstein_term = RowVector::Zero(x_next.cols());
    if (scheme == Scheme::Milstein) {
        const RowVector bp = zakai_b_prime(spec, x_next);
        t.milstein_term =
            0.5 * b.row(0).cwiseProduct(bp).cwiseProduct((dy.row(0).array().square() - dt).matrix());
    }
    t.value = t.prev_value + t.drift_term + t.obs_term + t.milstein_term;
    return t;
}

inline double step_target(const PreviousDensity &prev, const ModelSpec &spec, const Vector &x_next,
                          const Vector &y_hist, const Vector &dy, double dt, Scheme scheme) {
    return step_target(prev, spec, Matrix(x_next), Matrix(y_hist), Matrix(dy), dt, scheme).value(0);
}

/// Regression data for one step: candidate inputs [X~_n; Y_{0:n+1}] and targets.
struct StepBatch {
    Matrix inputs;
    RowVector targets;
    long dropped = 0; // samples removed for non-finite targets
};

/// Builds the regression batch for step n -> n+1 from dataset paths [first, first + count).
inline StepBatch make_step_batch(const PreviousDensity &prev, const ModelSpec &spec, const Dataset &ds, int n,
                                 Scheme scheme, int first = 0, int count = -1) {
    if (n < 0 || n >= ds.n_steps()) throw ContractViolation("step index outside the dataset horizon");
    if (count < 0) count = ds.size() - first;
    const double dt = spec.dt;
    constexpr int chunk = 4096;
    const int n_chunks = (count + chunk - 1) / chunk;
    StepBatch out;
    const int d = spec.d, dq = spec.d_obs;
    Matrix inputs(d + dq * (n + 2), count);
    RowVector targets(count);
    std::vector<std::string> errors(n_chunks);

#pragma omp parallel for schedule(dynamic)
    for (int c = 0; c < n_chunks; ++c) {
        try {
            const int f = first + c * chunk;
            const int m = std::min(chunk, first + count - f);
            const Matrix x_now = ds.latent.x_step(n, f, m);
            const Matrix x_next = ds.latent.x_step(n + 1, f, m);
            const Matrix y_all = ds.coupled.y_history(n + 1, f, m);
            const Matrix dy = ds.coupled.y_step(n + 1, f, m) - ds.coupled.y_step(n, f, m);
            const auto t = step_target(prev, spec, x_next, y_all.topRows(dq * (n + 1)), dy, dt, scheme);
            inputs.middleCols(f - first, m) = make_inputs(x_now, y_all);
            targets.segment(f - first, m) = t.value;
        } catch (const std::exception &e) {
            errors[c] = e.what();
        }
    }
    for (const auto &e : errors)
        if (!e.empty()) throw NumericFailure("target construction failed: " + e, 0);

    std::vector<Eigen::Index> keep;
    keep.reserve(count);
    for (Eigen::Index i = 0; i < count; ++i)
        if (std::isfinite(targets(i))) keep.push_back(i);
    out.dropped = count - static_cast<long>(keep.size());
    if (out.dropped == 0) {
        out.inputs = std::move(inputs);
        out.targets = std::move(targets);
    } else {
        out.inputs = inputs(Eigen::all, keep);
        out.targets = targets(keep);
    }
    return out;
}

/// Mean squared regression loss of `candidate` on a batch (eval statistics).
inline double local_loss(const EnergyNet &candidate, const PreviousDensity &prev, const ModelSpec &spec,
                         const Dataset &ds, int n, Scheme scheme, int first = 0, int count = -1) {
    const StepBatch b = make_step_batch(prev, spec, ds, n, scheme, first, count);
    if (b.inputs.cols() == 0) throw ContractViolation("empty batch");
    return candidate.loss(b.inputs, b.targets, BatchNormMode::Eval);
}

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

struct TrainSchedule {
    std::vector<int> batch_sizes{512, 1024, 2048, 4096, 8192, 16384};
    int epochs_per_size = 5;
    int patience = 5;              // validation epochs without improvement before stopping
    double validation_fraction = 0.05;
    int max_rotations = 1;         // passes over the batch-size rotation
    int first_step_rotations = 0;  // overrides max_rotations for the first step when > 0
    AdamConfig adam{};
    bool warm_start = true;        // initialize step n+1 from step n
    int retries = 0;
    double retry_threshold = std::numeric_limits<double>::infinity();
    double max_dropped_fraction = 1e-3;
    std::vector<int> hidden{100, 100, 100, 100};

    void validate() const {
        if (batch_sizes.empty()) throw InvalidArgument("batch-size rotation is empty");
        for (std::size_t i = 0; i < batch_sizes.size(); ++i) {
            const int b = batch_sizes[i];
            if (b < 2 || (b & (b - 1)) != 0) throw InvalidArgument("batch sizes must be powers of two >= 2");
            if (i > 0 && b <= batch_sizes[i - 1]) throw InvalidArgument("batch sizes must be strictly increasing");
        }
        if (epochs_per_size < 1) throw InvalidArgument("epochs_per_size must be >= 1");
        if (patience < 1) throw InvalidArgument("patience must be >= 1");
        if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
            throw InvalidArgument("validation_fraction must be in (0, 1)");
        if (max_rotations < 1 || first_step_rotations < 0) throw InvalidArgument("rotation counts must be >= 1");
        if (!(adam.learning_rate > 0.0)) throw InvalidArgument("learning rate must be positive");
        if (retries < 0) throw InvalidArgument("retries must be >= 0");
    }
};

inline void to_json(io::json &j, const TrainSchedule &s) {
    j = io::json{{"batch_sizes", s.batch_sizes},
                 {"epochs_per_size", s.epochs_per_size},
                 {"patience", s.patience},
                 {"validation_fraction", s.validation_fraction},
                 {"max_rotations", s.max_rotations},
                 {"first_step_rotations", s.first_step_rotations},
                 {"learning_rate", s.adam.learning_rate},
                 {"adam_beta1", s.adam.beta1},
                 {"adam_beta2", s.adam.beta2},
                 {"adam_epsilon", s.adam.epsilon},
                 {"warm_start", s.warm_start},
                 {"retries", s.retries},
                 {"retry_threshold", std::isfinite(s.retry_threshold) ? io::json(s.retry_threshold) : io::json(nullptr)},
                 {"max_dropped_fraction", s.max_dropped_fraction},
                 {"hidden", s.hidden}};
}

inline void from_json(const io::json &j, TrainSchedule &s) {
    s = TrainSchedule{};
    s.batch_sizes = j.value("batch_sizes", s.batch_sizes);
    s.epochs_per_size = j.value("epochs_per_size", s.epochs_per_size);
    s.patience = j.value("patience", s.patience);
    s.validation_fraction = j.value("validation_fraction", s.validation_fraction);
    s.max_rotations = j.value("max_rotations", s.max_rotations);
    s.first_step_rotations = j.value("first_step_rotations", s.first_step_rotations);
    s.adam.learning_rate = j.value("learning_rate", s.adam.learning_rate);
    s.adam.beta1 = j.value("adam_beta1", s.adam.beta1);
    s.adam.beta2 = j.value("adam_beta2", s.adam.beta2);
    s.adam.epsilon = j.value("adam_epsilon", s.adam.epsilon);
    s.warm_start = j.value("warm_start", s.warm_start);
    s.retries = j.value("retries", s.retries);
    if (j.contains("retry_threshold") && !j["retry_threshold"].is_null()) s.retry_threshold = j["retry_threshold"];
    s.max_dropped_fraction = j.value("max_dropped_fraction", s.max_dropped_fraction);
    s.hidden = j.value("hidden", s.hidden);
}

struct TraceRow {
    int step = 0;
    int epoch = 0;
    int batch_size = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

inline void to_json(io::json &j, const TraceRow &r) {
    j = io::json{{"step", r.step}, {"epoch", r.epoch}, {"batch_size", r.batch_size},
                 {"train_loss", r.train_loss}, {"val_loss", r.val_loss}};
}

inline void from_json(const io::json &j, TraceRow &r) {
    r.step = j.at("step");
    r.epoch = j.at("epoch");
    r.batch_size = j.at("batch_size");
    r.train_loss = j.at("train_loss");
    r.val_loss = j.at("val_loss");
}

struct StepResult {
    EnergyNet net;
    std::vector<TraceRow> trace;
    double best_val_loss = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    long dropped = 0;
    int attempt = 0;
};

/// Fixed training/validation partition of dataset indices, shared by all steps of a run.
struct ValidationSplit {
    std::vector<int> train;
    std::vector<int> validation;

    static ValidationSplit make(int count, double fraction, std::uint64_t seed) {
        std::vector<int> idx(count);
        std::iota(idx.begin(), idx.end(), 0);
        SplitMix64 eng(derive_seed(seed, Stream::ValidationSplit));
        std::shuffle(idx.begin(), idx.end(), eng);
        const int n_val = std::max(1, static_cast<int>(std::lround(fraction * count)));
        if (n_val >= count - 1) throw InvalidArgument("dataset too small for the validation split");
        ValidationSplit s;
        s.validation.assign(idx.begin(), idx.begin() + n_val);
        s.train.assign(idx.begin() + n_val, idx.end());
        std::sort(s.validation.begin(), s.validation.end());
        std::sort(s.train.begin(), s.train.end());
        return s;
    }
};

namespace detail {

inline double chunked_loss(const EnergyNet &net, const Matrix &inputs, const RowVector &targets) {
    constexpr Eigen::Index chunk = 16384;
    double sum = 0.0;
    for (Eigen::Index f = 0; f < inputs.cols(); f += chunk) {
        const Eigen::Index m = std::min(chunk, inputs.cols() - f);
        sum += net.loss(inputs.middleCols(f, m), targets.segment(f, m), BatchNormMode::Eval) * static_cast<double>(m);
    }
    return sum / static_cast<double>(inputs.cols());
}

inline NetLayout layout_for(const ModelSpec &spec, const TrainSchedule &schedule, int history_len) {
    NetLayout l;
    l.state_dim = spec.d;
    l.obs_dim = spec.d_obs;
    l.history_len = history_len;
    l.hidden = schedule.hidden;
    l.head = spec.params ? head_kind_for(spec.params->example)
                         : (spec.d == 1 ? HeadKind::LinearTail : HeadKind::SpringMassTail);
    return l;
}

} // namespace detail

/// Trains Phi_{n+1} with the minibatch rotation and early stopping; returns the
/// network with the best validation loss. `init` seeds the parameters (warm start);
/// without it a fresh network is drawn.
inline StepResult train_step(int n, const PreviousDensity &prev, const ModelSpec &spec, const Dataset &ds,
                             const ValidationSplit &split, const TrainSchedule &schedule, Scheme scheme,
                             std::uint64_t seed, const EnergyNet *init = nullptr, int attempt = 0,
                             const Logger &log = {}) {
    schedule.validate();
    const StepBatch all = make_step_batch(prev, spec, ds, n, scheme);
    if (all.dropped > 0) {
        if (static_cast<double>(all.dropped) > schedule.max_dropped_fraction * ds.size())
            throw NumericFailure("step " + std::to_string(n + 1) + ": " + std::to_string(all.dropped) +
                                     " non-finite targets exceed the allowed fraction",
                                 0);
        if (log) log("step=" + std::to_string(n + 1) + " dropped_targets=" + std::to_string(all.dropped));
    }
    // Map the fixed split onto the surviving samples.
    Matrix tr_in, va_in;
    RowVector tr_t, va_t;
    if (all.dropped == 0) {
        tr_in = all.inputs(Eigen::all, split.train);
        tr_t = all.targets(split.train);
        va_in = all.inputs(Eigen::all, split.validation);
        va_t = all.targets(split.validation);
    } else {
        // Fall back to the same fraction over the kept samples.
        const Eigen::Index n_val = static_cast<Eigen::Index>(split.validation.size());
        va_in = all.inputs.leftCols(n_val);
        va_t = all.targets.head(n_val);
        tr_in = all.inputs.rightCols(all.inputs.cols() - n_val);
        tr_t = all.targets.tail(all.targets.size() - n_val);
    }

    const NetLayout layout = detail::layout_for(spec, schedule, n + 2);
    EnergyNet net = init ? init->widened(n + 2) : EnergyNet::init(layout, derive_seed(seed, Stream::NetworkInit, n, attempt));
    if (net.layout() != layout) throw ContractViolation("initial network layout does not match step " + std::to_string(n + 1));
    net.set_mode(BatchNormMode::Train);
    AdamState adam(net.parameter_count(), schedule.adam);

    StepResult res;
    res.dropped = all.dropped;
    res.attempt = attempt;
    res.net = net;
    res.best_val_loss = detail::chunked_loss(net, va_in, va_t);
    int since_best = 0;
    int epoch = 0;
    double last_finite = res.best_val_loss;
    const Eigen::Index n_train = tr_in.cols();
    std::vector<Eigen::Index> order(n_train);
    const int rotations = (n == 0 && schedule.first_step_rotations > 0) ? schedule.first_step_rotations
                                                                         : schedule.max_rotations;
    bool stop = false;
    for (int rot = 0; rot < rotations && !stop; ++rot) {
        for (int bs : schedule.batch_sizes) {
            if (stop) break;
            const Eigen::Index batch = std::min<Eigen::Index>(bs, n_train);
            for (int e = 0; e < schedule.epochs_per_size && !stop; ++e) {
                ++epoch;
                std::iota(order.begin(), order.end(), 0);
                SplitMix64 eng(derive_seed(seed, Stream::Shuffle, static_cast<std::uint64_t>(n),
                                           static_cast<std::uint64_t>(attempt) << 32 | static_cast<std::uint64_t>(epoch)));
                std::shuffle(order.begin(), order.end(), eng);
                double loss_sum = 0.0;
                Eigen::Index seen = 0;
                for (Eigen::Index f = 0; f + 1 < n_train; f += batch) {
                    const Eigen::Index m = std::min(batch, n_train - f);
                    if (m < 2) break;
                    const auto idx = Eigen::Map<const Eigen::Matrix<Eigen::Index, Eigen::Dynamic, 1>>(order.data() + f, m);
                    const Matrix in = tr_in(Eigen::all, idx);
                    const RowVector tg = tr_t(idx);
                    LossAndGradient lg;
                    try {
                        lg = net.loss_and_gradient(in, tg, BatchNormMode::Train);
                    } catch (const NumericFailure &ex) {
                        throw NumericFailure(std::string("training diverged at step ") + std::to_string(n + 1) +
                                                 " (last finite loss " + io::fmt_double(last_finite) + "): " + ex.what(),
                                             ex.layer());
                    }
                    if (!std::isfinite(lg.loss) || !lg.gradient.allFinite())
                        throw NumericFailure("training diverged at step " + std::to_string(n + 1) +
                                                 " (last finite loss " + io::fmt_double(last_finite) + ")",
                                             0);
                    last_finite = lg.loss;
                    adam_step(net, lg.gradient, adam);
                    net.update_running_stats(lg.stats);
                    loss_sum += lg.loss * static_cast<double>(m);
                    seen += m;
                }
                TraceRow row;
                row.step = n + 1;
                row.epoch = epoch;
                row.batch_size = static_cast<int>(batch);
                row.train_loss = loss_sum / static_cast<double>(std::max<Eigen::Index>(seen, 1));
                try {
                    row.val_loss = detail::chunked_loss(net, va_in, va_t);
                } catch (const NumericFailure &ex) {
                    throw NumericFailure(std::string("training diverged at step ") + std::to_string(n + 1) +
                                             " (last finite loss " + io::fmt_double(last_finite) + "): " + ex.what(),
                                         ex.layer());
                }
                res.trace.push_back(row);
                if (log)
                    log("step=" + std::to_string(row.step) + " epoch=" + std::to_string(row.epoch) +
                        " batch=" + std::to_string(row.batch_size) + " train_loss=" + io::fmt_double(row.train_loss) +
                        " val_loss=" + io::fmt_double(row.val_loss));
                if (!std::isfinite(row.val_loss))
                    throw NumericFailure("non-finite validation loss at step " + std::to_string(n + 1) +
                                             " (last finite loss " + io::fmt_double(last_finite) + ")",
                                         0);
                if (row.val_loss < res.best_val_loss) {
                    res.best_val_loss = row.val_loss;
                    res.best_epoch = epoch;
                    res.net = net;
                    since_best = 0;
                } else if (++since_best >= schedule.patience) {
                    stop = true;
                }
            }
        }
    }
    res.net.set_mode(BatchNormMode::Eval);
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline std::filesystem::path step_directory(const std::filesystem::path &run_dir, int step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step_%04d", step);
    return run_dir / buf;
}

struct Checkpoint {
    int step = 0;
    EnergyNet net;
    io::json meta;
};

inline void write_checkpoint(const std::filesystem::path &run_dir, int step, const StepResult &res,
                             const io::json &extra) {
    const auto dir = step_directory(run_dir, step);
    io::ensure_directory(dir);
    const auto blob = res.net.serialize();
    io::write_doubles(dir / "params.f64", blob);
    io::json meta = extra;
    meta["step"] = step;
    meta["layout"] = res.net.layout();
    meta["attempt"] = res.attempt;
    meta["best_val_loss"] = res.best_val_loss;
    meta["best_epoch"] = res.best_epoch;
    meta["dropped_targets"] = res.dropped;
    meta["loss_history"] = res.trace;
    meta["params_hash"] = io::hash_doubles(blob);
    io::write_json(dir / "meta.json", meta);
}

inline Checkpoint load_checkpoint(const std::filesystem::path &run_dir, int step) {
    const auto dir = step_directory(run_dir, step);
    if (!std::filesystem::exists(dir / "meta.json") || !std::filesystem::exists(dir / "params.f64"))
        throw IoError("missing checkpoint for step " + std::to_string(step) + " in " + run_dir.string());
    Checkpoint c;
    c.step = step;
    c.meta = io::read_json(dir / "meta.json");
    const auto blob = io::read_doubles(dir / "params.f64");
    if (io::hash_doubles(blob) != c.meta.at("params_hash").get<std::string>())
        throw IoError("checkpoint parameters corrupted at step " + std::to_string(step));
    c.net = EnergyNet::deserialize(c.meta.at("layout").get<NetLayout>(), blob);
    return c;
}

inline void write_trace_csv(const std::filesystem::path &path, const std::vector<TraceRow> &rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "step,epoch,batch_size,train_loss,val_loss\n";
    for (const auto &r : rows)
        out << r.step << ',' << r.epoch << ',' << r.batch_size << ',' << io::fmt_double(r.train_loss) << ','
            << io::fmt_double(r.val_loss) << '\n';
}

struct SequenceOptions {
    int steps = -1;       // number of steps to train; -1 for the whole dataset horizon
    bool resume = true;   // reuse checkpoints already present and consistent with this run
    bool resample = false; // draw fresh coupled/latent paths for every step instead of reusing `ds`
    std::string config_hash;
    Logger log;
};

/// Trains steps 1..N sequentially, writing run.json, step_XXXX/{params.f64, meta.json}
/// and loss_trace.csv under `run_dir`.
inline std::vector<StepResult> train_sequence(const ModelSpec &spec, const Dataset &ds, const TrainSchedule &schedule,
                                              Scheme scheme, std::uint64_t seed, const std::filesystem::path &run_dir,
                                              const SequenceOptions &opts = {}) {
    schedule.validate();
    if (scheme == Scheme::Milstein && (spec.d != 1 || spec.d_obs != 1))
        throw UnsupportedOperation("the Milstein scheme requires d = d' = 1");
    if (ds.spec_hash != spec.hash()) throw ContractViolation("dataset was generated for a different model");
    if (ds.latent.paths != ds.coupled.paths) throw ContractViolation("coupled and latent batches differ in size");
    const int N = opts.steps < 0 ? ds.n_steps() : opts.steps;
    if (N < 1 || N > ds.n_steps()) throw InvalidArgument("requested steps exceed the dataset horizon");

    io::ensure_directory(run_dir);
    io::json run{{"spec_hash", spec.hash()},
                 {"spec", spec.describe()},
                 {"schedule", schedule},
                 {"scheme", std::string(to_string(scheme))},
                 {"seed", seed},
                 {"dataset_seed", ds.seed},
                 {"dataset_size", ds.size()},
                 {"config_hash", opts.config_hash},
                 {"resample", opts.resample},
                 {"steps", N}};
    const std::string run_hash = io::hash_json(run);
    run["run_hash"] = run_hash;
    io::write_json(run_dir / "run.json", run);

    const ValidationSplit split = ValidationSplit::make(ds.size(), schedule.validation_fraction, seed);
    std::vector<StepResult> results;
    std::vector<TraceRow> trace;
    std::optional<EnergyNet> prev_net;
    for (int n = 0; n < N; ++n) {
        const int step = n + 1;
        if (opts.resume && std::filesystem::exists(step_directory(run_dir, step) / "meta.json")) {
            Checkpoint c = load_checkpoint(run_dir, step);
            if (c.meta.value("run_hash", std::string()) == run_hash) {
                StepResult r;
                r.net = std::move(c.net);
                r.trace = c.meta.at("loss_history").get<std::vector<TraceRow>>();
                r.best_val_loss = c.meta.at("best_val_loss");
                r.best_epoch = c.meta.at("best_epoch");
                r.dropped = c.meta.at("dropped_targets");
                r.attempt = c.meta.at("attempt");
                trace.insert(trace.end(), r.trace.begin(), r.trace.end());
                prev_net = r.net;
                results.push_back(std::move(r));
                if (opts.log) opts.log("step=" + std::to_string(step) + " resumed from checkpoint");
                continue;
            }
        }
        const PreviousDensity prev = prev_net ? PreviousDensity(*prev_net) : PreviousDensity::prior_of(spec);
        const EnergyNet *init = (schedule.warm_start && prev_net) ? &*prev_net : nullptr;
        std::optional<Dataset> fresh;
        if (opts.resample)
            fresh = make_dataset(spec, TimeGrid(spec.dt, n + 1), ds.size(), derive_seed(ds.seed, Stream::Coupled, step));
        const Dataset &data = fresh ? *fresh : ds;
        StepResult r;
        for (int attempt = 0;; ++attempt) {
            try {
                r = train_step(n, prev, spec, data, split, schedule, scheme, seed, attempt == 0 ? init : nullptr,
                               attempt, opts.log);
            } catch (const Error &e) {
                throw NumericFailure("step " + std::to_string(step) + ": " + e.what(), 0);
            }
            if (r.best_val_loss <= schedule.retry_threshold || attempt >= schedule.retries) break;
            if (opts.log)
                opts.log("step=" + std::to_string(step) + " retry=" + std::to_string(attempt + 1) +
                         " val_loss=" + io::fmt_double(r.best_val_loss));
        }
        write_checkpoint(run_dir, step, r,
                         io::json{{"seed", seed}, {"spec_hash", spec.hash()}, {"run_hash", run_hash},
                                  {"config_hash", opts.config_hash}, {"scheme", std::string(to_string(scheme))}});
        trace.insert(trace.end(), r.trace.begin(), r.trace.end());
        write_trace_csv(run_dir / "loss_trace.csv", trace);
        prev_net = r.net;
        results.push_back(std::move(r));
    }
    write_trace_csv(run_dir / "loss_trace.csv", trace);
    return results;
}

} // namespace ebds
