// Energy-based density model Phi(x, y_{0:n}) = exp(-g(x, trunk(x, y_{0:n}))).
//
// The trunk is a fully connected network; every hidden layer is
// Linear -> BatchNorm -> ReLU. Its raw outputs are mapped by a problem
// specific tail head g that forces quadratic energy growth away from the
// data, so exp(-energy) stays integrable.
//
// Reverse mode is written out by hand: parameter gradients of the
// regression loss (train or eval batch statistics) and the state gradient
// of Phi (eval statistics) used to build the next regression target.
#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ebds/errors.hpp"
#include "ebds/io.hpp"
#include "ebds/model.hpp"
#include "ebds/rng.hpp"

namespace ebds {

enum class HeadKind { LinearTail, BistableTail, SpringMassTail };

inline std::string_view to_string(HeadKind k) {
    switch (k) {
    case HeadKind::LinearTail: return "linear_tail";
    case HeadKind::BistableTail: return "bistable_tail";
    case HeadKind::SpringMassTail: return "spring_mass_tail";
    }
    return "unknown";
}

inline HeadKind parse_head_kind(std::string_view s) {
    for (auto k : {HeadKind::LinearTail, HeadKind::BistableTail, HeadKind::SpringMassTail})
        if (s == to_string(k)) return k;
    throw InvalidArgument("unknown head kind: " + std::string(s));
}

inline HeadKind head_kind_for(ExampleId id) {
    switch (id) {
    case ExampleId::LinearOU:
    case ExampleId::MeanRevertingCubic: return HeadKind::LinearTail;
    case ExampleId::Bistable: return HeadKind::BistableTail;
    case ExampleId::SpringMass: return HeadKind::SpringMassTail;
    }
    return HeadKind::LinearTail;
}

/// Number of raw trunk outputs consumed by a head.
inline int head_raw_dim(HeadKind kind, int state_dim) {
    switch (kind) {
    case HeadKind::LinearTail: return 2;
    case HeadKind::BistableTail: return 5;
    case HeadKind::SpringMassTail: return 1 + state_dim + 4; // alpha, xi1, xi2, beta1, beta2, lambda1, lambda2
    }
    return 0;
}

enum class BatchNormMode { Train, Eval };

struct NetLayout {
    int state_dim = 1;
    int obs_dim = 1;
    int history_len = 1; // number of observations y_0..y_n fed to the trunk
    std::vector<int> hidden{100, 100, 100, 100};
    HeadKind head = HeadKind::LinearTail;
    double bn_momentum = 0.9; // running = momentum * running + (1 - momentum) * batch
    double bn_eps = 1e-5;
    double beta_floor = 1e-3;

    int input_dim() const { return state_dim + obs_dim * history_len; }
    int raw_dim() const { return head_raw_dim(head, state_dim); }

    void validate() const {
        if (state_dim < 1 || obs_dim < 1 || history_len < 1) throw InvalidArgument("layout dimensions must be >= 1");
        if (hidden.empty()) throw InvalidArgument("layout needs at least one hidden layer");
        for (int h : hidden)
            if (h < 1) throw InvalidArgument("hidden widths must be >= 1");
        if (head != HeadKind::SpringMassTail && state_dim != 1)
            throw InvalidArgument("scalar tail heads need state_dim == 1");
        if (head == HeadKind::SpringMassTail && state_dim % 2 != 0)
            throw InvalidArgument("spring-mass head splits the state into positions and velocities");
        if (!(bn_eps > 0.0) || !(bn_momentum >= 0.0 && bn_momentum < 1.0))
            throw InvalidArgument("invalid batch-norm constants");
    }

    bool operator==(const NetLayout &) const = default;
};

inline void to_json(io::json &j, const NetLayout &l) {
    j = io::json{{"state_dim", l.state_dim},     {"obs_dim", l.obs_dim},
                 {"history_len", l.history_len}, {"hidden", l.hidden},
                 {"head", std::string(to_string(l.head))}, {"bn_momentum", l.bn_momentum},
                 {"bn_eps", l.bn_eps},           {"beta_floor", l.beta_floor}};
}

inline void from_json(const io::json &j, NetLayout &l) {
    l.state_dim = j.at("state_dim");
    l.obs_dim = j.at("obs_dim");
    l.history_len = j.at("history_len");
    l.hidden = j.at("hidden").get<std::vector<int>>();
    l.head = parse_head_kind(j.at("head").get<std::string>());
    l.bn_momentum = j.value("bn_momentum", 0.9);
    l.bn_eps = j.value("bn_eps", 1e-5);
    l.beta_floor = j.value("beta_floor", 1e-3);
}

// ---------------------------------------------------------------------------
// Tail heads on constrained coefficients
// ---------------------------------------------------------------------------

/// xi1 + (|x| - xi2)^2 on |x| > xi2.
inline double linear_tail_energy(double x, double xi1, double xi2) {
    const double s = std::abs(x) - xi2;
    return s > 0.0 ? xi1 + s * s : xi1;
}

/// xi1 + xi2 (x - xi3)^2 [x < xi3] + xi4 (x - xi5)^2 [x > xi5].
inline double bistable_tail_energy(double x, const std::array<double, 5> &xi) {
    double e = xi[0];
    if (x < xi[2]) e += xi[1] * (x - xi[2]) * (x - xi[2]);
    if (x > xi[4]) e += xi[3] * (x - xi[4]) * (x - xi[4]);
    return e;
}

struct SpringMassHead {
    double alpha = 0.0;
    Vector xi_pos;
    Vector xi_vel;
    double beta_pos = 0.0, beta_vel = 0.0;
    double lambda_pos = 0.0, lambda_vel = 0.0;
};

/// alpha + beta1 |x_pos - xi1|^2 [.. > lambda1] + beta2 |x_vel - xi2|^2 [.. > lambda2].
inline double spring_mass_head(const SpringMassHead &h, const Vector &x_pos, const Vector &x_vel) {
    const double s1 = (x_pos - h.xi_pos).squaredNorm();
    const double s2 = (x_vel - h.xi_vel).squaredNorm();
    double e = h.alpha;
    if (s1 > h.lambda_pos) e += h.beta_pos * s1;
    if (s2 > h.lambda_vel) e += h.beta_vel * s2;
    return e;
}

namespace detail {

inline double softplus(double r) { return r > 30.0 ? r : std::log1p(std::exp(r)); }
inline double sigmoid(double r) { return 1.0 / (1.0 + std::exp(-r)); }

/// Energies of a batch plus derivatives with respect to the raw trunk
/// outputs and to the state entering the head directly.
struct HeadEval {
    RowVector energy;
    Matrix d_raw; // raw_dim x B
    Matrix d_x;   // d x B
};

inline HeadEval eval_head(const NetLayout &layout, const Matrix &x, const Matrix &raw, bool grads) {
    const int B = static_cast<int>(x.cols());
    HeadEval out;
    out.energy.resize(B);
    if (grads) {
        out.d_raw = Matrix::Zero(raw.rows(), B);
        out.d_x = Matrix::Zero(x.rows(), B);
    }
    const double floor = layout.beta_floor;
    switch (layout.head) {
    case HeadKind::LinearTail:
        for (int i = 0; i < B; ++i) {
            const double xi1 = raw(0, i), xi2 = softplus(raw(1, i));
            const double s = std::abs(x(0, i)) - xi2;
            const bool on = s > 0.0;
            out.energy(i) = xi1 + (on ? s * s : 0.0);
            if (grads) {
                out.d_raw(0, i) = 1.0;
                out.d_raw(1, i) = on ? -2.0 * s * sigmoid(raw(1, i)) : 0.0;
                out.d_x(0, i) = on ? 2.0 * s * (x(0, i) >= 0.0 ? 1.0 : -1.0) : 0.0;
            }
        }
        break;
    case HeadKind::BistableTail:
        for (int i = 0; i < B; ++i) {
            const double xv = x(0, i);
            const double xi1 = raw(0, i), xi2 = softplus(raw(1, i)) + floor, xi3 = raw(2, i);
            const double xi4 = softplus(raw(3, i)) + floor, xi5 = raw(4, i);
            const bool lo = xv < xi3, hi = xv > xi5;
            const double a = xv - xi3, b = xv - xi5;
            out.energy(i) = xi1 + (lo ? xi2 * a * a : 0.0) + (hi ? xi4 * b * b : 0.0);
            if (grads) {
                out.d_raw(0, i) = 1.0;
                out.d_raw(1, i) = lo ? a * a * sigmoid(raw(1, i)) : 0.0;
                out.d_raw(2, i) = lo ? -2.0 * xi2 * a : 0.0;
                out.d_raw(3, i) = hi ? b * b * sigmoid(raw(3, i)) : 0.0;
                out.d_raw(4, i) = hi ? -2.0 * xi4 * b : 0.0;
                out.d_x(0, i) = (lo ? 2.0 * xi2 * a : 0.0) + (hi ? 2.0 * xi4 * b : 0.0);
            }
        }
        break;
    case HeadKind::SpringMassTail: {
        const int m = layout.state_dim / 2;
        for (int i = 0; i < B; ++i) {
            const double alpha = raw(0, i);
            const Vector dp = x.col(i).head(m) - raw.col(i).segment(1, m);
            const Vector dv = x.col(i).tail(m) - raw.col(i).segment(1 + m, m);
            const int o = 1 + 2 * m;
            const double b1 = softplus(raw(o, i)) + floor, b2 = softplus(raw(o + 1, i)) + floor;
            const double l1 = softplus(raw(o + 2, i)), l2 = softplus(raw(o + 3, i));
            const double s1 = dp.squaredNorm(), s2 = dv.squaredNorm();
            const bool on1 = s1 > l1, on2 = s2 > l2;
            out.energy(i) = alpha + (on1 ? b1 * s1 : 0.0) + (on2 ? b2 * s2 : 0.0);
            if (grads) {
                out.d_raw(0, i) = 1.0;
                if (on1) {
                    out.d_raw.col(i).segment(1, m) = -2.0 * b1 * dp;
                    out.d_raw(o, i) = s1 * sigmoid(raw(o, i));
                    out.d_x.col(i).head(m) = 2.0 * b1 * dp;
                }
                if (on2) {
                    out.d_raw.col(i).segment(1 + m, m) = -2.0 * b2 * dv;
                    out.d_raw(o + 1, i) = s2 * sigmoid(raw(o + 1, i));
                    out.d_x.col(i).tail(m) = 2.0 * b2 * dv;
                }
                // lambda enters only through the indicator: zero subgradient.
            }
        }
        break;
    }
    }
    return out;
}

} // namespace detail

/// Concatenate states (d x B) and flattened observation histories.
inline Matrix make_inputs(const Matrix &x, const Matrix &y_hist) {
    if (x.cols() != y_hist.cols()) throw ContractViolation("make_inputs: column count mismatch");
    Matrix in(x.rows() + y_hist.rows(), x.cols());
    in.topRows(x.rows()) = x;
    in.bottomRows(y_hist.rows()) = y_hist;
    return in;
}

/// Same observation history for every state column.
inline Matrix make_inputs(const Matrix &x, const Vector &y_hist) {
    Matrix in(x.rows() + y_hist.size(), x.cols());
    in.topRows(x.rows()) = x;
    in.bottomRows(y_hist.size()) = y_hist.replicate(1, x.cols());
    return in;
}

/// Per-layer batch statistics from a train-mode pass (unbiased variances).
struct BatchStats {
    std::vector<Vector> mean;
    std::vector<Vector> var;
};

struct LossAndGradient {
    double loss = 0.0;
    Vector gradient;
    BatchStats stats;
};

class EnergyNet {
  public:
    EnergyNet() = default;

    explicit EnergyNet(NetLayout layout) : layout_(std::move(layout)) {
        layout_.validate();
        build_offsets();
        params_ = Vector::Zero(static_cast<Eigen::Index>(param_count_));
        for (std::size_t l = 0; l < hidden_.size(); ++l) {
            gamma(static_cast<int>(l)).setOnes();
            running_mean_.push_back(Vector::Zero(hidden_[l].rows));
            running_var_.push_back(Vector::Ones(hidden_[l].rows));
        }
    }

    /// He fan-in initialization; batch-norm scale 1, shift 0, running stats (0, 1).
    static EnergyNet init(const NetLayout &layout, std::uint64_t seed) {
        EnergyNet net(layout);
        auto rng = keyed_source(seed, Stream::NetworkInit);
        auto fill = [&](Eigen::Map<Matrix> w) {
            const double scale = std::sqrt(2.0 / static_cast<double>(w.cols()));
            for (Eigen::Index j = 0; j < w.cols(); ++j)
                for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = scale * rng();
        };
        for (int l = 0; l < net.hidden_layers(); ++l) fill(net.weight(l));
        fill(net.out_weight());
        return net;
    }

    const NetLayout &layout() const { return layout_; }
    int hidden_layers() const { return static_cast<int>(hidden_.size()); }
    std::size_t parameter_count() const { return param_count_; }
    const Vector &parameters() const { return params_; }
    Vector &parameters() { return params_; }
    const std::vector<Vector> &running_mean() const { return running_mean_; }
    const std::vector<Vector> &running_var() const { return running_var_; }
    std::vector<Vector> &running_mean() { return running_mean_; }
    std::vector<Vector> &running_var() { return running_var_; }

    BatchNormMode mode() const { return mode_; }
    void set_mode(BatchNormMode m) { mode_ = m; }

    Eigen::Map<Matrix> weight(int l) { return map(hidden_[l].w, hidden_[l].rows, hidden_[l].cols); }
    Eigen::Map<const Matrix> weight(int l) const { return cmap(hidden_[l].w, hidden_[l].rows, hidden_[l].cols); }
    Eigen::Map<Vector> bias(int l) { return vmap(hidden_[l].b, hidden_[l].rows); }
    Eigen::Map<Vector> gamma(int l) { return vmap(hidden_[l].gamma, hidden_[l].rows); }
    Eigen::Map<Vector> beta(int l) { return vmap(hidden_[l].beta, hidden_[l].rows); }
    Eigen::Map<Matrix> out_weight() { return map(out_.w, out_.rows, out_.cols); }
    Eigen::Map<Vector> out_bias() { return vmap(out_.b, out_.rows); }

    /// Raw trunk outputs (raw_dim x B).
    Matrix trunk(const Matrix &inputs) const { return forward(inputs, mode_, nullptr, nullptr); }

    /// Energies f(x, y) for each input column.
    RowVector energy(const Matrix &inputs) const {
        Matrix raw = forward(inputs, mode_, nullptr, nullptr);
        return detail::eval_head(layout_, inputs.topRows(layout_.state_dim), raw, false).energy;
    }

    double energy(const Vector &x, const Vector &y_hist) const {
        return energy(make_inputs(Matrix(x), y_hist))(0);
    }

    /// Phi = exp(-energy). Energies below -700 are clamped; the number of
    /// clamped entries is written to `saturated` when provided.
    RowVector phi(const Matrix &inputs, int *saturated = nullptr) const {
        return phi_from_energy(energy(inputs), saturated);
    }

    double phi(const Vector &x, const Vector &y_hist) const { return phi(make_inputs(Matrix(x), y_hist))(0); }

    static RowVector phi_from_energy(const RowVector &e, int *saturated = nullptr) {
        int clamped = 0;
        RowVector p(e.size());
        for (Eigen::Index i = 0; i < e.size(); ++i) {
            double v = e(i);
            if (v < -700.0) {
                v = -700.0;
                ++clamped;
            }
            p(i) = std::exp(-v);
        }
        if (saturated) *saturated = clamped;
        return p;
    }

    /// Gradient of Phi with respect to the state rows of the input (d x B),
    /// computed with running batch-norm statistics.
    Matrix grad_x_phi(const Matrix &inputs, RowVector *phi_out = nullptr) const {
        RowVector e;
        const Matrix de_dx = grad_x_energy(inputs, &e);
        RowVector p = phi_from_energy(e);
        if (phi_out) *phi_out = p;
        return -(de_dx.array().rowwise() * p.array()).matrix();
    }

    /// Gradient of the energy with respect to the state rows (eval statistics).
    Matrix grad_x_energy(const Matrix &inputs, RowVector *energy_out = nullptr) const {
        Cache cache;
        Matrix raw = forward(inputs, BatchNormMode::Eval, &cache, nullptr);
        const int d = layout_.state_dim;
        auto head = detail::eval_head(layout_, inputs.topRows(d), raw, true);
        Matrix d_input;
        backward(cache, head.d_raw, BatchNormMode::Eval, nullptr, &d_input);
        if (energy_out) *energy_out = head.energy;
        return head.d_x + d_input.topRows(d);
    }

    Vector grad_x_phi(const Vector &x, const Vector &y_hist) const {
        return grad_x_phi(make_inputs(Matrix(x), y_hist)).col(0);
    }

    /// Mean squared error between Phi(inputs) and targets, and its gradient
    /// with respect to all parameters.
    LossAndGradient loss_and_gradient(const Matrix &inputs, const RowVector &targets, BatchNormMode mode) const {
        if (inputs.cols() == 0) throw ContractViolation("empty batch");
        if (targets.size() != inputs.cols()) throw ContractViolation("targets do not match batch size");
        LossAndGradient out;
        Cache cache;
        Matrix raw = forward(inputs, mode, &cache, mode == BatchNormMode::Train ? &out.stats : nullptr);
        auto head = detail::eval_head(layout_, inputs.topRows(layout_.state_dim), raw, true);
        const RowVector p = phi_from_energy(head.energy);
        const RowVector r = p - targets;
        const double B = static_cast<double>(inputs.cols());
        out.loss = r.squaredNorm() / B;
        // dL/dE = (2/B) r * dPhi/dE = -(2/B) r Phi
        const RowVector dl_de = -(2.0 / B) * r.cwiseProduct(p);
        Matrix d_raw = head.d_raw.array().rowwise() * dl_de.array();
        out.gradient = Vector::Zero(params_.size());
        backward(cache, d_raw, mode, &out.gradient, nullptr);
        return out;
    }

    /// Plain loss without gradient.
    double loss(const Matrix &inputs, const RowVector &targets, BatchNormMode mode) const {
        Matrix raw = forward(inputs, mode, nullptr, nullptr);
        auto head = detail::eval_head(layout_, inputs.topRows(layout_.state_dim), raw, false);
        return (phi_from_energy(head.energy) - targets).squaredNorm() / static_cast<double>(inputs.cols());
    }

    /// Exponential moving average of batch statistics into running statistics.
    void update_running_stats(const BatchStats &stats) {
        const double m = layout_.bn_momentum;
        for (std::size_t l = 0; l < hidden_.size(); ++l) {
            running_mean_[l] = m * running_mean_[l] + (1.0 - m) * stats.mean[l];
            running_var_[l] = m * running_var_[l] + (1.0 - m) * stats.var[l];
        }
    }

    /// Copy of this network accepting `history_len` observations; weights for
    /// the added observation inputs start at zero, so outputs are unchanged.
    EnergyNet widened(int history_len) const {
        if (history_len < layout_.history_len) throw ContractViolation("cannot shrink observation history");
        NetLayout l = layout_;
        l.history_len = history_len;
        EnergyNet net(l);
        net.weight(0).leftCols(layout_.input_dim()) = weight(0);
        for (int i = 0; i < hidden_layers(); ++i) {
            net.bias(i) = cvmap(hidden_[i].b, hidden_[i].rows);
            net.gamma(i) = cvmap(hidden_[i].gamma, hidden_[i].rows);
            net.beta(i) = cvmap(hidden_[i].beta, hidden_[i].rows);
            if (i > 0) net.weight(i) = weight(i);
        }
        net.out_weight() = cmap(out_.w, out_.rows, out_.cols);
        net.out_bias() = cvmap(out_.b, out_.rows);
        net.running_mean_ = running_mean_;
        net.running_var_ = running_var_;
        net.mode_ = mode_;
        return net;
    }

    /// Parameters followed by running means and variances, one flat array.
    std::vector<double> serialize() const {
        std::vector<double> out(params_.data(), params_.data() + params_.size());
        for (const auto &v : running_mean_) out.insert(out.end(), v.data(), v.data() + v.size());
        for (const auto &v : running_var_) out.insert(out.end(), v.data(), v.data() + v.size());
        return out;
    }

    static EnergyNet deserialize(const NetLayout &layout, const std::vector<double> &blob) {
        EnergyNet net(layout);
        std::size_t expected = net.param_count_;
        for (const auto &h : net.hidden_) expected += 2 * static_cast<std::size_t>(h.rows);
        if (blob.size() != expected) throw IoError("checkpoint blob size does not match layout");
        std::size_t pos = 0;
        for (Eigen::Index i = 0; i < net.params_.size(); ++i) net.params_(i) = blob[pos++];
        for (auto &v : net.running_mean_)
            for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = blob[pos++];
        for (auto &v : net.running_var_)
            for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = blob[pos++];
        net.mode_ = BatchNormMode::Eval;
        return net;
    }

  private:
    struct Block {
        std::size_t w = 0, b = 0, gamma = 0, beta = 0;
        int rows = 0, cols = 0;
    };

    struct Cache {
        std::vector<Matrix> input;   // activation entering each hidden layer
        std::vector<Matrix> zhat;    // normalized pre-activation
        std::vector<Vector> inv_std; // 1 / sqrt(var + eps)
        std::vector<Matrix> active;  // 1 where the ReLU passes
        Matrix last;                 // activation entering the output layer
    };

    void build_offsets() {
        std::size_t pos = 0;
        int in = layout_.input_dim();
        hidden_.clear();
        for (int h : layout_.hidden) {
            Block b;
            b.rows = h;
            b.cols = in;
            b.w = pos;
            pos += static_cast<std::size_t>(h) * in;
            b.b = pos;
            pos += h;
            b.gamma = pos;
            pos += h;
            b.beta = pos;
            pos += h;
            hidden_.push_back(b);
            in = h;
        }
        out_.rows = layout_.raw_dim();
        out_.cols = in;
        out_.w = pos;
        pos += static_cast<std::size_t>(out_.rows) * in;
        out_.b = pos;
        pos += out_.rows;
        param_count_ = pos;
    }

    Eigen::Map<Matrix> map(std::size_t off, int r, int c) { return {params_.data() + off, r, c}; }
    Eigen::Map<const Matrix> cmap(std::size_t off, int r, int c) const { return {params_.data() + off, r, c}; }
    Eigen::Map<Vector> vmap(std::size_t off, int r) { return {params_.data() + off, r}; }
    Eigen::Map<const Vector> cvmap(std::size_t off, int r) const { return {params_.data() + off, r}; }

    Matrix forward(const Matrix &inputs, BatchNormMode mode, Cache *cache, BatchStats *stats) const {
        if (inputs.rows() != layout_.input_dim())
            throw ContractViolation("input has " + std::to_string(inputs.rows()) + " rows, layout expects " +
                                    std::to_string(layout_.input_dim()));
        const Eigen::Index B = inputs.cols();
        if (mode == BatchNormMode::Train && B < 2)
            throw ContractViolation("train-mode batch normalization needs at least two samples");
        if (!inputs.allFinite()) throw NumericFailure("non-finite network input", 0);
        Matrix a = inputs;
        for (int l = 0; l < hidden_layers(); ++l) {
            const Block &blk = hidden_[l];
            Matrix z = cmap(blk.w, blk.rows, blk.cols) * a;
            z.colwise() += cvmap(blk.b, blk.rows);
            Vector mu, inv;
            if (mode == BatchNormMode::Train) {
                mu = z.rowwise().mean();
                z.colwise() -= mu;
                Vector var = z.array().square().rowwise().mean();
                inv = (var.array() + layout_.bn_eps).rsqrt();
                if (stats) {
                    stats->mean.push_back(mu);
                    stats->var.push_back(var * (static_cast<double>(B) / static_cast<double>(B - 1)));
                }
            } else {
                mu = running_mean_[l];
                z.colwise() -= mu;
                inv = (running_var_[l].array() + layout_.bn_eps).rsqrt();
            }
            z.array().colwise() *= inv.array(); // zhat
            Matrix o = z.array().colwise() * cvmap(blk.gamma, blk.rows).array();
            o.colwise() += cvmap(blk.beta, blk.rows);
            if (!o.allFinite()) throw NumericFailure("non-finite activation in hidden layer " + std::to_string(l), l + 1);
            if (cache) {
                cache->input.push_back(std::move(a));
                cache->zhat.push_back(z);
                cache->inv_std.push_back(inv);
                cache->active.push_back((o.array() > 0.0).cast<double>());
            }
            a = o.cwiseMax(0.0);
        }
        Matrix raw = cmap(out_.w, out_.rows, out_.cols) * a;
        raw.colwise() += cvmap(out_.b, out_.rows);
        if (!raw.allFinite())
            throw NumericFailure("non-finite trunk output", hidden_layers() + 1);
        if (cache) cache->last = std::move(a);
        return raw;
    }

    void backward(const Cache &cache, const Matrix &d_raw, BatchNormMode mode, Vector *grad, Matrix *d_input) const {
        if (grad) {
            Eigen::Map<Matrix>(grad->data() + out_.w, out_.rows, out_.cols).noalias() = d_raw * cache.last.transpose();
            Eigen::Map<Vector>(grad->data() + out_.b, out_.rows) = d_raw.rowwise().sum();
        }
        Matrix da = cmap(out_.w, out_.rows, out_.cols).transpose() * d_raw;
        for (int l = hidden_layers() - 1; l >= 0; --l) {
            const Block &blk = hidden_[l];
            const Matrix d_o = da.cwiseProduct(cache.active[l]);
            const auto g = cvmap(blk.gamma, blk.rows);
            if (grad) {
                Eigen::Map<Vector>(grad->data() + blk.gamma, blk.rows) = d_o.cwiseProduct(cache.zhat[l]).rowwise().sum();
                Eigen::Map<Vector>(grad->data() + blk.beta, blk.rows) = d_o.rowwise().sum();
            }
            Matrix d_zhat = d_o.array().colwise() * g.array();
            Matrix d_z;
            if (mode == BatchNormMode::Train) {
                const Vector mean_dzhat = d_zhat.rowwise().mean();
                const Vector mean_dzhat_zhat = d_zhat.cwiseProduct(cache.zhat[l]).rowwise().mean();
                d_z = d_zhat;
                d_z.colwise() -= mean_dzhat;
                d_z -= (cache.zhat[l].array().colwise() * mean_dzhat_zhat.array()).matrix();
                d_z.array().colwise() *= cache.inv_std[l].array();
            } else {
                d_z = d_zhat.array().colwise() * cache.inv_std[l].array();
            }
            if (grad) {
                Eigen::Map<Matrix>(grad->data() + blk.w, blk.rows, blk.cols).noalias() =
                    d_z * cache.input[l].transpose();
                Eigen::Map<Vector>(grad->data() + blk.b, blk.rows) = d_z.rowwise().sum();
            }
            if (l > 0 || d_input) da = cmap(blk.w, blk.rows, blk.cols).transpose() * d_z;
        }
        if (d_input) *d_input = std::move(da);
    }

    NetLayout layout_;
    std::vector<Block> hidden_;
    Block out_;
    std::size_t param_count_ = 0;
    Vector params_;
    std::vector<Vector> running_mean_;
    std::vector<Vector> running_var_;
    BatchNormMode mode_ = BatchNormMode::Eval;
};

inline EnergyNet init_network(const NetLayout &layout, std::uint64_t seed) { return EnergyNet::init(layout, seed); }

// ---------------------------------------------------------------------------
// ADAM
// ---------------------------------------------------------------------------

struct AdamConfig {
    double learning_rate = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    AdamConfig config;
    Vector m;
    Vector v;
    long step = 0;

    AdamState() = default;
    AdamState(std::size_t n, AdamConfig cfg) : config(cfg), m(Vector::Zero(n)), v(Vector::Zero(n)) {}
};

/// Bias-corrected ADAM update of `params` in place.
inline void adam_step(Vector &params, const Vector &grads, AdamState &state) {
    if (state.m.size() == 0) {
        state.m = Vector::Zero(params.size());
        state.v = Vector::Zero(params.size());
    }
    if (grads.size() != params.size() || state.m.size() != params.size())
        throw ContractViolation("adam_step: gradient shape does not match parameters");
    const auto &c = state.config;
    ++state.step;
    state.m = c.beta1 * state.m + (1.0 - c.beta1) * grads;
    state.v = c.beta2 * state.v + (1.0 - c.beta2) * grads.cwiseAbs2();
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    params.array() -= c.learning_rate * (state.m.array() / bc1) / ((state.v.array() / bc2).sqrt() + c.epsilon);
}

inline void adam_step(EnergyNet &net, const Vector &grads, AdamState &state) {
    adam_step(net.parameters(), grads, state);
}

} // namespace ebds
