#include "pesn/esn.hpp"

#include "pesn/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace pesn {

namespace {

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

/// Preallocated closed/open-loop driver; the parameter contribution to the
/// tanh argument is constant over a run and computed once.
class Driver {
public:
    Driver(const Esn& model, const Vec& p)
      : m_(model)
      , bias_(model.mats.w_in_p * model.hyper.sigma_p.cwiseProduct(p - model.hyper.k_p))
      , pre_(idx(model.n_reservoir()))
    {
    }

    /// r <- step(r, y_net)
    void step(Vec& r, const Vec& y_net, std::size_t step_index)
    {
        const double a = m_.hyper.alpha;
        pre_.noalias() = m_.mats.w * r;
        pre_.noalias() += m_.mats.w_in_y * y_net;
        pre_ += bias_;
        r = (1.0 - a) * r + a * pre_.array().tanh().matrix();
        if (!r.allFinite()) throw blowup_error("esn: non-finite reservoir state", step_index);
    }

private:
    const Esn& m_;
    Vec bias_;
    Vec pre_;
};

void check_regime(const Esn& model, const Vec& p)
{
    if (static_cast<std::size_t>(p.size()) != model.n_params()) throw shape_error("esn: parameter vector has wrong length");
    require_finite(p, "esn: regime");
}

void check_series(const Esn& model, const Series& y)
{
    if (static_cast<std::size_t>(y.rows()) != model.n_outputs()) throw shape_error("esn: series has wrong number of components");
}

Vec histogram_bins(const Series& y, Eigen::Index row, double lo, double hi, std::size_t bins, double& out_of_range)
{
    Vec counts = Vec::Zero(idx(bins));
    std::size_t inside = 0;
    const double width = (hi - lo) / static_cast<double>(bins);
    for (Eigen::Index t = 0; t < y.cols(); ++t) {
        const double v = y(row, t);
        if (!(v >= lo) || !(v < hi)) continue;
        auto b = static_cast<std::size_t>((v - lo) / width);
        counts[idx(std::min(b, bins - 1))] += 1.0;
        ++inside;
    }
    out_of_range = y.cols() > 0 ? 1.0 - static_cast<double>(inside) / static_cast<double>(y.cols()) : 0.0;
    if (inside > 0) counts /= static_cast<double>(inside);
    return counts;
}

// --- archive helpers -------------------------------------------------------

static_assert(std::endian::native == std::endian::little, "model archive assumes a little-endian host");

constexpr char archive_magic[8] = {'P', 'E', 'S', 'N', 'M', 'D', 'L', '1'};
constexpr std::uint32_t archive_version = 1;

template <typename T>
void put(std::ostream& os, T v)
{
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is)
{
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw error("load_model: truncated archive");
    return v;
}

void put_matrix(std::ostream& os, const Mat& m)
{
    put<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) put<double>(os, m(i, j));
}

Mat get_matrix(std::istream& is)
{
    const auto rows = get<std::uint64_t>(is);
    const auto cols = get<std::uint64_t>(is);
    if (rows > (1u << 20) || cols > (1u << 20)) throw error("load_model: implausible matrix dimensions");
    Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = get<double>(is);
    return m;
}

}  // namespace

std::string_view to_string(InputNormalization mode) noexcept
{
    switch (mode) {
    case InputNormalization::standardize: return "standardize";
    case InputNormalization::scale: return "scale";
    case InputNormalization::none: return "none";
    }
    return "unknown";
}

InputNormalization input_normalization_from_string(std::string_view name)
{
    for (auto m : {InputNormalization::standardize, InputNormalization::scale, InputNormalization::none})
        if (to_string(m) == name) return m;
    throw config_error("unknown input normalisation: " + std::string(name));
}

std::string_view to_string(InputLayout layout) noexcept
{
    switch (layout) {
    case InputLayout::single: return "single";
    case InputLayout::per_block: return "per_block";
    }
    return "unknown";
}

InputLayout input_layout_from_string(std::string_view name)
{
    for (auto l : {InputLayout::single, InputLayout::per_block})
        if (to_string(l) == name) return l;
    throw config_error("unknown input layout: " + std::string(name));
}

void EsnHyperParams::validate() const
{
    if (n_reservoir < 1) throw config_error("EsnHyperParams: n_reservoir must be >= 1");
    if (n_conn < 1 || n_conn > n_reservoir) throw config_error("EsnHyperParams: need 1 <= n_conn <= n_reservoir");
    if (!(rho > 0.0) || !std::isfinite(rho)) throw config_error("EsnHyperParams: rho must be positive");
    if (!(sigma_in >= 0.0) || !std::isfinite(sigma_in)) throw config_error("EsnHyperParams: sigma_in must be >= 0");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw config_error("EsnHyperParams: alpha must lie in (0, 1]");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw config_error("EsnHyperParams: lambda must be >= 0");
    if (sigma_p.size() != k_p.size()) throw config_error("EsnHyperParams: sigma_p and k_p lengths differ");
    if (!sigma_p.allFinite() || !k_p.allFinite()) throw config_error("EsnHyperParams: non-finite sigma_p or k_p");
    if ((sigma_p.array() < 0.0).any()) throw config_error("EsnHyperParams: sigma_p must be elementwise >= 0");
}

EsnHyperParams full_scale_hyperparams()
{
    EsnHyperParams h;
    h.n_reservoir = 1200;
    h.n_conn = 3;
    h.rho = 0.2201;
    h.sigma_in = 0.0679;
    h.alpha = 0.8853;
    h.lambda = 1e-10;
    h.sigma_p = Vec3(0.0028, 0.0015, 0.0393);
    h.k_p = Vec3(68.73, 84.81, 74.46);
    return h;
}

Normalization Normalization::identity(std::size_t n)
{
    return {Vec::Zero(idx(n)), Vec::Ones(idx(n))};
}

Series Normalization::to_network(const Series& y) const
{
    return (y.colwise() - mean).array().colwise() / scale.array();
}

Series Normalization::to_physical(const Series& y) const
{
    return (y.array().colwise() * scale.array()).matrix().colwise() + mean;
}

const Mat& Esn::w_out() const
{
    if (!mats.w_out) throw not_trained_error("esn: readout has not been trained");
    return *mats.w_out;
}

void RegimeDataset::validate() const
{
    if (washout.cols() == 0 || train.cols() < 2) throw config_error("RegimeDataset: empty washout or training series");
    if (washout.rows() != train.rows()) throw shape_error("RegimeDataset: washout and training series differ in width");
    if (!(dt > 0.0)) throw config_error("RegimeDataset: dt must be positive");
}

double spectral_radius(const SparseMat& w)
{
    const Mat dense(w);
    Eigen::EigenSolver<Mat> solver(dense, false);
    if (solver.info() != Eigen::Success) throw construction_error("spectral_radius: eigenvalue computation failed");
    return solver.eigenvalues().cwiseAbs().maxCoeff();
}

std::optional<double> power_iteration_radius(const SparseMat& w, std::uint64_t seed, double tol, std::size_t max_iter)
{
    Rng rng(derive_seed(seed, "power-iteration"));
    Vec v(w.rows());
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = rng.uniform(-1.0, 1.0);
    v.normalize();
    double previous = -1.0;
    std::size_t settled = 0;
    for (std::size_t it = 0; it < max_iter; ++it) {
        const Vec a = w * v;
        const Vec b = w * a;
        const double na = a.norm();
        if (na == 0.0) return 0.0;
        double estimate;
        // Fit b = c1 a + c0 v; the dominant eigenvalue (or pair) are roots of t^2 - c1 t - c0.
        Eigen::Matrix2d gram;
        gram << a.dot(a), a.dot(v), a.dot(v), v.dot(v);
        const double cos2 = gram(0, 1) * gram(0, 1) / (gram(0, 0) * gram(1, 1));
        if (1.0 - cos2 < 1e-12) {
            estimate = na;
        } else {
            const Eigen::Vector2d rhs(a.dot(b), v.dot(b));
            const Eigen::Vector2d c = gram.ldlt().solve(rhs);
            const double disc = c[0] * c[0] + 4.0 * c[1];
            if (disc >= 0.0) {
                const double s = std::sqrt(disc);
                estimate = std::max(std::abs(0.5 * (c[0] + s)), std::abs(0.5 * (c[0] - s)));
            } else {
                estimate = std::sqrt(std::max(0.0, -c[1]));
            }
        }
        if (previous > 0.0 && std::abs(estimate - previous) <= tol * previous) {
            if (++settled >= 3) return estimate;
        } else {
            settled = 0;
        }
        previous = estimate;
        v = b / b.norm();
        if (!v.allFinite()) return std::nullopt;
    }
    return std::nullopt;
}

ReservoirMatrices build_reservoir(const EsnHyperParams& hyper, std::size_t n_y, std::size_t n_p)
{
    hyper.validate();
    if (static_cast<std::size_t>(hyper.sigma_p.size()) != n_p) throw shape_error("build_reservoir: sigma_p length differs from n_p");
    const std::size_t n = hyper.n_reservoir;

    ReservoirMatrices mats;
    {
        Rng rng(derive_seed(hyper.seed, "reservoir-state-matrix"));
        std::vector<Eigen::Triplet<double>> entries;
        entries.reserve(n * hyper.n_conn);
        std::vector<std::size_t> cols;
        for (std::size_t i = 0; i < n; ++i) {
            cols.clear();
            while (cols.size() < hyper.n_conn) {
                const auto c = static_cast<std::size_t>(rng.index(n));
                if (std::find(cols.begin(), cols.end(), c) == cols.end()) cols.push_back(c);
            }
            for (auto c : cols) {
                double v = 0.0;
                while (v == 0.0) v = rng.uniform(-1.0, 1.0);
                entries.emplace_back(idx(i), idx(c), v);
            }
        }
        mats.w.resize(idx(n), idx(n));
        mats.w.setFromTriplets(entries.begin(), entries.end());
        mats.w.makeCompressed();
        const double radius = spectral_radius(mats.w);
        if (!(radius > 0.0) || !std::isfinite(radius)) throw construction_error("build_reservoir: degenerate state matrix");
        mats.w *= hyper.rho / radius;
    }
    {
        Rng rng(derive_seed(hyper.seed, "reservoir-input-matrix"));
        Mat w_in = Mat::Zero(idx(n), idx(n_y + n_p));
        for (std::size_t i = 0; i < n; ++i) {
            if (hyper.input_layout == InputLayout::single || n_p == 0) {
                const auto c = static_cast<Eigen::Index>(rng.index(n_y + n_p));
                w_in(idx(i), c) = rng.uniform(-hyper.sigma_in, hyper.sigma_in);
            } else {
                const auto cy = static_cast<Eigen::Index>(rng.index(n_y));
                w_in(idx(i), cy) = rng.uniform(-hyper.sigma_in, hyper.sigma_in);
                const auto cp = static_cast<Eigen::Index>(n_y + rng.index(n_p));
                w_in(idx(i), cp) = rng.uniform(-hyper.sigma_in, hyper.sigma_in);
            }
        }
        mats.w_in_y = w_in.leftCols(idx(n_y));
        mats.w_in_p = w_in.rightCols(idx(n_p));
    }
    return mats;
}

Esn make_esn(const EsnHyperParams& hyper, std::size_t n_y, std::size_t n_p)
{
    Esn m;
    m.hyper = hyper;
    m.mats = build_reservoir(hyper, n_y, n_p);
    m.norm = Normalization::identity(n_y);
    m.data_mean = Vec::Zero(idx(n_y));
    m.data_std = Vec::Ones(idx(n_y));
    return m;
}

Vec augment_input(const Vec& y_in, const Vec& p, const EsnHyperParams& hyper)
{
    if (p.size() != hyper.sigma_p.size() || p.size() != hyper.k_p.size())
        throw shape_error("augment_input: parameter vector length differs from sigma_p/k_p");
    Vec u(y_in.size() + p.size());
    u << y_in, hyper.sigma_p.cwiseProduct(p - hyper.k_p);
    return u;
}

ReservoirState esn_step(const Esn& model, const ReservoirState& r, const Vec& y_in, const Vec& p)
{
    if (static_cast<std::size_t>(r.size()) != model.n_reservoir()) throw shape_error("esn_step: reservoir state has wrong length");
    if (static_cast<std::size_t>(y_in.size()) != model.n_outputs()) throw shape_error("esn_step: input has wrong length");
    check_regime(model, p);
    const Vec u = augment_input(y_in, p, model.hyper);
    const Vec pre = model.mats.w_in_y * u.head(y_in.size()) + model.mats.w_in_p * u.tail(p.size()) + model.mats.w * r;
    const double a = model.hyper.alpha;
    ReservoirState next = (1.0 - a) * r + a * pre.array().tanh().matrix();
    if (!next.allFinite()) throw blowup_error("esn_step: non-finite reservoir state", 0);
    return next;
}

Vec readout(const Esn& model, const ReservoirState& r)
{
    return model.w_out() * r;
}

Mat open_loop(const Esn& model, const ReservoirState& r0, const Series& y_seq, const Vec& p)
{
    check_series(model, y_seq);
    check_regime(model, p);
    if (y_seq.cols() == 0) throw config_error("open_loop: empty input sequence");
    Driver drive(model, p);
    const Series y_net = model.norm.to_network(y_seq);
    Mat states(r0.size(), y_seq.cols());
    Vec r = r0;
    for (Eigen::Index t = 0; t < y_seq.cols(); ++t) {
        drive.step(r, y_net.col(t), static_cast<std::size_t>(t));
        states.col(t) = r;
    }
    return states;
}

ReservoirState washout(const Esn& model, const ReservoirState& r0, const Series& y_seq, const Vec& p)
{
    check_series(model, y_seq);
    check_regime(model, p);
    Driver drive(model, p);
    const Series y_net = model.norm.to_network(y_seq);
    Vec r = r0;
    for (Eigen::Index t = 0; t < y_seq.cols(); ++t) drive.step(r, y_net.col(t), static_cast<std::size_t>(t));
    return r;
}

ClosedLoopResult closed_loop(const Esn& model, const ReservoirState& r0, std::size_t n_steps, const Vec& p)
{
    check_regime(model, p);
    const Mat& w_out = model.w_out();
    Driver drive(model, p);
    ClosedLoopResult out;
    out.trajectory.regime = p;
    out.trajectory.states.resize(r0.size(), idx(n_steps + 1));
    out.trajectory.states.col(0) = r0;
    Series y_net(idx(model.n_outputs()), idx(n_steps));
    Vec r = r0;
    for (std::size_t i = 0; i < n_steps; ++i) {
        const Vec feedback = w_out * r;
        drive.step(r, feedback, i);
        out.trajectory.states.col(idx(i + 1)) = r;
        y_net.col(idx(i)) = w_out * r;
    }
    out.outputs = model.norm.to_physical(y_net);
    return out;
}

std::pair<Vec, Vec> training_statistics(const std::vector<RegimeDataset>& datasets)
{
    if (datasets.empty()) throw config_error("training_statistics: no datasets");
    const Eigen::Index n_y = datasets.front().train.rows();
    Vec sum = Vec::Zero(n_y);
    Vec sum_sq = Vec::Zero(n_y);
    double count = 0.0;
    for (const auto& d : datasets) {
        if (d.train.rows() != n_y) throw shape_error("training_statistics: inconsistent output width");
        sum += d.train.rowwise().sum();
        count += static_cast<double>(d.train.cols());
    }
    const Vec mean = sum / count;
    for (const auto& d : datasets) sum_sq += (d.train.colwise() - mean).rowwise().squaredNorm();
    Vec std = (sum_sq / count).cwiseSqrt();
    for (Eigen::Index i = 0; i < std.size(); ++i)
        if (!(std[i] > 0.0)) std[i] = 1.0;
    return {mean, std};
}

TrainingStates collect_training_states(const Esn& model, const std::vector<RegimeDataset>& datasets)
{
    if (datasets.empty()) throw config_error("train: no datasets");
    Eigen::Index total = 0;
    for (const auto& d : datasets) {
        d.validate();
        check_series(model, d.train);
        total += d.train.cols() - 1;
    }
    TrainingStates out{Mat(idx(model.n_reservoir()), total), Mat(idx(model.n_outputs()), total)};
    Eigen::Index offset = 0;
    for (const auto& d : datasets) {
        const Vec r = washout(model, Vec::Zero(idx(model.n_reservoir())), d.washout, d.regime);
        const Eigen::Index m = d.train.cols() - 1;
        out.states.middleCols(offset, m) = open_loop(model, r, d.train.leftCols(m), d.regime);
        out.targets.middleCols(offset, m) = model.norm.to_network(Series(d.train.rightCols(m)));
        offset += m;
    }
    return out;
}

Mat solve_ridge(const Mat& gram, const Mat& cross, double lambda)
{
    const Eigen::Index n = gram.rows();
    Mat a = gram;
    a.diagonal().array() += lambda;
    Eigen::LLT<Mat> llt(a);
    const double rcond = llt.info() == Eigen::Success ? llt.rcond() : 0.0;
    const double floor = std::numeric_limits<double>::epsilon() * static_cast<double>(n);
    if (lambda == 0.0 && rcond <= floor)
        throw ill_conditioned_error("train: singular normal matrix with lambda = 0; use a positive Tikhonov regulariser");
    Mat x;
    if (llt.info() == Eigen::Success && rcond > floor) {
        x = llt.solve(cross);
        x += llt.solve(Mat(cross - a * x));  // one step of iterative refinement
    } else {
        Eigen::SelfAdjointEigenSolver<Mat> eig(a);
        const Vec& ev = eig.eigenvalues();
        const double cut = ev.cwiseAbs().maxCoeff() * floor;
        Vec inv = Vec::Zero(n);
        for (Eigen::Index i = 0; i < n; ++i)
            if (ev[i] > cut) inv[i] = 1.0 / ev[i];
        x = eig.eigenvectors() * inv.asDiagonal() * (eig.eigenvectors().transpose() * cross);
    }
    return x;
}

double regularized_loss(const Mat& w_out, const TrainingStates& data, double lambda)
{
    return (w_out * data.states - data.targets).squaredNorm() + lambda * w_out.squaredNorm();
}

Esn train(const Esn& model, const std::vector<RegimeDataset>& datasets)
{
    if (datasets.empty()) throw config_error("train: no datasets");
    Esn out = model;
    auto [mean, std] = training_statistics(datasets);
    out.data_mean = mean;
    out.data_std = std;
    switch (model.hyper.normalization) {
    case InputNormalization::standardize: out.norm = {mean, std}; break;
    case InputNormalization::scale: out.norm = {Vec::Zero(mean.size()), std}; break;
    case InputNormalization::none: out.norm = Normalization::identity(static_cast<std::size_t>(mean.size())); break;
    }
    out.mats.w_out.reset();

    const Eigen::Index n = idx(out.n_reservoir());
    Mat gram = Mat::Zero(n, n);
    Mat cross = Mat::Zero(n, idx(out.n_outputs()));
    for (const auto& d : datasets) {
        const TrainingStates part = collect_training_states(out, {d});
        gram.selfadjointView<Eigen::Lower>().rankUpdate(part.states);
        cross.noalias() += part.states * part.targets.transpose();
    }
    gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();
    out.mats.w_out = solve_ridge(gram, cross, out.hyper.lambda).transpose();
    return out;
}

double predictability_horizon(const Esn& model, const Vec& regime, const Series& truth, std::size_t washout_steps,
                              double dt, double lyapunov_time, double threshold)
{
    check_series(model, truth);
    if (washout_steps == 0 || static_cast<Eigen::Index>(washout_steps) + 1 >= truth.cols())
        throw config_error("predictability_horizon: truth too short for washout plus forecast");
    if (!(lyapunov_time > 0.0) || !(dt > 0.0)) throw config_error("predictability_horizon: dt and Lyapunov time must be positive");
    const Eigen::Index w = idx(washout_steps);
    const Vec r0 = washout(model, Vec::Zero(idx(model.n_reservoir())), truth.leftCols(w), regime);
    const std::size_t n = static_cast<std::size_t>(truth.cols() - w - 1);
    Series predicted;
    try {
        predicted = closed_loop(model, r0, n, regime).outputs;
    } catch (const blowup_error& e) {
        return static_cast<double>(e.step()) * dt / lyapunov_time;
    }
    const Series target = truth.rightCols(idx(n));
    const double scale = std::sqrt(target.colwise().squaredNorm().mean());
    for (std::size_t k = 0; k < n; ++k) {
        const double err = (target.col(idx(k)) - predicted.col(idx(k))).norm() / scale;
        if (!(err <= threshold)) return static_cast<double>(k) * dt / lyapunov_time;
    }
    return static_cast<double>(n) * dt / lyapunov_time;
}

double predictability_horizon(const Esn& model, const Vec& regime, const std::vector<Series>& truths,
                              std::size_t washout_steps, double dt, double lyapunov_time, double threshold)
{
    if (truths.empty()) throw config_error("predictability_horizon: no truth segments");
    double sum = 0.0;
    for (const auto& t : truths) sum += predictability_horizon(model, regime, t, washout_steps, dt, lyapunov_time, threshold);
    return sum / static_cast<double>(truths.size());
}

Series repeated_sample(const Vec& y0, std::size_t n)
{
    return y0.replicate(1, idx(n));
}

LongTermStats series_stats(const Series& y, const std::vector<std::pair<double, double>>& ranges, std::size_t bins)
{
    if (y.cols() == 0) throw config_error("long_term_stats: no samples");
    if (ranges.size() != static_cast<std::size_t>(y.rows())) throw shape_error("long_term_stats: one histogram range per component required");
    if (bins == 0) throw config_error("long_term_stats: bins must be positive");
    LongTermStats s;
    s.n_samples = static_cast<std::size_t>(y.cols());
    s.mean = y.rowwise().mean();
    s.std = ((y.colwise() - s.mean).rowwise().squaredNorm() / static_cast<double>(y.cols())).cwiseSqrt();
    for (Eigen::Index c = 0; c < y.rows(); ++c) {
        Histogram h;
        h.lo = ranges[static_cast<std::size_t>(c)].first;
        h.hi = ranges[static_cast<std::size_t>(c)].second;
        if (!(h.hi > h.lo)) throw config_error("long_term_stats: empty histogram range");
        h.probability = histogram_bins(y, c, h.lo, h.hi, bins, h.out_of_range);
        s.histograms.push_back(std::move(h));
    }
    return s;
}

LongTermStats long_term_stats(const Esn& model, const Vec& regime, double duration_lt, double lyapunov_time,
                              const Series& washout_series, const StatsOptions& options)
{
    if (!(duration_lt > 0.0)) throw config_error("long_term_stats: duration must be positive");
    if (!(lyapunov_time > 0.0) || !std::isfinite(lyapunov_time)) throw config_error("long_term_stats: Lyapunov time must be positive");
    const Mat& w_out = model.w_out();
    const auto n = static_cast<std::size_t>(std::llround(duration_lt * lyapunov_time / options.dt));
    const auto n_transient = static_cast<std::size_t>(std::llround(options.transient_time / options.dt));
    if (n == 0) throw config_error("long_term_stats: duration shorter than one step");

    auto ranges = options.ranges;
    if (ranges.empty())
        for (Eigen::Index c = 0; c < model.data_mean.size(); ++c)
            ranges.emplace_back(model.data_mean[c] - 4.0 * model.data_std[c], model.data_mean[c] + 4.0 * model.data_std[c]);

    Vec r = washout(model, Vec::Zero(idx(model.n_reservoir())), washout_series, regime);
    Driver drive(model, regime);
    Series y(idx(model.n_outputs()), idx(n));
    const std::size_t total = n_transient + n;
    for (std::size_t i = 0; i < total; ++i) {
        const Vec feedback = w_out * r;
        drive.step(r, feedback, i);
        const Vec y_phys = model.norm.to_physical(Vec(w_out * r));
        if (((y_phys - model.data_mean).cwiseAbs().array() > options.divergence_bound * model.data_std.array()).any())
            throw diverged_error("long_term_stats: closed loop left the data envelope", i, static_cast<double>(i) * options.dt);
        if (i >= n_transient) y.col(idx(i - n_transient)) = y_phys;
    }
    return series_stats(y, ranges, options.bins);
}

void save_model(const std::string& path, const Esn& model)
{
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw error("save_model: cannot open " + path);
    const auto& h = model.hyper;
    os.write(archive_magic, sizeof(archive_magic));
    put<std::uint32_t>(os, archive_version);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(h.normalization));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(h.input_layout));
    put<std::uint64_t>(os, h.n_reservoir);
    put<std::uint64_t>(os, h.n_conn);
    put<std::uint64_t>(os, model.n_outputs());
    put<std::uint64_t>(os, model.n_params());
    put<std::uint64_t>(os, h.seed);
    put<double>(os, h.rho);
    put<double>(os, h.sigma_in);
    put<double>(os, h.alpha);
    put<double>(os, h.lambda);
    put_matrix(os, h.sigma_p.transpose());
    put_matrix(os, h.k_p.transpose());
    put_matrix(os, model.norm.mean.transpose());
    put_matrix(os, model.norm.scale.transpose());
    put_matrix(os, model.data_mean.transpose());
    put_matrix(os, model.data_std.transpose());
    put_matrix(os, model.mats.w_in_y);
    put_matrix(os, model.mats.w_in_p);
    put_matrix(os, Mat(model.mats.w));
    put_matrix(os, model.mats.w_out ? *model.mats.w_out : Mat(0, 0));
    if (!os) throw error("save_model: write failed for " + path);
}

Esn load_model(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw error("load_model: cannot open " + path);
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, archive_magic, sizeof(magic)) != 0) throw error("load_model: not a model archive: " + path);
    if (get<std::uint32_t>(is) != archive_version) throw error("load_model: unsupported archive version");
    Esn m;
    auto& h = m.hyper;
    const auto mode = get<std::uint32_t>(is);
    if (mode > 2) throw error("load_model: unknown normalisation mode");
    h.normalization = static_cast<InputNormalization>(mode);
    const auto layout = get<std::uint32_t>(is);
    if (layout > 1) throw error("load_model: unknown input layout");
    h.input_layout = static_cast<InputLayout>(layout);
    h.n_reservoir = get<std::uint64_t>(is);
    h.n_conn = get<std::uint64_t>(is);
    const auto n_y = get<std::uint64_t>(is);
    const auto n_p = get<std::uint64_t>(is);
    h.seed = get<std::uint64_t>(is);
    h.rho = get<double>(is);
    h.sigma_in = get<double>(is);
    h.alpha = get<double>(is);
    h.lambda = get<double>(is);
    h.sigma_p = get_matrix(is).transpose();
    h.k_p = get_matrix(is).transpose();
    m.norm.mean = get_matrix(is).transpose();
    m.norm.scale = get_matrix(is).transpose();
    m.data_mean = get_matrix(is).transpose();
    m.data_std = get_matrix(is).transpose();
    m.mats.w_in_y = get_matrix(is);
    m.mats.w_in_p = get_matrix(is);
    m.mats.w = get_matrix(is).sparseView(0.0, 0.0);
    m.mats.w.makeCompressed();
    Mat w_out = get_matrix(is);
    if (w_out.size() > 0) m.mats.w_out = std::move(w_out);
    h.validate();
    if (m.n_outputs() != n_y || m.n_params() != n_p || m.n_reservoir() != h.n_reservoir)
        throw error("load_model: header dimensions disagree with payload");
    return m;
}

std::string model_json(const Esn& model)
{
    const auto& h = model.hyper;
    auto vec = [](const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    nlohmann::ordered_json j;
    j["format"] = "pesn-model";
    j["version"] = archive_version;
    j["n_reservoir"] = h.n_reservoir;
    j["n_conn"] = h.n_conn;
    j["n_outputs"] = model.n_outputs();
    j["n_params"] = model.n_params();
    j["rho"] = h.rho;
    j["sigma_in"] = h.sigma_in;
    j["alpha"] = h.alpha;
    j["lambda"] = h.lambda;
    j["sigma_p"] = vec(h.sigma_p);
    j["k_p"] = vec(h.k_p);
    j["seed"] = h.seed;
    j["normalization_mode"] = to_string(h.normalization);
    j["input_layout"] = to_string(h.input_layout);
    j["normalization"] = {{"mean", vec(model.norm.mean)}, {"scale", vec(model.norm.scale)}};
    j["trained"] = model.trained();
    return j.dump(2) + "\n";
}

}  // namespace pesn
