#include "pesn/ensemble.hpp"

#include "pesn/csv.hpp"
#include "pesn/parallel.hpp"
#include "pesn/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

namespace pesn {

namespace {

constexpr double nan = std::numeric_limits<double>::quiet_NaN();

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

std::size_t steps_for(double time, double dt) { return static_cast<std::size_t>(std::llround(time / dt)); }

EnsembleMember diverged_member(std::size_t k, const Vec3& ic, std::size_t n_params, std::size_t n, GradientMethod m)
{
    EnsembleMember out;
    out.index = k;
    out.initial_condition = ic;
    out.sensitivity = {Vec::Constant(idx(n_params), nan), n, m};
    out.diverged = true;
    return out;
}

EnsembleMember true_member(const LorenzParams& params, const EnsembleConfig& config, const ObjectiveSpec& objective,
                           std::size_t k)
{
    const std::size_t n = config.window_steps();
    Vec3 ic = Vec3::Constant(nan);
    try {
        const Trajectory seg = member_segment(params, config, k);
        ic = seg.states.back().vec();
        EnsembleMember out;
        out.index = k;
        out.initial_condition = ic;
        out.sensitivity = true_window_sensitivity(params, seg.states.back(), static_cast<double>(n) * config.dt, objective,
                                                  {config.dt, config.divergence_cap});
        return out;
    } catch (const diverged_error&) {
    } catch (const blowup_error&) {
    }
    return diverged_member(k, ic, 3, n, GradientMethod::adjoint);
}

EnsembleMember esn_member(const Esn& model, const Vec& p, const ReservoirState& r0, const Vec3& ic,
                          const EnsembleConfig& config, const ObjectiveSpec& objective, std::size_t k)
{
    const std::size_t n = config.window_steps();
    try {
        const ClosedLoopResult run = closed_loop(model, r0, n, p);
        EnsembleMember out;
        out.index = k;
        out.initial_condition = ic;
        out.sensitivity = adjoint_sweep(model, run.trajectory, objective, {config.divergence_cap, false}).sensitivity;
        return out;
    } catch (const diverged_error&) {
    } catch (const blowup_error&) {
    }
    return diverged_member(k, ic, model.n_params(), n, GradientMethod::adjoint);
}

}  // namespace

std::string_view to_string(SystemKind kind) noexcept
{
    switch (kind) {
    case SystemKind::true_system: return "true";
    case SystemKind::esn: return "esn";
    }
    return "unknown";
}

SystemKind system_kind_from_string(std::string_view name)
{
    if (name == "true") return SystemKind::true_system;
    if (name == "esn") return SystemKind::esn;
    throw config_error("unknown system selector: " + std::string(name));
}

std::string_view to_string(MemberInit init) noexcept
{
    switch (init) {
    case MemberInit::true_washout: return "true_washout";
    case MemberInit::self_generated: return "self_generated";
    }
    return "unknown";
}

MemberInit member_init_from_string(std::string_view name)
{
    if (name == "true_washout") return MemberInit::true_washout;
    if (name == "self_generated") return MemberInit::self_generated;
    throw config_error("unknown member initialisation: " + std::string(name));
}

void EnsembleConfig::validate() const
{
    if (n_members < 2) throw config_error("EnsembleConfig: n_members must be >= 2");
    if (!(window_lt > 0.0) || !std::isfinite(window_lt)) throw config_error("EnsembleConfig: window_lt must be positive");
    if (!(lyapunov_time > 0.0) || !std::isfinite(lyapunov_time))
        throw config_error("EnsembleConfig: a finite positive Lyapunov time is required");
    if (!(dt > 0.0)) throw config_error("EnsembleConfig: dt must be positive");
    if (!(washout_time > 0.0) || !(transient_time >= washout_time))
        throw config_error("EnsembleConfig: need 0 < washout_time <= transient_time");
    if (!(max_diverged_fraction >= 0.0 && max_diverged_fraction <= 1.0))
        throw config_error("EnsembleConfig: max_diverged_fraction must lie in [0, 1]");
    if (!(spacing_lt > 0.0) || !(spin_up_lt >= 0.0)) throw config_error("EnsembleConfig: invalid self-generated spacing");
    if (!(divergence_cap > 0.0)) throw config_error("EnsembleConfig: divergence_cap must be positive");
}

std::size_t EnsembleConfig::window_steps() const
{
    return std::max<std::size_t>(1, steps_for(window_lt * lyapunov_time, dt));
}

std::uint64_t member_seed(const EnsembleConfig& config, std::size_t k)
{
    return derive_seed(config.seed, "ensemble-member", config.identical_member_seeds ? 0 : k);
}

Trajectory member_segment(const LorenzParams& params, const EnsembleConfig& config, std::size_t k)
{
    const std::size_t w = steps_for(config.washout_time, config.dt);
    const std::size_t t = steps_for(config.transient_time, config.dt) - w;
    return simulate(params, random_initial_condition(params, member_seed(config, k)), {config.dt, w, t});
}

void summarise(SensitivityEstimate& estimate)
{
    if (estimate.members.empty()) throw config_error("summarise: no members");
    const Eigen::Index n_p = estimate.members.front().sensitivity.djdp.size();
    Vec sum = Vec::Zero(n_p);
    std::size_t used = 0;
    estimate.n_diverged = 0;
    for (const auto& m : estimate.members) {
        if (m.diverged) {
            ++estimate.n_diverged;
            continue;
        }
        sum += m.sensitivity.djdp;
        ++used;
    }
    estimate.mean = used > 0 ? Vec(sum / static_cast<double>(used)) : Vec::Constant(n_p, nan);
    Vec sq = Vec::Zero(n_p);
    for (const auto& m : estimate.members)
        if (!m.diverged) sq += (m.sensitivity.djdp - estimate.mean).cwiseAbs2();
    estimate.stderr_ = used > 1 ? Vec((sq / static_cast<double>(used - 1)).cwiseSqrt() / std::sqrt(static_cast<double>(used)))
                                : Vec::Constant(n_p, nan);
}

SensitivityEstimate ensemble_adjoint(const LorenzParams& regime, const EnsembleConfig& config,
                                     const ObjectiveSpec& objective, const Esn* model)
{
    config.validate();
    SensitivityEstimate est;
    est.members.resize(config.n_members);

    if (config.system == SystemKind::true_system) {
        objective.validate(3);
        parallel_for(config.n_members, [&](std::size_t k) { est.members[k] = true_member(regime, config, objective, k); });
    } else {
        if (!model) throw config_error("ensemble_adjoint: the ESN branch needs a trained model");
        objective.validate(model->n_outputs());
        const Vec p = regime.as_vector();
        const Vec r_zero = Vec::Zero(idx(model->n_reservoir()));
        if (config.member_init == MemberInit::true_washout) {
            parallel_for(config.n_members, [&](std::size_t k) {
                const Series seg = member_segment(regime, config, k).as_series();
                const Eigen::Index w = seg.cols() - 1;
                // Feed samples up to the one before the IC so the readout of r0 predicts the IC.
                const ReservoirState r0 = washout(*model, r_zero, seg.leftCols(w), p);
                est.members[k] = esn_member(*model, p, r0, seg.col(w), config, objective, k);
            });
        } else {
            const Series seg = member_segment(regime, config, 0).as_series();
            ReservoirState r = washout(*model, r_zero, seg, p);
            const std::size_t spin = steps_for(config.spin_up_lt * config.lyapunov_time, config.dt);
            const std::size_t spacing = std::max<std::size_t>(1, steps_for(config.spacing_lt * config.lyapunov_time, config.dt));
            auto advance = [&](std::size_t n) {
                if (n > 0) r = closed_loop(*model, r, n, p).trajectory.states.col(idx(n));
            };
            advance(spin);
            const std::size_t distinct = config.identical_member_seeds ? 1 : config.n_members;
            std::vector<ReservoirState> starts;
            starts.reserve(distinct);
            for (std::size_t k = 0; k < distinct; ++k) {
                if (k > 0) advance(spacing);
                starts.push_back(r);
            }
            parallel_for(config.n_members, [&](std::size_t k) {
                const ReservoirState& r0 = starts[config.identical_member_seeds ? 0 : k];
                const Vec3 ic = model->norm.to_physical(readout(*model, r0)).head<3>();
                est.members[k] = esn_member(*model, p, r0, ic, config, objective, k);
            });
        }
    }

    summarise(est);
    const double fraction = static_cast<double>(est.n_diverged) / static_cast<double>(config.n_members);
    if (fraction > config.max_diverged_fraction)
        throw unreliable_estimate_error("ensemble_adjoint: " + std::to_string(est.n_diverged) + " of "
                                            + std::to_string(config.n_members) + " members diverged",
                                        std::move(est));
    return est;
}

double Polynomial::value(double x) const
{
    const double t = (x - centre) / scale;
    double v = 0.0;
    for (Eigen::Index k = coefficients.size() - 1; k >= 0; --k) v = v * t + coefficients[k];
    return v;
}

double Polynomial::derivative(double x) const
{
    const double t = (x - centre) / scale;
    double v = 0.0;
    for (Eigen::Index k = coefficients.size() - 1; k >= 1; --k) v = v * t + static_cast<double>(k) * coefficients[k];
    return v / scale;
}

SweepResult sweep_objective(const LorenzParams& base, std::size_t param_index, const std::vector<double>& grid,
                            const SweepOptions& options)
{
    if (param_index > 2) throw config_error("sweep_objective: parameter index out of range");
    if (grid.empty()) throw config_error("sweep_objective: empty grid");
    for (std::size_t i = 1; i < grid.size(); ++i)
        if (!(grid[i] > grid[i - 1])) throw config_error("sweep_objective: grid must be strictly increasing");
    if (!options.lyapunov_times.empty() && options.lyapunov_times.size() != grid.size())
        throw config_error("sweep_objective: one Lyapunov time per grid value required");
    if (!(options.duration_lt > 0.0) || !(options.dt > 0.0)) throw config_error("sweep_objective: invalid duration or dt");
    if (options.system == SystemKind::esn && !options.model) throw config_error("sweep_objective: the ESN branch needs a model");
    options.objective.validate(3);

    SweepResult out;
    out.param_index = param_index;
    out.grid = grid;
    out.objective.assign(grid.size(), nan);
    out.valid.assign(grid.size(), false);
    std::vector<char> valid(grid.size(), 0);

    parallel_for(grid.size(), [&](std::size_t i) {
        const LorenzParams p = base.with(param_index, grid[i]);
        double lt = options.lyapunov_times.empty()
                        ? lyapunov_time(p, default_lyapunov_config(), derive_seed(options.seed, "lyapunov")).lyapunov_time
                        : options.lyapunov_times[i];
        if (!std::isfinite(lt) || !(lt > 0.0)) lt = 1.0;  // non-chaotic point: duration in time units
        const std::uint64_t seed = derive_seed(options.seed, "sweep-point", i);
        try {
            if (options.system == SystemKind::true_system) {
                const LorenzState ic =
                    simulate(p, random_initial_condition(p, seed), {options.dt, 0, steps_for(options.transient_time, options.dt)})
                        .states.front();
                out.objective[i] = window_average(p, ic, steps_for(options.duration_lt * lt, options.dt), options.dt,
                                                  options.objective);
            } else {
                const std::size_t w = steps_for(options.washout_time, options.dt);
                const Series seg = simulate(p, random_initial_condition(p, seed),
                                            {options.dt, w - 1, steps_for(options.transient_time, options.dt)})
                                       .as_series();
                StatsOptions so;
                so.dt = options.dt;
                so.transient_time = options.transient_time;
                const LongTermStats st = long_term_stats(*options.model, p.as_vector(), options.duration_lt, lt, seg, so);
                out.objective[i] = st.mean[idx(options.objective.component)];
            }
            valid[i] = std::isfinite(out.objective[i]) ? 1 : 0;
        } catch (const diverged_error&) {
        } catch (const blowup_error&) {
        }
        if (!valid[i]) out.objective[i] = nan;
    });
    for (std::size_t i = 0; i < grid.size(); ++i) out.valid[i] = valid[i] != 0;
    return out;
}

DirectEstimate polyfit_direct(const SweepResult& sweep, std::size_t degree)
{
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < sweep.grid.size(); ++i)
        if (i < sweep.valid.size() && sweep.valid[i]) {
            xs.push_back(sweep.grid[i]);
            ys.push_back(sweep.objective[i]);
        }
    if (xs.size() < degree + 1) throw config_error("polyfit_direct: fewer valid points than coefficients");
    const auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
    DirectEstimate out;
    out.fit.centre = 0.5 * (*lo + *hi);
    out.fit.scale = *hi > *lo ? 0.5 * (*hi - *lo) : 1.0;
    Mat v(idx(xs.size()), idx(degree + 1));
    Vec y(idx(xs.size()));
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double t = (xs[i] - out.fit.centre) / out.fit.scale;
        double power = 1.0;
        for (std::size_t k = 0; k <= degree; ++k, power *= t) v(idx(i), idx(k)) = power;
        y[idx(i)] = ys[i];
    }
    const Eigen::ColPivHouseholderQR<Mat> qr(v);
    if (qr.rank() < idx(degree + 1)) throw config_error("polyfit_direct: rank-deficient fit");
    out.fit.coefficients = qr.solve(y);
    for (double x : sweep.grid) out.derivative.push_back(out.fit.derivative(x));
    return out;
}

std::vector<ComparisonRow> compare_estimates(const Vec& regime, const SensitivityEstimate& true_estimate,
                                             const SensitivityEstimate* esn_estimate,
                                             std::optional<std::pair<std::size_t, double>> polyfit_slope)
{
    std::vector<ComparisonRow> rows;
    const Vec& ref = true_estimate.mean;
    auto row = [&](std::size_t j, const char* method, double value, double se) {
        const double d = value - ref[idx(j)];
        rows.push_back({regime, j, method, value, se, d, d / std::abs(ref[idx(j)])});
    };
    for (std::size_t j = 0; j < static_cast<std::size_t>(ref.size()); ++j) {
        row(j, "true_adjoint", ref[idx(j)], true_estimate.stderr_[idx(j)]);
        if (esn_estimate) row(j, "esn_adjoint", esn_estimate->mean[idx(j)], esn_estimate->stderr_[idx(j)]);
        if (polyfit_slope && polyfit_slope->first == j) row(j, "polyfit", polyfit_slope->second, nan);
    }
    return rows;
}

void write_members_csv(std::ostream& os, const Vec& regime, SystemKind system, const SensitivityEstimate& estimate,
                       bool header)
{
    CsvWriter csv(os);
    if (header)
        csv.header({"system", "s", "r", "b", "member", "x0", "y0", "z0", "window_steps", "diverged", "dJ_ds", "dJ_dr",
                    "dJ_db"});
    for (const auto& m : estimate.members) {
        csv << to_string(system) << regime[0] << regime[1] << regime[2] << m.index << m.initial_condition[0]
            << m.initial_condition[1] << m.initial_condition[2] << m.sensitivity.window_steps << (m.diverged ? 1 : 0);
        for (Eigen::Index j = 0; j < 3; ++j) {
            if (m.diverged) csv << "nan";
            else csv << m.sensitivity.djdp[j];
        }
        csv.end_row();
    }
}

void write_summary_csv(std::ostream& os, const Vec& regime, SystemKind system, const EnsembleConfig& config,
                       const SensitivityEstimate& estimate, std::string_view status, bool header)
{
    CsvWriter csv(os);
    if (header)
        csv.header({"system", "s", "r", "b", "lyapunov_time", "window_lt", "window_steps", "n_members", "n_used",
                    "n_diverged", "mean_dJ_ds", "mean_dJ_dr", "mean_dJ_db", "stderr_dJ_ds", "stderr_dJ_dr",
                    "stderr_dJ_db", "status"});
    csv << to_string(system) << regime[0] << regime[1] << regime[2] << config.lyapunov_time << config.window_lt
        << config.window_steps() << estimate.members.size() << estimate.n_used() << estimate.n_diverged;
    for (Eigen::Index j = 0; j < 3; ++j) csv << estimate.mean[j];
    for (Eigen::Index j = 0; j < 3; ++j) csv << estimate.stderr_[j];
    csv << status;
    csv.end_row();
}

void write_comparison_csv(std::ostream& os, const std::vector<ComparisonRow>& rows, bool header)
{
    static constexpr const char* names[] = {"s", "r", "b"};
    CsvWriter csv(os);
    if (header) csv.header({"s", "r", "b", "parameter", "method", "value", "stderr", "diff", "rel_diff"});
    for (const auto& r : rows) {
        csv << r.regime[0] << r.regime[1] << r.regime[2] << (r.param_index < 3 ? names[r.param_index] : "?") << r.method
            << r.value;
        if (std::isnan(r.stderr_)) csv << "";
        else csv << r.stderr_;
        csv << r.diff << r.rel_diff;
        csv.end_row();
    }
}

}  // namespace pesn
