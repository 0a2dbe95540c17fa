#include "pesn/dynsys.hpp"

#include "pesn/csv.hpp"
#include "pesn/random.hpp"

#include <fstream>

namespace pesn {

namespace {

using Vec6 = Eigen::Matrix<double, 6, 1>;

void check_finite(const Vec3& v, const char* what)
{
    if (!v.allFinite()) throw invalid_state_error(std::string(what) + ": non-finite state");
}

std::size_t steps_for(double time, double dt)
{
    return static_cast<std::size_t>(std::llround(time / dt));
}

Mat3 jacobian_at(const Vec3& v, const LorenzParams& p)
{
    Mat3 j;
    j << -p.s(), p.s(), 0.0,
         p.r() - v[2], -1.0, -v[0],
         v[1], v[0], -p.b();
    return j;
}

Mat3 param_grad_at(const Vec3& v)
{
    Mat3 g = Mat3::Zero();
    g(0, 0) = v[1] - v[0];
    g(1, 1) = v[0];
    g(2, 2) = -v[2];
    return g;
}

}  // namespace

LorenzParams::LorenzParams(double s, double r, double b) : s_(s), r_(r), b_(b)
{
    if (!std::isfinite(s) || !std::isfinite(r) || !std::isfinite(b))
        throw invalid_state_error("LorenzParams: non-finite parameter");
    if (!(s > 0.0) || !(b > 0.0)) throw invalid_state_error("LorenzParams: s and b must be positive");
}

LorenzParams LorenzParams::from_vector(const Vec& p)
{
    if (p.size() != 3) throw shape_error("LorenzParams: expected 3 parameters");
    return {p[0], p[1], p[2]};
}

LorenzParams LorenzParams::with(std::size_t index, double value) const
{
    switch (index) {
    case 0: return {value, r_, b_};
    case 1: return {s_, value, b_};
    case 2: return {s_, r_, value};
    default: throw shape_error("LorenzParams::with: index out of range");
    }
}

LorenzState::LorenzState(double x, double y, double z) : LorenzState(Vec3(x, y, z)) {}

LorenzState::LorenzState(const Vec3& v) : v_(v)
{
    check_finite(v_, "LorenzState");
}

void IntegrationConfig::validate() const
{
    if (!(dt > 0.0) || !std::isfinite(dt)) throw config_error("IntegrationConfig: dt must be positive");
}

Series Trajectory::as_series() const
{
    Series out(3, static_cast<Eigen::Index>(states.size()));
    for (std::size_t i = 0; i < states.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = states[i].vec();
    return out;
}

Vec3 lorenz_rhs(const Vec3& v, const LorenzParams& p)
{
    check_finite(v, "lorenz_rhs");
    return {p.s() * (v[1] - v[0]), v[0] * (p.r() - v[2]) - v[1], v[0] * v[1] - p.b() * v[2]};
}

Vec3 lorenz_rhs(const LorenzState& state, const LorenzParams& params)
{
    return lorenz_rhs(state.vec(), params);
}

Mat3 lorenz_jacobian(const LorenzState& state, const LorenzParams& params)
{
    return jacobian_at(state.vec(), params);
}

Mat3 lorenz_param_grad(const LorenzState& state)
{
    return param_grad_at(state.vec());
}

Trajectory simulate(const LorenzParams& params, const LorenzState& ic, const IntegrationConfig& config)
{
    config.validate();
    auto rhs = [&](const Vec3& v) -> Vec3 {
        return {params.s() * (v[1] - v[0]), v[0] * (params.r() - v[2]) - v[1], v[0] * v[1] - params.b() * v[2]};
    };
    Vec3 x = ic.vec();
    std::size_t step = 0;
    for (; step < config.transient_steps; ++step) x = rk4_step(rhs, x, config.dt, step);

    Trajectory traj;
    traj.dt = config.dt;
    traj.t0 = config.dt * static_cast<double>(config.transient_steps);
    traj.states.reserve(config.n_steps + 1);
    traj.states.emplace_back(x);
    for (std::size_t i = 0; i < config.n_steps; ++i, ++step) {
        x = rk4_step(rhs, x, config.dt, step);
        traj.states.emplace_back(x);
    }
    return traj;
}

LorenzState random_initial_condition(const LorenzParams& params, std::uint64_t seed)
{
    Rng rng(derive_seed(seed, "lorenz-ic"));
    const double x = rng.uniform(-10.0, 10.0);
    const double y = rng.uniform(-10.0, 10.0);
    const double z = rng.uniform(0.0, std::max(2.0 * params.r(), 1.0));
    return {x, y, z};
}

std::vector<LorenzState> sample_attractor(const LorenzParams& params, std::size_t n_samples, double spacing,
                                          std::uint64_t seed, double dt, double transient)
{
    if (n_samples == 0) throw config_error("sample_attractor: n_samples must be at least 1");
    if (!(spacing > 0.0)) throw config_error("sample_attractor: spacing must be positive");
    const auto stride = static_cast<std::size_t>(std::ceil(spacing / dt - 1e-9));

    IntegrationConfig warm{dt, 0, steps_for(transient, dt)};
    Vec3 x = simulate(params, random_initial_condition(params, seed), warm).states.back().vec();

    auto rhs = [&](const Vec3& v) { return lorenz_rhs(v, params); };
    std::vector<LorenzState> samples;
    samples.reserve(n_samples);
    samples.emplace_back(x);
    std::size_t step = warm.transient_steps;
    while (samples.size() < n_samples) {
        for (std::size_t k = 0; k < stride; ++k, ++step) x = rk4_step(rhs, x, dt, step);
        samples.emplace_back(x);
    }
    return samples;
}

IntegrationConfig default_lyapunov_config()
{
    return {0.01, 100000, 2000};
}

LyapunovEstimate lyapunov_time(const LorenzParams& params, const IntegrationConfig& config, std::uint64_t seed,
                               double renorm_interval)
{
    config.validate();
    if (!(renorm_interval > 0.0)) throw config_error("lyapunov_time: renorm_interval must be positive");
    const std::size_t renorm_steps = std::max<std::size_t>(1, steps_for(renorm_interval, config.dt));
    const std::size_t n_renorm = config.n_steps / renorm_steps;
    if (n_renorm == 0) throw config_error("lyapunov_time: horizon shorter than one renormalisation interval");

    IntegrationConfig warm{config.dt, 0, config.transient_steps};
    const Vec3 x0 = simulate(params, random_initial_condition(params, seed), warm).states.back().vec();

    Rng rng(derive_seed(seed, "lyapunov-tangent"));
    Vec6 w;
    w.head<3>() = x0;
    w.tail<3>() = Vec3(rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)).normalized();

    auto rhs = [&](const Vec6& u) -> Vec6 {
        const Vec3 x = u.head<3>();
        Vec6 d;
        d.head<3>() = lorenz_rhs(x, params);
        d.tail<3>() = jacobian_at(x, params) * u.tail<3>();
        return d;
    };

    double log_growth = 0.0;
    std::size_t step = config.transient_steps;
    for (std::size_t k = 0; k < n_renorm; ++k) {
        for (std::size_t i = 0; i < renorm_steps; ++i, ++step) w = rk4_step(rhs, w, config.dt, step);
        const double norm = w.tail<3>().norm();
        if (!(norm > 0.0)) throw blowup_error("lyapunov_time: tangent vector collapsed", step);
        log_growth += std::log(norm);
        w.tail<3>() /= norm;
    }

    LyapunovEstimate est;
    est.n_renorm = n_renorm;
    est.lambda_max = log_growth / (static_cast<double>(n_renorm * renorm_steps) * config.dt);
    if (est.lambda_max > 0.0) est.lyapunov_time = 1.0 / est.lambda_max;
    return est;
}

double window_average(const LorenzParams& params, const LorenzState& ic, std::size_t n_steps, double dt,
                      const ObjectiveSpec& objective)
{
    objective.validate(3);
    const auto c = static_cast<Eigen::Index>(objective.component);
    if (n_steps == 0) return ic.vec()[c];
    // The running integral rides along as a fourth RK4 component.
    using Vec4 = Eigen::Vector4d;
    auto rhs = [&](const Vec4& u) -> Vec4 {
        Vec4 d;
        d.head<3>() = lorenz_rhs(Vec3(u.head<3>()), params);
        d[3] = u[c];
        return d;
    };
    Vec4 u;
    u << ic.vec(), 0.0;
    for (std::size_t i = 0; i < n_steps; ++i) u = rk4_step(rhs, u, dt, i);
    return u[3] / (dt * static_cast<double>(n_steps));
}

TrueAdjointResult true_window_adjoint(const LorenzParams& params, const LorenzState& ic, double window,
                                      const ObjectiveSpec& objective, const TrueSensitivityOptions& options)
{
    objective.validate(3);
    if (!(window > 0.0)) throw config_error("true_window_sensitivity: window must be positive");
    const double dt = options.dt;
    const std::size_t n = steps_for(window, dt);

    TrueAdjointResult result;
    result.sensitivity.method = GradientMethod::adjoint;
    result.sensitivity.window_steps = n;
    result.sensitivity.djdp = Vec::Zero(3);
    result.adjoint.assign(n + 1, Vec3::Zero());
    if (n == 0) return result;

    const Trajectory fwd = simulate(params, ic, {dt, n, 0});
    const double horizon = dt * static_cast<double>(n);
    Vec3 source = Vec3::Zero();
    source[static_cast<Eigen::Index>(objective.component)] = 1.0 / horizon;

    // Reversed time: d(q+)/dtau = J^T q+ + dJ/dx / T, dG/dtau = (df/dp)^T q+.
    auto rhs = [&](const Vec6& u, const Vec3& x) -> Vec6 {
        Vec6 d;
        d.head<3>() = jacobian_at(x, params).transpose() * u.head<3>() + source;
        d.tail<3>() = param_grad_at(x).transpose() * u.head<3>();
        return d;
    };

    Vec6 u = Vec6::Zero();
    for (std::size_t k = n; k > 0; --k) {
        const Vec3& x_hi = fwd.states[k].vec();
        const Vec3& x_lo = fwd.states[k - 1].vec();
        const Vec3 x_mid = 0.5 * (x_hi + x_lo) + (dt / 8.0) * (lorenz_rhs(x_lo, params) - lorenz_rhs(x_hi, params));
        const Vec6 k1 = rhs(u, x_hi);
        const Vec6 k2 = rhs(u + 0.5 * dt * k1, x_mid);
        const Vec6 k3 = rhs(u + 0.5 * dt * k2, x_mid);
        const Vec6 k4 = rhs(u + dt * k3, x_lo);
        u += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        const double qmax = u.head<3>().cwiseAbs().maxCoeff();
        if (!u.allFinite() || qmax > options.divergence_cap)
            throw diverged_error("true_window_sensitivity: adjoint diverged", k - 1, fwd.time(k - 1));
        result.adjoint[k - 1] = u.head<3>();
    }
    result.sensitivity.djdp = u.tail<3>();
    return result;
}

SensitivityVector true_window_sensitivity(const LorenzParams& params, const LorenzState& ic, double window,
                                          const ObjectiveSpec& objective, const TrueSensitivityOptions& options)
{
    return true_window_adjoint(params, ic, window, objective, options).sensitivity;
}

void write_trajectory_csv(std::ostream& os, const Trajectory& traj)
{
    CsvWriter w(os);
    w.header({"t", "x", "y", "z"});
    for (std::size_t i = 0; i < traj.states.size(); ++i) {
        const auto& s = traj.states[i];
        w << traj.time(i) << s.x() << s.y() << s.z();
        w.end_row();
    }
}

void write_trajectory_csv(const std::string& path, const Trajectory& traj)
{
    auto os = open_output(path);
    write_trajectory_csv(os, traj);
}

}  // namespace pesn
