#pragma once

// Lorenz 63 ground truth: vector field, Jacobians, RK4 time-marching, attractor
// sampling, leading Lyapunov exponent and the continuous adjoint of a
// window-averaged objective.

#include "pesn/core.hpp"
#include "pesn/sensitivity.hpp"

#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

namespace pesn {

/// Physical parameters (s, r, b). s and b must be positive, all finite.
class LorenzParams {
public:
    LorenzParams(double s, double r, double b);

    double s() const noexcept { return s_; }
    double r() const noexcept { return r_; }
    double b() const noexcept { return b_; }

    /// (s, r, b) as a parameter vector.
    Vec3 as_vector() const noexcept { return {s_, r_, b_}; }
    static LorenzParams from_vector(const Vec& p);

    /// Copy with component `index` (0 = s, 1 = r, 2 = b) replaced.
    LorenzParams with(std::size_t index, double value) const;

    friend bool operator==(const LorenzParams&, const LorenzParams&) = default;

private:
    double s_, r_, b_;
};

/// Reference regime (s, r, b) = (10, 28, 8/3).
inline LorenzParams reference_regime() { return {10.0, 28.0, 8.0 / 3.0}; }

class LorenzState {
public:
    LorenzState(double x, double y, double z);
    explicit LorenzState(const Vec3& v);

    double x() const noexcept { return v_[0]; }
    double y() const noexcept { return v_[1]; }
    double z() const noexcept { return v_[2]; }
    const Vec3& vec() const noexcept { return v_; }

    friend bool operator==(const LorenzState& a, const LorenzState& b) { return a.v_ == b.v_; }

private:
    Vec3 v_;
};

struct IntegrationConfig {
    double dt = 0.01;
    std::size_t n_steps = 1;
    std::size_t transient_steps = 0;

    void validate() const;
};

/// Default transient discarded before sampling or statistics, in time units.
inline constexpr double default_transient_time = 20.0;

struct Trajectory {
    double dt = 0.01;
    double t0 = 0.0;
    std::vector<LorenzState> states;

    std::size_t n_steps() const noexcept { return states.empty() ? 0 : states.size() - 1; }
    double time(std::size_t i) const noexcept { return t0 + dt * static_cast<double>(i); }
    /// States as a 3 x (n_steps+1) series.
    Series as_series() const;
};

struct LyapunovEstimate {
    double lambda_max = 0.0;
    double lyapunov_time = std::numeric_limits<double>::infinity();
    std::size_t n_renorm = 0;

    /// Positive leading exponent. Periodic or fixed-point regimes report a value near
    /// or below zero; `threshold` separates numerical noise from chaos.
    bool chaotic(double threshold = 0.0) const noexcept { return lambda_max > threshold; }
};

Vec3 lorenz_rhs(const Vec3& state, const LorenzParams& params);
Vec3 lorenz_rhs(const LorenzState& state, const LorenzParams& params);

/// d f / d(x, y, z).
Mat3 lorenz_jacobian(const LorenzState& state, const LorenzParams& params);

/// d f / d(s, r, b).
Mat3 lorenz_param_grad(const LorenzState& state);

/// One classical fourth-order Runge-Kutta step of x' = rhs(x).
/// Throws blowup_error carrying `step_index` if any stage is non-finite.
template <typename State, typename Rhs>
State rk4_step(const Rhs& rhs, const State& x, double dt, std::size_t step_index = 0)
{
    if (!(dt > 0.0)) throw invalid_state_error("rk4_step: dt must be positive");
    const State k1 = rhs(x);
    const State k2 = rhs(State(x + 0.5 * dt * k1));
    const State k3 = rhs(State(x + 0.5 * dt * k2));
    const State k4 = rhs(State(x + dt * k3));
    if (!k1.allFinite() || !k2.allFinite() || !k3.allFinite() || !k4.allFinite())
        throw blowup_error("rk4_step: non-finite stage", step_index);
    State next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!next.allFinite()) throw blowup_error("rk4_step: non-finite state", step_index);
    return next;
}

/// Integrates `transient_steps` unrecorded steps followed by `n_steps` recorded ones.
/// n_steps = 0 yields the (post-transient) initial condition alone.
Trajectory simulate(const LorenzParams& params, const LorenzState& ic, const IntegrationConfig& config);

/// Pseudo-random initial condition in the attractor's basin, drawn from `seed`.
LorenzState random_initial_condition(const LorenzParams& params, std::uint64_t seed);

/// States of one long post-transient trajectory spaced at least `spacing` time units apart.
std::vector<LorenzState> sample_attractor(const LorenzParams& params, std::size_t n_samples,
                                          double spacing, std::uint64_t seed, double dt = 0.01,
                                          double transient = default_transient_time);

/// Benettin estimate of the leading exponent. `config.n_steps` is the averaging horizon
/// and the tangent vector is renormalised every `renorm_interval` time units.
LyapunovEstimate lyapunov_time(const LorenzParams& params, const IntegrationConfig& config,
                               std::uint64_t seed, double renorm_interval = 1.0);

/// Default estimator settings: dt = 0.01, 1000 time units after a 20-unit transient.
IntegrationConfig default_lyapunov_config();

/// Time average of one state component over `n_steps` RK4 steps from `ic`, with the
/// integral carried as an extra RK4 component.
double window_average(const LorenzParams& params, const LorenzState& ic, std::size_t n_steps,
                      double dt, const ObjectiveSpec& objective);

struct TrueSensitivityOptions {
    double dt = 0.01;
    /// Max-norm cap on the adjoint variable before the sweep is declared diverged.
    double divergence_cap = 1e8;
};

struct TrueAdjointResult {
    SensitivityVector sensitivity;
    std::vector<Vec3> adjoint;  ///< q+(t_k), k = 0..N
};

/// Gradient of the window average of `objective` with respect to (s, r, b) from the
/// continuous adjoint, integrated backward with RK4 along the stored forward trajectory.
/// Half-step states are rebuilt by cubic Hermite interpolation from the stored states
/// and their vector-field values.
TrueAdjointResult true_window_adjoint(const LorenzParams& params, const LorenzState& ic,
                                      double window, const ObjectiveSpec& objective,
                                      const TrueSensitivityOptions& options = {});

SensitivityVector true_window_sensitivity(const LorenzParams& params, const LorenzState& ic,
                                          double window, const ObjectiveSpec& objective,
                                          const TrueSensitivityOptions& options = {});

/// CSV with header `t,x,y,z`, shortest round-trip decimal representation.
void write_trajectory_csv(std::ostream& os, const Trajectory& traj);
void write_trajectory_csv(const std::string& path, const Trajectory& traj);

}  // namespace pesn
