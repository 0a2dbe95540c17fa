#pragma once

// Gradients of a window-averaged readout objective through the autonomous
// (closed-loop) reservoir map, by discrete adjoint, forward tangent and finite
// differences.
//
// With r~(i) = (r(i+1) - (1 - alpha) r(i)) / alpha recovered from consecutive states,
//
//     dr(i+1)/dr(i) = (1 - alpha) I + alpha diag(1 - r~^2) (W_in^y W_out + W)
//     dr(i+1)/dp    = alpha diag(1 - r~^2) W_in^p diag(sigma_p)
//
// and for J = (1/N) sum_{i=1..N} c^T r(i) the adjoint recursion runs
//
//     q(N) = c / N,   q(i) = c / N + (dr(i+1)/dr(i))^T q(i+1),
//     dJ/dp = sum_{i=1..N} q(i)^T dr(i)/dp.
//
// The initial reservoir state is held fixed, so dr(0)/dp = 0.

#include "pesn/esn.hpp"
#include "pesn/sensitivity.hpp"

namespace pesn {

/// Raised when a stored trajectory cannot have come from the tanh update.
class inconsistent_trajectory_error : public invalid_state_error {
public:
    using invalid_state_error::invalid_state_error;
};

/// Dense closed-loop step Jacobian dr(i+1)/dr(i).
Mat esn_step_jacobian(const Esn& model, const ReservoirState& r_i, const ReservoirState& r_ip1);

/// Parameter derivative dr(i+1)/dp, N_r x N_p.
Mat esn_param_grad(const Esn& model, const ReservoirState& r_i, const ReservoirState& r_ip1);

/// dJ~/dr for the physical objective component: scale_c * row c of W_out.
Vec objective_gradient(const Esn& model, const ObjectiveSpec& objective);

struct AdjointOptions {
    /// Max-norm cap on q before the sweep is declared diverged.
    double divergence_cap = 1e8;
    /// Keep every q(i); otherwise only their norms are recorded.
    bool keep_adjoint = false;
};

struct AdjointResult {
    SensitivityVector sensitivity;
    Vec adjoint_norms;  ///< ||q(i)||_2 for i = 1..N (index i-1)
    Mat adjoint;        ///< N_r x N, columns q(1) .. q(N), when requested
};

AdjointResult adjoint_sweep(const Esn& model, const ReservoirTrajectory& traj, const ObjectiveSpec& objective,
                            const AdjointOptions& options = {});

/// Forward propagation of Q(i) = dr(i)/dp from Q(0) = 0.
SensitivityVector tangent_sweep(const Esn& model, const ReservoirTrajectory& traj, const ObjectiveSpec& objective,
                                double divergence_cap = 1e8);

/// (1/N) sum_{i=1..N} y_c(i) in physical units for a closed-loop run from r0.
double closed_loop_objective(const Esn& model, const ReservoirState& r0, const Vec& regime, std::size_t n_steps,
                             const ObjectiveSpec& objective);

/// Central differences of closed_loop_objective with p +- eps e_j from the same r0.
SensitivityVector finite_diff_sensitivity(const Esn& model, const ReservoirState& r0, const Vec& regime,
                                          std::size_t n_steps, const ObjectiveSpec& objective, double eps);

}  // namespace pesn
