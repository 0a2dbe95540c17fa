#include "pesn/adjoint.hpp"

#include <cmath>

namespace pesn {

namespace {

constexpr double tanh_tolerance = 1e-8;

/// 1 - r~^2 for one step, validated against the tanh range.
Vec tanh_derivative(const Esn& model, const ReservoirState& r_i, const ReservoirState& r_ip1)
{
    if (r_i.size() != r_ip1.size() || static_cast<std::size_t>(r_i.size()) != model.n_reservoir())
        throw shape_error("adjoint: reservoir states have wrong length");
    const double a = model.hyper.alpha;
    const Vec tilde = (r_ip1 - (1.0 - a) * r_i) / a;
    if ((tilde.cwiseAbs().array() > 1.0 + tanh_tolerance).any())
        throw inconsistent_trajectory_error("adjoint: consecutive states are not related by a tanh update");
    return (1.0 - tilde.array().square()).matrix();
}

// The sweeps run in extended precision: both are exact evaluations of the same
// chain rule, and double rounding alone breaks their agreement on small components.
using Real = long double;
using RVec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
using RMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic>;

/// Matrix-free products with one step's Jacobian and parameter derivative.
class StepLinearisation {
public:
    explicit StepLinearisation(const Esn& model)
        : m_(model),
          w_(model.mats.w.cast<Real>()),
          w_in_y_(model.mats.w_in_y.cast<Real>()),
          w_in_p_(model.mats.w_in_p.cast<Real>()),
          w_out_(model.w_out().cast<Real>()),
          sigma_p_(model.hyper.sigma_p.cast<Real>()),
          alpha_(model.hyper.alpha)
    {
    }

    void at(const ReservoirState& r_i, const ReservoirState& r_ip1)
    {
        d_ = tanh_derivative(m_, r_i, r_ip1).cast<Real>();
    }

    /// J v
    RVec apply(const RVec& v) const
    {
        RVec coupled = w_ * v;
        coupled.noalias() += w_in_y_ * (w_out_ * v);
        return (1 - alpha_) * v + alpha_ * d_.cwiseProduct(coupled);
    }

    /// J^T q
    RVec apply_transpose(const RVec& q) const
    {
        const RVec dq = d_.cwiseProduct(q);
        RVec out = w_.transpose() * dq;
        out.noalias() += w_out_.transpose() * (w_in_y_.transpose() * dq);
        return (1 - alpha_) * q + alpha_ * out;
    }

    /// dr(i+1)/dp
    RMat param_grad() const { return alpha_ * d_.asDiagonal() * w_in_p_ * sigma_p_.asDiagonal(); }

    /// (dr(i+1)/dp)^T q
    RVec param_grad_transpose(const RVec& q) const
    {
        return sigma_p_.cwiseProduct(w_in_p_.transpose() * (alpha_ * d_.cwiseProduct(q)));
    }

private:
    const Esn& m_;
    Eigen::SparseMatrix<Real, Eigen::RowMajor> w_;
    RMat w_in_y_, w_in_p_, w_out_;
    RVec sigma_p_;
    Real alpha_;
    RVec d_;
};

bool exceeds(const RVec& v, double cap)
{
    return !v.allFinite() || v.cwiseAbs().maxCoeff() > static_cast<Real>(cap);
}

}  // namespace

Mat esn_step_jacobian(const Esn& model, const ReservoirState& r_i, const ReservoirState& r_ip1)
{
    const Vec d = tanh_derivative(model, r_i, r_ip1);
    const double a = model.hyper.alpha;
    Mat coupled = model.mats.w_in_y * model.w_out();
    coupled += model.mats.w;
    Mat j = a * d.asDiagonal() * coupled;
    j.diagonal().array() += 1.0 - a;
    return j;
}

Mat esn_param_grad(const Esn& model, const ReservoirState& r_i, const ReservoirState& r_ip1)
{
    const Vec d = tanh_derivative(model, r_i, r_ip1);
    return model.hyper.alpha * d.asDiagonal() * model.mats.w_in_p * model.hyper.sigma_p.asDiagonal();
}

Vec objective_gradient(const Esn& model, const ObjectiveSpec& objective)
{
    objective.validate(model.n_outputs());
    const auto c = static_cast<Eigen::Index>(objective.component);
    return model.norm.scale[c] * model.w_out().row(c).transpose();
}

AdjointResult adjoint_sweep(const Esn& model, const ReservoirTrajectory& traj, const ObjectiveSpec& objective,
                            const AdjointOptions& options)
{
    const std::size_t n = traj.n_steps();
    if (n == 0) throw config_error("adjoint_sweep: trajectory needs at least one step");
    const RVec source = objective_gradient(model, objective).cast<Real>() / static_cast<Real>(n);

    AdjointResult out;
    out.sensitivity.method = GradientMethod::adjoint;
    out.sensitivity.window_steps = n;
    out.adjoint_norms.resize(static_cast<Eigen::Index>(n));
    if (options.keep_adjoint) out.adjoint.resize(source.size(), static_cast<Eigen::Index>(n));

    StepLinearisation lin(model);
    RVec grad = RVec::Zero(static_cast<Eigen::Index>(model.n_params()));
    RVec q = source;
    for (std::size_t i = n;; --i) {
        const auto col = static_cast<Eigen::Index>(i);
        if (exceeds(q, options.divergence_cap))
            throw diverged_error("adjoint_sweep: adjoint diverged", i, static_cast<double>(i));
        out.adjoint_norms[col - 1] = static_cast<double>(q.norm());
        if (options.keep_adjoint) out.adjoint.col(col - 1) = q.cast<double>();
        // dr(i)/dp from (r(i-1), r(i))
        lin.at(traj.states.col(col - 1), traj.states.col(col));
        grad += lin.param_grad_transpose(q);
        if (i == 1) break;
        // q(i-1) = c/N + J(i-1)^T q(i), J(i-1) = dr(i)/dr(i-1): same linearisation point.
        q = source + lin.apply_transpose(q);
    }
    out.sensitivity.djdp = grad.cast<double>();
    return out;
}

SensitivityVector tangent_sweep(const Esn& model, const ReservoirTrajectory& traj, const ObjectiveSpec& objective,
                                double divergence_cap)
{
    const std::size_t n = traj.n_steps();
    if (n == 0) throw config_error("tangent_sweep: trajectory needs at least one step");
    const RVec c = objective_gradient(model, objective).cast<Real>();
    const auto n_p = static_cast<Eigen::Index>(model.n_params());

    StepLinearisation lin(model);
    RMat q = RMat::Zero(c.size(), n_p);
    RVec sum = RVec::Zero(n_p);
    for (std::size_t i = 0; i < n; ++i) {
        const auto col = static_cast<Eigen::Index>(i);
        lin.at(traj.states.col(col), traj.states.col(col + 1));
        RMat next = lin.param_grad();
        for (Eigen::Index j = 0; j < n_p; ++j) next.col(j) += lin.apply(q.col(j));
        q = std::move(next);
        if (!q.allFinite() || q.cwiseAbs().maxCoeff() > static_cast<Real>(divergence_cap))
            throw diverged_error("tangent_sweep: tangent diverged", i + 1, static_cast<double>(i + 1));
        sum += q.transpose() * c;
    }
    return {(sum / static_cast<Real>(n)).cast<double>(), n, GradientMethod::tangent};
}

double closed_loop_objective(const Esn& model, const ReservoirState& r0, const Vec& regime, std::size_t n_steps,
                             const ObjectiveSpec& objective)
{
    objective.validate(model.n_outputs());
    if (n_steps == 0) throw config_error("closed_loop_objective: empty window");
    const Series y = closed_loop(model, r0, n_steps, regime).outputs;
    return y.row(static_cast<Eigen::Index>(objective.component)).mean();
}

SensitivityVector finite_diff_sensitivity(const Esn& model, const ReservoirState& r0, const Vec& regime,
                                          std::size_t n_steps, const ObjectiveSpec& objective, double eps)
{
    if (!(eps > 0.0)) throw config_error("finite_diff_sensitivity: eps must be positive");
    Vec grad(regime.size());
    for (Eigen::Index j = 0; j < regime.size(); ++j) {
        Vec plus = regime, minus = regime;
        plus[j] += eps;
        minus[j] -= eps;
        grad[j] = (closed_loop_objective(model, r0, plus, n_steps, objective)
                   - closed_loop_objective(model, r0, minus, n_steps, objective))
                  / (2.0 * eps);
    }
    return {grad, n_steps, GradientMethod::finite_difference};
}

}  // namespace pesn
