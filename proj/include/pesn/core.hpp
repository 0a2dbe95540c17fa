#pragma once

// Shared numeric aliases and the library's exception hierarchy.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pesn {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using SparseMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Time series with one column per time sample and one row per output component.
using Series = Mat;

/// Base of every error raised by the library.
class error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// NaN/Inf or otherwise out-of-domain state or parameter.
class invalid_state_error : public error {
public:
    using error::error;
};

/// Dimension mismatch between operands.
class shape_error : public error {
public:
    using error::error;
};

/// Non-finite value produced while time-stepping.
class blowup_error : public error {
public:
    blowup_error(const std::string& what, std::size_t step)
      : error(what + " (step " + std::to_string(step) + ")")
      , step_(step)
    {
    }
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

/// A linearised (tangent or adjoint) sweep or an autonomous rollout left its admissible range.
class diverged_error : public error {
public:
    diverged_error(const std::string& what, std::size_t step, double time)
      : error(what + " (step " + std::to_string(step) + ", t=" + std::to_string(time) + ")")
      , step_(step)
      , time_(time)
    {
    }
    std::size_t step() const noexcept { return step_; }
    double time() const noexcept { return time_; }

private:
    std::size_t step_;
    double time_;
};

class not_trained_error : public error {
public:
    using error::error;
};

/// Normal equations of the readout solve are singular without regularisation.
class ill_conditioned_error : public error {
public:
    using error::error;
};

class construction_error : public error {
public:
    using error::error;
};

class config_error : public error {
public:
    using error::error;
};

/// Throws invalid_state_error when any entry of `m` is NaN or infinite.
template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* what)
{
    if (!m.allFinite()) throw invalid_state_error(std::string(what) + ": non-finite value");
}

}  // namespace pesn
