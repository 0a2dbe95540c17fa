#pragma once

// Objective selection and gradient containers shared by the true-system and
// reservoir sensitivity routines.

#include "pesn/core.hpp"

#include <cstddef>
#include <string_view>

namespace pesn {

/// Time-averaged objective J = mean over the window of one output component.
struct ObjectiveSpec {
    std::size_t component = 2;  ///< 0 = x, 1 = y, 2 = z

    void validate(std::size_t n_outputs) const
    {
        if (component >= n_outputs) throw shape_error("objective component out of range");
    }
};

enum class GradientMethod { adjoint, tangent, finite_difference };

constexpr std::string_view to_string(GradientMethod m) noexcept
{
    switch (m) {
    case GradientMethod::adjoint: return "adjoint";
    case GradientMethod::tangent: return "tangent";
    case GradientMethod::finite_difference: return "finite-difference";
    }
    return "unknown";
}

/// dJ/dp over one window of `window_steps` steps.
struct SensitivityVector {
    Vec djdp;
    std::size_t window_steps = 0;
    GradientMethod method = GradientMethod::adjoint;
};

}  // namespace pesn
