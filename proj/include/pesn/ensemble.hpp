#pragma once

// Climate sensitivity from ensembles of short-window adjoint gradients, parameter
// sweeps of the long-time average, and polynomial-fit direct estimates.

#include "pesn/adjoint.hpp"
#include "pesn/dynsys.hpp"
#include "pesn/esn.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pesn {

enum class SystemKind { true_system, esn };

std::string_view to_string(SystemKind kind) noexcept;
SystemKind system_kind_from_string(std::string_view name);

/// How an ESN member obtains its initial reservoir state.
/// true_washout: teacher-forced on the true trajectory segment ending at the member's
/// initial condition. self_generated: states sampled from one long closed-loop run.
enum class MemberInit { true_washout, self_generated };

std::string_view to_string(MemberInit init) noexcept;
MemberInit member_init_from_string(std::string_view name);

struct EnsembleConfig {
    std::size_t n_members = 2000;
    double window_lt = 0.5;
    std::uint64_t seed = 0;
    SystemKind system = SystemKind::true_system;
    /// Lyapunov time of the regime; sets the window length in time units.
    double lyapunov_time = 0.0;
    /// Every member reuses member 0's seed (duplicated members).
    bool identical_member_seeds = false;
    MemberInit member_init = MemberInit::true_washout;
    /// An estimate with a larger diverged fraction is reported as unreliable.
    double max_diverged_fraction = 0.2;
    double dt = 0.01;
    /// Time units integrated from the random start before a member's initial condition.
    double transient_time = default_transient_time;
    /// Length of the true segment ending at the initial condition, used for ESN washout.
    double washout_time = 4.0;
    /// Self-generated members: closed-loop spin-up, then one state every spacing_lt.
    double spin_up_lt = 20.0;
    double spacing_lt = 1.0;
    double divergence_cap = 1e8;

    void validate() const;
    /// Window length in steps, at least one.
    std::size_t window_steps() const;
};

struct EnsembleMember {
    std::size_t index = 0;
    Vec3 initial_condition = Vec3::Zero();
    SensitivityVector sensitivity;  ///< djdp is NaN for diverged members
    bool diverged = false;
};

struct SensitivityEstimate {
    Vec mean;
    Vec stderr_;
    std::vector<EnsembleMember> members;
    std::size_t n_diverged = 0;

    std::size_t n_used() const noexcept { return members.size() - n_diverged; }
};

/// Raised when too many members diverged; the partial estimate is attached.
class unreliable_estimate_error : public error {
public:
    unreliable_estimate_error(const std::string& what, SensitivityEstimate partial)
        : error(what), partial_(std::move(partial))
    {
    }
    const SensitivityEstimate& partial() const noexcept { return partial_; }

private:
    SensitivityEstimate partial_;
};

/// Seed of member k under `config`.
std::uint64_t member_seed(const EnsembleConfig& config, std::size_t k);

/// True trajectory of `washout_steps + 1` states ending at member k's initial condition.
Trajectory member_segment(const LorenzParams& params, const EnsembleConfig& config, std::size_t k);

/// Ensemble mean and standard error of window-averaged objective gradients. The ESN
/// branch requires `model`.
SensitivityEstimate ensemble_adjoint(const LorenzParams& regime, const EnsembleConfig& config,
                                     const ObjectiveSpec& objective, const Esn* model = nullptr);

/// Mean and standard error over the non-diverged members, in member order.
void summarise(SensitivityEstimate& estimate);

/// Polynomial in the centred, scaled variable t = (x - centre) / scale.
struct Polynomial {
    double centre = 0.0;
    double scale = 1.0;
    Vec coefficients;  ///< lowest order first

    double value(double x) const;
    double derivative(double x) const;
};

struct SweepResult {
    std::size_t param_index = 0;
    std::vector<double> grid;
    std::vector<double> objective;  ///< NaN where flagged
    std::vector<bool> valid;
    std::optional<Polynomial> fit;
};

struct SweepOptions {
    SystemKind system = SystemKind::true_system;
    double duration_lt = 500.0;
    /// Per grid point; computed with the default estimator when empty.
    std::vector<double> lyapunov_times;
    std::uint64_t seed = 0;
    double dt = 0.01;
    double transient_time = default_transient_time;
    double washout_time = 4.0;
    ObjectiveSpec objective;
    const Esn* model = nullptr;
};

/// Long-run average of the objective at each grid value of parameter `param_index`,
/// the other parameters fixed at `base`. Diverged ESN points are flagged, not fatal.
SweepResult sweep_objective(const LorenzParams& base, std::size_t param_index, const std::vector<double>& grid,
                            const SweepOptions& options);

struct DirectEstimate {
    Polynomial fit;
    std::vector<double> derivative;  ///< at every grid value
};

/// Least-squares polynomial of the given degree through the valid sweep points,
/// differentiated analytically on the grid.
DirectEstimate polyfit_direct(const SweepResult& sweep, std::size_t degree = 2);

struct ComparisonRow {
    Vec regime;
    std::size_t param_index = 0;
    std::string method;
    double value = 0.0;
    double stderr_ = 0.0;  ///< NaN when not applicable
    double diff = 0.0;      ///< value - true ensemble mean
    double rel_diff = 0.0;  ///< diff / |true ensemble mean|
};

/// Rows for every parameter of the true and (when given) ESN ensembles, and for the
/// polynomial fit on its swept parameter only; signed differences are against the true mean.
std::vector<ComparisonRow> compare_estimates(const Vec& regime, const SensitivityEstimate& true_estimate,
                                             const SensitivityEstimate* esn_estimate = nullptr,
                                             std::optional<std::pair<std::size_t, double>> polyfit_slope = {});

void write_members_csv(std::ostream& os, const Vec& regime, SystemKind system, const SensitivityEstimate& estimate,
                       bool header = true);
/// `status` is "ok" or the reason the estimate should not be trusted.
void write_summary_csv(std::ostream& os, const Vec& regime, SystemKind system, const EnsembleConfig& config,
                       const SensitivityEstimate& estimate, std::string_view status = "ok", bool header = true);
void write_comparison_csv(std::ostream& os, const std::vector<ComparisonRow>& rows, bool header = true);

}  // namespace pesn
