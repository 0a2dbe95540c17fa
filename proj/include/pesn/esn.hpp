#pragma once

// Parameter-aware echo state network.
//
// The reservoir is driven by [y; diag(sigma_p)(p - k_p)] through a sparse random
// input matrix and a sparse random state matrix of prescribed spectral radius:
//
//     r(i+1) = (1 - alpha) r(i) + alpha tanh(W_in [y(i); sigma_p * (p - k_p)] + W r(i))
//     y_hat(i+1) = W_out r(i+1)
//
// Only W_out is trained (ridge regression on teacher-forced reservoir states).
// esn_step() and readout() act in network units; everything that accepts or returns
// a Series works in physical units and applies the stored Normalization.

#include "pesn/core.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace pesn {

/// standardize: (y - mean) / std; scale: y / std; none: identity.
enum class InputNormalization { standardize, scale, none };

std::string_view to_string(InputNormalization mode) noexcept;
/// Throws config_error for unknown names.
InputNormalization input_normalization_from_string(std::string_view name);

/// Sparsity pattern of W_in = [W_in^y W_in^p].
/// single: one nonzero per row, column uniform over all N_y + N_p columns.
/// per_block: one nonzero per row in each block, so every unit sees one output
/// component and one (shifted, scaled) parameter.
enum class InputLayout { single, per_block };

std::string_view to_string(InputLayout layout) noexcept;
InputLayout input_layout_from_string(std::string_view name);

struct EsnHyperParams {
    std::size_t n_reservoir = 300;
    std::size_t n_conn = 3;
    double rho = 0.2201;
    double sigma_in = 0.0679;
    double alpha = 0.8853;
    double lambda = 1e-10;
    Vec sigma_p = Vec3(0.0028, 0.0015, 0.0393);
    Vec k_p = Vec3(68.73, 84.81, 74.46);
    std::uint64_t seed = 0;
    /// How physical outputs are mapped to network units.
    InputNormalization normalization = InputNormalization::standardize;
    InputLayout input_layout = InputLayout::per_block;

    void validate() const;
};

/// The optimum reported for a 1200-unit reservoir.
EsnHyperParams full_scale_hyperparams();

struct ReservoirMatrices {
    Mat w_in_y;                ///< N_r x N_y
    Mat w_in_p;                ///< N_r x N_p
    SparseMat w;               ///< N_r x N_r, n_conn nonzeros per row
    std::optional<Mat> w_out;  ///< N_y x N_r once trained
};

/// Affine map between physical outputs and network units: y_net = (y - mean) / scale.
struct Normalization {
    Vec mean;
    Vec scale;

    static Normalization identity(std::size_t n);
    Vec to_network(const Vec& y) const { return (y - mean).cwiseQuotient(scale); }
    Vec to_physical(const Vec& y) const { return mean + scale.cwiseProduct(y); }
    Series to_network(const Series& y) const;
    Series to_physical(const Series& y) const;
};

struct Esn {
    EsnHyperParams hyper;
    ReservoirMatrices mats;
    Normalization norm;
    /// Per-component mean and standard deviation of the training data (physical units).
    Vec data_mean;
    Vec data_std;

    std::size_t n_reservoir() const noexcept { return static_cast<std::size_t>(mats.w.rows()); }
    std::size_t n_outputs() const noexcept { return static_cast<std::size_t>(mats.w_in_y.cols()); }
    std::size_t n_params() const noexcept { return static_cast<std::size_t>(mats.w_in_p.cols()); }
    bool trained() const noexcept { return mats.w_out.has_value(); }
    /// Throws not_trained_error before training.
    const Mat& w_out() const;
};

using ReservoirState = Vec;

struct RegimeDataset {
    Vec regime;       ///< physical parameters p
    Series washout;   ///< N_y x T_w, teacher-forced before training
    Series train;     ///< N_y x T_t, consecutive to washout
    double dt = 0.01;

    void validate() const;
};

/// Closed-loop base trajectory kept for the backward adjoint sweep.
struct ReservoirTrajectory {
    Mat states;  ///< N_r x (N+1): r(0) .. r(N)
    Vec regime;

    std::size_t n_steps() const noexcept { return states.cols() > 0 ? static_cast<std::size_t>(states.cols() - 1) : 0; }
};

struct ClosedLoopResult {
    Series outputs;  ///< N_y x N physical predictions y_hat(1) .. y_hat(N)
    ReservoirTrajectory trajectory;
};

/// Sparse random W rescaled to spectral radius rho, and a sparse input matrix laid out per `input_layout`.
ReservoirMatrices build_reservoir(const EsnHyperParams& hyper, std::size_t n_y, std::size_t n_p);

/// Untrained network with identity normalisation.
Esn make_esn(const EsnHyperParams& hyper, std::size_t n_y, std::size_t n_p);

/// Largest eigenvalue magnitude from the full real Schur decomposition.
double spectral_radius(const SparseMat& w);

/// Power iteration fitting the two-term recurrence x(k+2) = a x(k+1) + b x(k), which
/// also converges when the dominant eigenvalues form a complex pair. Returns nullopt
/// when the estimate has not settled to `tol` (relative) within `max_iter` iterations.
std::optional<double> power_iteration_radius(const SparseMat& w, std::uint64_t seed, double tol = 1e-8,
                                             std::size_t max_iter = 10000);

/// [y_in; sigma_p .* (p - k_p)].
Vec augment_input(const Vec& y_in, const Vec& p, const EsnHyperParams& hyper);

/// One reservoir update with `y_in` in network units.
ReservoirState esn_step(const Esn& model, const ReservoirState& r, const Vec& y_in, const Vec& p);

/// W_out r in network units.
Vec readout(const Esn& model, const ReservoirState& r);

/// Teacher-forced run feeding y_seq (physical) column by column; returns r(1) .. r(T).
Mat open_loop(const Esn& model, const ReservoirState& r0, const Series& y_seq, const Vec& p);

/// Final state of open_loop without storing the intermediate states.
ReservoirState washout(const Esn& model, const ReservoirState& r0, const Series& y_seq, const Vec& p);

/// Autonomous run feeding back its own readout; records every reservoir state.
ClosedLoopResult closed_loop(const Esn& model, const ReservoirState& r0, std::size_t n_steps, const Vec& p);

/// Reservoir states R (N_r x M) and next-step targets Y (N_y x M, network units)
/// concatenated over all datasets, under the model's current normalisation.
struct TrainingStates {
    Mat states;
    Mat targets;
};
TrainingStates collect_training_states(const Esn& model, const std::vector<RegimeDataset>& datasets);

/// Per-component mean and standard deviation over every training series.
std::pair<Vec, Vec> training_statistics(const std::vector<RegimeDataset>& datasets);

/// Solves (R R^T + lambda I) W_out^T = R Y^T.
Mat solve_ridge(const Mat& gram, const Mat& cross, double lambda);

/// ||W_out R - Y||^2 + lambda ||W_out||^2.
double regularized_loss(const Mat& w_out, const TrainingStates& data, double lambda);

/// Fits the normalisation and the readout over all datasets.
Esn train(const Esn& model, const std::vector<RegimeDataset>& datasets);

/// Normalised forecast error ||y - y_hat|| / sqrt(<||y||^2>) stays below `threshold` for
/// the returned time, in Lyapunov times. `truth` holds washout samples followed by
/// the verification window; the full window length is returned when the threshold
/// is never crossed.
double predictability_horizon(const Esn& model, const Vec& regime, const Series& truth,
                              std::size_t washout_steps, double dt, double lyapunov_time,
                              double threshold = 0.5);

/// Mean horizon over several truth segments.
double predictability_horizon(const Esn& model, const Vec& regime, const std::vector<Series>& truths,
                              std::size_t washout_steps, double dt, double lyapunov_time,
                              double threshold = 0.5);

struct Histogram {
    double lo = 0.0;
    double hi = 0.0;
    Vec probability;  ///< per bin, sums to 1 over in-range samples
    double out_of_range = 0.0;  ///< fraction of samples outside [lo, hi)
};

struct LongTermStats {
    Vec mean;
    Vec std;
    std::vector<Histogram> histograms;
    std::size_t n_samples = 0;
};

struct StatsOptions {
    double dt = 0.01;
    double transient_time = 20.0;
    std::size_t bins = 50;
    /// Per-component histogram range; data mean +- 4 std when empty.
    std::vector<std::pair<double, double>> ranges;
    /// Closed loop is declared diverged when any output leaves data mean +- bound * std.
    double divergence_bound = 20.0;
};

/// Washout series that feeds the same physical sample `n` times.
Series repeated_sample(const Vec& y0, std::size_t n);

/// Closed-loop statistics over `duration_lt` Lyapunov times after washing out on
/// `washout_series` and discarding a transient. Throws diverged_error when the
/// rollout leaves the data envelope.
LongTermStats long_term_stats(const Esn& model, const Vec& regime, double duration_lt, double lyapunov_time,
                              const Series& washout_series, const StatsOptions& options = {});

/// Mean, std and histograms of an arbitrary physical series with the same binning rules.
LongTermStats series_stats(const Series& y, const std::vector<std::pair<double, double>>& ranges, std::size_t bins);

/// Binary archive: "PESNMDL1" magic, little-endian header (version, normalisation,
/// input layout, dimensions, seed, scalar hyperparameters), then every matrix as
/// (u64 rows, u64 cols, f64 row-major payload).
void save_model(const std::string& path, const Esn& model);
Esn load_model(const std::string& path);

/// Hyperparameters and dimensions as JSON for inspection.
std::string model_json(const Esn& model);

}  // namespace pesn
