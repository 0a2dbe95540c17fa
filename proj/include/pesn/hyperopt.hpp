#pragma once

// Hyperparameter search for the parameter-aware ESN, scored by short closed-loop
// forecasts on regimes held out of training.

#include "pesn/esn.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace pesn {

struct Bounds {
    double lo = 0.0;
    double hi = 1.0;
};

/// Log-uniform bounds for rho, sigma_in, lambda and every sigma_p component; uniform
/// bounds for alpha and every k_p component. Fields not searched (N_r, N_conn,
/// normalisation, layout, seed) are taken from `base`.
struct SearchSpace {
    EsnHyperParams base;
    Bounds rho{0.02, 1.5};
    Bounds sigma_in{0.01, 2.0};
    Bounds alpha{0.1, 1.0};
    Bounds lambda{1e-10, 1e-3};
    Bounds sigma_p{1e-3, 1.0};
    Bounds k_p{-100.0, 100.0};
    std::size_t budget = 50;
    std::size_t n_network_realisations = 2;
    /// Extra candidates drawn around the incumbent after the random stage; 0 disables.
    std::size_t refine_budget = 0;
    /// Refinement candidates proposed from one incumbent before it is re-selected.
    std::size_t refine_batch = 4;
    /// Gaussian width of refinement proposals as a fraction of each (transformed) range.
    double refine_width = 0.1;

    void validate() const;
};

/// Held-out regime with the Lyapunov time that sets its forecast horizon.
struct ValidationCase {
    RegimeDataset data;
    double lyapunov_time = 1.0;
};

struct ValidationOptions {
    double horizon_lt = 2.0;
    /// Score assigned to a rollout that blows up or leaves the data envelope.
    double diverged_penalty = 10.0;
    /// Envelope half-width in training standard deviations.
    double divergence_bound = 20.0;
};

struct ValidationReport {
    std::size_t index = 0;
    EsnHyperParams candidate;
    /// errors(k, j): realisation k, validation regime j.
    Mat errors;
    double score = 0.0;
    bool feasible = true;
    std::size_t n_diverged = 0;
    std::string failure;
};

/// Network seed of realisation k: the candidate's own seed for k = 0, derived otherwise.
std::uint64_t realisation_seed(std::uint64_t seed, std::size_t k);

/// Normalised mean-squared error of one closed-loop forecast: washout on the first
/// `washout_steps` columns of `truth`, then compare the next `horizon_steps` samples.
/// Returns the diverged penalty for blown-up or out-of-envelope rollouts.
double forecast_error(const Esn& model, const Vec& regime, const Series& truth, std::size_t washout_steps,
                      std::size_t horizon_steps, const ValidationOptions& options, bool* diverged = nullptr);

/// Mean forecast error of a trained model on each validation case, over consecutive
/// (washout, horizon) windows tiled through the washout and training series.
/// `n_diverged`, when given, is incremented once per penalised window.
Vec validation_errors(const Esn& model, const std::vector<ValidationCase>& val_data,
                      const ValidationOptions& options = {}, std::size_t* n_diverged = nullptr);

/// Trains `n_realisations` networks and scores each on every validation case. Training
/// failures mark the report infeasible instead of throwing.
ValidationReport validation_score(const EsnHyperParams& candidate, const std::vector<RegimeDataset>& train_data,
                                  const std::vector<ValidationCase>& val_data, std::size_t n_realisations = 2,
                                  const ValidationOptions& options = {});

struct SearchResult {
    EsnHyperParams best;
    ValidationReport best_report;
    std::vector<ValidationReport> history;
};

class search_failed_error : public error {
public:
    search_failed_error(const std::string& what, std::vector<ValidationReport> history)
        : error(what), history_(std::move(history))
    {
    }
    const std::vector<ValidationReport>& history() const noexcept { return history_; }

private:
    std::vector<ValidationReport> history_;
};

/// Candidate k of the random stage, a pure function of (space, seed, k).
EsnHyperParams draw_candidate(const SearchSpace& space, std::uint64_t seed, std::size_t k);

/// Seeded random search, optionally followed by local refinement. Every candidate
/// shares the network seed derived from `seed`, so scores compare hyperparameters on
/// identical random matrices. The winner is the lowest feasible score, ties going to
/// the lower index.
SearchResult search(const SearchSpace& space, const std::vector<RegimeDataset>& train_data,
                    const std::vector<ValidationCase>& val_data, std::uint64_t seed,
                    const ValidationOptions& options = {});

/// One row per (candidate, realisation, regime) plus one aggregate row per candidate.
void write_history_csv(std::ostream& os, const std::vector<ValidationReport>& history,
                       const std::vector<ValidationCase>& val_data);

}  // namespace pesn
