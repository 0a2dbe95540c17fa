#pragma once

// Run configuration and the pipeline stages behind the command-line verbs. Every
// stage reads its inputs from, and writes its outputs to, one run directory.

#include "pesn/dynsys.hpp"
#include "pesn/ensemble.hpp"
#include "pesn/esn.hpp"
#include "pesn/hyperopt.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace pesn {

struct RegimeGrid {
    std::vector<double> s{8, 10, 12, 14, 16};
    std::vector<double> r{30, 35, 40, 45, 50};
    std::vector<double> b{1, 1.5, 2, 2.5, 3};

    /// Cartesian product in (s, r, b) lexicographic order.
    std::vector<LorenzParams> points() const;
    const std::vector<double>& axis(std::size_t param_index) const;
};

struct DataSettings {
    double dt = 0.01;
    double transient_time = default_transient_time;
    double washout_time = 4.0;
    double train_time = 10.0;
};

struct LyapunovSettings {
    double horizon_time = 1000.0;
    double transient_time = default_transient_time;
    double renorm_interval = 1.0;
    /// Regimes whose leading exponent falls below this are flagged non-chaotic.
    double chaos_threshold = 0.1;
};

struct PredictSettings {
    std::vector<LorenzParams> regimes{reference_regime(), LorenzParams(13.0, 52.0, 2.0)};
    std::size_t n_initial_conditions = 20;
    double window_lt = 10.0;
    double spacing_lt = 5.0;
    double threshold = 0.5;
};

struct StatsSettings {
    std::vector<LorenzParams> regimes{reference_regime()};
    /// Leading validation regimes appended to `regimes`.
    std::size_t n_validation_regimes = 3;
    double duration_lt = 500.0;
    double true_duration_lt = 5000.0;
    std::size_t bins = 50;
};

struct SensitivitySettings {
    /// n_members, window_lt, member_init, identical seeds and divergence limits; the
    /// seed, system and Lyapunov time are filled in per run.
    EnsembleConfig ensemble;
    std::vector<LorenzParams> regimes{reference_regime()};
    /// Also run every grid value of each parameter with the others at `panel_base`.
    bool panels = true;
    LorenzParams panel_base = reference_regime();
};

struct CompareSettings {
    double true_duration_lt = 5000.0;
    double esn_duration_lt = 500.0;
    std::size_t degree = 2;
};

struct RunConfig {
    std::string name = "desk";
    std::uint64_t seed = 1;
    RegimeGrid grid;
    std::size_t n_train = 20;
    std::size_t n_validation = 5;
    /// Explicit regime lists; when non-empty they replace the shuffled grid selection.
    std::vector<LorenzParams> train_regimes;
    std::vector<LorenzParams> validation_regimes;
    DataSettings data;
    LyapunovSettings lyapunov;
    EsnHyperParams esn;
    SearchSpace search;
    ValidationOptions validation;
    PredictSettings predict;
    StatsSettings stats;
    SensitivitySettings sensitivity;
    CompareSettings compare;
    ObjectiveSpec objective;

    void validate() const;
};

/// Parses a JSON document; absent keys keep their defaults, unknown keys are errors.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);
/// Canonical JSON with every field spelled out.
std::string config_json(const RunConfig& config);
/// Hex FNV-1a of the canonical JSON.
std::string config_hash(const RunConfig& config);
/// PESN_SEED replaces the global seed when set.
void apply_env_overrides(RunConfig& config);

LyapunovEstimate regime_lyapunov(const LorenzParams& params, const RunConfig& config);

struct RegimeInfo {
    LorenzParams params{10.0, 28.0, 8.0 / 3.0};
    LyapunovEstimate lyapunov;
    std::string role;  ///< train | validation | non_chaotic | failed
    std::string file;  ///< dataset path relative to the run directory
};

/// Shuffles the grid with the global seed and takes the first chaotic regimes for
/// training, then validation; flagged regimes are returned with their role.
std::vector<RegimeInfo> select_regimes(const RunConfig& config);

/// Washout and training series after a transient from a seeded random start.
RegimeDataset make_dataset(const LorenzParams& params, const DataSettings& settings, std::uint64_t seed);

struct RunData {
    std::vector<RegimeInfo> regimes;
    std::vector<RegimeDataset> train;
    std::vector<ValidationCase> validation;
};

/// Reads regimes.csv and the dataset files written by cmd_generate.
RunData load_run_data(const std::string& dir);

struct GenerateResult {
    RunData data;
    std::vector<std::string> outputs;
};

struct TrainResult {
    Esn model;
    Vec validation_errors;
    std::optional<SearchResult> search;
    std::vector<std::string> outputs;
};

struct RegimePrediction {
    LorenzParams params{10.0, 28.0, 8.0 / 3.0};
    double lyapunov_time = 0.0;
    std::vector<double> horizons;
    double mean_horizon = 0.0;
};

struct PredictResult {
    std::vector<RegimePrediction> regimes;
    std::vector<std::string> outputs;
};

struct RegimeStats {
    LorenzParams params{10.0, 28.0, 8.0 / 3.0};
    double lyapunov_time = 0.0;
    LongTermStats truth;
    std::optional<LongTermStats> esn;  ///< empty when the closed loop diverged
};

struct StatsResult {
    std::vector<RegimeStats> regimes;
    std::vector<std::string> outputs;
};

struct RegimeSensitivity {
    LorenzParams params{10.0, 28.0, 8.0 / 3.0};
    double lyapunov_time = 0.0;
    SensitivityEstimate truth;
    SensitivityEstimate esn;
    std::string true_status = "ok";
    std::string esn_status = "ok";
};

struct SensitivityResult {
    std::vector<RegimeSensitivity> regimes;
    std::vector<std::string> outputs;
};

struct PanelPoint {
    double value = 0.0;
    double lyapunov_time = 0.0;
    Vec true_mean, true_stderr, esn_mean, esn_stderr;
    double slope = 0.0;  ///< polynomial-fit derivative at this value
};

struct PanelComparison {
    std::size_t param_index = 0;
    SweepResult true_sweep;
    SweepResult esn_sweep;
    DirectEstimate fit;
    std::vector<PanelPoint> points;
};

struct CompareResult {
    std::vector<PanelComparison> panels;
    std::vector<ComparisonRow> rows;
    std::vector<std::string> outputs;
};

GenerateResult cmd_generate(const RunConfig& config, const std::string& dir);
TrainResult cmd_train(const RunConfig& config, const std::string& dir);
TrainResult cmd_search(const RunConfig& config, const std::string& dir);
PredictResult cmd_predict(const RunConfig& config, const std::string& dir);
StatsResult cmd_stats(const RunConfig& config, const std::string& dir);
SensitivityResult cmd_sensitivity(const RunConfig& config, const std::string& dir);
/// Needs sensitivity_summary.csv from cmd_sensitivity with panels enabled.
CompareResult cmd_compare(const RunConfig& config, const std::string& dir);

/// Records a command's outputs in <dir>/manifest.json, keeping other commands' entries.
void update_manifest(const std::string& dir, const std::string& command, const RunConfig& config,
                     const std::vector<std::string>& outputs, const std::string& started);

}  // namespace pesn
