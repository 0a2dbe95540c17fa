#include "pesn/hyperopt.hpp"

#include "pesn/csv.hpp"
#include "pesn/parallel.hpp"
#include "pesn/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>

namespace pesn {

namespace {

Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }

void check_bounds(const Bounds& b, const char* name, bool log_scale)
{
    if (!std::isfinite(b.lo) || !std::isfinite(b.hi) || !(b.lo < b.hi))
        throw config_error(std::string("SearchSpace: invalid bounds for ") + name);
    if (log_scale && !(b.lo > 0.0)) throw config_error(std::string("SearchSpace: log bounds must be positive for ") + name);
}

double draw_log(Rng& rng, const Bounds& b) { return std::exp(rng.uniform(std::log(b.lo), std::log(b.hi))); }

/// Standard normal via Box-Muller on the library's own uniform stream.
double draw_normal(Rng& rng)
{
    double u = 0.0;
    while (u == 0.0) u = rng.uniform();
    return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * M_PI * rng.uniform());
}

double perturb(Rng& rng, double x, const Bounds& b, double width, bool log_scale)
{
    if (log_scale) {
        const double lo = std::log(b.lo), hi = std::log(b.hi);
        return std::exp(std::clamp(std::log(x) + width * (hi - lo) * draw_normal(rng), lo, hi));
    }
    return std::clamp(x + width * (b.hi - b.lo) * draw_normal(rng), b.lo, b.hi);
}

EsnHyperParams refine_candidate(const SearchSpace& space, const EsnHyperParams& incumbent, std::uint64_t seed,
                                std::size_t m)
{
    Rng rng(derive_seed(seed, "refine-candidate", m));
    const double w = space.refine_width;
    EsnHyperParams h = incumbent;
    h.rho = perturb(rng, h.rho, space.rho, w, true);
    h.sigma_in = perturb(rng, h.sigma_in, space.sigma_in, w, true);
    h.alpha = perturb(rng, h.alpha, space.alpha, w, false);
    h.lambda = perturb(rng, h.lambda, space.lambda, w, true);
    for (Eigen::Index j = 0; j < h.sigma_p.size(); ++j) h.sigma_p[j] = perturb(rng, h.sigma_p[j], space.sigma_p, w, true);
    for (Eigen::Index j = 0; j < h.k_p.size(); ++j) h.k_p[j] = perturb(rng, h.k_p[j], space.k_p, w, false);
    return h;
}

bool better(const ValidationReport& a, const ValidationReport& b)
{
    if (a.feasible != b.feasible) return a.feasible;
    if (a.score != b.score) return a.score < b.score;
    return a.index < b.index;
}

const ValidationReport* best_of(const std::vector<ValidationReport>& history)
{
    const ValidationReport* best = nullptr;
    for (const auto& r : history)
        if (r.feasible && (!best || better(r, *best))) best = &r;
    return best;
}

}  // namespace

void SearchSpace::validate() const
{
    base.validate();
    check_bounds(rho, "rho", true);
    check_bounds(sigma_in, "sigma_in", true);
    check_bounds(alpha, "alpha", false);
    check_bounds(lambda, "lambda", true);
    check_bounds(sigma_p, "sigma_p", true);
    check_bounds(k_p, "k_p", false);
    if (!(alpha.lo >= 0.0 && alpha.hi <= 1.0)) throw config_error("SearchSpace: alpha bounds must lie in [0, 1]");
    if (budget < 1) throw config_error("SearchSpace: budget must be >= 1");
    if (n_network_realisations < 1) throw config_error("SearchSpace: need at least one network realisation");
    if (refine_budget > 0 && (refine_batch < 1 || !(refine_width > 0.0)))
        throw config_error("SearchSpace: refinement needs a positive batch and width");
}

std::uint64_t realisation_seed(std::uint64_t seed, std::size_t k)
{
    return k == 0 ? seed : derive_seed(seed, "network-realisation", k);
}

double forecast_error(const Esn& model, const Vec& regime, const Series& truth, std::size_t washout_steps,
                      std::size_t horizon_steps, const ValidationOptions& options, bool* diverged)
{
    if (diverged) *diverged = false;
    if (horizon_steps == 0 || washout_steps == 0) throw config_error("forecast_error: empty washout or horizon");
    if (truth.cols() < idx(washout_steps + 1 + horizon_steps)) throw config_error("forecast_error: truth too short");
    auto penalise = [&] {
        if (diverged) *diverged = true;
        return options.diverged_penalty;
    };
    Series predicted;
    try {
        const Vec r0 = washout(model, Vec::Zero(idx(model.n_reservoir())), truth.leftCols(idx(washout_steps)), regime);
        predicted = closed_loop(model, r0, horizon_steps, regime).outputs;
    } catch (const blowup_error&) {
        return penalise();
    }
    if (!predicted.allFinite()) return penalise();
    const Vec half_width = options.divergence_bound * model.data_std;
    for (Eigen::Index k = 0; k < predicted.cols(); ++k)
        if (((predicted.col(k) - model.data_mean).cwiseAbs() - half_width).maxCoeff() > 0.0) return penalise();
    const Series target = truth.middleCols(idx(washout_steps + 1), idx(horizon_steps));
    const double energy = target.colwise().squaredNorm().mean();
    const double nmse = (target - predicted).colwise().squaredNorm().mean() / energy;
    return std::isfinite(nmse) ? std::min(nmse, options.diverged_penalty) : penalise();
}

Vec validation_errors(const Esn& model, const std::vector<ValidationCase>& val_data, const ValidationOptions& options,
                      std::size_t* n_diverged)
{
    Vec errors(idx(val_data.size()));
    for (std::size_t j = 0; j < val_data.size(); ++j) {
        const auto& v = val_data[j];
        const RegimeDataset& d = v.data;
        Series series(d.train.rows(), d.washout.cols() + d.train.cols());
        series << d.washout, d.train;
        const auto w = static_cast<std::size_t>(d.washout.cols());
        const auto h_steps = static_cast<std::size_t>(std::llround(options.horizon_lt * v.lyapunov_time / d.dt));
        if (h_steps == 0 || static_cast<std::size_t>(series.cols()) < w + 1 + h_steps)
            throw config_error("validation_errors: validation series shorter than washout plus horizon");
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t s = 0; s + w + 1 + h_steps <= static_cast<std::size_t>(series.cols()); s += h_steps) {
            bool div = false;
            sum += forecast_error(model, d.regime, series.middleCols(idx(s), idx(w + 1 + h_steps)), w, h_steps, options,
                                  &div);
            if (div && n_diverged) ++*n_diverged;
            ++count;
        }
        errors[idx(j)] = sum / static_cast<double>(count);
    }
    return errors;
}

ValidationReport validation_score(const EsnHyperParams& candidate, const std::vector<RegimeDataset>& train_data,
                                  const std::vector<ValidationCase>& val_data, std::size_t n_realisations,
                                  const ValidationOptions& options)
{
    if (val_data.empty()) throw config_error("validation_score: no validation regimes");
    if (train_data.empty()) throw config_error("validation_score: no training regimes");
    if (n_realisations < 1) throw config_error("validation_score: need at least one realisation");
    if (!(options.horizon_lt > 0.0)) throw config_error("validation_score: horizon must be positive");
    for (const auto& v : val_data)
        for (const auto& t : train_data)
            if (v.data.regime == t.regime) throw config_error("validation_score: validation regime also used for training");

    ValidationReport report;
    report.candidate = candidate;
    report.errors = Mat::Zero(idx(n_realisations), idx(val_data.size()));
    for (std::size_t k = 0; k < n_realisations; ++k) {
        EsnHyperParams h = candidate;
        h.seed = realisation_seed(candidate.seed, k);
        Esn model;
        try {
            model = train(make_esn(h, static_cast<std::size_t>(train_data.front().train.rows()),
                                   static_cast<std::size_t>(train_data.front().regime.size())),
                          train_data);
        } catch (const error& e) {
            report.feasible = false;
            report.failure = e.what();
            report.score = std::numeric_limits<double>::infinity();
            return report;
        }
        report.errors.row(idx(k)) = validation_errors(model, val_data, options, &report.n_diverged).transpose();
    }
    report.score = report.errors.mean();
    return report;
}

EsnHyperParams draw_candidate(const SearchSpace& space, std::uint64_t seed, std::size_t k)
{
    Rng rng(derive_seed(seed, "candidate", k));
    EsnHyperParams h = space.base;
    h.seed = derive_seed(seed, "network");
    h.rho = draw_log(rng, space.rho);
    h.sigma_in = draw_log(rng, space.sigma_in);
    h.alpha = rng.uniform(space.alpha.lo, space.alpha.hi);
    if (h.alpha == 0.0) h.alpha = space.alpha.hi;
    h.lambda = draw_log(rng, space.lambda);
    for (Eigen::Index j = 0; j < h.sigma_p.size(); ++j) h.sigma_p[j] = draw_log(rng, space.sigma_p);
    for (Eigen::Index j = 0; j < h.k_p.size(); ++j) h.k_p[j] = rng.uniform(space.k_p.lo, space.k_p.hi);
    return h;
}

SearchResult search(const SearchSpace& space, const std::vector<RegimeDataset>& train_data,
                    const std::vector<ValidationCase>& val_data, std::uint64_t seed, const ValidationOptions& options)
{
    space.validate();
    if (val_data.empty()) throw config_error("search: no validation regimes");

    std::vector<ValidationReport> history(space.budget);
    parallel_for(space.budget, [&](std::size_t k) {
        history[k] = validation_score(draw_candidate(space, seed, k), train_data, val_data,
                                      space.n_network_realisations, options);
        history[k].index = k;
    });

    for (std::size_t done = 0; done < space.refine_budget;) {
        const ValidationReport* incumbent = best_of(history);
        if (!incumbent) break;
        const EsnHyperParams centre = incumbent->candidate;
        const std::size_t batch = std::min(space.refine_batch, space.refine_budget - done);
        std::vector<ValidationReport> round(batch);
        parallel_for(batch, [&](std::size_t i) {
            round[i] = validation_score(refine_candidate(space, centre, seed, done + i), train_data, val_data,
                                        space.n_network_realisations, options);
            round[i].index = space.budget + done + i;
        });
        for (auto& r : round) history.push_back(std::move(r));
        done += batch;
    }

    const ValidationReport* best = best_of(history);
    if (!best) throw search_failed_error("search: every candidate was infeasible", std::move(history));
    SearchResult out;
    out.best = best->candidate;
    out.best_report = *best;
    out.history = std::move(history);
    return out;
}

void write_history_csv(std::ostream& os, const std::vector<ValidationReport>& history,
                       const std::vector<ValidationCase>& val_data)
{
    CsvWriter csv(os);
    csv.header({"candidate", "realisation", "regime", "p_0", "p_1", "p_2", "rho", "sigma_in", "alpha", "lambda",
                "sigma_p_0", "sigma_p_1", "sigma_p_2", "k_p_0", "k_p_1", "k_p_2", "error", "status"});
    auto params = [&](const EsnHyperParams& h) {
        csv << h.rho << h.sigma_in << h.alpha << h.lambda;
        for (Eigen::Index j = 0; j < 3; ++j) {
            if (j < h.sigma_p.size()) csv << h.sigma_p[j];
            else csv << "";
        }
        for (Eigen::Index j = 0; j < 3; ++j) {
            if (j < h.k_p.size()) csv << h.k_p[j];
            else csv << "";
        }
    };
    for (const auto& r : history) {
        const char* status = !r.feasible ? "infeasible" : (r.n_diverged > 0 ? "diverged" : "ok");
        for (Eigen::Index k = 0; r.feasible && k < r.errors.rows(); ++k) {
            for (Eigen::Index j = 0; j < r.errors.cols(); ++j) {
                const Vec& p = val_data[static_cast<std::size_t>(j)].data.regime;
                csv << r.index << k << j;
                for (Eigen::Index c = 0; c < 3; ++c) {
                    if (c < p.size()) csv << p[c];
                    else csv << "";
                }
                params(r.candidate);
                csv << r.errors(k, j) << status;
                csv.end_row();
            }
        }
        csv << r.index << "all" << "all" << "" << "" << "";
        params(r.candidate);
        if (r.feasible) csv << r.score;
        else csv << "inf";
        csv << status;
        csv.end_row();
    }
}

}  // namespace pesn
