#pragma once

// Shared helpers for the unit tests: hand-rolled generators, finite-difference
// oracles and a small trained model that the ESN, adjoint and ensemble tests reuse.

#include "pesn/dynsys.hpp"
#include "pesn/esn.hpp"
#include "pesn/random.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace pesn::test {

inline double rel_err(double a, double b, double floor = 1e-12)
{
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Max-entry relative error, scaled by the larger max-norm of the two operands.
template <typename A, typename B>
double rel_err(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b, double floor = 1e-12)
{
    const double scale = std::max({a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff(), floor});
    return (a - b).cwiseAbs().maxCoeff() / scale;
}

/// Random generator for property tests; every case gets its own stream.
class Gen {
public:
    explicit Gen(std::uint64_t seed) : rng_(seed) {}

    double uniform(double lo, double hi) { return rng_.uniform(lo, hi); }
    std::size_t index(std::size_t n) { return static_cast<std::size_t>(rng_.index(n)); }

    Vec vec(Eigen::Index n, double lo, double hi)
    {
        Vec v(n);
        for (Eigen::Index i = 0; i < n; ++i) v[i] = uniform(lo, hi);
        return v;
    }

    LorenzState state() { return {uniform(-20, 20), uniform(-25, 25), uniform(0, 50)}; }

    LorenzParams params() { return {uniform(5, 20), uniform(20, 60), uniform(0.5, 4)}; }

private:
    Rng rng_;
};

/// Central differences of f: R^n -> R^m, one column per input.
inline Mat fd_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x, double h)
{
    const Vec f0 = f(x);
    Mat jac(f0.size(), x.size());
    for (Eigen::Index j = 0; j < x.size(); ++j) {
        Vec xp = x, xm = x;
        xp[j] += h;
        xm[j] -= h;
        jac.col(j) = (f(xp) - f(xm)) / (2.0 * h);
    }
    return jac;
}

inline RegimeDataset lorenz_dataset(const LorenzParams& p, std::uint64_t seed, std::size_t washout_steps = 400,
                                    std::size_t train_steps = 1001)
{
    const Series s = simulate(p, random_initial_condition(p, seed), {0.01, washout_steps + train_steps - 1, 2000})
                         .as_series();
    return {p.as_vector(), s.leftCols(static_cast<Eigen::Index>(washout_steps)),
            s.rightCols(static_cast<Eigen::Index>(train_steps)), 0.01};
}

inline std::vector<LorenzParams> small_training_set()
{
    return {{8, 30, 2}, {10, 35, 2.5}, {12, 40, 1.5}, {14, 45, 3}, {16, 50, 2}, {10, 45, 1.5}, {12, 30, 3}, {14, 35, 2}};
}

inline EsnHyperParams small_hyper(std::size_t n_reservoir = 100)
{
    EsnHyperParams h;
    h.n_reservoir = n_reservoir;
    h.rho = 0.1;
    h.sigma_in = 0.15;
    h.alpha = 0.75;
    h.lambda = 1e-9;
    h.sigma_p = Vec3(0.15, 0.1, 0.45);
    h.k_p = Vec3(2.6, -90.5, -26.1);
    h.seed = 7;
    return h;
}

/// A modest model trained on a handful of grid regimes; cached per process.
inline const Esn& small_model()
{
    static const Esn model = [] {
        std::vector<RegimeDataset> data;
        std::uint64_t k = 0;
        for (const auto& p : small_training_set()) data.push_back(lorenz_dataset(p, derive_seed(3, "test-data", k++)));
        return train(make_esn(small_hyper(), 3, 3), data);
    }();
    return model;
}

/// Fresh empty directory under the system temp path.
inline std::string temp_dir(const std::string& name)
{
    const auto dir = std::filesystem::temp_directory_path() / ("pesn_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir.string();
}

}  // namespace pesn::test
