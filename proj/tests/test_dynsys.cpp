#include "support.hpp"

#include <doctest.h>

#include <sstream>

using namespace pesn;
using pesn::test::Gen;
using pesn::test::rel_err;

namespace {

const LorenzParams ref = reference_regime();

double z_mean(const Trajectory& t)
{
    double sum = 0.0;
    for (const auto& s : t.states) sum += s.z();
    return sum / static_cast<double>(t.states.size());
}

}  // namespace

TEST_CASE("lorenz parameters and states reject invalid values")
{
    CHECK_THROWS_AS(LorenzParams(0.0, 28, 1), invalid_state_error);
    CHECK_THROWS_AS(LorenzParams(10, 28, -1), invalid_state_error);
    CHECK_THROWS_AS(LorenzParams(10, NAN, 1), invalid_state_error);
    CHECK_THROWS_AS(LorenzState(0, INFINITY, 0), invalid_state_error);
    CHECK(ref.with(1, 35.0) == LorenzParams(10, 35, 8.0 / 3.0));
    CHECK_THROWS_AS(ref.with(3, 1.0), shape_error);
    CHECK_THROWS_AS(LorenzParams::from_vector(Vec::Zero(2)), shape_error);
}

TEST_CASE("vector field at simple points")
{
    CHECK(lorenz_rhs(LorenzState(0, 0, 0), ref).isZero(0.0));
    const Vec3 f = lorenz_rhs(LorenzState(1, 1, 1), ref);
    CHECK(f[0] == 0.0);
    CHECK(f[1] == 26.0);
    CHECK(f[2] == doctest::Approx(1.0 - 8.0 / 3.0).epsilon(1e-15));
    CHECK_THROWS_AS(lorenz_rhs(Vec3(NAN, 0, 0), ref), invalid_state_error);
}

TEST_CASE("vector field matches centred differences of a simulated trajectory")
{
    const double dt = 0.001;
    const Trajectory t = simulate(ref, LorenzState(1, 1, 20), {dt, 2, 2000});
    const Vec3 fd = (t.states[2].vec() - t.states[0].vec()) / (2.0 * dt);
    const Vec3 f = lorenz_rhs(t.states[1], ref);
    // Truncation error of the centred difference is dt^2/6 |x'''|.
    CHECK((fd - f).norm() / f.norm() < 1e-4);
}

TEST_CASE("jacobian at the origin and the trace identity")
{
    Mat3 expected;
    expected << -10, 10, 0, 28, -1, 0, 0, 0, -8.0 / 3.0;
    CHECK(lorenz_jacobian(LorenzState(0, 0, 0), ref) == expected);
    Gen g(11);
    for (int k = 0; k < 100; ++k) {
        const LorenzParams p = g.params();
        const Mat3 j = lorenz_jacobian(g.state(), p);
        CHECK(j(0, 0) + j(1, 1) + j(2, 2) == -p.s() - 1.0 - p.b());
    }
}

TEST_CASE("parameter gradient at simple points")
{
    CHECK(lorenz_param_grad(LorenzState(0, 0, 0)).isZero(0.0));
    Mat3 expected;
    expected << 0, 0, 0, 0, 1, 0, 0, 0, -1;
    CHECK(lorenz_param_grad(LorenzState(1, 1, 1)) == expected);
}

TEST_CASE("analytical jacobians match finite differences at random points")
{
    Gen g(12);
    for (int k = 0; k < 100; ++k) {
        const LorenzParams p = g.params();
        const LorenzState x = g.state();
        const Mat fd_x = test::fd_jacobian([&](const Vec& v) -> Vec { return lorenz_rhs(Vec3(v), p); }, x.vec(), 1e-5);
        CHECK(rel_err(lorenz_jacobian(x, p), fd_x) <= 1e-6);
        const Mat fd_p = test::fd_jacobian(
            [&](const Vec& q) -> Vec { return lorenz_rhs(x, LorenzParams::from_vector(q)); }, p.as_vector(), 1e-5);
        CHECK(rel_err(lorenz_param_grad(x), fd_p) <= 1e-6);
    }
}

TEST_CASE("rk4 step basics")
{
    const Vec3 x(1, 2, 3);
    CHECK(rk4_step([](const Vec3&) { return Vec3::Zero().eval(); }, x, 0.1) == x);

    using Vec1 = Eigen::Matrix<double, 1, 1>;
    const Vec1 y = rk4_step([](const Vec1& v) { return v; }, Vec1(1.0), 0.1);
    CHECK(std::abs(y[0] - std::exp(0.1)) < 1e-7);

    CHECK_THROWS_AS(rk4_step([](const Vec3& v) { return v; }, x, 0.0), invalid_state_error);
    try {
        rk4_step([](const Vec3&) { return Vec3(NAN, 0, 0); }, x, 0.1, 42);
        FAIL("expected blowup");
    } catch (const blowup_error& e) {
        CHECK(e.step() == 42);
    }
}

TEST_CASE("rk4 global error shrinks at fourth order")
{
    const LorenzState x0(1, 1, 20);
    const Vec3 exact = simulate(ref, x0, {0.0001, 10000, 0}).states.back().vec();
    std::vector<double> log_dt, log_err;
    for (double dt : {0.02, 0.01, 0.005, 0.0025}) {
        const auto n = static_cast<std::size_t>(std::llround(1.0 / dt));
        log_dt.push_back(std::log(dt));
        log_err.push_back(std::log((simulate(ref, x0, {dt, n, 0}).states.back().vec() - exact).norm()));
    }
    const double mx = (log_dt[0] + log_dt[1] + log_dt[2] + log_dt[3]) / 4.0;
    const double my = (log_err[0] + log_err[1] + log_err[2] + log_err[3]) / 4.0;
    double sxy = 0.0, sxx = 0.0;
    for (int i = 0; i < 4; ++i) {
        sxy += (log_dt[i] - mx) * (log_err[i] - my);
        sxx += (log_dt[i] - mx) * (log_dt[i] - mx);
    }
    CHECK(sxy / sxx >= 3.8);
}

TEST_CASE("simulate lengths, transients and fixed points")
{
    const LorenzState x0(1, 2, 3);
    const Trajectory t0 = simulate(ref, x0, {0.01, 0, 0});
    REQUIRE(t0.states.size() == 1);
    CHECK(t0.states[0] == x0);

    const Trajectory t = simulate(ref, x0, {0.01, 50, 0});
    CHECK(t.n_steps() == 50);
    CHECK(t.time(50) == doctest::Approx(0.5));
    const Trajectory tt = simulate(ref, x0, {0.01, 20, 30});
    CHECK(tt.states.front() == t.states[30]);
    CHECK(tt.states.back() == t.states[50]);
    CHECK(tt.as_series().cols() == 21);

    const Trajectory sub = simulate(LorenzParams(10, 0.5, 8.0 / 3.0), LorenzState(5, -3, 7), {0.01, 3000, 0});
    CHECK(sub.states.back().vec().norm() < 1e-6);

    CHECK_THROWS_AS(simulate(ref, x0, {0.0, 10, 0}), config_error);
}

TEST_CASE("long-run z mean is independent of the initial condition")
{
    const IntegrationConfig c{0.01, 100000, 2000};
    const double a = z_mean(simulate(ref, random_initial_condition(ref, 1), c));
    const double b = z_mean(simulate(ref, random_initial_condition(ref, 2), c));
    CHECK(rel_err(a, b) < 0.02);
}

TEST_CASE("attractor samples")
{
    const auto one = sample_attractor(ref, 1, 1.0, 5);
    REQUIRE(one.size() == 1);
    const Trajectory warm = simulate(ref, random_initial_condition(ref, 5), {0.01, 0, 2000});
    CHECK(one[0] == warm.states.back());

    const auto a = sample_attractor(ref, 100, 1.1, 9);
    const auto b = sample_attractor(ref, 100, 1.1, 9);
    CHECK(a == b);
    double z = 0.0;
    for (const auto& s : a) z += s.z();
    const double long_run = z_mean(simulate(ref, random_initial_condition(ref, 3), {0.01, 100000, 2000}));
    CHECK(rel_err(z / 100.0, long_run) < 0.10);

    CHECK_THROWS_AS(sample_attractor(ref, 0, 1.0, 1), config_error);
    CHECK_THROWS_AS(sample_attractor(ref, 3, 0.0, 1), config_error);
}

TEST_CASE("leading Lyapunov exponent")
{
    const LyapunovEstimate e = lyapunov_time(ref, default_lyapunov_config(), 1);
    CHECK(e.chaotic());
    CHECK(e.n_renorm == 1000);
    CHECK(e.lyapunov_time == doctest::Approx(1.0 / e.lambda_max));
    CHECK(std::abs(e.lyapunov_time - 1.1) <= 0.11);

    const LyapunovEstimate e2 = lyapunov_time(ref, default_lyapunov_config(), 2);
    CHECK(rel_err(e.lyapunov_time, e2.lyapunov_time) < 0.05);

    const LyapunovEstimate stable = lyapunov_time(LorenzParams(10, 0.5, 8.0 / 3.0), {0.01, 20000, 2000}, 1);
    CHECK_FALSE(stable.chaotic());
    CHECK(stable.lambda_max < 0.0);
    CHECK(std::isinf(stable.lyapunov_time));

    CHECK_THROWS_AS(lyapunov_time(ref, {0.01, 10, 0}, 1), config_error);
}

TEST_CASE("true window adjoint matches finite differences of the window average")
{
    const ObjectiveSpec obj;
    Gen g(21);
    const auto ics = sample_attractor(ref, 10, 3.0, 4);
    for (const auto& ic : ics) {
        const double window = g.uniform(0.05, 1.1);
        const auto n = static_cast<std::size_t>(std::llround(window / 0.01));
        const SensitivityVector s = true_window_sensitivity(ref, ic, window, obj);
        CHECK(s.window_steps == n);
        const Vec3 fd = test::fd_jacobian(
                            [&](const Vec& p) -> Vec {
                                return Vec::Constant(1, window_average(LorenzParams::from_vector(p), ic, n, 0.01, obj));
                            },
                            ref.as_vector(), 1e-4)
                            .transpose();
        for (int j = 0; j < 3; ++j) CHECK(rel_err(s.djdp[j], fd[j], 1e-3 * fd.norm()) <= 1e-3);
    }
}

TEST_CASE("true window adjoint limits and failures")
{
    const LorenzState ic = sample_attractor(ref, 1, 1.0, 3)[0];
    const SensitivityVector tiny = true_window_sensitivity(ref, ic, 0.001, {});
    CHECK(tiny.window_steps == 0);
    CHECK(tiny.djdp.isZero(0.0));
    // The gradient vanishes linearly with the window.
    TrueSensitivityOptions fine;
    fine.dt = 1e-4;
    const double g1 = true_window_sensitivity(ref, ic, 1e-4, {}, fine).djdp.norm();
    const double g4 = true_window_sensitivity(ref, ic, 4e-4, {}, fine).djdp.norm();
    CHECK(g1 < 0.3 * g4);
    CHECK(g1 < 1e-2);
    CHECK_THROWS_AS(true_window_sensitivity(ref, ic, 0.0, {}), config_error);
    CHECK_THROWS_AS(true_window_sensitivity(ref, ic, 1.0, ObjectiveSpec{3}), shape_error);
    TrueSensitivityOptions tight;
    tight.divergence_cap = 10.0;
    CHECK_THROWS_AS(true_window_sensitivity(ref, ic, 30.0, {}, tight), diverged_error);
}

TEST_CASE("trajectory csv round-trips doubles")
{
    const Trajectory t = simulate(ref, LorenzState(0.1, 0.2, 0.3), {0.01, 3, 0});
    std::ostringstream os;
    write_trajectory_csv(os, t);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    CHECK(line == "t,x,y,z");
    for (const auto& s : t.states) {
        std::getline(is, line);
        std::istringstream row(line);
        std::string cell;
        std::getline(row, cell, ',');
        for (int c = 0; c < 3; ++c) {
            std::getline(row, cell, ',');
            CHECK(std::stod(cell) == s.vec()[c]);
        }
    }
}
