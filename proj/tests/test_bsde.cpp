#include "heatbound/bsde.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

using namespace heatbound;
using namespace heatbound::bsde;

namespace {

// Independent oracle: E[g(x + sqrt(tau) xi)] by the trapezoid rule on a
// wide interval.
template <class G>
double trapezoid_expectation(G&& g, double x, double tau, int n = 40000) {
    const double s = std::sqrt(tau), lo = -12.0, hi = 12.0, dx = (hi - lo) / n;
    double acc = 0.0;
    for (int i = 0; i <= n; ++i) {
        const double u = lo + i * dx;
        const double w = (i == 0 || i == n) ? 0.5 : 1.0;
        acc += w * std::exp(-0.5 * u * u) * g(x + s * u);
    }
    return acc * dx / std::sqrt(2 * std::numbers::pi);
}

double entropic_by_trapezoid(const std::function<double(double)>& f0, double x, double tau) {
    return std::log(trapezoid_expectation([&](double y) { return std::exp(f0(y)); }, x, tau));
}

BSDEProblem cosine_problem(double a = 0.5) { return make_problem(cosine_terminal(a), 1.0); }

RunConfig run_config(std::size_t paths, std::uint64_t seed, double dt = 1e-2, std::size_t records = 16) {
    RunConfig c;
    c.n_paths = paths;
    c.seed = seed;
    c.dt = dt;
    c.records = records;
    return c;
}

}  // namespace

TEST(Quadrature, GaussHermiteMoments) {
    const auto g = gauss_hermite(10);
    double m0 = 0, m2 = 0, m4 = 0, m6 = 0;
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        const double x = g.nodes[i], w = g.weights[i];
        m0 += w;
        m2 += w * x * x;
        m4 += w * std::pow(x, 4);
        m6 += w * std::pow(x, 6);
    }
    EXPECT_NEAR(m0, 1.0, 1e-13);
    EXPECT_NEAR(m2, 1.0, 1e-12);
    EXPECT_NEAR(m4, 3.0, 1e-11);
    EXPECT_NEAR(m6, 15.0, 1e-10);
    Vector x = Vector::Zero(2);
    EXPECT_NEAR(gaussian_expectation([](const Vector& y) { return y.squaredNorm(); }, x, 0.3, g), 0.6, 1e-13);
}

TEST(Oracle, ConstantAndLinear) {
    auto c = make_problem(constant_terminal(0.7, 2), 2.0);
    auto v = entropic_oracle(c, 0.5, Vector::Constant(2, 3.0));
    EXPECT_EQ(v.Y, 0.7);
    EXPECT_EQ(v.Z.norm(), 0.0);

    Vector b(2);
    b << 0.5, -1.5;
    auto l = make_problem(linear_terminal(b), 2.0);
    Vector s(2);
    s << 0.3, 0.1;
    v = entropic_oracle(l, 0.5, s);
    EXPECT_NEAR(v.Y, b.dot(s) + 0.5 * b.squaredNorm() * 1.5, 1e-15);
    EXPECT_EQ(v.Z, b);
    EXPECT_THROW(entropic_oracle(l, 2.5, s), PreconditionError);
}

TEST(Oracle, CosineMatchesKernelIntegralAndFiniteDifference) {
    auto term = cosine_terminal(0.5);
    auto f0 = [](double x) { return 0.5 * std::cos(x); };
    Vector x(1), z(1), zp(1), zm(1);
    for (double tau : {0.0, 0.05, 0.4, 1.0, 3.0})
        for (double xv : {0.0, 0.7, -2.0, 3.1}) {
            x(0) = xv;
            const double y = term.oracle(tau, x, z);
            EXPECT_NEAR(y, tau == 0 ? f0(xv) : entropic_by_trapezoid(f0, xv, tau), 1e-11) << tau << ' ' << xv;
            const double e = 1e-5;
            x(0) = xv + e;
            const double yp = term.oracle(tau, x, zp);
            x(0) = xv - e;
            const double ym = term.oracle(tau, x, zm);
            EXPECT_NEAR(z(0), (yp - ym) / (2 * e), 1e-8);
        }
    // Pinned regression constant Y_0 = log(P_1 e^{0.5 cos})(0).
    x(0) = 0;
    EXPECT_NEAR(term.oracle(1.0, x, z), 0.3257145166449, 1e-12);
    // Separable in higher dimension.
    auto t2 = cosine_terminal(0.5, 2);
    Vector x2(2), z2(2);
    x2 << 0.3, -1.0;
    Vector a(1), bb(1);
    a(0) = 0.3;
    bb(0) = -1.0;
    EXPECT_NEAR(t2.oracle(0.6, x2, z2), term.oracle(0.6, a, z) + term.oracle(0.6, bb, zp), 1e-14);
    EXPECT_DOUBLE_EQ(t2.sup_norm, 1.0);
    // Negative amplitude.
    auto tn = cosine_terminal(-0.8);
    x(0) = 0.4;
    EXPECT_NEAR(tn.oracle(0.7, x, z), entropic_by_trapezoid([](double y) { return -0.8 * std::cos(y); }, 0.4, 0.7),
                1e-11);
}

TEST(Oracle, GridBackendAgreesWithBessel) {
    heatpde::TorusGrid g(1, 512);
    auto term = grid_terminal(heatpde::exp_cosine_data(g, 0.5), 1.0, 1e-2);
    auto exact = cosine_terminal(0.5);
    Vector x(1), z(1), ze(1);
    x(0) = 0.0;
    EXPECT_NEAR(term.oracle(1.0, x, z), exact.oracle(1.0, x, ze), 2e-5);
    EXPECT_NEAR(term.oracle(1.0, x, z), 0.3257145166, 2e-5);
    x(0) = 1.234;
    EXPECT_NEAR(term.oracle(0.355, x, z), exact.oracle(0.355, x, ze), 5e-5);
    EXPECT_NEAR(z(0), ze(0), 5e-4);
    EXPECT_NEAR(term.sup_norm, 0.5, 1e-12);
    EXPECT_THROW(term.oracle(1.5, x, z), PreconditionError);
}

TEST(Oracle, SmoothedStepClosedForm) {
    auto term = smoothed_step_terminal(0.6, 0.5);
    const double lo = std::exp(-0.6), jump = std::exp(0.6) - lo;
    auto f0 = [&](double x) { return std::log(lo + jump * 0.5 * std::erfc(-x / 0.5 / std::sqrt(2.0))); };
    Vector x(1), z(1), zp(1), zm(1);
    for (double tau : {0.0, 0.01, 0.3, 1.0})
        for (double xv : {-3.0, -0.8, 0.0, 0.25, 2.0}) {
            x(0) = xv;
            const double y = term.oracle(tau, x, z);
            EXPECT_NEAR(y, tau == 0 ? f0(xv) : entropic_by_trapezoid(f0, xv, tau), 1e-10);
            EXPECT_LT(std::abs(y), 0.6);
            x(0) = xv + 1e-5;
            const double yp = term.oracle(tau, x, zp);
            x(0) = xv - 1e-5;
            const double ym = term.oracle(tau, x, zm);
            EXPECT_NEAR(z(0), (yp - ym) / 2e-5, 1e-7);
        }
    EXPECT_NEAR(term.value(Vector::Constant(1, 50.0)), 0.6, 1e-12);
    EXPECT_NEAR(term.value(Vector::Constant(1, -50.0)), -0.6, 1e-12);
}

TEST(Oracle, QuadratureBackend) {
    auto f0 = [](double x) { return 0.5 * std::cos(x); };
    auto df0 = [](double x) { return -0.5 * std::sin(x); };
    auto quad = quadrature_terminal("cos_quad", {}, f0, df0, 0.5, 96);
    auto exact = cosine_terminal(0.5);
    Vector x(1), z(1), ze(1);
    for (double tau : {0.0, 0.1, 1.0, 2.5})
        for (double xv : {-1.0, 0.0, 2.2}) {
            x(0) = xv;
            EXPECT_NEAR(quad.oracle(tau, x, z), exact.oracle(tau, x, ze), 1e-12);
            EXPECT_NEAR(z(0), ze(0), 1e-11);
        }
    // A near-discontinuous terminal is not resolved by eight nodes.
    EXPECT_THROW(quadrature_terminal(
                     "sharp", {}, [](double x) { return 0.6 * std::erf(x / 0.02); },
                     [](double x) { return 0.6 * 2 / std::sqrt(std::numbers::pi) / 0.02 * std::exp(-x * x / 4e-4); },
                     0.6, 8),
                 NumericalError);
}

TEST(Oracle, TranslationAndJensen) {
    std::vector<Terminal> terms{cosine_terminal(0.5), smoothed_step_terminal(0.4), forward_gaussian_terminal(0.5)};
    Vector x(1), z(1), zs(1);
    for (const auto& t : terms) {
        auto s = shifted(t, 1.25);
        for (double tau : {0.0, 0.2, 1.0})
            for (double xv : {-1.0, 0.0, 0.6}) {
                x(0) = xv;
                const double y = t.oracle(tau, x, z);
                EXPECT_NEAR(s.oracle(tau, x, zs), y + 1.25, 1e-14);
                EXPECT_EQ(z(0), zs(0));
                EXPECT_GE(y, terminal_mean(t, tau, x, 24) - 1e-12) << t.family;
            }
    }
    EXPECT_DOUBLE_EQ(shifted(cosine_terminal(0.5), -1).sup_norm, 1.5);
}

TEST(Problem, JsonAndValidation) {
    auto p = problem_from_json(nlohmann::json::parse(R"({"T": 2, "x0": [0.5], "terminal": {"family": "cosine", "a": 0.3}})"));
    EXPECT_EQ(p.T, 2.0);
    EXPECT_EQ(p.terminal.family, "cosine");
    EXPECT_THROW(problem_from_json(nlohmann::json::parse(R"({"T": 1, "bogus": 1, "terminal": {"family": "constant"}})")),
                 PreconditionError);
    EXPECT_THROW(problem_from_json(nlohmann::json::parse(R"({"terminal": {"family": "cosine", "b": 1}})")),
                 PreconditionError);
    EXPECT_THROW(problem_from_json(nlohmann::json::parse(R"({"terminal": {"family": "constant"}, "driver": "other"})")),
                 PreconditionError);
    EXPECT_THROW(problem_from_json(nlohmann::json::parse(R"({"x0": [0, 0], "terminal": {"family": "constant"}})")),
                 PreconditionError);
    auto g = problem_from_json(nlohmann::json::parse(
        R"({"T": 0.5, "terminal": {"family": "grid", "N": 128, "initial": {"family": "exp_cosine", "a": 0.5}}})"));
    EXPECT_EQ(g.terminal.family, "grid");
    EXPECT_NE(p.params(), cosine_problem().params());
}

TEST(MonteCarlo, ConstantAndLinearResidualsVanish) {
    auto c = solve_bsde_mc(make_problem(constant_terminal(-0.4)), run_config(200, 1));
    for (double r : c.residual) EXPECT_EQ(r, 0.0);
    Vector b(2);
    b << 1.0, -0.5;
    auto cfg = run_config(500, 2);
    cfg.conditional_residual = true;
    auto l = solve_bsde_mc(make_problem(linear_terminal(b)), cfg);
    const double y0 = 0.5 * b.squaredNorm();
    for (std::size_t i = 0; i < l.n_paths(); ++i) {
        EXPECT_LE(std::abs(l.residual[i]), 1e-12);
        EXPECT_LE(std::abs(l.conditional_residual[i]), 1e-12);
        for (std::size_t j = 0; j < l.n_records(); ++j) {
            const auto k = l.at(i, j);
            // Y_t = b.B_t + |b|^2 (T - t)/2 with b.B_t = S1 and |b|^2 t = S2.
            EXPECT_NEAR(l.Y[k], y0 + l.S1[k] - 0.5 * l.S2[k], 1e-12);
            EXPECT_NEAR(l.S2[k], b.squaredNorm() * l.record_times[j], 1e-12);
        }
    }
}

TEST(MonteCarlo, ResidualOrderInDt) {
    auto p = cosine_problem();
    std::vector<double> dts{2e-2, 1e-2, 5e-3}, cond, path;
    for (double dt : dts) {
        auto cfg = run_config(2000, 7, dt, 2);
        cfg.conditional_residual = true;
        const auto r = residual_report(solve_bsde_mc(p, cfg));
        cond.push_back(r.mean_abs_conditional);
        path.push_back(r.mean_abs);
    }
    const double ratio = cond[1] / cond[2];
    EXPECT_GE(ratio, 1.5);
    EXPECT_LE(ratio, 3.0);
    const double slope = std::log(cond[0] / cond[2]) / std::log(dts[0] / dts[2]);
    EXPECT_GE(slope, 0.8);
    // The pathwise residual carries the martingale part and halves only by sqrt 2.
    EXPECT_GT(path[1] / path[2], 1.2);
    EXPECT_LT(path[1] / path[2], 1.7);
    EXPECT_LT(path[2], 0.05);
}

TEST(MonteCarlo, DeterministicAcrossWorkerCounts) {
    auto p = cosine_problem();
    setenv("HEATBOUND_THREADS", "1", 1);
    auto a = solve_bsde_mc(p, run_config(300, 11));
    setenv("HEATBOUND_THREADS", "3", 1);
    auto b = solve_bsde_mc(p, run_config(300, 11));
    unsetenv("HEATBOUND_THREADS");
    EXPECT_EQ(a.Y, b.Y);
    EXPECT_EQ(a.S1, b.S1);
    EXPECT_EQ(a.xi, b.xi);
    EXPECT_EQ(bmo_norm_estimate(a).value, bmo_norm_estimate(b).value);
    auto c = solve_bsde_mc(p, run_config(300, 12));
    EXPECT_NE(a.xi, c.xi);
}

TEST(MaxPrinciple, Families) {
    auto c = solve_bsde_mc(make_problem(constant_terminal(0.3)), run_config(100, 1));
    auto rc = max_principle_check(c);
    EXPECT_TRUE(rc.passed);
    EXPECT_EQ(rc.margin, 0.0);

    auto cos_run = solve_bsde_mc(cosine_problem(), run_config(10000, 3, 1.0 / 15, 16));
    auto r = max_principle_check(cos_run);
    EXPECT_TRUE(r.passed);
    EXPECT_LE(r.observed, 0.5 + 1e-6);
    EXPECT_EQ(cos_run.n_records(), 16u);

    auto step = solve_bsde_mc(make_problem(smoothed_step_terminal(0.6, 0.3)), run_config(2000, 4));
    EXPECT_TRUE(max_principle_check(step).passed);
    EXPECT_THROW(max_principle_check(solve_bsde_mc(make_problem(forward_gaussian_terminal(1.0)), run_config(10, 1))),
                 PreconditionError);
}

TEST(Girsanov, WeightsAndMartingaleMean) {
    auto zero = girsanov_weights(solve_bsde_mc(make_problem(constant_terminal(1.0)), run_config(50, 1)));
    for (double r : zero.R) EXPECT_EQ(r, 1.0);
    EXPECT_TRUE(weight_mean_check(zero).passed);

    Vector b = Vector::Constant(1, 1.0);
    auto lin = solve_bsde_mc(make_problem(linear_terminal(b)), run_config(20000, 5));
    MCEstimate e;
    auto w = girsanov_weights(lin);
    EXPECT_TRUE(weight_mean_check(w, &e).passed) << e.value << " +- " << e.std_error;
    // R_T = exp(W_T - 1/2) is lognormal with variance e - 1.
    EXPECT_NEAR(e.std_error, std::sqrt((std::exp(1.0) - 1) / 20000), 0.1 * e.std_error);
    EXPECT_FALSE(w.degenerate);

    auto cw = girsanov_weights(solve_bsde_mc(cosine_problem(), run_config(100000, 6)));
    EXPECT_TRUE(weight_mean_check(cw, &e).passed) << e.value << " +- " << e.std_error;
    EXPECT_GT(cw.ess.back(), 0.9);
}

TEST(Girsanov, WeightedEstimateAndDegeneracy) {
    std::vector<double> g{1, 2, 3, 4, 5, 6};
    std::vector<double> ones(6, 1.0);
    auto a = weighted_estimate(ones, g);
    auto b = sample_estimate(g);
    EXPECT_NEAR(a.value, b.value, 1e-15);
    // Influence-function variance uses n - 1, as the plain estimate does.
    EXPECT_NEAR(a.std_error, b.std_error, 1e-15);
    std::vector<double> w(100, 1e-9);
    w[0] = 1.0;
    std::vector<double> gg(100, 1.0);
    EXPECT_THROW(weighted_estimate(w, gg), NumericalError);
    // Large constant-Z drift: the exponential weights collapse.
    Vector big = Vector::Constant(1, 4.0);
    auto deg = girsanov_weights(solve_bsde_mc(make_problem(linear_terminal(big)), run_config(2000, 1)));
    EXPECT_TRUE(deg.degenerate);
}

TEST(Bmo, BoundAndCalibration) {
    auto c = solve_bsde_mc(make_problem(constant_terminal(2.0)), run_config(100, 1));
    EXPECT_EQ(bmo_norm_estimate(c).value, 0.0);

    auto run = solve_bsde_mc(cosine_problem(), run_config(100000, 8));
    MCEstimate e;
    auto chk = bmo_check(run, 0.0, &e);
    EXPECT_TRUE(chk.passed);
    EXPECT_GT(e.value, 0.0);
    EXPECT_LE(e.value, 2.0 + 3 * e.std_error);
    // Under Q, Y_0 = E^Q[xi] - 1/2 E^Q int |Z|^2, up to O(dt).
    auto w = girsanov_weights(run);
    const double eq_xi = weighted_estimate(w.terminal(), run.xi).value;
    EXPECT_NEAR(2 * (eq_xi - run.Y[0]), e.value, 0.01);
    // Later start times carry less remaining variation.
    EXPECT_LT(bmo_norm_estimate(run, run.record_times[8]).value, e.value);

    Vector b = Vector::Constant(1, 1.0);
    auto lin = solve_bsde_mc(make_problem(linear_terminal(b)), run_config(5000, 9));
    auto le = bmo_norm_estimate(lin);
    EXPECT_LE(std::abs(le.value - 1.0), 3 * le.std_error + mc_floor(1.0));
    EXPECT_THROW(bmo_norm_estimate(lin, 0.123), PreconditionError);
}

TEST(QRepresentation, EntropicValueIsHalfScaleExpectation) {
    MCEstimate e;
    auto cos_run = solve_bsde_mc(cosine_problem(), run_config(50000, 10));
    EXPECT_TRUE(q_representation_check(cos_run, &e).passed) << e.value << " +- " << e.std_error;
    EXPECT_NEAR(e.value, 0.3257145166, 4 * e.std_error);
    auto step_run = solve_bsde_mc(make_problem(smoothed_step_terminal(0.6, 0.5), 1.0, Vector::Constant(1, 0.2)),
                                  run_config(50000, 11));
    EXPECT_TRUE(q_representation_check(step_run, &e).passed) << e.value << " +- " << e.std_error;
    // The unweighted mean sits strictly below Y_0 (Jensen), far outside the error bar.
    EXPECT_LT(sample_estimate(step_run.xi).value, step_run.Y[0] - 10 * e.std_error);
}

TEST(Submartingale, ConstantZ) {
    Vector b = Vector::Constant(1, 0.8);
    auto run = solve_bsde_mc(make_problem(linear_terminal(b)), run_config(200, 1, 1e-2, 8));
    auto flat = submartingale_diagnostic(run, 0.0);
    EXPECT_TRUE(flat.passed);
    for (const auto& v : flat.values) EXPECT_NEAR(v.value, 0.64, 1e-14);
    auto grow = submartingale_diagnostic(run, 0.7);
    EXPECT_TRUE(grow.passed);
    for (std::size_t j = 0; j < grow.values.size(); ++j)
        EXPECT_NEAR(grow.values[j].value, std::exp(0.7 * grow.times[j]) * 0.64, 1e-12);
    for (double d : grow.differences) EXPECT_GT(d, 0.0);
}

TEST(Submartingale, CosineTorusFlat) {
    auto run = solve_bsde_mc(cosine_problem(), run_config(100000, 12, 1e-2, 8));
    auto rep = submartingale_diagnostic(run, 0.0);
    EXPECT_EQ(rep.times.size(), 8u);
    EXPECT_TRUE(rep.passed) << to_json(rep).dump();
    EXPECT_TRUE(rep.violations.empty());
}

TEST(Submartingale, ForwardGaussianMatchesRecursion) {
    // Z_t = -X_t / tau_t with tau_t = T - t + t0. Under the discrete Q the
    // step is X' = X (1 - h / tau) + sqrt(h) xi, so E|X|^2 follows a scalar
    // recursion; the continuous limit is n (1/tau_t - 1/tau_0) + |x0|^2/tau_0^2.
    const double t0 = 0.5, T = 1.0, h = 1e-2;
    const int m = 2;
    Vector x0(2);
    x0 << 0.4, -0.3;
    auto run = solve_bsde_mc(make_problem(forward_gaussian_terminal(t0, m), T, x0), run_config(100000, 13, h, 8));
    auto rep = submartingale_diagnostic(run, 0.0);
    EXPECT_TRUE(rep.passed);
    for (std::size_t j = 0; j < rep.times.size(); ++j) {
        double mom = x0.squaredNorm();
        for (std::size_t k = 0; k < run.record_steps[j]; ++k) {
            const double tau = T - k * h + t0;
            mom = (1 - h / tau) * (1 - h / tau) * mom + m * h;
        }
        const double tau = T - rep.times[j] + t0;
        const double oracle = mom / (tau * tau);
        EXPECT_LE(std::abs(rep.values[j].value - oracle), 3 * rep.values[j].std_error + 1e-12) << j;
        const double cont = m * (1 / tau - 1 / (T + t0)) + x0.squaredNorm() / ((T + t0) * (T + t0));
        EXPECT_NEAR(oracle, cont, 0.02 * cont);
    }
}

TEST(LiYauDemo, ConstantTerminal) {
    LiYauDemoConfig cfg;
    cfg.n_paths = 10000;
    cfg.seed = 3;
    auto r = liyau_bsde_demo(cfg);
    EXPECT_NEAR(r.exact, 0.5, 1e-12);
    EXPECT_LE(std::abs(r.mc.value - r.exact), 3 * r.mc.std_error + 1e-12);
    cfg.C = 1e6;
    EXPECT_NEAR(liyau_bsde_demo(cfg).exact, 1.0, 1e-5);
    EXPECT_NEAR(liyau_constant_value(2.0, 3.0, 0.5), 2.0 / (1.0 / 3.0 + 1.0), 1e-15);
    cfg.C = -1;
    EXPECT_THROW(liyau_bsde_demo(cfg), PreconditionError);
    cfg.C = 1;
    cfg.amplitude = 1.2;
    EXPECT_THROW(liyau_bsde_demo(cfg), PreconditionError);
}

TEST(LiYauDemo, OscillatingTerminal) {
    LiYauDemoConfig cfg;
    cfg.C = 2.0;
    cfg.n = 1.0;
    cfg.amplitude = 0.1;
    cfg.n_paths = 10000;
    cfg.seed = 4;
    cfg.dt = 2e-3;
    auto r = liyau_bsde_demo(cfg);
    EXPECT_LE(std::abs(r.mc.value - r.oracle), 3 * r.mc.std_error) << r.mc.value << " vs " << r.oracle;
    EXPECT_GT(r.mc.std_error, 0.0);
    // First-order perturbation of the spatially constant solution:
    // y = ybar + eps C e^{-tau/2} (1 + C tau/n)^{-2} cos x + O(eps^2).
    const double ybar = liyau_constant_value(2.0, 1.0, 1.0);
    const double lin = ybar + 0.1 * 2.0 * std::exp(-0.5) / 9.0;
    EXPECT_NEAR(r.oracle, lin, 2 * 0.01 * 2.0);
    EXPECT_NEAR(r.oracle, lin, 0.2 * std::abs(lin - ybar));
}

TEST(Reports, CsvRow) {
    std::ostringstream os;
    write_estimate_header(os);
    write_estimate_row(os, "bmo", "abc", {0.25, 0.5, 10, 7});
    EXPECT_EQ(os.str(), "op,params_hash,value,stderr,n_paths,seed\nbmo," + params_hash("abc") + ",0.25,0.5,10,7\n");
    EXPECT_EQ(params_hash("abc").size(), 16u);
}
