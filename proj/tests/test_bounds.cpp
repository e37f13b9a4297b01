#include "heatbound/bounds.hpp"
#include "heatbound/heatpde.hpp"

#include <gtest/gtest.h>

#include <random>
#include <sstream>

using namespace heatbound;
using namespace heatbound::bounds;

namespace {
const double e1 = 1.0 - std::exp(-1.0);
}

TEST(Th11, Examples) {
    EXPECT_DOUBLE_EQ(bound_th11(1, 0.5), 2.0);
    EXPECT_DOUBLE_EQ(bound_th11(2, 0), 0.0);
    EXPECT_DOUBLE_EQ(bound_th11(4, 1), 1.0);
    EXPECT_THROW(bound_th11(0, 1), PreconditionError);
}

TEST(LiYau, UpperExamples) {
    EXPECT_DOUBLE_EQ(liyau_upper(1, CValue::of(1), 1), 0.5);
    for (double t : {0.0, 0.3, 5.0}) EXPECT_EQ(liyau_upper(t, CValue::of(0), 2), 0.0);
    EXPECT_DOUBLE_EQ(liyau_upper(2, CValue::infinity(), 3), 1.5);
    EXPECT_THROW(liyau_upper(0, CValue::infinity(), 3), PreconditionError);
    EXPECT_EQ(CValue::of(std::numeric_limits<double>::infinity()).infinite, true);
    EXPECT_EQ(CValue::parse("inf").infinite, true);
    EXPECT_THROW(CValue::parse("abc"), PreconditionError);
}

TEST(LiYau, LowerExamples) {
    EXPECT_DOUBLE_EQ(liyau_lower(0.5, 1, 1), -2.0);
    EXPECT_DOUBLE_EQ(liyau_lower(0, 3.0, 2), -3.0);
    EXPECT_NEAR(liyau_lower(0.99 * 2 / 3.0, 3.0, 2), -300.0, 1e-9);
    EXPECT_THROW(liyau_lower(1.0, 1.0, 1), PreconditionError);
    EXPECT_THROW(liyau_lower(2.0, 1.0, 1), PreconditionError);
}

TEST(LiYau, Monotonicity) {
    std::mt19937_64 gen(1);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    for (int i = 0; i < 1000; ++i) {
        const double t1 = u(gen), t2 = t1 + u(gen), c1 = u(gen), c2 = c1 + u(gen);
        const int n = 1 + i % 4;
        EXPECT_GE(liyau_upper(t1, CValue::of(c1), n), liyau_upper(t2, CValue::of(c1), n));
        EXPECT_LE(liyau_upper(t1, CValue::of(c1), n), liyau_upper(t1, CValue::of(c2), n));
        if (c1 > 0 && t2 < n / c1) {
            EXPECT_GE(liyau_lower(t1, c1, n), liyau_lower(t2, c1, n));
        }
    }
}

TEST(LiYau, GaussianEqualityCases) {
    using heatpde::gaussian_oracle;
    using heatpde::GaussianKind;
    std::mt19937_64 gen(2);
    std::uniform_real_distribution<double> u(0.1, 2.0);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 1 + trial % 3;
        Vector x = Vector::NullaryExpr(n, [&] { return u(gen) - 1.0; });
        const double t = u(gen), s2 = u(gen);
        EXPECT_NEAR(gaussian_oracle(GaussianKind::forward, t, x).G, liyau_upper(t, CValue::infinity(), n), 1e-12 * n / t);
        EXPECT_NEAR(gaussian_oracle(GaussianKind::initial, t, x, s2).G, liyau_upper(t, CValue::of(n / s2), n), 1e-12 * n / s2);
        const double tb = t * s2 / 2.1;  // inside the window t < sigma^2
        const double G = gaussian_oracle(GaussianKind::backward, tb, x, s2).G;
        EXPECT_NEAR(G, liyau_lower(tb, n / s2, n), 1e-12 * std::abs(G));
    }
}

TEST(DampedBounds, Examples) {
    EXPECT_NEAR(bound_est_o1(1, 1, 1), 4 / e1, 1e-12);
    EXPECT_NEAR(bound_est_o1(1, 1, 1), 6.3279, 1e-4);
    EXPECT_DOUBLE_EQ(bound_est_o1(0, 1, 0.5), bound_th11(1, 0.5));
    EXPECT_NEAR(bound_est_o1(2, 0.5, 1), 8 / e1, 1e-12);
    EXPECT_NEAR(bound_est_o1(2, 0.5, 1), 12.656, 1e-3);
    EXPECT_NEAR(bound_est_o2(1, 1, 1), 6.3279, 1e-4);
    EXPECT_DOUBLE_EQ(bound_est_o2(0, 2, 2), 8.0);
    EXPECT_NEAR(bound_est_o2(1, 1, 0.5), 1.5820, 1e-4);
    EXPECT_NEAR(bound_th41(2, 1, 1), 4 / e1, 1e-12);
    EXPECT_DOUBLE_EQ(bound_th41(0, 1, 0.5), 2.0);
    EXPECT_NEAR(bound_th41(1, 2, 1), 2 / e1, 1e-12);
    EXPECT_NEAR(bound_th41(1, 2, 1), 3.1639, 1e-4);
    EXPECT_THROW(bound_est_o1(1, 0, 1), PreconditionError);
    EXPECT_THROW(bound_th41(1, -1, 1), PreconditionError);
}

TEST(DampedBounds, LimitConsistency) {
    for (double h : {0.5, 1.0, 3.0}) {
        EXPECT_NEAR(bound_est_o1(1e-6, h, 0.7) / (4 * 0.7 / h), 1.0, 1e-5);
        EXPECT_NEAR(bound_th41(1e-6, h, 0.7) / (4 * 0.7 / h), 1.0, 1e-5);
    }
    // The series branch joins the closed form continuously.
    for (double K : {0.99e-8, 1.01e-8, 1e-12}) EXPECT_NEAR(bound_est_o1(K, 1.0, 1.0), 4 * K / -std::expm1(-K), 1e-14);
    EXPECT_NEAR(bound_est_o1(1e-3, 1, 1), 4e-3 / -std::expm1(-1e-3), 1e-12);
}

TEST(Harnack, Examples) {
    EXPECT_NEAR(harnack_bound(1, 1, 1, CValue::infinity(), 1), std::sqrt(2.0) * std::exp(0.5), 1e-12);
    for (double s : {0.1, 1.0, 7.0}) EXPECT_GE(harnack_bound(2, s, 0, CValue::infinity(), 3), 1.0);
    for (double c : {0.5, 2.0}) EXPECT_GE(harnack_bound(1, 0.5, 0, CValue::of(c), 2), 1.0);
    // Heat kernel ratio p_1(0) / p_2(1) = sqrt(2) e^{1/4}.
    const double ratio = std::sqrt(2.0) * std::exp(0.25);
    EXPECT_NEAR(ratio, 1.81589, 1e-5);
    EXPECT_LE(ratio, harnack_bound(1, 1, 1, CValue::infinity(), 1));
    // Finite C tends to the infinite branch.
    EXPECT_NEAR(harnack_bound(1, 1, 1, CValue::of(1e12), 2), harnack_bound(1, 1, 1, CValue::infinity(), 2), 1e-9);
}

TEST(Psi, Admissibility) {
    std::vector<double> pts;
    for (int i = 1; i <= 50; ++i) pts.push_back(0.05 * i * i);
    auto lg = psi_admissible(psi_log(), pts);
    EXPECT_TRUE(lg.admissible);
    EXPECT_TRUE(lg.equality);
    auto lin = psi_admissible(psi_linear(), pts);
    EXPECT_TRUE(lin.admissible);
    auto sq = psi_admissible(psi_sqrt(), pts);
    EXPECT_FALSE(sq.admissible);
    EXPECT_GT(sq.witness, 0.0);
    // At a = 1/2: (a-1)(a-2) = 0.75 against 2 (a-1)^2 = 0.5.
    const double u = sq.witness;
    EXPECT_NEAR(sq.slack, (0.5 - 0.75) * 0.25 * std::pow(u, -3.0), 1e-12 * std::pow(u, -3.0));
    auto convex = psi_admissible(psi_power(2.0), pts);
    EXPECT_FALSE(convex.admissible);
    EXPECT_THROW(psi_admissible(psi_log(), {0.0}), PreconditionError);
    EXPECT_THROW(psi_admissible(psi_power(-1e308), {1e-300}), NumericalError);
}

TEST(BoundSpec, ParseEvaluateAndRoundTrip) {
    auto b = parse_bound_spec("kind=est_o1,K=1,horizon=1,M=1");
    EXPECT_NEAR(b.evaluate(), 4 / e1, 1e-12);
    EXPECT_EQ(b.params(), "K=1;horizon=1;M=1");
    auto h = parse_bound_spec("kind=harnack;t=1;s=1;r=1;C=inf;n=1");
    EXPECT_NEAR(h.evaluate(), std::sqrt(2.0) * std::exp(0.5), 1e-12);
    auto j = bound_spec_from_json(nlohmann::json::parse(R"({"kind":"liyau_upper","t":2,"C":"inf","n":3})"));
    EXPECT_DOUBLE_EQ(j.evaluate(), 1.5);
    EXPECT_THROW(parse_bound_spec("kind=nope"), PreconditionError);
    EXPECT_THROW(parse_bound_spec("kind=th11,q=1"), PreconditionError);
    EXPECT_THROW(parse_bound_spec("kind=th11,t"), PreconditionError);
    for (const auto& [kind, name] : bound_kind_names()) {
        BoundSpec s;
        s.kind = kind;
        s.C = CValue::of(0.5);
        EXPECT_EQ(parse_bound_spec("kind=" + name + "," + s.params()).params(), s.params());
    }
}

TEST(Checks, FieldAgainstBound) {
    BoundSpec ly;
    ly.kind = BoundKind::liyau_upper;
    ly.t = 0.8;
    ly.n = 1;
    auto r = check_field_against_bound(1.0 / 0.8, ly);
    EXPECT_TRUE(r.passed);
    EXPECT_NEAR(r.margin, 0.0, 1e-15);
    EXPECT_TRUE(check_field_against_bound(0.0, parse_bound_spec("kind=est_o2,K=1,horizon=1,M=0.3")).passed);
    EXPECT_FALSE(check_field_against_bound(2.1, parse_bound_spec("kind=th11,t=1,M=0.5")).passed);

    heatpde::TorusGrid g(1, 256);
    auto u = heatpde::solve_heat(heatpde::exp_cosine_data(g, 0.5), {1e-3, heatpde::Scheme::crank_nicolson, 1.0, {}, true})
                 .snapshots.back();
    const double observed = heatpde::log_diagnostics(u).grad_f_sq.maxCoeff();
    auto th = check_field_against_bound(observed, parse_bound_spec("kind=th11,t=1,M=0.5"),
                                        default_tolerance(ToleranceContext::grid, g.h()));
    EXPECT_TRUE(th.passed);
    EXPECT_GT(th.margin, 1.5);
}

TEST(Checks, CsvRows) {
    std::ostringstream os;
    write_check_header(os);
    auto b = parse_bound_spec("kind=th11,t=1,M=0.5");
    write_check_row(os, b, check_field_against_bound(1.0, b));
    EXPECT_EQ(os.str(), "kind,params,bound,observed,margin,tolerance,passed,context\n"
                        "th11,t=1;M=0.5,2,1,1,1.0000000000000001e-09,true,th11[t=1;M=0.5]\n");
    EXPECT_DOUBLE_EQ(default_tolerance(ToleranceContext::monte_carlo, 0, 1, 0.2), 0.6000000000000001);
}
