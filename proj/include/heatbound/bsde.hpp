#pragma once

// Quadratic BSDE dY = Z dB - 1/2 |Z|^2 dt, Y_T = f0(x + B_T), solved through
// its entropic closed form Y_t = log P_{T-t} e^{f0}(X_t), with Monte Carlo
// path functionals, Girsanov reweighting and the diagnostics built on them.

#include "heatbound/common.hpp"
#include "heatbound/heatpde.hpp"
#include "heatbound/random.hpp"

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <memory>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

namespace heatbound::bsde {

// ---- Gauss-Hermite quadrature ---------------------------------------------

/// Nodes and weights for E[g(xi)], xi ~ N(0, 1). Weights sum to one.
struct Quadrature {
    std::vector<double> nodes;
    std::vector<double> weights;
};

/// Golub-Welsch on the Jacobi matrix of the probabilists' Hermite
/// polynomials.
inline Quadrature gauss_hermite(int q) {
    require(q >= 1 && q <= 400, "gauss_hermite: node count must be in [1, 400]");
    Matrix J = Matrix::Zero(q, q);
    for (int k = 1; k < q; ++k) J(k, k - 1) = J(k - 1, k) = std::sqrt(double(k));
    Eigen::SelfAdjointEigenSolver<Matrix> es(J);
    if (es.info() != Eigen::Success) throw NumericalError("gauss_hermite: eigen solve failed");
    Quadrature g;
    for (int k = 0; k < q; ++k) {
        g.nodes.push_back(es.eigenvalues()(k));
        g.weights.push_back(es.eigenvectors()(0, k) * es.eigenvectors()(0, k));
    }
    return g;
}

/// E[fn(x + sqrt(tau) xi)] for xi ~ N(0, I_m) by a tensor rule with q nodes
/// per axis.
template <class Fn>
double gaussian_expectation(Fn&& fn, const Vector& x, double tau, const Quadrature& g) {
    require(tau >= 0, "gaussian_expectation: tau must be nonnegative");
    const int m = int(x.size());
    const std::size_t q = g.nodes.size();
    std::size_t total = 1;
    for (int a = 0; a < m; ++a) {
        total *= q;
        require(total <= 1u << 20, "gaussian_expectation: tensor rule too large");
    }
    const double s = std::sqrt(tau);
    Vector y(m);
    std::vector<double> terms(total);
    for (std::size_t idx = 0; idx < total; ++idx) {
        std::size_t r = idx;
        double w = 1.0;
        for (int a = 0; a < m; ++a) {
            const std::size_t i = r % q;
            r /= q;
            y(a) = x(a) + s * g.nodes[i];
            w *= g.weights[i];
        }
        terms[idx] = w * fn(y);
    }
    return pairwise_sum(terms);
}

// ---- terminal families and the entropic oracle ----------------------------

/// Y(tau, x) = log P_tau e^{f0}(x); writes Z = grad Y into z.
using OracleFn = std::function<double(double tau, const Vector& x, Vector& z)>;

struct Terminal {
    std::string family;
    nlohmann::json params;
    int dim = 1;
    double sup_norm = std::numeric_limits<double>::infinity();  // inf: unbounded demo family
    std::function<double(const Vector&)> value;
    OracleFn oracle;

    bool bounded() const { return std::isfinite(sup_norm); }
};

inline Terminal constant_terminal(double c, int dim = 1) {
    require(std::isfinite(c) && dim >= 1, "constant_terminal: finite value and positive dimension required");
    Terminal t{"constant", {{"c", c}, {"dim", dim}}, dim, std::abs(c), {}, {}};
    t.value = [c](const Vector&) { return c; };
    t.oracle = [c](double, const Vector&, Vector& z) {
        z.setZero();
        return c;
    };
    return t;
}

/// f0(x) = b.x. Unbounded, but Gaussian-integrable: Y = b.x + |b|^2 tau / 2.
inline Terminal linear_terminal(const Vector& b) {
    require(b.size() >= 1 && b.allFinite(), "linear_terminal: finite nonempty b required");
    Terminal t{"linear", {{"b", std::vector<double>(b.data(), b.data() + b.size())}}, int(b.size()),
               std::numeric_limits<double>::infinity(), {}, {}};
    t.value = [b](const Vector& x) { return b.dot(x); };
    const double b2 = b.squaredNorm();
    t.oracle = [b, b2](double tau, const Vector& x, Vector& z) {
        z = b;
        return b.dot(x) + 0.5 * b2 * tau;
    };
    return t;
}

/// f0(x) = a sum_i cos x_i on the 2 pi torus. Each axis evolves by the
/// Bessel series P_s e^{a cos x} = I0(a) + 2 sum_k I_k(a) e^{-k^2 s/2} cos kx.
inline Terminal cosine_terminal(double a, int dim = 1) {
    require(std::isfinite(a) && std::abs(a) <= 500.0, "cosine_terminal: |a| must be at most 500");
    require(dim >= 1, "cosine_terminal: dimension must be positive");
    auto ratio = std::make_shared<std::vector<double>>();
    const double aa = std::abs(a);
    const double i0 = std::cyl_bessel_i(0.0, aa);
    for (int k = 1; k <= 400; ++k) {
        double r = aa == 0.0 ? 0.0 : std::cyl_bessel_i(double(k), aa) / i0;
        if (a < 0 && k % 2 == 1) r = -r;
        if (std::abs(r) < 1e-18) break;
        ratio->push_back(r);
    }
    const double log_i0 = std::log(i0);
    Terminal t{"cosine", {{"a", a}, {"dim", dim}}, dim, aa * dim, {}, {}};
    t.value = [a](const Vector& x) { return a * x.array().cos().sum(); };
    t.oracle = [ratio, log_i0](double tau, const Vector& x, Vector& z) {
        const double q = std::exp(-0.5 * tau), q2 = q * q;
        double y = 0.0;
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            const double c1 = std::cos(x(i)), s1 = std::sin(x(i));
            double ck = c1, sk = s1, p = q, qk = q;  // qk = q^{k^2}, p = q^{2k-1}
            double S = 1.0, dS = 0.0;
            for (std::size_t k = 1; k <= ratio->size(); ++k) {
                const double rk = (*ratio)[k - 1] * qk;
                S += 2.0 * rk * ck;
                dS -= 2.0 * double(k) * rk * sk;
                if (std::abs(rk) < 1e-18) break;
                const double cn = ck * c1 - sk * s1;
                sk = sk * c1 + ck * s1;
                ck = cn;
                p *= q2;
                qk *= p;
            }
            y += log_i0 + std::log(S);
            z(i) = dS / S;
        }
        return y;
    };
    return t;
}

/// f0 = log of the forward Gaussian kernel at time t0, so that
/// Y = log p_{t0 + tau}(x) and Z = -x / (t0 + tau). Unbounded.
inline Terminal forward_gaussian_terminal(double t0, int dim = 1) {
    require(t0 > 0 && std::isfinite(t0), "forward_gaussian_terminal: t0 must be positive");
    require(dim >= 1, "forward_gaussian_terminal: dimension must be positive");
    Terminal t{"forward_gaussian", {{"t0", t0}, {"dim", dim}}, dim, std::numeric_limits<double>::infinity(), {}, {}};
    const double m = dim;
    auto logp = [m](double s, const Vector& x) {
        return -0.5 * m * std::log(2.0 * std::numbers::pi * s) - x.squaredNorm() / (2.0 * s);
    };
    t.value = [logp, t0](const Vector& x) { return logp(t0, x); };
    t.oracle = [logp, t0](double tau, const Vector& x, Vector& z) {
        z = -x / (t0 + tau);
        return logp(t0 + tau, x);
    };
    return t;
}

/// One-dimensional terminal evaluated by Gauss-Hermite quadrature, with
/// Z obtained by differentiating under the integral. The rule is checked
/// against one with twice the nodes at construction.
inline Terminal quadrature_terminal(std::string family, nlohmann::json params, std::function<double(double)> f0,
                                    std::function<double(double)> df0, double sup_norm, int nodes = 64,
                                    double max_tau = 4.0) {
    auto eval = [f0, df0](const Quadrature& g, double tau, double x, double& zout) {
        if (tau == 0.0) {
            zout = df0(x);
            return f0(x);
        }
        const double s = std::sqrt(tau);
        double M = -std::numeric_limits<double>::infinity();
        for (double xi : g.nodes) M = std::max(M, f0(x + s * xi));
        double S = 0.0, D = 0.0;
        for (std::size_t i = 0; i < g.nodes.size(); ++i) {
            const double y = x + s * g.nodes[i];
            const double e = g.weights[i] * std::exp(f0(y) - M);
            S += e;
            D += e * df0(y);
        }
        zout = D / S;
        return M + std::log(S);
    };
    auto g = std::make_shared<Quadrature>(gauss_hermite(nodes));
    const Quadrature fine = gauss_hermite(2 * nodes);
    for (double tau : {0.01, 0.1, 0.5, 1.0, max_tau})
        for (double x : {-1.5, -0.4, 0.0, 0.3, 1.0}) {
            double z1, z2;
            const double a = eval(*g, tau, x, z1), b = eval(fine, tau, x, z2);
            if (std::abs(a - b) > 1e-10 * (1 + std::abs(b)) || std::abs(z1 - z2) > 1e-8 * (1 + std::abs(z2)))
                throw NumericalError("quadrature non-convergence for terminal '" + family + "' at tau=" +
                                     fmt_num(tau) + ", x=" + fmt_num(x));
        }
    Terminal t{std::move(family), std::move(params), 1, sup_norm, {}, {}};
    t.value = [f0](const Vector& x) { return f0(x(0)); };
    t.oracle = [g, eval](double tau, const Vector& x, Vector& z) {
        double zz;
        const double y = eval(*g, tau, x(0), zz);
        z(0) = zz;
        return y;
    };
    return t;
}

/// Smoothed two-valued terminal with values in (-a, a):
/// e^{f0(x)} = e^{-a} + (e^a - e^{-a}) Phi(x / eps). The heat flow only widens
/// the normal CDF, so P_tau e^{f0} has the same form with eps^2 + tau.
inline Terminal smoothed_step_terminal(double a, double eps = 0.5) {
    require(std::isfinite(a) && a >= 0 && a <= 300, "smoothed_step_terminal: a must be in [0, 300]");
    require(eps > 0 && std::isfinite(eps), "smoothed_step_terminal: eps must be positive");
    const double lo = std::exp(-a), jump = std::exp(a) - lo;
    auto Phi = [](double u) { return 0.5 * std::erfc(-u / std::numbers::sqrt2); };
    Terminal t{"smoothed_step", {{"a", a}, {"eps", eps}}, 1, a, {}, {}};
    t.value = [=](const Vector& x) { return std::log(lo + jump * Phi(x(0) / eps)); };
    t.oracle = [=](double tau, const Vector& x, Vector& z) {
        const double s = std::sqrt(eps * eps + tau), u = x(0) / s;
        const double P = lo + jump * Phi(u);
        z(0) = jump * std::exp(-0.5 * u * u) / (std::sqrt(2 * std::numbers::pi) * s * P);
        return std::log(P);
    };
    return t;
}

/// Terminal given on a torus grid: e^{f0} = u0 is evolved by the heat
/// solver and log u is interpolated in space (multilinear) and in time
/// (linear between snapshots spaced dtau).
inline Terminal grid_terminal(const heatpde::ScalarField& u0, double horizon, double dtau = 1e-2, double dt = 1e-3) {
    require(u0.min() > 0, "grid_terminal: initial data must be positive");
    require(horizon > 0 && dtau > 0, "grid_terminal: positive horizon and dtau required");
    const auto& g = u0.grid;
    const auto K = std::size_t(std::ceil(horizon / dtau - 1e-9));
    const double step = horizon / double(K);
    heatpde::SolveConfig cfg{std::min(dt, step), heatpde::Scheme::crank_nicolson, horizon, {}, true};
    for (std::size_t k = 0; k <= K; ++k) cfg.snapshot_times.push_back(std::min(horizon, k * step));
    const auto traj = heatpde::solve_heat(u0, cfg);
    struct Snap {
        Vector logu;
        std::vector<Vector> grad;
    };
    auto snaps = std::make_shared<std::vector<Snap>>();
    for (const auto& s : traj.snapshots) {
        heatpde::ScalarField f(g, s.values.array().log().matrix());
        Snap sn{f.values, {}};
        for (int a = 0; a < g.n; ++a) sn.grad.push_back(heatpde::central_difference(f, a));
        snaps->push_back(std::move(sn));
    }
    const Vector f0 = u0.values.array().log().matrix();
    Terminal t{"grid", {{"N", g.N}, {"dim", g.n}, {"L", g.L}, {"horizon", horizon}, {"dtau", step}}, g.n,
               f0.cwiseAbs().maxCoeff(), {}, {}};
    t.value = [g, f0](const Vector& x) { return heatpde::interpolate(g, f0, x); };
    t.oracle = [g, snaps, step](double tau, const Vector& x, Vector& z) {
        const double s = tau / step;
        require(s >= -1e-9 && s <= double(snaps->size() - 1) + 1e-9, "grid_terminal: tau outside the solved horizon");
        const auto k = std::min(snaps->size() - 2, std::size_t(std::max(0.0, std::floor(s))));
        const double w = std::clamp(s - double(k), 0.0, 1.0);
        const auto& A = (*snaps)[k];
        const auto& B = (*snaps)[k + 1];
        for (int a = 0; a < g.n; ++a)
            z(a) = (1 - w) * heatpde::interpolate(g, A.grad[a], x) + w * heatpde::interpolate(g, B.grad[a], x);
        return (1 - w) * heatpde::interpolate(g, A.logu, x) + w * heatpde::interpolate(g, B.logu, x);
    };
    return t;
}

/// f0 + c. Y shifts by c and Z is unchanged.
inline Terminal shifted(Terminal base, double c) {
    require(std::isfinite(c), "shifted: finite shift required");
    Terminal t = base;
    t.params = {{"base", base.params}, {"base_family", base.family}, {"shift", c}};
    t.family = "shifted";
    t.sup_norm = base.bounded() ? base.sup_norm + std::abs(c) : base.sup_norm;
    t.value = [v = base.value, c](const Vector& x) { return v(x) + c; };
    t.oracle = [o = base.oracle, c](double tau, const Vector& x, Vector& z) { return o(tau, x, z) + c; };
    return t;
}

namespace detail {
inline void allow_keys(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
    require(j.is_object(), where + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (auto k : keys) ok = ok || it.key() == k;
        require(ok, where + ": unknown key '" + it.key() + "'");
    }
}
}  // namespace detail

/// {"family": constant{c, dim} | linear{b} | cosine{a, dim} |
/// forward_gaussian{t0, dim} | smoothed_step{a, eps} |
/// grid{N, dtau, initial} }. grid needs the horizon.
inline Terminal terminal_from_json(const nlohmann::json& j, double horizon = 1.0) {
    require(j.is_object() && j.contains("family"), "terminal: object with 'family' required");
    const auto fam = j.at("family").get<std::string>();
    if (fam == "constant") {
        detail::allow_keys(j, {"family", "c", "dim"}, "terminal constant");
        return constant_terminal(j.value("c", 0.0), j.value("dim", 1));
    }
    if (fam == "linear") {
        detail::allow_keys(j, {"family", "b"}, "terminal linear");
        const auto b = j.at("b").get<std::vector<double>>();
        return linear_terminal(Eigen::Map<const Vector>(b.data(), Eigen::Index(b.size())));
    }
    if (fam == "cosine") {
        detail::allow_keys(j, {"family", "a", "dim"}, "terminal cosine");
        return cosine_terminal(j.value("a", 0.5), j.value("dim", 1));
    }
    if (fam == "forward_gaussian") {
        detail::allow_keys(j, {"family", "t0", "dim"}, "terminal forward_gaussian");
        return forward_gaussian_terminal(j.value("t0", 1.0), j.value("dim", 1));
    }
    if (fam == "smoothed_step") {
        detail::allow_keys(j, {"family", "a", "eps"}, "terminal smoothed_step");
        return smoothed_step_terminal(j.value("a", 0.5), j.value("eps", 0.5));
    }
    if (fam == "grid") {
        detail::allow_keys(j, {"family", "N", "dim", "dtau", "initial"}, "terminal grid");
        heatpde::TorusGrid g(j.value("dim", 1), j.value("N", 256));
        return grid_terminal(heatpde::initial_data_from_json(g, j.at("initial")), horizon, j.value("dtau", 1e-2));
    }
    throw PreconditionError("terminal: unknown family '" + fam + "'");
}

// ---- problem --------------------------------------------------------------

struct BSDEProblem {
    double T = 1.0;
    Vector x0;
    Terminal terminal;
    std::string driver = "quadratic-half";  // h(y, z) = -|z|^2 / 2, the only shipped driver

    int dim() const { return terminal.dim; }

    void validate() const {
        require(T > 0 && std::isfinite(T), "BSDEProblem: horizon must be positive");
        require(bool(terminal.oracle) && bool(terminal.value), "BSDEProblem: terminal not set");
        require(x0.size() == terminal.dim, "BSDEProblem: start point has wrong dimension");
        require(x0.allFinite(), "BSDEProblem: start point must be finite");
        require(driver == "quadratic-half", "BSDEProblem: unsupported driver '" + driver + "'");
    }

    /// Canonical parameter string, hashed into CSV rows.
    std::string params() const {
        nlohmann::json j{{"T", T}, {"x0", std::vector<double>(x0.data(), x0.data() + x0.size())},
                         {"family", terminal.family}, {"terminal", terminal.params}, {"driver", driver}};
        return j.dump();
    }
};

inline BSDEProblem make_problem(Terminal term, double T = 1.0, Vector x0 = Vector()) {
    BSDEProblem p;
    p.T = T;
    p.x0 = x0.size() ? std::move(x0) : Vector::Zero(term.dim);
    p.terminal = std::move(term);
    p.validate();
    return p;
}

inline BSDEProblem problem_from_json(const nlohmann::json& j) {
    detail::allow_keys(j, {"T", "x0", "terminal", "driver"}, "bsde problem");
    const double T = j.value("T", 1.0);
    Terminal term = terminal_from_json(j.at("terminal"), T);
    Vector x0 = Vector::Zero(term.dim);
    if (j.contains("x0")) {
        const auto v = j.at("x0").get<std::vector<double>>();
        x0 = Eigen::Map<const Vector>(v.data(), Eigen::Index(v.size()));
    }
    BSDEProblem p = make_problem(std::move(term), T, x0);
    p.driver = j.value("driver", std::string("quadratic-half"));
    p.validate();
    return p;
}

struct OracleValue {
    double Y = 0.0;
    Vector Z;
};

/// Markovian solution at time t and state x.
inline OracleValue entropic_oracle(const BSDEProblem& p, double t, const Vector& state) {
    p.validate();
    require(t >= 0 && t <= p.T, "entropic_oracle: t outside [0, T]");
    require(state.size() == p.dim(), "entropic_oracle: state has wrong dimension");
    OracleValue v{0.0, Vector::Zero(p.dim())};
    v.Y = p.terminal.oracle(p.T - t, state, v.Z);
    if (!std::isfinite(v.Y) || !v.Z.allFinite()) throw NumericalError("entropic_oracle: non-finite value");
    return v;
}

/// E[f0(x + B_tau)] by quadrature; Y dominates it (Jensen).
inline double terminal_mean(const Terminal& term, double tau, const Vector& x, int nodes = 16) {
    return gaussian_expectation(term.value, x, tau, gauss_hermite(nodes));
}

// ---- Monte Carlo ----------------------------------------------------------

struct RunConfig {
    double dt = 1e-2;
    std::size_t n_paths = 10000;
    std::uint64_t seed = 0;
    std::size_t records = 16;           // grid times kept per path, including 0 and T
    bool conditional_residual = false;  // costs a quadrature per step
    int residual_nodes = 8;

    void validate() const {
        require(dt > 0 && std::isfinite(dt), "RunConfig: dt must be positive");
        require(n_paths >= 2, "RunConfig: need at least two paths");
        require(records >= 2, "RunConfig: need at least two recorded times");
        require(residual_nodes >= 2, "RunConfig: need at least two quadrature nodes");
    }
};

/// Per-path functionals of one Monte Carlo run. Arrays indexed by record
/// are row-major [path * n_records + j].
struct BSDERun {
    BSDEProblem problem;
    RunConfig config;
    std::size_t steps = 0;
    double h = 0.0;
    std::vector<std::size_t> record_steps;
    std::vector<double> record_times;

    std::vector<double> Y;   // Y at recorded times
    std::vector<double> Zsq; // |Z|^2 at recorded times
    std::vector<double> S1;  // sum_{k < j} Z_k . dw_k
    std::vector<double> S2;  // sum_{k < j} |Z_k|^2 h
    std::vector<double> xi;  // terminal value f0(X_T)
    std::vector<double> residual;              // Y_T - Y_0 - sum Z dw + 1/2 sum |Z|^2 h
    std::vector<double> conditional_residual;  // sum_k (E_k Y_{k+1} - Y_k + 1/2 |Z_k|^2 h)

    std::size_t n_paths() const { return xi.size(); }
    std::size_t n_records() const { return record_steps.size(); }
    std::size_t at(std::size_t path, std::size_t j) const { return path * n_records() + j; }

    std::vector<double> column(const std::vector<double>& a, std::size_t j) const {
        std::vector<double> out(n_paths());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[at(i, j)];
        return out;
    }

    /// Index of the recorded time equal to t (within half a step).
    std::size_t record_index(double t) const {
        for (std::size_t j = 0; j < record_times.size(); ++j)
            if (std::abs(record_times[j] - t) <= 0.5 * h) return j;
        throw PreconditionError("BSDERun: t = " + fmt_num(t) + " is not a recorded time");
    }
};

inline std::vector<std::size_t> record_grid(std::size_t steps, std::size_t records) {
    require(records <= steps + 1, "record_grid: more recorded times than time steps");
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < records; ++j)
        out.push_back(std::size_t(std::llround(double(j) * double(steps) / double(records - 1))));
    return out;
}

/// Simulates X = x0 + B on a uniform grid and evaluates (Y, Z) along each
/// path from the oracle. Path i draws from stream i of the seed.
inline BSDERun solve_bsde_mc(const BSDEProblem& p, const RunConfig& cfg) {
    p.validate();
    cfg.validate();
    BSDERun run;
    run.problem = p;
    run.config = cfg;
    run.steps = std::size_t(std::ceil(p.T / cfg.dt - 1e-9));
    run.h = p.T / double(run.steps);
    run.record_steps = record_grid(run.steps, cfg.records);
    for (auto k : run.record_steps) run.record_times.push_back(k == run.steps ? p.T : double(k) * run.h);
    const std::size_t n = cfg.n_paths, R = run.n_records();
    run.Y.resize(n * R);
    run.Zsq.resize(n * R);
    run.S1.resize(n * R);
    run.S2.resize(n * R);
    run.xi.resize(n);
    run.residual.resize(n);
    run.conditional_residual.assign(n, 0.0);
    const int m = p.dim();
    const double h = run.h, sh = std::sqrt(h);
    const Quadrature quad = gauss_hermite(cfg.residual_nodes);
    const auto& oracle = p.terminal.oracle;

    parallel_for(n, [&](std::size_t i) {
        PathRng rng(cfg.seed, i);
        Vector X = p.x0, Z(m), Zn(m), dw(m);
        double s1 = 0.0, s2 = 0.0, cond = 0.0, y0 = 0.0;
        std::size_t next = 0;
        for (std::size_t k = 0;; ++k) {
            const double tau = k == run.steps ? 0.0 : p.T - double(k) * h;
            const double Y = oracle(tau, X, Z);
            if (!std::isfinite(Y) || !Z.allFinite()) throw NumericalError("solve_bsde_mc: oracle returned non-finite value");
            if (k == 0) y0 = Y;
            const double z2 = Z.squaredNorm();
            if (next < R && run.record_steps[next] == k) {
                const auto idx = run.at(i, next++);
                run.Y[idx] = Y;
                run.Zsq[idx] = z2;
                run.S1[idx] = s1;
                run.S2[idx] = s2;
            }
            if (k == run.steps) break;
            if (cfg.conditional_residual) {
                const double tn = std::max(0.0, tau - h);
                const double ey = gaussian_expectation([&](const Vector& y) { return oracle(tn, y, Zn); }, X, h, quad);
                cond += ey - Y + 0.5 * z2 * h;
            }
            for (int a = 0; a < m; ++a) dw(a) = sh * rng.normal();
            s1 += Z.dot(dw);
            s2 += z2 * h;
            X += dw;
        }
        run.xi[i] = p.terminal.value(X);
        run.residual[i] = run.xi[i] - y0 - s1 + 0.5 * s2;
        run.conditional_residual[i] = cond;
    });
    return run;
}

struct ResidualReport {
    double mean_abs = 0.0;              // pathwise, O(sqrt dt)
    double max_abs = 0.0;
    double mean_abs_conditional = 0.0;  // drift part, O(dt)
};

inline ResidualReport residual_report(const BSDERun& run) {
    ResidualReport r;
    std::vector<double> a(run.n_paths()), c(run.n_paths());
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = std::abs(run.residual[i]);
        c[i] = std::abs(run.conditional_residual[i]);
        r.max_abs = std::max(r.max_abs, a[i]);
    }
    r.mean_abs = pairwise_mean(a);
    r.mean_abs_conditional = pairwise_mean(c);
    return r;
}

// ---- weighted estimation --------------------------------------------------

/// Smallest standard error used when comparing a Monte Carlo value with a
/// target: estimators with zero variance are compared to rounding.
inline double mc_floor(double scale) { return 1e-12 * (1.0 + std::abs(scale)); }

/// Fraction below which the effective sample size flags weight degeneracy.
inline constexpr double min_ess_fraction = 0.05;

inline double ess_fraction(std::span<const double> w) {
    std::vector<double> sq(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) sq[i] = w[i] * w[i];
    const double s = pairwise_sum(w), s2 = pairwise_sum(sq);
    return s2 > 0 ? s * s / s2 / double(w.size()) : 0.0;
}

/// Self-normalized estimate sum w g / sum w with delta-method standard
/// error. Throws when the effective sample size falls below 5%.
inline MCEstimate weighted_estimate(std::span<const double> w, std::span<const double> g, std::uint64_t seed = 0) {
    require(w.size() == g.size() && w.size() >= 2, "weighted_estimate: matching arrays of size >= 2 required");
    if (ess_fraction(w) < min_ess_fraction)
        throw NumericalError("weighted_estimate: weight degeneracy, effective sample size " +
                             fmt_num(ess_fraction(w) * 100) + "% of paths");
    std::vector<double> wg(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) wg[i] = w[i] * g[i];
    const double wbar = pairwise_mean(w);
    const double v = pairwise_mean(wg) / wbar;
    std::vector<double> inf(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) inf[i] = w[i] * (g[i] - v) / wbar;
    MCEstimate e = sample_estimate(inf, seed);
    e.value = v;
    return e;
}

/// Discrete stochastic exponentials R_j = exp(s sum Z dw - s^2/2 sum |Z|^2 h)
/// at the recorded times. s = 1 gives Q; s = 1/2 gives the measure under
/// which Y itself is a martingale.
struct GirsanovWeights {
    double scale = 1.0;
    std::uint64_t seed = 0;
    std::size_t n_paths = 0;
    std::size_t n_records = 0;
    std::vector<double> R;  // row-major [path * n_records + j]
    std::vector<double> ess;  // fraction per record
    bool degenerate = false;

    std::vector<double> at(std::size_t j) const {
        std::vector<double> out(n_paths);
        for (std::size_t i = 0; i < n_paths; ++i) out[i] = R[i * n_records + j];
        return out;
    }
    std::vector<double> terminal() const { return at(n_records - 1); }
};

inline GirsanovWeights girsanov_weights(const BSDERun& run, double scale = 1.0) {
    require(std::isfinite(scale), "girsanov_weights: finite scale required");
    GirsanovWeights w;
    w.scale = scale;
    w.seed = run.config.seed;
    w.n_paths = run.n_paths();
    w.n_records = run.n_records();
    w.R.resize(run.S1.size());
    for (std::size_t k = 0; k < w.R.size(); ++k) {
        w.R[k] = std::exp(scale * run.S1[k] - 0.5 * scale * scale * run.S2[k]);
        if (!(w.R[k] > 0) || !std::isfinite(w.R[k])) throw NumericalError("girsanov_weights: weight under/overflow");
    }
    for (std::size_t j = 0; j < w.n_records; ++j) {
        w.ess.push_back(ess_fraction(w.at(j)));
        w.degenerate = w.degenerate || w.ess.back() < min_ess_fraction;
    }
    return w;
}

/// Martingale test of the weights: mean R_T within 3 standard errors of 1.
inline CheckResult weight_mean_check(const GirsanovWeights& w, MCEstimate* est = nullptr) {
    const auto rt = w.terminal();
    const MCEstimate e = sample_estimate(rt, w.seed);
    if (est) *est = e;
    return CheckResult::make(3.0 * e.std_error, std::abs(e.value - 1.0), mc_floor(1.0),
                             "girsanov mean R_T=" + fmt_num(e.value) + " se=" + fmt_num(e.std_error) +
                                 " ess=" + fmt_num(w.ess.back()));
}

/// max |Y_t| over paths and recorded times against ||f0||_inf.
inline CheckResult max_principle_check(const BSDERun& run, double tol = 1e-6) {
    require(run.problem.terminal.bounded(), "max_principle_check: terminal must be bounded");
    double mx = 0.0;
    for (double y : run.Y) mx = std::max(mx, std::abs(y));
    return CheckResult::make(run.problem.terminal.sup_norm, mx, tol,
                             "max|Y| over " + std::to_string(run.n_paths()) + " paths x " +
                                 std::to_string(run.n_records()) + " times");
}

/// E^Q[int_t^T |Z_s|^2 ds] with Q given by R_T at scale 1.
inline MCEstimate bmo_norm_estimate(const BSDERun& run, double t = 0.0) {
    const std::size_t j = run.record_index(t), last = run.n_records() - 1;
    const auto w = girsanov_weights(run, 1.0);
    std::vector<double> g(run.n_paths());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = run.S2[run.at(i, last)] - run.S2[run.at(i, j)];
    return weighted_estimate(w.terminal(), g, run.config.seed);
}

/// estimate <= 4 ||f0||_inf + 3 stderr.
inline CheckResult bmo_check(const BSDERun& run, double t = 0.0, MCEstimate* est = nullptr) {
    require(run.problem.terminal.bounded(), "bmo_check: terminal must be bounded");
    const MCEstimate e = bmo_norm_estimate(run, t);
    if (est) *est = e;
    return CheckResult::make(4.0 * run.problem.terminal.sup_norm, e.value, 3.0 * e.std_error,
                             "E^Q int_t^T |Z|^2 t=" + fmt_num(t) + " se=" + fmt_num(e.std_error));
}

/// Y_0 against E^{Q'}[xi] where Q' uses weights at scale 1/2.
inline CheckResult q_representation_check(const BSDERun& run, MCEstimate* est = nullptr) {
    const auto w = girsanov_weights(run, 0.5);
    const MCEstimate e = weighted_estimate(w.terminal(), run.xi, run.config.seed);
    if (est) *est = e;
    const double y0 = run.Y[run.at(0, 0)];
    return CheckResult::make(3.0 * e.std_error, std::abs(e.value - y0), mc_floor(y0),
                             "Y0=" + fmt_num(y0) + " E^Q'[xi]=" + fmt_num(e.value) + " se=" + fmt_num(e.std_error));
}

struct Violation {
    std::size_t index = 0;  // between record index and index + 1
    double difference = 0.0;
    double std_error = 0.0;
    double confidence = 0.0;  // one-sided normal confidence that the decrease is real
};

struct SubmartingaleReport {
    double K = 0.0;
    std::vector<double> times;
    std::vector<MCEstimate> values;  // weighted mean of e^{Kt} |Z_t|^2
    std::vector<double> differences;
    std::vector<double> difference_se;
    std::vector<Violation> violations;
    bool passed = true;
};

/// a(t) = E^Q[e^{Kt} |Z_t|^2] over the recorded times, with Q weights R_t.
/// Consecutive differences use paired influence functions, so their error
/// bars account for the correlation between neighbouring times.
inline SubmartingaleReport submartingale_diagnostic(const BSDERun& run, double K = 0.0) {
    require(K >= 0 && std::isfinite(K), "submartingale_diagnostic: K must be nonnegative");
    const auto w = girsanov_weights(run, 1.0);
    const std::size_t n = run.n_paths(), R = run.n_records();
    SubmartingaleReport rep;
    rep.K = K;
    rep.times = run.record_times;
    std::vector<std::vector<double>> infl(R, std::vector<double>(n));
    for (std::size_t j = 0; j < R; ++j) {
        const auto wj = w.at(j);
        std::vector<double> g(n);
        for (std::size_t i = 0; i < n; ++i) g[i] = std::exp(K * rep.times[j]) * run.Zsq[run.at(i, j)];
        const MCEstimate e = weighted_estimate(wj, g, run.config.seed);
        rep.values.push_back(e);
        const double wbar = pairwise_mean(wj);
        for (std::size_t i = 0; i < n; ++i) infl[j][i] = wj[i] * (g[i] - e.value) / wbar;
    }
    for (std::size_t j = 0; j + 1 < R; ++j) {
        std::vector<double> d(n);
        for (std::size_t i = 0; i < n; ++i) d[i] = infl[j + 1][i] - infl[j][i];
        const double diff = rep.values[j + 1].value - rep.values[j].value;
        const double se = sample_estimate(d).std_error;
        rep.differences.push_back(diff);
        rep.difference_se.push_back(se);
        if (diff < -(3.0 * se + mc_floor(rep.values[j].value))) {
            const double z = se > 0 ? -diff / se : std::numeric_limits<double>::infinity();
            rep.violations.push_back({j, diff, se, 1.0 - 0.5 * std::erfc(z / std::numbers::sqrt2)});
            rep.passed = false;
        }
    }
    return rep;
}

// ---- Li-Yau heuristic -----------------------------------------------------

/// The BSDE dY = Z dB + Y^2/n dt with Y_T = G(x + B_T) > 0. With U = 1/Y
/// and Q the measure under which X has drift grad log y, one has
/// Y_0 = 1 / (T/n + E^Q[1/Y_T]).
struct LiYauDemoConfig {
    double C = 1.0;
    double n = 1.0;
    double T = 1.0;
    double amplitude = 0.0;  // terminal C (1 + amplitude cos(x0 + B_T)); 0 gives the constant case
    double x0 = 0.0;
    std::size_t n_paths = 10000;
    std::uint64_t seed = 0;
    double dt = 1e-3;
    int grid = 256;

    void validate() const {
        require(n > 0 && T > 0 && dt > 0 && std::isfinite(C), "LiYauDemoConfig: n, T, dt must be positive");
        require(C > 0 && C * (1 - std::abs(amplitude)) > 0,
                "liyau_bsde_demo: terminal must be positive (G > 0 is required)");
        require(n_paths >= 2, "LiYauDemoConfig: need at least two paths");
    }
};

struct LiYauDemoResult {
    double exact = std::numeric_limits<double>::quiet_NaN();  // constant terminal only
    double oracle = 0.0;                                      // y(T, x0): closed form or PDE
    MCEstimate mc;                                            // 1 / (T/n + E^Q[1/Y_T])
    MCEstimate inverse_terminal;                              // E^Q[1/Y_T]
};

/// Deterministic value for constant terminal C: C / ((T/n) C + 1).
inline double liyau_constant_value(double C, double n, double T) {
    require(C > 0 && n > 0 && T >= 0, "liyau_constant_value: C, n positive and T nonnegative required");
    return C / ((T / n) * C + 1.0);
}

/// Solves y_tau = 1/2 y_xx - y^2/n on the 2 pi torus by explicit Euler and
/// returns y at tau = k * step for k = 0..K.
inline std::vector<Vector> liyau_pde(const heatpde::ScalarField& G, double n, double step, std::size_t K) {
    const auto& g = G.grid;
    const auto sub = std::max<long>(1, long(std::ceil(step / heatpde::explicit_dt_limit(g) - 1e-9)));
    const double k = step / double(sub);
    const auto lap = heatpde::laplacian_matrix(g);
    std::vector<Vector> out{G.values};
    Vector y = G.values;
    for (std::size_t s = 0; s < K; ++s) {
        for (long r = 0; r < sub; ++r) {
            Vector ly = lap * y;
            y += k * (0.5 * ly - y.cwiseProduct(y) / n);
        }
        if (!y.allFinite() || y.minCoeff() <= 0) throw NumericalError("liyau_pde: lost positivity");
        out.push_back(y);
    }
    return out;
}

inline LiYauDemoResult liyau_bsde_demo(const LiYauDemoConfig& cfg) {
    cfg.validate();
    LiYauDemoResult res;
    const auto steps = std::size_t(std::ceil(cfg.T / cfg.dt - 1e-9));
    const double h = cfg.T / double(steps), sh = std::sqrt(h);
    const double C = cfg.C, amp = cfg.amplitude;
    heatpde::TorusGrid g(1, cfg.grid);
    std::vector<Vector> dlog;  // d/dx log y at tau = k h; empty when y is constant in space
    if (amp == 0.0) {
        res.exact = liyau_constant_value(C, cfg.n, cfg.T);
        res.oracle = res.exact;
    } else {
        auto G = heatpde::sample(g, [&](const Vector& x) { return C * (1.0 + amp * std::cos(x(0))); });
        const auto ys = liyau_pde(G, cfg.n, h, steps);
        for (const auto& y : ys) {
            heatpde::ScalarField ly(g, y.array().log().matrix());
            dlog.push_back(heatpde::central_difference(ly, 0));
        }
        res.oracle = heatpde::interpolate(g, ys.back(), Vector::Constant(1, cfg.x0));
    }
    std::vector<double> inv(cfg.n_paths);
    parallel_for(cfg.n_paths, [&](std::size_t i) {
        PathRng rng(cfg.seed, i);
        Vector x = Vector::Constant(1, cfg.x0);
        for (std::size_t k = 0; k < steps; ++k) {
            const double drift = dlog.empty() ? 0.0 : heatpde::interpolate(g, dlog[steps - k], x);
            x(0) += drift * h + sh * rng.normal();
        }
        const double yT = C * (1.0 + amp * std::cos(x(0)));
        if (!(yT > 0)) throw PreconditionError("liyau_bsde_demo: nonpositive terminal sample");
        inv[i] = 1.0 / yT;
    });
    res.inverse_terminal = sample_estimate(inv, cfg.seed);
    const double y0 = 1.0 / (cfg.T / cfg.n + res.inverse_terminal.value);
    res.mc = {y0, res.inverse_terminal.std_error * y0 * y0, cfg.n_paths, cfg.seed};
    return res;
}

// ---- reports --------------------------------------------------------------

inline std::string params_hash(const std::string& params) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(params);
    return os.str();
}

inline void write_estimate_header(std::ostream& os) { os << "op,params_hash,value,stderr,n_paths,seed\n"; }

inline void write_estimate_row(std::ostream& os, const std::string& op, const std::string& params, const MCEstimate& e) {
    os << op << ',' << params_hash(params) << ',' << fmt_num(e.value) << ',' << fmt_num(e.std_error) << ','
       << e.n_paths << ',' << e.seed << '\n';
}

inline nlohmann::json to_json(const SubmartingaleReport& r) {
    nlohmann::json j{{"K", r.K}, {"passed", r.passed}, {"times", r.times}};
    for (const auto& v : r.values) j["values"].push_back({{"value", v.value}, {"stderr", v.std_error}});
    j["differences"] = r.differences;
    j["difference_stderr"] = r.difference_se;
    j["violations"] = nlohmann::json::array();
    for (const auto& v : r.violations)
        j["violations"].push_back(
            {{"index", v.index}, {"difference", v.difference}, {"stderr", v.std_error}, {"confidence", v.confidence}});
    return j;
}

}  // namespace heatbound::bsde
