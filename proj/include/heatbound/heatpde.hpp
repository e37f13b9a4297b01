#pragma once

// Finite-difference solver for u_t = 1/2 Lap u on flat periodic grids
// (n = 1, 2) and the log-derivative diagnostics of f = log u.

#include "heatbound/common.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace heatbound::heatpde {

/// Uniform periodic grid with N points per axis and period L. Node i on an
/// axis sits at -L/2 + i h.
struct TorusGrid {
    int n = 1;
    int N = 64;
    double L = 2.0 * std::numbers::pi;

    TorusGrid() = default;
    TorusGrid(int n_, int N_, double L_ = 2.0 * std::numbers::pi) : n(n_), N(N_), L(L_) { validate(); }

    void validate() const {
        require(n == 1 || n == 2, "TorusGrid: dimension must be 1 or 2");
        require(N >= 8, "TorusGrid: need at least 8 points per axis");
        require(L > 0 && std::isfinite(L), "TorusGrid: period must be positive");
    }

    double h() const { return L / N; }
    std::size_t size() const { return n == 1 ? std::size_t(N) : std::size_t(N) * N; }
    int wrap(int i) const { return ((i % N) + N) % N; }
    std::size_t index(int i, int j = 0) const { return std::size_t(wrap(i)) + (n == 2 ? std::size_t(N) * wrap(j) : 0); }
    double coord(int i) const { return -0.5 * L + i * h(); }

    /// Axis indices (i, j) of flat node k.
    std::array<int, 2> axes(std::size_t k) const {
        return {int(k % std::size_t(N)), n == 2 ? int(k / std::size_t(N)) : 0};
    }
    Vector point(std::size_t k) const {
        auto [i, j] = axes(k);
        Vector x(n);
        x(0) = coord(i);
        if (n == 2) x(1) = coord(j);
        return x;
    }
    bool operator==(const TorusGrid&) const = default;
};

struct ScalarField {
    TorusGrid grid;
    Vector values;

    ScalarField() = default;
    ScalarField(TorusGrid g, Vector v) : grid(g), values(std::move(v)) {
        require(values.size() == Eigen::Index(grid.size()), "ScalarField: value count does not match grid");
    }
    explicit ScalarField(TorusGrid g) : grid(g), values(Vector::Zero(Eigen::Index(g.size()))) {}

    double min() const { return values.minCoeff(); }
    double max() const { return values.maxCoeff(); }
    double mean() const { return pairwise_mean({values.data(), std::size_t(values.size())}); }
    bool finite() const { return values.allFinite(); }
};

template <class Fn>
ScalarField sample(const TorusGrid& g, Fn&& fn) {
    ScalarField u(g);
    for (std::size_t k = 0; k < g.size(); ++k) u.values(Eigen::Index(k)) = fn(g.point(k));
    return u;
}

// ---- difference operators -------------------------------------------------

/// Second difference along one axis.
inline Vector second_difference(const ScalarField& u, int axis) {
    const auto& g = u.grid;
    const double ih2 = 1.0 / (g.h() * g.h());
    Vector out(u.values.size());
    for (std::size_t k = 0; k < g.size(); ++k) {
        auto [i, j] = g.axes(k);
        const std::size_t p = axis == 0 ? g.index(i + 1, j) : g.index(i, j + 1);
        const std::size_t m = axis == 0 ? g.index(i - 1, j) : g.index(i, j - 1);
        out(Eigen::Index(k)) = (u.values(Eigen::Index(p)) - 2.0 * u.values(Eigen::Index(k)) + u.values(Eigen::Index(m))) * ih2;
    }
    return out;
}

/// Central first difference along one axis.
inline Vector central_difference(const ScalarField& u, int axis) {
    const auto& g = u.grid;
    const double i2h = 0.5 / g.h();
    Vector out(u.values.size());
    for (std::size_t k = 0; k < g.size(); ++k) {
        auto [i, j] = g.axes(k);
        const std::size_t p = axis == 0 ? g.index(i + 1, j) : g.index(i, j + 1);
        const std::size_t m = axis == 0 ? g.index(i - 1, j) : g.index(i, j - 1);
        out(Eigen::Index(k)) = (u.values(Eigen::Index(p)) - u.values(Eigen::Index(m))) * i2h;
    }
    return out;
}

/// Mixed difference d_x d_y by central differences.
inline Vector mixed_difference(const ScalarField& u) {
    const auto& g = u.grid;
    require(g.n == 2, "mixed_difference: needs a 2-D grid");
    const double s = 0.25 / (g.h() * g.h());
    Vector out(u.values.size());
    for (std::size_t k = 0; k < g.size(); ++k) {
        auto [i, j] = g.axes(k);
        auto v = [&](int a, int b) { return u.values(Eigen::Index(g.index(a, b))); };
        out(Eigen::Index(k)) = (v(i + 1, j + 1) - v(i + 1, j - 1) - v(i - 1, j + 1) + v(i - 1, j - 1)) * s;
    }
    return out;
}

inline Vector laplacian(const ScalarField& u) {
    Vector lap = second_difference(u, 0);
    if (u.grid.n == 2) lap += second_difference(u, 1);
    return lap;
}

inline Eigen::SparseMatrix<double> laplacian_matrix(const TorusGrid& g) {
    const double ih2 = 1.0 / (g.h() * g.h());
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(g.size() * (1 + 2 * g.n));
    for (std::size_t k = 0; k < g.size(); ++k) {
        auto [i, j] = g.axes(k);
        const auto r = Eigen::Index(k);
        trip.emplace_back(r, r, -2.0 * g.n * ih2);
        trip.emplace_back(r, Eigen::Index(g.index(i + 1, j)), ih2);
        trip.emplace_back(r, Eigen::Index(g.index(i - 1, j)), ih2);
        if (g.n == 2) {
            trip.emplace_back(r, Eigen::Index(g.index(i, j + 1)), ih2);
            trip.emplace_back(r, Eigen::Index(g.index(i, j - 1)), ih2);
        }
    }
    Eigen::SparseMatrix<double> A(Eigen::Index(g.size()), Eigen::Index(g.size()));
    A.setFromTriplets(trip.begin(), trip.end());
    return A;
}

// ---- time stepping --------------------------------------------------------

enum class Scheme { explicit_euler, crank_nicolson };

inline std::string to_string(Scheme s) { return s == Scheme::explicit_euler ? "explicit-euler" : "crank-nicolson"; }

inline Scheme scheme_from_string(const std::string& s) {
    if (s == "explicit-euler" || s == "explicit") return Scheme::explicit_euler;
    if (s == "crank-nicolson" || s == "cn") return Scheme::crank_nicolson;
    throw PreconditionError("unknown scheme '" + s + "'");
}

/// Largest time step the explicit scheme accepts on grid g.
inline double explicit_dt_limit(const TorusGrid& g) { return 0.9 * g.h() * g.h() / (2.0 * g.n); }

struct SolveConfig {
    double dt = 1e-3;
    Scheme scheme = Scheme::crank_nicolson;
    double t_end = 1.0;
    std::vector<double> snapshot_times;  // empty: only t_end
    bool require_positive = true;

    void validate(const TorusGrid& g) const {
        require(dt > 0 && std::isfinite(dt), "SolveConfig: dt must be positive");
        require(t_end >= 0 && std::isfinite(t_end), "SolveConfig: t_end must be nonnegative");
        if (scheme == Scheme::explicit_euler)
            require(dt <= explicit_dt_limit(g) * (1 + 1e-12),
                    "SolveConfig: explicit scheme unstable, dt exceeds 0.9 h^2/(2n) = " + fmt_num(explicit_dt_limit(g)));
        for (double t : snapshot_times) require(t >= 0 && t <= t_end * (1 + 1e-14), "SolveConfig: snapshot time outside [0, t_end]");
    }
};

struct Trajectory {
    std::vector<double> times;
    std::vector<ScalarField> snapshots;
};

namespace detail {

class Stepper {
public:
    Stepper(const TorusGrid& g, Scheme s) : grid_(g), scheme_(s), lap_(laplacian_matrix(g)) {}

    // Advances u over an interval of length span in equal steps no larger than dt.
    void advance(Vector& u, double span, double dt, bool positive) {
        if (span <= 0) return;
        const auto steps = std::max<long>(1, long(std::ceil(span / dt - 1e-9)));
        const double k = span / double(steps);
        prepare(k);
        for (long s = 0; s < steps; ++s) {
            if (scheme_ == Scheme::explicit_euler) {
                u += (0.5 * k) * (lap_ * u);
            } else {
                Vector rhs = u + (0.25 * k) * (lap_ * u);
                u = solver_.solve(rhs);
                if (solver_.info() != Eigen::Success) throw NumericalError("solve_heat: linear solve failed");
            }
            if (!u.allFinite()) throw NumericalError("solve_heat: non-finite state");
            if (positive && u.minCoeff() <= 0.0)
                throw NumericalError("solve_heat: positivity lost; reduce dt or refine the grid");
        }
    }

private:
    void prepare(double k) {
        if (scheme_ != Scheme::crank_nicolson || k == factored_dt_) return;
        Eigen::SparseMatrix<double> I(lap_.rows(), lap_.cols());
        I.setIdentity();
        Eigen::SparseMatrix<double> A = I - (0.25 * k) * lap_;
        solver_.compute(A);
        if (solver_.info() != Eigen::Success) throw NumericalError("solve_heat: factorization failed");
        factored_dt_ = k;
    }

    TorusGrid grid_;
    Scheme scheme_;
    Eigen::SparseMatrix<double> lap_;
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver_;
    double factored_dt_ = -1.0;
};

}  // namespace detail

/// Integrates u_t = 1/2 Lap_h u from t = 0. Each interval between
/// requested times is split into equal steps no larger than cfg.dt, so
/// snapshots fall exactly on the requested times.
inline Trajectory solve_heat(const ScalarField& u0, const SolveConfig& cfg) {
    u0.grid.validate();
    cfg.validate(u0.grid);
    require(u0.finite(), "solve_heat: initial data not finite");
    if (cfg.require_positive) require(u0.min() > 0.0, "solve_heat: initial data must be strictly positive");

    std::vector<double> times = cfg.snapshot_times;
    if (times.empty()) times.push_back(cfg.t_end);
    std::sort(times.begin(), times.end());

    detail::Stepper stepper(u0.grid, cfg.scheme);
    Trajectory tr;
    Vector u = u0.values;
    double t = 0.0;
    for (double target : times) {
        stepper.advance(u, target - t, cfg.dt, cfg.require_positive);
        t = target;
        tr.times.push_back(t);
        tr.snapshots.emplace_back(u0.grid, u);
    }
    return tr;
}

// ---- diagnostics ----------------------------------------------------------

struct DiagnosticFields {
    TorusGrid grid;
    Vector f;
    std::vector<Vector> grad_f;  // one component per axis
    Vector grad_f_sq;
    Vector lap_f;
    Vector f_t;
    Vector G;
    Vector G_alt;
    Vector H_flat;
    std::vector<Vector> hess_f;  // f_xx (, f_yy, f_xy)
};

namespace detail {

inline DiagnosticFields log_derivatives(const ScalarField& u) {
    require(u.finite() && u.min() > 0.0, "log_diagnostics: field must be strictly positive");
    DiagnosticFields d;
    d.grid = u.grid;
    d.f = u.values.array().log().matrix();
    ScalarField f(u.grid, d.f);
    d.grad_f_sq = Vector::Zero(d.f.size());
    for (int a = 0; a < u.grid.n; ++a) {
        d.grad_f.push_back(central_difference(f, a));
        d.grad_f_sq += d.grad_f.back().cwiseAbs2();
        d.hess_f.push_back(second_difference(f, a));
    }
    d.lap_f = d.hess_f[0];
    if (u.grid.n == 2) {
        d.lap_f += d.hess_f[1];
        d.hess_f.push_back(mixed_difference(f));
        const auto& fxx = d.hess_f[0];
        const auto& fyy = d.hess_f[1];
        const auto& fxy = d.hess_f[2];
        d.H_flat = (0.5 * (fxx - fyy).cwiseAbs2() + 2.0 * fxy.cwiseAbs2()).eval();
    } else {
        d.H_flat = Vector::Zero(d.f.size());
    }
    d.G_alt = -d.lap_f;
    return d;
}

}  // namespace detail

/// Diagnostics of f = log u with f_t taken from the equation the solver
/// integrates: f_t = (1/2 Lap_h u) / u. On smooth data this equals
/// 1/2 Lap f + 1/2 |grad f|^2 up to O(h^2).
inline DiagnosticFields log_diagnostics(const ScalarField& u) {
    auto d = detail::log_derivatives(u);
    d.f_t = (0.5 * laplacian(u).array() / u.values.array()).matrix();
    d.G = d.grad_f_sq - 2.0 * d.f_t;
    return d;
}

/// Variant with f_t from a forward difference of log u in time.
inline DiagnosticFields log_diagnostics(const ScalarField& u, const ScalarField& u_next, double dt) {
    require(dt > 0, "log_diagnostics: dt must be positive");
    require(u_next.grid == u.grid, "log_diagnostics: grids differ");
    require(u_next.min() > 0.0, "log_diagnostics: field must be strictly positive");
    auto d = detail::log_derivatives(u);
    d.f_t = ((u_next.values.array().log() - d.f.array()) / dt).matrix();
    d.G = d.grad_f_sq - 2.0 * d.f_t;
    return d;
}

/// Default identity tolerance: 10 h^2 scaled by the field magnitude.
inline double default_grid_tolerance(const TorusGrid& g, double scale = 1.0) {
    return 10.0 * g.h() * g.h() * std::max(1.0, scale);
}

inline CheckResult check_identity_G(const DiagnosticFields& d, std::optional<double> tol = std::nullopt) {
    const double diff = (d.G - d.G_alt).cwiseAbs().maxCoeff();
    const double scale = d.G.cwiseAbs().maxCoeff();
    const double t = tol.value_or(default_grid_tolerance(d.grid, scale));
    return CheckResult::make(0.0, diff, t, "identity_G n=" + std::to_string(d.grid.n) + " N=" + std::to_string(d.grid.N));
}

/// Discrete Cauchy-Schwarz slack: observed = -min H_flat.
inline CheckResult check_H_flat(const DiagnosticFields& d, std::optional<double> tol = std::nullopt) {
    const double t = tol.value_or(10.0 * d.grid.h() * d.grid.h());
    return CheckResult::make(0.0, -d.H_flat.minCoeff(), t, "H_flat_nonneg");
}

inline Vector gradient_norm(const ScalarField& u) {
    Vector s = Vector::Zero(u.values.size());
    for (int a = 0; a < u.grid.n; ++a) s += central_difference(u, a).cwiseAbs2();
    return s.cwiseSqrt();
}

/// Nodewise |grad P_t u0| <= P_t |grad u0| on the flat torus. Both sides use
/// the explicit scheme, which is a positive operator commuting with
/// differences; the observed value is the largest nodewise excess.
inline CheckResult semigroup_domination_check(const ScalarField& u0, double t, std::optional<double> tol = std::nullopt,
                                              std::optional<double> dt = std::nullopt) {
    require(t >= 0, "semigroup_domination_check: t must be nonnegative");
    SolveConfig cfg;
    cfg.scheme = Scheme::explicit_euler;
    cfg.dt = dt.value_or(explicit_dt_limit(u0.grid));
    cfg.t_end = t;
    cfg.require_positive = false;
    const auto lhs_field = solve_heat(u0, cfg).snapshots.back();
    const ScalarField g0(u0.grid, gradient_norm(u0));
    const auto rhs = solve_heat(g0, cfg).snapshots.back().values;
    const Vector lhs = gradient_norm(lhs_field);
    const double excess = (lhs - rhs).maxCoeff();
    const double tl = tol.value_or(1e-6 + 10.0 * u0.grid.h() * u0.grid.h());
    return CheckResult::make(0.0, excess, tl,
                             "semigroup_domination t=" + fmt_num(t));
}

// ---- closed-form oracles on R^n -------------------------------------------

enum class GaussianKind { forward, initial, backward };

inline GaussianKind gaussian_kind_from_string(const std::string& s) {
    if (s == "forward") return GaussianKind::forward;
    if (s == "initial" || s == "initial-sigma2") return GaussianKind::initial;
    if (s == "backward" || s == "backward-sigma2") return GaussianKind::backward;
    throw PreconditionError("unknown gaussian kind '" + s + "'");
}

struct GaussianValues {
    double u = 0, f = 0, grad_f_sq = 0, f_t = 0, G = 0;
};

/// Gaussian solutions of u_t = 1/2 Lap u on R^n. G = |grad f|^2 - 2 f_t is
/// assembled from the separately differentiated terms.
inline GaussianValues gaussian_oracle(GaussianKind kind, double t, const Vector& x, double sigma2 = 1.0) {
    const double n = double(x.size());
    require(x.size() >= 1, "gaussian_oracle: empty point");
    const double r2 = x.squaredNorm();
    GaussianValues v;
    switch (kind) {
        case GaussianKind::forward: {
            require(t > 0, "gaussian_oracle: forward kernel needs t > 0");
            v.f = -0.5 * n * std::log(2.0 * std::numbers::pi * t) - r2 / (2.0 * t);
            v.grad_f_sq = r2 / (t * t);
            v.f_t = -0.5 * n / t + r2 / (2.0 * t * t);
            break;
        }
        case GaussianKind::initial: {
            require(t >= 0 && sigma2 > 0, "gaussian_oracle: initial kind needs t >= 0 and sigma2 > 0");
            const double tau = sigma2 + t;
            v.f = -0.5 * n * std::log(tau) - r2 / (2.0 * tau);
            v.grad_f_sq = r2 / (tau * tau);
            v.f_t = -0.5 * n / tau + r2 / (2.0 * tau * tau);
            break;
        }
        case GaussianKind::backward: {
            require(sigma2 > 0 && t >= 0, "gaussian_oracle: backward kind needs t >= 0 and sigma2 > 0");
            require(t < sigma2, "gaussian_oracle: backward solution blows up at t = sigma2");
            const double tau = sigma2 - t;
            v.f = -0.5 * n * std::log(tau) + r2 / (2.0 * tau);
            v.grad_f_sq = r2 / (tau * tau);
            v.f_t = 0.5 * n / tau + r2 / (2.0 * tau * tau);
            break;
        }
    }
    v.u = std::exp(v.f);
    v.G = v.grad_f_sq - 2.0 * v.f_t;
    return v;
}

// ---- initial data ---------------------------------------------------------

inline double wrapped_gaussian_value(const TorusGrid& g, const Vector& x, double sigma2, int images = 6) {
    require(sigma2 > 0, "wrapped_gaussian: sigma2 must be positive");
    const double norm = std::pow(2.0 * std::numbers::pi * sigma2, -0.5 * g.n);
    double s = 0.0;
    for (int a = -images; a <= images; ++a)
        for (int b = (g.n == 2 ? -images : 0); b <= (g.n == 2 ? images : 0); ++b) {
            double r2 = std::pow(x(0) + a * g.L, 2);
            if (g.n == 2) r2 += std::pow(x(1) + b * g.L, 2);
            s += std::exp(-r2 / (2.0 * sigma2));
        }
    return norm * s;
}

inline ScalarField constant_data(const TorusGrid& g, double c) {
    return ScalarField(g, Vector::Constant(Eigen::Index(g.size()), c));
}

/// offset + a * sum_axes cos(x_d)
inline ScalarField cosine_data(const TorusGrid& g, double a, double offset = 1.0) {
    return sample(g, [&](const Vector& x) { return offset + a * x.array().cos().sum(); });
}

/// exp(a * sum_axes cos(x_d))
inline ScalarField exp_cosine_data(const TorusGrid& g, double a) {
    return sample(g, [&](const Vector& x) { return std::exp(a * x.array().cos().sum()); });
}

struct TrigTerm {
    int k = 1;
    double cos_coeff = 0.0;
    double sin_coeff = 0.0;
};

/// offset + sum_axes sum_terms (c cos(k x_d) + s sin(k x_d))
inline ScalarField trig_poly_data(const TorusGrid& g, const std::vector<TrigTerm>& terms, double offset = 0.0) {
    return sample(g, [&](const Vector& x) {
        double v = offset;
        for (Eigen::Index d = 0; d < x.size(); ++d)
            for (const auto& t : terms) v += t.cos_coeff * std::cos(t.k * x(d)) + t.sin_coeff * std::sin(t.k * x(d));
        return v;
    });
}

inline ScalarField wrapped_gaussian_data(const TorusGrid& g, double sigma2) {
    return sample(g, [&](const Vector& x) { return wrapped_gaussian_value(g, x, sigma2); });
}

/// Builds initial data from {"family": ..., parameters}. Families:
/// constant{value}, cosine{a, offset}, exp_cosine{a},
/// trig_poly{terms: [[k, c, s], ...], offset}, wrapped_gaussian{sigma2}.
inline ScalarField initial_data_from_json(const TorusGrid& g, const nlohmann::json& j) {
    require(j.is_object() && j.contains("family"), "initial data: object with 'family' required");
    const auto fam = j.at("family").get<std::string>();
    auto allow = [&](std::initializer_list<const char*> keys) {
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() == "family") continue;
            bool ok = false;
            for (auto k : keys) ok = ok || it.key() == k;
            require(ok, "initial data: unknown key '" + it.key() + "' for family " + fam);
        }
    };
    if (fam == "constant") {
        allow({"value"});
        return constant_data(g, j.value("value", 1.0));
    }
    if (fam == "cosine") {
        allow({"a", "offset"});
        return cosine_data(g, j.value("a", 0.5), j.value("offset", 1.0));
    }
    if (fam == "exp_cosine") {
        allow({"a"});
        return exp_cosine_data(g, j.value("a", 0.5));
    }
    if (fam == "trig_poly") {
        allow({"terms", "offset"});
        std::vector<TrigTerm> terms;
        for (const auto& t : j.at("terms")) {
            require(t.is_array() && t.size() == 3, "trig_poly: each term is [k, cos, sin]");
            terms.push_back({t[0].get<int>(), t[1].get<double>(), t[2].get<double>()});
        }
        return trig_poly_data(g, terms, j.value("offset", 0.0));
    }
    if (fam == "wrapped_gaussian") {
        allow({"sigma2"});
        return wrapped_gaussian_data(g, j.value("sigma2", 0.25));
    }
    throw PreconditionError("initial data: unknown family '" + fam + "'");
}

// ---- interpolation and export ---------------------------------------------

/// Periodic (bi)linear interpolation of nodal values at an arbitrary point.
inline double interpolate(const TorusGrid& g, const Vector& values, const Vector& x) {
    require(x.size() == g.n, "interpolate: point dimension mismatch");
    std::array<int, 2> i0{0, 0};
    std::array<double, 2> w{0.0, 0.0};
    for (int a = 0; a < g.n; ++a) {
        const double s = (x(a) + 0.5 * g.L) / g.h();
        const double fl = std::floor(s);
        i0[a] = int(std::fmod(fl, double(g.N)));
        w[a] = s - fl;
    }
    auto v = [&](int di, int dj) { return values(Eigen::Index(g.index(i0[0] + di, i0[1] + dj))); };
    if (g.n == 1) return (1 - w[0]) * v(0, 0) + w[0] * v(1, 0);
    return (1 - w[0]) * (1 - w[1]) * v(0, 0) + w[0] * (1 - w[1]) * v(1, 0) + (1 - w[0]) * w[1] * v(0, 1) +
           w[0] * w[1] * v(1, 1);
}

inline double interpolate(const ScalarField& u, const Vector& x) { return interpolate(u.grid, u.values, x); }

inline void write_csv(std::ostream& os, const ScalarField& u) {
    os << "node,value\n";
    for (Eigen::Index k = 0; k < u.values.size(); ++k) os << k << ',' << fmt_num(u.values(k)) << '\n';
}

inline nlohmann::json summary_json(const ScalarField& u, double t) {
    return {{"n", u.grid.n}, {"N", u.grid.N}, {"L", u.grid.L}, {"time", t},
            {"min", u.min()}, {"max", u.max()}, {"mean", u.mean()}};
}

}  // namespace heatbound::heatpde
