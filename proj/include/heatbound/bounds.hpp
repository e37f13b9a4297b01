#pragma once

// Closed-form gradient, Li-Yau and Harnack bounds, and checkers that compare
// them against observed quantities.

#include "heatbound/common.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace heatbound::bounds {

/// Nonnegative constant that may be +infinity. Infinity is a distinct branch
/// in the formulas, not a large float.
struct CValue {
    double value = 0.0;
    bool infinite = false;

    static CValue of(double v) {
        require(v >= 0 && !std::isnan(v), "C must be nonnegative");
        if (std::isinf(v)) return infinity();
        return {v, false};
    }
    static CValue infinity() { return {0.0, true}; }
    static CValue parse(const std::string& s) {
        if (s == "inf" || s == "infinity" || s == "Infinity" || s == "oo") return infinity();
        std::size_t pos = 0;
        double v = 0.0;
        try {
            v = std::stod(s, &pos);
        } catch (const std::exception&) {
            throw PreconditionError("cannot parse C value '" + s + "'");
        }
        require(pos == s.size(), "cannot parse C value '" + s + "'");
        return of(v);
    }
    std::string str() const { return infinite ? "inf" : fmt_num(value); }
};

inline double bound_th11(double t, double M) {
    require(t > 0, "bound_th11: t must be positive");
    require(M >= 0, "bound_th11: M must be nonnegative");
    return 4.0 * M / t;
}

inline double liyau_upper(double t, CValue C, int n) {
    require(t >= 0, "liyau_upper: t must be nonnegative");
    require(n >= 1, "liyau_upper: n must be positive");
    if (C.infinite) {
        require(t > 0, "liyau_upper: C = inf needs t > 0");
        return n / t;
    }
    return C.value / ((t / n) * C.value + 1.0);
}

inline double liyau_lower(double t, double C, int n) {
    require(C > 0 && std::isfinite(C), "liyau_lower: C must be positive and finite");
    require(n >= 1, "liyau_lower: n must be positive");
    require(t >= 0, "liyau_lower: t must be nonnegative");
    require(t < n / C, "liyau_lower: t must lie before the blow-up time n/C");
    return -C / (1.0 - (t / n) * C);
}

namespace detail {

// a M / (1 - exp(-a h)) with the removable singularity at a = 0.
inline double damped(double a, double h, double M) {
    const double x = a * h;
    if (x < 1e-8) return M / h * (1.0 + 0.5 * x);
    return a * M / -std::expm1(-x);
}

}  // namespace detail

inline double bound_est_o1(double K, double horizon, double M) {
    require(horizon > 0, "bound_est_o1: horizon must be positive");
    require(K >= 0 && M >= 0, "bound_est_o1: K and M must be nonnegative");
    return 4.0 * detail::damped(K, horizon, M);
}

/// Same form as est_o1 with the squared sup norm M^2.
inline double bound_est_o2(double K, double horizon, double M) {
    require(horizon > 0, "bound_est_o2: horizon must be positive");
    require(K >= 0 && M >= 0, "bound_est_o2: K and M must be nonnegative");
    return 4.0 * detail::damped(K, horizon, M * M);
}

inline double bound_th41(double K, double t, double M) {
    require(t > 0, "bound_th41: t must be positive");
    require(K >= 0 && M >= 0, "bound_th41: K and M must be nonnegative");
    // 2 K M / (1 - e^{-K t / 2}) = 4 (K/2) M / (1 - e^{-(K/2) t})
    return 4.0 * detail::damped(0.5 * K, t, M);
}

inline double harnack_bound(double t, double s, double r, CValue C, int n) {
    require(t > 0 && s > 0, "harnack_bound: t and s must be positive");
    require(r >= 0, "harnack_bound: r must be nonnegative");
    require(n >= 1, "harnack_bound: n must be positive");
    double base;
    if (C.infinite) {
        base = (t + s) / t;
    } else {
        require(C.value > 0, "harnack_bound: C must be positive");
        const double ic = 1.0 / C.value;
        base = (ic + (t + s) / n) / (ic + t / n);
    }
    return std::pow(base, 0.5 * n) * std::exp(r * r / (2.0 * s));
}

// ---- admissibility of psi -------------------------------------------------

struct PsiFunction {
    std::string name;
    std::function<double(double)> d1, d2, d3;
};

inline PsiFunction psi_log() {
    return {"log", [](double u) { return 1.0 / u; }, [](double u) { return -1.0 / (u * u); },
            [](double u) { return 2.0 / (u * u * u); }};
}

inline PsiFunction psi_linear() {
    return {"linear", [](double) { return 1.0; }, [](double) { return 0.0; }, [](double) { return 0.0; }};
}

/// psi(u) = u^a
inline PsiFunction psi_power(double a) {
    return {"power(" + fmt_num(a) + ")", [a](double u) { return a * std::pow(u, a - 1); },
            [a](double u) { return a * (a - 1) * std::pow(u, a - 2); },
            [a](double u) { return a * (a - 1) * (a - 2) * std::pow(u, a - 3); }};
}

inline PsiFunction psi_sqrt() {
    auto p = psi_power(0.5);
    p.name = "sqrt";
    return p;
}

inline PsiFunction psi_by_name(const std::string& name) {
    if (name == "log") return psi_log();
    if (name == "linear") return psi_linear();
    if (name == "sqrt") return psi_sqrt();
    throw PreconditionError("unknown psi '" + name + "'");
}

struct PsiReport {
    bool admissible = true;
    double witness = 0.0;         // worst test point
    double concavity = 0.0;       // psi'' at the witness
    double slack = 0.0;           // 2 psi''^2 - psi''' psi' at the witness
    double relative_slack = 0.0;  // slack / scale
    bool equality = false;        // third-order condition tight at the witness
};

/// Checks psi'' <= 0 and psi''' psi' <= 2 psi''^2 at each test point. The
/// witness is the point with the smallest relative slack (the first
/// violating point when inadmissible).
inline PsiReport psi_admissible(const PsiFunction& psi, const std::vector<double>& points, double rel_tol = 1e-10) {
    require(!points.empty(), "psi_admissible: no test points");
    PsiReport rep;
    bool have = false;
    for (double u : points) {
        require(u > 0 && std::isfinite(u), "psi_admissible: test points must be positive");
        const double p1 = psi.d1(u), p2 = psi.d2(u), p3 = psi.d3(u);
        if (!std::isfinite(p1) || !std::isfinite(p2) || !std::isfinite(p3))
            throw NumericalError("psi_admissible: derivative of " + psi.name + " not finite at " + fmt_num(u));
        const double lhs = p3 * p1, rhs = 2.0 * p2 * p2;
        const double scale = std::max({std::abs(lhs), std::abs(rhs), std::numeric_limits<double>::min()});
        const double slack = rhs - lhs;
        const double rel = (std::abs(lhs) + std::abs(rhs) == 0.0) ? 0.0 : slack / scale;
        const bool concave = p2 <= rel_tol * std::abs(p1) / u;
        const bool ok = concave && rel >= -rel_tol;
        const bool worse = !have || (!ok && rep.admissible) || (ok == rep.admissible && rel < rep.relative_slack);
        if (worse) {
            rep.witness = u;
            rep.concavity = p2;
            rep.slack = slack;
            rep.relative_slack = rel;
            have = true;
        }
        if (!ok) rep.admissible = false;
    }
    rep.equality = std::abs(rep.relative_slack) <= rel_tol;
    return rep;
}

// ---- bound specifications -------------------------------------------------

enum class BoundKind { th11, liyau_upper, liyau_lower, est_o1, est_o2, th41, harnack };

inline const std::vector<std::pair<BoundKind, std::string>>& bound_kind_names() {
    static const std::vector<std::pair<BoundKind, std::string>> names = {
        {BoundKind::th11, "th11"},     {BoundKind::liyau_upper, "liyau_upper"}, {BoundKind::liyau_lower, "liyau_lower"},
        {BoundKind::est_o1, "est_o1"}, {BoundKind::est_o2, "est_o2"},           {BoundKind::th41, "th41"},
        {BoundKind::harnack, "harnack"}};
    return names;
}

inline std::string to_string(BoundKind k) {
    for (const auto& [kind, name] : bound_kind_names())
        if (kind == k) return name;
    return "?";
}

inline BoundKind bound_kind_from_string(const std::string& s) {
    for (const auto& [kind, name] : bound_kind_names())
        if (name == s) return kind;
    throw PreconditionError("unknown bound kind '" + s + "'");
}

struct BoundSpec {
    BoundKind kind = BoundKind::th11;
    double t = 1.0;
    double s = 1.0;
    double K = 0.0;
    double M = 0.0;
    double r = 0.0;
    double horizon = 1.0;
    CValue C = CValue::infinity();
    int n = 1;

    double evaluate() const {
        switch (kind) {
            case BoundKind::th11: return bound_th11(t, M);
            case BoundKind::liyau_upper: return liyau_upper(t, C, n);
            case BoundKind::liyau_lower:
                require(!C.infinite, "liyau_lower: C must be finite");
                return liyau_lower(t, C.value, n);
            case BoundKind::est_o1: return bound_est_o1(K, horizon, M);
            case BoundKind::est_o2: return bound_est_o2(K, horizon, M);
            case BoundKind::th41: return bound_th41(K, t, M);
            case BoundKind::harnack: return harnack_bound(t, s, r, C, n);
        }
        return 0.0;
    }

    /// Parameters the kind reads, as "key=value" joined by ';'.
    std::string params() const {
        auto kv = [](const char* k, const std::string& v) { return std::string(k) + "=" + v; };
        std::vector<std::string> p;
        switch (kind) {
            case BoundKind::th11: p = {kv("t", fmt_num(t)), kv("M", fmt_num(M))}; break;
            case BoundKind::liyau_upper:
            case BoundKind::liyau_lower: p = {kv("t", fmt_num(t)), kv("C", C.str()), kv("n", std::to_string(n))}; break;
            case BoundKind::est_o1:
            case BoundKind::est_o2: p = {kv("K", fmt_num(K)), kv("horizon", fmt_num(horizon)), kv("M", fmt_num(M))}; break;
            case BoundKind::th41: p = {kv("K", fmt_num(K)), kv("t", fmt_num(t)), kv("M", fmt_num(M))}; break;
            case BoundKind::harnack:
                p = {kv("t", fmt_num(t)), kv("s", fmt_num(s)), kv("r", fmt_num(r)), kv("C", C.str()),
                     kv("n", std::to_string(n))};
                break;
        }
        std::string out;
        for (std::size_t i = 0; i < p.size(); ++i) out += (i ? ";" : "") + p[i];
        return out;
    }

    std::string tag() const { return to_string(kind) + "[" + params() + "]"; }
};

namespace detail {

inline void set_param(BoundSpec& b, const std::string& key, const std::string& val) {
    auto num = [&] {
        std::size_t pos = 0;
        double v = 0.0;
        try {
            v = std::stod(val, &pos);
        } catch (const std::exception&) {
            throw PreconditionError("bound parameter " + key + ": cannot parse '" + val + "'");
        }
        require(pos == val.size(), "bound parameter " + key + ": cannot parse '" + val + "'");
        return v;
    };
    if (key == "kind") b.kind = bound_kind_from_string(val);
    else if (key == "t") b.t = num();
    else if (key == "s") b.s = num();
    else if (key == "K") b.K = num();
    else if (key == "M") b.M = num();
    else if (key == "r") b.r = num();
    else if (key == "horizon") b.horizon = num();
    else if (key == "C") b.C = CValue::parse(val);
    else if (key == "n") b.n = int(num());
    else throw PreconditionError("unknown bound parameter '" + key + "'");
}

}  // namespace detail

/// Parses "kind=th11,t=1,M=0.5" (',' or ';' separated).
inline BoundSpec parse_bound_spec(const std::string& text) {
    BoundSpec b;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find_first_of(",;", start);
        if (end == std::string::npos) end = text.size();
        const std::string item = text.substr(start, end - start);
        if (!item.empty()) {
            const auto eq = item.find('=');
            require(eq != std::string::npos, "bound spec item '" + item + "' is not key=value");
            detail::set_param(b, item.substr(0, eq), item.substr(eq + 1));
        }
        start = end + 1;
    }
    return b;
}

inline BoundSpec bound_spec_from_json(const nlohmann::json& j) {
    require(j.is_object(), "bound spec: JSON object expected");
    BoundSpec b;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& v = it.value();
        std::string sval;
        if (v.is_string()) sval = v.get<std::string>();
        else if (v.is_number()) sval = fmt_num(v.get<double>());
        else throw PreconditionError("bound spec: value of '" + it.key() + "' must be a number or string");
        detail::set_param(b, it.key(), sval);
    }
    return b;
}

inline nlohmann::json to_json(const BoundSpec& b) {
    nlohmann::json j = {{"kind", to_string(b.kind)}, {"params", b.params()}};
    return j;
}

// ---- checks ---------------------------------------------------------------

enum class ToleranceContext { analytic, grid, monte_carlo };

/// analytic: 1e-9; grid: 10 h^2 scale; Monte Carlo: 3 stderr.
inline double default_tolerance(ToleranceContext ctx, double h = 0.0, double scale = 1.0, double std_error = 0.0) {
    switch (ctx) {
        case ToleranceContext::analytic: return 1e-9;
        case ToleranceContext::grid: return 10.0 * h * h * std::max(1.0, scale);
        case ToleranceContext::monte_carlo: return 3.0 * std_error;
    }
    return 0.0;
}

inline CheckResult check_field_against_bound(double observed, const BoundSpec& bound,
                                             std::optional<double> tol = std::nullopt) {
    return CheckResult::make(bound.evaluate(), observed, tol.value_or(default_tolerance(ToleranceContext::analytic)),
                             bound.tag());
}

/// CSV rows: kind,params,bound,observed,margin,tolerance,passed,context
inline void write_check_header(std::ostream& os) { os << "kind,params,bound,observed,margin,tolerance,passed,context\n"; }

inline void write_check_row(std::ostream& os, const std::string& kind, const std::string& params, const CheckResult& r) {
    os << kind << ',' << params << ',' << fmt_num(r.bound_value) << ',' << fmt_num(r.observed) << ','
       << fmt_num(r.margin) << ',' << fmt_num(r.tolerance) << ',' << (r.passed ? "true" : "false") << ','
       << r.context << '\n';
}

inline void write_check_row(std::ostream& os, const BoundSpec& b, const CheckResult& r) {
    write_check_row(os, to_string(b.kind), b.params(), r);
}

inline nlohmann::json to_json(const CheckResult& r) {
    return {{"bound", r.bound_value}, {"observed", r.observed}, {"margin", r.margin},
            {"tolerance", r.tolerance}, {"passed", r.passed},  {"context", r.context}};
}

}  // namespace heatbound::bounds
