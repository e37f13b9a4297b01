#pragma once

// Named experiments over the library, their configuration and the CSV/JSON
// reports they produce. The command-line tool is a thin shell over this.

#include "heatbound/bounds.hpp"
#include "heatbound/bsde.hpp"
#include "heatbound/common.hpp"
#include "heatbound/fields.hpp"
#include "heatbound/flow.hpp"
#include "heatbound/heatpde.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace heatbound::experiments {

using nlohmann::json;

struct CatalogEntry {
    std::string name;
    std::string invocation;
    std::string description;
    std::string verifies;
    bool stochastic = false;
};

inline const std::vector<CatalogEntry>& catalog() {
    static const std::vector<CatalogEntry> c = {
        {"solve", "solve", "heat flow on the torus with log-derivative diagnostics and gradient domination",
         "Hopf identity G = |grad f|^2 - 2 f_t = -Lap f", false},
        {"liyau", "liyau", "Gaussian equality cases and torus runs against the Li-Yau type bounds", "Theorem 1.2", false},
        {"gradbound", "gradbound --kind th11", "max |grad log u|^2 on the torus against 4M/t", "Theorem 1.1", false},
        {"gradbound", "gradbound --kind est_o1", "max |grad log u|^2 against 4KM/(1 - e^{-K h})", "Theorem 3.7", false},
        {"gradbound", "gradbound --kind est_o2", "max |grad log u|^2 against 4KM^2/(1 - e^{-K h}) with psi = log",
         "Theorem 3.8", false},
        {"gradbound", "gradbound --kind th41", "max |grad log u|^2 against 2KM/(1 - e^{-Kt/2})", "Theorem 4.1", false},
        {"harnack", "harnack", "Gaussian solution ratios on a (t, s) grid against the Harnack bound", "Corollary 5.1",
         false},
        {"bsde", "bsde", "entropic BSDE: max principle, weight martingale, BMO bound, Q representation, submartingale",
         "Proposition 2.1 and Lemma 3.6", true},
        {"liyau_bsde", "liyau_bsde", "Y0 = 1/(T/n + E^Q[1/Y_T]) for the Li-Yau BSDE", "Theorem 1.2 (BSDE route)", true},
        {"flow", "flow", "J K identity residual under dt refinement and the two evaluations of Z",
         "Z representation through the flow", true},
        {"conditions", "conditions", "sampled C1, C2 and Frobenius residual of a field family",
         "Conditions 3.2 and 3.3", true},
    };
    return c;
}

inline bool is_experiment(const std::string& name) {
    return std::any_of(catalog().begin(), catalog().end(), [&](const auto& e) { return e.name == name; });
}

inline bool is_stochastic(const std::string& name) {
    for (const auto& e : catalog())
        if (e.name == name) return e.stochastic;
    return false;
}

// ---- configuration --------------------------------------------------------

/// Raised for invalid configuration; the tool maps it to exit code 2.
class ConfigError : public PreconditionError {
public:
    using PreconditionError::PreconditionError;
};

struct ExperimentConfig {
    std::string experiment;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "out";
    std::optional<std::size_t> paths;
    std::optional<double> dt;
    std::optional<int> grid;
    std::optional<double> tol;
    std::string kind;  // gradbound only
    json params = json::object();
};

inline const std::vector<std::string>& allowed_params(const std::string& experiment) {
    static const std::map<std::string, std::vector<std::string>> table = {
        {"solve", {"initial", "dim", "t_end", "scheme", "snapshots"}},
        {"liyau", {"cases", "sigma2", "n", "times", "points", "torus_sigma2"}},
        {"gradbound", {"a", "K", "times", "dim"}},
        {"harnack", {"n", "C", "t_range", "s_range", "count", "ys"}},
        {"bsde", {"problem", "records", "submartingale_records", "K", "calibration", "residual_paths"}},
        {"liyau_bsde", {"C", "n", "T", "amplitude", "x0"}},
        {"flow", {"field", "T", "x0", "scheme", "refinement", "max_residual"}},
        {"conditions", {"field", "box", "samples", "expect"}},
    };
    auto it = table.find(experiment);
    if (it == table.end()) throw ConfigError("unknown experiment '" + experiment + "'");
    return it->second;
}

inline void validate(const ExperimentConfig& c) {
    if (c.experiment.empty()) throw ConfigError("no experiment given");
    if (!is_experiment(c.experiment)) throw ConfigError("unknown experiment '" + c.experiment + "'");
    if (is_stochastic(c.experiment) && !c.seed)
        throw ConfigError("experiment '" + c.experiment + "' is stochastic and needs a seed");
    if (!c.params.is_object()) throw ConfigError("params must be an object");
    const auto& allowed = allowed_params(c.experiment);
    for (auto it = c.params.begin(); it != c.params.end(); ++it)
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
            throw ConfigError("unknown parameter '" + it.key() + "' for experiment '" + c.experiment + "'");
    if (c.paths && *c.paths < 2) throw ConfigError("paths must be at least 2");
    if (c.dt && !(*c.dt > 0)) throw ConfigError("dt must be positive");
    if (c.grid && *c.grid < 8) throw ConfigError("grid must be at least 8");
    if (c.tol && !(*c.tol >= 0)) throw ConfigError("tol must be nonnegative");
    if (!c.kind.empty() && c.experiment != "gradbound") throw ConfigError("--kind applies to gradbound only");
}

/// Reads {"experiment", "seed", "out", "paths", "dt", "grid", "tol", "kind",
/// "params"}; any other key is an error.
inline ExperimentConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    ExperimentConfig c;
    try {
        for (auto it = j.begin(); it != j.end(); ++it) {
            const auto& k = it.key();
            const auto& v = it.value();
            if (k == "experiment") c.experiment = v.get<std::string>();
            else if (k == "seed") c.seed = v.get<std::uint64_t>();
            else if (k == "out") c.out_dir = v.get<std::string>();
            else if (k == "paths") c.paths = v.get<std::size_t>();
            else if (k == "dt") c.dt = v.get<double>();
            else if (k == "grid") c.grid = v.get<int>();
            else if (k == "tol") c.tol = v.get<double>();
            else if (k == "kind") c.kind = v.get<std::string>();
            else if (k == "params") c.params = v;
            else throw ConfigError("unknown config key '" + k + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

inline json to_json(const ExperimentConfig& c) {
    json j{{"experiment", c.experiment}, {"out", c.out_dir}, {"params", c.params}};
    if (c.seed) j["seed"] = *c.seed;
    if (c.paths) j["paths"] = *c.paths;
    if (c.dt) j["dt"] = *c.dt;
    if (c.grid) j["grid"] = *c.grid;
    if (c.tol) j["tol"] = *c.tol;
    if (!c.kind.empty()) j["kind"] = c.kind;
    return j;
}

// ---- reports --------------------------------------------------------------

struct CheckRow {
    std::string kind;
    std::string params;
    CheckResult result;
};

struct EstimateRow {
    std::string op;
    std::string params;
    MCEstimate estimate;
};

struct Report {
    std::string name;  // file stem
    std::vector<CheckRow> checks;
    std::vector<EstimateRow> estimates;
    json summary = json::object();
    std::vector<std::string> errors;                         // numerical failures during the run
    std::vector<std::pair<std::string, std::string>> files;  // extra outputs: name, contents

    void check(std::string kind, std::string params, CheckResult r) {
        checks.push_back({std::move(kind), std::move(params), std::move(r)});
    }
    void estimate(std::string op, std::string params, MCEstimate e) {
        estimates.push_back({std::move(op), std::move(params), e});
    }

    std::vector<std::string> failures() const {
        std::vector<std::string> out = errors;
        for (const auto& c : checks)
            if (!c.result.passed)
                out.push_back(c.kind + " [" + c.params + "] margin " + fmt_num(c.result.margin) + " < -" +
                              fmt_num(c.result.tolerance) + " (" + c.result.context + ")");
        return out;
    }
    bool passed() const { return failures().empty(); }
    int exit_code() const { return passed() ? 0 : 1; }
};

/// Passes iff observed >= bound - tol (lower bounds).
inline CheckResult lower_check(double bound, double observed, double tol, std::string ctx) {
    CheckResult r = CheckResult::make(bound, observed, tol, std::move(ctx));
    r.margin = observed - bound;
    r.passed = std::isfinite(r.margin) && r.margin >= -tol;
    return r;
}

/// Passes iff |observed - target| <= tol.
inline CheckResult equality_check(double target, double observed, double tol, std::string ctx) {
    return CheckResult::make(tol, std::abs(observed - target), 0.0, std::move(ctx) + " target=" + fmt_num(target));
}

namespace detail {

inline std::string csv_field(std::string s) {
    std::replace(s.begin(), s.end(), ',', ';');
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
}

template <class T>
T param(const json& p, const char* key, T fallback) {
    try {
        return p.contains(key) ? p.at(key).get<T>() : fallback;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("parameter '") + key + "': " + e.what());
    }
}

inline std::vector<double> linspace(double lo, double hi, int count) {
    std::vector<double> v;
    for (int i = 0; i < count; ++i) v.push_back(count == 1 ? lo : lo + (hi - lo) * i / (count - 1));
    return v;
}

inline Vector along_axis(double p, int n) {
    Vector x = Vector::Zero(n);
    x(0) = p;
    return x;
}

inline std::string kv(const std::string& k, double v) { return k + "=" + fmt_num(v); }

}  // namespace detail

inline std::string checks_csv(const Report& r) {
    std::ostringstream os;
    bounds::write_check_header(os);
    for (const auto& c : r.checks)
        bounds::write_check_row(os, c.kind, detail::csv_field(c.params),
                                [&] {
                                    auto x = c.result;
                                    x.context = detail::csv_field(x.context);
                                    return x;
                                }());
    return os.str();
}

inline std::string estimates_csv(const Report& r) {
    std::ostringstream os;
    bsde::write_estimate_header(os);
    for (const auto& e : r.estimates) bsde::write_estimate_row(os, e.op, e.params, e.estimate);
    return os.str();
}

inline json report_json(const Report& r, const ExperimentConfig& c, const std::string& timestamp) {
    json checks = json::array();
    for (const auto& ch : r.checks) {
        json j = bounds::to_json(ch.result);
        j["kind"] = ch.kind;
        j["params"] = ch.params;
        checks.push_back(j);
    }
    json est = json::array();
    for (const auto& e : r.estimates)
        est.push_back({{"op", e.op},
                       {"params_hash", bsde::params_hash(e.params)},
                       {"params", e.params},
                       {"value", e.estimate.value},
                       {"stderr", e.estimate.std_error},
                       {"n_paths", e.estimate.n_paths},
                       {"seed", e.estimate.seed}});
    return {{"experiment", c.experiment}, {"timestamp", timestamp}, {"config", to_json(c)},
            {"summary", r.summary},       {"checks", checks},       {"estimates", est},
            {"failures", r.failures()},   {"passed", r.passed()},   {"exit_code", r.exit_code()}};
}

/// Writes <name>.csv (checks), <name>_estimates.csv when there are
/// estimates, <name>.json and any extra files into out_dir. CSV files start
/// with one '#' line carrying the timestamp; the rest is deterministic.
inline std::vector<std::string> write_report(const Report& r, const ExperimentConfig& c, const std::string& timestamp) {
    namespace fs = std::filesystem;
    fs::create_directories(c.out_dir);
    std::vector<std::string> written;
    auto put = [&](const std::string& file, const std::string& body, bool header) {
        const auto path = (fs::path(c.out_dir) / file).string();
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + path);
        if (header) os << "# heatbound " << r.name << " " << timestamp << '\n';
        os << body;
        written.push_back(path);
    };
    put(r.name + ".csv", checks_csv(r), true);
    if (!r.estimates.empty()) put(r.name + "_estimates.csv", estimates_csv(r), true);
    put(r.name + ".json", report_json(r, c, timestamp).dump(2) + "\n", false);
    for (const auto& [file, body] : r.files) put(file, body, true);
    return written;
}

// ---- experiments ----------------------------------------------------------

inline Report run_solve(const ExperimentConfig& c) {
    using namespace heatpde;
    const auto& p = c.params;
    Report r;
    r.name = "solve";
    TorusGrid g(detail::param(p, "dim", 1), c.grid.value_or(128));
    const auto u0 =
        initial_data_from_json(g, detail::param<json>(p, "initial", {{"family", "exp_cosine"}, {"a", 0.5}}));
    SolveConfig sc;
    sc.t_end = detail::param(p, "t_end", 1.0);
    sc.dt = c.dt.value_or(1e-3);
    sc.scheme = scheme_from_string(detail::param<std::string>(p, "scheme", "crank-nicolson"));
    sc.snapshot_times = detail::param<std::vector<double>>(p, "snapshots", {0.25, 0.5, sc.t_end});
    const auto traj = solve_heat(u0, sc);
    json snaps = json::array();
    for (std::size_t k = 0; k < traj.times.size(); ++k) {
        const double t = traj.times[k];
        const auto& u = traj.snapshots[k];
        const std::string params = detail::kv("t", t) + ";N=" + std::to_string(g.N) + ";dim=" + std::to_string(g.n);
        r.check("positivity", params, CheckResult::make(u.min(), 0.0, 0.0, "min u=" + fmt_num(u.min())));
        const auto d = log_diagnostics(u);
        r.check("identity_G", params, check_identity_G(d, c.tol));
        r.check("H_flat", params, check_H_flat(d, c.tol));
        snaps.push_back({{"t", t}, {"min", u.min()}, {"max", u.max()}, {"max_G", d.G.maxCoeff()},
                         {"max_grad_f_sq", d.grad_f_sq.maxCoeff()}});
    }
    r.check("semigroup_domination", detail::kv("t", sc.t_end) + ";N=" + std::to_string(g.N),
            semigroup_domination_check(u0, sc.t_end, c.tol));
    std::ostringstream field;
    write_csv(field, traj.snapshots.back());
    r.files.push_back({"solve_field.csv", field.str()});
    r.summary = {{"scheme", to_string(sc.scheme)}, {"dt", sc.dt}, {"snapshots", snaps},
                 {"final", summary_json(traj.snapshots.back(), traj.times.back())}};
    return r;
}

/// G = -(log u)'' at the centre of a wrapped Gaussian of variance v on the
/// 2 pi circle, from the image sum. Tends to 1/v as v -> 0.
inline double wrapped_gaussian_centre_G(double v) {
    double s0 = 0.0, s2 = 0.0;
    for (int k = -20; k <= 20; ++k) {
        const double a = 2 * std::numbers::pi * k;
        const double w = std::exp(-a * a / (2 * v));
        s0 += w;
        s2 += a * a * w;
    }
    return 1.0 / v - s2 / (v * v * s0);
}

inline Report run_liyau(const ExperimentConfig& c) {
    using namespace heatpde;
    const auto& p = c.params;
    Report r;
    r.name = "liyau";
    const int n = detail::param(p, "n", 1);
    const double s2 = detail::param(p, "sigma2", 1.0);
    const auto times = detail::param<std::vector<double>>(p, "times", {0.1, 0.25, 0.5, 1.0, 1.5, 2.0});
    const auto points = detail::param<std::vector<double>>(p, "points", {0.0, 0.5, 1.0, 2.0});
    const auto cases = detail::param<std::vector<std::string>>(p, "cases", {"gaussian_initial"});
    require(n >= 1 && s2 > 0, "liyau: n >= 1 and sigma2 > 0 required");
    const double tol = c.tol.value_or(1e-12);
    json summary = json::object();
    for (const auto& cs : cases) {
        bounds::BoundSpec b;
        b.n = n;
        if (cs == "gaussian_initial" || cs == "forward") {
            const bool fwd = cs == "forward";
            b.kind = bounds::BoundKind::liyau_upper;
            b.C = fwd ? bounds::CValue::infinity() : bounds::CValue::of(n / s2);
            double worst = 0;
            for (double t : times) {
                if (fwd && t <= 0) continue;
                b.t = t;
                for (double x : points) {
                    const double G =
                        gaussian_oracle(fwd ? GaussianKind::forward : GaussianKind::initial, t, detail::along_axis(x, n), s2).G;
                    const auto res = bounds::check_field_against_bound(G, b, tol * std::max(1.0, std::abs(G)));
                    worst = std::max(worst, std::abs(res.margin));
                    r.check("liyau_upper", b.params() + ";" + detail::kv("x", x), res);
                }
            }
            summary[cs] = {{"max_abs_margin", worst}, {"C", b.C.str()}};
        } else if (cs == "backward") {
            b.kind = bounds::BoundKind::liyau_lower;
            b.C = bounds::CValue::of(n / s2);
            for (double t : times) {
                if (t >= s2) continue;  // blow-up boundary t = n/C
                b.t = t;
                for (double x : points) {
                    const double G = gaussian_oracle(GaussianKind::backward, t, detail::along_axis(x, n), s2).G;
                    const double lo = b.evaluate();
                    r.check("liyau_lower", b.params() + ";" + detail::kv("x", x),
                            lower_check(lo, G, tol * std::max(1.0, std::abs(G)), b.tag()));
                }
            }
            summary[cs] = {{"C", b.C.str()}, {"window", s2}};
        } else if (cs == "torus") {
            // Wrapped Gaussian on the 2 pi torus: the centre value is the
            // Gaussian-initial equality 1/(t + sigma2) up to image terms.
            const double ts2 = detail::param(p, "torus_sigma2", 0.25);
            TorusGrid g(1, c.grid.value_or(512));
            SolveConfig sc;
            sc.dt = c.dt.value_or(1e-3);
            sc.t_end = *std::max_element(times.begin(), times.end());
            sc.snapshot_times = times;
            const auto traj = solve_heat(wrapped_gaussian_data(g, ts2), sc);
            const auto centre = std::size_t(g.N / 2);
            const double rel = c.tol.value_or(1e-3);
            for (std::size_t k = 0; k < traj.times.size(); ++k) {
                const double t = traj.times[k];
                if (t <= 0) continue;
                const auto d = log_diagnostics(traj.snapshots[k]);
                const double Gc = d.G(Eigen::Index(centre));
                const double exact = wrapped_gaussian_centre_G(t + ts2);
                r.check("liyau_upper_equality", detail::kv("t", t) + ";" + detail::kv("sigma2", ts2) + ";N=" + std::to_string(g.N),
                        equality_check(exact, Gc, rel * exact, "torus centre G"));
                bounds::BoundSpec fb;
                fb.kind = bounds::BoundKind::liyau_upper;
                fb.t = t;
                fb.n = 1;
                r.check("liyau_upper", fb.params() + ";N=" + std::to_string(g.N),
                        bounds::check_field_against_bound(d.G.maxCoeff(), fb, default_grid_tolerance(g, fb.evaluate())));
            }
            summary[cs] = {{"sigma2", ts2}, {"N", g.N}};
        } else {
            throw ConfigError("liyau: unknown case '" + cs + "'");
        }
    }
    r.summary = summary;
    return r;
}

inline Report run_gradbound(const ExperimentConfig& c) {
    using namespace heatpde;
    const auto& p = c.params;
    const std::string kind = c.kind.empty() ? "th11" : c.kind;
    const auto bk = bounds::bound_kind_from_string(kind);
    if (bk != bounds::BoundKind::th11 && bk != bounds::BoundKind::est_o1 && bk != bounds::BoundKind::est_o2 &&
        bk != bounds::BoundKind::th41)
        throw ConfigError("gradbound: kind must be th11, est_o1, est_o2 or th41 (use the liyau or harnack experiments)");
    Report r;
    r.name = "gradbound_" + kind;
    TorusGrid g(detail::param(p, "dim", 1), c.grid.value_or(256));
    const double a = detail::param(p, "a", 0.5);
    const auto u0 = exp_cosine_data(g, a);
    const double M = u0.values.array().log().abs().maxCoeff();
    auto times = detail::param<std::vector<double>>(p, "times", {0.05, 0.1, 0.25, 0.5, 1.0, 1.5, 2.0});
    SolveConfig sc;
    sc.dt = c.dt.value_or(1e-3);
    sc.t_end = *std::max_element(times.begin(), times.end());
    sc.snapshot_times = times;
    const auto traj = solve_heat(u0, sc);
    bounds::BoundSpec b;
    b.kind = bk;
    b.M = M;
    b.K = detail::param(p, "K", 0.0);
    const double tol = c.tol.value_or(default_grid_tolerance(g));
    double min_margin = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < traj.times.size(); ++k) {
        const double t = traj.times[k];
        if (t <= 0) continue;
        b.t = t;
        b.horizon = t;
        const double observed = log_diagnostics(traj.snapshots[k]).grad_f_sq.maxCoeff();
        auto res = bounds::check_field_against_bound(observed, b, tol);
        min_margin = std::min(min_margin, res.margin);
        r.check(kind, b.params() + ";N=" + std::to_string(g.N), res);
    }
    r.summary = {{"M", M}, {"K", b.K}, {"N", g.N}, {"min_margin", min_margin}};
    return r;
}

inline Report run_harnack(const ExperimentConfig& c) {
    const auto& p = c.params;
    Report r;
    r.name = "harnack";
    const int n = detail::param(p, "n", 1);
    const auto Cj = detail::param<json>(p, "C", "inf");
    const auto C = Cj.is_string() ? bounds::CValue::parse(Cj.get<std::string>()) : bounds::CValue::of(Cj.get<double>());
    const auto tr = detail::param<std::vector<double>>(p, "t_range", {0.5, 2.0});
    const auto sr = detail::param<std::vector<double>>(p, "s_range", {0.5, 2.0});
    const int count = detail::param(p, "count", 5);
    const auto ys = detail::param<std::vector<double>>(p, "ys", {0.0, 1.0, 2.0});
    require(tr.size() == 2 && sr.size() == 2 && count >= 1 && n >= 1, "harnack: bad ranges");
    // u = Gaussian of variance t + n/C: equality in the Li-Yau bound with constant C.
    const double s0 = C.infinite ? 0.0 : n / C.value;
    auto u = [&](double t, const Vector& x) {
        const double v = t + s0;
        return std::pow(2 * std::numbers::pi * v, -0.5 * n) * std::exp(-x.squaredNorm() / (2 * v));
    };
    const double tol = c.tol.value_or(1e-9);
    double worst = std::numeric_limits<double>::infinity();
    bounds::BoundSpec b;
    b.kind = bounds::BoundKind::harnack;
    b.C = C;
    b.n = n;
    for (double t : detail::linspace(tr[0], tr[1], count))
        for (double s : detail::linspace(sr[0], sr[1], count))
            for (double y : ys) {
                b.t = t;
                b.s = s;
                b.r = std::abs(y);
                const double ratio = u(t, Vector::Zero(n)) / u(t + s, detail::along_axis(y, n));
                auto res = bounds::check_field_against_bound(ratio, b, tol * std::max(1.0, ratio));
                worst = std::min(worst, res.margin);
                r.check("harnack", b.params(), res);
            }
    r.summary = {{"min_margin", worst}, {"C", C.str()}, {"n", n}};
    return r;
}

inline Report run_bsde(const ExperimentConfig& c) {
    using namespace bsde;
    const auto& p = c.params;
    Report r;
    r.name = "bsde";
    const auto problem = problem_from_json(
        detail::param<json>(p, "problem", {{"T", 1.0}, {"terminal", {{"family", "cosine"}, {"a", 0.5}}}}));
    const std::string pp = problem.params();
    RunConfig rc;
    rc.dt = c.dt.value_or(1e-2);
    rc.n_paths = c.paths.value_or(100000);
    rc.seed = *c.seed;
    rc.records = detail::param<std::size_t>(p, "records", 16);
    const auto run = solve_bsde_mc(problem, rc);
    const double y0 = run.Y[0];
    r.estimate("entropic_oracle_Y0", pp, {y0, 0.0, 1, rc.seed});

    const std::string runp = pp + ";" + detail::kv("dt", run.h) + ";paths=" + std::to_string(rc.n_paths);
    json summary{{"Y0", y0}, {"sup_norm", problem.terminal.sup_norm}, {"family", problem.terminal.family}};
    if (problem.terminal.bounded()) {
        auto mp = max_principle_check(run, c.tol.value_or(1e-6));
        summary["max_abs_Y"] = mp.observed;
        r.check("max_principle", runp, mp);
        MCEstimate e;
        r.check("bmo_bound", runp, bmo_check(run, 0.0, &e));
        r.estimate("bmo_norm", pp, e);
        summary["bmo"] = e.value;
    }
    MCEstimate wm;
    const auto w = girsanov_weights(run, 1.0);
    r.check("weight_mean", runp, weight_mean_check(w, &wm));
    r.estimate("weight_mean", pp, wm);
    summary["ess_fraction"] = w.ess.back();
    MCEstimate qe;
    r.check("q_representation", runp, q_representation_check(run, &qe));
    r.estimate("q_representation", pp, qe);

    auto sc = rc;
    sc.records = detail::param<std::size_t>(p, "submartingale_records", 8);
    const auto subrun = solve_bsde_mc(problem, sc);
    const auto rep = submartingale_diagnostic(subrun, detail::param(p, "K", 0.0));
    for (std::size_t j = 0; j < rep.differences.size(); ++j) {
        const double tol = 3 * rep.difference_se[j] + mc_floor(rep.values[j].value);
        r.check("submartingale",
                runp + ";" + detail::kv("t0", rep.times[j]) + ";" + detail::kv("t1", rep.times[j + 1]),
                CheckResult::make(rep.differences[j], 0.0, tol, "a(t1)-a(t0) se=" + fmt_num(rep.difference_se[j])));
    }
    for (std::size_t j = 0; j < rep.values.size(); ++j)
        r.estimate("submartingale_a_t" + fmt_num(rep.times[j]), pp, rep.values[j]);
    summary["submartingale"] = to_json(rep);

    const auto rpaths = detail::param<std::size_t>(p, "residual_paths", 1000);
    if (rpaths >= 2) {
        auto res_cfg = rc;
        res_cfg.n_paths = rpaths;
        res_cfg.records = 2;
        res_cfg.conditional_residual = true;
        const auto rr = residual_report(solve_bsde_mc(problem, res_cfg));
        r.estimate("residual_pathwise_mean_abs", pp, {rr.mean_abs, 0.0, rpaths, rc.seed});
        r.estimate("residual_conditional_mean_abs", pp, {rr.mean_abs_conditional, 0.0, rpaths, rc.seed});
        summary["residual"] = {{"pathwise", rr.mean_abs}, {"conditional", rr.mean_abs_conditional}};
    }

    if (detail::param(p, "calibration", true)) {
        // Constant Z = 1: int_0^T |Z|^2 = T exactly under any weights.
        const auto cal = make_problem(linear_terminal(Vector::Ones(1)), problem.T);
        auto cc = rc;
        cc.n_paths = std::min<std::size_t>(rc.n_paths, 20000);
        const auto crun = solve_bsde_mc(cal, cc);
        const auto e = bmo_norm_estimate(crun);
        r.check("bmo_calibration", cal.params(), equality_check(problem.T, e.value, 3 * e.std_error + mc_floor(1.0), "constant Z"));
        r.estimate("bmo_calibration", cal.params(), e);
        MCEstimate cw;
        r.check("weight_mean", cal.params(), weight_mean_check(girsanov_weights(crun), &cw));
        r.estimate("weight_mean", cal.params(), cw);
    }
    r.summary = summary;
    return r;
}

inline Report run_liyau_bsde(const ExperimentConfig& c) {
    const auto& p = c.params;
    Report r;
    r.name = "liyau_bsde";
    bsde::LiYauDemoConfig d;
    d.C = detail::param(p, "C", 1.0);
    d.n = detail::param(p, "n", 1.0);
    d.T = detail::param(p, "T", 1.0);
    d.amplitude = detail::param(p, "amplitude", 0.0);
    d.x0 = detail::param(p, "x0", 0.0);
    d.n_paths = c.paths.value_or(10000);
    d.seed = *c.seed;
    d.dt = c.dt.value_or(1e-3);
    d.grid = c.grid.value_or(256);
    const auto res = bsde::liyau_bsde_demo(d);
    const std::string pp = detail::kv("C", d.C) + ";" + detail::kv("n", d.n) + ";" + detail::kv("T", d.T) + ";" +
                           detail::kv("amplitude", d.amplitude) + ";" + detail::kv("x0", d.x0);
    r.estimate("liyau_bsde_Y0", pp, res.mc);
    r.estimate("liyau_bsde_inverse_terminal", pp, res.inverse_terminal);
    const double tol = c.tol.value_or(1e-9);
    if (d.amplitude == 0.0) {
        bounds::BoundSpec b;
        b.kind = bounds::BoundKind::liyau_upper;
        b.t = d.T;
        b.C = bounds::CValue::of(d.C);
        b.n = int(std::lround(d.n));
        if (double(b.n) == d.n)
            r.check("liyau_bsde_exact", b.params(), equality_check(b.evaluate(), res.exact, tol, "deterministic branch"));
    }
    r.check("liyau_bsde_mc", pp,
            equality_check(res.oracle, res.mc.value, 3 * res.mc.std_error + bsde::mc_floor(res.oracle), "Monte Carlo vs oracle"));
    r.summary = {{"oracle", res.oracle}, {"mc", res.mc.value}, {"stderr", res.mc.std_error}};
    if (std::isfinite(res.exact)) r.summary["exact"] = res.exact;
    return r;
}

inline Report run_flow(const ExperimentConfig& c) {
    using namespace flow;
    const auto& p = c.params;
    Report r;
    r.name = "flow";
    const auto fj = detail::param<json>(p, "field", {{"family", "plugin"}, {"name", "gbm"}, {"params", json::object()}});
    auto spec = fields::field_spec_from_json(fj);
    FlowConfig fc(spec);
    fc.T = detail::param(p, "T", 1.0);
    fc.dt = c.dt.value_or(1e-3);
    fc.n_paths = c.paths.value_or(1000);
    fc.seed = *c.seed;
    fc.scheme = flow_scheme_from_string(detail::param<std::string>(p, "scheme", "milstein"));
    if (p.contains("x0")) {
        const auto v = detail::param<std::vector<double>>(p, "x0", {});
        require(int(v.size()) == spec.dim(), "flow: x0 has wrong dimension");
        fc.x0 = Eigen::Map<const Vector>(v.data(), Eigen::Index(v.size()));
    } else {
        fc.x0 = Vector::Ones(spec.dim());
    }
    fc.record_stride = fc.steps();
    const double max_res = detail::param(p, "max_residual", 0.05);
    const auto e = simulate_flow(fc);
    e.require_usable();
    const double res = jk_identity_residual(e);
    const std::string pp = fj.dump() + ";scheme=" + to_string(fc.scheme) + ";" + detail::kv("dt", fc.step_size());
    r.check("jk_residual", pp, CheckResult::make(max_res, res, 0.0, "max ||J K - I||"));
    json summary{{"residual", res}, {"excluded_fraction", e.excluded_fraction()}, {"scheme", to_string(fc.scheme)}};
    if (detail::param(p, "refinement", true)) {
        auto half = fc;
        half.dt = fc.dt / 2;
        const auto e2 = simulate_flow(half);
        e2.require_usable();
        const double res2 = jk_identity_residual(e2);
        const double ratio = res2 > 0 ? res / res2 : std::numeric_limits<double>::infinity();
        summary["residual_half_dt"] = res2;
        summary["refinement_factor"] = ratio;
        if (res == 0.0) {
            r.check("jk_residual_half", pp, CheckResult::make(0.0, res2, 0.0, "exact case stays exact"));
        } else {
            r.check("jk_refinement_factor", pp, lower_check(1.5, ratio, 0.0, "factor >= 1.5"));
            r.check("jk_refinement_factor", pp, CheckResult::make(3.0, ratio, 0.0, "factor <= 3"));
        }
    }
    // Z through the flow for the test function f = sum_i sin x_i.
    auto grad = [](const Vector& x, double) { return Vector(x.array().cos()); };
    double zdiff = 0.0, zscale = 0.0;
    for (const auto& z : z_from_flow(e, e.times.size() - 1, grad)) {
        zdiff = std::max(zdiff, (z.direct - z.transport).cwiseAbs().maxCoeff());
        zscale = std::max(zscale, z.direct.cwiseAbs().maxCoeff());
    }
    r.check("z_two_evaluations", pp,
            CheckResult::make(max_res * std::max(1.0, zscale), zdiff, 0.0, "max |A f - A^T K^T J^T grad f|"));
    summary["z_max_difference"] = zdiff;
    r.estimate("jk_residual", pp, {res, 0.0, fc.n_paths, fc.seed});
    r.summary = summary;
    return r;
}

inline Report run_conditions(const ExperimentConfig& c) {
    const auto& p = c.params;
    Report r;
    r.name = "conditions";
    const auto fj = detail::param<json>(p, "field", {{"family", "constant"}, {"fields", {{1.0, 0.0}, {0.0, 1.0}}}});
    const auto spec = fields::field_spec_from_json(fj);
    fields::SampleBox box{Vector::Constant(spec.dim(), -1.0), Vector::Constant(spec.dim(), 1.0)};
    if (p.contains("box")) {
        const auto b = p.at("box");
        box.lo = fields::detail::vec_from_json(b.at("lo"));
        box.hi = fields::detail::vec_from_json(b.at("hi"));
        require(box.lo.size() == spec.dim() && box.hi.size() == spec.dim(), "conditions: box has wrong dimension");
    }
    const auto samples = detail::param<std::size_t>(p, "samples", 1000);
    const auto rep = fields::condition_report(spec, box, samples, *c.seed);
    const std::string pp = fj.dump() + ";samples=" + std::to_string(samples);
    r.check("C1_nonneg", pp, lower_check(0.0, rep.c1.value, 0.0, "C1 status " + to_string(rep.c1.status)));
    r.check("C2_nonneg", pp, lower_check(0.0, rep.c2.value, 0.0, "C2 status " + to_string(rep.c2.status)));
    r.check("K_sum", pp, equality_check(rep.c1.value + rep.c2.value, rep.K_hat, 0.0, "K = C1 + C2"));
    if (p.contains("expect")) {
        const auto ex = p.at("expect");
        const double tol = c.tol.value_or(1e-9);
        for (auto it = ex.begin(); it != ex.end(); ++it) {
            const double target = it.value().get<double>();
            double obs;
            if (it.key() == "C1") obs = rep.c1.value;
            else if (it.key() == "C2") obs = rep.c2.value;
            else if (it.key() == "K") obs = rep.K_hat;
            else if (it.key() == "frobenius_residual") obs = rep.frobenius.max_relative_residual;
            else throw ConfigError("conditions: unknown expectation '" + it.key() + "'");
            r.check("expect_" + it.key(), pp, equality_check(target, obs, tol * std::max(1.0, std::abs(target)), it.key()));
        }
    }
    r.summary = fields::to_json(rep);
    return r;
}

/// Runs one experiment. Invalid parameters raise ConfigError (or
/// PreconditionError); numerical breakdowns are recorded as failures.
inline Report run_experiment(const ExperimentConfig& c) {
    validate(c);
    try {
        if (c.experiment == "solve") return run_solve(c);
        if (c.experiment == "liyau") return run_liyau(c);
        if (c.experiment == "gradbound") return run_gradbound(c);
        if (c.experiment == "harnack") return run_harnack(c);
        if (c.experiment == "bsde") return run_bsde(c);
        if (c.experiment == "liyau_bsde") return run_liyau_bsde(c);
        if (c.experiment == "flow") return run_flow(c);
        if (c.experiment == "conditions") return run_conditions(c);
    } catch (const NumericalError& e) {
        Report r;
        r.name = c.experiment == "gradbound" ? "gradbound_" + (c.kind.empty() ? std::string("th11") : c.kind) : c.experiment;
        r.errors.push_back(std::string("numerical error: ") + e.what());
        return r;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("parameter error: ") + e.what());
    }
    throw ConfigError("unknown experiment '" + c.experiment + "'");
}

}  // namespace heatbound::experiments
