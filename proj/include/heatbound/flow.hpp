#pragma once

// Stochastic flow of dX = A_0 dt + sum_a A_a o dw^a (Stratonovich), integrated
// in Ito form together with its Jacobian J and an independently evolved
// inverse K.

#include "heatbound/common.hpp"
#include "heatbound/fields.hpp"
#include "heatbound/random.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace heatbound::flow {

using fields::VectorFieldSpec;

enum class FlowScheme { euler_maruyama, milstein };

inline std::string to_string(FlowScheme s) { return s == FlowScheme::euler_maruyama ? "euler-maruyama" : "milstein"; }

inline FlowScheme flow_scheme_from_string(const std::string& s) {
    if (s == "euler-maruyama" || s == "em") return FlowScheme::euler_maruyama;
    if (s == "milstein") return FlowScheme::milstein;
    throw PreconditionError("unknown flow scheme '" + s + "'");
}

struct FlowConfig {
    VectorFieldSpec spec;
    double T = 1.0;
    double dt = 1e-3;
    std::size_t n_paths = 1000;
    std::uint64_t seed = 0;
    Vector x0;
    FlowScheme scheme = FlowScheme::euler_maruyama;
    std::size_t record_stride = 1;  // keep every k-th state (the final state is always kept)
    bool store_increments = false;

    explicit FlowConfig(VectorFieldSpec s) : spec(std::move(s)), x0(Vector::Zero(spec.dim())) {}

    std::size_t steps() const { return std::size_t(std::ceil(T / dt - 1e-9)); }
    double step_size() const { return T / double(steps()); }

    void validate() const {
        require(dt > 0 && std::isfinite(dt), "FlowConfig: dt must be positive");
        require(T >= dt * (1 - 1e-12), "FlowConfig: need T >= dt");
        require(n_paths >= 1, "FlowConfig: need at least one path");
        require(record_stride >= 1, "FlowConfig: record_stride must be positive");
        require(x0.size() == spec.dim(), "FlowConfig: x0 has wrong dimension");
    }
};

struct FlowState {
    Vector phi;
    Matrix J;
    Matrix Kinv;
    double t = 0.0;
};

struct FlowPath {
    std::vector<FlowState> states;       // at the ensemble's recorded times
    std::vector<double> increments;      // step-major, m per step (if stored)
    double max_jk_residual = 0.0;        // over every step, not only recorded ones
    bool blown_up = false;
};

struct PathEnsemble {
    FlowConfig config;
    std::vector<double> times;
    std::vector<std::size_t> record_steps;
    std::vector<FlowPath> paths;

    std::size_t excluded() const {
        std::size_t c = 0;
        for (const auto& p : paths) c += p.blown_up;
        return c;
    }
    double excluded_fraction() const { return paths.empty() ? 0.0 : double(excluded()) / double(paths.size()); }

    /// Estimates built on the ensemble refuse to run past 0.1% exclusions.
    void require_usable() const {
        if (excluded_fraction() > 1e-3)
            throw NumericalError("flow ensemble: " + std::to_string(excluded()) + " of " + std::to_string(paths.size()) +
                                 " paths blew up (limit 0.1%)");
    }
};

namespace detail {

// sum_k H[i](l, k) v^k: derivative of the Jacobian along v.
inline Matrix hessian_along(const fields::Hessian& H, const Vector& v) {
    const auto n = v.size();
    Matrix out(n, n);
    for (Eigen::Index i = 0; i < n; ++i) out.row(i) = (H[std::size_t(i)] * v).transpose();
    return out;
}

struct FieldData {
    std::vector<Vector> A;
    std::vector<Matrix> Jac;
    std::vector<fields::Hessian> H;
};

inline FieldData evaluate_fields(const VectorFieldSpec& s, const Vector& x) {
    FieldData d;
    const int m = s.diffusion_count();
    for (int a = 0; a <= m; ++a) {
        d.A.push_back(s.value(a, x));
        d.Jac.push_back(s.jacobian(a, x));
        d.H.push_back(s.hessian(a, x));
    }
    return d;
}

// One step of (phi, J, K) given Brownian increments dw.
inline void step(const VectorFieldSpec& s, FlowScheme scheme, double dt, const double* dw, FlowState& st) {
    const int m = s.diffusion_count();
    const auto d = evaluate_fields(s, st.phi);

    Vector phi_drift = d.A[0];
    Matrix C = d.Jac[0];       // J drift factor
    Matrix CK = d.Jac[0];      // K drift factor
    for (int a = 1; a <= m; ++a) {
        phi_drift += 0.5 * d.Jac[a] * d.A[a];
        const Matrix Ma = hessian_along(d.H[a], d.A[a]);
        const Matrix Ja2 = d.Jac[a] * d.Jac[a];
        C += 0.5 * (Ma + Ja2);
        CK += 0.5 * (Ma - Ja2);
    }
    Vector dphi = phi_drift * dt;
    Matrix dJ = C * st.J * dt;
    Matrix dK = -st.Kinv * CK * dt;
    for (int a = 1; a <= m; ++a) {
        const double w = dw[a - 1];
        dphi += d.A[a] * w;
        dJ += d.Jac[a] * st.J * w;
        dK -= st.Kinv * d.Jac[a] * w;
    }
    if (scheme == FlowScheme::milstein) {
        // sum_{a,b} (L^b sigma_a) I_{ba} with I_{ba} ~ (dw_a dw_b - delta_ab dt) / 2;
        // the Levy-area part is dropped.
        for (int a = 1; a <= m; ++a)
            for (int b = 1; b <= m; ++b) {
                const double I = 0.5 * (dw[a - 1] * dw[b - 1] - (a == b ? dt : 0.0));
                if (I == 0.0) continue;
                const Matrix Mab = hessian_along(d.H[a], d.A[b]);
                dphi += d.Jac[a] * d.A[b] * I;
                dJ += (Mab + d.Jac[a] * d.Jac[b]) * st.J * I;
                dK += (st.Kinv * d.Jac[b] * d.Jac[a] - st.Kinv * Mab) * I;
            }
    }
    st.phi += dphi;
    st.J += dJ;
    st.Kinv += dK;
    st.t += dt;
}

// Affine fields have constant Jacobians and no second derivatives, so the
// drift factors are fixed for the whole path.
struct AffineCoefficients {
    std::vector<Matrix> M;
    std::vector<Vector> c;
    Matrix drift_matrix;  // M_0 + 1/2 sum M_a^2
    Vector drift_offset;  // c_0 + 1/2 sum M_a c_a
    Matrix CK;            // M_0 - 1/2 sum M_a^2
    std::vector<std::vector<Matrix>> MM;  // M_a M_b

    explicit AffineCoefficients(const std::vector<fields::AffineField>& parts) {
        for (const auto& p : parts) {
            M.push_back(p.matrix);
            c.push_back(p.offset);
        }
        const std::size_t m = parts.size() - 1;
        drift_matrix = M[0];
        drift_offset = c[0];
        CK = M[0];
        MM.assign(m + 1, std::vector<Matrix>(m + 1));
        for (std::size_t a = 1; a <= m; ++a)
            for (std::size_t b = 1; b <= m; ++b) MM[a][b] = M[a] * M[b];
        for (std::size_t a = 1; a <= m; ++a) {
            drift_matrix += 0.5 * MM[a][a];
            drift_offset += 0.5 * M[a] * c[a];
            CK -= 0.5 * MM[a][a];
        }
    }
};

inline void step_affine(const AffineCoefficients& ac, FlowScheme scheme, double dt, const double* dw, FlowState& st) {
    const std::size_t m = ac.M.size() - 1;
    Vector dphi = (ac.drift_matrix * st.phi + ac.drift_offset) * dt;
    Matrix G = ac.drift_matrix * dt;  // J increment factor
    Matrix H = ac.CK * dt;            // K increment factor, dK = -K H
    for (std::size_t a = 1; a <= m; ++a) {
        const double w = dw[a - 1];
        dphi += (ac.M[a] * st.phi + ac.c[a]) * w;
        G += ac.M[a] * w;
        H += ac.M[a] * w;
    }
    if (scheme == FlowScheme::milstein)
        for (std::size_t a = 1; a <= m; ++a)
            for (std::size_t b = 1; b <= m; ++b) {
                const double I = 0.5 * (dw[a - 1] * dw[b - 1] - (a == b ? dt : 0.0));
                if (I == 0.0) continue;
                dphi += ac.M[a] * (ac.M[b] * st.phi + ac.c[b]) * I;
                G += ac.MM[a][b] * I;
                H -= ac.MM[b][a] * I;
            }
    st.phi += dphi;
    st.J += G * st.J;
    st.Kinv -= st.Kinv * H;
    st.t += dt;
}

}  // namespace detail

/// Simulates path i of the ensemble from start point x0 (cfg.x0 when empty).
/// Path i always uses random stream i, so it can be regenerated alone.
inline FlowPath simulate_path(const FlowConfig& cfg, std::size_t index, const Vector& x0 = Vector()) {
    const int n = cfg.spec.dim(), m = cfg.spec.diffusion_count();
    const std::size_t steps = cfg.steps();
    const double dt = cfg.step_size();
    const double sq = std::sqrt(dt);
    PathRng rng(cfg.seed, index);
    FlowPath path;
    FlowState st{x0.size() ? x0 : cfg.x0, Matrix::Identity(n, n), Matrix::Identity(n, n), 0.0};
    path.states.push_back(st);
    if (cfg.store_increments) path.increments.reserve(steps * std::size_t(m));
    std::vector<double> dw(std::size_t(m), 0.0);
    const Matrix I = Matrix::Identity(n, n);
    std::optional<detail::AffineCoefficients> affine;
    if (cfg.spec.affine) affine.emplace(*cfg.spec.affine);
    for (std::size_t k = 1; k <= steps; ++k) {
        for (auto& w : dw) w = sq * rng.normal();
        if (cfg.store_increments) path.increments.insert(path.increments.end(), dw.begin(), dw.end());
        if (path.blown_up) continue;  // keep the stream aligned for increments
        if (affine)
            detail::step_affine(*affine, cfg.scheme, dt, dw.data(), st);
        else
            detail::step(cfg.spec, cfg.scheme, dt, dw.data(), st);
        st.t = double(k) * dt;
        if (!st.phi.allFinite() || !st.J.allFinite() || !st.Kinv.allFinite()) {
            path.blown_up = true;
            continue;
        }
        path.max_jk_residual = std::max(path.max_jk_residual, inf_norm(st.J * st.Kinv - I));
        if (k % cfg.record_stride == 0 || k == steps) path.states.push_back(st);
    }
    return path;
}

inline std::vector<std::size_t> recorded_steps(const FlowConfig& cfg) {
    std::vector<std::size_t> r{0};
    const std::size_t steps = cfg.steps();
    for (std::size_t k = 1; k <= steps; ++k)
        if (k % cfg.record_stride == 0 || k == steps) r.push_back(k);
    return r;
}

inline PathEnsemble simulate_flow(const FlowConfig& cfg) {
    cfg.validate();
    PathEnsemble e{cfg, {}, recorded_steps(cfg), {}};
    for (auto k : e.record_steps) e.times.push_back(double(k) * cfg.step_size());
    e.paths.resize(cfg.n_paths);
    parallel_for(cfg.n_paths, [&](std::size_t i) { e.paths[i] = simulate_path(cfg, i); });
    return e;
}

/// Max over usable paths and all steps of ||J K - I||_inf.
inline double jk_identity_residual(const PathEnsemble& e) {
    double r = 0.0;
    for (const auto& p : e.paths)
        if (!p.blown_up) r = std::max(r, p.max_jk_residual);
    return r;
}

// ---- Z representation -----------------------------------------------------

/// Euclidean gradient of f(T - t, .) at a point; t is the flow time.
using GradientFn = std::function<Vector(const Vector& x, double t)>;
using ScalarFn = std::function<double(const Vector& x, double t)>;

struct ZSample {
    Vector direct;     // A_a(phi) . grad f(phi)
    Vector transport;  // A_a(phi)^T K^T (J^T grad f(phi))
};

inline Vector z_direct(const VectorFieldSpec& s, const Vector& phi, const Vector& grad) {
    Vector z(s.diffusion_count());
    for (int a = 1; a <= s.diffusion_count(); ++a) z(a - 1) = s.value(a, phi).dot(grad);
    return z;
}

/// Z from the initial-point gradient Y_l = dY/dx0^l: Z^a = A_a(phi)^T K^T Y_l.
inline Vector z_from_initial_gradient(const VectorFieldSpec& s, const FlowState& st, const Vector& y_grad) {
    return z_direct(s, st.phi, st.Kinv.transpose() * y_grad);
}

/// Both evaluations of Z at recorded index k for every usable path.
inline std::vector<ZSample> z_from_flow(const PathEnsemble& e, std::size_t k, const GradientFn& grad) {
    require(k < e.times.size(), "z_from_flow: record index out of range");
    e.require_usable();
    std::vector<ZSample> out;
    for (const auto& p : e.paths) {
        if (p.blown_up) continue;
        const auto& st = p.states[k];
        const Vector g = grad(st.phi, st.t);
        if (!g.allFinite()) throw NumericalError("z_from_flow: gradient not finite");
        out.push_back({z_direct(e.config.spec, st.phi, g), z_from_initial_gradient(e.config.spec, st, st.J.transpose() * g)});
    }
    return out;
}

/// dY/dx0 for path i at recorded index k by central differences in the start
/// point, re-simulating with the same increments.
inline Vector initial_point_gradient(const FlowConfig& cfg, std::size_t path, std::size_t k, const ScalarFn& Y,
                                     double eps = 1e-5) {
    const int n = cfg.spec.dim();
    Vector g(n);
    for (int l = 0; l < n; ++l) {
        Vector xp = cfg.x0, xm = cfg.x0;
        xp(l) += eps;
        xm(l) -= eps;
        const auto pp = simulate_path(cfg, path, xp), pm = simulate_path(cfg, path, xm);
        if (pp.blown_up || pm.blown_up) throw NumericalError("initial_point_gradient: path blew up");
        require(k < pp.states.size(), "initial_point_gradient: record index out of range");
        g(l) = (Y(pp.states[k].phi, pp.states[k].t) - Y(pm.states[k].phi, pm.states[k].t)) / (2 * eps);
    }
    return g;
}

// ---- export ---------------------------------------------------------------

/// time,component,mean,std_error over usable paths.
inline void write_summary_csv(std::ostream& os, const PathEnsemble& e) {
    os << "time,component,mean,std_error\n";
    const auto n = e.config.spec.dim();
    for (std::size_t k = 0; k < e.times.size(); ++k)
        for (int c = 0; c < n; ++c) {
            std::vector<double> xs;
            for (const auto& p : e.paths)
                if (!p.blown_up) xs.push_back(p.states[k].phi(c));
            auto est = sample_estimate(xs);
            os << fmt_num(e.times[k]) << ",phi" << c << ',' << fmt_num(est.value) << ',' << fmt_num(est.std_error) << '\n';
        }
}

namespace detail {
template <class T>
void put_le(std::ostream& os, T v) {
    static_assert(sizeof(T) == 8);
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}
}  // namespace detail

/// Header of five little-endian uint64 (n, m, recorded steps, paths, seed),
/// then for each path and recorded step: phi, J (row-major), K (row-major)
/// as little-endian float64. Blown-up paths are written as NaN.
inline void write_binary(std::ostream& os, const PathEnsemble& e) {
    const auto n = std::uint64_t(e.config.spec.dim());
    detail::put_le(os, n);
    detail::put_le(os, std::uint64_t(e.config.spec.diffusion_count()));
    detail::put_le(os, std::uint64_t(e.times.size()));
    detail::put_le(os, std::uint64_t(e.paths.size()));
    detail::put_le(os, e.config.seed);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (const auto& p : e.paths)
        for (std::size_t k = 0; k < e.times.size(); ++k) {
            const bool ok = !p.blown_up && k < p.states.size();
            for (std::uint64_t i = 0; i < n; ++i) detail::put_le(os, ok ? p.states[k].phi(Eigen::Index(i)) : nan);
            for (const Matrix* M : {ok ? &p.states[k].J : nullptr, ok ? &p.states[k].Kinv : nullptr})
                for (std::uint64_t r = 0; r < n; ++r)
                    for (std::uint64_t c = 0; c < n; ++c)
                        detail::put_le(os, M ? (*M)(Eigen::Index(r), Eigen::Index(c)) : nan);
        }
}

inline nlohmann::json summary_json(const PathEnsemble& e) {
    return {{"n", e.config.spec.dim()},
            {"m", e.config.spec.diffusion_count()},
            {"T", e.config.T},
            {"dt", e.config.step_size()},
            {"steps", e.config.steps()},
            {"paths", e.paths.size()},
            {"seed", e.config.seed},
            {"scheme", to_string(e.config.scheme)},
            {"excluded", e.excluded()},
            {"jk_residual", jk_identity_residual(e)}};
}

}  // namespace heatbound::flow
