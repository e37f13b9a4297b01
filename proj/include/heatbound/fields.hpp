#pragma once

// Vector-field calculus for families A_0, ..., A_m on R^n: Lie brackets,
// the iterated-bracket field R_alpha, sampled estimates of the structure
// constants C1 and C2 of the sub-elliptic gradient estimate, and a
// pointwise Frobenius (bracket-in-span) test.
//
// Conventions used throughout:
//   value(a, x)     A_a(x), an n-vector
//   jacobian(a, x)  J(j, i) = dA_a^j / dx^i          (row = component)
//   hessian(a, x)   H[k](i, j) = d^2 A_a^k / dx^i dx^j

#include "heatbound/common.hpp"
#include "heatbound/random.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace heatbound::fields {

using Hessian = std::vector<Matrix>;

enum class DerivativeMode { analytic, finite_difference };

/// Affine field A(x) = M x + c.
struct AffineField {
    Matrix matrix;
    Vector offset;
};


class VectorFieldSpec {
public:
    using ValueFn = std::function<Vector(int, const Vector&)>;
    using JacobianFn = std::function<Matrix(int, const Vector&)>;
    using HessianFn = std::function<Hessian(int, const Vector&)>;

    /// Missing derivative callbacks fall back to central differences with
    /// step fd_step (first derivatives) and fd_step2 (second derivatives),
    /// both multiplied by length_scale.
    VectorFieldSpec(int n, int m, ValueFn value, JacobianFn jacobian = {}, HessianFn hessian = {},
                    double length_scale = 1.0)
        : n_(n), m_(m), value_(std::move(value)), jacobian_(std::move(jacobian)),
          hessian_(std::move(hessian)), fd_step_(1e-5 * length_scale), fd_step2_(1e-4 * length_scale) {
        require(n >= 1, "VectorFieldSpec: dimension n must be positive");
        require(m >= 1, "VectorFieldSpec: number of diffusion fields m must be positive");
        require(static_cast<bool>(value_), "VectorFieldSpec: value callback is required");
        require(length_scale > 0.0, "VectorFieldSpec: length scale must be positive");
    }

    int dim() const { return n_; }
    int diffusion_count() const { return m_; }

    DerivativeMode first_derivative_mode() const {
        return jacobian_ ? DerivativeMode::analytic : DerivativeMode::finite_difference;
    }
    DerivativeMode second_derivative_mode() const {
        return hessian_ ? DerivativeMode::analytic : DerivativeMode::finite_difference;
    }
    double fd_step() const { return fd_step_; }
    void set_fd_steps(double h1, double h2) {
        require(h1 > 0.0 && h2 > 0.0, "VectorFieldSpec: finite-difference steps must be positive");
        fd_step_ = h1;
        fd_step2_ = h2;
    }

    /// Bound on the coefficient derivatives, recorded for reports only.
    std::optional<double> declared_derivative_bound;
    std::string family = "user";
    /// Set for affine families; lets integrators skip callback evaluation.
    std::shared_ptr<const std::vector<AffineField>> affine;

    Vector value(int a, const Vector& x) const {
        check(a, x);
        Vector v = value_(a, x);
        if (v.size() != n_) throw NumericalError("VectorFieldSpec: value callback returned wrong size");
        return v;
    }

    Matrix jacobian(int a, const Vector& x) const {
        check(a, x);
        if (jacobian_) {
            Matrix j = jacobian_(a, x);
            if (j.rows() != n_ || j.cols() != n_)
                throw NumericalError("VectorFieldSpec: jacobian callback returned wrong shape");
            return j;
        }
        Matrix j(n_, n_);
        for (int i = 0; i < n_; ++i) {
            Vector xp = x, xm = x;
            xp(i) += fd_step_;
            xm(i) -= fd_step_;
            j.col(i) = (value_(a, xp) - value_(a, xm)) / (2.0 * fd_step_);
        }
        return j;
    }

    Hessian hessian(int a, const Vector& x) const {
        check(a, x);
        if (hessian_) {
            Hessian h = hessian_(a, x);
            if (static_cast<int>(h.size()) != n_)
                throw NumericalError("VectorFieldSpec: hessian callback returned wrong size");
            for (const auto& hk : h)
                if (hk.rows() != n_ || hk.cols() != n_)
                    throw NumericalError("VectorFieldSpec: hessian callback returned wrong shape");
            return h;
        }
        Hessian h(n_, Matrix::Zero(n_, n_));
        const double s = fd_step2_;
        for (int i = 0; i < n_; ++i) {
            for (int j = i; j < n_; ++j) {
                Vector d;
                if (i == j) {
                    Vector xp = x, xm = x;
                    xp(i) += s;
                    xm(i) -= s;
                    d = (value_(a, xp) - 2.0 * value_(a, x) + value_(a, xm)) / (s * s);
                } else {
                    Vector pp = x, pm = x, mp = x, mm = x;
                    pp(i) += s; pp(j) += s;
                    pm(i) += s; pm(j) -= s;
                    mp(i) -= s; mp(j) += s;
                    mm(i) -= s; mm(j) -= s;
                    d = (value_(a, pp) - value_(a, pm) - value_(a, mp) + value_(a, mm)) / (4.0 * s * s);
                }
                for (int k = 0; k < n_; ++k) {
                    h[k](i, j) = d(k);
                    h[k](j, i) = d(k);
                }
            }
        }
        return h;
    }

    /// n x m matrix whose columns are A_1(x), ..., A_m(x).
    Matrix diffusion_matrix(const Vector& x) const {
        Matrix a(n_, m_);
        for (int k = 1; k <= m_; ++k) a.col(k - 1) = value(k, x);
        return a;
    }

private:
    void check(int a, const Vector& x) const {
        if (a < 0 || a > m_) throw PreconditionError("VectorFieldSpec: field index out of range");
        if (x.size() != n_) throw PreconditionError("VectorFieldSpec: point has wrong dimension");
    }

    int n_;
    int m_;
    ValueFn value_;
    JacobianFn jacobian_;
    HessianFn hessian_;
    double fd_step_;
    double fd_step2_;
};

// ---------------------------------------------------------------------------
// Built-in families

/// A_a(x) = M_a x + c_a for a = 0..m (entry 0 is the drift). All second
/// derivatives vanish.
inline VectorFieldSpec affine_family(std::vector<AffineField> parts) {
    require(parts.size() >= 2, "affine_family: need a drift and at least one diffusion field");
    const int n = static_cast<int>(parts.front().offset.size());
    require(n >= 1, "affine_family: empty offset");
    for (const auto& p : parts)
        require(p.matrix.rows() == n && p.matrix.cols() == n && p.offset.size() == n,
                "affine_family: inconsistent shapes");
    const int m = static_cast<int>(parts.size()) - 1;
    auto shared = std::make_shared<std::vector<AffineField>>(std::move(parts));
    VectorFieldSpec spec(
        n, m, [shared](int a, const Vector& x) -> Vector { return (*shared)[a].matrix * x + (*shared)[a].offset; },
        [shared](int a, const Vector&) -> Matrix { return (*shared)[a].matrix; },
        [n](int, const Vector&) { return Hessian(n, Matrix::Zero(n, n)); });
    spec.family = "linear";
    spec.affine = shared;
    double bound = 0.0;
    for (const auto& p : *shared) bound = std::max(bound, inf_norm(p.matrix));
    spec.declared_derivative_bound = bound;
    return spec;
}

/// Constant fields; drift may be empty (zero).
inline VectorFieldSpec constant_family(const Vector& drift, const std::vector<Vector>& fields) {
    require(!fields.empty(), "constant_family: need at least one diffusion field");
    const auto n = fields.front().size();
    std::vector<AffineField> parts;
    parts.push_back({Matrix::Zero(n, n), drift.size() == 0 ? Vector(Vector::Zero(n)) : drift});
    for (const auto& f : fields) parts.push_back({Matrix::Zero(n, n), f});
    auto spec = affine_family(std::move(parts));
    spec.family = "constant";
    return spec;
}

/// Heisenberg fields on R^3: A_1 = d/dx, A_2 = d/dy + x d/dz, A_0 = 0.
inline VectorFieldSpec heisenberg_family() {
    Matrix m2 = Matrix::Zero(3, 3);
    m2(2, 0) = 1.0;
    auto spec = affine_family({{Matrix::Zero(3, 3), Vector::Zero(3)},
                               {Matrix::Zero(3, 3), Vector::Unit(3, 0)},
                               {m2, Vector::Unit(3, 1)}});
    spec.family = "heisenberg";
    return spec;
}

/// A_a = e_a for a = 1..n, with linear drift A_0(x) = D x.
inline VectorFieldSpec identity_frame(int n, const Matrix& drift_matrix) {
    require(n >= 1, "identity_frame: n must be positive");
    require(drift_matrix.size() == 0 || (drift_matrix.rows() == n && drift_matrix.cols() == n),
            "identity_frame: drift matrix shape");
    std::vector<AffineField> parts;
    parts.push_back({drift_matrix.size() == 0 ? Matrix(Matrix::Zero(n, n)) : drift_matrix, Vector::Zero(n)});
    for (int a = 0; a < n; ++a) parts.push_back({Matrix::Zero(n, n), Vector::Unit(n, a)});
    auto spec = affine_family(std::move(parts));
    spec.family = "identity_frame";
    return spec;
}

// ---------------------------------------------------------------------------
// Brackets

/// Coefficients of [A_b, A_a]:  A_b^i dA_a^j/dx^i - A_a^i dA_b^j/dx^i.
inline Vector lie_bracket(const VectorFieldSpec& s, int b, int a, const Vector& x) {
    if (a == b) {
        if (a < 0 || a > s.diffusion_count()) throw PreconditionError("lie_bracket: index out of range");
        return Vector::Zero(s.dim());
    }
    return s.jacobian(a, x) * s.value(b, x) - s.jacobian(b, x) * s.value(a, x);
}

/// Jacobian of the bracket field [A_b, A_a], built from first and second
/// derivatives by the product rule.
inline Matrix bracket_jacobian(const VectorFieldSpec& s, int b, int a, const Vector& x) {
    const int n = s.dim();
    const Vector va = s.value(a, x), vb = s.value(b, x);
    const Matrix ja = s.jacobian(a, x), jb = s.jacobian(b, x);
    const Hessian ha = s.hessian(a, x), hb = s.hessian(b, x);
    Matrix jc = ja * jb - jb * ja;
    for (int k = 0; k < n; ++k) {
        jc.row(k) += (ha[k] * vb).transpose();
        jc.row(k) -= (hb[k] * va).transpose();
    }
    return jc;
}

/// Coefficients of [A_c, [A_b, A_a]] by composing two bracket evaluations.
inline Vector nested_bracket(const VectorFieldSpec& s, int c, int b, int a, const Vector& x) {
    const Vector inner = lie_bracket(s, b, a, x);
    return bracket_jacobian(s, b, a, x) * s.value(c, x) - s.jacobian(c, x) * inner;
}

/// A_{b,b,a}^k from the closed five-term expansion of [A_b, [A_b, A_a]].
inline Vector triple_bracket(const VectorFieldSpec& s, int b, int a, const Vector& x) {
    const int m = s.diffusion_count();
    if (b < 1 || b > m || a < 1 || a > m) throw PreconditionError("triple_bracket: indices must lie in 1..m");
    const int n = s.dim();
    const Vector A = s.value(a, x), B = s.value(b, x);
    const Matrix JA = s.jacobian(a, x), JB = s.jacobian(b, x);
    const Hessian HA = s.hessian(a, x), HB = s.hessian(b, x);
    Vector out(n);
    for (int k = 0; k < n; ++k) {
        double v = B.dot(HA[k] * B) - B.dot(HB[k] * A);
        v += (JB * B).dot(JA.row(k).transpose());  // B^i dB^j/dx^i dA^k/dx^j
        v -= 2.0 * (JA * B).dot(JB.row(k).transpose());  // B^j dA^i/dx^j dB^k/dx^i
        v += (JB * A).dot(JB.row(k).transpose());  // A^i dB^j/dx^i dB^k/dx^j
        out(k) = v;
    }
    return out;
}

/// R_a = sum_b A_{b,b,a}.
inline Vector ricci_proxy_R(const VectorFieldSpec& s, int a, const Vector& x) {
    if (a < 1 || a > s.diffusion_count()) throw PreconditionError("ricci_proxy_R: index must lie in 1..m");
    Vector r = Vector::Zero(s.dim());
    for (int b = 1; b <= s.diffusion_count(); ++b) r += triple_bracket(s, b, a, x);
    return r;
}

/// All brackets needed at one point, indexed [b][a] for b = 0..m, a = 0..m.
struct BracketTable {
    std::vector<std::vector<Vector>> pair;
    std::vector<Vector> R;  // R[a] for a = 1..m (R[0] unused)

    static BracketTable at(const VectorFieldSpec& s, const Vector& x) {
        const int m = s.diffusion_count();
        BracketTable t;
        t.pair.assign(m + 1, std::vector<Vector>(m + 1));
        for (int b = 0; b <= m; ++b)
            for (int a = 0; a <= m; ++a) t.pair[b][a] = a < b ? Vector(-t.pair[a][b]) : lie_bracket(s, b, a, x);
        t.R.assign(m + 1, Vector::Zero(s.dim()));
        for (int a = 1; a <= m; ++a) t.R[a] = ricci_proxy_R(s, a, x);
        return t;
    }
};

// ---------------------------------------------------------------------------
// Structure constants

enum class ConditionStatus { satisfied, violated, denominator_degenerate };

inline std::string to_string(ConditionStatus s) {
    switch (s) {
        case ConditionStatus::satisfied: return "satisfied";
        case ConditionStatus::violated: return "violated";
        case ConditionStatus::denominator_degenerate: return "denominator-degenerate";
    }
    return "?";
}

/// Pointwise result: the smallest C >= 0 with LHS >= -C * sum_a <A_a, xi>^2
/// at this x, or a flag when no finite C exists.
struct PointConstant {
    double constant = 0.0;
    bool bounded = true;          // false: LHS < 0 somewhere the denominator vanishes
    bool degenerate = false;      // all A_a(x) = 0
    double unconstrained_min = 0.0;  // min of LHS over the unit sphere
};

struct SampleBox {
    Vector lo;
    Vector hi;
};

/// Sample i of a box. Even indices are seeded uniform draws, odd indices
/// Halton points, so every prefix of the sequence is itself a sample set.
inline Vector sample_point(const SampleBox& box, std::size_t i, std::uint64_t seed) {
    static constexpr unsigned primes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37};
    const auto n = box.lo.size();
    Vector x(n);
    if (i % 2 == 0) {
        PathRng rng(seed, i / 2);
        for (Eigen::Index d = 0; d < n; ++d) x(d) = box.lo(d) + rng.uniform() * (box.hi(d) - box.lo(d));
    } else {
        for (Eigen::Index d = 0; d < n; ++d)
            x(d) = box.lo(d) + radical_inverse(i / 2 + 1, primes[d % 12]) * (box.hi(d) - box.lo(d));
    }
    return x;
}

namespace detail {

struct RangeSplit {
    Matrix U;       // orthonormal basis of range(P)
    Vector lambda;  // positive eigenvalues of P on that range
    Matrix N;       // orthonormal basis of null(P)
};

inline RangeSplit split_range(const Matrix& P) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(P);
    const Vector ev = es.eigenvalues();
    const double tol = 1e-12 * std::max(1.0, ev.cwiseAbs().maxCoeff());
    std::vector<int> keep, drop;
    for (int i = 0; i < ev.size(); ++i) (ev(i) > tol ? keep : drop).push_back(i);
    RangeSplit r;
    r.U.resize(P.rows(), static_cast<Eigen::Index>(keep.size()));
    r.lambda.resize(static_cast<Eigen::Index>(keep.size()));
    r.N.resize(P.rows(), static_cast<Eigen::Index>(drop.size()));
    for (std::size_t i = 0; i < keep.size(); ++i) {
        r.U.col(i) = es.eigenvectors().col(keep[i]);
        r.lambda(i) = ev(keep[i]);
    }
    for (std::size_t i = 0; i < drop.size(); ++i) r.N.col(i) = es.eigenvectors().col(drop[i]);
    return r;
}

inline Matrix pseudo_inverse_sym(const Matrix& S, double rel_tol = 1e-12) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(S);
    const Vector ev = es.eigenvalues();
    const double tol = rel_tol * std::max(1.0, ev.cwiseAbs().maxCoeff());
    Vector inv = Vector::Zero(ev.size());
    for (int i = 0; i < ev.size(); ++i)
        if (std::abs(ev(i)) > tol) inv(i) = 1.0 / ev(i);
    return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

inline double min_eigen(const Matrix& S) {
    if (S.rows() == 0) return 0.0;
    return Eigen::SelfAdjointEigenSolver<Matrix>(S, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
}

inline double max_eigen(const Matrix& S) {
    if (S.rows() == 0) return 0.0;
    return Eigen::SelfAdjointEigenSolver<Matrix>(S, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
}

/// inf of (v^T W v) / (v^T P v) for symmetric W and PSD P, with the
/// convention that directions where P vanishes must have W >= 0 and cannot
/// couple into a negative quadratic. Returns (ratio_min, bounded, degenerate).
inline PointConstant ratio_minimum(const Matrix& W, const Matrix& P) {
    PointConstant out;
    out.unconstrained_min = min_eigen(W);
    const RangeSplit r = split_range(P);
    const double scale = std::max({1.0, W.cwiseAbs().maxCoeff(), P.cwiseAbs().maxCoeff()});
    const double tol = 1e-10 * scale;
    if (r.U.cols() == 0) {
        out.degenerate = true;
        out.bounded = out.unconstrained_min >= -tol;
        out.constant = 0.0;
        return out;
    }
    Matrix S = r.U.transpose() * W * r.U;
    if (r.N.cols() > 0) {
        const Matrix Wnn = r.N.transpose() * W * r.N;
        const Matrix Wnu = r.N.transpose() * W * r.U;
        if (min_eigen(Wnn) < -tol) {
            out.bounded = false;
            return out;
        }
        const Matrix pinv = pseudo_inverse_sym(Wnn);
        const Matrix leak = Wnu - Wnn * pinv * Wnu;
        if (leak.size() > 0 && leak.cwiseAbs().maxCoeff() > tol) {
            out.bounded = false;
            return out;
        }
        S -= Wnu.transpose() * pinv * Wnu;
    }
    const Vector isq = r.lambda.cwiseSqrt().cwiseInverse();
    const Matrix M = isq.asDiagonal() * S * isq.asDiagonal();
    out.constant = std::max(0.0, -min_eigen(0.5 * (M + M.transpose())));
    return out;
}

}  // namespace detail

/// Symmetric matrix of the full C1 quadratic form in v = (xi, theta_1..theta_m).
inline Matrix c1_form_matrix(const VectorFieldSpec& s, const Vector& x) {
    const int n = s.dim(), m = s.diffusion_count();
    const Matrix A = s.diffusion_matrix(x);
    const Matrix P = A * A.transpose();
    const BracketTable t = BracketTable::at(s, x);
    Matrix Q = Matrix::Zero(n * (m + 1), n * (m + 1));
    for (int b = 1; b <= m; ++b) {
        Matrix Bb = Matrix::Zero(n, n);
        for (int a = 1; a <= m; ++a) {
            Bb += A.col(a - 1) * t.pair[b][a].transpose();
            Bb += t.pair[b][a] * A.col(a - 1).transpose();
        }
        Q.block(n * b, n * b, n, n) += P;
        Q.block(n * b, 0, n, n) += Bb;
        Q.block(0, n * b, n, n) += Bb.transpose();
    }
    return Q;
}

/// Pointwise C1. Minimising over theta in closed form leaves
/// -xi^T S xi with S = sum_b B_b^T P^+ B_b, provided each B_b xi stays in
/// range(P); otherwise the form is unbounded below.
inline PointConstant c1_at(const VectorFieldSpec& s, const Vector& x) {
    const int n = s.dim(), m = s.diffusion_count();
    const Matrix A = s.diffusion_matrix(x);
    const Matrix P = A * A.transpose();
    const BracketTable t = BracketTable::at(s, x);
    const detail::RangeSplit r = detail::split_range(P);
    const Matrix Ppinv = detail::pseudo_inverse_sym(P);
    Matrix S = Matrix::Zero(n, n);
    double scale = std::max(1.0, P.cwiseAbs().maxCoeff());
    bool leaks = false;
    std::vector<Matrix> Bs;
    for (int b = 1; b <= m; ++b) {
        Matrix Bb = Matrix::Zero(n, n);
        for (int a = 1; a <= m; ++a) {
            Bb += A.col(a - 1) * t.pair[b][a].transpose();
            Bb += t.pair[b][a] * A.col(a - 1).transpose();
        }
        scale = std::max(scale, Bb.cwiseAbs().maxCoeff());
        Bs.push_back(Bb);
    }
    const double tol = 1e-10 * scale;
    for (const auto& Bb : Bs) {
        if (r.N.cols() > 0 && (r.N.transpose() * Bb).cwiseAbs().maxCoeff() > tol) leaks = true;
        S += Bb.transpose() * Ppinv * Bb;
    }
    PointConstant out;
    out.unconstrained_min = detail::min_eigen(c1_form_matrix(s, x));
    if (r.U.cols() == 0) {
        out.degenerate = true;
        out.bounded = out.unconstrained_min >= -tol;
        return out;
    }
    if (leaks || (r.N.cols() > 0 && (r.N.transpose() * S * r.N).cwiseAbs().maxCoeff() > tol)) {
        out.bounded = false;
        return out;
    }
    const Vector isq = r.lambda.cwiseSqrt().cwiseInverse();
    const Matrix M = isq.asDiagonal() * (r.U.transpose() * S * r.U) * isq.asDiagonal();
    out.constant = std::max(0.0, detail::max_eigen(0.5 * (M + M.transpose())));
    return out;
}

/// Symmetrised matrix of the C2 form:
///   sum_a (A_a R_a^T + 2 A_a A_{0,a}^T) + sum_{a,b} A_{b,a} A_{b,a}^T.
inline Matrix c2_form_matrix(const VectorFieldSpec& s, const Vector& x) {
    const int n = s.dim(), m = s.diffusion_count();
    const Matrix A = s.diffusion_matrix(x);
    const BracketTable t = BracketTable::at(s, x);
    Matrix W = Matrix::Zero(n, n);
    for (int a = 1; a <= m; ++a) {
        W += A.col(a - 1) * t.R[a].transpose();
        W += 2.0 * A.col(a - 1) * t.pair[0][a].transpose();
        for (int b = 1; b <= m; ++b) W += t.pair[b][a] * t.pair[b][a].transpose();
    }
    return 0.5 * (W + W.transpose());
}

inline PointConstant c2_at(const VectorFieldSpec& s, const Vector& x) {
    const Matrix A = s.diffusion_matrix(x);
    return detail::ratio_minimum(c2_form_matrix(s, x), A * A.transpose());
}

/// Sampled estimate of a structure constant over a box.
struct ConstantEstimate {
    double value = 0.0;
    ConditionStatus status = ConditionStatus::satisfied;
    double unconstrained_min = 0.0;  // reported for the degenerate case
    std::size_t violating_samples = 0;
    std::size_t sample_count = 0;
    Vector worst_point;
};

namespace detail {

template <class PointFn>
ConstantEstimate estimate_constant(const VectorFieldSpec& s, const SampleBox& box, std::size_t n_samples,
                                   std::uint64_t seed, PointFn&& at) {
    require(n_samples >= 1, "estimate constant: n_samples must be >= 1");
    require(box.lo.size() == s.dim() && box.hi.size() == s.dim(), "estimate constant: box dimension mismatch");
    for (int d = 0; d < s.dim(); ++d) require(box.lo(d) <= box.hi(d), "estimate constant: empty box");
    std::vector<PointConstant> pts(n_samples);
    std::vector<Vector> xs(n_samples);
    parallel_for(n_samples, [&](std::size_t i) {
        xs[i] = sample_point(box, i, seed);
        pts[i] = at(s, xs[i]);
    });
    ConstantEstimate e;
    e.sample_count = n_samples;
    e.unconstrained_min = std::numeric_limits<double>::infinity();
    std::size_t degenerate = 0;
    std::optional<std::size_t> first_violation, best;
    for (std::size_t i = 0; i < n_samples; ++i) {
        const auto& p = pts[i];
        e.unconstrained_min = std::min(e.unconstrained_min, p.unconstrained_min);
        if (!p.bounded) {
            if (!first_violation) first_violation = i;
            ++e.violating_samples;
        } else if (p.degenerate) {
            ++degenerate;
        } else if (!best || p.constant > pts[*best].constant) {
            best = i;
        }
    }
    if (best) e.value = pts[*best].constant;
    e.worst_point = first_violation ? xs[*first_violation] : best ? xs[*best] : xs.front();
    if (e.violating_samples > 0)
        e.status = ConditionStatus::violated;
    else if (degenerate == n_samples)
        e.status = ConditionStatus::denominator_degenerate;
    return e;
}

}  // namespace detail

inline ConstantEstimate estimate_C1(const VectorFieldSpec& s, const SampleBox& box, std::size_t n_samples,
                                    std::uint64_t seed) {
    return detail::estimate_constant(s, box, n_samples, seed,
                                     [](const VectorFieldSpec& sp, const Vector& x) { return c1_at(sp, x); });
}

inline ConstantEstimate estimate_C2(const VectorFieldSpec& s, const SampleBox& box, std::size_t n_samples,
                                    std::uint64_t seed) {
    return detail::estimate_constant(s, box, n_samples, seed,
                                     [](const VectorFieldSpec& sp, const Vector& x) { return c2_at(sp, x); });
}

// ---------------------------------------------------------------------------
// Frobenius

struct FrobeniusReport {
    double max_relative_residual = 0.0;
    Vector worst_point;
    int worst_b = -1;
    int worst_a = -1;
    int min_rank = 0;
    int max_rank = 0;
    /// Sample points where the span drops below max_rank or a diffusion
    /// field vanishes.
    std::vector<Vector> degenerate_points;
};

/// Relative least-squares residual of v against span of the columns of A.
inline double span_residual(const Matrix& A, const Vector& v) {
    const double nv = v.norm();
    if (nv <= 1e-14 * std::max(1.0, A.cwiseAbs().maxCoeff())) return 0.0;
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(A);
    cod.setThreshold(1e-12);
    const Vector proj = A * cod.solve(v);
    return (v - proj).norm() / nv;
}

inline FrobeniusReport frobenius_check(const VectorFieldSpec& s, const std::vector<Vector>& points) {
    require(!points.empty(), "frobenius_check: need at least one sample point");
    const int m = s.diffusion_count();
    FrobeniusReport rep;
    rep.min_rank = std::numeric_limits<int>::max();
    std::vector<int> ranks;
    std::vector<bool> vanishing;
    for (const auto& x : points) {
        const Matrix A = s.diffusion_matrix(x);
        Eigen::JacobiSVD<Matrix> svd(A);
        svd.setThreshold(1e-12);
        const int rank = static_cast<int>(svd.rank());
        ranks.push_back(rank);
        bool vanish = false;
        for (int a = 0; a < m; ++a) vanish = vanish || A.col(a).norm() <= 1e-14;
        vanishing.push_back(vanish);
        rep.min_rank = std::min(rep.min_rank, rank);
        rep.max_rank = std::max(rep.max_rank, rank);
        for (int b = 0; b <= m; ++b) {
            for (int a = 1; a <= m; ++a) {
                const double r = span_residual(A, lie_bracket(s, b, a, x));
                if (rep.worst_b < 0 || r > rep.max_relative_residual) {
                    rep.max_relative_residual = r;
                    rep.worst_point = x;
                    rep.worst_b = b;
                    rep.worst_a = a;
                }
            }
        }
    }
    for (std::size_t i = 0; i < points.size(); ++i)
        if (ranks[i] < rep.max_rank || vanishing[i]) rep.degenerate_points.push_back(points[i]);
    return rep;
}

// ---------------------------------------------------------------------------
// Reports and loading

struct ConditionReport {
    ConstantEstimate c1;
    ConstantEstimate c2;
    double K_hat = 0.0;
    FrobeniusReport frobenius;
    std::size_t sample_count = 0;
    SampleBox domain;
};

inline ConditionReport condition_report(const VectorFieldSpec& s, const SampleBox& box, std::size_t n_samples,
                                        std::uint64_t seed) {
    ConditionReport r;
    r.c1 = estimate_C1(s, box, n_samples, seed);
    r.c2 = estimate_C2(s, box, n_samples, seed);
    r.K_hat = r.c1.value + r.c2.value;
    std::vector<Vector> pts;
    pts.reserve(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) pts.push_back(sample_point(box, i, seed));
    r.frobenius = frobenius_check(s, pts);
    r.sample_count = n_samples;
    r.domain = box;
    return r;
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline nlohmann::json to_json(const ConstantEstimate& e) {
    return {{"value", e.value},
            {"status", to_string(e.status)},
            {"unconstrained_min", e.unconstrained_min},
            {"violating_samples", e.violating_samples},
            {"sample_count", e.sample_count},
            {"worst_point", to_std(e.worst_point)}};
}

inline nlohmann::json to_json(const ConditionReport& r) {
    nlohmann::json degenerate = nlohmann::json::array();
    for (const auto& p : r.frobenius.degenerate_points) degenerate.push_back(to_std(p));
    return {{"C1_hat", r.c1.value},
            {"C2_hat", r.c2.value},
            {"K_hat", r.K_hat},
            {"C1", to_json(r.c1)},
            {"C2", to_json(r.c2)},
            {"frobenius_residual", r.frobenius.max_relative_residual},
            {"frobenius_worst_point", to_std(r.frobenius.worst_point)},
            {"effective_rank_min", r.frobenius.min_rank},
            {"effective_rank_max", r.frobenius.max_rank},
            {"degenerate_points", degenerate},
            {"sample_count", r.sample_count},
            {"sample_domain", {{"lo", to_std(r.domain.lo)}, {"hi", to_std(r.domain.hi)}}}};
}

using FieldPlugin = std::function<VectorFieldSpec(const nlohmann::json& params)>;

inline std::map<std::string, FieldPlugin>& plugin_registry() {
    static std::map<std::string, FieldPlugin> reg = [] {
        std::map<std::string, FieldPlugin> r;
        // A_1 = d/dx, A_2 = x d/dx on R.
        r["line_dilation"] = [](const nlohmann::json&) {
            auto s = affine_family({{Matrix::Zero(1, 1), Vector::Zero(1)},
                                    {Matrix::Zero(1, 1), Vector::Ones(1)},
                                    {Matrix::Ones(1, 1), Vector::Zero(1)}});
            s.family = "line_dilation";
            return s;
        };
        // A_1(x) = sigma x on R (geometric Brownian motion).
        r["gbm"] = [](const nlohmann::json& p) {
            const double sigma = p.value("sigma", 1.0), mu = p.value("mu", 0.0);
            auto s = affine_family({{Matrix::Constant(1, 1, mu), Vector::Zero(1)},
                                    {Matrix::Constant(1, 1, sigma), Vector::Zero(1)}});
            s.family = "gbm";
            return s;
        };
        // A_1(x, y) = omega (-y, x) on R^2.
        r["rotation"] = [](const nlohmann::json& p) {
            const double w = p.value("omega", 1.0);
            Matrix rot(2, 2);
            rot << 0.0, -w, w, 0.0;
            auto s = affine_family({{Matrix::Zero(2, 2), Vector::Zero(2)}, {rot, Vector::Zero(2)}});
            s.family = "rotation";
            return s;
        };
        return r;
    }();
    return reg;
}

inline void register_field_plugin(const std::string& name, FieldPlugin factory) {
    plugin_registry()[name] = std::move(factory);
}

namespace detail {

inline Vector vec_from_json(const nlohmann::json& j) {
    require(j.is_array(), "field spec: expected a numeric array");
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    return v;
}

inline Matrix mat_from_json(const nlohmann::json& j) {
    require(j.is_array() && !j.empty() && j[0].is_array(), "field spec: expected a matrix (array of rows)");
    Matrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j[0].size()));
    for (std::size_t r = 0; r < j.size(); ++r) {
        require(j[r].size() == j[0].size(), "field spec: ragged matrix");
        for (std::size_t c = 0; c < j[r].size(); ++c)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j[r][c].get<double>();
    }
    return m;
}

inline AffineField affine_from_json(const nlohmann::json& j, Eigen::Index n) {
    AffineField f{Matrix::Zero(n, n), Vector::Zero(n)};
    if (j.contains("matrix")) f.matrix = mat_from_json(j.at("matrix"));
    if (j.contains("offset")) f.offset = vec_from_json(j.at("offset"));
    return f;
}

}  // namespace detail

/// Builds a field family from its JSON description:
///   {"family": "constant", "drift": [..], "fields": [[..], ..]}
///   {"family": "linear", "n": 2, "drift": {"matrix": .., "offset": ..},
///    "fields": [{"matrix": .., "offset": ..}, ..]}
///   {"family": "heisenberg"}
///   {"family": "identity_frame", "n": 2, "drift_matrix": [[..], ..]}
///   {"family": "plugin", "name": "rotation", "params": {..}}
inline VectorFieldSpec field_spec_from_json(const nlohmann::json& j) {
    require(j.is_object() && j.contains("family"), "field spec: missing 'family'");
    const std::string fam = j.at("family").get<std::string>();
    if (fam == "constant") {
        std::vector<Vector> fs;
        for (const auto& f : j.at("fields")) fs.push_back(detail::vec_from_json(f));
        require(!fs.empty(), "field spec: constant family needs fields");
        Vector drift = j.contains("drift") ? detail::vec_from_json(j.at("drift")) : Vector::Zero(fs.front().size());
        return constant_family(drift, fs);
    }
    if (fam == "linear") {
        const auto n = static_cast<Eigen::Index>(j.at("n").get<int>());
        std::vector<AffineField> parts;
        parts.push_back(j.contains("drift") ? detail::affine_from_json(j.at("drift"), n)
                                            : AffineField{Matrix::Zero(n, n), Vector::Zero(n)});
        for (const auto& f : j.at("fields")) parts.push_back(detail::affine_from_json(f, n));
        return affine_family(std::move(parts));
    }
    if (fam == "heisenberg") return heisenberg_family();
    if (fam == "identity_frame") {
        const int n = j.at("n").get<int>();
        Matrix d = j.contains("drift_matrix") ? detail::mat_from_json(j.at("drift_matrix")) : Matrix::Zero(n, n);
        return identity_frame(n, d);
    }
    if (fam == "plugin") {
        const std::string name = j.at("name").get<std::string>();
        auto& reg = plugin_registry();
        auto it = reg.find(name);
        require(it != reg.end(), "field spec: unknown plugin '" + name + "'");
        return it->second(j.value("params", nlohmann::json::object()));
    }
    throw PreconditionError("field spec: unknown family '" + fam + "'");
}

}  // namespace heatbound::fields
