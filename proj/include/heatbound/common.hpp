#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace heatbound {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Raised when an operation is called outside its documented domain.
class PreconditionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a computation loses a property it needs to continue
/// (positivity, finiteness, weight degeneracy, ...).
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, std::string_view what) {
    if (!cond) throw PreconditionError(std::string(what));
}

/// A Monte Carlo value with its standard error.
struct MCEstimate {
    double value = 0.0;
    double std_error = 0.0;
    std::size_t n_paths = 0;
    std::uint64_t seed = 0;
};

/// Comparison of a bound against an observed quantity.
/// passed <=> margin >= -tolerance.
struct CheckResult {
    double bound_value = 0.0;
    double observed = 0.0;
    double margin = 0.0;
    bool passed = false;
    double tolerance = 0.0;
    std::string context;

    static CheckResult make(double bound, double obs, double tol, std::string ctx) {
        CheckResult r;
        r.bound_value = bound;
        r.observed = obs;
        r.margin = bound - obs;
        r.tolerance = tol;
        r.passed = std::isfinite(r.margin) ? r.margin >= -tol : false;
        r.context = std::move(ctx);
        return r;
    }
};

/// Pairwise (cascade) summation. The result depends only on the order of
/// the input, so reductions over per-path arrays are independent of how
/// the paths were scheduled.
inline double pairwise_sum(std::span<const double> xs) {
    if (xs.size() <= 8) {
        double s = 0.0;
        for (double x : xs) s += x;
        return s;
    }
    const std::size_t half = xs.size() / 2;
    return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

inline double pairwise_mean(std::span<const double> xs) {
    return xs.empty() ? 0.0 : pairwise_sum(xs) / static_cast<double>(xs.size());
}

/// Sample mean and standard error of the mean.
inline MCEstimate sample_estimate(std::span<const double> xs, std::uint64_t seed = 0) {
    MCEstimate e;
    e.n_paths = xs.size();
    e.seed = seed;
    if (xs.empty()) return e;
    e.value = pairwise_mean(xs);
    if (xs.size() > 1) {
        std::vector<double> sq(xs.size());
        for (std::size_t i = 0; i < xs.size(); ++i) sq[i] = (xs[i] - e.value) * (xs[i] - e.value);
        const double var = pairwise_sum(sq) / static_cast<double>(xs.size() - 1);
        e.std_error = std::sqrt(var / static_cast<double>(xs.size()));
    }
    return e;
}

/// 64-bit FNV-1a, used to tag parameter sets in CSV reports.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Shortest round-trippable decimal rendering, used for every number
/// written to CSV so reruns are byte-identical.
inline std::string fmt_num(double x) {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    std::ostringstream os;
    os.precision(17);
    os << x;
    return os.str();
}

inline double inf_norm(const Matrix& m) {
    return m.rows() == 0 ? 0.0 : m.cwiseAbs().rowwise().sum().maxCoeff();
}

}  // namespace heatbound
