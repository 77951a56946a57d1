#pragma once

// Weighted Frechet means. The recursive estimator walks geodesics point by
// point, M_0 = P_0 and M_n = geodesic(M_{n-1}, P_n, w_n / sum_{j<=n} w_j); it is
// what every layer evaluates. The fixed-point oracle minimizes the weighted
// variance directly and exists to check the estimator.

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mdcnn/errors.hpp"
#include "mdcnn/linalg.hpp"
#include "mdcnn/manifold.hpp"

namespace mdcnn {

/// Convex weights stored through their square roots: w_i = raw_i^2 / sum_j raw_j^2.
class ConvexWeights {
public:
    static constexpr double kRawFloor = 1e-6;

    ConvexWeights() = default;
    explicit ConvexWeights(std::vector<double> raw) : raw_(std::move(raw)) {
        if (raw_.empty()) throw DomainError("ConvexWeights: empty weight vector");
        floor_raw();
    }

    /// Raw values chosen so the derived weights equal `w` (which must be positive).
    static ConvexWeights from_weights(std::span<const double> w) {
        std::vector<double> raw;
        raw.reserve(w.size());
        for (double v : w) {
            if (!(v > 0.0)) throw DomainError("ConvexWeights: weights must be strictly positive");
            raw.push_back(std::sqrt(v));
        }
        return ConvexWeights(std::move(raw));
    }

    static ConvexWeights uniform(std::size_t n) { return ConvexWeights(std::vector<double>(n, 1.0)); }

    std::size_t size() const { return raw_.size(); }
    std::span<const double> raw() const { return raw_; }
    std::vector<double>& raw_mutable() { return raw_; }

    std::vector<double> weights() const { return normalize(raw_); }

    /// Keeps |raw_i| >= kRawFloor so every derived weight stays strictly positive.
    void floor_raw() {
        for (double& r : raw_)
            if (std::abs(r) < kRawFloor) r = std::signbit(r) ? -kRawFloor : kRawFloor;
    }

    static std::vector<double> normalize(std::span<const double> raw) {
        double total = 0.0;
        for (double r : raw) total += r * r;
        std::vector<double> w;
        w.reserve(raw.size());
        for (double r : raw) w.push_back(r * r / total);
        return w;
    }

private:
    std::vector<double> raw_;
};

/// Step fractions t_n = w_n / sum_{j<=n} w_j for n >= 1 (t_0 is implicit).
/// Any prefix of the weights yields the same fractions, which is what makes
/// the truncated-tap boundary rule equivalent to renormalizing the prefix.
inline std::vector<double> step_fractions(std::span<const double> w) {
    std::vector<double> t(w.size(), 1.0);
    double running = w.empty() ? 0.0 : w[0];
    for (std::size_t n = 1; n < w.size(); ++n) {
        running += w[n];
        t[n] = w[n] / running;
    }
    return t;
}

namespace detail {
inline void check_wfm_inputs(std::size_t points, std::size_t weights, const char* op) {
    if (points == 0) throw DomainError(std::string(op) + ": empty point set");
    if (points != weights)
        throw DomainError(std::string(op) + ": " + std::to_string(points) + " points but " + std::to_string(weights) +
                          " weights");
}
}  // namespace detail

/// Recursive estimator over raw points. `w` must be positive; it need not sum to 1.
inline Matrix recursive_wfm(ManifoldKind kind, std::span<const Matrix> points, std::span<const double> w) {
    detail::check_wfm_inputs(points.size(), w.size(), "recursive_wfm");
    const std::vector<double> t = step_fractions(w);
    Matrix m = points[0];
    for (std::size_t n = 1; n < points.size(); ++n) {
        if (points[n].rows() != m.rows() || points[n].cols() != m.cols())
            throw DomainError("recursive_wfm: points have mismatched dimensions");
        m = geodesic(kind, m, points[n], t[n]);
    }
    return m;
}

inline SpdPoint recursive_wfm(std::span<const SpdPoint> points, const ConvexWeights& weights) {
    detail::check_wfm_inputs(points.size(), weights.size(), "recursive_wfm");
    std::vector<Matrix> raw;
    raw.reserve(points.size());
    for (const auto& p : points) {
        detail::require_same_dim(points[0].dim(), p.dim(), "recursive_wfm");
        raw.push_back(p.matrix());
    }
    return SpdPoint(recursive_wfm(ManifoldKind::Spd, raw, weights.weights()));
}

inline SpherePoint recursive_wfm(std::span<const SpherePoint> points, const ConvexWeights& weights) {
    detail::check_wfm_inputs(points.size(), weights.size(), "recursive_wfm");
    std::vector<Matrix> raw;
    raw.reserve(points.size());
    for (const auto& p : points) {
        detail::require_same_dim(points[0].ambient_dim(), p.ambient_dim(), "recursive_wfm");
        raw.push_back(p.column());
    }
    Vector v = recursive_wfm(ManifoldKind::Sphere, raw, weights.weights()).col(0);
    return SpherePoint(v / v.norm());
}

/// sum_i w_i d^2(P_i, M)
inline double weighted_variance(ManifoldKind kind, std::span<const Matrix> points, std::span<const double> w,
                                const Matrix& m) {
    detail::check_wfm_inputs(points.size(), w.size(), "weighted_variance");
    double acc = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (points[i].rows() != m.rows() || points[i].cols() != m.cols())
            throw DomainError("weighted_variance: dimension mismatch");
        const double d = distance(kind, points[i], m);
        acc += w[i] * d * d;
    }
    return acc;
}

struct OracleOptions {
    double tol = 1e-10;
    int max_iter = 200;
};

/// Fixed-point iteration M <- exp_M(sum_i w_i log_M(P_i)) for the minimizer of
/// the weighted variance, started from the recursive estimate. Stops once the
/// Riemannian norm of the update is below tol. Weights are normalized first.
inline Matrix exact_wfm_oracle(ManifoldKind kind, std::span<const Matrix> points, std::span<const double> w,
                               OracleOptions opts = {}) {
    detail::check_wfm_inputs(points.size(), w.size(), "exact_wfm_oracle");
    if (!(opts.tol > 0.0)) throw DomainError("exact_wfm_oracle: tol must be positive");
    double total = 0.0;
    for (double v : w) total += v;
    Matrix m = recursive_wfm(kind, points, w);

    for (int iter = 0; iter < opts.max_iter; ++iter) {
        if (kind == ManifoldKind::Spd) {
            const spd::Factors f = spd::factors(m);
            Matrix step = Matrix::Zero(m.rows(), m.cols());
            for (std::size_t i = 0; i < points.size(); ++i)
                step += (w[i] / total) * matrix_function(sandwich(f.inv_sqrt, points[i]), {SpectralFn::Log});
            const double norm = step.norm();
            m = sandwich(f.sqrt, matrix_function(step, {SpectralFn::Exp}));
            if (norm < opts.tol) return m;
        } else {
            Matrix step = Matrix::Zero(m.rows(), 1);
            for (std::size_t i = 0; i < points.size(); ++i) step += (w[i] / total) * sphere::log_map(m, points[i]);
            const double norm = step.norm();
            m = sphere::exp_map(m, step);
            m /= m.norm();
            if (norm < opts.tol) return m;
        }
    }
    throw NumericalError("exact_wfm_oracle: no convergence within " + std::to_string(opts.max_iter) + " iterations");
}

/// Returns a warning when sphere inputs span more than pi/2, where uniqueness of
/// the weighted mean is no longer guaranteed. The estimator still runs.
inline std::optional<std::string> uniqueness_warning(ManifoldKind kind, std::span<const Matrix> points) {
    if (kind != ManifoldKind::Sphere) return std::nullopt;
    double diameter = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i)
        for (std::size_t j = i + 1; j < points.size(); ++j)
            diameter = std::max(diameter, sphere::distance(points[i], points[j]));
    if (diameter > std::numbers::pi / 2.0)
        return "sphere inputs have diameter " + std::to_string(diameter) +
               " > pi/2; the weighted mean may not be unique";
    return std::nullopt;
}

}  // namespace mdcnn
