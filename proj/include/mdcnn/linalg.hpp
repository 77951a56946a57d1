#pragma once

// Dense symmetric linear algebra for small matrices (n <= 16 in practice):
// a cyclic Jacobi eigensolver and spectral matrix functions built on it.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mdcnn/errors.hpp"

namespace mdcnn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct EigenDecomposition {
    Vector values;   // ascending
    Matrix vectors;  // orthonormal columns, vectors.col(i) pairs with values(i)
};

inline constexpr int kJacobiMaxSweeps = 100;
inline constexpr double kJacobiOffDiagTol = 1e-14;
inline constexpr double kSymmetryTol = 1e-12;
/// Eigenvalues are clamped here before log / negative powers.
inline constexpr double kEigenFloor = 1e-12;

inline double max_abs(const Matrix& a) { return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff(); }

inline bool is_symmetric(const Matrix& a, double rel_tol = kSymmetryTol) {
    if (a.rows() != a.cols()) return false;
    const double scale = max_abs(a);
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = i + 1; j < a.cols(); ++j)
            if (std::abs(a(i, j) - a(j, i)) > rel_tol * scale) return false;
    return true;
}

inline Matrix symmetrized(const Matrix& a) { return 0.5 * (a + a.transpose()); }

/// sym(S Y S^T); the congruence used by every SPD routine.
inline Matrix sandwich(const Matrix& s, const Matrix& y) { return symmetrized(s * y * s.transpose()); }

namespace detail {

// Cyclic Jacobi with a threshold on the first sweeps (Rutishauser). Operates
// in place on a symmetric copy; accumulates rotations into v.
inline void jacobi_inplace(Matrix& a, Matrix& v) {
    const Eigen::Index n = a.rows();
    v.setIdentity(n, n);
    if (n <= 1) return;
    const double fro = a.norm();
    if (fro == 0.0) return;
    const double tol = kJacobiOffDiagTol * fro;

    for (int sweep = 0; sweep < kJacobiMaxSweeps; ++sweep) {
        double off = 0.0;
        for (Eigen::Index p = 0; p < n; ++p)
            for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        off = std::sqrt(2.0 * off);
        if (off <= tol) return;

        // Skip tiny entries during the first sweeps only.
        const double threshold = sweep < 3 ? 0.2 * off / static_cast<double>(n * n) : 0.0;
        for (Eigen::Index p = 0; p < n - 1; ++p) {
            for (Eigen::Index q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double app = a(p, p);
                const double aqq = a(q, q);
                if (std::abs(apq) <= threshold) continue;
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;

                a(p, p) = app - t * apq;
                a(q, q) = aqq + t * apq;
                a(p, q) = a(q, p) = 0.0;
                for (Eigen::Index r = 0; r < n; ++r) {
                    if (r == p || r == q) continue;
                    const double arp = a(r, p);
                    const double arq = a(r, q);
                    a(r, p) = a(p, r) = c * arp - s * arq;
                    a(r, q) = a(q, r) = s * arp + c * arq;
                }
                for (Eigen::Index r = 0; r < n; ++r) {
                    const double vrp = v(r, p);
                    const double vrq = v(r, q);
                    v(r, p) = c * vrp - s * vrq;
                    v(r, q) = s * vrp + c * vrq;
                }
            }
        }
    }
    throw NumericalError("sym_eig: Jacobi iteration did not converge in " +
                         std::to_string(kJacobiMaxSweeps) + " sweeps");
}

}  // namespace detail

/// Eigendecomposition without the symmetry check. The input is symmetrized first.
inline EigenDecomposition sym_eig_unchecked(const Matrix& a) {
    Matrix work = symmetrized(a);
    Matrix v;
    detail::jacobi_inplace(work, v);
    const Eigen::Index n = a.rows();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index i, Eigen::Index j) { return work(i, i) < work(j, j); });
    EigenDecomposition out{Vector(n), Matrix(n, n)};
    for (Eigen::Index k = 0; k < n; ++k) {
        out.values(k) = work(order[static_cast<std::size_t>(k)], order[static_cast<std::size_t>(k)]);
        out.vectors.col(k) = v.col(order[static_cast<std::size_t>(k)]);
    }
    return out;
}

/// A = V diag(lambda) V^T with ascending lambda.
inline EigenDecomposition sym_eig(const Matrix& a) {
    if (a.rows() != a.cols())
        throw DomainError("sym_eig: matrix is " + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + ", expected square");
    if (!a.allFinite()) throw DomainError("sym_eig: non-finite entries");
    if (!is_symmetric(a)) throw DomainError("sym_eig: matrix is not symmetric");
    return sym_eig_unchecked(a);
}

/// V diag(f(lambda)) V^T.
template <class F>
Matrix spectral_apply(const EigenDecomposition& e, F&& f) {
    const Eigen::Index n = e.values.size();
    Matrix scaled = e.vectors;
    for (Eigen::Index k = 0; k < n; ++k) scaled.col(k) *= f(e.values(k));
    return symmetrized(scaled * e.vectors.transpose());
}

/// Scalar functions applied through the spectrum, with their derivatives and
/// numerically stable first divided differences (f(a) - f(b)) / (a - b).
enum class SpectralFn { Sqrt, InvSqrt, Log, Exp, Pow };

struct SpectralFunction {
    SpectralFn kind;
    double exponent = 1.0;  // used by Pow

    static double clamp(double x) { return std::max(x, kEigenFloor); }

    double value(double x) const {
        switch (kind) {
            case SpectralFn::Sqrt: return std::sqrt(clamp(x));
            case SpectralFn::InvSqrt: return 1.0 / std::sqrt(clamp(x));
            case SpectralFn::Log: return std::log(clamp(x));
            case SpectralFn::Exp: return std::exp(x);
            case SpectralFn::Pow: return std::pow(clamp(x), exponent);
        }
        return 0.0;
    }

    double derivative(double x) const {
        switch (kind) {
            case SpectralFn::Sqrt: return 0.5 / std::sqrt(clamp(x));
            case SpectralFn::InvSqrt: return -0.5 / (clamp(x) * std::sqrt(clamp(x)));
            case SpectralFn::Log: return 1.0 / clamp(x);
            case SpectralFn::Exp: return std::exp(x);
            case SpectralFn::Pow: return exponent * std::pow(clamp(x), exponent - 1.0);
        }
        return 0.0;
    }

    double divided_difference(double a, double b) const {
        if (a == b) return derivative(a);
        switch (kind) {
            case SpectralFn::Sqrt: {
                return 1.0 / (std::sqrt(clamp(a)) + std::sqrt(clamp(b)));
            }
            case SpectralFn::InvSqrt: {
                const double sa = std::sqrt(clamp(a));
                const double sb = std::sqrt(clamp(b));
                return -1.0 / (sa * sb * (sa + sb));
            }
            case SpectralFn::Log: {
                const double ca = clamp(a), cb = clamp(b);
                if (ca == cb) return derivative(a);
                return std::log1p((ca - cb) / cb) / (ca - cb);
            }
            case SpectralFn::Exp: {
                return std::exp(b) * std::expm1(a - b) / (a - b);
            }
            case SpectralFn::Pow: {
                const double ca = clamp(a), cb = clamp(b);
                if (ca == cb) return derivative(a);
                return std::pow(cb, exponent) * std::expm1(exponent * std::log1p((ca - cb) / cb)) /
                       (ca - cb);
            }
        }
        return 0.0;
    }
};

inline Matrix matrix_function(const Matrix& a, const SpectralFunction& f) {
    return spectral_apply(sym_eig_unchecked(a), [&](double x) { return f.value(x); });
}

/// Frechet derivative of the spectral function at A = V diag(lambda) V^T applied
/// to a symmetric direction E (Daleckii-Krein). The map is self-adjoint under the
/// Frobenius inner product, so this also pulls adjoints back.
inline Matrix spectral_frechet(const EigenDecomposition& e, const SpectralFunction& f, const Matrix& dir) {
    const Eigen::Index n = e.values.size();
    Matrix inner = e.vectors.transpose() * symmetrized(dir) * e.vectors;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            inner(i, j) *= f.divided_difference(e.values(i), e.values(j));
    return e.vectors * inner * e.vectors.transpose();
}

/// Smallest gap between consecutive (ascending) eigenvalues; infinity for n < 2.
inline double min_eigen_gap(const Vector& values) {
    double gap = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 1; i < values.size(); ++i) gap = std::min(gap, values(i) - values(i - 1));
    return gap;
}

}  // namespace mdcnn
