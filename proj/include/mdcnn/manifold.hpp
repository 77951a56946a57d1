#pragma once

// Riemannian primitives for SPD(n) with the affine-invariant metric and for the
// unit sphere S^{m-1} with the great-circle metric.
//
// Two layers: unchecked functions on raw matrices in namespaces `spd` and
// `sphere` (hot paths, no validation), and the validated value types
// SpdPoint / SpherePoint / IsometryElement with their free functions.
// Sphere points are stored as m x 1 matrices so both manifolds share one
// point representation.

#include <cmath>
#include <numbers>
#include <string>
#include <string_view>

#include "mdcnn/errors.hpp"
#include "mdcnn/linalg.hpp"

namespace mdcnn {

enum class ManifoldKind : std::uint8_t { Spd = 0, Sphere = 1 };

inline std::string_view to_string(ManifoldKind kind) {
    return kind == ManifoldKind::Spd ? "spd" : "sphere";
}

inline ManifoldKind parse_manifold(std::string_view text) {
    if (text == "spd") return ManifoldKind::Spd;
    if (text == "sphere") return ManifoldKind::Sphere;
    throw DomainError("unknown manifold '" + std::string(text) + "' (expected spd or sphere)");
}

namespace spd {

struct Factors {
    Matrix sqrt;
    Matrix inv_sqrt;
};

inline Factors factors(const Matrix& x) {
    const EigenDecomposition e = sym_eig_unchecked(x);
    const SpectralFunction fs{SpectralFn::Sqrt};
    const SpectralFunction fi{SpectralFn::InvSqrt};
    return {spectral_apply(e, [&](double v) { return fs.value(v); }),
            spectral_apply(e, [&](double v) { return fi.value(v); })};
}

/// Eigenvalues of X^{-1/2} Y X^{-1/2}.
inline Vector relative_spectrum(const Matrix& x, const Matrix& y) {
    return sym_eig_unchecked(sandwich(factors(x).inv_sqrt, y)).values;
}

inline double squared_distance(const Matrix& x, const Matrix& y) {
    const Vector lambda = relative_spectrum(x, y);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < lambda.size(); ++i) {
        const double l = std::log(std::max(lambda(i), kEigenFloor));
        acc += l * l;
    }
    return acc;
}

inline double distance(const Matrix& x, const Matrix& y) { return std::sqrt(squared_distance(x, y)); }

/// X^{1/2} (X^{-1/2} Y X^{-1/2})^t X^{1/2}
inline Matrix geodesic(const Matrix& x, const Matrix& y, double t) {
    const Factors f = factors(x);
    return sandwich(f.sqrt, matrix_function(sandwich(f.inv_sqrt, y), {SpectralFn::Pow, t}));
}

inline Matrix log_map(const Matrix& base, const Matrix& x) {
    const Factors f = factors(base);
    return sandwich(f.sqrt, matrix_function(sandwich(f.inv_sqrt, x), {SpectralFn::Log}));
}

inline Matrix exp_map(const Matrix& base, const Matrix& v) {
    const Factors f = factors(base);
    return sandwich(f.sqrt, matrix_function(sandwich(f.inv_sqrt, v), {SpectralFn::Exp}));
}

/// Riemannian norm of tangent vector v at base: ||X^{-1/2} V X^{-1/2}||_F.
inline double tangent_norm(const Matrix& base, const Matrix& v) {
    return sandwich(factors(base).inv_sqrt, v).norm();
}

inline Matrix congruence(const Matrix& a, const Matrix& x) { return sandwich(a, x); }

}  // namespace spd

namespace sphere {

inline constexpr double kAntipodalTol = 1e-12;
inline constexpr double kSeriesThreshold = 1e-4;

inline double clamped_dot(const Matrix& x, const Matrix& y) {
    return std::clamp(x.col(0).dot(y.col(0)), -1.0, 1.0);
}

inline double distance(const Matrix& x, const Matrix& y) { return std::acos(clamped_dot(x, y)); }

/// Slerp weights out = a x + b y, together with their partials in the cosine
/// c = <x, y> and in t. Uses a Taylor expansion for nearly coincident points.
struct SlerpCoefficients {
    double a, b;
    double da_dc, db_dc;
    double da_dt, db_dt;
};

inline SlerpCoefficients slerp_coefficients(double c, double t) {
    if (1.0 + c <= kAntipodalTol)
        throw DegenerateGeodesicError("sphere geodesic: antipodal points have no unique geodesic");
    const double theta = std::acos(c);
    const double u = 1.0 - t;
    SlerpCoefficients k{};
    if (theta < kSeriesThreshold) {
        const double th2 = theta * theta;
        auto weight = [&](double s) {
            return s * (1.0 + (1.0 - s * s) * th2 / 6.0 + (3.0 * s * s * s * s - 10.0 * s * s + 7.0) * th2 * th2 / 360.0);
        };
        auto dweight_dc = [&](double s) { return s * (s * s - 1.0) / 3.0 * (1.0 - (s * s - 4.0) * th2 / 10.0); };
        auto dweight_ds = [&](double s) { return 1.0 + (1.0 - 3.0 * s * s) * th2 / 6.0; };
        k.a = weight(u);
        k.b = weight(t);
        k.da_dc = dweight_dc(u);
        k.db_dc = dweight_dc(t);
        k.da_dt = -dweight_ds(u);
        k.db_dt = dweight_ds(t);
        return k;
    }
    const double s = std::sin(theta);
    const double su = std::sin(u * theta), st = std::sin(t * theta);
    const double cu = std::cos(u * theta), ct = std::cos(t * theta);
    k.a = su / s;
    k.b = st / s;
    const double da_dtheta = (u * cu * s - su * c) / (s * s);
    const double db_dtheta = (t * ct * s - st * c) / (s * s);
    k.da_dc = -da_dtheta / s;
    k.db_dc = -db_dtheta / s;
    k.da_dt = -theta * cu / s;
    k.db_dt = theta * ct / s;
    return k;
}

inline Matrix geodesic(const Matrix& x, const Matrix& y, double t) {
    const SlerpCoefficients k = slerp_coefficients(clamped_dot(x, y), t);
    return k.a * x + k.b * y;
}

/// theta / sin(theta) with its derivative in c = cos(theta).
struct LogScale {
    double k;
    double dk_dc;
};

inline LogScale log_scale(double c) {
    if (1.0 + c <= kAntipodalTol)
        throw DegenerateGeodesicError("sphere log: antipodal points have no unique geodesic");
    const double theta = std::acos(c);
    if (theta < kSeriesThreshold) {
        const double th2 = theta * theta;
        return {1.0 + th2 / 6.0 + 7.0 * th2 * th2 / 360.0, -(1.0 / 3.0 + 2.0 * th2 / 15.0)};
    }
    const double s = std::sin(theta);
    return {theta / s, -(s - theta * c) / (s * s * s)};
}

inline Matrix log_map(const Matrix& base, const Matrix& x) {
    const double c = clamped_dot(base, x);
    return log_scale(c).k * (x - c * base);
}

inline Matrix exp_map(const Matrix& base, const Matrix& v) {
    const double n = v.norm();
    if (n == 0.0) return base;
    return std::cos(n) * base + (std::sin(n) / n) * v;
}

}  // namespace sphere

// ---------------------------------------------------------------------------
// Validated value types.

class SpdPoint {
public:
    explicit SpdPoint(Matrix entries) : m_(std::move(entries)) {
        if (m_.rows() == 0 || m_.rows() != m_.cols())
            throw DomainError("SpdPoint: expected a non-empty square matrix");
        if (!m_.allFinite()) throw DomainError("SpdPoint: non-finite entries");
        if (!is_symmetric(m_)) throw DomainError("SpdPoint: matrix is not symmetric");
        if (sym_eig_unchecked(m_).values(0) <= 0.0) throw DomainError("SpdPoint: matrix is not positive definite");
    }

    static SpdPoint identity(int n) { return SpdPoint(Matrix::Identity(n, n)); }

    int dim() const { return static_cast<int>(m_.rows()); }
    const Matrix& matrix() const { return m_; }

private:
    Matrix m_;
};

class SpherePoint {
public:
    static constexpr double kNormTol = 1e-12;

    explicit SpherePoint(Vector entries) : v_(std::move(entries)) {
        if (v_.size() == 0) throw DomainError("SpherePoint: empty vector");
        if (!v_.allFinite()) throw DomainError("SpherePoint: non-finite entries");
        if (std::abs(v_.norm() - 1.0) > kNormTol)
            throw DomainError("SpherePoint: vector is not unit norm (norm " + std::to_string(v_.norm()) + ")");
    }

    static SpherePoint basis(int m, int i) {
        Vector e = Vector::Zero(m);
        e(i) = 1.0;
        return SpherePoint(std::move(e));
    }

    int ambient_dim() const { return static_cast<int>(v_.size()); }
    const Vector& vector() const { return v_; }
    Matrix column() const { return v_; }

private:
    Vector v_;
};

namespace detail {
inline void require_same_dim(int a, int b, const char* op) {
    if (a != b)
        throw DomainError(std::string(op) + ": dimension mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
}
}  // namespace detail

inline double spd_dist(const SpdPoint& x, const SpdPoint& y) {
    detail::require_same_dim(x.dim(), y.dim(), "spd_dist");
    return spd::distance(x.matrix(), y.matrix());
}

inline SpdPoint spd_geodesic(const SpdPoint& x, const SpdPoint& y, double t) {
    detail::require_same_dim(x.dim(), y.dim(), "spd_geodesic");
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("spd_geodesic: t must lie in [0, 1]");
    return SpdPoint(spd::geodesic(x.matrix(), y.matrix(), t));
}

inline Matrix spd_log(const SpdPoint& base, const SpdPoint& x) {
    detail::require_same_dim(base.dim(), x.dim(), "spd_log");
    return spd::log_map(base.matrix(), x.matrix());
}

inline SpdPoint spd_exp(const SpdPoint& base, const Matrix& v) {
    if (v.rows() != base.dim() || v.cols() != base.dim())
        throw DomainError("spd_exp: tangent vector has wrong shape");
    if (!is_symmetric(v, 1e-10)) throw DomainError("spd_exp: tangent vector is not symmetric");
    return SpdPoint(spd::exp_map(base.matrix(), v));
}

inline double sphere_dist(const SpherePoint& x, const SpherePoint& y) {
    detail::require_same_dim(x.ambient_dim(), y.ambient_dim(), "sphere_dist");
    return std::acos(std::clamp(x.vector().dot(y.vector()), -1.0, 1.0));
}

inline SpherePoint sphere_geodesic(const SpherePoint& x, const SpherePoint& y, double t) {
    detail::require_same_dim(x.ambient_dim(), y.ambient_dim(), "sphere_geodesic");
    if (!(t >= 0.0 && t <= 1.0)) throw DomainError("sphere_geodesic: t must lie in [0, 1]");
    Vector out = sphere::geodesic(x.column(), y.column(), t).col(0);
    return SpherePoint(out / out.norm());
}

inline Vector sphere_log(const SpherePoint& base, const SpherePoint& x) {
    detail::require_same_dim(base.ambient_dim(), x.ambient_dim(), "sphere_log");
    return sphere::log_map(base.column(), x.column()).col(0);
}

inline SpherePoint sphere_exp(const SpherePoint& base, const Vector& v) {
    detail::require_same_dim(base.ambient_dim(), static_cast<int>(v.size()), "sphere_exp");
    Vector out = sphere::exp_map(base.column(), v).col(0);
    return SpherePoint(out / out.norm());
}

// ---------------------------------------------------------------------------
// Isometries: congruence X -> A X A^T on SPD, rotation x -> Q x on the sphere.

class IsometryElement {
public:
    enum class Kind { SpdCongruence, SphereRotation };

    static IsometryElement congruence(Matrix a) {
        if (a.rows() != a.cols()) throw DomainError("congruence: matrix must be square");
        if (std::abs(a.determinant()) <= 1e-10) throw DomainError("congruence: matrix is singular");
        return IsometryElement(Kind::SpdCongruence, std::move(a));
    }

    static IsometryElement rotation(Matrix q) {
        if (q.rows() != q.cols()) throw DomainError("rotation: matrix must be square");
        const Matrix gram = q.transpose() * q - Matrix::Identity(q.rows(), q.cols());
        if (gram.norm() > 1e-10) throw DomainError("rotation: matrix is not orthogonal");
        return IsometryElement(Kind::SphereRotation, std::move(q));
    }

    Kind kind() const { return kind_; }
    const Matrix& matrix() const { return m_; }
    int dim() const { return static_cast<int>(m_.rows()); }

    /// Applies the action to a raw point of the matching manifold.
    Matrix apply(const Matrix& point) const {
        if (point.rows() != m_.rows())
            throw DomainError("isometry: dimension mismatch (" + std::to_string(m_.rows()) + " vs " +
                              std::to_string(point.rows()) + ")");
        if (kind_ == Kind::SpdCongruence) return spd::congruence(m_, point);
        return m_ * point;
    }

private:
    IsometryElement(Kind kind, Matrix m) : kind_(kind), m_(std::move(m)) {}

    Kind kind_;
    Matrix m_;
};

inline SpdPoint spd_act(const IsometryElement& g, const SpdPoint& x) {
    if (g.kind() != IsometryElement::Kind::SpdCongruence) throw DomainError("spd_act: expected a congruence");
    return SpdPoint(g.apply(x.matrix()));
}

inline SpherePoint sphere_act(const IsometryElement& g, const SpherePoint& x) {
    if (g.kind() != IsometryElement::Kind::SphereRotation) throw DomainError("sphere_act: expected a rotation");
    Vector out = g.apply(x.column()).col(0);
    return SpherePoint(out / out.norm());
}

// ---------------------------------------------------------------------------
// Runtime dispatch on raw points, used by the network and the data layer.

inline Matrix geodesic(ManifoldKind kind, const Matrix& x, const Matrix& y, double t) {
    return kind == ManifoldKind::Spd ? spd::geodesic(x, y, t) : sphere::geodesic(x, y, t);
}

inline double distance(ManifoldKind kind, const Matrix& x, const Matrix& y) {
    return kind == ManifoldKind::Spd ? spd::distance(x, y) : sphere::distance(x, y);
}

inline Matrix log_map(ManifoldKind kind, const Matrix& base, const Matrix& x) {
    return kind == ManifoldKind::Spd ? spd::log_map(base, x) : sphere::log_map(base, x);
}

inline Matrix exp_map(ManifoldKind kind, const Matrix& base, const Matrix& v) {
    return kind == ManifoldKind::Spd ? spd::exp_map(base, v) : sphere::exp_map(base, v);
}

inline double tangent_norm(ManifoldKind kind, const Matrix& base, const Matrix& v) {
    return kind == ManifoldKind::Spd ? spd::tangent_norm(base, v) : v.norm();
}

/// Shape of a raw point: n x n for SPD, m x 1 for the sphere.
inline std::pair<int, int> point_shape(ManifoldKind kind, int dim) {
    return kind == ManifoldKind::Spd ? std::pair{dim, dim} : std::pair{dim, 1};
}

/// Throws DomainError unless `p` satisfies the manifold's point invariants.
inline void validate_point(ManifoldKind kind, int dim, const Matrix& p) {
    const auto [rows, cols] = point_shape(kind, dim);
    if (p.rows() != rows || p.cols() != cols)
        throw DomainError("point has shape " + std::to_string(p.rows()) + "x" + std::to_string(p.cols()) +
                          ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
    if (kind == ManifoldKind::Spd)
        (void)SpdPoint(p);
    else
        (void)SpherePoint(p.col(0));
}

/// Canonical base point: identity for SPD, e_1 for the sphere.
inline Matrix canonical_base(ManifoldKind kind, int dim) {
    if (kind == ManifoldKind::Spd) return Matrix::Identity(dim, dim);
    Matrix e = Matrix::Zero(dim, 1);
    e(0, 0) = 1.0;
    return e;
}

}  // namespace mdcnn
