#pragma once

#include <cmath>
#include <random>

#include "mdcnn/linalg.hpp"
#include "mdcnn/manifold.hpp"

namespace mdcnn::testing {

inline Matrix random_matrix(int rows, int cols, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = n(rng);
    return m;
}

inline Matrix random_symmetric(int n, std::mt19937_64& rng) { return symmetrized(random_matrix(n, n, rng)); }

/// Q diag(exp(spread * u)) Q^T with u ~ N(0, 1).
inline Matrix random_spd(int n, std::mt19937_64& rng, double spread = 0.5) {
    const Matrix q = random_matrix(n, n, rng).householderQr().householderQ();
    std::normal_distribution<double> u(0.0, 1.0);
    Vector l(n);
    for (int i = 0; i < n; ++i) l(i) = std::exp(spread * u(rng));
    return symmetrized(q * l.asDiagonal() * q.transpose());
}

inline Matrix random_orthogonal(int n, std::mt19937_64& rng) {
    return random_matrix(n, n, rng).householderQr().householderQ();
}

/// Invertible matrix with singular values in [0.5, 2].
inline Matrix random_invertible(int n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> s(0.5, 2.0);
    Vector sv(n);
    for (int i = 0; i < n; ++i) sv(i) = s(rng);
    return random_orthogonal(n, rng) * sv.asDiagonal() * random_orthogonal(n, rng);
}

inline Matrix random_unit(int m, std::mt19937_64& rng) {
    Matrix v = random_matrix(m, 1, rng);
    return v / v.norm();
}

/// Unit vector within geodesic distance `radius` of `center`.
inline Matrix random_unit_near(const Matrix& center, double radius, std::mt19937_64& rng) {
    Matrix v = random_matrix(static_cast<int>(center.rows()), 1, rng);
    v -= center.col(0).dot(v.col(0)) * center;
    v /= v.norm();
    std::uniform_real_distribution<double> r(0.0, radius);
    return sphere::exp_map(center, r(rng) * v);
}

/// SPD point within affine-invariant distance `radius` of `center`.
inline Matrix random_spd_near(const Matrix& center, double radius, std::mt19937_64& rng) {
    Matrix v = random_symmetric(static_cast<int>(center.rows()), rng);
    v /= v.norm();
    std::uniform_real_distribution<double> r(0.0, radius);
    const spd::Factors f = spd::factors(center);
    return spd::exp_map(center, sandwich(f.sqrt, r(rng) * v));
}

}  // namespace mdcnn::testing
