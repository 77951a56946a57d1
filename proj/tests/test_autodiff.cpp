#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mdcnn/autodiff.hpp"
#include "test_util.hpp"

using namespace mdcnn;
using namespace mdcnn::testing;
namespace ad = mdcnn::ad;

namespace {

using Builder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

double evaluate(const Builder& f, const std::vector<Matrix>& inputs) {
    ad::Tape t;
    std::vector<ad::Var> vs;
    for (const auto& m : inputs) vs.push_back(t.constant(m));
    return t.scalar(f(t, vs));
}

/// Compares <grad, dir> from the tape with a central difference along `dirs`.
void expect_directional_match(const Builder& f, const std::vector<Matrix>& inputs, const std::vector<Matrix>& dirs,
                              double tol, double h = 1e-6) {
    ad::Tape t;
    std::vector<ad::Var> vs;
    for (const auto& m : inputs) vs.push_back(t.variable(m));
    t.backward(f(t, vs));
    double analytic = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) analytic += t.adjoint(vs[i]).cwiseProduct(dirs[i]).sum();

    std::vector<Matrix> plus = inputs, minus = inputs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        plus[i] += h * dirs[i];
        minus[i] -= h * dirs[i];
    }
    const double fd = (evaluate(f, plus) - evaluate(f, minus)) / (2.0 * h);
    EXPECT_NEAR(analytic, fd, tol * std::max(1.0, std::abs(fd)));
}

}  // namespace

TEST(Tape, ScalarArithmetic) {
    ad::Tape t;
    const ad::Var a = t.variable(3.0), b = t.variable(2.0);
    const ad::Var y = ad::square(a) * b + a / b;
    EXPECT_DOUBLE_EQ(t.scalar(y), 19.5);
    t.backward(y);
    EXPECT_DOUBLE_EQ(t.scalar_adjoint(a), 2 * 3.0 * 2.0 + 0.5);
    EXPECT_DOUBLE_EQ(t.scalar_adjoint(b), 9.0 - 3.0 / 4.0);
}

TEST(Tape, ConstantsReceiveNoGradient) {
    ad::Tape t;
    const ad::Var c = t.constant(2.0), x = t.variable(5.0);
    const ad::Var y = c * x;
    EXPECT_FALSE(t.requires_grad(c));
    t.backward(y);
    EXPECT_DOUBLE_EQ(t.scalar_adjoint(x), 2.0);
    EXPECT_DOUBLE_EQ(t.scalar_adjoint(c), 0.0);
}

TEST(Tape, BackwardIsRepeatable) {
    ad::Tape t;
    const ad::Var x = t.variable(1.5);
    const ad::Var y = ad::square(x);
    t.backward(y);
    t.backward(y);
    EXPECT_DOUBLE_EQ(t.scalar_adjoint(x), 3.0);
}

TEST(Tape, SqrtHasZeroSubgradientAtZero) {
    ad::Tape t;
    const ad::Var x = t.variable(0.0);
    const ad::Var y = ad::sqrt(x);
    t.backward(y);
    EXPECT_EQ(t.scalar_adjoint(x), 0.0);
}

TEST(Tape, SumScaleEntry) {
    ad::Tape t;
    Matrix m(2, 2);
    m << 1, 2, 3, 4;
    const ad::Var a = t.variable(m);
    const std::vector<ad::Var> parts{ad::entry(a, 0, 1), ad::scale(ad::entry(a, 1, 0), 3.0)};
    const ad::Var y = ad::sum(parts);
    EXPECT_DOUBLE_EQ(t.scalar(y), 11.0);
    t.backward(y);
    Matrix expected(2, 2);
    expected << 0, 1, 3, 0;
    EXPECT_EQ(t.adjoint(a), expected);
}

TEST(Tape, AffineAndCrossEntropy) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<Matrix> inputs;
    for (int i = 0; i < 7; ++i) inputs.push_back(Matrix::Constant(1, 1, n(rng)));
    std::vector<Matrix> dirs;
    for (int i = 0; i < 7; ++i) dirs.push_back(Matrix::Constant(1, 1, n(rng)));
    const Builder f = [](ad::Tape&, const std::vector<ad::Var>& v) {
        const std::vector<ad::Var> w{v[0], v[1]}, x{v[2], v[3]};
        const ad::Var z0 = ad::affine(w, x, v[4]);
        const std::vector<ad::Var> logits{z0, v[5], v[6]};
        return ad::softmax_cross_entropy(logits, 1);
    };
    expect_directional_match(f, inputs, dirs, 1e-8);
}

TEST(Tape, CrossEntropyValue) {
    ad::Tape t;
    const std::vector<ad::Var> z{t.constant(0.0), t.constant(0.0)};
    EXPECT_NEAR(t.scalar(ad::softmax_cross_entropy(z, 0)), std::log(2.0), 1e-15);
    EXPECT_THROW(ad::softmax_cross_entropy(z, 2), DomainError);
}

TEST(SpdOps, SquaredDistanceMatchesPlainAndFiniteDifference) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 10; ++trial) {
        const std::vector<Matrix> in{random_spd(3, rng), random_spd(3, rng)};
        const Builder f = [](ad::Tape&, const std::vector<ad::Var>& v) { return ad::spd_squared_distance(v[0], v[1]); };
        EXPECT_NEAR(evaluate(f, in), spd::squared_distance(in[0], in[1]), 1e-12);
        expect_directional_match(f, in, {random_symmetric(3, rng), random_symmetric(3, rng)}, 1e-6);
    }
}

TEST(SpdOps, GeodesicMatchesPlainAndFiniteDifference) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const Matrix x = random_spd(3, rng), y = random_spd(3, rng);
        const Matrix c = random_symmetric(3, rng);
        const std::vector<Matrix> in{x, y, Matrix::Constant(1, 1, 0.37)};
        // Contract the matrix output with a fixed symmetric matrix to get a scalar.
        const Builder f = [c](ad::Tape& t, const std::vector<ad::Var>& v) {
            const ad::Var g = ad::spd_geodesic(v[0], v[1], v[2]);
            std::vector<ad::Var> terms;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) terms.push_back(ad::scale(ad::entry(g, i, j), c(i, j)));
            (void)t;
            return ad::sum(terms);
        };
        ad::Tape t;
        const Matrix plain = t.value(ad::spd_geodesic(t.constant(x), t.constant(y), t.constant(0.37)));
        EXPECT_EQ(plain, spd::geodesic(x, y, 0.37));
        expect_directional_match(f, in, {random_symmetric(3, rng), random_symmetric(3, rng), Matrix::Ones(1, 1)}, 1e-6);
    }
}

TEST(SpdOps, SpectralNodes) {
    std::mt19937_64 rng(4);
    const Matrix a = random_spd(4, rng);
    for (const SpectralFunction fn : {SpectralFunction{SpectralFn::Log}, SpectralFunction{SpectralFn::Sqrt},
                                      SpectralFunction{SpectralFn::InvSqrt}, SpectralFunction{SpectralFn::Exp}}) {
        const Matrix c = random_symmetric(4, rng);
        const Builder f = [fn, c](ad::Tape&, const std::vector<ad::Var>& v) {
            const ad::Var out = ad::spectral(v[0], fn);
            std::vector<ad::Var> terms;
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j) terms.push_back(ad::scale(ad::entry(out, i, j), c(i, j)));
            return ad::sum(terms);
        };
        expect_directional_match(f, {a}, {random_symmetric(4, rng)}, 1e-6);
    }
}

TEST(SpdOps, RepeatedEigenvaluesUseFiniteDifferenceFallback) {
    std::mt19937_64 rng(5);
    const Matrix q = random_orthogonal(3, rng);
    Vector l(3);
    l << 2.0, 2.0, 5.0;
    const Matrix a = symmetrized(q * l.asDiagonal() * q.transpose());
    const Matrix c = random_symmetric(3, rng);
    ad::Tape t;
    const ad::Var x = t.variable(a);
    const ad::Var out = ad::spectral(x, {SpectralFn::Log});
    std::vector<ad::Var> terms;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) terms.push_back(ad::scale(ad::entry(out, i, j), c(i, j)));
    t.backward(ad::sum(terms));
    EXPECT_GE(t.fd_fallbacks(), 1u);
    EXPECT_TRUE(t.adjoint(x).allFinite());
    const Matrix dir = random_symmetric(3, rng);
    const double h = 1e-6;
    const double fd = ((matrix_function(a + h * dir, {SpectralFn::Log}) - matrix_function(a - h * dir, {SpectralFn::Log}))
                           .cwiseProduct(c)
                           .sum()) /
                      (2 * h);
    EXPECT_NEAR(t.adjoint(x).cwiseProduct(dir).sum(), fd, 1e-5 * std::max(1.0, std::abs(fd)));
}

TEST(SphereOps, SlerpAndDistances) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        const Matrix x = random_unit(8, rng), y = random_unit_near(x, 2.0, rng);
        const Matrix c = random_matrix(8, 1, rng);
        const std::vector<Matrix> in{x, y, Matrix::Constant(1, 1, 0.3)};
        const std::vector<Matrix> dirs{random_matrix(8, 1, rng), random_matrix(8, 1, rng), Matrix::Ones(1, 1)};
        const Builder slerp = [c](ad::Tape&, const std::vector<ad::Var>& v) {
            const ad::Var g = ad::slerp(v[0], v[1], v[2]);
            std::vector<ad::Var> terms;
            for (int i = 0; i < 8; ++i) terms.push_back(ad::scale(ad::entry(g, i, 0), c(i, 0)));
            return ad::sum(terms);
        };
        expect_directional_match(slerp, in, dirs, 1e-6);
        const Builder dist = [](ad::Tape&, const std::vector<ad::Var>& v) { return ad::sphere_distance(v[0], v[1]); };
        expect_directional_match(dist, {x, y}, {dirs[0], dirs[1]}, 1e-6);
        const Builder sq = [](ad::Tape&, const std::vector<ad::Var>& v) { return ad::sphere_squared_distance(v[0], v[1]); };
        expect_directional_match(sq, {x, y}, {dirs[0], dirs[1]}, 1e-6);
        EXPECT_NEAR(evaluate(sq, {x, y}), std::pow(sphere::distance(x, y), 2), 1e-14);
    }
}

TEST(SphereOps, SlerpMatchesPlainGeodesic) {
    std::mt19937_64 rng(7);
    const Matrix x = random_unit(5, rng), y = random_unit(5, rng);
    ad::Tape t;
    EXPECT_EQ(t.value(ad::slerp(t.constant(x), t.constant(y), t.constant(0.6))), sphere::geodesic(x, y, 0.6));
}

TEST(SphereOps, LogAtConstantBase) {
    std::mt19937_64 rng(8);
    const Matrix base = random_unit(6, rng);
    const Matrix y = random_unit_near(base, 1.5, rng);
    const Matrix c = random_matrix(6, 1, rng);
    const Builder f = [base, c](ad::Tape&, const std::vector<ad::Var>& v) {
        const ad::Var g = ad::sphere_log(base, v[0]);
        std::vector<ad::Var> terms;
        for (int i = 0; i < 6; ++i) terms.push_back(ad::scale(ad::entry(g, i, 0), c(i, 0)));
        return ad::sum(terms);
    };
    expect_directional_match(f, {y}, {random_matrix(6, 1, rng)}, 1e-6);
    ad::Tape t;
    EXPECT_LE((t.value(ad::sphere_log(base, t.constant(y))) - sphere::log_map(base, y)).norm(), 1e-14);
}

TEST(SphereOps, NearlyCoincidentSquaredDistanceGradient) {
    std::mt19937_64 rng(9);
    const Matrix x = random_unit(4, rng), y = random_unit_near(x, 1e-6, rng);
    ad::Tape t;
    const ad::Var vx = t.variable(x), vy = t.variable(y);
    t.backward(ad::sphere_squared_distance(vx, vy));
    EXPECT_TRUE(t.adjoint(vx).allFinite());
    EXPECT_LE(t.adjoint(vx).norm(), 2.0 + 1e-6);
}
