#pragma once

// Reverse-mode differentiation over a matrix-valued record of operations.
//
// Every node holds a value (scalars are 1x1 matrices), an adjoint slot that is
// allocated on first accumulation, and a backprop closure that pushes its
// adjoint into its inputs. Nodes are appended in evaluation order, so
// iterating backwards is a valid topological order. Nodes whose inputs need no
// gradient are recorded without a closure.
//
// Forward values are computed with the same routines as the untaped code in
// manifold.hpp, so taped and plain forward passes agree bit for bit.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "mdcnn/errors.hpp"
#include "mdcnn/linalg.hpp"
#include "mdcnn/manifold.hpp"

namespace mdcnn::ad {

class Tape;

struct Var {
    Tape* tape = nullptr;
    std::uint32_t id = 0;
};

/// Relative eigenvalue gap below which a spectral node abandons the analytic
/// adjoint for a central difference.
inline constexpr double kEigenGapGuard = 1e-8;

class Tape {
public:
    using Backprop = std::function<void(Tape&, std::uint32_t)>;

    Tape() { nodes_.reserve(1024); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value) { return push(std::move(value), false, nullptr); }
    Var variable(Matrix value) { return push(std::move(value), true, nullptr); }
    Var constant(double value) { return constant(Matrix::Constant(1, 1, value)); }
    Var variable(double value) { return variable(Matrix::Constant(1, 1, value)); }

    Var push(Matrix value, bool requires_grad, Backprop backprop) {
        nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, std::move(backprop)});
        return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    const Matrix& value(std::uint32_t id) const { return nodes_[id].value; }
    const Matrix& value(Var v) const { return nodes_[v.id].value; }
    double scalar(Var v) const { return nodes_[v.id].value(0, 0); }
    bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

    /// Adjoint of a node; an empty matrix means it never received any.
    const Matrix& adjoint(std::uint32_t id) const { return nodes_[id].adjoint; }
    const Matrix& adjoint(Var v) const { return nodes_[v.id].adjoint; }
    double scalar_adjoint(Var v) const {
        const Matrix& a = nodes_[v.id].adjoint;
        return a.size() == 0 ? 0.0 : a(0, 0);
    }

    void accumulate(std::uint32_t id, const Matrix& g) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return;
        if (n.adjoint.size() == 0)
            n.adjoint = g;
        else
            n.adjoint += g;
    }

    void accumulate(std::uint32_t id, double g) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return;
        if (n.adjoint.size() == 0)
            n.adjoint = Matrix::Constant(1, 1, g);
        else
            n.adjoint(0, 0) += g;
    }

    /// Seeds d(loss)/d(loss) = 1 and propagates to every node recorded before it.
    void backward(Var loss) {
        if (nodes_[loss.id].value.size() != 1) throw DomainError("backward: loss must be a scalar node");
        for (auto& n : nodes_) n.adjoint.resize(0, 0);
        if (!nodes_[loss.id].requires_grad) return;
        nodes_[loss.id].adjoint = Matrix::Constant(1, 1, 1.0);
        for (std::uint32_t id = loss.id + 1; id-- > 0;) {
            if (nodes_[id].adjoint.size() == 0 || !nodes_[id].backprop) continue;
            nodes_[id].backprop(*this, id);
        }
    }

    std::size_t size() const { return nodes_.size(); }
    void clear() {
        nodes_.clear();
        fd_fallbacks_ = 0;
    }

    /// Spectral nodes that fell back to a finite-difference adjoint.
    std::size_t fd_fallbacks() const { return fd_fallbacks_; }
    void note_fd_fallback() { ++fd_fallbacks_; }

private:
    struct Node {
        Matrix value;
        Matrix adjoint;
        bool requires_grad;
        Backprop backprop;
    };

    std::vector<Node> nodes_;
    std::size_t fd_fallbacks_ = 0;
};

namespace detail {

inline bool any_grad(const Tape& t, std::initializer_list<Var> vs) {
    for (Var v : vs)
        if (t.requires_grad(v)) return true;
    return false;
}

/// Adjoint of a spectral function node, with the eigenvalue-gap guard.
inline Matrix spectral_adjoint(Tape& tape, const Matrix& input, const EigenDecomposition& e,
                               const SpectralFunction& f, const Matrix& out_adjoint) {
    const Matrix g = symmetrized(out_adjoint);
    const double scale = input.norm();
    if (min_eigen_gap(e.values) >= kEigenGapGuard * scale) return spectral_frechet(e, f, g);

    // Near-repeated eigenvalues: the derivative map is self-adjoint, so a
    // single central difference along the symmetrized adjoint gives the result.
    tape.note_fd_fallback();
    const double gnorm = g.norm();
    if (gnorm == 0.0) return Matrix::Zero(input.rows(), input.cols());
    const Matrix dir = g / gnorm;
    const double lmin = std::max(std::abs(e.values(0)), kEigenFloor);
    const double h = f.kind == SpectralFn::Exp ? 1e-5 * std::max(1.0, scale) : 1e-4 * lmin;
    const Matrix base = symmetrized(input);
    const Matrix plus = matrix_function(base + h * dir, f);
    const Matrix minus = matrix_function(base - h * dir, f);
    return gnorm * symmetrized((plus - minus) / (2.0 * h));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scalar arithmetic.

inline Var operator+(Var a, Var b) {
    Tape& t = *a.tape;
    const bool g = detail::any_grad(t, {a, b});
    return t.push(Matrix::Constant(1, 1, t.scalar(a) + t.scalar(b)), g,
                  g ? Tape::Backprop([a = a.id, b = b.id](Tape& tp, std::uint32_t self) {
                      const double ga = tp.adjoint(self)(0, 0);
                      tp.accumulate(a, ga);
                      tp.accumulate(b, ga);
                  })
                    : nullptr);
}

inline Var operator*(Var a, Var b) {
    Tape& t = *a.tape;
    const bool g = detail::any_grad(t, {a, b});
    const double va = t.scalar(a), vb = t.scalar(b);
    return t.push(Matrix::Constant(1, 1, va * vb), g,
                  g ? Tape::Backprop([a = a.id, b = b.id, va, vb](Tape& tp, std::uint32_t self) {
                      const double ga = tp.adjoint(self)(0, 0);
                      tp.accumulate(a, ga * vb);
                      tp.accumulate(b, ga * va);
                  })
                    : nullptr);
}

inline Var operator/(Var a, Var b) {
    Tape& t = *a.tape;
    const bool g = detail::any_grad(t, {a, b});
    const double va = t.scalar(a), vb = t.scalar(b);
    return t.push(Matrix::Constant(1, 1, va / vb), g,
                  g ? Tape::Backprop([a = a.id, b = b.id, va, vb](Tape& tp, std::uint32_t self) {
                      const double ga = tp.adjoint(self)(0, 0);
                      tp.accumulate(a, ga / vb);
                      tp.accumulate(b, -ga * va / (vb * vb));
                  })
                    : nullptr);
}

inline Var square(Var a) {
    Tape& t = *a.tape;
    const double va = t.scalar(a);
    const bool g = t.requires_grad(a);
    return t.push(Matrix::Constant(1, 1, va * va), g,
                  g ? Tape::Backprop([a = a.id, va](Tape& tp, std::uint32_t self) {
                      tp.accumulate(a, 2.0 * va * tp.adjoint(self)(0, 0));
                  })
                    : nullptr);
}

/// sqrt with a zero subgradient at 0.
inline Var sqrt(Var a) {
    Tape& t = *a.tape;
    const double v = std::sqrt(std::max(t.scalar(a), 0.0));
    const bool g = t.requires_grad(a);
    return t.push(Matrix::Constant(1, 1, v), g,
                  g ? Tape::Backprop([a = a.id, v](Tape& tp, std::uint32_t self) {
                      if (v > 0.0) tp.accumulate(a, 0.5 / v * tp.adjoint(self)(0, 0));
                  })
                    : nullptr);
}

inline Var scale(Var a, double s) {
    Tape& t = *a.tape;
    const bool g = t.requires_grad(a);
    return t.push(t.value(a) * s, g,
                  g ? Tape::Backprop([a = a.id, s](Tape& tp, std::uint32_t self) {
                      tp.accumulate(a, s * tp.adjoint(self));
                  })
                    : nullptr);
}

/// Sum of scalars, left to right.
inline Var sum(std::span<const Var> xs) {
    Tape& t = *xs.front().tape;
    double acc = 0.0;
    bool g = false;
    std::vector<std::uint32_t> ids;
    ids.reserve(xs.size());
    for (Var x : xs) {
        acc += t.scalar(x);
        g = g || t.requires_grad(x);
        ids.push_back(x.id);
    }
    return t.push(Matrix::Constant(1, 1, acc), g,
                  g ? Tape::Backprop([ids = std::move(ids)](Tape& tp, std::uint32_t self) {
                      const double ga = tp.adjoint(self)(0, 0);
                      for (auto id : ids) tp.accumulate(id, ga);
                  })
                    : nullptr);
}

/// Entry (i, j) of a matrix node as a scalar.
inline Var entry(Var a, int i, int j) {
    Tape& t = *a.tape;
    const bool g = t.requires_grad(a);
    const Eigen::Index rows = t.value(a).rows(), cols = t.value(a).cols();
    return t.push(Matrix::Constant(1, 1, t.value(a)(i, j)), g,
                  g ? Tape::Backprop([a = a.id, i, j, rows, cols](Tape& tp, std::uint32_t self) {
                      Matrix d = Matrix::Zero(rows, cols);
                      d(i, j) = tp.adjoint(self)(0, 0);
                      tp.accumulate(a, d);
                  })
                    : nullptr);
}

/// w . x + b over scalar nodes.
inline Var affine(std::span<const Var> w, std::span<const Var> x, Var b) {
    Tape& t = *b.tape;
    if (w.size() != x.size()) throw DomainError("affine: weight/input length mismatch");
    double acc = 0.0;
    bool g = t.requires_grad(b);
    std::vector<std::uint32_t> wid, xid;
    std::vector<double> wv, xv;
    for (std::size_t i = 0; i < w.size(); ++i) {
        wv.push_back(t.scalar(w[i]));
        xv.push_back(t.scalar(x[i]));
        acc += wv.back() * xv.back();
        wid.push_back(w[i].id);
        xid.push_back(x[i].id);
        g = g || t.requires_grad(w[i]) || t.requires_grad(x[i]);
    }
    acc += t.scalar(b);
    return t.push(Matrix::Constant(1, 1, acc), g,
                  g ? Tape::Backprop([wid = std::move(wid), xid = std::move(xid), wv = std::move(wv),
                                      xv = std::move(xv), b = b.id](Tape& tp, std::uint32_t self) {
                      const double ga = tp.adjoint(self)(0, 0);
                      for (std::size_t i = 0; i < wid.size(); ++i) {
                          tp.accumulate(wid[i], ga * xv[i]);
                          tp.accumulate(xid[i], ga * wv[i]);
                      }
                      tp.accumulate(b, ga);
                  })
                    : nullptr);
}

/// log-sum-exp(z) - z_label.
inline Var softmax_cross_entropy(std::span<const Var> logits, int label) {
    Tape& t = *logits.front().tape;
    const std::size_t n = logits.size();
    if (label < 0 || static_cast<std::size_t>(label) >= n) throw DomainError("softmax_cross_entropy: label out of range");
    std::vector<double> z(n);
    std::vector<std::uint32_t> ids(n);
    bool g = false;
    double zmax = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        z[i] = t.scalar(logits[i]);
        ids[i] = logits[i].id;
        zmax = std::max(zmax, z[i]);
        g = g || t.requires_grad(logits[i]);
    }
    double denom = 0.0;
    for (double v : z) denom += std::exp(v - zmax);
    const double loss = zmax + std::log(denom) - z[static_cast<std::size_t>(label)];
    std::vector<double> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = std::exp(z[i] - zmax) / denom;
    return t.push(Matrix::Constant(1, 1, loss), g,
                  g ? Tape::Backprop([ids = std::move(ids), p = std::move(p), label](Tape& tp, std::uint32_t self) {
                      const double ga = tp.adjoint(self)(0, 0);
                      for (std::size_t i = 0; i < ids.size(); ++i)
                          tp.accumulate(ids[i], ga * (p[i] - (static_cast<int>(i) == label ? 1.0 : 0.0)));
                  })
                    : nullptr);
}

// ---------------------------------------------------------------------------
// SPD matrix operations.

/// sym(S Y S^T).
inline Var sandwich(Var s, Var y) {
    Tape& t = *s.tape;
    const bool g = detail::any_grad(t, {s, y});
    Matrix out = mdcnn::sandwich(t.value(s), t.value(y));
    return t.push(std::move(out), g,
                  g ? Tape::Backprop([s = s.id, y = y.id](Tape& tp, std::uint32_t self) {
                      const Matrix gs = symmetrized(tp.adjoint(self));
                      const Matrix& sv = tp.value(s);
                      const Matrix& yv = tp.value(y);
                      if (tp.requires_grad(y)) tp.accumulate(y, sv.transpose() * gs * sv);
                      if (tp.requires_grad(s)) tp.accumulate(s, gs * sv * (yv + yv.transpose()));
                  })
                    : nullptr);
}

/// f applied through the spectrum of a symmetric matrix node.
inline Var spectral(Var a, SpectralFunction f) {
    Tape& t = *a.tape;
    auto e = std::make_shared<EigenDecomposition>(sym_eig_unchecked(t.value(a)));
    Matrix out = spectral_apply(*e, [&](double x) { return f.value(x); });
    const bool g = t.requires_grad(a);
    return t.push(std::move(out), g,
                  g ? Tape::Backprop([a = a.id, e, f](Tape& tp, std::uint32_t self) {
                      tp.accumulate(a, detail::spectral_adjoint(tp, tp.value(a), *e, f, tp.adjoint(self)));
                  })
                    : nullptr);
}

/// (A^{1/2}, A^{-1/2}) from a single eigendecomposition.
inline std::pair<Var, Var> sqrt_invsqrt(Var a) {
    Tape& t = *a.tape;
    auto e = std::make_shared<EigenDecomposition>(sym_eig_unchecked(t.value(a)));
    const SpectralFunction fs{SpectralFn::Sqrt}, fi{SpectralFn::InvSqrt};
    Matrix vs = spectral_apply(*e, [&](double x) { return fs.value(x); });
    Matrix vi = spectral_apply(*e, [&](double x) { return fi.value(x); });
    const bool g = t.requires_grad(a);
    auto make = [&](const SpectralFunction& f) -> Tape::Backprop {
        if (!g) return nullptr;
        return [a = a.id, e, f](Tape& tp, std::uint32_t self) {
            tp.accumulate(a, detail::spectral_adjoint(tp, tp.value(a), *e, f, tp.adjoint(self)));
        };
    };
    Var rs = t.push(std::move(vs), g, make(fs));
    Var ri = t.push(std::move(vi), g, make(fi));
    return {rs, ri};
}

/// A^t with a differentiable exponent.
inline Var spectral_pow(Var a, Var t_exp) {
    Tape& t = *a.tape;
    auto e = std::make_shared<EigenDecomposition>(sym_eig_unchecked(t.value(a)));
    const SpectralFunction f{SpectralFn::Pow, t.scalar(t_exp)};
    Matrix out = spectral_apply(*e, [&](double x) { return f.value(x); });
    const bool g = detail::any_grad(t, {a, t_exp});
    return t.push(std::move(out), g,
                  g ? Tape::Backprop([a = a.id, te = t_exp.id, e, f](Tape& tp, std::uint32_t self) {
                      const Matrix& ga = tp.adjoint(self);
                      if (tp.requires_grad(a))
                          tp.accumulate(a, detail::spectral_adjoint(tp, tp.value(a), *e, f, ga));
                      if (tp.requires_grad(te)) {
                          // d/dt A^t = V diag(l^t log l) V^T
                          const Matrix inner = e->vectors.transpose() * symmetrized(ga) * e->vectors;
                          double acc = 0.0;
                          for (Eigen::Index k = 0; k < e->values.size(); ++k) {
                              const double l = SpectralFunction::clamp(e->values(k));
                              acc += inner(k, k) * std::pow(l, f.exponent) * std::log(l);
                          }
                          tp.accumulate(te, acc);
                      }
                  })
                    : nullptr);
}

/// sum_k log^2(lambda_k(C)), the squared SPD distance once C = X^{-1/2} Y X^{-1/2}.
/// A spectral sum, so its gradient V diag(2 log(l)/l) V^T needs no gap guard.
inline Var log_spectrum_sq_sum(Var c) {
    Tape& t = *c.tape;
    auto e = std::make_shared<EigenDecomposition>(sym_eig_unchecked(t.value(c)));
    double acc = 0.0;
    for (Eigen::Index k = 0; k < e->values.size(); ++k) {
        const double l = std::log(std::max(e->values(k), kEigenFloor));
        acc += l * l;
    }
    const bool g = t.requires_grad(c);
    return t.push(Matrix::Constant(1, 1, acc), g,
                  g ? Tape::Backprop([c = c.id, e](Tape& tp, std::uint32_t self) {
                      const double ga = tp.adjoint(self)(0, 0);
                      const Matrix d = spectral_apply(*e, [](double x) {
                          const double l = SpectralFunction::clamp(x);
                          return 2.0 * std::log(l) / l;
                      });
                      tp.accumulate(c, ga * d);
                  })
                    : nullptr);
}

inline Var spd_squared_distance(Var x, Var y) {
    const auto [xs, xi] = sqrt_invsqrt(x);
    (void)xs;
    return log_spectrum_sq_sum(sandwich(xi, y));
}

inline Var spd_geodesic(Var x, Var y, Var t) {
    const auto [xs, xi] = sqrt_invsqrt(x);
    return sandwich(xs, spectral_pow(sandwich(xi, y), t));
}

// ---------------------------------------------------------------------------
// Sphere operations (points are m x 1 nodes).

inline Var slerp(Var x, Var y, Var t_frac) {
    Tape& t = *x.tape;
    const Matrix& xv = t.value(x);
    const Matrix& yv = t.value(y);
    const double c = sphere::clamped_dot(xv, yv);
    const sphere::SlerpCoefficients k = sphere::slerp_coefficients(c, t.scalar(t_frac));
    Matrix out = k.a * xv + k.b * yv;
    const bool g = detail::any_grad(t, {x, y, t_frac});
    return t.push(std::move(out), g,
                  g ? Tape::Backprop([x = x.id, y = y.id, tf = t_frac.id, k](Tape& tp, std::uint32_t self) {
                      const Matrix& gout = tp.adjoint(self);
                      const Matrix& xv = tp.value(x);
                      const Matrix& yv = tp.value(y);
                      const double ga = gout.col(0).dot(xv.col(0));
                      const double gb = gout.col(0).dot(yv.col(0));
                      const double gc = ga * k.da_dc + gb * k.db_dc;
                      tp.accumulate(x, k.a * gout + gc * yv);
                      tp.accumulate(y, k.b * gout + gc * xv);
                      tp.accumulate(tf, ga * k.da_dt + gb * k.db_dt);
                  })
                    : nullptr);
}

/// Great-circle distance; zero subgradient at coincident or antipodal points.
inline Var sphere_distance(Var x, Var y) {
    Tape& t = *x.tape;
    const double c = sphere::clamped_dot(t.value(x), t.value(y));
    const double theta = std::acos(c);
    const bool g = detail::any_grad(t, {x, y});
    return t.push(Matrix::Constant(1, 1, theta), g,
                  g ? Tape::Backprop([x = x.id, y = y.id, c](Tape& tp, std::uint32_t self) {
                      const double s2 = 1.0 - c * c;
                      if (!(s2 > 0.0)) return;
                      const double gc = -tp.adjoint(self)(0, 0) / std::sqrt(s2);
                      tp.accumulate(x, gc * tp.value(y));
                      tp.accumulate(y, gc * tp.value(x));
                  })
                    : nullptr);
}

inline Var sphere_squared_distance(Var x, Var y) {
    Tape& t = *x.tape;
    const double c = sphere::clamped_dot(t.value(x), t.value(y));
    const double theta = std::acos(c);
    const bool g = detail::any_grad(t, {x, y});
    return t.push(Matrix::Constant(1, 1, theta * theta), g,
                  g ? Tape::Backprop([x = x.id, y = y.id, c, theta](Tape& tp, std::uint32_t self) {
                      // d(theta^2)/dc = -2 theta / sin(theta)
                      const double s = std::sqrt(std::max(1.0 - c * c, 0.0));
                      double dc;
                      if (theta < sphere::kSeriesThreshold)
                          dc = -2.0 * (1.0 + theta * theta / 6.0);
                      else if (s > 0.0)
                          dc = -2.0 * theta / s;
                      else
                          return;
                      const double gc = tp.adjoint(self)(0, 0) * dc;
                      tp.accumulate(x, gc * tp.value(y));
                      tp.accumulate(y, gc * tp.value(x));
                  })
                    : nullptr);
}

/// log_base(y) for a constant base point.
inline Var sphere_log(const Matrix& base, Var y) {
    Tape& t = *y.tape;
    const Matrix& yv = t.value(y);
    const double c = sphere::clamped_dot(base, yv);
    const sphere::LogScale ls = sphere::log_scale(c);
    Matrix out = ls.k * (yv - c * base);
    const bool g = t.requires_grad(y);
    return t.push(std::move(out), g,
                  g ? Tape::Backprop([y = y.id, base, c, ls](Tape& tp, std::uint32_t self) {
                      const Matrix& gout = tp.adjoint(self);
                      const Matrix& yv = tp.value(y);
                      // v = k(c) (y - c b), c = <b, y>
                      const double proj = gout.col(0).dot((yv - c * base).col(0));
                      const double gb = gout.col(0).dot(base.col(0));
                      const double gc = ls.dk_dc * proj - ls.k * gb;
                      tp.accumulate(y, ls.k * gout + gc * base);
                  })
                    : nullptr);
}

}  // namespace mdcnn::ad
