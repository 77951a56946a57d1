#pragma once

// Synthetic generators, ODF conversion, windowed covariances and the MSQ1
// sequence file format.
//
// MSQ1 layout, little-endian:
//
//   "MSQ1"        4 bytes
//   version       u16 (1)
//   manifold      u8  (0 = SPD, 1 = sphere)
//   dim           u32
//   channels      u32
//   count         u64
//   per sequence: length u32, label i32 (-1 = none),
//                 payload f64, channel-major then time, each SPD value row-major

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mdcnn/errors.hpp"
#include "mdcnn/io.hpp"
#include "mdcnn/linalg.hpp"
#include "mdcnn/manifold.hpp"
#include "mdcnn/sequence.hpp"

namespace mdcnn {

inline constexpr std::uint16_t kDatasetVersion = 1;
inline constexpr double kOdfSumTol = 1e-9;
/// Eigenvalue floor applied when projecting noisy matrices back to SPD.
inline constexpr double kSpdProjectionFloor = 1e-6;

/// Entrywise square root of a discrete density; lands on the positive orthant
/// of the unit sphere.
inline SpherePoint odf_to_sphere(std::span<const double> odf) {
    if (odf.empty()) throw DomainError("odf_to_sphere: empty ODF");
    double total = 0.0;
    for (std::size_t i = 0; i < odf.size(); ++i) {
        if (!(odf[i] >= 0.0)) throw DomainError("odf_to_sphere: entry " + std::to_string(i) + " is negative");
        total += odf[i];
    }
    if (std::abs(total - 1.0) > kOdfSumTol)
        throw DomainError("odf_to_sphere: entries sum to " + std::to_string(total) + ", expected 1");
    Vector v(static_cast<Eigen::Index>(odf.size()));
    for (std::size_t i = 0; i < odf.size(); ++i) v(static_cast<Eigen::Index>(i)) = std::sqrt(odf[i]);
    // Renormalize away the sum's rounding so the point passes the 1e-12 check.
    return SpherePoint(v / v.norm());
}

namespace detail {

inline Matrix plane_rotation(int dim, double angle) {
    Matrix r = Matrix::Identity(dim, dim);
    const double c = std::cos(angle), s = std::sin(angle);
    r(0, 0) = c;
    r(0, 1) = -s;
    r(1, 0) = s;
    r(1, 1) = c;
    return r;
}

inline Matrix symmetric_noise(int dim, double sigma, std::mt19937_64& rng) {
    Matrix e = Matrix::Zero(dim, dim);
    if (sigma == 0.0) return e;
    std::normal_distribution<double> n(0.0, sigma);
    for (int i = 0; i < dim; ++i)
        for (int j = i; j < dim; ++j) e(i, j) = e(j, i) = n(rng);
    return e;
}

inline Matrix project_spd(const Matrix& a) {
    const EigenDecomposition e = sym_eig_unchecked(a);
    return spectral_apply(e, [](double x) { return std::max(x, kSpdProjectionFloor); });
}

/// Rotating SPD sequence: X(s) = R(s step) B R(s step)^T plus symmetric noise,
/// re-projected to SPD. B has a random phase in the (0, 1) plane and a jittered
/// anisotropic spectrum.
inline ManifoldSequence rotating_spd_sequence(int dim, int length, double step_rad, double noise_sigma,
                                              std::mt19937_64& rng) {
    std::uniform_real_distribution<double> phase(0.0, std::numbers::pi);
    std::normal_distribution<double> jitter(0.0, 0.1);
    Vector spectrum(dim);
    for (int i = 0; i < dim; ++i) spectrum(i) = (i == 0 ? 1.0 : i == 1 ? 3.0 : 2.0) * std::exp(jitter(rng));
    const Matrix q = plane_rotation(dim, phase(rng));
    const Matrix base = sandwich(q, Matrix(spectrum.asDiagonal()));
    ManifoldSequence seq(ManifoldKind::Spd, dim, 1, length);
    for (int s = 0; s < length; ++s) {
        const Matrix x = sandwich(plane_rotation(dim, step_rad * s), base);
        seq.at(0, s) = noise_sigma == 0.0 ? x : project_spd(x + symmetric_noise(dim, noise_sigma, rng));
    }
    return seq;
}

/// Great-circle sequence on S^{m-1} in a random plane at `rate` radians per step,
/// with isotropic ambient noise followed by renormalization.
inline ManifoldSequence great_circle_sequence(int m, int length, double rate, double noise_sigma,
                                              std::mt19937_64& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    Vector u(m), v(m);
    for (int i = 0; i < m; ++i) u(i) = n01(rng);
    u.normalize();
    for (int i = 0; i < m; ++i) v(i) = n01(rng);
    v -= v.dot(u) * u;
    v.normalize();
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    const double phi = phase(rng);
    ManifoldSequence seq(ManifoldKind::Sphere, m, 1, length);
    for (int s = 0; s < length; ++s) {
        Vector x = std::cos(phi + rate * s) * u + std::sin(phi + rate * s) * v;
        if (noise_sigma > 0.0)
            for (int i = 0; i < m; ++i) x(i) += noise_sigma * n01(rng);
        seq.at(0, s) = x / x.norm();
    }
    return seq;
}

}  // namespace detail

/// Labeled rotating-SPD dataset, one class per rotation step angle (degrees),
/// classes interleaved: sample i has label i % n_classes.
inline SequenceDataset gen_rotating_spd(int n_per_class, int length, int dim, const std::vector<double>& angles_deg,
                                        double noise_sigma, std::uint64_t seed) {
    if (dim < 2) throw DomainError("gen_rotating_spd: dim must be at least 2");
    if (length < 1) throw DomainError("gen_rotating_spd: length must be positive");
    if (n_per_class < 0) throw DomainError("gen_rotating_spd: negative class size");
    if (angles_deg.empty()) throw DomainError("gen_rotating_spd: no class angles");
    for (std::size_t i = 0; i < angles_deg.size(); ++i)
        for (std::size_t j = i + 1; j < angles_deg.size(); ++j)
            if (angles_deg[i] == angles_deg[j]) throw DomainError("gen_rotating_spd: class angles must be distinct");
    if (noise_sigma < 0.0) throw DomainError("gen_rotating_spd: negative noise");
    std::mt19937_64 rng(seed);
    SequenceDataset ds{ManifoldKind::Spd, dim, 1, {}};
    for (int i = 0; i < n_per_class; ++i)
        for (std::size_t c = 0; c < angles_deg.size(); ++c)
            ds.add(detail::rotating_spd_sequence(dim, length, angles_deg[c] * std::numbers::pi / 180.0, noise_sigma, rng),
                   static_cast<std::int32_t>(c));
    return ds;
}

struct GroupGenOptions {
    int n = 30;                  // sequences per group
    int min_length = 11;
    int max_length = 73;
    ManifoldKind manifold = ManifoldKind::Sphere;
    int dim = 8;                 // ambient m for the sphere, n for SPD(n)
    double rate = 0.1;           // radians per step for group A
    double effect = 0.0;         // group B rate = rate * (1 + effect)
    double noise_sigma = 0.05;
    double rate_jitter = 0.0;    // per-sequence relative rate spread (Gaussian)
    std::uint64_t seed = 0;
};

/// Two unlabeled groups; group B moves at rate (1 + effect) times group A's.
/// Group A is drawn first from the seeded stream, then group B.
inline std::pair<SequenceDataset, SequenceDataset> gen_group_sequences(const GroupGenOptions& o) {
    if (o.n < 0) throw DomainError("gen_group_sequences: negative group size");
    if (o.min_length < 2 || o.max_length < o.min_length)
        throw DomainError("gen_group_sequences: invalid length range");
    if (o.dim < 2)
        throw DomainError("gen_group_sequences: dim must be at least 2");
    std::mt19937_64 rng(o.seed);
    std::uniform_int_distribution<int> len(o.min_length, o.max_length);
    std::normal_distribution<double> jitter(0.0, 1.0);
    auto make = [&](double rate) {
        SequenceDataset ds{o.manifold, o.dim, 1, {}};
        for (int i = 0; i < o.n; ++i) {
            const int l = len(rng);
            const double r = rate * (1.0 + o.rate_jitter * jitter(rng));
            ds.add(o.manifold == ManifoldKind::Sphere ? detail::great_circle_sequence(o.dim, l, r, o.noise_sigma, rng)
                                                       : detail::rotating_spd_sequence(o.dim, l, r, o.noise_sigma, rng));
        }
        return ds;
    };
    SequenceDataset a = make(o.rate);
    SequenceDataset b = make(o.rate * (1.0 + o.effect));
    return {std::move(a), std::move(b)};
}

/// Sliding-window sample covariance (divided by window - 1) plus epsilon I.
/// features is T x f; the output has length T - window + 1.
inline ManifoldSequence covariance_from_features(const Matrix& features, int window, double epsilon) {
    const auto t = static_cast<int>(features.rows());
    const auto f = static_cast<int>(features.cols());
    if (window < 2) throw DomainError("covariance_from_features: window must be at least 2");
    if (t < window) throw DomainError("covariance_from_features: fewer rows than the window");
    if (f < 1) throw DomainError("covariance_from_features: no feature columns");
    if (!(epsilon > 0.0)) throw DomainError("covariance_from_features: epsilon must be positive");
    ManifoldSequence out(ManifoldKind::Spd, f, 1, t - window + 1);
    for (int s = 0; s + window <= t; ++s) {
        const Matrix block = features.middleRows(s, window);
        const Eigen::RowVectorXd mean = block.colwise().mean();
        const Matrix centered = block.rowwise() - mean;
        Matrix cov = symmetrized(centered.transpose() * centered) / static_cast<double>(window - 1);
        cov.diagonal().array() += epsilon;
        out.at(0, s) = cov;
    }
    return out;
}

// ---------------------------------------------------------------------------
// MSQ1 files.

inline io::ByteWriter encode_dataset(const SequenceDataset& ds) {
    io::ByteWriter w;
    w.put_bytes("MSQ1");
    w.put<std::uint16_t>(kDatasetVersion);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(ds.kind));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.dim));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.channels));
    w.put<std::uint64_t>(ds.entries.size());
    for (const auto& e : ds.entries) {
        const ManifoldSequence& s = e.sequence;
        w.put<std::uint32_t>(static_cast<std::uint32_t>(s.length()));
        w.put<std::int32_t>(e.label);
        for (int c = 0; c < s.channels(); ++c)
            for (int t = 0; t < s.length(); ++t) {
                const Matrix& p = s.at(c, t);
                for (Eigen::Index i = 0; i < p.rows(); ++i)
                    for (Eigen::Index j = 0; j < p.cols(); ++j) w.put<double>(p(i, j));
            }
    }
    return w;
}

inline SequenceDataset decode_dataset(io::ByteReader& r) {
    r.expect_magic("MSQ1");
    std::uint64_t at = r.offset();
    const auto version = r.get<std::uint16_t>("version");
    if (version != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(version), at);
    at = r.offset();
    const auto kind = r.get<std::uint8_t>("manifold kind");
    if (kind > 1) throw FormatError("unknown manifold kind " + std::to_string(kind), at);
    at = r.offset();
    const auto dim = r.get<std::uint32_t>("dim");
    if (dim < 1 || dim > 4096) throw FormatError("implausible dim " + std::to_string(dim), at);
    at = r.offset();
    const auto channels = r.get<std::uint32_t>("channels");
    if (channels < 1 || channels > 4096) throw FormatError("implausible channel count " + std::to_string(channels), at);
    const auto count = r.get<std::uint64_t>("sequence count");

    SequenceDataset ds{static_cast<ManifoldKind>(kind), static_cast<int>(dim), static_cast<int>(channels), {}};
    const auto [rows, cols] = point_shape(ds.kind, ds.dim);
    const std::uint64_t point_bytes = 8ull * static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(cols);
    for (std::uint64_t n = 0; n < count; ++n) {
        at = r.offset();
        const auto length = r.get<std::uint32_t>("sequence length");
        const auto label = r.get<std::int32_t>("label");
        if (label < kNoLabel) throw FormatError("invalid label " + std::to_string(label), at + 4);
        if (static_cast<std::uint64_t>(length) * channels * point_bytes > r.remaining())
            throw FormatError("sequence " + std::to_string(n) + " payload exceeds file size", at);
        ManifoldSequence seq(ds.kind, ds.dim, ds.channels, static_cast<int>(length));
        for (int c = 0; c < ds.channels; ++c)
            for (int t = 0; t < static_cast<int>(length); ++t) {
                const std::uint64_t value_at = r.offset();
                Matrix p(rows, cols);
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j) p(i, j) = r.get<double>("payload");
                try {
                    validate_point(ds.kind, ds.dim, p);
                } catch (const DomainError& e) {
                    throw FormatError(std::string("invalid manifold value: ") + e.what(), value_at);
                }
                seq.at(c, t) = std::move(p);
            }
        ds.entries.push_back({std::move(seq), label});
    }
    if (!r.at_end()) throw FormatError("trailing bytes after last sequence", r.offset());
    return ds;
}

inline void save_dataset(const std::string& path, const SequenceDataset& ds) { encode_dataset(ds).save(path); }

inline SequenceDataset load_dataset(const std::string& path) {
    auto r = io::ByteReader::from_file(path);
    return decode_dataset(r);
}

/// One row per value: sequence, label, channel, time, then the flattened
/// entries (SPD row-major).
inline void export_dataset_csv(const std::string& path, const SequenceDataset& ds) {
    std::ofstream f(path);
    if (!f) throw DomainError("cannot open '" + path + "' for writing");
    const auto [rows, cols] = point_shape(ds.kind, ds.dim);
    f << "sequence,label,channel,time";
    for (int k = 0; k < rows * cols; ++k) f << ",v" << k;
    f << '\n';
    char buf[32];
    for (std::size_t n = 0; n < ds.entries.size(); ++n) {
        const auto& e = ds.entries[n];
        for (int c = 0; c < e.sequence.channels(); ++c)
            for (int t = 0; t < e.sequence.length(); ++t) {
                f << n << ',' << e.label << ',' << c << ',' << t;
                const Matrix& p = e.sequence.at(c, t);
                for (Eigen::Index i = 0; i < p.rows(); ++i)
                    for (Eigen::Index j = 0; j < p.cols(); ++j) {
                        std::snprintf(buf, sizeof buf, "%.17g", p(i, j));
                        f << ',' << buf;
                    }
                f << '\n';
            }
    }
}

}  // namespace mdcnn
