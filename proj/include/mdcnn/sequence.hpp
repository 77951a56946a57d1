#pragma once

// Manifold-valued multichannel sequences and labeled collections of them.

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mdcnn/errors.hpp"
#include "mdcnn/linalg.hpp"
#include "mdcnn/manifold.hpp"

namespace mdcnn {

/// c x N grid of points stored channel-major. SPD values are n x n matrices,
/// sphere values are m x 1 columns.
class ManifoldSequence {
public:
    ManifoldSequence() = default;
    ManifoldSequence(ManifoldKind kind, int dim, int channels, int length)
        : kind_(kind), dim_(dim), channels_(channels), length_(length) {
        if (dim < 1) throw DomainError("ManifoldSequence: dim must be positive");
        if (channels < 1) throw DomainError("ManifoldSequence: channel count must be positive");
        if (length < 0) throw DomainError("ManifoldSequence: negative length");
        values_.assign(static_cast<std::size_t>(channels) * static_cast<std::size_t>(length),
                       canonical_base(kind, dim));
    }

    /// Single-channel sequence from a list of points.
    static ManifoldSequence from_points(ManifoldKind kind, int dim, const std::vector<Matrix>& points) {
        ManifoldSequence s(kind, dim, 1, static_cast<int>(points.size()));
        for (std::size_t t = 0; t < points.size(); ++t) s.at(0, static_cast<int>(t)) = points[t];
        return s;
    }

    ManifoldKind kind() const { return kind_; }
    int dim() const { return dim_; }
    int channels() const { return channels_; }
    int length() const { return length_; }

    const Matrix& at(int channel, int time) const { return values_[index(channel, time)]; }
    Matrix& at(int channel, int time) { return values_[index(channel, time)]; }

    const std::vector<Matrix>& values() const { return values_; }

    /// Values of every channel at one time step.
    std::vector<Matrix> column(int time) const {
        std::vector<Matrix> out;
        out.reserve(static_cast<std::size_t>(channels_));
        for (int c = 0; c < channels_; ++c) out.push_back(at(c, time));
        return out;
    }

    /// Throws DomainError naming the first value that is off the manifold.
    void validate() const {
        for (int c = 0; c < channels_; ++c)
            for (int t = 0; t < length_; ++t) {
                try {
                    validate_point(kind_, dim_, at(c, t));
                } catch (const DomainError& e) {
                    throw DomainError("sequence value (channel " + std::to_string(c) + ", time " +
                                      std::to_string(t) + "): " + e.what());
                }
            }
    }

private:
    std::size_t index(int channel, int time) const {
        return static_cast<std::size_t>(channel) * static_cast<std::size_t>(length_) + static_cast<std::size_t>(time);
    }

    ManifoldKind kind_ = ManifoldKind::Spd;
    int dim_ = 1;
    int channels_ = 1;
    int length_ = 0;
    std::vector<Matrix> values_;
};

inline constexpr std::int32_t kNoLabel = -1;

struct LabeledSequence {
    ManifoldSequence sequence;
    std::int32_t label = kNoLabel;
};

/// Homogeneous collection: every entry shares manifold kind, dim and channel count.
struct SequenceDataset {
    ManifoldKind kind = ManifoldKind::Spd;
    int dim = 1;
    int channels = 1;
    std::vector<LabeledSequence> entries;

    std::size_t size() const { return entries.size(); }

    void add(ManifoldSequence seq, std::int32_t label = kNoLabel) {
        if (seq.kind() != kind || seq.dim() != dim || seq.channels() != channels)
            throw DomainError("dataset expects " + std::string(to_string(kind)) + " dim " + std::to_string(dim) +
                              " with " + std::to_string(channels) + " channels, got " +
                              std::string(to_string(seq.kind())) + " dim " + std::to_string(seq.dim()) + " with " +
                              std::to_string(seq.channels()) + " channels");
        entries.push_back({std::move(seq), label});
    }

    int num_classes() const {
        int n = 0;
        for (const auto& e : entries) n = std::max(n, e.label + 1);
        return n;
    }
};

}  // namespace mdcnn
