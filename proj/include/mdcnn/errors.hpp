#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mdcnn {

/// Invalid argument: wrong dimensions, points off the manifold, bad config.
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// An iterative routine failed to converge.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Geodesic between antipodal sphere points is not unique.
class DegenerateGeodesicError : public DomainError {
public:
    using DomainError::DomainError;
};

class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::uint64_t offset)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

/// Training diverged (non-finite loss) or a nested fit failed.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace mdcnn
