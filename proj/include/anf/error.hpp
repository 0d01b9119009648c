#pragma once

#include <stdexcept>
#include <string>

namespace anf {

/// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor dimension disagreement (wrong rank, mismatched extents).
struct ShapeError : Error {
    using Error::Error;
};

/// Kernel/stride/padding combinations that produce empty or negative extents.
struct GeometryError : Error {
    using Error::Error;
};

/// Out-of-range index (e.g. class label outside [0, C)).
struct IndexError : Error {
    using Error::Error;
};

/// API contract violation: backward on a non-scalar, reuse of a consumed
/// tape, missing gradients, unknown tap names, empty sample lists.
struct ContractError : Error {
    using Error::Error;
};

/// Attack failed to produce a usable perturbation (non-finite gradients).
struct AttackError : Error {
    using Error::Error;
};

/// Input that is syntactically valid but semantically unusable
/// (e.g. an all-black image where a peak value is required).
struct DegenerateInputError : Error {
    using Error::Error;
};

/// Malformed on-disk data: bad magic, bad version, truncated records.
struct FormatError : Error {
    using Error::Error;
};

/// Structurally valid file whose contents disagree with the declared
/// configuration (shape mismatch, inconsistent lengths).
struct IntegrityError : Error {
    using Error::Error;
};

/// Filesystem failure (unreadable/unwritable path).
struct IoError : Error {
    using Error::Error;
};

/// Invalid run configuration or CLI usage.
struct ConfigError : Error {
    using Error::Error;
};

/// Numeric blow-up during a run (non-finite loss or parameters).
struct NumericError : Error {
    using Error::Error;
};

}  // namespace anf
