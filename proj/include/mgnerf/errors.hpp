#pragma once

#include <stdexcept>
#include <string>

namespace mgnerf {

// Bad arguments or violated preconditions on the in-process API.
struct ArgumentError : std::invalid_argument {
    explicit ArgumentError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Malformed files, schema violations, missing data.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Inconsistent structures (empty mesh where one is required, etc).
struct StructuralError : std::runtime_error {
    explicit StructuralError(const std::string& msg) : std::runtime_error(msg) {}
};

// Mismatched network/config widths.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failures: non-finite losses, degenerate systems.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// A blended skinning matrix too ill-conditioned to invert.
struct DegenerateBlendError : NumericalError {
    explicit DegenerateBlendError(const std::string& msg) : NumericalError(msg) {}
};

}  // namespace mgnerf
