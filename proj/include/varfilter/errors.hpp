#pragma once

#include <stdexcept>
#include <string>

namespace varfilter {

// Shape or dimension disagreement between operands.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Input outside an operation's documented domain (log of a non-positive
// value, non-binary Bernoulli observation, ...).
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid construction parameters (non-positive variances, bad dims, ...).
struct InvalidArgument : std::runtime_error {
    explicit InvalidArgument(const std::string& what) : std::runtime_error(what) {}
};

// Numerical failure at runtime (divergence, singular innovation, non-finite
// free energy).
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

// Configuration file problems: unknown keys, bad enum values, missing paths.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Dataset / checkpoint serialization problems.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace varfilter
