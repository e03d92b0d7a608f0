#pragma once

#include <stdexcept>
#include <string>

namespace tisc {

/// Argument outside the domain of an operation (negative time, state outside (l, r), ...).
struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

/// Model parameters violate a standing assumption (e.g. q2 > q1 > sigma^2).
struct ParameterError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A numerical routine failed to reach its tolerance or hit a singular system.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Not enough samples / grid points / truncations to produce a result.
struct InsufficientDataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace tisc
