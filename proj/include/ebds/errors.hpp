// Error types shared by every ebds module.
#pragma once

#include <stdexcept>
#include <string>

namespace ebds {

/// Base class for all library errors.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Bad input values (non-finite numbers, malformed configuration).
class InvalidArgument : public Error {
  public:
    using Error::Error;
};

/// Operation not defined for this model (e.g. Milstein with d != 1).
class UnsupportedOperation : public Error {
  public:
    using Error::Error;
};

/// Caller broke an API precondition (shape mismatch, empty batch).
class ContractViolation : public Error {
  public:
    using Error::Error;
};

/// Floating point breakdown inside a computation.
class NumericFailure : public Error {
  public:
    NumericFailure(const std::string &what, int layer = -1)
        : Error(what), layer_(layer) {}

    /// Network layer where the failure was detected, -1 if not applicable.
    int layer() const noexcept { return layer_; }

  private:
    int layer_;
};

/// Quadrature refinement did not converge.
class GridTooCoarse : public NumericFailure {
  public:
    using NumericFailure::NumericFailure;
};

/// Importance sampling weights collapsed or HMC chains disagree.
class UnreliableEstimate : public NumericFailure {
  public:
    using NumericFailure::NumericFailure;
};

/// All particle weights underflowed.
class DegenerateEnsemble : public NumericFailure {
  public:
    using NumericFailure::NumericFailure;
};

/// File system problems while reading or writing artifacts.
class IoError : public Error {
  public:
    using Error::Error;
};

} // namespace ebds
