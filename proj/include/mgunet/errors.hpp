#pragma once

#include <stdexcept>
#include <string>

namespace mgu {

/// Base of every error raised by the library. `exit_code()` is the process
/// exit status the command-line tool reports for this error family.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

/// Tensor shapes that do not fit an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Invalid model, phantom, split or run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Malformed or out-of-range input data. Messages name the offending file.
class DataError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

/// API misuse: backward on a non-scalar, missing gradients, ...
class ContractError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced during a computation, or a nondeterministic fragment.
class NumericalError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

class DeterminismError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mgu
