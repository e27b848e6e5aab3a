#pragma once

#include <stdexcept>
#include <string>

namespace ildiff {

// Base of every error the library raises. The CLI maps the concrete type to a
// process exit code (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

class UsageError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

// Invalid hyperparameters or configuration values.
class ConfigError : public UsageError {
 public:
  using UsageError::UsageError;
};

// Invalid runtime argument (timestep out of range, empty list, ...).
class ParameterError : public UsageError {
 public:
  using UsageError::UsageError;
};

class ShapeError : public UsageError {
 public:
  using UsageError::UsageError;
};

class DataError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

// Dataset split could not be formed (too few groups).
class SplitError : public DataError {
 public:
  using DataError::DataError;
};

// Missing or incompatible checkpoint / model state.
class StateError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

class TrainingError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 5; }
};

}  // namespace ildiff
