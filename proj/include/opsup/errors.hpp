#pragma once

#include <stdexcept>
#include <string>

namespace opsup {

// Every error carries the CLI exit code it maps to:
// 2 usage/config, 3 I/O, 4 numeric failure.
class Error : public std::runtime_error {
 public:
  Error(const std::string& what, int exit_code)
      : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

/// Shape or width disagreement between operands.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error("dimension error: " + what, 2) {}
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error("contract error: " + what, 2) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("configuration error: " + what, 2) {}
};

/// Domain violations (log of non-positive, NaN in a forward pass, divergence).
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric error: " + what, 4) {}
};

class PreprocessingError : public Error {
 public:
  explicit PreprocessingError(const std::string& what) : Error("preprocessing error: " + what, 2) {}
};

class SimulationError : public Error {
 public:
  explicit SimulationError(const std::string& what) : Error("simulation error: " + what, 4) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("I/O error: " + what, 3) {}
};

/// Checkpoint integrity failures (bad magic, hash mismatch, truncated payload).
class LoadError : public Error {
 public:
  explicit LoadError(const std::string& what) : Error("load error: " + what, 3) {}
};

}  // namespace opsup
