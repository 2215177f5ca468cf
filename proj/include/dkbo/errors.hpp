#pragma once

#include <stdexcept>
#include <string>

namespace dkbo {

// Violated precondition or malformed input.
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Linear-algebra failure that survived all recovery attempts.
struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// A forward-pass node produced NaN.
struct TaintedValueError : std::runtime_error {
  explicit TaintedValueError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad run configuration (CLI or config file).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace dkbo
