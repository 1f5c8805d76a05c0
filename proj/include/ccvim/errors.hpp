#pragma once

#include <stdexcept>
#include <string>

namespace ccvim {

// Shape or arity mismatch between tensors/maps.
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad build-time configuration: files, hyperparameters, unsupported sizes.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated call contract (value-level preconditions).
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values or failed numeric checks at runtime.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ccvim
