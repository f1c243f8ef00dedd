#pragma once

#include <stdexcept>
#include <string>

namespace stanet {

// Shape or extent disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite values, zero norms where a direction is required, etc.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Caller violated a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid run configuration or model/params mismatch.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint or dataset files that cannot be read back.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace stanet
