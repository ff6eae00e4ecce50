#pragma once

#include <stdexcept>
#include <string>

namespace kpr {

// Validation and contract failures; the CLI maps these to exit code 1.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between tensors / maps.
struct DimensionError : ValidationError {
  using ValidationError::ValidationError;
};

// Caller violated an operation precondition.
struct ContractError : ValidationError {
  using ValidationError::ValidationError;
};

// Filesystem and format failures; the CLI maps these to exit code 2.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed on-disk payload (bad magic, truncation, ...).
struct FormatError : IoError {
  using IoError::IoError;
};

}  // namespace kpr
