#pragma once

#include <stdexcept>
#include <string>

namespace cwfalab {

// Shape/rank mismatches and violated call preconditions.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed serialized data: checkpoints, images, manifests.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad user-facing configuration (CLI exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finiteness is required (CLI exit code 3).
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace cwfalab
