#pragma once

#include <stdexcept>
#include <string>

namespace moa {

// Shape/dimension mismatch between tensors (names both shapes in the message).
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Spatial geometry violation: divisibility, grid construction, window fit.
struct GeometryError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// API contract violation: non-scalar loss, double backward, bad keep_prob.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Bad run configuration: unknown preset, unknown key, unparsable value.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// File problems: missing, truncated, unreadable.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Structurally invalid file contents: bad magic, bad record size.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required (NaN loss abort).
struct NumericsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace moa
