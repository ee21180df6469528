#pragma once

#include <stdexcept>
#include <string>

namespace ndl {

// Error taxonomy shared across the library. The CLI maps these onto exit
// codes: config/usage/shape -> 1, data/format -> 2, numeric -> 3.

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File container problems (bad magic, digest mismatch, truncation).
struct FormatError : DataError {
  using DataError::DataError;
};

// NaN/Inf detected in a place that must stay finite.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse (backward on a non-scalar, missing grad, ...).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ndl
