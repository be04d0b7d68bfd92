#pragma once

#include <stdexcept>
#include <string>

namespace loma {

// Error taxonomy; the CLI maps these onto exit codes
// (config/io -> 2, geometry/shape -> 3, numeric/state -> 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration values (dims, flags, file formats).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Missing or unreadable files.
class IoError : public Error {
 public:
  using Error::Error;
};

// Violated length/layout constraints (plan_lengths inequalities, capacity).
class GeometryError : public Error {
 public:
  using Error::Error;
};

// Tensor extent mismatches and out-of-range indices.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Runtime numeric failures (degenerate softmax row, divergence).
class NumericError : public Error {
 public:
  using Error::Error;
};

// API misuse detected at runtime (e.g. backward on a consumed graph).
class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace loma
