#pragma once

#include <stdexcept>
#include <string>

namespace evdepth {

// Shape/axis violations in tensor ops.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad argument values (negative eps, unknown mode, ...).
struct ValueError : std::runtime_error {
  explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values or diverging computations.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// File parsing / serialization problems.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace evdepth
