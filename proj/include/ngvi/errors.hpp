#pragma once

#include <stdexcept>
#include <string>

namespace ngvi {

// Configuration / input validation failure. The CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Numeric failure (non-finite values, loss of positive definiteness, ...).
// The CLI maps this to exit code 3.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// File / serialization failure.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace ngvi
