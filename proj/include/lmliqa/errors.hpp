#pragma once

#include <stdexcept>
#include <string>

namespace lmliqa {

// Bad input or configuration. Maps to CLI exit status 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Non-finite values or divergence at runtime. Maps to CLI exit status 2.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lmliqa
