#pragma once

#include <stdexcept>
#include <string>

namespace volab {

// Base for all library errors. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by a primitive, a loss, or an optimizer step.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or missing input data, files, or configuration values.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace volab
