#pragma once

#include <stdexcept>
#include <string>

namespace xcam {

/// Base class for every error raised by the library. The CLI maps each
/// subclass onto a stable process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or layer shapes do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A precondition on an argument value was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A computation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// File missing, unreadable or unwritable.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A file was readable but its content is malformed.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace xcam
