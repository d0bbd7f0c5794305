#pragma once

#include <stdexcept>
#include <string>

namespace warpvos {

// Base class of every error raised by the library. The C API maps each
// subclass onto a status code, and the CLI maps those onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or specification values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. backward() from a non-scalar.
class UsageError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Filesystem and codec failures. Messages always name the file.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace warpvos
